//! Image-quality metrics (PSNR, windowed SSIM) and verification metrics
//! (cosine scoring, ROC/AUC/EER), all computed in f64.

pub mod verify;

pub use verify::{
    bicubic_baseline, run_verification, synthesize, write_roc_svg, write_roc_tsv,
    VerificationEmbedder, VerificationReport,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reporting cap: zero-MSE pairs read as 99 dB instead of +∞.
pub const PSNR_CAP_DB: f64 = 99.0;

/// 10·log10(max² / MSE), capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor, b: &Tensor, max_value: f64) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::dim("psnr", format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    if !(max_value > 0.0) {
        return Err(Error::contract(format!("psnr needs a positive peak value, got {max_value}")));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_value * max_value / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Images are stored in [−1,1], so the dynamic range is 2.
pub const SSIM_DYNAMIC_RANGE: f64 = 2.0;

fn ssim_window_1d() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Separable valid-mode correlation of one plane with the Gaussian window.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, &k) in win.iter().enumerate() {
                acc += k * plane[y * w + x + t];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, &k) in win.iter().enumerate() {
                acc += k * rows[(y + t) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean structural similarity over 11×11 Gaussian (σ = 1.5) windows and all
/// leading planes; the trailing two axes are spatial.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::dim("ssim", format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    if a.rank() < 2 {
        return Err(Error::dim("ssim", format!("need spatial axes, got {:?}", a.shape)));
    }
    let (h, w) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!("ssim window is {SSIM_WINDOW}×{SSIM_WINDOW} but image is {h}×{w}")));
    }
    let win = ssim_window_1d();
    let c1 = (SSIM_K1 * SSIM_DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_DYNAMIC_RANGE).powi(2);

    let planes = a.data.len() / (h * w);
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..planes {
        let ap: Vec<f64> = a.data[p * h * w..(p + 1) * h * w].iter().map(|&v| v as f64).collect();
        let bp: Vec<f64> = b.data[p * h * w..(p + 1) * h * w].iter().map(|&v| v as f64).collect();
        let sq = |v: &[f64]| v.iter().map(|&x| x * x).collect::<Vec<f64>>();
        let cross: Vec<f64> = ap.iter().zip(&bp).map(|(&x, &y)| x * y).collect();

        let mu_a = filter_valid(&ap, h, w, &win);
        let mu_b = filter_valid(&bp, h, w, &win);
        let e_aa = filter_valid(&sq(&ap), h, w, &win);
        let e_bb = filter_valid(&sq(&bp), h, w, &win);
        let e_ab = filter_valid(&cross, h, w, &win);

        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// dot(a,b) / (‖a‖‖b‖), clamped to [−1,1] against rounding.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine", format!("{} vs {} components", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: f64 = a.iter().map(|&x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::contract("cosine similarity of a zero vector".to_string()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Genuine (same-identity) and impostor similarity scores.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    fn validate(&self) -> Result<()> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            return Err(Error::contract(format!(
                "ROC needs both classes, got {} genuine / {} impostor scores",
                self.genuine.len(),
                self.impostor.len()
            )));
        }
        if self.genuine.iter().chain(&self.impostor).any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite verification score".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Operating points at every distinct score (accept when score ≥ threshold),
/// plus accept-all and reject-all sentinels one unit past the extremes.
#[derive(Debug, Clone)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// ∫ TPR dFAR by trapezoid; equals the pairwise statistic because the
    /// points cover every distinct threshold.
    pub fn auc_trapezoid(&self) -> f64 {
        let mut total = 0.0;
        for pair in self.points.windows(2) {
            let (p, q) = (pair[0], pair[1]);
            total += (p.far - q.far) * ((1.0 - p.frr) + (1.0 - q.frr)) / 2.0;
        }
        total
    }
}

pub fn roc_curve(scores: &ScoreSet) -> Result<RocCurve> {
    scores.validate()?;
    let mut thresholds: Vec<f64> = scores.genuine.iter().chain(&scores.impostor).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let lo = thresholds[0] - 1.0;
    let hi = thresholds[thresholds.len() - 1] + 1.0;
    thresholds.insert(0, lo);
    thresholds.push(hi);

    let mut genuine = scores.genuine.clone();
    let mut impostor = scores.impostor.clone();
    genuine.sort_by(f64::total_cmp);
    impostor.sort_by(f64::total_cmp);
    let (n, m) = (genuine.len() as f64, impostor.len() as f64);

    let points = thresholds
        .into_iter()
        .map(|t| {
            let accepted_imp = impostor.len() - impostor.partition_point(|&v| v < t);
            let rejected_gen = genuine.partition_point(|&v| v < t);
            RocPoint { threshold: t, far: accepted_imp as f64 / m, frr: rejected_gen as f64 / n }
        })
        .collect();
    Ok(RocCurve { points })
}

/// Mann-Whitney statistic: the fraction of (genuine, impostor) pairs ranked
/// correctly, ties counting one half.
pub fn roc_auc(scores: &ScoreSet) -> Result<f64> {
    scores.validate()?;
    let mut impostor = scores.impostor.clone();
    impostor.sort_by(f64::total_cmp);
    let mut favorable = 0.0f64;
    for &g in &scores.genuine {
        let below = impostor.partition_point(|&v| v < g);
        let not_above = impostor.partition_point(|&v| v <= g);
        favorable += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(favorable / (scores.genuine.len() as f64 * scores.impostor.len() as f64))
}

/// The FAR/FRR crossing with its threshold, linearly interpolated between
/// the two adjacent operating points.
pub fn eer_point(scores: &ScoreSet) -> Result<(f64, f64)> {
    let curve = roc_curve(scores)?;
    let pts = &curve.points;
    // sentinels guarantee FAR−FRR runs from +1 down to −1, so a sign change exists
    for pair in pts.windows(2) {
        let (p, q) = (pair[0], pair[1]);
        let (dp, dq) = (p.far - p.frr, q.far - q.frr);
        if dp >= 0.0 && dq <= 0.0 {
            let alpha = if dp == dq { 0.0 } else { dp / (dp - dq) };
            let eer = p.far + alpha * (q.far - p.far);
            let threshold = p.threshold + alpha * (q.threshold - p.threshold);
            return Ok((eer, threshold));
        }
    }
    unreachable!("sentinel endpoints bracket the crossing");
}

pub fn eer(scores: &ScoreSet) -> Result<f64> {
    eer_point(scores).map(|(v, _)| v)
}
