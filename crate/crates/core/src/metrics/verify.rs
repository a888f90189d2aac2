//! Face-verification protocol: a fixed seeded embedder stands in for a
//! pretrained face network, probes are synthesized from low-resolution
//! thermal inputs, and gallery×probe cosine scores feed the ROC metrics.

use super::{cosine_score, eer_point, psnr, roc_auc, roc_curve, ssim, RocCurve, ScoreSet};
use crate::data::{bicubic_resize, Manifest, Split};
use crate::error::{Error, Result};
use crate::models::Generator;
use crate::nn::{Fwd, Pad};
use crate::reference::{self, Arr};
use crate::tensor::{derive_seed, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fs;
use std::io::Write as _;
use std::path::Path;

pub const EMBEDDING_DIM: usize = 256;

/// Channel widths of the five stride-2 stages.
const STAGE_WIDTHS: [usize; 5] = [16, 32, 64, 96, 128];

/// Fixed random convolutional embedder: five stride-2 3×3 conv+relu stages,
/// global average pooling, and a random projection to a 256-dim unit-norm
/// vector. Runs in straight-line f64 — it has no trainable state and never
/// needs gradients. Identity separation comes from the images, not from
/// learned weights; the acceptance ceiling is measured, not assumed.
pub struct VerificationEmbedder {
    // (kernel, [co,ci,3,3]) per stage
    stages: Vec<(Vec<f64>, Vec<usize>)>,
    // [EMBEDDING_DIM × last_width] row-major
    proj: Vec<f64>,
}

impl VerificationEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xe3, 0));
        let mut stages = Vec::with_capacity(STAGE_WIDTHS.len());
        let mut ci = 3usize;
        for co in STAGE_WIDTHS {
            // variance-preserving scale keeps activations alive through depth
            let dist = Normal::new(0.0, (2.0 / (ci * 9) as f64).sqrt()).expect("finite std");
            let kernel: Vec<f64> = (0..co * ci * 9).map(|_| dist.sample(&mut rng)).collect();
            stages.push((kernel, vec![co, ci, 3, 3]));
            ci = co;
        }
        let dist = Normal::new(0.0, (1.0 / ci as f64).sqrt()).expect("finite std");
        let proj = (0..EMBEDDING_DIM * ci).map(|_| dist.sample(&mut rng)).collect();
        VerificationEmbedder { stages, proj }
    }

    /// [3,h,w] image in [−1,1] → unit-norm 256-vector. Needs h,w ≥ 32 so all
    /// five stages keep at least one site.
    pub fn embed(&self, image: &Tensor) -> Result<Vec<f64>> {
        if image.rank() != 3 || image.shape[0] != 3 {
            return Err(Error::dim("embed", format!("need [3,h,w], got {:?}", image.shape)));
        }
        let (h, w) = (image.shape[1], image.shape[2]);
        if h < 32 || w < 32 {
            return Err(Error::contract(format!("embedder needs at least 32×32 input, got {h}×{w}")));
        }
        let mut x = Arr::from_f32(&[1, 3, h, w], &image.data);
        for (kernel, kshape) in &self.stages {
            x = reference::relu(&reference::conv2d(&x, kernel, kshape, None, 2, Pad::uniform(1)));
        }
        let (c, sites) = (x.shape[1], x.shape[2] * x.shape[3]);
        let pooled: Vec<f64> =
            (0..c).map(|ch| x.data[ch * sites..(ch + 1) * sites].iter().sum::<f64>() / sites as f64).collect();
        let mut e: Vec<f64> = self
            .proj
            .chunks_exact(c)
            .map(|row| row.iter().zip(&pooled).map(|(&a, &b)| a * b).sum())
            .collect();
        let norm = e.iter().map(|&v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::contract("embedding collapsed to zero".to_string()));
        }
        for v in &mut e {
            *v /= norm;
        }
        Ok(e)
    }
}

/// One generator pass in eval mode: [c,h,w] thermal → [3,8h,8w] visible.
pub fn synthesize(gen: &Generator, thermal_lr: &Tensor) -> Result<Tensor> {
    if thermal_lr.rank() != 3 {
        return Err(Error::dim("synthesize", format!("need [c,h,w], got {:?}", thermal_lr.shape)));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(&thermal_lr.shape);
    let batched = Tensor::new(shape, thermal_lr.data.clone())?;
    let mut tape = Tape::new();
    let mut fw = Fwd::eval(&mut tape);
    let x = fw.tape.constant(batched);
    let y = gen.forward(&mut fw, x)?;
    let out = tape.val(y);
    Tensor::new(out.shape[1..].to_vec(), out.data.clone())
}

/// Generator-free fallback: bicubic-upsample the thermal input to the target
/// edge and replicate a single channel to three.
pub fn bicubic_baseline(thermal_lr: &Tensor, out_res: usize) -> Result<Tensor> {
    let up = bicubic_resize(thermal_lr, out_res, out_res)?;
    match up.shape[0] {
        3 => Ok(up),
        1 => {
            let mut data = Vec::with_capacity(3 * up.data.len());
            for _ in 0..3 {
                data.extend_from_slice(&up.data);
            }
            Tensor::new(vec![3, out_res, out_res], data)
        }
        c => Err(Error::dim("baseline", format!("cannot map {c} thermal channels to RGB"))),
    }
}

#[derive(Debug, Clone)]
pub struct VerificationReport {
    pub split: Split,
    pub samples: usize,
    /// Mean over the split, peak value 2 (the [−1,1] range).
    pub psnr: f64,
    pub ssim: f64,
    /// Verification rows exist only when a generator synthesized the probes.
    pub auc: Option<f64>,
    pub eer: Option<f64>,
    pub curve: Option<RocCurve>,
}

impl VerificationReport {
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        let mut rows = vec![
            ("samples", self.samples as f64),
            ("psnr_db", self.psnr),
            ("ssim", self.ssim),
        ];
        if let Some(a) = self.auc {
            rows.push(("auc", a));
        }
        if let Some(e) = self.eer {
            rows.push(("eer", e));
        }
        rows
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        writeln!(f, "metric\tvalue")?;
        writeln!(f, "split\t{}", self.split)?;
        for (k, v) in self.rows() {
            writeln!(f, "{k}\t{v:.6}")?;
        }
        Ok(())
    }
}

/// Synthesize every image of a split, score PSNR/SSIM against ground truth,
/// and — when a generator is present — run the gallery/probe protocol:
/// real visible gallery vs synthesized probes, all pairs scored by cosine.
pub fn run_verification(
    gen: Option<&Generator>,
    manifest: &Manifest,
    dir: &Path,
    embedder: &VerificationEmbedder,
    split: Split,
) -> Result<VerificationReport> {
    let records: Vec<_> = manifest.split_records(split).collect();
    if records.is_empty() {
        return Err(Error::contract(format!("split {split} has no samples")));
    }
    let out_res = 8 * manifest.base_resolution;

    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    // synthesized outputs, reused below as probe images
    let mut synthesized = std::collections::HashMap::new();
    for rec in &records {
        let pair = manifest.load_sample(dir, rec)?;
        let output = match gen {
            Some(g) => synthesize(g, &pair.thermal_lr)?,
            None => bicubic_baseline(&pair.thermal_lr, out_res)?,
        };
        psnr_sum += psnr(&output, &pair.visible, 2.0)?;
        ssim_sum += ssim(&output, &pair.visible)?;
        synthesized.insert((rec.identity, rec.variant), output);
    }
    let n = records.len() as f64;

    let mut report = VerificationReport {
        split,
        samples: records.len(),
        psnr: psnr_sum / n,
        ssim: ssim_sum / n,
        auc: None,
        eer: None,
        curve: None,
    };
    if gen.is_none() {
        return Ok(report);
    }

    let mut gallery = Vec::new();
    for rec in manifest.gallery(split) {
        let pair = manifest.load_sample(dir, rec)?;
        gallery.push((rec.identity, embedder.embed(&pair.visible)?));
    }
    let mut scores = ScoreSet::default();
    for rec in manifest.probes(split) {
        let probe = embedder.embed(&synthesized[&(rec.identity, rec.variant)])?;
        for (gallery_id, gallery_emb) in &gallery {
            let s = cosine_score(&probe, gallery_emb)?;
            if *gallery_id == rec.identity {
                scores.genuine.push(s);
            } else {
                scores.impostor.push(s);
            }
        }
    }
    report.auc = Some(roc_auc(&scores)?);
    report.eer = Some(eer_point(&scores)?.0);
    report.curve = Some(roc_curve(&scores)?);
    Ok(report)
}

pub fn write_roc_tsv(curve: &RocCurve, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "threshold\tfar\tfrr")?;
    for p in &curve.points {
        writeln!(f, "{:.9}\t{:.9}\t{:.9}", p.threshold, p.far, p.frr)?;
    }
    Ok(())
}

/// Minimal self-contained ROC plot (TPR over FAR) with a chance diagonal.
pub fn write_roc_svg(curve: &RocCurve, path: &Path) -> Result<()> {
    const SIZE: f64 = 400.0;
    const MARGIN: f64 = 40.0;
    let sx = |v: f64| MARGIN + v * (SIZE - 2.0 * MARGIN);
    let sy = |v: f64| SIZE - MARGIN - v * (SIZE - 2.0 * MARGIN);
    let pts: String = curve
        .points
        .iter()
        .rev() // ascending FAR
        .map(|p| format!("{:.2},{:.2} ", sx(p.far), sy(1.0 - p.frr)))
        .collect();
    let mut f = fs::File::create(path)?;
    writeln!(f, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}">"#)?;
    writeln!(f, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#)?;
    writeln!(
        f,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="silver" stroke-dasharray="4"/>"#,
        sx(0.0),
        sy(0.0),
        sx(1.0),
        sy(1.0)
    )?;
    writeln!(f, r#"<polyline points="{}" fill="none" stroke="crimson" stroke-width="1.5"/>"#, pts.trim())?;
    writeln!(
        f,
        r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        sx(0.0),
        sy(1.0),
        SIZE - 2.0 * MARGIN,
        SIZE - 2.0 * MARGIN
    )?;
    writeln!(f, r#"<text x="{}" y="{}" font-size="12">FAR</text>"#, sx(0.45), sy(0.0) + 28.0)?;
    writeln!(f, r#"<text x="{}" y="{}" font-size="12" transform="rotate(-90 14 {})">TPR</text>"#, 14.0, sy(0.45), sy(0.45))?;
    writeln!(f, "</svg>")?;
    Ok(())
}
