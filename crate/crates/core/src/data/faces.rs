//! Procedural face-like images with per-identity geometry and a derived
//! thermal modality. Stand-in imagery: verification must be solvable from
//! geometry (inter-identity variance well above per-variant jitter) without
//! being trivial.

use crate::error::{Error, Result};
use crate::tensor::{derive_seed, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Geometry and shading of one synthetic subject, deterministic in
/// (dataset seed, identity).
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityParams {
    pub id: u32,
    // all in units of the image extent
    pub center: (f32, f32),
    pub head_axes: (f32, f32),
    pub eye_dx: f32,
    pub eye_dy: f32,
    pub eye_r: f32,
    pub mouth_dy: f32,
    pub mouth_half_w: f32,
    pub mouth_half_h: f32,
    pub skin: f32,
    pub tint: [f32; 3],
}

impl IdentityParams {
    pub fn sample(seed: u64, id: u32) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1d, id as u64));
        IdentityParams {
            id,
            center: (0.5 + r.random_range(-0.04..0.04), 0.5 + r.random_range(-0.04..0.04)),
            head_axes: (r.random_range(0.26..0.36), r.random_range(0.34..0.44)),
            eye_dx: r.random_range(0.09..0.16),
            eye_dy: -r.random_range(0.08..0.16),
            eye_r: r.random_range(0.025..0.05),
            mouth_dy: r.random_range(0.12..0.2),
            mouth_half_w: r.random_range(0.07..0.15),
            mouth_half_h: r.random_range(0.018..0.045),
            skin: r.random_range(0.15..0.65),
            tint: [
                r.random_range(-0.12..0.2),
                r.random_range(-0.12..0.12),
                r.random_range(-0.2..0.12),
            ],
        }
    }
}

const BACKGROUND: f32 = -0.85;

/// 0→1 ramp over [-edge, +edge] of a signed distance, for ~2 px soft borders.
fn coverage(signed_dist: f32, edge: f32) -> f32 {
    let t = ((edge - signed_dist) / (2.0 * edge)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Approximate signed distance (px) to an axis-aligned ellipse boundary;
/// negative inside.
fn ellipse_dist(x: f32, y: f32, cx: f32, cy: f32, ax: f32, ay: f32) -> f32 {
    let q = ((x - cx) / ax).powi(2) + ((y - cy) / ay).powi(2);
    (q.sqrt() - 1.0) * ax.min(ay)
}

/// Render one variant of a subject as a [3,res,res] image in [−1,1].
/// Variants jitter brightness and translation only; geometry is identity.
pub fn render_identity(params: &IdentityParams, variant: u32, res: usize, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7a, ((params.id as u64) << 16) | variant as u64));
    let brightness = 1.0 + r.random_range(-0.08..0.08f32);
    let shift_x = r.random_range(-2.0..2.0f32);
    let shift_y = r.random_range(-2.0..2.0f32);

    let s = res as f32;
    let cx = params.center.0 * s + shift_x;
    let cy = params.center.1 * s + shift_y;
    let (ax, ay) = (params.head_axes.0 * s, params.head_axes.1 * s);
    let edge = 1.5f32;

    let mut data = vec![0.0f32; 3 * res * res];
    let plane = res * res;
    for py in 0..res {
        for px in 0..res {
            let (x, y) = (px as f32 + 0.5, py as f32 + 0.5);
            let head = coverage(ellipse_dist(x, y, cx, cy, ax, ay), edge);
            let eyes = coverage(
                ellipse_dist(x, y, cx - params.eye_dx * s, cy + params.eye_dy * s, params.eye_r * s, params.eye_r * s),
                edge,
            )
            .max(coverage(
                ellipse_dist(x, y, cx + params.eye_dx * s, cy + params.eye_dy * s, params.eye_r * s, params.eye_r * s),
                edge,
            ));
            let mouth = coverage(
                ellipse_dist(x, y, cx, cy + params.mouth_dy * s, params.mouth_half_w * s, params.mouth_half_h * s),
                edge,
            );
            for c in 0..3 {
                let skin = (params.skin * (1.0 + params.tint[c])) * brightness;
                let mut v = BACKGROUND + (skin - BACKGROUND) * head;
                // features darken the skin they sit on
                v += (-0.75 - v) * eyes * head;
                v += (-0.45 - v) * mouth * head;
                data[c * plane + py * res + px] = v.clamp(-1.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, res, res], data).expect("render buffer matches its shape")
}

/// Luma collapse, monotone tanh remap, Gaussian blur (σ = 1), and seeded
/// noise (σ = 0.02). With `channels` = 3 the remap gain/offset differ per
/// channel, giving three correlated planes.
pub fn derive_thermal(visible: &Tensor, channels: usize, seed: u64) -> Result<Tensor> {
    if visible.rank() != 3 || visible.shape[0] != 3 {
        return Err(Error::dim("derive_thermal", format!("need [3,h,w] visible, got {:?}", visible.shape)));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::config(format!("thermal channels must be 1 or 3, got {channels}")));
    }
    let (h, w) = (visible.shape[1], visible.shape[2]);
    let plane = h * w;
    let luma: Vec<f32> = (0..plane)
        .map(|i| {
            0.299 * visible.data[i] + 0.587 * visible.data[plane + i] + 0.114 * visible.data[2 * plane + i]
        })
        .collect();

    // (gain, offset) per emitted channel
    let remaps: &[(f32, f32)] = if channels == 1 { &[(1.5, 0.3)] } else { &[(1.5, 0.3), (1.2, 0.0), (0.8, -0.2)] };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7e, 0));
    let noise = Normal::new(0.0f32, 0.02).expect("fixed finite std");
    let mut out = Vec::with_capacity(channels * plane);
    for &(gain, offset) in remaps {
        let mapped: Vec<f32> = luma.iter().map(|&l| (gain * l + offset).tanh()).collect();
        let blurred = gaussian_blur(&mapped, h, w, 1.0);
        out.extend(blurred.into_iter().map(|v| (v + noise.sample(&mut rng)).clamp(-1.0, 1.0)));
    }
    Tensor::new(vec![channels, h, w], out)
}

/// Separable Gaussian with reflection at the edges, truncated at 3σ.
pub fn gaussian_blur(src: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for t in -radius..=radius {
        kernel.push((-0.5 * (t as f32 / sigma).powi(2)).exp());
    }
    let total: f32 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }
    let reflect = |j: i64, n: i64| -> usize {
        let mut j = j;
        loop {
            if j < 0 {
                j = -j - 1;
            } else if j >= n {
                j = 2 * n - 1 - j;
            } else {
                return j as usize;
            }
        }
    };
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &k) in kernel.iter().enumerate() {
                acc += k * src[y * w + reflect(x as i64 + t as i64 - radius, w as i64)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &k) in kernel.iter().enumerate() {
                acc += k * tmp[reflect(y as i64 + t as i64 - radius, h as i64) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}
