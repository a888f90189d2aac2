//! Separable cubic-convolution resampling with the a = −0.5 kernel,
//! half-pixel phase, symmetric edge reflection, and antialias kernel
//! widening when shrinking — the conventions of MATLAB's `imresize`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Keys cubic kernel, a = −0.5. Support [−2, 2]; interpolating (W(0)=1,
/// W(±1)=W(±2)=0) and reproduces constants exactly.
pub fn cubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        (1.5 * x - 2.5) * x * x + 1.0
    } else if x < 2.0 {
        ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0
    } else {
        0.0
    }
}

/// Reflect an out-of-range index into [0, n) mirroring at the edges
/// (…, 1, 0 | 0, 1, …, n−1 | n−1, n−2, …).
fn reflect(mut j: i64, n: i64) -> usize {
    loop {
        if j < 0 {
            j = -j - 1;
        } else if j >= n {
            j = 2 * n - 1 - j;
        } else {
            return j as usize;
        }
    }
}

struct AxisPlan {
    taps: usize,
    // per output position: first source index (pre-reflection) and weights
    starts: Vec<i64>,
    weights: Vec<f64>,
}

fn plan_axis(in_len: usize, out_len: usize) -> AxisPlan {
    let scale = out_len as f64 / in_len as f64;
    // shrinking stretches the kernel by 1/scale for antialiasing
    let (kscale, support) = if scale < 1.0 { (scale, 2.0 / scale) } else { (1.0, 2.0) };
    let taps = support.ceil() as usize * 2 + 1;
    let mut starts = Vec::with_capacity(out_len);
    let mut weights = vec![0.0f64; out_len * taps];
    for i in 0..out_len {
        let u = (i as f64 + 0.5) / scale - 0.5;
        let first = (u - support).ceil() as i64;
        starts.push(first);
        let row = &mut weights[i * taps..(i + 1) * taps];
        let mut total = 0.0;
        for (t, w) in row.iter_mut().enumerate() {
            *w = kscale * cubic_kernel(kscale * (u - (first + t as i64) as f64));
            total += *w;
        }
        // the stretched kernel is only an approximate partition of unity
        for w in row.iter_mut() {
            *w /= total;
        }
    }
    AxisPlan { taps, starts, weights }
}

fn resample_rows(src: &[f64], h: usize, w: usize, plan: &AxisPlan, out_h: usize) -> Vec<f64> {
    let n = h as i64;
    let mut out = vec![0.0f64; out_h * w];
    for (i, row) in out.chunks_exact_mut(w).enumerate() {
        let ws = &plan.weights[i * plan.taps..(i + 1) * plan.taps];
        for (t, &wt) in ws.iter().enumerate() {
            let j = reflect(plan.starts[i] + t as i64, n);
            let src_row = &src[j * w..(j + 1) * w];
            for (o, &s) in row.iter_mut().zip(src_row) {
                *o += wt * s;
            }
        }
    }
    out
}

fn resample_cols(src: &[f64], h: usize, w: usize, plan: &AxisPlan, out_w: usize) -> Vec<f64> {
    let n = w as i64;
    let mut out = vec![0.0f64; h * out_w];
    for y in 0..h {
        let src_row = &src[y * w..(y + 1) * w];
        let out_row = &mut out[y * out_w..(y + 1) * out_w];
        for (i, o) in out_row.iter_mut().enumerate() {
            let ws = &plan.weights[i * plan.taps..(i + 1) * plan.taps];
            let mut acc = 0.0;
            for (t, &wt) in ws.iter().enumerate() {
                acc += wt * src_row[reflect(plan.starts[i] + t as i64, n)];
            }
            *o = acc;
        }
    }
    out
}

/// Resize the trailing two axes of a [c,h,w] or [n,c,h,w] tensor.
/// Accumulation runs in f64 and each output sample's weights are normalized,
/// so constants survive any resize exactly up to f32 rounding.
pub fn bicubic_resize(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let r = img.rank();
    if r != 3 && r != 4 {
        return Err(Error::dim("bicubic_resize", format!("need [c,h,w] or [n,c,h,w], got {:?}", img.shape)));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("bicubic_resize", "output extents must be at least 1".to_string()));
    }
    let (h, w) = (img.shape[r - 2], img.shape[r - 1]);
    let planes: usize = img.shape[..r - 2].iter().product();
    let row_plan = plan_axis(h, out_h);
    let col_plan = plan_axis(w, out_w);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let src: Vec<f64> = img.data[p * h * w..(p + 1) * h * w].iter().map(|&v| v as f64).collect();
        let tall = resample_rows(&src, h, w, &row_plan, out_h);
        let full = resample_cols(&tall, out_h, w, &col_plan, out_w);
        out.extend(full.into_iter().map(|v| v as f32));
    }
    let mut shape = img.shape[..r - 2].to_vec();
    shape.push(out_h);
    shape.push(out_w);
    Tensor::new(shape, out)
}

/// Width-axis mirror of the trailing axis of a [c,h,w] or [n,c,h,w] tensor.
pub fn horizontal_flip(img: &Tensor) -> Result<Tensor> {
    let r = img.rank();
    if r != 3 && r != 4 {
        return Err(Error::dim("horizontal_flip", format!("need [c,h,w] or [n,c,h,w], got {:?}", img.shape)));
    }
    let w = img.shape[r - 1];
    let mut out = img.data.clone();
    for row in out.chunks_exact_mut(w) {
        row.reverse();
    }
    Tensor::new(img.shape.clone(), out)
}
