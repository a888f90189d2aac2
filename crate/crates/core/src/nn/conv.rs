use super::Fwd;
use crate::error::{Error, Result};
use crate::tensor::{Param, TapeOp, Tensor, TensorId, ValRef};
use rand::Rng;

/// Per-side spatial padding; asymmetric right/bottom padding keeps even
/// extents under k=4 stride-1 convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pad {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad {
    pub fn uniform(p: usize) -> Self {
        Pad { top: p, bottom: p, left: p, right: p }
    }

    pub fn asym(low: usize, high: usize) -> Self {
        Pad { top: low, bottom: high, left: low, right: high }
    }
}

/// Half-open range of positions e where 0 ≤ e·s + k − pad < extent,
/// clamped to [0, e_max) and ordered (lo ≤ hi).
fn valid_range(extent: usize, k: usize, stride: usize, pad: usize, e_max: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride).min(e_max);
    let hi = if extent + pad > k {
        ((extent + pad - k - 1) / stride + 1).min(e_max)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// cols[(c,ky,kx), (ey,ex)] = src[c, ey·s+ky−pad_t, ex·s+kx−pad_l], 0 outside.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    src: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_t: usize,
    pad_l: usize,
    eh: usize,
    ew: usize,
    cols: &mut [f32],
) {
    debug_assert_eq!(cols.len(), c * kh * kw * eh * ew);
    let plane = eh * ew;
    for ci in 0..c {
        let src_c = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let out_row = &mut cols[row * plane..(row + 1) * plane];
                for ey in 0..eh {
                    let y = (ey * stride + ky) as isize - pad_t as isize;
                    let dst = &mut out_row[ey * ew..(ey + 1) * ew];
                    if y < 0 || y >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &src_c[y as usize * w..(y as usize + 1) * w];
                    let (lo, hi) = valid_range(w, kx, stride, pad_l, ew);
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    if stride == 1 {
                        let x0 = lo + kx - pad_l;
                        dst[lo..hi].copy_from_slice(&src_row[x0..x0 + hi - lo]);
                    } else {
                        for (ex, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src_row[(lo + ex) * stride + kx - pad_l];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add cols back into the image.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_t: usize,
    pad_l: usize,
    eh: usize,
    ew: usize,
    dst: &mut [f32],
) {
    debug_assert_eq!(cols.len(), c * kh * kw * eh * ew);
    debug_assert_eq!(dst.len(), c * h * w);
    let plane = eh * ew;
    for ci in 0..c {
        let dst_c = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src_row = &cols[row * plane..(row + 1) * plane];
                for ey in 0..eh {
                    let y = (ey * stride + ky) as isize - pad_t as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst_c[y as usize * w..(y as usize + 1) * w];
                    let (lo, hi) = valid_range(w, kx, stride, pad_l, ew);
                    if stride == 1 && hi > lo {
                        let x0 = lo + kx - pad_l;
                        for (d, s) in dst_row[x0..x0 + hi - lo].iter_mut().zip(&src_row[ey * ew + lo..ey * ew + hi]) {
                            *d += s;
                        }
                    } else {
                        for ex in lo..hi {
                            dst_row[ex * stride + kx - pad_l] += src_row[ey * ew + ex];
                        }
                    }
                }
            }
        }
    }
}

fn conv_extent(in_: usize, k: usize, stride: usize, pad_lo: usize, pad_hi: usize) -> Result<usize> {
    let padded = in_ + pad_lo + pad_hi;
    if padded < k {
        return Err(Error::dim("conv2d", format!("kernel {k} exceeds padded extent {padded}")));
    }
    Ok((padded - k) / stride + 1)
}

/// 2D convolution over [n,c,h,w], kernel [out_ch,in_ch,kh,kw].
pub struct Conv2d {
    pub kernel: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: Pad,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_pad(in_ch, out_ch, k, stride, Pad::uniform(padding), bias, rng)
    }

    pub fn with_pad(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: Pad,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let kernel = Param::new(Tensor::randn(&[out_ch, in_ch, k, k], 0.02, rng));
        let bias = bias.then(|| Param::new(Tensor::zeros(&[out_ch])));
        Conv2d { kernel, bias, stride, pad }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn forward(&self, fw: &mut Fwd, x: TensorId) -> Result<TensorId> {
        let w = fw.leaf(&self.kernel);
        self.forward_with(fw, x, w)
    }

    /// Forward with an externally prepared weight (e.g. spectral-normalized).
    pub fn forward_with(&self, fw: &mut Fwd, x: TensorId, w: TensorId) -> Result<TensorId> {
        let mut inputs = vec![x, w];
        if let Some(b) = &self.bias {
            inputs.push(fw.leaf(b));
        }
        let out = {
            let vals: Vec<ValRef<'_>> = inputs.iter().map(|&i| fw.tape.val(i)).collect();
            conv2d_eval(&vals[0], &vals[1], vals.get(2).map(|v| &**v), self.stride, self.pad)?
        };
        fw.tape.record(Box::new(Conv2dOp { stride: self.stride, pad: self.pad }), inputs, out)
    }
}

fn conv2d_eval(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: Pad,
) -> Result<Tensor> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(Error::dim("conv2d", format!("need [n,c,h,w] input and [o,i,kh,kw] kernel, got {:?} / {:?}", x.shape, w.shape)));
    }
    let (n, c, h, ww) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oc, ic, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    if c != ic {
        return Err(Error::dim("conv2d", format!("input has {c} channels, kernel expects {ic}")));
    }
    let oh = conv_extent(h, kh, stride, pad.top, pad.bottom)?;
    let ow = conv_extent(ww, kw, stride, pad.left, pad.right)?;
    let mut out = vec![0.0f32; n * oc * oh * ow];
    let mut cols = vec![0.0f32; c * kh * kw * oh * ow];
    for i in 0..n {
        let xi = &x.data[i * c * h * ww..(i + 1) * c * h * ww];
        im2col(xi, c, h, ww, kh, kw, stride, pad.top, pad.left, oh, ow, &mut cols);
        let oi = &mut out[i * oc * oh * ow..(i + 1) * oc * oh * ow];
        crate::tensor::gemm_into(oc, c * kh * kw, oh * ow, &w.data, &cols, oi);
        if let Some(b) = b {
            for co in 0..oc {
                let bv = b.data[co];
                for v in &mut oi[co * oh * ow..(co + 1) * oh * ow] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(vec![n, oc, oh, ow], out)
}

struct Conv2dOp {
    stride: usize,
    pad: Pad,
}

impl TapeOp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[ValRef<'_>],
        output: &Tensor,
        out_grad: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        let (n, c, h, ww) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (oc, _, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
        let (oh, ow) = (output.shape[2], output.shape[3]);
        let ckk = c * kh * kw;
        let plane = oh * ow;

        let mut dx = needs[0].then(|| vec![0.0f32; x.numel()]);
        let mut dw = needs[1].then(|| vec![0.0f32; w.numel()]);
        let mut db = needs.get(2).copied().unwrap_or(false).then(|| vec![0.0f32; oc]);

        let mut cols = vec![0.0f32; ckk * plane];
        for i in 0..n {
            let gi = &out_grad[i * oc * plane..(i + 1) * oc * plane];
            if let Some(dw) = dw.as_mut() {
                let xi = &x.data[i * c * h * ww..(i + 1) * c * h * ww];
                im2col(xi, c, h, ww, kh, kw, self.stride, self.pad.top, self.pad.left, oh, ow, &mut cols);
                // dW += dY · colsᵀ
                crate::tensor::sgemm_acc(
                    oc, plane, ckk, gi, plane as isize, 1, &cols, 1, plane as isize, dw,
                    ckk as isize, 1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                // dcols = Wᵀ · dY, then scatter back to the image
                crate::tensor::sgemm_overwrite(
                    ckk, oc, plane, &w.data, 1, ckk as isize, gi, plane as isize, 1, &mut cols,
                    plane as isize, 1,
                );
                let dxi = &mut dx[i * c * h * ww..(i + 1) * c * h * ww];
                col2im(&cols, c, h, ww, kh, kw, self.stride, self.pad.top, self.pad.left, oh, ow, dxi);
            }
            if let Some(db) = db.as_mut() {
                for co in 0..oc {
                    let s: f32 = gi[co * plane..(co + 1) * plane].iter().sum();
                    db[co] += s;
                }
            }
        }
        let mut grads = vec![dx, dw];
        if needs.len() > 2 {
            grads.push(db);
        }
        grads
    }
}

/// Transposed convolution; kernel stored [out_ch,in_ch,kh,kw] like `Conv2d`
/// so spectral normalization reshapes both the same way.
pub struct TransposedConv2d {
    pub kernel: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl TransposedConv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let kernel = Param::new(Tensor::randn(&[out_ch, in_ch, k, k], 0.02, rng));
        let bias = bias.then(|| Param::new(Tensor::zeros(&[out_ch])));
        TransposedConv2d { kernel, bias, stride, padding, output_padding }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn forward(&self, fw: &mut Fwd, x: TensorId) -> Result<TensorId> {
        let w = fw.leaf(&self.kernel);
        self.forward_with(fw, x, w)
    }

    pub fn forward_with(&self, fw: &mut Fwd, x: TensorId, w: TensorId) -> Result<TensorId> {
        let mut inputs = vec![x, w];
        if let Some(b) = &self.bias {
            inputs.push(fw.leaf(b));
        }
        let op = DeconvOp { stride: self.stride, padding: self.padding, output_padding: self.output_padding };
        let out = {
            let vals: Vec<ValRef<'_>> = inputs.iter().map(|&i| fw.tape.val(i)).collect();
            deconv_eval(&vals[0], &vals[1], vals.get(2).map(|v| &**v), &op)?
        };
        fw.tape.record(Box::new(op), inputs, out)
    }
}

/// [o,i,kh,kw] → [o·kh·kw, i], the layout both deconv gemms consume.
fn permute_kernel(w: &Tensor) -> Vec<f32> {
    let (oc, ic, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    let mut wp = vec![0.0f32; w.numel()];
    for o in 0..oc {
        for i in 0..ic {
            for t in 0..kh * kw {
                wp[(o * kh * kw + t) * ic + i] = w.data[(o * ic + i) * kh * kw + t];
            }
        }
    }
    wp
}

fn deconv_eval(x: &Tensor, w: &Tensor, b: Option<&Tensor>, op: &DeconvOp) -> Result<Tensor> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(Error::dim("transposed_conv2d", format!("need [n,c,h,w] input and [o,i,kh,kw] kernel, got {:?} / {:?}", x.shape, w.shape)));
    }
    let (n, c, ih, iw) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oc, ic, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    if c != ic {
        return Err(Error::dim("transposed_conv2d", format!("input has {c} channels, kernel expects {ic}")));
    }
    let (s, p, opad) = (op.stride, op.padding, op.output_padding);
    let oh = (ih - 1) * s + kh + opad;
    let ow = (iw - 1) * s + kw + opad;
    if oh < 2 * p || ow < 2 * p {
        return Err(Error::dim("transposed_conv2d", "padding exceeds output extent"));
    }
    let (oh, ow) = (oh - 2 * p, ow - 2 * p);
    let wp = permute_kernel(w);
    let okk = oc * kh * kw;
    let mut out = vec![0.0f32; n * oc * oh * ow];
    let mut cols = vec![0.0f32; okk * ih * iw];
    for i in 0..n {
        let xi = &x.data[i * c * ih * iw..(i + 1) * c * ih * iw];
        // cols[(co,ky,kx), (iy,ix)] = Σ_ci W[co,ci,ky,kx]·x[ci,iy,ix]
        crate::tensor::sgemm_overwrite(
            okk, c, ih * iw, &wp, c as isize, 1, xi, (ih * iw) as isize, 1, &mut cols,
            (ih * iw) as isize, 1,
        );
        let oi = &mut out[i * oc * oh * ow..(i + 1) * oc * oh * ow];
        col2im(&cols, oc, oh, ow, kh, kw, s, p, p, ih, iw, oi);
        if let Some(b) = b {
            for co in 0..oc {
                let bv = b.data[co];
                for v in &mut oi[co * oh * ow..(co + 1) * oh * ow] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(vec![n, oc, oh, ow], out)
}

struct DeconvOp {
    stride: usize,
    padding: usize,
    output_padding: usize,
}

impl TapeOp for DeconvOp {
    fn name(&self) -> &'static str {
        "transposed_conv2d"
    }

    fn backward(
        &self,
        inputs: &[ValRef<'_>],
        output: &Tensor,
        out_grad: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        let (n, c, ih, iw) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (oc, _, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
        let (oh, ow) = (output.shape[2], output.shape[3]);
        let okk = oc * kh * kw;
        let plane = ih * iw;

        let mut dx = needs[0].then(|| vec![0.0f32; x.numel()]);
        let mut dwp = needs[1].then(|| vec![0.0f32; w.numel()]);
        let mut db = needs.get(2).copied().unwrap_or(false).then(|| vec![0.0f32; oc]);
        let wp = needs[0].then(|| permute_kernel(w));

        let mut cols = vec![0.0f32; okk * plane];
        for i in 0..n {
            let gi = &out_grad[i * oc * oh * ow..(i + 1) * oc * oh * ow];
            // cols of the output gradient under the deconv index map
            im2col(gi, oc, oh, ow, kh, kw, self.stride, self.padding, self.padding, ih, iw, &mut cols);
            if let Some(dx) = dx.as_mut() {
                // dX = Wpᵀ · cols
                let dxi = &mut dx[i * c * plane..(i + 1) * c * plane];
                crate::tensor::sgemm_overwrite(
                    c, okk, plane, wp.as_ref().unwrap(), 1, c as isize, &cols, plane as isize, 1,
                    dxi, plane as isize, 1,
                );
            }
            if let Some(dwp) = dwp.as_mut() {
                // dWp += cols · Xᵀ
                let xi = &x.data[i * c * plane..(i + 1) * c * plane];
                crate::tensor::sgemm_acc(
                    okk, plane, c, &cols, plane as isize, 1, xi, 1, plane as isize, dwp,
                    c as isize, 1,
                );
            }
            if let Some(db) = db.as_mut() {
                for co in 0..oc {
                    let s: f32 = gi[co * oh * ow..(co + 1) * oh * ow].iter().sum();
                    db[co] += s;
                }
            }
        }
        // unpermute [o·kh·kw, i] back to [o,i,kh,kw]
        let dw = dwp.map(|dwp| {
            let ic = c;
            let mut dw = vec![0.0f32; oc * ic * kh * kw];
            for o in 0..oc {
                for ci in 0..ic {
                    for t in 0..kh * kw {
                        dw[(o * ic + ci) * kh * kw + t] = dwp[(o * kh * kw + t) * ic + ci];
                    }
                }
            }
            dw
        });
        let mut grads = vec![dx, dw];
        if needs.len() > 2 {
            grads.push(db);
        }
        grads
    }
}
