//! Position-sensitive attention along one spatial axis, the residual block
//! that applies it to height then width, and a quadratic all-pairs oracle.
//!
//! For the width axis the layer computes, per head and per row i,
//!
//!   y_ij = Σ_w softmax_w(q_ijᵀk_iw + q_ijᵀr^q_{j−w} + k_iwᵀr^k_{j−w}) · (v_iw + r^v_{j−w})
//!
//! with learned relative-offset tables r^q, r^k, r^v; the height axis is the
//! transpose-symmetric computation. Logits are unscaled by default; a flag
//! enables 1/√d_qk scaling for experiments.

use std::cell::{Cell, RefCell};

use rand::Rng;

use super::{BatchNorm2d, Conv2d, Fwd};
use crate::error::{Error, Result};
use crate::tensor::{Param, Tape, TapeOp, Tensor, TensorId, ValRef};

thread_local! {
    static ATTN_MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulate count of all attention cores run on this thread since
/// the last reset. Projection convolutions are not included, so the count
/// scales exactly with the attended sequence lengths.
pub fn attention_mac_count() -> u64 {
    ATTN_MACS.with(|c| c.get())
}

pub fn reset_attention_mac_count() {
    ATTN_MACS.with(|c| c.set(0));
}

fn add_macs(n: u64) {
    ATTN_MACS.with(|c| c.set(c.get() + n));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Height,
    Width,
}

/// Attention weights and the value vectors they mix, captured outside the
/// tape for inspection. Layout notes are on each field.
pub struct AxialTrace {
    pub batch: usize,
    pub heads: usize,
    /// Extent of the non-attended axis.
    pub other: usize,
    /// Extent of the attended axis.
    pub len: usize,
    pub d_v: usize,
    /// `[batch, head, other, query, key]`, rows sum to 1.
    pub weights: Vec<f32>,
    /// `v + r^v` per (query, key) pair: `[batch, head, other, query, key, d_v]`.
    pub combined: Vec<f32>,
    /// Mixed per-head outputs before the output projection:
    /// `[batch, head, other, query, d_v]`.
    pub mixed: Vec<f32>,
}

struct AttnDims {
    b: usize,
    h: usize,
    w: usize,
    other: usize,
    len: usize,
}

/// Fused attention core over one axis. Inputs: q, k, v feature maps and the
/// three positional tables. Softmax weights are cached at forward time and
/// reused by the hand-derived backward.
struct AxialAttnOp {
    axis: Axis,
    heads: usize,
    d_qk: usize,
    d_v: usize,
    max_len: usize,
    scale: f32,
    weights: RefCell<Vec<f32>>,
}

impl AxialAttnOp {
    fn dims(&self, q: &Tensor) -> AttnDims {
        let (b, h, w) = (q.shape[0], q.shape[2], q.shape[3]);
        let (other, len) = match self.axis {
            Axis::Width => (h, w),
            Axis::Height => (w, h),
        };
        AttnDims { b, h, w, other, len }
    }

    #[inline]
    fn flat(&self, dm: &AttnDims, io: usize, s: usize) -> usize {
        match self.axis {
            Axis::Width => io * dm.w + s,
            Axis::Height => s * dm.w + io,
        }
    }

    /// Copy the per-(batch, head, other) sequence into `[s][d]` layout.
    fn pack(&self, dm: &AttnDims, x: &Tensor, d: usize, n: usize, hd: usize, io: usize, out: &mut [f32]) {
        let hw = dm.h * dm.w;
        let ch_total = x.shape[1];
        for dd in 0..d {
            let base = (n * ch_total + hd * d + dd) * hw;
            for s in 0..dm.len {
                out[s * d + dd] = x.data[base + self.flat(dm, io, s)];
            }
        }
    }

    fn eval(&self, q: &Tensor, k: &Tensor, v: &Tensor, rq: &Tensor, rk: &Tensor, rv: &Tensor, trace: Option<&mut AxialTrace>) -> Result<Tensor> {
        let dm = self.dims(q);
        let (dqk, dv, heads) = (self.d_qk, self.d_v, self.heads);
        let l = dm.len;
        let off = self.max_len - 1; // table index of offset 0
        let table_w = 2 * self.max_len - 1;
        let mut out = Tensor::zeros(&[dm.b, heads * dv, dm.h, dm.w]);
        let mut weights = vec![0.0f32; dm.b * heads * dm.other * l * l];

        let mut ql = vec![0.0f32; l * dqk];
        let mut kl = vec![0.0f32; l * dqk];
        let mut vl = vec![0.0f32; l * dv];
        let mut logits = vec![0.0f32; l * l];
        let mut trace = trace;
        for n in 0..dm.b {
            for hd in 0..heads {
                let rq_h = &rq.data[hd * dqk * table_w..(hd + 1) * dqk * table_w];
                let rk_h = &rk.data[hd * dqk * table_w..(hd + 1) * dqk * table_w];
                let rv_h = &rv.data[hd * dv * table_w..(hd + 1) * dv * table_w];
                for io in 0..dm.other {
                    self.pack(&dm, q, dqk, n, hd, io, &mut ql);
                    self.pack(&dm, k, dqk, n, hd, io, &mut kl);
                    self.pack(&dm, v, dv, n, hd, io, &mut vl);
                    for j in 0..l {
                        let qj = &ql[j * dqk..(j + 1) * dqk];
                        for w in 0..l {
                            let kw = &kl[w * dqk..(w + 1) * dqk];
                            let o = j + off - w;
                            let mut acc = 0.0f32;
                            for dd in 0..dqk {
                                acc += qj[dd] * (kw[dd] + rq_h[dd * table_w + o]) + kw[dd] * rk_h[dd * table_w + o];
                            }
                            logits[j * l + w] = acc * self.scale;
                        }
                    }
                    let wslice = {
                        let base = ((n * heads + hd) * dm.other + io) * l * l;
                        &mut weights[base..base + l * l]
                    };
                    for j in 0..l {
                        softmax_row(&logits[j * l..(j + 1) * l], &mut wslice[j * l..(j + 1) * l]);
                    }
                    for j in 0..l {
                        let mut acc = vec![0.0f32; dv];
                        for w in 0..l {
                            let a = wslice[j * l + w];
                            let o = j + off - w;
                            for dd in 0..dv {
                                acc[dd] += a * (vl[w * dv + dd] + rv_h[dd * table_w + o]);
                            }
                        }
                        for dd in 0..dv {
                            let c = hd * dv + dd;
                            out.data[(n * heads * dv + c) * dm.h * dm.w + self.flat(&dm, io, j)] = acc[dd];
                        }
                        if let Some(t) = trace.as_deref_mut() {
                            let qbase = (((n * heads + hd) * dm.other + io) * l + j) * dv;
                            t.mixed[qbase..qbase + dv].copy_from_slice(&acc);
                            for w in 0..l {
                                let o = j + off - w;
                                let cbase = ((((n * heads + hd) * dm.other + io) * l + j) * l + w) * dv;
                                for dd in 0..dv {
                                    t.combined[cbase + dd] = vl[w * dv + dd] + rv_h[dd * table_w + o];
                                }
                            }
                        }
                    }
                }
            }
        }
        add_macs((dm.b * heads * dm.other * l * l * (3 * dqk + 2 * dv)) as u64);
        if let Some(t) = trace {
            t.weights.copy_from_slice(&weights);
        }
        *self.weights.borrow_mut() = weights;
        Ok(out)
    }
}

fn softmax_row(logits: &[f32], out: &mut [f32]) {
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let mut denom = 0.0f64;
    for (o, &x) in out.iter_mut().zip(logits) {
        let e = (x - max).exp();
        *o = e;
        denom += e as f64;
    }
    let inv = (1.0 / denom) as f32;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

impl TapeOp for AxialAttnOp {
    fn name(&self) -> &'static str {
        "axial_attention"
    }

    fn backward(&self, inputs: &[ValRef<'_>], _output: &Tensor, out_grad: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (q, k, v, rq, rk, rv) = (&*inputs[0], &*inputs[1], &*inputs[2], &*inputs[3], &*inputs[4], &*inputs[5]);
        let dm = self.dims(q);
        let (dqk, dv, heads) = (self.d_qk, self.d_v, self.heads);
        let l = dm.len;
        let off = self.max_len - 1;
        let table_w = 2 * self.max_len - 1;
        let weights = self.weights.borrow();

        let mut dq = needs[0].then(|| vec![0.0f32; q.numel()]);
        let mut dk = needs[1].then(|| vec![0.0f32; k.numel()]);
        let mut dvg = needs[2].then(|| vec![0.0f32; v.numel()]);
        let mut drq = needs[3].then(|| vec![0.0f32; rq.numel()]);
        let mut drk = needs[4].then(|| vec![0.0f32; rk.numel()]);
        let mut drv = needs[5].then(|| vec![0.0f32; rv.numel()]);

        let mut ql = vec![0.0f32; l * dqk];
        let mut kl = vec![0.0f32; l * dqk];
        let mut vl = vec![0.0f32; l * dv];
        let mut dy = vec![0.0f32; l * dv];
        let mut da = vec![0.0f32; l * l];
        let hw = dm.h * dm.w;
        for n in 0..dm.b {
            for hd in 0..heads {
                let rq_h = &rq.data[hd * dqk * table_w..(hd + 1) * dqk * table_w];
                let rk_h = &rk.data[hd * dqk * table_w..(hd + 1) * dqk * table_w];
                let rv_h = &rv.data[hd * dv * table_w..(hd + 1) * dv * table_w];
                for io in 0..dm.other {
                    self.pack(&dm, q, dqk, n, hd, io, &mut ql);
                    self.pack(&dm, k, dqk, n, hd, io, &mut kl);
                    self.pack(&dm, v, dv, n, hd, io, &mut vl);
                    for dd in 0..dv {
                        let base = (n * heads * dv + hd * dv + dd) * hw;
                        for j in 0..l {
                            dy[j * dv + dd] = out_grad[base + self.flat(&dm, io, j)];
                        }
                    }
                    let a = {
                        let base = ((n * heads + hd) * dm.other + io) * l * l;
                        &weights[base..base + l * l]
                    };
                    // dA, then softmax backward row-wise into `da` (reused as dS)
                    for j in 0..l {
                        for w in 0..l {
                            let o = j + off - w;
                            let mut acc = 0.0f32;
                            for dd in 0..dv {
                                acc += dy[j * dv + dd] * (vl[w * dv + dd] + rv_h[dd * table_w + o]);
                            }
                            da[j * l + w] = acc;
                        }
                        let mut dot = 0.0f64;
                        for w in 0..l {
                            dot += a[j * l + w] as f64 * da[j * l + w] as f64;
                        }
                        for w in 0..l {
                            da[j * l + w] = a[j * l + w] * (da[j * l + w] - dot as f32) * self.scale;
                        }
                    }
                    for j in 0..l {
                        for w in 0..l {
                            let ds = da[j * l + w];
                            let aw = a[j * l + w];
                            let o = j + off - w;
                            if let Some(g) = &mut dq {
                                let kw = &kl[w * dqk..(w + 1) * dqk];
                                for dd in 0..dqk {
                                    let c = (n * heads * dqk + hd * dqk + dd) * hw;
                                    g[c + self.flat(&dm, io, j)] += ds * (kw[dd] + rq_h[dd * table_w + o]);
                                }
                            }
                            if let Some(g) = &mut dk {
                                let qj = &ql[j * dqk..(j + 1) * dqk];
                                for dd in 0..dqk {
                                    let c = (n * heads * dqk + hd * dqk + dd) * hw;
                                    g[c + self.flat(&dm, io, w)] += ds * (qj[dd] + rk_h[dd * table_w + o]);
                                }
                            }
                            if let Some(g) = &mut drq {
                                for dd in 0..dqk {
                                    g[(hd * dqk + dd) * table_w + o] += ds * ql[j * dqk + dd];
                                }
                            }
                            if let Some(g) = &mut drk {
                                for dd in 0..dqk {
                                    g[(hd * dqk + dd) * table_w + o] += ds * kl[w * dqk + dd];
                                }
                            }
                            if let Some(g) = &mut dvg {
                                for dd in 0..dv {
                                    let c = (n * heads * dv + hd * dv + dd) * hw;
                                    g[c + self.flat(&dm, io, w)] += aw * dy[j * dv + dd];
                                }
                            }
                            if let Some(g) = &mut drv {
                                for dd in 0..dv {
                                    g[(hd * dv + dd) * table_w + o] += aw * dy[j * dv + dd];
                                }
                            }
                        }
                    }
                }
            }
        }
        add_macs((dm.b * heads * dm.other * l * l * (4 * dqk + 4 * dv)) as u64);
        vec![dq, dk, dvg, drq, drk, drv]
    }
}

pub struct AxialAttention {
    pub axis: Axis,
    pub heads: usize,
    pub d_model: usize,
    pub d_qk: usize,
    pub d_v: usize,
    pub max_len: usize,
    pub scale_logits: bool,
    pub wq: Conv2d,
    pub wk: Conv2d,
    pub wv: Conv2d,
    pub wout: Conv2d,
    pub r_q: Param,
    pub r_k: Param,
    pub r_v: Param,
}

impl AxialAttention {
    pub fn new(
        d_model: usize,
        heads: usize,
        d_qk: usize,
        d_v: usize,
        max_len: usize,
        axis: Axis,
        scale_logits: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d_qk == 0 || d_v == 0 || max_len == 0 {
            return Err(Error::config("attention dimensions must be positive"));
        }
        let table_w = 2 * max_len - 1;
        Ok(AxialAttention {
            axis,
            heads,
            d_model,
            d_qk,
            d_v,
            max_len,
            scale_logits,
            wq: Conv2d::new(d_model, heads * d_qk, 1, 1, 0, false, rng),
            wk: Conv2d::new(d_model, heads * d_qk, 1, 1, 0, false, rng),
            wv: Conv2d::new(d_model, heads * d_v, 1, 1, 0, false, rng),
            wout: Conv2d::new(heads * d_v, d_model, 1, 1, 0, false, rng),
            r_q: Param::new(Tensor::randn(&[heads, d_qk, table_w], 0.02, rng)),
            r_k: Param::new(Tensor::randn(&[heads, d_qk, table_w], 0.02, rng)),
            r_v: Param::new(Tensor::randn(&[heads, d_v, table_w], 0.02, rng)),
        })
    }

    /// Head depths follow the bottleneck convention d_model/(2·heads),
    /// clamped to at least 1 so narrow ablation models stay valid.
    pub fn bottleneck(d_model: usize, heads: usize, max_len: usize, axis: Axis, rng: &mut impl Rng) -> Result<Self> {
        let d = (d_model / (2 * heads)).max(1);
        Self::new(d_model, heads, d, d, max_len, axis, false, rng)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.d_model {
            return Err(Error::dim(
                "axial_attention",
                format!("expected [b, {}, h, w], got {shape:?}", self.d_model),
            ));
        }
        let len = match self.axis {
            Axis::Width => shape[3],
            Axis::Height => shape[2],
        };
        if len > self.max_len {
            return Err(Error::config(format!(
                "axis length {len} exceeds configured maximum {}",
                self.max_len
            )));
        }
        Ok(())
    }

    fn core_op(&self) -> AxialAttnOp {
        AxialAttnOp {
            axis: self.axis,
            heads: self.heads,
            d_qk: self.d_qk,
            d_v: self.d_v,
            max_len: self.max_len,
            scale: if self.scale_logits { 1.0 / (self.d_qk as f32).sqrt() } else { 1.0 },
            weights: RefCell::new(Vec::new()),
        }
    }

    pub fn forward(&self, fw: &mut Fwd, x: TensorId) -> Result<TensorId> {
        self.check_input(&fw.tape.shape(x))?;
        let q = self.wq.forward(fw, x)?;
        let k = self.wk.forward(fw, x)?;
        let v = self.wv.forward(fw, x)?;
        let inputs = vec![q, k, v, fw.leaf(&self.r_q), fw.leaf(&self.r_k), fw.leaf(&self.r_v)];
        let op = self.core_op();
        let out = {
            let vals: Vec<ValRef<'_>> = inputs.iter().map(|&i| fw.tape.val(i)).collect();
            op.eval(&vals[0], &vals[1], &vals[2], &vals[3], &vals[4], &vals[5], None)?
        };
        let mixed = fw.tape.record(Box::new(op), inputs, out)?;
        self.wout.forward(fw, mixed)
    }

    /// Off-tape forward that also captures attention weights and the value
    /// vectors they mix. Returns the final projected output and the trace.
    pub fn forward_traced(&self, x: &Tensor) -> Result<(Tensor, AxialTrace)> {
        self.check_input(&x.shape)?;
        let mut tape = Tape::new();
        let mut fw = Fwd::eval(&mut tape);
        let ix = fw.tape.constant(x.clone());
        let q = self.wq.forward(&mut fw, ix)?;
        let k = self.wk.forward(&mut fw, ix)?;
        let v = self.wv.forward(&mut fw, ix)?;

        let (b, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
        let (other, len) = match self.axis {
            Axis::Width => (h, w),
            Axis::Height => (w, h),
        };
        let mut trace = AxialTrace {
            batch: b,
            heads: self.heads,
            other,
            len,
            d_v: self.d_v,
            weights: vec![0.0; b * self.heads * other * len * len],
            combined: vec![0.0; b * self.heads * other * len * len * self.d_v],
            mixed: vec![0.0; b * self.heads * other * len * self.d_v],
        };
        let op = self.core_op();
        let out = {
            let qv = tape.value_clone(q);
            let kv = tape.value_clone(k);
            let vv = tape.value_clone(v);
            op.eval(&qv, &kv, &vv, &self.r_q.value(), &self.r_k.value(), &self.r_v.value(), Some(&mut trace))?
        };
        let mid = tape.constant(out);
        let mut fw = Fwd::eval(&mut tape);
        let projected = self.wout.forward(&mut fw, mid)?;
        Ok((tape.value_clone(projected), trace))
    }

    pub fn parameters(&self) -> Vec<(&'static str, Param)> {
        vec![
            ("wq", self.wq.kernel.clone()),
            ("wk", self.wk.kernel.clone()),
            ("wv", self.wv.kernel.clone()),
            ("wout", self.wout.kernel.clone()),
            ("r_q", self.r_q.clone()),
            ("r_k", self.r_k.clone()),
            ("r_v", self.r_v.clone()),
        ]
    }
}

/// All-pairs attention over the flattened h·w positions, content-only (no
/// positional terms). Quadratic in position count; the cap keeps accidental
/// large inputs out. Backward recomputes softmax rows instead of caching the
/// full weight matrix, so memory stays O(h·w) per row.
pub struct FullAttention2d {
    pub heads: usize,
    pub d_model: usize,
    pub d_qk: usize,
    pub d_v: usize,
    pub max_positions: usize,
    pub scale_logits: bool,
    pub wq: Conv2d,
    pub wk: Conv2d,
    pub wv: Conv2d,
    pub wout: Conv2d,
}

struct Full2dAttnOp {
    heads: usize,
    d_qk: usize,
    d_v: usize,
    scale: f32,
}

impl Full2dAttnOp {
    fn eval(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let (b, h, w) = (q.shape[0], q.shape[2], q.shape[3]);
        let l = h * w;
        let (dqk, dv, heads) = (self.d_qk, self.d_v, self.heads);
        let mut out = Tensor::zeros(&[b, heads * dv, h, w]);
        let mut logits = vec![0.0f32; l];
        let mut weights = vec![0.0f32; l];
        for n in 0..b {
            for hd in 0..heads {
                let qb = (n * heads * dqk + hd * dqk) * l;
                let kb = qb;
                let vb = (n * heads * dv + hd * dv) * l;
                for j in 0..l {
                    for (wp, lg) in logits.iter_mut().enumerate() {
                        let mut acc = 0.0f32;
                        for dd in 0..dqk {
                            acc += q.data[qb + dd * l + j] * k.data[kb + dd * l + wp];
                        }
                        *lg = acc * self.scale;
                    }
                    softmax_row(&logits, &mut weights);
                    for dd in 0..dv {
                        let mut acc = 0.0f32;
                        for (wp, &a) in weights.iter().enumerate() {
                            acc += a * v.data[vb + dd * l + wp];
                        }
                        out.data[(n * heads * dv + hd * dv + dd) * l + j] = acc;
                    }
                }
            }
        }
        add_macs((b * heads * l * l * (dqk + dv)) as u64);
        out
    }
}

impl TapeOp for Full2dAttnOp {
    fn name(&self) -> &'static str {
        "full_attention_2d"
    }

    fn backward(&self, inputs: &[ValRef<'_>], _output: &Tensor, out_grad: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (q, k, v) = (&*inputs[0], &*inputs[1], &*inputs[2]);
        let (b, h, w) = (q.shape[0], q.shape[2], q.shape[3]);
        let l = h * w;
        let (dqk, dv, heads) = (self.d_qk, self.d_v, self.heads);
        let mut dq = needs[0].then(|| vec![0.0f32; q.numel()]);
        let mut dk = needs[1].then(|| vec![0.0f32; k.numel()]);
        let mut dvg = needs[2].then(|| vec![0.0f32; v.numel()]);

        let mut logits = vec![0.0f32; l];
        let mut a = vec![0.0f32; l];
        let mut ds = vec![0.0f32; l];
        for n in 0..b {
            for hd in 0..heads {
                let qb = (n * heads * dqk + hd * dqk) * l;
                let vb = (n * heads * dv + hd * dv) * l;
                for j in 0..l {
                    for (wp, lg) in logits.iter_mut().enumerate() {
                        let mut acc = 0.0f32;
                        for dd in 0..dqk {
                            acc += q.data[qb + dd * l + j] * k.data[qb + dd * l + wp];
                        }
                        *lg = acc * self.scale;
                    }
                    softmax_row(&logits, &mut a);
                    // dA_w = dY_j · v_w, then softmax backward
                    let mut dot = 0.0f64;
                    for wp in 0..l {
                        let mut acc = 0.0f32;
                        for dd in 0..dv {
                            acc += out_grad[vb + dd * l + j] * v.data[vb + dd * l + wp];
                        }
                        ds[wp] = acc;
                        dot += a[wp] as f64 * acc as f64;
                    }
                    for wp in 0..l {
                        ds[wp] = a[wp] * (ds[wp] - dot as f32) * self.scale;
                    }
                    for wp in 0..l {
                        if let Some(g) = &mut dq {
                            for dd in 0..dqk {
                                g[qb + dd * l + j] += ds[wp] * k.data[qb + dd * l + wp];
                            }
                        }
                        if let Some(g) = &mut dk {
                            for dd in 0..dqk {
                                g[qb + dd * l + wp] += ds[wp] * q.data[qb + dd * l + j];
                            }
                        }
                        if let Some(g) = &mut dvg {
                            for dd in 0..dv {
                                g[vb + dd * l + wp] += a[wp] * out_grad[vb + dd * l + j];
                            }
                        }
                    }
                }
            }
        }
        add_macs((b * heads * l * l * (3 * dqk + 2 * dv)) as u64);
        vec![dq, dk, dvg]
    }
}

impl FullAttention2d {
    pub fn new(
        d_model: usize,
        heads: usize,
        d_qk: usize,
        d_v: usize,
        max_positions: usize,
        scale_logits: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d_qk == 0 || d_v == 0 {
            return Err(Error::config("attention dimensions must be positive"));
        }
        Ok(FullAttention2d {
            heads,
            d_model,
            d_qk,
            d_v,
            max_positions,
            scale_logits,
            wq: Conv2d::new(d_model, heads * d_qk, 1, 1, 0, false, rng),
            wk: Conv2d::new(d_model, heads * d_qk, 1, 1, 0, false, rng),
            wv: Conv2d::new(d_model, heads * d_v, 1, 1, 0, false, rng),
            wout: Conv2d::new(heads * d_v, d_model, 1, 1, 0, false, rng),
        })
    }

    pub fn bottleneck(d_model: usize, heads: usize, max_positions: usize, rng: &mut impl Rng) -> Result<Self> {
        let d = (d_model / (2 * heads)).max(1);
        Self::new(d_model, heads, d, d, max_positions, false, rng)
    }

    /// Share projection weights with an axial layer so the two compute the
    /// same function whenever factorization is exact (single-row inputs with
    /// zeroed positional tables).
    pub fn sharing_projections(ax: &AxialAttention, max_positions: usize) -> Self {
        let share = |c: &Conv2d| Conv2d { kernel: c.kernel.clone(), bias: None, stride: 1, pad: c.pad };
        FullAttention2d {
            heads: ax.heads,
            d_model: ax.d_model,
            d_qk: ax.d_qk,
            d_v: ax.d_v,
            max_positions,
            scale_logits: ax.scale_logits,
            wq: share(&ax.wq),
            wk: share(&ax.wk),
            wv: share(&ax.wv),
            wout: share(&ax.wout),
        }
    }

    pub fn forward(&self, fw: &mut Fwd, x: TensorId) -> Result<TensorId> {
        let shape = fw.tape.shape(x);
        if shape.len() != 4 || shape[1] != self.d_model {
            return Err(Error::dim(
                "full_attention_2d",
                format!("expected [b, {}, h, w], got {shape:?}", self.d_model),
            ));
        }
        if shape[2] * shape[3] > self.max_positions {
            return Err(Error::config(format!(
                "{}×{} positions exceed the quadratic-attention cap {}",
                shape[2], shape[3], self.max_positions
            )));
        }
        let q = self.wq.forward(fw, x)?;
        let k = self.wk.forward(fw, x)?;
        let v = self.wv.forward(fw, x)?;
        let op = Full2dAttnOp {
            heads: self.heads,
            d_qk: self.d_qk,
            d_v: self.d_v,
            scale: if self.scale_logits { 1.0 / (self.d_qk as f32).sqrt() } else { 1.0 },
        };
        let out = {
            let vals: Vec<ValRef<'_>> = [q, k, v].iter().map(|&i| fw.tape.val(i)).collect();
            op.eval(&vals[0], &vals[1], &vals[2])
        };
        let mixed = fw.tape.record(Box::new(op), vec![q, k, v], out)?;
        self.wout.forward(fw, mixed)
    }

    pub fn parameters(&self) -> Vec<(&'static str, Param)> {
        vec![
            ("wq", self.wq.kernel.clone()),
            ("wk", self.wk.kernel.clone()),
            ("wv", self.wv.kernel.clone()),
            ("wout", self.wout.kernel.clone()),
        ]
    }
}

/// Residual bottleneck that attends height then width:
/// 1×1 conv C→C/2 + BN + ReLU, the two attention passes, 1×1 conv C/2→C +
/// BN, residual add, final ReLU. Plain (non-normalized) convolutions by
/// design — spectral constraints stop at the block boundary.
pub struct AxialBlock {
    pub reduce: Conv2d,
    pub bn_in: BatchNorm2d,
    pub attn_h: AxialAttention,
    pub attn_w: AxialAttention,
    pub restore: Conv2d,
    pub bn_out: BatchNorm2d,
}

impl AxialBlock {
    pub fn new(channels: usize, heads: usize, max_h: usize, max_w: usize, rng: &mut impl Rng) -> Result<Self> {
        let mid = (channels / 2).max(1);
        // Both 1×1 convs feed straight into a batch norm, which cancels any
        // per-channel bias exactly — so neither carries one.
        Ok(AxialBlock {
            reduce: Conv2d::new(channels, mid, 1, 1, 0, false, rng),
            bn_in: BatchNorm2d::new(mid, rng),
            attn_h: AxialAttention::bottleneck(mid, heads, max_h, Axis::Height, rng)?,
            attn_w: AxialAttention::bottleneck(mid, heads, max_w, Axis::Width, rng)?,
            restore: Conv2d::new(mid, channels, 1, 1, 0, false, rng),
            bn_out: BatchNorm2d::new(channels, rng),
        })
    }

    pub fn forward(&self, fw: &mut Fwd, x: TensorId) -> Result<TensorId> {
        let h = self.reduce.forward(fw, x)?;
        let h = self.bn_in.forward(fw, h)?;
        let h = fw.tape.relu(h)?;
        let h = self.attn_h.forward(fw, h)?;
        let h = self.attn_w.forward(fw, h)?;
        let o = self.restore.forward(fw, h)?;
        let o = self.bn_out.forward(fw, o)?;
        let s = fw.tape.add(o, x)?;
        fw.tape.relu(s)
    }

    pub fn parameters(&self) -> Vec<(String, Param)> {
        let mut out: Vec<(String, Param)> = vec![
            ("reduce.kernel".into(), self.reduce.kernel.clone()),
            ("restore.kernel".into(), self.restore.kernel.clone()),
        ];
        for (prefix, attn) in [("attn_h", &self.attn_h), ("attn_w", &self.attn_w)] {
            for (name, p) in attn.parameters() {
                out.push((format!("{prefix}.{name}"), p));
            }
        }
        out.push(("bn_in.gamma".into(), self.bn_in.gamma.clone()));
        out.push(("bn_in.beta".into(), self.bn_in.beta.clone()));
        out.push(("bn_out.gamma".into(), self.bn_out.gamma.clone()));
        out.push(("bn_out.beta".into(), self.bn_out.beta.clone()));
        out
    }
}

/// Same residual bottleneck with one all-pairs attention layer in place of
/// the two axial passes — the ablation drop-in.
pub struct Full2dBlock {
    pub reduce: Conv2d,
    pub bn_in: BatchNorm2d,
    pub attn: FullAttention2d,
    pub restore: Conv2d,
    pub bn_out: BatchNorm2d,
}

impl Full2dBlock {
    pub fn new(channels: usize, heads: usize, max_positions: usize, rng: &mut impl Rng) -> Result<Self> {
        let mid = (channels / 2).max(1);
        Ok(Full2dBlock {
            reduce: Conv2d::new(channels, mid, 1, 1, 0, false, rng),
            bn_in: BatchNorm2d::new(mid, rng),
            attn: FullAttention2d::bottleneck(mid, heads, max_positions, rng)?,
            restore: Conv2d::new(mid, channels, 1, 1, 0, false, rng),
            bn_out: BatchNorm2d::new(channels, rng),
        })
    }

    pub fn forward(&self, fw: &mut Fwd, x: TensorId) -> Result<TensorId> {
        let h = self.reduce.forward(fw, x)?;
        let h = self.bn_in.forward(fw, h)?;
        let h = fw.tape.relu(h)?;
        let h = self.attn.forward(fw, h)?;
        let o = self.restore.forward(fw, h)?;
        let o = self.bn_out.forward(fw, o)?;
        let s = fw.tape.add(o, x)?;
        fw.tape.relu(s)
    }

    pub fn parameters(&self) -> Vec<(String, Param)> {
        let mut out: Vec<(String, Param)> = vec![
            ("reduce.kernel".into(), self.reduce.kernel.clone()),
            ("restore.kernel".into(), self.restore.kernel.clone()),
        ];
        for (name, p) in self.attn.parameters() {
            out.push((format!("attn.{name}"), p));
        }
        out.push(("bn_in.gamma".into(), self.bn_in.gamma.clone()));
        out.push(("bn_in.beta".into(), self.bn_in.beta.clone()));
        out.push(("bn_out.gamma".into(), self.bn_out.gamma.clone()));
        out.push(("bn_out.beta".into(), self.bn_out.beta.clone()));
        out
    }
}
