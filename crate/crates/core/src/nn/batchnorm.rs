use super::Fwd;
use crate::error::{Error, Result};
use crate::tensor::{Param, TapeOp, Tensor, TensorId, ValRef};
use rand::Rng;

/// Per-channel batch normalization over [n,c,h,w]. Train mode normalizes by
/// batch statistics; eval mode by running statistics. Running variance keeps
/// the unbiased estimate.
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn new(ch: usize, rng: &mut impl Rng) -> Self {
        let mut gamma = Tensor::randn(&[ch], 0.02, rng);
        for v in &mut gamma.data {
            *v += 1.0;
        }
        BatchNorm2d {
            gamma: Param::new(gamma),
            beta: Param::new(Tensor::zeros(&[ch])),
            running_mean: Param::buffer(Tensor::zeros(&[ch])),
            running_var: Param::buffer(Tensor::ones(&[ch])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward(&self, fw: &mut Fwd, x: TensorId) -> Result<TensorId> {
        let (shape, n) = {
            let v = fw.tape.val(x);
            (v.shape.clone(), v.shape[0])
        };
        if shape.len() != 4 || shape[1] != self.channels() {
            return Err(Error::dim(
                "batchnorm",
                format!("expected [n,{},h,w], got {:?}", self.channels(), shape),
            ));
        }
        if fw.train && n < 2 {
            return Err(Error::contract(
                "batch normalization in train mode needs batch size >= 2",
            ));
        }
        let (mean, var) = if fw.train {
            let (m, v) = {
                let xv = fw.tape.val(x);
                batch_stats(&xv, self.channels())
            };
            if fw.update_stats {
                let count = (shape[0] * shape[2] * shape[3]) as f32;
                let unbias = count / (count - 1.0);
                let mut rm = self.running_mean.value_mut();
                let mut rv = self.running_var.value_mut();
                for c in 0..self.channels() {
                    rm.data[c] = (1.0 - self.momentum) * rm.data[c] + self.momentum * m[c];
                    rv.data[c] = (1.0 - self.momentum) * rv.data[c] + self.momentum * v[c] * unbias;
                }
            }
            (m, v)
        } else {
            (self.running_mean.value().data.clone(), self.running_var.value().data.clone())
        };

        let gamma = fw.leaf(&self.gamma);
        let beta = fw.leaf(&self.beta);
        let op = BatchNormOp { mean, var, eps: self.eps, train: fw.train };
        let out = {
            let xv = fw.tape.val(x);
            let gv = fw.tape.val(gamma);
            let bv = fw.tape.val(beta);
            op.eval(&xv, &gv, &bv)
        };
        fw.tape.record(Box::new(op), vec![x, gamma, beta], out)
    }
}

/// Biased per-channel mean/variance over batch and spatial axes, f64 accum.
fn batch_stats(x: &Tensor, ch: usize) -> (Vec<f32>, Vec<f32>) {
    let n = x.shape[0];
    let plane = x.shape[2] * x.shape[3];
    let count = (n * plane) as f64;
    let mut mean = vec![0.0f64; ch];
    let mut var = vec![0.0f64; ch];
    for i in 0..n {
        for c in 0..ch {
            let base = (i * ch + c) * plane;
            let mut s = 0.0f64;
            for &v in &x.data[base..base + plane] {
                s += v as f64;
            }
            mean[c] += s;
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    for i in 0..n {
        for c in 0..ch {
            let base = (i * ch + c) * plane;
            let mc = mean[c];
            let mut s = 0.0f64;
            for &v in &x.data[base..base + plane] {
                let d = v as f64 - mc;
                s += d * d;
            }
            var[c] += s;
        }
    }
    for v in &mut var {
        *v /= count;
    }
    (mean.iter().map(|&m| m as f32).collect(), var.iter().map(|&v| v as f32).collect())
}

struct BatchNormOp {
    mean: Vec<f32>,
    var: Vec<f32>,
    eps: f32,
    train: bool,
}

impl BatchNormOp {
    fn eval(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
        let ch = gamma.numel();
        let n = x.shape[0];
        let plane = x.shape[2] * x.shape[3];
        let mut out = vec![0.0f32; x.numel()];
        for i in 0..n {
            for c in 0..ch {
                let inv = (self.var[c] + self.eps).sqrt().recip();
                let (g, b, m) = (gamma.data[c], beta.data[c], self.mean[c]);
                let base = (i * ch + c) * plane;
                for j in 0..plane {
                    out[base + j] = (x.data[base + j] - m) * inv * g + b;
                }
            }
        }
        Tensor { shape: x.shape.clone(), data: out, requires_grad: false, grad: None }
    }
}

impl TapeOp for BatchNormOp {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn backward(
        &self,
        inputs: &[ValRef<'_>],
        _output: &Tensor,
        out_grad: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        let (x, gamma) = (&inputs[0], &inputs[1]);
        let ch = gamma.numel();
        let n = x.shape[0];
        let plane = x.shape[2] * x.shape[3];
        let count = (n * plane) as f32;

        let mut dgamma = needs[1].then(|| vec![0.0f32; ch]);
        let mut dbeta = needs[2].then(|| vec![0.0f32; ch]);
        let needs_dg_sums = needs[0] || needs[1] || needs[2];
        // per-channel Σdy and Σdy·x̂ drive every gradient term
        let mut sum_dy = vec![0.0f64; ch];
        let mut sum_dy_xh = vec![0.0f64; ch];
        if needs_dg_sums {
            for i in 0..n {
                for c in 0..ch {
                    let inv = (self.var[c] + self.eps).sqrt().recip();
                    let m = self.mean[c];
                    let base = (i * ch + c) * plane;
                    let (mut s, mut sx) = (0.0f64, 0.0f64);
                    for j in 0..plane {
                        let g = out_grad[base + j] as f64;
                        s += g;
                        sx += g * ((x.data[base + j] - m) * inv) as f64;
                    }
                    sum_dy[c] += s;
                    sum_dy_xh[c] += sx;
                }
            }
        }
        if let Some(dg) = dgamma.as_mut() {
            for c in 0..ch {
                dg[c] = sum_dy_xh[c] as f32;
            }
        }
        if let Some(db) = dbeta.as_mut() {
            for c in 0..ch {
                db[c] = sum_dy[c] as f32;
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0f32; x.numel()];
            for i in 0..n {
                for c in 0..ch {
                    let inv = (self.var[c] + self.eps).sqrt().recip();
                    let g = gamma.data[c];
                    let m = self.mean[c];
                    let base = (i * ch + c) * plane;
                    if self.train {
                        // batch statistics depend on x: project out mean/var paths
                        let mean_dy = (sum_dy[c] / count as f64) as f32;
                        let mean_dy_xh = (sum_dy_xh[c] / count as f64) as f32;
                        for j in 0..plane {
                            let xh = (x.data[base + j] - m) * inv;
                            dx[base + j] =
                                g * inv * (out_grad[base + j] - mean_dy - xh * mean_dy_xh);
                        }
                    } else {
                        for j in 0..plane {
                            dx[base + j] = out_grad[base + j] * g * inv;
                        }
                    }
                }
            }
            dx
        });
        vec![dx, dgamma, dbeta]
    }
}
