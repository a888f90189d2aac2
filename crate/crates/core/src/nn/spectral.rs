use super::conv::{Conv2d, TransposedConv2d};
use super::Fwd;
use crate::error::Result;
use crate::tensor::{Param, Tensor, TensorId};
use rand::Rng;

/// Spectral normalization state for a weight viewed as [out, rest]. The
/// power-iteration vectors u, v are buffers: σ̂ = uᵀWv is differentiable in W
/// only, and W_eff = W/σ̂ keeps the top singular value near 1.
pub struct SpectralNorm {
    pub u: Param,
    pub v: Param,
    pub n_power_iterations: usize,
}

fn normalize(x: &mut [f32]) {
    let n: f64 = x.iter().map(|&v| (v as f64) * (v as f64)).sum();
    let inv = 1.0 / (n.sqrt() + 1e-12);
    for v in x.iter_mut() {
        *v = (*v as f64 * inv) as f32;
    }
}

impl SpectralNorm {
    /// `init_iterations` power iterations run against the current weight so
    /// σ̂ starts converged (20 at construction by convention).
    pub fn new(weight: &Param, init_iterations: usize, rng: &mut impl Rng) -> Self {
        let (out, rest) = Self::matrix_dims(weight);
        let mut u = Tensor::randn(&[out], 1.0, rng);
        normalize(&mut u.data);
        let sn = SpectralNorm {
            u: Param::buffer(u),
            v: Param::buffer(Tensor::zeros(&[rest])),
            n_power_iterations: 1,
        };
        sn.power_iterate(weight, init_iterations.max(1));
        sn
    }

    pub fn matrix_dims(weight: &Param) -> (usize, usize) {
        let shape = weight.shape();
        let out = shape[0];
        (out, weight.numel() / out)
    }

    /// v ← normalize(Wᵀu); u ← normalize(Wv), repeated. After the final
    /// update, uᵀWv = ‖Wv‖, so the estimate is nonnegative.
    pub fn power_iterate(&self, weight: &Param, iters: usize) {
        let w = weight.value();
        let (out, rest) = Self::matrix_dims(weight);
        let mut u = self.u.value_mut();
        let mut v = self.v.value_mut();
        for _ in 0..iters {
            for j in 0..rest {
                let mut s = 0.0f32;
                for i in 0..out {
                    s += w.data[i * rest + j] * u.data[i];
                }
                v.data[j] = s;
            }
            normalize(&mut v.data);
            for i in 0..out {
                let mut s = 0.0f32;
                for j in 0..rest {
                    s += w.data[i * rest + j] * v.data[j];
                }
                u.data[i] = s;
            }
            normalize(&mut u.data);
        }
    }

    /// Current estimate uᵀWv without touching any tape.
    pub fn sigma(&self, weight: &Param) -> f32 {
        let w = weight.value();
        let (out, rest) = Self::matrix_dims(weight);
        let u = self.u.value();
        let v = self.v.value();
        let mut s = 0.0f64;
        for i in 0..out {
            let mut row = 0.0f32;
            for j in 0..rest {
                row += w.data[i * rest + j] * v.data[j];
            }
            s += (row * u.data[i]) as f64;
        }
        s as f32
    }

    /// W/σ̂ on the tape. One power-iteration update happens first when the
    /// context allows statistics updates (the owner's own training pass).
    pub fn effective_weight(&self, fw: &mut Fwd, weight: &Param) -> Result<TensorId> {
        if fw.update_stats {
            self.power_iterate(weight, self.n_power_iterations);
        }
        let (out, rest) = Self::matrix_dims(weight);
        let w = fw.leaf(weight);
        let w2d = fw.tape.reshape(w, &[out, rest])?;
        let u = {
            let t = Tensor::new(vec![1, out], self.u.value().data.clone())?;
            fw.tape.constant(t)
        };
        let v = {
            let t = Tensor::new(vec![rest, 1], self.v.value().data.clone())?;
            fw.tape.constant(t)
        };
        let uw = fw.tape.matmul(u, w2d)?;
        let sigma = fw.tape.matmul(uw, v)?;
        let inv = fw.tape.recip(sigma)?;
        let inv = fw.tape.reshape(inv, &[1])?;
        fw.tape.mul(w, inv)
    }
}

/// Convolution with optional spectral normalization on its kernel.
pub struct SnConv2d {
    pub conv: Conv2d,
    pub sn: Option<SpectralNorm>,
}

impl SnConv2d {
    pub fn plain(conv: Conv2d) -> Self {
        SnConv2d { conv, sn: None }
    }

    pub fn spectral(conv: Conv2d, rng: &mut impl Rng) -> Self {
        let sn = SpectralNorm::new(&conv.kernel, 20, rng);
        SnConv2d { conv, sn: Some(sn) }
    }

    pub fn forward(&self, fw: &mut Fwd, x: TensorId) -> Result<TensorId> {
        match &self.sn {
            Some(sn) => {
                let w = sn.effective_weight(fw, &self.conv.kernel)?;
                self.conv.forward_with(fw, x, w)
            }
            None => self.conv.forward(fw, x),
        }
    }
}

/// Transposed convolution with optional spectral normalization.
pub struct SnDeconv2d {
    pub conv: TransposedConv2d,
    pub sn: Option<SpectralNorm>,
}

impl SnDeconv2d {
    pub fn plain(conv: TransposedConv2d) -> Self {
        SnDeconv2d { conv, sn: None }
    }

    pub fn spectral(conv: TransposedConv2d, rng: &mut impl Rng) -> Self {
        let sn = SpectralNorm::new(&conv.kernel, 20, rng);
        SnDeconv2d { conv, sn: Some(sn) }
    }

    pub fn forward(&self, fw: &mut Fwd, x: TensorId) -> Result<TensorId> {
        match &self.sn {
            Some(sn) => {
                let w = sn.effective_weight(fw, &self.conv.kernel)?;
                self.conv.forward_with(fw, x, w)
            }
            None => self.conv.forward(fw, x),
        }
    }
}
