//! Dense f32 tensors and reverse-mode differentiation on a tape.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{grad_check, grad_check_coords, grad_check_dir, grad_check_dir_f64};
pub(crate) use ops::{gemm_into, sgemm_acc, sgemm_overwrite};
pub use tape::{Tape, TapeOp, TensorId, ValRef};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

/// Row-major n-dimensional f32 array. The gradient buffer is filled by
/// `Tape::backward` for leaves and accumulates across calls until zeroed.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::dim(
                "tensor",
                format!("shape {:?} does not describe {} elements", shape, data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n], requires_grad: false, grad: None }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    /// Zero-mean Gaussian init with the given standard deviation.
    pub fn randn(shape: &[usize], std: f32, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0f32, std).expect("std must be finite");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random::<f32>() * (hi - lo) + lo).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[f32]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => {
                for (b, &v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Overflow guard: a single f64 sum goes non-finite iff any element is
    /// NaN/Inf, because f64 cannot overflow on f32 inputs at these sizes.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        let s: f64 = self.data.iter().map(|&v| v as f64).sum();
        if s.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op, detail: format!("shape {:?}", self.shape) })
        }
    }
}

/// Shared trainable tensor: layers hold clones, the tape links leaves back to
/// it, and `Tape::backward` accumulates gradients into its grad buffer.
#[derive(Clone)]
pub struct Param(Rc<RefCell<Tensor>>);

impl Param {
    pub fn new(t: Tensor) -> Self {
        Param(Rc::new(RefCell::new(t.with_grad())))
    }

    /// Non-trainable state (running statistics, power-iteration vectors).
    pub fn buffer(t: Tensor) -> Self {
        let mut t = t;
        t.requires_grad = false;
        Param(Rc::new(RefCell::new(t)))
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        self.0.borrow()
    }

    pub fn value_mut(&self) -> RefMut<'_, Tensor> {
        self.0.borrow_mut()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().zero_grad();
    }

    pub fn grad_clone(&self) -> Option<Vec<f32>> {
        self.0.borrow().grad.clone()
    }

    pub(crate) fn ptr_key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}

// ── broadcast helpers (numpy trailing-dimension rules) ──

/// Shape of `a op b` under trailing broadcast, or a dimension error.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::dim(op, format!("shapes {:?} and {:?} do not broadcast", a, b)));
        };
    }
    Ok(out)
}

/// Row-major strides with 0 for axes the shape broadcasts over, padded to
/// `out_rank` on the left.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1usize;
    for i in (0..shape.len()).rev() {
        let o = i + rank - shape.len();
        strides[o] = if shape[i] == 1 && out_shape[o] != 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Apply `f(a_elem, b_elem)` over the broadcast of two flat arrays.
pub(crate) fn broadcast_zip(
    a: &[f32],
    a_shape: &[usize],
    b: &[f32],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f32, f32) -> f32,
) -> Vec<f32> {
    let n: usize = out_shape.iter().product();
    let mut out = vec![0.0f32; n];
    if a_shape == b_shape {
        for i in 0..n {
            out[i] = f(a[i], b[i]);
        }
        return out;
    }
    if b.len() == 1 {
        let bv = b[0];
        for i in 0..n {
            out[i] = f(a[i], bv);
        }
        return out;
    }
    if a.len() == 1 {
        let av = a[0];
        for i in 0..n {
            out[i] = f(av, b[i]);
        }
        return out;
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in out.iter_mut() {
        *o = f(a[oa], b[ob]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
        }
    }
    out
}

/// Sum `grad` (shaped `from`) down to `to` by collapsing broadcast axes —
/// the adjoint of broadcasting `to` up to `from`.
pub(crate) fn reduce_grad_to_shape(grad: &[f32], from: &[usize], to: &[usize]) -> Vec<f32> {
    if from == to {
        return grad.to_vec();
    }
    let n_to: usize = to.iter().product();
    let mut out = vec![0.0f32; n_to];
    if n_to == 1 {
        out[0] = grad.iter().sum();
        return out;
    }
    let strides = broadcast_strides(to, from);
    let rank = from.len();
    let mut idx = vec![0usize; rank];
    let mut ot = 0usize;
    for &g in grad {
        out[ot] += g;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ot += strides[ax];
            if idx[ax] < from[ax] {
                break;
            }
            idx[ax] = 0;
            ot -= strides[ax] * from[ax];
        }
    }
    out
}

/// Deterministic stream splitting: mixes (base, a, b) into a fresh seed so
/// each (step, purpose) pair gets an independent RNG.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9e3779b97f4a7c15) ^ b.wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data_len() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn finite_check_catches_nan_and_inf() {
        let t = Tensor::new(vec![3], vec![1.0, f32::NAN, 0.0]).unwrap();
        assert!(t.check_finite("probe").is_err());
        let t = Tensor::new(vec![2], vec![f32::INFINITY, -f32::INFINITY]).unwrap();
        assert!(t.check_finite("probe").is_err());
        let t = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        assert!(t.check_finite("probe").is_ok());
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("t", &[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape("t", &[1], &[5]).unwrap(), vec![5]);
        assert!(broadcast_shape("t", &[2, 3], &[4]).is_err());
    }

    #[test]
    fn broadcast_zip_matches_manual() {
        let a = [1., 2., 3., 4., 5., 6.];
        let b = [10., 20., 30.];
        let out = broadcast_zip(&a, &[2, 3], &b, &[3], &[2, 3], |x, y| x + y);
        assert_eq!(out, vec![11., 22., 33., 14., 25., 36.]);
        // mid-axis broadcast exercises the stride walker
        let c = [1., 2.];
        let out = broadcast_zip(&a, &[2, 3], &c, &[2, 1], &[2, 3], |x, y| x * y);
        assert_eq!(out, vec![1., 2., 3., 8., 10., 12.]);
    }

    #[test]
    fn reduce_grad_collapses_broadcast_axes() {
        // grad shaped [2,3] reduced to [3] sums over rows; to [1] sums all
        let g = [1., 2., 3., 4., 5., 6.];
        assert_eq!(reduce_grad_to_shape(&g, &[2, 3], &[3]), vec![5., 7., 9.]);
        assert_eq!(reduce_grad_to_shape(&g, &[2, 3], &[1]), vec![21.]);
        assert_eq!(reduce_grad_to_shape(&g, &[2, 3], &[2, 1]), vec![6., 15.]);
    }

    #[test]
    fn grad_accumulates_and_zeros() {
        let mut t = Tensor::zeros(&[2]);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(t.grad.as_deref(), Some(&[1.5, 2.5][..]));
        t.zero_grad();
        assert!(t.grad.is_none());
    }

    #[test]
    fn derived_seeds_differ_across_streams() {
        let s1 = derive_seed(7, 0, 0);
        let s2 = derive_seed(7, 1, 0);
        let s3 = derive_seed(7, 0, 1);
        assert_ne!(s1, s2);
        assert_ne!(s1, s3);
        assert_ne!(s2, s3);
        assert_eq!(s1, derive_seed(7, 0, 0));
    }
}
