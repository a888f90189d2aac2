use super::tape::{Tape, TapeOp, TensorId, ValRef};
use super::{broadcast_shape, broadcast_zip, reduce_grad_to_shape, Tensor};
use crate::error::{Error, Result};

/// Safe wrapper over the f32 BLAS kernel; strides are in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
    rsc: isize,
    csc: isize,
) {
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(),
            rsc, csc,
        );
    }
}

/// C[m,n] = A[m,k]·B[k,n], all row-major.
pub(crate) fn gemm_into(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    sgemm_strided(m, k, n, 1.0, a, k as isize, 1, b, n as isize, 1, 0.0, c, n as isize, 1);
}

/// C = A·B with explicit strides (transposes without copies), overwriting C.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm_overwrite(
    m: usize, k: usize, n: usize,
    a: &[f32], rsa: isize, csa: isize,
    b: &[f32], rsb: isize, csb: isize,
    c: &mut [f32], rsc: isize, csc: isize,
) {
    sgemm_strided(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
}

/// C += A·B with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm_acc(
    m: usize, k: usize, n: usize,
    a: &[f32], rsa: isize, csa: isize,
    b: &[f32], rsb: isize, csb: isize,
    c: &mut [f32], rsc: isize, csc: isize,
) {
    sgemm_strided(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 1.0, c, rsc, csc);
}

// ── elementwise binary with trailing broadcast ──

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

struct BinOp {
    kind: BinKind,
}

impl TapeOp for BinOp {
    fn name(&self) -> &'static str {
        match self.kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        }
    }

    fn backward(
        &self,
        inputs: &[ValRef<'_>],
        output: &Tensor,
        out_grad: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let os = &output.shape;
        let da = if needs[0] {
            let full = match self.kind {
                BinKind::Add | BinKind::Sub => out_grad.to_vec(),
                BinKind::Mul => {
                    broadcast_zip(out_grad, os, &b.data, &b.shape, os, |g, bv| g * bv)
                }
            };
            Some(reduce_grad_to_shape(&full, os, &a.shape))
        } else {
            None
        };
        let db = if needs[1] {
            let full = match self.kind {
                BinKind::Add => out_grad.to_vec(),
                BinKind::Sub => out_grad.iter().map(|g| -g).collect(),
                BinKind::Mul => {
                    broadcast_zip(out_grad, os, &a.data, &a.shape, os, |g, av| g * av)
                }
            };
            Some(reduce_grad_to_shape(&full, os, &b.shape))
        } else {
            None
        };
        vec![da, db]
    }
}

// ── unary elementwise ──

#[derive(Clone, Copy)]
enum UnKind {
    Relu,
    LeakyRelu(f32),
    Tanh,
    Abs,
    Square,
    Recip,
    Scale(f32),
    AddScalar(f32),
}

struct UnOp {
    kind: UnKind,
}

impl UnOp {
    fn eval(&self, x: f32) -> f32 {
        match self.kind {
            UnKind::Relu => x.max(0.0),
            UnKind::LeakyRelu(s) => {
                if x >= 0.0 {
                    x
                } else {
                    s * x
                }
            }
            UnKind::Tanh => x.tanh(),
            UnKind::Abs => x.abs(),
            UnKind::Square => x * x,
            UnKind::Recip => 1.0 / x,
            UnKind::Scale(s) => s * x,
            UnKind::AddScalar(s) => x + s,
        }
    }
}

impl TapeOp for UnOp {
    fn name(&self) -> &'static str {
        match self.kind {
            UnKind::Relu => "relu",
            UnKind::LeakyRelu(_) => "leaky_relu",
            UnKind::Tanh => "tanh",
            UnKind::Abs => "abs",
            UnKind::Square => "square",
            UnKind::Recip => "recip",
            UnKind::Scale(_) => "scale",
            UnKind::AddScalar(_) => "add_scalar",
        }
    }

    fn backward(
        &self,
        inputs: &[ValRef<'_>],
        output: &Tensor,
        out_grad: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        if !needs[0] {
            return vec![None];
        }
        let x = &inputs[0].data;
        let y = &output.data;
        let g = out_grad;
        let dx: Vec<f32> = match self.kind {
            UnKind::Relu => x.iter().zip(g).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect(),
            UnKind::LeakyRelu(s) => {
                x.iter().zip(g).map(|(&x, &g)| if x >= 0.0 { g } else { s * g }).collect()
            }
            UnKind::Tanh => y.iter().zip(g).map(|(&y, &g)| g * (1.0 - y * y)).collect(),
            UnKind::Abs => x
                .iter()
                .zip(g)
                .map(|(&x, &g)| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 })
                .collect(),
            UnKind::Square => x.iter().zip(g).map(|(&x, &g)| 2.0 * x * g).collect(),
            UnKind::Recip => y.iter().zip(g).map(|(&y, &g)| -g * y * y).collect(),
            UnKind::Scale(s) => g.iter().map(|&g| s * g).collect(),
            UnKind::AddScalar(_) => g.to_vec(),
        };
        vec![Some(dx)]
    }
}

// ── matmul ──

struct MatmulOp;

impl TapeOp for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(
        &self,
        inputs: &[ValRef<'_>],
        _output: &Tensor,
        out_grad: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let (m, k) = (a.shape[0], a.shape[1]);
        let n = b.shape[1];
        let da = needs[0].then(|| {
            let mut d = vec![0.0f32; m * k];
            // dA = dC · Bᵀ
            sgemm_strided(m, n, k, 1.0, out_grad, n as isize, 1, &b.data, 1, n as isize, 0.0, &mut d, k as isize, 1);
            d
        });
        let db = needs[1].then(|| {
            let mut d = vec![0.0f32; k * n];
            // dB = Aᵀ · dC
            sgemm_strided(k, m, n, 1.0, &a.data, 1, k as isize, out_grad, n as isize, 1, 0.0, &mut d, n as isize, 1);
            d
        });
        vec![da, db]
    }
}

// ── softmax along one axis ──

struct SoftmaxOp {
    axis: usize,
}

fn axis_splits(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl TapeOp for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(
        &self,
        inputs: &[ValRef<'_>],
        output: &Tensor,
        out_grad: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        if !needs[0] {
            return vec![None];
        }
        let (outer, len, inner) = axis_splits(&inputs[0].shape, self.axis);
        let y = &output.data;
        let mut dx = vec![0.0f32; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut dot = 0.0f64;
                for l in 0..len {
                    let idx = base + l * inner;
                    dot += (out_grad[idx] * y[idx]) as f64;
                }
                let dot = dot as f32;
                for l in 0..len {
                    let idx = base + l * inner;
                    dx[idx] = y[idx] * (out_grad[idx] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

// ── reductions ──

struct SumOp {
    mean: bool,
}

impl TapeOp for SumOp {
    fn name(&self) -> &'static str {
        if self.mean {
            "mean"
        } else {
            "sum"
        }
    }

    fn backward(
        &self,
        inputs: &[ValRef<'_>],
        _output: &Tensor,
        out_grad: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        if !needs[0] {
            return vec![None];
        }
        let n = inputs[0].numel();
        let g = if self.mean { out_grad[0] / n as f32 } else { out_grad[0] };
        vec![Some(vec![g; n])]
    }
}

// ── shape ops ──

struct ReshapeOp {
    from: Vec<usize>,
}

impl TapeOp for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        _inputs: &[ValRef<'_>],
        _output: &Tensor,
        out_grad: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        if !needs[0] {
            return vec![None];
        }
        debug_assert_eq!(out_grad.len(), self.from.iter().product::<usize>());
        vec![Some(out_grad.to_vec())]
    }
}

struct ConcatChOp;

impl TapeOp for ConcatChOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(
        &self,
        inputs: &[ValRef<'_>],
        output: &Tensor,
        out_grad: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let bsz = a.shape[0];
        let (ca, cb) = (a.shape[1], b.shape[1]);
        let hw: usize = a.shape[2..].iter().product();
        let ctot = output.shape[1];
        let mut da = needs[0].then(|| vec![0.0f32; a.numel()]);
        let mut db = needs[1].then(|| vec![0.0f32; b.numel()]);
        for n in 0..bsz {
            let out_base = n * ctot * hw;
            if let Some(da) = da.as_mut() {
                da[n * ca * hw..(n + 1) * ca * hw]
                    .copy_from_slice(&out_grad[out_base..out_base + ca * hw]);
            }
            if let Some(db) = db.as_mut() {
                db[n * cb * hw..(n + 1) * cb * hw]
                    .copy_from_slice(&out_grad[out_base + ca * hw..out_base + (ca + cb) * hw]);
            }
        }
        vec![da, db]
    }
}

// ── tape methods ──

impl Tape {
    fn binary(&mut self, kind: BinKind, a: TensorId, b: TensorId) -> Result<TensorId> {
        let op = BinOp { kind };
        let out = {
            let (ta, tb) = (self.val(a), self.val(b));
            let os = broadcast_shape(op.name(), &ta.shape, &tb.shape)?;
            let data = broadcast_zip(&ta.data, &ta.shape, &tb.data, &tb.shape, &os, |x, y| {
                match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                }
            });
            Tensor { shape: os, data, requires_grad: false, grad: None }
        };
        self.record(Box::new(op), vec![a, b], out)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Mul, a, b)
    }

    fn unary(&mut self, kind: UnKind, a: TensorId) -> Result<TensorId> {
        let op = UnOp { kind };
        let out = {
            let ta = self.val(a);
            let data = ta.data.iter().map(|&x| op.eval(x)).collect();
            Tensor { shape: ta.shape.clone(), data, requires_grad: false, grad: None }
        };
        self.record(Box::new(op), vec![a], out)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnKind::Relu, a)
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: f32) -> Result<TensorId> {
        self.unary(UnKind::LeakyRelu(slope), a)
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnKind::Tanh, a)
    }

    pub fn abs(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnKind::Abs, a)
    }

    pub fn square(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnKind::Square, a)
    }

    pub fn recip(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(UnKind::Recip, a)
    }

    pub fn scale(&mut self, a: TensorId, s: f32) -> Result<TensorId> {
        self.unary(UnKind::Scale(s), a)
    }

    pub fn add_scalar(&mut self, a: TensorId, s: f32) -> Result<TensorId> {
        self.unary(UnKind::AddScalar(s), a)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out = {
            let (ta, tb) = (self.val(a), self.val(b));
            if ta.rank() != 2 || tb.rank() != 2 {
                return Err(Error::dim("matmul", format!("expected 2-d operands, got {:?} and {:?}", ta.shape, tb.shape)));
            }
            if ta.shape[1] != tb.shape[0] {
                return Err(Error::dim(
                    "matmul",
                    format!("inner dimensions disagree: {:?} vs {:?}", ta.shape, tb.shape),
                ));
            }
            let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
            let mut c = vec![0.0f32; m * n];
            gemm_into(m, k, n, &ta.data, &tb.data, &mut c);
            Tensor { shape: vec![m, n], data: c, requires_grad: false, grad: None }
        };
        self.record(Box::new(MatmulOp), vec![a, b], out)
    }

    /// Numerically-stable softmax: max subtraction per slice along `axis`.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let out = {
            let ta = self.val(a);
            if axis >= ta.rank() {
                return Err(Error::dim(
                    "softmax",
                    format!("axis {} out of range for shape {:?}", axis, ta.shape),
                ));
            }
            let (outer, len, inner) = axis_splits(&ta.shape, axis);
            let mut data = vec![0.0f32; ta.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut mx = f32::NEG_INFINITY;
                    for l in 0..len {
                        mx = mx.max(ta.data[base + l * inner]);
                    }
                    let mut sum = 0.0f32;
                    for l in 0..len {
                        let e = (ta.data[base + l * inner] - mx).exp();
                        data[base + l * inner] = e;
                        sum += e;
                    }
                    let inv = 1.0 / sum;
                    for l in 0..len {
                        data[base + l * inner] *= inv;
                    }
                }
            }
            Tensor { shape: ta.shape.clone(), data, requires_grad: false, grad: None }
        };
        self.record(Box::new(SoftmaxOp { axis }), vec![a], out)
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let out = {
            let ta = self.val(a);
            let s: f64 = ta.data.iter().map(|&v| v as f64).sum();
            Tensor::scalar(s as f32)
        };
        self.record(Box::new(SumOp { mean: false }), vec![a], out)
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let out = {
            let ta = self.val(a);
            let s: f64 = ta.data.iter().map(|&v| v as f64).sum();
            Tensor::scalar((s / ta.numel() as f64) as f32)
        };
        self.record(Box::new(SumOp { mean: true }), vec![a], out)
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let out = {
            let ta = self.val(a);
            if shape.iter().product::<usize>() != ta.numel() {
                return Err(Error::dim(
                    "reshape",
                    format!("cannot view {:?} as {:?}", ta.shape, shape),
                ));
            }
            Tensor { shape: shape.to_vec(), data: ta.data.clone(), requires_grad: false, grad: None }
        };
        let from = self.shape(a);
        self.record(Box::new(ReshapeOp { from }), vec![a], out)
    }

    /// Concatenate two [n,c,h,w] maps along the channel axis.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out = {
            let (ta, tb) = (self.val(a), self.val(b));
            if ta.rank() != 4 || tb.rank() != 4 {
                return Err(Error::dim("concat_channels", "expected rank-4 inputs"));
            }
            if ta.shape[0] != tb.shape[0] || ta.shape[2..] != tb.shape[2..] {
                return Err(Error::dim(
                    "concat_channels",
                    format!("incompatible shapes {:?} and {:?}", ta.shape, tb.shape),
                ));
            }
            let (n, ca, cb) = (ta.shape[0], ta.shape[1], tb.shape[1]);
            let hw: usize = ta.shape[2..].iter().product();
            let mut data = vec![0.0f32; (ca + cb) * n * hw];
            for i in 0..n {
                let base = i * (ca + cb) * hw;
                data[base..base + ca * hw]
                    .copy_from_slice(&ta.data[i * ca * hw..(i + 1) * ca * hw]);
                data[base + ca * hw..base + (ca + cb) * hw]
                    .copy_from_slice(&tb.data[i * cb * hw..(i + 1) * cb * hw]);
            }
            let mut shape = ta.shape.clone();
            shape[1] = ca + cb;
            Tensor { shape, data, requires_grad: false, grad: None }
        };
        self.record(Box::new(ConcatChOp), vec![a, b], out)
    }
}
