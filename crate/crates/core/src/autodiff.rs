//! Reverse-mode differentiation over a closed set of tensor primitives:
//! convolution, Gaussian blur, pointwise arithmetic, matrix products,
//! smooth nonlinearities, tempered softmax, norms and ratios. The tape is
//! single-owner and built per forward pass; no general taping of arbitrary
//! code.

use crate::error::{FeraError, Result};
use crate::field::Field;
use crate::kernel;
use crate::linalg;
use crate::real::Real;

/// A dense tensor of arbitrary rank used as the tape's value carrier.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Real> {
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }
    pub fn scalar(v: T) -> Self {
        Self {
            dims: vec![1],
            data: vec![v],
        }
    }
    pub fn vector(data: Vec<T>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
        }
    }
    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }
    pub fn from_field(f: &Field<T>) -> Self {
        let (c, h, w) = f.shape();
        Self {
            dims: vec![c, h, w],
            data: f.data().to_vec(),
        }
    }
    pub fn to_field(&self) -> Field<T> {
        assert_eq!(self.dims.len(), 3, "tensor is not a field");
        Field::from_vec(self.dims[0], self.dims[1], self.dims[2], self.data.clone()).unwrap()
    }
    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "tensor is not a scalar");
        self.data[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T: Real> {
    Leaf,
    /// y = conv2d(x, w) with circular padding; w laid out [cout, cin, k, k].
    Conv2d {
        x: NodeId,
        w: NodeId,
        cin: usize,
        h: usize,
        wdt: usize,
        cout: usize,
        k: usize,
    },
    /// Separable circular Gaussian blur (self-adjoint).
    GaussBlur {
        x: NodeId,
        taps: Vec<T>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    /// a + fixed tensor (the constant is consumed during the forward pass)
    AddConst {
        a: NodeId,
    },
    Scale {
        a: NodeId,
        c: T,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    /// x[c,h,w] + b[c] broadcast over each plane
    AddBiasChannel {
        x: NodeId,
        b: NodeId,
    },
    Silu {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    /// c = a[m,k] * b[k,n]
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// y = w[m,n] * v[n]
    MatVec {
        w: NodeId,
        v: NodeId,
        m: usize,
        n: usize,
    },
    /// softmax(z / tau)
    SoftmaxTemp {
        z: NodeId,
        tau: T,
    },
    /// sum_m alpha[m] * xs[m]
    Blend {
        alpha: NodeId,
        xs: Vec<NodeId>,
    },
    /// scalar sum of squares
    SumSq {
        x: NodeId,
    },
    /// elementwise sqrt
    Sqrt {
        x: NodeId,
    },
    /// elementwise natural log
    Ln {
        x: NodeId,
    },
    /// v[n] / s (scalar)
    DivBroadcast {
        v: NodeId,
        s: NodeId,
    },
    /// scalar dot with fixed weights
    DotConst {
        x: NodeId,
        w: Vec<T>,
    },
    /// scalar mean((x - target)^2)
    MseVsConst {
        x: NodeId,
        target: Tensor<T>,
    },
    /// gather scalars into a vector
    StackScalars {
        xs: Vec<NodeId>,
    },
    /// scalar v[i]
    IndexVec {
        v: NodeId,
        i: usize,
    },
    /// same data, new dims
    Reshape {
        x: NodeId,
    },
}

/// Wengert-list tape; owns all node values.
pub struct Tape<T: Real> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.needs_grad[id.0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        NodeId(self.values.len() - 1)
    }

    /// A trainable leaf; gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; backward never descends into it.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.needs_grad[id.0])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, cout: usize, k: usize) -> NodeId {
        let xd = &self.values[x.0];
        assert_eq!(xd.dims.len(), 3, "conv2d input must be [c,h,w]");
        let (cin, h, wdt) = (xd.dims[0], xd.dims[1], xd.dims[2]);
        assert_eq!(self.values[w.0].numel(), cout * cin * k * k, "conv2d weight size");
        let y = kernel::conv2d(&xd.data, cin, h, wdt, &self.values[w.0].data, cout, k);
        let ng = self.any_grad(&[x, w]);
        self.push(
            Tensor::new(vec![cout, h, wdt], y),
            Op::Conv2d {
                x,
                w,
                cin,
                h,
                wdt,
                cout,
                k,
            },
            ng,
        )
    }

    pub fn gauss_blur(&mut self, x: NodeId, taps: &[T]) -> NodeId {
        let f = self.values[x.0].to_field();
        let y = kernel::gauss_blur(&f, taps);
        let ng = self.needs_grad[x.0];
        self.push(
            Tensor::from_field(&y),
            Op::GaussBlur {
                x,
                taps: taps.to_vec(),
            },
            ng,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.values[a.0].dims, self.values[b.0].dims, "add shape");
        let data = self.values[a.0]
            .data
            .iter()
            .zip(&self.values[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let dims = self.values[a.0].dims.clone();
        let ng = self.any_grad(&[a, b]);
        self.push(Tensor::new(dims, data), Op::Add { a, b }, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.values[a.0].dims, self.values[b.0].dims, "sub shape");
        let data = self.values[a.0]
            .data
            .iter()
            .zip(&self.values[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let dims = self.values[a.0].dims.clone();
        let ng = self.any_grad(&[a, b]);
        self.push(Tensor::new(dims, data), Op::Sub { a, b }, ng)
    }

    pub fn add_const(&mut self, a: NodeId, c: Tensor<T>) -> NodeId {
        assert_eq!(self.values[a.0].numel(), c.numel(), "add_const shape");
        let data = self.values[a.0]
            .data
            .iter()
            .zip(&c.data)
            .map(|(&x, &y)| x + y)
            .collect();
        let dims = self.values[a.0].dims.clone();
        let ng = self.needs_grad[a.0];
        self.push(Tensor::new(dims, data), Op::AddConst { a }, ng)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let data = self.values[a.0].data.iter().map(|&x| x * c).collect();
        let dims = self.values[a.0].dims.clone();
        let ng = self.needs_grad[a.0];
        self.push(Tensor::new(dims, data), Op::Scale { a, c }, ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.values[a.0].dims, self.values[b.0].dims, "mul shape");
        let data = self.values[a.0]
            .data
            .iter()
            .zip(&self.values[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let dims = self.values[a.0].dims.clone();
        let ng = self.any_grad(&[a, b]);
        self.push(Tensor::new(dims, data), Op::Mul { a, b }, ng)
    }

    pub fn add_bias_channel(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xd = &self.values[x.0];
        assert_eq!(xd.dims.len(), 3);
        let (c, h, w) = (xd.dims[0], xd.dims[1], xd.dims[2]);
        assert_eq!(self.values[b.0].numel(), c, "bias length");
        let mut data = xd.data.clone();
        for ch in 0..c {
            let bv = self.values[b.0].data[ch];
            for v in &mut data[ch * h * w..(ch + 1) * h * w] {
                *v = *v + bv;
            }
        }
        let ng = self.any_grad(&[x, b]);
        self.push(
            Tensor::new(vec![c, h, w], data),
            Op::AddBiasChannel { x, b },
            ng,
        )
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let data = self.values[x.0]
            .data
            .iter()
            .map(|&v| v * sigmoid(v))
            .collect();
        let dims = self.values[x.0].dims.clone();
        let ng = self.needs_grad[x.0];
        self.push(Tensor::new(dims, data), Op::Silu { x }, ng)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let data = self.values[x.0].data.iter().map(|&v| v.tanh()).collect();
        let dims = self.values[x.0].dims.clone();
        let ng = self.needs_grad[x.0];
        self.push(Tensor::new(dims, data), Op::Tanh { x }, ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, m: usize, k: usize, n: usize) -> NodeId {
        assert_eq!(self.values[a.0].numel(), m * k, "matmul lhs");
        assert_eq!(self.values[b.0].numel(), k * n, "matmul rhs");
        let c = linalg::matmul(&self.values[a.0].data, &self.values[b.0].data, m, k, n);
        let ng = self.any_grad(&[a, b]);
        self.push(
            Tensor::new(vec![m, n], c),
            Op::MatMul { a, b, m, k, n },
            ng,
        )
    }

    pub fn matvec(&mut self, w: NodeId, v: NodeId, m: usize, n: usize) -> NodeId {
        assert_eq!(self.values[w.0].numel(), m * n, "matvec lhs");
        assert_eq!(self.values[v.0].numel(), n, "matvec rhs");
        let y = linalg::matvec(&self.values[w.0].data, &self.values[v.0].data, m, n);
        let ng = self.any_grad(&[w, v]);
        self.push(Tensor::vector(y), Op::MatVec { w, v, m, n }, ng)
    }

    pub fn softmax_temp(&mut self, z: NodeId, tau: T) -> NodeId {
        let zd = &self.values[z.0].data;
        let alpha = softmax_temp_eval(zd, tau);
        let ng = self.needs_grad[z.0];
        self.push(Tensor::vector(alpha), Op::SoftmaxTemp { z, tau }, ng)
    }

    pub fn blend(&mut self, alpha: NodeId, xs: &[NodeId]) -> NodeId {
        let m = self.values[alpha.0].numel();
        assert_eq!(m, xs.len(), "blend arity");
        assert!(!xs.is_empty());
        let dims = self.values[xs[0].0].dims.clone();
        let mut out = vec![T::zero(); self.values[xs[0].0].numel()];
        for (mi, x) in xs.iter().enumerate() {
            assert_eq!(self.values[x.0].dims, dims, "blend operand shape");
            let a = self.values[alpha.0].data[mi];
            for (o, v) in out.iter_mut().zip(&self.values[x.0].data) {
                *o = *o + a * *v;
            }
        }
        let mut parents = vec![alpha];
        parents.extend_from_slice(xs);
        let ng = self.any_grad(&parents);
        self.push(
            Tensor::new(dims, out),
            Op::Blend {
                alpha,
                xs: xs.to_vec(),
            },
            ng,
        )
    }

    pub fn sum_sq(&mut self, x: NodeId) -> NodeId {
        let s = self.values[x.0]
            .data
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v);
        let ng = self.needs_grad[x.0];
        self.push(Tensor::scalar(s), Op::SumSq { x }, ng)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let data = self.values[x.0].data.iter().map(|&v| v.sqrt()).collect();
        let dims = self.values[x.0].dims.clone();
        let ng = self.needs_grad[x.0];
        self.push(Tensor::new(dims, data), Op::Sqrt { x }, ng)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let data = self.values[x.0].data.iter().map(|&v| v.ln()).collect();
        let dims = self.values[x.0].dims.clone();
        let ng = self.needs_grad[x.0];
        self.push(Tensor::new(dims, data), Op::Ln { x }, ng)
    }

    pub fn div_broadcast(&mut self, v: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.values[s.0].numel(), 1, "divisor must be scalar");
        let sv = self.values[s.0].data[0];
        let data = self.values[v.0].data.iter().map(|&x| x / sv).collect();
        let dims = self.values[v.0].dims.clone();
        let ng = self.any_grad(&[v, s]);
        self.push(Tensor::new(dims, data), Op::DivBroadcast { v, s }, ng)
    }

    pub fn dot_const(&mut self, x: NodeId, w: &[T]) -> NodeId {
        assert_eq!(self.values[x.0].numel(), w.len(), "dot_const length");
        let s = self.values[x.0]
            .data
            .iter()
            .zip(w)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        let ng = self.needs_grad[x.0];
        self.push(
            Tensor::scalar(s),
            Op::DotConst {
                x,
                w: w.to_vec(),
            },
            ng,
        )
    }

    pub fn mse_vs_const(&mut self, x: NodeId, target: Tensor<T>) -> NodeId {
        assert_eq!(self.values[x.0].numel(), target.numel(), "mse shape");
        let n = T::from_usize(target.numel()).unwrap();
        let s = self.values[x.0]
            .data
            .iter()
            .zip(&target.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        let ng = self.needs_grad[x.0];
        self.push(Tensor::scalar(s / n), Op::MseVsConst { x, target }, ng)
    }

    pub fn stack_scalars(&mut self, xs: &[NodeId]) -> NodeId {
        let data = xs
            .iter()
            .map(|id| {
                assert_eq!(self.values[id.0].numel(), 1);
                self.values[id.0].data[0]
            })
            .collect();
        let ng = self.any_grad(xs);
        self.push(
            Tensor::vector(data),
            Op::StackScalars { xs: xs.to_vec() },
            ng,
        )
    }

    pub fn index_vec(&mut self, v: NodeId, i: usize) -> NodeId {
        let val = self.values[v.0].data[i];
        let ng = self.needs_grad[v.0];
        self.push(Tensor::scalar(val), Op::IndexVec { v, i }, ng)
    }

    pub fn reshape(&mut self, x: NodeId, dims: Vec<usize>) -> NodeId {
        assert_eq!(
            dims.iter().product::<usize>(),
            self.values[x.0].numel(),
            "reshape numel"
        );
        let data = self.values[x.0].data.clone();
        let ng = self.needs_grad[x.0];
        self.push(Tensor::new(dims, data), Op::Reshape { x }, ng)
    }

    /// Reverse sweep from a scalar output; returns one gradient slot per node.
    pub fn backward(&self, output: NodeId) -> Gradients<T> {
        assert_eq!(self.values[output.0].numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        grads[output.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=output.0).rev() {
            if !self.needs_grad[idx] {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: &[T]) {
        if !self.needs_grad[id.0] {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(t) => {
                for (a, b) in t.data.iter_mut().zip(delta) {
                    *a = *a + *b;
                }
            }
            None => {
                *slot = Some(Tensor::new(self.values[id.0].dims.clone(), delta.to_vec()));
            }
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                cin,
                h,
                wdt,
                cout,
                k,
            } => {
                if self.needs_grad[x.0] {
                    let dx = kernel::conv2d_input_grad(
                        &g.data,
                        *cin,
                        *h,
                        *wdt,
                        &self.values[w.0].data,
                        *cout,
                        *k,
                    );
                    self.accumulate(grads, *x, &dx);
                }
                if self.needs_grad[w.0] {
                    let dw = kernel::conv2d_weight_grad(
                        &self.values[x.0].data,
                        *cin,
                        *h,
                        *wdt,
                        &g.data,
                        *cout,
                        *k,
                    );
                    self.accumulate(grads, *w, &dw);
                }
            }
            Op::GaussBlur { x, taps } => {
                if self.needs_grad[x.0] {
                    let gf = Tensor::new(self.values[x.0].dims.clone(), g.data.clone()).to_field();
                    let dx = kernel::gauss_blur(&gf, taps);
                    self.accumulate(grads, *x, dx.data());
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, &g.data);
                self.accumulate(grads, *b, &g.data);
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, &g.data);
                let neg: Vec<T> = g.data.iter().map(|&v| -v).collect();
                self.accumulate(grads, *b, &neg);
            }
            Op::AddConst { a } => {
                self.accumulate(grads, *a, &g.data);
            }
            Op::Scale { a, c } => {
                let d: Vec<T> = g.data.iter().map(|&v| v * *c).collect();
                self.accumulate(grads, *a, &d);
            }
            Op::Mul { a, b } => {
                if self.needs_grad[a.0] {
                    let d: Vec<T> = g
                        .data
                        .iter()
                        .zip(&self.values[b.0].data)
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    self.accumulate(grads, *a, &d);
                }
                if self.needs_grad[b.0] {
                    let d: Vec<T> = g
                        .data
                        .iter()
                        .zip(&self.values[a.0].data)
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.accumulate(grads, *b, &d);
                }
            }
            Op::AddBiasChannel { x, b } => {
                self.accumulate(grads, *x, &g.data);
                if self.needs_grad[b.0] {
                    let dims = &self.values[x.0].dims;
                    let (c, hw) = (dims[0], dims[1] * dims[2]);
                    let db: Vec<T> = (0..c)
                        .map(|ch| g.data[ch * hw..(ch + 1) * hw].iter().copied().sum())
                        .collect();
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Silu { x } => {
                let d: Vec<T> = g
                    .data
                    .iter()
                    .zip(&self.values[x.0].data)
                    .map(|(&gv, &xv)| {
                        let s = sigmoid(xv);
                        gv * s * (T::one() + xv * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *x, &d);
            }
            Op::Tanh { x } => {
                let d: Vec<T> = g
                    .data
                    .iter()
                    .zip(&self.values[idx].data)
                    .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                    .collect();
                self.accumulate(grads, *x, &d);
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.needs_grad[a.0] {
                    let da = linalg::matmul_a_bt(&g.data, &self.values[b.0].data, *m, *n, *k);
                    self.accumulate(grads, *a, &da);
                }
                if self.needs_grad[b.0] {
                    let db = linalg::matmul_at_b(&self.values[a.0].data, &g.data, *m, *k, *n);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::MatVec { w, v, m, n } => {
                if self.needs_grad[w.0] {
                    let mut dw = vec![T::zero(); m * n];
                    for i in 0..*m {
                        let gv = g.data[i];
                        for j in 0..*n {
                            dw[i * n + j] = gv * self.values[v.0].data[j];
                        }
                    }
                    self.accumulate(grads, *w, &dw);
                }
                if self.needs_grad[v.0] {
                    let dv = linalg::matvec_t(&self.values[w.0].data, &g.data, *m, *n);
                    self.accumulate(grads, *v, &dv);
                }
            }
            Op::SoftmaxTemp { z, tau } => {
                let alpha = &self.values[idx].data;
                let dot: T = alpha
                    .iter()
                    .zip(&g.data)
                    .fold(T::zero(), |acc, (&a, &gv)| acc + a * gv);
                let d: Vec<T> = alpha
                    .iter()
                    .zip(&g.data)
                    .map(|(&a, &gv)| a * (gv - dot) / *tau)
                    .collect();
                self.accumulate(grads, *z, &d);
            }
            Op::Blend { alpha, xs } => {
                if self.needs_grad[alpha.0] {
                    let da: Vec<T> = xs
                        .iter()
                        .map(|x| {
                            g.data
                                .iter()
                                .zip(&self.values[x.0].data)
                                .fold(T::zero(), |acc, (&gv, &xv)| acc + gv * xv)
                        })
                        .collect();
                    self.accumulate(grads, *alpha, &da);
                }
                for (mi, x) in xs.iter().enumerate() {
                    if self.needs_grad[x.0] {
                        let a = self.values[alpha.0].data[mi];
                        let d: Vec<T> = g.data.iter().map(|&gv| gv * a).collect();
                        self.accumulate(grads, *x, &d);
                    }
                }
            }
            Op::SumSq { x } => {
                let two = T::of_f64(2.0);
                let gv = g.data[0];
                let d: Vec<T> = self.values[x.0].data.iter().map(|&v| two * gv * v).collect();
                self.accumulate(grads, *x, &d);
            }
            Op::Sqrt { x } => {
                let half = T::of_f64(0.5);
                let d: Vec<T> = g
                    .data
                    .iter()
                    .zip(&self.values[idx].data)
                    .map(|(&gv, &yv)| gv * half / yv)
                    .collect();
                self.accumulate(grads, *x, &d);
            }
            Op::Ln { x } => {
                let d: Vec<T> = g
                    .data
                    .iter()
                    .zip(&self.values[x.0].data)
                    .map(|(&gv, &xv)| gv / xv)
                    .collect();
                self.accumulate(grads, *x, &d);
            }
            Op::DivBroadcast { v, s } => {
                let sv = self.values[s.0].data[0];
                if self.needs_grad[v.0] {
                    let d: Vec<T> = g.data.iter().map(|&gv| gv / sv).collect();
                    self.accumulate(grads, *v, &d);
                }
                if self.needs_grad[s.0] {
                    let acc = g
                        .data
                        .iter()
                        .zip(&self.values[idx].data)
                        .fold(T::zero(), |a, (&gv, &yv)| a + gv * yv);
                    self.accumulate(grads, *s, &[-acc / sv]);
                }
            }
            Op::DotConst { x, w } => {
                let gv = g.data[0];
                let d: Vec<T> = w.iter().map(|&wv| gv * wv).collect();
                self.accumulate(grads, *x, &d);
            }
            Op::MseVsConst { x, target } => {
                let n = T::from_usize(target.numel()).unwrap();
                let gv = g.data[0] * T::of_f64(2.0) / n;
                let d: Vec<T> = self.values[x.0]
                    .data
                    .iter()
                    .zip(&target.data)
                    .map(|(&a, &b)| gv * (a - b))
                    .collect();
                self.accumulate(grads, *x, &d);
            }
            Op::StackScalars { xs } => {
                for (i, x) in xs.iter().enumerate() {
                    self.accumulate(grads, *x, &[g.data[i]]);
                }
            }
            Op::IndexVec { v, i } => {
                if self.needs_grad[v.0] {
                    let mut d = vec![T::zero(); self.values[v.0].numel()];
                    d[*i] = g.data[0];
                    self.accumulate(grads, *v, &d);
                }
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, &g.data);
            }
        }
    }
}

/// Gradient slots produced by a backward sweep.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `id`, or a zero tensor if nothing flowed into it.
    pub fn get(&self, tape: &Tape<T>, id: NodeId) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => tape.value(id).zeros_like(),
        }
    }

    pub fn has(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Plain softmax-with-temperature on a slice (max-shifted for stability).
pub fn softmax_temp_eval<T: Real>(z: &[T], tau: T) -> Vec<T> {
    let mx = z.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = z.iter().map(|&v| ((v - mx) / tau).exp()).collect();
    let s: T = exps.iter().copied().sum();
    exps.iter().map(|&e| e / s).collect()
}

/// Report from a central-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub n_params: usize,
}

/// Compare an analytic gradient against central differences with step
/// h = 1e-5 * (1 + |theta_i|); the error metric is
/// |analytic - numeric| / max(1, |numeric|), maximized over parameters.
pub fn grad_check<FV, FG>(f_value: FV, f_grad: FG, theta: &[f64]) -> Result<GradCheckReport>
where
    FV: Fn(&[f64]) -> Result<f64>,
    FG: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let analytic = f_grad(theta)?;
    if analytic.len() != theta.len() {
        return Err(FeraError::Shape(format!(
            "gradient length {} != parameter length {}",
            analytic.len(),
            theta.len()
        )));
    }
    for (i, gv) in analytic.iter().enumerate() {
        if !gv.is_finite() {
            return Err(FeraError::Numeric(format!(
                "non-finite gradient for parameter {i}"
            )));
        }
    }
    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    let mut point = theta.to_vec();
    for i in 0..theta.len() {
        let h = 1e-5 * (1.0 + theta[i].abs());
        point[i] = theta[i] + h;
        let fp = f_value(&point)?;
        point[i] = theta[i] - h;
        let fm = f_value(&point)?;
        point[i] = theta[i];
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_param: worst,
        n_params: theta.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;

    /// Helper: check a tape-built scalar function of a flat parameter vector.
    fn check_tape_fn<F>(build: F, theta: &[f64]) -> f64
    where
        F: Fn(&mut Tape<f64>, NodeId) -> NodeId,
    {
        let report = grad_check(
            |t| {
                let mut tape = Tape::new();
                let p = tape.param(Tensor::vector(t.to_vec()));
                let out = build(&mut tape, p);
                Ok(tape.value(out).item())
            },
            |t| {
                let mut tape = Tape::new();
                let p = tape.param(Tensor::vector(t.to_vec()));
                let out = build(&mut tape, p);
                let grads = tape.backward(out);
                Ok(grads.get(&tape, p).data)
            },
            theta,
        )
        .unwrap();
        report.max_rel_err
    }

    #[test]
    fn quadratic_is_nearly_exact() {
        let theta = [1.5, -2.0, 0.25, 3.0];
        let err = check_tape_fn(|tape, p| tape.sum_sq(p), &theta);
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn softmax_cross_entropy_matches_central_differences() {
        let theta = [0.3, -1.2, 0.8, 0.1];
        let err = check_tape_fn(
            |tape, p| {
                let alpha = tape.softmax_temp(p, 1.0);
                let picked = tape.index_vec(alpha, 2);
                let lp = tape.ln(picked);
                tape.scale(lp, -1.0)
            },
            &theta,
        );
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = keyed_rng(5, "ad-conv", &[]);
        let x0: Vec<f64> = (0..2 * 6 * 6).map(|_| f64::std_normal(&mut rng)).collect();
        let w0: Vec<f64> = (0..3 * 2 * 9).map(|_| f64::std_normal(&mut rng)).collect();
        let probe: Vec<f64> = (0..3 * 6 * 6).map(|_| f64::std_normal(&mut rng)).collect();
        // d/d(x,w) of dot(probe, conv2d(x, w))
        let n_x = x0.len();
        let mut theta = x0.clone();
        theta.extend_from_slice(&w0);
        let build = |t: &[f64], tape: &mut Tape<f64>| -> (NodeId, NodeId, NodeId) {
            let x = tape.param(Tensor::new(vec![2, 6, 6], t[..n_x].to_vec()));
            let w = tape.param(Tensor::new(vec![3, 2, 3, 3], t[n_x..].to_vec()));
            let y = tape.conv2d(x, w, 3, 3);
            (x, w, y)
        };
        let report = grad_check(
            |t| {
                let mut tape = Tape::new();
                let (_, _, y) = build(t, &mut tape);
                let s = tape.dot_const(y, &probe);
                Ok(tape.value(s).item())
            },
            |t| {
                let mut tape = Tape::new();
                let (x, w, y) = build(t, &mut tape);
                let s = tape.dot_const(y, &probe);
                let grads = tape.backward(s);
                let mut g = grads.get(&tape, x).data;
                g.extend(grads.get(&tape, w).data);
                Ok(g)
            },
            &theta,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn blur_blend_norm_pipeline_gradients() {
        let mut rng = keyed_rng(6, "ad-pipe", &[]);
        let taps = crate::kernel::gaussian_taps_1d(0.8, 5).unwrap();
        let n = 8 * 8;
        let theta: Vec<f64> = (0..2 * n + 2).map(|_| f64::std_normal(&mut rng)).collect();
        let err = {
            let build = |t: &[f64], tape: &mut Tape<f64>| {
                let a = tape.param(Tensor::new(vec![1, 8, 8], t[..n].to_vec()));
                let b = tape.param(Tensor::new(vec![1, 8, 8], t[n..2 * n].to_vec()));
                let logits = tape.param(Tensor::vector(t[2 * n..].to_vec()));
                let alpha = tape.softmax_temp(logits, 0.7);
                let ab = tape.gauss_blur(a, &taps);
                let bb = tape.silu(b);
                let mix = tape.blend(alpha, &[ab, bb]);
                let ss = tape.sum_sq(mix);
                let nrm = tape.sqrt(ss);
                let one = tape.constant(Tensor::scalar(1.0));
                let ssp = tape.add(ss, one);
                tape.div_broadcast(nrm, ssp)
            };
            grad_check(
                |t| {
                    let mut tape = Tape::new();
                    let out = build(t, &mut tape);
                    Ok(tape.value(out).item())
                },
                |t| {
                    let mut tape = Tape::new();
                    let nleaf = 2 * n;
                    let out = build(t, &mut tape);
                    let grads = tape.backward(out);
                    let mut g = grads.get(&tape, NodeId(0)).data;
                    g.extend(grads.get(&tape, NodeId(1)).data);
                    g.extend(grads.get(&tape, NodeId(2)).data);
                    assert_eq!(g.len(), nleaf + 2);
                    Ok(g)
                },
                &theta,
            )
            .unwrap()
            .max_rel_err
        };
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn constant_leaves_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let p = tape.param(Tensor::vector(vec![3.0, 4.0]));
        let s = tape.mul(c, p);
        let out = tape.sum_sq(s);
        let grads = tape.backward(out);
        assert!(!grads.has(c));
        assert!(grads.has(p));
    }

    #[test]
    fn non_finite_gradient_reports_parameter() {
        let r = grad_check(
            |t| Ok(t[0]),
            |_| Ok(vec![f64::NAN]),
            &[1.0],
        );
        match r {
            Err(FeraError::Numeric(msg)) => assert!(msg.contains("parameter 0")),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_matvec_bias_gradients() {
        let mut rng = keyed_rng(8, "ad-mm", &[]);
        let theta: Vec<f64> = (0..2 * 3 + 3 * 2 + 2).map(|_| f64::std_normal(&mut rng)).collect();
        let err = {
            let build = |t: &[f64], tape: &mut Tape<f64>| {
                let a = tape.param(Tensor::new(vec![2, 3], t[..6].to_vec()));
                let b = tape.param(Tensor::new(vec![3, 2], t[6..12].to_vec()));
                let v = tape.param(Tensor::vector(t[12..].to_vec()));
                let c = tape.matmul(a, b, 2, 3, 2); // 2x2
                let y = tape.matvec(c, v, 2, 2);
                let th = tape.tanh(y);
                tape.sum_sq(th)
            };
            grad_check(
                |t| {
                    let mut tape = Tape::new();
                    let out = build(t, &mut tape);
                    Ok(tape.value(out).item())
                },
                |t| {
                    let mut tape = Tape::new();
                    let out = build(t, &mut tape);
                    let grads = tape.backward(out);
                    let mut g = grads.get(&tape, NodeId(0)).data;
                    g.extend(grads.get(&tape, NodeId(1)).data);
                    g.extend(grads.get(&tape, NodeId(2)).data);
                    Ok(g)
                },
                &theta,
            )
            .unwrap()
            .max_rel_err
        };
        assert!(err < 1e-6, "rel err {err}");
    }
}
