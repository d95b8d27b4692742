//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an arena of nodes. Every operation appends one node holding
//! its forward value and the information needed by its backward rule, so
//! node order is a topological order by construction. [`Tape::backward`]
//! walks the arena in reverse and returns [`Gradients`] indexed by [`Var`].
//!
//! The operator set is deliberately small: matmul, conv1d, the four
//! broadcasting arithmetic ops, sum/mean reductions, transpose, reshape,
//! concat, slice, softmax, log-softmax, layer norm, GELU, tanh, dropout,
//! sqrt and the L2 norm. Everything else in the crate is composed from these.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{strides_of, swap_axes, Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batched: bool,
    },
    Add {
        a: Var,
        b: Var,
        plan: Broadcast,
    },
    Sub {
        a: Var,
        b: Var,
        plan: Broadcast,
    },
    Mul {
        a: Var,
        b: Var,
        plan: Broadcast,
    },
    Div {
        a: Var,
        b: Var,
        plan: Broadcast,
    },
    Scale {
        a: Var,
        factor: T,
    },
    AddScalar {
        a: Var,
    },
    Sum {
        a: Var,
        axis: usize,
    },
    Mean {
        a: Var,
        axis: usize,
    },
    SumAll {
        a: Var,
    },
    MeanAll {
        a: Var,
    },
    Transpose {
        a: Var,
        d0: usize,
        d1: usize,
    },
    Reshape {
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LogSoftmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    Sqrt {
        a: Var,
    },
    L2Norm {
        a: Var,
        axis: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// How the right operand of a binary op maps onto the left operand's shape.
#[derive(Clone, Debug)]
enum Broadcast {
    Same,
    /// Right operand repeats every `n` elements.
    Suffix(usize),
    /// Offset into the right operand for every output element.
    Gather(Vec<usize>),
}

impl Broadcast {
    fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        let b_len: usize = b.iter().product();
        if b_len == 1 {
            return Ok(Broadcast::Suffix(1));
        }
        if b.len() > a.len() {
            return Err(Error::shape(op, a, b));
        }
        let offset = a.len() - b.len();
        // Strip leading ones so that e.g. [1, 33, 64] against [n, 33, 64] is a suffix.
        let trimmed: Vec<usize> = b.iter().copied().skip_while(|&d| d == 1).collect();
        if a.ends_with(&trimmed) {
            return Ok(Broadcast::Suffix(b_len));
        }
        let mut b_strides = vec![0usize; a.len()];
        let bs = strides_of(b);
        for (i, &d) in b.iter().enumerate() {
            let ad = a[offset + i];
            if d == ad {
                b_strides[offset + i] = bs[i];
            } else if d != 1 {
                return Err(Error::shape(op, a, b));
            }
        }
        let total: usize = a.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; a.len()];
        for _ in 0..total {
            map.push(idx.iter().zip(&b_strides).map(|(i, s)| i * s).sum());
            for d in (0..a.len()).rev() {
                idx[d] += 1;
                if idx[d] < a[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Broadcast::Gather(map))
    }

    #[inline]
    fn b_index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(n) => i % n,
            Broadcast::Gather(map) => map[i],
        }
    }

    fn zip<T: Element>(&self, a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
        match self {
            Broadcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Suffix(n) => {
                let mut out = Vec::with_capacity(a.len());
                for chunk in a.chunks(*n) {
                    out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            Broadcast::Gather(map) => a.iter().zip(map).map(|(&x, &j)| f(x, b[j])).collect(),
        }
    }

    /// Sums per-output-element contributions back onto the right operand.
    fn reduce<T: Element>(&self, contrib: impl Iterator<Item = T>, b_len: usize) -> Vec<T> {
        match self {
            Broadcast::Same => contrib.collect(),
            _ => {
                let mut out = vec![T::zero(); b_len];
                for (i, v) in contrib.enumerate() {
                    let j = self.b_index(i);
                    out[j] = out[j] + v;
                }
                out
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient buffer of `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v`, zero-filled when `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Vec<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![T::zero(); self.shapes[v.0].iter().product()],
        }
    }
}

/// Recording context for one forward/backward pass.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    training: bool,
    rng: ChaCha8Rng,
    bound: Vec<Option<Var>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    /// Inference tape: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            bound: Vec::new(),
        }
    }

    /// Training tape: dropout masks are drawn from a stream seeded by `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bound: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced by op on tape node {}",
            self.nodes.len()
        );
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; gradients flow into it iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Binds parameter `id` of `store` as a leaf, once per tape.
    ///
    /// A tape must only ever be used with a single store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let i = id.index();
        if self.bound.len() <= i {
            self.bound.resize(i + 1, None);
        }
        if let Some(v) = self.bound[i] {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.bound[i] = Some(v);
        v
    }

    /// Parameters bound so far, paired with their leaf nodes.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId::new(i), v)))
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product.
    ///
    /// Accepts `[.., m, k] x [k, n]` (leading dims of the left operand are
    /// flattened into rows) and the batched form `[b, m, k] x [b, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        let m = sa[sa.len() - 2];
        let rg = self.rg(&[a, b]);
        if sb.len() == 2 {
            if sb[0] != k {
                return Err(Error::shape("matmul", &sa, &sb));
            }
            let n = sb[1];
            let rows = sa[..sa.len() - 1].iter().product::<usize>();
            let mut out = vec![T::zero(); rows * n];
            T::gemm(
                rows,
                k,
                n,
                T::one(),
                self.value(a),
                (k as isize, 1),
                self.value(b),
                (n as isize, 1),
                T::zero(),
                &mut out,
                (n as isize, 1),
            );
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            return Ok(self.push(shape, out, Op::MatMul { a, b, batched: false }, rg));
        }
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sb[1] != k {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (batch, n) = (sa[0], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &av[i * m * k..(i + 1) * m * k],
                    (k as isize, 1),
                    &bv[i * k * n..(i + 1) * k * n],
                    (n as isize, 1),
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    (n as isize, 1),
                );
            }
        }
        Ok(self.push(vec![batch, m, n], out, Op::MatMul { a, b, batched: true }, rg))
    }

    /// One-dimensional cross-correlation.
    ///
    /// `x` is `[c_in, t]` or `[batch, c_in, t]`, `kernels` is `[c_out, c_in, k]`;
    /// the output is `[c_out, t_out]` (or batched) with
    /// `t_out = (t + 2 * padding - k) / stride + 1`.
    pub fn conv1d(&mut self, x: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(kernels).to_vec();
        let (batch, c_in, t, batched) = match sx.as_slice() {
            [c, t] => (1, *c, *t, false),
            [b, c, t] => (*b, *c, *t, true),
            _ => return Err(Error::shape("conv1d", &sx, &sw)),
        };
        if sw.len() != 3 || sw[1] != c_in || stride == 0 {
            return Err(Error::shape("conv1d", &sx, &sw));
        }
        let (c_out, k) = (sw[0], sw[2]);
        if t + 2 * padding < k || k == 0 {
            return Err(Error::shape("conv1d", &sx, &sw));
        }
        let t_out = (t + 2 * padding - k) / stride + 1;
        let cink = c_in * k;
        let mut out = vec![T::zero(); batch * c_out * t_out];
        {
            let xv = self.value(x);
            let wv = self.value(kernels);
            let mut cols = vec![T::zero(); t_out * cink];
            for bi in 0..batch {
                im2col(
                    &xv[bi * c_in * t..(bi + 1) * c_in * t],
                    c_in,
                    t,
                    k,
                    stride,
                    padding,
                    t_out,
                    &mut cols,
                );
                // out_b[c, o] = sum_j cols[o, j] * w[c, j]
                T::gemm(
                    t_out,
                    cink,
                    c_out,
                    T::one(),
                    &cols,
                    (cink as isize, 1),
                    wv,
                    (1, cink as isize),
                    T::zero(),
                    &mut out[bi * c_out * t_out..(bi + 1) * c_out * t_out],
                    (1, t_out as isize),
                );
            }
        }
        let shape = if batched {
            vec![batch, c_out, t_out]
        } else {
            vec![c_out, t_out]
        };
        let rg = self.rg(&[x, kernels]);
        Ok(self.push(
            shape,
            out,
            Op::Conv1d {
                x,
                w: kernels,
                stride,
                padding,
            },
            rg,
        ))
    }

    // ---- element-wise ---------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(Broadcast) -> Op<T>,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let plan = Broadcast::plan(name, &sa, self.shape(b))?;
        let out = plan.zip(self.value(a), self.value(b), f);
        let rg = self.rg(&[a, b]);
        Ok(self.push(sa, out, make(plan), rg))
    }

    /// `a + b`, with `b` broadcast to the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |plan| Op::Add { a, b, plan })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |plan| Op::Sub { a, b, plan })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |plan| Op::Mul { a, b, plan })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, |plan| Op::Div { a, b, plan })
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).iter().map(|&v| v * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Scale { a, factor }, rg)
    }

    /// Addition of a constant scalar.
    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&v| v + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::AddScalar { a }, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, make: impl FnOnce() -> Op<T>) -> Var {
        let out = self.value(a).iter().map(|&v| f(v)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, make(), rg)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let half = T::from_f64_lossy(0.5);
        let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
        self.unary(a, |x| half * x * (T::one() + (x * inv_sqrt2).erf()), || Op::Gelu { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), || Op::Tanh { a })
    }

    /// Square root. The backward rule treats outputs below `1e-12` as
    /// `1e-12`, which keeps the gradient of `sqrt(0)` finite.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()).sqrt(), || Op::Sqrt { a })
    }

    /// Inverted dropout. Identity on inference tapes or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return a;
        }
        assert!(p < 1.0, "dropout rate must be below 1");
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let len = self.value(a).len();
        let mask: Vec<T> = (0..len)
            .map(|_| if self.rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Dropout { a, mask }, rg)
    }

    // ---- reductions -----------------------------------------------------

    fn reduce_axis(&mut self, a: Var, axis: usize, keepdim: bool, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::arg(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let av = self.value(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &av[(o * len + j) * inner..(o * len + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
            }
        }
        if mean {
            let inv = T::one() / T::from_usize(len).unwrap();
            out.iter_mut().for_each(|v| *v = *v * inv);
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let rg = self.rg(&[a]);
        let op = if mean {
            Op::Mean { a, axis }
        } else {
            Op::Sum { a, axis }
        };
        Ok(self.push(out_shape, out, op, rg))
    }

    pub fn sum(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce_axis(a, axis, keepdim, false)
    }

    pub fn mean(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce_axis(a, axis, keepdim, true)
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::SumAll { a }, rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().fold(T::zero(), |acc, &x| acc + x) / T::from_usize(v.len().max(1)).unwrap();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::MeanAll { a }, rg)
    }

    /// Euclidean norm along `axis`, keeping the reduced axis as size 1.
    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::arg(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let av = self.value(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = T::zero();
                for j in 0..len {
                    let x = av[(o * len + j) * inner + i];
                    s = s + x * x;
                }
                out[o * inner + i] = s.sqrt();
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(&[a]);
        Ok(self.push(out_shape, out, Op::L2Norm { a, axis }, rg))
    }

    // ---- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(a);
        if shape.iter().product::<usize>() != from.iter().product::<usize>() {
            return Err(Error::shape("reshape", from, shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, rg))
    }

    /// Exchanges two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if d0 >= shape.len() || d1 >= shape.len() {
            return Err(Error::arg(format!("transpose axes ({d0}, {d1}) for {shape:?}")));
        }
        let out = swap_axes(self.value(a), &shape, d0, d1);
        let mut out_shape = shape;
        out_shape.swap(d0, d1);
        let rg = self.rg(&[a]);
        Ok(self.push(out_shape, out, Op::Transpose { a, d0, d1 }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::arg("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::arg(format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::arg(format!("slice {start}..{end} on axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let av = self.value(a);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&av[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let rg = self.rg(&[a]);
        Ok(self.push(out_shape, out, Op::Slice { a, axis, start }, rg))
    }

    // ---- normalisation --------------------------------------------------

    fn softmax_impl(&mut self, a: Var, axis: usize, log: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::arg(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let av = self.value(a);
        let mut out = vec![T::zero(); av.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(av[at(j)]));
                let mut denom = T::zero();
                for j in 0..len {
                    let e = (av[at(j)] - max).exp();
                    out[at(j)] = e;
                    denom = denom + e;
                }
                if log {
                    let log_denom = denom.ln();
                    for j in 0..len {
                        out[at(j)] = av[at(j)] - max - log_denom;
                    }
                } else {
                    for j in 0..len {
                        out[at(j)] = out[at(j)] / denom;
                    }
                }
            }
        }
        let rg = self.rg(&[a]);
        let op = if log {
            Op::LogSoftmax { a, axis }
        } else {
            Op::Softmax { a, axis }
        };
        Ok(self.push(shape, out, op, rg))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, true)
    }

    /// Layer normalisation over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::arg("layer_norm of a scalar"))?;
        if self.shape(gamma).iter().product::<usize>() != d || self.shape(beta).iter().product::<usize>() != d {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let rows = self.value(x).len() / d.max(1);
        let eps = T::from_f64_lossy(eps);
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![T::zero(); xv.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_d;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * gv[j] + bv[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from `root` with seed gradient 1 on every element.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let seed = vec![T::one(); self.nodes[root.0].value.len()];
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: Var, seed: Vec<T>) -> Gradients<T> {
        assert_eq!(seed.len(), self.nodes[root.0].value.len(), "seed length");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let shp = |v: Var| self.nodes[v.0].shape.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, batched } => {
                let (sa, sb) = (shp(*a), shp(*b));
                let k = sa[sa.len() - 1];
                if !batched {
                    let n = sb[1];
                    let rows = val(*a).len() / k;
                    if self.needs(*a) {
                        let mut da = vec![T::zero(); rows * k];
                        T::gemm(
                            rows,
                            n,
                            k,
                            T::one(),
                            g,
                            (n as isize, 1),
                            val(*b),
                            (1, n as isize),
                            T::zero(),
                            &mut da,
                            (k as isize, 1),
                        );
                        accumulate(grads, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); k * n];
                        T::gemm(
                            k,
                            rows,
                            n,
                            T::one(),
                            val(*a),
                            (1, k as isize),
                            g,
                            (n as isize, 1),
                            T::zero(),
                            &mut db,
                            (n as isize, 1),
                        );
                        accumulate(grads, *b, db);
                    }
                } else {
                    let (batch, m, n) = (sa[0], sa[1], sb[2]);
                    if self.needs(*a) {
                        let mut da = vec![T::zero(); batch * m * k];
                        let bv = val(*b);
                        for i in 0..batch {
                            T::gemm(
                                m,
                                n,
                                k,
                                T::one(),
                                &g[i * m * n..(i + 1) * m * n],
                                (n as isize, 1),
                                &bv[i * k * n..(i + 1) * k * n],
                                (1, n as isize),
                                T::zero(),
                                &mut da[i * m * k..(i + 1) * m * k],
                                (k as isize, 1),
                            );
                        }
                        accumulate(grads, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); batch * k * n];
                        let av = val(*a);
                        for i in 0..batch {
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                &av[i * m * k..(i + 1) * m * k],
                                (1, k as isize),
                                &g[i * m * n..(i + 1) * m * n],
                                (n as isize, 1),
                                T::zero(),
                                &mut db[i * k * n..(i + 1) * k * n],
                                (n as isize, 1),
                            );
                        }
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::Conv1d { x, w, stride, padding } => {
                let sx = shp(*x);
                let sw = shp(*w);
                let (batch, c_in, t) = match sx {
                    [c, t] => (1, *c, *t),
                    [b, c, t] => (*b, *c, *t),
                    _ => unreachable!(),
                };
                let (c_out, k) = (sw[0], sw[2]);
                let t_out = (t + 2 * padding - k) / stride + 1;
                let cink = c_in * k;
                let xv = val(*x);
                let wv = val(*w);
                let mut cols = vec![T::zero(); t_out * cink];
                let mut dw = self.needs(*w).then(|| vec![T::zero(); c_out * cink]);
                let mut dx = self.needs(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dcols = vec![T::zero(); t_out * cink];
                for bi in 0..batch {
                    let gb = &g[bi * c_out * t_out..(bi + 1) * c_out * t_out];
                    if let Some(dw) = dw.as_mut() {
                        im2col(
                            &xv[bi * c_in * t..(bi + 1) * c_in * t],
                            c_in,
                            t,
                            k,
                            *stride,
                            *padding,
                            t_out,
                            &mut cols,
                        );
                        T::gemm(
                            c_out,
                            t_out,
                            cink,
                            T::one(),
                            gb,
                            (t_out as isize, 1),
                            &cols,
                            (cink as isize, 1),
                            T::one(),
                            dw,
                            (cink as isize, 1),
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        T::gemm(
                            t_out,
                            c_out,
                            cink,
                            T::one(),
                            gb,
                            (1, t_out as isize),
                            wv,
                            (cink as isize, 1),
                            T::zero(),
                            &mut dcols,
                            (cink as isize, 1),
                        );
                        col2im(
                            &dcols,
                            c_in,
                            t,
                            k,
                            *stride,
                            *padding,
                            t_out,
                            &mut dx[bi * c_in * t..(bi + 1) * c_in * t],
                        );
                    }
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
            }
            Op::Add { a, b, plan } => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    let gb = plan.reduce(g.iter().copied(), val(*b).len());
                    accumulate(grads, *b, gb);
                }
            }
            Op::Sub { a, b, plan } => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    let gb = plan.reduce(g.iter().map(|&v| -v), val(*b).len());
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul { a, b, plan } => {
                let (av, bv) = (val(*a), val(*b));
                if self.needs(*a) {
                    let ga = g.iter().enumerate().map(|(i, &gi)| gi * bv[plan.b_index(i)]).collect();
                    accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = plan.reduce(g.iter().zip(av).map(|(&gi, &x)| gi * x), bv.len());
                    accumulate(grads, *b, gb);
                }
            }
            Op::Div { a, b, plan } => {
                let bv = val(*b);
                if self.needs(*a) {
                    let ga = g.iter().enumerate().map(|(i, &gi)| gi / bv[plan.b_index(i)]).collect();
                    accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let out = &node.value;
                    let gb = plan.reduce(
                        g.iter().enumerate().map(|(i, &gi)| -gi * out[i] / bv[plan.b_index(i)]),
                        bv.len(),
                    );
                    accumulate(grads, *b, gb);
                }
            }
            Op::Scale { a, factor } => {
                accumulate(grads, *a, g.iter().map(|&v| v * *factor).collect());
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                accumulate(grads, *a, g.to_vec());
            }
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let (outer, len, inner) = split_axis(shp(*a), *axis);
                let factor = if matches!(node.op, Op::Mean { .. }) {
                    T::one() / T::from_usize(len).unwrap()
                } else {
                    T::one()
                };
                let mut ga = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            ga[(o * len + j) * inner + i] = g[o * inner + i] * factor;
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SumAll { a } => {
                accumulate(grads, *a, vec![g[0]; val(*a).len()]);
            }
            Op::MeanAll { a } => {
                let n = val(*a).len();
                let v = g[0] / T::from_usize(n.max(1)).unwrap();
                accumulate(grads, *a, vec![v; n]);
            }
            Op::Transpose { a, d0, d1 } => {
                let ga = swap_axes(g, &node.shape, *d0, *d1);
                accumulate(grads, *a, ga);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = shp(p)[*axis];
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        accumulate(grads, p, gp);
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, len, inner) = split_axis(shp(*a), *axis);
                let width = node.shape[*axis];
                let mut ga = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    ga[dst..dst + width * inner].copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                }
                accumulate(grads, *a, ga);
            }
            Op::Softmax { a, axis } | Op::LogSoftmax { a, axis } => {
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let mut ga = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        if log {
                            let gsum = (0..len).fold(T::zero(), |s, j| s + g[at(j)]);
                            for j in 0..len {
                                ga[at(j)] = g[at(j)] - y[at(j)].exp() * gsum;
                            }
                        } else {
                            let dot = (0..len).fold(T::zero(), |s, j| s + g[at(j)] * y[at(j)]);
                            for j in 0..len {
                                ga[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let rows = mean.len();
                let (xv, gv) = (val(*x), val(*gamma));
                let inv_d = T::one() / T::from_usize(d).unwrap();
                let mut dx = self.needs(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        let xhat = (row[j] - mu) * rs;
                        dg[j] = dg[j] + gr[j] * xhat;
                        db[j] = db[j] + gr[j];
                        dxhat[j] = gr[j] * gv[j];
                        sum_dxhat = sum_dxhat + dxhat[j];
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat[j] * xhat;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let m1 = sum_dxhat * inv_d;
                        let m2 = sum_dxhat_xhat * inv_d;
                        for j in 0..d {
                            let xhat = (row[j] - mu) * rs;
                            dx[r * d + j] = rs * (dxhat[j] - m1 - xhat * m2);
                        }
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, dg);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, db);
                }
            }
            Op::Gelu { a } => {
                let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt2pi =
                    T::from_f64_lossy(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
                let half = T::from_f64_lossy(0.5);
                let ga = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&gi, &x)| {
                        let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                        let pdf = inv_sqrt2pi * (-half * x * x).exp();
                        gi * (cdf + x * pdf)
                    })
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::Tanh { a } => {
                let ga = g
                    .iter()
                    .zip(&node.value)
                    .map(|(&gi, &y)| gi * (T::one() - y * y))
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::Dropout { a, mask } => {
                accumulate(grads, *a, g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect());
            }
            Op::Sqrt { a } => {
                let floor = T::from_f64_lossy(1e-12);
                let two = T::from_f64_lossy(2.0);
                let ga = g
                    .iter()
                    .zip(&node.value)
                    .map(|(&gi, &y)| gi / (two * y.max(floor)))
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::L2Norm { a, axis } => {
                let (outer, len, inner) = split_axis(shp(*a), *axis);
                let av = val(*a);
                let norms = &node.value;
                let mut ga = vec![T::zero(); av.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let n = norms[o * inner + i];
                        if n > T::zero() {
                            let gn = g[o * inner + i] / n;
                            for j in 0..len {
                                let at = (o * len + j) * inner + i;
                                ga[at] = gn * av[at];
                            }
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
        }
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e = *e + x),
        slot @ None => *slot = Some(g),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &[T],
    c_in: usize,
    t: usize,
    k: usize,
    stride: usize,
    padding: usize,
    t_out: usize,
    cols: &mut [T],
) {
    let cink = c_in * k;
    for o in 0..t_out {
        for c in 0..c_in {
            for j in 0..k {
                let pos = (o * stride + j) as isize - padding as isize;
                cols[o * cink + c * k + j] = if pos >= 0 && (pos as usize) < t {
                    x[c * t + pos as usize]
                } else {
                    T::zero()
                };
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(
    cols: &[T],
    c_in: usize,
    t: usize,
    k: usize,
    stride: usize,
    padding: usize,
    t_out: usize,
    dx: &mut [T],
) {
    let cink = c_in * k;
    for o in 0..t_out {
        for c in 0..c_in {
            for j in 0..k {
                let pos = (o * stride + j) as isize - padding as isize;
                if pos >= 0 && (pos as usize) < t {
                    let at = c * t + pos as usize;
                    dx[at] = dx[at] + cols[o * cink + c * k + j];
                }
            }
        }
    }
}
