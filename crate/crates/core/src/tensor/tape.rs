use std::collections::HashMap;

use super::kernels::{self, col2im, gemm, im2col, inverse_perm, ConvGeom};
use super::{numel, ParamId, Real, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Sigmoid,
    Tanh,
    Silu,
    Relu,
    Softplus,
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Silu => x * sigmoid(x),
            Unary::Relu => x.max(T::zero()),
            Unary::Softplus => softplus(x),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        let one = T::one();
        match self {
            Unary::Neg => -one,
            Unary::Exp => y,
            Unary::Log => one / x,
            Unary::Sqrt => T::of(0.5) / y,
            Unary::Square => x + x,
            Unary::Sigmoid => y * (one - y),
            Unary::Tanh => one - y * y,
            Unary::Silu => {
                let s = sigmoid(x);
                s + x * s * (one - s)
            }
            Unary::Relu => {
                if x > T::zero() {
                    one
                } else {
                    T::zero()
                }
            }
            Unary::Softplus => sigmoid(x),
        }
    }
}

/// How `b` is laid over `a` in a broadcasting binary op: `b[(i / inner) % len]`.
#[derive(Debug, Clone, Copy)]
struct Bcast {
    inner: usize,
    len: usize,
}

impl Bcast {
    fn plan(a: &[usize], b: &[usize]) -> Result<Self> {
        if b.len() > a.len() {
            return dim_err(format!("cannot broadcast {b:?} into {a:?}"));
        }
        let off = a.len() - b.len();
        let first = b.iter().position(|&d| d != 1);
        let Some(first) = first else {
            return Ok(Bcast { inner: 1, len: 1 });
        };
        let last = b.iter().rposition(|&d| d != 1).unwrap();
        for (i, &d) in b.iter().enumerate().take(last + 1).skip(first) {
            if d != a[off + i] {
                return dim_err(format!("cannot broadcast {b:?} into {a:?}"));
            }
        }
        Ok(Bcast {
            inner: numel(&a[off + last + 1..]),
            len: numel(&b[first..=last]),
        })
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        (i / self.inner) % self.len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary {
        kind: Binary,
        a: usize,
        b: usize,
        plan: Bcast,
    },
    Unary {
        kind: Unary,
        x: usize,
    },
    Scale {
        x: usize,
        by: T,
    },
    AddScalar {
        x: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Upsample2x {
        x: usize,
        planes: usize,
        h: usize,
        w: usize,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<usize>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: usize,
        outer: usize,
        full: usize,
        start: usize,
        width: usize,
    },
    Reverse {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAll {
        x: usize,
    },
    SumAxis {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gamma: Option<usize>,
        beta: Option<usize>,
        len: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GroupNorm {
        x: usize,
        gamma: Option<usize>,
        beta: Option<usize>,
        channels: usize,
        groups: usize,
        spatial: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GlobalMaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
        classes: usize,
    },
    Gather {
        table: usize,
        indices: Vec<usize>,
        width: usize,
    },
    StraightThrough {
        src: usize,
    },
    Recurrence {
        decay: usize,
        drive: usize,
        h0: Option<usize>,
        batch: usize,
        len: usize,
        dim: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of one forward pass.
///
/// Nodes are appended in execution order, so every node's inputs precede
/// it and [`Tape::backward`] can walk the record in reverse.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Vec<usize>>,
    grad_enabled: bool,
    strict: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            strict: true,
        }
    }

    /// A tape that records values only; nothing on it is differentiable.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Disables the domain checks of `log`, `sqrt` and `div`.
    pub fn lenient(mut self) -> Self {
        self.strict = false;
        self
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

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Copies a node out as a fresh constant tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node is well-formed")
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: &[usize]) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, inputs: &[usize]) -> bool {
        self.grad_enabled && inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a persistent tensor. Gradients flow to it when it requires grad.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled && t.requires_grad();
        self.nodes.push(Node {
            value: t.data().to_vec(),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
            requires_grad,
        });
        let idx = self.nodes.len() - 1;
        if requires_grad {
            self.params.entry(t.id()).or_default().push(idx);
        }
        Var(idx)
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.raw(t.shape().to_vec(), t.data().to_vec())
    }

    pub fn raw(&mut self, shape: Vec<usize>, data: Vec<T>) -> Var {
        assert_eq!(numel(&shape), data.len(), "raw: shape/data mismatch");
        self.nodes.push(Node {
            value: data,
            shape,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.raw(vec![1], vec![v])
    }

    /// A differentiable leaf that is not tied to a persistent tensor.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: t.data().to_vec(),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.raw(shape, value)
    }

    // ----- elementwise -------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let plan = Bcast::plan(&self.nodes[a.0].shape, &self.nodes[b.0].shape)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if self.strict && kind == Binary::Div && bv.iter().any(|&v| v == T::zero()) {
            return Err(Error::Domain("division by zero".into()));
        }
        let out: Vec<T> = match kind {
            Binary::Add => av.iter().enumerate().map(|(i, &x)| x + bv[plan.at(i)]).collect(),
            Binary::Sub => av.iter().enumerate().map(|(i, &x)| x - bv[plan.at(i)]).collect(),
            Binary::Mul => av.iter().enumerate().map(|(i, &x)| x * bv[plan.at(i)]).collect(),
            Binary::Div => av.iter().enumerate().map(|(i, &x)| x / bv[plan.at(i)]).collect(),
        };
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(out, shape, Op::Binary { kind, a: a.0, b: b.0, plan }, &[a.0, b.0]))
    }

    /// `a + b`, with `b` broadcast into `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if self.strict {
            match kind {
                Unary::Log if xv.iter().any(|&v| v <= T::zero()) => {
                    return Err(Error::Domain("log of a non-positive value".into()))
                }
                Unary::Sqrt if xv.iter().any(|&v| v < T::zero()) => {
                    return Err(Error::Domain("sqrt of a negative value".into()))
                }
                _ => {}
            }
        }
        let out = xv.iter().map(|&v| kind.apply(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(out, shape, Op::Unary { kind, x: x.0 }, &[x.0]))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x).expect("neg is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x).expect("exp is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x).expect("square is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x).expect("tanh is total")
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Unary::Silu, x).expect("silu is total")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x).expect("relu is total")
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x).expect("softplus is total")
    }

    pub fn scale(&mut self, x: Var, by: T) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| v * by).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(out, shape, Op::Scale { x: x.0, by }, &[x.0])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| v + c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(out, shape, Op::AddScalar { x: x.0 }, &[x.0])
    }

    // ----- linear algebra ----------------------------------------------

    /// `[.., m, k] × [k, n] → [.., m, n]`; leading axes of `a` are folded into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ashape = self.nodes[a.0].shape.clone();
        let bshape = &self.nodes[b.0].shape;
        if bshape.len() != 2 || ashape.is_empty() {
            return dim_err(format!("matmul {ashape:?} × {bshape:?}: rhs must be 2-D"));
        }
        let k = *ashape.last().unwrap();
        if bshape[0] != k {
            return dim_err(format!(
                "matmul inner dimensions differ: {ashape:?} × {bshape:?}"
            ));
        }
        let n = bshape[1];
        let m = numel(&ashape) / k;
        let mut out = vec![T::zero(); m * n];
        gemm(&self.nodes[a.0].value, false, &self.nodes[b.0].value, false, &mut out, m, k, n, false);
        let mut shape = ashape;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(out, shape, Op::MatMul { a: a.0, b: b.0, m, k, n }, &[a.0, b.0]))
    }

    /// Batched product `[B, m, k] × [B, k, n] → [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return dim_err(format!("bmm {sa:?} × {sb:?}"));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        for i in 0..batch {
            gemm(
                &av[i * m * k..],
                false,
                &bv[i * k * n..],
                false,
                &mut out[i * m * n..],
                m,
                k,
                n,
                false,
            );
        }
        Ok(self.push(
            out,
            vec![batch, m, n],
            Op::Bmm { a: a.0, b: b.0, batch, m, k, n },
            &[a.0, b.0],
        ))
    }

    /// 2-D convolution of `[B, C, H, W]` with `[O, C, kh, kw]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return dim_err(format!("conv2d input {xs:?} with kernel {ws:?}"));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return dim_err(format!(
                "kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * pad,
                wd + 2 * pad
            ));
        }
        if let Some(b) = bias {
            if self.nodes[b.0].shape != [cout] {
                return dim_err(format!(
                    "conv2d bias {:?} for {cout} output channels",
                    self.nodes[b.0].shape
                ));
            }
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); batch * rows * p];
        let mut out = vec![T::zero(); batch * cout * p];
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            for bi in 0..batch {
                let c = &mut cols[bi * rows * p..(bi + 1) * rows * p];
                im2col(&xv[bi * cin * h * wd..], &geom, c);
                gemm(wv, false, c, false, &mut out[bi * cout * p..], cout, rows, p, false);
            }
            if let Some(b) = bias {
                let bv = &self.nodes[b.0].value;
                for (i, o) in out.chunks_mut(p).enumerate() {
                    let bb = bv[i % cout];
                    o.iter_mut().for_each(|v| *v += bb);
                }
            }
        }
        let mut inputs = vec![x.0, w.0];
        if let Some(b) = bias {
            inputs.push(b.0);
        }
        let keep = self.needs(&[w.0]);
        let op = Op::Conv2d {
            x: x.0,
            w: w.0,
            bias: bias.map(|b| b.0),
            geom,
            cols: if keep { cols } else { Vec::new() },
        };
        Ok(self.push(out, vec![batch, cout, geom.oh, geom.ow], op, &inputs))
    }

    /// Nearest-neighbour 2× upsampling of `[.., H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() < 2 {
            return dim_err(format!("upsample2x of {s:?}"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = numel(&s[..s.len() - 2]);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[(p * 2 * h + i) * 2 * w + j] = xv[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        let mut shape = s;
        let r = shape.len();
        shape[r - 2] = 2 * h;
        shape[r - 1] = 2 * w;
        Ok(self.push(out, shape, Op::Upsample2x { x: x.0, planes, h, w }, &[x.0]))
    }

    // ----- shape -------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[x.0].value.len() {
            return dim_err(format!(
                "cannot reshape {:?} to {shape:?}",
                self.nodes[x.0].shape
            ));
        }
        let v = self.nodes[x.0].value.clone();
        Ok(self.push(v, shape.to_vec(), Op::Reshape { x: x.0 }, &[x.0]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!("invalid permutation {perm:?} of {s:?}"));
        }
        let out = kernels::permute(&self.nodes[x.0].value, s, perm);
        let shape = perm.iter().map(|&p| s[p]).collect();
        Ok(self.push(out, shape, Op::Permute { x: x.0, perm: perm.to_vec() }, &[x.0]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.nodes[x.0].shape.len();
        if r < 2 {
            return dim_err("transpose needs rank ≥ 2");
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= shape.len() {
            return dim_err(format!("axis {axis} out of range for {shape:?}"));
        }
        Ok((numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..])))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(first) = xs.first() else {
            return dim_err("concat of nothing");
        };
        let s0 = self.nodes[first.0].shape.clone();
        let (outer, _, inner) = Self::axis_split(&s0, axis)?;
        let mut widths = Vec::with_capacity(xs.len());
        let mut total = 0;
        for x in xs {
            let s = &self.nodes[x.0].shape;
            if s.len() != s0.len() || s.iter().zip(&s0).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return dim_err(format!("concat {s0:?} with {s:?} along {axis}"));
            }
            widths.push(s[axis] * inner);
            total += s[axis];
        }
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (x, &wdt) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[x.0].value[o * wdt..(o + 1) * wdt]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let idx: Vec<usize> = xs.iter().map(|v| v.0).collect();
        Ok(self.push(out, shape, Op::Concat { xs: idx.clone(), outer, widths }, &idx))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        let (outer, n, inner) = Self::axis_split(&s, axis)?;
        if len == 0 || start + len > n {
            return dim_err(format!("slice {start}..{} of axis {axis} in {s:?}", start + len));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(
            out,
            shape,
            Op::Slice { x: x.0, outer, full: n * inner, start: start * inner, width: len * inner },
            &[x.0],
        ))
    }

    pub fn reverse(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        let (outer, len, inner) = Self::axis_split(&s, axis)?;
        let out = reverse_axis(&self.nodes[x.0].value, outer, len, inner);
        Ok(self.push(out, s, Op::Reverse { x: x.0, outer, len, inner }, &[x.0]))
    }

    // ----- reductions & normalisation ------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().copied().sum();
        self.push(vec![s], vec![1], Op::SumAll { x: x.0 }, &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        let (outer, len, inner) = Self::axis_split(&s, axis)?;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..][..inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let mut shape = s;
        shape[axis] = 1;
        Ok(self.push(out, shape, Op::SumAxis { x: x.0, outer, len, inner }, &[x.0]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self.nodes[x.0]
            .shape
            .get(axis)
            .ok_or_else(|| Error::Dimension(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / T::of(n as f64)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        let (outer, len, inner) = Self::axis_split(&s, axis)?;
        let out = softmax_raw(&self.nodes[x.0].value, outer, len, inner);
        Ok(self.push(out, s, Op::Softmax { x: x.0, outer, len, inner }, &[x.0]))
    }

    /// Normalises over the last axis, then applies the optional affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        let len = *s.last().ok_or_else(|| Error::Dimension("layer_norm of a scalar".into()))?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.nodes[p.0].shape != [len] {
                return dim_err(format!("layer_norm affine {:?} for width {len}", self.nodes[p.0].shape));
            }
        }
        let rows = numel(&s) / len;
        let (xhat, rstd) = normalize_groups(&self.nodes[x.0].value, rows, len, eps);
        let mut out = xhat.clone();
        if gamma.is_some() || beta.is_some() {
            let g = gamma.map(|g| self.nodes[g.0].value.clone());
            let b = beta.map(|b| self.nodes[b.0].value.clone());
            for row in out.chunks_mut(len) {
                for (j, v) in row.iter_mut().enumerate() {
                    if let Some(g) = &g {
                        *v *= g[j];
                    }
                    if let Some(b) = &b {
                        *v += b[j];
                    }
                }
            }
        }
        let mut inputs = vec![x.0];
        inputs.extend(gamma.map(|v| v.0));
        inputs.extend(beta.map(|v| v.0));
        let op = Op::LayerNorm { x: x.0, gamma: gamma.map(|v| v.0), beta: beta.map(|v| v.0), len, xhat, rstd };
        Ok(self.push(out, s, op, &inputs))
    }

    /// Group normalisation of `[B, C, ...]` with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() < 2 {
            return dim_err(format!("group_norm of {s:?}"));
        }
        let (batch, channels) = (s[0], s[1]);
        if groups == 0 || channels % groups != 0 {
            return dim_err(format!("{groups} groups do not divide {channels} channels"));
        }
        for p in [gamma, beta].into_iter().flatten() {
            if self.nodes[p.0].shape != [channels] {
                return dim_err(format!("group_norm affine {:?} for {channels} channels", self.nodes[p.0].shape));
            }
        }
        let spatial = numel(&s[2..]);
        let glen = channels / groups * spatial;
        let (xhat, rstd) = normalize_groups(&self.nodes[x.0].value, batch * groups, glen, eps);
        let mut out = xhat.clone();
        let g = gamma.map(|g| self.nodes[g.0].value.clone());
        let b = beta.map(|b| self.nodes[b.0].value.clone());
        if g.is_some() || b.is_some() {
            for (i, plane) in out.chunks_mut(spatial).enumerate() {
                let c = i % channels;
                let (gc, bc) = (g.as_ref().map_or(T::one(), |g| g[c]), b.as_ref().map_or(T::zero(), |b| b[c]));
                plane.iter_mut().for_each(|v| *v = *v * gc + bc);
            }
        }
        let mut inputs = vec![x.0];
        inputs.extend(gamma.map(|v| v.0));
        inputs.extend(beta.map(|v| v.0));
        let op = Op::GroupNorm {
            x: x.0,
            gamma: gamma.map(|v| v.0),
            beta: beta.map(|v| v.0),
            channels,
            groups,
            spatial,
            xhat,
            rstd,
        };
        Ok(self.push(out, s, op, &inputs))
    }

    /// `[B, C, ...] → [B, C]`, maximum over all trailing positions.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() < 3 {
            return dim_err(format!("global_max_pool of {s:?}"));
        }
        let spatial = numel(&s[2..]);
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(s[0] * s[1]);
        let mut argmax = Vec::with_capacity(s[0] * s[1]);
        for (i, plane) in xv.chunks(spatial).enumerate() {
            let (mut best, mut at) = (plane[0], 0);
            for (j, &v) in plane.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    at = j;
                }
            }
            out.push(best);
            argmax.push(i * spatial + at);
        }
        Ok(self.push(out, vec![s[0], s[1]], Op::GlobalMaxPool { x: x.0, argmax }, &[x.0]))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.nodes[logits.0].shape.clone();
        if s.len() != 2 || s[0] != targets.len() {
            return dim_err(format!("cross_entropy logits {s:?} with {} targets", targets.len()));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Contract(format!("target {t} outside {k} classes")));
        }
        let probs = softmax_raw(&self.nodes[logits.0].value, n, k, 1);
        let tiny = T::of(1e-30);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -(probs[i * k + t].max(tiny)).ln())
            .sum::<T>()
            / T::of(n as f64);
        let op = Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs, classes: k };
        Ok(self.push(vec![loss], vec![1], op, &[logits.0]))
    }

    /// Rows of a `[K, w]` table: `[indices.len(), w]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.nodes[table.0].shape.clone();
        if s.len() != 2 {
            return dim_err(format!("gather from {s:?}"));
        }
        let (k, width) = (s[0], s[1]);
        if let Some(&i) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::Contract(format!("row {i} outside table of {k}")));
        }
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&tv[i * width..(i + 1) * width]);
        }
        Ok(self.push(
            out,
            vec![indices.len(), width],
            Op::Gather { table: table.0, indices: indices.to_vec(), width },
            &[table.0],
        ))
    }

    /// Value of `value`, gradient routed unchanged to `src` (straight-through).
    pub fn straight_through(&mut self, src: Var, value: Var) -> Result<Var> {
        if self.nodes[src.0].shape != self.nodes[value.0].shape {
            return dim_err(format!(
                "straight_through {:?} vs {:?}",
                self.nodes[src.0].shape, self.nodes[value.0].shape
            ));
        }
        let v = self.nodes[value.0].value.clone();
        let shape = self.nodes[src.0].shape.clone();
        Ok(self.push(v, shape, Op::StraightThrough { src: src.0 }, &[src.0]))
    }

    /// Diagonal linear recurrence `h_t = decay ⊙ h_{t-1} + drive_t`.
    ///
    /// `decay: [D]`, `drive: [B, L, D]`, `h0: [D]` (zero when absent);
    /// returns all states `[B, L, D]`.
    pub fn recurrence(&mut self, decay: Var, drive: Var, h0: Option<Var>) -> Result<Var> {
        let ds = self.nodes[drive.0].shape.clone();
        if ds.len() != 3 {
            return dim_err(format!("recurrence drive must be [B, L, D], got {ds:?}"));
        }
        let (batch, len, dim) = (ds[0], ds[1], ds[2]);
        if self.nodes[decay.0].shape != [dim] {
            return dim_err(format!("recurrence decay {:?} for state {dim}", self.nodes[decay.0].shape));
        }
        if let Some(h) = h0 {
            if self.nodes[h.0].shape != [dim] {
                return dim_err(format!("recurrence h0 {:?} for state {dim}", self.nodes[h.0].shape));
            }
        }
        let a = &self.nodes[decay.0].value;
        let u = &self.nodes[drive.0].value;
        let init = h0.map(|h| self.nodes[h.0].value.clone()).unwrap_or_else(|| vec![T::zero(); dim]);
        let mut out = vec![T::zero(); batch * len * dim];
        for b in 0..batch {
            let mut h = init.clone();
            for t in 0..len {
                let off = (b * len + t) * dim;
                for d in 0..dim {
                    h[d] = a[d] * h[d] + u[off + d];
                }
                out[off..off + dim].copy_from_slice(&h);
            }
        }
        let mut inputs = vec![decay.0, drive.0];
        inputs.extend(h0.map(|h| h.0));
        let op = Op::Recurrence { decay: decay.0, drive: drive.0, h0: h0.map(|h| h.0), batch, len, dim };
        Ok(self.push(out, ds, op, &inputs))
    }

    // ----- backward ----------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        // Accumulation target for input `j`, or None when it needs no gradient.
        macro_rules! slot {
            ($j:expr) => {{
                let j: usize = $j;
                if nodes[j].requires_grad {
                    Some(grads[j].get_or_insert_with(|| vec![T::zero(); nodes[j].value.len()]))
                } else {
                    None
                }
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, plan } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                if let Some(ga) = slot!(*a) {
                    for (k, gv) in g.iter().enumerate() {
                        ga[k] += match kind {
                            Binary::Add | Binary::Sub => *gv,
                            Binary::Mul => *gv * bv[plan.at(k)],
                            Binary::Div => *gv / bv[plan.at(k)],
                        };
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for (k, gv) in g.iter().enumerate() {
                        let j = plan.at(k);
                        gb[j] += match kind {
                            Binary::Add => *gv,
                            Binary::Sub => -*gv,
                            Binary::Mul => *gv * av[k],
                            Binary::Div => -*gv * av[k] / (bv[j] * bv[j]),
                        };
                    }
                }
            }
            Op::Unary { kind, x } => {
                let (xv, yv) = (&nodes[*x].value, &nodes[i].value);
                if let Some(gx) = slot!(*x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * kind.derivative(xv[k], yv[k]);
                    }
                }
            }
            Op::Scale { x, by } => {
                if let Some(gx) = slot!(*x) {
                    for (d, &v) in gx.iter_mut().zip(g) {
                        *d += v * *by;
                    }
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } | Op::StraightThrough { src: x } => {
                if let Some(gx) = slot!(*x) {
                    for (d, &v) in gx.iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                if let Some(ga) = slot!(*a) {
                    // dA = dC · Bᵀ
                    gemm(g, false, bv, true, ga, *m, *n, *k, true);
                }
                if let Some(gb) = slot!(*b) {
                    // dB = Aᵀ · dC
                    gemm(av, true, g, false, gb, *k, *m, *n, true);
                }
            }
            Op::Bmm { a, b, batch, m, k, n } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (*m, *k, *n);
                if let Some(ga) = slot!(*a) {
                    for t in 0..*batch {
                        gemm(&g[t * m * n..], false, &bv[t * k * n..], true, &mut ga[t * m * k..], m, n, k, true);
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for t in 0..*batch {
                        gemm(&av[t * m * k..], true, &g[t * m * n..], false, &mut gb[t * k * n..], k, m, n, true);
                    }
                }
            }
            Op::Conv2d { x, w, bias, geom, cols } => {
                let (rows, p) = (geom.col_rows(), geom.col_cols());
                let cout = geom.cout;
                if let Some(gw) = slot!(*w) {
                    for bi in 0..geom.batch {
                        gemm(&g[bi * cout * p..], false, &cols[bi * rows * p..], true, gw, cout, p, rows, true);
                    }
                }
                if let Some(bias) = bias {
                    if let Some(gb) = slot!(*bias) {
                        for (r, chunk) in g.chunks(p).enumerate() {
                            gb[r % cout] += chunk.iter().copied().sum::<T>();
                        }
                    }
                }
                let wv = &nodes[*w].value;
                if let Some(gx) = slot!(*x) {
                    let mut dcols = vec![T::zero(); rows * p];
                    let img = geom.cin * geom.h * geom.w;
                    for bi in 0..geom.batch {
                        gemm(wv, true, &g[bi * cout * p..], false, &mut dcols, rows, cout, p, false);
                        col2im(&dcols, geom, &mut gx[bi * img..(bi + 1) * img]);
                    }
                }
            }
            Op::Upsample2x { x, planes, h, w } => {
                if let Some(gx) = slot!(*x) {
                    let (h, w) = (*h, *w);
                    for p in 0..*planes {
                        for r in 0..2 * h {
                            for c in 0..2 * w {
                                gx[(p * h + r / 2) * w + c / 2] += g[(p * 2 * h + r) * 2 * w + c];
                            }
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                if let Some(gx) = slot!(*x) {
                    let out_shape = &nodes[i].shape;
                    let back = kernels::permute(g, out_shape, &inverse_perm(perm));
                    for (d, v) in gx.iter_mut().zip(back) {
                        *d += v;
                    }
                }
            }
            Op::Concat { xs, outer, widths } => {
                let row: usize = widths.iter().sum();
                let mut off = 0;
                for (x, &wdt) in xs.iter().zip(widths) {
                    if let Some(gx) = slot!(*x) {
                        for o in 0..*outer {
                            let src = &g[o * row + off..o * row + off + wdt];
                            for (d, &v) in gx[o * wdt..(o + 1) * wdt].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                    off += wdt;
                }
            }
            Op::Slice { x, outer, full, start, width } => {
                if let Some(gx) = slot!(*x) {
                    for o in 0..*outer {
                        let dst = &mut gx[o * full + start..o * full + start + width];
                        for (d, &v) in dst.iter_mut().zip(&g[o * width..(o + 1) * width]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Reverse { x, outer, len, inner } => {
                if let Some(gx) = slot!(*x) {
                    let back = reverse_axis(g, *outer, *len, *inner);
                    for (d, v) in gx.iter_mut().zip(back) {
                        *d += v;
                    }
                }
            }
            Op::SumAll { x } => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumAxis { x, outer, len, inner } => {
                if let Some(gx) = slot!(*x) {
                    let (len, inner) = (*len, *inner);
                    for o in 0..*outer {
                        for l in 0..len {
                            let dst = &mut gx[(o * len + l) * inner..][..inner];
                            for (d, &v) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if let Some(gx) = slot!(*x) {
                    let y = &nodes[i].value;
                    let (len, inner) = (*len, *inner);
                    for o in 0..*outer {
                        for q in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + q;
                            let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, len, xhat, rstd } => {
                let len = *len;
                let gam = gamma.map(|gm| &nodes[gm].value);
                if let Some(gamma) = gamma {
                    if let Some(gg) = slot!(*gamma) {
                        for (k, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                            gg[k % len] += gv * xh;
                        }
                    }
                }
                if let Some(beta) = beta {
                    if let Some(gb) = slot!(*beta) {
                        for (k, &gv) in g.iter().enumerate() {
                            gb[k % len] += gv;
                        }
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let dxhat: Vec<T> = match gam {
                        Some(gm) => g.iter().enumerate().map(|(k, &v)| v * gm[k % len]).collect(),
                        None => g.to_vec(),
                    };
                    normalize_backward(&dxhat, xhat, rstd, len, gx);
                }
            }
            Op::GroupNorm { x, gamma, beta, channels, groups, spatial, xhat, rstd } => {
                let (channels, spatial) = (*channels, *spatial);
                let chan = |k: usize| (k / spatial) % channels;
                let gam = gamma.map(|gm| &nodes[gm].value);
                if let Some(gamma) = gamma {
                    if let Some(gg) = slot!(*gamma) {
                        for (k, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                            gg[chan(k)] += gv * xh;
                        }
                    }
                }
                if let Some(beta) = beta {
                    if let Some(gb) = slot!(*beta) {
                        for (k, &gv) in g.iter().enumerate() {
                            gb[chan(k)] += gv;
                        }
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let dxhat: Vec<T> = match gam {
                        Some(gm) => g.iter().enumerate().map(|(k, &v)| v * gm[chan(k)]).collect(),
                        None => g.to_vec(),
                    };
                    normalize_backward(&dxhat, xhat, rstd, channels / groups * spatial, gx);
                }
            }
            Op::GlobalMaxPool { x, argmax } => {
                if let Some(gx) = slot!(*x) {
                    for (&at, &v) in argmax.iter().zip(g) {
                        gx[at] += v;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, classes } => {
                if let Some(gl) = slot!(*logits) {
                    let k = *classes;
                    let scale = g[0] / T::of(targets.len() as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            gl[r * k + c] += scale * (probs[r * k + c] - onehot);
                        }
                    }
                }
            }
            Op::Gather { table, indices, width } => {
                if let Some(gt) = slot!(*table) {
                    for (r, &idx) in indices.iter().enumerate() {
                        for c in 0..*width {
                            gt[idx * width + c] += g[r * width + c];
                        }
                    }
                }
            }
            Op::Recurrence { decay, drive, h0, batch, len, dim } => {
                let (len, dim) = (*len, *dim);
                let a = &nodes[*decay].value;
                let hs = &nodes[i].value;
                let init = h0.map(|h| nodes[h].value.clone()).unwrap_or_else(|| vec![T::zero(); dim]);
                let mut da = vec![T::zero(); dim];
                let mut du = vec![T::zero(); hs.len()];
                let mut dh0 = vec![T::zero(); dim];
                for b in 0..*batch {
                    let mut carry = vec![T::zero(); dim];
                    for t in (0..len).rev() {
                        let off = (b * len + t) * dim;
                        for d in 0..dim {
                            let total = g[off + d] + carry[d];
                            du[off + d] = total;
                            let prev = if t == 0 { init[d] } else { hs[off - dim + d] };
                            da[d] += total * prev;
                            carry[d] = a[d] * total;
                        }
                    }
                    for d in 0..dim {
                        dh0[d] += carry[d];
                    }
                }
                if let Some(ga) = slot!(*decay) {
                    for (d, v) in ga.iter_mut().zip(&da) {
                        *d += *v;
                    }
                }
                if let Some(gu) = slot!(*drive) {
                    for (d, v) in gu.iter_mut().zip(&du) {
                        *d += *v;
                    }
                }
                if let Some(h0) = h0 {
                    if let Some(gh) = slot!(*h0) {
                        for (d, v) in gh.iter_mut().zip(&dh0) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

fn reverse_axis<T: Real>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for o in 0..outer {
        for l in (0..len).rev() {
            out.extend_from_slice(&x[(o * len + l) * inner..][..inner]);
        }
    }
    out
}

pub(crate) fn softmax_raw<T: Real>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for q in 0..inner {
            let at = |l: usize| (o * len + l) * inner + q;
            let max = (0..len).map(|l| x[at(l)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for l in 0..len {
                let e = (x[at(l)] - max).exp();
                out[at(l)] = e;
                total += e;
            }
            for l in 0..len {
                out[at(l)] /= total;
            }
        }
    }
    out
}

/// Standardises consecutive groups of `len` values; returns (x̂, 1/σ per group).
fn normalize_groups<T: Real>(x: &[T], groups: usize, len: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(groups);
    let n = T::of(len as f64);
    for gi in 0..groups {
        let seg = &x[gi * len..(gi + 1) * len];
        let mean = seg.iter().copied().sum::<T>() / n;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + T::of(eps)).sqrt();
        for (d, &v) in xhat[gi * len..(gi + 1) * len].iter_mut().zip(seg) {
            *d = (v - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

fn normalize_backward<T: Real>(dxhat: &[T], xhat: &[T], rstd: &[T], len: usize, dx: &mut [T]) {
    let n = T::of(len as f64);
    for (gi, &r) in rstd.iter().enumerate() {
        let span = gi * len..(gi + 1) * len;
        let dh = &dxhat[span.clone()];
        let xh = &xhat[span.clone()];
        let mean_dh = dh.iter().copied().sum::<T>() / n;
        let mean_dhx = dh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        for ((d, &a), &b) in dx[span].iter_mut().zip(dh).zip(xh) {
            *d += r * (a - mean_dh - b * mean_dhx);
        }
    }
}

/// Result of [`Tape::backward`]: gradients per node and per bound parameter.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a persistent tensor bound with [`Tape::param`], summed over bindings.
    pub fn for_param(&self, t: &Tensor<T>) -> Option<Vec<T>> {
        let idx = self.params.get(&t.id())?;
        let mut total: Option<Vec<T>> = None;
        for &i in idx {
            if let Some(g) = &self.grads[i] {
                match &mut total {
                    None => total = Some(g.clone()),
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                }
            }
        }
        total
    }

    /// Adds this pass's gradient into `t.grad`. Returns whether `t` was reached.
    pub fn accumulate(&self, t: &mut Tensor<T>) -> Result<bool> {
        match self.for_param(t) {
            Some(g) => {
                t.accumulate_grad(&g)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }
}
