//! Linear state-space sequence blocks.
//!
//! One direction computes, per token,
//!
//! ```text
//! h_t = A·h_{t-1} + B·x_t
//! y_t = C·h_t + D ⊙ x_t
//! ```
//!
//! with diagonal `A`. [`BiMamba`] runs one scan forwards and a second one
//! (own parameters) over the reversed sequence, sums both and adds the
//! input back. [`Mhsa`] is the quadratic attention block it replaces.

mod bench;
mod mhsa;

pub use bench::{bench_blocks, log_log_slope, read_bench_csv, write_bench_csv, BenchConfig, BenchRecord, BlockKind, BENCH_CSV_HEADER};
pub use mhsa::{attend, Mhsa};

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::nn::{prefixed, prefixed_mut, Module, Named, NamedMut};
use crate::tensor::{Real, Tape, Tensor, Var};

/// How the stored `a` vector maps to the diagonal of `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decay {
    /// `A = diag(a)` exactly.
    Direct,
    /// `A = diag(exp(-softplus(a)))`, always inside (0, 1).
    Stable,
}

/// Input-dependent gates making `B` and `C` affine in `x_t`:
/// `B_t = diag(1 + x_t·W_b + b_b)·B`, `C_t = C·diag(1 + x_t·W_c + b_c)`.
#[derive(Debug, Clone)]
pub struct Selective<T: Real> {
    pub w_b: Tensor<T>,
    pub b_b: Tensor<T>,
    pub w_c: Tensor<T>,
    pub b_c: Tensor<T>,
}

/// Causal depthwise convolution applied to the sequence before the scan.
#[derive(Debug, Clone)]
pub struct ConvBranch<T: Real> {
    /// `[kernel, d_model]`, tap `k` multiplies `x_{t-k}`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct SsmParams<T: Real> {
    pub decay: Decay,
    /// `[d_state]`, interpreted through `decay`.
    pub a: Tensor<T>,
    /// `[d_state, d_model]`
    pub b: Tensor<T>,
    /// `[d_model, d_state]`
    pub c: Tensor<T>,
    /// `[d_model]`
    pub d: Tensor<T>,
    pub selective: Option<Selective<T>>,
    pub conv: Option<ConvBranch<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsmOptions {
    pub d_model: usize,
    pub d_state: usize,
    pub selective: bool,
    pub conv_kernel: Option<usize>,
}

impl SsmOptions {
    pub fn new(d_model: usize, d_state: usize) -> Self {
        SsmOptions {
            d_model,
            d_state,
            selective: false,
            conv_kernel: None,
        }
    }
}

impl<T: Real> SsmParams<T> {
    /// Trainable initialisation: `A` entries in (0,1), `B`,`C` ~ N(0, 0.02²), `D = 1`.
    pub fn init<R: Rng + ?Sized>(opts: SsmOptions, rng: &mut R) -> Self {
        let SsmOptions { d_model, d_state, .. } = opts;
        // decays spread between ~0.5 and ~0.99
        let a = (0..d_state)
            .map(|i| {
                let target: f64 = 0.5 + 0.49 * i as f64 / (d_state.max(2) - 1) as f64;
                // invert exp(-softplus(r)) = target
                let sp = -target.ln();
                T::of((sp.exp() - 1.0).ln())
            })
            .collect();
        SsmParams {
            decay: Decay::Stable,
            a: Tensor::new(vec![d_state], a).unwrap().with_grad(),
            b: Tensor::randn(vec![d_state, d_model], 0.02, rng).with_grad(),
            c: Tensor::randn(vec![d_model, d_state], 0.02, rng).with_grad(),
            d: Tensor::full(vec![d_model], T::one()).with_grad(),
            selective: opts.selective.then(|| Selective {
                w_b: Tensor::randn(vec![d_model, d_state], 0.02, rng).with_grad(),
                b_b: Tensor::zeros(vec![d_state]).with_grad(),
                w_c: Tensor::randn(vec![d_model, d_state], 0.02, rng).with_grad(),
                b_c: Tensor::zeros(vec![d_state]).with_grad(),
            }),
            conv: opts.conv_kernel.map(|k| {
                let mut w = Tensor::zeros(vec![k, d_model]);
                // start as the identity filter
                w.data_mut()[..d_model].iter_mut().for_each(|v| *v = T::one());
                ConvBranch {
                    weight: w.with_grad(),
                    bias: Tensor::zeros(vec![d_model]).with_grad(),
                }
            }),
        }
    }

    /// Fixed matrices used as given (`A = diag(a)`).
    pub fn literal(a: Tensor<T>, b: Tensor<T>, c: Tensor<T>, d: Tensor<T>) -> Result<Self> {
        let p = SsmParams {
            decay: Decay::Direct,
            a,
            b,
            c,
            d,
            selective: None,
            conv: None,
        };
        p.validate()?;
        Ok(p)
    }

    /// All-zero parameters of the given size.
    pub fn zeros(d_model: usize, d_state: usize) -> Self {
        SsmParams {
            decay: Decay::Direct,
            a: Tensor::zeros(vec![d_state]),
            b: Tensor::zeros(vec![d_state, d_model]),
            c: Tensor::zeros(vec![d_model, d_state]),
            d: Tensor::zeros(vec![d_model]),
            selective: None,
            conv: None,
        }
    }

    pub fn d_model(&self) -> usize {
        self.d.numel()
    }

    pub fn d_state(&self) -> usize {
        self.a.numel()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.a.numel(), self.d.numel());
        if self.a.shape() != [n] || self.d.shape() != [d] {
            return dim_err("A and D must be vectors");
        }
        if self.b.shape() != [n, d] || self.c.shape() != [d, n] {
            return dim_err(format!(
                "B {:?} / C {:?} inconsistent with d_state={n}, d_model={d}",
                self.b.shape(),
                self.c.shape()
            ));
        }
        Ok(())
    }

    /// Diagonal of `A` as plain values.
    pub fn decay_values(&self) -> Vec<T> {
        match self.decay {
            Decay::Direct => self.a.data().to_vec(),
            Decay::Stable => self
                .a
                .data()
                .iter()
                .map(|&r| {
                    let sp = r.max(T::zero()) + (-r.abs()).exp().ln_1p();
                    (-sp).exp()
                })
                .collect(),
        }
    }

    /// Differentiable scan of `x: [batch, L, d_model]` (or `[L, d_model]`).
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, h0: Option<Var>) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (batch, len, dm) = match shape[..] {
            [l, d] => (1, l, d),
            [b, l, d] => (b, l, d),
            _ => return dim_err(format!("ssm input must be [L, d] or [B, L, d], got {shape:?}")),
        };
        if dm != self.d_model() {
            return dim_err(format!("ssm d_model {} given input width {dm}", self.d_model()));
        }
        if len == 0 {
            return Err(Error::Contract("empty sequence".into()));
        }
        let x3 = tape.reshape(x, &[batch, len, dm])?;
        let x3 = match &self.conv {
            Some(conv) => causal_depthwise(tape, x3, conv)?,
            None => x3,
        };
        let a_raw = tape.param(&self.a);
        let decay = match self.decay {
            Decay::Direct => a_raw,
            Decay::Stable => {
                let sp = tape.softplus(a_raw);
                let neg = tape.neg(sp);
                tape.exp(neg)
            }
        };
        let b = tape.param(&self.b);
        let bt = tape.transpose(b)?;
        let mut drive = tape.matmul(x3, bt)?;
        let mut readout_gate = None;
        if let Some(sel) = &self.selective {
            let gb = gate(tape, x3, &sel.w_b, &sel.b_b)?;
            drive = tape.mul(drive, gb)?;
            readout_gate = Some(gate(tape, x3, &sel.w_c, &sel.b_c)?);
        }
        let mut states = tape.recurrence(decay, drive, h0)?;
        if let Some(g) = readout_gate {
            states = tape.mul(states, g)?;
        }
        let c = tape.param(&self.c);
        let ct = tape.transpose(c)?;
        let y = tape.matmul(states, ct)?;
        let d = tape.param(&self.d);
        let skip = tape.mul(x3, d)?;
        let y = tape.add(y, skip)?;
        tape.reshape(y, &shape)
    }
}

fn gate<T: Real>(tape: &mut Tape<T>, x: Var, w: &Tensor<T>, b: &Tensor<T>) -> Result<Var> {
    let w = tape.param(w);
    let b = tape.param(b);
    let g = tape.matmul(x, w)?;
    let g = tape.add(g, b)?;
    Ok(tape.add_scalar(g, T::one()))
}

fn causal_depthwise<T: Real>(tape: &mut Tape<T>, x: Var, conv: &ConvBranch<T>) -> Result<Var> {
    let [batch, len, dm] = tape.shape(x).to_vec()[..] else {
        return dim_err("depthwise branch expects [B, L, d]");
    };
    let k = conv.weight.shape()[0];
    let w = tape.param(&conv.weight);
    let mut acc = None;
    for tap in 0..k.min(len) {
        // x shifted right by `tap` with zeros in front
        let shifted = if tap == 0 {
            x
        } else {
            let head = tape.slice(x, 1, 0, len - tap)?;
            let zeros = tape.raw(vec![batch, tap, dm], vec![T::zero(); batch * tap * dm]);
            tape.concat(&[zeros, head], 1)?
        };
        let wk = tape.slice(w, 0, tap, 1)?;
        let term = tape.mul(shifted, wk)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    let b = tape.param(&conv.bias);
    let y = tape.add(acc.expect("kernel has at least one tap"), b)?;
    Ok(tape.silu(y))
}

impl<T: Real> Module<T> for SsmParams<T> {
    fn params(&self) -> Named<'_, T> {
        let mut v: Named<'_, T> = vec![
            ("a".into(), &self.a),
            ("b".into(), &self.b),
            ("c".into(), &self.c),
            ("d".into(), &self.d),
        ];
        if let Some(s) = &self.selective {
            v.extend([
                ("sel_wb".into(), &s.w_b),
                ("sel_bb".into(), &s.b_b),
                ("sel_wc".into(), &s.w_c),
                ("sel_bc".into(), &s.b_c),
            ]);
        }
        if let Some(c) = &self.conv {
            v.extend([("conv_w".into(), &c.weight), ("conv_b".into(), &c.bias)]);
        }
        v
    }

    fn params_mut(&mut self) -> NamedMut<'_, T> {
        let mut v: NamedMut<'_, T> = vec![
            ("a".into(), &mut self.a),
            ("b".into(), &mut self.b),
            ("c".into(), &mut self.c),
            ("d".into(), &mut self.d),
        ];
        if let Some(s) = &mut self.selective {
            v.extend([
                ("sel_wb".into(), &mut s.w_b),
                ("sel_bb".into(), &mut s.b_b),
                ("sel_wc".into(), &mut s.w_c),
                ("sel_bc".into(), &mut s.b_c),
            ]);
        }
        if let Some(c) = &mut self.conv {
            v.extend([("conv_w".into(), &mut c.weight), ("conv_b".into(), &mut c.bias)]);
        }
        v
    }
}

fn check_scan_inputs<T: Real>(p: &SsmParams<T>, x: &Tensor<T>, h0: &Tensor<T>) -> Result<(usize, usize, usize)> {
    p.validate()?;
    let (n, d) = (p.d_state(), p.d_model());
    if x.shape().len() != 2 || x.shape()[1] != d {
        return dim_err(format!("scan input {:?} for d_model={d}", x.shape()));
    }
    if h0.shape() != [n] {
        return dim_err(format!("h0 {:?} for d_state={n}", h0.shape()));
    }
    if p.selective.is_some() || p.conv.is_some() {
        return Err(Error::Contract(
            "direct scans take plain parameters; use the tape path for selective/conv variants".into(),
        ));
    }
    Ok((x.shape()[0], n, d))
}

/// Sequential reference scan over `x: [L, d_model]`.
pub fn ssm_scan<T: Real>(p: &SsmParams<T>, x: &Tensor<T>, h0: &Tensor<T>) -> Result<Tensor<T>> {
    let (len, n, d) = check_scan_inputs(p, x, h0)?;
    let a = p.decay_values();
    let (b, c, dd, xv) = (p.b.data(), p.c.data(), p.d.data(), x.data());
    let mut h = h0.data().to_vec();
    let mut y = vec![T::zero(); len * d];
    for t in 0..len {
        let xt = &xv[t * d..(t + 1) * d];
        for s in 0..n {
            h[s] = a[s] * h[s] + dot(&b[s * d..(s + 1) * d], xt);
        }
        for o in 0..d {
            y[t * d + o] = dot(&c[o * n..(o + 1) * n], &h) + dd[o] * xt[o];
        }
    }
    Tensor::new(vec![len, d], y)
}

/// Chunked scan: drives for a whole chunk are formed first, then the state is
/// advanced through the chunk and read out, carrying `h` to the next chunk.
/// Per-token arithmetic is identical to [`ssm_scan`] for every chunk size.
pub fn ssm_scan_blocked<T: Real>(
    p: &SsmParams<T>,
    x: &Tensor<T>,
    h0: &Tensor<T>,
    block: usize,
) -> Result<Tensor<T>> {
    if block < 1 {
        return Err(Error::Contract("block size must be at least 1".into()));
    }
    let (len, n, d) = check_scan_inputs(p, x, h0)?;
    let a = p.decay_values();
    let (b, c, dd, xv) = (p.b.data(), p.c.data(), p.d.data(), x.data());
    let mut h = h0.data().to_vec();
    let mut y = vec![T::zero(); len * d];
    let mut drive = vec![T::zero(); block.min(len) * n];
    let mut states = vec![T::zero(); block.min(len) * n];
    let mut start = 0;
    while start < len {
        let m = block.min(len - start);
        for i in 0..m {
            let xt = &xv[(start + i) * d..(start + i + 1) * d];
            for s in 0..n {
                drive[i * n + s] = dot(&b[s * d..(s + 1) * d], xt);
            }
        }
        for i in 0..m {
            for s in 0..n {
                h[s] = a[s] * h[s] + drive[i * n + s];
            }
            states[i * n..(i + 1) * n].copy_from_slice(&h);
        }
        for i in 0..m {
            let t = start + i;
            let hs = &states[i * n..(i + 1) * n];
            for o in 0..d {
                y[t * d + o] = dot(&c[o * n..(o + 1) * n], hs) + dd[o] * xv[t * d + o];
            }
        }
        start += m;
    }
    Tensor::new(vec![len, d], y)
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn reverse_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.shape()[1];
    let data: Vec<T> = x.data().chunks(d).rev().flatten().copied().collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// `ForwardMamba(x) + BackwardMamba(x)` without the residual.
pub fn bimamba_mix<T: Real>(fwd: &SsmParams<T>, bwd: &SsmParams<T>, x: &Tensor<T>, block: usize) -> Result<Tensor<T>> {
    if fwd.d_model() != bwd.d_model() {
        return dim_err(format!(
            "forward d_model {} vs backward d_model {}",
            fwd.d_model(),
            bwd.d_model()
        ));
    }
    let f = ssm_scan_blocked(fwd, x, &Tensor::zeros(vec![fwd.d_state()]), block)?;
    let rb = ssm_scan_blocked(bwd, &reverse_rows(x), &Tensor::zeros(vec![bwd.d_state()]), block)?;
    let b = reverse_rows(&rb);
    Tensor::new(
        f.shape().to_vec(),
        f.data().iter().zip(b.data()).map(|(&u, &v)| u + v).collect(),
    )
}

/// Bidirectional block: `y = ForwardMamba(x) + BackwardMamba(x) + x`.
pub fn bimamba_block<T: Real>(fwd: &SsmParams<T>, bwd: &SsmParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let len = x.shape().first().copied().unwrap_or(1);
    let mix = bimamba_mix(fwd, bwd, x, len.max(1))?;
    Tensor::new(
        x.shape().to_vec(),
        mix.data().iter().zip(x.data()).map(|(&u, &v)| u + v).collect(),
    )
}

/// Trainable bidirectional state-space block (drop-in for [`Mhsa`]).
#[derive(Debug, Clone)]
pub struct BiMamba<T: Real> {
    pub fwd: SsmParams<T>,
    pub bwd: SsmParams<T>,
}

impl<T: Real> BiMamba<T> {
    pub fn new<R: Rng + ?Sized>(opts: SsmOptions, rng: &mut R) -> Self {
        BiMamba {
            fwd: SsmParams::init(opts, rng),
            bwd: SsmParams::init(opts, rng),
        }
    }

    pub fn from_parts(fwd: SsmParams<T>, bwd: SsmParams<T>) -> Result<Self> {
        if fwd.d_model() != bwd.d_model() {
            return dim_err("forward/backward d_model mismatch");
        }
        Ok(BiMamba { fwd, bwd })
    }

    /// `ForwardMamba(x) + BackwardMamba(x)` for `x: [B, L, d]` (no residual).
    pub fn mix(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let axis = tape.shape(x).len() - 2;
        let f = self.fwd.forward(tape, x, None)?;
        let xr = tape.reverse(x, axis)?;
        let br = self.bwd.forward(tape, xr, None)?;
        let b = tape.reverse(br, axis)?;
        tape.add(f, b)
    }

    /// Full block with the residual connection.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let m = self.mix(tape, x)?;
        tape.add(m, x)
    }
}

impl<T: Real> Module<T> for BiMamba<T> {
    fn params(&self) -> Named<'_, T> {
        let mut v = prefixed("fwd", self.fwd.params());
        v.extend(prefixed("bwd", self.bwd.params()));
        v
    }

    fn params_mut(&mut self) -> NamedMut<'_, T> {
        let mut v = prefixed_mut("fwd", self.fwd.params_mut());
        v.extend(prefixed_mut("bwd", self.bwd.params_mut()));
        v
    }
}
