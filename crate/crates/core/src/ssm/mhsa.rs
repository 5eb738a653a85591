use rand::Rng;

use crate::error::{dim_err, Result};
use crate::nn::{prefixed, prefixed_mut, Linear, Module, Named, NamedMut};
use crate::tensor::{gemm, Real, Tape, Tensor, Var};

/// Multi-head scaled dot-product self-attention with output projection.
#[derive(Debug, Clone)]
pub struct Mhsa<T: Real> {
    pub heads: usize,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
}

/// Scaled dot-product attention of `q: [B, Lq, d]` over `k, v: [B, Lk, d]`,
/// split into `heads`. Returns the concatenated heads `[B, Lq, d]` and the
/// attention weights `[B·heads, Lq, Lk]`.
pub fn attend<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var)> {
    let qs = tape.shape(q).to_vec();
    let ks = tape.shape(k).to_vec();
    let (&[b, lq, d], &[bk, lk, dk]) = (qs.as_slice(), ks.as_slice()) else {
        return dim_err(format!("attention expects 3-D q/k, got {qs:?} and {ks:?}"));
    };
    if b != bk || d != dk || tape.shape(v) != ks.as_slice() {
        return dim_err(format!("attention q {qs:?}, k {ks:?}, v {:?}", tape.shape(v)));
    }
    if heads == 0 || d % heads != 0 {
        return dim_err(format!("width {d} not divisible into {heads} heads"));
    }
    let dh = d / heads;
    let split = |tape: &mut Tape<T>, x: Var, len: usize| -> Result<Var> {
        let x = tape.reshape(x, &[b, len, heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * heads, len, dh])
    };
    let qh = split(tape, q, lq)?;
    let kh = split(tape, k, lk)?;
    let vh = split(tape, v, lk)?;
    let kt = tape.transpose(kh)?;
    let scores = tape.bmm(qh, kt)?;
    let scores = tape.scale(scores, T::one() / T::of((dh as f64).sqrt()));
    let probs = tape.softmax(scores, 2)?;
    let out = tape.bmm(probs, vh)?;
    let out = tape.reshape(out, &[b, heads, lq, dh])?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    Ok((tape.reshape(out, &[b, lq, d])?, probs))
}

impl<T: Real> Mhsa<T> {
    pub fn new<R: Rng + ?Sized>(d_model: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return dim_err(format!("d_model {d_model} not divisible by {heads} heads"));
        }
        Ok(Mhsa {
            heads,
            wq: Linear::new(d_model, d_model, true, rng),
            wk: Linear::new(d_model, d_model, true, rng),
            wv: Linear::new(d_model, d_model, true, rng),
            wo: Linear::new(d_model, d_model, true, rng),
        })
    }

    pub fn d_model(&self) -> usize {
        self.wq.weight.shape()[0]
    }

    /// Attention output without the residual, plus the attention weights.
    pub fn mix_with_weights(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(x).to_vec();
        let x3 = match shape[..] {
            [l, d] => tape.reshape(x, &[1, l, d])?,
            [_, _, _] => x,
            _ => return dim_err(format!("attention input must be [L, d] or [B, L, d], got {shape:?}")),
        };
        let q = self.wq.forward(tape, x3)?;
        let k = self.wk.forward(tape, x3)?;
        let v = self.wv.forward(tape, x3)?;
        let (o, probs) = attend(tape, q, k, v, self.heads)?;
        let o = self.wo.forward(tape, o)?;
        Ok((tape.reshape(o, &shape)?, probs))
    }

    pub fn mix(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        Ok(self.mix_with_weights(tape, x)?.0)
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let m = self.mix(tape, x)?;
        tape.add(m, x)
    }

    /// Tape-free forward of `x: [L, d]` with residual. Scores are formed
    /// `rows` queries at a time so the transient buffer is `rows × L`.
    pub fn infer(&self, x: &Tensor<T>, rows: usize) -> Result<Tensor<T>> {
        let d = self.d_model();
        let [len, dx] = x.shape()[..] else {
            return dim_err(format!("infer expects [L, d], got {:?}", x.shape()));
        };
        if dx != d {
            return dim_err(format!("input width {dx} for d_model {d}"));
        }
        let (h, dh) = (self.heads, d / self.heads);
        let rows = rows.clamp(1, len);
        let project = |lin: &Linear<T>| -> Vec<T> {
            let mut out = vec![T::zero(); len * d];
            gemm(x.data(), false, lin.weight.data(), false, &mut out, len, d, d, false);
            if let Some(b) = &lin.bias {
                for row in out.chunks_mut(d) {
                    row.iter_mut().zip(b.data()).for_each(|(o, &bb)| *o += bb);
                }
            }
            // [L, H, dh] → [H, L, dh]
            let mut heads = vec![T::zero(); len * d];
            for t in 0..len {
                for hh in 0..h {
                    heads[(hh * len + t) * dh..(hh * len + t + 1) * dh]
                        .copy_from_slice(&out[t * d + hh * dh..t * d + (hh + 1) * dh]);
                }
            }
            heads
        };
        let (q, k, v) = (project(&self.wq), project(&self.wk), project(&self.wv));
        let scale = T::one() / T::of((dh as f64).sqrt());
        let mut scores = vec![T::zero(); rows * len];
        let mut chunk_out = vec![T::zero(); rows * dh];
        let mut concat = vec![T::zero(); len * d];
        for hh in 0..h {
            let (qh, kh, vh) = (&q[hh * len * dh..], &k[hh * len * dh..], &v[hh * len * dh..]);
            let mut start = 0;
            while start < len {
                let m = rows.min(len - start);
                gemm(&qh[start * dh..], false, kh, true, &mut scores, m, dh, len, false);
                for row in scores[..m * len].chunks_mut(len) {
                    softmax_row(row, scale);
                }
                gemm(&scores, false, vh, false, &mut chunk_out, m, len, dh, false);
                for i in 0..m {
                    concat[(start + i) * d + hh * dh..(start + i) * d + (hh + 1) * dh]
                        .copy_from_slice(&chunk_out[i * dh..(i + 1) * dh]);
                }
                start += m;
            }
        }
        let mut y = x.data().to_vec();
        gemm(&concat, false, self.wo.weight.data(), false, &mut y, len, d, d, true);
        if let Some(b) = &self.wo.bias {
            for row in y.chunks_mut(d) {
                row.iter_mut().zip(b.data()).for_each(|(o, &bb)| *o += bb);
            }
        }
        Tensor::new(vec![len, d], y)
    }
}

fn softmax_row<T: Real>(row: &mut [T], scale: T) {
    let mut max = T::neg_infinity();
    for v in row.iter_mut() {
        *v = *v * scale;
        max = max.max(*v);
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v = *v * inv);
}

impl<T: Real> Module<T> for Mhsa<T> {
    fn params(&self) -> Named<'_, T> {
        let mut v = prefixed("q", self.wq.params());
        v.extend(prefixed("k", self.wk.params()));
        v.extend(prefixed("v", self.wv.params()));
        v.extend(prefixed("o", self.wo.params()));
        v
    }

    fn params_mut(&mut self) -> NamedMut<'_, T> {
        let mut v = prefixed_mut("q", self.wq.params_mut());
        v.extend(prefixed_mut("k", self.wk.params_mut()));
        v.extend(prefixed_mut("v", self.wv.params_mut()));
        v.extend(prefixed_mut("o", self.wo.params_mut()));
        v
    }
}
