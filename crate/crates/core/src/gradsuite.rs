//! Seeded finite-difference sweep over every differentiable tape operation,
//! both sequence-mixing blocks and a four-parameter diffusion pipeline.
//!
//! Each case reduces its output with fixed random weights (a plain sum
//! would hide softmax and normalisation gradients) and is compared against
//! central differences in f64.

use std::time::{Duration, Instant};

use crate::diffusion::{diffusion_loss_with, make_schedule};
use crate::error::Result;
use crate::nn::Module;
use crate::rng::{self, Prng};
use crate::ssm::{BiMamba, Decay, Mhsa, SsmOptions, SsmParams};
use crate::tensor::gradcheck::{check, rel_err};
use crate::tensor::{Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_TRIALS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub trials: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_trial: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }

    pub fn worst(&self) -> Option<&CaseResult> {
        self.cases.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

type Case = fn(&mut Prng, u64) -> Result<(f64, usize)>;

fn randn(r: &mut Prng, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), std, r)
}

/// Values in `[lo, hi]`.
fn within(r: &mut Prng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| lo + (hi - lo) * rng::uniform(r)).collect()).unwrap()
}

/// Normal draws pushed at least `gap` away from zero (for kinks at 0).
fn off_zero(r: &mut Prng, shape: &[usize], gap: f64) -> Tensor<f64> {
    randn(r, shape, 1.0).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

/// `Σ out ⊙ w` with `w` fixed by `key`.
fn weigh(tape: &mut Tape<f64>, out: Var, key: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let n = shape.iter().product();
    let w = rng::normal_vec(&mut rng::keyed(key, 0x77, 0, 0), n);
    let w = tape.raw(shape, w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn run<F>(inputs: &[Tensor<f64>], key: u64, f: F) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let rep = check(inputs, STEP, |t, v| {
        let out = f(t, v)?;
        weigh(t, out, key)
    })?;
    Ok((rep.max_rel_err, rep.checked))
}

/// Checks an input tensor and every parameter of `m` through `f`.
fn run_module<M, F>(m: &mut M, x: &Tensor<f64>, key: u64, f: F) -> Result<(f64, usize)>
where
    M: Module<f64>,
    F: Fn(&M, &mut Tape<f64>, Var) -> Result<Var>,
{
    let loss = |m: &M, x: &Tensor<f64>, grad: bool| -> Result<(f64, Tape<f64>, Var, Var)> {
        let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
        let xv = if grad { tape.input(x) } else { tape.constant(x) };
        let out = f(m, &mut tape, xv)?;
        let l = weigh(&mut tape, out, key)?;
        Ok((tape.item(l), tape, xv, l))
    };
    let (_, tape, xv, l) = loss(m, x, true)?;
    let grads = tape.backward(l)?;
    let mut worst = 0.0f64;
    let mut checked = 0;

    let gx = grads.of(xv).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
    let mut probe = x.clone();
    for (j, &a) in gx.iter().enumerate() {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + STEP;
        let up = loss(m, &probe, false)?.0;
        probe.data_mut()[j] = orig - STEP;
        let down = loss(m, &probe, false)?.0;
        probe.data_mut()[j] = orig;
        worst = worst.max(rel_err(a, (up - down) / (2.0 * STEP)));
        checked += 1;
    }

    let analytic: Vec<Vec<f64>> = m
        .params()
        .iter()
        .map(|(_, p)| grads.for_param(p).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    for (pi, a) in analytic.iter().enumerate() {
        for (j, &aj) in a.iter().enumerate() {
            let orig = m.params()[pi].1.data()[j];
            m.params_mut()[pi].1.data_mut()[j] = orig + STEP;
            let up = loss(m, x, false)?.0;
            m.params_mut()[pi].1.data_mut()[j] = orig - STEP;
            let down = loss(m, x, false)?.0;
            m.params_mut()[pi].1.data_mut()[j] = orig;
            let err = rel_err(aj, (up - down) / (2.0 * STEP));
            if !(err <= worst) {
                worst = err;
            }
            checked += 1;
        }
    }
    Ok((worst, checked))
}

/// Replaces every parameter with fresh draws so the checks do not depend
/// on initialisation scales.
fn scramble<M: Module<f64>>(m: &mut M, r: &mut Prng) {
    for (_, p) in m.params_mut() {
        for v in p.data_mut() {
            *v = 0.5 * rng::normal(r);
        }
    }
}

macro_rules! case {
    ($name:literal, |$r:ident, $k:ident| $body:expr) => {
        ($name, {
            fn f($r: &mut Prng, $k: u64) -> Result<(f64, usize)> {
                $body
            }
            f as Case
        })
    };
}

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        case!("add", |r, k| {
            let i = [randn(r, &[2, 3, 2, 2], 1.0), randn(r, &[2, 3, 1, 1], 1.0)];
            run(&i, k, |t, v| t.add(v[0], v[1]))
        }),
        case!("sub", |r, k| {
            let i = [randn(r, &[2, 3, 2], 1.0), randn(r, &[2, 3, 2], 1.0)];
            run(&i, k, |t, v| t.sub(v[0], v[1]))
        }),
        case!("mul", |r, k| {
            let i = [randn(r, &[2, 2, 3], 1.0), randn(r, &[2, 1, 1], 1.0)];
            run(&i, k, |t, v| t.mul(v[0], v[1]))
        }),
        case!("div", |r, k| {
            let i = [randn(r, &[3, 4], 1.0), within(r, &[3, 4], 0.5, 2.0)];
            run(&i, k, |t, v| t.div(v[0], v[1]))
        }),
        case!("neg_scale_add_scalar", |r, k| {
            let i = [randn(r, &[5], 1.0)];
            run(&i, k, |t, v| {
                let a = t.neg(v[0]);
                let b = t.scale(a, 1.7);
                Ok(t.add_scalar(b, 0.3))
            })
        }),
        case!("exp", |r, k| run(&[randn(r, &[6], 1.0)], k, |t, v| Ok(t.exp(v[0])))),
        case!("log", |r, k| run(&[within(r, &[6], 0.2, 3.0)], k, |t, v| t.log(v[0]))),
        case!("sqrt", |r, k| run(&[within(r, &[6], 0.2, 3.0)], k, |t, v| t.sqrt(v[0]))),
        case!("square", |r, k| run(&[randn(r, &[6], 1.0)], k, |t, v| Ok(t.square(v[0])))),
        case!("sigmoid", |r, k| run(&[randn(r, &[6], 2.0)], k, |t, v| Ok(t.sigmoid(v[0])))),
        case!("tanh", |r, k| run(&[randn(r, &[6], 2.0)], k, |t, v| Ok(t.tanh(v[0])))),
        case!("silu", |r, k| run(&[randn(r, &[6], 2.0)], k, |t, v| Ok(t.silu(v[0])))),
        case!("relu", |r, k| run(&[off_zero(r, &[6], 0.05)], k, |t, v| Ok(t.relu(v[0])))),
        case!("softplus", |r, k| run(&[randn(r, &[6], 2.0)], k, |t, v| Ok(t.softplus(v[0])))),
        case!("matmul", |r, k| {
            let i = [randn(r, &[3, 4], 1.0), randn(r, &[4, 2], 1.0)];
            run(&i, k, |t, v| t.matmul(v[0], v[1]))
        }),
        case!("matmul_batched_lhs", |r, k| {
            let i = [randn(r, &[2, 3, 4], 1.0), randn(r, &[4, 2], 1.0)];
            run(&i, k, |t, v| t.matmul(v[0], v[1]))
        }),
        case!("bmm", |r, k| {
            let i = [randn(r, &[2, 3, 4], 1.0), randn(r, &[2, 4, 2], 1.0)];
            run(&i, k, |t, v| t.bmm(v[0], v[1]))
        }),
        case!("conv2d", |r, k| {
            let i = [randn(r, &[2, 2, 5, 5], 1.0), randn(r, &[3, 2, 3, 3], 0.5), randn(r, &[3], 0.5)];
            run(&i, k, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1))
        }),
        case!("conv2d_strided", |r, k| {
            let i = [randn(r, &[1, 2, 6, 6], 1.0), randn(r, &[2, 2, 3, 3], 0.5)];
            run(&i, k, |t, v| t.conv2d(v[0], v[1], None, 2, 1))
        }),
        case!("upsample2x", |r, k| run(&[randn(r, &[1, 2, 2, 3], 1.0)], k, |t, v| t.upsample2x(v[0]))),
        case!("reshape_permute_transpose", |r, k| {
            run(&[randn(r, &[2, 3, 4], 1.0)], k, |t, v| {
                let a = t.permute(v[0], &[2, 0, 1])?;
                let b = t.reshape(a, &[8, 3])?;
                let c = t.transpose(b)?;
                let d = t.square(c);
                t.add(d, c)
            })
        }),
        case!("concat_slice_reverse", |r, k| {
            let i = [randn(r, &[2, 3], 1.0), randn(r, &[2, 2], 1.0)];
            run(&i, k, |t, v| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let s = t.slice(c, 1, 1, 3)?;
                let rv = t.reverse(s, 1)?;
                t.mul(rv, s)
            })
        }),
        case!("sum_mean", |r, k| {
            run(&[randn(r, &[3, 4], 1.0)], k, |t, v| {
                let sq = t.square(v[0]);
                let a = t.sum(sq);
                let b = t.mean(v[0]);
                let ab = t.mul(a, b)?;
                Ok(t.exp(ab))
            })
        }),
        case!("sum_axis_mean_axis", |r, k| {
            run(&[randn(r, &[2, 3, 4], 1.0)], k, |t, v| {
                let a = t.sum_axis(v[0], 1)?;
                let b = t.mean_axis(v[0], 2)?;
                let a2 = t.square(a);
                let b2 = t.tanh(b);
                let s1 = t.sum(a2);
                let s2 = t.sum(b2);
                t.add(s1, s2)
            })
        }),
        case!("softmax", |r, k| run(&[randn(r, &[3, 5], 2.0)], k, |t, v| t.softmax(v[0], 1))),
        case!("layer_norm", |r, k| {
            let i = [randn(r, &[3, 6], 1.0), randn(r, &[6], 1.0), randn(r, &[6], 1.0)];
            run(&i, k, |t, v| t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5))
        }),
        case!("group_norm", |r, k| {
            let i = [randn(r, &[2, 4, 2, 3], 1.0), randn(r, &[4], 1.0), randn(r, &[4], 1.0)];
            run(&i, k, |t, v| t.group_norm(v[0], 2, Some(v[1]), Some(v[2]), 1e-5))
        }),
        case!("global_max_pool", |r, k| {
            // distinct values, spaced well beyond the probe step
            let mut vals: Vec<f64> = (0..2 * 3 * 9).map(|i| i as f64 * 0.1).collect();
            rng::shuffle(&mut vals, r);
            let x = Tensor::new(vec![2, 3, 3, 3], vals).unwrap();
            run(&[x], k, |t, v| t.global_max_pool(v[0]))
        }),
        case!("cross_entropy", |r, k| {
            let targets: Vec<usize> = (0..4).map(|_| rng::below(r, 5)).collect();
            run(&[randn(r, &[4, 5], 2.0)], k, move |t, v| t.cross_entropy(v[0], &targets))
        }),
        case!("gather", |r, k| {
            let idx: Vec<usize> = (0..5).map(|_| rng::below(r, 4)).collect();
            run(&[randn(r, &[4, 3], 1.0)], k, move |t, v| t.gather(v[0], &idx))
        }),
        case!("straight_through", |r, k| {
            run(&[randn(r, &[2, 3], 1.0)], k, |t, v| {
                let d = t.detach(v[0]);
                let st = t.straight_through(v[0], d)?;
                Ok(t.sigmoid(st))
            })
        }),
        case!("recurrence", |r, k| {
            let i = [within(r, &[3], 0.1, 0.95), randn(r, &[2, 5, 3], 1.0), randn(r, &[3], 1.0)];
            run(&i, k, |t, v| t.recurrence(v[0], v[1], Some(v[2])))
        }),
        case!("attend", |r, k| {
            let i = [randn(r, &[2, 3, 4], 1.0), randn(r, &[2, 5, 4], 1.0), randn(r, &[2, 5, 4], 1.0)];
            run(&i, k, |t, v| Ok(crate::ssm::attend(t, v[0], v[1], v[2], 2)?.0))
        }),
        case!("ssm_direct", |r, k| {
            let mut p = SsmParams::<f64>::init(SsmOptions::new(3, 2), r);
            scramble(&mut p, r);
            p.decay = Decay::Direct;
            p.a = within(r, &[2], 0.2, 0.9).with_grad();
            let x = randn(r, &[2, 5, 3], 1.0);
            run_module(&mut p, &x, k, |m, t, x| m.forward(t, x, None))
        }),
        case!("bimamba_block", |r, k| {
            let mut m = BiMamba::<f64>::new(SsmOptions::new(4, 3), r);
            scramble(&mut m, r);
            let x = randn(r, &[2, 5, 4], 1.0);
            run_module(&mut m, &x, k, |m, t, x| m.forward(t, x))
        }),
        case!("bimamba_selective_conv", |r, k| {
            let opts = SsmOptions {
                selective: true,
                conv_kernel: Some(3),
                ..SsmOptions::new(3, 2)
            };
            let mut m = BiMamba::<f64>::new(opts, r);
            scramble(&mut m, r);
            let x = randn(r, &[1, 6, 3], 1.0);
            run_module(&mut m, &x, k, |m, t, x| m.forward(t, x))
        }),
        case!("mhsa_block", |r, k| {
            let mut m = Mhsa::<f64>::new(4, 2, r)?;
            scramble(&mut m, r);
            let x = randn(r, &[2, 5, 4], 1.0);
            run_module(&mut m, &x, k, |m, t, x| m.forward(t, x))
        }),
        case!("diffusion_micro_pipeline", |r, k| {
            // encoder gain, two denoiser weights and a context weight
            let p = [randn(r, &[4], 0.7)];
            let x = randn(r, &[3, 1, 2, 2], 1.0);
            let ctx = randn(r, &[3, 1, 1, 1], 1.0);
            let s = make_schedule(20, 1e-3, 0.2)?;
            let seed = k;
            let rep = check(&p, STEP, move |t, v| {
                let w = v[0];
                let xs = t.constant(&x);
                let c = t.constant(&ctx);
                let enc = t.slice(w, 0, 0, 1)?;
                let enc = t.reshape(enc, &[1, 1, 1, 1])?;
                let z0 = t.mul(xs, enc)?;
                let z0 = t.tanh(z0);
                let mut nr = rng::keyed(seed, 0x6d70, 0, 0);
                let ab = s.alpha_bar.clone();
                diffusion_loss_with(t, &s, z0, &mut nr, |t, zt, steps| {
                    let gain: Vec<f64> = steps.iter().map(|&i| ab[i - 1].sqrt()).collect();
                    let g = t.raw(vec![steps.len(), 1, 1, 1], gain);
                    let mut parts = Vec::new();
                    for i in 1..4 {
                        let s = t.slice(w, 0, i, 1)?;
                        parts.push(t.reshape(s, &[1, 1, 1, 1])?);
                    }
                    let a = t.mul(zt, parts[0])?;
                    let b = t.mul(g, parts[1])?;
                    let cc = t.mul(c, parts[2])?;
                    let bc = t.add(b, cc)?;
                    let bc = t.silu(bc);
                    let out = t.add(a, bc)?;
                    Ok(t.tanh(out))
                })
            })?;
            Ok((rep.max_rel_err, rep.checked))
        }),
    ]
}

pub fn case_names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _)| n).collect()
}

/// Runs every case for `trials` seeded trials.
pub fn run_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut out = Vec::new();
    for (ci, (name, f)) in cases().into_iter().enumerate() {
        let mut res = CaseResult {
            name,
            trials,
            checked: 0,
            max_rel_err: 0.0,
            worst_trial: 0,
        };
        for trial in 0..trials {
            let key = rng::splitmix64(seed ^ ((ci as u64) << 32) ^ trial as u64);
            let mut r = rng::keyed(seed, ci as u64, trial as u64, 0x6773);
            let (err, n) = f(&mut r, key)?;
            res.checked += n;
            if !(err <= res.max_rel_err) {
                res.max_rel_err = err;
                res.worst_trial = trial;
            }
        }
        out.push(res);
    }
    Ok(SuiteReport {
        cases: out,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_a_few_trials() {
        let rep = run_suite(3, 9).unwrap();
        for c in &rep.cases {
            assert!(c.passed(), "{} rel err {:.3e} (trial {})", c.name, c.max_rel_err, c.worst_trial);
            assert!(c.checked > 0, "{}", c.name);
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // sigmoid through a straight-through value that differs from the source
        let x = Tensor::<f64>::new(vec![3], vec![0.1, -0.4, 0.9]).unwrap();
        let rep = check(&[x], STEP, |t, v| {
            let shifted = t.add_scalar(v[0], 0.0);
            let sq = t.square(shifted);
            let frozen = t.detach(sq);
            let st = t.straight_through(v[0], frozen)?;
            Ok(t.sum(st))
        })
        .unwrap();
        assert!(!rep.passes(TOLERANCE));
    }
}
