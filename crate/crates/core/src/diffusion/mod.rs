//! Latent diffusion: noise schedule, the conditional UNet, the noise-prediction
//! objective, the ancestral sampler and the end-to-end translation.

mod schedule;
mod train;
mod unet;

pub use schedule::{make_schedule, q_sample, reverse_mean, reverse_mean_scalar, NoiseSchedule};
pub use train::*;
pub use unet::{timestep_features, AttentionKind, Denoiser, DenoiserConfig, ThermalInjection};

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::rng;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Conditioning for one batch: the thermal latent and the context tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    /// `[B, c_th, h, w]`
    pub thermal_latent: Tensor<f32>,
    /// `[B, L, d_ctx]`
    pub tokens: Tensor<f32>,
}

impl ConditionBundle {
    pub fn batch(&self) -> usize {
        self.thermal_latent.shape()[0]
    }
}

/// `ε̂` for a batch without building gradients.
pub fn denoise_eps(model: &Denoiser, z_t: &Tensor<f32>, t: &[usize], cond: &ConditionBundle) -> Result<Tensor<f32>> {
    model.predict(z_t, t, &cond.thermal_latent, &cond.tokens)
}

/// Noise-prediction objective `mean ‖ε − f(z_t, t)‖²` on the tape, with
/// `t ~ U[1, T]` per item and `ε ~ N(0, 1)`. `eps_model` maps `(z_t, t)`
/// to `ε̂`; `z0` may carry gradients.
pub fn diffusion_loss_with<T, R, F>(tape: &mut Tape<T>, s: &NoiseSchedule, z0: Var, r: &mut R, eps_model: F) -> Result<Var>
where
    T: Real,
    R: Rng + ?Sized,
    F: FnOnce(&mut Tape<T>, Var, &[usize]) -> Result<Var>,
{
    let shape = tape.shape(z0).to_vec();
    let Some(&b) = shape.first() else {
        return dim_err("latent batch must have a leading axis");
    };
    let per = shape[1..].iter().product::<usize>();
    let t: Vec<usize> = (0..b).map(|_| 1 + rng::below(r, s.steps())).collect();
    let eps: Vec<T> = (0..b * per).map(|_| T::of(rng::normal(r))).collect();
    let mut coef_shape = vec![b];
    coef_shape.extend(std::iter::repeat_n(1, shape.len() - 1));
    let a: Vec<T> = t.iter().map(|&ti| T::of(s.alpha_bar[ti - 1].sqrt())).collect();
    let c: Vec<T> = t.iter().map(|&ti| T::of((1.0 - s.alpha_bar[ti - 1]).sqrt())).collect();
    let a = tape.raw(coef_shape.clone(), a);
    let c = tape.raw(coef_shape, c);
    let eps = tape.raw(shape, eps);
    let signal = tape.mul(z0, a)?;
    let noise = tape.mul(eps, c)?;
    let z_t = tape.add(signal, noise)?;
    let eps_hat = eps_model(tape, z_t, &t)?;
    let d = tape.sub(eps, eps_hat)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

pub fn diffusion_loss<R: Rng + ?Sized>(
    tape: &mut Tape<f32>,
    model: &Denoiser,
    s: &NoiseSchedule,
    z0: Var,
    thermal: Var,
    tokens: Var,
    r: &mut R,
) -> Result<Var> {
    diffusion_loss_with(tape, s, z0, r, |tape, z_t, t| model.forward(tape, z_t, t, thermal, tokens))
}

/// Standard deviation of the injected noise at each reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaPolicy {
    /// `σ_t = √β_t`
    #[default]
    Beta,
    /// `σ_t² = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`
    Posterior,
}

impl SigmaPolicy {
    pub fn sigma(self, s: &NoiseSchedule, t: usize) -> f64 {
        if t <= 1 {
            return 0.0;
        }
        match self {
            SigmaPolicy::Beta => s.beta[t - 1].sqrt(),
            SigmaPolicy::Posterior => {
                (s.beta[t - 1] * (1.0 - s.alpha_bar[t - 2]) / (1.0 - s.alpha_bar[t - 1])).sqrt()
            }
        }
    }
}

/// Ancestral sampling from `z_T ~ N(0, 1)` down to `z_0`. Item `i` of the
/// batch draws all of its noise from `rngs[i]`, so a sample does not depend
/// on what else shares its batch.
pub fn sample_with<F>(
    s: &NoiseSchedule,
    shape: &[usize],
    rngs: &mut [rng::Prng],
    policy: SigmaPolicy,
    mut eps_model: F,
) -> Result<Tensor<f32>>
where
    F: FnMut(&Tensor<f32>, &[usize]) -> Result<Tensor<f32>>,
{
    let b = shape[0];
    if rngs.len() != b {
        return dim_err(format!("{} generators for batch {b}", rngs.len()));
    }
    let per = shape[1..].iter().product::<usize>();
    let mut data = Vec::with_capacity(b * per);
    for r in rngs.iter_mut() {
        data.extend((0..per).map(|_| rng::normal(r) as f32));
    }
    let mut z = Tensor::new(shape.to_vec(), data)?;
    for t in (1..=s.steps()).rev() {
        let ts = vec![t; b];
        let eps = eps_model(&z, &ts)?;
        let mut mu = reverse_mean(s, &z, t, &eps)?;
        let sigma = policy.sigma(s, t);
        if sigma > 0.0 {
            let d = mu.data_mut();
            for (i, r) in rngs.iter_mut().enumerate() {
                for v in &mut d[i * per..(i + 1) * per] {
                    *v += (sigma * rng::normal(r)) as f32;
                }
            }
        }
        z = mu;
    }
    Ok(z)
}

pub fn sample(
    model: &Denoiser,
    s: &NoiseSchedule,
    cond: &ConditionBundle,
    rngs: &mut [rng::Prng],
    policy: SigmaPolicy,
) -> Result<Tensor<f32>> {
    let c = &model.config;
    let shape = [cond.batch(), c.latent_channels, c.latent_size, c.latent_size];
    sample_with(s, &shape, rngs, policy, |z, t| denoise_eps(model, z, t, cond))
}

/// Differentiable few-step sample from pure noise at `T`; see
/// [`abbreviated_sample_from`].
pub fn abbreviated_sample<R: Rng + ?Sized>(
    tape: &mut Tape<f32>,
    model: &Denoiser,
    s: &NoiseSchedule,
    thermal: Var,
    tokens: Var,
    steps: usize,
    r: &mut R,
) -> Result<Var> {
    let c = &model.config;
    let b = tape.shape(thermal)[0];
    let shape = vec![b, c.latent_channels, c.latent_size, c.latent_size];
    let n = shape.iter().product::<usize>();
    let z = tape.raw(shape, (0..n).map(|_| rng::normal(r) as f32).collect());
    abbreviated_sample_from(tape, model, s, z, s.steps(), thermal, tokens, steps)
}

/// Deterministic jumps from `z` at `t_start` through `steps` evenly spaced
/// timesteps, each predicting `z_0` and re-noising it with the predicted
/// noise. Returns the final `z_0` estimate.
#[allow(clippy::too_many_arguments)]
pub fn abbreviated_sample_from(
    tape: &mut Tape<f32>,
    model: &Denoiser,
    s: &NoiseSchedule,
    z: Var,
    t_start: usize,
    thermal: Var,
    tokens: Var,
    steps: usize,
) -> Result<Var> {
    s.check_t(t_start)?;
    let b = tape.shape(thermal)[0];
    let steps = steps.clamp(1, t_start);
    let taus: Vec<usize> = (0..steps).map(|k| (t_start * (steps - k)).div_ceil(steps)).collect();
    let mut z = z;
    let mut x0 = z;
    for (k, &tau) in taus.iter().enumerate() {
        let ab = s.alpha_bar[tau - 1];
        let eps = model.forward(tape, z, &vec![tau; b], thermal, tokens)?;
        let noise = tape.scale(eps, (1.0 - ab).sqrt() as f32);
        let diff = tape.sub(z, noise)?;
        x0 = tape.scale(diff, (1.0 / ab.sqrt()) as f32);
        if let Some(&next) = taus.get(k + 1) {
            let abn = s.alpha_bar[next - 1];
            let a = tape.scale(x0, abn.sqrt() as f32);
            let e = tape.scale(eps, (1.0 - abn).sqrt() as f32);
            z = tape.add(a, e)?;
        }
    }
    Ok(x0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Module;

    #[test]
    fn zero_model_loss_is_noise_power() {
        let s = make_schedule(50, 1e-3, 0.1).unwrap();
        let mut r = rng::seeded(1);
        let mut tape = Tape::<f64>::no_grad();
        let z0 = tape.constant(&Tensor::randn(vec![64, 4, 4, 4], 1.0, &mut r));
        let l = diffusion_loss_with(&mut tape, &s, z0, &mut r, |tape, z, _| {
            let zero = tape.scale(z, 0.0);
            Ok(zero)
        })
        .unwrap();
        // mean of 4096 squared standard normals: 1 ± ~3·√(2/4096)
        assert!((tape.item(l) - 1.0).abs() < 0.07, "{}", tape.item(l));
    }

    #[test]
    fn perfect_model_has_zero_loss() {
        let s = make_schedule(20, 1e-3, 0.2).unwrap();
        let mut r = rng::seeded(2);
        let z0t = Tensor::<f64>::randn(vec![3, 5], 1.0, &mut r);
        let mut tape = Tape::<f64>::no_grad();
        let z0 = tape.constant(&z0t);
        let l = diffusion_loss_with(&mut tape, &s, z0, &mut r, |tape, z_t, t| {
            // invert the forward marginal exactly
            let zt = tape.value(z_t).to_vec();
            let eps: Vec<f64> = zt
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let ab = s.alpha_bar[t[i / 5] - 1];
                    (v - ab.sqrt() * z0t.data()[i]) / (1.0 - ab).sqrt()
                })
                .collect();
            Ok(tape.raw(vec![3, 5], eps))
        })
        .unwrap();
        assert!(tape.item(l) >= 0.0 && tape.item(l) < 1e-20);
    }

    #[test]
    fn plant_and_recover_single_step() {
        let s = make_schedule(1, 0.3, 0.3).unwrap();
        let mut r = rng::seeded(3);
        let z0 = Tensor::<f32>::randn(vec![2, 6], 1.0, &mut r);
        let mut rngs = vec![rng::keyed(9, 0, 0, 0), rng::keyed(9, 1, 0, 0)];
        let ab = s.alpha_bar[0];
        let out = sample_with(&s, &[2, 6], &mut rngs, SigmaPolicy::Beta, |z, _| {
            Ok(Tensor::new(
                z.shape().to_vec(),
                z.data()
                    .iter()
                    .zip(z0.data())
                    .map(|(&zt, &x)| ((zt as f64 - ab.sqrt() * x as f64) / (1.0 - ab).sqrt()) as f32)
                    .collect(),
            )?)
        })
        .unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-5);
    }

    #[test]
    fn sampling_is_deterministic_and_batch_independent() {
        let cfg = DenoiserConfig {
            latent_channels: 2,
            latent_size: 4,
            thermal_channels: 2,
            base_channels: 8,
            d_ctx: 4,
            time_dim: 8,
            heads: 2,
            d_state: 4,
            ..Default::default()
        };
        let mut m = Denoiser::new(cfg, &mut rng::seeded(4)).unwrap();
        for (_, p) in m.params_mut() {
            if p.data().iter().all(|&v| v == 0.0) && p.shape().len() == 4 {
                p.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * (i % 7) as f32);
            }
        }
        let s = make_schedule(6, 1e-2, 0.2).unwrap();
        let mut r = rng::seeded(5);
        let cond = ConditionBundle {
            thermal_latent: Tensor::randn(vec![2, 2, 4, 4], 1.0, &mut r),
            tokens: Tensor::randn(vec![2, 1, 4], 1.0, &mut r),
        };
        let gens = || vec![rng::keyed(1, 0, 0, 0), rng::keyed(1, 1, 0, 0)];
        let a = sample(&m, &s, &cond, &mut gens(), SigmaPolicy::Beta).unwrap();
        let b = sample(&m, &s, &cond, &mut gens(), SigmaPolicy::Beta).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 2, 4, 4]);
        let single = ConditionBundle {
            thermal_latent: cond.thermal_latent.index0(1).unwrap().reshape(vec![1, 2, 4, 4]).unwrap(),
            tokens: cond.tokens.index0(1).unwrap().reshape(vec![1, 1, 4]).unwrap(),
        };
        let one = sample(&m, &s, &single, &mut [rng::keyed(1, 1, 0, 0)], SigmaPolicy::Beta).unwrap();
        assert!(one.max_abs_diff(&a.index0(1).unwrap().reshape(vec![1, 2, 4, 4]).unwrap()) < 1e-5);
        assert!(sample(&m, &s, &cond, &mut [rng::keyed(1, 0, 0, 0)], SigmaPolicy::Beta).is_err());
    }

    #[test]
    fn zero_noise_model_jumps_straight_to_scaled_start() {
        // a fresh denoiser has a zero output layer, so every jump keeps z/√ᾱ_start
        let cfg = DenoiserConfig {
            latent_channels: 2,
            latent_size: 4,
            thermal_channels: 2,
            base_channels: 8,
            d_ctx: 4,
            time_dim: 8,
            heads: 2,
            d_state: 4,
            ..Default::default()
        };
        let m = Denoiser::new(cfg, &mut rng::seeded(4)).unwrap();
        let s = make_schedule(20, 1e-2, 0.2).unwrap();
        let mut r = rng::seeded(6);
        let z = Tensor::<f32>::randn(vec![2, 2, 4, 4], 1.0, &mut r);
        let mut tape = Tape::no_grad();
        let zv = tape.constant(&z);
        let th = tape.constant(&Tensor::randn(vec![2, 2, 4, 4], 1.0, &mut r));
        let tk = tape.constant(&Tensor::randn(vec![2, 1, 4], 1.0, &mut r));
        let x0 = abbreviated_sample_from(&mut tape, &m, &s, zv, 12, th, tk, 5).unwrap();
        let want = z.map(|v| v / s.alpha_bar[11].sqrt() as f32);
        assert!(tape.tensor(x0).max_abs_diff(&want) < 1e-5);
        assert!(abbreviated_sample_from(&mut tape, &m, &s, zv, 21, th, tk, 5).is_err());
    }

    #[test]
    fn sigma_policies() {
        let s = make_schedule(10, 1e-3, 0.2).unwrap();
        assert_eq!(SigmaPolicy::Beta.sigma(&s, 1), 0.0);
        assert_eq!(SigmaPolicy::Beta.sigma(&s, 5), s.beta[4].sqrt());
        assert!(SigmaPolicy::Posterior.sigma(&s, 5) < SigmaPolicy::Beta.sigma(&s, 5));
    }
}
