use crate::error::{dim_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Linear β schedule with exact cumulative products. Timesteps are
/// 1-based: index `t` lives at position `t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one timestep".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    /// `(α_t, ᾱ_t)`
    pub fn at(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        Ok((self.alpha[t - 1], self.alpha_bar[t - 1]))
    }
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`
pub fn q_sample<T: Real>(s: &NoiseSchedule, z0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, ab) = s.at(t)?;
    if z0.shape() != eps.shape() {
        return dim_err(format!("z0 {:?} vs noise {:?}", z0.shape(), eps.shape()));
    }
    let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    Tensor::new(
        z0.shape().to_vec(),
        z0.data().iter().zip(eps.data()).map(|(&z, &e)| a * z + b * e).collect(),
    )
}

/// Scalar reverse-step mean `(z − (1−α)/√(1−ᾱ)·ε̂) / √α`.
pub fn reverse_mean_scalar(alpha: f64, alpha_bar: f64, z: f64, eps_hat: f64) -> Result<f64> {
    if 1.0 - alpha_bar <= 0.0 {
        return Err(Error::Singularity(format!("1 - alpha_bar = {} at this step", 1.0 - alpha_bar)));
    }
    Ok((z - (1.0 - alpha) / (1.0 - alpha_bar).sqrt() * eps_hat) / alpha.sqrt())
}

pub fn reverse_mean<T: Real>(s: &NoiseSchedule, z_t: &Tensor<T>, t: usize, eps_hat: &Tensor<T>) -> Result<Tensor<T>> {
    let (a, ab) = s.at(t)?;
    if z_t.shape() != eps_hat.shape() {
        return dim_err(format!("z_t {:?} vs noise estimate {:?}", z_t.shape(), eps_hat.shape()));
    }
    reverse_mean_scalar(a, ab, 0.0, 0.0)?;
    let c = (1.0 - a) / (1.0 - ab).sqrt();
    let inv = 1.0 / a.sqrt();
    Tensor::new(
        z_t.shape().to_vec(),
        z_t.data()
            .iter()
            .zip(eps_hat.data())
            .map(|(&z, &e)| T::of((z.f64() - c * e.f64()) * inv))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn single_step_and_bounds() {
        let s = make_schedule(1, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar, vec![1.0 - 1e-4]);
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
        assert!(matches!(s.at(2), Err(Error::Contract(_))));
        assert!(s.at(0).is_err());
    }

    #[test]
    fn long_schedule_ends_near_zero() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        // independent product in log space
        let log: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        assert!((s.alpha_bar[999] - log.exp()).abs() < 1e-12);
        assert!(s.alpha_bar[999] < 5e-5);
    }

    #[test]
    fn q_sample_limits() {
        let z0 = Tensor::<f64>::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap();
        let eps = Tensor::<f64>::from_f64(vec![3], &[0.3, 0.1, -1.0]).unwrap();
        let tiny = make_schedule(1, 1e-12, 1e-12).unwrap();
        assert!(q_sample(&tiny, &z0, 1, &eps).unwrap().max_abs_diff(&z0) < 1e-5);
        let s = make_schedule(10, 1e-3, 0.2).unwrap();
        let zero = Tensor::<f64>::zeros(vec![3]);
        let z = q_sample(&s, &z0, 7, &zero).unwrap();
        let k = s.alpha_bar[6].sqrt();
        assert_eq!(z.data(), &[k, -2.0 * k, 0.5 * k]);
        assert!(q_sample(&s, &z0, 11, &eps).is_err());
        assert!(q_sample(&s, &z0, 1, &Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn q_sample_moments() {
        let s = NoiseSchedule {
            beta: vec![0.1],
            alpha: vec![0.9],
            alpha_bar: vec![0.9],
        };
        let n = 100_000;
        let mut r = rng::seeded(11);
        let z0 = Tensor::<f64>::full(vec![n], 1.0);
        let eps = Tensor::<f64>::from_f64(vec![n], &rng::normal_vec(&mut r, n)).unwrap();
        let z = q_sample(&s, &z0, 1, &eps).unwrap();
        let mean = z.data().iter().sum::<f64>() / n as f64;
        let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // standard errors of the mean and of the variance of a Gaussian sample
        let se_mean = (0.1f64 / n as f64).sqrt();
        let se_var = 0.1 * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - 0.9f64.sqrt()).abs() < 3.0 * se_mean, "{mean}");
        assert!((var - 0.1).abs() < 3.0 * se_var, "{var}");
    }

    #[test]
    fn reverse_mean_examples() {
        let v = reverse_mean_scalar(0.99, 0.9, 1.0, 0.5).unwrap();
        assert!((v - 0.98915).abs() < 1e-5, "{v}");
        assert_eq!(reverse_mean_scalar(1.0, 0.9, 0.7, 123.0).unwrap(), 0.7);
        assert_eq!(reverse_mean_scalar(0.96, 0.5, 0.8, 0.0).unwrap(), 0.8 / 0.96f64.sqrt());
        assert!(matches!(reverse_mean_scalar(1.0, 1.0, 0.0, 0.0), Err(Error::Singularity(_))));
    }

    proptest! {
        #[test]
        fn schedule_strictly_decreasing(steps in 1usize..300, b0 in 1e-6f64..0.1, span in 0.0f64..0.5) {
            let b1 = (b0 + span).min(0.999);
            let s = make_schedule(steps, b0, b1).unwrap();
            prop_assert!(s.beta.iter().all(|&b| b > 0.0 && b < 1.0));
            prop_assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
            let mut acc = 1.0;
            for (i, a) in s.alpha.iter().enumerate() {
                acc *= a;
                prop_assert_eq!(acc, s.alpha_bar[i]);
            }
        }

        #[test]
        fn one_step_plant_and_recover(z0 in -5.0f64..5.0, eps in -3.0f64..3.0, beta in 1e-4f64..0.9) {
            let s = make_schedule(1, beta, beta).unwrap();
            let zt = q_sample(&s, &Tensor::<f64>::scalar(z0), 1, &Tensor::scalar(eps)).unwrap();
            let mu = reverse_mean(&s, &zt, 1, &Tensor::scalar(eps)).unwrap();
            prop_assert!((mu.data()[0] - z0).abs() < 1e-10);
        }
    }
}
