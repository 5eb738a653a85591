use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Diagonal loading when a side has too few samples for a full-rank covariance.
pub const FRECHET_RIDGE: f64 = 1e-6;

/// Channel-mean greyscale plane of a `[C, H, W]` image.
fn grey(img: &Tensor<f32>) -> Result<(Vec<f64>, usize, usize)> {
    let [c, h, w] = img.shape()[..] else {
        return dim_err(format!("image must be [C, H, W], got {:?}", img.shape()));
    };
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for ch in 0..c {
        for (o, &v) in out.iter_mut().zip(&img.data()[ch * plane..(ch + 1) * plane]) {
            *o += v as f64;
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    Ok((out, h, w))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over every fully contained Gaussian window; images are
/// `[C, H, W]` compared in greyscale with data range `range`.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>, range: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return dim_err(format!("ssim of {:?} and {:?}", a.shape(), b.shape()));
    }
    let (x, h, w) = grey(a)?;
    let (y, _, _) = grey(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return dim_err(format!("{h}x{w} image smaller than the {SSIM_WINDOW}-px window"));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..SSIM_WINDOW {
                for v in 0..SSIM_WINDOW {
                    let wt = g[u] * g[v];
                    let p = (i + u) * w + j + v;
                    mx += wt * x[p];
                    my += wt * y[p];
                    xx += wt * x[p] * x[p];
                    yy += wt * y[p] * y[p];
                    xy += wt * x[p] * y[p];
                }
            }
            let sx = xx - mx * mx;
            let sy = yy - my * my;
            let sxy = xy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// Peak signal-to-noise ratio in dB; identical inputs give `+inf`.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, max_val: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return dim_err(format!("psnr of {:?} and {:?}", a.shape(), b.shape()));
    }
    let n = a.numel().max(1) as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// Mean and covariance of a sample: `(μ, Σ)` with the unbiased estimator.
pub fn moments(feats: &[Vec<f32>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = feats.len();
    if n < 2 {
        return Err(Error::Contract(format!("Fréchet distance needs at least 2 samples, got {n}")));
    }
    let d = feats[0].len();
    if feats.iter().any(|f| f.len() != d) {
        return dim_err("feature rows differ in length");
    }
    let mut mu = vec![0.0; d];
    for f in feats {
        for (m, &v) in mu.iter_mut().zip(f) {
            *m += v as f64 / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    for f in feats {
        for i in 0..d {
            let di = f[i] as f64 - mu[i];
            for j in 0..d {
                cov[i * d + j] += di * (f[j] as f64 - mu[j]) / (n - 1) as f64;
            }
        }
    }
    if n < d + 1 {
        for i in 0..d {
            cov[i * d + i] += FRECHET_RIDGE;
        }
    }
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^½)` from supplied moments; `cov_*`
/// are row-major `d × d`.
pub fn frechet_from_moments(mu_a: &[f64], cov_a: &[f64], mu_b: &[f64], cov_b: &[f64]) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.len() != d * d || cov_b.len() != d * d {
        return dim_err(format!("moment sizes disagree for d = {d}"));
    }
    let ma = DMatrix::from_row_slice(d, d, cov_a);
    let mb = DMatrix::from_row_slice(d, d, cov_b);
    let sa = sym_sqrt(&(0.5 * (&ma + ma.transpose())));
    // √Σa Σb √Σa is symmetric PSD and has the eigenvalues of Σa Σb
    let inner = &sa * &mb * &sa;
    let inner = 0.5 * (&inner + inner.transpose());
    let tr_cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = DVector::from_column_slice(mu_a) - DVector::from_column_slice(mu_b);
    let value = diff.norm_squared() + ma.trace() + mb.trace() - 2.0 * tr_cross;
    Ok(value.max(0.0))
}

pub fn frechet_distance(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64> {
    let (mu_a, cov_a) = moments(a)?;
    let (mu_b, cov_b) = moments(b)?;
    frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn img(c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> Tensor<f32> {
        let mut d = Vec::new();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    d.push(f(ch, y, x));
                }
            }
        }
        Tensor::new(vec![c, h, w], d).unwrap()
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let mut r = rng::seeded(1);
        let x = Tensor::uniform(vec![3, 16, 16], 1.0, &mut r).map(|v: f32| v.abs());
        assert_eq!(ssim(&x, &x, 1.0).unwrap(), 1.0);
        let board = img(1, 16, 16, |_, y, x| ((x + y) % 2) as f32);
        let inv = board.map(|v| 1.0 - v);
        assert!(ssim(&board, &inv, 1.0).unwrap() < 0.0);
        assert!(ssim(&board, &img(1, 16, 15, |_, _, _| 0.0), 1.0).is_err());
        assert!(ssim(&img(1, 8, 8, |_, _, _| 0.0), &img(1, 8, 8, |_, _, _| 0.0), 1.0).is_err());
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = img(1, 12, 12, |_, _, _| 0.5);
        let b = img(1, 12, 12, |_, _, _| 0.6);
        let (ma, mb) = (0.5f32 as f64, 0.6f32 as f64);
        let c1 = (0.01f64).powi(2);
        let expect = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        assert!((ssim(&a, &b, 1.0).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn psnr_golden_values() {
        let a = img(1, 4, 4, |_, y, x| (y * 4 + x) as f32);
        let b = a.map(|v| v + 16.0);
        let p = psnr(&a, &b, 255.0).unwrap();
        assert!((p - 10.0 * (255.0f64 * 255.0 / 256.0).log10()).abs() < 1e-12);
        assert!((p - 24.048).abs() < 1e-3);
        let half = psnr(&a, &b, 127.5).unwrap();
        assert!((p - half - 10.0 * 4f64.log10()).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn frechet_golden_and_degenerate() {
        let v = frechet_from_moments(&[0.0], &[1.0], &[3.0], &[1.0]).unwrap();
        assert!((v - 9.0).abs() < 1e-6);
        // equal means, variances 1 and 4: (1 − 2)² = 1
        let v = frechet_from_moments(&[0.0], &[1.0], &[0.0], &[4.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
        assert!(frechet_distance(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
    }

    fn sample(seed: u64, n: usize, d: usize, shift: f32) -> Vec<Vec<f32>> {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng::normal(&mut r) as f32 + shift).collect())
            .collect()
    }

    #[test]
    fn frechet_ridge_for_few_samples() {
        let a = sample(1, 3, 8, 0.0);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn frechet_identity_and_symmetry(seed in 0u64..1000, d in 1usize..6, shift in -2.0f32..2.0) {
            let a = sample(seed, 20, d, 0.0);
            let b = sample(seed + 1, 25, d, shift);
            prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-6 * (1.0 + ab));
        }

        #[test]
        fn ssim_symmetric(seed in 0u64..1000) {
            let mut r = rng::seeded(seed);
            let a = Tensor::uniform(vec![3, 12, 12], 1.0, &mut r);
            let b = Tensor::uniform(vec![3, 12, 12], 1.0, &mut r);
            prop_assert!((ssim(&a, &b, 1.0).unwrap() - ssim(&b, &a, 1.0).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn psnr_decreases_with_error(base in 0.01f32..0.4, extra in 0.01f32..0.4) {
            let a = Tensor::new(vec![1, 2, 2], vec![0.5; 4]).unwrap();
            let b = a.map(|v| v + base);
            let c = a.map(|v| v + base + extra);
            prop_assert!(psnr(&a, &b, 1.0).unwrap() > psnr(&a, &c, 1.0).unwrap());
        }
    }
}
