//! Parameterised layers over the tape.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Real, Tape, Tensor, Var};

pub type Named<'a, T> = Vec<(String, &'a Tensor<T>)>;
pub type NamedMut<'a, T> = Vec<(String, &'a mut Tensor<T>)>;

/// Anything that owns trainable tensors.
pub trait Module<T: Real> {
    fn params(&self) -> Named<'_, T>;

    fn params_mut(&mut self) -> NamedMut<'_, T>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|(_, t)| t.zero_grad());
    }

    fn set_trainable(&mut self, on: bool) {
        self.params_mut()
            .into_iter()
            .for_each(|(_, t)| t.set_requires_grad(on));
    }
}

pub fn prefixed<'a, T: Real>(prefix: &str, items: Named<'a, T>) -> Named<'a, T> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

pub fn prefixed_mut<'a, T: Real>(prefix: &str, items: NamedMut<'a, T>) -> NamedMut<'a, T> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// Affine map over the last axis: `x·W + b`, `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Linear {
            weight: Tensor::uniform(vec![input, output], bound, rng).with_grad(),
            bias: bias.then(|| Tensor::zeros(vec![output]).with_grad()),
        }
    }

    /// Gaussian weights with standard deviation `std`.
    pub fn normal<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, std: f64, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::randn(vec![input, output], std, rng).with_grad(),
            bias: bias.then(|| Tensor::zeros(vec![output]).with_grad()),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn params(&self) -> Named<'_, T> {
        let mut v = vec![("weight".to_string(), &self.weight)];
        v.extend(self.bias.iter().map(|b| ("bias".to_string(), b)));
        v
    }

    fn params_mut(&mut self) -> NamedMut<'_, T> {
        let mut v = vec![("weight".to_string(), &mut self.weight)];
        v.extend(self.bias.iter_mut().map(|b| ("bias".to_string(), b)));
        v
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        Conv2d {
            weight: Tensor::uniform(vec![cout, cin, kernel, kernel], bound, rng).with_grad(),
            bias: Tensor::zeros(vec![cout]).with_grad(),
            stride,
            pad,
        }
    }

    /// 3×3, stride 1, "same" padding.
    pub fn same<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Self::new(cin, cout, 3, 1, 1, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn params(&self) -> Named<'_, T> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> NamedMut<'_, T> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm<T: Real> {
    pub groups: usize,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> GroupNorm<T> {
    pub fn new(groups: usize, channels: usize) -> Self {
        GroupNorm {
            groups,
            gamma: Tensor::full(vec![channels], T::one()).with_grad(),
            beta: Tensor::zeros(vec![channels]).with_grad(),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.group_norm(x, self.groups, Some(g), Some(b), 1e-5)
    }
}

impl<T: Real> Module<T> for GroupNorm<T> {
    fn params(&self) -> Named<'_, T> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn params_mut(&mut self) -> NamedMut<'_, T> {
        vec![("gamma".into(), &mut self.gamma), ("beta".into(), &mut self.beta)]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T: Real> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(width: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(vec![width], T::one()).with_grad(),
            beta: Tensor::zeros(vec![width]).with_grad(),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.layer_norm(x, Some(g), Some(b), 1e-5)
    }
}

impl<T: Real> Module<T> for LayerNorm<T> {
    fn params(&self) -> Named<'_, T> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn params_mut(&mut self) -> NamedMut<'_, T> {
        vec![("gamma".into(), &mut self.gamma), ("beta".into(), &mut self.beta)]
    }
}

/// Largest group count ≤ 8 that divides `channels`.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Squared error averaged over elements.
pub fn mse<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Sum of gradients over a module, used to test that nothing reached frozen weights.
pub fn grad_norm<T: Real>(m: &dyn Module<T>) -> f64 {
    m.params()
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt()
}

/// Copies every same-named parameter value from `src` into `dst`.
pub fn copy_params<T: Real>(src: &dyn Module<T>, dst: &mut dyn Module<T>) -> Result<()> {
    let values: std::collections::HashMap<String, &Tensor<T>> = src.params().into_iter().collect();
    for (name, t) in dst.params_mut() {
        if let Some(v) = values.get(&name) {
            t.assign(v)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn linear_shapes_and_names() {
        let mut r = rng::seeded(1);
        let lin = Linear::<f32>::new(4, 3, true, &mut r);
        assert_eq!(lin.param_count(), 15);
        let names: Vec<String> = prefixed("proj", lin.params()).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["proj.weight", "proj.bias"]);
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(vec![2, 5, 4]));
        let y = lin.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 5, 3]);
    }

    #[test]
    fn groups_divide() {
        assert_eq!(norm_groups(32), 8);
        assert_eq!(norm_groups(12), 6);
        assert_eq!(norm_groups(3), 3);
        assert_eq!(norm_groups(1), 1);
    }
}
