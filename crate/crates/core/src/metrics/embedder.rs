use std::collections::BTreeMap;

use rand::Rng;

use crate::codec::{select_batch, slice_batch};
use crate::error::{dim_err, Error, Result};
use crate::nn::{prefixed, prefixed_mut, Conv2d, Linear, Module, Named, NamedMut};
use crate::rng;
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};

/// Penultimate width; these features feed the Fréchet distance.
pub const EMBED_FEATURES: usize = 64;
pub const EMBED_DIM: usize = 32;
pub const CONTRASTIVE_MARGIN: f64 = 0.3;

/// Conv net mapping `[B, C, H, W]` images to unit-norm identity vectors.
#[derive(Debug, Clone)]
pub struct IdentityEmbedder {
    pub convs: Vec<Conv2d<f32>>,
    pub hidden: Linear<f32>,
    pub out: Linear<f32>,
    image_size: usize,
}

impl IdentityEmbedder {
    /// `image_size` must be divisible by 8.
    pub fn new<R: Rng + ?Sized>(channels: usize, image_size: usize, rng: &mut R) -> Result<Self> {
        if image_size == 0 || image_size % 8 != 0 {
            return Err(Error::Config(format!("embedder image size {image_size} not divisible by 8")));
        }
        let convs = vec![
            Conv2d::same(channels, 16, rng),
            Conv2d::new(16, 32, 3, 2, 1, rng),
            Conv2d::new(32, 32, 3, 2, 1, rng),
            Conv2d::new(32, 32, 3, 2, 1, rng),
        ];
        let flat = 32 * (image_size / 8) * (image_size / 8);
        Ok(IdentityEmbedder {
            convs,
            hidden: Linear::new(flat, EMBED_FEATURES, true, rng),
            out: Linear::new(EMBED_FEATURES, EMBED_DIM, true, rng),
            image_size,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].in_channels()
    }

    /// Returns `(features [B, EMBED_FEATURES], unit embeddings [B, EMBED_DIM])`.
    pub fn forward(&self, tape: &mut Tape<f32>, x: Var) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.in_channels() || s[2] != self.image_size || s[3] != self.image_size {
            return dim_err(format!(
                "embedder expects [B, {}, {n}, {n}], got {s:?}",
                self.in_channels(),
                n = self.image_size
            ));
        }
        let mut h = x;
        for c in &self.convs {
            h = c.forward(tape, h)?;
            h = tape.silu(h);
        }
        let flat = tape.shape(h)[1..].iter().product::<usize>();
        let h = tape.reshape(h, &[s[0], flat])?;
        let f = self.hidden.forward(tape, h)?;
        let f = tape.silu(f);
        let e = self.out.forward(tape, f)?;
        Ok((f, unit_rows(tape, e)?))
    }

    /// Unit embeddings and penultimate features as plain rows.
    pub fn embed(&self, images: &Tensor<f32>) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
        let n = images.shape().first().copied().unwrap_or(0);
        let (mut feats, mut units) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for start in (0..n).step_by(64) {
            let xb = slice_batch(images, start, 64.min(n - start))?;
            let mut tape = Tape::no_grad();
            let x = tape.constant(&xb);
            let (f, e) = self.forward(&mut tape, x)?;
            feats.extend(tape.value(f).chunks(EMBED_FEATURES).map(<[f32]>::to_vec));
            units.extend(tape.value(e).chunks(EMBED_DIM).map(<[f32]>::to_vec));
        }
        Ok((units, feats))
    }
}

fn unit_rows(tape: &mut Tape<f32>, e: Var) -> Result<Var> {
    let sq = tape.square(e);
    let ss = tape.sum_axis(sq, 1)?;
    let ss = tape.add_scalar(ss, 1e-12);
    let norm = tape.sqrt(ss)?;
    tape.div(e, norm)
}

impl Module<f32> for IdentityEmbedder {
    fn params(&self) -> Named<'_, f32> {
        let mut v = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            v.extend(prefixed(&format!("conv{i}"), c.params()));
        }
        v.extend(prefixed("hidden", self.hidden.params()));
        v.extend(prefixed("out", self.out.params()));
        v
    }

    fn params_mut(&mut self) -> NamedMut<'_, f32> {
        let mut v = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("conv{i}"), c.params_mut()));
        }
        v.extend(prefixed_mut("hidden", self.hidden.params_mut()));
        v.extend(prefixed_mut("out", self.out.params_mut()));
        v
    }
}

/// Mean over the batch of `1 − cos(F(generated), F(reference))`.
pub fn id_loss(tape: &mut Tape<f32>, f: &IdentityEmbedder, generated: Var, reference: Var) -> Result<Var> {
    let (_, a) = f.forward(tape, generated)?;
    let (_, b) = f.forward(tape, reference)?;
    let ab = tape.mul(a, b)?;
    let cos = tape.sum_axis(ab, 1)?;
    let m = tape.mean(cos);
    let neg = tape.neg(m);
    Ok(tape.add_scalar(neg, 1.0))
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy)]
pub struct EmbedderTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Identities per batch; each contributes two images.
    pub identities_per_batch: usize,
    pub seed: u64,
}

impl Default for EmbedderTrainConfig {
    fn default() -> Self {
        EmbedderTrainConfig {
            epochs: 20,
            lr: 2e-3,
            identities_per_batch: 8,
            seed: 0,
        }
    }
}

/// Contrastive training: mated cosine pulled to 1, non-mated pushed below
/// the margin. Identities with a single image are skipped. Returns the
/// mean loss per epoch.
pub fn train_identity_embedder(
    f: &mut IdentityEmbedder,
    images: &Tensor<f32>,
    identities: &[usize],
    cfg: &EmbedderTrainConfig,
) -> Result<Vec<f64>> {
    if images.shape().first() != Some(&identities.len()) {
        return Err(Error::Contract(format!(
            "{} identities for {:?} images",
            identities.len(),
            images.shape()
        )));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &id) in identities.iter().enumerate() {
        groups.entry(id).or_default().push(i);
    }
    groups.retain(|id, items| {
        if items.len() < 2 {
            log::warn!("identity {id} has a single image; skipped");
        }
        items.len() >= 2
    });
    let ids: Vec<usize> = groups.keys().copied().collect();
    if ids.len() < 2 {
        return Err(Error::Contract("need at least two identities with two images".into()));
    }
    let mut r = rng::stream(cfg.seed, "embedder");
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let steps = groups.values().map(Vec::len).sum::<usize>() / (2 * cfg.identities_per_batch.max(2));
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..steps.max(1) {
            let mut pool = ids.clone();
            rng::shuffle(&mut pool, &mut r);
            pool.truncate(cfg.identities_per_batch.max(2));
            let mut items = Vec::with_capacity(2 * pool.len());
            for id in &pool {
                let g = &groups[id];
                let a = rng::below(&mut r, g.len());
                let b = (a + 1 + rng::below(&mut r, g.len() - 1)) % g.len();
                items.push(g[a]);
                items.push(g[b]);
            }
            let xb = select_batch(images, &items)?;
            let mut tape = Tape::new();
            let x = tape.constant(&xb);
            let (_, e) = f.forward(&mut tape, x)?;
            let loss = contrastive(&mut tape, e, items.len())?;
            total += tape.item(loss) as f64;
            let grads = tape.backward(loss)?;
            for (_, p) in f.params_mut() {
                grads.accumulate(p)?;
            }
            adam.step(f.params_mut().into_iter().map(|(_, p)| p))?;
            f.zero_grad();
        }
        curve.push(total / steps.max(1) as f64);
        log::info!("embedder epoch {}: loss {:.4}", curve.len(), curve[curve.len() - 1]);
    }
    Ok(curve)
}

/// Rows `2k` and `2k + 1` are mated; every other pair is not.
fn contrastive(tape: &mut Tape<f32>, e: Var, n: usize) -> Result<Var> {
    let et = tape.transpose(e)?;
    let sim = tape.matmul(e, et)?;
    let (mut mated, mut other) = (vec![0f32; n * n], vec![0f32; n * n]);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                if i / 2 == j / 2 {
                    mated[i * n + j] = 1.0 / n as f32;
                } else {
                    other[i * n + j] = 1.0 / (n * (n - 2)) as f32;
                }
            }
        }
    }
    let mated = tape.raw(vec![n, n], mated);
    let other = tape.raw(vec![n, n], other);
    let pos = tape.mul(sim, mated)?;
    let pos = tape.sum(pos);
    let pull = tape.neg(pos);
    let pull = tape.add_scalar(pull, 1.0);
    let over = tape.add_scalar(sim, -CONTRASTIVE_MARGIN as f32);
    let over = tape.relu(over);
    let push = tape.mul(over, other)?;
    let push = tape.sum(push);
    tape.add(pull, push)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, stack_images, SyntheticSpec};

    #[test]
    fn unit_norm_outputs() {
        let mut r = rng::seeded(3);
        let f = IdentityEmbedder::new(3, 16, &mut r).unwrap();
        let x = Tensor::uniform(vec![5, 3, 16, 16], 1.0, &mut r);
        let (units, feats) = f.embed(&x).unwrap();
        assert_eq!(feats[0].len(), EMBED_FEATURES);
        for u in units {
            let n: f64 = u.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "{n}");
        }
        assert!(IdentityEmbedder::new(3, 12, &mut r).is_err());
        let bad = Tensor::<f32>::zeros(vec![1, 1, 16, 16]);
        assert!(f.embed(&bad).is_err());
    }

    #[test]
    fn id_loss_of_identical_images_is_zero() {
        let mut r = rng::seeded(4);
        let f = IdentityEmbedder::new(3, 8, &mut r).unwrap();
        let x = Tensor::uniform(vec![2, 3, 8, 8], 1.0, &mut r);
        let mut tape = Tape::new();
        let a = tape.constant(&x);
        let b = tape.constant(&x);
        let l = id_loss(&mut tape, &f, a, b).unwrap();
        assert!(tape.item(l).abs() < 1e-6);
    }

    #[test]
    fn cosine_extremes() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]), 0.0);
        assert_eq!(cosine(&[1.0, 1.0], &[-3.0, -3.0]), -1.0);
        assert!((1.0 - cosine(&[0.3, 0.4], &[3.0, 4.0])).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_leaves_weights() {
        let mut r = rng::seeded(5);
        let mut f = IdentityEmbedder::new(3, 8, &mut r).unwrap();
        let before = f.clone();
        let x = Tensor::uniform(vec![4, 3, 8, 8], 1.0, &mut r);
        let cfg = EmbedderTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(train_identity_embedder(&mut f, &x, &[0, 0, 1, 1], &cfg).unwrap().is_empty());
        assert_eq!(f.out.weight, before.out.weight);
        // one identity with two images is not enough to contrast
        assert!(train_identity_embedder(&mut f, &x, &[0, 0, 1, 2], &cfg).is_err());
    }

    #[test]
    fn training_separates_identities() {
        let spec = SyntheticSpec {
            identity_count: 20,
            images_per_identity: 4,
            ..Default::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        let s: Vec<_> = ds.train.iter().collect();
        let x = stack_images(&s, false).unwrap();
        let ids: Vec<usize> = s.iter().map(|p| p.identity.unwrap()).collect();
        let mut r = rng::seeded(6);
        let mut f = IdentityEmbedder::new(3, 32, &mut r).unwrap();
        let cfg = EmbedderTrainConfig {
            epochs: 15,
            ..Default::default()
        };
        let curve = train_identity_embedder(&mut f, &x, &ids, &cfg).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        let (units, _) = f.embed(&x).unwrap();
        let (mut mated, mut other) = (Vec::new(), Vec::new());
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                let c = cosine(&units[i], &units[j]);
                if ids[i] == ids[j] {
                    mated.push(c)
                } else {
                    other.push(c)
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&mated) > mean(&other) + 0.2, "{} vs {}", mean(&mated), mean(&other));
    }
}
