//! VQ-VAE image codec: conv encoder, nearest-code quantiser with a
//! straight-through gradient, conv decoder with a sigmoid output.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::nn::{mse, norm_groups, prefixed, prefixed_mut, Conv2d, GroupNorm, Module, Named, NamedMut};
use crate::rng;
use crate::tensor::{gemm, Adam, AdamConfig, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub downsample: usize,
    pub latent_channels: usize,
    pub codebook_size: usize,
    pub commitment: f64,
    pub base_channels: usize,
}

impl CodecConfig {
    pub fn visible() -> Self {
        CodecConfig {
            image_size: 32,
            image_channels: 3,
            downsample: 4,
            latent_channels: 8,
            codebook_size: 256,
            commitment: 0.25,
            base_channels: 16,
        }
    }

    pub fn thermal() -> Self {
        CodecConfig {
            image_channels: 1,
            ..Self::visible()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.downsample;
        if f == 0 || !f.is_power_of_two() {
            return Err(Error::Config(format!("downsample factor {f} is not a power of two")));
        }
        if self.image_size % f != 0 || self.image_size < f {
            return Err(Error::Config(format!(
                "image size {} not divisible by downsample factor {f}",
                self.image_size
            )));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config(format!("codebook needs at least 2 codes, got {}", self.codebook_size)));
        }
        if self.image_channels == 0 || self.latent_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.downsample
    }

    fn levels(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    /// Channel width at resolution level `i` (0 = full resolution).
    fn width(&self, i: usize) -> usize {
        if i == self.levels() {
            2 * self.base_channels
        } else {
            self.base_channels
        }
    }
}

#[derive(Debug, Clone)]
struct NormAct {
    norm: GroupNorm<f32>,
}

impl NormAct {
    fn new(ch: usize) -> Self {
        NormAct {
            norm: GroupNorm::new(norm_groups(ch), ch),
        }
    }

    fn forward(&self, tape: &mut Tape<f32>, x: Var) -> Result<Var> {
        let y = self.norm.forward(tape, x)?;
        Ok(tape.silu(y))
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    n1: NormAct,
    c1: Conv2d<f32>,
    n2: NormAct,
    c2: Conv2d<f32>,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(ch: usize, rng: &mut R) -> Self {
        ResBlock {
            n1: NormAct::new(ch),
            c1: Conv2d::same(ch, ch, rng),
            n2: NormAct::new(ch),
            c2: Conv2d::same(ch, ch, rng),
        }
    }

    fn forward(&self, tape: &mut Tape<f32>, x: Var) -> Result<Var> {
        let h = self.n1.forward(tape, x)?;
        let h = self.c1.forward(tape, h)?;
        let h = self.n2.forward(tape, h)?;
        let h = self.c2.forward(tape, h)?;
        tape.add(x, h)
    }

    fn named(&self) -> Named<'_, f32> {
        let mut v = prefixed("n1", self.n1.norm.params());
        v.extend(prefixed("c1", self.c1.params()));
        v.extend(prefixed("n2", self.n2.norm.params()));
        v.extend(prefixed("c2", self.c2.params()));
        v
    }

    fn named_mut(&mut self) -> NamedMut<'_, f32> {
        let mut v = prefixed_mut("n1", self.n1.norm.params_mut());
        v.extend(prefixed_mut("c1", self.c1.params_mut()));
        v.extend(prefixed_mut("n2", self.n2.norm.params_mut()));
        v.extend(prefixed_mut("c2", self.c2.params_mut()));
        v
    }
}

/// One pre-activated convolution (norm, SiLU, conv) of the down/up paths.
#[derive(Debug, Clone)]
struct Stage {
    pre: NormAct,
    conv: Conv2d<f32>,
    upsample: bool,
}

impl Stage {
    fn forward(&self, tape: &mut Tape<f32>, x: Var) -> Result<Var> {
        let h = self.pre.forward(tape, x)?;
        let h = if self.upsample { tape.upsample2x(h)? } else { h };
        self.conv.forward(tape, h)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    stem: Conv2d<f32>,
    downs: Vec<Stage>,
    res: ResBlock,
    out_pre: NormAct,
    out: Conv2d<f32>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    stem: Conv2d<f32>,
    res: ResBlock,
    ups: Vec<Stage>,
    out_pre: NormAct,
    out: Conv2d<f32>,
}

impl Encoder {
    fn new<R: Rng + ?Sized>(cfg: &CodecConfig, rng: &mut R) -> Self {
        let levels = cfg.levels();
        let downs = (0..levels)
            .map(|i| Stage {
                pre: NormAct::new(cfg.width(i)),
                conv: Conv2d::new(cfg.width(i), cfg.width(i + 1), 3, 2, 1, rng),
                upsample: false,
            })
            .collect();
        let top = cfg.width(levels);
        Encoder {
            stem: Conv2d::same(cfg.image_channels, cfg.width(0), rng),
            downs,
            res: ResBlock::new(top, rng),
            out_pre: NormAct::new(top),
            out: Conv2d::new(top, cfg.latent_channels, 1, 1, 0, rng),
        }
    }

    fn forward(&self, tape: &mut Tape<f32>, x: Var) -> Result<Var> {
        let mut h = self.stem.forward(tape, x)?;
        for s in &self.downs {
            h = s.forward(tape, h)?;
        }
        h = self.res.forward(tape, h)?;
        h = self.out_pre.forward(tape, h)?;
        self.out.forward(tape, h)
    }
}

impl Decoder {
    fn new<R: Rng + ?Sized>(cfg: &CodecConfig, rng: &mut R) -> Self {
        let levels = cfg.levels();
        let top = cfg.width(levels);
        let ups = (0..levels)
            .rev()
            .map(|i| Stage {
                pre: NormAct::new(cfg.width(i + 1)),
                conv: Conv2d::same(cfg.width(i + 1), cfg.width(i), rng),
                upsample: true,
            })
            .collect();
        Decoder {
            stem: Conv2d::same(cfg.latent_channels, top, rng),
            res: ResBlock::new(top, rng),
            ups,
            out_pre: NormAct::new(cfg.width(0)),
            out: Conv2d::same(cfg.width(0), cfg.image_channels, rng),
        }
    }

    fn forward(&self, tape: &mut Tape<f32>, z: Var) -> Result<Var> {
        let mut h = self.stem.forward(tape, z)?;
        h = self.res.forward(tape, h)?;
        for s in &self.ups {
            h = s.forward(tape, h)?;
        }
        h = self.out_pre.forward(tape, h)?;
        let h = self.out.forward(tape, h)?;
        Ok(tape.sigmoid(h))
    }
}

fn stages_named<'a>(tag: &str, stages: &'a [Stage]) -> Named<'a, f32> {
    let mut v = Vec::new();
    for (i, s) in stages.iter().enumerate() {
        v.extend(prefixed(&format!("{tag}{i}.norm"), s.pre.norm.params()));
        v.extend(prefixed(&format!("{tag}{i}.conv"), s.conv.params()));
    }
    v
}

fn stages_named_mut<'a>(tag: &str, stages: &'a mut [Stage]) -> NamedMut<'a, f32> {
    let mut v = Vec::new();
    for (i, s) in stages.iter_mut().enumerate() {
        v.extend(prefixed_mut(&format!("{tag}{i}.norm"), s.pre.norm.params_mut()));
        v.extend(prefixed_mut(&format!("{tag}{i}.conv"), s.conv.params_mut()));
    }
    v
}

impl Module<f32> for Encoder {
    fn params(&self) -> Named<'_, f32> {
        let mut v = prefixed("stem", self.stem.params());
        v.extend(stages_named("down", &self.downs));
        v.extend(prefixed("res", self.res.named()));
        v.extend(prefixed("out_norm", self.out_pre.norm.params()));
        v.extend(prefixed("out", self.out.params()));
        v
    }

    fn params_mut(&mut self) -> NamedMut<'_, f32> {
        let mut v = prefixed_mut("stem", self.stem.params_mut());
        v.extend(stages_named_mut("down", &mut self.downs));
        v.extend(prefixed_mut("res", self.res.named_mut()));
        v.extend(prefixed_mut("out_norm", self.out_pre.norm.params_mut()));
        v.extend(prefixed_mut("out", self.out.params_mut()));
        v
    }
}

impl Module<f32> for Decoder {
    fn params(&self) -> Named<'_, f32> {
        let mut v = prefixed("stem", self.stem.params());
        v.extend(prefixed("res", self.res.named()));
        v.extend(stages_named("up", &self.ups));
        v.extend(prefixed("out_norm", self.out_pre.norm.params()));
        v.extend(prefixed("out", self.out.params()));
        v
    }

    fn params_mut(&mut self) -> NamedMut<'_, f32> {
        let mut v = prefixed_mut("stem", self.stem.params_mut());
        v.extend(prefixed_mut("res", self.res.named_mut()));
        v.extend(stages_named_mut("up", &mut self.ups));
        v.extend(prefixed_mut("out_norm", self.out_pre.norm.params_mut()));
        v.extend(prefixed_mut("out", self.out.params_mut()));
        v
    }
}

/// Output of the quantiser on the tape.
#[derive(Debug, Clone)]
pub struct Quantized {
    /// Straight-through latent: code values forward, identity gradient to `z`.
    pub z_q: Var,
    pub indices: Vec<usize>,
    /// `mean((sg(z) - z_q)²)`, trains the codebook.
    pub codebook_loss: Var,
    /// `mean((z - sg(z_q))²)`, pulls the encoder towards its codes.
    pub commitment_loss: Var,
}

#[derive(Debug, Clone)]
pub struct Codec {
    pub config: CodecConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// `[K, c]`
    pub codebook: Tensor<f32>,
}

/// Index of the nearest row of `codebook: [K, c]` for each row of `rows: [N, c]`,
/// using `|e|² - 2 z·e` (the `|z|²` term is common to every code).
/// Ties resolve to the lowest index.
pub fn nearest_codes(codebook: &Tensor<f32>, rows: &[f32]) -> Result<Vec<usize>> {
    let [k, c] = codebook.shape()[..] else {
        return dim_err(format!("codebook must be [K, c], got {:?}", codebook.shape()));
    };
    if rows.len() % c != 0 {
        return dim_err(format!("{} values do not split into width-{c} rows", rows.len()));
    }
    let n = rows.len() / c;
    let mut dots = vec![0f32; n * k];
    gemm(rows, false, codebook.data(), true, &mut dots, n, c, k, false);
    let norms: Vec<f32> = codebook.data().chunks(c).map(|e| e.iter().map(|v| v * v).sum()).collect();
    Ok(dots
        .chunks(k)
        .map(|d| {
            let mut best = (f32::INFINITY, 0);
            for (j, (&dj, &nj)) in d.iter().zip(&norms).enumerate() {
                let score = nj - 2.0 * dj;
                if score < best.0 {
                    best = (score, j);
                }
            }
            best.1
        })
        .collect())
}

/// `[B, c, h, w]` → `[B·h·w, c]` rows in (b, y, x) order.
fn to_rows(tape: &mut Tape<f32>, z: Var) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    let p = tape.permute(z, &[0, 2, 3, 1])?;
    tape.reshape(p, &[s[0] * s[2] * s[3], s[1]])
}

fn from_rows(tape: &mut Tape<f32>, rows: Var, shape: &[usize]) -> Result<Var> {
    let r = tape.reshape(rows, &[shape[0], shape[2], shape[3], shape[1]])?;
    tape.permute(r, &[0, 3, 1, 2])
}

impl Codec {
    pub fn new<R: Rng + ?Sized>(config: CodecConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Codec {
            encoder: Encoder::new(&config, rng),
            decoder: Decoder::new(&config, rng),
            codebook: Tensor::uniform(
                vec![config.codebook_size, config.latent_channels],
                1.0 / config.codebook_size as f64,
                rng,
            )
            .with_grad(),
            config,
        })
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        match shape {
            [_, ch, h, w] if *ch == c.image_channels && *h == c.image_size && *w == c.image_size => Ok(()),
            _ => dim_err(format!(
                "expected [B, {}, {}, {}] images, got {shape:?}",
                c.image_channels, c.image_size, c.image_size
            )),
        }
    }

    fn check_latents(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let s = c.latent_size();
        match shape {
            [_, ch, h, w] if *ch == c.latent_channels && *h == s && *w == s => Ok(()),
            _ => dim_err(format!(
                "expected [B, {}, {s}, {s}] latents, got {shape:?}",
                c.latent_channels
            )),
        }
    }

    /// Continuous latent `[B, c, h, w]` for images `[B, c_img, H, W]`.
    pub fn encode(&self, tape: &mut Tape<f32>, x: Var) -> Result<Var> {
        self.check_images(tape.shape(x))?;
        self.encoder.forward(tape, x)
    }

    pub fn quantize(&self, tape: &mut Tape<f32>, z: Var) -> Result<Quantized> {
        let shape = tape.shape(z).to_vec();
        if shape.len() != 4 || shape[1] != self.codebook.shape()[1] {
            return dim_err(format!(
                "latent {shape:?} does not match codebook width {}",
                self.codebook.shape()[1]
            ));
        }
        let rows = to_rows(tape, z)?;
        let indices = nearest_codes(&self.codebook, tape.value(rows))?;
        let table = tape.param(&self.codebook);
        let picked = tape.gather(table, &indices)?;
        let code_vals = from_rows(tape, picked, &shape)?;
        let z_sg = tape.detach(z);
        let codebook_loss = mse(tape, z_sg, code_vals)?;
        let q_sg = tape.detach(code_vals);
        let commitment_loss = mse(tape, z, q_sg)?;
        let z_q = tape.straight_through(z, code_vals)?;
        Ok(Quantized {
            z_q,
            indices,
            codebook_loss,
            commitment_loss,
        })
    }

    /// Image in `[0, 1]` from a latent `[B, c, h, w]`.
    pub fn decode(&self, tape: &mut Tape<f32>, z_q: Var) -> Result<Var> {
        self.check_latents(tape.shape(z_q))?;
        self.decoder.forward(tape, z_q)
    }

    /// Tape-free encode of `[c_img, H, W]` or `[B, c_img, H, W]`.
    pub fn encode_tensor(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (xb, single) = batched(x)?;
        let mut tape = Tape::no_grad();
        let xv = tape.constant(&xb);
        let z = self.encode(&mut tape, xv)?;
        unbatch(tape.tensor(z), single)
    }

    /// Nearest-code latent and code indices, tape-free.
    pub fn quantize_tensor(&self, z: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<usize>)> {
        let (zb, single) = batched(z)?;
        let mut tape = Tape::no_grad();
        let zv = tape.constant(&zb);
        let q = self.quantize(&mut tape, zv)?;
        Ok((unbatch(tape.tensor(q.z_q), single)?, q.indices))
    }

    pub fn decode_tensor(&self, z_q: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (zb, single) = batched(z_q)?;
        let mut tape = Tape::no_grad();
        let zv = tape.constant(&zb);
        let y = self.decode(&mut tape, zv)?;
        unbatch(tape.tensor(y), single)
    }

    /// `decode(quantize(encode(x)))`.
    pub fn reconstruct(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let z = self.encode_tensor(x)?;
        let (q, _) = self.quantize_tensor(&z)?;
        self.decode_tensor(&q)
    }

    /// Reconstruction MSE per element over a whole set, in batches.
    pub fn reconstruction_mse(&self, images: &Tensor<f32>, batch: usize) -> Result<f64> {
        self.check_images(images.shape())?;
        let n = images.shape()[0];
        let mut total = 0.0;
        for start in (0..n).step_by(batch.max(1)) {
            let xb = slice_batch(images, start, batch.min(n - start))?;
            let y = self.reconstruct(&xb)?;
            total += y
                .data()
                .iter()
                .zip(xb.data())
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum::<f64>();
        }
        Ok(total / images.numel() as f64)
    }
}

impl Module<f32> for Codec {
    fn params(&self) -> Named<'_, f32> {
        let mut v = prefixed("enc", self.encoder.params());
        v.extend(prefixed("dec", self.decoder.params()));
        v.push(("codebook".into(), &self.codebook));
        v
    }

    fn params_mut(&mut self) -> NamedMut<'_, f32> {
        let mut v = prefixed_mut("enc", self.encoder.params_mut());
        v.extend(prefixed_mut("dec", self.decoder.params_mut()));
        v.push(("codebook".into(), &mut self.codebook));
        v
    }
}

fn batched(x: &Tensor<f32>) -> Result<(Tensor<f32>, bool)> {
    match x.shape().len() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            Ok((x.clone().reshape(s)?, true))
        }
        4 => Ok((x.clone(), false)),
        _ => dim_err(format!("expected a 3-D or 4-D tensor, got {:?}", x.shape())),
    }
}

fn unbatch(t: Tensor<f32>, single: bool) -> Result<Tensor<f32>> {
    if single {
        let s = t.shape()[1..].to_vec();
        t.reshape(s)
    } else {
        Ok(t)
    }
}

/// Rows `start..start+len` along the leading axis.
pub fn slice_batch<T: crate::tensor::Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let per = x.numel() / x.shape()[0];
    let mut s = x.shape().to_vec();
    if start + len > s[0] || len == 0 {
        return dim_err(format!("batch {start}..{} of {}", start + len, s[0]));
    }
    s[0] = len;
    Tensor::new(s, x.data()[start * per..(start + len) * per].to_vec())
}

/// Gathers the listed items along the leading axis.
pub fn select_batch<T: crate::tensor::Real>(x: &Tensor<T>, items: &[usize]) -> Result<Tensor<T>> {
    let per = x.numel() / x.shape()[0];
    let mut data = Vec::with_capacity(items.len() * per);
    for &i in items {
        if i >= x.shape()[0] {
            return dim_err(format!("item {i} of {}", x.shape()[0]));
        }
        data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let mut s = x.shape().to_vec();
    s[0] = items.len();
    Tensor::new(s, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqEpoch {
    pub epoch: usize,
    /// Reconstruction MSE of the full set, measured after the epoch (epoch 0: before training).
    pub mse: f64,
    /// Mean training objective over the epoch's batches (0 for epoch 0).
    pub loss: f64,
    /// Fraction of codes selected at least once during the epoch.
    pub usage: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct VqTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        VqTrainConfig {
            epochs: 30,
            lr: 2e-3,
            batch: 16,
            seed: 0,
        }
    }
}

/// Trains on `images: [N, c_img, H, W]`, returning one record per epoch
/// (plus the untrained epoch 0).
pub fn train_vqvae(codec: &mut Codec, images: &Tensor<f32>, cfg: &VqTrainConfig) -> Result<Vec<VqEpoch>> {
    if images.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Contract("empty dataset".into()));
    }
    codec.check_images(images.shape())?;
    let n = images.shape()[0];
    let k = codec.config.codebook_size;
    let c = codec.config.latent_channels;
    let mut r = rng::stream(cfg.seed, "vqvae");
    let mut curve = vec![VqEpoch {
        epoch: 0,
        mse: codec.reconstruction_mse(images, cfg.batch)?,
        loss: 0.0,
        usage: 0.0,
    }];
    if cfg.epochs == 0 {
        return Ok(curve);
    }
    seed_codebook(codec, images, cfg.batch, &mut r)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let beta = codec.config.commitment as f32;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        rng::shuffle(&mut order, &mut r);
        let mut counts = vec![0usize; k];
        let mut recent: Vec<f32> = Vec::new();
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let xb = select_batch(images, chunk)?;
            let mut tape = Tape::new();
            let x = tape.constant(&xb);
            let z = codec.encode(&mut tape, x)?;
            let q = codec.quantize(&mut tape, z)?;
            let y = codec.decode(&mut tape, q.z_q)?;
            let rec = mse(&mut tape, y, x)?;
            let commit = tape.scale(q.commitment_loss, beta);
            let l = tape.add(rec, q.codebook_loss)?;
            let loss = tape.add(l, commit)?;
            for &i in &q.indices {
                counts[i] += 1;
            }
            let zr = to_rows(&mut tape, z)?;
            recent = tape.value(zr).to_vec();
            loss_sum += tape.item(loss) as f64;
            batches += 1;
            let grads = tape.backward(loss)?;
            for (_, p) in codec.params_mut() {
                grads.accumulate(p)?;
            }
            adam.step(codec.params_mut().into_iter().map(|(_, p)| p))?;
            codec.zero_grad();
        }
        let used = counts.iter().filter(|&&v| v > 0).count();
        // re-seed codes that went unused for the whole epoch
        let rows = recent.len() / c;
        for (j, _) in counts.iter().enumerate().filter(|(_, &v)| v == 0) {
            let pick = rng::below(&mut r, rows);
            let jitter: Vec<f32> = (0..c).map(|_| 0.01 * rng::normal(&mut r) as f32).collect();
            for (t, d) in codec.codebook.data_mut()[j * c..(j + 1) * c].iter_mut().enumerate() {
                *d = recent[pick * c + t] + jitter[t];
            }
        }
        let rec = VqEpoch {
            epoch,
            mse: codec.reconstruction_mse(images, cfg.batch)?,
            loss: loss_sum / batches as f64,
            usage: used as f64 / k as f64,
        };
        log::info!("vqvae epoch {epoch}: mse {:.5} usage {:.3}", rec.mse, rec.usage);
        curve.push(rec);
    }
    Ok(curve)
}

/// Initialises the codebook from randomly chosen encoder outputs.
fn seed_codebook<R: Rng + ?Sized>(codec: &mut Codec, images: &Tensor<f32>, batch: usize, r: &mut R) -> Result<()> {
    let n = images.shape()[0];
    let c = codec.config.latent_channels;
    let take: Vec<usize> = (0..batch.max(1).min(n)).map(|_| rng::below(r, n)).collect();
    let z = codec.encode_tensor(&select_batch(images, &take)?)?;
    let mut tape = Tape::no_grad();
    let zv = tape.constant(&z);
    let rows = to_rows(&mut tape, zv)?;
    let rows = tape.value(rows).to_vec();
    let count = rows.len() / c;
    let k = codec.config.codebook_size;
    for j in 0..k {
        let pick = rng::below(r, count);
        for t in 0..c {
            codec.codebook.data_mut()[j * c + t] = rows[pick * c + t] + 0.01 * rng::normal(r) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_norm;

    fn small() -> CodecConfig {
        CodecConfig {
            image_size: 8,
            codebook_size: 8,
            latent_channels: 2,
            base_channels: 4,
            ..CodecConfig::visible()
        }
    }

    /// Direct scan over all codes with full squared distances.
    fn brute_nearest(cb: &Tensor<f32>, row: &[f32]) -> usize {
        let c = cb.shape()[1];
        let mut best = (f64::INFINITY, 0);
        for (j, e) in cb.data().chunks(c).enumerate() {
            let d: f64 = e.iter().zip(row).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
            if d < best.0 {
                best = (d, j);
            }
        }
        best.1
    }

    #[test]
    fn config_validation() {
        assert!(CodecConfig::visible().validate().is_ok());
        assert_eq!(CodecConfig::visible().latent_size(), 8);
        let bad = CodecConfig {
            codebook_size: 1,
            ..CodecConfig::visible()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = CodecConfig {
            downsample: 3,
            ..CodecConfig::visible()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn two_code_example() {
        let cb = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(nearest_codes(&cb, &[0.9, 0.8]).unwrap(), vec![1]);
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut r = rng::seeded(3);
        for k in [2usize, 17, 256, 512] {
            let cb = Tensor::<f32>::randn(vec![k, 4], 1.0, &mut r);
            let rows = Tensor::<f32>::randn(vec![64, 4], 1.0, &mut r);
            let got = nearest_codes(&cb, rows.data()).unwrap();
            for (i, row) in rows.data().chunks(4).enumerate() {
                assert_eq!(got[i], brute_nearest(&cb, row));
            }
        }
    }

    #[test]
    fn shapes_range_and_determinism() {
        let mut r = rng::seeded(1);
        let codec = Codec::new(CodecConfig::visible(), &mut r).unwrap();
        let x = Tensor::<f32>::uniform(vec![3, 32, 32], 0.5, &mut r).map(|v| v + 0.5);
        let z = codec.encode_tensor(&x).unwrap();
        assert_eq!(z.shape(), &[8, 8, 8]);
        assert_eq!(codec.encode_tensor(&x).unwrap(), z);
        let y = codec.reconstruct(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(matches!(
            codec.encode_tensor(&Tensor::zeros(vec![3, 16, 16])),
            Err(Error::Dimension(_))
        ));
        assert!(codec.decode_tensor(&Tensor::zeros(vec![4, 8, 8])).is_err());
    }

    #[test]
    fn code_rows_are_fixed_points() {
        let mut r = rng::seeded(2);
        let codec = Codec::new(small(), &mut r).unwrap();
        // build a latent whose every position is some code row
        let (k, c) = (8, 2);
        let idx: Vec<usize> = (0..4).map(|i| (i * 3) % k).collect();
        let mut z = vec![0f32; c * 4];
        for (p, &j) in idx.iter().enumerate() {
            for ch in 0..c {
                z[ch * 4 + p] = codec.codebook.data()[j * c + ch];
            }
        }
        let z = Tensor::new(vec![1, c, 2, 2], z).unwrap();
        let mut tape = Tape::new();
        let zv = tape.constant(&z);
        let q = codec.quantize(&mut tape, zv).unwrap();
        assert_eq!(tape.tensor(q.z_q), z);
        assert_eq!(tape.item(q.codebook_loss), 0.0);
        assert_eq!(tape.item(q.commitment_loss), 0.0);
        // idempotence
        let (zq, _) = codec.quantize_tensor(&z).unwrap();
        assert_eq!(codec.quantize_tensor(&zq).unwrap().0, zq);
    }

    #[test]
    fn straight_through_copies_gradient() {
        let mut r = rng::seeded(4);
        let codec = Codec::new(small(), &mut r).unwrap();
        let z = Tensor::<f32>::randn(vec![1, 2, 2, 2], 1.0, &mut r);
        let w = Tensor::<f32>::randn(vec![1, 2, 2, 2], 1.0, &mut r);
        let mut tape = Tape::new();
        let zv = tape.input(&z);
        let q = codec.quantize(&mut tape, zv).unwrap();
        let wv = tape.constant(&w);
        let p = tape.mul(q.z_q, wv).unwrap();
        let sq = tape.square(p);
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.of(zv).unwrap(), g.of(q.z_q).unwrap());
        assert!(g.of(zv).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_epochs_leave_codec_unchanged() {
        let mut r = rng::seeded(5);
        let mut codec = Codec::new(small(), &mut r).unwrap();
        let before: Vec<Vec<f32>> = codec.params().iter().map(|(_, t)| t.data().to_vec()).collect();
        let images = Tensor::<f32>::uniform(vec![4, 3, 8, 8], 0.5, &mut r).map(|v| v + 0.5);
        let cfg = VqTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let curve = train_vqvae(&mut codec, &images, &cfg).unwrap();
        assert_eq!(curve.len(), 1);
        let after: Vec<Vec<f32>> = codec.params().iter().map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(before, after);
        assert_eq!(grad_norm(&codec), 0.0);
    }

    #[test]
    fn short_training_reduces_error() {
        let mut r = rng::seeded(6);
        let mut codec = Codec::new(small(), &mut r).unwrap();
        // horizontal and vertical ramps
        let mut data = Vec::new();
        for i in 0..8 {
            for _ in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        let t = if i % 2 == 0 { x } else { y };
                        data.push(0.1 + 0.1 * t as f32);
                    }
                }
            }
        }
        let images = Tensor::new(vec![8, 3, 8, 8], data).unwrap();
        let cfg = VqTrainConfig {
            epochs: 40,
            lr: 1e-2,
            batch: 2,
            seed: 1,
        };
        let curve = train_vqvae(&mut codec, &images, &cfg).unwrap();
        assert_eq!(curve.len(), 41);
        assert!(curve[40].mse < 0.25 * curve[0].mse, "{curve:?}");
        let empty = train_vqvae(&mut codec, &Tensor::zeros(vec![1, 3, 4, 4]), &cfg);
        assert!(empty.is_err());
    }
}
