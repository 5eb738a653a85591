use std::io::{Read, Write};

use super::{abbreviated_sample_from, diffusion_loss, q_sample, sample, AttentionKind, ConditionBundle, Denoiser, NoiseSchedule, SigmaPolicy};
use crate::codec::{select_batch, slice_batch, Codec};
use crate::conditioning::{classify, csv_err, one_hot_tokens, AttributeLabels, ClassifierNet, PromptTable};
use crate::error::{dim_err, Error, Result};
use crate::metrics::{id_loss, IdentityEmbedder};
use crate::nn::Module;
use crate::rng;
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};

/// What the cross-attention tokens carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// A single all-zero token: cross-attention is present but inert.
    Null,
    /// Fixed one-hot tokens of the classified attributes.
    OneHot,
    /// Learned prompt-table tokens of the classified attributes.
    Prompt,
}

/// Ablation ladder from the plain latent model to the full pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    A,
    B,
    C,
    D,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Baseline, Variant::A, Variant::B, Variant::C, Variant::D];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            "D" => Ok(Variant::D),
            _ => Err(Error::Config(format!("unknown variant {s:?} (baseline|A|B|C|D)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
        }
    }

    pub fn attention(self) -> AttentionKind {
        match self {
            Variant::Baseline => AttentionKind::Mhsa,
            _ => AttentionKind::BiMamba,
        }
    }

    pub fn conditioning(self) -> Conditioning {
        match self {
            Variant::Baseline | Variant::A => Conditioning::Null,
            Variant::B => Conditioning::OneHot,
            Variant::C | Variant::D => Conditioning::Prompt,
        }
    }

    pub fn uses_classifier(self) -> bool {
        self.conditioning() != Conditioning::Null
    }

    pub fn uses_id_loss(self) -> bool {
        self == Variant::D
    }
}

/// Context tokens `[B, L, d_ctx]` for a batch of labels.
pub fn context_tokens(
    tape: &mut Tape<f32>,
    mode: Conditioning,
    prompt: Option<&PromptTable>,
    labels: &[AttributeLabels],
    d_ctx: usize,
) -> Result<Var> {
    match mode {
        Conditioning::Null => Ok(tape.raw(vec![labels.len(), 1, d_ctx], vec![0.0; labels.len() * d_ctx])),
        Conditioning::OneHot => Ok(tape.constant(&one_hot_tokens(labels, d_ctx)?)),
        Conditioning::Prompt => {
            let table = prompt.ok_or_else(|| Error::Config("prompt conditioning needs a prompt table".into()))?;
            if table.d_ctx() != d_ctx {
                return dim_err(format!("prompt width {} vs denoiser d_ctx {d_ctx}", table.d_ctx()));
            }
            table.encode(tape, labels)
        }
    }
}

/// Divisors that bring encoder outputs to roughly unit variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentScales {
    pub visible: f32,
    pub thermal: f32,
}

/// Standard deviation of all pre-quantisation latents of `images`.
pub fn latent_std(codec: &Codec, images: &Tensor<f32>) -> Result<f32> {
    let z = encode_batched(codec, images)?;
    let n = z.numel().max(1) as f64;
    let mean = z.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = z.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt().max(1e-6) as f32)
}

fn encode_batched(codec: &Codec, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = images.shape()[0];
    let mut parts = Vec::new();
    for start in (0..n).step_by(64) {
        parts.push(codec.encode_tensor(&slice_batch(images, start, 64.min(n - start))?)?);
    }
    concat0(&parts)
}

fn concat0(parts: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let Some(first) = parts.first() else {
        return dim_err("nothing to concatenate");
    };
    let mut shape = first.shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    Tensor::new(shape, parts.iter().flat_map(|p| p.data().iter().copied()).collect())
}

/// Scaled latents of one image set.
pub fn encode_scaled(codec: &Codec, images: &Tensor<f32>, scale: f32) -> Result<Tensor<f32>> {
    Ok(encode_batched(codec, images)?.map(|v| v / scale))
}

/// Training tuples for the denoiser.
#[derive(Debug, Clone)]
pub struct LatentDataset {
    /// Scaled visible latents `[N, c, h, w]`.
    pub z0: Tensor<f32>,
    /// Scaled thermal latents `[N, c_th, h, w]`.
    pub thermal: Tensor<f32>,
    /// Attributes used for the context tokens.
    pub labels: Vec<AttributeLabels>,
    /// Visible images `[N, 3, H, W]`, the identity reference.
    pub reference: Tensor<f32>,
}

impl LatentDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        for (name, s) in [
            ("z0", self.z0.shape()),
            ("thermal", self.thermal.shape()),
            ("reference", self.reference.shape()),
        ] {
            if s.first() != Some(&n) {
                return dim_err(format!("{name} {s:?} for {n} labels"));
            }
        }
        if n == 0 {
            return Err(Error::Contract("empty latent dataset".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DiffusionTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Weight of the identity loss; 0 trains on the noise objective alone.
    pub id_weight: f64,
    pub id_every: usize,
    pub id_steps: usize,
    /// Batch items that go through the identity branch.
    pub id_batch: usize,
    /// The identity branch starts from the training latent noised to
    /// `ceil(id_start · T)`; 1 starts from (almost) pure noise.
    pub id_start: f64,
    /// Keep the prompt table at its initial values.
    pub freeze_prompt: bool,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            epochs: 60,
            lr: 1e-3,
            batch: 16,
            seed: 0,
            id_weight: 0.1,
            id_every: 10,
            id_steps: 5,
            id_batch: 4,
            id_start: 0.5,
            freeze_prompt: false,
        }
    }
}

/// Frozen pieces needed to score identity during training.
#[derive(Debug, Clone, Copy)]
pub struct IdGuide<'a> {
    pub embedder: &'a IdentityEmbedder,
    pub decoder: &'a Codec,
    pub latent_scale: f32,
}

pub const LOSS_CSV_HEADER: [&str; 3] = ["step", "loss_eq1", "loss_id"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss_eq1: f64,
    /// Present on steps where the identity branch ran.
    pub loss_id: Option<f64>,
}

/// Mean noise-prediction loss over the whole set with noise drawn from
/// `seed`, without updates.
pub fn evaluate_eq1(
    model: &Denoiser,
    prompt: Option<&PromptTable>,
    s: &NoiseSchedule,
    data: &LatentDataset,
    mode: Conditioning,
    seed: u64,
) -> Result<f64> {
    data.check()?;
    let mut r = rng::stream(seed, "eq1-eval");
    let n = data.len();
    let mut total = 0.0;
    for start in (0..n).step_by(64) {
        let len = 64.min(n - start);
        let mut tape = Tape::no_grad();
        let z0 = tape.constant(&slice_batch(&data.z0, start, len)?);
        let th = tape.constant(&slice_batch(&data.thermal, start, len)?);
        let tk = context_tokens(&mut tape, mode, prompt, &data.labels[start..start + len], model.config.d_ctx)?;
        let l = diffusion_loss(&mut tape, model, s, z0, th, tk, &mut r)?;
        total += tape.item(l) as f64 * len as f64;
    }
    Ok(total / n as f64)
}

/// Optimises the denoiser (and the prompt table, when conditioning on it)
/// for the noise objective plus `id_weight` × the identity loss on a short
/// decoded sample every `id_every` steps. Returns one record per step.
pub fn train_diffusion(
    model: &mut Denoiser,
    mut prompt: Option<&mut PromptTable>,
    s: &NoiseSchedule,
    data: &LatentDataset,
    mode: Conditioning,
    guide: Option<IdGuide<'_>>,
    cfg: &DiffusionTrainConfig,
) -> Result<Vec<LossRecord>> {
    if !(cfg.id_weight >= 0.0) {
        return Err(Error::Config(format!("id weight {} must be non-negative", cfg.id_weight)));
    }
    if !(cfg.id_start > 0.0 && cfg.id_start <= 1.0) {
        return Err(Error::Config(format!("id start {} outside (0, 1]", cfg.id_start)));
    }
    let t_id = ((cfg.id_start * s.steps() as f64).ceil() as usize).clamp(1, s.steps());
    data.check()?;
    if mode == Conditioning::Prompt && prompt.is_none() {
        return Err(Error::Config("prompt conditioning needs a prompt table".into()));
    }
    let guide = match guide {
        Some(g) if cfg.id_weight > 0.0 => {
            let mut e = g.embedder.clone();
            e.set_trainable(false);
            let mut d = g.decoder.clone();
            d.set_trainable(false);
            Some((e, d, g.latent_scale))
        }
        _ => None,
    };
    let mut r = rng::stream(cfg.seed, "diffusion");
    let mut rid = rng::stream(cfg.seed, "diffusion-id");
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::new();
    let mut step = 0;
    let d_ctx = model.config.d_ctx;
    for epoch in 0..cfg.epochs {
        adam.config.lr = crate::conditioning::cosine_lr(cfg.lr, epoch, cfg.epochs);
        rng::shuffle(&mut order, &mut r);
        for chunk in order.chunks(cfg.batch.max(1)) {
            step += 1;
            let labels: Vec<AttributeLabels> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new();
            let z0 = tape.constant(&select_batch(&data.z0, chunk)?);
            let th = tape.constant(&select_batch(&data.thermal, chunk)?);
            let tk = context_tokens(&mut tape, mode, prompt.as_deref(), &labels, d_ctx)?;
            let eq1 = diffusion_loss(&mut tape, model, s, z0, th, tk, &mut r)?;
            let mut loss = eq1;
            let mut loss_id = None;
            if let Some((emb, dec, scale)) = &guide {
                if step % cfg.id_every.max(1) == 0 {
                    let k = cfg.id_batch.clamp(1, chunk.len());
                    let th_k = tape.slice(th, 0, 0, k)?;
                    let tk_k = tape.slice(tk, 0, 0, k)?;
                    let z0_k = select_batch(&data.z0, &chunk[..k])?;
                    let noise = Tensor::randn(z0_k.shape().to_vec(), 1.0, &mut rid);
                    let z_start = tape.constant(&q_sample(s, &z0_k, t_id, &noise)?);
                    let z = abbreviated_sample_from(&mut tape, model, s, z_start, t_id, th_k, tk_k, cfg.id_steps)?;
                    let z = tape.scale(z, *scale);
                    let img = dec.decode(&mut tape, z)?;
                    let reference = tape.constant(&select_batch(&data.reference, &chunk[..k])?);
                    let lid = id_loss(&mut tape, emb, img, reference)?;
                    loss_id = Some(tape.item(lid) as f64);
                    let w = tape.scale(lid, cfg.id_weight as f32);
                    loss = tape.add(loss, w)?;
                }
            }
            records.push(LossRecord {
                step,
                loss_eq1: tape.item(eq1) as f64,
                loss_id,
            });
            let grads = tape.backward(loss)?;
            for (_, p) in model.params_mut() {
                grads.accumulate(p)?;
            }
            let table = prompt.as_deref_mut().filter(|_| !cfg.freeze_prompt);
            let mut params: Vec<&mut Tensor<f32>> = model.params_mut().into_iter().map(|(_, p)| p).collect();
            if let Some(t) = table {
                params.extend(t.params_mut().into_iter().map(|(_, p)| p));
            }
            for p in params.iter_mut() {
                grads.accumulate(p)?;
            }
            adam.step(params)?;
            model.zero_grad();
            if let Some(t) = prompt.as_deref_mut() {
                t.zero_grad();
            }
        }
        let tail = &records[records.len().saturating_sub(n.div_ceil(cfg.batch.max(1)))..];
        log::info!(
            "diffusion epoch {}: eq1 {:.4}",
            epoch + 1,
            tail.iter().map(|r| r.loss_eq1).sum::<f64>() / tail.len().max(1) as f64
        );
    }
    Ok(records)
}

pub fn write_loss_csv<W: Write>(w: W, records: &[LossRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(LOSS_CSV_HEADER).map_err(csv_err)?;
    for r in records {
        out.write_record([
            r.step.to_string(),
            r.loss_eq1.to_string(),
            r.loss_id.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_loss_csv<R: Read>(r: R) -> Result<Vec<LossRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != LOSS_CSV_HEADER {
        return Err(Error::Format(format!("loss header {header:?}, expected {LOSS_CSV_HEADER:?}")));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = || Error::Format(format!("loss row {}: bad field", i + 2));
        let loss_id = match rec.get(2) {
            Some("") | None => None,
            Some(v) => Some(v.parse().map_err(|_| bad())?),
        };
        out.push(LossRecord {
            step: rec[0].parse().map_err(|_| bad())?,
            loss_eq1: rec[1].parse().map_err(|_| bad())?,
            loss_id,
        });
    }
    Ok(out)
}

/// Everything needed to turn thermal images into visible ones.
#[derive(Debug, Clone, Copy)]
pub struct Translator<'a> {
    pub visible: &'a Codec,
    pub thermal: &'a Codec,
    pub student: Option<&'a ClassifierNet>,
    pub prompt: Option<&'a PromptTable>,
    pub conditioning: Conditioning,
    pub denoiser: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub scales: LatentScales,
    pub policy: SigmaPolicy,
}

impl Translator<'_> {
    /// Labels the student assigns to thermal images, when the pipeline
    /// conditions on attributes.
    pub fn attributes(&self, thermal: &Tensor<f32>) -> Result<Option<Vec<AttributeLabels>>> {
        if self.conditioning == Conditioning::Null {
            return Ok(None);
        }
        let student = self
            .student
            .ok_or_else(|| Error::Config("attribute conditioning needs the student classifier checkpoint".into()))?;
        Ok(Some(classify(student, thermal)?.into_iter().map(|c| c.labels).collect()))
    }

    /// `[N, 1, H, W]` thermal images to `[N, 3, H, W]` visible images in
    /// `[0, 1]`. Item `i` draws its noise from `(seed, i)` alone.
    pub fn translate(&self, thermal: &Tensor<f32>, seed: u64) -> Result<Tensor<f32>> {
        if self.conditioning == Conditioning::Prompt && self.prompt.is_none() {
            return Err(Error::Config("prompt conditioning needs the prompt table checkpoint".into()));
        }
        let n = thermal.shape().first().copied().unwrap_or(0);
        let labels = self.attributes(thermal)?;
        let zth = encode_scaled(self.thermal, thermal, self.scales.thermal)?;
        let mut parts = Vec::new();
        for start in (0..n).step_by(50) {
            let len = 50.min(n - start);
            let items: Vec<usize> = (start..start + len).collect();
            let lb: Vec<AttributeLabels> = match &labels {
                Some(l) => l[start..start + len].to_vec(),
                None => vec![AttributeLabels::new(0, 0, 0)?; len],
            };
            let mut tape = Tape::no_grad();
            let tk = context_tokens(&mut tape, self.conditioning, self.prompt, &lb, self.denoiser.config.d_ctx)?;
            let cond = ConditionBundle {
                thermal_latent: select_batch(&zth, &items)?,
                tokens: tape.tensor(tk),
            };
            let mut rngs: Vec<rng::Prng> = items.iter().map(|&i| rng::keyed(seed, i as u64, 0x7472, 0)).collect();
            let z = sample(self.denoiser, self.schedule, &cond, &mut rngs, self.policy)?;
            let z = z.map(|v| v * self.scales.visible);
            let (zq, _) = self.visible.quantize_tensor(&z)?;
            parts.push(self.visible.decode_tensor(&zq)?);
        }
        if parts.is_empty() {
            let c = &self.visible.config;
            return Ok(Tensor::zeros(vec![0, c.image_channels, c.image_size, c.image_size]));
        }
        concat0(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::diffusion::{make_schedule, DenoiserConfig};

    fn tiny_codec(channels: usize) -> Codec {
        let cfg = CodecConfig {
            image_size: 8,
            image_channels: channels,
            downsample: 2,
            latent_channels: 2,
            codebook_size: 8,
            base_channels: 4,
            ..CodecConfig::visible()
        };
        Codec::new(cfg, &mut rng::seeded(channels as u64)).unwrap()
    }

    fn tiny_denoiser(attn: AttentionKind) -> Denoiser {
        let cfg = DenoiserConfig {
            latent_channels: 2,
            latent_size: 4,
            thermal_channels: 2,
            base_channels: 8,
            channel_mults: vec![1, 2],
            attention: attn,
            d_ctx: 19,
            time_dim: 8,
            heads: 2,
            d_state: 4,
            ..Default::default()
        };
        Denoiser::new(cfg, &mut rng::seeded(7)).unwrap()
    }

    fn tiny_data(n: usize) -> LatentDataset {
        let mut r = rng::seeded(8);
        let thermal = Tensor::randn(vec![n, 2, 4, 4], 1.0, &mut r);
        LatentDataset {
            // the target is a copy of the condition, so it is learnable
            z0: thermal.clone(),
            thermal,
            labels: (0..n).map(|i| AttributeLabels::new(i % 2, i % 9, i % 19).unwrap()).collect(),
            reference: Tensor::uniform(vec![n, 3, 8, 8], 1.0, &mut r).map(|v: f32| v.abs()),
        }
    }

    #[test]
    fn variant_ladder() {
        assert_eq!(Variant::Baseline.attention(), AttentionKind::Mhsa);
        assert_eq!(Variant::Baseline.conditioning(), Conditioning::Null);
        assert_eq!(Variant::A.attention(), AttentionKind::BiMamba);
        assert_eq!(Variant::B.conditioning(), Conditioning::OneHot);
        assert_eq!(Variant::C.conditioning(), Conditioning::Prompt);
        assert!(Variant::D.uses_id_loss() && !Variant::C.uses_id_loss());
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.as_str()).unwrap(), v);
        }
        assert!(Variant::parse("E").is_err());
    }

    #[test]
    fn training_reduces_noise_loss() {
        let mut m = tiny_denoiser(AttentionKind::BiMamba);
        let mut table = PromptTable::new(19, &mut rng::seeded(1));
        let s = make_schedule(20, 1e-3, 0.2).unwrap();
        let data = tiny_data(32);
        let before = evaluate_eq1(&m, Some(&table), &s, &data, Conditioning::Prompt, 3).unwrap();
        assert!((before - 1.0).abs() < 0.15, "{before}");
        let cfg = DiffusionTrainConfig {
            epochs: 40,
            lr: 3e-3,
            batch: 8,
            id_weight: 0.0,
            ..Default::default()
        };
        let before_table = table.tone.clone();
        let rec = train_diffusion(&mut m, Some(&mut table), &s, &data, Conditioning::Prompt, None, &cfg).unwrap();
        assert_eq!(rec.len(), 160);
        assert!(rec.iter().all(|r| r.loss_id.is_none()));
        let after = evaluate_eq1(&m, Some(&table), &s, &data, Conditioning::Prompt, 3).unwrap();
        assert!(after < 0.5 * before, "{before} -> {after}");
        assert_ne!(table.tone, before_table);
    }

    #[test]
    fn frozen_prompt_table_stays_put() {
        let mut m = tiny_denoiser(AttentionKind::BiMamba);
        let mut table = PromptTable::new(19, &mut rng::seeded(1));
        let before = table.clone();
        let s = make_schedule(10, 1e-3, 0.2).unwrap();
        let cfg = DiffusionTrainConfig {
            epochs: 2,
            batch: 4,
            id_weight: 0.0,
            freeze_prompt: true,
            ..Default::default()
        };
        train_diffusion(&mut m, Some(&mut table), &s, &tiny_data(8), Conditioning::Prompt, None, &cfg).unwrap();
        assert_eq!(table.tone.data(), before.tone.data());
        assert_eq!(table.gender.data(), before.gender.data());
    }

    #[test]
    fn zero_id_weight_is_plain_objective() {
        let s = make_schedule(10, 1e-3, 0.2).unwrap();
        let data = tiny_data(8);
        let codec = tiny_codec(3);
        let emb = IdentityEmbedder::new(3, 8, &mut rng::seeded(2)).unwrap();
        let cfg = DiffusionTrainConfig {
            epochs: 2,
            batch: 4,
            id_weight: 0.0,
            id_every: 1,
            ..Default::default()
        };
        let guide = IdGuide {
            embedder: &emb,
            decoder: &codec,
            latent_scale: 1.0,
        };
        let mut a = tiny_denoiser(AttentionKind::Mhsa);
        let mut b = a.clone();
        let ra = train_diffusion(&mut a, None, &s, &data, Conditioning::Null, Some(guide), &cfg).unwrap();
        let rb = train_diffusion(&mut b, None, &s, &data, Conditioning::Null, None, &cfg).unwrap();
        assert_eq!(ra, rb);
        for ((_, x), (_, y)) in a.params().iter().zip(b.params()) {
            assert_eq!(x.data(), y.data());
        }
        let with_id = DiffusionTrainConfig { id_weight: 0.5, ..cfg };
        let mut c = tiny_denoiser(AttentionKind::Mhsa);
        let rc = train_diffusion(&mut c, None, &s, &data, Conditioning::Null, Some(guide), &with_id).unwrap();
        assert!(rc.iter().all(|r| r.loss_id.is_some_and(|v| (0.0..=2.0).contains(&v))));
        let bad = DiffusionTrainConfig { id_weight: -1.0, ..cfg };
        assert!(matches!(
            train_diffusion(&mut c, None, &s, &data, Conditioning::Null, None, &bad),
            Err(Error::Config(_))
        ));
        assert!(train_diffusion(&mut c, None, &s, &data, Conditioning::Prompt, None, &cfg).is_err());
    }

    #[test]
    fn loss_csv_round_trip() {
        let rec = vec![
            LossRecord { step: 1, loss_eq1: 0.75, loss_id: None },
            LossRecord { step: 2, loss_eq1: 0.5, loss_id: Some(0.25) },
        ];
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &rec).unwrap();
        assert!(buf.starts_with(b"step,loss_eq1,loss_id\n1,0.75,\n"));
        assert_eq!(read_loss_csv(buf.as_slice()).unwrap(), rec);
        assert!(read_loss_csv(&b"step,loss\n1,2\n"[..]).is_err());
    }

    #[test]
    fn translation_shapes_determinism_and_missing_parts() {
        let vis = tiny_codec(3);
        let th = tiny_codec(1);
        let m = tiny_denoiser(AttentionKind::BiMamba);
        let s = make_schedule(4, 1e-2, 0.2).unwrap();
        let mut tr = Translator {
            visible: &vis,
            thermal: &th,
            student: None,
            prompt: None,
            conditioning: Conditioning::Null,
            denoiser: &m,
            schedule: &s,
            scales: LatentScales {
                visible: 1.0,
                thermal: 1.0,
            },
            policy: SigmaPolicy::Beta,
        };
        let x = Tensor::uniform(vec![3, 1, 8, 8], 1.0, &mut rng::seeded(4)).map(|v: f32| v.abs());
        let y = tr.translate(&x, 5).unwrap();
        assert_eq!(y.shape(), &[3, 3, 8, 8]);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(y, tr.translate(&x, 5).unwrap());
        tr.conditioning = Conditioning::OneHot;
        assert!(matches!(tr.translate(&x, 5), Err(Error::Config(_))));
    }
}
