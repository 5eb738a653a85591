//! Stage graph: codecs, classifiers, identity embedder, denoiser variants,
//! translation and evaluation, with every trained stage persisted as a
//! checkpoint in one artifact directory.

use std::path::PathBuf;

use log::info;

use crate::codec::{train_vqvae, Codec, CodecConfig, VqEpoch, VqTrainConfig};
use crate::conditioning::{
    classify, distill_student, per_head_agreement, train_teacher, AttributeLabels, ClassifierNet,
    ClassifierTrainConfig, DistillEpoch, PromptTable,
};
use crate::diffusion::{
    latent_std, make_schedule, train_diffusion, Conditioning, Denoiser, DenoiserConfig, DiffusionTrainConfig, IdGuide,
    LatentDataset, LatentScales, LossRecord, NoiseSchedule, SigmaPolicy, Translator, Variant,
};
use crate::diffusion::encode_scaled;
use crate::error::{Error, Result};
use crate::io::checkpoint::{entry, load_checkpoint, load_module, module_entries, save_checkpoint, AnyTensor, Entries};
use crate::io::config::Config;
use crate::metrics::{evaluate, train_identity_embedder, EmbedderTrainConfig, EvalReport, IdentityEmbedder};
use crate::nn::Module;
use crate::rng;
use crate::synth::{generate_dataset, stack_images, PairedSample, SyntheticSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Visible,
    Thermal,
}

impl Modality {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "visible" => Ok(Modality::Visible),
            "thermal" => Ok(Modality::Thermal),
            _ => Err(Error::Config(format!("modality must be visible or thermal, got {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Visible => "visible",
            Modality::Thermal => "thermal",
        }
    }
}

/// A persisted stage and the command that produces it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Codec(Modality),
    Teacher,
    Student,
    Embedder,
    Diffusion(Variant),
}

impl Stage {
    pub fn file_name(self) -> String {
        match self {
            Stage::Codec(m) => format!("codec_{}.t2vl", m.as_str()),
            Stage::Teacher => "classifier_teacher.t2vl".into(),
            Stage::Student => "classifier_student.t2vl".into(),
            Stage::Embedder => "embedder.t2vl".into(),
            Stage::Diffusion(v) => format!("diffusion_{}.t2vl", v.as_str()),
        }
    }

    /// The command line that creates this checkpoint.
    pub fn command(self) -> String {
        match self {
            Stage::Codec(m) => format!("train-vqvae --modality {}", m.as_str()),
            Stage::Teacher => "train-classifier --stage teacher".into(),
            Stage::Student => "train-classifier --stage student".into(),
            Stage::Embedder => "train-diffusion --variant D".into(),
            Stage::Diffusion(v) => format!("train-diffusion --variant {}", v.as_str()),
        }
    }

    pub fn describe(self) -> String {
        match self {
            Stage::Codec(m) => format!("{}-codec", m.as_str()),
            Stage::Teacher => "teacher classifier".into(),
            Stage::Student => "student classifier".into(),
            Stage::Embedder => "identity embedder".into(),
            Stage::Diffusion(v) => format!("variant {} denoiser", v.as_str()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Artifacts { dir: dir.into() }
    }

    pub fn path(&self, stage: Stage) -> PathBuf {
        self.dir.join(stage.file_name())
    }

    pub fn has(&self, stage: Stage) -> bool {
        self.path(stage).is_file()
    }

    pub fn load(&self, stage: Stage) -> Result<Entries> {
        let path = self.path(stage);
        if !path.is_file() {
            return Err(Error::MissingCheckpoint {
                stage: format!("{} ({})", stage.command(), stage.describe()),
                path,
            });
        }
        load_checkpoint(&path)
    }

    pub fn save(&self, stage: Stage, entries: &Entries) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.dir).map_err(|source| Error::File {
            path: self.dir.clone(),
            source,
        })?;
        let path = self.path(stage);
        save_checkpoint(&path, entries)?;
        Ok(path)
    }
}

/// Every tunable of the pipeline. Defaults are the desk-scale settings.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: SyntheticSpec,
    /// Labelled set for the classifiers, regenerated from the seed.
    pub classifier_data: SyntheticSpec,
    pub visible_codec: CodecConfig,
    pub thermal_codec: CodecConfig,
    pub vq: VqTrainConfig,
    pub teacher: ClassifierTrainConfig,
    pub student: ClassifierTrainConfig,
    pub embedder: EmbedderTrainConfig,
    pub denoiser: DenoiserConfig,
    pub diffusion: DiffusionTrainConfig,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma: SigmaPolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let data = SyntheticSpec::default();
        PipelineConfig {
            seed: 0,
            data,
            classifier_data: SyntheticSpec {
                identity_count: 500,
                images_per_identity: 2,
                ..data
            },
            visible_codec: CodecConfig::visible(),
            thermal_codec: CodecConfig::thermal(),
            vq: VqTrainConfig::default(),
            teacher: ClassifierTrainConfig {
                epochs: 24,
                ..Default::default()
            },
            student: ClassifierTrainConfig {
                epochs: 30,
                ..Default::default()
            },
            embedder: EmbedderTrainConfig::default(),
            denoiser: DenoiserConfig::default(),
            diffusion: DiffusionTrainConfig::default(),
            timesteps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
            sigma: SigmaPolicy::Beta,
        }
    }
}

impl PipelineConfig {
    /// Reads every pipeline key (absent keys keep their defaults) and
    /// propagates `seed` into each stage.
    pub fn from_config(c: &Config) -> Result<Self> {
        let d = PipelineConfig::default();
        let seed = c.u64("seed", d.seed)?;
        let data = SyntheticSpec {
            identity_count: c.usize("data.identities", d.data.identity_count)?,
            images_per_identity: c.usize("data.images_per_identity", d.data.images_per_identity)?,
            image_size: c.usize("data.image_size", d.data.image_size)?,
            seed,
        };
        let classifier_data = SyntheticSpec {
            identity_count: c.usize("classifier.identities", d.classifier_data.identity_count)?,
            images_per_identity: c.usize("classifier.images_per_identity", d.classifier_data.images_per_identity)?,
            ..data
        };
        let codec = |base: CodecConfig| -> Result<CodecConfig> {
            let cfg = CodecConfig {
                image_size: data.image_size,
                downsample: c.usize("codec.downsample", base.downsample)?,
                latent_channels: c.usize("codec.latent_channels", base.latent_channels)?,
                codebook_size: c.usize("codec.codebook_size", base.codebook_size)?,
                commitment: c.float("codec.commitment", base.commitment)?,
                base_channels: c.usize("codec.base_channels", base.base_channels)?,
                ..base
            };
            cfg.validate()?;
            Ok(cfg)
        };
        let visible_codec = codec(d.visible_codec)?;
        let thermal_codec = codec(d.thermal_codec)?;
        let vq = VqTrainConfig {
            epochs: c.usize("vq.epochs", d.vq.epochs)?,
            lr: c.float("vq.lr", d.vq.lr)?,
            batch: c.usize("vq.batch", d.vq.batch)?,
            seed,
        };
        let teacher = ClassifierTrainConfig {
            epochs: c.usize("teacher.epochs", d.teacher.epochs)?,
            lr: c.float("teacher.lr", d.teacher.lr)?,
            batch: c.usize("classifier.batch", d.teacher.batch)?,
            augment: c.bool("teacher.augment", d.teacher.augment)?,
            seed,
            ..d.teacher
        };
        let student = ClassifierTrainConfig {
            epochs: c.usize("student.epochs", d.student.epochs)?,
            lr: c.float("student.lr", d.student.lr)?,
            batch: teacher.batch,
            ce_weight: c.float("student.ce_weight", d.student.ce_weight)?,
            seed,
            ..d.student
        };
        let embedder = EmbedderTrainConfig {
            epochs: c.usize("embedder.epochs", d.embedder.epochs)?,
            lr: c.float("embedder.lr", d.embedder.lr)?,
            seed,
            ..d.embedder
        };
        let injection = match c.string("diffusion.injection", "concat")?.as_str() {
            "concat" => crate::diffusion::ThermalInjection::Concat,
            "cross-attention" => crate::diffusion::ThermalInjection::CrossAttention,
            other => return Err(Error::Config(format!("diffusion.injection: unknown {other:?}"))),
        };
        let denoiser = DenoiserConfig {
            base_channels: c.usize("diffusion.base_channels", d.denoiser.base_channels)?,
            d_ctx: c.usize("diffusion.d_ctx", d.denoiser.d_ctx)?,
            heads: c.usize("diffusion.heads", d.denoiser.heads)?,
            d_state: c.usize("diffusion.d_state", d.denoiser.d_state)?,
            selective: c.bool("diffusion.selective", d.denoiser.selective)?,
            conv_kernel: match c.usize("diffusion.conv_kernel", 0)? {
                0 => None,
                k => Some(k),
            },
            injection,
            ..d.denoiser
        };
        let diffusion = DiffusionTrainConfig {
            epochs: c.usize("diffusion.epochs", d.diffusion.epochs)?,
            lr: c.float("diffusion.lr", d.diffusion.lr)?,
            batch: c.usize("diffusion.batch", d.diffusion.batch)?,
            id_weight: c.float("diffusion.id_weight", d.diffusion.id_weight)?,
            id_every: c.usize("diffusion.id_every", d.diffusion.id_every)?,
            id_steps: c.usize("diffusion.id_steps", d.diffusion.id_steps)?,
            id_batch: c.usize("diffusion.id_batch", d.diffusion.id_batch)?,
            id_start: c.float("diffusion.id_start", d.diffusion.id_start)?,
            freeze_prompt: c.bool("diffusion.freeze_prompt", d.diffusion.freeze_prompt)?,
            seed,
        };
        let sigma = match c.string("diffusion.sigma", "beta")?.as_str() {
            "beta" => SigmaPolicy::Beta,
            "posterior" => SigmaPolicy::Posterior,
            other => return Err(Error::Config(format!("diffusion.sigma: unknown {other:?}"))),
        };
        Ok(PipelineConfig {
            seed,
            data,
            classifier_data,
            visible_codec,
            thermal_codec,
            vq,
            teacher,
            student,
            embedder,
            denoiser,
            diffusion,
            timesteps: c.usize("diffusion.timesteps", d.timesteps)?,
            beta_start: c.float("diffusion.beta_start", d.beta_start)?,
            beta_end: c.float("diffusion.beta_end", d.beta_end)?,
            sigma,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn codec_config(&self, m: Modality) -> CodecConfig {
        match m {
            Modality::Visible => self.visible_codec,
            Modality::Thermal => self.thermal_codec,
        }
    }

    pub fn denoiser_config(&self, v: Variant) -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: self.visible_codec.latent_channels,
            latent_size: self.visible_codec.latent_size(),
            thermal_channels: self.thermal_codec.latent_channels,
            attention: v.attention(),
            ..self.denoiser.clone()
        }
    }
}

pub fn images(samples: &[PairedSample], m: Modality) -> Result<Tensor<f32>> {
    let refs: Vec<&PairedSample> = samples.iter().collect();
    stack_images(&refs, m == Modality::Thermal)
}

pub fn labels_of(samples: &[PairedSample]) -> Result<Vec<AttributeLabels>> {
    samples
        .iter()
        .map(|s| s.labels.ok_or_else(|| Error::Contract(format!("{} has no attribute labels", s.stem))))
        .collect()
}

pub fn identities_of(samples: &[PairedSample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| s.identity.ok_or_else(|| Error::Contract(format!("{} has no identity", s.stem))))
        .collect()
}

// ---- codecs

pub fn train_codec(cfg: &PipelineConfig, m: Modality, train: &[PairedSample]) -> Result<(Codec, Vec<VqEpoch>)> {
    let mut r = rng::stream(cfg.seed, &format!("codec-init-{}", m.as_str()));
    let mut codec = Codec::new(cfg.codec_config(m), &mut r)?;
    let curve = train_vqvae(&mut codec, &images(train, m)?, &cfg.vq)?;
    Ok((codec, curve))
}

pub fn codec_entries(codec: &Codec) -> Entries {
    module_entries("codec", codec)
}

pub fn load_codec(cfg: &PipelineConfig, m: Modality, entries: &Entries) -> Result<Codec> {
    let mut codec = Codec::new(cfg.codec_config(m), &mut rng::seeded(0))?;
    load_module("codec", &mut codec, entries)?;
    Ok(codec)
}

// ---- classifiers

/// The classifier stage's own labelled split.
pub fn classifier_dataset(cfg: &PipelineConfig) -> Result<crate::synth::Dataset> {
    generate_dataset(&cfg.classifier_data)
}

pub fn fit_teacher(cfg: &PipelineConfig, train: &[PairedSample]) -> Result<(ClassifierNet, Vec<f64>)> {
    let mut net = ClassifierNet::new(3, &mut rng::stream(cfg.seed, "teacher-init"));
    let losses = train_teacher(&mut net, &images(train, Modality::Visible)?, &labels_of(train)?, &cfg.teacher)?;
    Ok((net, losses))
}

pub fn fit_student(
    cfg: &PipelineConfig,
    teacher: &ClassifierNet,
    train: &[PairedSample],
) -> Result<(ClassifierNet, Vec<DistillEpoch>)> {
    let mut student = teacher.adapted_copy(1)?;
    let curve = distill_student(
        teacher,
        &mut student,
        &images(train, Modality::Visible)?,
        &images(train, Modality::Thermal)?,
        &cfg.student,
    )?;
    Ok((student, curve))
}

pub fn classifier_entries(net: &ClassifierNet) -> Entries {
    module_entries("classifier", net)
}

/// Restored nets come back frozen.
pub fn load_classifier(channels: usize, entries: &Entries) -> Result<ClassifierNet> {
    let mut net = ClassifierNet::new(channels, &mut rng::seeded(0));
    load_module("classifier", &mut net, entries)?;
    net.freeze();
    Ok(net)
}

/// Per-head accuracy of `net` on `images` against `truth`.
pub fn head_accuracy(net: &ClassifierNet, images: &Tensor<f32>, truth: &[AttributeLabels]) -> Result<[f64; 3]> {
    let pred: Vec<AttributeLabels> = classify(net, images)?.into_iter().map(|c| c.labels).collect();
    Ok(per_head_agreement(&pred, truth))
}

// ---- identity embedder

pub fn fit_embedder(cfg: &PipelineConfig, train: &[PairedSample]) -> Result<(IdentityEmbedder, Vec<f64>)> {
    let mut f = IdentityEmbedder::new(3, cfg.data.image_size, &mut rng::stream(cfg.seed, "embedder-init"))?;
    let losses = train_identity_embedder(
        &mut f,
        &images(train, Modality::Visible)?,
        &identities_of(train)?,
        &cfg.embedder,
    )?;
    Ok((f, losses))
}

pub fn load_embedder(cfg: &PipelineConfig, entries: &Entries) -> Result<IdentityEmbedder> {
    let mut f = IdentityEmbedder::new(3, cfg.data.image_size, &mut rng::seeded(0))?;
    load_module("embedder", &mut f, entries)?;
    f.set_trainable(false);
    Ok(f)
}

// ---- denoiser variants

/// Everything a variant needs from earlier stages.
pub struct Upstream<'a> {
    pub visible: &'a Codec,
    pub thermal: &'a Codec,
    pub student: Option<&'a ClassifierNet>,
    pub embedder: Option<&'a IdentityEmbedder>,
}

pub struct TrainedVariant {
    pub variant: Variant,
    pub denoiser: Denoiser,
    pub prompt: Option<PromptTable>,
    pub scales: LatentScales,
}

impl TrainedVariant {
    pub fn entries(&self) -> Entries {
        let mut e = module_entries("denoiser", &self.denoiser);
        if let Some(p) = &self.prompt {
            e.extend(module_entries("prompt", p));
        }
        e.push((
            "meta.latent_scales".into(),
            AnyTensor::F32(Tensor::new(vec![2], vec![self.scales.visible, self.scales.thermal]).expect("2 values")),
        ));
        e
    }

    pub fn load(cfg: &PipelineConfig, variant: Variant, entries: &Entries) -> Result<Self> {
        let mut denoiser = Denoiser::new(cfg.denoiser_config(variant), &mut rng::seeded(0))?;
        load_module("denoiser", &mut denoiser, entries)?;
        let prompt = if variant.conditioning() == Conditioning::Prompt {
            let mut p = PromptTable::new(cfg.denoiser.d_ctx, &mut rng::seeded(0));
            load_module("prompt", &mut p, entries)?;
            Some(p)
        } else {
            None
        };
        let s = entry(entries, "meta.latent_scales")?.as_f32()?;
        if s.shape() != [2] {
            return Err(Error::Format(format!("meta.latent_scales has shape {:?}", s.shape())));
        }
        Ok(TrainedVariant {
            variant,
            denoiser,
            prompt,
            scales: LatentScales {
                visible: s.data()[0],
                thermal: s.data()[1],
            },
        })
    }

    pub fn translator<'a>(&'a self, up: &Upstream<'a>, schedule: &'a NoiseSchedule, policy: SigmaPolicy) -> Translator<'a> {
        Translator {
            visible: up.visible,
            thermal: up.thermal,
            student: up.student,
            prompt: self.prompt.as_ref(),
            conditioning: self.variant.conditioning(),
            denoiser: &self.denoiser,
            schedule,
            scales: self.scales,
            policy,
        }
    }
}

fn require<'a, T>(x: Option<&'a T>, stage: Stage) -> Result<&'a T> {
    x.ok_or_else(|| Error::Config(format!("this variant needs the {} ({})", stage.describe(), stage.command())))
}

pub fn fit_variant(
    cfg: &PipelineConfig,
    variant: Variant,
    up: &Upstream<'_>,
    train: &[PairedSample],
) -> Result<(TrainedVariant, Vec<LossRecord>)> {
    let vis = images(train, Modality::Visible)?;
    let th = images(train, Modality::Thermal)?;
    let scales = LatentScales {
        visible: latent_std(up.visible, &vis)?,
        thermal: latent_std(up.thermal, &th)?,
    };
    let mode = variant.conditioning();
    let labels = if mode == Conditioning::Null {
        vec![AttributeLabels::new(0, 0, 0)?; train.len()]
    } else {
        let student = require(up.student, Stage::Student)?;
        classify(student, &th)?.into_iter().map(|c| c.labels).collect()
    };
    let data = LatentDataset {
        z0: encode_scaled(up.visible, &vis, scales.visible)?,
        thermal: encode_scaled(up.thermal, &th, scales.thermal)?,
        labels,
        reference: vis,
    };
    let mut r = rng::stream(cfg.seed, "denoiser-init");
    let mut denoiser = Denoiser::new(cfg.denoiser_config(variant), &mut r)?;
    let mut prompt = (mode == Conditioning::Prompt).then(|| PromptTable::new(cfg.denoiser.d_ctx, &mut r));
    let guide = if variant.uses_id_loss() {
        Some(IdGuide {
            embedder: require(up.embedder, Stage::Embedder)?,
            decoder: up.visible,
            latent_scale: scales.visible,
        })
    } else {
        None
    };
    let schedule = cfg.schedule()?;
    info!(
        "training variant {} ({} denoiser parameters)",
        variant.as_str(),
        denoiser.param_count()
    );
    let records = train_diffusion(&mut denoiser, prompt.as_mut(), &schedule, &data, mode, guide, &cfg.diffusion)?;
    Ok((
        TrainedVariant {
            variant,
            denoiser,
            prompt,
            scales,
        },
        records,
    ))
}

/// Mean over the three heads of how often the teacher reads the
/// ground-truth attributes back from generated images.
pub fn attribute_match(teacher: &ClassifierNet, generated: &Tensor<f32>, truth: &[AttributeLabels]) -> Result<f64> {
    let acc = head_accuracy(teacher, generated, truth)?;
    Ok(acc.iter().sum::<f64>() / 3.0)
}

pub struct VariantEval {
    pub report: EvalReport,
    pub attribute_match: f64,
    pub per_head: [f64; 3],
}

pub fn evaluate_generated(
    embedder: &IdentityEmbedder,
    teacher: &ClassifierNet,
    generated: &Tensor<f32>,
    test: &[PairedSample],
) -> Result<VariantEval> {
    let reference = images(test, Modality::Visible)?;
    let truth = labels_of(test)?;
    let report = evaluate(embedder, generated, &reference, &identities_of(test)?)?;
    let per_head = head_accuracy(teacher, generated, &truth)?;
    Ok(VariantEval {
        report,
        attribute_match: per_head.iter().sum::<f64>() / 3.0,
        per_head,
    })
}

pub fn embedder_entries(f: &IdentityEmbedder) -> Entries {
    module_entries("embedder", f)
}

/// Loads the embedder checkpoint, training and saving it first when absent.
pub fn ensure_embedder(cfg: &PipelineConfig, art: &Artifacts, train: &[PairedSample]) -> Result<IdentityEmbedder> {
    if !art.has(Stage::Embedder) {
        info!("training the identity embedder");
        let (f, _) = fit_embedder(cfg, train)?;
        art.save(Stage::Embedder, &embedder_entries(&f))?;
    }
    load_embedder(cfg, &art.load(Stage::Embedder)?)
}
