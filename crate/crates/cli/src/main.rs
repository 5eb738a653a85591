use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use t2v::codec::VqEpoch;
use t2v::diffusion::{write_loss_csv, Variant};
use t2v::error::{Error, Result};
use t2v::gradsuite::{run_suite, DEFAULT_TRIALS, TOLERANCE};
use t2v::io::config::{Config, DEFAULT_CONFIG};
use t2v::io::netpbm::write_pnm;
use t2v::metrics::write_report_csv;
use t2v::nn::Module;
use t2v::pipeline::*;
use t2v::ssm::{bench_blocks, log_log_slope, write_bench_csv, BenchConfig, BlockKind};
use t2v::synth::{generate_dataset, load_images, load_paired_directory, manifest_splits, write_dataset, PairedSample, Split};
use t2v::tensor::Tensor;

#[derive(Parser, Debug)]
#[command(
    name = "t2v",
    version,
    about = "Thermal-to-visible face translation pipeline",
    after_help = "Any pipeline setting can be overridden as `--section.key value` (for example \
                  `--diffusion.epochs 10`); these win over the config file."
)]
struct Cli {
    /// Config file; defaults to ./t2v.conf when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint and report directory.
    #[arg(long, global = true, default_value = "artifacts")]
    artifacts: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModalityArg {
    Visible,
    Thermal,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic paired dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one VQ-VAE codec on the training split.
    TrainVqvae {
        #[arg(long, value_enum)]
        modality: ModalityArg,
        #[arg(long, default_value = "data")]
        data: PathBuf,
    },
    /// Train the visible teacher or distil the thermal student.
    TrainClassifier {
        #[arg(long, value_enum)]
        stage: StageArg,
    },
    /// Train one ablation variant of the denoiser.
    TrainDiffusion {
        /// baseline, A, B, C or D
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
        #[arg(long, default_value = "data")]
        data: PathBuf,
    },
    /// Translate every thermal image in a directory.
    Sample {
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which images to translate when the directory has a manifest.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Score generated images against the ground-truth visible images.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Report CSV; defaults to <artifacts>/report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the attention and state-space blocks over sequence lengths.
    BenchAttn {
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
        /// Comma-separated sequence lengths.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Time the plain blocked scan instead of the selective block.
        #[arg(long)]
        plain: bool,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

/// Splits `--section.key value` (or `--section.key=value`) overrides out of
/// the argument list; everything else goes to the regular parser.
fn split_overrides(args: Vec<OsString>) -> std::result::Result<(Vec<OsString>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a.to_str().and_then(|s| s.strip_prefix("--")).filter(|k| k.contains('.'));
        match key {
            Some(k) => {
                let (k, v) = match k.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => {
                        let v = it
                            .next()
                            .and_then(|v| v.into_string().ok())
                            .ok_or_else(|| format!("--{k} needs a value"))?;
                        (k.to_string(), v)
                    }
                };
                overrides.push((k, v));
            }
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn load_config(cli: &Cli, overrides: &[(String, String)]) -> Result<Config> {
    let mut c = match &cli.config {
        Some(p) => Config::load(p)?,
        None if Path::new(DEFAULT_CONFIG).is_file() => Config::load(Path::new(DEFAULT_CONFIG))?,
        None => Config::default(),
    };
    for (k, v) in overrides {
        c.set(k, v)?;
    }
    if let Some(s) = cli.seed {
        c.set("seed", &s.to_string())?;
    }
    Ok(c)
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(file_err(parent))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(file_err(path))?))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn train_split(samples: Vec<PairedSample>) -> Vec<PairedSample> {
    samples.into_iter().filter(|s| s.split != Some(Split::Test)).collect()
}

fn load_train(data: &Path) -> Result<Vec<PairedSample>> {
    let train = train_split(load_paired_directory(data)?);
    if train.is_empty() {
        return Err(Error::Contract(format!(
            "no training pairs in {} (run `gen-data --out {}` first)",
            data.display(),
            data.display()
        )));
    }
    Ok(train)
}

fn write_vq_csv(path: &Path, curve: &[VqEpoch]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["epoch", "mse", "loss", "usage"]).map_err(csv_err)?;
    for e in curve {
        w.write_record([e.epoch.to_string(), e.mse.to_string(), e.loss.to_string(), e.usage.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn upstream_codecs(cfg: &PipelineConfig, art: &Artifacts) -> Result<(t2v::codec::Codec, t2v::codec::Codec)> {
    let vis = load_codec(cfg, Modality::Visible, &art.load(Stage::Codec(Modality::Visible))?)?;
    let th = load_codec(cfg, Modality::Thermal, &art.load(Stage::Codec(Modality::Thermal))?)?;
    Ok((vis, th))
}

fn run(cli: Cli, conf: Config) -> Result<()> {
    let cfg = PipelineConfig::from_config(&conf)?;
    conf.reject_unknown()?;
    let art = Artifacts::new(&cli.artifacts);
    match cli.command {
        Command::GenData { out } => {
            let ds = generate_dataset(&cfg.data)?;
            write_dataset(&out, &ds)?;
            println!("wrote {} training and {} test pairs to {}", ds.train.len(), ds.test.len(), out.display());
        }
        Command::TrainVqvae { modality, data } => {
            let m = match modality {
                ModalityArg::Visible => Modality::Visible,
                ModalityArg::Thermal => Modality::Thermal,
            };
            let train = load_train(&data)?;
            let (codec, curve) = train_codec(&cfg, m, &train)?;
            let path = art.save(Stage::Codec(m), &codec_entries(&codec))?;
            write_vq_csv(&art.dir.join(format!("vqvae_{}.csv", m.as_str())), &curve)?;
            let (first, last) = (curve[0], curve[curve.len() - 1]);
            println!(
                "{} codec: mse {:.5} -> {:.5}, codebook usage {:.1}%, saved {}",
                m.as_str(),
                first.mse,
                last.mse,
                100.0 * last.usage,
                path.display()
            );
        }
        Command::TrainClassifier { stage } => {
            let cds = classifier_dataset(&cfg)?;
            match stage {
                StageArg::Teacher => {
                    let (mut net, losses) = fit_teacher(&cfg, &cds.train)?;
                    net.freeze();
                    let path = art.save(Stage::Teacher, &classifier_entries(&net))?;
                    let mut w = csv::Writer::from_writer(create(&art.dir.join("classifier_teacher.csv"))?);
                    w.write_record(["epoch", "loss"]).map_err(csv_err)?;
                    for (i, l) in losses.iter().enumerate() {
                        w.write_record([(i + 1).to_string(), l.to_string()]).map_err(csv_err)?;
                    }
                    w.flush()?;
                    let acc = head_accuracy(&net, &images(&cds.test, Modality::Visible)?, &labels_of(&cds.test)?)?;
                    println!(
                        "teacher held-out accuracy gender {:.3} age {:.3} tone {:.3}, saved {}",
                        acc[0],
                        acc[1],
                        acc[2],
                        path.display()
                    );
                }
                StageArg::Student => {
                    let teacher = load_classifier(3, &art.load(Stage::Teacher)?)?;
                    let (student, curve) = fit_student(&cfg, &teacher, &cds.train)?;
                    let path = art.save(Stage::Student, &classifier_entries(&student))?;
                    let mut w = csv::Writer::from_writer(create(&art.dir.join("classifier_student.csv"))?);
                    w.write_record(["epoch", "feature_loss", "ce_loss"]).map_err(csv_err)?;
                    for e in &curve {
                        w.write_record([e.epoch.to_string(), e.feature_loss.to_string(), e.ce_loss.to_string()])
                            .map_err(csv_err)?;
                    }
                    w.flush()?;
                    let tl = t2v::conditioning::classify(&teacher, &images(&cds.test, Modality::Visible)?)?;
                    let tl: Vec<_> = tl.into_iter().map(|c| c.labels).collect();
                    let agree = head_accuracy(&student, &images(&cds.test, Modality::Thermal)?, &tl)?;
                    println!(
                        "student/teacher agreement gender {:.3} age {:.3} tone {:.3}, saved {}",
                        agree[0],
                        agree[1],
                        agree[2],
                        path.display()
                    );
                }
            }
        }
        Command::TrainDiffusion { variant, data } => {
            let (vis, th) = upstream_codecs(&cfg, &art)?;
            let student = if variant.uses_classifier() {
                Some(load_classifier(1, &art.load(Stage::Student)?)?)
            } else {
                None
            };
            let train = load_train(&data)?;
            let embedder = if variant.uses_id_loss() {
                Some(ensure_embedder(&cfg, &art, &train)?)
            } else {
                None
            };
            let up = Upstream {
                visible: &vis,
                thermal: &th,
                student: student.as_ref(),
                embedder: embedder.as_ref(),
            };
            let (trained, records) = fit_variant(&cfg, variant, &up, &train)?;
            let path = art.save(Stage::Diffusion(variant), &trained.entries())?;
            write_loss_csv(
                create(&art.dir.join(format!("diffusion_{}_loss.csv", variant.as_str())))?,
                &records,
            )?;
            let last = records.last().map(|r| r.loss_eq1).unwrap_or(f64::NAN);
            println!(
                "variant {} ({} attention, {} parameters): final noise loss {:.4}, saved {}",
                variant.as_str(),
                variant.attention().as_str(),
                trained.denoiser.param_count(),
                last,
                path.display()
            );
        }
        Command::Sample {
            variant,
            input,
            out,
            split,
        } => {
            let (vis, th) = upstream_codecs(&cfg, &art)?;
            let trained = TrainedVariant::load(&cfg, variant, &art.load(Stage::Diffusion(variant))?)?;
            let student = if variant.uses_classifier() {
                Some(load_classifier(1, &art.load(Stage::Student)?)?)
            } else {
                None
            };
            let splits = manifest_splits(&input)?;
            let keep = |stem: &str| match (split, splits.get(stem)) {
                (SplitArg::All, _) | (_, None) => true,
                (SplitArg::Train, Some(s)) => *s == Split::Train,
                (SplitArg::Test, Some(s)) => *s == Split::Test,
            };
            let items: Vec<(String, Tensor<f32>)> =
                load_images(&input, "_th.pgm")?.into_iter().filter(|(s, _)| keep(s)).collect();
            if items.is_empty() {
                return Err(Error::Contract(format!("no thermal images (*_th.pgm) selected in {}", input.display())));
            }
            let refs: Vec<&Tensor<f32>> = items.iter().map(|(_, t)| t).collect();
            let thermal = Tensor::stack(&refs)?;
            let schedule = cfg.schedule()?;
            let up = Upstream {
                visible: &vis,
                thermal: &th,
                student: student.as_ref(),
                embedder: None,
            };
            let generated = trained.translator(&up, &schedule, cfg.sigma).translate(&thermal, cfg.seed)?;
            fs::create_dir_all(&out).map_err(file_err(&out))?;
            for (i, (stem, _)) in items.iter().enumerate() {
                write_pnm(create(&out.join(format!("{stem}_gen.ppm")))?, &generated.index0(i)?)?;
            }
            println!("translated {} images into {}", items.len(), out.display());
        }
        Command::Evaluate { generated, data, out } => {
            let gen = load_images(&generated, "_gen.ppm")?;
            let all = load_paired_directory(&data)?;
            let by_stem: std::collections::HashMap<&str, &PairedSample> =
                all.iter().map(|s| (s.stem.as_str(), s)).collect();
            let mut matched = Vec::new();
            let mut gen_imgs = Vec::new();
            for (stem, img) in &gen {
                match by_stem.get(stem.as_str()) {
                    Some(s) => {
                        matched.push((*s).clone());
                        gen_imgs.push(img);
                    }
                    None => warn!("{stem}: no ground truth in {}", data.display()),
                }
            }
            if matched.is_empty() {
                return Err(Error::Contract(format!(
                    "no generated image in {} matches a pair in {}",
                    generated.display(),
                    data.display()
                )));
            }
            let embedder = ensure_embedder(&cfg, &art, &load_train(&data)?)?;
            let reference = images(&matched, Modality::Visible)?;
            let gen_t = Tensor::stack(&gen_imgs)?;
            let report = t2v::metrics::evaluate(&embedder, &gen_t, &reference, &identities_of(&matched)?)?;
            let out = out.unwrap_or_else(|| art.dir.join("report.csv"));
            write_report_csv(create(&out)?, &report)?;
            for (name, v) in t2v::metrics::REPORT_METRICS.iter().zip(report.values()) {
                println!("{name:>14} {v:.4}");
            }
            if art.has(Stage::Teacher) && matched.iter().all(|s| s.labels.is_some()) {
                let teacher = load_classifier(3, &art.load(Stage::Teacher)?)?;
                let m = attribute_match(&teacher, &gen_t, &labels_of(&matched)?)?;
                println!("{:>14} {m:.4}", "attribute_match");
            }
            info!("report written to {}", out.display());
        }
        Command::BenchAttn {
            out,
            lengths,
            repeats,
            plain,
        } => {
            let mut bc = BenchConfig {
                repeats,
                selective: !plain,
                seed: cfg.seed,
                ..Default::default()
            };
            if let Some(l) = lengths {
                bc.seq_lens = l;
            }
            let records = bench_blocks(&bc)?;
            write_bench_csv(&mut create(&out)?, &records)?;
            for kind in [BlockKind::Mhsa, BlockKind::Mamba] {
                let params = records.iter().find(|r| r.block_kind == kind).map_or(0, |r| r.param_count);
                match log_log_slope(&records, kind) {
                    Some(s) => println!("{:>8}: {params} parameters, log-log time slope {s:.3}", kind.as_str()),
                    None => println!("{:>8}: {params} parameters", kind.as_str()),
                }
            }
        }
        Command::Gradcheck { trials } => {
            let rep = run_suite(trials, cfg.seed)?;
            for c in &rep.cases {
                println!(
                    "{} {:<26} max rel err {:.2e} over {} checks",
                    if c.passed() { "ok  " } else { "FAIL" },
                    c.name,
                    c.max_rel_err,
                    c.checked
                );
            }
            println!("{} cases, {trials} trials, {:.1}s", rep.cases.len(), rep.elapsed.as_secs_f64());
            if !rep.passed() {
                return Err(Error::Contract(format!("gradient check above tolerance {TOLERANCE:e}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = match split_overrides(std::env::args_os().collect()) {
        Ok(x) => x,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    let result = load_config(&cli, &overrides).and_then(|conf| run(cli, conf));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::MissingCheckpoint { .. } | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
