use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use t2v::io::checkpoint::load_checkpoint;

const TINY_CONF: &str = "\
# small enough for a test run
seed = 3
data.identities = 10
data.images_per_identity = 2
data.image_size = 16
classifier.identities = 10
codec.codebook_size = 16
codec.base_channels = 4
vq.epochs = 1
teacher.epochs = 1
student.epochs = 1
embedder.epochs = 1
diffusion.epochs = 1
diffusion.base_channels = 8
diffusion.d_ctx = 20
diffusion.heads = 2
diffusion.d_state = 4
diffusion.timesteps = 5
diffusion.id_every = 1
";

fn t2v(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_t2v"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = t2v(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect()
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-data", "--seed", "7", "--out", "a"]);
    ok(tmp.path(), &["gen-data", "--seed", "7", "--out", "b"]);
    let (a, b) = (tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
    assert_eq!(a.len(), 2 * 1000 + 2);
    assert!(a == b, "directory trees differ");
    ok(tmp.path(), &["gen-data", "--seed", "8", "--out", "c"]);
    assert!(tree(&tmp.path().join("c")) != a);
}

#[test]
fn sample_before_codec_training_names_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = t2v(tmp.path(), &["sample", "--variant", "D", "--input", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("visible-codec") && err.contains("train-vqvae --modality visible"), "{err}");
}

#[test]
fn usage_and_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(t2v(tmp.path(), &["gen-data", "--out", "d", "--bogus"]).status.code(), Some(2));
    assert_eq!(t2v(tmp.path(), &["fly"]).status.code(), Some(2));
    let out = t2v(tmp.path(), &["gen-data", "--out", "d", "--vq.epohcs", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vq.epohcs"));

    fs::write(tmp.path().join("bad.conf"), "seed = 1\nthis line is wrong\n").unwrap();
    let out = t2v(tmp.path(), &["--config", "bad.conf", "gen-data", "--out", "d"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let out = t2v(tmp.path(), &["train-diffusion", "--variant", "E"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_command_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let s = ok(tmp.path(), &["gradcheck", "--trials", "2"]);
    assert!(s.contains("diffusion_micro_pipeline") && !s.contains("FAIL"), "{s}");
}

#[test]
fn bench_attn_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["bench-attn", "--out", "b.csv", "--lengths", "16,32"]);
    let text = fs::read_to_string(tmp.path().join("b.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(t2v::ssm::BENCH_CSV_HEADER));
    assert_eq!(lines.count(), 4);
}

#[test]
fn whole_pipeline_at_toy_scale() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("t2v.conf"), TINY_CONF).unwrap();
    ok(d, &["gen-data", "--out", "data"]);
    ok(d, &["train-vqvae", "--modality", "visible"]);
    ok(d, &["train-vqvae", "--modality", "thermal"]);

    // conditioning variants need the student
    let out = t2v(d, &["train-diffusion", "--variant", "B"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-classifier --stage student"));
    let out = t2v(d, &["train-classifier", "--stage", "student"]);
    assert_eq!(out.status.code(), Some(2));

    ok(d, &["train-classifier", "--stage", "teacher"]);
    ok(d, &["train-classifier", "--stage", "student"]);

    let s = ok(d, &["train-diffusion", "--variant", "baseline"]);
    assert!(s.contains("mhsa attention"), "{s}");
    let s = ok(d, &["train-diffusion", "--variant", "A"]);
    assert!(s.contains("bimamba attention"), "{s}");
    ok(d, &["train-diffusion", "--variant", "B"]);
    ok(d, &["train-diffusion", "--variant", "C"]);
    ok(d, &["train-diffusion", "--variant", "D", "--diffusion.id_weight", "0.5"]);

    let art = d.join("artifacts");
    let names = |v: &str| -> Vec<String> {
        load_checkpoint(&art.join(format!("diffusion_{v}.t2vl")))
            .unwrap()
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    };
    assert!(!names("B").iter().any(|n| n.starts_with("prompt.")));
    assert!(names("C").iter().any(|n| n.starts_with("prompt.")));
    assert!(names("baseline").iter().any(|n| n.contains(".mhsa.")));
    assert!(names("A").iter().any(|n| n.contains(".bimamba.")));
    assert!(art.join("embedder.t2vl").is_file());
    let loss = fs::read_to_string(art.join("diffusion_D_loss.csv")).unwrap();
    assert!(loss.starts_with("step,loss_eq1,loss_id\n"));

    ok(d, &["sample", "--variant", "baseline", "--input", "data", "--out", "gen"]);
    let generated = tree(&d.join("gen"));
    assert_eq!(generated.len(), 4, "two test identities of two images");
    ok(d, &["sample", "--variant", "baseline", "--input", "data", "--out", "gen2"]);
    assert!(tree(&d.join("gen2")) == generated, "sampling is deterministic");

    let s = ok(d, &["evaluate", "--generated", "gen", "--out", "report.csv"]);
    assert!(s.contains("rank1") && s.contains("attribute_match"), "{s}");
    let report = t2v::metrics::read_report_csv(fs::File::open(d.join("report.csv")).unwrap()).unwrap();
    assert!(report.ssim_mean.is_finite() && (0.0..=100.0).contains(&report.rank1));
}
