//! Procedural paired visible/thermal faces with exact attribute labels.
//!
//! Each identity fixes a [`FaceDescriptor`]. Skin tone is drawn with a
//! palette colour in the visible image only; the thermal render never reads
//! the palette. Face proportions are assigned per identity from the tone
//! index, so tone remains inferable from thermal geometry at the dataset
//! level even though no thermal pixel depends on the colour.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::RngCore;

use crate::conditioning::{csv_err, read_labels_csv, write_labels_csv, AttributeLabels, AGE_BINS, GENDER_CLASSES};
use crate::error::{Error, Result};
use crate::io::netpbm::{read_pnm, to_byte, write_pnm};
use crate::rng;
use crate::tensor::Tensor;

/// Light to dark.
pub const PALETTE: [[f64; 3]; 19] = [
    [0.940, 0.890, 0.820],
    [0.931, 0.851, 0.741],
    [0.922, 0.812, 0.662],
    [0.823, 0.773, 0.703],
    [0.814, 0.734, 0.624],
    [0.806, 0.696, 0.546],
    [0.707, 0.657, 0.587],
    [0.698, 0.618, 0.508],
    [0.689, 0.579, 0.429],
    [0.590, 0.540, 0.470],
    [0.581, 0.501, 0.391],
    [0.572, 0.462, 0.312],
    [0.473, 0.423, 0.353],
    [0.464, 0.384, 0.274],
    [0.456, 0.346, 0.196],
    [0.357, 0.307, 0.237],
    [0.348, 0.268, 0.158],
    [0.339, 0.229, 0.079],
    [0.240, 0.190, 0.120],
];

pub const MANIFEST_HEADER: [&str; 6] = ["stem", "split", "identity", "gender", "age_bin", "skin_tone"];

const DESIGN: f64 = 32.0;
const BACKGROUND: [f64; 3] = [0.12, 0.14, 0.18];
const HAIR: [f64; 3] = [0.22, 0.14, 0.08];
const EYE: [f64; 3] = [0.08, 0.08, 0.10];
const MOUTH: [f64; 3] = [0.55, 0.20, 0.22];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub identity_count: usize,
    pub images_per_identity: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            identity_count: 100,
            images_per_identity: 10,
            image_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split {s:?}"))),
        }
    }

    /// Every fifth identity is held out.
    pub fn of_identity(identity: usize) -> Self {
        if identity % 5 == 4 {
            Split::Test
        } else {
            Split::Train
        }
    }
}

/// Per-identity geometry and labels, in 32-pixel design units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceDescriptor {
    pub labels: AttributeLabels,
    pub half_width: f64,
    pub half_height: f64,
    pub eye_dx: f64,
    pub eye_dy: f64,
    pub mouth_dy: f64,
    pub mouth_half: f64,
    pub mark: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub dx: f64,
    pub dy: f64,
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub stem: String,
    /// `[3, H, W]` in `[0, 1]`
    pub visible: Tensor<f32>,
    /// `[1, H, W]` in `[0, 1]`
    pub thermal: Tensor<f32>,
    pub labels: Option<AttributeLabels>,
    pub identity: Option<usize>,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
}

fn span<R: RngCore>(r: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng::uniform(r)
}

/// Face proportions carried by tone index `s`.
pub fn tone_geometry(s: usize) -> (f64, f64) {
    (8.5 + 1.25 * (s % 5) as f64, 9.5 + 1.25 * (s / 5) as f64)
}

pub fn describe(spec: &SyntheticSpec, identity: usize) -> FaceDescriptor {
    let mut r = rng::keyed(spec.seed, 0x1D, identity as u64, 0);
    let gender = rng::below(&mut r, GENDER_CLASSES);
    let age_bin = rng::below(&mut r, AGE_BINS);
    let skin_tone = identity % PALETTE.len();
    let (half_width, half_height) = tone_geometry(skin_tone);
    let mark = (span(&mut r, -4.0, 4.0), span(&mut r, -1.0, 2.0));
    FaceDescriptor {
        labels: AttributeLabels::new(gender, age_bin, skin_tone).expect("labels drawn in range"),
        half_width,
        half_height,
        eye_dx: span(&mut r, 3.0, 5.0),
        eye_dy: span(&mut r, 2.0, 4.0),
        mouth_dy: span(&mut r, 3.5, 5.5),
        mouth_half: span(&mut r, 1.5, 3.5),
        mark,
    }
}

pub fn jitter(spec: &SyntheticSpec, identity: usize, index: usize) -> Jitter {
    let mut r = rng::keyed(spec.seed, 0x71, identity as u64, index as u64);
    Jitter {
        dx: span(&mut r, -1.0, 1.0),
        dy: span(&mut r, -1.0, 1.0),
        angle: span(&mut r, -0.06, 0.06),
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Coverage of the primitives at one point in face coordinates.
struct Cover {
    face: f64,
    radial: f64,
    hair: f64,
    eyes: f64,
    mouth: f64,
    mark: f64,
    texture: f64,
}

fn cover(d: &FaceDescriptor, u: f64, v: f64) -> Cover {
    let (rx, ry) = (d.half_width, d.half_height);
    let e = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
    let face = clamp01((1.0 - e) * rx.min(ry) + 0.5);
    let hair = if d.labels.gender == 1 {
        let (hx, hy) = (rx + 1.5, ry + 1.5);
        let eh = ((u / hx).powi(2) + (v / hy).powi(2)).sqrt();
        clamp01((1.0 - eh) * hx.min(hy) + 0.5) * clamp01(-(v + 0.45 * ry) + 0.5)
    } else {
        0.0
    };
    let disc = |cx: f64, cy: f64, rad: f64| clamp01(rad - ((u - cx).powi(2) + (v - cy).powi(2)).sqrt() + 0.5);
    let eyes = disc(-d.eye_dx, -d.eye_dy, 1.4).max(disc(d.eye_dx, -d.eye_dy, 1.4));
    let mouth = clamp01(d.mouth_half - u.abs() + 0.5) * clamp01(0.7 - (v - d.mouth_dy).abs() + 0.5);
    let mark = disc(d.mark.0, d.mark.1, 0.9);
    // three stripe orientations × three periods
    let age = d.labels.age_bin;
    let phi = (60.0 * (age % 3) as f64).to_radians();
    let period = [4.5, 7.0, 11.0][age / 3];
    let texture = (std::f64::consts::TAU * (u * phi.cos() + v * phi.sin()) / period).sin();
    Cover {
        face,
        radial: 1.0 - e.min(1.0).powi(2),
        hair,
        eyes: eyes * face,
        mouth: mouth * face,
        mark: mark * face,
        texture,
    }
}

/// Renders `(visible [3,H,W], thermal [1,H,W])`, both quantised to 8 bits.
pub fn render(d: &FaceDescriptor, j: &Jitter, size: usize) -> (Tensor<f32>, Tensor<f32>) {
    let scale = size as f64 / DESIGN;
    let (cx, cy) = (16.0 + j.dx, 16.5 + j.dy);
    let (sin, cos) = j.angle.sin_cos();
    let plane = size * size;
    let mut vis = vec![0f64; 3 * plane];
    let mut heat = vec![0f64; plane];
    let tone = PALETTE[d.labels.skin_tone];
    for py in 0..size {
        for px in 0..size {
            let x = (px as f64 + 0.5) / scale - cx;
            let y = (py as f64 + 0.5) / scale - cy;
            let u = x * cos + y * sin;
            let v = -x * sin + y * cos;
            let c = cover(d, u, v);

            let skin = tone.map(|t| t + 0.12 * c.texture);
            let mut p = lerp3(BACKGROUND, skin, c.face);
            p = lerp3(p, tone.map(|t| 0.6 * t), c.mark);
            p = lerp3(p, EYE, c.eyes);
            p = lerp3(p, MOUTH, c.mouth);
            p = lerp3(p, HAIR, c.hair);
            for ch in 0..3 {
                vis[ch * plane + py * size + px] = p[ch];
            }

            let skin_heat = 0.55 + 0.2 * c.radial + 0.15 * c.texture;
            let mut h = 0.06 + (skin_heat - 0.06) * c.face;
            h += (0.45 - h) * c.mark;
            h += (0.95 - h) * c.eyes;
            h += (0.85 - h) * c.mouth;
            h += (0.35 - h) * c.hair;
            heat[py * size + px] = h;
        }
    }
    let heat = gaussian_blur(&heat, size, size, 1.0);
    let quant = |v: &[f64]| -> Vec<f32> { v.iter().map(|&x| to_byte(x as f32) as f32 / 255.0).collect() };
    (
        Tensor::new(vec![3, size, size], quant(&vis)).expect("sized"),
        Tensor::new(vec![1, size, size], quant(&heat)).expect("sized"),
    )
}

/// Separable Gaussian blur, radius ⌈3σ⌉, edges clamped.
pub fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let rad = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-rad..=rad).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let at = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-rad..=rad)
                .map(|o| k[(o + rad) as usize] * img[y * w + at(x as isize + o, w)])
                .sum();
        }
    }
    let mut out = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-rad..=rad)
                .map(|o| k[(o + rad) as usize] * tmp[at(y as isize + o, h) * w + x])
                .sum();
        }
    }
    out
}

pub fn stem(identity: usize, index: usize) -> String {
    format!("id{identity:04}_{index:02}")
}

pub fn generate_pair(spec: &SyntheticSpec, identity: usize, index: usize) -> Result<PairedSample> {
    if identity >= spec.identity_count {
        return Err(Error::Contract(format!(
            "identity {identity} outside [0, {})",
            spec.identity_count
        )));
    }
    let d = describe(spec, identity);
    let (visible, thermal) = render(&d, &jitter(spec, identity, index), spec.image_size);
    Ok(PairedSample {
        stem: stem(identity, index),
        visible,
        thermal,
        labels: Some(d.labels),
        identity: Some(identity),
        split: Some(Split::of_identity(identity)),
    })
}

pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.identity_count < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 identities, got {}",
            spec.identity_count
        )));
    }
    if spec.image_size < 8 || spec.images_per_identity == 0 {
        return Err(Error::Contract("image size ≥ 8 and at least one image per identity required".into()));
    }
    let mut ds = Dataset {
        train: Vec::new(),
        test: Vec::new(),
    };
    for id in 0..spec.identity_count {
        for i in 0..spec.images_per_identity {
            let s = generate_pair(spec, id, i)?;
            match s.split {
                Some(Split::Test) => ds.test.push(s),
                _ => ds.train.push(s),
            }
        }
    }
    // tiny sets: make sure both sides are populated
    if ds.test.is_empty() {
        let last = spec.identity_count - 1;
        let (moved, kept): (Vec<_>, Vec<_>) = ds.train.into_iter().partition(|s| s.identity == Some(last));
        ds.train = kept;
        ds.test = moved.into_iter().map(|s| PairedSample { split: Some(Split::Test), ..s }).collect();
    }
    Ok(ds)
}

/// Writes `<stem>_vis.ppm`, `<stem>_th.pgm`, `manifest.csv` and `labels.csv`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
    let mut manifest = csv::Writer::from_writer(Vec::new());
    manifest.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    let mut labels = Vec::new();
    for s in ds.train.iter().chain(&ds.test) {
        let vis = dir.join(format!("{}_vis.ppm", s.stem));
        let th = dir.join(format!("{}_th.pgm", s.stem));
        let mut buf = Vec::new();
        write_pnm(&mut buf, &s.visible)?;
        fs::write(&vis, &buf).map_err(|e| file_err(&vis, e))?;
        buf.clear();
        write_pnm(&mut buf, &s.thermal)?;
        fs::write(&th, &buf).map_err(|e| file_err(&th, e))?;
        let l = s.labels.ok_or_else(|| Error::Contract(format!("{} has no labels", s.stem)))?;
        manifest
            .write_record([
                s.stem.clone(),
                s.split.unwrap_or(Split::Train).as_str().to_string(),
                s.identity.map(|i| i.to_string()).unwrap_or_default(),
                l.gender.to_string(),
                l.age_bin.to_string(),
                l.skin_tone.to_string(),
            ])
            .map_err(csv_err)?;
        labels.push((s.stem.clone(), l));
    }
    let bytes = manifest.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join("manifest.csv");
    fs::write(&path, bytes).map_err(|e| file_err(&path, e))?;
    let path = dir.join("labels.csv");
    let f = fs::File::create(&path).map_err(|e| file_err(&path, e))?;
    write_labels_csv(f, &labels)
}

fn file_err(path: &Path, source: std::io::Error) -> Error {
    Error::File {
        path: path.to_path_buf(),
        source,
    }
}

fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let f = fs::File::open(path).map_err(|e| file_err(path, e))?;
    read_pnm(std::io::BufReader::new(f)).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

struct ManifestRow {
    split: Split,
    identity: usize,
}

fn read_manifest(path: &Path) -> Result<HashMap<String, ManifestRow>> {
    let f = fs::File::open(path).map_err(|e| file_err(path, e))?;
    let mut rdr = csv::Reader::from_reader(f);
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != MANIFEST_HEADER {
        return Err(Error::Format(format!("manifest header {header:?}")));
    }
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let identity = rec[2]
            .parse()
            .map_err(|_| Error::Format(format!("manifest identity {:?}", &rec[2])))?;
        out.insert(
            rec[0].to_string(),
            ManifestRow {
                split: Split::parse(&rec[1])?,
                identity,
            },
        );
    }
    Ok(out)
}

/// Loads `<name>_vis.ppm`/`<name>_th.pgm` pairs sorted by stem, attaching
/// labels from `labels.csv` and split/identity from `manifest.csv` when present.
pub fn load_paired_directory(dir: &Path) -> Result<Vec<PairedSample>> {
    let entries = fs::read_dir(dir).map_err(|e| file_err(dir, e))?;
    let mut pairs: BTreeMap<String, (Option<PathBuf>, Option<PathBuf>)> = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| file_err(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if let Some(stem) = name.strip_suffix("_vis.ppm") {
            pairs.entry(stem.to_string()).or_default().0 = Some(path);
        } else if let Some(stem) = name.strip_suffix("_th.pgm") {
            pairs.entry(stem.to_string()).or_default().1 = Some(path);
        }
    }
    let labels_path = dir.join("labels.csv");
    let labels = if labels_path.exists() {
        let f = fs::File::open(&labels_path).map_err(|e| file_err(&labels_path, e))?;
        read_labels_csv(f)?
    } else {
        HashMap::new()
    };
    let manifest_path = dir.join("manifest.csv");
    let manifest = if manifest_path.exists() {
        read_manifest(&manifest_path)?
    } else {
        HashMap::new()
    };
    let mut out = Vec::new();
    for (stem, (vis, th)) in pairs {
        let (Some(vis), Some(th)) = (vis, th) else {
            log::warn!("skipping unpaired image {stem}");
            continue;
        };
        let visible = read_image(&vis)?;
        let thermal = read_image(&th)?;
        if visible.shape()[0] != 3 || thermal.shape()[0] != 1 || visible.shape()[1..] != thermal.shape()[1..] {
            return Err(Error::Dimension(format!(
                "{} {:?} and {} {:?} do not form a pair",
                vis.display(),
                visible.shape(),
                th.display(),
                thermal.shape()
            )));
        }
        let lab = labels
            .get(&stem)
            .or_else(|| labels.get(&format!("{stem}_vis.ppm")))
            .copied();
        let m = manifest.get(&stem);
        out.push(PairedSample {
            labels: lab,
            identity: m.map(|m| m.identity),
            split: m.map(|m| m.split),
            stem,
            visible,
            thermal,
        });
    }
    if out.is_empty() {
        log::warn!("no image pairs found in {}", dir.display());
    }
    Ok(out)
}

/// Every `<stem><suffix>` image in `dir`, sorted by stem.
pub fn load_images(dir: &Path, suffix: &str) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| file_err(dir, e))? {
        let path = entry.map_err(|e| file_err(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(stem) = name.strip_suffix(suffix) {
            out.push((stem.to_string(), read_image(&path)?));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Split of each stem listed in `dir/manifest.csv` (empty without one).
pub fn manifest_splits(dir: &Path) -> Result<HashMap<String, Split>> {
    let path = dir.join("manifest.csv");
    if !path.exists() {
        return Ok(HashMap::new());
    }
    Ok(read_manifest(&path)?.into_iter().map(|(k, v)| (k, v.split)).collect())
}

/// Stacks per-sample images into `[N, C, H, W]`.
pub fn stack_images(samples: &[&PairedSample], thermal: bool) -> Result<Tensor<f32>> {
    let items: Vec<&Tensor<f32>> = samples
        .iter()
        .map(|s| if thermal { &s.thermal } else { &s.visible })
        .collect();
    Tensor::stack(&items)
}
