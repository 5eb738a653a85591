//! Identity embedding, verification and image-quality metrics.
//!
//! The Fréchet distance is computed on the identity embedder's penultimate
//! features, so values are only comparable between runs of this crate.

mod embedder;
mod quality;
mod verify;

use std::io::{Read, Write};

pub use embedder::{
    cosine, id_loss, train_identity_embedder, EmbedderTrainConfig, IdentityEmbedder, CONTRASTIVE_MARGIN, EMBED_DIM,
    EMBED_FEATURES,
};
pub use quality::{frechet_distance, frechet_from_moments, moments, psnr, ssim, FRECHET_RIDGE};
pub use verify::{rank1, vr_at_far, ScoreMatrix};

use crate::codec::select_batch;
use crate::conditioning::csv_err;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const REPORT_HEADER: [&str; 2] = ["metric", "value"];
pub const REPORT_METRICS: [&str; 6] = ["ssim_mean", "psnr_mean", "frechet", "rank1", "vr_far_1pct", "vr_far_0p1pct"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub ssim_mean: f64,
    pub psnr_mean: f64,
    pub frechet: f64,
    pub rank1: f64,
    pub vr_far_1pct: f64,
    pub vr_far_0p1pct: f64,
}

impl EvalReport {
    pub fn values(&self) -> [f64; 6] {
        [
            self.ssim_mean,
            self.psnr_mean,
            self.frechet,
            self.rank1,
            self.vr_far_1pct,
            self.vr_far_0p1pct,
        ]
    }
}

/// Compares generated images with their ground truth (`[N, C, H, W]`, values
/// in `[0, 1]`). Rank-1 and VR use the first reference image of each
/// identity as the gallery and every generated image as a query.
pub fn evaluate(f: &IdentityEmbedder, generated: &Tensor<f32>, reference: &Tensor<f32>, ids: &[usize]) -> Result<EvalReport> {
    if generated.shape() != reference.shape() || generated.shape().first() != Some(&ids.len()) {
        return dim_err(format!(
            "evaluate: {:?} generated, {:?} reference, {} ids",
            generated.shape(),
            reference.shape(),
            ids.len()
        ));
    }
    let n = ids.len();
    let (mut s, mut p) = (0.0, 0.0);
    for i in 0..n {
        let a = generated.index0(i)?;
        let b = reference.index0(i)?;
        s += ssim(&a, &b, 1.0)?;
        p += psnr(&a, &b, 1.0)?;
    }
    let (gen_units, gen_feats) = f.embed(generated)?;
    let (_, ref_feats) = f.embed(reference)?;
    let mut gallery_items = Vec::new();
    let mut gallery_ids = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        if !gallery_ids.contains(&id) {
            gallery_ids.push(id);
            gallery_items.push(i);
        }
    }
    let (gallery, _) = f.embed(&select_batch(reference, &gallery_items)?)?;
    let scores = ScoreMatrix::between(&gen_units, ids, &gallery, &gallery_ids);
    let vr = |far| {
        if scores.impostor.is_empty() {
            Ok(f64::NAN)
        } else {
            vr_at_far(&scores, far)
        }
    };
    Ok(EvalReport {
        ssim_mean: s / n as f64,
        psnr_mean: p / n as f64,
        frechet: frechet_distance(&gen_feats, &ref_feats)?,
        rank1: rank1(&gen_units, ids, &gallery, &gallery_ids)?,
        vr_far_1pct: vr(0.01)?,
        vr_far_0p1pct: vr(0.001)?,
    })
}

pub fn write_report_csv<W: Write>(w: W, r: &EvalReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(REPORT_HEADER).map_err(csv_err)?;
    for (name, v) in REPORT_METRICS.iter().zip(r.values()) {
        out.write_record([name.to_string(), v.to_string()]).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_report_csv<R: Read>(r: R) -> Result<EvalReport> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != REPORT_HEADER {
        return Err(Error::Format(format!("report header {header:?}, expected {REPORT_HEADER:?}")));
    }
    let mut vals = [None; 6];
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let slot = REPORT_METRICS
            .iter()
            .position(|m| *m == &rec[0])
            .ok_or_else(|| Error::Format(format!("unknown metric {:?}", &rec[0])))?;
        let v: f64 = rec[1]
            .parse()
            .map_err(|_| Error::Format(format!("bad value for {}: {:?}", &rec[0], &rec[1])))?;
        vals[slot] = Some(v);
    }
    let get = |i: usize| vals[i].ok_or_else(|| Error::Format(format!("report lacks {}", REPORT_METRICS[i])));
    Ok(EvalReport {
        ssim_mean: get(0)?,
        psnr_mean: get(1)?,
        frechet: get(2)?,
        rank1: get(3)?,
        vr_far_1pct: get(4)?,
        vr_far_0p1pct: get(5)?,
    })
}
