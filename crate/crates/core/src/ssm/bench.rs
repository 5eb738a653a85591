use std::io::Write;
use std::time::Instant;

use super::{bimamba_mix, BiMamba, Mhsa, SsmOptions};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::rng;
use crate::tensor::{Tape, Tensor};

pub const BENCH_CSV_HEADER: &str = "block_kind,seq_len,param_count,peak_memory_bytes,wall_time_ns";

/// Query rows scored at once by the attention kernel.
const ATTN_ROWS: usize = 256;
/// Tokens per chunk in the blocked scan.
const SCAN_BLOCK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Mamba,
    Mhsa,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Mamba => "mamba",
            BlockKind::Mhsa => "mhsa",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchRecord {
    pub block_kind: BlockKind,
    pub seq_len: usize,
    pub param_count: usize,
    pub peak_memory_bytes: usize,
    pub wall_time_ns: u128,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub seq_lens: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub d_state: usize,
    /// Time the selective block (input-dependent `B`/`C`) through the tape,
    /// as the denoiser runs it, instead of the plain blocked scan.
    pub selective: bool,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seq_lens: vec![256, 512, 1024, 2048, 4096, 8192],
            d_model: 64,
            heads: 4,
            d_state: 16,
            selective: true,
            repeats: 5,
            warmup: 2,
            seed: 0,
        }
    }
}

fn median_ns(samples: &mut [u128]) -> u128 {
    samples.sort_unstable();
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2
    }
}

fn time<F: FnMut() -> Result<()>>(warmup: usize, repeats: usize, mut f: F) -> Result<u128> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        f()?;
        samples.push(t0.elapsed().as_nanos());
    }
    Ok(median_ns(&mut samples))
}

/// Bytes the blocked bidirectional scan allocates beyond its parameters:
/// input copy for the reversed pass, two outputs, the summed output, chunk
/// drive and state buffers.
fn mamba_transient(len: usize, d: usize, n: usize, elem: usize) -> usize {
    let chunk = SCAN_BLOCK.min(len);
    elem * (4 * len * d + 2 * (2 * chunk * n + n))
}

/// Bytes the no-grad tape holds for the selective block: per direction the
/// drive, two gates (three nodes each), gated drive, states, gated states,
/// readout, skip and sum; plus the reversed input, reversed output and the
/// final sum.
fn selective_transient(len: usize, d: usize, n: usize, elem: usize) -> usize {
    elem * (2 * (10 * len * n + 3 * len * d) + 3 * len * d)
}

/// Bytes the chunked attention allocates: q, k, v, head concat, output and
/// per-head projection staging, plus the score and chunk-output buffers.
fn mhsa_transient(len: usize, d: usize, heads: usize, elem: usize) -> usize {
    let rows = ATTN_ROWS.min(len);
    elem * (6 * len * d + 3 * len * d + rows * len + rows * d / heads)
}

/// Times both block kinds on `[L, d_model]` f32 inputs for every `L`.
pub fn bench_blocks(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if cfg.repeats < 5 {
        return Err(Error::Contract("at least 5 timed repeats are required".into()));
    }
    if cfg.seq_lens.iter().any(|&l| l == 0) {
        return Err(Error::Contract("sequence lengths must be positive".into()));
    }
    let mut r = rng::stream(cfg.seed, "bench");
    let opts = SsmOptions {
        selective: cfg.selective,
        ..SsmOptions::new(cfg.d_model, cfg.d_state)
    };
    let block = BiMamba::<f32>::new(opts, &mut r);
    let mhsa = Mhsa::<f32>::new(cfg.d_model, cfg.heads, &mut r)?;
    let mamba_params = block.param_count();
    let mhsa_params = mhsa.param_count();
    let elem = std::mem::size_of::<f32>();

    let mut out = Vec::new();
    for &len in &cfg.seq_lens {
        let x = Tensor::<f32>::randn(vec![len, cfg.d_model], 1.0, &mut r);
        let t = if cfg.selective {
            time(cfg.warmup, cfg.repeats, || {
                let mut tape = Tape::no_grad();
                let xv = tape.constant(&x);
                std::hint::black_box(block.mix(&mut tape, xv)?);
                Ok(())
            })?
        } else {
            time(cfg.warmup, cfg.repeats, || {
                std::hint::black_box(bimamba_mix(&block.fwd, &block.bwd, &x, SCAN_BLOCK)?);
                Ok(())
            })?
        };
        let transient = if cfg.selective {
            selective_transient(len, cfg.d_model, cfg.d_state, elem)
        } else {
            mamba_transient(len, cfg.d_model, cfg.d_state, elem)
        };
        out.push(BenchRecord {
            block_kind: BlockKind::Mamba,
            seq_len: len,
            param_count: mamba_params,
            peak_memory_bytes: mamba_params * elem + transient,
            wall_time_ns: t,
        });
        let t = time(cfg.warmup, cfg.repeats, || {
            std::hint::black_box(mhsa.infer(&x, ATTN_ROWS)?);
            Ok(())
        })?;
        out.push(BenchRecord {
            block_kind: BlockKind::Mhsa,
            seq_len: len,
            param_count: mhsa_params,
            peak_memory_bytes: mhsa_params * elem + mhsa_transient(len, cfg.d_model, cfg.heads, elem),
            wall_time_ns: t,
        });
        log::info!("bench L={len} done");
    }
    Ok(out)
}

pub fn write_bench_csv<W: Write>(w: &mut W, records: &[BenchRecord]) -> Result<()> {
    writeln!(w, "{BENCH_CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.block_kind.as_str(),
            r.seq_len,
            r.param_count,
            r.peak_memory_bytes,
            r.wall_time_ns
        )?;
    }
    Ok(())
}

pub fn read_bench_csv<R: std::io::Read>(r: R) -> Result<Vec<BenchRecord>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header: Vec<String> = rd.headers().map_err(bad)?.iter().map(str::to_owned).collect();
    if header.join(",") != BENCH_CSV_HEADER {
        return Err(Error::Format(format!("bench header is {:?}", header.join(","))));
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(bad)?;
        let num = |i: usize| -> Result<u128> {
            row[i].parse().map_err(|_| Error::Format(format!("bad number {:?}", &row[i])))
        };
        let block_kind = match &row[0] {
            "mamba" => BlockKind::Mamba,
            "mhsa" => BlockKind::Mhsa,
            other => return Err(Error::Format(format!("unknown block kind {other:?}"))),
        };
        out.push(BenchRecord {
            block_kind,
            seq_len: num(1)? as usize,
            param_count: num(2)? as usize,
            peak_memory_bytes: num(3)? as usize,
            wall_time_ns: num(4)?,
        });
    }
    Ok(out)
}

fn bad(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Least-squares slope of `ln(time)` against `ln(L)` for one block kind.
pub fn log_log_slope(records: &[BenchRecord], kind: BlockKind) -> Option<f64> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.block_kind == kind)
        .map(|r| ((r.seq_len as f64).ln(), (r.wall_time_ns.max(1) as f64).ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
