//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export is a thin wrapper over a plain function so the same code
//! runs in native tests.

use wasm_bindgen::prelude::*;

use t2v::diffusion::{make_schedule, q_sample};
use t2v::rng;
use t2v::ssm::{bimamba_mix, ssm_scan, SsmParams};
use t2v::synth::{generate_pair, SyntheticSpec, PALETTE};
use t2v::tensor::Tensor;

pub const FACE_SIZE: usize = 64;

fn js(e: t2v::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `ᾱ_t` for `t = 1..=steps`.
pub fn alpha_bar_curve(steps: usize, beta_start: f64, beta_end: f64) -> t2v::Result<Vec<f64>> {
    Ok(make_schedule(steps, beta_start, beta_end)?.alpha_bar)
}

/// RGBA bytes of `[3, H, W]` (or `[1, H, W]`) values in `[0, 1]`.
pub fn to_rgba(img: &Tensor<f32>) -> Vec<u8> {
    let s = img.shape();
    let (c, plane) = (s[0], s[1] * s[2]);
    let d = img.data();
    let byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = Vec::with_capacity(plane * 4);
    for i in 0..plane {
        let px = |ch: usize| byte(d[ch.min(c - 1) * plane + i]);
        out.extend([px(0), px(1), px(2), 255]);
    }
    out
}

/// Visible image of `identity` diffused to step `t` in pixel space
/// (centred to `[-1, 1]` first, mapped back for display).
pub fn noised_face(seed: u64, identity: usize, t: usize, steps: usize, beta_start: f64, beta_end: f64) -> t2v::Result<Vec<u8>> {
    let s = make_schedule(steps, beta_start, beta_end)?;
    let spec = SyntheticSpec {
        identity_count: identity + 1,
        image_size: FACE_SIZE,
        seed,
        ..Default::default()
    };
    let pair = generate_pair(&spec, identity, 0)?;
    let x = pair.visible.map(|v| 2.0 * v - 1.0);
    let noise = Tensor::randn(x.shape().to_vec(), 1.0, &mut rng::keyed(seed, identity as u64, t as u64, 0x6e));
    let z = if t == 0 { x } else { q_sample(&s, &x, t, &noise)? };
    Ok(to_rgba(&z.map(|v| (v + 1.0) / 2.0)))
}

/// Scalar-channel scan traces for decays `a` (one state per entry, `B = C = 1`,
/// `D = 0`): forward, backward and their sum as the bidirectional block sees it.
pub fn scan_traces(decays: &[f64], input: &[f64]) -> t2v::Result<[Vec<f64>; 3]> {
    let n = decays.len();
    let p = SsmParams::literal(
        Tensor::new(vec![n], decays.to_vec())?,
        Tensor::full(vec![n, 1], 1.0),
        Tensor::full(vec![1, n], 1.0),
        Tensor::zeros(vec![1]),
    )?;
    let len = input.len();
    let x = Tensor::new(vec![len, 1], input.to_vec())?;
    let fwd = ssm_scan(&p, &x, &Tensor::zeros(vec![n]))?.data().to_vec();
    let rev: Vec<f64> = input.iter().rev().copied().collect();
    let mut bwd = ssm_scan(&p, &Tensor::new(vec![len, 1], rev)?, &Tensor::zeros(vec![n]))?.data().to_vec();
    bwd.reverse();
    let mix = bimamba_mix(&p, &p, &x, len.max(1))?.data().to_vec();
    Ok([fwd, bwd, mix])
}

/// Side-by-side visible and thermal renders, `2·size × size` RGBA.
pub fn face_pair(seed: u64, identity: usize, index: usize) -> t2v::Result<(Vec<u8>, String)> {
    let spec = SyntheticSpec {
        identity_count: identity + 1,
        image_size: FACE_SIZE,
        seed,
        ..Default::default()
    };
    let p = generate_pair(&spec, identity, index)?;
    let (vis, th) = (to_rgba(&p.visible), to_rgba(&p.thermal));
    let row = FACE_SIZE * 4;
    let mut out = Vec::with_capacity(vis.len() * 2);
    for y in 0..FACE_SIZE {
        out.extend_from_slice(&vis[y * row..(y + 1) * row]);
        out.extend_from_slice(&th[y * row..(y + 1) * row]);
    }
    let l = p.labels.expect("synthetic pairs carry labels");
    let [r, g, b] = PALETTE[l.skin_tone].map(|v| (v * 255.0).round() as u8);
    let desc = format!(
        "gender {} · age bin {} · tone {} (#{r:02x}{g:02x}{b:02x})",
        l.gender,
        l.age_bin,
        l.skin_tone
    );
    Ok((out, desc))
}

#[wasm_bindgen(js_name = alphaBar)]
pub fn alpha_bar_js(steps: usize, beta_start: f64, beta_end: f64) -> Result<Vec<f64>, JsError> {
    alpha_bar_curve(steps, beta_start, beta_end).map_err(js)
}

#[wasm_bindgen(js_name = noisedFace)]
pub fn noised_face_js(seed: u32, identity: usize, t: usize, steps: usize, beta_start: f64, beta_end: f64) -> Result<Vec<u8>, JsError> {
    noised_face(seed as u64, identity, t, steps, beta_start, beta_end).map_err(js)
}

/// Returns `[fwd..., bwd..., mix...]` concatenated.
#[wasm_bindgen(js_name = scanTraces)]
pub fn scan_traces_js(decays: Vec<f64>, input: Vec<f64>) -> Result<Vec<f64>, JsError> {
    let [a, b, c] = scan_traces(&decays, &input).map_err(js)?;
    Ok([a, b, c].concat())
}

#[wasm_bindgen(js_name = facePair)]
pub fn face_pair_js(seed: u32, identity: usize, index: usize) -> Result<Vec<u8>, JsError> {
    Ok(face_pair(seed as u64, identity, index).map_err(js)?.0)
}

#[wasm_bindgen(js_name = faceLabels)]
pub fn face_labels_js(seed: u32, identity: usize) -> Result<String, JsError> {
    Ok(face_pair(seed as u64, identity, 0).map_err(js)?.1)
}

#[wasm_bindgen(js_name = faceSize)]
pub fn face_size() -> usize {
    FACE_SIZE
}
