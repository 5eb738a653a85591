//! Binary netpbm: P6 (RGB) and P5 (grey), maxval 255.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes `[C, H, W]` values in `[0, 1]` (C = 3 → P6, C = 1 → P5).
pub fn write_pnm<W: Write>(mut w: W, img: &Tensor<f32>) -> Result<()> {
    let [c, h, wd] = img.shape()[..] else {
        return Err(Error::Dimension(format!("image must be [C, H, W], got {:?}", img.shape())));
    };
    let magic = match c {
        3 => "P6",
        1 => "P5",
        _ => return Err(Error::Dimension(format!("{c} channels cannot be written as netpbm"))),
    };
    write!(w, "{magic}\n{wd} {h}\n255\n")?;
    let plane = h * wd;
    let d = img.data();
    let mut bytes = Vec::with_capacity(c * plane);
    for p in 0..plane {
        for ch in 0..c {
            bytes.push(to_byte(d[ch * plane + p]));
        }
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated netpbm header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Reads P5/P6 into `[C, H, W]` with values `byte / 255`.
pub fn read_pnm<R: Read>(mut r: R) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let c = match token(&bytes, &mut pos)?.as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(Error::Format(format!("unsupported netpbm magic {m:?}"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        token(&bytes, &mut pos)?
            .parse()
            .map_err(|_| Error::Format(format!("bad netpbm {what}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval} unsupported (expected 255)")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format("zero-sized image".into()));
    }
    pos += 1;
    let plane = w * h;
    let body = bytes.get(pos..pos + c * plane).ok_or_else(|| Error::Corrupt {
        offset: bytes.len() as u64,
        msg: format!("pixel data ends early, need {} bytes", c * plane),
    })?;
    let mut data = vec![0f32; c * plane];
    for p in 0..plane {
        for ch in 0..c {
            data[ch * plane + p] = body[p * c + ch] as f32 / 255.0;
        }
    }
    Tensor::new(vec![c, h, w], data)
}
