//! File formats: raw `f64` tensors with a text sidecar, 8-bit PGM/PPM images,
//! flat key-value config text, and fixed-precision float formatting.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 17 significant digits in scientific notation; round-trips every `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes little-endian row-major data to `path` and a header to `path.hdr`.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)?;
    let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    let header = format!(
        "dtype f64le\nshape {}\ncount {}\n",
        shape.join(" "),
        t.len()
    );
    write_bytes(&sidecar(path), header.as_bytes())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let hdr_path = sidecar(path);
    let header = read_text(&hdr_path)?;
    let ctx = hdr_path.display().to_string();
    let mut shape: Option<Vec<usize>> = None;
    let mut count: Option<usize> = None;
    for line in header.lines() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("dtype") => {
                if parts.next() != Some("f64le") {
                    return Err(Error::parse(&ctx, "only dtype f64le is supported"));
                }
            }
            Some("shape") => {
                let dims = parts
                    .map(|p| p.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::parse(&ctx, format!("bad shape: {e}")))?;
                shape = Some(dims);
            }
            Some("count") => {
                let c = parts
                    .next()
                    .and_then(|p| p.parse().ok())
                    .ok_or_else(|| Error::parse(&ctx, "bad count"))?;
                count = Some(c);
            }
            _ => {}
        }
    }
    let shape = shape.ok_or_else(|| Error::parse(&ctx, "missing shape"))?;
    let count = count.ok_or_else(|| Error::parse(&ctx, "missing count"))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != count * 8 {
        return Err(Error::parse(
            path.display().to_string(),
            format!("expected {} bytes, found {}", count * 8, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(&shape, data)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[H, W]`, `[1, H, W]` (PGM) or `[3, H, W]` (PPM) image with values
/// in `[0, 1]`; values outside are clipped.
pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    let (c, h, w) = match img.shape() {
        [h, w] => (1, *h, *w),
        [c @ (1 | 3), h, w] => (*c, *h, *w),
        other => {
            return Err(Error::invalid(format!(
                "images must be [H, W], [1, H, W] or [3, H, W], got {other:?}"
            )))
        }
    };
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut bytes = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..c {
            bytes.push(to_byte(img.data()[ch * plane + p]));
        }
    }
    write_bytes(path, &bytes)
}

/// Min-max normalizes `map` to `[0, 1]` and writes it as PGM; returns the
/// normalization constants `(min, max)`.
pub fn write_normalized(path: &Path, map: &Tensor) -> Result<(f64, f64)> {
    let (lo, hi) = (map.min(), map.max());
    let span = hi - lo;
    let scaled = if span > 0.0 {
        map.map(|v| (v - lo) / span)
    } else {
        map.map(|_| 0.0)
    };
    write_image(path, &scaled)?;
    Ok((lo, hi))
}

/// Reads a binary PGM (P5) or PPM (P6) with maxval 255 as `[C, H, W]` in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(&ctx, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let c = match tokens[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::parse(&ctx, format!("unsupported magic `{other}`"))),
    };
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| Error::parse(&ctx, format!("bad header field `{s}`: {e}")))
    };
    let (w, h, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval != 255 {
        return Err(Error::parse(&ctx, "only maxval 255 is supported"));
    }
    let plane = w * h;
    let body = bytes.get(pos..pos + plane * c).ok_or_else(|| {
        Error::parse(&ctx, format!("expected {} pixel bytes", plane * c))
    })?;
    let mut data = vec![0.0; plane * c];
    for p in 0..plane {
        for ch in 0..c {
            data[ch * plane + p] = body[p * c + ch] as f64 / 255.0;
        }
    }
    Tensor::new(&[c, h, w], data)
}

/// Reads a PGM mask as `[H, W]` with entries `1` where the byte is ≥ 128.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let img = read_image(path)?;
    if img.shape()[0] != 1 {
        return Err(Error::invalid(format!(
            "{}: masks must be single-channel",
            path.display()
        )));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    Tensor::new(
        &[h, w],
        img.data()
            .iter()
            .map(|&v| if v * 255.0 >= 127.5 { 1.0 } else { 0.0 })
            .collect(),
    )
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, context: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::parse(
                format!("{context} line {}", i + 1),
                format!("expected `key = value`, got `{line}`"),
            )
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::parse(format!("{context} line {}", i + 1), "empty key"));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}
