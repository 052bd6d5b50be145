//! PNG images, JSON helpers and the binary checkpoint container.
//!
//! Container layout (little endian):
//!
//! ```text
//! b"GSEGCKPT" | u32 version | u64 header length | header JSON | f64 payload
//! ```
//!
//! The header names every tensor with its shape and element offset into the
//! payload. Weights are always stored as `f64` so single- and double-precision
//! runs read the same files.

use crate::autograd::{lit, AdamState, Scalar, Tensor};
use crate::error::{Error, Result};
use ndarray::{Array2, Array3, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"GSEGCKPT";
pub const CONTAINER_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_jsonl<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<D>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Versioned checkpoint: a kind tag, free-form metadata and named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors
            .push((name.into(), t.mapv(|x| x.to_f64().unwrap())));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let hjson = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + hjson.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        for (_, t) in &self.tensors {
            for x in t.as_standard_layout().iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |d: &str| Error::format(path, d.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint container"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CONTAINER_VERSION {
            return Err(bad(&format!("unsupported container version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        let payload = &bytes[20 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 8;
            let raw = payload
                .get(start..start + n * 8)
                .ok_or_else(|| bad(&format!("truncated tensor {}", e.name)))?;
            let vals: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::from_shape_vec(IxDyn(&e.shape), vals).map_err(|x| bad(&x.to_string()))?;
            tensors.push((e.name, t));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        if let Some(dir) = path.parent() {
            ensure_dir(dir)?;
        }
        let bytes = self.to_bytes();
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[3, H, W]` image with values in `[-1, 1]` as 8-bit RGB.
pub fn write_rgb_png<T: Scalar>(path: &Path, img: &Array3<T>) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::Shape(format!("rgb png needs 3 channels, got {c}")));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = img[[ch, y, x]].to_f64().unwrap();
                data.push(to_u8((v + 1.0) * 0.5));
            }
        }
    }
    write_png(path, w, h, png::ColorType::Rgb, &data)
}

/// Writes a `[H, W]` grid with values in `[0, 1]` as 8-bit grayscale.
pub fn write_gray_png<T: Scalar>(path: &Path, img: &Array2<T>) -> Result<()> {
    let (h, w) = img.dim();
    let data: Vec<u8> = img.iter().map(|v| to_u8(v.to_f64().unwrap())).collect();
    write_png(path, w, h, png::ColorType::Grayscale, &data)
}

/// Writes raw interleaved RGB bytes.
pub fn write_rgb8_png(path: &Path, w: usize, h: usize, data: &[u8]) -> Result<()> {
    write_png(path, w, h, png::ColorType::Rgb, data)
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::format(path, e.to_string()))
}

struct Decoded {
    w: usize,
    h: usize,
    channels: usize,
    data: Vec<u8>,
}

fn read_png(path: &Path) -> Result<Decoded> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(f));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::format(path, "unexpanded palette")),
    };
    buf.truncate(info.buffer_size());
    Ok(Decoded {
        w: info.width as usize,
        h: info.height as usize,
        channels,
        data: buf,
    })
}

/// Reads any 8-bit PNG as a `[3, H, W]` image in `[-1, 1]`.
pub fn read_rgb_png<T: Scalar>(path: &Path) -> Result<Array3<T>> {
    let d = read_png(path)?;
    Ok(Array3::from_shape_fn((3, d.h, d.w), |(c, y, x)| {
        let px = (y * d.w + x) * d.channels;
        let v = match d.channels {
            1 | 2 => d.data[px],
            _ => d.data[px + c],
        };
        lit(v as f64 / 255.0 * 2.0 - 1.0)
    }))
}

/// Reads a PNG as a `[H, W]` grid in `[0, 1]` (first channel).
pub fn read_gray_png<T: Scalar>(path: &Path) -> Result<Array2<T>> {
    let d = read_png(path)?;
    Ok(Array2::from_shape_fn((d.h, d.w), |(y, x)| {
        lit(d.data[(y * d.w + x) * d.channels] as f64 / 255.0)
    }))
}

/// Stores optimizer moments as flat tensors under `prefix`.
pub fn push_adam(c: &mut Container, prefix: &str, state: &AdamState) {
    c.meta[format!("{prefix}.step")] = serde_json::json!(state.step);
    for (i, (m, v)) in state.m.iter().zip(&state.v).enumerate() {
        c.push(format!("{prefix}.m.{i}"), &Tensor::from_shape_vec(IxDyn(&[m.len()]), m.clone()).unwrap());
        c.push(format!("{prefix}.v.{i}"), &Tensor::from_shape_vec(IxDyn(&[v.len()]), v.clone()).unwrap());
    }
}

pub fn read_adam(c: &Container, prefix: &str, count: usize, path: &Path) -> Result<AdamState> {
    let step = c.meta[format!("{prefix}.step")]
        .as_u64()
        .ok_or_else(|| Error::format(path, format!("missing {prefix}.step")))?;
    let get = |kind: &str, i: usize| -> Result<Vec<f64>> {
        let name = format!("{prefix}.{kind}.{i}");
        c.tensor(&name)
            .map(|t| t.iter().copied().collect())
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))
    };
    let mut m = Vec::with_capacity(count);
    let mut v = Vec::with_capacity(count);
    for i in 0..count {
        m.push(get("m", i)?);
        v.push(get("v", i)?);
    }
    Ok(AdamState { step, m, v })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_and_rejects_garbage() {
        let mut c = Container::new("test", serde_json::json!({"a": 1}));
        c.push::<f64>("w", &Tensor::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, -2.0, 0.5, 1e-9]).unwrap());
        c.push::<f32>("b", &Tensor::from_elem(IxDyn(&[3]), 0.25f32));
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert!(Container::from_bytes(b"nonsense-bytes-here-xx", Path::new("mem")).is_err());
    }

    #[test]
    fn png_round_trip_is_8bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_shape_fn((3, 4, 5), |(c, y, x)| ((c * 20 + y * 5 + x) as f64 / 59.0) * 2.0 - 1.0);
        let p = dir.path().join("a.png");
        write_rgb_png(&p, &img).unwrap();
        let back: Array3<f64> = read_rgb_png(&p).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
        let mask = Array2::from_shape_fn((4, 4), |(y, x)| if (y + x) % 2 == 0 { 1.0 } else { 0.0 });
        let q = dir.path().join("m.png");
        write_gray_png(&q, &mask).unwrap();
        let mb: Array2<f64> = read_gray_png(&q).unwrap();
        assert_eq!(mb, mask);
    }
}
