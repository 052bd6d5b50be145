//! Procedural shapes dataset: one flat-coloured shape over a gradient
//! background per image, with its binary mask.

use crate::error::{Error, Result};
use crate::io::{ensure_dir, read_jsonl, read_rgb_png, write_gray_png, write_jsonl, write_rgb_png};
use crate::rng::substream;
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub kind: ShapeKind,
    /// Centre in unit image coordinates.
    pub centre: [f64; 2],
    /// Circumradius in unit image coordinates.
    pub size: f64,
    pub rotation: f64,
    pub colour: [f64; 3],
    pub base: [f64; 3],
    pub grad: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProceduralRecord {
    pub id: String,
    pub params: ShapeParams,
    pub path: String,
    pub mask_path: String,
}

pub fn sample_params(seed: u64, index: u64) -> ShapeParams {
    let mut rng = substream(seed, "procedural", index);
    let kind = match rng.random_range(0..3) {
        0 => ShapeKind::Disc,
        1 => ShapeKind::Square,
        _ => ShapeKind::Triangle,
    };
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    ShapeParams {
        kind,
        centre: [u(0.35, 0.65), u(0.35, 0.65)],
        size: u(0.14, 0.26),
        rotation: u(0.0, std::f64::consts::TAU),
        colour: [u(-0.9, 0.9), u(-0.9, 0.9), u(-0.9, 0.9)],
        base: [u(-0.55, 0.55), u(-0.55, 0.55), u(-0.55, 0.55)],
        grad: [u(-0.35, 0.35), u(-0.35, 0.35)],
    }
}

fn inside(p: &ShapeParams, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - p.centre[0], y - p.centre[1]);
    let (c, s) = (p.rotation.cos(), p.rotation.sin());
    let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
    match p.kind {
        ShapeKind::Disc => u.hypot(v) < p.size,
        ShapeKind::Square => u.abs().max(v.abs()) < p.size / std::f64::consts::SQRT_2,
        ShapeKind::Triangle => {
            // Equilateral triangle with circumradius `size`: three half-planes
            // at distance size/2 from the centre.
            (0..3).all(|k| {
                let a = std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::TAU / 3.0;
                u * a.cos() + v * a.sin() > -p.size / 2.0
            })
        }
    }
}

/// Image in `[-1, 1]` and binary mask at `m x m`.
pub fn render(p: &ShapeParams, m: usize) -> (Array3<f64>, Array2<f64>) {
    let at = |i: usize| (i as f64 + 0.5) / m as f64;
    let mask = Array2::from_shape_fn((m, m), |(i, j)| if inside(p, at(j), at(i)) { 1.0 } else { 0.0 });
    let img = Array3::from_shape_fn((3, m, m), |(c, i, j)| {
        if mask[[i, j]] > 0.5 {
            p.colour[c]
        } else {
            p.base[c] + p.grad[0] * (at(j) - 0.5) + p.grad[1] * (at(i) - 0.5)
        }
    });
    (img, mask)
}

/// Writes `images/`, `masks/` and `manifest.jsonl` under `dir`.
pub fn write_dataset(dir: &Path, n: usize, m: usize, seed: u64) -> Result<Vec<ProceduralRecord>> {
    ensure_dir(&dir.join("images"))?;
    ensure_dir(&dir.join("masks"))?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let params = sample_params(seed, i as u64);
        let (img, mask) = render(&params, m);
        let id = format!("{i:06}");
        let path = format!("images/{id}.png");
        let mask_path = format!("masks/{id}.png");
        write_rgb_png(&dir.join(&path), &img)?;
        write_gray_png(&dir.join(&mask_path), &mask)?;
        records.push(ProceduralRecord {
            id,
            params,
            path,
            mask_path,
        });
    }
    write_jsonl(&dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ProceduralRecord>> {
    read_jsonl(&dir.join("manifest.jsonl"))
}

/// All images listed in the manifest, checked against resolution `m`.
pub fn load_images(dir: &Path, m: usize) -> Result<Vec<Array3<f64>>> {
    let records = read_manifest(dir)?;
    records
        .iter()
        .map(|r| {
            let path = dir.join(&r.path);
            let img: Array3<f64> = read_rgb_png(&path)?;
            if img.dim() != (3, m, m) {
                return Err(Error::format(&path, format!("expected {m}x{m} image, found {:?}", img.dim())));
            }
            Ok(img)
        })
        .collect()
}
