//! PNG figures with numeric CSV sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::{EvalError, Result};
use crate::labels::{self, CorrelationMatrix};
use crate::matrix::Matrix;

const CELL: u32 = 16;
const SCATTER_SIZE: u32 = 512;
const MARGIN: f64 = 24.0;

/// Paths written for one figure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Figure {
    pub image: PathBuf,
    pub sidecar: PathBuf,
}

fn io(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io { path: path.to_owned(), message: e.to_string() }
}

/// Blue (-1) through white (0) to red (+1).
pub fn diverging_color(v: f64) -> Rgb<u8> {
    let v = v.clamp(-1.0, 1.0);
    let c = |x: f64| (255.0 * x).round() as u8;
    if v >= 0.0 {
        Rgb([255, c(1.0 - v), c(1.0 - v)])
    } else {
        Rgb([c(1.0 + v), c(1.0 + v), 255])
    }
}

/// Writes the correlation heatmap to `path` (PNG) and the matrix to
/// `path` with a `.csv` extension.
pub fn emit_heatmap(rho: &CorrelationMatrix, path: impl AsRef<Path>) -> Result<Figure> {
    let path = path.as_ref();
    let n = rho.len() as u32;
    let mut img = RgbImage::new(n * CELL, n * CELL);
    for (x, y, px) in img.enumerate_pixels_mut() {
        *px = diverging_color(rho.get((y / CELL) as usize, (x / CELL) as usize));
    }
    img.save(path).map_err(|e| io(path, e))?;
    let sidecar = path.with_extension("csv");
    rho.save(&sidecar)?;
    Ok(Figure { image: path.to_owned(), sidecar })
}

fn palette(i: usize) -> Rgb<u8> {
    const COLORS: [[u8; 3]; 10] = [
        [31, 119, 180],
        [255, 127, 14],
        [44, 160, 44],
        [214, 39, 40],
        [148, 103, 189],
        [140, 86, 75],
        [227, 119, 194],
        [127, 127, 127],
        [188, 189, 34],
        [23, 190, 207],
    ];
    let base = COLORS[i % COLORS.len()];
    // darken on wrap-around so 28 classes stay distinguishable-ish
    let shade = 1.0 - 0.3 * ((i / COLORS.len()) % 3) as f64;
    Rgb(base.map(|c| (c as f64 * shade) as u8))
}

/// Scatter plot of 2-D points coloured by label index. The sidecar has
/// columns `x,y,label`.
pub fn emit_scatter(points: &[[f64; 2]], labels: &[usize], names: &[String], path: impl AsRef<Path>) -> Result<Figure> {
    let path = path.as_ref();
    if points.len() != labels.len() {
        return Err(EvalError::LengthMismatch(labels.len(), points.len()));
    }
    let mut img = RgbImage::from_pixel(SCATTER_SIZE, SCATTER_SIZE, Rgb([255, 255, 255]));
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let span = |d: usize| (hi[d] - lo[d]).max(1e-12);
    let usable = SCATTER_SIZE as f64 - 2.0 * MARGIN;
    for (p, &l) in points.iter().zip(labels) {
        let px = MARGIN + (p[0] - lo[0]) / span(0) * usable;
        let py = MARGIN + (hi[1] - p[1]) / span(1) * usable;
        let color = palette(l);
        for dx in -3i64..=3 {
            for dy in -3i64..=3 {
                let (x, y) = (px as i64 + dx, py as i64 + dy);
                if (0..SCATTER_SIZE as i64).contains(&x) && (0..SCATTER_SIZE as i64).contains(&y) {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
    img.save(path).map_err(|e| io(path, e))?;

    let sidecar = path.with_extension("csv");
    let mut out = String::from("x,y,label\n");
    for (p, &l) in points.iter().zip(labels) {
        let name = names.get(l).ok_or(EvalError::LabelOutOfRange(l))?;
        out.push_str(&format!("{:?},{:?},{name}\n", p[0], p[1]));
    }
    fs::write(&sidecar, out).map_err(|e| io(&sidecar, e))?;
    Ok(Figure { image: path.to_owned(), sidecar })
}

/// Reads a heatmap sidecar back as a plain matrix.
pub fn read_heatmap_sidecar(path: impl AsRef<Path>) -> Result<(Vec<String>, Matrix)> {
    Ok(labels::read_table(path)?)
}
