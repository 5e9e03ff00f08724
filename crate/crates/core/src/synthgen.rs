//! Deterministic procedural renderers for the factorized sprite datasets.
//!
//! Canvas geometry for a square canvas of side `N`:
//!
//! * sprites live inside a disk of radius `5N/32`; a normalized position `p`
//!   puts the sprite center at `R + p·(N − 2R)` pixels with `R = 3N/16`, so
//!   the sprite keeps a margin of `N/32` pixels from every edge and the
//!   travel along each axis is `N − 2R`;
//! * `bands` paints the top quarter of the rows with the band hue and moves a
//!   square of half-side `N/8` horizontally at vertical center `5N/8`, so the
//!   two regions never share a pixel;
//! * coverage is estimated on a `s × s` grid of subsamples per pixel and then
//!   box-averaged.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorspace::{FactorSpace, FactorSpec, FactorVector};
use crate::image::{Image, ImageSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub size: usize,
    pub channels: usize,
    #[serde(default = "default_supersample")]
    pub supersample: usize,
}

fn default_supersample() -> usize {
    4
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec {
            size: 64,
            channels: 1,
            supersample: 4,
        }
    }
}

impl RenderSpec {
    pub fn new(size: usize, channels: usize) -> Self {
        RenderSpec {
            size,
            channels,
            supersample: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::config(format!("canvas size {} too small", self.size)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.supersample == 0 {
            return Err(Error::config("supersample must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Circles,
    Simple,
    Sprites2d,
    Bands,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Circles => "circles",
            DatasetKind::Simple => "simple",
            DatasetKind::Sprites2d => "sprites2d",
            DatasetKind::Bands => "bands",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "circles" => Ok(DatasetKind::Circles),
            "simple" => Ok(DatasetKind::Simple),
            "sprites2d" => Ok(DatasetKind::Sprites2d),
            "bands" => Ok(DatasetKind::Bands),
            other => Err(Error::config(format!("unknown dataset {other:?}"))),
        }
    }

    pub fn native_channels(self) -> usize {
        match self {
            DatasetKind::Bands => 3,
            _ => 1,
        }
    }
}

/// Grid cardinalities of a dataset. Unused fields are ignored by the kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSizes {
    pub pos_x: usize,
    pub pos_y: usize,
    pub scale: usize,
    pub orientation: usize,
    pub hue: usize,
}

impl Default for GridSizes {
    fn default() -> Self {
        GridSizes {
            pos_x: 16,
            pos_y: 16,
            scale: 3,
            orientation: 4,
            hue: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetDef {
    pub kind: DatasetKind,
    pub space: FactorSpace,
}

impl DatasetDef {
    pub fn new(kind: DatasetKind, grid: GridSizes) -> Result<Self> {
        let factors = match kind {
            DatasetKind::Circles => vec![
                FactorSpec::ordinal("posX", grid.pos_x),
                FactorSpec::ordinal("posY", grid.pos_y),
            ],
            DatasetKind::Simple => vec![
                FactorSpec::categorical("shape", ["square", "triangle"]),
                FactorSpec::ordinal("posX", grid.pos_x),
                FactorSpec::ordinal("posY", grid.pos_y),
            ],
            DatasetKind::Sprites2d => vec![
                FactorSpec::categorical("shape", ["square", "ellipse", "triangle"]),
                FactorSpec::ordinal("scale", grid.scale),
                FactorSpec::ordinal("orientation", grid.orientation),
                FactorSpec::ordinal("posX", grid.pos_x),
                FactorSpec::ordinal("posY", grid.pos_y),
            ],
            DatasetKind::Bands => vec![
                FactorSpec::ordinal("band_hue", grid.hue),
                FactorSpec::ordinal("sprite_hue", grid.hue),
                FactorSpec::ordinal("posX", grid.pos_x),
            ],
        };
        Ok(DatasetDef {
            kind,
            space: FactorSpace::new(factors)?,
        })
    }

    pub fn circles(kx: usize, ky: usize) -> Result<Self> {
        Self::new(
            DatasetKind::Circles,
            GridSizes {
                pos_x: kx,
                pos_y: ky,
                ..Default::default()
            },
        )
    }

    pub fn simple(kx: usize, ky: usize) -> Result<Self> {
        Self::new(
            DatasetKind::Simple,
            GridSizes {
                pos_x: kx,
                pos_y: ky,
                ..Default::default()
            },
        )
    }

    pub fn sprites2d(scale: usize, orientation: usize, kx: usize, ky: usize) -> Result<Self> {
        Self::new(
            DatasetKind::Sprites2d,
            GridSizes {
                pos_x: kx,
                pos_y: ky,
                scale,
                orientation,
                ..Default::default()
            },
        )
    }

    pub fn bands(hue: usize, kx: usize) -> Result<Self> {
        Self::new(
            DatasetKind::Bands,
            GridSizes {
                pos_x: kx,
                hue,
                ..Default::default()
            },
        )
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Circle,
    Square,
    Ellipse,
    Triangle,
}

impl Shape {
    /// Membership test in sprite-local coordinates (x right, y down) for a
    /// sprite of bounding radius `r`.
    fn contains(self, x: f64, y: f64, r: f64) -> bool {
        match self {
            Shape::Circle => x * x + y * y <= r * r,
            Shape::Square => {
                let h = 0.7 * r;
                x.abs() <= h && y.abs() <= h
            }
            Shape::Ellipse => {
                let (a, b) = (r, 0.5 * r);
                (x / a) * (x / a) + (y / b) * (y / b) <= 1.0
            }
            // Equilateral, apex up, centroid at the origin, circumradius r.
            Shape::Triangle => y <= 0.5 * r && x.abs() * 3f64.sqrt() <= y + r,
        }
    }
}

/// Sprite placement in pixel units.
struct Sprite {
    shape: Shape,
    cx: f64,
    cy: f64,
    radius: f64,
    /// (cos, sin) of the sprite rotation.
    rotation: (f64, f64),
}

impl Sprite {
    fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (c, s) = self.rotation;
        // Rotate the sample back into the sprite frame.
        let (u, v) = if s == 0.0 && c == 1.0 {
            (dx, dy)
        } else {
            (c * dx + s * dy, -s * dx + c * dy)
        };
        self.shape.contains(u, v, self.radius)
    }

    fn coverage(&self, size: usize, ss: usize) -> Vec<f64> {
        let mut out = vec![0.0; size * size];
        let r = self.radius;
        let x0 = ((self.cx - r).floor().max(0.0)) as usize;
        let x1 = ((self.cx + r).ceil() as usize).min(size);
        let y0 = ((self.cy - r).floor().max(0.0)) as usize;
        let y1 = ((self.cy + r).ceil() as usize).min(size);
        let inv = 1.0 / ss as f64;
        let norm = 1.0 / (ss * ss) as f64;
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0usize;
                for j in 0..ss {
                    let py = y as f64 + (j as f64 + 0.5) * inv;
                    for i in 0..ss {
                        let px = x as f64 + (i as f64 + 0.5) * inv;
                        if self.contains(px, py) {
                            hits += 1;
                        }
                    }
                }
                out[y * size + x] = hits as f64 * norm;
            }
        }
        out
    }
}

/// Distance in pixels between an extreme sprite center and the canvas edge.
pub fn placement_radius(size: usize) -> f64 {
    3.0 * size as f64 / 16.0
}

/// Bounding radius in pixels of a full-scale sprite.
pub fn sprite_radius(size: usize) -> f64 {
    5.0 * size as f64 / 32.0
}

/// Horizontal/vertical distance between the extreme sprite centers.
pub fn travel(kind: DatasetKind, size: usize) -> f64 {
    match kind {
        DatasetKind::Bands => size as f64 - 2.0 * band_sprite_half(size),
        _ => size as f64 - 2.0 * placement_radius(size),
    }
}

fn band_sprite_half(size: usize) -> f64 {
    size as f64 / 8.0
}

/// Row index where the band strip ends (exclusive).
pub fn band_rows(size: usize) -> usize {
    size / 4
}

/// Maps a cyclic factor level to a fraction of a full turn, so that the first
/// and last level do not coincide.
fn cyclic_turn(index: usize, cardinality: usize) -> f64 {
    index as f64 / cardinality as f64
}

/// Fraction of the hue circle spanned by the Bands hue factors, red to blue.
pub const BAND_HUE_SPAN: f64 = 2.0 / 3.0;

/// HSV to RGB with saturation and value fixed at one.
pub fn hue_to_rgb(turn: f64) -> [f64; 3] {
    let h = turn.rem_euclid(1.0) * 6.0;
    let sector = h.floor() as usize % 6;
    let f = h - h.floor();
    let (q, t) = (1.0 - f, f);
    match sector {
        0 => [1.0, t, 0.0],
        1 => [q, 1.0, 0.0],
        2 => [0.0, 1.0, t],
        3 => [0.0, q, 1.0],
        4 => [t, 0.0, 1.0],
        _ => [1.0, 0.0, q],
    }
}

pub fn render(def: &DatasetDef, fv: &FactorVector, spec: &RenderSpec) -> Result<Image> {
    spec.validate()?;
    if !def.space.contains(fv) {
        return Err(Error::config(format!(
            "factor vector does not belong to the {} space",
            def.name()
        )));
    }
    let n = spec.size;
    let ss = spec.supersample;
    let nf = n as f64;
    let r = sprite_radius(n);
    let margin = placement_radius(n);
    let place = |v: f64| margin + v * (nf - 2.0 * margin);
    let mut img = Image::zeros(spec.channels, n, n);
    match def.kind {
        DatasetKind::Circles | DatasetKind::Simple | DatasetKind::Sprites2d => {
            let sprite = match def.kind {
                DatasetKind::Circles => Sprite {
                    shape: Shape::Circle,
                    cx: place(fv.values[0]),
                    cy: place(fv.values[1]),
                    radius: r,
                    rotation: (1.0, 0.0),
                },
                DatasetKind::Simple => Sprite {
                    shape: [Shape::Square, Shape::Triangle][fv.indices[0]],
                    cx: place(fv.values[1]),
                    cy: place(fv.values[2]),
                    radius: r,
                    rotation: (1.0, 0.0),
                },
                _ => {
                    let k_orient = def.space.factors()[2].cardinality();
                    let angle = 2.0 * PI * cyclic_turn(fv.indices[2], k_orient);
                    Sprite {
                        shape: [Shape::Square, Shape::Ellipse, Shape::Triangle][fv.indices[0]],
                        cx: place(fv.values[3]),
                        cy: place(fv.values[4]),
                        radius: r * (0.5 + 0.5 * fv.values[1]),
                        rotation: if fv.indices[2] == 0 {
                            (1.0, 0.0)
                        } else {
                            (angle.cos(), angle.sin())
                        },
                    }
                }
            };
            let cov = sprite.coverage(n, ss);
            for c in 0..spec.channels {
                img.data[c * n * n..(c + 1) * n * n].copy_from_slice(&cov);
            }
        }
        DatasetKind::Bands => {
            if spec.channels != 3 {
                return Err(Error::config("bands renders in color and needs 3 channels"));
            }
            let band_rgb = hue_to_rgb(BAND_HUE_SPAN * fv.values[0]);
            let sprite_rgb = hue_to_rgb(BAND_HUE_SPAN * fv.values[1]);
            let rows = band_rows(n);
            for (c, &value) in band_rgb.iter().enumerate() {
                img.data[c * n * n..c * n * n + rows * n].fill(value);
            }
            let half = band_sprite_half(n);
            let sprite = Sprite {
                shape: Shape::Square,
                cx: half + fv.values[2] * (nf - 2.0 * half),
                cy: 5.0 * nf / 8.0,
                // Square membership uses 0.7·radius as its half side.
                radius: half / 0.7,
                rotation: (1.0, 0.0),
            };
            let cov = sprite.coverage(n, ss);
            for (c, &value) in sprite_rgb.iter().enumerate() {
                let plane = &mut img.data[c * n * n..(c + 1) * n * n];
                for (p, &k) in plane.iter_mut().zip(&cov).skip(rows * n) {
                    *p = k * value;
                }
            }
        }
    }
    Ok(img)
}

/// Upper bound on the in-memory size of a fully rendered dataset.
pub const DEFAULT_MAX_BYTES: usize = 1 << 31;

/// Renders every combination of the space, ordered by flat index.
pub fn generate_full(def: &DatasetDef, spec: &RenderSpec) -> Result<ImageSet> {
    generate_full_capped(def, spec, DEFAULT_MAX_BYTES)
}

pub fn generate_full_capped(def: &DatasetDef, spec: &RenderSpec, max_bytes: usize) -> Result<ImageSet> {
    spec.validate()?;
    let per = spec.channels * spec.size * spec.size;
    let bytes = def
        .space
        .total()
        .checked_mul(per * std::mem::size_of::<f64>())
        .unwrap_or(usize::MAX);
    if bytes > max_bytes {
        return Err(Error::config(format!(
            "rendering {} images needs {bytes} bytes, above the cap of {max_bytes}",
            def.space.total()
        )));
    }
    let images = (0..def.space.total())
        .into_par_iter()
        .map(|i| render(def, &def.space.vector(i), spec))
        .collect::<Result<Vec<_>>>()?;
    ImageSet::from_images(images)
}
