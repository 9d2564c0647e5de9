//! Target geometry patterns.
//!
//! Pre-defined patterns are 2-D point clouds sampled from a glyph raster;
//! customized patterns are 3-D clouds read from XYZ text files. Both live in
//! the same canonical box as the encoder output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::font;
use crate::geometry::{PointCloud2D, PointCloud3D};
use crate::scalar::Scalar;

/// Side length of the glyph raster in pixels.
pub const RASTER_SIZE: usize = 64;
pub const DEFAULT_SAMPLE_COUNT: usize = 512;
/// Smallest cloud accepted as a customized pattern.
pub const MIN_CUSTOM_POINTS: usize = 8;

/// A supported character rendered into a square binary raster.
///
/// Font cells are square, `RASTER_SIZE / 7` pixels on a side, and the
/// 5-column glyph is centred horizontally.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphRaster {
    character: char,
    bitmap: Vec<f64>,
}

impl GlyphRaster {
    pub fn new(character: char) -> Result<Self> {
        let cells = font::rows(character).ok_or(Error::UnsupportedChar(character))?;
        let mut bitmap = vec![0.0; RASTER_SIZE * RASTER_SIZE];
        for r in 0..RASTER_SIZE {
            for c in 0..RASTER_SIZE {
                if let Some((row, col)) = Self::cell_at(r as f64 + 0.5, c as f64 + 0.5) {
                    if cells[row].as_bytes()[col] == b'#' {
                        bitmap[r * RASTER_SIZE + c] = 1.0;
                    }
                }
            }
        }
        Ok(Self {
            character: character.to_ascii_uppercase(),
            bitmap,
        })
    }

    fn cell_size() -> f64 {
        RASTER_SIZE as f64 / font::ROWS as f64
    }

    fn left_offset() -> f64 {
        (RASTER_SIZE as f64 - font::COLS as f64 * Self::cell_size()) / 2.0
    }

    // font cell covering a raster position (pixel units, y down)
    fn cell_at(py: f64, px: f64) -> Option<(usize, usize)> {
        let s = Self::cell_size();
        let row = (py / s).floor();
        let col = ((px - Self::left_offset()) / s).floor();
        (row >= 0.0 && row < font::ROWS as f64 && col >= 0.0 && col < font::COLS as f64)
            .then_some((row as usize, col as usize))
    }

    pub fn character(&self) -> char {
        self.character
    }

    /// Row-major `RASTER_SIZE x RASTER_SIZE` intensities in {0, 1}.
    pub fn bitmap(&self) -> &[f64] {
        &self.bitmap
    }

    pub fn foreground_pixels(&self) -> usize {
        self.bitmap.iter().filter(|&&v| v > 0.5).count()
    }

    /// Thresholds the raster at 0.5 and returns the centre of every
    /// foreground cell mapped from the raster square to `[-0.5, 0.5]^2`,
    /// y pointing up. Ordered by first appearance in a row-major scan.
    pub fn segment_coordinates(&self) -> Vec<[f64; 2]> {
        let s = Self::cell_size();
        let off = Self::left_offset();
        let mut seen = [[false; font::COLS]; font::ROWS];
        let mut out = Vec::new();
        for r in 0..RASTER_SIZE {
            for c in 0..RASTER_SIZE {
                if self.bitmap[r * RASTER_SIZE + c] <= 0.5 {
                    continue;
                }
                let Some((row, col)) = Self::cell_at(r as f64 + 0.5, c as f64 + 0.5) else {
                    continue;
                };
                if std::mem::replace(&mut seen[row][col], true) {
                    continue;
                }
                let px = off + (col as f64 + 0.5) * s;
                let py = (row as f64 + 0.5) * s;
                let size = RASTER_SIZE as f64;
                out.push([px / size - 0.5, 0.5 - py / size]);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternKind {
    Predefined,
    Customized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternSource {
    Glyph(char),
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub enum PatternPoints<T> {
    Planar(PointCloud2D<T>),
    Spatial(PointCloud3D<T>),
}

/// Target point cloud for the cloak optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Pattern<T> {
    pub kind: PatternKind,
    pub points: PatternPoints<T>,
    pub source: PatternSource,
    pub seed: Option<u64>,
}

impl<T: Scalar> Pattern<T> {
    pub fn len(&self) -> usize {
        match &self.points {
            PatternPoints::Planar(c) => c.len(),
            PatternPoints::Spatial(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dimension(&self) -> usize {
        match self.points {
            PatternPoints::Planar(_) => 2,
            PatternPoints::Spatial(_) => 3,
        }
    }

    /// Row-major `N x dim` coordinates.
    pub fn to_flat(&self) -> Vec<T> {
        match &self.points {
            PatternPoints::Planar(c) => c.to_flat(),
            PatternPoints::Spatial(c) => c.to_flat(),
        }
    }

    /// Points lifted to 3-D (planar patterns get `z = 0`).
    pub fn to_3d(&self) -> PointCloud3D<T> {
        match &self.points {
            PatternPoints::Planar(c) => {
                PointCloud3D::new(c.points().iter().map(|p| [p[0], p[1], T::zero()]).collect())
            }
            PatternPoints::Spatial(c) => c.clone(),
        }
    }

    /// Writes the pattern in XYZ text format with a descriptive header.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let kind = match self.kind {
            PatternKind::Predefined => "predefined",
            PatternKind::Customized => "customized",
        };
        let mut header = format!("kind={kind} points={}", self.len());
        if let PatternSource::Glyph(ch) = self.source {
            write!(header, " char={ch}").unwrap();
        }
        if let Some(seed) = self.seed {
            write!(header, " seed={seed}").unwrap();
        }
        write_xyz(path, &self.to_3d(), &[header.as_str()])
    }
}

/// Samples `sample_count` points, uniformly with replacement, from the
/// foreground cells of `character`'s raster.
pub fn glyph_to_pattern<T: Scalar>(character: char, sample_count: usize, seed: u64) -> Result<Pattern<T>> {
    if sample_count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let raster = GlyphRaster::new(character)?;
    let support = raster.segment_coordinates();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..sample_count)
        .map(|_| {
            let [x, y] = support[rng.random_range(0..support.len())];
            [T::lit(x), T::lit(y)]
        })
        .collect();
    Ok(Pattern {
        kind: PatternKind::Predefined,
        points: PatternPoints::Planar(PointCloud2D::new(points)),
        source: PatternSource::Glyph(raster.character()),
        seed: Some(seed),
    })
}

/// Translates the centroid to the origin and scales isotropically so the
/// largest absolute coordinate becomes 0.5. A cloud collapsed to one point
/// is only translated.
pub fn normalize_cloud<T: Scalar>(cloud: &PointCloud3D<T>) -> PointCloud3D<T> {
    let Some(c) = cloud.centroid() else {
        return cloud.clone();
    };
    let centered = cloud.translated(c.map(|v| -v));
    let max = centered
        .points()
        .iter()
        .flatten()
        .fold(T::zero(), |m, &v| m.max(v.abs()));
    if max > T::zero() {
        centered.scaled(T::lit(0.5) / max)
    } else {
        centered
    }
}

/// Reads a customized 3-D pattern from an XYZ file.
pub fn load_custom_pattern<T: Scalar>(path: impl AsRef<Path>, normalize: bool) -> Result<Pattern<T>> {
    let path = path.as_ref();
    let cloud: PointCloud3D<T> = read_xyz(path)?;
    if cloud.len() < MIN_CUSTOM_POINTS {
        return Err(Error::Degenerate(cloud.len()));
    }
    let cloud = if normalize { normalize_cloud(&cloud) } else { cloud };
    Ok(Pattern {
        kind: PatternKind::Customized,
        points: PatternPoints::Spatial(cloud),
        source: PatternSource::File(path.to_path_buf()),
        seed: None,
    })
}

/// Reads a pattern written by [`Pattern::save`] or any XYZ cloud. Files whose
/// header says `kind=predefined`, or whose z column is identically zero, load
/// as planar patterns; everything else loads as a customized 3-D pattern.
pub fn load_pattern_file<T: Scalar>(path: impl AsRef<Path>) -> Result<Pattern<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let cloud: PointCloud3D<T> = parse_xyz(&text)?;
    let header_kind = text
        .lines()
        .filter_map(|l| l.trim_start().strip_prefix('#'))
        .flat_map(str::split_whitespace)
        .find_map(|tok| tok.strip_prefix("kind="))
        .map(str::to_owned);
    let header_seed = text
        .lines()
        .filter_map(|l| l.trim_start().strip_prefix('#'))
        .flat_map(str::split_whitespace)
        .find_map(|tok| tok.strip_prefix("seed=").and_then(|s| s.parse().ok()));
    let planar = match header_kind.as_deref() {
        Some("predefined") => true,
        Some("customized") => false,
        _ => cloud.points().iter().all(|p| p[2] == T::zero()),
    };
    if planar {
        if cloud.is_empty() {
            return Err(Error::EmptyCloud("pattern"));
        }
        let pts = cloud.points().iter().map(|p| [p[0], p[1]]).collect();
        Ok(Pattern {
            kind: PatternKind::Predefined,
            points: PatternPoints::Planar(PointCloud2D::new(pts)),
            source: PatternSource::File(path.to_path_buf()),
            seed: header_seed,
        })
    } else {
        if cloud.len() < MIN_CUSTOM_POINTS {
            return Err(Error::Degenerate(cloud.len()));
        }
        Ok(Pattern {
            kind: PatternKind::Customized,
            points: PatternPoints::Spatial(cloud),
            source: PatternSource::File(path.to_path_buf()),
            seed: header_seed,
        })
    }
}

/// Parses XYZ text: three whitespace-separated decimals per line, `#`
/// starting a comment, blank lines ignored.
pub fn parse_xyz<T: Scalar>(text: &str) -> Result<PointCloud3D<T>> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 3 coordinates, found {}", fields.len()),
            });
        }
        let mut p = [T::zero(); 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("not a number: {f:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("non-finite coordinate {f:?}"),
                });
            }
            *slot = T::lit(v);
        }
        points.push(p);
    }
    Ok(PointCloud3D::new(points))
}

pub fn read_xyz<T: Scalar>(path: impl AsRef<Path>) -> Result<PointCloud3D<T>> {
    parse_xyz(&fs::read_to_string(path)?)
}

/// Formats a cloud as XYZ text. Coordinates use the shortest representation
/// that parses back to the same `f64`.
pub fn format_xyz<T: Scalar>(cloud: &PointCloud3D<T>, header: &[&str]) -> String {
    let mut out = String::new();
    for h in header {
        writeln!(out, "# {h}").unwrap();
    }
    for p in cloud.points() {
        writeln!(out, "{} {} {}", p[0].as_f64(), p[1].as_f64(), p[2].as_f64()).unwrap();
    }
    out
}

pub fn write_xyz<T: Scalar>(path: impl AsRef<Path>, cloud: &PointCloud3D<T>, header: &[&str]) -> Result<()> {
    fs::write(path, format_xyz(cloud, header))?;
    Ok(())
}
