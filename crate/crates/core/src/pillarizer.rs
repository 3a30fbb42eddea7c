//! Pillar grid assignment and per-point input features.
//!
//! Every coordinate is split into a coarse part, snapped to a lattice of
//! `(max - min) / 256`, and a detail part holding the remainder. Each part
//! then spans at most 256 distinct 8-bit codes, so an INT8 input keeps
//! millimetre-level localization instead of the ~0.4 m step a single 8-bit
//! feature would give over a 108 m range.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pcd_io::PointCloud;
use crate::sparse::{ActiveSet, Coord};

const LATTICE_BITS: i32 = 8;
const GRID_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub pillar_size_x: f64,
    pub pillar_size_y: f64,
    pub max_points_per_pillar: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            x_min: -54.0,
            x_max: 54.0,
            y_min: -54.0,
            y_max: 54.0,
            z_min: -5.0,
            z_max: 3.0,
            pillar_size_x: 0.15,
            pillar_size_y: 0.15,
            max_points_per_pillar: 20,
        }
    }
}

fn cells(lo: f64, hi: f64, size: f64, axis: &str) -> Result<u32> {
    if !(hi > lo) {
        return Err(Error::Config(format!("{axis} range [{lo}, {hi}) is empty")));
    }
    if !(size > 0.0) || !size.is_finite() {
        return Err(Error::Config(format!("{axis} pillar size {size} must be positive")));
    }
    let n = ((hi - lo) / size).round();
    if n < 1.0 || n > u32::MAX as f64 {
        return Err(Error::Config(format!("{axis} range yields {n} pillars")));
    }
    if (n * size - (hi - lo)).abs() > GRID_TOLERANCE {
        return Err(Error::Config(format!(
            "{axis} range {} m is not a multiple of the {size} m pillar size",
            hi - lo
        )));
    }
    Ok(n as u32)
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims()?;
        if !(self.z_max > self.z_min) {
            return Err(Error::Config(format!(
                "z range [{}, {}) is empty",
                self.z_min, self.z_max
            )));
        }
        if self.max_points_per_pillar == 0 {
            return Err(Error::Config("max_points_per_pillar must be positive".into()));
        }
        Ok(())
    }

    /// Grid `(width, height)` in pillars.
    pub fn dims(&self) -> Result<(u32, u32)> {
        Ok((
            cells(self.x_min, self.x_max, self.pillar_size_x, "x")?,
            cells(self.y_min, self.y_max, self.pillar_size_y, "y")?,
        ))
    }

    fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        x >= self.x_min
            && x < self.x_max
            && y >= self.y_min
            && y < self.y_max
            && z >= self.z_min
            && z < self.z_max
    }
}

/// Optional features appended after the six coarse/detail values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub intensity: bool,
    /// Divide raw intensity by 255.
    pub normalize_intensity: bool,
    /// Offsets of the point from its pillar's geometric center.
    pub center_offsets: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            intensity: true,
            normalize_intensity: false,
            center_offsets: true,
        }
    }
}

/// What each slot of a point feature vector holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Coarse(Axis),
    Detail(Axis),
    Intensity,
    CenterOffset(Axis),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl FeatureConfig {
    pub fn num_features(&self) -> usize {
        6 + usize::from(self.intensity) + 2 * usize::from(self.center_offsets)
    }

    pub fn layout(&self) -> Vec<FeatureKind> {
        let mut out = Vec::with_capacity(self.num_features());
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            out.push(FeatureKind::Coarse(axis));
            out.push(FeatureKind::Detail(axis));
        }
        if self.intensity {
            out.push(FeatureKind::Intensity);
        }
        if self.center_offsets {
            out.push(FeatureKind::CenterOffset(Axis::X));
            out.push(FeatureKind::CenterOffset(Axis::Y));
        }
        out
    }
}

/// Lattice step used for the coarse part of a coordinate in `[min, max)`.
pub fn lattice_resolution(v_min: f64, v_max: f64) -> f64 {
    (v_max - v_min) * 2f64.powi(-LATTICE_BITS)
}

/// Splits `v` into `(coarse, detail)` with `coarse` a multiple of the lattice
/// resolution and `0 <= detail < resolution`.
pub fn coarse_detail_split(v: f64, v_min: f64, v_max: f64) -> Result<(f64, f64)> {
    if !(v >= v_min && v < v_max) {
        return Err(Error::Range {
            value: v,
            min: v_min,
            max: v_max,
        });
    }
    let res = lattice_resolution(v_min, v_max);
    let mut cell = (v / res).floor();
    let mut coarse = cell * res;
    // v / res can round across an integer boundary.
    if v - coarse < 0.0 {
        cell -= 1.0;
        coarse = cell * res;
    } else if v - coarse >= res {
        cell += 1.0;
        coarse = cell * res;
    }
    Ok((coarse, v - coarse))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pillar {
    pub coord: Coord,
    /// Row-major `points x num_features`.
    pub features: Vec<f64>,
}

impl Pillar {
    pub fn num_points(&self, num_features: usize) -> usize {
        self.features.len() / num_features
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PillarStats {
    pub kept: usize,
    pub out_of_range: usize,
    pub truncated: usize,
}

/// Non-empty pillars in canonical `(j, i)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarSet {
    pub width: u32,
    pub height: u32,
    pub num_features: usize,
    pub pillars: Vec<Pillar>,
    pub stats: PillarStats,
}

impl PillarSet {
    pub fn len(&self) -> usize {
        self.pillars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pillars.is_empty()
    }

    pub fn num_points(&self) -> usize {
        self.pillars.iter().map(|p| p.num_points(self.num_features)).sum()
    }

    pub fn active_set(&self) -> ActiveSet {
        ActiveSet::from_sorted(
            self.width,
            self.height,
            self.pillars.iter().map(|p| p.coord).collect(),
        )
        .expect("pillar coordinates are unique, sorted and in range")
    }
}

pub fn pillarize(cloud: &PointCloud, grid: &GridConfig, features: &FeatureConfig) -> Result<PillarSet> {
    grid.validate()?;
    let (width, height) = grid.dims()?;
    let nf = features.num_features();
    let mut stats = PillarStats::default();
    let mut slots: HashMap<Coord, usize> = HashMap::new();
    let mut pillars: Vec<Pillar> = Vec::new();
    let mut row = Vec::with_capacity(nf);

    for p in &cloud.points {
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        if !grid.contains(x, y, z) {
            stats.out_of_range += 1;
            continue;
        }
        let i = (((x - grid.x_min) / grid.pillar_size_x).floor() as u32).min(width - 1);
        let j = (((y - grid.y_min) / grid.pillar_size_y).floor() as u32).min(height - 1);
        let coord = Coord::new(i, j);
        let slot = *slots.entry(coord).or_insert_with(|| {
            pillars.push(Pillar {
                coord,
                features: Vec::new(),
            });
            pillars.len() - 1
        });
        let pillar = &mut pillars[slot];
        if pillar.features.len() / nf >= grid.max_points_per_pillar {
            stats.truncated += 1;
            continue;
        }

        row.clear();
        for (v, lo, hi) in [
            (x, grid.x_min, grid.x_max),
            (y, grid.y_min, grid.y_max),
            (z, grid.z_min, grid.z_max),
        ] {
            let (c, d) = coarse_detail_split(v, lo, hi)?;
            row.push(c);
            row.push(d);
        }
        if features.intensity {
            let raw = p.intensity as f64;
            row.push(if features.normalize_intensity { raw / 255.0 } else { raw });
        }
        if features.center_offsets {
            let cx = grid.x_min + (i as f64 + 0.5) * grid.pillar_size_x;
            let cy = grid.y_min + (j as f64 + 0.5) * grid.pillar_size_y;
            row.push(x - cx);
            row.push(y - cy);
        }
        pillar.features.extend_from_slice(&row);
        stats.kept += 1;
    }

    pillars.sort_by_key(|p| p.coord);
    Ok(PillarSet {
        width,
        height,
        num_features: nf,
        pillars,
        stats,
    })
}
