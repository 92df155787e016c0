//! Training-set augmentation: random anisotropic scaling, rotation about
//! the vertical (z) axis and merging of several source grids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{GridError, OccupancyGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("no source grids")]
    NoSources,
    #[error("invalid augmentation parameters: {0}")]
    InvalidParams(String),
    #[error("quarter turns need equal x/y dims, got {0:?}")]
    NonSquare([usize; 3]),
    #[error("augmented grid is empty; retry with another seed")]
    EmptyResult,
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    /// Per-axis `(min, max)` scale multipliers.
    pub scale: [(f32, f32); 3],
    /// Allowed multiples of 90° about z.
    pub quarter_turns: Vec<u8>,
    /// Extra rotation drawn uniformly from `[-max, max]` degrees; 0 disables.
    pub free_angle_max_deg: f32,
    /// Inclusive range for the number of merged sources.
    pub merge: (usize, usize),
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            scale: [(0.7, 1.3); 3],
            quarter_turns: vec![0, 1, 2, 3],
            free_angle_max_deg: 0.0,
            merge: (1, 2),
            seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<(), AugmentError> {
        for (a, &(lo, hi)) in self.scale.iter().enumerate() {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(AugmentError::InvalidParams(format!(
                    "scale range for axis {a} must satisfy 0 < min <= max, got ({lo}, {hi})"
                )));
            }
        }
        if self.merge.0 < 1 || self.merge.0 > self.merge.1 {
            return Err(AugmentError::InvalidParams(format!(
                "merge range must satisfy 1 <= min <= max, got {:?}",
                self.merge
            )));
        }
        if self.quarter_turns.is_empty() {
            return Err(AugmentError::InvalidParams(
                "rotation set is empty".into(),
            ));
        }
        if !(self.free_angle_max_deg >= 0.0 && self.free_angle_max_deg.is_finite()) {
            return Err(AugmentError::InvalidParams(
                "free angle must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One source placement in an augmented grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub source: usize,
    pub scale: [f32; 3],
    pub quarter_turns: u8,
    pub free_angle_deg: f32,
}

impl Placement {
    pub fn identity(source: usize) -> Self {
        Self {
            source,
            scale: [1.0; 3],
            quarter_turns: 0,
            free_angle_deg: 0.0,
        }
    }
}

/// Draws a random set of placements and returns the union of the
/// transformed sources. Identical params give identical output.
pub fn augment(
    sources: &[OccupancyGrid],
    params: &AugmentParams,
) -> Result<OccupancyGrid, AugmentError> {
    params.validate()?;
    let placements = draw_placements(sources.len(), params)?;
    compose(sources, &placements)
}

pub fn draw_placements(
    source_count: usize,
    params: &AugmentParams,
) -> Result<Vec<Placement>, AugmentError> {
    if source_count == 0 {
        return Err(AugmentError::NoSources);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = rng.random_range(params.merge.0..=params.merge.1);
    Ok((0..n)
        .map(|_| {
            let source = rng.random_range(0..source_count);
            let scale = params.scale.map(|(lo, hi)| {
                if lo == hi {
                    lo
                } else {
                    rng.random_range(lo..=hi)
                }
            });
            let turn = params.quarter_turns[rng.random_range(0..params.quarter_turns.len())];
            let free = if params.free_angle_max_deg > 0.0 {
                rng.random_range(-params.free_angle_max_deg..=params.free_angle_max_deg)
            } else {
                0.0
            };
            Placement {
                source,
                scale,
                quarter_turns: turn % 4,
                free_angle_deg: free,
            }
        })
        .collect())
}

/// Union of the sources transformed by `placements`.
pub fn compose(
    sources: &[OccupancyGrid],
    placements: &[Placement],
) -> Result<OccupancyGrid, AugmentError> {
    let first = sources.first().ok_or(AugmentError::NoSources)?;
    let dims = first.dims();
    if let Some(bad) = sources.iter().find(|s| s.dims() != dims) {
        return Err(GridError::DimMismatch(dims, bad.dims()).into());
    }
    let mut out = OccupancyGrid::new(dims)?;
    for p in placements {
        let src = sources
            .get(p.source)
            .ok_or_else(|| AugmentError::InvalidParams(format!("source {} out of range", p.source)))?;
        let t = transform(src, p)?;
        out = out.union(&t)?;
    }
    if out.is_vacant() {
        return Err(AugmentError::EmptyResult);
    }
    Ok(out)
}

/// Applies scale, then the quarter turn, then the free rotation.
pub fn transform(grid: &OccupancyGrid, p: &Placement) -> Result<OccupancyGrid, AugmentError> {
    let mut g = scale_nearest(grid, p.scale)?;
    if p.quarter_turns % 4 != 0 {
        g = quarter_turn(&g, p.quarter_turns)?;
    }
    if p.free_angle_deg != 0.0 {
        g = rotate_free(&g, p.free_angle_deg)?;
    }
    Ok(g)
}

/// Nearest-neighbour scaling about the grid center; samples falling outside
/// the source are empty.
pub fn scale_nearest(grid: &OccupancyGrid, scale: [f32; 3]) -> Result<OccupancyGrid, AugmentError> {
    if scale == [1.0; 3] {
        return Ok(grid.clone());
    }
    let dims = grid.dims();
    let src_index = |a: usize, j: usize| -> Option<usize> {
        let half = dims[a] as f64 / 2.0;
        let s = (j as f64 + 0.5 - half) / scale[a] as f64 + half;
        let i = s.floor();
        (i >= 0.0 && (i as usize) < dims[a]).then_some(i as usize)
    };
    Ok(OccupancyGrid::from_fn(dims, |x, y, z| {
        match (src_index(0, x), src_index(1, y), src_index(2, z)) {
            (Some(sx), Some(sy), Some(sz)) => grid.get(sx, sy, sz),
            _ => false,
        }
    })?)
}

/// Exact counter-clockwise rotation by `turns`·90° about z.
pub fn quarter_turn(grid: &OccupancyGrid, turns: u8) -> Result<OccupancyGrid, AugmentError> {
    let dims = grid.dims();
    if dims[0] != dims[1] {
        return Err(AugmentError::NonSquare(dims));
    }
    let n = dims[0];
    let mut g = grid.clone();
    for _ in 0..turns % 4 {
        let prev = g.clone();
        // (x, y) -> (n-1-y, x); inverse maps output (x', y') to (y', n-1-x').
        g = OccupancyGrid::from_fn(dims, |x, y, z| prev.get(y, n - 1 - x, z))?;
    }
    Ok(g)
}

/// Counter-clockwise rotation about z by an arbitrary angle, by inverse
/// mapping of cell centers and nearest-neighbour lookup.
pub fn rotate_free(grid: &OccupancyGrid, degrees: f32) -> Result<OccupancyGrid, AugmentError> {
    let dims = grid.dims();
    let (s, c) = (-(degrees as f64).to_radians()).sin_cos();
    let (hx, hy) = (dims[0] as f64 / 2.0, dims[1] as f64 / 2.0);
    Ok(OccupancyGrid::from_fn(dims, |x, y, z| {
        let (u, v) = (x as f64 + 0.5 - hx, y as f64 + 0.5 - hy);
        let (su, sv) = (c * u - s * v + hx, s * u + c * v + hy);
        let (ix, iy) = (su.floor(), sv.floor());
        ix >= 0.0
            && iy >= 0.0
            && (ix as usize) < dims[0]
            && (iy as usize) < dims[1]
            && grid.get(ix as usize, iy as usize, z)
    })?)
}
