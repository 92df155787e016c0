//! Dense binary occupancy grids and the morphology used by the detailizer:
//! Chebyshev dilation, nearest-neighbour upsampling and max-pool downsampling.
//!
//! Cells are addressed `(x, y, z)` with `x` varying fastest, then `y`, then
//! `z`. `z` is the vertical axis throughout the crate.

use std::collections::VecDeque;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GridError {
    #[error("grid dimensions must be positive, got {0:?}")]
    ZeroDim([usize; 3]),
    #[error("cell buffer has {len} entries but dims {dims:?} need {expected}")]
    LengthMismatch {
        dims: [usize; 3],
        len: usize,
        expected: usize,
    },
    #[error("cell value {value} at index {index} is not 0 or 1")]
    NonBinary { index: usize, value: u8 },
    #[error("dims {dims:?} are not divisible by {factor}")]
    IndivisibleDims { dims: [usize; 3], factor: usize },
    #[error("scale factor must be at least 1")]
    ZeroFactor,
    #[error("dilation radius must be at least 1")]
    ZeroRadius,
    #[error("grid dims differ: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
}

/// Binary voxel grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OccupancyGrid {
    dims: [usize; 3],
    cells: Vec<bool>,
    label: Option<String>,
}

impl OccupancyGrid {
    /// All-empty grid.
    pub fn new(dims: [usize; 3]) -> Result<Self, GridError> {
        check_dims(dims)?;
        Ok(Self {
            dims,
            cells: vec![false; dims[0] * dims[1] * dims[2]],
            label: None,
        })
    }

    /// All-empty cubic grid of side `n`.
    pub fn cube(n: usize) -> Result<Self, GridError> {
        Self::new([n, n, n])
    }

    /// All-occupied grid.
    pub fn filled(dims: [usize; 3]) -> Result<Self, GridError> {
        let mut g = Self::new(dims)?;
        g.cells.fill(true);
        Ok(g)
    }

    pub fn from_cells(dims: [usize; 3], cells: Vec<bool>) -> Result<Self, GridError> {
        check_dims(dims)?;
        let expected = dims[0] * dims[1] * dims[2];
        if cells.len() != expected {
            return Err(GridError::LengthMismatch {
                dims,
                len: cells.len(),
                expected,
            });
        }
        Ok(Self {
            dims,
            cells,
            label: None,
        })
    }

    /// Builds a grid from one byte per cell; every byte must be 0 or 1.
    pub fn from_bytes(dims: [usize; 3], bytes: &[u8]) -> Result<Self, GridError> {
        if let Some((index, &value)) = bytes.iter().enumerate().find(|(_, &b)| b > 1) {
            return Err(GridError::NonBinary { index, value });
        }
        Self::from_cells(dims, bytes.iter().map(|&b| b == 1).collect())
    }

    /// Builds a grid from a cell predicate evaluated in index order.
    pub fn from_fn(
        dims: [usize; 3],
        mut f: impl FnMut(usize, usize, usize) -> bool,
    ) -> Result<Self, GridError> {
        let mut g = Self::new(dims)?;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let i = g.index(x, y, z);
                    g.cells[i] = f(x, y, z);
                }
            }
        }
        Ok(g)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn set_label(&mut self, label: Option<String>) {
        self.label = label;
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Side length if the grid is a cube.
    pub fn cubic_side(&self) -> Option<usize> {
        let [x, y, z] = self.dims;
        (x == y && y == z).then_some(x)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let y = (index / self.dims[0]) % self.dims[1];
        let z = index / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.cells[self.index(x, y, z)]
    }

    /// Like [`get`](Self::get) but returns `false` outside the grid.
    #[inline]
    pub fn get_signed(&self, x: isize, y: isize, z: isize) -> bool {
        if x < 0 || y < 0 || z < 0 {
            return false;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        x < self.dims[0] && y < self.dims[1] && z < self.dims[2] && self.get(x, y, z)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.index(x, y, z);
        self.cells[i] = value;
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [bool] {
        &mut self.cells
    }

    /// One byte (0 or 1) per cell.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.cells.iter().map(|&c| c as u8).collect()
    }

    /// Cells as 0.0 / 1.0, in storage order.
    pub fn to_f32(&self) -> Vec<f32> {
        self.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()
    }

    /// Number of occupied cells.
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_vacant(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    pub fn occupied(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(|(i, _)| self.coords(i))
    }

    fn same_dims(&self, other: &Self) -> Result<(), GridError> {
        if self.dims != other.dims {
            return Err(GridError::DimMismatch(self.dims, other.dims));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Result<Self, GridError> {
        self.same_dims(other)?;
        let cells = self
            .cells
            .iter()
            .zip(&other.cells)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::from_cells(self.dims, cells)
    }

    pub fn union(&self, other: &Self) -> Result<Self, GridError> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Self) -> Result<Self, GridError> {
        self.zip_with(other, |a, b| a && b)
    }

    /// Cell-wise `self ⊆ other`.
    pub fn is_subset_of(&self, other: &Self) -> Result<bool, GridError> {
        self.same_dims(other)?;
        Ok(self.cells.iter().zip(&other.cells).all(|(&a, &b)| !a || b))
    }

    /// Chebyshev dilation: a cell is set iff some input cell within
    /// `radius` along every axis is set. Clamped at the grid border.
    pub fn dilate(&self, radius: usize) -> Result<Self, GridError> {
        if radius == 0 {
            return Err(GridError::ZeroRadius);
        }
        // The Chebyshev ball is a cube, so the max filter separates per axis.
        let mut cur = self.cells.clone();
        for axis in 0..3 {
            cur = self.max_filter_axis(&cur, axis, radius);
        }
        Ok(Self {
            dims: self.dims,
            cells: cur,
            label: self.label.clone(),
        })
    }

    fn max_filter_axis(&self, src: &[bool], axis: usize, radius: usize) -> Vec<bool> {
        let [nx, ny, _] = self.dims;
        let n = self.dims[axis];
        let stride = match axis {
            0 => 1,
            1 => nx,
            _ => nx * ny,
        };
        let mut out = vec![false; src.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let c = self.coords(i)[axis];
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(n - 1);
            let base = i - c * stride;
            *o = (lo..=hi).any(|j| src[base + j * stride]);
        }
        out
    }

    /// Nearest-neighbour upsampling: `out(x,y,z) = in(x/f, y/f, z/f)`.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Self, GridError> {
        if factor == 0 {
            return Err(GridError::ZeroFactor);
        }
        let dims = self.dims.map(|d| d * factor);
        let mut out = Self::from_fn(dims, |x, y, z| {
            self.get(x / factor, y / factor, z / factor)
        })?;
        out.label = self.label.clone();
        Ok(out)
    }

    /// Max-pool downsampling over `factor³` blocks.
    pub fn downsample_max(&self, factor: usize) -> Result<Self, GridError> {
        if factor == 0 {
            return Err(GridError::ZeroFactor);
        }
        if self.dims.iter().any(|d| d % factor != 0) {
            return Err(GridError::IndivisibleDims {
                dims: self.dims,
                factor,
            });
        }
        let dims = self.dims.map(|d| d / factor);
        let mut out = Self::new(dims)?;
        for (i, &c) in self.cells.iter().enumerate() {
            if c {
                let [x, y, z] = self.coords(i);
                out.set(x / factor, y / factor, z / factor, true);
            }
        }
        out.label = self.label.clone();
        Ok(out)
    }

    /// Number of 6-connected components of occupied cells.
    pub fn component_count(&self) -> usize {
        let mut seen = vec![false; self.cells.len()];
        let mut queue = VecDeque::new();
        let mut components = 0;
        for start in 0..self.cells.len() {
            if !self.cells[start] || seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                for j in self.face_neighbors(i) {
                    if self.cells[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        components
    }

    /// Indices of the (up to six) face-adjacent cells.
    pub fn face_neighbors(&self, index: usize) -> impl Iterator<Item = usize> + '_ {
        let c = self.coords(index);
        const OFFSETS: [[isize; 3]; 6] = [
            [-1, 0, 0],
            [1, 0, 0],
            [0, -1, 0],
            [0, 1, 0],
            [0, 0, -1],
            [0, 0, 1],
        ];
        OFFSETS.iter().filter_map(move |o| {
            let mut p = [0usize; 3];
            for a in 0..3 {
                let v = c[a] as isize + o[a];
                if v < 0 || v as usize >= self.dims[a] {
                    return None;
                }
                p[a] = v as usize;
            }
            Some(self.index(p[0], p[1], p[2]))
        })
    }
}

fn check_dims(dims: [usize; 3]) -> Result<(), GridError> {
    if dims.iter().any(|&d| d == 0) {
        return Err(GridError::ZeroDim(dims));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(n: usize, at: [usize; 3]) -> OccupancyGrid {
        let mut g = OccupancyGrid::cube(n).unwrap();
        g.set(at[0], at[1], at[2], true);
        g
    }

    /// Direct Chebyshev-ball enumeration.
    fn dilate_brute(g: &OccupancyGrid, r: usize) -> OccupancyGrid {
        let r = r as isize;
        OccupancyGrid::from_fn(g.dims(), |x, y, z| {
            let (x, y, z) = (x as isize, y as isize, z as isize);
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if g.get_signed(x + dx, y + dy, z + dz) {
                            return true;
                        }
                    }
                }
            }
            false
        })
        .unwrap()
    }

    #[test]
    fn dilate_empty_stays_empty() {
        let g = OccupancyGrid::cube(4).unwrap();
        assert!(g.dilate(1).unwrap().is_vacant());
    }

    #[test]
    fn dilate_center_voxel_gives_3x3x3() {
        let g = single(5, [2, 2, 2]);
        let d = g.dilate(1).unwrap();
        assert_eq!(d.count(), 27);
        assert_eq!(d, dilate_brute(&g, 1));
        for [x, y, z] in d.occupied() {
            assert!((1..=3).contains(&x) && (1..=3).contains(&y) && (1..=3).contains(&z));
        }
    }

    #[test]
    fn dilate_full_is_full() {
        let g = OccupancyGrid::filled([4, 4, 4]).unwrap();
        assert_eq!(g.dilate(1).unwrap(), g);
    }

    #[test]
    fn dilate_clamps_at_border() {
        let g = single(4, [0, 0, 0]);
        assert_eq!(g.dilate(1).unwrap().count(), 8);
    }

    #[test]
    fn dilate_rejects_zero_radius() {
        assert_eq!(
            OccupancyGrid::cube(2).unwrap().dilate(0),
            Err(GridError::ZeroRadius)
        );
    }

    #[test]
    fn upsample_examples() {
        let one = OccupancyGrid::filled([1, 1, 1]).unwrap();
        assert_eq!(
            one.upsample_nearest(4).unwrap(),
            OccupancyGrid::filled([4, 4, 4]).unwrap()
        );

        let g = single(2, [1, 0, 1]);
        let up = g.upsample_nearest(2).unwrap();
        assert_eq!(up.dims(), [4, 4, 4]);
        assert_eq!(up.count(), 8);
        for [x, y, z] in up.occupied() {
            assert!((2..4).contains(&x) && (0..2).contains(&y) && (2..4).contains(&z));
        }
        assert_eq!(g.upsample_nearest(1).unwrap(), g);
    }

    #[test]
    fn downsample_examples() {
        let full = OccupancyGrid::filled([4, 4, 4]).unwrap();
        assert_eq!(
            full.downsample_max(2).unwrap(),
            OccupancyGrid::filled([2, 2, 2]).unwrap()
        );
        let d = single(4, [3, 1, 2]).downsample_max(2).unwrap();
        assert_eq!(d.count(), 1);
        assert!(d.get(1, 0, 1));
        let z = OccupancyGrid::cube(4).unwrap().downsample_max(4).unwrap();
        assert_eq!(z.dims(), [1, 1, 1]);
        assert!(z.is_vacant());
        assert!(matches!(
            OccupancyGrid::cube(5).unwrap().downsample_max(2),
            Err(GridError::IndivisibleDims { .. })
        ));
    }

    #[test]
    fn from_bytes_rejects_non_binary() {
        assert!(matches!(
            OccupancyGrid::from_bytes([2, 1, 1], &[0, 2]),
            Err(GridError::NonBinary { index: 1, value: 2 })
        ));
        assert!(matches!(
            OccupancyGrid::from_bytes([2, 1, 1], &[0]),
            Err(GridError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn components() {
        let mut g = OccupancyGrid::cube(4).unwrap();
        g.set(0, 0, 0, true);
        g.set(1, 0, 0, true);
        g.set(3, 3, 3, true);
        // Diagonal neighbours are not 6-connected.
        g.set(2, 2, 3, true);
        assert_eq!(g.component_count(), 3);
    }

    fn arb_grid(max: usize) -> impl Strategy<Value = OccupancyGrid> {
        (1..=max, 1..=max, 1..=max).prop_flat_map(|(x, y, z)| {
            proptest::collection::vec(any::<bool>(), x * y * z)
                .prop_map(move |cells| OccupancyGrid::from_cells([x, y, z], cells).unwrap())
        })
    }

    proptest! {
        #[test]
        fn upsample_composes(g in arb_grid(4), a in prop::sample::select(vec![1usize, 2, 4]), b in prop::sample::select(vec![1usize, 2, 4])) {
            let direct = g.upsample_nearest(a * b).unwrap();
            let chained = g.upsample_nearest(a).unwrap().upsample_nearest(b).unwrap();
            prop_assert_eq!(direct, chained);
        }

        #[test]
        fn downsample_inverts_upsample(g in arb_grid(5), f in 1usize..4) {
            prop_assert_eq!(g.upsample_nearest(f).unwrap().downsample_max(f).unwrap(), g);
        }

        #[test]
        fn dilate_is_monotone_and_matches_brute_force(g in arb_grid(6), r in 1usize..3) {
            let d1 = g.dilate(r).unwrap();
            let d2 = g.dilate(r + 1).unwrap();
            prop_assert!(g.is_subset_of(&d1).unwrap());
            prop_assert!(d1.is_subset_of(&d2).unwrap());
            prop_assert_eq!(d1, dilate_brute(&g, r));
        }
    }
}
