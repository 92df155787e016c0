//! Solid voxelization of normalized triangle meshes.
//!
//! Two passes over a `k³` grid spanning `[-0.5, 0.5]³`:
//!
//! 1. Surface: every cell whose (slightly shrunk) cube overlaps a triangle,
//!    by the separating-axis triangle/box test. Shrinking drops cells that
//!    only touch a triangle along a shared face or edge.
//! 2. Interior: a 6-connected flood fill over the grid padded by one cell on
//!    every side, starting at a padding corner. The fill cannot enter surface
//!    cells nor step between two cell centers when the connecting segment
//!    hits a triangle. Every grid cell the fill does not reach is solid.
//!
//! The segment test handles faces lying exactly on cell boundaries, where
//! the shrunk surface test marks nothing.

use std::collections::VecDeque;

use crate::grid::{GridError, OccupancyGrid};
use crate::mesh::TriangleMesh;

/// Outcome of [`voxelize_mesh`].
#[derive(Debug, Clone, PartialEq)]
pub struct Voxelization {
    pub grid: OccupancyGrid,
    /// Set when the mesh has open edges; the grid then holds only surface
    /// cells.
    pub warning: Option<VoxelizeWarning>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VoxelizeWarning {
    NonManifoldLeak { open_edges: usize },
}

/// Fraction of the cell half-size kept for the surface overlap test.
const SHRINK: f64 = 1.0 - 1e-4;

pub fn voxelize_mesh(mesh: &TriangleMesh, k: usize) -> Result<Voxelization, GridError> {
    if k < 2 {
        return Err(GridError::ZeroDim([k, k, k]));
    }
    let mut grid = OccupancyGrid::cube(k)?;
    if mesh.triangles.is_empty() {
        return Ok(Voxelization {
            grid,
            warning: None,
        });
    }
    let lattice = Lattice { k };
    let tris: Vec<[[f64; 3]; 3]> = mesh
        .triangles
        .iter()
        .map(|t| t.map(|i| mesh.vertices[i as usize].map(f64::from)))
        .collect();

    for tri in &tris {
        mark_surface(&lattice, tri, &mut grid);
    }

    let open_edges = mesh.edge_counts().values().filter(|&&c| c != 2).count();
    if open_edges > 0 {
        return Ok(Voxelization {
            grid,
            warning: Some(VoxelizeWarning::NonManifoldLeak { open_edges }),
        });
    }

    let n = k + 2;
    // blocked[axis][padded cell] blocks the link from that cell to its +axis
    // neighbour.
    let mut blocked = vec![vec![false; n * n * n]; 3];
    for tri in &tris {
        mark_blocked_links(&lattice, tri, &mut blocked);
    }

    let pidx = |p: [usize; 3]| (p[2] * n + p[1]) * n + p[0];
    let is_surface = |p: [usize; 3]| {
        (1..=k).contains(&p[0])
            && (1..=k).contains(&p[1])
            && (1..=k).contains(&p[2])
            && grid.get(p[0] - 1, p[1] - 1, p[2] - 1)
    };
    let mut reached = vec![false; n * n * n];
    let mut queue = VecDeque::from([[0usize; 3]]);
    reached[0] = true;
    while let Some(p) = queue.pop_front() {
        for axis in 0..3 {
            // +axis neighbour
            if p[axis] + 1 < n && !blocked[axis][pidx(p)] {
                let mut q = p;
                q[axis] += 1;
                if !reached[pidx(q)] && !is_surface(q) {
                    reached[pidx(q)] = true;
                    queue.push_back(q);
                }
            }
            // -axis neighbour
            if p[axis] > 0 {
                let mut q = p;
                q[axis] -= 1;
                if !blocked[axis][pidx(q)] && !reached[pidx(q)] && !is_surface(q) {
                    reached[pidx(q)] = true;
                    queue.push_back(q);
                }
            }
        }
    }

    for z in 0..k {
        for y in 0..k {
            for x in 0..k {
                if !reached[pidx([x + 1, y + 1, z + 1])] {
                    grid.set(x, y, z, true);
                }
            }
        }
    }
    Ok(Voxelization {
        grid,
        warning: None,
    })
}

struct Lattice {
    k: usize,
}

impl Lattice {
    fn h(&self) -> f64 {
        1.0 / self.k as f64
    }

    /// Center of grid cell `i` (may be -1 or k for padding cells).
    fn center(&self, i: isize) -> f64 {
        -0.5 + (i as f64 + 0.5) * self.h()
    }

    /// Range of cell indices whose extent intersects `[lo, hi]`, clamped to
    /// `[lo_idx, hi_idx]`.
    fn cell_range(&self, lo: f64, hi: f64, lo_idx: isize, hi_idx: isize) -> (isize, isize) {
        let a = ((lo + 0.5) / self.h()).floor() as isize - 1;
        let b = ((hi + 0.5) / self.h()).floor() as isize + 1;
        (a.max(lo_idx), b.min(hi_idx))
    }
}

fn tri_bounds(tri: &[[f64; 3]; 3]) -> ([f64; 3], [f64; 3]) {
    let mut lo = tri[0];
    let mut hi = tri[0];
    for v in &tri[1..] {
        for a in 0..3 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    (lo, hi)
}

fn mark_surface(lat: &Lattice, tri: &[[f64; 3]; 3], grid: &mut OccupancyGrid) {
    let k = lat.k as isize;
    let (lo, hi) = tri_bounds(tri);
    let r = [0, 1, 2].map(|a| lat.cell_range(lo[a], hi[a], 0, k - 1));
    let half = 0.5 * lat.h() * SHRINK;
    for z in r[2].0..=r[2].1 {
        for y in r[1].0..=r[1].1 {
            for x in r[0].0..=r[0].1 {
                let c = [lat.center(x), lat.center(y), lat.center(z)];
                if tri_box_overlap(c, half, tri) {
                    grid.set(x as usize, y as usize, z as usize, true);
                }
            }
        }
    }
}

fn mark_blocked_links(lat: &Lattice, tri: &[[f64; 3]; 3], blocked: &mut [Vec<bool>]) {
    let k = lat.k as isize;
    let n = lat.k + 2;
    let (lo, hi) = tri_bounds(tri);
    for axis in 0..3 {
        let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
        let (b0, b1) = lat.cell_range(lo[b], hi[b], -1, k);
        let (c0, c1) = lat.cell_range(lo[c], hi[c], -1, k);
        // links start at cell i and end at i + 1
        let (a0, a1) = lat.cell_range(lo[axis], hi[axis], -1, k - 1);
        for ib in b0..=b1 {
            for ic in c0..=c1 {
                for ia in a0..=a1 {
                    let mut p = [0.0; 3];
                    p[axis] = lat.center(ia);
                    p[b] = lat.center(ib);
                    p[c] = lat.center(ic);
                    if segment_hits_triangle(p, axis, lat.h(), tri) {
                        let mut cell = [0usize; 3];
                        cell[axis] = (ia + 1) as usize;
                        cell[b] = (ib + 1) as usize;
                        cell[c] = (ic + 1) as usize;
                        blocked[axis][(cell[2] * n + cell[1]) * n + cell[0]] = true;
                    }
                }
            }
        }
    }
}

/// Möller–Trumbore against the segment `p .. p + len·e_axis`, inclusive of
/// triangle edges and segment endpoints.
fn segment_hits_triangle(p: [f64; 3], axis: usize, len: f64, tri: &[[f64; 3]; 3]) -> bool {
    const EPS: f64 = 1e-9;
    let mut dir = [0.0; 3];
    dir[axis] = len;
    let e1 = sub(tri[1], tri[0]);
    let e2 = sub(tri[2], tri[0]);
    let pv = cross(dir, e2);
    let det = dot(e1, pv);
    if det.abs() < 1e-14 {
        return false;
    }
    let inv = 1.0 / det;
    let tv = sub(p, tri[0]);
    let u = dot(tv, pv) * inv;
    if !(-EPS..=1.0 + EPS).contains(&u) {
        return false;
    }
    let qv = cross(tv, e1);
    let v = dot(dir, qv) * inv;
    if v < -EPS || u + v > 1.0 + EPS {
        return false;
    }
    let t = dot(e2, qv) * inv;
    (-EPS..=1.0 + EPS).contains(&t)
}

/// Separating-axis triangle/box overlap test (cube of half-size `half`).
fn tri_box_overlap(center: [f64; 3], half: f64, tri: &[[f64; 3]; 3]) -> bool {
    let v = tri.map(|p| sub(p, center));
    let edges = [sub(v[1], v[0]), sub(v[2], v[1]), sub(v[0], v[2])];

    // Box face normals.
    for a in 0..3 {
        let lo = v[0][a].min(v[1][a]).min(v[2][a]);
        let hi = v[0][a].max(v[1][a]).max(v[2][a]);
        if lo > half || hi < -half {
            return false;
        }
    }

    // Triangle normal.
    let n = cross(edges[0], edges[1]);
    let r = half * (n[0].abs() + n[1].abs() + n[2].abs());
    if dot(n, v[0]).abs() > r {
        return false;
    }

    // Edge × box axis.
    for e in &edges {
        for a in 0..3 {
            let mut unit = [0.0; 3];
            unit[a] = 1.0;
            let axis = cross(unit, *e);
            if axis.iter().all(|c| c.abs() < 1e-15) {
                continue;
            }
            let p = v.map(|q| dot(q, axis));
            let lo = p[0].min(p[1]).min(p[2]);
            let hi = p[0].max(p[1]).max(p[2]);
            let r = half * (axis[0].abs() + axis[1].abs() + axis[2].abs());
            if lo > r || hi < -r {
                return false;
            }
        }
    }
    true
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed surface approximating a sphere: subdivided octahedron pushed
    /// onto the sphere.
    pub(crate) fn icosphere(radius: f32, levels: usize) -> TriangleMesh {
        let mut verts: Vec<[f32; 3]> = vec![
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
        ];
        let mut tris: Vec<[u32; 3]> = vec![
            [0, 2, 4],
            [2, 1, 4],
            [1, 3, 4],
            [3, 0, 4],
            [2, 0, 5],
            [1, 2, 5],
            [3, 1, 5],
            [0, 3, 5],
        ];
        for _ in 0..levels {
            let mut mid = std::collections::HashMap::new();
            let mut next = Vec::new();
            let mut midpoint = |a: u32, b: u32, verts: &mut Vec<[f32; 3]>| -> u32 {
                *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    let (p, q) = (verts[a as usize], verts[b as usize]);
                    let m = [0, 1, 2].map(|i| 0.5 * (p[i] + q[i]));
                    let l = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
                    verts.push(m.map(|c| c / l));
                    verts.len() as u32 - 1
                })
            };
            for t in &tris {
                let ab = midpoint(t[0], t[1], &mut verts);
                let bc = midpoint(t[1], t[2], &mut verts);
                let ca = midpoint(t[2], t[0], &mut verts);
                next.extend([[t[0], ab, ca], [ab, t[1], bc], [ca, bc, t[2]], [ab, bc, ca]]);
            }
            tris = next;
        }
        for v in &mut verts {
            *v = v.map(|c| c * radius);
        }
        TriangleMesh::new(verts, tris).unwrap()
    }

    #[test]
    fn centered_cube_gives_solid_block() {
        let mesh = TriangleMesh::cuboid([-0.25; 3], [0.25; 3]);
        let v = voxelize_mesh(&mesh, 8).unwrap();
        assert!(v.warning.is_none());
        let expected =
            OccupancyGrid::from_fn([8; 3], |x, y, z| [x, y, z].iter().all(|c| (2..6).contains(c)))
                .unwrap();
        assert_eq!(v.grid, expected);
    }

    #[test]
    fn empty_mesh_gives_empty_grid() {
        let v = voxelize_mesh(&TriangleMesh::default(), 8).unwrap();
        assert!(v.grid.is_vacant());
        assert_eq!(v.grid.dims(), [8; 3]);
    }

    #[test]
    fn unit_cube_fills_k2() {
        let mesh = TriangleMesh::cuboid([-0.5; 3], [0.5; 3]);
        let v = voxelize_mesh(&mesh, 2).unwrap();
        assert_eq!(v.grid, OccupancyGrid::filled([2; 3]).unwrap());
    }

    #[test]
    fn offset_cube_marks_straddled_cells() {
        // Faces inside cells rather than on boundaries.
        let mesh = TriangleMesh::cuboid([-0.3; 3], [0.2; 3]);
        let v = voxelize_mesh(&mesh, 8).unwrap();
        // -0.3 lies in cell 1, 0.2 in cell 5.
        let expected =
            OccupancyGrid::from_fn([8; 3], |x, y, z| [x, y, z].iter().all(|c| (1..=5).contains(c)))
                .unwrap();
        assert_eq!(v.grid, expected);
    }

    #[test]
    fn sphere_is_single_component_and_deterministic() {
        let mesh = icosphere(0.4, 3);
        let a = voxelize_mesh(&mesh, 16).unwrap();
        let b = voxelize_mesh(&mesh, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.grid.component_count(), 1);
        // center is interior, corners are exterior
        assert!(a.grid.get(8, 8, 8));
        assert!(!a.grid.get(0, 0, 0));
        // Sandwich: every cell whose center is well inside the ball is set,
        // and every set cell overlaps the circumscribed ball.
        let c = |i: usize| -0.5 + (i as f64 + 0.5) / 16.0;
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let p = [c(x), c(y), c(z)];
                    let r = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gap: f64 = p
                        .iter()
                        .map(|v| (v.abs() - 0.5 / 16.0).max(0.0).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if r < 0.39 {
                        assert!(a.grid.get(x, y, z), "interior ({x},{y},{z}) missing");
                    }
                    if a.grid.get(x, y, z) {
                        assert!(gap <= 0.4, "({x},{y},{z}) outside the ball");
                    }
                }
            }
        }
    }

    #[test]
    fn open_mesh_warns_and_keeps_surface() {
        let mut mesh = TriangleMesh::cuboid([-0.25; 3], [0.3; 3]);
        mesh.triangles.truncate(10);
        let v = voxelize_mesh(&mesh, 8).unwrap();
        assert!(matches!(
            v.warning,
            Some(VoxelizeWarning::NonManifoldLeak { .. })
        ));
        assert!(!v.grid.is_vacant());
        // No interior fill: the center cell is not on any remaining face.
        assert!(!v.grid.get(4, 4, 4));
    }
}
