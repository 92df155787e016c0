//! Isosurface extraction, vertex colouring and colored-mesh files.
//!
//! Marching cubes runs on the lattice of cell centers padded with one layer
//! of zero density pinned to the cube faces, so surfaces touching the grid
//! border still close. The 256-case table is generated at first use: on every
//! cube face the crossing edges are paired so that inside corners are kept
//! apart on ambiguous faces, and the per-face segments are chained into
//! loops. Neighbouring cubes see the same face with the same corners, so they
//! agree on its segments and the surface is watertight.
//!
//! PLY files are binary little-endian:
//!
//! ```text
//! ply
//! format binary_little_endian 1.0
//! element vertex <n>
//! property float x
//! property float y
//! property float z
//! property uchar red
//! property uchar green
//! property uchar blue
//! element face <m>
//! property list uchar uint vertex_indices
//! end_header
//! <n × (3 f32 + 3 u8)> <m × (u8 3, 3 u32)>
//! ```
//!
//! OBJ files use `v x y z r g b` lines with colours in `[0, 1]` and 1-based
//! `f a b c` faces.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::sync::OnceLock;

use thiserror::Error;

use crate::detailizer::DetailizedShape;
use crate::formats::field_layout;
use crate::mesh::{MeshError, TriangleMesh};
use crate::nn::Tensor;
use crate::par;
use crate::render::{trilinear_sample, RenderError};

/// Default iso-level; equal to the evaluation occupancy threshold.
pub const DEFAULT_ISO: f32 = 30.0;
/// Edge crossings are kept this far (as a fraction of the edge) from the
/// lattice points so no two vertices coincide.
const EDGE_MARGIN: f32 = 1e-3;
/// Triangles below this area are dropped.
pub const MIN_AREA: f32 = 1e-12;

#[derive(Debug, Error)]
pub enum MeshIoError {
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("malformed mesh file: {0}")]
    Parse(String),
    #[error("invalid iso-level {0}")]
    BadIso(f32),
    #[error("bad field: {0}")]
    BadField(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

// Corner c of a cube sits at offset (c & 1, (c >> 1) & 1, c >> 2).
fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, c >> 2]
}

/// Cube edge `e` joins corners `EDGES[e]`, which differ in one axis.
const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|&(p, q)| (p, q) == (a.min(b), a.max(b)))
        .expect("corners are adjacent")
}

/// Corners of each face in counter-clockwise order seen from outside.
fn faces() -> [[usize; 4]; 6] {
    let mut out = [[0; 4]; 6];
    for axis in 0..3 {
        for side in 0..2 {
            let mut cs: Vec<usize> = (0..8).filter(|&c| corner_offset(c)[axis] == side).collect();
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            let angle = |c: usize| {
                let o = corner_offset(c);
                (o[v] as f32 - 0.5).atan2(o[u] as f32 - 0.5)
            };
            cs.sort_by(|&a, &b| angle(a).total_cmp(&angle(b)));
            // u × v = +axis, so the sorted order is CCW about +axis
            if side == 0 {
                cs.reverse();
            }
            out[axis * 2 + side] = [cs[0], cs[1], cs[2], cs[3]];
        }
    }
    out
}

/// One closed polygon of crossing edges, and how to triangulate it.
#[derive(Clone, Debug)]
struct Polygon {
    edges: Vec<u8>,
    /// Fan apex index into `edges`, or `None` to fan from the centroid.
    apex: Option<usize>,
}

fn build_table() -> Vec<Vec<Polygon>> {
    let faces = faces();
    let face_edges: Vec<[usize; 4]> = faces
        .iter()
        .map(|f| [0, 1, 2, 3].map(|i| edge_between(f[i], f[(i + 1) % 4])))
        .collect();
    (0..256usize)
        .map(|case| {
            let inside = |c: usize| case >> c & 1 == 1;
            // next[e] = exit edge of the segment entering the face where e is an entry
            let mut next = [usize::MAX; 12];
            for f in &faces {
                for i in 0..4 {
                    let (a, b) = (f[i], f[(i + 1) % 4]);
                    if inside(a) || !inside(b) {
                        continue;
                    }
                    // walk the inside run starting at b
                    let mut j = (i + 1) % 4;
                    while inside(f[(j + 1) % 4]) {
                        j = (j + 1) % 4;
                    }
                    next[edge_between(a, b)] = edge_between(f[j], f[(j + 1) % 4]);
                }
            }
            let mut used = [false; 12];
            let mut polys = Vec::new();
            for start in 0..12 {
                if next[start] == usize::MAX || used[start] {
                    continue;
                }
                let mut loop_edges = Vec::new();
                let mut e = start;
                while !used[e] {
                    used[e] = true;
                    loop_edges.push(e as u8);
                    e = next[e];
                }
                let shares_face = |a: u8, b: u8| face_edges.iter().any(|fe| fe.contains(&(a as usize)) && fe.contains(&(b as usize)));
                let n = loop_edges.len();
                // an apex whose diagonals never join two edges of one face: such a
                // diagonal could reappear in the neighbouring cube
                let apex = (0..n).find(|&k| {
                    (2..n - 1).all(|d| !shares_face(loop_edges[k], loop_edges[(k + d) % n]))
                });
                polys.push(Polygon { edges: loop_edges, apex });
            }
            polys
        })
        .collect()
}

fn table() -> &'static [Vec<Polygon>] {
    static TABLE: OnceLock<Vec<Vec<Polygon>>> = OnceLock::new();
    TABLE.get_or_init(build_table)
}

/// Padded lattice: index `i` in `0..=k+1` is cell `i - 1`; the pads hold
/// zero density and sit on the cube faces.
struct Lattice<'a> {
    data: &'a [f32],
    n: [usize; 3],
}

impl Lattice<'_> {
    fn value(&self, p: [usize; 3]) -> f32 {
        if (0..3).any(|a| p[a] == 0 || p[a] > self.n[a]) {
            return 0.0;
        }
        self.data[((p[2] - 1) * self.n[1] + (p[1] - 1)) * self.n[0] + (p[0] - 1)]
    }

    fn coord(&self, axis: usize, i: usize) -> f32 {
        let k = self.n[axis] as f32;
        (-0.5 + (i as f32 - 0.5) / k).clamp(-0.5, 0.5)
    }

    fn flat(&self, p: [usize; 3]) -> u64 {
        ((p[2] * (self.n[1] + 2) + p[1]) * (self.n[0] + 2) + p[0]) as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum VertexKey {
    /// Lower lattice point and axis of a crossed lattice edge.
    Edge(u64, u8),
    /// Centroid of polygon `loop` in cube `cube`.
    Centroid(u64, u8),
}

/// Triangulates the `iso` level set of a `[1, 1, D, H, W]` density field.
/// Output is deterministic: vertices are numbered in order of first use while
/// visiting cubes in lattice order.
pub fn marching_cubes(density: &Tensor, iso: f32) -> Result<TriangleMesh, MeshIoError> {
    if !(iso > 0.0 && iso.is_finite()) {
        return Err(MeshIoError::BadIso(iso));
    }
    let (c, n) = field_layout(density).map_err(MeshIoError::BadField)?;
    if c != 1 {
        return Err(MeshIoError::BadField(format!("density must have 1 channel, got {c}")));
    }
    let lat = Lattice { data: density.data(), n };
    let tab = table();

    let slabs = par::map_range(n[2] + 1, |z| {
        let mut tris: Vec<[VertexKey; 3]> = Vec::new();
        let mut centroids: Vec<(VertexKey, [f32; 3])> = Vec::new();
        for y in 0..=n[1] {
            for x in 0..=n[0] {
                let base = [x, y, z];
                let at = |c: usize| {
                    let o = corner_offset(c);
                    [base[0] + o[0], base[1] + o[1], base[2] + o[2]]
                };
                let mut case = 0usize;
                for c in 0..8 {
                    if lat.value(at(c)) > iso {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let key = |e: u8| {
                    let (a, b) = EDGES[e as usize];
                    let axis = (a ^ b).trailing_zeros() as u8;
                    VertexKey::Edge(lat.flat(at(a)), axis)
                };
                let cube = lat.flat(base);
                for (li, poly) in tab[case].iter().enumerate() {
                    let ks: Vec<VertexKey> = poly.edges.iter().map(|&e| key(e)).collect();
                    let m = ks.len();
                    match poly.apex {
                        Some(k) => {
                            for d in 1..m - 1 {
                                tris.push([ks[k], ks[(k + d) % m], ks[(k + d + 1) % m]]);
                            }
                        }
                        None => {
                            let ck = VertexKey::Centroid(cube, li as u8);
                            let mut sum = [0.0f32; 3];
                            for &e in &poly.edges {
                                let p = edge_point(&lat, key(e), iso);
                                (0..3).for_each(|a| sum[a] += p[a]);
                            }
                            centroids.push((ck, sum.map(|s| s / m as f32)));
                            for d in 0..m {
                                tris.push([ck, ks[d], ks[(d + 1) % m]]);
                            }
                        }
                    }
                }
            }
        }
        (tris, centroids)
    });

    let mut ids: HashMap<VertexKey, u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (tris, centroids) in slabs {
        let cpos: HashMap<VertexKey, [f32; 3]> = centroids.into_iter().collect();
        for t in tris {
            let tri = t.map(|k| {
                *ids.entry(k).or_insert_with(|| {
                    vertices.push(match k {
                        VertexKey::Edge(..) => edge_point(&lat, k, iso),
                        VertexKey::Centroid(..) => cpos[&k],
                    });
                    (vertices.len() - 1) as u32
                })
            });
            triangles.push(tri);
        }
    }
    let mut mesh = TriangleMesh::new(vertices, triangles)?;
    let keep: Vec<bool> = (0..mesh.triangles.len()).map(|t| mesh.triangle_area(t) >= MIN_AREA).collect();
    if keep.iter().any(|k| !k) {
        let mut i = 0;
        mesh.triangles.retain(|_| {
            i += 1;
            keep[i - 1]
        });
    }
    Ok(mesh)
}

fn edge_point(lat: &Lattice<'_>, key: VertexKey, iso: f32) -> [f32; 3] {
    let VertexKey::Edge(flat, axis) = key else {
        unreachable!("centroids are positioned separately")
    };
    let (px, rest) = (flat as usize % (lat.n[0] + 2), flat as usize / (lat.n[0] + 2));
    let p = [px, rest % (lat.n[1] + 2), rest / (lat.n[1] + 2)];
    let mut q = p;
    q[axis as usize] += 1;
    let (va, vb) = (lat.value(p), lat.value(q));
    let t = ((iso - va) / (vb - va)).clamp(EDGE_MARGIN, 1.0 - EDGE_MARGIN);
    let mut out = [0.0; 3];
    for a in 0..3 {
        let (ca, cb) = (lat.coord(a, p[a]), lat.coord(a, q[a]));
        out[a] = ca + t * (cb - ca);
    }
    out
}

/// Sets each vertex colour to the trilinear albedo at its position, clamped
/// to `[0, 1]`.
pub fn color_vertices(mesh: &mut TriangleMesh, albedo: &Tensor) -> Result<(), MeshIoError> {
    let colors = mesh
        .vertices
        .iter()
        .map(|&v| {
            let c = trilinear_sample(albedo, v)?;
            if c.len() != 3 {
                return Err(MeshIoError::BadField(format!("albedo must have 3 channels, got {}", c.len())));
            }
            Ok([c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0), c[2].clamp(0.0, 1.0)])
        })
        .collect::<Result<Vec<_>, _>>()?;
    mesh.colors = Some(colors);
    Ok(())
}

/// Marching cubes of the density plus albedo colours.
pub fn extract_mesh(shape: &DetailizedShape, iso: f32) -> Result<TriangleMesh, MeshIoError> {
    let mut mesh = marching_cubes(&shape.density, iso)?;
    color_vertices(&mut mesh, &shape.albedo)?;
    Ok(mesh)
}

fn quantize(c: f32) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn vertex_color(mesh: &TriangleMesh, i: usize) -> [f32; 3] {
    mesh.colors.as_ref().map_or([1.0; 3], |c| c[i])
}

pub fn write_ply(w: &mut impl Write, mesh: &TriangleMesh) -> Result<(), MeshIoError> {
    mesh.validate()?;
    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    let _ = writeln!(header, "element vertex {}", mesh.vertices.len());
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    let _ = writeln!(header, "element face {}", mesh.triangles.len());
    header.push_str("property list uchar uint vertex_indices\nend_header\n");
    let mut buf = header.into_bytes();
    buf.reserve(mesh.vertices.len() * 15 + mesh.triangles.len() * 13);
    for (i, v) in mesh.vertices.iter().enumerate() {
        for c in v {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        buf.extend(vertex_color(mesh, i).map(quantize));
    }
    for t in &mesh.triangles {
        buf.push(3);
        for i in t {
            buf.extend_from_slice(&i.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn ply_bytes(mesh: &TriangleMesh) -> Result<Vec<u8>, MeshIoError> {
    let mut out = Vec::new();
    write_ply(&mut out, mesh)?;
    Ok(out)
}

fn parse_err(msg: impl Into<String>) -> MeshIoError {
    MeshIoError::Parse(msg.into())
}

/// Reads the PLY layout written by [`write_ply`]; colours are optional.
pub fn read_ply(r: &mut impl BufRead) -> Result<TriangleMesh, MeshIoError> {
    let mut line = String::new();
    let mut next_line = |line: &mut String| -> Result<String, MeshIoError> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(parse_err("unexpected end of header"));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut line)? != "ply" {
        return Err(parse_err("missing ply magic"));
    }
    if next_line(&mut line)? != "format binary_little_endian 1.0" {
        return Err(parse_err("only binary little-endian PLY is supported"));
    }
    let (mut nv, mut nf) = (None, None);
    let mut vertex_props = Vec::new();
    let mut current = "";
    loop {
        let l = next_line(&mut line)?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        match parts.as_slice() {
            ["end_header"] => break,
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                nv = Some(n.parse::<usize>().map_err(|_| parse_err("bad vertex count"))?);
                current = "vertex";
            }
            ["element", "face", n] => {
                nf = Some(n.parse::<usize>().map_err(|_| parse_err("bad face count"))?);
                current = "face";
            }
            ["property", "list", "uchar", "uint" | "int", _] if current == "face" => {}
            ["property", ty, name] if current == "vertex" => vertex_props.push((ty.to_string(), name.to_string())),
            _ => return Err(parse_err(format!("unsupported header line {l:?}"))),
        }
    }
    let (nv, nf) = (nv.ok_or_else(|| parse_err("no vertex element"))?, nf.unwrap_or(0));
    let expected: Vec<(&str, &str)> = vec![("float", "x"), ("float", "y"), ("float", "z")];
    let props: Vec<(&str, &str)> = vertex_props.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let with_color = match props.len() {
        3 if props == expected => false,
        6 if props[..3] == expected[..] && props[3..] == [("uchar", "red"), ("uchar", "green"), ("uchar", "blue")] => true,
        _ => return Err(parse_err(format!("unsupported vertex properties {props:?}"))),
    };
    let mut vertices = Vec::with_capacity(nv);
    let mut colors = Vec::with_capacity(if with_color { nv } else { 0 });
    let mut f4 = [0u8; 4];
    for _ in 0..nv {
        let mut v = [0.0f32; 3];
        for c in &mut v {
            r.read_exact(&mut f4)?;
            *c = f32::from_le_bytes(f4);
        }
        vertices.push(v);
        if with_color {
            let mut rgb = [0u8; 3];
            r.read_exact(&mut rgb)?;
            colors.push(rgb.map(|b| b as f32 / 255.0));
        }
    }
    let mut triangles = Vec::with_capacity(nf);
    for _ in 0..nf {
        let mut count = [0u8; 1];
        r.read_exact(&mut count)?;
        if count[0] != 3 {
            return Err(parse_err(format!("face with {} vertices", count[0])));
        }
        let mut t = [0u32; 3];
        for i in &mut t {
            r.read_exact(&mut f4)?;
            *i = u32::from_le_bytes(f4);
        }
        triangles.push(t);
    }
    let mut mesh = TriangleMesh::new(vertices, triangles)?;
    if with_color {
        mesh.colors = Some(colors);
    }
    Ok(mesh)
}

pub fn write_obj(w: &mut impl Write, mesh: &TriangleMesh) -> Result<(), MeshIoError> {
    mesh.validate()?;
    let mut s = String::new();
    for (i, v) in mesh.vertices.iter().enumerate() {
        let c = vertex_color(mesh, i);
        let _ = writeln!(s, "v {} {} {} {} {} {}", v[0], v[1], v[2], c[0], c[1], c[2]);
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// Reads `v` (with or without colour) and triangular `f` lines; other lines
/// are ignored. Face entries may use the `i/t/n` form.
pub fn read_obj(r: &mut impl BufRead) -> Result<TriangleMesh, MeshIoError> {
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut triangles = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let nums = parts
                    .map(|p| p.parse::<f32>().map_err(|_| parse_err(format!("line {}: bad number {p:?}", ln + 1))))
                    .collect::<Result<Vec<_>, _>>()?;
                match nums.len() {
                    3 => vertices.push([nums[0], nums[1], nums[2]]),
                    6 => {
                        vertices.push([nums[0], nums[1], nums[2]]);
                        colors.push([nums[3], nums[4], nums[5]]);
                    }
                    n => return Err(parse_err(format!("line {}: vertex with {n} values", ln + 1))),
                }
            }
            Some("f") => {
                let idx = parts
                    .map(|p| {
                        p.split('/')
                            .next()
                            .and_then(|s| s.parse::<u32>().ok())
                            .filter(|&i| i >= 1)
                            .map(|i| i - 1)
                            .ok_or_else(|| parse_err(format!("line {}: bad face index {p:?}", ln + 1)))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                if idx.len() != 3 {
                    return Err(parse_err(format!("line {}: only triangles are supported", ln + 1)));
                }
                triangles.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    let mut mesh = TriangleMesh::new(vertices, triangles)?;
    if !colors.is_empty() {
        if colors.len() != mesh.vertices.len() {
            return Err(parse_err("some vertices lack colours"));
        }
        mesh.colors = Some(colors);
    }
    Ok(mesh)
}

pub fn export_ply(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<(), MeshIoError> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    write_ply(&mut f, mesh)?;
    f.flush()?;
    Ok(())
}

pub fn export_obj(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<(), MeshIoError> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    write_obj(&mut f, mesh)?;
    f.flush()?;
    Ok(())
}

pub fn import_ply(path: impl AsRef<Path>) -> Result<TriangleMesh, MeshIoError> {
    read_ply(&mut io::BufReader::new(std::fs::File::open(path)?))
}

pub fn import_obj(path: impl AsRef<Path>) -> Result<TriangleMesh, MeshIoError> {
    read_obj(&mut io::BufReader::new(std::fs::File::open(path)?))
}
