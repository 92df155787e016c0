//! Differentiable emission-absorption ray marcher over voxel fields.
//!
//! Fields live on the unit cube `[-0.5, 0.5]³` with cell centers at
//! `-0.5 + (i + 0.5)/K`. Values between centers are trilinear, the outer
//! half-cell repeats the edge cell, and points outside the cube sample to
//! zero. The vertical axis is z. Azimuth 0 looks from +x,
//! azimuth 90 from +y.

use std::io::Cursor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::OccupancyGrid;
use crate::nn::{Grads, NnError, Tape, Tensor, Values, Var};
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("field contains a non-finite value")]
    NonFiniteField,
    #[error("density contains a negative value ({0})")]
    NegativeDensity(f32),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image encoding failed: {0}")]
    Encode(String),
}

type V3 = [f32; 3];

fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: V3) -> V3 {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Pinhole camera on an orbit around the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub azimuth: f32,
    pub elevation: f32,
    pub radius: f32,
    /// Vertical field of view in degrees.
    pub fov: f32,
    pub width: usize,
    pub height: usize,
    position: V3,
    forward: V3,
    right: V3,
    up: V3,
}

/// Camera at `radius·(cos el·cos az, cos el·sin az, sin el)` looking at the
/// origin, up = +z (+x when looking straight down or up).
pub fn orbit_camera(
    azimuth: f32,
    elevation: f32,
    radius: f32,
    fov: f32,
    width: usize,
    height: usize,
) -> Result<Camera, RenderError> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(RenderError::InvalidParam(format!("radius must be positive, got {radius}")));
    }
    if !(fov > 0.0 && fov < 180.0) {
        return Err(RenderError::InvalidParam(format!("fov must be in (0, 180), got {fov}")));
    }
    if width == 0 || height == 0 {
        return Err(RenderError::InvalidParam("image size must be at least 1×1".into()));
    }
    if !(azimuth.is_finite() && elevation.is_finite()) {
        return Err(RenderError::InvalidParam("angles must be finite".into()));
    }
    let (az, el) = ((azimuth as f64).to_radians(), (elevation as f64).to_radians());
    let r = radius as f64;
    let position = [
        (r * el.cos() * az.cos()) as f32,
        (r * el.cos() * az.sin()) as f32,
        (r * el.sin()) as f32,
    ];
    let forward = normalize([-position[0], -position[1], -position[2]]);
    let mut side = cross(forward, [0.0, 0.0, 1.0]);
    if side.iter().map(|v| v * v).sum::<f32>() < 1e-10 {
        side = cross(forward, [1.0, 0.0, 0.0]);
    }
    let right = normalize(side);
    let up = cross(right, forward);
    Ok(Camera {
        azimuth,
        elevation,
        radius,
        fov,
        width,
        height,
        position,
        forward,
        right,
        up,
    })
}

impl Camera {
    pub fn position(&self) -> V3 {
        self.position
    }

    pub fn forward(&self) -> V3 {
        self.forward
    }

    pub fn up(&self) -> V3 {
        self.up
    }

    /// Origin and unit direction of the ray through the center of pixel
    /// `(px, py)`; row 0 is the top of the image.
    pub fn ray(&self, px: usize, py: usize) -> (V3, V3) {
        let t = ((self.fov as f64).to_radians() / 2.0).tan() as f32;
        let aspect = self.width as f32 / self.height as f32;
        let sx = (2.0 * (px as f32 + 0.5) / self.width as f32 - 1.0) * t * aspect;
        let sy = (1.0 - 2.0 * (py as f32 + 0.5) / self.height as f32) * t;
        let d = [
            self.forward[0] + sx * self.right[0] + sy * self.up[0],
            self.forward[1] + sx * self.right[1] + sy * self.up[1],
            self.forward[2] + sx * self.right[2] + sy * self.up[2],
        ];
        (self.position, normalize(d))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    /// Equidistant samples on each ray's segment inside the cube.
    pub samples: usize,
    /// Multiplier applied to density before compositing.
    pub density_scale: f32,
    pub background: V3,
    /// Per-ray random offset of the sample comb, seeded. `None` renders
    /// deterministically at segment midpoints.
    pub jitter: Option<u64>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            samples: 64,
            density_scale: 1.0,
            background: [1.0; 3],
            jitter: None,
        }
    }
}

impl RenderOptions {
    /// 1.5 samples per cell along an axis-aligned ray.
    pub fn for_resolution(k: usize) -> Self {
        Self {
            samples: (3 * k).div_ceil(2).max(2),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if self.samples < 2 {
            return Err(RenderError::InvalidParam(format!("samples must be >= 2, got {}", self.samples)));
        }
        if !(self.density_scale > 0.0 && self.density_scale.is_finite()) {
            return Err(RenderError::InvalidParam("density scale must be positive".into()));
        }
        if self.background.iter().any(|v| !v.is_finite()) {
            return Err(RenderError::InvalidParam("background must be finite".into()));
        }
        Ok(())
    }
}

/// RGB + alpha image, row-major from the top-left pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    /// `height·width·3`
    pub rgb: Vec<f32>,
    /// `height·width`
    pub alpha: Vec<f32>,
    pub camera: Camera,
}

impl RenderedView {
    pub fn to_rgba8(&self) -> Vec<u8> {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let mut out = Vec::with_capacity(self.width * self.height * 4);
        for i in 0..self.width * self.height {
            out.extend(self.rgb[3 * i..3 * i + 3].iter().map(|&v| q(v)));
            out.push(q(self.alpha[i]));
        }
        out
    }

    /// 8-bit RGBA PNG with the mask in the alpha channel.
    pub fn to_png(&self) -> Result<Vec<u8>, RenderError> {
        let img = image::RgbaImage::from_raw(self.width as u32, self.height as u32, self.to_rgba8())
            .ok_or_else(|| RenderError::Encode("buffer size".into()))?;
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)
            .map_err(|e| RenderError::Encode(e.to_string()))?;
        Ok(buf.into_inner())
    }
}

/// Silhouette of an occupancy grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub alpha: Vec<f32>,
}

/// Spatial dims `[D, H, W]` (z, y, x) and channel count of a field tensor
/// shaped `[C, D, H, W]` or `[1, C, D, H, W]`.
fn field_dims(t: &Tensor) -> Result<(usize, [usize; 3]), RenderError> {
    match *t.shape() {
        [c, d, h, w] | [1, c, d, h, w] => Ok((c, [d, h, w])),
        ref s => Err(RenderError::ShapeMismatch(format!("expected a [C, D, H, W] field, got {s:?}"))),
    }
}

/// The eight trilinear corners of `p` as (flat spatial index, weight);
/// out-of-grid corners get weight 0. `None` outside the unit cube.
fn corners(p: V3, dims: [usize; 3]) -> Option<([usize; 8], [f32; 8])> {
    if p.iter().any(|&v| !(-0.5..=0.5).contains(&v)) {
        return None;
    }
    // axis order in p is (x, y, z); dims are (D=z, H=y, W=x)
    let n = [dims[2], dims[1], dims[0]];
    let mut base = [0isize; 3];
    let mut frac = [0f32; 3];
    for a in 0..3 {
        let mut u = (p[a] + 0.5) * n[a] as f32 - 0.5;
        // a point meant to be a cell center reads that cell alone
        if (u - u.round()).abs() < 1e-5 {
            u = u.round();
        }
        let f = u.floor();
        base[a] = f as isize;
        frac[a] = u - f;
    }
    let mut idx = [0usize; 8];
    let mut w = [0f32; 8];
    for c in 0..8 {
        let off = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
        let mut weight = 1.0;
        let mut ii = [0usize; 3];
        for a in 0..3 {
            // taps beyond the outer cell centers repeat the edge cell
            ii[a] = (base[a] + off[a] as isize).clamp(0, n[a] as isize - 1) as usize;
            weight *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        idx[c] = (ii[2] * n[1] + ii[1]) * n[0] + ii[0];
        w[c] = weight;
    }
    Some((idx, w))
}

/// Trilinear value of every channel of `field` at `point` (zero outside the
/// cube).
pub fn trilinear_sample(field: &Tensor, point: V3) -> Result<Vec<f32>, RenderError> {
    let (c, dims) = field_dims(field)?;
    let cells: usize = dims.iter().product();
    Ok(match corners(point, dims) {
        None => vec![0.0; c],
        Some((idx, w)) => (0..c)
            .map(|ch| {
                let d = &field.data()[ch * cells..][..cells];
                (0..8).map(|i| w[i] * d[idx[i]]).sum()
            })
            .collect(),
    })
}

impl Tape {
    /// Differentiable trilinear lookup of a `[C, D, H, W]` field at each
    /// point; output `[points, C]`.
    pub fn trilinear(&mut self, field: Var, points: &[V3]) -> Result<Var, NnError> {
        let (c, dims) = field_dims(self.value(field)).map_err(|e| NnError::ShapeMismatch(e.to_string()))?;
        let cells: usize = dims.iter().product();
        let taps: Vec<Option<([usize; 8], [f32; 8])>> = points.iter().map(|&p| corners(p, dims)).collect();
        let data = self.value(field).data();
        let mut out = vec![0.0; points.len() * c];
        for (pi, t) in taps.iter().enumerate() {
            if let Some((idx, w)) = t {
                for ch in 0..c {
                    out[pi * c + ch] = (0..8).map(|i| w[i] * data[ch * cells + idx[i]]).sum();
                }
            }
        }
        let value = Tensor::new(vec![points.len(), c], out)?;
        Ok(self.push_op(value, &[field], move |_: &Values<'_>, g: &[f32], grads: &mut Grads<'_>| {
            if let Some(s) = grads.slot(field) {
                for (pi, t) in taps.iter().enumerate() {
                    if let Some((idx, w)) = t {
                        for ch in 0..c {
                            for i in 0..8 {
                                s[ch * cells + idx[i]] += w[i] * g[pi * c + ch];
                            }
                        }
                    }
                }
            }
        }))
    }
}

/// Parametric entry/exit of a ray with the unit cube, clipped to t ≥ 0.
fn slab(o: V3, d: V3) -> Option<(f32, f32)> {
    let (mut t0, mut t1) = (0.0f32, f32::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a].abs() > 0.5 {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut lo, mut hi) = ((-0.5 - o[a]) * inv, (0.5 - o[a]) * inv);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    (t1 > t0).then_some((t0, t1))
}

/// Sample positions along one ray and their spacing.
struct RaySamples {
    points: Vec<V3>,
    delta: f32,
}

fn ray_samples(cam: &Camera, opts: &RenderOptions, px: usize, py: usize) -> Option<RaySamples> {
    let (o, d) = cam.ray(px, py);
    let (t0, t1) = slab(o, d)?;
    let n = opts.samples;
    let delta = (t1 - t0) / n as f32;
    let shift = match opts.jitter {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((py * cam.width + px) as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            rng.random_range(0.0..1.0f32)
        }
        None => 0.5,
    };
    let points = (0..n)
        .map(|j| {
            let t = t0 + (j as f32 + shift) * delta;
            // keep samples on the closed cube despite rounding
            [0, 1, 2].map(|a| (o[a] + t * d[a]).clamp(-0.5, 0.5))
        })
        .collect();
    Some(RaySamples { points, delta })
}

/// Borrowed density (1 channel) and albedo (3 channels) fields.
struct Fields<'a> {
    density: &'a [f32],
    albedo: &'a [f32],
    dims: [usize; 3],
    cells: usize,
}

impl<'a> Fields<'a> {
    fn new(density: &'a Tensor, albedo: &'a Tensor) -> Result<Self, RenderError> {
        let (cd, dims) = field_dims(density)?;
        let (ca, adims) = field_dims(albedo)?;
        if cd != 1 || ca != 3 || dims != adims {
            return Err(RenderError::ShapeMismatch(format!(
                "density {:?} and albedo {:?} must be 1- and 3-channel fields of equal size",
                density.shape(),
                albedo.shape()
            )));
        }
        for &v in density.data() {
            if !v.is_finite() {
                return Err(RenderError::NonFiniteField);
            }
            if v < 0.0 {
                return Err(RenderError::NegativeDensity(v));
            }
        }
        if !albedo.all_finite() {
            return Err(RenderError::NonFiniteField);
        }
        Ok(Self {
            density: density.data(),
            albedo: albedo.data(),
            dims,
            cells: dims.iter().product(),
        })
    }

    /// (σ, rgb) at a point, accumulated in f64.
    fn sample(&self, p: V3) -> (f64, [f64; 3], Option<([usize; 8], [f32; 8])>) {
        match corners(p, self.dims) {
            None => (0.0, [0.0; 3], None),
            Some((idx, w)) => {
                let mut s = 0.0;
                let mut c = [0.0; 3];
                for i in 0..8 {
                    let wi = w[i] as f64;
                    s += wi * self.density[idx[i]] as f64;
                    for (ch, cv) in c.iter_mut().enumerate() {
                        *cv += wi * self.albedo[ch * self.cells + idx[i]] as f64;
                    }
                }
                (s, c, Some((idx, w)))
            }
        }
    }
}

// Compositing runs in f64 and rounds to f32 once per pixel, so a small
// change in one field entry is not swamped by accumulated rounding.

/// Front-to-back compositing of one ray: `[r, g, b, alpha]`.
fn composite(f: &Fields<'_>, rs: &RaySamples, opts: &RenderOptions) -> [f64; 4] {
    let mut trans = 1.0f64;
    let mut rgb = [0.0f64; 3];
    let k = opts.density_scale as f64 * rs.delta as f64;
    for &p in &rs.points {
        let (s, c, _) = f.sample(p);
        let a = -(-s * k).exp_m1();
        for ch in 0..3 {
            rgb[ch] += trans * a * c[ch];
        }
        trans *= 1.0 - a;
    }
    for ch in 0..3 {
        rgb[ch] += trans * opts.background[ch] as f64;
    }
    [rgb[0], rgb[1], rgb[2], 1.0 - trans]
}

/// Adds this ray's contribution to `∂L/∂density` and `∂L/∂albedo`, given
/// `g = ∂L/∂[r, g, b, alpha]` for the pixel.
fn composite_backward(
    f: &Fields<'_>,
    rs: &RaySamples,
    opts: &RenderOptions,
    g: [f32; 4],
    gd: &mut [f64],
    ga: &mut [f64],
) {
    let n = rs.points.len();
    let g = g.map(f64::from);
    let k = opts.density_scale as f64 * rs.delta as f64;
    let mut alphas = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut taps = Vec::with_capacity(n);
    for &p in &rs.points {
        let (s, c, t) = f.sample(p);
        alphas.push(-(-s * k).exp_m1());
        colors.push(c);
        taps.push(t);
    }
    // behind = composite of samples after j over the background
    // tail = Π_{l > j} (1 - α_l)
    let mut behind = opts.background.map(f64::from);
    let mut tail = 1.0f64;
    let mut trans: Vec<f64> = Vec::with_capacity(n);
    let mut t = 1.0f64;
    for &a in &alphas {
        trans.push(t);
        t *= 1.0 - a;
    }
    for j in (0..n).rev() {
        let Some((idx, w)) = taps[j] else {
            // no field support: α = 0, color 0, nothing to propagate
            behind = [0, 1, 2].map(|ch| alphas[j] * colors[j][ch] + (1.0 - alphas[j]) * behind[ch]);
            tail *= 1.0 - alphas[j];
            continue;
        };
        let (a, c, tj) = (alphas[j], colors[j], trans[j]);
        let mut d_alpha = g[3] * tj * tail;
        for ch in 0..3 {
            d_alpha += g[ch] * tj * (c[ch] - behind[ch]);
        }
        let d_sigma = d_alpha * (1.0 - a) * k;
        let d_color = [0, 1, 2].map(|ch| g[ch] * tj * a);
        for i in 0..8 {
            if w[i] == 0.0 {
                continue;
            }
            let wi = w[i] as f64;
            gd[idx[i]] += wi * d_sigma;
            for ch in 0..3 {
                ga[ch * f.cells + idx[i]] += wi * d_color[ch];
            }
        }
        behind = [0, 1, 2].map(|ch| a * c[ch] + (1.0 - a) * behind[ch]);
        tail *= 1.0 - a;
    }
}

fn render_pixels_wide(f: &Fields<'_>, cam: &Camera, opts: &RenderOptions) -> Vec<f64> {
    let (w, h) = (cam.width, cam.height);
    let rows = par::map_range(h, |py| {
        let mut row = Vec::with_capacity(w * 4);
        for px in 0..w {
            let px4 = match ray_samples(cam, opts, px, py) {
                Some(rs) => composite(f, &rs, opts),
                None => [opts.background[0] as f64, opts.background[1] as f64, opts.background[2] as f64, 0.0],
            };
            row.extend_from_slice(&px4);
        }
        row
    });
    rows.concat()
}

fn render_pixels(f: &Fields<'_>, cam: &Camera, opts: &RenderOptions) -> Vec<f32> {
    render_pixels_wide(f, cam, opts).into_iter().map(|v| v as f32).collect()
}

/// Interleaved `[H, W, 4]` pixels before the final rounding to f32. Finite
/// difference checks at small steps need these: the f32 rounding of each
/// pixel is otherwise comparable to the perturbation itself.
pub fn render_pixels_f64(density: &Tensor, albedo: &Tensor, cam: &Camera, opts: &RenderOptions) -> Result<Vec<f64>, RenderError> {
    opts.validate()?;
    let f = Fields::new(density, albedo)?;
    Ok(render_pixels_wide(&f, cam, opts))
}

/// Renders density `[1, 1, K, K, K]` and albedo `[1, 3, K, K, K]` without
/// recording gradients.
pub fn render_fields(density: &Tensor, albedo: &Tensor, cam: &Camera, opts: &RenderOptions) -> Result<RenderedView, RenderError> {
    opts.validate()?;
    let f = Fields::new(density, albedo)?;
    let px = render_pixels(&f, cam, opts);
    Ok(split_view(&px, cam))
}

fn split_view(px: &[f32], cam: &Camera) -> RenderedView {
    let n = cam.width * cam.height;
    let mut rgb = Vec::with_capacity(n * 3);
    let mut alpha = Vec::with_capacity(n);
    for p in px.chunks_exact(4) {
        rgb.extend_from_slice(&p[..3]);
        alpha.push(p[3]);
    }
    RenderedView {
        width: cam.width,
        height: cam.height,
        rgb,
        alpha,
        camera: cam.clone(),
    }
}

/// Row blocks used to privatize gradient accumulation. Fixed, so the
/// reduction order never depends on the thread count.
const GRAD_BLOCKS: usize = 4;

/// Records a render on the tape. The output is `[H, W, 4]` (rgb, alpha);
/// gradients flow to every density and albedo entry the rays touch.
pub fn render(
    tape: &mut Tape,
    density: Var,
    albedo: Var,
    cam: &Camera,
    opts: &RenderOptions,
) -> Result<Var, RenderError> {
    opts.validate()?;
    let px = {
        let f = Fields::new(tape.value(density), tape.value(albedo))?;
        render_pixels(&f, cam, opts)
    };
    let value = Tensor::new(vec![cam.height, cam.width, 4], px).expect("pixel count matches");
    let (cam, opts) = (cam.clone(), opts.clone());
    Ok(tape.push_op(value, &[density, albedo], move |vals: &Values<'_>, g: &[f32], grads: &mut Grads<'_>| {
        let f = Fields::new(vals.get(density), vals.get(albedo)).expect("validated in forward");
        let (w, h) = (cam.width, cam.height);
        let rows_per = h.div_ceil(GRAD_BLOCKS);
        let partials = par::map_range(GRAD_BLOCKS, |b| {
            let mut gd = vec![0.0f64; f.cells];
            let mut ga = vec![0.0f64; 3 * f.cells];
            for py in (b * rows_per)..((b + 1) * rows_per).min(h) {
                for px in 0..w {
                    let gp = &g[(py * w + px) * 4..][..4];
                    if gp.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    if let Some(rs) = ray_samples(&cam, &opts, px, py) {
                        composite_backward(&f, &rs, &opts, [gp[0], gp[1], gp[2], gp[3]], &mut gd, &mut ga);
                    }
                }
            }
            (gd, ga)
        });
        if let Some(s) = grads.slot(density) {
            let mut acc = vec![0.0f64; s.len()];
            for (gd, _) in &partials {
                acc.iter_mut().zip(gd).for_each(|(a, b)| *a += b);
            }
            s.iter_mut().zip(&acc).for_each(|(a, b)| *a += *b as f32);
        }
        if let Some(s) = grads.slot(albedo) {
            let mut acc = vec![0.0f64; s.len()];
            for (_, ga) in &partials {
                acc.iter_mut().zip(ga).for_each(|(a, b)| *a += b);
            }
            s.iter_mut().zip(&acc).for_each(|(a, b)| *a += *b as f32);
        }
    }))
}

/// Renders a view and returns `(rgb [H, W, 3], alpha [H, W, 1])` tape nodes.
pub fn render_split(
    tape: &mut Tape,
    density: Var,
    albedo: Var,
    cam: &Camera,
    opts: &RenderOptions,
) -> crate::Result<(Var, Var)> {
    let out = render(tape, density, albedo, cam, opts)?;
    Ok((tape.slice_last(out, 0, 3)?, tape.slice_last(out, 3, 1)?))
}

/// Silhouette of the occupied cells: a sample inside an occupied cell is
/// fully opaque (the infinite-density limit of the same marcher), so a
/// pixel's alpha is 1 exactly when its ray meets an occupied cell.
pub fn render_occupancy_mask(grid: &OccupancyGrid, cam: &Camera, opts: &RenderOptions) -> Result<MaskImage, RenderError> {
    opts.validate()?;
    let [nx, ny, nz] = grid.dims();
    let cell = |p: V3| -> bool {
        let i = [nx, ny, nz]
            .iter()
            .zip(p)
            .map(|(&n, v)| (((v + 0.5) * n as f32).floor() as usize).min(n - 1))
            .collect::<Vec<_>>();
        grid.get(i[0], i[1], i[2])
    };
    let rows = par::map_range(cam.height, |py| {
        (0..cam.width)
            .map(|px| match ray_samples(cam, opts, px, py) {
                Some(rs) if rs.points.iter().any(|&p| cell(p)) => 1.0,
                _ => 0.0,
            })
            .collect::<Vec<f32>>()
    });
    Ok(MaskImage {
        width: cam.width,
        height: cam.height,
        alpha: rows.concat(),
    })
}
