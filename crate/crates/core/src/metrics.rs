//! Evaluation metrics: structure IoUs against the coarse input, a CLIP-style
//! cosine score and the Fréchet distance between feature sets.
//!
//! The shipped embedder and feature extractor are seeded random projections
//! of downsampled pixels. They are deterministic stand-ins with no semantic
//! content; real CLIP/Inception adapters plug in through the same traits.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detailizer::DetailizedShape;
use crate::formats::field_layout;
use crate::grid::{GridError, OccupancyGrid};
use crate::guidance::{ProceduralStylizer, PromptSpec};
use crate::nn::Tensor;
use crate::render::{orbit_camera, render_fields, RenderError, RenderOptions, RenderedView};

/// Density above which a fine cell counts as occupied.
pub const DEFAULT_THRESHOLD: f32 = 30.0;
/// Eigenvalues above this (negative) bound are rounding noise and clamp to 0.
pub const EIGEN_TOLERANCE: f64 = -1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("fine size {fine} is not a multiple of {coarse}")]
    IndivisibleDims { fine: usize, coarse: usize },
    #[error("grid dims differ: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("reference grid is empty")]
    EmptyReference,
    #[error("embedding has zero norm")]
    ZeroNorm,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("feature set needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("matrix square root is ill-conditioned (eigenvalue {0})")]
    IllConditioned(f64),
    #[error("bad field: {0}")]
    BadField(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Threshold the fine density strictly above `threshold`, then max-pool to
/// `k` cells per axis.
pub fn voxelize_density(density: &Tensor, threshold: f32, k: usize) -> Result<OccupancyGrid, MetricError> {
    let (c, dims) = field_layout(density).map_err(MetricError::BadField)?;
    if c != 1 {
        return Err(MetricError::BadField(format!("density must have 1 channel, got {c}")));
    }
    if k == 0 || dims.iter().any(|&d| d % k != 0 || d == 0) || dims[0] != dims[1] || dims[1] != dims[2] {
        return Err(MetricError::IndivisibleDims { fine: dims[0], coarse: k });
    }
    let cells = density.data().iter().map(|&v| v > threshold).collect();
    let fine = OccupancyGrid::from_cells(dims, cells)?;
    Ok(fine.downsample_max(dims[0] / k)?)
}

fn counts(v: &OccupancyGrid, w: &OccupancyGrid) -> Result<(usize, usize, usize), MetricError> {
    if v.dims() != w.dims() {
        return Err(MetricError::DimMismatch(v.dims(), w.dims()));
    }
    let (mut inter, mut union) = (0, 0);
    for (&a, &b) in v.cells().iter().zip(w.cells()) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok((inter, union, v.count()))
}

/// `|v ∧ v'| / |v ∨ v'|`; two empty grids score 1.
pub fn strict_iou(v: &OccupancyGrid, v_gen: &OccupancyGrid) -> Result<f64, MetricError> {
    let (inter, union, _) = counts(v, v_gen)?;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `|v ∧ v'| / |v|`: the fraction of the reference that is covered.
pub fn loose_iou(v: &OccupancyGrid, v_gen: &OccupancyGrid) -> Result<f64, MetricError> {
    let (inter, _, n) = counts(v, v_gen)?;
    if n == 0 {
        return Err(MetricError::EmptyReference);
    }
    Ok(inter as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Text,
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub source: EmbeddingSource,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, source: EmbeddingSource) -> Result<Self, MetricError> {
        if values.is_empty() {
            return Err(MetricError::LengthMismatch(0, 1));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite("embedding"));
        }
        Ok(Self { values, source })
    }
}

/// `max(100·cos(a, b), 0)`.
pub fn clip_score(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, MetricError> {
    if a.values.len() != b.values.len() {
        return Err(MetricError::LengthMismatch(a.values.len(), b.values.len()));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let na: f64 = a.values.iter().map(|x| x * x).sum();
    let nb: f64 = b.values.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(MetricError::ZeroNorm);
    }
    // sqrt(na·nb) rather than sqrt(na)·sqrt(nb): for a == b this is exactly |dot|
    let cos = (dot / (na * nb).sqrt()).clamp(-1.0, 1.0);
    Ok((100.0 * cos).max(0.0))
}

/// Per-image feature rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    rows: Vec<Vec<f64>>,
}

impl FeatureSet {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, MetricError> {
        if rows.len() < 2 {
            return Err(MetricError::TooFewRows(rows.len()));
        }
        let w = rows[0].len();
        if w == 0 {
            return Err(MetricError::LengthMismatch(0, 1));
        }
        for r in &rows {
            if r.len() != w {
                return Err(MetricError::LengthMismatch(r.len(), w));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(MetricError::NonFinite("features"));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn width(&self) -> usize {
        self.rows[0].len()
    }

    /// Mean and unbiased covariance.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = (self.rows.len(), self.width());
        let x = DMatrix::from_fn(n, d, |i, j| self.rows[i][j]);
        let mu = x.row_mean().transpose();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        (mu, cov)
    }

    /// Whitespace-separated numbers, one row per line.
    pub fn parse(text: &str) -> Result<Self, MetricError> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(|c: char| c.is_whitespace() || c == ',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<f64>().map_err(|_| MetricError::NonFinite("feature file")))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(rows)
    }
}

/// Symmetric PSD square root by eigendecomposition, clamping eigenvalues in
/// `[EIGEN_TOLERANCE, 0)` to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64), MetricError> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut trace = 0.0;
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < EIGEN_TOLERANCE {
            return Err(MetricError::IllConditioned(*v));
        }
        *v = v.max(0.0).sqrt();
        trace += *v;
    }
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    Ok((root, trace))
}

/// `‖μ₁ − μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, with the cross term computed
/// as the trace of `(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}`.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64, MetricError> {
    if a.width() != b.width() {
        return Err(MetricError::LengthMismatch(a.width(), b.width()));
    }
    let (mu1, s1) = a.moments();
    let (mu2, s2) = b.moments();
    let (r1, _) = psd_sqrt(&s1)?;
    let (_, cross) = psd_sqrt(&(&r1 * &s2 * &r1))?;
    let gap = (&mu1 - &mu2).norm_squared();
    Ok((gap + s1.trace() + s2.trace() - 2.0 * cross).max(0.0))
}

/// Image features for the Fréchet distance.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, view: &RenderedView) -> Vec<f64>;
}

/// Text and image embeddings for the cosine score.
pub trait Embedder: Send + Sync {
    fn embed_text(&self, prompt: &PromptSpec) -> EmbeddingVector;
    fn embed_image(&self, view: &RenderedView) -> EmbeddingVector;
}

/// Box-downsamples the rgb image to `size²` and multiplies by a seeded
/// `dim × 3·size²` matrix with entries uniform in `[-1, 1]/√(3·size²)`.
/// Non-semantic.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomProjection {
    pub size: usize,
    pub dim: usize,
    matrix: Vec<f64>,
}

impl RandomProjection {
    pub fn new(size: usize, dim: usize, seed: u64) -> Self {
        let n = 3 * size * size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (n as f64).sqrt();
        let matrix = (0..dim * n).map(|_| rng.random_range(-1.0..1.0) * s).collect();
        Self { size, dim, matrix }
    }

    fn pooled(&self, rgb: &[f32], w: usize, h: usize) -> Vec<f64> {
        let s = self.size;
        let mut out = vec![0.0f64; 3 * s * s];
        let mut n = vec![0usize; s * s];
        for y in 0..h {
            for x in 0..w {
                let cell = (y * s / h) * s + x * s / w;
                n[cell] += 1;
                for ch in 0..3 {
                    out[cell * 3 + ch] += rgb[(y * w + x) * 3 + ch] as f64;
                }
            }
        }
        for (cell, &cnt) in n.iter().enumerate() {
            for ch in 0..3 {
                out[cell * 3 + ch] /= cnt.max(1) as f64;
            }
        }
        out
    }

    pub fn project_rgb(&self, rgb: &[f32], w: usize, h: usize) -> Vec<f64> {
        let p = self.pooled(rgb, w, h);
        self.matrix.chunks_exact(p.len()).map(|row| row.iter().zip(&p).map(|(a, b)| a * b).sum()).collect()
    }
}

impl FeatureExtractor for RandomProjection {
    fn features(&self, view: &RenderedView) -> Vec<f64> {
        self.project_rgb(&view.rgb, view.width, view.height)
    }
}

/// Image side: [`RandomProjection`] of the view. Text side: the same
/// projection of a flat image in the prompt's palette midpoint colour, so
/// the score rewards renders whose colours match the prompt's palette.
#[derive(Clone, Debug, PartialEq)]
pub struct PaletteEmbedder {
    projection: RandomProjection,
}

impl PaletteEmbedder {
    pub fn new(seed: u64) -> Self {
        Self {
            projection: RandomProjection::new(4, 32, seed),
        }
    }
}

impl Embedder for PaletteEmbedder {
    fn embed_text(&self, prompt: &PromptSpec) -> EmbeddingVector {
        let (dark, light) = ProceduralStylizer::palette(prompt);
        let mid: Vec<f32> = (0..3).map(|c| 0.5 * (dark[c] + light[c])).collect();
        let flat: Vec<f32> = mid.iter().copied().cycle().take(3 * 16).collect();
        EmbeddingVector {
            values: self.projection.project_rgb(&flat, 4, 4),
            source: EmbeddingSource::Text,
        }
    }

    fn embed_image(&self, view: &RenderedView) -> EmbeddingVector {
        EmbeddingVector {
            values: self.projection.project_rgb(&view.rgb, view.width, view.height),
            source: EmbeddingSource::Image,
        }
    }
}

/// Camera and resolution settings of the evaluation protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub threshold: f32,
    /// Image side for both protocols.
    pub resolution: usize,
    pub radius: f32,
    pub fov: f32,
    pub elevation: f32,
    /// Orbit views for the cosine score.
    pub clip_views: usize,
    pub render: RenderOptions,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            resolution: 64,
            radius: 2.0,
            fov: 45.0,
            elevation: 20.0,
            clip_views: 24,
            render: RenderOptions::default(),
            seed: 0,
        }
    }
}

/// Azimuths of the Fréchet-distance protocol.
pub const FID_AZIMUTHS: [f32; 4] = [0.0, 90.0, 180.0, 270.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewCounts {
    pub fid: usize,
    pub clip: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub strict_iou: f64,
    pub loose_iou: f64,
    pub clip_score: f64,
    pub render_fid: f64,
    pub n_views: ViewCounts,
    pub seeds: Vec<u64>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

fn orbit_views(
    density: &Tensor,
    albedo: &Tensor,
    azimuths: impl Iterator<Item = f32>,
    cfg: &EvalConfig,
) -> Result<Vec<RenderedView>, MetricError> {
    azimuths
        .map(|az| {
            let cam = orbit_camera(az, cfg.elevation, cfg.radius, cfg.fov, cfg.resolution, cfg.resolution)?;
            Ok(render_fields(density, albedo, &cam, &cfg.render)?)
        })
        .collect()
}

/// Grey solid of the coarse grid at the fine resolution: the reference used
/// for the Fréchet distance when no reference features are supplied.
pub fn structure_reference(coarse: &OccupancyGrid, fine: usize) -> Result<(Tensor, Tensor), MetricError> {
    let [k, _, _] = coarse.dims();
    if fine % k != 0 {
        return Err(MetricError::IndivisibleDims { fine, coarse: k });
    }
    let up = coarse.upsample_nearest(fine / k)?;
    let d: Vec<f32> = up.cells().iter().map(|&b| if b { 100.0 } else { 0.0 }).collect();
    let density = Tensor::new(vec![1, 1, fine, fine, fine], d).map_err(|e| MetricError::BadField(e.to_string()))?;
    Ok((density, Tensor::full(&[1, 3, fine, fine, fine], 0.5)))
}

/// IoUs of the voxelized output against the input, the mean cosine score
/// over a `clip_views` orbit and the Fréchet distance of the 4-view
/// protocol against `reference` (or against renders of
/// [`structure_reference`]).
pub fn eval_protocol(
    shape: &DetailizedShape,
    coarse: &OccupancyGrid,
    prompt: &PromptSpec,
    reference: Option<&FeatureSet>,
    embedder: &dyn Embedder,
    extractor: &dyn FeatureExtractor,
    cfg: &EvalConfig,
) -> Result<MetricReport, MetricError> {
    let [k, _, _] = coarse.dims();
    let generated = voxelize_density(&shape.density, cfg.threshold, k)?;
    let strict = strict_iou(coarse, &generated)?;
    let loose = loose_iou(coarse, &generated)?;

    let n = cfg.clip_views.max(1);
    let clip_views = orbit_views(
        &shape.density,
        &shape.albedo,
        (0..n).map(|i| i as f32 * 360.0 / n as f32),
        cfg,
    )?;
    let text = embedder.embed_text(prompt);
    let mut clip = 0.0;
    for v in &clip_views {
        clip += clip_score(&text, &embedder.embed_image(v))?;
    }
    clip /= n as f64;

    let fid_views = orbit_views(&shape.density, &shape.albedo, FID_AZIMUTHS.into_iter(), cfg)?;
    let generated_features = FeatureSet::new(fid_views.iter().map(|v| extractor.features(v)).collect())?;
    let fid = match reference {
        Some(r) => frechet_distance(&generated_features, r)?,
        None => {
            let fine = field_layout(&shape.density).map_err(MetricError::BadField)?.1[0];
            let (rd, ra) = structure_reference(coarse, fine)?;
            let ref_views = orbit_views(&rd, &ra, FID_AZIMUTHS.into_iter(), cfg)?;
            let rf = FeatureSet::new(ref_views.iter().map(|v| extractor.features(v)).collect())?;
            frechet_distance(&generated_features, &rf)?
        }
    };
    Ok(MetricReport {
        strict_iou: strict,
        loose_iou: loose,
        clip_score: clip,
        render_fid: fid,
        n_views: ViewCounts {
            fid: FID_AZIMUTHS.len(),
            clip: n,
        },
        seeds: vec![cfg.seed],
    })
}

/// One CSV row per `(prompt, shape)`.
pub fn write_batch_csv<W: Write>(out: W, rows: &[(String, String, MetricReport)]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["prompt", "shape", "strict_iou", "loose_iou", "clip_score", "render_fid"])?;
    for (prompt, shape, r) in rows {
        w.write_record([
            prompt.clone(),
            shape.clone(),
            r.strict_iou.to_string(),
            r.loose_iou.to_string(),
            r.clip_score.to_string(),
            r.render_fid.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
