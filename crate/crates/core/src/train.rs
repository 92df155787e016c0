//! Two-stage training: a curriculum stage on one simple grid, then the whole
//! dataset, with the silhouette weight annealed log-linearly over the
//! concatenated run.
//!
//! Every iteration draws its randomness (cameras, timestep, noise seed,
//! stage-2 shape) from a generator seeded by `(seed, iter)`, so a run resumed
//! from a checkpoint replays exactly what the uninterrupted run would have
//! done.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detailizer::{DetailizerConfig, DetailizerError, DetailizerModel};
use crate::formats::{self, FormatError};
use crate::grid::OccupancyGrid;
use crate::guidance::{
    reg_loss, sds_loss, total_loss, GuidanceError, GuidanceOracle, GuidanceRequest, NullGuidance, ProceduralStylizer,
    PromptSpec, TargetMatchOracle,
};
use crate::nn::{clip_global_norm, AdamState, Checkpoint, NnError, Tape, Tensor};
use crate::render::{orbit_camera, render_occupancy_mask, render_split, Camera, RenderError, RenderOptions, RenderedView};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("stage-1 index {index} out of range for {len} grids")]
    BadStageIndex { index: usize, len: usize },
    #[error("checkpoint does not match this run: {0}")]
    Resume(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("history csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Detailizer(#[from] DetailizerError),
}

/// `exp(lerp(ln start, ln end, iter/total))`, exact at both ends and clamped
/// to `[end, start]` so rounding cannot break monotonicity.
pub fn lambda_schedule(iter: usize, total: usize, start: f64, end: f64) -> Result<f64, TrainError> {
    if total == 0 || iter > total {
        return Err(TrainError::InvalidRange(format!("iter {iter} with total {total}")));
    }
    if !(start >= end && end > 0.0 && start.is_finite()) {
        return Err(TrainError::InvalidRange(format!("lambda {start} -> {end}")));
    }
    if iter == 0 {
        return Ok(start);
    }
    if iter == total {
        return Ok(end);
    }
    let f = iter as f64 / total as f64;
    let (a, b) = (start.ln(), end.ln());
    Ok((a + (b - a) * f).exp().clamp(end, start))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleKind {
    Null,
    TargetMatch,
    Stylizer,
}

impl OracleKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "null" => Some(Self::Null),
            "target-match" => Some(Self::TargetMatch),
            "stylizer" => Some(Self::Stylizer),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Self::Null => "null",
            Self::TargetMatch => "target-match",
            Self::Stylizer => "stylizer",
        }
    }
}

/// Training settings. Parsed from and written to a flat `key = value` text
/// format; see [`TrainConfig::KEYS`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub stage1_index: usize,
    /// `toy` for the built-in synthetic set, else an ARTV file or a directory
    /// of them (sorted by name).
    pub dataset: String,
    pub views: usize,
    pub lambda_start: f64,
    pub lambda_end: f64,
    /// `false` trains with λ ≡ 0.
    pub regularize: bool,
    pub lr: f32,
    pub grad_clip: f32,
    pub radius: f32,
    pub fov: f32,
    pub elevation_min: f32,
    pub elevation_max: f32,
    pub resolution: usize,
    pub render: RenderOptions,
    pub t_min: f32,
    pub t_max: f32,
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub prompt: String,
    pub oracle: OracleKind,
    /// `toy`, or `density.artf,albedo.artf` for a fixed reference.
    pub reference: String,
    pub model: DetailizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            // desk budget; the original schedule ran 1.5 h + 3.5 h on one GPU
            stage1_iters: 300,
            stage2_iters: 700,
            stage1_index: 0,
            dataset: "toy".into(),
            views: 4,
            lambda_start: 1e4,
            lambda_end: 10.0,
            regularize: true,
            lr: 1e-4,
            grad_clip: 1.0,
            radius: 2.0,
            fov: 45.0,
            elevation_min: 0.0,
            elevation_max: 30.0,
            resolution: 64,
            render: RenderOptions::default(),
            t_min: 0.02,
            t_max: 0.98,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            prompt: "a detailed building".into(),
            oracle: OracleKind::TargetMatch,
            reference: "toy".into(),
            model: DetailizerConfig::with_resolution(8, 32),
        }
    }
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    if v.is_empty() {
        "-".into()
    } else {
        v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn parse_list(s: &str) -> Option<Vec<usize>> {
    if s == "-" {
        return Some(Vec::new());
    }
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "stage1_iters",
        "stage2_iters",
        "stage1_index",
        "dataset",
        "views",
        "lambda_start",
        "lambda_end",
        "regularize",
        "lr",
        "grad_clip",
        "radius",
        "fov",
        "elevation_min",
        "elevation_max",
        "resolution",
        "samples",
        "density_scale",
        "background",
        "t_min",
        "t_max",
        "seed",
        "checkpoint_every",
        "checkpoint_dir",
        "prompt",
        "oracle",
        "reference",
        "k",
        "fine",
        "conv_channels",
        "up_channels",
        "leaky_slope",
        "model_seed",
    ];

    pub fn total_iters(&self) -> usize {
        self.stage1_iters + self.stage2_iters
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys not given keep
    /// their defaults; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| TrainError::InvalidConfig(format!("line {}: expected key = value", ln + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| TrainError::InvalidConfig(format!("line {}: {e}", ln + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
        }
        match key {
            "stage1_iters" => self.stage1_iters = num(key, value)?,
            "stage2_iters" => self.stage2_iters = num(key, value)?,
            "stage1_index" => self.stage1_index = num(key, value)?,
            "dataset" => self.dataset = value.to_string(),
            "views" => self.views = num(key, value)?,
            "lambda_start" => self.lambda_start = num(key, value)?,
            "lambda_end" => self.lambda_end = num(key, value)?,
            "regularize" => self.regularize = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "radius" => self.radius = num(key, value)?,
            "fov" => self.fov = num(key, value)?,
            "elevation_min" => self.elevation_min = num(key, value)?,
            "elevation_max" => self.elevation_max = num(key, value)?,
            "resolution" => self.resolution = num(key, value)?,
            "samples" => self.render.samples = num(key, value)?,
            "density_scale" => self.render.density_scale = num(key, value)?,
            "background" => {
                let v: Vec<f32> = value.split(',').map(|p| num(key, p.trim())).collect::<Result<_, _>>()?;
                self.render.background = match v.as_slice() {
                    [g] => [*g; 3],
                    [r, g, b] => [*r, *g, *b],
                    _ => return Err(format!("background needs 1 or 3 values, got {}", v.len())),
                };
            }
            "t_min" => self.t_min = num(key, value)?,
            "t_max" => self.t_max = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "checkpoint_dir" => self.checkpoint_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "prompt" => self.prompt = value.to_string(),
            "oracle" => self.oracle = OracleKind::parse(value).ok_or_else(|| format!("unknown oracle {value:?}"))?,
            "reference" => self.reference = value.to_string(),
            "k" => self.model.k = num(key, value)?,
            "fine" => self.model.fine = num(key, value)?,
            "conv_channels" => self.model.conv_channels = parse_list(value).ok_or("bad channel list")?,
            "up_channels" => self.model.up_channels = parse_list(value).ok_or("bad channel list")?,
            "leaky_slope" => self.model.leaky_slope = num(key, value)?,
            "model_seed" => self.model.seed = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Text form that [`TrainConfig::parse`] reads back to an equal value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let b = self.render.background;
        let pairs: Vec<(&str, String)> = vec![
            ("stage1_iters", self.stage1_iters.to_string()),
            ("stage2_iters", self.stage2_iters.to_string()),
            ("stage1_index", self.stage1_index.to_string()),
            ("dataset", self.dataset.clone()),
            ("views", self.views.to_string()),
            ("lambda_start", self.lambda_start.to_string()),
            ("lambda_end", self.lambda_end.to_string()),
            ("regularize", self.regularize.to_string()),
            ("lr", self.lr.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("radius", self.radius.to_string()),
            ("fov", self.fov.to_string()),
            ("elevation_min", self.elevation_min.to_string()),
            ("elevation_max", self.elevation_max.to_string()),
            ("resolution", self.resolution.to_string()),
            ("samples", self.render.samples.to_string()),
            ("density_scale", self.render.density_scale.to_string()),
            ("background", format!("{},{},{}", b[0], b[1], b[2])),
            ("t_min", self.t_min.to_string()),
            ("t_max", self.t_max.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            (
                "checkpoint_dir",
                self.checkpoint_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("prompt", self.prompt.clone()),
            ("oracle", self.oracle.as_str().to_string()),
            ("reference", self.reference.clone()),
            ("k", self.model.k.to_string()),
            ("fine", self.model.fine.to_string()),
            ("conv_channels", join(&self.model.conv_channels)),
            ("up_channels", join(&self.model.up_channels)),
            ("leaky_slope", self.model.leaky_slope.to_string()),
            ("model_seed", self.model.seed.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Hex SHA-256 of [`TrainConfig::to_text`].
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_text().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.views == 0 {
            return bad("views must be >= 1".into());
        }
        if !(self.lambda_start >= self.lambda_end && self.lambda_end > 0.0 && self.lambda_start.is_finite()) {
            return bad(format!("need lambda_start >= lambda_end > 0, got {} and {}", self.lambda_start, self.lambda_end));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.grad_clip > 0.0) {
            return bad("lr and grad_clip must be positive".into());
        }
        if !(0.0..=90.0).contains(&self.elevation_min) || !(self.elevation_min..=90.0).contains(&self.elevation_max) {
            return bad(format!("elevation range {}..{}", self.elevation_min, self.elevation_max));
        }
        if !(0.0..=1.0).contains(&self.t_min) || !(self.t_min..=1.0).contains(&self.t_max) {
            return bad(format!("timestep range {}..{}", self.t_min, self.t_max));
        }
        if self.resolution == 0 {
            return bad("resolution must be >= 1".into());
        }
        if self.prompt.trim().is_empty() {
            return bad("prompt is empty".into());
        }
        orbit_camera(0.0, self.elevation_min, self.radius, self.fov, self.resolution, self.resolution)?;
        self.render.validate()?;
        self.model.validate()?;
        Ok(())
    }
}

/// `views` cameras at a shared random elevation, spread evenly in azimuth
/// from a random base in `[0°, 360°/views)`.
pub fn sample_cameras(rng: &mut impl Rng, cfg: &TrainConfig) -> Result<Vec<Camera>, TrainError> {
    let n = cfg.views;
    let spacing = 360.0 / n as f32;
    let base = rng.random_range(0.0..spacing);
    let elevation = if cfg.elevation_max > cfg.elevation_min {
        rng.random_range(cfg.elevation_min..=cfg.elevation_max)
    } else {
        cfg.elevation_min
    };
    (0..n)
        .map(|i| Ok(orbit_camera(base + i as f32 * spacing, elevation, cfg.radius, cfg.fov, cfg.resolution, cfg.resolution)?))
        .collect()
}

/// Generator for iteration `iter` of a run seeded with `seed`.
pub fn iteration_rng(seed: u64, iter: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter as u64 + 1);
    rng
}

/// Losses of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub l_sds: f64,
    pub l_reg: f64,
    pub l_total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Render → guidance → loss → backward → clipped Adam update.
pub fn train_step(
    model: &mut DetailizerModel,
    adam: &mut AdamState,
    coarse: &OccupancyGrid,
    oracle: &dyn GuidanceOracle,
    lambda: f32,
    rng: &mut impl Rng,
    cfg: &TrainConfig,
) -> Result<StepLosses, TrainError> {
    let cams = sample_cameras(rng, cfg)?;
    let t = if cfg.t_max > cfg.t_min {
        rng.random_range(cfg.t_min..=cfg.t_max)
    } else {
        cfg.t_min
    };
    let noise_seed: u64 = rng.random();

    let mut tape = Tape::new();
    let fv = model.forward_on(&mut tape, coarse)?;
    let mut rgbs = Vec::with_capacity(cams.len());
    let mut alphas = Vec::with_capacity(cams.len());
    let mut views = Vec::with_capacity(cams.len());
    let mut masks = Vec::with_capacity(cams.len());
    for cam in &cams {
        let (rgb, alpha) = render_split(&mut tape, fv.density, fv.albedo, cam, &cfg.render).map_err(|e| match e {
            crate::Error::Render(r) => TrainError::Render(r),
            crate::Error::Nn(n) => TrainError::Nn(n),
            other => TrainError::InvalidConfig(other.to_string()),
        })?;
        views.push(RenderedView {
            width: cam.width,
            height: cam.height,
            rgb: tape.value(rgb).data().to_vec(),
            alpha: tape.value(alpha).data().to_vec(),
            camera: cam.clone(),
        });
        masks.push(render_occupancy_mask(coarse, cam, &cfg.render)?);
        rgbs.push(rgb);
        alphas.push(alpha);
    }
    let prompt = PromptSpec::new(cfg.prompt.clone())?;
    let targets = oracle.denoise(&GuidanceRequest {
        views: &views,
        cameras: &cams,
        prompt: &prompt,
        t,
        seed: noise_seed,
        subject: Some(coarse),
    })?;
    let sds = sds_loss(&mut tape, &rgbs, &targets)?;
    let reg = reg_loss(&mut tape, &alphas, &masks)?;
    let total = total_loss(&mut tape, sds, reg, lambda)?;
    tape.backward(total)?;

    let mut grads: Vec<Vec<f32>> = fv
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.len()], <[f32]>::to_vec))
        .collect();
    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip) as f64;
    let refs: Vec<Option<&[f32]>> = grads.iter().map(|g| Some(g.as_slice())).collect();
    adam.step(&mut model.params_mut(), &refs)?;
    Ok(StepLosses {
        l_sds: tape.value(sds).item() as f64,
        l_reg: tape.value(reg).item() as f64,
        l_total: tape.value(total).item() as f64,
        grad_norm,
    })
}

/// One row of the loss history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub stage: u8,
    pub shape: usize,
    pub lambda: f64,
    pub l_sds: f64,
    pub l_reg: f64,
    pub l_total: f64,
    /// Wall time of the step; excluded from [`TrainHistory::same_losses`].
    pub ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<IterRecord>,
}

impl TrainHistory {
    pub fn push(&mut self, r: IterRecord) -> Result<(), TrainError> {
        if let Some(last) = self.records.last() {
            if r.iter <= last.iter {
                return Err(TrainError::InvalidRange(format!("iter {} after {}", r.iter, last.iter)));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Bitwise equality of every field except wall time.
    pub fn same_losses(&self, other: &Self) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.iter == b.iter
                    && a.stage == b.stage
                    && a.shape == b.shape
                    && a.lambda.to_bits() == b.lambda.to_bits()
                    && a.l_sds.to_bits() == b.l_sds.to_bits()
                    && a.l_reg.to_bits() == b.l_reg.to_bits()
                    && a.l_total.to_bits() == b.l_total.to_bits()
            })
    }

    /// CSV with header `iter,stage,lambda,l_sds,l_reg,l_total,ms,shape`.
    /// Floats are written in shortest round-trip form.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iter", "stage", "lambda", "l_sds", "l_reg", "l_total", "ms", "shape"])?;
        for r in &self.records {
            w.write_record([
                r.iter.to_string(),
                r.stage.to_string(),
                r.lambda.to_string(),
                r.l_sds.to_string(),
                r.l_reg.to_string(),
                r.l_total.to_string(),
                r.ms.to_string(),
                r.shape.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, TrainError> {
        let mut rd = csv::Reader::from_reader(input);
        let mut h = Self::default();
        for row in rd.records() {
            let row = row?;
            let f = |i: usize| -> Result<f64, TrainError> {
                row.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| TrainError::InvalidConfig(format!("bad history field {i} in {row:?}")))
            };
            h.push(IterRecord {
                iter: f(0)? as usize,
                stage: f(1)? as u8,
                lambda: f(2)?,
                l_sds: f(3)?,
                l_reg: f(4)?,
                l_total: f(5)?,
                ms: f(6)?,
                shape: row.get(7).and_then(|s| s.parse().ok()).unwrap_or(0),
            })?;
        }
        Ok(h)
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: DetailizerModel,
    pub adam: AdamState,
    /// First iteration not yet run.
    pub next_iter: usize,
    pub history: TrainHistory,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig) -> Result<Self, TrainError> {
        let model = DetailizerModel::build(cfg.model.clone())?;
        let adam = AdamState::new(cfg.lr, model.params());
        Ok(Self {
            model,
            adam,
            next_iter: 0,
            history: TrainHistory::default(),
        })
    }

    /// Model tensors plus optimizer moments and progress.
    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        ck.set_meta("next_iter", self.next_iter);
        ck.set_meta("adam_step", self.adam.step);
        ck.set_meta("config_digest", cfg.digest());
        ck.set_meta("prompt", &cfg.prompt);
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            ck.push(format!("adam.m.{i}"), m.clone());
            ck.push(format!("adam.v.{i}"), v.clone());
        }
        ck
    }

    /// Restores a state written by [`TrainState::to_checkpoint`] together
    /// with the history recorded up to it.
    pub fn from_checkpoint(mut ck: Checkpoint, history: TrainHistory, cfg: &TrainConfig) -> Result<Self, TrainError> {
        if ck.meta("config_digest") != Some(cfg.digest().as_str()) {
            return Err(TrainError::Resume("config digest differs".into()));
        }
        let meta_num = |ck: &Checkpoint, key: &str| -> Result<u64, TrainError> {
            ck.meta(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| TrainError::Resume(format!("missing {key}")))
        };
        let next_iter = meta_num(&ck, "next_iter")? as usize;
        let step = meta_num(&ck, "adam_step")?;
        let model = DetailizerModel::from_checkpoint(&mut ck)?;
        let mut adam = AdamState::new(cfg.lr, model.params());
        adam.step = step;
        for i in 0..adam.m.len() {
            let shape = adam.m[i].shape().to_vec();
            adam.m[i] = ck.take(&format!("adam.m.{i}"), &shape)?;
            adam.v[i] = ck.take(&format!("adam.v.{i}"), &shape)?;
        }
        let mut history = history;
        history.records.retain(|r| r.iter < next_iter);
        if history.len() != next_iter {
            return Err(TrainError::Resume(format!(
                "history has {} records for {next_iter} completed iterations",
                history.len()
            )));
        }
        Ok(Self {
            model,
            adam,
            next_iter,
            history,
        })
    }
}

/// Progress notifications from [`run_training`].
#[derive(Debug)]
pub enum TrainEvent<'a> {
    Iteration(&'a IterRecord),
    Checkpoint { iter: usize, path: &'a Path },
}

/// λ at iteration `i` of a `total`-iteration run: the start value at the
/// first iteration and the end value at the last.
pub fn lambda_at(cfg: &TrainConfig, i: usize) -> Result<f64, TrainError> {
    if !cfg.regularize {
        return Ok(0.0);
    }
    let total = cfg.total_iters();
    if total <= 1 {
        return Ok(cfg.lambda_start);
    }
    lambda_schedule(i, total - 1, cfg.lambda_start, cfg.lambda_end)
}

/// Checks the dataset and stage-1 index.
pub fn check_dataset(cfg: &TrainConfig, dataset: &[OccupancyGrid]) -> Result<(), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.stage1_index >= dataset.len() {
        return Err(TrainError::BadStageIndex {
            index: cfg.stage1_index,
            len: dataset.len(),
        });
    }
    let k = cfg.model.k;
    if let Some(g) = dataset.iter().find(|g| g.dims() != [k; 3]) {
        return Err(TrainError::InvalidConfig(format!("grid dims {:?} differ from k = {k}", g.dims())));
    }
    Ok(())
}

/// Runs (or continues) the two-stage schedule until `cfg.total_iters()` or
/// until `stop_after` iterations have been run in this call.
pub fn run_training(
    cfg: &TrainConfig,
    dataset: &[OccupancyGrid],
    oracle: &dyn GuidanceOracle,
    state: Option<TrainState>,
    stop_after: Option<usize>,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    check_dataset(cfg, dataset)?;
    let mut st = match state {
        Some(s) => s,
        None => TrainState::fresh(cfg)?,
    };
    let total = cfg.total_iters();
    let end = stop_after.map_or(total, |n| (st.next_iter + n).min(total));
    while st.next_iter < end {
        let i = st.next_iter;
        let started = Instant::now();
        let mut rng = iteration_rng(cfg.seed, i);
        let (stage, shape) = if i < cfg.stage1_iters {
            (1, cfg.stage1_index)
        } else {
            (2, rng.random_range(0..dataset.len()))
        };
        let lambda = lambda_at(cfg, i)?;
        let losses = train_step(
            &mut st.model,
            &mut st.adam,
            &dataset[shape],
            oracle,
            lambda as f32,
            &mut rng,
            cfg,
        )?;
        let rec = IterRecord {
            iter: i,
            stage,
            shape,
            lambda,
            l_sds: losses.l_sds,
            l_reg: losses.l_reg,
            l_total: losses.l_total,
            ms: started.elapsed().as_secs_f64() * 1e3,
        };
        st.history.push(rec)?;
        st.next_iter += 1;
        observer(TrainEvent::Iteration(&rec));
        if cfg.checkpoint_every > 0 && st.next_iter % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                let path = save_progress(&st, cfg, dir)?;
                observer(TrainEvent::Checkpoint {
                    iter: st.next_iter,
                    path: &path,
                });
            }
        }
    }
    Ok(st)
}

/// Writes `ckpt-<next_iter>.artc` and `history.csv` into `dir`.
pub fn save_progress(st: &TrainState, cfg: &TrainConfig, dir: &Path) -> Result<PathBuf, TrainError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("ckpt-{:06}.artc", st.next_iter));
    st.to_checkpoint(cfg).save(&path)?;
    let hist = dir.join(format!("history-{:06}.csv", st.next_iter));
    st.history.write_csv(std::fs::File::create(&hist)?)?;
    std::fs::copy(&hist, dir.join("history.csv"))?;
    Ok(path)
}

/// Loads the state saved by [`save_progress`] at `checkpoint`.
pub fn resume(checkpoint: &Path, cfg: &TrainConfig) -> Result<TrainState, TrainError> {
    let ck = Checkpoint::load(checkpoint)?;
    let stem = checkpoint
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("ckpt-"))
        .ok_or_else(|| TrainError::Resume("checkpoint name must be ckpt-<iter>.artc".into()))?;
    let hist_path = checkpoint.with_file_name(format!("history-{stem}.csv"));
    let history = TrainHistory::read_csv(std::fs::File::open(hist_path)?)?;
    TrainState::from_checkpoint(ck, history, cfg)
}

/// Fresh two-stage run to completion.
pub fn run_two_stage(
    cfg: &TrainConfig,
    dataset: &[OccupancyGrid],
    oracle: &dyn GuidanceOracle,
) -> Result<(DetailizerModel, TrainHistory), TrainError> {
    let st = run_training(cfg, dataset, oracle, None, None, &mut |_| {})?;
    Ok((st.model, st.history))
}

/// Index of the simplest nonempty grid: fewest connected components, then
/// fewest occupied cells, then lowest index.
pub fn suggest_stage1(dataset: &[OccupancyGrid]) -> Option<usize> {
    dataset
        .iter()
        .enumerate()
        .filter(|(_, g)| !g.is_vacant())
        .min_by_key(|(i, g)| (g.component_count(), g.count(), *i))
        .map(|(i, _)| i)
}

/// Loads `cfg.dataset`: the toy set, one ARTV file, or every `.artv` file of
/// a directory in name order.
pub fn load_dataset(cfg: &TrainConfig) -> Result<Vec<OccupancyGrid>, TrainError> {
    if cfg.dataset == "toy" {
        return Ok(toy::dataset(cfg.model.k));
    }
    let path = Path::new(&cfg.dataset);
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "artv"))
            .collect();
        files.sort();
        files.iter().map(|p| Ok(formats::load_grid(p)?)).collect()
    } else {
        Ok(vec![formats::load_grid(path)?])
    }
}

/// The guidance oracle named by the config.
pub fn build_oracle(cfg: &TrainConfig) -> Result<Box<dyn GuidanceOracle>, TrainError> {
    Ok(match cfg.oracle {
        OracleKind::Null => Box::new(NullGuidance),
        OracleKind::Stylizer => Box::new(ProceduralStylizer::default()),
        OracleKind::TargetMatch => {
            if cfg.reference == "toy" {
                let fine = cfg.model.fine;
                Box::new(TargetMatchOracle::per_shape(
                    move |g| Ok(toy::reference(g, fine)),
                    cfg.render.clone(),
                ))
            } else {
                let (d, a) = cfg
                    .reference
                    .split_once(',')
                    .ok_or_else(|| TrainError::InvalidConfig("reference must be `toy` or `density.artf,albedo.artf`".into()))?;
                let density = formats::load_field(d.trim())?;
                let albedo = formats::load_field(a.trim())?;
                Box::new(TargetMatchOracle::fixed(density, albedo, cfg.render.clone()))
            }
        }
    })
}

/// Mean render MSE between the model's output and the oracle's targets over
/// fixed evaluation cameras, per dataset grid.
pub fn evaluate_render_mse(
    model: &DetailizerModel,
    dataset: &[OccupancyGrid],
    oracle: &dyn GuidanceOracle,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let prompt = PromptSpec::new(cfg.prompt.clone())?;
    let elevation = 0.5 * (cfg.elevation_min + cfg.elevation_max);
    let cams: Vec<Camera> = (0..cfg.views)
        .map(|i| orbit_camera(45.0 + i as f32 * 360.0 / cfg.views as f32, elevation, cfg.radius, cfg.fov, cfg.resolution, cfg.resolution))
        .collect::<Result<_, _>>()?;
    let mut total = 0.0;
    for g in dataset {
        let shape = model.forward(g)?;
        let views: Vec<RenderedView> = cams
            .iter()
            .map(|c| crate::render::render_fields(&shape.density, &shape.albedo, c, &cfg.render))
            .collect::<Result<_, _>>()?;
        let targets = oracle.denoise(&GuidanceRequest {
            views: &views,
            cameras: &cams,
            prompt: &prompt,
            t: 0.5,
            seed: 0,
            subject: Some(g),
        })?;
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for (v, t) in views.iter().zip(&targets.images) {
            for (a, b) in v.rgb.iter().zip(t) {
                sum += ((a - b) as f64).powi(2);
                n += 1;
            }
        }
        total += sum / n as f64;
    }
    Ok(total / dataset.len() as f64)
}

/// Synthetic task with a known optimum: coarse "furniture and buildings"
/// whose detailed references drop the thin pillars of the coarse input.
/// Training against these targets alone loses the pillars; the silhouette
/// term keeps them.
pub mod toy {
    use super::*;

    /// Density of solid reference cells.
    pub const SOLID: f32 = 60.0;

    fn with(k: usize, cells: impl Fn(usize, usize, usize) -> bool) -> OccupancyGrid {
        OccupancyGrid::from_fn([k; 3], cells).expect("nonzero dims")
    }

    /// Eight shapes on a `k³` grid (`k ≥ 8`).
    pub fn dataset(k: usize) -> Vec<OccupancyGrid> {
        let s = k as f32 / 8.0;
        let u = |v: f32| (v * s).round() as usize;
        let (lo, hi) = (u(1.0), u(7.0) - 1);
        vec![
            // slab on four legs
            with(k, |x, y, z| {
                let top = z == u(5.0) && (lo..=hi).contains(&x) && (lo..=hi).contains(&y);
                let leg = z < u(5.0) && (x == lo || x == hi) && (y == lo || y == hi);
                top || leg
            })
            .with_label("table"),
            // block with a mast
            with(k, |x, y, z| {
                let body = (u(2.0)..u(6.0)).contains(&x) && (u(2.0)..u(6.0)).contains(&y) && z < u(4.0);
                let mast = x == u(4.0) && y == u(4.0) && z >= u(4.0) && z < k - 1;
                body || mast
            })
            .with_label("tower"),
            // seat, back and legs
            with(k, |x, y, z| {
                let seat = z == u(3.0) && (u(2.0)..u(6.0)).contains(&x) && (u(2.0)..u(6.0)).contains(&y);
                let back = y == u(5.0) && (u(2.0)..u(6.0)).contains(&x) && (u(3.0)..u(7.0)).contains(&z);
                let leg = z < u(3.0) && (x == u(2.0) || x == u(5.0)) && (y == u(2.0) || y == u(5.0));
                seat || back || leg
            })
            .with_label("chair"),
            // solid block
            with(k, |x, y, z| (u(2.0)..u(6.0)).contains(&x) && (u(1.0)..u(7.0)).contains(&y) && z < u(3.0)).with_label("block"),
            // two blocks bridged by a beam on posts
            with(k, |x, y, z| {
                let a = (lo..lo + 2).contains(&x) && (u(3.0)..u(5.0)).contains(&y) && z < u(3.0);
                let b = (hi - 1..=hi).contains(&x) && (u(3.0)..u(5.0)).contains(&y) && z < u(3.0);
                let beam = z == u(5.0) && (lo..=hi).contains(&x) && (u(3.0)..u(5.0)).contains(&y);
                let post = (u(3.0)..u(5.0)).contains(&z) && (x == lo || x == hi) && y == u(3.0);
                a || b || beam || post
            })
            .with_label("bridge"),
            // stepped pyramid
            with(k, |x, y, z| {
                let r = u(3.0) as isize - z as isize;
                let (cx, cy) = (x as isize - u(4.0) as isize, y as isize - u(4.0) as isize);
                z < u(3.0) && (-r - 1..=r).contains(&cx) && (-r - 1..=r).contains(&cy)
            })
            .with_label("pyramid"),
            // lamp: base, pole, shade
            with(k, |x, y, z| {
                let base = z == 0 && (u(3.0)..u(5.0) + 1).contains(&x) && (u(3.0)..u(5.0) + 1).contains(&y);
                let pole = x == u(4.0) && y == u(4.0) && (1..u(5.0)).contains(&z);
                let shade = (u(5.0)..u(7.0)).contains(&z) && (u(3.0)..u(6.0)).contains(&x) && (u(3.0)..u(6.0)).contains(&y);
                base || pole || shade
            })
            .with_label("lamp"),
            // wall with two columns in front
            with(k, |x, y, z| {
                let wall = y == u(6.0) && (lo..=hi).contains(&x) && z < u(6.0);
                let wall2 = y == u(6.0) - 1 && (lo..=hi).contains(&x) && z < u(6.0);
                let col = (x == u(2.0) || x == u(5.0)) && y == u(3.0) && z < u(6.0);
                wall || wall2 || col
            })
            .with_label("portico"),
        ]
    }

    /// Occupied cells with no occupied neighbour in x or y.
    pub fn thin_cells(g: &OccupancyGrid) -> OccupancyGrid {
        let [nx, ny, nz] = g.dims();
        OccupancyGrid::from_fn([nx, ny, nz], |x, y, z| {
            let (xi, yi, zi) = (x as isize, y as isize, z as isize);
            g.get(x, y, z)
                && !g.get_signed(xi - 1, yi, zi)
                && !g.get_signed(xi + 1, yi, zi)
                && !g.get_signed(xi, yi - 1, zi)
                && !g.get_signed(xi, yi + 1, zi)
        })
        .expect("same dims")
    }

    /// Detailed reference at `fine³`: the coarse shape minus its thin cells,
    /// solid at [`SOLID`], with a brick-and-mortar albedo.
    pub fn reference(coarse: &OccupancyGrid, fine: usize) -> (Tensor, Tensor) {
        let k = coarse.dims()[0];
        let f = fine / k;
        let thin = thin_cells(coarse);
        let n = fine * fine * fine;
        let mut density = vec![0.0f32; n];
        let mut albedo = vec![0.0f32; 3 * n];
        let brick = [0.72f32, 0.33, 0.2];
        let mortar = [0.88f32, 0.86, 0.8];
        for z in 0..fine {
            for y in 0..fine {
                for x in 0..fine {
                    let i = (z * fine + y) * fine + x;
                    let (cx, cy, cz) = (x / f, y / f, z / f);
                    if coarse.get(cx, cy, cz) && !thin.get(cx, cy, cz) {
                        density[i] = SOLID;
                    }
                    let course = z / 2;
                    let joint = z % 2 == 1 || (x + y + 4 * (course % 2)) % 8 == 0;
                    let c = if joint { mortar } else { brick };
                    for ch in 0..3 {
                        albedo[ch * n + i] = c[ch];
                    }
                }
            }
        }
        (
            Tensor::new(vec![1, 1, fine, fine, fine], density).expect("sizes match"),
            Tensor::new(vec![1, 3, fine, fine, fine], albedo).expect("sizes match"),
        )
    }

    /// Desk-scale settings for the toy task: small networks, 32² renders
    /// and a learning rate far above the full-scale 1e-4 so 1000 steps
    /// converge.
    pub fn config(seed: u64) -> TrainConfig {
        let mut model = DetailizerConfig::with_resolution(8, 32);
        model.conv_channels = vec![16, 16, 16];
        model.up_channels = vec![8];
        model.seed = seed;
        TrainConfig {
            seed,
            lr: 3e-3,
            resolution: 32,
            render: RenderOptions {
                samples: 48,
                ..RenderOptions::default()
            },
            stage1_index: 0,
            model,
            ..TrainConfig::default()
        }
    }
}

/// Shape summary used by the CLI and service when listing runs.
pub fn describe(dataset: &[OccupancyGrid]) -> BTreeMap<String, usize> {
    dataset
        .iter()
        .enumerate()
        .map(|(i, g)| (g.label().map_or_else(|| format!("grid{i}"), str::to_string), g.count()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(lambda_schedule(0, 1000, 1e4, 10.0).unwrap(), 1e4);
        assert_eq!(lambda_schedule(1000, 1000, 1e4, 10.0).unwrap(), 10.0);
        let mid = lambda_schedule(500, 1000, 1e4, 10.0).unwrap();
        assert!((mid - (1e4f64 * 10.0).sqrt()).abs() < 1e-9, "{mid}");
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let l = lambda_schedule(i, 1000, 1e4, 10.0).unwrap();
            assert!(l <= prev);
            prev = l;
        }
        assert!(lambda_schedule(1001, 1000, 1e4, 10.0).is_err());
        assert!(lambda_schedule(0, 0, 1e4, 10.0).is_err());
        assert!(lambda_schedule(1, 10, 10.0, 1e4).is_err());
        assert!(lambda_schedule(1, 10, 1e4, 0.0).is_err());
    }

    #[test]
    fn cameras_are_spread_evenly() {
        let cfg = TrainConfig::default();
        let cams = sample_cameras(&mut iteration_rng(3, 0), &cfg).unwrap();
        assert_eq!(cams.len(), 4);
        for (i, c) in cams.iter().enumerate() {
            assert!((c.azimuth - cams[0].azimuth - 90.0 * i as f32).abs() < 1e-4);
            assert_eq!(c.elevation, cams[0].elevation);
            assert_eq!(c.radius, cams[0].radius);
        }
        assert!((0.0..90.0).contains(&cams[0].azimuth));
        assert!((0.0..=30.0).contains(&cams[0].elevation));
        let other = sample_cameras(&mut iteration_rng(4, 0), &cfg).unwrap();
        assert_ne!(cams[0].azimuth, other[0].azimuth);
        let again = sample_cameras(&mut iteration_rng(3, 0), &cfg).unwrap();
        assert_eq!(cams, again);
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = toy::config(7);
        cfg.checkpoint_dir = Some("/tmp/x".into());
        cfg.model.up_channels = vec![];
        cfg.model.fine = 16;
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        let text = "# comment\nstage1_iters = 5 # trailing\nlr=0.01\n";
        let c = TrainConfig::parse(text).unwrap();
        assert_eq!(c.stage1_iters, 5);
        assert_eq!(c.lr, 0.01);
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("lambda_end = 0").is_err());
        assert!(TrainConfig::parse("views = 0").is_err());
        assert!(TrainConfig::parse("stage1_iters 5").is_err());
        for key in TrainConfig::KEYS {
            assert!(cfg.to_text().contains(&format!("{key} = ")), "{key}");
        }
    }

    #[test]
    fn toy_references_drop_thin_cells_only() {
        let data = toy::dataset(8);
        assert_eq!(data.len(), 8);
        let table = &data[0];
        let thin = toy::thin_cells(table);
        assert_eq!(thin.count(), 4 * 5);
        let (d, a) = toy::reference(table, 32);
        let kept = crate::metrics::voxelize_density(&d, 30.0, 8).unwrap();
        assert!(kept.is_subset_of(table).unwrap());
        assert_eq!(kept.count(), table.count() - thin.count());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(toy::thin_cells(&data[3]).is_vacant());
        assert_eq!(suggest_stage1(&data).map(|i| data[i].component_count()), Some(1));
    }

    #[test]
    fn history_csv_round_trip() {
        let mut h = TrainHistory::default();
        for i in 0..3 {
            h.push(IterRecord {
                iter: i,
                stage: 1 + (i > 1) as u8,
                shape: i,
                lambda: 1e4 / (i + 1) as f64,
                l_sds: 0.1 / 3.0,
                l_reg: 1.0 / 7.0,
                l_total: std::f64::consts::PI,
                ms: 12.5,
            })
            .unwrap();
        }
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("iter,stage,lambda,l_sds,l_reg,l_total,ms"));
        let back = TrainHistory::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, h);
        assert!(h
            .push(IterRecord {
                iter: 1,
                ..h.records[0]
            })
            .is_err());
    }

    #[test]
    fn dataset_checks() {
        let cfg = TrainConfig::default();
        assert!(matches!(check_dataset(&cfg, &[]), Err(TrainError::EmptyDataset)));
        let g = OccupancyGrid::cube(8).unwrap();
        let mut c2 = cfg.clone();
        c2.stage1_index = 3;
        assert!(matches!(
            check_dataset(&c2, &[g.clone()]),
            Err(TrainError::BadStageIndex { index: 3, len: 1 })
        ));
        assert!(check_dataset(&cfg, &[OccupancyGrid::cube(4).unwrap()]).is_err());
        assert!(check_dataset(&cfg, &[g]).is_ok());
    }
}
