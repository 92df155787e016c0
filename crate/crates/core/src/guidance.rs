//! Guidance oracles and the losses assembled from their targets.
//!
//! An oracle maps a batch of rendered views to denoised target images. The
//! distillation loss regresses the renders toward those targets (treated as
//! constants), and the silhouette loss keeps the rendered alpha close to the
//! masks of the coarse input.

use std::fmt;
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::OccupancyGrid;
use crate::nn::{NnError, Tape, Tensor, Var};
use crate::render::{render_fields, Camera, MaskImage, RenderError, RenderOptions, RenderedView};

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("guidance request has no views")]
    NoViews,
    #[error("views do not share one resolution: {0}")]
    ResolutionMismatch(String),
    #[error("{views} views but {cameras} cameras")]
    CameraCount { views: usize, cameras: usize },
    #[error("timestep {0} outside [0, 1]")]
    BadTimestep(f32),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid weight {0}")]
    InvalidWeight(f32),
    #[error("reference unavailable: {0}")]
    Reference(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Text condition. The id is a stable digest of the text, so it survives
/// process restarts and can key checkpoints.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSpec {
    text: String,
    view_suffixes: bool,
}

impl PromptSpec {
    pub fn new(text: impl Into<String>) -> Result<Self, GuidanceError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(GuidanceError::EmptyPrompt);
        }
        Ok(Self {
            text,
            view_suffixes: false,
        })
    }

    /// Append a "front/side/back/overhead view" hint per camera.
    pub fn with_view_suffixes(mut self, on: bool) -> Self {
        self.view_suffixes = on;
        self
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// First 16 hex digits of SHA-256 of the text.
    pub fn id(&self) -> String {
        let d = Sha256::digest(self.text.as_bytes());
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn id_u64(&self) -> u64 {
        let d = Sha256::digest(self.text.as_bytes());
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    /// Prompt text as seen from `cam`.
    pub fn view_text(&self, cam: &Camera) -> String {
        if !self.view_suffixes {
            return self.text.clone();
        }
        let suffix = if cam.elevation >= 60.0 {
            "overhead view"
        } else {
            match cam.azimuth.rem_euclid(360.0) {
                a if !(45.0..315.0).contains(&a) => "front view",
                a if (135.0..225.0).contains(&a) => "back view",
                _ => "side view",
            }
        };
        format!("{}, {suffix}", self.text)
    }
}

/// One call to the oracle: N views of the same shape.
#[derive(Clone, Copy, Debug)]
pub struct GuidanceRequest<'a> {
    pub views: &'a [RenderedView],
    pub cameras: &'a [Camera],
    pub prompt: &'a PromptSpec,
    /// Diffusion timestep in `[0, 1]`.
    pub t: f32,
    /// Noise seed.
    pub seed: u64,
    /// Coarse grid the views were generated from. Oracles that need to know
    /// which training shape is being rendered read it here.
    pub subject: Option<&'a OccupancyGrid>,
}

impl GuidanceRequest<'_> {
    pub fn validate(&self) -> Result<(usize, usize), GuidanceError> {
        let first = self.views.first().ok_or(GuidanceError::NoViews)?;
        if self.views.len() != self.cameras.len() {
            return Err(GuidanceError::CameraCount {
                views: self.views.len(),
                cameras: self.cameras.len(),
            });
        }
        let (w, h) = (first.width, first.height);
        for (i, v) in self.views.iter().enumerate() {
            if v.width != w || v.height != h || v.rgb.len() != w * h * 3 {
                return Err(GuidanceError::ResolutionMismatch(format!(
                    "view {i} is {}x{}, view 0 is {w}x{h}",
                    v.width, v.height
                )));
            }
        }
        for (i, c) in self.cameras.iter().enumerate() {
            if c.width != w || c.height != h {
                return Err(GuidanceError::ResolutionMismatch(format!(
                    "camera {i} is {}x{}, views are {w}x{h}",
                    c.width, c.height
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.t) {
            return Err(GuidanceError::BadTimestep(self.t));
        }
        Ok((w, h))
    }
}

/// Denoised images, one `height·width·3` buffer per view, in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceTargets {
    pub width: usize,
    pub height: usize,
    pub images: Vec<Vec<f32>>,
}

impl GuidanceTargets {
    fn new(width: usize, height: usize, images: Vec<Vec<f32>>) -> Self {
        let images = images
            .into_iter()
            .map(|im| im.into_iter().map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 }).collect())
            .collect();
        Self { width, height, images }
    }

    pub fn to_tensor(&self, view: usize) -> Tensor {
        Tensor::new(vec![self.height, self.width, 3], self.images[view].clone()).expect("target size")
    }
}

/// Stand-in for a multi-view diffusion model.
pub trait GuidanceOracle: Send + Sync {
    fn name(&self) -> &str;
    fn denoise(&self, request: &GuidanceRequest<'_>) -> Result<GuidanceTargets, GuidanceError>;
}

/// Returns the views unchanged: zero distillation signal.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullGuidance;

impl GuidanceOracle for NullGuidance {
    fn name(&self) -> &str {
        "null"
    }

    fn denoise(&self, request: &GuidanceRequest<'_>) -> Result<GuidanceTargets, GuidanceError> {
        let (w, h) = request.validate()?;
        Ok(GuidanceTargets::new(w, h, request.views.iter().map(|v| v.rgb.clone()).collect()))
    }
}

/// Builds the reference `(density, albedo)` for a coarse grid.
pub type ReferenceFn = dyn Fn(&OccupancyGrid) -> Result<(Tensor, Tensor), GuidanceError> + Send + Sync;

#[derive(Clone)]
enum Reference {
    Fixed(Arc<(Tensor, Tensor)>),
    PerShape(Arc<ReferenceFn>),
}

/// Targets are renders of a known detailed shape from the request's
/// cameras, so the optimum of the distillation loss is known exactly.
#[derive(Clone)]
pub struct TargetMatchOracle {
    reference: Reference,
    options: RenderOptions,
}

impl fmt::Debug for TargetMatchOracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.reference {
            Reference::Fixed(_) => "fixed",
            Reference::PerShape(_) => "per-shape",
        };
        f.debug_struct("TargetMatchOracle")
            .field("reference", &kind)
            .field("options", &self.options)
            .finish()
    }
}

impl TargetMatchOracle {
    /// One reference for every request. `options` must match the renderer
    /// settings used for the views.
    pub fn fixed(density: Tensor, albedo: Tensor, options: RenderOptions) -> Self {
        Self {
            reference: Reference::Fixed(Arc::new((density, albedo))),
            options,
        }
    }

    /// Reference chosen from the request's subject grid.
    pub fn per_shape(
        f: impl Fn(&OccupancyGrid) -> Result<(Tensor, Tensor), GuidanceError> + Send + Sync + 'static,
        options: RenderOptions,
    ) -> Self {
        Self {
            reference: Reference::PerShape(Arc::new(f)),
            options,
        }
    }

    pub fn options(&self) -> &RenderOptions {
        &self.options
    }

    /// Reference fields for `subject`.
    pub fn reference(&self, subject: Option<&OccupancyGrid>) -> Result<(Tensor, Tensor), GuidanceError> {
        match &self.reference {
            Reference::Fixed(r) => Ok((r.0.clone(), r.1.clone())),
            Reference::PerShape(f) => {
                f(subject.ok_or_else(|| GuidanceError::Reference("request carries no subject grid".into()))?)
            }
        }
    }
}

impl GuidanceOracle for TargetMatchOracle {
    fn name(&self) -> &str {
        "target-match"
    }

    fn denoise(&self, request: &GuidanceRequest<'_>) -> Result<GuidanceTargets, GuidanceError> {
        let (w, h) = request.validate()?;
        let (density, albedo) = self.reference(request.subject)?;
        let images = request
            .cameras
            .iter()
            .map(|cam| render_fields(&density, &albedo, cam, &self.options).map(|v| v.rgb))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(GuidanceTargets::new(w, h, images))
    }
}

/// Deterministic image transform: recolour toward a palette keyed by the
/// prompt, then sharpen. Applies style pressure with no semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct ProceduralStylizer {
    /// Blend toward the palette at `t = 1`; scaled linearly by `t`.
    pub strength: f32,
    /// Unsharp-mask gain.
    pub sharpen: f32,
}

impl Default for ProceduralStylizer {
    fn default() -> Self {
        Self {
            strength: 0.5,
            sharpen: 0.5,
        }
    }
}

impl ProceduralStylizer {
    /// Dark and light palette ends derived from the prompt id.
    pub fn palette(prompt: &PromptSpec) -> ([f32; 3], [f32; 3]) {
        let bits = prompt.id_u64();
        let byte = |i: u32| ((bits >> (8 * i)) & 0xff) as f32 / 255.0;
        let dark = [0.05 + 0.3 * byte(0), 0.05 + 0.3 * byte(1), 0.05 + 0.3 * byte(2)];
        let light = [0.6 + 0.4 * byte(3), 0.6 + 0.4 * byte(4), 0.6 + 0.4 * byte(5)];
        (dark, light)
    }

    fn stylize(&self, rgb: &[f32], w: usize, h: usize, dark: [f32; 3], light: [f32; 3], t: f32) -> Vec<f32> {
        let s = self.strength * t;
        let mut remap = vec![0.0f32; rgb.len()];
        for (px, out) in rgb.chunks_exact(3).zip(remap.chunks_exact_mut(3)) {
            let l = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            for ch in 0..3 {
                let target = dark[ch] + (light[ch] - dark[ch]) * l;
                out[ch] = (1.0 - s) * px[ch] + s * target;
            }
        }
        // 3x3 box blur with edge clamping, then x + g·(x − blur)
        let at = |x: isize, y: isize, ch: usize| {
            let xc = x.clamp(0, w as isize - 1) as usize;
            let yc = y.clamp(0, h as isize - 1) as usize;
            remap[(yc * w + xc) * 3 + ch]
        };
        let mut out = vec![0.0f32; rgb.len()];
        for y in 0..h as isize {
            for x in 0..w as isize {
                for ch in 0..3 {
                    let mut blur = 0.0;
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            blur += at(x + dx, y + dy, ch);
                        }
                    }
                    let v = at(x, y, ch);
                    out[(y as usize * w + x as usize) * 3 + ch] = v + self.sharpen * (v - blur / 9.0);
                }
            }
        }
        out
    }
}

impl GuidanceOracle for ProceduralStylizer {
    fn name(&self) -> &str {
        "stylizer"
    }

    fn denoise(&self, request: &GuidanceRequest<'_>) -> Result<GuidanceTargets, GuidanceError> {
        let (w, h) = request.validate()?;
        let (dark, light) = Self::palette(request.prompt);
        let images = request.views.iter().map(|v| self.stylize(&v.rgb, w, h, dark, light, request.t)).collect();
        Ok(GuidanceTargets::new(w, h, images))
    }
}

fn check_same(tape: &Tape, a: Var, shape: &[usize], what: &str) -> Result<(), GuidanceError> {
    if tape.value(a).shape() != shape {
        return Err(GuidanceError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            tape.value(a).shape(),
            shape
        )));
    }
    Ok(())
}

/// Mean over views of the MSE between each rendered view (`[H, W, 3]`) and
/// its detached target.
pub fn sds_loss(tape: &mut Tape, views: &[Var], targets: &GuidanceTargets) -> Result<Var, GuidanceError> {
    if views.is_empty() {
        return Err(GuidanceError::NoViews);
    }
    if views.len() != targets.images.len() {
        return Err(GuidanceError::ShapeMismatch(format!(
            "{} views, {} targets",
            views.len(),
            targets.images.len()
        )));
    }
    let mut terms = Vec::with_capacity(views.len());
    for (i, &v) in views.iter().enumerate() {
        let target = targets.to_tensor(i);
        check_same(tape, v, target.shape(), "view vs target")?;
        let t = tape.constant(target);
        terms.push(tape.mse(v, t)?);
    }
    mean_of(tape, &terms)
}

/// Mean squared difference between rendered alpha (`[H, W, 1]` or
/// `[H, W]`) and reference masks, over all views and pixels.
pub fn reg_loss(tape: &mut Tape, masks: &[Var], reference: &[MaskImage]) -> Result<Var, GuidanceError> {
    if masks.is_empty() {
        return Err(GuidanceError::NoViews);
    }
    if masks.len() != reference.len() {
        return Err(GuidanceError::ShapeMismatch(format!(
            "{} masks, {} references",
            masks.len(),
            reference.len()
        )));
    }
    let mut terms = Vec::with_capacity(masks.len());
    for (&m, r) in masks.iter().zip(reference) {
        let shape = tape.value(m).shape().to_vec();
        if tape.value(m).len() != r.alpha.len() || shape.first() != Some(&r.height) || shape.get(1) != Some(&r.width) {
            return Err(GuidanceError::ShapeMismatch(format!(
                "mask {shape:?} vs reference {}x{}",
                r.height, r.width
            )));
        }
        let t = tape.constant(Tensor::new(shape, r.alpha.clone())?);
        terms.push(tape.mse(m, t)?);
    }
    // every view has the same pixel count, so the mean of per-view means is
    // the mean over all pixels
    mean_of(tape, &terms)
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var, GuidanceError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f32))
}

/// `sds + λ·reg`.
pub fn total_loss(tape: &mut Tape, sds: Var, reg: Var, lambda: f32) -> Result<Var, GuidanceError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(GuidanceError::InvalidWeight(lambda));
    }
    let weighted = tape.scale(reg, lambda);
    Ok(tape.add(sds, weighted)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::orbit_camera;

    fn view(w: usize, h: usize, fill: f32) -> RenderedView {
        RenderedView {
            width: w,
            height: h,
            rgb: vec![fill; w * h * 3],
            alpha: vec![0.0; w * h],
            camera: orbit_camera(0.0, 0.0, 2.0, 45.0, w, h).unwrap(),
        }
    }

    fn request<'a>(views: &'a [RenderedView], cams: &'a [Camera], prompt: &'a PromptSpec) -> GuidanceRequest<'a> {
        GuidanceRequest {
            views,
            cameras: cams,
            prompt,
            t: 0.5,
            seed: 1,
            subject: None,
        }
    }

    #[test]
    fn prompt_ids_are_stable_and_distinct() {
        let a = PromptSpec::new("a wooden chair").unwrap();
        assert_eq!(a.id(), PromptSpec::new("a wooden chair").unwrap().id());
        assert_ne!(a.id(), PromptSpec::new("a stone chair").unwrap().id());
        assert_eq!(a.id().len(), 16);
        assert!(PromptSpec::new("  ").is_err());
        let s = a.clone().with_view_suffixes(true);
        let back = orbit_camera(180.0, 10.0, 2.0, 45.0, 4, 4).unwrap();
        assert_eq!(s.view_text(&back), "a wooden chair, back view");
        assert_eq!(a.view_text(&back), "a wooden chair");
    }

    #[test]
    fn null_guidance_is_identity() {
        let views = vec![view(4, 4, 0.3), view(4, 4, 0.7)];
        let cams: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
        let p = PromptSpec::new("x").unwrap();
        let t = NullGuidance.denoise(&request(&views, &cams, &p)).unwrap();
        assert_eq!(t.images[0], views[0].rgb);
        assert_eq!(t.images[1], views[1].rgb);
    }

    #[test]
    fn request_validation() {
        let p = PromptSpec::new("x").unwrap();
        let views = vec![view(4, 4, 0.3), view(5, 4, 0.7)];
        let cams: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
        assert!(matches!(
            NullGuidance.denoise(&request(&views, &cams, &p)),
            Err(GuidanceError::ResolutionMismatch(_))
        ));
        assert!(matches!(
            NullGuidance.denoise(&request(&[], &[], &p)),
            Err(GuidanceError::NoViews)
        ));
        let one = vec![view(4, 4, 0.3)];
        assert!(matches!(
            NullGuidance.denoise(&request(&one, &cams, &p)),
            Err(GuidanceError::CameraCount { .. })
        ));
        let cams1 = vec![one[0].camera.clone()];
        let mut r = request(&one, &cams1, &p);
        r.t = 1.5;
        assert!(matches!(NullGuidance.denoise(&r), Err(GuidanceError::BadTimestep(_))));
    }

    #[test]
    fn stylizer_is_deterministic_and_bounded() {
        let mut v = view(6, 5, 0.0);
        for (i, x) in v.rgb.iter_mut().enumerate() {
            *x = (i % 7) as f32 / 6.0;
        }
        let views = vec![v];
        let cams = vec![views[0].camera.clone()];
        let p = PromptSpec::new("a red castle").unwrap();
        let s = ProceduralStylizer::default();
        let a = s.denoise(&request(&views, &cams, &p)).unwrap();
        let b = s.denoise(&request(&views, &cams, &p)).unwrap();
        assert_eq!(a, b);
        assert!(a.images[0].iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a.images[0], views[0].rgb);
        let other = s.denoise(&request(&views, &cams, &PromptSpec::new("a blue castle").unwrap())).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn sds_constant_gap() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(&[2, 2, 3]));
        let targets = GuidanceTargets::new(2, 2, vec![vec![1.0; 12]]);
        let l = sds_loss(&mut tape, &[v], &targets).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let same = GuidanceTargets::new(2, 2, vec![vec![0.0; 12]]);
        let l0 = sds_loss(&mut tape, &[v], &same).unwrap();
        assert_eq!(tape.value(l0).item(), 0.0);
    }

    #[test]
    fn sds_gradient_is_scaled_residual() {
        let x: Vec<f32> = (0..12).map(|i| i as f32 / 12.0).collect();
        let target: Vec<f32> = (0..12).map(|i| ((i * 5) % 12) as f32 / 12.0).collect();
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(vec![2, 2, 3], x.clone()).unwrap());
        let targets = GuidanceTargets::new(2, 2, vec![target.clone()]);
        let l = sds_loss(&mut tape, &[v], &targets).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(v).unwrap();
        for i in 0..12 {
            let want = 2.0 * (x[i] - target[i]) / 12.0;
            assert!((g[i] - want).abs() < 1e-6);
        }
        // finite difference of the scalar, in f64
        let loss = |x: &[f32]| -> f64 {
            x.iter().zip(&target).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / 12.0
        };
        let mut xp = x.clone();
        xp[3] += 1e-3;
        let mut xm = x.clone();
        xm[3] -= 1e-3;
        let fd = (loss(&xp) - loss(&xm)) / ((xp[3] - xm[3]) as f64);
        assert!((fd - g[3] as f64).abs() < 1e-5);
    }

    #[test]
    fn sds_rejects_mismatched_shapes() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(&[2, 3, 3]));
        let targets = GuidanceTargets::new(2, 2, vec![vec![1.0; 12]]);
        assert!(matches!(
            sds_loss(&mut tape, &[v], &targets),
            Err(GuidanceError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn reg_loss_values() {
        let r = MaskImage {
            width: 2,
            height: 2,
            alpha: vec![1.0; 4],
        };
        let mut tape = Tape::new();
        let empty = tape.leaf(Tensor::zeros(&[2, 2, 1]));
        let l = reg_loss(&mut tape, &[empty], std::slice::from_ref(&r)).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let full = tape.leaf(Tensor::full(&[2, 2, 1], 1.0));
        let l = reg_loss(&mut tape, &[full], std::slice::from_ref(&r)).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        // symmetric in value
        let a = vec![0.1, 0.9, 0.4, 0.0];
        let b = vec![0.7, 0.2, 0.4, 1.0];
        let val = |m: &[f32], r: &[f32]| {
            let mut tape = Tape::new();
            let v = tape.leaf(Tensor::new(vec![2, 2, 1], m.to_vec()).unwrap());
            let mi = MaskImage {
                width: 2,
                height: 2,
                alpha: r.to_vec(),
            };
            let l = reg_loss(&mut tape, &[v], &[mi]).unwrap();
            tape.value(l).item()
        };
        assert_eq!(val(&a, &b), val(&b, &a));
    }

    #[test]
    fn total_loss_arithmetic_and_linearity() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::scalar(0.5));
        let r = tape.leaf(Tensor::scalar(0.1));
        let l = total_loss(&mut tape, s, r, 10.0).unwrap();
        assert!((tape.value(l).item() - 1.5).abs() < 1e-6);
        let l0 = total_loss(&mut tape, s, r, 0.0).unwrap();
        assert_eq!(tape.value(l0).item(), 0.5);
        assert!(total_loss(&mut tape, s, r, -1.0).is_err());
        for lambda in [1.0f32, 3.0, 250.0] {
            let mut tape = Tape::new();
            let s = tape.leaf(Tensor::scalar(0.5));
            let r = tape.leaf(Tensor::scalar(0.1));
            let l = total_loss(&mut tape, s, r, lambda).unwrap();
            tape.backward(l).unwrap();
            assert_eq!(tape.grad(r).unwrap()[0], lambda);
            assert_eq!(tape.grad(s).unwrap()[0], 1.0);
        }
    }

    #[test]
    fn target_match_fixed_point() {
        let k = 6;
        let mut d = Tensor::zeros(&[1, 1, k, k, k]);
        let mut a = Tensor::full(&[1, 3, k, k, k], 0.3);
        for (i, v) in d.data_mut().iter_mut().enumerate() {
            *v = (i % 5) as f32;
        }
        a.data_mut()[7] = 0.9;
        let opts = RenderOptions {
            samples: 16,
            ..RenderOptions::default()
        };
        let oracle = TargetMatchOracle::fixed(d.clone(), a.clone(), opts.clone());
        let cams: Vec<Camera> = [0.0, 90.0].iter().map(|&az| orbit_camera(az, 20.0, 2.0, 45.0, 8, 8).unwrap()).collect();
        let views: Vec<RenderedView> = cams.iter().map(|c| render_fields(&d, &a, c, &opts).unwrap()).collect();
        let p = PromptSpec::new("ref").unwrap();
        let t = oracle.denoise(&request(&views, &cams, &p)).unwrap();
        for (img, v) in t.images.iter().zip(&views) {
            assert_eq!(img, &v.rgb);
        }
        let per = TargetMatchOracle::per_shape(|_| Err(GuidanceError::Reference("none".into())), opts);
        assert!(per.denoise(&request(&views, &cams, &p)).is_err());
    }
}
