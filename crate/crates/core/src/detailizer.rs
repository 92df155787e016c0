//! The detailizer: two 3D convolutional upsampling networks (density and
//! albedo) applied to a coarse occupancy grid, with the density confined to
//! the one-voxel dilation of the input.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{GridError, OccupancyGrid};
use crate::nn::{Checkpoint, Conv3dLayer, ConvTranspose3dLayer, NnError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum DetailizerError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("model expects a {expected}³ grid, got {got:?}")]
    DimMismatch { expected: usize, got: [usize; 3] },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetailizerConfig {
    /// Coarse resolution.
    pub k: usize,
    /// Fine resolution, `k·2^u` for `u` transposed-convolution layers.
    pub fine: usize,
    /// Output channels of the resolution-preserving convolutions.
    pub conv_channels: Vec<usize>,
    /// Output channels of every transposed convolution except the last
    /// (whose width is fixed by the head: 1 for density, 3 for albedo).
    pub up_channels: Vec<usize>,
    pub leaky_slope: f32,
    pub seed: u64,
}

impl Default for DetailizerConfig {
    fn default() -> Self {
        Self {
            k: 32,
            fine: 128,
            conv_channels: vec![32, 64, 64, 64, 64],
            up_channels: vec![32],
            leaky_slope: 0.01,
            seed: 0,
        }
    }
}

impl DetailizerConfig {
    /// Default channel plan for the given resolutions, one intermediate
    /// transposed-conv width per extra doubling.
    pub fn with_resolution(k: usize, fine: usize) -> Self {
        let ups = if fine > k && k > 0 { (fine / k).trailing_zeros() as usize } else { 0 };
        Self {
            k,
            fine,
            up_channels: vec![32; ups.saturating_sub(1)],
            ..Self::default()
        }
    }

    /// Number of transposed-convolution (doubling) layers.
    pub fn upsample_layers(&self) -> usize {
        (self.fine / self.k.max(1)).trailing_zeros() as usize
    }

    pub fn factor(&self) -> usize {
        self.fine / self.k
    }

    pub fn validate(&self) -> Result<(), DetailizerError> {
        let bad = |m: String| Err(DetailizerError::InvalidConfig(m));
        if !self.k.is_power_of_two() || self.k < 4 {
            return bad(format!("k must be a power of two >= 4, got {}", self.k));
        }
        if !self.fine.is_power_of_two() || self.fine <= self.k {
            return bad(format!("K must be k·2^u with u >= 1, got k={} K={}", self.k, self.fine));
        }
        if self.up_channels.len() + 1 != self.upsample_layers() {
            return bad(format!(
                "{} doubling layers need {} intermediate widths, got {}",
                self.upsample_layers(),
                self.upsample_layers() - 1,
                self.up_channels.len()
            ));
        }
        if self.conv_channels.is_empty() || self.conv_channels.iter().chain(&self.up_channels).any(|&c| c == 0) {
            return bad("channel widths must be positive and at least one convolution is required".into());
        }
        if !(self.leaky_slope.is_finite() && (0.0..1.0).contains(&self.leaky_slope)) {
            return bad(format!("leaky slope must be in [0, 1), got {}", self.leaky_slope));
        }
        Ok(())
    }
}

/// One upsampling network: resolution-preserving 3³ convolutions followed
/// by stride-2 transposed convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct UpsamplingNet {
    pub convs: Vec<Conv3dLayer>,
    pub ups: Vec<ConvTranspose3dLayer>,
}

impl UpsamplingNet {
    fn new(config: &DetailizerConfig, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut c = 1;
        let mut convs = Vec::new();
        for &o in &config.conv_channels {
            convs.push(Conv3dLayer::new(c, o, rng));
            c = o;
        }
        let mut ups = Vec::new();
        for &o in config.up_channels.iter().chain([&out_channels]) {
            ups.push(ConvTranspose3dLayer::new(c, o, rng));
            c = o;
        }
        Self { convs, ups }
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.convs {
            out.extend([&l.weight, &l.bias]);
        }
        for l in &self.ups {
            out.extend([&l.weight, &l.bias]);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.convs {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        for l in &mut self.ups {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        out
    }

    fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.convs.len() {
            out.push(format!("{prefix}.conv{i}.weight"));
            out.push(format!("{prefix}.conv{i}.bias"));
        }
        for i in 0..self.ups.len() {
            out.push(format!("{prefix}.up{i}.weight"));
            out.push(format!("{prefix}.up{i}.bias"));
        }
        out
    }

    /// Raw (pre-activation) output. `params` are this net's parameter
    /// nodes in [`params`](Self::params) order.
    fn forward(&self, tape: &mut Tape, x: Var, params: &[Var], slope: f32) -> Result<Var, NnError> {
        let mut h = x;
        let mut p = params.iter();
        for l in &self.convs {
            let (w, b) = (*p.next().unwrap(), *p.next().unwrap());
            h = tape.conv3d(h, w, b, l.stride, l.padding)?;
            h = tape.leaky_relu(h, slope);
        }
        for (i, _) in self.ups.iter().enumerate() {
            let (w, b) = (*p.next().unwrap(), *p.next().unwrap());
            h = tape.conv_transpose3d(h, w, b, ConvTranspose3dLayer::STRIDE, ConvTranspose3dLayer::PADDING)?;
            if i + 1 < self.ups.len() {
                h = tape.leaky_relu(h, slope);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetailizerModel {
    config: DetailizerConfig,
    pub density_net: UpsamplingNet,
    pub albedo_net: UpsamplingNet,
}

/// Fine fields produced from one coarse grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DetailizedShape {
    /// `[1, 1, K, K, K]`, zero outside `mask`.
    pub density: Tensor,
    /// `[1, 3, K, K, K]` in `[0, 1]`.
    pub albedo: Tensor,
    /// Dilated, upsampled input at K³.
    pub mask: OccupancyGrid,
}

/// Tape nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub density: Var,
    pub albedo: Var,
    /// Parameter leaves in [`DetailizerModel::params`] order.
    pub params: Vec<Var>,
    pub mask: OccupancyGrid,
}

/// `upsample_nearest(dilate(coarse, 1), factor)`: where density may be
/// nonzero.
pub fn structure_mask(coarse: &OccupancyGrid, factor: usize) -> Result<OccupancyGrid, GridError> {
    coarse.dilate(1)?.upsample_nearest(factor)
}

impl DetailizerModel {
    /// Seeded initialization; the same config gives bit-identical parameters.
    pub fn build(config: DetailizerConfig) -> Result<Self, DetailizerError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let density_net = UpsamplingNet::new(&config, 1, &mut rng);
        let albedo_net = UpsamplingNet::new(&config, 3, &mut rng);
        Ok(Self {
            config,
            density_net,
            albedo_net,
        })
    }

    pub fn config(&self) -> &DetailizerConfig {
        &self.config
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.density_net.params();
        p.extend(self.albedo_net.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.density_net.params_mut();
        p.extend(self.albedo_net.params_mut());
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = self.density_net.param_names("density");
        n.extend(self.albedo_net.param_names("albedo"));
        n
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, coarse: &OccupancyGrid) -> Result<(), DetailizerError> {
        let k = self.config.k;
        if coarse.dims() != [k; 3] {
            return Err(DetailizerError::DimMismatch {
                expected: k,
                got: coarse.dims(),
            });
        }
        Ok(())
    }

    /// Records a forward pass on `tape`, adding the parameters as leaves.
    pub fn forward_on(&self, tape: &mut Tape, coarse: &OccupancyGrid) -> Result<ForwardVars, DetailizerError> {
        let params: Vec<Var> = self.params().into_iter().map(|p| tape.leaf(p.clone())).collect();
        self.forward_with(tape, coarse, params)
    }

    /// As [`forward_on`](Self::forward_on) with caller-supplied parameter
    /// nodes, which must match [`params`](Self::params) in order and shape.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        coarse: &OccupancyGrid,
        params: Vec<Var>,
    ) -> Result<ForwardVars, DetailizerError> {
        self.check_input(coarse)?;
        let k = self.config.k;
        let fine = self.config.fine;
        let expected = self.params().len();
        if params.len() != expected {
            return Err(NnError::ShapeMismatch(format!("{} parameter nodes for {expected} parameters", params.len())).into());
        }
        let mask = structure_mask(coarse, self.config.factor())?;
        let nd = self.density_net.params().len();
        let x = tape.constant(Tensor::new(vec![1, 1, k, k, k], coarse.to_f32())?);
        let slope = self.config.leaky_slope;
        let raw_d = self.density_net.forward(tape, x, &params[..nd], slope)?;
        let raw_a = self.albedo_net.forward(tape, x, &params[nd..], slope)?;
        let m = tape.constant(Tensor::new(vec![1, 1, fine, fine, fine], mask.to_f32())?);
        let soft = tape.softplus(raw_d);
        let density = tape.mul(soft, m)?;
        let albedo = tape.sigmoid(raw_a);
        Ok(ForwardVars {
            density,
            albedo,
            params,
            mask,
        })
    }

    /// Inference: one pass, no gradient bookkeeping.
    pub fn forward(&self, coarse: &OccupancyGrid) -> Result<DetailizedShape, DetailizerError> {
        let mut tape = Tape::no_grad();
        let v = self.forward_on(&mut tape, coarse)?;
        Ok(DetailizedShape {
            density: tape.value(v.density).clone(),
            albedo: tape.value(v.albedo).clone(),
            mask: v.mask,
        })
    }

    /// Parameters plus the configuration as manifest metadata.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        let c = &self.config;
        let join = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        ck.set_meta("model", "detailizer");
        ck.set_meta("k", c.k);
        ck.set_meta("fine", c.fine);
        ck.set_meta("conv_channels", join(&c.conv_channels));
        ck.set_meta("up_channels", if c.up_channels.is_empty() { "-".into() } else { join(&c.up_channels) });
        ck.set_meta("leaky_slope", c.leaky_slope);
        ck.set_meta("seed", c.seed);
        for (name, t) in self.param_names().into_iter().zip(self.params()) {
            ck.push(name, t.clone());
        }
        ck
    }

    /// Rebuilds a model from a checkpoint. Tensors other than the model's
    /// parameters (such as optimizer state) are left in `ck`.
    pub fn from_checkpoint(ck: &mut Checkpoint) -> Result<Self, DetailizerError> {
        let corrupt = |m: String| DetailizerError::Nn(NnError::CorruptCheckpoint(m));
        let get = |key: &str| ck.meta(key).ok_or_else(|| corrupt(format!("missing meta {key}")));
        let num = |key: &str| -> Result<usize, DetailizerError> {
            get(key)?.parse().map_err(|_| corrupt(format!("bad meta {key}")))
        };
        let list = |key: &str| -> Result<Vec<usize>, DetailizerError> {
            let s = get(key)?;
            if s == "-" {
                return Ok(vec![]);
            }
            s.split(',')
                .map(|v| v.parse().map_err(|_| corrupt(format!("bad meta {key}"))))
                .collect()
        };
        let config = DetailizerConfig {
            k: num("k")?,
            fine: num("fine")?,
            conv_channels: list("conv_channels")?,
            up_channels: list("up_channels")?,
            leaky_slope: get("leaky_slope")?.parse().map_err(|_| corrupt("bad meta leaky_slope".into()))?,
            seed: get("seed")?.parse().map_err(|_| corrupt("bad meta seed".into()))?,
        };
        config.validate().map_err(|e| corrupt(e.to_string()))?;
        // Build for the shapes, then overwrite every parameter.
        let mut model = Self::build(config)?;
        let names = model.param_names();
        for (name, p) in names.iter().zip(model.params_mut()) {
            let shape = p.shape().to_vec();
            *p = ck.take(name, &shape)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DetailizerError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DetailizerError> {
        let mut ck = Checkpoint::load(path)?;
        Self::from_checkpoint(&mut ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DetailizerModel {
        DetailizerModel::build(DetailizerConfig {
            k: 8,
            fine: 32,
            conv_channels: vec![4, 4],
            up_channels: vec![4],
            seed,
            ..DetailizerConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn shape_contract() {
        let m = small(0);
        let g = OccupancyGrid::from_fn([8; 3], |x, y, z| x + y + z < 6).unwrap();
        let s = m.forward(&g).unwrap();
        assert_eq!(s.density.shape(), [1, 1, 32, 32, 32]);
        assert_eq!(s.albedo.shape(), [1, 3, 32, 32, 32]);
        assert!(s.albedo.data().iter().all(|&a| (0.0..=1.0).contains(&a)));
        assert!(s.density.data().iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(small(3), small(3));
        assert_ne!(small(3), small(4));
    }

    #[test]
    fn invalid_configs() {
        for (k, fine, ups) in [(8, 24, vec![]), (8, 8, vec![]), (6, 24, vec![]), (8, 32, vec![])] {
            let c = DetailizerConfig {
                k,
                fine,
                up_channels: ups,
                ..DetailizerConfig::default()
            };
            assert!(matches!(DetailizerModel::build(c), Err(DetailizerError::InvalidConfig(_))), "{k} {fine}");
        }
        assert_eq!(DetailizerConfig::default().upsample_layers(), 2);
        DetailizerConfig::with_resolution(16, 128).validate().unwrap();
    }

    #[test]
    fn empty_input_gives_zero_density() {
        let s = small(1).forward(&OccupancyGrid::cube(8).unwrap()).unwrap();
        assert!(s.density.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn single_voxel_density_stays_in_its_dilated_block() {
        let mut g = OccupancyGrid::cube(8).unwrap();
        g.set(3, 4, 5, true);
        let s = small(2).forward(&g).unwrap();
        // dilated cells 2..=4, 3..=5, 4..=6 → fine blocks of 12 cells per axis
        let lo = [8, 12, 16];
        for z in 0..32 {
            for y in 0..32 {
                for x in 0..32 {
                    let inside = [x, y, z].iter().zip(lo).all(|(&c, l)| (l..l + 12).contains(&c));
                    let d = s.density.data()[(z * 32 + y) * 32 + x];
                    if !inside {
                        assert_eq!(d, 0.0, "({x},{y},{z})");
                    }
                }
            }
        }
        assert!(s.density.data().iter().any(|&d| d > 0.0));
    }

    #[test]
    fn wrong_input_size() {
        let err = small(0).forward(&OccupancyGrid::cube(16).unwrap()).unwrap_err();
        assert!(matches!(err, DetailizerError::DimMismatch { expected: 8, .. }));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = small(9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.artc");
        m.save(&path).unwrap();
        let back = DetailizerModel::load(&path).unwrap();
        assert_eq!(back, m);
        let g = OccupancyGrid::from_fn([8; 3], |x, y, _| x == y).unwrap();
        assert_eq!(back.forward(&g).unwrap(), m.forward(&g).unwrap());
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            DetailizerModel::load(&path),
            Err(DetailizerError::Nn(NnError::CorruptCheckpoint(_)))
        ));
    }
}
