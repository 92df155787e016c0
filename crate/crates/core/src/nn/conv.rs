//! 3D convolution layers and their tape operations.

use rand::Rng;

use super::kernels::{self, Geometry};
use super::{Grads, NnError, Tape, Tensor, Values, Var};

/// 3³ convolution, stride 1, padding 1 (spatial dims preserved).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3dLayer {
    /// `[out, in, 3, 3, 3]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dLayer {
    pub const KERNEL: usize = 3;

    /// He-uniform weights, zero bias.
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let k = Self::KERNEL;
        let bound = (6.0 / (in_channels * k * k * k) as f32).sqrt();
        Self {
            weight: Tensor::uniform(&[out_channels, in_channels, k, k, k], -bound, bound, rng),
            bias: Tensor::zeros(&[out_channels]),
            stride: 1,
            padding: 1,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// 4³ transposed convolution, stride 2, padding 1 (spatial dims doubled).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose3dLayer {
    /// `[in, out, 4, 4, 4]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl ConvTranspose3dLayer {
    pub const KERNEL: usize = 4;
    pub const STRIDE: usize = 2;
    pub const PADDING: usize = 1;

    /// He-uniform weights (fan-in = in·k³/stride³ taps reach each output), zero bias.
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let k = Self::KERNEL;
        let bound = (6.0 / (in_channels * 8) as f32).sqrt();
        Self {
            weight: Tensor::uniform(&[in_channels, out_channels, k, k, k], -bound, bound, rng),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// `[1, C, D, H, W]` → `(C, [D, H, W])`.
fn volume(t: &Tensor, what: &str) -> Result<(usize, [usize; 3]), NnError> {
    match *t.shape() {
        [1, c, d, h, w] => Ok((c, [d, h, w])),
        ref s => Err(NnError::ShapeMismatch(format!("{what}: expected [1, C, D, H, W], got {s:?}"))),
    }
}

fn cubic_kernel(t: &Tensor, what: &str) -> Result<(usize, usize, usize), NnError> {
    match *t.shape() {
        [a, b, k, k2, k3] if k == k2 && k == k3 => Ok((a, b, k)),
        ref s => Err(NnError::ShapeMismatch(format!("{what}: expected cubic kernel, got {s:?}"))),
    }
}

fn add_bias(y: &mut [f32], bias: &[f32]) {
    let n = y.len() / bias.len();
    for (c, &b) in bias.iter().enumerate() {
        y[c * n..][..n].iter_mut().for_each(|v| *v += b);
    }
}

impl Tape {
    /// Cross-correlation of `x: [1, Cin, D, H, W]` with `w: [Cout, Cin, k, k, k]`
    /// plus `b: [Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var, NnError> {
        let (cin, dims) = volume(self.value(x), "conv3d input")?;
        let (cout, wcin, k) = cubic_kernel(self.value(w), "conv3d weight")?;
        if wcin != cin || self.value(b).shape() != [cout] {
            return Err(NnError::ShapeMismatch(format!(
                "conv3d: input has {cin} channels, weight {:?}, bias {:?}",
                self.value(w).shape(),
                self.value(b).shape()
            )));
        }
        let g = Geometry::new(k, stride, padding);
        let out = g
            .out_dims(dims)
            .ok_or_else(|| NnError::ShapeMismatch(format!("conv3d: input {dims:?} smaller than kernel {k}")))?;
        let (mut y, _) = kernels::correlate(self.value(x).data(), cin, dims, self.value(w).data(), cout, g);
        add_bias(&mut y, self.value(b).data());
        let value = Tensor::new(vec![1, cout, out[0], out[1], out[2]], y)?;
        Ok(self.push_op(value, &[x, w, b], move |vals: &Values<'_>, gy: &[f32], grads: &mut Grads<'_>| {
            if grads.wants(x) {
                let gx = kernels::correlate_transpose(gy, cout, vals.get(w).data(), cin, dims, g);
                grads.add(x, &gx);
            }
            if grads.wants(w) {
                let gw = kernels::correlate_grad_weight(vals.get(x).data(), cin, dims, gy, cout, g);
                grads.add(w, &gw);
            }
            if grads.wants(b) {
                grads.add(b, &kernels::channel_sums(gy, cout));
            }
        }))
    }

    /// Transposed convolution of `x: [1, Cin, D, H, W]` with
    /// `w: [Cin, Cout, k, k, k]` plus `b: [Cout]`; the exact adjoint of
    /// [`conv3d`](Self::conv3d) with the same weights, stride and padding.
    /// Output extent per axis is `(n - 1)·stride - 2·padding + k`.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, NnError> {
        let (cin, dims) = volume(self.value(x), "conv_transpose3d input")?;
        let (wcin, cout, k) = cubic_kernel(self.value(w), "conv_transpose3d weight")?;
        if wcin != cin || self.value(b).shape() != [cout] {
            return Err(NnError::ShapeMismatch(format!(
                "conv_transpose3d: input has {cin} channels, weight {:?}, bias {:?}",
                self.value(w).shape(),
                self.value(b).shape()
            )));
        }
        let g = Geometry::new(k, stride, padding);
        let out = dims.map(|n| ((n - 1) * stride + k).checked_sub(2 * padding));
        let out = match out {
            [Some(a), Some(b), Some(c)] if a > 0 && b > 0 && c > 0 => [a, b, c],
            _ => return Err(NnError::ShapeMismatch(format!("conv_transpose3d: degenerate output for {dims:?}"))),
        };
        if g.out_dims(out) != Some(dims) {
            return Err(NnError::ShapeMismatch(format!(
                "conv_transpose3d: geometry {g:?} does not invert to {dims:?}"
            )));
        }
        // Forward of the transpose is the input-adjoint of a correlation
        // mapping `out` → `dims` whose weight has `cin` outputs and `cout` inputs.
        let mut y = kernels::correlate_transpose(self.value(x).data(), cin, self.value(w).data(), cout, out, g);
        add_bias(&mut y, self.value(b).data());
        let value = Tensor::new(vec![1, cout, out[0], out[1], out[2]], y)?;
        Ok(self.push_op(value, &[x, w, b], move |vals: &Values<'_>, gy: &[f32], grads: &mut Grads<'_>| {
            if grads.wants(x) {
                let (gx, _) = kernels::correlate(gy, cout, out, vals.get(w).data(), cin, g);
                grads.add(x, &gx);
            }
            if grads.wants(w) {
                let gw = kernels::correlate_grad_weight(gy, cout, out, vals.get(x).data(), cin, g);
                grads.add(w, &gw);
            }
            if grads.wants(b) {
                grads.add(b, &kernels::channel_sums(gy, cout));
            }
        }))
    }
}
