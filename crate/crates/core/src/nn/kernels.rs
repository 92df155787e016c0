//! Dense 3D cross-correlation and its two adjoints, built on im2col + SGEMM.
//!
//! Arrays are batch-free: activations `[C, D, H, W]`, weights
//! `[Cout, Cin, k, k, k]`, all row-major. Work is split per output z-slice
//! and reduced in slice order, so results do not depend on thread count.

use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Geometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Output extent of a correlation over `n` input cells.
    pub fn out_len(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        (padded >= self.kernel && self.stride > 0).then(|| (padded - self.kernel) / self.stride + 1)
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> Option<[usize; 3]> {
        Some([
            self.out_len(dims[0])?,
            self.out_len(dims[1])?,
            self.out_len(dims[2])?,
        ])
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }
}

/// `c = a·b + beta·c` for row-major `a: [m, k]`, `b: [k, n]`, `c: [m, n]`,
/// with explicit strides so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every element the routine touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Range of output positions `o` whose tap `t` lands inside `[0, n)`:
/// `0 <= o·s - p + t < n`.
fn valid_range(n: usize, out: usize, s: usize, p: usize, t: usize) -> std::ops::Range<usize> {
    let lo = if t >= p { 0 } else { (p - t).div_ceil(s) };
    // o·s <= n - 1 + p - t
    let hi = if n + p > t { ((n - 1 + p - t) / s + 1).min(out) } else { 0 };
    lo..hi.max(lo)
}

/// Unrolled patches for output slice `oz`: rows `(ci, kz, ky, kx)`,
/// columns `(oy, ox)`.
fn im2col_slice(
    x: &[f32],
    cin: usize,
    dims: [usize; 3],
    out: [usize; 3],
    g: Geometry,
    oz: usize,
    cols: &mut [f32],
) {
    let [d, h, w] = dims;
    let [_, ho, wo] = out;
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let n = ho * wo;
    cols.fill(0.0);
    for ci in 0..cin {
        for kz in 0..k {
            let iz = (oz * s + kz) as isize - p as isize;
            if iz < 0 || iz as usize >= d {
                continue;
            }
            let plane = &x[(ci * d + iz as usize) * h * w..][..h * w];
            for ky in 0..k {
                let ys = valid_range(h, ho, s, p, ky);
                for kx in 0..k {
                    let xs = valid_range(w, wo, s, p, kx);
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let dst = &mut cols[row * n..][..n];
                    for oy in ys.clone() {
                        let src = &plane[(oy * s + ky - p) * w..][..w];
                        let drow = &mut dst[oy * wo..][..wo];
                        if s == 1 {
                            let off = xs.start + kx - p;
                            drow[xs.clone()].copy_from_slice(&src[off..off + xs.len()]);
                        } else {
                            for ox in xs.clone() {
                                drow[ox] = src[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y[co] = Σ_ci w[co, ci] ⋆ x[ci]` with the given geometry (no bias).
/// Returns the output and its spatial dims.
pub fn correlate(
    x: &[f32],
    cin: usize,
    dims: [usize; 3],
    w: &[f32],
    cout: usize,
    g: Geometry,
) -> (Vec<f32>, [usize; 3]) {
    let out = g.out_dims(dims).expect("kernel larger than padded input");
    assert_eq!(x.len(), cin * dims.iter().product::<usize>());
    assert_eq!(w.len(), cout * cin * g.taps());
    let [dout, ho, wo] = out;
    let n = ho * wo;
    let kk = cin * g.taps();
    let slices = par::map_range(dout, |oz| {
        let mut cols = vec![0.0; kk * n];
        im2col_slice(x, cin, dims, out, g, oz, &mut cols);
        let mut y = vec![0.0; cout * n];
        gemm(cout, kk, n, w, (kk, 1), &cols, (n, 1), 0.0, &mut y);
        y
    });
    let mut y = vec![0.0; cout * dout * n];
    for (oz, slice) in slices.iter().enumerate() {
        for co in 0..cout {
            y[(co * dout + oz) * n..][..n].copy_from_slice(&slice[co * n..][..n]);
        }
    }
    (y, out)
}

/// Gradient of [`correlate`] with respect to its weights:
/// `gw[co, ci, t] = Σ_o gy[co, o]·x[ci, o·s - p + t]`.
pub fn correlate_grad_weight(
    x: &[f32],
    cin: usize,
    dims: [usize; 3],
    gy: &[f32],
    cout: usize,
    g: Geometry,
) -> Vec<f32> {
    let out = g.out_dims(dims).expect("kernel larger than padded input");
    let [dout, ho, wo] = out;
    let n = ho * wo;
    assert_eq!(gy.len(), cout * dout * n);
    let kk = cin * g.taps();
    let partials = par::map_range(dout, |oz| {
        let mut cols = vec![0.0; kk * n];
        im2col_slice(x, cin, dims, out, g, oz, &mut cols);
        let mut part = vec![0.0; cout * kk];
        // gy slice [cout, n] with row stride dout·n, times colsᵀ [n, kk].
        gemm(cout, n, kk, &gy[oz * n..], (dout * n, 1), &cols, (1, n), 0.0, &mut part);
        part
    });
    let mut gw = vec![0.0; cout * kk];
    for part in &partials {
        for (a, b) in gw.iter_mut().zip(part) {
            *a += b;
        }
    }
    gw
}

/// Adjoint of [`correlate`] with respect to its input: scatters `y`
/// (`[cout, out dims]`) back onto an input of extent `dims`, returning
/// `[cin, dims]`. With stride 2 this is the transposed convolution.
///
/// Per slice `oz` of `y`, one GEMM forms every tap's contribution
/// `z[(ci, t), pos] = Σ_co w[co, ci, t]·y[co, oz, pos]`; a col2im pass then adds
/// them into `x`. Slices are computed in parallel blocks and scattered in
/// slice order, which fixes the summation order.
pub fn correlate_transpose(
    y: &[f32],
    cout: usize,
    w: &[f32],
    cin: usize,
    dims: [usize; 3],
    g: Geometry,
) -> Vec<f32> {
    const BLOCK: usize = 8;
    let out = g.out_dims(dims).expect("kernel larger than padded input");
    let [dout, ho, wo] = out;
    let n = ho * wo;
    let rows = cin * g.taps();
    assert_eq!(y.len(), cout * dout * n);
    assert_eq!(w.len(), cout * rows);
    let mut x = vec![0.0; cin * dims.iter().product::<usize>()];
    for start in (0..dout).step_by(BLOCK) {
        let cols = par::map_range(BLOCK.min(dout - start), |j| {
            let oz = start + j;
            let mut z = vec![0.0; rows * n];
            // A[(ci, t), co] = w[co, ci, t]
            gemm(rows, cout, n, w, (1, rows), &y[oz * n..], (dout * n, 1), 0.0, &mut z);
            z
        });
        for (j, z) in cols.iter().enumerate() {
            col2im_slice(z, cin, dims, out, g, start + j, &mut x);
        }
    }
    x
}

/// Adds unrolled patches of output slice `oz` (layout of [`im2col_slice`])
/// back onto `x`.
fn col2im_slice(cols: &[f32], cin: usize, dims: [usize; 3], out: [usize; 3], g: Geometry, oz: usize, x: &mut [f32]) {
    let [d, h, w] = dims;
    let [_, ho, wo] = out;
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let n = ho * wo;
    for ci in 0..cin {
        for kz in 0..k {
            let iz = (oz * s + kz) as isize - p as isize;
            if iz < 0 || iz as usize >= d {
                continue;
            }
            let plane = &mut x[(ci * d + iz as usize) * h * w..][..h * w];
            for ky in 0..k {
                let ys = valid_range(h, ho, s, p, ky);
                for kx in 0..k {
                    let xs = valid_range(w, wo, s, p, kx);
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let src = &cols[row * n..][..n];
                    for oy in ys.clone() {
                        let dst = &mut plane[(oy * s + ky - p) * w..][..w];
                        let srow = &src[oy * wo..][..wo];
                        if s == 1 {
                            let off = xs.start + kx - p;
                            for (a, b) in dst[off..off + xs.len()].iter_mut().zip(&srow[xs.clone()]) {
                                *a += b;
                            }
                        } else {
                            for ox in xs.clone() {
                                dst[ox * s + kx - p] += srow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel sum over all spatial positions of `[c, n]` data.
pub fn channel_sums(g: &[f32], channels: usize) -> Vec<f32> {
    let n = g.len() / channels;
    (0..channels)
        .map(|c| g[c * n..][..n].iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect()
}
