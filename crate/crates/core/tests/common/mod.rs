//! Helpers shared by integration tests.
//!
//! `reference` is a direct-loop f64 detailizer forward pass, written
//! independently of the im2col kernels, used as a finite-difference oracle.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxdetail::detailizer::{structure_mask, DetailizerConfig, DetailizerModel};
use voxdetail::metrics::voxelize_density;
use voxdetail::render::{self, orbit_camera, RenderOptions};
use voxdetail::nn::gradcheck::{self, check_with_oracle, sample_probes, GradCheck};
use voxdetail::nn::{NnError, Tensor, Var};
use voxdetail::OccupancyGrid;

/// `[c][z][y][x]` volume in f64.
pub struct Vol {
    pub c: usize,
    pub n: usize,
    pub v: Vec<f64>,
}

impl Vol {
    pub fn at(&self, c: usize, z: isize, y: isize, x: isize) -> f64 {
        let n = self.n as isize;
        if z < 0 || y < 0 || x < 0 || z >= n || y >= n || x >= n {
            return 0.0;
        }
        self.v[((c * self.n + z as usize) * self.n + y as usize) * self.n + x as usize]
    }
}

pub fn conv(x: &Vol, w: &Tensor, b: &Tensor) -> Vol {
    let (co, ci) = (w.shape()[0], w.shape()[1]);
    let n = x.n;
    let wd = w.data();
    let mut v = vec![0.0; co * n * n * n];
    for o in 0..co {
        for z in 0..n {
            for y in 0..n {
                for xx in 0..n {
                    let mut s = b.data()[o] as f64;
                    for i in 0..ci {
                        for kz in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let wv = wd[(((o * ci + i) * 3 + kz) * 3 + ky) * 3 + kx] as f64;
                                    s += wv * x.at(i, z as isize + kz as isize - 1, y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                }
                            }
                        }
                    }
                    v[((o * n + z) * n + y) * n + xx] = s;
                }
            }
        }
    }
    Vol { c: co, n, v }
}

/// Stride 2, padding 1, 4³ kernel: input cell `i` and tap `k` land on `2i - 1 + k`.
pub fn up(x: &Vol, w: &Tensor, b: &Tensor) -> Vol {
    let (ci, co) = (w.shape()[0], w.shape()[1]);
    let (n, m) = (x.n, 2 * x.n);
    let wd = w.data();
    let mut v = vec![0.0; co * m * m * m];
    for o in 0..co {
        v[o * m * m * m..][..m * m * m].iter_mut().for_each(|e| *e = b.data()[o] as f64);
    }
    for i in 0..ci {
        for z in 0..n {
            for y in 0..n {
                for xx in 0..n {
                    let xv = x.at(i, z as isize, y as isize, xx as isize);
                    for o in 0..co {
                        for kz in 0..4 {
                            for ky in 0..4 {
                                for kx in 0..4 {
                                    let (oz, oy, ox) = (2 * z + kz, 2 * y + ky, 2 * xx + kx);
                                    if oz == 0 || oy == 0 || ox == 0 || oz > m || oy > m || ox > m {
                                        continue;
                                    }
                                    let wv = wd[(((i * co + o) * 4 + kz) * 4 + ky) * 4 + kx] as f64;
                                    v[((o * m + oz - 1) * m + oy - 1) * m + ox - 1] += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Vol { c: co, n: m, v }
}

fn net(input: &Vol, params: &[Tensor], convs: usize, slope: f64) -> Vol {
    let leaky = |mut h: Vol| {
        h.v.iter_mut().for_each(|e| *e = if *e > 0.0 { *e } else { slope * *e });
        h
    };
    let mut h = Vol { c: input.c, n: input.n, v: input.v.clone() };
    let mut p = params.chunks(2);
    for _ in 0..convs {
        let wb = p.next().unwrap();
        h = leaky(conv(&h, &wb[0], &wb[1]));
    }
    let ups: Vec<&[Tensor]> = p.collect();
    for (i, wb) in ups.iter().enumerate() {
        h = up(&h, &wb[0], &wb[1]);
        if i + 1 < ups.len() {
            h = leaky(h);
        }
    }
    h
}

/// f64 density (`albedo = false`) or albedo of the model with `params`.
pub fn reference(model: &DetailizerModel, coarse: &OccupancyGrid, params: &[Tensor], albedo: bool) -> Vec<f64> {
    let cfg = model.config();
    let input = Vol {
        c: 1,
        n: cfg.k,
        v: coarse.to_f32().iter().map(|&v| v as f64).collect(),
    };
    let nd = 2 * (model.density_net.convs.len() + model.density_net.ups.len());
    let slope = cfg.leaky_slope as f64;
    if albedo {
        let raw = net(&input, &params[nd..], model.albedo_net.convs.len(), slope);
        raw.v.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()
    } else {
        let raw = net(&input, &params[..nd], model.density_net.convs.len(), slope);
        let mask = structure_mask(coarse, cfg.factor()).unwrap();
        raw.v
            .iter()
            .zip(mask.cells())
            .map(|(&x, &m)| if m { x.max(0.0) + (-x.abs()).exp().ln_1p() } else { 0.0 })
            .collect()
    }
}

pub fn random_grid(k: usize, seed: u64) -> OccupancyGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    OccupancyGrid::from_fn([k; 3], |_, _, _| rng.random_bool(0.4)).unwrap()
}

/// Checks `count` random parameters of a 4³ → 16³ detailizer, each against
/// the output its own net produces.
pub fn detailizer_check(count: usize, h: f32, seed: u64) -> GradCheck {
    let model = DetailizerModel::build(DetailizerConfig {
        seed,
        ..DetailizerConfig::with_resolution(4, 16)
    })
    .unwrap();
    let coarse = random_grid(4, seed);
    let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let nd = 2 * (model.density_net.convs.len() + model.density_net.ups.len());
    let probes = sample_probes(&params, count, seed);
    let mut report = GradCheck::default();
    for albedo in [false, true] {
        let picked: Vec<_> = probes.iter().copied().filter(|&(p, _)| (p >= nd) == albedo).collect();
        let r = check_with_oracle(
            &params,
            |t, v: &[Var]| {
                let fv = model
                    .forward_with(t, &coarse, v.to_vec())
                    .map_err(|e| NnError::ShapeMismatch(e.to_string()))?;
                Ok(if albedo { fv.albedo } else { fv.density })
            },
            |ps: &[Tensor]| Ok(reference(&model, &coarse, ps, albedo)),
            &picked,
            h,
            seed,
        )
        .unwrap();
        report.probes.extend(r.probes);
    }
    report
}


/// Random model config small enough for property tests.
pub fn small_config(seed: u64, k: usize, fine: usize) -> DetailizerConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DetailizerConfig {
        conv_channels: vec![rng.random_range(2..6); rng.random_range(1..3)],
        up_channels: vec![rng.random_range(2..5); (fine / k).trailing_zeros() as usize - 1],
        seed,
        ..DetailizerConfig::with_resolution(k, fine)
    }
}

/// Cells of a grid with at most 64 cells packed into a bit mask.
pub fn packed(g: &OccupancyGrid) -> u64 {
    g.cells().iter().enumerate().fold(0u64, |m, (i, &c)| m | ((c as u64) << i))
}

pub fn random_fields(k: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Tensor::uniform(&[1, 1, k, k, k], 0.0, 4.0, &mut rng);
    let a = Tensor::uniform(&[1, 3, k, k, k], 0.0, 1.0, &mut rng);
    (d, a)
}

pub fn render_gradcheck(k: usize, size: usize, probes: usize, h: f32, unrounded: bool) -> gradcheck::GradCheck {
    let (d, a) = random_fields(k, 1);
    let cam = orbit_camera(30.0, 20.0, 2.0, 45.0, size, size).unwrap();
    let opts = RenderOptions::default();
    let params = vec![d, a];
    let picks = gradcheck::sample_probes(&params, probes, 7);
    let build = |t: &mut voxdetail::nn::Tape, v: &[voxdetail::nn::Var]| Ok(render::render(t, v[0], v[1], &cam, &opts).expect("valid fields"));
    if unrounded {
        let oracle = |ps: &[Tensor]| Ok(render::render_pixels_f64(&ps[0], &ps[1], &cam, &opts).expect("valid fields"));
        gradcheck::check_with_oracle(&params, build, oracle, &picks, h, 3).unwrap()
    } else {
        gradcheck::check(&params, build, &picks, h, 3).unwrap()
    }
}

/// Density outside the dilated, upsampled input and coarse cells outside
/// `dilate(input, 1)` after thresholding, summed over thresholds {1, 30, 100}.
pub fn confinement_violations(seed: u64) -> usize {
    let k = 4;
    let fine = k * [2usize, 4][(seed % 2) as usize];
    let model = DetailizerModel::build(small_config(seed, k, fine)).unwrap();
    let grid = random_grid(k, seed ^ 0xabc);
    let out = model.forward(&grid).unwrap();
    let mask = structure_mask(&grid, fine / k).unwrap();
    let mut bad = out
        .density
        .data()
        .iter()
        .zip(mask.cells())
        .filter(|(&d, &m)| !m && d != 0.0)
        .count();
    let dilated = grid.dilate(1).unwrap();
    // scale the field so each threshold actually selects cells
    for threshold in [1.0f32, 30.0, 100.0] {
        for gain in [1.0f32, threshold * 2.0] {
            let mut d = out.density.clone();
            d.data_mut().iter_mut().for_each(|v| *v *= gain);
            let v = voxelize_density(&d, threshold, k).unwrap();
            bad += v.cells().iter().zip(dilated.cells()).filter(|(&g, &m)| g && !m).count();
        }
    }
    bad
}
