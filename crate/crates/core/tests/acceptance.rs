//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so every criterion reports even when an earlier one fails.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxdetail::detailizer::{DetailizerConfig, DetailizerModel};
use voxdetail::meshio::extract_mesh;
use voxdetail::metrics::{
    clip_score, frechet_distance, loose_iou, strict_iou, voxelize_density, EmbeddingSource, EmbeddingVector, FeatureSet,
    MetricError,
};
use voxdetail::nn::gradcheck::{check_with_oracle, sample_probes, GradCheck};
use voxdetail::nn::{Checkpoint, Tape, Tensor, Var};
use voxdetail::par::with_threads;
use voxdetail::train::{
    build_oracle, evaluate_render_mse, lambda_at, load_dataset, run_training, run_two_stage, toy, TrainConfig,
};
use voxdetail::OccupancyGrid;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let r = common::render_gradcheck(8, 64, 200, 1e-3, true);
    let secs = start.elapsed().as_secs_f64();
    let frac = r.pass_fraction(1e-3);
    outcome(
        r.probes.len() == 200 && frac >= 0.95 && secs < 60.0,
        format!("{:.1}% of {} probes under 1e-3 at h=1e-3, {secs:.1} s", 100.0 * frac, r.probes.len()),
    )
}

fn random(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor {
    Tensor::uniform(shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn vol(t: &Tensor) -> common::Vol {
    let s = t.shape();
    common::Vol {
        c: s[1],
        n: s[2],
        v: t.data().iter().map(|&v| v as f64).collect(),
    }
}

fn all_pass(name: &str, r: &GradCheck, count: usize) -> (bool, String) {
    (
        r.probes.len() == count && r.passed(1e-3) == count,
        format!("{name} {}/{} (max {:.1e})", r.passed(1e-3), r.probes.len(), r.max_rel_err()),
    )
}

fn criterion_2() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;

    let conv_params = vec![
        random(&[1, 3, 5, 5, 5], -1.0, 1.0, 1),
        random(&[4, 3, 3, 3, 3], -0.5, 0.5, 2),
        random(&[4], -0.5, 0.5, 3),
    ];
    let r = check_with_oracle(
        &conv_params,
        |t: &mut Tape, v: &[Var]| t.conv3d(v[0], v[1], v[2], 1, 1),
        |ps: &[Tensor]| Ok(common::conv(&vol(&ps[0]), &ps[1], &ps[2]).v),
        &sample_probes(&conv_params, 30, 4),
        1e-3,
        5,
    )
    .expect("conv3d check runs");
    let (p, s) = all_pass("conv3d", &r, 30);
    ok &= p;
    parts.push(s);

    let up_params = vec![
        random(&[1, 3, 4, 4, 4], -1.0, 1.0, 6),
        random(&[3, 2, 4, 4, 4], -0.5, 0.5, 7),
        random(&[2], -0.5, 0.5, 8),
    ];
    let r = check_with_oracle(
        &up_params,
        |t: &mut Tape, v: &[Var]| t.conv_transpose3d(v[0], v[1], v[2], 2, 1),
        |ps: &[Tensor]| Ok(common::up(&vol(&ps[0]), &ps[1], &ps[2]).v),
        &sample_probes(&up_params, 30, 9),
        1e-3,
        10,
    )
    .expect("conv_transpose3d check runs");
    let (p, s) = all_pass("conv_transpose3d", &r, 30);
    ok &= p;
    parts.push(s);

    let act_params = vec![random(&[2, 3, 5], -4.0, 4.0, 11), random(&[2, 3, 5], -4.0, 4.0, 12)];
    let r = check_with_oracle(
        &act_params,
        |t: &mut Tape, v: &[Var]| {
            let a = t.softplus(v[0]);
            let b = t.sigmoid(v[1]);
            t.mul(a, b)
        },
        |ps: &[Tensor]| {
            Ok(ps[0]
                .data()
                .iter()
                .zip(ps[1].data())
                .map(|(&x, &y)| {
                    let (x, y) = (x as f64, y as f64);
                    (x.max(0.0) + (-x.abs()).exp().ln_1p()) / (1.0 + (-y).exp())
                })
                .collect())
        },
        &sample_probes(&act_params, 30, 13),
        1e-3,
        14,
    )
    .expect("activation check runs");
    let (p, s) = all_pass("softplus/sigmoid", &r, 30);
    ok &= p;
    parts.push(s);

    let r = common::detailizer_check(30, 1e-5, 5);
    let (p, s) = all_pass("detailizer 4->16 (h=1e-5)", &r, 30);
    ok &= p;
    parts.push(s);
    outcome(ok, parts.join(", "))
}

fn criterion_3() -> Outcome {
    let bad: usize = (0..100).map(common::confinement_violations).sum();
    outcome(bad == 0, format!("{bad} violations over 100 (model, grid) pairs at thresholds 1, 30, 100"))
}

fn criterion_4() -> Outcome {
    let grids: Vec<OccupancyGrid> = (0..256u32)
        .map(|m| OccupancyGrid::from_cells([2; 3], (0..8).map(|i| m >> i & 1 == 1).collect()).expect("8 cells"))
        .collect();
    let mut mismatches = 0;
    let mut pairs = 0;
    for a in &grids {
        let pa = common::packed(a);
        for b in &grids {
            let pb = common::packed(b);
            pairs += 1;
            let (inter, union) = ((pa & pb).count_ones(), (pa | pb).count_ones());
            let strict = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            if strict_iou(a, b) != Ok(strict) {
                mismatches += 1;
            }
            let loose_ok = match loose_iou(a, b) {
                Ok(l) => pa != 0 && l == inter as f64 / pa.count_ones() as f64,
                Err(e) => pa == 0 && e == MetricError::EmptyReference,
            };
            mismatches += usize::from(!loose_ok);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut order_bad = 0;
    let mut drawn = 0;
    while drawn < 100 {
        let a = common::random_grid(4, rng.random());
        let b = common::random_grid(4, rng.random());
        if a.is_vacant() {
            continue;
        }
        drawn += 1;
        if loose_iou(&a, &b).unwrap() < strict_iou(&a, &b).unwrap() {
            order_bad += 1;
        }
    }
    outcome(
        mismatches == 0 && order_bad == 0,
        format!("{mismatches} mismatches over {pairs} pairs of 2^3 grids, {order_bad}/100 loose < strict on 4^3"),
    )
}

fn criterion_5() -> Outcome {
    let cfg = TrainConfig::default();
    let total = cfg.total_iters();
    let lambdas: Vec<f64> = (0..total).map(|i| lambda_at(&cfg, i).expect("valid schedule")).collect();
    let first = lambdas[0];
    let last = lambdas[total - 1];
    let monotone = lambdas.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        first == 1e4 && last == 10.0 && monotone,
        format!("lambda[0] = {first}, lambda[{}] = {last}, monotone = {monotone}", total - 1),
    )
}

struct ToyRun {
    mse_ratio: f64,
    loose: f64,
    secs: f64,
}

fn toy_run(seed: u64, regularize: bool) -> ToyRun {
    let mut cfg = toy::config(seed);
    cfg.regularize = regularize;
    let data = load_dataset(&cfg).expect("toy dataset");
    let oracle = build_oracle(&cfg).expect("toy oracle");
    let start = Instant::now();
    let fresh = DetailizerModel::build(cfg.model.clone()).expect("toy model");
    let mse0 = evaluate_render_mse(&fresh, &data, oracle.as_ref(), &cfg).expect("initial mse");
    let st = run_training(&cfg, &data, oracle.as_ref(), None, None, &mut |_| {}).expect("toy run");
    let mse = evaluate_render_mse(&st.model, &data, oracle.as_ref(), &cfg).expect("final mse");
    let loose = data
        .iter()
        .map(|g| {
            let out = st.model.forward(g).expect("forward");
            let v = voxelize_density(&out.density, 30.0, cfg.model.k).expect("voxelize");
            loose_iou(g, &v).expect("nonempty toy grid")
        })
        .sum::<f64>()
        / data.len() as f64;
    ToyRun {
        mse_ratio: mse / mse0,
        loose,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn criteria_6_and_7() -> (Outcome, Outcome) {
    let mut with = Vec::new();
    let mut without = Vec::new();
    for seed in 0..3 {
        with.push(toy_run(seed, true));
        without.push(toy_run(seed, false));
    }
    let r = &with[0];
    let six = outcome(
        r.mse_ratio <= 0.5 && r.loose >= 0.8 && r.secs < 900.0,
        format!(
            "seed 0: final/initial render MSE {:.3}, Loose-IoU {:.3}, {:.0} s",
            r.mse_ratio, r.loose, r.secs
        ),
    );
    let wins = with.iter().zip(&without).filter(|(a, b)| a.loose > b.loose).count();
    let detail = with
        .iter()
        .zip(&without)
        .enumerate()
        .map(|(s, (a, b))| format!("seed {s}: {:.3} vs {:.3}", a.loose, b.loose))
        .collect::<Vec<_>>()
        .join(", ");
    (six, outcome(wins == 3, format!("{wins}/3 schedule > zero ({detail})")))
}

fn blob(k: usize) -> OccupancyGrid {
    let c = (k as f32 - 1.0) / 2.0;
    OccupancyGrid::from_fn([k; 3], |x, y, z| {
        let d = [x, y, z].map(|v| (v as f32 - c) / k as f32);
        d[0] * d[0] + d[1] * d[1] + 2.0 * d[2] * d[2] < 0.12
    })
    .expect("nonzero dims")
}

fn latency(k: usize, fine: usize, threads: Option<usize>) -> Duration {
    let model = DetailizerModel::build(DetailizerConfig::with_resolution(k, fine)).expect("model");
    let grid = blob(k);
    let run = || {
        let start = Instant::now();
        let shape = model.forward(&grid).expect("forward");
        // an untrained net sits near softplus(0); extract at a level it crosses
        let mesh = extract_mesh(&shape, 0.5).expect("mesh");
        assert!(!mesh.triangles.is_empty());
        start.elapsed()
    };
    match threads {
        Some(t) => with_threads(t, run),
        None => run(),
    }
}

fn criterion_8() -> Outcome {
    let small = latency(16, 64, Some(1));
    let large = latency(32, 128, None);
    outcome(
        small < Duration::from_secs(1) && large < Duration::from_secs(5),
        format!(
            "16->64 single-threaded {:.0} ms, 32->128 on {} threads {:.0} ms",
            small.as_secs_f64() * 1e3,
            voxdetail::par::current_threads(),
            large.as_secs_f64() * 1e3
        ),
    )
}

/// All sign patterns of `±spread` around `mean`: exact mean and diagonal
/// unbiased covariance `spread² · n / (n − 1)`.
fn factorial(mean: &[f64], spread: &[f64]) -> FeatureSet {
    let d = mean.len();
    let rows = (0..1usize << d)
        .map(|m| (0..d).map(|j| mean[j] + if m >> j & 1 == 1 { spread[j] } else { -spread[j] }).collect())
        .collect();
    FeatureSet::new(rows).expect("consistent rows")
}

fn closed_form(m1: &[f64], s1: &[f64], m2: &[f64], s2: &[f64]) -> f64 {
    let n = (1usize << m1.len()) as f64;
    let scale = (n / (n - 1.0)).sqrt();
    (0..m1.len())
        .map(|j| (m1[j] - m2[j]).powi(2) + (scale * s1[j] - scale * s2[j]).powi(2))
        .sum()
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let rows: Vec<Vec<f64>> = (0..64).map(|_| (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let set = FeatureSet::new(rows).expect("rows");
    let same = frechet_distance(&set, &set).expect("fd");

    let (m1, s1, m2, s2) = ([0.3], [1.5], [-1.2], [0.4]);
    let one = frechet_distance(&factorial(&m1, &s1), &factorial(&m2, &s2)).expect("fd");
    let one_err = (one - closed_form(&m1, &s1, &m2, &s2)).abs();

    let (m1, s1) = ([0.0, 1.0, -2.0, 0.5], [1.0, 0.2, 2.5, 0.7]);
    let (m2, s2) = ([1.0, 1.0, 0.0, -0.5], [0.3, 1.1, 2.5, 1.9]);
    let diag = frechet_distance(&factorial(&m1, &s1), &factorial(&m2, &s2)).expect("fd");
    let diag_err = (diag - closed_form(&m1, &s1, &m2, &s2)).abs();
    outcome(
        same < 1e-6 && one_err < 1e-4 && diag_err < 1e-4,
        format!("identical {same:.1e}, 1-D error {one_err:.1e}, diagonal error {diag_err:.1e}"),
    )
}

fn criterion_10() -> Outcome {
    let e = |v: Vec<f64>, s| EmbeddingVector::new(v, s).expect("finite");
    let a = e(vec![0.3, -1.2, 2.0, 0.5], EmbeddingSource::Image);
    let same = clip_score(&a, &e(a.values.clone(), EmbeddingSource::Text)).expect("score");
    let orth = clip_score(&a, &e(vec![1.2, 0.3, 0.0, 0.0], EmbeddingSource::Text)).expect("score");
    let opp = clip_score(&a, &e(a.values.iter().map(|v| -v).collect(), EmbeddingSource::Text)).expect("score");
    outcome(
        same == 100.0 && orth == 0.0 && opp == 0.0,
        format!("identical {same}, orthogonal {orth}, opposite {opp}"),
    )
}

fn criterion_11() -> Outcome {
    let mut cfg = toy::config(11);
    cfg.stage1_iters = 5;
    cfg.stage2_iters = 10;
    let data = toy::dataset(8);
    let oracle = build_oracle(&cfg).expect("oracle");
    let run = || with_threads(1, || run_two_stage(&cfg, &data, oracle.as_ref()).expect("run"));
    let (m1, h1) = run();
    let (_, h2) = run();
    let same_history = h1.same_losses(&h2);

    let mut ck = Checkpoint::from_bytes(&m1.to_checkpoint().to_bytes()).expect("decode");
    let back = DetailizerModel::from_checkpoint(&mut ck).expect("restore");
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let exact = data.iter().all(|g| {
        let (a, b) = (m1.forward(g).expect("forward"), back.forward(g).expect("forward"));
        bits(&a.density) == bits(&b.density) && bits(&a.albedo) == bits(&b.albedo)
    });
    outcome(
        same_history && exact,
        format!("history identical = {same_history} over {} iterations, checkpoint forward bit-exact = {exact}", h1.len()),
    )
}

fn main() {
    let quick = std::env::args().any(|a| a == "--quick");
    let mut results: Vec<(u32, Outcome)> = vec![
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (4, criterion_4()),
        (5, criterion_5()),
    ];
    if quick {
        println!("criteria 6 and 7 skipped (--quick)");
    } else {
        let (six, seven) = criteria_6_and_7();
        results.push((6, six));
        results.push((7, seven));
    }
    results.extend([(8, criterion_8()), (9, criterion_9()), (10, criterion_10()), (11, criterion_11())]);
    results.sort_by_key(|(n, _)| *n);
    let mut failed = 0;
    for (n, o) in &results {
        println!("criterion {n:>2}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
