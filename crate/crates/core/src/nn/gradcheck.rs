//! Central finite-difference checks of tape gradients.
//!
//! The checked objective is a fixed random linear functional `Σ wᵢ·yᵢ` of
//! the graph output `y`. Evaluating the numeric side as
//! `Σ wᵢ·(y⁺ᵢ − y⁻ᵢ)` in f64 means outputs the probe does not touch cancel
//! exactly, so the only noise left is rounding in the touched outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NnError, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_err(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

/// `|a − n| / max(|a|, |n|)`, zero when both vanish.
pub fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub probes: Vec<Probe>,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> usize {
        self.probes.iter().filter(|p| p.rel_err() < tol).count()
    }

    pub fn pass_fraction(&self, tol: f64) -> f64 {
        self.passed(tol) as f64 / self.probes.len().max(1) as f64
    }

    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(Probe::rel_err).fold(0.0, f64::max)
    }
}

/// `count` distinct `(param, index)` pairs drawn uniformly over all entries.
pub fn sample_probes(params: &[Tensor], count: usize, seed: u64) -> Vec<(usize, usize)> {
    let total: usize = params.iter().map(Tensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    while out.len() < count.min(total) {
        let mut flat = rng.random_range(0..total);
        if !picked.insert(flat) {
            continue;
        }
        let mut p = 0;
        while flat >= params[p].len() {
            flat -= params[p].len();
            p += 1;
        }
        out.push((p, flat));
    }
    out
}

/// Compares tape gradients of `Σ wᵢ·build(params)ᵢ` against central
/// differences with step `h` at each probe.
pub fn check<F>(params: &[Tensor], build: F, probes: &[(usize, usize)], h: f32, seed: u64) -> Result<GradCheck, NnError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NnError>,
{
    let eval = |ps: &[Tensor]| -> Result<Vec<f64>, NnError> {
        let mut t = Tape::no_grad();
        let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
        let y = build(&mut t, &vs)?;
        Ok(t.value(y).data().iter().map(|&v| v as f64).collect())
    };
    check_with_oracle(params, &build, eval, probes, h, seed)
}

/// As [`check`], but the numeric side evaluates `oracle`, which must compute
/// the same function as `build` (typically without rounding its output).
pub fn check_with_oracle<F, O>(
    params: &[Tensor],
    build: F,
    oracle: O,
    probes: &[(usize, usize)],
    h: f32,
    seed: u64,
) -> Result<GradCheck, NnError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NnError>,
    O: Fn(&[Tensor]) -> Result<Vec<f64>, NnError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let y = build(&mut tape, &vars)?;
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let weights = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(y, w)?;
    let loss = tape.sum(prod);
    tape.backward(loss)?;

    let mut out = GradCheck::default();
    let mut work = params.to_vec();
    for &(p, i) in probes {
        let analytic = tape.grad(vars[p]).map_or(0.0, |g| g[i] as f64);
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + h;
        let plus = oracle(&work)?;
        work[p].data_mut()[i] = orig - h;
        let minus = oracle(&work)?;
        work[p].data_mut()[i] = orig;
        if plus.len() != weights.len() || minus.len() != weights.len() {
            return Err(NnError::ShapeMismatch(format!(
                "oracle returned {} values for an output of {}",
                plus.len(),
                weights.len()
            )));
        }
        let diff: f64 = plus
            .iter()
            .zip(&minus)
            .zip(weights.data())
            .map(|((a, b), w)| (a - b) * *w as f64)
            .sum();
        // The perturbation actually applied is the f32-rounded one.
        let step = ((orig + h) as f64) - ((orig - h) as f64);
        out.probes.push(Probe {
            param: p,
            index: i,
            analytic,
            numeric: diff / step,
        });
    }
    Ok(out)
}
