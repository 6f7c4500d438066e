//! Central finite-difference checks for reverse-mode gradients.

pub mod cases;

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::model::ParamStore;
use crate::rng::DetRng;

/// Largest accepted relative error.
pub const REL_TOL: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Denominator floor so gradients that are numerically zero compare in absolute terms.
pub const FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_difference_with(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    i: usize,
    h: f64,
) -> f64 {
    let mut xp = x.to_vec();
    xp[i] = x[i] + h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

pub fn central_difference(f: impl FnMut(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    central_difference_with(f, x, i, STEP)
}

/// Numeric derivative compared against `analytic`. When the default step
/// disagrees, a step ten times smaller is tried as well: a ReLU or bilinear
/// kink inside `±STEP` spoils the wide difference but rarely the narrow one.
pub fn numeric_derivative(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    i: usize,
    analytic: f64,
) -> f64 {
    let wide = central_difference_with(&mut f, x, i, STEP);
    if rel_error(analytic, wide) < REL_TOL {
        return wide;
    }
    let narrow = central_difference_with(&mut f, x, i, STEP / 10.0);
    if rel_error(analytic, narrow) < rel_error(analytic, wide) {
        narrow
    } else {
        wide
    }
}

/// Result of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input, index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < REL_TOL
    }

    fn record(&mut self, input: usize, index: usize, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = Some((input, index, analytic, numeric));
        }
    }
}

/// Coordinates to probe: all of them up to `max`, otherwise a random sample.
pub fn sample_indices(len: usize, max: usize, rng: &mut DetRng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|_| rng.random_range(0..len)).collect()
    }
}

pub fn random_tensor(shape: Vec<usize>, scale: f64, rng: &mut DetRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
}

/// Check `build` against finite differences of `Σ w ⊙ output` with random `w`,
/// probing up to `max_per_input` coordinates of every input.
pub fn check_graph(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Var,
    max_per_input: usize,
    rng: &mut DetRng,
) -> CheckReport {
    let run = |values: &[Tensor]| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars);
        (g, vars, out)
    };
    let (g, vars, out) = run(inputs);
    let weights: Vec<f64> = (0..g.value(out).len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let grads = g.backward(&[(out, &weights)]);

    let mut report = CheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        for i in sample_indices(input.len(), max_per_input, rng) {
            let numeric = numeric_derivative(
                |x| {
                    let mut vals = inputs.to_vec();
                    vals[k].data = x.to_vec();
                    let (g, _, out) = run(&vals);
                    g.value(out)
                        .data
                        .iter()
                        .zip(&weights)
                        .map(|(a, b)| a * b)
                        .sum()
                },
                &input.data,
                i,
                analytic[i],
            );
            report.record(k, i, analytic[i], numeric);
        }
    }
    report
}

/// Like [`check_graph`], but probes parameters of `store` (all of them, up to
/// `max_per_param` coordinates each) as well as the graph inputs.
pub fn check_params(
    store: &ParamStore,
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &ParamStore, &[Var]) -> Var,
    max_per_param: usize,
    rng: &mut DetRng,
) -> CheckReport {
    let run = |s: &ParamStore, values: &[Tensor]| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, s, &vars);
        (g, vars, out)
    };
    let (g, vars, out) = run(store, inputs);
    let weights: Vec<f64> = (0..g.value(out).len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let grads = g.backward(&[(out, &weights)]);
    let param_grads = grads.param_grads(store);
    let objective = |g: &Graph, out: Var| -> f64 {
        g.value(out)
            .data
            .iter()
            .zip(&weights)
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut report = CheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (k, (id, p)) in store.iter().enumerate() {
        for i in sample_indices(p.value.len(), max_per_param, rng) {
            let numeric = numeric_derivative(
                |x| {
                    let mut s = store.clone();
                    s.get_mut(id).value = x.to_vec();
                    let (g, _, out) = run(&s, inputs);
                    objective(&g, out)
                },
                &p.value,
                i,
                param_grads[k][i],
            );
            report.record(k, i, param_grads[k][i], numeric);
        }
    }
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        for i in sample_indices(input.len(), max_per_param, rng) {
            let numeric = numeric_derivative(
                |x| {
                    let mut vals = inputs.to_vec();
                    vals[k].data = x.to_vec();
                    let (g, _, out) = run(store, &vals);
                    objective(&g, out)
                },
                &input.data,
                i,
                analytic[i],
            );
            report.record(store.len() + k, i, analytic[i], numeric);
        }
    }
    report
}

/// Replace every parameter with uniform noise in `±scale`, so zero-initialized
/// projections do not hide gradient paths.
pub fn randomize(store: &mut ParamStore, scale: f64, rng: &mut DetRng) {
    for p in store.iter_mut() {
        for v in &mut p.value {
            *v = rng.random_range(-scale..scale);
        }
    }
}

/// Check a scalar function of a flat vector against its claimed gradient.
pub fn check_function(
    x: &[f64],
    f: impl Fn(&[f64]) -> f64,
    analytic: &[f64],
    indices: &[usize],
) -> CheckReport {
    let mut report = CheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for &i in indices {
        let numeric = numeric_derivative(&f, x, i, analytic[i]);
        report.record(0, i, analytic[i], numeric);
    }
    report
}

/// Aggregate of one case over many random configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub configs: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: usize,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

/// Run one case on `configs` random configurations derived from `seed`.
pub fn run_case(name: &'static str, case: cases::Case, configs: usize, seed: u64) -> SuiteResult {
    let mut result = SuiteResult {
        name,
        configs,
        checked: 0,
        max_rel_error: 0.0,
        failures: 0,
    };
    for c in 0..configs {
        let mut rng = crate::rng::derived(seed, &format!("gradcheck/{name}/{c}"));
        let r = case(&mut rng);
        result.checked += r.checked;
        result.max_rel_error = result.max_rel_error.max(r.max_rel_error);
        if !r.passed() {
            log::warn!("gradient check {name} config {c} failed: {r:?}");
            result.failures += 1;
        }
    }
    result
}

/// Every case in [`cases::all_cases`].
pub fn run_suite(configs: usize, seed: u64) -> Vec<SuiteResult> {
    cases::all_cases()
        .into_iter()
        .map(|(name, case)| run_case(name, case, configs, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn matmul_gradient_passes() {
        let mut rng = seeded(1);
        let a = random_tensor(vec![3, 4], 1.0, &mut rng);
        let b = random_tensor(vec![4, 2], 1.0, &mut rng);
        let r = check_graph(&[a, b], |g, v| g.matmul(v[0], v[1]), 100, &mut rng);
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 20);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = [1.0, 2.0];
        let r = check_function(&x, |x| x[0] * x[0] + x[1], &[2.0, 1.5], &[0, 1]);
        assert!(!r.passed());
    }
}
