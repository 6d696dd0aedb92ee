//! Ridge readouts on reservoir states and their sup-norm operator error.

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{sample_ensemble, SymmetricDistribution};
use crate::operators::{memory_horizon, OperatorSpec};
use crate::reservoir::{dot, InputSequence, ShiftReservoir, StateVector};
use crate::rng;
use crate::{Error, Result};

/// Trained weights `a` of `y_t = a . s_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub a: Vec<f64>,
    pub ridge_lambda: f64,
    pub fit_rms: f64,
    /// `(max L_ii / min L_ii)^2` of the Cholesky factor of the regularized Gram matrix.
    pub condition_estimate: f64,
}

impl Readout {
    pub fn zeros(n: usize) -> Self {
        Self {
            a: vec![0.0; n],
            ridge_lambda: 0.0,
            fit_rms: f64::NAN,
            condition_estimate: f64::NAN,
        }
    }

    pub fn predict(&self, s: &[f64]) -> f64 {
        dot(&self.a, s)
    }
}

/// Ridge regression on a design matrix whose rows are states.
///
/// Solves the `n x n` normal equations when there are at least as many rows as
/// features, and the `T x T` dual system `(X X^T + lambda I) alpha = y`,
/// `a = X^T alpha`, otherwise.
pub fn fit_design(x: &Mat<f64>, y: &[f64], ridge_lambda: f64) -> Result<Readout> {
    let (rows, n) = (x.nrows(), x.ncols());
    if rows == 0 || y.len() != rows {
        return Err(Error::DimensionMismatch {
            what: "targets",
            expected: rows.max(1),
            got: y.len(),
        });
    }
    if !(ridge_lambda >= 0.0 && ridge_lambda.is_finite()) {
        return Err(Error::param(format!(
            "ridge must be finite and nonnegative, got {ridge_lambda}"
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("targets"));
    }
    let yv = Mat::from_fn(rows, 1, |i, _| y[i]);
    let primal = rows >= n;
    let mut gram = if primal { x.transpose() * x } else { x * x.transpose() };
    for i in 0..gram.nrows() {
        gram[(i, i)] += ridge_lambda;
    }
    let llt = gram
        .llt(Side::Lower)
        .map_err(|_| Error::SingularNormalMatrix { ridge: ridge_lambda })?;
    let l = llt.L();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..l.nrows() {
        let v = l[(i, i)];
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(lo > 0.0) {
        return Err(Error::SingularNormalMatrix { ridge: ridge_lambda });
    }
    let a_mat = if primal {
        llt.solve(x.transpose() * &yv)
    } else {
        x.transpose() * llt.solve(&yv)
    };
    let a: Vec<f64> = (0..n).map(|j| a_mat[(j, 0)]).collect();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularNormalMatrix { ridge: ridge_lambda });
    }
    let pred = x * &a_mat;
    let sse: f64 = (0..rows).map(|i| (pred[(i, 0)] - y[i]).powi(2)).sum();
    Ok(Readout {
        a,
        ridge_lambda,
        fit_rms: (sse / rows as f64).sqrt(),
        condition_estimate: (hi / lo).powi(2),
    })
}

/// `argmin_a sum (a . s_t - y_t)^2 + ridge_lambda ||a||^2`.
pub fn fit_readout(states: &[StateVector], targets: &[f64], ridge_lambda: f64) -> Result<Readout> {
    if states.is_empty() || states.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            what: "state/target count",
            expected: states.len().max(1),
            got: targets.len(),
        });
    }
    let n = states[0].s.len();
    if let Some(bad) = states.iter().find(|s| s.s.len() != n) {
        return Err(Error::DimensionMismatch {
            what: "state length",
            expected: n,
            got: bad.s.len(),
        });
    }
    let x = Mat::from_fn(states.len(), n, |i, j| states[i].s[j]);
    fit_design(&x, targets, ridge_lambda)
}

/// `trace(X^T X) / n`, the mean squared column norm.
pub fn trace_scale(x: &Mat<f64>) -> f64 {
    let mut total = 0.0;
    for j in 0..x.ncols() {
        for i in 0..x.nrows() {
            total += x[(i, j)] * x[(i, j)];
        }
    }
    total / x.ncols().max(1) as f64
}

/// Sup-norm error of a readout over a family of test inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sup_error: f64,
    pub mean_abs_error: f64,
    pub per_sequence_max: Vec<f64>,
    pub n_test_sequences: usize,
    pub warmup_discarded: usize,
    /// Window length of the reference functional.
    pub target_memory: usize,
    /// `E_F(target_memory)`: how far the reference may sit from the full operator.
    pub truncation_budget: f64,
    pub steps_evaluated: usize,
}

/// Runs each test input from `s0 = 0`, drops `warmup` steps and compares
/// `a . s_t` against `F*_{target_memory}` of the current window.
pub fn evaluate_operator_error(
    res: &ShiftReservoir,
    readout: &Readout,
    spec: &OperatorSpec,
    test_inputs: &[InputSequence],
    warmup: usize,
    target_memory: usize,
) -> Result<EvalReport> {
    if readout.a.len() != res.n() {
        return Err(Error::DimensionMismatch {
            what: "readout length",
            expected: res.n(),
            got: readout.a.len(),
        });
    }
    if spec.d() != res.d() {
        return Err(Error::DimensionMismatch {
            what: "operator input dimension",
            expected: res.d(),
            got: spec.d(),
        });
    }
    if target_memory == 0 {
        return Err(Error::param("target memory must be positive"));
    }
    let per: Vec<(f64, f64, usize)> = test_inputs
        .par_iter()
        .map(|u| -> Result<(f64, f64, usize)> {
            let mut worst = 0.0f64;
            let mut sum = 0.0;
            let mut count = 0;
            let mut window = vec![0.0; target_memory * u.d()];
            res.stream_trajectory(u, &StateVector::zeros(res.n()), |k, s| {
                if k >= warmup {
                    u.window_into(k, target_memory, &mut window);
                    let err = (readout.predict(s) - spec.eval_window(&window)).abs();
                    worst = worst.max(err);
                    sum += err;
                    count += 1;
                }
            })?;
            Ok((worst, sum, count))
        })
        .collect::<Result<_>>()?;
    let steps: usize = per.iter().map(|p| p.2).sum();
    let total: f64 = per.iter().map(|p| p.1).sum();
    Ok(EvalReport {
        sup_error: per.iter().fold(0.0f64, |a, p| a.max(p.0)),
        mean_abs_error: if steps == 0 { 0.0 } else { total / steps as f64 },
        per_sequence_max: per.iter().map(|p| p.0).collect(),
        n_test_sequences: test_inputs.len(),
        warmup_discarded: warmup,
        target_memory,
        truncation_budget: spec.tail(target_memory),
        steps_evaluated: steps,
    })
}

/// Held-out inputs: `random` i.i.d. uniform sequences, then the constants
/// `+1` and `-1` and the two alternating-sign sequences.
pub fn test_family(d: usize, len: usize, random: usize, seed: u64) -> Vec<InputSequence> {
    let mut out: Vec<InputSequence> = (0..random)
        .map(|k| InputSequence::uniform(d, len, rng::derive_seed(seed, k as u64)))
        .collect();
    out.push(InputSequence::constant(d, len, 1.0).expect("unit constant"));
    out.push(InputSequence::constant(d, len, -1.0).expect("unit constant"));
    out.push(InputSequence::alternating(d, len, 1.0));
    out.push(InputSequence::alternating(d, len, -1.0));
    out
}

/// How the ridge penalty is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Ridge {
    Absolute(f64),
    /// `scale * trace(X^T X) / n`.
    TraceScaled(f64),
}

/// Everything needed to sample, train and test one ESN.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub distribution: SymmetricDistribution,
    pub n: usize,
    pub m: usize,
    pub operator: OperatorSpec,
    pub ensemble_seed: u64,
    pub data_seed: u64,
    pub train_steps: usize,
    pub warmup: usize,
    pub ridge: Ridge,
    pub test_sequences: usize,
    pub test_len: usize,
    /// Reference window; `None` picks the least `m` with tail at most `1e-6`.
    pub target_memory: Option<usize>,
}

impl PipelineConfig {
    /// Defaults: uniform(1/2) weights, 5000 training steps, warmup `3m`,
    /// trace-scaled ridge `1e-8`, 20 random test sequences of 300 steps.
    pub fn new(operator: OperatorSpec, n: usize, m: usize) -> Self {
        Self {
            distribution: SymmetricDistribution::uniform(0.5).expect("valid default"),
            n,
            m,
            operator,
            ensemble_seed: 0,
            data_seed: 1,
            train_steps: 5000,
            warmup: 3 * m,
            ridge: Ridge::TraceScaled(1e-8),
            test_sequences: 20,
            test_len: 300,
            target_memory: None,
        }
    }

    pub fn resolved_target_memory(&self) -> Result<usize> {
        match self.target_memory {
            Some(m) => Ok(m),
            None => memory_horizon(&self.operator, 1e-6, 10_000),
        }
    }
}

/// Output of [`train_test_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub reservoir: ShiftReservoir,
    pub readout: Readout,
    pub report: EvalReport,
}

/// Samples the reservoir, fits on one training record and evaluates on the test family.
pub fn train_test_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun> {
    let d = cfg.operator.d();
    let ens = sample_ensemble(&cfg.distribution, cfg.n, cfg.m, d, cfg.ensemble_seed)?;
    let res = ShiftReservoir::new(ens);
    let target_memory = cfg.resolved_target_memory()?;
    let train = InputSequence::uniform(d, cfg.warmup + cfg.train_steps, rng::derive_seed(cfg.data_seed, 0));
    let mut x = Mat::<f64>::zeros(cfg.train_steps, cfg.n);
    let mut y = vec![0.0; cfg.train_steps];
    let mut window = vec![0.0; target_memory * d];
    res.stream_trajectory(&train, &StateVector::zeros(cfg.n), |k, s| {
        if k >= cfg.warmup {
            let row = k - cfg.warmup;
            for (j, v) in s.iter().enumerate() {
                x[(row, j)] = *v;
            }
            train.window_into(k, target_memory, &mut window);
            y[row] = cfg.operator.eval_window(&window);
        }
    })?;
    let lambda = match cfg.ridge {
        Ridge::Absolute(l) => l,
        Ridge::TraceScaled(s) => s * trace_scale(&x),
    };
    let readout = fit_design(&x, &y, lambda)?;
    drop(x);
    let tests = test_family(d, cfg.test_len, cfg.test_sequences, rng::derive_seed(cfg.data_seed, 1));
    let report = evaluate_operator_error(&res, &readout, &cfg.operator, &tests, cfg.warmup, target_memory)?;
    Ok(PipelineRun {
        reservoir: res,
        readout,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{make_exp_filter, make_identity, Nonlinearity};
    use crate::rng;
    use proptest::prelude::*;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        let mut r = rng::stream(seed);
        Mat::from_fn(rows, cols, |_, _| rng::symmetric_unit(&mut r))
    }

    #[test]
    fn exact_interpolant() {
        let states: Vec<StateVector> = [0.5, 1.0, 2.0].iter().map(|&c| StateVector::new(vec![c], 0)).collect();
        let y: Vec<f64> = states.iter().map(|s| 2.0 * s.s[0]).collect();
        let r = fit_readout(&states, &y, 0.0).unwrap();
        assert!((r.a[0] - 2.0).abs() < 1e-14);
        assert!(r.fit_rms < 1e-14);
    }

    #[test]
    fn singular_without_ridge() {
        let states = vec![StateVector::new(vec![1.0, 0.0], 0); 4];
        let y = vec![2.0; 4];
        assert!(matches!(
            fit_readout(&states, &y, 0.0),
            Err(Error::SingularNormalMatrix { .. })
        ));
        let r = fit_readout(&states, &y, 1e-6).unwrap();
        assert!((r.a[0] - 2.0).abs() < 1e-5 && r.a[1] == 0.0);
    }

    #[test]
    fn large_ridge_shrinks_to_zero() {
        let x = random_matrix(40, 5, 1);
        let y: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let r = fit_design(&x, &y, 1e12).unwrap();
        assert!(r.a.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn plant_and_recover() {
        let x = random_matrix(200, 50, 2);
        let mut r = rng::stream(3);
        let planted: Vec<f64> = (0..50).map(|_| rng::symmetric_unit(&mut r)).collect();
        let y: Vec<f64> = (0..200)
            .map(|i| (0..50).map(|j| x[(i, j)] * planted[j]).sum())
            .collect();
        let fit = fit_design(&x, &y, 1e-8).unwrap();
        let err: f64 = fit
            .a
            .iter()
            .zip(&planted)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = planted.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / norm <= 1e-6, "relative error {}", err / norm);
    }

    #[test]
    fn dual_matches_explicit_normal_equations() {
        // 29 rows and 30 features forces the dual system.
        let x = random_matrix(29, 30, 4);
        let y: Vec<f64> = (0..29).map(|i| (i as f64 * 0.3).cos()).collect();
        let dual = fit_design(&x, &y, 1e-3).unwrap();
        let mut g = x.transpose() * &x;
        for i in 0..30 {
            g[(i, i)] += 1e-3;
        }
        let rhs = x.transpose() * Mat::from_fn(29, 1, |i, _| y[i]);
        let direct = g.llt(Side::Lower).unwrap().solve(rhs);
        for j in 0..30 {
            assert!((dual.a[j] - direct[(j, 0)]).abs() < 1e-8);
        }
    }

    #[test]
    fn orthogonal_residual_at_zero_ridge() {
        let x = random_matrix(120, 15, 5);
        let y: Vec<f64> = (0..120).map(|i| ((i * i) as f64).sin()).collect();
        let fit = fit_design(&x, &y, 0.0).unwrap();
        let scale: f64 = y.iter().map(|v| v.abs()).sum::<f64>();
        for j in 0..15 {
            let g: f64 = (0..120)
                .map(|i| x[(i, j)] * ((0..15).map(|k| x[(i, k)] * fit.a[k]).sum::<f64>() - y[i]))
                .sum();
            assert!(g.abs() <= 1e-8 * scale);
        }
    }

    #[test]
    fn zero_readout_error_is_max_target() {
        let spec = make_exp_filter(0.5, Nonlinearity::Linear).unwrap();
        let ens = sample_ensemble(&SymmetricDistribution::uniform(0.5).unwrap(), 20, 2, 1, 0).unwrap();
        let res = ShiftReservoir::new(ens);
        let tests = test_family(1, 40, 3, 0);
        let rep = evaluate_operator_error(&res, &Readout::zeros(20), &spec, &tests, 6, 30).unwrap();
        let mut max_target = 0.0f64;
        for u in &tests {
            for k in 6..u.len() {
                max_target = max_target.max(spec.target_at(u, k, 30).abs());
            }
        }
        assert_eq!(rep.sup_error, max_target);
        assert!(rep.sup_error <= spec.bound());
        assert!(rep.sup_error >= rep.mean_abs_error);
        assert_eq!(rep.n_test_sequences, 7);
    }

    #[test]
    fn identity_operator_is_learned() {
        let mut cfg = PipelineConfig::new(make_identity(), 2000, 1);
        cfg.test_sequences = 10;
        cfg.test_len = 100;
        let run = train_test_pipeline(&cfg).unwrap();
        assert!(run.report.sup_error <= 0.1, "sup error {}", run.report.sup_error);
        let again = train_test_pipeline(&cfg).unwrap();
        assert_eq!(run.report, again.report);
        assert_eq!(run.readout, again.readout);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ridge_norm_monotone(seed in any::<u64>(), l1 in 1e-6f64..1.0, factor in 1.01f64..100.0) {
            let x = random_matrix(25, 10, seed);
            let y: Vec<f64> = (0..25).map(|i| (i as f64 + seed as f64 % 7.0).sin()).collect();
            let a1 = fit_design(&x, &y, l1).unwrap();
            let a2 = fit_design(&x, &y, l1 * factor).unwrap();
            let norm = |a: &[f64]| a.iter().map(|v| v * v).sum::<f64>();
            prop_assert!(norm(&a1.a) >= norm(&a2.a) * (1.0 - 1e-10));
        }
    }
}
