//! Self-consistent window trajectories of the reservoir.
//!
//! The map
//!
//! ```text
//! psi(r)_t = (2 / (n M2)) P W^T relu(W r_{t-1} + b) + Q u_t
//! ```
//!
//! acts on trajectories `r_0..r_{T-1}` of length-`md` vectors, with the
//! predecessor of `r_0` fixed at zero (the same convention as the zero-padded
//! window functionals). A fixed point `r` gives reservoir states
//! `s_t = relu(W r_t + b)` solving the state equation. Plain iteration from
//! `r = 0` is used and the residual `||psi(r) - r||_inf` is reported as the
//! certificate.

use serde::{Deserialize, Serialize};

use crate::reservoir::{dot, shift_into, InputSequence, ShiftReservoir, StateVector};
use crate::{relu, Error, Result};

/// Default half-width of the box the iterates are expected to stay in.
pub const DEFAULT_BOX_RADIUS: f64 = 1.5;
/// Default allowance added to the box radius before counting violations.
pub const DEFAULT_BOX_SLACK: f64 = 0.5;

/// A candidate window trajectory `r_0..r_{T-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiState {
    r: Vec<f64>,
    md: usize,
    pub box_radius: f64,
}

impl PsiState {
    pub fn zeros(len: usize, md: usize) -> Self {
        Self {
            r: vec![0.0; len * md],
            md,
            box_radius: DEFAULT_BOX_RADIUS,
        }
    }

    pub fn from_flat(r: Vec<f64>, md: usize) -> Result<Self> {
        if md == 0 || !r.len().is_multiple_of(md) {
            return Err(Error::param("trajectory length must be a multiple of md"));
        }
        Ok(Self {
            r,
            md,
            box_radius: DEFAULT_BOX_RADIUS,
        })
    }

    pub fn len(&self) -> usize {
        self.r.len() / self.md
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn md(&self) -> usize {
        self.md
    }

    pub fn at(&self, t: usize) -> &[f64] {
        &self.r[t * self.md..(t + 1) * self.md]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.r
    }

    /// Entries with `|r| > box_radius + slack`.
    pub fn box_violations(&self, slack: f64) -> usize {
        let limit = self.box_radius + slack;
        self.r.iter().filter(|x| x.abs() > limit).count()
    }
}

fn check(res: &ShiftReservoir, u: &InputSequence) -> Result<()> {
    if u.d() != res.d() {
        return Err(Error::DimensionMismatch {
            what: "input dimension",
            expected: res.d(),
            got: u.d(),
        });
    }
    Ok(())
}

/// Buffers for repeated applications of `psi`.
struct PsiWorkspace {
    act: Vec<f64>,
    back: Vec<f64>,
}

impl PsiWorkspace {
    fn new(res: &ShiftReservoir) -> Self {
        Self {
            act: vec![0.0; res.n()],
            back: vec![0.0; res.md()],
        }
    }

    /// `out_t = c P W^T relu(W prev + b) + Q u_t`.
    fn apply_step(&mut self, res: &ShiftReservoir, prev: &[f64], u_t: &[f64], out: &mut [f64]) {
        let ens = res.ensemble();
        let b = ens.bias();
        for (i, a) in self.act.iter_mut().enumerate() {
            *a = relu(dot(ens.row(i), prev) + b[i]);
        }
        self.back.iter_mut().for_each(|x| *x = 0.0);
        for (i, &a) in self.act.iter().enumerate() {
            if a != 0.0 {
                for (o, w) in self.back.iter_mut().zip(ens.row(i)) {
                    *o += a * w;
                }
            }
        }
        let d = res.d();
        shift_into(&self.back, d, out);
        let md = out.len();
        let c = res.c_over_n();
        out[..md - d].iter_mut().for_each(|x| *x *= c);
        out[md - d..].copy_from_slice(u_t);
    }

    fn apply(&mut self, res: &ShiftReservoir, r: &PsiState, u: &InputSequence, out: &mut PsiState) {
        let md = r.md;
        let zero = vec![0.0; md];
        for t in 0..r.len() {
            let prev = if t == 0 { &zero[..] } else { r.at(t - 1) };
            self.apply_step(res, prev, u.step(t), &mut out.r[t * md..(t + 1) * md]);
        }
    }
}

/// One application of `psi` to the whole trajectory.
pub fn psi_apply(res: &ShiftReservoir, r: &PsiState, u: &InputSequence) -> Result<PsiState> {
    check(res, u)?;
    if r.md != res.md() || r.len() != u.len() {
        return Err(Error::param(format!(
            "trajectory shape {}x{} does not match input length {} and md {}",
            r.len(),
            r.md,
            u.len(),
            res.md()
        )));
    }
    let mut out = PsiState {
        r: vec![0.0; r.r.len()],
        md: r.md,
        box_radius: r.box_radius,
    };
    PsiWorkspace::new(res).apply(res, r, u, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub box_slack: f64,
}

impl SolverOptions {
    /// `tol = 1e-10`, `max_iters = 50 m`.
    pub fn for_memory(m: usize) -> Self {
        Self {
            tol: 1e-10,
            max_iters: 50 * m.max(1),
            box_slack: DEFAULT_BOX_SLACK,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointSolution {
    pub state: PsiState,
    /// `||psi(r) - r||_inf` for the returned `r`.
    pub residual: f64,
    /// Number of `psi` updates applied to the starting point `r = 0`.
    pub iters: usize,
    pub converged: bool,
    /// Box violations summed over every iterate, the start excluded.
    pub box_violations: usize,
}

/// Iterates `psi` from zero until the residual is at most `tol` or
/// `max_iters` updates have been applied.
///
/// Running out of iterations is reported through `converged`; a non-finite
/// iterate is an error.
pub fn fixed_point_solve(
    res: &ShiftReservoir,
    u: &InputSequence,
    tol: f64,
    max_iters: usize,
) -> Result<FixedPointSolution> {
    solve_with(
        res,
        u,
        &SolverOptions {
            tol,
            max_iters,
            box_slack: DEFAULT_BOX_SLACK,
        },
    )
}

pub fn solve_with(res: &ShiftReservoir, u: &InputSequence, opts: &SolverOptions) -> Result<FixedPointSolution> {
    check(res, u)?;
    if !(opts.tol > 0.0) {
        return Err(Error::param(format!("tol must be positive, got {}", opts.tol)));
    }
    let mut ws = PsiWorkspace::new(res);
    let mut r = PsiState::zeros(u.len(), res.md());
    let mut next = r.clone();
    let mut iters = 0;
    let mut box_violations = 0;
    loop {
        ws.apply(res, &r, u, &mut next);
        if next.r.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("fixed-point iterate"));
        }
        let residual =
            r.r.iter()
                .zip(&next.r)
                .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        if residual <= opts.tol || iters == opts.max_iters {
            return Ok(FixedPointSolution {
                state: r,
                residual,
                iters,
                converged: residual <= opts.tol,
                box_violations,
            });
        }
        std::mem::swap(&mut r, &mut next);
        iters += 1;
        box_violations += r.box_violations(opts.box_slack);
    }
}

/// `||r_t - (u_{t-m+1}, ..., u_t)||_inf` per step, zero before the record starts.
pub fn window_proximity(r_tilde: &PsiState, u: &InputSequence) -> Result<Vec<f64>> {
    if !r_tilde.md.is_multiple_of(u.d()) || r_tilde.len() != u.len() {
        return Err(Error::param("trajectory and input shapes differ"));
    }
    let m = r_tilde.md / u.d();
    let mut window = vec![0.0; r_tilde.md];
    Ok((0..u.len())
        .map(|t| {
            u.window_into(t, m, &mut window);
            r_tilde
                .at(t)
                .iter()
                .zip(&window)
                .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()))
        })
        .collect())
}

/// Reservoir states `s_t = relu(W r_t + b)` of a window trajectory.
pub fn states_from_solution(res: &ShiftReservoir, r: &PsiState) -> Vec<StateVector> {
    let ens = res.ensemble();
    (0..r.len())
        .map(|t| {
            let x = r.at(t);
            let s = (0..res.n()).map(|i| relu(dot(ens.row(i), x) + ens.bias()[i])).collect();
            StateVector::new(s, t as i64 + 1)
        })
        .collect()
}

/// Summary of a solve, serialized alongside experiment results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub residual: f64,
    pub iters: usize,
    pub max_window_proximity: f64,
    pub box_violations: usize,
    pub tol: f64,
    pub converged: bool,
}

/// Certificate with proximity taken over steps `t >= warmup`.
pub fn certificate(sol: &FixedPointSolution, u: &InputSequence, tol: f64, warmup: usize) -> Result<Certificate> {
    let prox = window_proximity(&sol.state, u)?;
    Ok(Certificate {
        residual: sol.residual,
        iters: sol.iters,
        max_window_proximity: prox.iter().skip(warmup).fold(0.0f64, |a, &b| a.max(b)),
        box_violations: sol.box_violations,
        tol,
        converged: sol.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::{grid_sup_reconstruction_error, reconstruct};
    use crate::ensemble::{sample_ensemble, SymmetricDistribution, WeightEnsemble};

    fn uniform_res(n: usize, m: usize, d: usize, seed: u64) -> ShiftReservoir {
        let dist = SymmetricDistribution::uniform(0.5).unwrap();
        ShiftReservoir::new(sample_ensemble(&dist, n, m, d, seed).unwrap())
    }

    /// Re-evaluates the state equation with a plain dense loop.
    fn recheck(res: &ShiftReservoir, r: &PsiState, u: &InputSequence) -> f64 {
        let ens = res.ensemble();
        let (n, md, d) = (res.n(), res.md(), res.d());
        let c = 2.0 / (n as f64 * ens.source().second_moment());
        let mut worst = 0.0f64;
        for t in 0..r.len() {
            let prev: Vec<f64> = if t == 0 { vec![0.0; md] } else { r.at(t - 1).to_vec() };
            let mut full = vec![0.0; md];
            for i in 0..n {
                let z: f64 = (0..md).map(|j| ens.weights()[i * md + j] * prev[j]).sum::<f64>() + ens.bias()[i];
                for (f, w) in full.iter_mut().zip(&ens.weights()[i * md..(i + 1) * md]) {
                    *f += c * w * z.max(0.0);
                }
            }
            for j in 0..md {
                let want = if j + d < md { full[j + d] } else { u.step(t)[j + d - md] };
                worst = worst.max((want - r.at(t)[j]).abs());
            }
        }
        worst
    }

    #[test]
    fn last_block_is_input() {
        let res = uniform_res(50, 3, 2, 1);
        let u = InputSequence::uniform(2, 12, 2);
        let r = PsiState::from_flat(InputSequence::uniform(6, 12, 3).as_slice().to_vec(), 6).unwrap();
        let out = psi_apply(&res, &r, &u).unwrap();
        for t in 0..12 {
            assert_eq!(&out.at(t)[4..], u.step(t));
        }
    }

    #[test]
    fn zero_everything_is_fixed() {
        let dist = SymmetricDistribution::uniform(0.5).unwrap();
        let ens = sample_ensemble(&dist, 30, 2, 1, 0).unwrap();
        let ens = WeightEnsemble::from_parts(dist, 2, 1, ens.weights().to_vec(), vec![0.0; 30], 0).unwrap();
        let res = ShiftReservoir::new(ens);
        let u = InputSequence::constant(1, 10, 0.0).unwrap();
        let r = PsiState::zeros(10, 2);
        assert_eq!(psi_apply(&res, &r, &u).unwrap(), r);
        let sol = fixed_point_solve(&res, &u, 1e-10, 100).unwrap();
        assert_eq!(sol.residual, 0.0);
        assert_eq!(sol.iters, 0);
        assert!(sol.converged);
    }

    #[test]
    fn memoryless_converges_in_one_update() {
        let res = uniform_res(100, 1, 2, 3);
        let u = InputSequence::uniform(2, 20, 4);
        let sol = fixed_point_solve(&res, &u, 1e-10, 50).unwrap();
        assert_eq!(sol.iters, 1);
        assert_eq!(sol.residual, 0.0);
        assert_eq!(sol.state.as_slice(), u.as_slice());
        assert!(window_proximity(&sol.state, &u).unwrap().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn shift_entries_follow_reconstruction() {
        let res = uniform_res(2000, 2, 1, 5);
        let u = InputSequence::uniform(1, 15, 6);
        let r = PsiState::from_flat(
            InputSequence::uniform(2, 15, 7)
                .as_slice()
                .iter()
                .map(|x| 2.0 * x)
                .collect(),
            2,
        )
        .unwrap();
        let out = psi_apply(&res, &r, &u).unwrap();
        for t in 1..15 {
            let rec = reconstruct(res.ensemble(), r.at(t - 1)).unwrap();
            let err = (rec[1] - r.at(t - 1)[1]).abs();
            assert!((out.at(t)[0] - r.at(t - 1)[1]).abs() <= err + 1e-12);
        }
    }

    #[test]
    fn solves_and_certifies() {
        let (n, m) = (4000, 2);
        let res = uniform_res(n, m, 1, 11);
        let e2 = grid_sup_reconstruction_error(res.ensemble(), 2.0, Some(101))
            .unwrap()
            .certified();
        for k in 0..3 {
            let u = InputSequence::uniform(1, 50, 100 + k);
            let sol = solve_with(&res, &u, &SolverOptions::for_memory(m)).unwrap();
            assert!(sol.converged && sol.residual <= 1e-10);
            assert!(sol.iters <= 10 * m, "iters {}", sol.iters);
            assert!(recheck(&res, &sol.state, &u) <= 1e-10);
            assert_eq!(sol.box_violations, 0);
            let prox = window_proximity(&sol.state, &u).unwrap();
            assert!(prox.iter().all(|&p| p <= 2.0 * e2 * m as f64));

            // The solution's states solve the reservoir recursion started from relu(b).
            let states = states_from_solution(&res, &sol.state);
            let s0 = StateVector::new(res.ensemble().bias().iter().map(|&b| relu(b)).collect(), 0);
            let forward = res.run_trajectory(&u, &s0).unwrap();
            let w_inf = res.ensemble().max_row_sum();
            for (a, b) in states.iter().zip(&forward) {
                let gap = a.s.iter().zip(&b.s).fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()));
                assert!(gap <= 1e-10 * w_inf.max(1.0) * 10.0, "gap {gap}");
            }
            let cert = certificate(&sol, &u, 1e-10, 3 * m).unwrap();
            assert!(cert.max_window_proximity <= prox.iter().fold(0.0f64, |a, &b| a.max(b)));
        }
    }

    #[test]
    fn non_convergence_is_flagged() {
        let res = uniform_res(500, 3, 1, 8);
        let u = InputSequence::uniform(1, 30, 9);
        let sol = fixed_point_solve(&res, &u, 1e-10, 1).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iters, 1);
        assert!(sol.residual > 1e-10);
    }

    #[test]
    fn degenerate_ensemble_exposed_by_proximity() {
        let dist = SymmetricDistribution::uniform(0.5).unwrap();
        let ens = WeightEnsemble::from_parts(dist, 3, 1, vec![0.0; 12], vec![0.1; 4], 0).unwrap();
        let res = ShiftReservoir::new(ens);
        let u = InputSequence::constant(1, 10, 1.0).unwrap();
        let sol = fixed_point_solve(&res, &u, 1e-10, 150).unwrap();
        assert!(sol.converged);
        let prox = window_proximity(&sol.state, &u).unwrap();
        assert_eq!(prox[9], 1.0);
    }

    #[test]
    fn shape_errors() {
        let res = uniform_res(10, 2, 1, 0);
        let u = InputSequence::uniform(2, 5, 0);
        assert!(fixed_point_solve(&res, &u, 1e-10, 10).is_err());
        let u = InputSequence::uniform(1, 5, 0);
        assert!(psi_apply(&res, &PsiState::zeros(4, 2), &u).is_err());
        assert!(fixed_point_solve(&res, &u, 0.0, 10).is_err());
    }
}
