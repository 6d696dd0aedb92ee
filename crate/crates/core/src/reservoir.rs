//! The block-shift ReLU reservoir.
//!
//! `P` and `Q` are never materialized. Block `i` (1-based) of a length `m*d`
//! vector occupies indices `(i-1)*d .. i*d`; `P` moves block `i+1` into block
//! `i` and clears block `m`, and `Q` writes the input into block `m`.

use crate::ensemble::{reconstruction_scale, WeightEnsemble};
use crate::rng;
use crate::{relu, sup_norm, Error, Result};

/// Block shift `P r`: block `i` of the output is block `i+1` of `r`, block `m` is zero.
pub fn shift_apply(r: &[f64], m: usize, d: usize) -> Result<Vec<f64>> {
    check_len("shift input", m * d, r.len())?;
    let mut out = vec![0.0; r.len()];
    shift_into(r, d, &mut out);
    Ok(out)
}

#[inline]
pub(crate) fn shift_into(r: &[f64], d: usize, out: &mut [f64]) {
    let keep = r.len() - d;
    out[..keep].copy_from_slice(&r[d..]);
    out[keep..].iter_mut().for_each(|x| *x = 0.0);
}

/// Last-block embedding `Q u`.
pub fn embed_apply(u: &[f64], m: usize) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::param("m must be positive"));
    }
    let d = u.len();
    let mut out = vec![0.0; m * d];
    out[(m - 1) * d..].copy_from_slice(u);
    Ok(out)
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, got })
    }
}

fn check_finite(what: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => relu(x),
        }
    }

    /// Global Lipschitz constant.
    pub fn lipschitz(self) -> f64 {
        1.0
    }
}

/// Reservoir state `s_t` at time index `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub s: Vec<f64>,
    pub t: i64,
}

impl StateVector {
    pub fn zeros(n: usize) -> Self {
        Self { s: vec![0.0; n], t: 0 }
    }

    pub fn new(s: Vec<f64>, t: i64) -> Self {
        Self { s, t }
    }

    /// Entries i.i.d. uniform on `[0, 1)`.
    pub fn random_unit(n: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed);
        Self {
            s: (0..n).map(|_| rng::unit_open(&mut rng)).collect(),
            t: 0,
        }
    }
}

/// A finite input record `u_origin, u_{origin+1}, ...` with `||u_t||_inf <= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSequence {
    d: usize,
    data: Vec<f64>,
    origin: i64,
}

impl InputSequence {
    /// `data` holds `len * d` values, one step after another.
    pub fn new(d: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::param("input dimension must be positive"));
        }
        if !data.len().is_multiple_of(d) {
            return Err(Error::DimensionMismatch {
                what: "input data length (multiple of d)",
                expected: data.len() / d * d,
                got: data.len(),
            });
        }
        check_finite("input sequence", &data)?;
        if let Some(x) = data.iter().find(|x| x.abs() > 1.0) {
            return Err(Error::param(format!("input entry {x} outside [-1, 1]")));
        }
        Ok(Self { d, data, origin: 0 })
    }

    pub fn with_origin(mut self, origin: i64) -> Self {
        self.origin = origin;
        self
    }

    /// Entries i.i.d. uniform on `(-1, 1)`.
    pub fn uniform(d: usize, len: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed);
        let data = (0..len * d).map(|_| rng::symmetric_unit(&mut rng)).collect();
        Self { d, data, origin: 0 }
    }

    pub fn constant(d: usize, len: usize, value: f64) -> Result<Self> {
        Self::new(d, vec![value; len * d])
    }

    /// `+1, -1, +1, ...` (or starting at `-1` when `start` is negative).
    pub fn alternating(d: usize, len: usize, start: f64) -> Self {
        let first = if start < 0.0 { -1.0 } else { 1.0 };
        let data = (0..len)
            .flat_map(|t| std::iter::repeat_n(if t % 2 == 0 { first } else { -first }, d))
            .collect();
        Self { d, data, origin: 0 }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn origin(&self) -> i64 {
        self.origin
    }

    /// Input at local step `k` (time `origin + k`).
    pub fn step(&self, k: usize) -> &[f64] {
        &self.data[k * self.d..(k + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `(u_{k-m+1}, ..., u_k)` stacked oldest first, zero before the record starts.
    pub fn window(&self, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * self.d];
        self.window_into(k, m, &mut out);
        out
    }

    pub fn window_into(&self, k: usize, m: usize, out: &mut [f64]) {
        let d = self.d;
        for j in 0..m {
            let lag = m - 1 - j;
            let block = &mut out[j * d..(j + 1) * d];
            if lag <= k {
                block.copy_from_slice(self.step(k - lag));
            } else {
                block.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
}

/// The reservoir of the structured ReLU echo state network.
#[derive(Debug, Clone)]
pub struct ShiftReservoir {
    ensemble: WeightEnsemble,
    activation: Activation,
    c_over_n: f64,
}

impl ShiftReservoir {
    pub fn new(ensemble: WeightEnsemble) -> Self {
        let c_over_n = reconstruction_scale(ensemble.source()) / ensemble.n() as f64;
        Self {
            ensemble,
            activation: Activation::Relu,
            c_over_n,
        }
    }

    pub fn ensemble(&self) -> &WeightEnsemble {
        &self.ensemble
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// `(2 / M2) / n`.
    pub fn c_over_n(&self) -> f64 {
        self.c_over_n
    }

    pub fn n(&self) -> usize {
        self.ensemble.n()
    }

    pub fn m(&self) -> usize {
        self.ensemble.m()
    }

    pub fn d(&self) -> usize {
        self.ensemble.d()
    }

    pub fn md(&self) -> usize {
        self.ensemble.md()
    }

    /// Reusable buffers for allocation-free stepping.
    pub fn stepper(&self) -> Stepper<'_> {
        Stepper {
            res: self,
            feedback: vec![0.0; self.md()],
            window: vec![0.0; self.md()],
        }
    }

    /// One update `s_t = relu(W (c/n P W^T s_{t-1} + Q u_t) + b)`.
    pub fn state_update(&self, s_prev: &StateVector, u_t: &[f64]) -> Result<StateVector> {
        self.check_step_inputs(&s_prev.s, u_t)?;
        let mut out = vec![0.0; self.n()];
        self.stepper().step(&s_prev.s, u_t, &mut out);
        Ok(StateVector {
            s: out,
            t: s_prev.t + 1,
        })
    }

    fn check_step_inputs(&self, s: &[f64], u: &[f64]) -> Result<()> {
        check_len("state", self.n(), s.len())?;
        check_len("input step", self.d(), u.len())?;
        check_finite("previous state", s)?;
        check_finite("input step", u)
    }

    fn check_sequence(&self, u: &InputSequence, s0: &StateVector) -> Result<()> {
        check_len("input dimension", self.d(), u.d())?;
        check_len("initial state", self.n(), s0.s.len())?;
        check_finite("initial state", &s0.s)
    }

    /// States `s_1, ..., s_T` driven by `u` from `s0`.
    pub fn run_trajectory(&self, u: &InputSequence, s0: &StateVector) -> Result<Vec<StateVector>> {
        self.check_sequence(u, s0)?;
        let mut stepper = self.stepper();
        let mut states = Vec::with_capacity(u.len());
        let mut prev = s0.clone();
        for k in 0..u.len() {
            let mut next = vec![0.0; self.n()];
            stepper.step(&prev.s, u.step(k), &mut next);
            prev = StateVector { s: next, t: prev.t + 1 };
            states.push(prev.clone());
        }
        Ok(states)
    }

    /// Calls `visit(k, s_{k+1})` for each step without storing the trajectory.
    pub fn stream_trajectory<F>(&self, u: &InputSequence, s0: &StateVector, mut visit: F) -> Result<()>
    where
        F: FnMut(usize, &[f64]),
    {
        self.check_sequence(u, s0)?;
        let mut stepper = self.stepper();
        let mut prev = s0.s.clone();
        let mut next = vec![0.0; self.n()];
        for k in 0..u.len() {
            stepper.step(&prev, u.step(k), &mut next);
            visit(k, &next);
            std::mem::swap(&mut prev, &mut next);
        }
        Ok(())
    }

    /// `||s_t - s'_t||_inf` for two runs from different initial states under the same input.
    pub fn dual_trajectory_gap(&self, u: &InputSequence, s0: &StateVector, s0_alt: &StateVector) -> Result<Vec<f64>> {
        self.check_sequence(u, s0)?;
        self.check_sequence(u, s0_alt)?;
        let mut first = self.stepper();
        let mut second = self.stepper();
        let (mut a, mut b) = (s0.s.clone(), s0_alt.s.clone());
        let (mut a_next, mut b_next) = (vec![0.0; self.n()], vec![0.0; self.n()]);
        let mut gaps = Vec::with_capacity(u.len());
        for k in 0..u.len() {
            first.step(&a, u.step(k), &mut a_next);
            second.step(&b, u.step(k), &mut b_next);
            gaps.push(
                a_next
                    .iter()
                    .zip(&b_next)
                    .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs())),
            );
            std::mem::swap(&mut a, &mut a_next);
            std::mem::swap(&mut b, &mut b_next);
        }
        Ok(gaps)
    }

    /// `(c/n) W^T relu(W x + b)`, the empirical input reconstruction.
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("reconstruction point", self.md(), x.len())?;
        let mut out = vec![0.0; self.md()];
        reconstruct_into(&self.ensemble, self.activation, self.c_over_n, x, &mut out);
        Ok(out)
    }
}

/// `out = scale * W^T act(W x + b)`.
pub(crate) fn reconstruct_into(ens: &WeightEnsemble, act: Activation, scale: f64, x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let b = ens.bias();
    for (i, &b_i) in b.iter().enumerate().take(ens.n()) {
        let row = ens.row(i);
        let a = act.apply(dot(row, x) + b_i);
        if a != 0.0 {
            for (o, w) in out.iter_mut().zip(row) {
                *o += a * w;
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stepping buffers borrowed from a [`ShiftReservoir`].
pub struct Stepper<'a> {
    res: &'a ShiftReservoir,
    feedback: Vec<f64>,
    window: Vec<f64>,
}

impl Stepper<'_> {
    /// Writes the next state into `out`. Inputs are assumed validated.
    pub fn step(&mut self, s_prev: &[f64], u_t: &[f64], out: &mut [f64]) {
        let ens = &self.res.ensemble;
        let d = ens.d();
        self.feedback.iter_mut().for_each(|x| *x = 0.0);
        for (i, &si) in s_prev.iter().enumerate() {
            if si != 0.0 {
                for (f, w) in self.feedback.iter_mut().zip(ens.row(i)) {
                    *f += si * w;
                }
            }
        }
        shift_into(&self.feedback, d, &mut self.window);
        let c = self.res.c_over_n;
        let md = self.window.len();
        self.window[..md - d].iter_mut().for_each(|x| *x *= c);
        self.window[md - d..].copy_from_slice(u_t);
        let b = ens.bias();
        let act = self.res.activation;
        for (i, o) in out.iter_mut().enumerate() {
            *o = act.apply(dot(ens.row(i), &self.window) + b[i]);
        }
    }

    /// Pre-activation window `r_t` of the most recent step.
    pub fn window(&self) -> &[f64] {
        &self.window
    }
}

/// Largest entry magnitude of a state.
pub fn state_sup_norm(s: &StateVector) -> f64 {
    sup_norm(&s.s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{sample_ensemble, SymmetricDistribution};
    use proptest::prelude::*;

    /// Explicit `md x md` shift and `md x d` embedding.
    fn dense_p(m: usize, d: usize) -> Vec<Vec<f64>> {
        let md = m * d;
        let mut p = vec![vec![0.0; md]; md];
        for i in 0..md - d {
            p[i][i + d] = 1.0;
        }
        p
    }

    fn dense_q(m: usize, d: usize) -> Vec<Vec<f64>> {
        let mut q = vec![vec![0.0; d]; m * d];
        for j in 0..d {
            q[(m - 1) * d + j][j] = 1.0;
        }
        q
    }

    fn matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        a.iter()
            .map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum())
            .collect()
    }

    fn dense_update(res: &ShiftReservoir, s: &[f64], u: &[f64]) -> Vec<f64> {
        let ens = res.ensemble();
        let (n, md) = (ens.n(), ens.md());
        let w: Vec<Vec<f64>> = (0..n).map(|i| ens.row(i).to_vec()).collect();
        let wt: Vec<Vec<f64>> = (0..md).map(|j| (0..n).map(|i| w[i][j]).collect()).collect();
        let c = 2.0 / (n as f64 * ens.source().second_moment());
        let fb: Vec<f64> = matvec(&dense_p(res.m(), res.d()), &matvec(&wt, s))
            .into_iter()
            .map(|x| c * x)
            .collect();
        let qu = matvec(&dense_q(res.m(), res.d()), u);
        let r: Vec<f64> = fb.iter().zip(&qu).map(|(a, b)| a + b).collect();
        matvec(&w, &r)
            .iter()
            .zip(ens.bias())
            .map(|(x, b)| (x + b).max(0.0))
            .collect()
    }

    fn uniform_res(n: usize, m: usize, d: usize, seed: u64) -> ShiftReservoir {
        let dist = SymmetricDistribution::uniform(0.5).unwrap();
        ShiftReservoir::new(sample_ensemble(&dist, n, m, d, seed).unwrap())
    }

    fn zero_res(n: usize, m: usize, d: usize) -> ShiftReservoir {
        let dist = SymmetricDistribution::uniform(0.5).unwrap();
        let ens = WeightEnsemble::from_parts(dist, m, d, vec![0.0; n * m * d], vec![0.0; n], 0).unwrap();
        ShiftReservoir::new(ens)
    }

    #[test]
    fn shift_examples() {
        assert_eq!(shift_apply(&[3.0, 5.0], 2, 1).unwrap(), vec![5.0, 0.0]);
        assert_eq!(
            shift_apply(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 2).unwrap(),
            matvec(&dense_p(3, 2), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        );
        assert_eq!(
            shift_apply(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 2).unwrap(),
            vec![3.0, 4.0, 5.0, 6.0, 0.0, 0.0]
        );
        assert_eq!(shift_apply(&[0.0; 6], 2, 3).unwrap(), vec![0.0; 6]);
        assert!(shift_apply(&[1.0; 5], 2, 3).is_err());
    }

    #[test]
    fn embed_examples() {
        assert_eq!(embed_apply(&[7.0], 3).unwrap(), vec![0.0, 0.0, 7.0]);
        assert_eq!(embed_apply(&[0.3, -0.2], 1).unwrap(), vec![0.3, -0.2]);
        assert_eq!(embed_apply(&[1.0, -1.0], 2).unwrap(), vec![0.0, 0.0, 1.0, -1.0]);
        assert_eq!(
            embed_apply(&[1.0, -1.0], 2).unwrap(),
            matvec(&dense_q(2, 2), &[1.0, -1.0])
        );
    }

    #[test]
    fn scale_identity() {
        let res = uniform_res(37, 2, 1, 1);
        let m2 = res.ensemble().source().second_moment();
        assert!((res.c_over_n() * 37.0 * m2 / 2.0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let res = zero_res(4, 2, 1);
        let s = res
            .state_update(&StateVector::new(vec![0.3, 0.1, 2.0, 0.0], 0), &[0.8])
            .unwrap();
        assert_eq!(s.s, vec![0.0; 4]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn memoryless_when_m_is_one() {
        let res = uniform_res(20, 1, 1, 3);
        let a = res.state_update(&StateVector::zeros(20), &[0.4]).unwrap();
        let b = res.state_update(&StateVector::random_unit(20, 9), &[0.4]).unwrap();
        assert_eq!(a.s, b.s);
    }

    #[test]
    fn hand_chosen_update_matches_dense_oracle() {
        let dist = SymmetricDistribution::uniform(0.5).unwrap();
        let ens = WeightEnsemble::from_parts(dist, 2, 1, vec![0.5, -0.25, 0.125, 0.375], vec![0.1, -0.2], 0).unwrap();
        let res = ShiftReservoir::new(ens);
        let s_prev = [0.7, 0.3];
        let got = res.state_update(&StateVector::new(s_prev.to_vec(), 0), &[0.6]).unwrap();
        // c/n = 24/2 = 12; W^T s = (0.3875, -0.0625); P -> (-0.0625, 0); times 12 -> -0.75; + Q u -> (-0.75, 0.6)
        // W r + b = (-0.375 - 0.15 + 0.1, -0.09375 + 0.225 - 0.2) = (-0.425, -0.06875) -> relu 0
        let want = dense_update(&res, &s_prev, &[0.6]);
        assert_eq!(want, vec![0.0, 0.0]);
        for (g, w) in got.s.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12);
        }
        let got = res.state_update(&StateVector::new(vec![0.1, 0.9], 0), &[-0.8]).unwrap();
        let want = dense_update(&res, &[0.1, 0.9], &[-0.8]);
        assert!(want.iter().any(|&x| x > 0.0));
        for (g, w) in got.s.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let res = uniform_res(5, 2, 2, 0);
        assert!(res.state_update(&StateVector::zeros(4), &[0.0, 0.0]).is_err());
        assert!(res.state_update(&StateVector::zeros(5), &[0.0]).is_err());
        assert!(matches!(
            res.state_update(&StateVector::zeros(5), &[f64::NAN, 0.0]),
            Err(Error::NonFinite(_))
        ));
        assert!(InputSequence::new(1, vec![0.5, 1.5]).is_err());
        assert!(InputSequence::new(2, vec![0.5, 0.5, 0.1]).is_err());
    }

    #[test]
    fn trajectory_edge_cases() {
        let res = uniform_res(8, 2, 1, 0);
        let empty = InputSequence::new(1, vec![]).unwrap();
        assert!(res.run_trajectory(&empty, &StateVector::zeros(8)).unwrap().is_empty());

        let zero = zero_res(6, 3, 1);
        let u = InputSequence::constant(1, 10, 0.0).unwrap();
        for s in zero.run_trajectory(&u, &StateVector::zeros(6)).unwrap() {
            assert!(s.s.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn trajectory_equals_manual_fold() {
        let res = uniform_res(30, 3, 2, 4);
        let u = InputSequence::uniform(2, 25, 5);
        let s0 = StateVector::random_unit(30, 6);
        let states = res.run_trajectory(&u, &s0).unwrap();
        let mut prev = s0;
        for (k, s) in states.iter().enumerate() {
            prev = res.state_update(&prev, u.step(k)).unwrap();
            assert_eq!(&prev, s);
        }
        let mut streamed = Vec::new();
        res.stream_trajectory(&u, &StateVector::random_unit(30, 6), |_, s| streamed.push(s.to_vec()))
            .unwrap();
        assert_eq!(streamed, states.iter().map(|s| s.s.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn dual_gap_edge_cases() {
        let res = uniform_res(16, 3, 1, 2);
        let u = InputSequence::uniform(1, 20, 3);
        let s0 = StateVector::random_unit(16, 1);
        assert!(res.dual_trajectory_gap(&u, &s0, &s0).unwrap().iter().all(|&g| g == 0.0));

        let zero = zero_res(16, 3, 1);
        let gaps = zero
            .dual_trajectory_gap(&u, &s0, &StateVector::random_unit(16, 2))
            .unwrap();
        assert!(gaps.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn dual_gap_at_three_m_within_lipschitz_bound() {
        let (n, m, d) = (2000, 3, 1);
        let res = uniform_res(n, m, d, 21);
        let u = InputSequence::uniform(d, 4 * m, 22);
        let gaps = res
            .dual_trajectory_gap(&u, &StateVector::random_unit(n, 23), &StateVector::random_unit(n, 24))
            .unwrap();
        let e2 = crate::bounds::e2_bound(m, d, n, 0.05).value;
        let bound = 2.0 * res.ensemble().max_row_sum() * e2 * m as f64;
        assert!(gaps[3 * m - 1] <= bound, "gap {} > {bound}", gaps[3 * m - 1]);
    }

    #[test]
    fn window_zero_pads_before_start() {
        let u = InputSequence::new(1, vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(u.window(0, 3), vec![0.0, 0.0, 0.1]);
        assert_eq!(u.window(2, 2), vec![0.2, 0.3]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn sparse_update_matches_dense_oracle(
            n in 1usize..=64, m in 1usize..=4, d in 1usize..=3, seed in any::<u64>(),
        ) {
            let res = uniform_res(n, m, d, seed);
            let s = StateVector::random_unit(n, seed ^ 1);
            let u = InputSequence::uniform(d, 1, seed ^ 2);
            let got = res.state_update(&s, u.step(0)).unwrap();
            let want = dense_update(&res, &s.s, u.step(0));
            for (g, w) in got.s.iter().zip(&want) {
                prop_assert!((g - w).abs() <= 1e-12);
            }
            prop_assert!(got.s.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn shift_is_nilpotent(m in 1usize..6, d in 1usize..4, seed in any::<u64>()) {
            let mut r = InputSequence::uniform(m * d, 1, seed).step(0).to_vec();
            for _ in 0..m {
                r = shift_apply(&r, m, d).unwrap();
            }
            prop_assert!(r.iter().all(|&x| x == 0.0));
        }

        #[test]
        fn states_stay_nonnegative(n in 1usize..40, m in 1usize..4, seed in any::<u64>()) {
            let res = uniform_res(n, m, 1, seed);
            let u = InputSequence::uniform(1, 15, seed ^ 7);
            for s in res.run_trajectory(&u, &StateVector::random_unit(n, seed ^ 8)).unwrap() {
                prop_assert!(s.s.iter().all(|&x| x >= 0.0));
            }
        }
    }
}
