//! Causal time-invariant target operators, given by their window functionals.
//!
//! A window of length `m` is stacked oldest first: block `m` is the current
//! input `u_0`, block 1 is `u_{-m+1}`. `F*_m` evaluates the functional on that
//! window with all earlier inputs set to zero, and `tail(m)` is the worst-case
//! gap `sup |F*(u) - F*_m(u)|` over inputs bounded by 1.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::descriptor::Descriptor;
use crate::reservoir::InputSequence;
use crate::rng;
use crate::{Error, Result};

pub type WindowFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Linear,
    TanhComposed,
}

#[derive(Clone)]
enum Kind {
    ExpFilter {
        lambda: f64,
        nonlinearity: Nonlinearity,
    },
    FiniteMemory {
        k: usize,
        f: WindowFn,
        /// `tails[m - 1]` for `m < k`.
        tails: Vec<f64>,
        /// Analytic sup-norm Lipschitz constant of `f`, when known.
        lipschitz: Option<f64>,
    },
}

/// A bounded target operator with finite-memory truncations and a memory tail.
#[derive(Clone)]
pub struct OperatorSpec {
    id: String,
    d: usize,
    bound: f64,
    kind: Kind,
}

impl fmt::Debug for OperatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OperatorSpec")
            .field("id", &self.id)
            .field("d", &self.d)
            .field("bound", &self.bound)
            .finish()
    }
}

/// `F(u)_t = sum_k lambda^k u_{t-k}` on scalar inputs, optionally passed through `tanh`.
pub fn make_exp_filter(lambda: f64, nonlinearity: Nonlinearity) -> Result<OperatorSpec> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::param(format!("lambda must lie in (0, 1), got {lambda}")));
    }
    let sum_bound = 1.0 / (1.0 - lambda);
    let (bound, suffix) = match nonlinearity {
        Nonlinearity::Linear => (sum_bound, ""),
        Nonlinearity::TanhComposed => (sum_bound.tanh(), ",nonlinearity=tanh"),
    };
    Ok(OperatorSpec {
        id: format!("exp_filter:lambda={lambda:?}{suffix}"),
        d: 1,
        bound,
        kind: Kind::ExpFilter { lambda, nonlinearity },
    })
}

/// Operator depending on the last `k` inputs only.
///
/// `bound` must dominate `|f|` on the cube. Truncations with `m < k` zero-pad
/// the oldest inputs; their tail is certified as `2 * bound` unless `tails`
/// supplies sharper values (one per `m = 1..k`).
pub fn make_finite_memory(
    id: impl Into<String>,
    k: usize,
    d: usize,
    bound: f64,
    f: WindowFn,
    tails: Option<Vec<f64>>,
) -> Result<OperatorSpec> {
    if k == 0 || d == 0 {
        return Err(Error::param("finite memory needs k >= 1 and d >= 1"));
    }
    if !(bound.is_finite() && bound >= 0.0) {
        return Err(Error::param(format!(
            "operator bound must be finite and nonnegative, got {bound}"
        )));
    }
    let tails = match tails {
        Some(t) if t.len() != k - 1 => {
            return Err(Error::DimensionMismatch {
                what: "finite-memory tails",
                expected: k - 1,
                got: t.len(),
            })
        }
        Some(t) => t,
        None => vec![2.0 * bound; k - 1],
    };
    Ok(OperatorSpec {
        id: id.into(),
        d,
        bound,
        kind: Kind::FiniteMemory {
            k,
            f,
            tails,
            lipschitz: None,
        },
    })
}

/// `F(u)_t = prod_{j < k} u_{t-j}` on scalar inputs.
pub fn make_product(k: usize) -> Result<OperatorSpec> {
    let f: WindowFn = Arc::new(|x: &[f64]| x.iter().product());
    // Zero padding kills the product, and the product reaches 1 on the cube.
    make_finite_memory(
        format!("product:k={k}"),
        k,
        1,
        1.0,
        f,
        Some(vec![1.0; k.saturating_sub(1)]),
    )
}

/// `F(u)_t = u_t` on scalar inputs.
pub fn make_identity() -> OperatorSpec {
    let f: WindowFn = Arc::new(|x: &[f64]| x[0]);
    let mut spec = make_finite_memory("identity", 1, 1, 1.0, f, None).expect("valid identity spec");
    spec.set_lipschitz(1.0);
    spec
}

/// The constant functional.
pub fn make_constant(value: f64) -> Result<OperatorSpec> {
    let f: WindowFn = Arc::new(move |_: &[f64]| value);
    let mut spec = make_finite_memory(format!("constant:value={value:?}"), 1, 1, value.abs(), f, None)?;
    spec.set_lipschitz(0.0);
    Ok(spec)
}

impl OperatorSpec {
    /// Registry ids: `exp_filter:lambda=0.5[,nonlinearity=tanh]`, `product:k=2`,
    /// `identity`, `constant:value=c`.
    pub fn parse(id: &str) -> Result<Self> {
        let desc = Descriptor::parse(id)?;
        match desc.name {
            "exp_filter" => {
                desc.only(&["lambda", "nonlinearity"])?;
                let nl = match desc.str("nonlinearity").unwrap_or("linear") {
                    "linear" => Nonlinearity::Linear,
                    "tanh" => Nonlinearity::TanhComposed,
                    other => return Err(Error::param(format!("unknown nonlinearity '{other}'"))),
                };
                make_exp_filter(desc.f64("lambda")?, nl)
            }
            "product" => {
                desc.only(&["k"])?;
                make_product(desc.usize_or("k", 2)?)
            }
            "identity" => {
                desc.only(&[])?;
                Ok(make_identity())
            }
            "constant" => {
                desc.only(&["value"])?;
                make_constant(desc.f64("value")?)
            }
            other => Err(Error::param(format!("unknown operator '{other}'"))),
        }
    }

    fn set_lipschitz(&mut self, l: f64) {
        if let Kind::FiniteMemory { lipschitz, .. } = &mut self.kind {
            *lipschitz = Some(l);
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// `B` with `|F| <= B`.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Memory length `k` for finite-memory operators.
    pub fn finite_memory(&self) -> Option<usize> {
        match &self.kind {
            Kind::FiniteMemory { k, .. } => Some(*k),
            Kind::ExpFilter { .. } => None,
        }
    }

    /// `E_F(m)`.
    pub fn tail(&self, m: usize) -> f64 {
        match &self.kind {
            Kind::ExpFilter { lambda, .. } => lambda.powi(m as i32) / (1.0 - lambda),
            Kind::FiniteMemory { k, tails, .. } => {
                if m >= *k {
                    0.0
                } else if m == 0 {
                    2.0 * self.bound
                } else {
                    tails[m - 1]
                }
            }
        }
    }

    /// `F*_m` on a window of `m * d` values, oldest first.
    pub fn functional(&self, window: &[f64]) -> Result<f64> {
        if window.is_empty() || !window.len().is_multiple_of(self.d) {
            return Err(Error::DimensionMismatch {
                what: "operator window (positive multiple of d)",
                expected: (window.len() / self.d).max(1) * self.d,
                got: window.len(),
            });
        }
        Ok(self.eval_window(window))
    }

    /// [`OperatorSpec::functional`] without length checks.
    pub fn eval_window(&self, window: &[f64]) -> f64 {
        match &self.kind {
            Kind::ExpFilter { lambda, nonlinearity } => {
                // Horner from the oldest entry: ((x_1 lambda + x_2) lambda + ...) + x_m.
                let s = window.iter().fold(0.0, |acc, x| acc * lambda + x);
                match nonlinearity {
                    Nonlinearity::Linear => s,
                    Nonlinearity::TanhComposed => s.tanh(),
                }
            }
            Kind::FiniteMemory { k, f, .. } => {
                let need = k * self.d;
                if window.len() >= need {
                    f(&window[window.len() - need..])
                } else {
                    let mut padded = vec![0.0; need];
                    padded[need - window.len()..].copy_from_slice(window);
                    f(&padded)
                }
            }
        }
    }

    /// `F*_m` applied to the window ending at local step `k` of `u`.
    pub fn target_at(&self, u: &InputSequence, k: usize, m: usize) -> f64 {
        self.eval_window(&u.window(k, m))
    }

    /// Exact sup-norm Lipschitz constant of `F*_m` on the cube, when known.
    ///
    /// The modulus of continuity is then `L * min(delta, 2)`.
    pub fn lipschitz(&self, m: usize) -> Option<f64> {
        match &self.kind {
            Kind::ExpFilter {
                lambda,
                nonlinearity: Nonlinearity::Linear,
            } => Some((1.0 - lambda.powi(m as i32)) / (1.0 - lambda)),
            Kind::ExpFilter { .. } => None,
            Kind::FiniteMemory { lipschitz, .. } => *lipschitz,
        }
    }

    /// Modulus `omega_{F*}(delta; eta)` of the untruncated functional with
    /// respect to the weighted norm, when available in closed form.
    ///
    /// For the exponential filter this is `sum_k lambda^k min(2, delta / eta_k)`
    /// (an upper bound when composed with `tanh`).
    pub fn fading_modulus(&self, delta: f64, eta: &WeightingSequence) -> Option<f64> {
        let Kind::ExpFilter { lambda, .. } = &self.kind else {
            return None;
        };
        let WeightingKind::Geometric { rate } = eta.kind;
        if delta <= 0.0 {
            return Some(0.0);
        }
        let mut sum = 0.0;
        let mut k = 0i32;
        loop {
            let per = delta / rate.powi(k);
            if per >= 2.0 {
                // Every later term is saturated: 2 * lambda^k / (1 - lambda).
                return Some(sum + 2.0 * lambda.powi(k) / (1.0 - lambda));
            }
            sum += lambda.powi(k) * per;
            k += 1;
        }
    }
}

/// Least `m >= 1` with `tail(m) <= eps`; errors when `cap` is exceeded.
pub fn memory_horizon(spec: &OperatorSpec, eps: f64, cap: usize) -> Result<usize> {
    if !(eps > 0.0) {
        return Err(Error::param(format!("eps must be positive, got {eps}")));
    }
    (1..=cap.max(1))
        .find(|&m| spec.tail(m) <= eps)
        .ok_or(Error::HorizonExceeded {
            cap,
            tail: spec.tail(cap),
            eps,
        })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightingKind {
    Geometric { rate: f64 },
}

/// Decreasing weights `eta_k` in `(0, 1]` defining `||u||_eta = sup_k eta_k |u_{-k}|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightingSequence {
    pub kind: WeightingKind,
}

impl WeightingSequence {
    pub fn geometric(rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate < 1.0) {
            return Err(Error::param(format!("geometric rate must lie in (0, 1), got {rate}")));
        }
        Ok(Self {
            kind: WeightingKind::Geometric { rate },
        })
    }

    /// `eta_k` for lag `k >= 0`.
    pub fn eta(&self, k: usize) -> f64 {
        let WeightingKind::Geometric { rate } = self.kind;
        rate.powi(k as i32)
    }
}

/// A weighted distance over a truncated past, with a bound on what the truncation hides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedDistance {
    pub observed: f64,
    /// `2 eta(depth)`: the largest weighted difference older inputs could add.
    pub tail_slack: f64,
    pub depth: usize,
}

impl WeightedDistance {
    pub fn upper(&self) -> f64 {
        self.observed.max(self.tail_slack)
    }
}

/// `sup_k eta_k ||u_{-k} - v_{-k}||_inf` with both records aligned at their last step.
pub fn weighted_distance(u: &InputSequence, v: &InputSequence, eta: &WeightingSequence) -> Result<WeightedDistance> {
    if u.d() != v.d() {
        return Err(Error::DimensionMismatch {
            what: "input dimension",
            expected: u.d(),
            got: v.d(),
        });
    }
    let depth = u.len().min(v.len());
    let mut observed = 0.0f64;
    for lag in 0..depth {
        let a = u.step(u.len() - 1 - lag);
        let b = v.step(v.len() - 1 - lag);
        let diff = a.iter().zip(b).fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()));
        observed = observed.max(eta.eta(lag) * diff);
    }
    Ok(WeightedDistance {
        observed,
        tail_slack: 2.0 * eta.eta(depth),
        depth,
    })
}

/// Modulus of continuity of a window functional on `[-1, 1]^{md}`.
#[derive(Debug, Clone, PartialEq)]
pub enum ModulusEstimate {
    /// `omega(delta) = L * min(delta, 2)`.
    Exact { lipschitz: f64 },
    /// Running maximum of sampled differences at increasing `deltas`; a lower
    /// bound on the true modulus.
    LowerBound { deltas: Vec<f64>, omegas: Vec<f64> },
}

impl ModulusEstimate {
    pub fn is_lower_bound(&self) -> bool {
        matches!(self, ModulusEstimate::LowerBound { .. })
    }

    pub fn omega(&self, delta: f64) -> f64 {
        match self {
            ModulusEstimate::Exact { lipschitz } => lipschitz * delta.clamp(0.0, 2.0),
            ModulusEstimate::LowerBound { deltas, omegas } => {
                let idx = deltas.partition_point(|&d| d <= delta);
                if idx == 0 {
                    0.0
                } else {
                    omegas[idx - 1]
                }
            }
        }
    }

    /// `sup { delta : omega(delta) <= eps }`; infinite when no perturbation of
    /// the cube moves the functional by more than `eps`.
    pub fn omega_inverse(&self, eps: f64) -> f64 {
        match self {
            ModulusEstimate::Exact { lipschitz } => {
                if *lipschitz == 0.0 || eps >= 2.0 * lipschitz {
                    f64::INFINITY
                } else {
                    eps / lipschitz
                }
            }
            ModulusEstimate::LowerBound { deltas, omegas } => match omegas.iter().position(|&w| w > eps) {
                Some(j) => deltas[j],
                None => f64::INFINITY,
            },
        }
    }
}

/// Pairs sampled per ladder rung in [`modulus_estimate`].
pub const MODULUS_PAIRS: usize = 512;

/// Modulus of `F*_m`: exact when an analytic Lipschitz constant is known,
/// otherwise a sampled lower bound on the ladder `delta_k = 2k / grid`.
pub fn modulus_estimate(spec: &OperatorSpec, m: usize, grid: usize, seed: u64) -> Result<ModulusEstimate> {
    if m == 0 || grid == 0 {
        return Err(Error::param("modulus estimate needs m >= 1 and grid >= 1"));
    }
    if let Some(lipschitz) = spec.lipschitz(m) {
        return Ok(ModulusEstimate::Exact { lipschitz });
    }
    let len = m * spec.d();
    let deltas: Vec<f64> = (1..=grid).map(|k| 2.0 * k as f64 / grid as f64).collect();
    let raw: Vec<f64> = deltas
        .par_iter()
        .enumerate()
        .map(|(k, &delta)| {
            let mut rng = rng::stream(rng::derive_seed(seed, k as u64));
            let mut x = vec![0.0; len];
            let mut y = vec![0.0; len];
            let mut best = 0.0f64;
            for _ in 0..MODULUS_PAIRS {
                for (a, b) in x.iter_mut().zip(y.iter_mut()) {
                    *a = rng::symmetric_unit(&mut rng);
                    *b = (*a + delta * rng::sign(&mut rng)).clamp(-1.0, 1.0);
                }
                best = best.max((spec.eval_window(&x) - spec.eval_window(&y)).abs());
            }
            best
        })
        .collect();
    let mut omegas = Vec::with_capacity(grid);
    let mut running = 0.0f64;
    for w in raw {
        running = running.max(w);
        omegas.push(running);
    }
    Ok(ModulusEstimate::LowerBound { deltas, omegas })
}
