//! Closed-form approximation bounds and the empirical statistics they control.
//!
//! Logarithms are natural. `n` is the number of random features.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{reconstruction_scale, SymmetricDistribution, WeightEnsemble};
use crate::operators::OperatorSpec;
use crate::quadrature::Rule;
use crate::reservoir::{reconstruct_into, Activation};
use crate::rng;
use crate::{relu, Error, Result};

fn log_rate(n: usize) -> f64 {
    let n = n as f64;
    ((n + 1.0).ln() / n).sqrt()
}

/// Uniform deviation bound for `(1/n) sum g(w_i) relu(w_i . x)` on `[-r, r]^d`
/// when `|g| <= b` and the `w_i` are uniform on `[-1/2, 1/2]^d`:
///
/// `b r d (2 sqrt(2 d log(n+1) / n) + sqrt(log(2/delta) / (2n)))`.
pub fn lemma_bound(b: f64, r: f64, d: usize, n: usize, delta: f64) -> f64 {
    let (df, nf) = (d as f64, n as f64);
    b * r * df * (2.0 * (2.0 * df * (nf + 1.0).ln() / nf).sqrt() + ((2.0 / delta).ln() / (2.0 * nf)).sqrt())
}

/// `c(m, delta, d) = 1152 m^2 (md+1)^2 (4 sqrt(md+1) + sqrt(log(4md/delta)))^2`.
pub fn feasibility_constant(m: usize, delta: f64, d: usize) -> f64 {
    let (mf, md1) = (m as f64, (m * d + 1) as f64);
    let inner = 4.0 * md1.sqrt() + (4.0 * (m * d) as f64 / delta).ln().sqrt();
    1152.0 * mf * mf * md1 * md1 * inner * inner
}

/// `n / log(n+1) >= c(m, delta, d)`.
pub fn is_feasible(m: usize, d: usize, n: usize, delta: f64) -> bool {
    let nf = n as f64;
    nf / (nf + 1.0).ln() >= feasibility_constant(m, delta, d)
}

/// Reconstruction error bound and whether it is certified below `1/(2m)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct E2Bound {
    pub value: f64,
    pub feasible: bool,
}

/// `12 sqrt(2) (md+1) (4 sqrt((md+1) log(n+1)/n) + sqrt(log(4md/delta)/n))`,
/// the sup-norm bound on `x - (24/n) W^T relu(W x + b)` over `[-2, 2]^{md}`
/// for weights uniform on `[-1/2, 1/2]`.
pub fn e2_bound(m: usize, d: usize, n: usize, delta: f64) -> E2Bound {
    let md1 = (m * d + 1) as f64;
    let nf = n as f64;
    let value =
        12.0 * 2f64.sqrt() * md1 * (4.0 * md1.sqrt() * log_rate(n) + ((4.0 * (m * d) as f64 / delta).ln() / nf).sqrt());
    E2Bound {
        value,
        feasible: is_feasible(m, d, n, delta),
    }
}

/// `sqrt(2) B_m (md+1) (4 sqrt((md+1) log(n+1)/n) + sqrt(log(4/delta)/n))`.
pub fn e1_bound(b_m: f64, m: usize, d: usize, n: usize, delta: f64) -> f64 {
    let md1 = (m * d + 1) as f64;
    2f64.sqrt() * b_m * md1 * (4.0 * md1.sqrt() * log_rate(n) + ((4.0 / delta).ln() / n as f64).sqrt())
}

/// `C(m, delta, d) = sqrt(2) B_m (md+1)(3 m^2 d + 1)(4 sqrt(md+1) + sqrt(log(4md/delta)))`.
pub fn rate_constant(m: usize, delta: f64, d: usize, b_m: f64) -> f64 {
    let md1 = (m * d + 1) as f64;
    let spread = (3 * m * m * d + 1) as f64;
    2f64.sqrt() * b_m * md1 * spread * (4.0 * md1.sqrt() + (4.0 * (m * d) as f64 / delta).ln().sqrt())
}

/// Representation coefficient bound `B_m`, with its provenance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularityConstant {
    pub value: f64,
    /// Supplied by the user rather than derived from a certified representation.
    pub assumed: bool,
}

impl RegularityConstant {
    pub fn assumed(value: f64) -> Self {
        Self { value, assumed: true }
    }

    pub fn certified(value: f64) -> Self {
        Self { value, assumed: false }
    }
}

/// Every term of the readout approximation bound for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub b_m: f64,
    pub b_m_assumed: bool,
    pub m: usize,
    pub d: usize,
    pub n: usize,
    pub delta: f64,
    pub e1: f64,
    pub e2: f64,
    pub c_mdd: f64,
    pub c_feasibility: f64,
    pub feasible: bool,
    pub tail_ef: f64,
    /// `E1 + (B_m m^2 d / 4) E2 + E_F(m)`.
    pub direct_sum: f64,
    /// `C sqrt(log(n+1)/n) + E_F(m)`.
    pub total_bound: f64,
}

impl ErrorBudget {
    pub fn assemble(b_m: RegularityConstant, m: usize, d: usize, n: usize, delta: f64, tail_ef: f64) -> Result<Self> {
        if m == 0 || d == 0 || n == 0 {
            return Err(Error::param("budget needs m, d, n >= 1"));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::param(format!("delta must lie in (0, 1), got {delta}")));
        }
        if !(b_m.value.is_finite() && b_m.value >= 0.0 && tail_ef.is_finite() && tail_ef >= 0.0) {
            return Err(Error::param("B_m and the memory tail must be finite and nonnegative"));
        }
        let e1 = e1_bound(b_m.value, m, d, n, delta);
        let e2 = e2_bound(m, d, n, delta);
        let c_mdd = rate_constant(m, delta, d, b_m.value);
        let leverage = b_m.value * (m * m * d) as f64 / 4.0;
        Ok(Self {
            b_m: b_m.value,
            b_m_assumed: b_m.assumed,
            m,
            d,
            n,
            delta,
            e1,
            e2: e2.value,
            c_mdd,
            c_feasibility: feasibility_constant(m, delta, d),
            feasible: e2.feasible,
            tail_ef,
            direct_sum: e1 + leverage * e2.value + tail_ef,
            total_bound: c_mdd * log_rate(n) + tail_ef,
        })
    }
}

/// Bound on the ESN readout error for `spec` truncated at memory `m`.
///
/// Infeasible configurations (too few features for the window to be
/// reconstructed within `1/(2m)`) are flagged, not rejected.
pub fn theorem_budget(
    spec: &OperatorSpec,
    b_m: RegularityConstant,
    m: usize,
    d: usize,
    n: usize,
    delta: f64,
) -> Result<ErrorBudget> {
    ErrorBudget::assemble(b_m, m, d, n, delta, spec.tail(m))
}

/// `(2 / (n M2)) W^T relu(W x + b)`.
pub fn reconstruct(ens: &WeightEnsemble, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != ens.md() {
        return Err(Error::DimensionMismatch {
            what: "reconstruction point",
            expected: ens.md(),
            got: x.len(),
        });
    }
    let mut out = vec![0.0; ens.md()];
    let scale = reconstruction_scale(ens.source()) / ens.n() as f64;
    reconstruct_into(ens, Activation::Relu, scale, x, &mut out);
    Ok(out)
}

/// Sample mean and standard error of one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_error: f64,
}

const MC_CHUNK: usize = 1 << 16;

/// Monte Carlo estimate of `E[(2/M2) w relu(w . x + b)]` for every point in `xs`,
/// with `(w, b)` drawn from `dist^{md+1}` and shared across points.
pub fn reconstruction_mean(
    dist: &SymmetricDistribution,
    xs: &[Vec<f64>],
    samples: usize,
    seed: u64,
) -> Result<Vec<Vec<MeanEstimate>>> {
    let md = xs.first().map_or(0, Vec::len);
    if md == 0 || xs.iter().any(|x| x.len() != md) {
        return Err(Error::param("reconstruction points must share a positive dimension"));
    }
    if samples < 2 {
        return Err(Error::param("need at least two samples"));
    }
    let scale = reconstruction_scale(dist);
    let chunks = samples.div_ceil(MC_CHUNK);
    let width = xs.len() * md;
    let partial: Vec<(Vec<f64>, Vec<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::stream(rng::derive_seed(seed, c as u64));
            let count = MC_CHUNK.min(samples - c * MC_CHUNK);
            let mut sum = vec![0.0; width];
            let mut sq = vec![0.0; width];
            let mut w = vec![0.0; md];
            for _ in 0..count {
                w.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
                let b = dist.sample(&mut rng);
                for (p, x) in xs.iter().enumerate() {
                    let a = scale * relu(w.iter().zip(x).map(|(u, v)| u * v).sum::<f64>() + b);
                    if a != 0.0 {
                        for j in 0..md {
                            let v = a * w[j];
                            sum[p * md + j] += v;
                            sq[p * md + j] += v * v;
                        }
                    }
                }
            }
            (sum, sq)
        })
        .collect();
    let mut sum = vec![0.0; width];
    let mut sq = vec![0.0; width];
    for (s, q) in &partial {
        for k in 0..width {
            sum[k] += s[k];
            sq[k] += q[k];
        }
    }
    let nf = samples as f64;
    Ok((0..xs.len())
        .map(|p| {
            (0..md)
                .map(|j| {
                    let mean = sum[p * md + j] / nf;
                    let var = ((sq[p * md + j] - nf * mean * mean) / (nf - 1.0)).max(0.0);
                    MeanEstimate {
                        mean,
                        std_error: (var / nf).sqrt(),
                    }
                })
                .collect()
        })
        .collect())
}

/// Grid estimate of `sup_x ||reconstruct(x) - x||_inf` over `[-radius, radius]^{md}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSup {
    /// Largest error observed on the grid.
    pub raw: f64,
    /// Lipschitz allowance for points between grid nodes.
    pub slack: f64,
    pub spacing: f64,
    pub points_per_axis: usize,
}

impl GridSup {
    /// `raw + slack`, an upper bound on the grid-free supremum.
    pub fn certified(&self) -> f64 {
        self.raw + self.slack
    }
}

/// Largest tensor grid [`grid_sup_reconstruction_error`] will sweep.
pub const MAX_GRID_POINTS: usize = 1 << 32;

/// Smallest per-axis count whose spacing on `[-radius, radius]` is at most `radius / sqrt(n)`.
pub fn covering_points(n: usize) -> usize {
    (2.0 * (n as f64).sqrt()).ceil() as usize + 1
}

/// Reconstruction error over a tensor grid with spacing at most `radius / sqrt(n)`.
///
/// Each grid line along the last coordinate is evaluated in `O(n + G)` by
/// tracking, per feature, the index range on which its ReLU is active: on
/// that range the feature contributes an affine function of the index.
///
/// The slack is `B d' h / 2` with `B = (2/M2) * support_radius`, `d' = md + 1`
/// (bias included) and `h` the spacing, the covering allowance used by the
/// uniform deviation bound.
pub fn grid_sup_reconstruction_error(
    ens: &WeightEnsemble,
    radius: f64,
    points_per_axis: Option<usize>,
) -> Result<GridSup> {
    let dim = ens.md();
    let g = points_per_axis.unwrap_or_else(|| covering_points(ens.n())).max(2);
    let rows = g
        .checked_pow((dim - 1) as u32)
        .filter(|r| r.checked_mul(g).is_some_and(|total| total <= MAX_GRID_POINTS))
        .ok_or_else(|| Error::Overflow(format!("grid {g}^{dim} exceeds {MAX_GRID_POINTS} points")))?;
    let h = 2.0 * radius / (g - 1) as f64;
    let scale = reconstruction_scale(ens.source()) / ens.n() as f64;
    let last = dim - 1;
    let bias = ens.bias();

    let mut prefix = vec![0.0; last];
    let mut d_const = vec![0.0; (g + 1) * dim];
    let mut d_slope = vec![0.0; (g + 1) * dim];
    let mut raw = 0.0f64;
    for row in 0..rows {
        let mut idx = row;
        for p in prefix.iter_mut() {
            *p = -radius + (idx % g) as f64 * h;
            idx /= g;
        }
        d_const.iter_mut().for_each(|v| *v = 0.0);
        d_slope.iter_mut().for_each(|v| *v = 0.0);
        for (i, &bias_i) in bias.iter().enumerate().take(ens.n()) {
            let w = ens.row(i);
            let alpha = w[..last].iter().zip(&prefix).map(|(a, b)| a * b).sum::<f64>() + bias_i - w[last] * radius;
            let beta = w[last] * h;
            // Active where alpha + beta k > 0.
            let (lo, hi) = if beta > 0.0 {
                let k0 = -alpha / beta;
                (((k0.floor() + 1.0).max(0.0) as usize).min(g), g)
            } else if beta < 0.0 {
                let k0 = -alpha / beta;
                (0, (k0.ceil().max(0.0) as usize).min(g))
            } else if alpha > 0.0 {
                (0, g)
            } else {
                (0, 0)
            };
            if lo >= hi {
                continue;
            }
            for j in 0..dim {
                let c = scale * w[j];
                d_const[lo * dim + j] += c * alpha;
                d_const[hi * dim + j] -= c * alpha;
                d_slope[lo * dim + j] += c * beta;
                d_slope[hi * dim + j] -= c * beta;
            }
        }
        let mut acc_c = vec![0.0; dim];
        let mut acc_s = vec![0.0; dim];
        for k in 0..g {
            let t = -radius + k as f64 * h;
            for j in 0..dim {
                acc_c[j] += d_const[k * dim + j];
                acc_s[j] += d_slope[k * dim + j];
                let x = if j == last { t } else { prefix[j] };
                raw = raw.max((acc_c[j] + acc_s[j] * k as f64 - x).abs());
            }
        }
    }
    let b_coef = reconstruction_scale(ens.source()) * ens.source().support_radius();
    Ok(GridSup {
        raw,
        slack: b_coef * (dim + 1) as f64 * h / 2.0,
        spacing: h,
        points_per_axis: g,
    })
}

pub type DensityFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Outcome of one draw of `n` features against the uniform deviation bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationTrial {
    /// Grid supremum plus covering slack.
    pub empirical_sup: f64,
    pub grid_sup: f64,
    pub slack: f64,
    pub bound: f64,
    pub violated: bool,
    pub n: usize,
    pub d: usize,
    pub delta: f64,
    pub grid_points: usize,
    /// Error budget of the ground-truth integral.
    pub reference_error: f64,
}

/// A deviation test with its ground truth precomputed, reusable across trials.
pub struct DeviationExperiment {
    g: DensityFn,
    g_bound: f64,
    d: usize,
    n: usize,
    delta: f64,
    points_per_axis: usize,
    spacing: f64,
    grid: Vec<Vec<f64>>,
    truth: Vec<f64>,
    reference_error: f64,
    bound: f64,
}

const QUAD_ORDER: usize = 48;

/// Deviation grids are stored with their reference values, so they stay smaller.
const MAX_DEVIATION_GRID: usize = 1 << 24;

/// `int_{[-1/2,1/2]^d} g(w) relu(w . x) dw` with an error estimate from a
/// rule of twice the order.
fn quadrature_truth(g: &DensityFn, x: &[f64], order: usize) -> Result<(f64, f64)> {
    let lo = Rule::new(order)?;
    let hi = Rule::new(2 * order)?;
    let eval = |rule: &Rule| -> f64 {
        match x.len() {
            1 => rule.integrate_pieces(-0.5, 0.5, &[0.0], |w| g(&[w]) * relu(w * x[0])),
            2 => {
                let (x1, x2) = (x[0], x[1]);
                let mut outer_breaks = vec![0.0];
                if x1 != 0.0 {
                    outer_breaks.push(x2 / (2.0 * x1));
                    outer_breaks.push(-x2 / (2.0 * x1));
                }
                rule.integrate_pieces(-0.5, 0.5, &outer_breaks, |w1| {
                    let inner_break = if x2 != 0.0 { vec![-w1 * x1 / x2] } else { vec![] };
                    rule.integrate_pieces(-0.5, 0.5, &inner_break, |w2| g(&[w1, w2]) * relu(w1 * x1 + w2 * x2))
                })
            }
            _ => unreachable!("quadrature truth is used for d <= 2"),
        }
    };
    let a = eval(&lo);
    let b = eval(&hi);
    Ok((b, (a - b).abs()))
}

/// Monte Carlo reference with `samples` uniform draws; error is four standard errors.
fn monte_carlo_truth(g: &DensityFn, grid: &[Vec<f64>], samples: usize, seed: u64) -> (Vec<f64>, f64) {
    let d = grid[0].len();
    let mut rng = rng::stream(seed);
    let mut sum = vec![0.0; grid.len()];
    let mut sq = vec![0.0; grid.len()];
    let mut w = vec![0.0; d];
    for _ in 0..samples {
        w.iter_mut().for_each(|v| *v = 0.5 * rng::symmetric_unit(&mut rng));
        let gw = g(&w);
        for (p, x) in grid.iter().enumerate() {
            let v = gw * relu(w.iter().zip(x).map(|(a, b)| a * b).sum());
            sum[p] += v;
            sq[p] += v * v;
        }
    }
    let nf = samples as f64;
    let mut worst = 0.0f64;
    let means = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| {
            let mean = s / nf;
            worst = worst.max(((q / nf - mean * mean).max(0.0) / nf).sqrt());
            mean
        })
        .collect();
    (means, 4.0 * worst)
}

impl DeviationExperiment {
    /// Builds the grid on `[-r, r]^d` (at least `grid_points` per axis and
    /// spacing at most `r / sqrt(n)`) and its reference values.
    ///
    /// Fails when the reference error exceeds 1% of the bound.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        g: DensityFn,
        g_bound: f64,
        d: usize,
        n: usize,
        r: f64,
        delta: f64,
        grid_points: usize,
        seed: u64,
    ) -> Result<Self> {
        if d == 0 || n == 0 || !(r > 0.0) || !(delta > 0.0 && delta < 1.0) {
            return Err(Error::param("deviation trial needs d, n >= 1, r > 0, delta in (0, 1)"));
        }
        let per_axis = grid_points.max(covering_points(n));
        let total = per_axis
            .checked_pow(d as u32)
            .filter(|&t| t <= MAX_DEVIATION_GRID)
            .ok_or_else(|| Error::Overflow(format!("grid {per_axis}^{d} exceeds {MAX_DEVIATION_GRID} points")))?;
        let spacing = 2.0 * r / (per_axis - 1) as f64;
        let grid: Vec<Vec<f64>> = (0..total)
            .map(|mut idx| {
                (0..d)
                    .map(|_| {
                        let k = idx % per_axis;
                        idx /= per_axis;
                        -r + k as f64 * spacing
                    })
                    .collect()
            })
            .collect();
        let bound = lemma_bound(g_bound, r, d, n, delta);
        let (truth, reference_error) = if d <= 2 {
            let vals: Result<Vec<(f64, f64)>> = grid.par_iter().map(|x| quadrature_truth(&g, x, QUAD_ORDER)).collect();
            let vals = vals?;
            let err = vals.iter().fold(0.0f64, |a, v| a.max(v.1));
            (vals.into_iter().map(|v| v.0).collect(), err)
        } else {
            monte_carlo_truth(&g, &grid, 100 * n, rng::derive_seed(seed, u64::MAX))
        };
        if reference_error > 0.01 * bound {
            return Err(Error::QuadratureBudget {
                budget: reference_error,
                limit: 0.01 * bound,
            });
        }
        Ok(Self {
            g,
            g_bound,
            d,
            n,
            delta,
            points_per_axis: per_axis,
            spacing,
            grid,
            truth,
            reference_error,
            bound,
        })
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn grid(&self) -> &[Vec<f64>] {
        &self.grid
    }

    pub fn truth(&self) -> &[f64] {
        &self.truth
    }

    pub fn points_per_axis(&self) -> usize {
        self.points_per_axis
    }

    /// One draw of `n` weights uniform on `[-1/2, 1/2]^d`.
    pub fn trial(&self, seed: u64) -> DeviationTrial {
        let mut rng = rng::stream(seed);
        let d = self.d;
        let mut w = vec![0.0; self.n * d];
        w.iter_mut().for_each(|v| *v = 0.5 * rng::symmetric_unit(&mut rng));
        let gw: Vec<f64> = w.chunks(d).map(|wi| (self.g)(wi)).collect();
        let nf = self.n as f64;
        let grid_sup = self
            .grid
            .iter()
            .zip(&self.truth)
            .map(|(x, f)| {
                let est: f64 = w
                    .chunks(d)
                    .zip(&gw)
                    .map(|(wi, g)| g * relu(wi.iter().zip(x).map(|(a, b)| a * b).sum()))
                    .sum::<f64>()
                    / nf;
                (est - f).abs()
            })
            .fold(0.0f64, f64::max);
        let slack = self.g_bound * d as f64 * self.spacing / 2.0;
        let empirical_sup = grid_sup + slack;
        DeviationTrial {
            empirical_sup,
            grid_sup,
            slack,
            bound: self.bound,
            violated: empirical_sup > self.bound,
            n: self.n,
            d,
            delta: self.delta,
            grid_points: self.grid.len(),
            reference_error: self.reference_error,
        }
    }
}

/// Single deviation trial; see [`DeviationExperiment`].
#[allow(clippy::too_many_arguments)]
pub fn deviation_trial(
    g_bound: f64,
    d: usize,
    n: usize,
    r: f64,
    delta: f64,
    grid_points: usize,
    seed: u64,
    g: DensityFn,
) -> Result<DeviationTrial> {
    Ok(DeviationExperiment::new(g, g_bound, d, n, r, delta, grid_points, seed)?.trial(seed))
}
