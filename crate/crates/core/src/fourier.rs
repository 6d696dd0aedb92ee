//! ReLU integral representations `f(x) = int g(w, b) relu(w . x + b) dw db`
//! built from a Fourier transform `f(x) = int fhat(w) e^{i w . x} dw`.
//!
//! The kernel `h(w, b)` represents `f` over all of `R^{d+1}`; the inversion
//! `T(w) = w / (4 ||w||_1^2)` folds the part with `||w||_1 > 1/2` back into the
//! `l1` ball of radius 1/2, giving a density `g` supported in `[-1/2, 1/2]^{d+1}`.
//!
//! The constant and linear parts of `f` are represented through the
//! coefficient `8 + i`, which is exact when `int w Im fhat(w) dw = 0`; every
//! registry profile has a real, even transform and satisfies this.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::Descriptor;
use crate::ensemble::{sample_ensemble, SymmetricDistribution, WeightEnsemble};
use crate::quadrature::Rule;
use crate::readout::Readout;
use crate::rng;
use crate::{relu, Error, Result};

pub type FhatFn = Arc<dyn Fn(&[f64]) -> Complex64 + Send + Sync>;
/// `(w, r) -> r^{2d+4} fhat(r w)` for `||w||_1 = 1/2`, `r >= 1`.
pub type ScaledFhatFn = Arc<dyn Fn(&[f64], f64) -> Complex64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProfileKind {
    Zero,
    /// `A exp(-1 / (1 - t^2))` with `t = ||w||_1 / radius`, zero for `t >= 1`.
    Bump {
        amplitude: f64,
        radius: f64,
    },
    /// `A min(1, (2 ||w||_1)^{-(2d+4)})`: the slowest decay the construction allows.
    PowerLaw {
        amplitude: f64,
    },
    Custom,
}

/// A Fourier transform with its decay constant
/// `B >= sup_r sup_{||w||_1 = 1/2} max(1, r^{2d+4}) |fhat(r w)|`.
#[derive(Clone)]
pub struct FourierProfile {
    d: usize,
    decay_bound: f64,
    kind: ProfileKind,
    fhat: FhatFn,
    scaled: ScaledFhatFn,
}

impl std::fmt::Debug for FourierProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FourierProfile")
            .field("d", &self.d)
            .field("decay_bound", &self.decay_bound)
            .field("kind", &self.kind)
            .finish()
    }
}

fn l1(w: &[f64]) -> f64 {
    w.iter().map(|x| x.abs()).sum()
}

fn bump_value(amplitude: f64, radius: f64, norm: f64) -> f64 {
    let t = norm / radius;
    if t >= 1.0 {
        0.0
    } else {
        amplitude * (-1.0 / (1.0 - t * t)).exp()
    }
}

impl FourierProfile {
    pub fn zero(d: usize) -> Result<Self> {
        check_dim(d)?;
        Ok(Self {
            d,
            decay_bound: 0.0,
            kind: ProfileKind::Zero,
            fhat: Arc::new(|_: &[f64]| Complex64::new(0.0, 0.0)),
            scaled: Arc::new(|_: &[f64], _: f64| Complex64::new(0.0, 0.0)),
        })
    }

    /// Smooth bump in `||w||_1`, supported in `||w||_1 < radius <= 1/2`.
    pub fn bump(d: usize, amplitude: f64, radius: f64) -> Result<Self> {
        check_dim(d)?;
        if !(amplitude.is_finite() && radius > 0.0 && radius <= 0.5) {
            return Err(Error::InvalidProfile(format!(
                "bump needs finite amplitude and radius in (0, 1/2], got {amplitude}, {radius}"
            )));
        }
        let dim = d as i32;
        Ok(Self {
            d,
            decay_bound: amplitude.abs() / std::f64::consts::E,
            kind: ProfileKind::Bump { amplitude, radius },
            fhat: Arc::new(move |w: &[f64]| Complex64::new(bump_value(amplitude, radius, l1(w)), 0.0)),
            scaled: Arc::new(move |w: &[f64], r: f64| {
                let v = bump_value(amplitude, radius, r * l1(w));
                Complex64::new(if v == 0.0 { 0.0 } else { v * r.powi(2 * dim + 4) }, 0.0)
            }),
        })
    }

    pub fn power_law(d: usize, amplitude: f64) -> Result<Self> {
        check_dim(d)?;
        if !amplitude.is_finite() {
            return Err(Error::InvalidProfile(format!(
                "amplitude must be finite, got {amplitude}"
            )));
        }
        let p = 2 * d as i32 + 4;
        Ok(Self {
            d,
            decay_bound: amplitude.abs(),
            kind: ProfileKind::PowerLaw { amplitude },
            fhat: Arc::new(move |w: &[f64]| {
                let s = 2.0 * l1(w);
                Complex64::new(if s <= 1.0 { amplitude } else { amplitude * s.powi(-p) }, 0.0)
            }),
            scaled: Arc::new(move |w: &[f64], r: f64| {
                // (2 ||r w||_1) = r (2 ||w||_1)
                let s = r * 2.0 * l1(w);
                Complex64::new(
                    if s <= 1.0 {
                        amplitude * r.powi(p)
                    } else {
                        amplitude * (r / s).powi(p)
                    },
                    0.0,
                )
            }),
        })
    }

    /// A user transform. `scaled` must equal `r^{2d+4} fhat(r w)`; it exists so
    /// the fold can be evaluated without overflow for small `||w||_1`.
    pub fn custom(d: usize, decay_bound: f64, fhat: FhatFn, scaled: ScaledFhatFn) -> Result<Self> {
        check_dim(d)?;
        Ok(Self {
            d,
            decay_bound,
            kind: ProfileKind::Custom,
            fhat,
            scaled,
        })
    }

    /// Registry ids: `bump:scale=1,radius=0.25[,d=1]`, `powerlaw:edge[,scale=1][,d=1]`, `zero[:d=1]`.
    pub fn parse(id: &str) -> Result<Self> {
        let desc = Descriptor::parse(id).map_err(|e| Error::InvalidProfile(e.to_string()))?;
        let d = desc.usize_or("d", 1)?;
        match desc.name {
            "bump" => {
                desc.only(&["scale", "radius", "d"])?;
                Self::bump(d, desc.f64_or("scale", 1.0)?, desc.f64_or("radius", 0.25)?)
            }
            "powerlaw" => {
                desc.only(&["edge", "scale", "d"])?;
                Self::power_law(d, desc.f64_or("scale", 1.0)?)
            }
            "zero" => {
                desc.only(&["d"])?;
                Self::zero(d)
            }
            other => Err(Error::InvalidProfile(format!("unknown profile '{other}'"))),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn decay_bound(&self) -> f64 {
        self.decay_bound
    }

    pub fn kind(&self) -> ProfileKind {
        self.kind
    }

    pub fn fhat(&self, w: &[f64]) -> Complex64 {
        (self.fhat)(w)
    }

    /// Checks `fhat(-w) = conj(fhat(w))` and the declared decay bound on a
    /// radial grid of `directions` points of the `l1` sphere of radius 1/2.
    pub fn validate(&self, directions: usize, seed: u64) -> Result<()> {
        let mut rng = rng::stream(seed);
        let radii: Vec<f64> = (0..=120).map(|k| 10f64.powf(-3.0 + 6.0 * k as f64 / 120.0)).collect();
        for _ in 0..directions {
            let mut w: Vec<f64> = (0..self.d).map(|_| rng::symmetric_unit(&mut rng)).collect();
            let norm = l1(&w).max(f64::MIN_POSITIVE);
            w.iter_mut().for_each(|x| *x *= 0.5 / norm);
            for &r in &radii {
                let v: Vec<f64> = w.iter().map(|x| r * x).collect();
                let neg: Vec<f64> = v.iter().map(|x| -x).collect();
                let a = self.fhat(&v);
                let b = self.fhat(&neg);
                if (a - b.conj()).norm() > 1e-12 * a.norm().max(1.0) {
                    return Err(Error::InvalidProfile(format!("fhat is not Hermitian at {v:?}")));
                }
                let weighted = if r > 1.0 {
                    self.scaled_fhat(&w, r).norm()
                } else {
                    a.norm()
                };
                if weighted > self.decay_bound * (1.0 + 1e-12) + 1e-300 {
                    return Err(Error::InvalidProfile(format!(
                        "decay bound {} violated at radius {r}: {weighted}",
                        self.decay_bound
                    )));
                }
            }
        }
        Ok(())
    }

    fn scaled_fhat(&self, w: &[f64], r: f64) -> Complex64 {
        (self.scaled)(w, r)
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 {
        Err(Error::InvalidProfile("dimension must be positive".into()))
    } else {
        Ok(())
    }
}

/// `h` given `fhat(w)`, `fhat(-w)` and `||w||_1`.
fn h_terms(fw: Complex64, fmw: Complex64, norm: f64, b: f64) -> f64 {
    let mut h = 0.0;
    if (-norm..=0.0).contains(&b) {
        let (s, c) = b.sin_cos();
        let e_minus = Complex64::new(c, -s);
        let e_plus = Complex64::new(c, s);
        h += (-e_minus * fw - e_plus * fmw).re;
    }
    let coef = Complex64::new(8.0, 1.0);
    if (0.0..=0.5).contains(&b) {
        h += (coef * fw).re;
    }
    if (-0.5..=0.0).contains(&b) {
        h -= (coef * fmw).re;
    }
    h
}

/// The unfolded kernel `h(w, b)` on `R^{d+1}`.
pub fn h_kernel(profile: &FourierProfile, w: &[f64], b: f64) -> f64 {
    let neg: Vec<f64> = w.iter().map(|x| -x).collect();
    h_terms(profile.fhat(w), profile.fhat(&neg), l1(w), b)
}

/// `g(w, b) = h(w, b) + (2 ||w||_1)^{-(2d+4)} h(T w, b / (4 ||w||_1^2))` for
/// `0 < ||w||_1 <= 1/2`, and zero outside the ball and at `w = 0`, where the
/// folded term oscillates without a limit.
///
/// The folded term is evaluated as `r^{2d+4} h(r u, r^2 b)` with
/// `r = 1 / (2 ||w||_1)` and `u = w / (2 ||w||_1)` on the sphere of radius
/// 1/2, through the profile's scaled transform, so it stays finite as `w -> 0`.
pub fn fold_change_of_variables(profile: &FourierProfile, w: &[f64], b: f64) -> f64 {
    let norm = l1(w);
    if norm > 0.5 || norm == 0.0 {
        return 0.0;
    }
    let base = h_kernel(profile, w, b);
    let r = 1.0 / (2.0 * norm);
    let u: Vec<f64> = w.iter().map(|x| x * r).collect();
    let neg: Vec<f64> = u.iter().map(|x| -x).collect();
    let folded = h_terms(
        profile.scaled_fhat(&u, r),
        profile.scaled_fhat(&neg, r),
        r * 0.5,
        b * r * r,
    );
    base + folded
}

/// The density `g` on `[-1/2, 1/2]^{d+1}` with `|g| <= 40 B`.
#[derive(Debug, Clone)]
pub struct ReluRepresentation {
    profile: FourierProfile,
    pub sup_bound: f64,
    /// Largest `|g|` seen while validating.
    pub sampled_sup: f64,
}

impl ReluRepresentation {
    pub fn d(&self) -> usize {
        self.profile.d
    }

    pub fn profile(&self) -> &FourierProfile {
        &self.profile
    }

    pub fn g(&self, w: &[f64], b: f64) -> f64 {
        if b.abs() > 0.5 {
            return 0.0;
        }
        fold_change_of_variables(&self.profile, w, b)
    }
}

/// Points sampled when checking `|g| <= 40 B`.
pub const SUP_CHECK_SAMPLES: usize = 100_000;

/// Wraps the folded kernel and checks `|g| <= 40 B (1 + 1e-9)` on random points.
pub fn representation_from_profile(profile: FourierProfile, seed: u64) -> Result<ReluRepresentation> {
    profile.validate(16, seed)?;
    let mut rep = ReluRepresentation {
        sup_bound: 40.0 * profile.decay_bound,
        sampled_sup: 0.0,
        profile,
    };
    let (sup, _) = sample_sup(&rep, SUP_CHECK_SAMPLES, rng::derive_seed(seed, 1));
    if sup > rep.sup_bound * (1.0 + 1e-9) {
        return Err(Error::InvalidProfile(format!(
            "sampled |g| = {sup} exceeds 40 B = {}",
            rep.sup_bound
        )));
    }
    rep.sampled_sup = sup;
    Ok(rep)
}

/// Largest `|g|` over `samples` uniform points of `[-1/2, 1/2]^{d+1}`, and the
/// number of those points in the ball `||w||_1 <= 1/2`.
pub fn sample_sup(rep: &ReluRepresentation, samples: usize, seed: u64) -> (f64, usize) {
    let d = rep.d();
    let mut rng = rng::stream(seed);
    let mut w = vec![0.0; d];
    let mut sup = 0.0f64;
    let mut inside = 0;
    for _ in 0..samples {
        w.iter_mut().for_each(|x| *x = 0.5 * rng::symmetric_unit(&mut rng));
        let b = 0.5 * rng::symmetric_unit(&mut rng);
        if l1(&w) <= 0.5 {
            inside += 1;
        }
        sup = sup.max(rep.g(&w, b).abs());
    }
    (sup, inside)
}

/// `f(x) = int fhat(w) e^{i w . x} dw` by Gauss-Legendre quadrature.
///
/// Supported: every profile for `d = 1`, bump and zero profiles for `d = 2`.
pub fn f_exact(profile: &FourierProfile, x: &[f64]) -> Result<f64> {
    if x.len() != profile.d {
        return Err(Error::DimensionMismatch {
            what: "evaluation point",
            expected: profile.d,
            got: x.len(),
        });
    }
    let rule = Rule::new(64)?;
    let real_part = |w: &[f64]| -> f64 {
        let phase: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
        let v = profile.fhat(w);
        v.re * phase.cos() - v.im * phase.sin()
    };
    match (profile.kind, profile.d) {
        (ProfileKind::Zero, _) => Ok(0.0),
        (ProfileKind::Bump { radius, .. }, 1) => Ok(composite(&rule, -radius, radius, 16, &[0.0], |w| real_part(&[w]))),
        (ProfileKind::Bump { radius, .. }, 2) => Ok(composite(&rule, -radius, radius, 8, &[0.0], |w1| {
            let reach = radius - w1.abs();
            if reach <= 0.0 {
                0.0
            } else {
                composite(&rule, -reach, reach, 8, &[0.0], |w2| real_part(&[w1, w2]))
            }
        })),
        (ProfileKind::PowerLaw { .. }, 1) => {
            // Tail beyond |w| = 256 is below A 2^{-54} / 5 in absolute value.
            let half = composite(&rule, 0.0, 0.5, 4, &[], |w| real_part(&[w]) + real_part(&[-w]));
            let tail = composite(&rule, 0.5, 256.0, 1024, &[], |w| real_part(&[w]) + real_part(&[-w]));
            Ok(half + tail)
        }
        _ => Err(Error::Unsupported(format!(
            "exact evaluation for {:?} in dimension {}",
            profile.kind, profile.d
        ))),
    }
}

fn composite(rule: &Rule, a: f64, b: f64, panels: usize, breaks: &[f64], mut f: impl FnMut(f64) -> f64) -> f64 {
    let h = (b - a) / panels as f64;
    let mut cuts: Vec<f64> = (1..panels).map(|k| a + k as f64 * h).collect();
    cuts.extend_from_slice(breaks);
    rule.integrate_pieces(a, b, &cuts, &mut f)
}

/// Monte Carlo check at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCheck {
    pub x: Vec<f64>,
    pub estimate: f64,
    pub exact: f64,
    pub error: f64,
    pub std_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub points: Vec<PointCheck>,
    pub max_abs_error: f64,
    pub max_std_error: f64,
    pub mc_samples: usize,
    /// Every point within four standard errors.
    pub passed: bool,
    /// The standard error exceeds 10% of `max |f|` on the grid.
    pub inconclusive: bool,
}

/// Estimates `int g(w, b) relu(w . x + b) dw db` over the unit-volume cube at
/// each grid point and compares with `f_exact`.
pub fn verify_representation(
    rep: &ReluRepresentation,
    f_exact: &(dyn Fn(&[f64]) -> f64 + Sync),
    x_grid: &[Vec<f64>],
    mc_samples: usize,
    seed: u64,
) -> Result<VerificationReport> {
    if mc_samples < 10_000 {
        return Err(Error::param(format!("need at least 10^4 samples, got {mc_samples}")));
    }
    let d = rep.d();
    if let Some(x) = x_grid.iter().find(|x| x.len() != d) {
        return Err(Error::DimensionMismatch {
            what: "grid point",
            expected: d,
            got: x.len(),
        });
    }
    let points: Vec<PointCheck> = x_grid
        .par_iter()
        .enumerate()
        .map(|(k, x)| {
            let mut rng = rng::stream(rng::derive_seed(seed, k as u64));
            let mut w = vec![0.0; d];
            let (mut sum, mut sq) = (0.0, 0.0);
            for _ in 0..mc_samples {
                w.iter_mut().for_each(|v| *v = 0.5 * rng::symmetric_unit(&mut rng));
                let b = 0.5 * rng::symmetric_unit(&mut rng);
                let z: f64 = w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b;
                let v = rep.g(&w, b) * relu(z);
                sum += v;
                sq += v * v;
            }
            let nf = mc_samples as f64;
            let estimate = sum / nf;
            let std_error = ((sq / nf - estimate * estimate).max(0.0) / (nf - 1.0)).sqrt();
            let exact = f_exact(x);
            let error = (estimate - exact).abs();
            PointCheck {
                x: x.clone(),
                estimate,
                exact,
                error,
                std_error,
                passed: error <= 4.0 * std_error,
            }
        })
        .collect();
    let max_abs_error = points.iter().fold(0.0f64, |a, p| a.max(p.error));
    let max_std_error = points.iter().fold(0.0f64, |a, p| a.max(p.std_error));
    let max_f = points.iter().fold(0.0f64, |a, p| a.max(p.exact.abs()));
    Ok(VerificationReport {
        passed: points.iter().all(|p| p.passed),
        inconclusive: max_std_error > 0.1 * max_f,
        points,
        max_abs_error,
        max_std_error,
        mc_samples,
    })
}

/// `a_i = g(w_i, b_i) / n` for an ensemble drawn uniformly from `[-1/2, 1/2]^{d+1}`.
///
/// With a memoryless reservoir the output `a . relu(W x + b)` is a Monte Carlo
/// estimate of `f(x)`.
pub fn theoretical_readout(rep: &ReluRepresentation, ens: &WeightEnsemble) -> Result<Readout> {
    if ens.md() != rep.d() {
        return Err(Error::DimensionMismatch {
            what: "ensemble input width",
            expected: rep.d(),
            got: ens.md(),
        });
    }
    let nf = ens.n() as f64;
    let a = (0..ens.n()).map(|i| rep.g(ens.row(i), ens.bias()[i]) / nf).collect();
    Ok(Readout {
        a,
        ridge_lambda: 0.0,
        fit_rms: f64::NAN,
        condition_estimate: f64::NAN,
    })
}

/// Ensemble for [`theoretical_readout`]: `n` features, memory 1, uniform(1/2) weights.
pub fn uniform_features(d: usize, n: usize, seed: u64) -> Result<WeightEnsemble> {
    sample_ensemble(&SymmetricDistribution::uniform(0.5)?, n, 1, d, seed)
}

/// `sin(x / 2) / x`, so the constant transform `1` on `[-1/2, 1/2]` gives `f(x) = 2 sinc_half(x)`.
pub fn sinc_half(x: f64) -> f64 {
    if x == 0.0 {
        0.5
    } else {
        (x / 2.0).sin() / x
    }
}

/// Evenly spaced grid on `[-1, 1]` with `points` nodes.
pub fn unit_grid(points: usize) -> Vec<Vec<f64>> {
    if points == 1 {
        return vec![vec![0.0]];
    }
    (0..points)
        .map(|k| vec![-1.0 + 2.0 * k as f64 / (points - 1) as f64])
        .collect()
}
