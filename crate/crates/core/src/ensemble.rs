//! Internal weights `(W, b)` sampled i.i.d. from a symmetric bounded law.

use serde::{Deserialize, Serialize};

use crate::rng::{self, StreamRng, RNG_ALGORITHM};
use crate::{Error, Result};

/// Family of a [`SymmetricDistribution`].
#[derive(Debug, Clone, PartialEq)]
pub enum DistributionKind {
    /// Uniform on `[-r, r]`.
    Uniform { half_width: f64 },
    /// `+c` or `-c` with probability 1/2 each.
    TwoPoint { atom: f64 },
    /// Scale `c_k` chosen with probability `p_k`, then a uniform random sign.
    RademacherMixture { scales: Vec<f64>, weights: Vec<f64> },
}

/// A symmetric probability law on a bounded interval.
///
/// Only bounded supports can be constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricDistribution {
    kind: DistributionKind,
    second_moment: f64,
    support_radius: f64,
}

fn positive_finite(name: &str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::param(format!("{name} must be positive and finite, got {x}")))
    }
}

impl SymmetricDistribution {
    pub fn uniform(half_width: f64) -> Result<Self> {
        positive_finite("uniform half-width", half_width)?;
        Ok(Self {
            kind: DistributionKind::Uniform { half_width },
            second_moment: half_width * half_width / 3.0,
            support_radius: half_width,
        })
    }

    pub fn two_point(atom: f64) -> Result<Self> {
        positive_finite("two-point atom", atom)?;
        Ok(Self {
            kind: DistributionKind::TwoPoint { atom },
            second_moment: atom * atom,
            support_radius: atom,
        })
    }

    /// Weights are normalized to sum to one.
    pub fn rademacher_mixture(scales: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if scales.is_empty() || scales.len() != weights.len() {
            return Err(Error::param("mixture needs matching non-empty scale and weight lists"));
        }
        for &c in &scales {
            positive_finite("mixture scale", c)?;
        }
        for &p in &weights {
            positive_finite("mixture weight", p)?;
        }
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.iter().map(|p| p / total).collect();
        let second_moment = scales.iter().zip(&weights).map(|(c, p)| p * c * c).sum();
        let support_radius = scales.iter().cloned().fold(0.0, f64::max);
        Ok(Self {
            kind: DistributionKind::RademacherMixture { scales, weights },
            second_moment,
            support_radius,
        })
    }

    /// Parses descriptors such as `uniform:r=0.5`, `two_point:c=1` or
    /// `mixture:scales=0.25/1,weights=0.5/0.5`.
    pub fn parse(descriptor: &str) -> Result<Self> {
        let (name, args) = descriptor.split_once(':').unwrap_or((descriptor, ""));
        let mut fields = std::collections::BTreeMap::new();
        for part in args.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::param(format!("malformed distribution field '{part}'")))?;
            fields.insert(k.trim(), v.trim());
        }
        let num = |key: &str| -> Result<f64> {
            let raw = fields
                .get(key)
                .ok_or_else(|| Error::param(format!("distribution '{name}' needs '{key}'")))?;
            raw.parse::<f64>()
                .map_err(|_| Error::param(format!("'{key}' is not a number: {raw}")))
        };
        let list = |key: &str| -> Result<Vec<f64>> {
            let raw = fields
                .get(key)
                .ok_or_else(|| Error::param(format!("distribution '{name}' needs '{key}'")))?;
            raw.split('/')
                .map(|x| {
                    x.parse::<f64>()
                        .map_err(|_| Error::param(format!("'{key}' entry is not a number: {x}")))
                })
                .collect()
        };
        match name.trim() {
            "uniform" => Self::uniform(num("r")?),
            "two_point" => Self::two_point(num("c")?),
            "mixture" => Self::rademacher_mixture(list("scales")?, list("weights")?),
            other => Err(Error::param(format!("unknown distribution '{other}'"))),
        }
    }

    /// Canonical descriptor; round-trips through [`SymmetricDistribution::parse`].
    pub fn descriptor(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join("/");
        match &self.kind {
            DistributionKind::Uniform { half_width } => format!("uniform:r={half_width:?}"),
            DistributionKind::TwoPoint { atom } => format!("two_point:c={atom:?}"),
            DistributionKind::RademacherMixture { scales, weights } => {
                format!("mixture:scales={},weights={}", join(scales), join(weights))
            }
        }
    }

    pub fn kind(&self) -> &DistributionKind {
        &self.kind
    }

    /// `M2`, the variance of the law.
    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    pub fn fourth_moment(&self) -> f64 {
        match &self.kind {
            DistributionKind::Uniform { half_width } => half_width.powi(4) / 5.0,
            DistributionKind::TwoPoint { atom } => atom.powi(4),
            DistributionKind::RademacherMixture { scales, weights } => {
                scales.iter().zip(weights).map(|(c, p)| p * c.powi(4)).sum()
            }
        }
    }

    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    pub fn sample(&self, rng: &mut StreamRng) -> f64 {
        match &self.kind {
            DistributionKind::Uniform { half_width } => half_width * rng::symmetric_unit(rng),
            DistributionKind::TwoPoint { atom } => atom * rng::sign(rng),
            DistributionKind::RademacherMixture { scales, weights } => {
                let u = rng::unit_open(rng);
                let mut acc = 0.0;
                let mut scale = scales[scales.len() - 1];
                for (c, p) in scales.iter().zip(weights) {
                    acc += p;
                    if u < acc {
                        scale = *c;
                        break;
                    }
                }
                scale * rng::sign(rng)
            }
        }
    }
}

/// `2 / M2`: the coefficient that turns ReLU features back into their input.
pub fn reconstruction_scale(dist: &SymmetricDistribution) -> f64 {
    2.0 / dist.second_moment()
}

/// `n` rows `(w_i, b_i)` with `w_i` of length `m * d`.
///
/// `W` is row-major by sample index, so row `i` is `w_i` contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightEnsemble {
    w: Vec<f64>,
    b: Vec<f64>,
    n: usize,
    m: usize,
    d: usize,
    source: SymmetricDistribution,
    seed: u64,
}

fn checked_dims(n: usize, m: usize, d: usize) -> Result<usize> {
    if n == 0 || m == 0 || d == 0 {
        return Err(Error::param(format!(
            "ensemble dims must be positive, got n={n}, m={m}, d={d}"
        )));
    }
    let md = m
        .checked_mul(d)
        .ok_or_else(|| Error::Overflow(format!("m*d with m={m}, d={d}")))?;
    md.checked_add(1)
        .and_then(|k| k.checked_mul(n))
        .ok_or_else(|| Error::Overflow(format!("n*(m*d+1) with n={n}, m*d={md}")))?;
    Ok(md)
}

/// Draws `n` i.i.d. rows from `dist^(m d + 1)`, deterministically in `seed`.
///
/// Draw order is `w_1, b_1, w_2, b_2, ...` from a single stream.
pub fn sample_ensemble(
    dist: &SymmetricDistribution,
    n: usize,
    m: usize,
    d: usize,
    seed: u64,
) -> Result<WeightEnsemble> {
    let md = checked_dims(n, m, d)?;
    let mut rng = rng::stream(seed);
    let mut w = Vec::with_capacity(n * md);
    let mut b = Vec::with_capacity(n);
    for _ in 0..n {
        for _ in 0..md {
            w.push(dist.sample(&mut rng));
        }
        b.push(dist.sample(&mut rng));
    }
    Ok(WeightEnsemble {
        w,
        b,
        n,
        m,
        d,
        source: dist.clone(),
        seed,
    })
}

impl WeightEnsemble {
    /// Builds an ensemble from explicit entries, e.g. hand-chosen test weights.
    pub fn from_parts(
        source: SymmetricDistribution,
        m: usize,
        d: usize,
        w: Vec<f64>,
        b: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let n = b.len();
        let md = checked_dims(n, m, d)?;
        if w.len() != n * md {
            return Err(Error::DimensionMismatch {
                what: "W entries",
                expected: n * md,
                got: w.len(),
            });
        }
        let radius = source.support_radius();
        if let Some(x) = w.iter().chain(&b).find(|x| !(x.abs() <= radius)) {
            return Err(Error::param(format!(
                "entry {x} outside the support [-{radius}, {radius}]"
            )));
        }
        Ok(Self {
            w,
            b,
            n,
            m,
            d,
            source,
            seed,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn md(&self) -> usize {
        self.m * self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn source(&self) -> &SymmetricDistribution {
        &self.source
    }

    /// Row-major `n x md` matrix.
    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn bias(&self) -> &[f64] {
        &self.b
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let md = self.md();
        &self.w[i * md..(i + 1) * md]
    }

    /// `||W||_inf`, the maximum absolute row sum.
    pub fn max_row_sum(&self) -> f64 {
        (0..self.n)
            .map(|i| self.row(i).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&EnsembleFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: EnsembleFile = serde_json::from_str(text)?;
        if file.format != ENSEMBLE_FORMAT || file.version != ENSEMBLE_VERSION {
            return Err(Error::param(format!(
                "unsupported ensemble container {} v{}",
                file.format, file.version
            )));
        }
        if file.rng != RNG_ALGORITHM {
            return Err(Error::param(format!("unknown rng identity '{}'", file.rng)));
        }
        let source = SymmetricDistribution::parse(&file.distribution)?;
        let ens = Self::from_parts(source, file.m, file.d, file.w, file.b, file.seed)?;
        if ens.n != file.n {
            return Err(Error::DimensionMismatch {
                what: "ensemble rows",
                expected: file.n,
                got: ens.n,
            });
        }
        Ok(ens)
    }
}

const ENSEMBLE_FORMAT: &str = "reservoir-ensemble";
const ENSEMBLE_VERSION: u32 = 1;

/// Versioned on-disk container. Floats are written in shortest round-trip
/// form, so a decode returns the identical bits.
#[derive(Serialize, Deserialize)]
struct EnsembleFile {
    format: String,
    version: u32,
    rng: String,
    distribution: String,
    second_moment: f64,
    support_radius: f64,
    seed: u64,
    n: usize,
    m: usize,
    d: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl From<&WeightEnsemble> for EnsembleFile {
    fn from(e: &WeightEnsemble) -> Self {
        Self {
            format: ENSEMBLE_FORMAT.to_string(),
            version: ENSEMBLE_VERSION,
            rng: RNG_ALGORITHM.to_string(),
            distribution: e.source.descriptor(),
            second_moment: e.source.second_moment(),
            support_radius: e.source.support_radius(),
            seed: e.seed,
            n: e.n,
            m: e.m,
            d: e.d,
            w: e.w.clone(),
            b: e.b.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn standardized_moments(xs: &[f64]) -> (f64, f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| x * x).sum::<f64>() / n;
        let sd = var.sqrt();
        let m1 = mean / sd;
        let m3 = xs.iter().map(|x| x.powi(3)).sum::<f64>() / n / sd.powi(3);
        (m1, m3, var)
    }

    fn all_kinds() -> Vec<SymmetricDistribution> {
        vec![
            SymmetricDistribution::uniform(0.5).unwrap(),
            SymmetricDistribution::uniform(1.0).unwrap(),
            SymmetricDistribution::two_point(1.0).unwrap(),
            SymmetricDistribution::rademacher_mixture(vec![0.25, 1.0], vec![3.0, 1.0]).unwrap(),
        ]
    }

    #[test]
    fn small_uniform_ensemble_in_support() {
        let dist = SymmetricDistribution::uniform(0.5).unwrap();
        let e = sample_ensemble(&dist, 3, 1, 1, 0).unwrap();
        assert_eq!(e.weights().len(), 3);
        assert_eq!(e.bias().len(), 3);
        for x in e.weights().iter().chain(e.bias()) {
            assert!(x.abs() <= 0.5);
        }
    }

    #[test]
    fn two_point_entries_are_atoms() {
        let dist = SymmetricDistribution::two_point(1.0).unwrap();
        let e = sample_ensemble(&dist, 200, 2, 3, 5).unwrap();
        assert!(e.weights().iter().chain(e.bias()).all(|&x| x == 1.0 || x == -1.0));
    }

    #[test]
    fn uniform_variance_matches_one_twelfth() {
        let dist = SymmetricDistribution::uniform(0.5).unwrap();
        let e = sample_ensemble(&dist, 1_000_000, 1, 1, 11).unwrap();
        let n = e.n() as f64;
        let mean = e.weights().iter().sum::<f64>() / n;
        let var = e.weights().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 1.0 / 12.0).abs() <= 3e-4, "variance {var}");
    }

    #[test]
    fn reconstruction_scales() {
        let s = |d: SymmetricDistribution| reconstruction_scale(&d);
        assert!((s(SymmetricDistribution::uniform(0.5).unwrap()) - 24.0).abs() < 1e-12);
        assert_eq!(s(SymmetricDistribution::two_point(1.0).unwrap()), 2.0);
        assert!((s(SymmetricDistribution::uniform(1.0).unwrap()) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn declared_second_moments() {
        assert!((SymmetricDistribution::uniform(0.5).unwrap().second_moment() - 1.0 / 12.0).abs() < 1e-15);
        assert_eq!(SymmetricDistribution::two_point(3.0).unwrap().second_moment(), 9.0);
        let mix = SymmetricDistribution::rademacher_mixture(vec![1.0, 2.0], vec![1.0, 1.0]).unwrap();
        assert!((mix.second_moment() - 2.5).abs() < 1e-15);
        assert_eq!(mix.support_radius(), 2.0);
    }

    #[test]
    fn symmetry_and_moment_checks_for_every_kind() {
        let draws = 1_000_000usize;
        let tol = 5.0 / (draws as f64).sqrt();
        for (k, dist) in all_kinds().into_iter().enumerate() {
            let mut rng = rng::stream(100 + k as u64);
            let xs: Vec<f64> = (0..draws).map(|_| dist.sample(&mut rng)).collect();
            let (m1, m3, m2) = standardized_moments(&xs);
            assert!(m1.abs() <= tol, "{}: standardized mean {m1}", dist.descriptor());
            // The third standardized moment has variance E[x^6]/M2^3, larger than one.
            let m6 = xs.iter().map(|x| x.powi(6)).sum::<f64>() / draws as f64;
            let tol3 = tol * (m6 / m2.powi(3)).sqrt();
            assert!(m3.abs() <= tol3, "{}: standardized skew {m3}", dist.descriptor());

            let se = ((dist.fourth_moment() - dist.second_moment().powi(2)) / draws as f64).sqrt();
            assert!(
                (m2 - dist.second_moment()).abs() <= 5.0 * se + 1e-15,
                "{}: empirical M2 {m2}",
                dist.descriptor()
            );

            // Two-sided sign test at level 1e-3.
            let positives = xs.iter().filter(|&&x| x > 0.0).count() as f64;
            let z = (positives - draws as f64 / 2.0) / (draws as f64 / 4.0).sqrt();
            assert!(z.abs() <= 3.29, "{}: sign z = {z}", dist.descriptor());
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(SymmetricDistribution::uniform(0.0).is_err());
        assert!(SymmetricDistribution::uniform(f64::INFINITY).is_err());
        assert!(SymmetricDistribution::two_point(-1.0).is_err());
        assert!(SymmetricDistribution::rademacher_mixture(vec![1.0], vec![]).is_err());
        let dist = SymmetricDistribution::uniform(0.5).unwrap();
        assert!(sample_ensemble(&dist, 0, 1, 1, 0).is_err());
        assert!(matches!(
            sample_ensemble(&dist, usize::MAX, 2, 1, 0),
            Err(Error::Overflow(_))
        ));
        assert!(WeightEnsemble::from_parts(dist, 1, 1, vec![0.7], vec![0.0], 0).is_err());
    }

    #[test]
    fn descriptors_round_trip() {
        for dist in all_kinds() {
            let back = SymmetricDistribution::parse(&dist.descriptor()).unwrap();
            assert_eq!(back, dist);
        }
        assert!(SymmetricDistribution::parse("gaussian:s=1").is_err());
    }

    #[test]
    fn max_row_sum_is_infinity_norm() {
        let dist = SymmetricDistribution::uniform(1.0).unwrap();
        let e = WeightEnsemble::from_parts(dist, 2, 1, vec![0.5, -0.25, -1.0, 0.1], vec![0.0, 0.0], 0).unwrap();
        assert!((e.max_row_sum() - 1.1).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn seed_determinism_survives_serialization(
            n in 1usize..40, m in 1usize..4, d in 1usize..4, seed in any::<u64>(), kind in 0usize..4,
        ) {
            let dist = all_kinds()[kind].clone();
            let a = sample_ensemble(&dist, n, m, d, seed).unwrap();
            let b = sample_ensemble(&dist, n, m, d, seed).unwrap();
            let ja = a.to_json().unwrap();
            prop_assert_eq!(&ja, &b.to_json().unwrap());
            let back = WeightEnsemble::from_json(&ja).unwrap();
            prop_assert_eq!(&back, &a);
            let radius = dist.support_radius();
            prop_assert!(a.weights().iter().chain(a.bias()).all(|x| x.abs() <= radius));
        }
    }
}
