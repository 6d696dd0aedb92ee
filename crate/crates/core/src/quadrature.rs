//! Gauss-Legendre rules for the piecewise-smooth integrands of ReLU features.

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;

use crate::{Error, Result};

/// A Gauss-Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Rule {
    pairs: Vec<(f64, f64)>,
}

impl Rule {
    pub fn new(order: usize) -> Result<Self> {
        let degree = NonZeroUsize::new(order).ok_or_else(|| Error::param("quadrature order must be positive"))?;
        let pairs = GaussLegendre::new(degree).as_node_weight_pairs().to_vec();
        Ok(Self { pairs })
    }

    pub fn order(&self) -> usize {
        self.pairs.len()
    }

    /// `int_a^b f`.
    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (b + a);
        half * self.pairs.iter().map(|&(x, w)| w * f(mid + half * x)).sum::<f64>()
    }

    /// `int_a^b f`, with the interval cut at every break point inside `(a, b)`.
    ///
    /// Cutting at the kinks of the integrand keeps each piece smooth.
    pub fn integrate_pieces(&self, a: f64, b: f64, breaks: &[f64], mut f: impl FnMut(f64) -> f64) -> f64 {
        let mut cuts: Vec<f64> = breaks.iter().copied().filter(|&c| c > a && c < b).collect();
        cuts.sort_by(f64::total_cmp);
        let mut lo = a;
        let mut total = 0.0;
        for hi in cuts.into_iter().chain(std::iter::once(b)) {
            if hi > lo {
                total += self.integrate(lo, hi, &mut f);
            }
            lo = hi;
        }
        total
    }
}
