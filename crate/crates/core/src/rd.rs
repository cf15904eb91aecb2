//! Reverse waterfilling over pooled mixture spectra and the resulting
//! rate–distortion bounds.
//!
//! Rates are bits per source dimension (complex or real, per [`FieldMode`]),
//! distortions are MSE per dimension.

use std::hash::Hasher;

use fnv::FnvHasher;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fit::TransformDictionary;
use crate::tensor::{hermitian_eig, FieldMode, HermitianMatrix};
use crate::{GmtcError, Result};

const BISECTION_TOL: f64 = 1e-10;
const BISECTION_ITERS: usize = 200;

/// One eigenmode `(c, m)` of the pooled spectrum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectrumEntry {
    pub component: usize,
    pub mode_index: usize,
    pub eigenvalue: f64,
    pub weight: f64,
}

/// All `K * N` eigenmodes of a mixture in one pool, component-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledSpectrum {
    mode: FieldMode,
    n: usize,
    weights: Vec<f64>,
    eigenvalues: Vec<f64>,
}

impl PooledSpectrum {
    pub fn new(mode: FieldMode, weights: &[f64], spectra: &[Vec<f64>]) -> Result<Self> {
        if weights.is_empty() || weights.len() != spectra.len() {
            return Err(GmtcError::InvalidArgument(
                "need one spectrum per component weight".into(),
            ));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(GmtcError::InvalidArgument("weights must form a simplex".into()));
        }
        let n = spectra[0].len();
        if n == 0 {
            return Err(GmtcError::InvalidArgument("empty spectrum".into()));
        }
        let mut eigenvalues = Vec::with_capacity(n * spectra.len());
        for s in spectra {
            if s.len() != n {
                return Err(GmtcError::DimensionMismatch {
                    expected: n,
                    actual: s.len(),
                });
            }
            if s.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
                return Err(GmtcError::InvalidArgument(
                    "eigenvalues must be finite and nonnegative".into(),
                ));
            }
            eigenvalues.extend_from_slice(s);
        }
        Ok(Self {
            mode,
            n,
            weights: weights.to_vec(),
            eigenvalues,
        })
    }

    pub fn mode(&self) -> FieldMode {
        self.mode
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn eigenvalue(&self, c: usize, m: usize) -> f64 {
        self.eigenvalues[c * self.n + m]
    }

    pub fn component(&self, c: usize) -> &[f64] {
        &self.eigenvalues[c * self.n..(c + 1) * self.n]
    }

    pub fn entries(&self) -> impl Iterator<Item = SpectrumEntry> + '_ {
        self.eigenvalues.iter().enumerate().map(move |(i, &l)| SpectrumEntry {
            component: i / self.n,
            mode_index: i % self.n,
            eigenvalue: l,
            weight: self.weights[i / self.n],
        })
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().cloned().fold(0.0, f64::max)
    }

    /// Average source power per dimension, `(1/N) sum_c pi_c sum_m lambda`.
    pub fn source_power(&self) -> f64 {
        self.eigenvalues
            .chunks_exact(self.n)
            .zip(&self.weights)
            .map(|(s, w)| w * s.iter().sum::<f64>())
            .sum::<f64>()
            / self.n as f64
    }

    /// Hash identifying this exact spectrum; allocations carry it.
    pub fn fingerprint(&self) -> u64 {
        let mut h = FnvHasher::default();
        h.write_u8(self.mode.code());
        h.write_u64(self.n as u64);
        for w in &self.weights {
            h.write_u64(w.to_bits());
        }
        for l in &self.eigenvalues {
            h.write_u64(l.to_bits());
        }
        h.finish()
    }
}

/// Per-mode allocation at a single global water level.
#[derive(Clone, Debug, PartialEq)]
pub struct RateAllocation {
    water_level: f64,
    n: usize,
    mode: FieldMode,
    distortions: Vec<f64>,
    rates: Vec<f64>,
    rate: f64,
    distortion: f64,
    fingerprint: u64,
}

impl RateAllocation {
    pub fn water_level(&self) -> f64 {
        self.water_level
    }

    pub fn mode(&self) -> FieldMode {
        self.mode
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `d*_{c,m} = min(lambda, mu)`.
    pub fn mode_distortion(&self, c: usize, m: usize) -> f64 {
        self.distortions[c * self.n + m]
    }

    /// `r*_{c,m}` in bits per dimension of mode `m`.
    pub fn mode_rate(&self, c: usize, m: usize) -> f64 {
        self.rates[c * self.n + m]
    }

    pub fn is_active(&self, c: usize, m: usize) -> bool {
        self.rates[c * self.n + m] > 0.0
    }

    /// Total rate, bits per dimension (`+inf` at `mu = 0` with positive spectrum).
    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn distortion(&self) -> f64 {
        self.distortion
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

/// A point on an RD curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub rate: f64,
    pub distortion: f64,
    pub nmse_db: f64,
}

impl RdPoint {
    pub fn new(rate: f64, distortion: f64, source_power: f64) -> Self {
        Self {
            rate,
            distortion,
            nmse_db: nmse_db(distortion, source_power),
        }
    }
}

pub fn nmse_db(distortion: f64, source_power: f64) -> f64 {
    10.0 * (distortion / source_power).log10()
}

/// How a curve point is specified. Everything resolves to a water level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum RdTarget {
    Distortion(f64),
    Rate(f64),
    WaterLevel(f64),
}

/// Closed-form allocation at water level `mu`.
pub fn waterfill_at_level(spec: &PooledSpectrum, mu: f64) -> Result<RateAllocation> {
    if !(mu >= 0.0) {
        return Err(GmtcError::InvalidArgument(format!("water level {mu} must be nonnegative")));
    }
    let factor = spec.mode.rate_factor();
    let mut distortions = Vec::with_capacity(spec.eigenvalues.len());
    let mut rates = Vec::with_capacity(spec.eigenvalues.len());
    let (mut rate, mut distortion) = (0.0, 0.0);
    for e in spec.entries() {
        let l = e.eigenvalue;
        let d = l.min(mu);
        let r = if l > mu { factor * (l / mu).log2() } else { 0.0 };
        distortion += e.weight * d;
        if r > 0.0 {
            rate += e.weight * r;
        }
        distortions.push(d);
        rates.push(r);
    }
    let n = spec.n as f64;
    Ok(RateAllocation {
        water_level: mu,
        n: spec.n,
        mode: spec.mode,
        distortions,
        rates,
        rate: rate / n,
        distortion: distortion / n,
        fingerprint: spec.fingerprint(),
    })
}

/// Finds the global water level meeting `target` by bisection.
pub fn solve_water_level(spec: &PooledSpectrum, target: RdTarget) -> Result<RateAllocation> {
    let top = spec.max_eigenvalue();
    match target {
        RdTarget::WaterLevel(mu) => waterfill_at_level(spec, mu),
        RdTarget::Distortion(d) => {
            let power = spec.source_power();
            if !(d > 0.0) || d > power * (1.0 + 1e-12) {
                return Err(GmtcError::InfeasibleTarget(format!(
                    "distortion {d} outside (0, {power}]"
                )));
            }
            if d >= power {
                return waterfill_at_level(spec, top);
            }
            bisect(spec, top, |a| {
                let gap = a.distortion - d;
                (gap.abs() <= BISECTION_TOL * d, gap < 0.0)
            })
        }
        RdTarget::Rate(r) => {
            if !(r >= 0.0) || !r.is_finite() {
                return Err(GmtcError::InfeasibleTarget(format!("rate {r} must be finite and >= 0")));
            }
            if r == 0.0 {
                return waterfill_at_level(spec, top);
            }
            if top == 0.0 {
                return Err(GmtcError::InfeasibleTarget(
                    "positive rate requested for an all-zero spectrum".into(),
                ));
            }
            bisect(spec, top, |a| {
                let gap = a.rate - r;
                (gap.abs() <= BISECTION_TOL * r, gap > 0.0)
            })
        }
    }
}

/// Bisection over `mu` in `(0, top (1 + 1e-12)]`; `probe` returns
/// `(converged, mu_too_small)`.
fn bisect(
    spec: &PooledSpectrum,
    top: f64,
    probe: impl Fn(&RateAllocation) -> (bool, bool),
) -> Result<RateAllocation> {
    let (mut lo, mut hi) = (0.0, top * (1.0 + 1e-12));
    let mut best = waterfill_at_level(spec, hi)?;
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        let a = waterfill_at_level(spec, mid)?;
        let (done, too_small) = probe(&a);
        best = a;
        if done || hi - lo <= f64::EPSILON * hi {
            break;
        }
        if too_small {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

/// `H(C) = -sum pi log2 pi` with `0 log 0 = 0`.
pub fn label_entropy(weights: &[f64]) -> f64 {
    weights
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.log2())
        .sum::<f64>()
        .max(0.0)
}

/// Amortised label rate `H(C) / (tau N)` in bits per dimension.
pub fn label_overhead(weights: &[f64], tau: usize, n: usize) -> f64 {
    label_entropy(weights) / (tau as f64 * n as f64)
}

/// `R_cond(D)` over a target grid; output order follows the grid.
pub fn conditional_rd_curve(dict: &TransformDictionary, grid: &[RdTarget]) -> Result<Vec<RdPoint>> {
    spectrum_rd_curve(&dict.pooled_spectrum(), grid)
}

/// The same curve for an explicit pooled spectrum.
pub fn spectrum_rd_curve(spec: &PooledSpectrum, grid: &[RdTarget]) -> Result<Vec<RdPoint>> {
    let power = spec.source_power();
    let points = grid
        .par_iter()
        .map(|&t| solve_water_level(spec, t).map(|a| RdPoint::new(a.rate, a.distortion, power)))
        .collect::<Result<Vec<_>>>()?;
    check_convex_nonincreasing(&points)?;
    Ok(points)
}

/// `R_GMTC(D) = R_cond(D) + H(C) / (tau N)`.
pub fn gmtc_upper_bound(dict: &TransformDictionary, grid: &[RdTarget], tau: usize) -> Result<Vec<RdPoint>> {
    if tau == 0 {
        return Err(GmtcError::InvalidArgument("tau must be at least 1".into()));
    }
    let shift = label_overhead(&dict.weights(), tau, dict.dim());
    Ok(conditional_rd_curve(dict, grid)?
        .into_iter()
        .map(|p| RdPoint { rate: p.rate + shift, ..p })
        .collect())
}

/// Checks that rate is nonincreasing and convex in distortion.
pub fn check_convex_nonincreasing(points: &[RdPoint]) -> Result<()> {
    let mut pts: Vec<RdPoint> = points.iter().filter(|p| p.rate.is_finite()).copied().collect();
    pts.sort_by(|a, b| a.distortion.total_cmp(&b.distortion));
    let scale = pts.iter().map(|p| p.distortion).fold(0.0, f64::max);
    pts.dedup_by(|b, a| (b.distortion - a.distortion).abs() <= 1e-9 * scale);
    for w in pts.windows(2) {
        if w[1].rate > w[0].rate + 1e-9 {
            return Err(GmtcError::InvariantViolation(format!(
                "rate increases with distortion: {:?} -> {:?}",
                w[0], w[1]
            )));
        }
    }
    let slopes: Vec<f64> = pts
        .windows(2)
        .map(|w| (w[1].rate - w[0].rate) / (w[1].distortion - w[0].distortion))
        .collect();
    for s in slopes.windows(2) {
        if s[1] < s[0] - 1e-9 * s[0].abs().max(1.0) {
            return Err(GmtcError::InvariantViolation(format!(
                "curve not convex: slopes {} then {}",
                s[0], s[1]
            )));
        }
    }
    Ok(())
}

/// Distortion of coding the true mixture with the KLT and waterfilling of a
/// single covariance at `rate`.
///
/// Each mismatched mode is modelled by its Gaussian test channel
/// `x_hat = a x + n`, `a = (lambda - mu) / lambda`, `Var n = a mu`, applied
/// to the true per-mode variance `v = diag(U^H R_c U)`. This gives
/// `(mu / lambda)^2 v + mu (1 - mu / lambda)` on active modes and `v` on
/// dropped ones; with `v = lambda` it reduces to `min(lambda, mu)`.
pub fn mismatched_tc_distortion(
    true_dict: &TransformDictionary,
    single_cov: &HermitianMatrix,
    rate: f64,
) -> Result<RdPoint> {
    let n = true_dict.dim();
    if single_cov.dim() != n {
        return Err(GmtcError::DimensionMismatch {
            expected: n,
            actual: single_cov.dim(),
        });
    }
    let eig = hermitian_eig(single_cov)?;
    let single = PooledSpectrum::new(true_dict.mode(), &[1.0], &[eig.eigenvalues().to_vec()])?;
    let alloc = solve_water_level(&single, RdTarget::Rate(rate))?;
    let mu = alloc.water_level();
    let mut total = 0.0;
    for comp in true_dict.components() {
        let v = comp.eig.reconstruct().congruence_diag(&eig);
        let d: f64 = v
            .iter()
            .zip(eig.eigenvalues())
            .map(|(&v, &l)| {
                if l > mu {
                    let s = mu / l;
                    s * s * v + mu * (1.0 - s)
                } else {
                    v
                }
            })
            .sum();
        total += comp.weight * d;
    }
    let distortion = total / n as f64;
    Ok(RdPoint::new(alloc.rate(), distortion, true_dict.pooled_spectrum().source_power()))
}
