//! Geometry-induced covariances and synthetic Gaussian-mixture datasets.
//!
//! Stacking convention: `h = vec(H)` with `H = sum_l g_l b(tau_l) a(theta_l)^T`,
//! which puts `h = a(theta) ⊗ b(tau)`; entry `(antenna m, subcarrier n)` sits at
//! index `m * n_sc + n`.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::tensor::rng::{tags, StreamRng};
use crate::tensor::{
    draw_into, hermitian_eig, log_density_constant, whiten_score_unchecked, ComplexVectorBatch,
    EigenSystem, FieldMode, HermitianMatrix,
};
use crate::{Complex64, GmtcError, Result};

/// Largest source dimension accepted by [`geometry_covariance`].
pub const DEFAULT_MAX_DIM: usize = 4096;

/// One dominant propagation path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathGeometry {
    /// Angle of departure in radians, within [-pi/2, pi/2].
    pub angle: f64,
    /// Delay in seconds.
    pub delay: f64,
    /// Average path power.
    pub power: f64,
}

impl PathGeometry {
    pub fn new(angle: f64, delay: f64, power: f64) -> Result<Self> {
        if !(power >= 0.0) || !(delay >= 0.0) || !(-PI / 2.0..=PI / 2.0).contains(&angle) {
            return Err(GmtcError::InvalidArgument(format!(
                "invalid path geometry (angle {angle}, delay {delay}, power {power})"
            )));
        }
        Ok(Self {
            angle,
            delay,
            power,
        })
    }
}

/// Uniform linear array with `n_tx` antennas over `n_sc` subcarriers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArrayConfig {
    pub n_tx: usize,
    pub n_sc: usize,
    /// Subcarrier spacing in hertz.
    pub spacing: f64,
}

impl ArrayConfig {
    pub fn dim(&self) -> usize {
        self.n_tx * self.n_sc
    }
}

/// Half-wavelength ULA response: entry `m` is `exp(j pi m sin(theta))`.
pub fn steering_vector(theta: f64, n_tx: usize) -> Vec<Complex64> {
    let s = theta.sin();
    (0..n_tx)
        .map(|m| Complex64::from_polar(1.0, PI * m as f64 * s))
        .collect()
}

/// Frequency response across subcarriers: entry `n` is `exp(-j 2 pi n spacing tau)`.
pub fn delay_vector(tau: f64, n_sc: usize, spacing: f64) -> Vec<Complex64> {
    (0..n_sc)
        .map(|n| Complex64::from_polar(1.0, -2.0 * PI * n as f64 * spacing * tau))
        .collect()
}

/// `a ⊗ b` with `a` as the outer (slow) index.
pub fn kron(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    a.iter()
        .flat_map(|x| b.iter().map(move |y| x * y))
        .collect()
}

/// `R = sum_l gamma_l (a a^H) ⊗ (b b^H)`.
pub fn geometry_covariance(paths: &[PathGeometry], cfg: &ArrayConfig) -> Result<HermitianMatrix> {
    geometry_covariance_with_limit(paths, cfg, DEFAULT_MAX_DIM)
}

pub fn geometry_covariance_with_limit(
    paths: &[PathGeometry],
    cfg: &ArrayConfig,
    max_dim: usize,
) -> Result<HermitianMatrix> {
    if paths.is_empty() {
        return Err(GmtcError::InvalidArgument("at least one path is required".into()));
    }
    let n = cfg.dim();
    if n > max_dim {
        return Err(GmtcError::DimensionOverflow { dim: n, max: max_dim });
    }
    if n == 0 {
        return Err(GmtcError::InvalidArgument("array has no elements".into()));
    }
    let mut r = HermitianMatrix::zeros(n);
    for p in paths {
        let v = kron(
            &steering_vector(p.angle, cfg.n_tx),
            &delay_vector(p.delay, cfg.n_sc, cfg.spacing),
        );
        r.add_outer(p.power, &v);
    }
    Ok(HermitianMatrix::from_raw_symmetrized(n, r.as_slice().to_vec()))
}

/// Unitary DFT basis carrying the given spectrum, sorted nonincreasing.
///
/// Column `k` of the basis is `exp(-j 2 pi j k / n) / sqrt(n)`.
pub fn dft_eigensystem(n: usize, eigenvalues: &[f64]) -> Result<EigenSystem> {
    if eigenvalues.len() != n {
        return Err(GmtcError::DimensionMismatch {
            expected: n,
            actual: eigenvalues.len(),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eigenvalues[j].total_cmp(&eigenvalues[i]));
    let scale = 1.0 / (n as f64).sqrt();
    let mut vectors = Vec::with_capacity(n * n);
    for &k in &order {
        for j in 0..n {
            // reduce the exponent mod n to keep the phase argument small
            let e = (j * k) % n;
            vectors.push(Complex64::from_polar(scale, -2.0 * PI * e as f64 / n as f64));
        }
    }
    let sorted = order.iter().map(|&k| eigenvalues[k]).collect();
    EigenSystem::from_parts(sorted, vectors)
}

/// Log-uniform spectra `10^delta`, `delta ~ Unif[lo, hi]`, one row per component.
pub fn log_uniform_spectra(k: usize, n: usize, lo: f64, hi: f64, seed: u64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| {
            let mut rng = StreamRng::new(seed, tags::SPECTRUM, c as u64);
            (0..n)
                .map(|_| 10f64.powf(rng.uniform_range(lo, hi)))
                .collect()
        })
        .collect()
}

/// Random path geometries for regime `index`: angles uniform in
/// [-pi/2, pi/2], delays uniform in [0, max_delay], log-uniform powers
/// normalised to unit total.
pub fn random_geometry(paths: usize, max_delay: f64, seed: u64, index: u64) -> Vec<PathGeometry> {
    let mut rng = StreamRng::new(seed, tags::GEOMETRY, index);
    let mut out: Vec<PathGeometry> = (0..paths)
        .map(|_| PathGeometry {
            angle: rng.uniform_range(-PI / 2.0, PI / 2.0),
            delay: rng.uniform_range(0.0, max_delay),
            power: 10f64.powf(rng.uniform_range(-1.0, 1.0)),
        })
        .collect();
    let total: f64 = out.iter().map(|p| p.power).sum();
    out.iter_mut().for_each(|p| p.power /= total);
    out
}

/// Where a mixture component's covariance comes from.
#[derive(Clone, Debug)]
pub enum CovarianceSource {
    Geometry(Vec<PathGeometry>, ArrayConfig),
    Eigen(EigenSystem),
}

/// A fully specified zero-mean Gaussian mixture for data generation.
#[derive(Clone, Debug)]
pub struct MixtureSpec {
    mode: FieldMode,
    weights: Vec<f64>,
    components: Vec<EigenSystem>,
}

impl MixtureSpec {
    pub fn new(mode: FieldMode, weights: Vec<f64>, sources: Vec<CovarianceSource>) -> Result<Self> {
        if weights.is_empty() || weights.len() != sources.len() {
            return Err(GmtcError::InvalidArgument(
                "need one positive weight per component".into(),
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(GmtcError::InvalidArgument("weights must form a simplex".into()));
        }
        let components = sources
            .into_iter()
            .map(|s| match s {
                CovarianceSource::Eigen(e) => Ok(e),
                CovarianceSource::Geometry(paths, cfg) => {
                    hermitian_eig(&geometry_covariance(&paths, &cfg)?)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if mode == FieldMode::Real
            && components
                .iter()
                .any(|e| e.vectors_column_major().iter().any(|z| z.im.abs() > 1e-12 * z.norm().max(1.0)))
        {
            return Err(GmtcError::InvalidArgument("real-mode components need real eigenvectors".into()));
        }
        let n = components[0].dim();
        if let Some(bad) = components.iter().find(|e| e.dim() != n) {
            return Err(GmtcError::DimensionMismatch {
                expected: n,
                actual: bad.dim(),
            });
        }
        Ok(Self {
            mode,
            weights,
            components,
        })
    }

    pub fn mode(&self) -> FieldMode {
        self.mode
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[EigenSystem] {
        &self.components
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// Average source power per dimension, `(1/N) sum_c pi_c tr R_c`.
    pub fn power_per_dim(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, e)| w * e.trace())
            .sum::<f64>()
            / self.dim() as f64
    }
}

/// Uniform-weight mixture on a shared DFT basis with log-uniform spectra in
/// `[10^-2, 10^2]`, the synthetic validation protocol.
pub fn dft_log_uniform_mixture(k: usize, n: usize, seed: u64) -> Result<MixtureSpec> {
    let spectra = log_uniform_spectra(k, n, -2.0, 2.0, seed);
    let sources = spectra
        .iter()
        .map(|l| dft_eigensystem(n, l).map(CovarianceSource::Eigen))
        .collect::<Result<Vec<_>>>()?;
    MixtureSpec::new(FieldMode::Complex, vec![1.0 / k as f64; k], sources)
}

/// Uniform-weight mixture of `k` random multipath regimes on `cfg`.
pub fn geometry_mixture(k: usize, cfg: ArrayConfig, paths: usize, max_delay: f64, seed: u64) -> Result<MixtureSpec> {
    if k == 0 || paths == 0 {
        return Err(GmtcError::InvalidArgument("need at least one regime and one path".into()));
    }
    let sources = (0..k)
        .map(|c| CovarianceSource::Geometry(random_geometry(paths, max_delay, seed, c as u64), cfg))
        .collect();
    MixtureSpec::new(FieldMode::Complex, vec![1.0 / k as f64; k], sources)
}

/// Real-mode mixture describing real-stacked samples of a complex mixture.
/// Component covariances become `(1/2) [[Re R, -Im R], [Im R, Re R]]`.
pub fn real_stacked_spec(spec: &MixtureSpec) -> Result<MixtureSpec> {
    if spec.mode == FieldMode::Real {
        return Ok(spec.clone());
    }
    let n = spec.dim();
    let sources = spec
        .components
        .iter()
        .map(|e| {
            let r = e.reconstruct();
            let mut out = vec![Complex64::new(0.0, 0.0); 4 * n * n];
            for i in 0..n {
                for j in 0..n {
                    let z = r.get(i, j) * 0.5;
                    out[i * 2 * n + j] = Complex64::new(z.re, 0.0);
                    out[i * 2 * n + j + n] = Complex64::new(-z.im, 0.0);
                    out[(i + n) * 2 * n + j] = Complex64::new(z.im, 0.0);
                    out[(i + n) * 2 * n + j + n] = Complex64::new(z.re, 0.0);
                }
            }
            Ok(CovarianceSource::Eigen(hermitian_eig(&HermitianMatrix::new(2 * n, out)?)?))
        })
        .collect::<Result<Vec<_>>>()?;
    MixtureSpec::new(FieldMode::Real, spec.weights.clone(), sources)
}

/// Draws `n_samples` from the mixture, returning samples and their labels.
///
/// Labels and Gaussian draws come from separate per-sample streams, so a
/// longer dataset extends a shorter one with the same seed.
pub fn synth_mixture_dataset(
    spec: &MixtureSpec,
    n_samples: usize,
    seed: u64,
) -> (ComplexVectorBatch, Vec<usize>) {
    let n = spec.dim();
    let labels: Vec<usize> = (0..n_samples)
        .into_par_iter()
        .map(|i| StreamRng::new(seed, tags::MIXTURE_LABEL, i as u64).categorical(&spec.weights))
        .collect();
    let mut data = vec![Complex64::new(0.0, 0.0); n * n_samples];
    data.par_chunks_mut(n)
        .zip(labels.par_iter())
        .enumerate()
        .for_each(|(i, (out, &c))| {
            let mut rng = StreamRng::new(seed, tags::MIXTURE_SAMPLE, i as u64);
            draw_into(&spec.components[c], &mut rng, spec.mode, out);
        });
    let batch = ComplexVectorBatch::from_flat(spec.mode, n, data).expect("consistent dimensions");
    (batch, labels)
}

/// Numerically stable `ln sum exp(x_i)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Natural-log density of the mixture at `h`.
pub fn mixture_log_density(spec: &MixtureSpec, h: &[Complex64]) -> f64 {
    let terms: Vec<f64> = spec
        .weights
        .iter()
        .zip(&spec.components)
        .map(|(w, e)| w.ln() + whiten_score_unchecked(e, h, f64::MIN_POSITIVE, spec.mode))
        .collect();
    log_sum_exp(&terms) + log_density_constant(spec.dim(), spec.mode)
}

/// `h(x | C)` in bits.
pub fn conditional_entropy_bits(spec: &MixtureSpec) -> f64 {
    let n = spec.dim() as f64;
    let e = std::f64::consts::E;
    spec.weights
        .iter()
        .zip(&spec.components)
        .map(|(w, comp)| {
            let log_det: f64 = comp.eigenvalues().iter().map(|l| l.log2()).sum();
            w * match spec.mode {
                FieldMode::Complex => n * (PI * e).log2() + log_det,
                FieldMode::Real => 0.5 * (n * (2.0 * PI * e).log2() + log_det),
            }
        })
        .sum()
}

/// Plug-in Monte-Carlo estimate of the mixture differential entropy in bits.
#[derive(Clone, Copy, Debug)]
pub struct EntropyEstimate {
    pub bits: f64,
    pub std_error: f64,
}

pub fn mixture_entropy_mc(spec: &MixtureSpec, samples: &ComplexVectorBatch) -> Result<EntropyEstimate> {
    if samples.is_empty() {
        return Err(GmtcError::EmptyDataset);
    }
    let ln2 = std::f64::consts::LN_2;
    let vals: Vec<f64> = samples
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|h| -mixture_log_density(spec, h) / ln2)
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(EntropyEstimate {
        bits: mean,
        std_error: (var / n).sqrt(),
    })
}
