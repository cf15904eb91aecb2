//! EM estimation of zero-mean Gaussian mixtures and the shared KLT dictionary.

use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rd::PooledSpectrum;
use crate::synth::log_sum_exp;
use crate::tensor::rng::{tags, StreamRng};
use crate::tensor::{
    check_dim, hermitian_eig, log_density_constant, whiten_score_unchecked, ComplexVectorBatch,
    EigenSystem, FieldMode, HermitianMatrix,
};
use crate::{Complex64, GmtcError, Result};

/// Samples per unit of parallel work; reductions run in chunk order.
const CHUNK: usize = 1024;
/// Chunks reduced per parallel wave, bounding peak memory for large K.
const WAVE: usize = 16;
/// Floor applied to eigenvalues when scoring during EM.
const EM_SCORE_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmInit {
    KMeansEnergy,
    RandomResponsibility,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub reg: f64,
    pub prune_below: f64,
    pub seed: u64,
    pub init: EmInit,
}

impl EmConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            max_iters: 300,
            tol: 1e-6,
            reg: 1e-6,
            prune_below: 1.0 / (50.0 * k.max(1) as f64),
            seed: 0,
            init: EmInit::KMeansEnergy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(GmtcError::InvalidArgument("k must be at least 1".into()));
        }
        if !(self.tol > 0.0) || !(self.reg >= 0.0) {
            return Err(GmtcError::InvalidArgument("need tol > 0 and reg >= 0".into()));
        }
        if !(self.prune_below >= 0.0 && self.prune_below < 1.0 / self.k as f64) {
            return Err(GmtcError::InvalidArgument(format!(
                "prune_below {} must lie in [0, 1/k)",
                self.prune_below
            )));
        }
        Ok(())
    }
}

/// Zero-mean Gaussian mixture with explicit covariances.
#[derive(Clone, Debug)]
pub struct MixtureModel {
    mode: FieldMode,
    weights: Vec<f64>,
    covariances: Vec<HermitianMatrix>,
    factors: OnceLock<Vec<EigenSystem>>,
}

impl PartialEq for MixtureModel {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode && self.weights == other.weights && self.covariances == other.covariances
    }
}

impl MixtureModel {
    pub fn new(mode: FieldMode, weights: Vec<f64>, covariances: Vec<HermitianMatrix>) -> Result<Self> {
        if weights.is_empty() || weights.len() != covariances.len() {
            return Err(GmtcError::InvalidArgument("need one weight per covariance".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(GmtcError::InvalidArgument("weights must be a positive simplex".into()));
        }
        let n = covariances[0].dim();
        for c in &covariances {
            check_dim(n, c.dim())?;
            if !(c.trace() > 0.0) {
                return Err(GmtcError::InvalidArgument("covariance trace must be positive".into()));
            }
        }
        Ok(Self {
            mode,
            weights,
            covariances,
            factors: OnceLock::new(),
        })
    }

    pub fn mode(&self) -> FieldMode {
        self.mode
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.covariances[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn covariances(&self) -> &[HermitianMatrix] {
        &self.covariances
    }

    /// Per-component eigensystems, computed once.
    pub fn factors(&self) -> Result<&[EigenSystem]> {
        if let Some(f) = self.factors.get() {
            return Ok(f);
        }
        let f = self
            .covariances
            .par_iter()
            .map(hermitian_eig)
            .collect::<Result<Vec<_>>>()?;
        Ok(self.factors.get_or_init(|| f))
    }

    /// Average log-likelihood per sample (nats).
    pub fn log_likelihood(&self, data: &ComplexVectorBatch) -> Result<f64> {
        check_dim(self.dim(), data.dim())?;
        if data.is_empty() {
            return Err(GmtcError::EmptyDataset);
        }
        let f = self.factors()?;
        let total: f64 = chunk_map(data, |_, h| {
            log_sum_exp(&log_scores(&self.weights, f, EM_SCORE_FLOOR, self.mode, h))
        })
        .iter()
        .sum();
        Ok(total / data.len() as f64 + log_density_constant(self.dim(), self.mode))
    }
}

/// `ln pi_c + whiten_score_c(h)` for every component.
pub(crate) fn log_scores(
    weights: &[f64],
    factors: &[EigenSystem],
    floor: f64,
    mode: FieldMode,
    h: &[Complex64],
) -> Vec<f64> {
    weights
        .iter()
        .zip(factors)
        .map(|(w, e)| w.ln() + whiten_score_unchecked(e, h, floor, mode))
        .collect()
}

fn normalize_log(scores: &[f64]) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(scores);
    let r: Vec<f64> = scores.iter().map(|s| (s - lse).exp()).collect();
    let t: f64 = r.iter().sum();
    (lse, r.into_iter().map(|x| x / t).collect())
}

/// Posterior `P(C = c | h)` under `model`.
pub fn responsibilities(model: &MixtureModel, h: &[Complex64]) -> Result<Vec<f64>> {
    check_dim(model.dim(), h.len())?;
    let f = model.factors()?;
    Ok(normalize_log(&log_scores(&model.weights, f, EM_SCORE_FLOOR, model.mode, h)).1)
}

/// Maps every sample in chunk order; the output is in sample order.
fn chunk_map<T: Send>(data: &ComplexVectorBatch, f: impl Fn(usize, &[Complex64]) -> T + Sync) -> Vec<T> {
    let n = data.dim();
    data.as_flat()
        .par_chunks(CHUNK * n)
        .enumerate()
        .flat_map_iter(|(ci, chunk)| {
            let f = &f;
            chunk
                .chunks_exact(n)
                .enumerate()
                .map(move |(j, h)| f(ci * CHUNK + j, h))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Weighted second-moment accumulator over the upper triangle.
#[derive(Clone)]
struct Moments {
    n: usize,
    weight: Vec<f64>,
    upper: Vec<Vec<Complex64>>,
}

impl Moments {
    fn new(k: usize, n: usize) -> Self {
        Self {
            n,
            weight: vec![0.0; k],
            upper: vec![vec![Complex64::new(0.0, 0.0); n * (n + 1) / 2]; k],
        }
    }

    fn add(&mut self, c: usize, r: f64, h: &[Complex64]) {
        self.weight[c] += r;
        let acc = &mut self.upper[c];
        let mut idx = 0;
        for i in 0..self.n {
            let hi = h[i] * r;
            for hj in &h[i..] {
                acc[idx] += hi * hj.conj();
                idx += 1;
            }
        }
    }

    fn merge(&mut self, other: &Self) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.upper.iter_mut().zip(&other.upper) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// `sum r h h^H / sum r` for component `c`.
    fn covariance(&self, c: usize) -> HermitianMatrix {
        let n = self.n;
        let w = self.weight[c];
        let mut full = vec![Complex64::new(0.0, 0.0); n * n];
        let mut idx = 0;
        for i in 0..n {
            for j in i..n {
                let v = self.upper[c][idx] / w;
                full[i * n + j] = v;
                full[j * n + i] = v.conj();
                idx += 1;
            }
        }
        HermitianMatrix::from_raw_symmetrized(n, full)
    }
}

/// Deterministic reduction of per-sample weights into moments.
fn accumulate(
    data: &ComplexVectorBatch,
    k: usize,
    weights_of: impl Fn(usize, &[Complex64]) -> Vec<(usize, f64)> + Sync,
) -> Moments {
    let n = data.dim();
    let chunks: Vec<&[Complex64]> = data.as_flat().chunks(CHUNK * n).collect();
    let mut total = Moments::new(k, n);
    for (wi, wave) in chunks.chunks(WAVE).enumerate() {
        let parts: Vec<Moments> = wave
            .par_iter()
            .enumerate()
            .map(|(ci, chunk)| {
                let base = (wi * WAVE + ci) * CHUNK;
                let mut m = Moments::new(k, n);
                for (j, h) in chunk.chunks_exact(n).enumerate() {
                    for (c, r) in weights_of(base + j, h) {
                        m.add(c, r, h);
                    }
                }
                m
            })
            .collect();
        for p in &parts {
            total.merge(p);
        }
    }
    total
}

/// Per-run record of an EM fit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    /// Average log-likelihood (nats per sample) of the model entering each iteration.
    pub log_likelihood: Vec<f64>,
    /// Indices `t` such that components were pruned between trace entries `t - 1` and `t`.
    pub prune_events: Vec<usize>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl EmTrace {
    /// Largest decrease between consecutive entries not separated by pruning.
    pub fn worst_decrease(&self) -> f64 {
        self.log_likelihood
            .windows(2)
            .enumerate()
            .filter(|(i, _)| !self.prune_events.contains(&(i + 1)))
            .map(|(_, w)| w[0] - w[1])
            .fold(0.0, f64::max)
    }
}

/// M-step with ridge and pruning. Returns `None` for components that collapsed.
fn m_step(moments: &Moments, count: usize, reg: f64, prune_below: f64, trace_floor: f64) -> (Vec<f64>, Vec<HermitianMatrix>) {
    let n = moments.n;
    let mut weights = Vec::new();
    let mut covs = Vec::new();
    for c in 0..moments.weight.len() {
        let pi = moments.weight[c] / count as f64;
        if !(pi > 0.0) || pi < prune_below || moments.weight[c] < 1e-12 {
            continue;
        }
        let mut r = moments.covariance(c);
        let tr = r.trace();
        if !(tr >= trace_floor) {
            continue;
        }
        r.add_ridge(reg * tr / n as f64);
        weights.push(pi);
        covs.push(r);
    }
    let t: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= t);
    (weights, covs)
}

/// Fits a `cfg.k`-component zero-mean mixture by EM.
pub fn em_fit(data: &ComplexVectorBatch, cfg: &EmConfig) -> Result<(MixtureModel, EmTrace)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(GmtcError::EmptyDataset);
    }
    let count = data.len();
    if count < 10 * cfg.k {
        return Err(GmtcError::InvalidArgument(format!(
            "{count} samples is fewer than 10 per component for k = {}",
            cfg.k
        )));
    }
    let mode = data.mode();
    let mut trace = EmTrace::default();
    if count < 100 * cfg.k {
        trace
            .warnings
            .push(format!("only {count} samples for k = {}; estimates may be poor", cfg.k));
    }
    let initial_trace = data.total_energy() / count as f64;
    let trace_floor = 1e-12 * initial_trace;

    let moments = match (cfg.k, cfg.init) {
        (1, _) => accumulate(data, 1, |_, _| vec![(0, 1.0)]),
        (k, EmInit::KMeansEnergy) => {
            let labels = kmeans_energy_init(data, k, cfg.seed)?.labels;
            accumulate(data, k, |i, _| vec![(labels[i], 1.0)])
        }
        (k, EmInit::RandomResponsibility) => accumulate(data, k, |i, _| {
            let mut rng = StreamRng::new(cfg.seed, tags::EM_INIT, i as u64);
            let r: Vec<f64> = (0..k).map(|_| rng.uniform_open0()).collect();
            let t: f64 = r.iter().sum();
            r.into_iter().enumerate().map(|(c, x)| (c, x / t)).collect()
        }),
    };
    let (weights, covs) = m_step(&moments, count, cfg.reg, cfg.prune_below, trace_floor);
    if weights.is_empty() {
        return Err(GmtcError::DegenerateFit("every component collapsed at initialisation".into()));
    }
    let mut model = MixtureModel::new(mode, weights, covs)?;

    for it in 0..cfg.max_iters.max(1) {
        let factors = model.factors()?;
        let k = model.k();
        let post: Vec<(f64, Vec<f64>)> =
            chunk_map(data, |_, h| normalize_log(&log_scores(&model.weights, factors, EM_SCORE_FLOOR, mode, h)));
        let ll = post.iter().map(|p| p.0).sum::<f64>() / count as f64 + log_density_constant(model.dim(), mode);
        if !ll.is_finite() {
            return Err(GmtcError::DegenerateFit(format!("log-likelihood became {ll}")));
        }
        if let Some(&prev) = trace.log_likelihood.last() {
            let pruned = trace.prune_events.last() == Some(&trace.log_likelihood.len());
            if !pruned && (ll - prev) / prev.abs().max(1e-300) < cfg.tol {
                trace.log_likelihood.push(ll);
                trace.converged = true;
                break;
            }
        }
        trace.log_likelihood.push(ll);
        if it + 1 == cfg.max_iters {
            break;
        }
        let moments = accumulate(data, k, |i, _| {
            post[i].1.iter().enumerate().filter(|(_, &r)| r > 1e-14).map(|(c, &r)| (c, r)).collect()
        });
        let (weights, covs) = m_step(&moments, count, cfg.reg, cfg.prune_below, trace_floor);
        if weights.is_empty() {
            return Err(GmtcError::DegenerateFit("every component collapsed".into()));
        }
        if weights.len() < k {
            trace.prune_events.push(trace.log_likelihood.len());
        }
        model = MixtureModel::new(mode, weights, covs)?;
    }
    Ok((model, trace))
}

/// Result of the k-means initialiser.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub objective: Vec<f64>,
}

/// Hard clustering of per-mode log-energy profiles.
///
/// Profiles are `ln(|u_m|^2 + eps_m)` with `u` the sample expressed in the
/// eigenbasis of the pooled sample covariance and `eps_m = 1e-3 lambda_m`.
/// For covariances sharing a common basis (e.g. circulant spectra), raw
/// coordinate energies carry no component information while these profiles do.
pub fn kmeans_energy_init(data: &ComplexVectorBatch, k: usize, seed: u64) -> Result<KMeansResult> {
    if data.is_empty() {
        return Err(GmtcError::EmptyDataset);
    }
    if k == 0 {
        return Err(GmtcError::InvalidArgument("k must be at least 1".into()));
    }
    let count = data.len();
    if k == 1 {
        return Ok(KMeansResult {
            labels: vec![0; count],
            objective: vec![],
        });
    }
    let n = data.dim();
    let global = accumulate(data, 1, |_, _| vec![(0, 1.0)]).covariance(0);
    let basis = hermitian_eig(&global)?;
    let top = basis.eigenvalues()[0].max(f64::MIN_POSITIVE);
    let eps: Vec<f64> = basis.eigenvalues().iter().map(|l| 1e-3 * l.max(1e-12 * top)).collect();
    let features: Vec<f64> = chunk_map(data, |_, h| {
        basis
            .analyze(h)
            .iter()
            .zip(&eps)
            .map(|(u, e)| (u.norm_sqr() + e).ln())
            .collect::<Vec<_>>()
    })
    .concat();
    let feat = |i: usize| &features[i * n..(i + 1) * n];
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    // k-means++ seeding
    let mut rng = StreamRng::new(seed, tags::KMEANS, 0);
    let mut centers: Vec<Vec<f64>> = vec![feat(rng.below(count)).to_vec()];
    let mut nearest: Vec<f64> = (0..count).into_par_iter().map(|i| dist2(feat(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            rng.categorical(&nearest.iter().map(|d| d / total).collect::<Vec<_>>())
        } else {
            rng.below(count)
        };
        let c = feat(pick).to_vec();
        nearest
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, d)| *d = d.min(dist2(feat(i), &c)));
        centers.push(c);
    }

    let assign = |centers: &[Vec<f64>]| -> Vec<(usize, f64)> {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let f = feat(i);
                let mut best = (0, f64::INFINITY);
                for (c, ctr) in centers.iter().enumerate() {
                    let d = dist2(f, ctr);
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                best
            })
            .collect()
    };
    let mut assignment = assign(&centers);
    let mut objective = Vec::new();
    for _ in 0..100 {
        let mut sums = vec![vec![0.0; n]; k];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assignment.iter().enumerate() {
            counts[c] += 1;
            sums[c].iter_mut().zip(feat(i)).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // re-seed an empty cluster at the worst-fit sample
                let (far, _) = assignment
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |b, (i, &(_, d))| if d > b.1 { (i, d) } else { b });
                centers[c] = feat(far).to_vec();
                assignment[far] = (c, 0.0);
            }
        }
        let next = assign(&centers);
        objective.push(next.iter().map(|a| a.1).sum());
        let changed = next.iter().zip(&assignment).any(|(a, b)| a.0 != b.0);
        assignment = next;
        if !changed {
            break;
        }
    }
    Ok(KMeansResult {
        labels: assignment.into_iter().map(|a| a.0).collect(),
        objective,
    })
}

/// One dictionary entry `(pi_c, U_c, Lambda_c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DictionaryComponent {
    pub weight: f64,
    pub eig: EigenSystem,
}

/// The shared transform dictionary.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformDictionary {
    mode: FieldMode,
    components: Vec<DictionaryComponent>,
    floor: f64,
}

impl TransformDictionary {
    /// Canonicalises the order (descending weight, then descending leading
    /// eigenvalue) and sets the scoring floor to `1e-10 max_c lambda_{c,1}`.
    pub fn from_components(mode: FieldMode, mut components: Vec<DictionaryComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(GmtcError::InvalidArgument("dictionary needs a component".into()));
        }
        let n = components[0].eig.dim();
        for c in &components {
            check_dim(n, c.eig.dim())?;
        }
        if components.iter().any(|c| !(c.weight > 0.0))
            || (components.iter().map(|c| c.weight).sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(GmtcError::InvalidArgument("weights must be a positive simplex".into()));
        }
        components.sort_by(|a, b| {
            b.weight
                .total_cmp(&a.weight)
                .then(b.eig.eigenvalues()[0].total_cmp(&a.eig.eigenvalues()[0]))
        });
        let top = components
            .iter()
            .map(|c| c.eig.eigenvalues()[0])
            .fold(0.0, f64::max);
        Ok(Self {
            mode,
            components,
            floor: 1e-10 * top,
        })
    }

    /// Rebuilds a dictionary with an explicit floor, requiring canonical order.
    pub fn from_parts(mode: FieldMode, components: Vec<DictionaryComponent>, floor: f64) -> Result<Self> {
        let d = Self::from_components(mode, components.clone())?;
        if d.components != components {
            return Err(GmtcError::Format("components are not in canonical order".into()));
        }
        if !(floor >= 0.0) {
            return Err(GmtcError::Format(format!("invalid floor {floor}")));
        }
        Ok(Self { floor, ..d })
    }

    pub fn mode(&self) -> FieldMode {
        self.mode
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].eig.dim()
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn components(&self) -> &[DictionaryComponent] {
        &self.components
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn pooled_spectrum(&self) -> PooledSpectrum {
        let spectra: Vec<Vec<f64>> = self.components.iter().map(|c| c.eig.eigenvalues().to_vec()).collect();
        PooledSpectrum::new(self.mode, &self.weights(), &spectra).expect("dictionary invariants")
    }

    /// `sum_c pi_c U_c Lambda_c U_c^H`.
    pub fn average_covariance(&self) -> HermitianMatrix {
        let n = self.dim();
        let mut acc = vec![Complex64::new(0.0, 0.0); n * n];
        for c in &self.components {
            for (a, r) in acc.iter_mut().zip(c.eig.reconstruct().as_slice()) {
                *a += r * c.weight;
            }
        }
        HermitianMatrix::from_raw_symmetrized(n, acc)
    }

    /// Model view of the dictionary that reuses these eigensystems.
    pub fn to_model(&self) -> Result<MixtureModel> {
        let model = MixtureModel::new(
            self.mode,
            self.weights(),
            self.components.iter().map(|c| c.eig.reconstruct()).collect(),
        )?;
        let _ = model.factors.set(self.components.iter().map(|c| c.eig.clone()).collect());
        Ok(model)
    }

    /// `ln pi_c + whiten_score_c(h)` with the dictionary floor.
    pub fn log_scores(&self, h: &[Complex64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), h.len())?;
        Ok(self
            .components
            .iter()
            .map(|c| c.weight.ln() + whiten_score_unchecked(&c.eig, h, self.floor, self.mode))
            .collect())
    }
}

/// Eigendecomposes every component and applies the canonical ordering.
pub fn build_dictionary(model: &MixtureModel) -> Result<TransformDictionary> {
    let comps = model
        .weights
        .iter()
        .zip(model.factors()?)
        .map(|(&weight, eig)| DictionaryComponent {
            weight,
            eig: eig.clone(),
        })
        .collect();
    TransformDictionary::from_components(model.mode, comps)
}
