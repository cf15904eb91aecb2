//! Dense complex/real linear algebra and sampling primitives.
//!
//! Everything is stored as [`Complex64`]; real-mode data simply carries zero
//! imaginary parts. Real symmetric matrices are Hermitian, and the Jacobi
//! rotations used here stay exactly real on real input, so one code path
//! serves both field modes.

pub mod rng;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Complex64, GmtcError, Result};
use rng::StreamRng;

/// Field of the source vectors. Fixed per dataset and model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldMode {
    Complex,
    Real,
}

impl FieldMode {
    /// Prefactor on `log2(lambda / mu)` in per-dimension rate formulas.
    pub fn rate_factor(self) -> f64 {
        match self {
            FieldMode::Complex => 1.0,
            FieldMode::Real => 0.5,
        }
    }

    /// Real scalars carried per source dimension.
    pub fn real_components(self) -> usize {
        match self {
            FieldMode::Complex => 2,
            FieldMode::Real => 1,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            FieldMode::Complex => 0,
            FieldMode::Real => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(FieldMode::Complex),
            1 => Ok(FieldMode::Real),
            other => Err(GmtcError::Format(format!("unknown field mode {other}"))),
        }
    }
}

/// A batch of `dim`-dimensional source vectors, stored sample-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexVectorBatch {
    mode: FieldMode,
    dim: usize,
    data: Vec<Complex64>,
}

impl ComplexVectorBatch {
    pub fn new(mode: FieldMode, dim: usize) -> Self {
        Self {
            mode,
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_flat(mode: FieldMode, dim: usize, data: Vec<Complex64>) -> Result<Self> {
        if dim == 0 {
            return Err(GmtcError::InvalidArgument("dimension must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(GmtcError::DimensionMismatch {
                expected: dim * (data.len() / dim + 1),
                actual: data.len(),
            });
        }
        let mut batch = Self { mode, dim, data };
        if mode == FieldMode::Real {
            batch.data.iter_mut().for_each(|z| z.im = 0.0);
        }
        Ok(batch)
    }

    pub fn from_real(dim: usize, values: &[f64]) -> Result<Self> {
        Self::from_flat(
            FieldMode::Real,
            dim,
            values.iter().map(|&x| Complex64::new(x, 0.0)).collect(),
        )
    }

    pub fn mode(&self) -> FieldMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, h: &[Complex64]) -> Result<()> {
        check_dim(self.dim, h.len())?;
        let start = self.data.len();
        self.data.extend_from_slice(h);
        if self.mode == FieldMode::Real {
            self.data[start..].iter_mut().for_each(|z| z.im = 0.0);
        }
        Ok(())
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, Complex64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[Complex64] {
        &self.data
    }

    /// Sum of squared norms over the batch.
    pub fn total_energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Rows `range` as a new batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            mode: self.mode,
            dim: self.dim,
            data: self.data[range.start * self.dim..range.end * self.dim].to_vec(),
        }
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(GmtcError::DimensionMismatch { expected, actual })
    }
}

/// Dense square matrix, row-major, Hermitian by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianMatrix {
    dim: usize,
    data: Vec<Complex64>,
}

impl HermitianMatrix {
    /// Wraps `data` after checking Hermitian symmetry, then symmetrises exactly.
    pub fn new(dim: usize, data: Vec<Complex64>) -> Result<Self> {
        check_dim(dim * dim, data.len())?;
        let mut m = Self { dim, data };
        let max_abs = m.max_abs();
        let asymmetry = m.asymmetry();
        let tolerance = 1e-10 * max_abs;
        if asymmetry > tolerance {
            return Err(GmtcError::NonHermitianInput {
                asymmetry,
                tolerance,
            });
        }
        m.symmetrize();
        Ok(m)
    }

    pub(crate) fn from_raw_symmetrized(dim: usize, data: Vec<Complex64>) -> Self {
        let mut m = Self { dim, data };
        m.symmetrize();
        m
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![Complex64::new(0.0, 0.0); dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let dim = values.len();
        let mut m = Self::zeros(dim);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * dim + i] = Complex64::new(v, 0.0);
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.dim + j]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.data[i * self.dim + i].re).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// max |A - A^H| over all entries.
    pub fn asymmetry(&self) -> f64 {
        let n = self.dim;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in i..n {
                let d = self.data[i * n + j] - self.data[j * n + i].conj();
                worst = worst.max(d.norm());
            }
        }
        worst
    }

    fn symmetrize(&mut self) {
        let n = self.dim;
        for i in 0..n {
            self.data[i * n + i].im = 0.0;
            for j in i + 1..n {
                let avg = (self.data[i * n + j] + self.data[j * n + i].conj()) * 0.5;
                self.data[i * n + j] = avg;
                self.data[j * n + i] = avg.conj();
            }
        }
    }

    /// `self + alpha * I`.
    pub fn add_ridge(&mut self, alpha: f64) {
        for i in 0..self.dim {
            self.data[i * self.dim + i].re += alpha;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|z| *z *= s);
    }

    /// `self += w * x x^H`.
    pub fn add_outer(&mut self, w: f64, x: &[Complex64]) {
        let n = self.dim;
        for i in 0..n {
            let xi = x[i] * w;
            let row = &mut self.data[i * n..(i + 1) * n];
            for (r, xj) in row.iter_mut().zip(x) {
                *r += xi * xj.conj();
            }
        }
    }

    pub fn sub_frobenius(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn mul_vec(&self, x: &[Complex64]) -> Vec<Complex64> {
        (0..self.dim)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `U^H A U` for a column-major unitary `U` (as stored by [`EigenSystem`]).
    pub fn congruence_diag(&self, eig: &EigenSystem) -> Vec<f64> {
        (0..self.dim)
            .map(|m| {
                let u = eig.column(m);
                let au = self.mul_vec(u);
                u.iter().zip(&au).map(|(a, b)| a.conj() * b).sum::<Complex64>().re
            })
            .collect()
    }

    pub fn is_real(&self) -> bool {
        self.data.iter().all(|z| z.im == 0.0)
    }
}

/// Eigenvalues in nonincreasing order with aligned unitary eigenvectors.
///
/// Eigenvectors are stored column-major: column `m` is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenSystem {
    eigenvalues: Vec<f64>,
    vectors: Vec<Complex64>,
}

impl EigenSystem {
    /// Builds from raw parts, sorting is the caller's responsibility.
    pub fn from_parts(eigenvalues: Vec<f64>, vectors: Vec<Complex64>) -> Result<Self> {
        let n = eigenvalues.len();
        check_dim(n * n, vectors.len())?;
        if eigenvalues.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(GmtcError::InvalidArgument(
                "eigenvalues must be finite and nonnegative".into(),
            ));
        }
        if eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return Err(GmtcError::InvalidArgument(
                "eigenvalues must be nonincreasing".into(),
            ));
        }
        Ok(Self {
            eigenvalues,
            vectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn column(&self, m: usize) -> &[Complex64] {
        let n = self.dim();
        &self.vectors[m * n..(m + 1) * n]
    }

    pub fn vectors_column_major(&self) -> &[Complex64] {
        &self.vectors
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// Analysis transform `U^H h`.
    pub fn analyze(&self, h: &[Complex64]) -> Vec<Complex64> {
        (0..self.dim())
            .map(|m| dot_conj(self.column(m), h))
            .collect()
    }

    /// Synthesis transform `U c`.
    pub fn synthesize(&self, coeffs: &[Complex64]) -> Vec<Complex64> {
        let n = self.dim();
        let mut out = vec![Complex64::new(0.0, 0.0); n];
        for (m, &c) in coeffs.iter().enumerate() {
            if c == Complex64::new(0.0, 0.0) {
                continue;
            }
            for (o, u) in out.iter_mut().zip(self.column(m)) {
                *o += u * c;
            }
        }
        out
    }

    /// `U diag(lambda) U^H`.
    pub fn reconstruct(&self) -> HermitianMatrix {
        let n = self.dim();
        let mut m = HermitianMatrix::zeros(n);
        for (k, &l) in self.eigenvalues.iter().enumerate() {
            if l > 0.0 {
                m.add_outer(l, self.column(k));
            }
        }
        m.symmetrize();
        m
    }
}

/// `sum_k conj(u_k) h_k`.
#[inline]
pub fn dot_conj(u: &[Complex64], h: &[Complex64]) -> Complex64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (a, b) in u.iter().zip(h) {
        re += a.re * b.re + a.im * b.im;
        im += a.re * b.im - a.im * b.re;
    }
    Complex64::new(re, im)
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a Hermitian (or real symmetric) matrix by cyclic
/// complex Jacobi rotations.
///
/// Eigenvalues below `1e-12 * lambda_1` are clamped to zero; the input is
/// assumed positive semidefinite. Each eigenvector is phase-normalised so its
/// first nonzero component is real and positive.
pub fn hermitian_eig(a: &HermitianMatrix) -> Result<EigenSystem> {
    let n = a.dim();
    let max_abs = a.max_abs();
    let asymmetry = a.asymmetry();
    if asymmetry > 1e-10 * max_abs {
        return Err(GmtcError::NonHermitianInput {
            asymmetry,
            tolerance: 1e-10 * max_abs,
        });
    }
    let mut w = a.as_slice().to_vec();
    // vt row p holds eigenvector column p
    let mut vt = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        vt[i * n + i] = Complex64::new(1.0, 0.0);
    }
    let frob = a.frobenius_norm();
    if frob > 0.0 {
        jacobi_sweeps(&mut w, &mut vt, n, frob);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w[j * n + j].re.total_cmp(&w[i * n + i].re));
    let lead = order.first().map(|&i| w[i * n + i].re).unwrap_or(0.0);
    let mut eigenvalues = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n * n);
    for &i in &order {
        let l = w[i * n + i].re;
        eigenvalues.push(if lead > 0.0 && l >= 1e-12 * lead { l } else { 0.0 });
        let mut col = vt[i * n..(i + 1) * n].to_vec();
        normalize_phase(&mut col);
        vectors.extend_from_slice(&col);
    }
    Ok(EigenSystem {
        eigenvalues,
        vectors,
    })
}

fn jacobi_sweeps(w: &mut [Complex64], vt: &mut [Complex64], n: usize, frob: f64) {
    let target = 1e-15 * frob;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| w[i * n + j].norm_sqr())
            .sum::<f64>()
            .sqrt();
        if off <= target {
            return;
        }
        for p in 0..n {
            for q in p + 1..n {
                rotate(w, vt, n, p, q);
            }
        }
    }
}

fn rotate(w: &mut [Complex64], vt: &mut [Complex64], n: usize, p: usize, q: usize) {
    let apq = w[p * n + q];
    let mag = apq.norm();
    if mag == 0.0 {
        return;
    }
    let app = w[p * n + p].re;
    let aqq = w[q * n + q].re;
    // negligible relative to both diagonal entries
    if mag < 1e-18 * (app.abs() + aqq.abs()) {
        w[p * n + q] = Complex64::new(0.0, 0.0);
        w[q * n + p] = Complex64::new(0.0, 0.0);
        return;
    }
    let phase = apq / mag;
    let theta = (aqq - app) / (2.0 * mag);
    let t = if theta.is_infinite() {
        0.0
    } else {
        theta.signum() / (theta.abs() + theta.hypot(1.0))
    };
    let t = if theta == 0.0 { 1.0 } else { t };
    let c = 1.0 / t.hypot(1.0);
    let s = t * c;
    let s_ph = phase * s; // s e^{i phi}
    let s_ph_conj = s_ph.conj(); // s e^{-i phi}

    // A <- A G (columns p, q)
    for k in 0..n {
        let akp = w[k * n + p];
        let akq = w[k * n + q];
        w[k * n + p] = akp * c - akq * s_ph_conj;
        w[k * n + q] = akp * s_ph + akq * c;
    }
    // A <- G^H A (rows p, q)
    for k in 0..n {
        let apk = w[p * n + k];
        let aqk = w[q * n + k];
        w[p * n + k] = apk * c - aqk * s_ph;
        w[q * n + k] = apk * s_ph_conj + aqk * c;
    }
    w[p * n + p] = Complex64::new(app - t * mag, 0.0);
    w[q * n + q] = Complex64::new(aqq + t * mag, 0.0);
    w[p * n + q] = Complex64::new(0.0, 0.0);
    w[q * n + p] = Complex64::new(0.0, 0.0);
    // V <- V G; rows of vt are columns of V
    let (head, tail) = vt.split_at_mut(q * n);
    let vp = &mut head[p * n..(p + 1) * n];
    let vq = &mut tail[..n];
    for (a, b) in vp.iter_mut().zip(vq.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = x * c - y * s_ph_conj;
        *b = x * s_ph + y * c;
    }
}

fn normalize_phase(col: &mut [Complex64]) {
    let norm = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    if let Some(k) = col.iter().position(|z| z.norm() > 1e-10 * norm) {
        let z = col[k];
        let rot = z.conj() / z.norm();
        if rot != Complex64::new(1.0, 0.0) {
            col.iter_mut().for_each(|x| *x *= rot);
        }
        col[k] = Complex64::new(col[k].re.abs(), 0.0);
    }
}

/// Draws `count` i.i.d. zero-mean Gaussian vectors with covariance
/// `U diag(lambda) U^H`. Sample `i` depends only on `(seed, i)`.
pub fn sample_gaussian(
    eig: &EigenSystem,
    count: usize,
    seed: u64,
    mode: FieldMode,
) -> ComplexVectorBatch {
    sample_gaussian_tagged(eig, count, seed, rng::tags::GAUSSIAN_SAMPLE, 0, mode)
}

pub(crate) fn sample_gaussian_tagged(
    eig: &EigenSystem,
    count: usize,
    seed: u64,
    tag: u64,
    first_index: u64,
    mode: FieldMode,
) -> ComplexVectorBatch {
    let n = eig.dim();
    let mut data = vec![Complex64::new(0.0, 0.0); n * count];
    data.par_chunks_mut(n.max(1))
        .enumerate()
        .for_each(|(i, out)| {
            let mut rng = StreamRng::new(seed, tag, first_index + i as u64);
            draw_into(eig, &mut rng, mode, out);
        });
    ComplexVectorBatch { mode, dim: n, data }
}

pub(crate) fn draw_into(eig: &EigenSystem, rng: &mut StreamRng, mode: FieldMode, out: &mut [Complex64]) {
    for (m, &l) in eig.eigenvalues().iter().enumerate() {
        if l <= 0.0 {
            continue;
        }
        let z = match mode {
            FieldMode::Complex => rng.complex_normal(),
            FieldMode::Real => Complex64::new(rng.standard_normal(), 0.0),
        } * l.sqrt();
        for (o, u) in out.iter_mut().zip(eig.column(m)) {
            *o += u * z;
        }
    }
    if mode == FieldMode::Real {
        out.iter_mut().for_each(|z| z.im = 0.0);
    }
}

/// Log-density of `h` under `N(0, U diag(lambda) U^H)` up to the additive
/// constant, with eigenvalues floored at `floor`.
///
/// Complex mode: `-sum ln l - sum |u|^2 / l`; real mode halves both terms.
pub fn whiten_score(eig: &EigenSystem, h: &[Complex64], floor: f64, mode: FieldMode) -> Result<f64> {
    check_dim(eig.dim(), h.len())?;
    Ok(whiten_score_unchecked(eig, h, floor, mode))
}

pub(crate) fn whiten_score_unchecked(eig: &EigenSystem, h: &[Complex64], floor: f64, mode: FieldMode) -> f64 {
    let mut logdet = 0.0;
    let mut quad = 0.0;
    for (m, &l) in eig.eigenvalues().iter().enumerate() {
        let lf = l.max(floor);
        logdet += lf.ln();
        let u = dot_conj(eig.column(m), h);
        quad += u.norm_sqr() / lf;
    }
    let s = -(logdet + quad);
    match mode {
        FieldMode::Complex => s,
        FieldMode::Real => 0.5 * s,
    }
}

/// Additive constant turning a [`whiten_score`] into a normalised log-density (nats).
pub fn log_density_constant(dim: usize, mode: FieldMode) -> f64 {
    let pi = std::f64::consts::PI;
    match mode {
        FieldMode::Complex => -(dim as f64) * pi.ln(),
        FieldMode::Real => -0.5 * dim as f64 * (2.0 * pi).ln(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_psd(n: usize, seed: u64, mode: FieldMode) -> HermitianMatrix {
        let mut rng = StreamRng::new(seed, rng::tags::TEST, 0);
        let b: Vec<Complex64> = (0..n * n)
            .map(|_| match mode {
                FieldMode::Complex => rng.complex_normal(),
                FieldMode::Real => c(rng.standard_normal(), 0.0),
            })
            .collect();
        let mut m = HermitianMatrix::zeros(n);
        for j in 0..n {
            let col: Vec<Complex64> = (0..n).map(|i| b[i * n + j]).collect();
            m.add_outer(1.0, &col);
        }
        m.symmetrize();
        m
    }

    fn assert_eig_invariants(a: &HermitianMatrix, e: &EigenSystem) {
        let n = a.dim();
        let rec = e.reconstruct();
        let rel = rec.sub_frobenius(a) / a.frobenius_norm().max(1e-300);
        assert!(rel < 1e-8, "reconstruction error {rel}");
        for i in 0..n {
            for j in 0..n {
                let g = dot_conj(e.column(i), e.column(j));
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((g - c(target, 0.0)).norm() < 1e-10, "U^H U [{i},{j}] = {g}");
            }
        }
        assert!(e.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
        assert!(e.eigenvalues().iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn identity_eigensystem() {
        let a = HermitianMatrix::identity(4);
        let e = hermitian_eig(&a).unwrap();
        assert_eq!(e.eigenvalues(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eig_invariants(&a, &e);
    }

    #[test]
    fn real_diagonal_is_sorted_permutation() {
        let a = HermitianMatrix::diagonal(&[1.0, 3.0]);
        let e = hermitian_eig(&a).unwrap();
        assert_eq!(e.eigenvalues(), &[3.0, 1.0]);
        assert_eq!(e.column(0), &[c(0.0, 0.0), c(1.0, 0.0)]);
        assert_eq!(e.column(1), &[c(1.0, 0.0), c(0.0, 0.0)]);
    }

    #[test]
    fn rejects_non_hermitian() {
        let data = vec![c(1.0, 0.0), c(2.0, 1.0), c(2.0, 1.0), c(1.0, 0.0)];
        assert!(matches!(
            HermitianMatrix::new(2, data),
            Err(GmtcError::NonHermitianInput { .. })
        ));
    }

    #[test]
    fn complex_and_real_random_round_trip() {
        for (seed, mode) in [(1, FieldMode::Complex), (2, FieldMode::Real), (3, FieldMode::Complex)] {
            let a = random_psd(12, seed, mode);
            let e = hermitian_eig(&a).unwrap();
            assert_eig_invariants(&a, &e);
            let rel = (e.trace() - a.trace()).abs() / a.trace();
            assert!(rel < 1e-10);
            if mode == FieldMode::Real {
                assert!(e.vectors_column_major().iter().all(|z| z.im == 0.0));
            }
        }
    }

    #[test]
    fn rank_deficient_clamps_to_zero() {
        let mut a = HermitianMatrix::zeros(5);
        a.add_outer(2.0, &[c(1.0, 0.0), c(0.0, 1.0), c(1.0, 1.0), c(0.0, 0.0), c(0.5, -0.5)]);
        let e = hermitian_eig(&a).unwrap();
        assert!(e.eigenvalues()[0] > 0.0);
        assert!(e.eigenvalues()[1..].iter().all(|&l| l == 0.0));
        assert_eig_invariants(&a, &e);
    }

    #[test]
    fn eig_is_deterministic_and_phase_normalised() {
        let a = random_psd(9, 5, FieldMode::Complex);
        let e1 = hermitian_eig(&a).unwrap();
        let e2 = hermitian_eig(&a).unwrap();
        assert_eq!(e1, e2);
        for m in 0..9 {
            let first = e1.column(m).iter().find(|z| z.norm() > 1e-10).unwrap();
            assert_eq!(first.im, 0.0);
            assert!(first.re > 0.0);
        }
    }

    #[test]
    fn zero_variance_samples_are_zero() {
        let e = EigenSystem::from_parts(vec![0.0; 3], hermitian_eig(&HermitianMatrix::identity(3)).unwrap().vectors).unwrap();
        let b = sample_gaussian(&e, 10, 1, FieldMode::Complex);
        assert!(b.as_flat().iter().all(|z| *z == c(0.0, 0.0)));
    }

    #[test]
    fn scalar_variance_law() {
        let e = EigenSystem::from_parts(vec![2.0], vec![c(1.0, 0.0)]).unwrap();
        let b = sample_gaussian(&e, 100_000, 3, FieldMode::Complex);
        let p = b.total_energy() / b.len() as f64;
        assert!((1.9..=2.1).contains(&p), "E|h|^2 = {p}");
    }

    #[test]
    fn sample_covariance_matches_target() {
        let a = random_psd(4, 8, FieldMode::Complex);
        let e = hermitian_eig(&a).unwrap();
        let b = sample_gaussian(&e, 100_000, 4, FieldMode::Complex);
        let mut s = HermitianMatrix::zeros(4);
        for h in b.iter() {
            s.add_outer(1.0 / b.len() as f64, h);
        }
        let rel = s.sub_frobenius(&a) / a.frobenius_norm();
        assert!(rel < 0.05, "relative Frobenius error {rel}");
    }

    #[test]
    fn sampling_is_deterministic_and_prefix_stable() {
        let e = hermitian_eig(&random_psd(3, 2, FieldMode::Real)).unwrap();
        let a = sample_gaussian(&e, 50, 9, FieldMode::Real);
        let b = sample_gaussian(&e, 80, 9, FieldMode::Real);
        assert_eq!(a.as_flat(), &b.as_flat()[..150]);
        assert!(b.as_flat().iter().all(|z| z.im == 0.0));
    }

    #[test]
    fn whiten_score_edge_cases() {
        let e = EigenSystem::from_parts(vec![1.0], vec![c(1.0, 0.0)]).unwrap();
        let s = whiten_score(&e, &[c(1.0, 0.0)], 1e-12, FieldMode::Complex).unwrap();
        assert!((s + 1.0).abs() < 1e-15);

        let e = EigenSystem::from_parts(vec![4.0, 2.0, 0.0], hermitian_eig(&HermitianMatrix::identity(3)).unwrap().vectors).unwrap();
        let s = whiten_score(&e, &[c(0.0, 0.0); 3], 0.5, FieldMode::Complex).unwrap();
        assert!((s + (4.0f64.ln() + 2.0f64.ln() + 0.5f64.ln())).abs() < 1e-14);
        assert!(matches!(
            whiten_score(&e, &[c(0.0, 0.0); 2], 0.5, FieldMode::Complex),
            Err(GmtcError::DimensionMismatch { .. })
        ));
    }
}
