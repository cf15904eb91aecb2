//! RD sweeps shared by the command line and the acceptance suite.

use serde::Serialize;

use crate::codec::{evaluate_batch, EncoderConfig, LabelSource};
use crate::fit::{DictionaryComponent, TransformDictionary};
use crate::rd::{label_overhead, nmse_db, solve_water_level, RdTarget};
use crate::synth::MixtureSpec;
use crate::tensor::ComplexVectorBatch;
use crate::{GmtcError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TheoryPoint {
    pub distortion: f64,
    pub nmse_db: f64,
    #[serde(rename = "R_cond")]
    pub r_cond: f64,
    #[serde(rename = "R_gmtc_upper")]
    pub r_gmtc_upper: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EmpiricalPoint {
    pub rate_bits_per_dim: f64,
    pub mse: f64,
    pub nmse_db: f64,
    pub label_bits_per_dim: f64,
    pub map_accuracy: Option<f64>,
    pub predicted_bits_per_dim: f64,
    /// `R_cond(mse)` of the coding dictionary; the realized rate may not fall below it.
    pub r_cond_at_mse: f64,
    pub encoder_ops_per_block: f64,
    pub map_ops_per_block: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub target: RdTarget,
    pub water_level: f64,
    pub theoretical: TheoryPoint,
    pub empirical: Option<EmpiricalPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Curve {
    pub scheme: String,
    pub k: usize,
    pub dim: usize,
    pub tau: usize,
    /// `H(C) / (tau N)`.
    pub label_overhead: f64,
    pub points: Vec<SweepPoint>,
}

fn theory(cfg: &EncoderConfig) -> TheoryPoint {
    let a = cfg.allocation();
    let spec = cfg.dict().pooled_spectrum();
    let shift = label_overhead(&cfg.dict().weights(), cfg.tau(), cfg.dict().dim());
    TheoryPoint {
        distortion: a.distortion(),
        nmse_db: nmse_db(a.distortion(), spec.source_power()),
        r_cond: a.rate(),
        r_gmtc_upper: a.rate() + shift,
    }
}

/// `R_cond(d)` of `dict`, zero at or above the source power.
pub fn r_cond_at(dict: &TransformDictionary, d: f64) -> Result<f64> {
    let spec = dict.pooled_spectrum();
    if d >= spec.source_power() {
        return Ok(0.0);
    }
    if !(d > 0.0) {
        return Ok(f64::INFINITY);
    }
    Ok(solve_water_level(&spec, RdTarget::Distortion(d))?.rate())
}

/// Distortion promised by the GMTC upper bound at total rate `rate`.
pub fn gmtc_predicted_distortion(dict: &TransformDictionary, rate: f64, tau: usize) -> Result<f64> {
    let spec = dict.pooled_spectrum();
    let rq = rate - label_overhead(&dict.weights(), tau, dict.dim());
    if rq <= 0.0 {
        return Ok(spec.source_power());
    }
    Ok(solve_water_level(&spec, RdTarget::Rate(rq))?.distortion())
}

/// Theoretical curve only: each grid target resolves to a water level.
pub fn bound_curve(scheme: &str, dict: &TransformDictionary, grid: &[RdTarget], tau: usize) -> Result<Curve> {
    let points = grid
        .iter()
        .map(|&t| {
            let cfg = EncoderConfig::for_target(dict.clone(), t, tau)?;
            Ok(SweepPoint {
                target: t,
                water_level: cfg.allocation().water_level(),
                theoretical: theory(&cfg),
                empirical: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Curve {
        scheme: scheme.to_string(),
        k: dict.k(),
        dim: dict.dim(),
        tau,
        label_overhead: label_overhead(&dict.weights(), tau, dict.dim()),
        points,
    })
}

/// Codes `data` at every grid target. Rate targets are total budgets
/// including label bits.
pub fn coded_curve(
    scheme: &str,
    dict: &TransformDictionary,
    grid: &[RdTarget],
    tau: usize,
    data: &ComplexVectorBatch,
    labels: LabelSource,
    truth: Option<&[usize]>,
) -> Result<Curve> {
    let mut curve = bound_curve(scheme, dict, grid, tau)?;
    for p in curve.points.iter_mut() {
        let cfg = EncoderConfig::for_target(dict.clone(), p.target, tau)?;
        let (rep, _) = evaluate_batch(&cfg, data, labels, truth)?;
        p.empirical = Some(EmpiricalPoint {
            rate_bits_per_dim: rep.rate_bits_per_dim,
            mse: rep.mse,
            nmse_db: rep.nmse_db,
            label_bits_per_dim: rep.label_bits_per_dim,
            map_accuracy: rep.map_accuracy,
            predicted_bits_per_dim: rep.predicted_bits_per_dim,
            r_cond_at_mse: r_cond_at(dict, rep.mse)?,
            encoder_ops_per_block: rep.ops.encoder_ops() as f64 / rep.blocks as f64,
            map_ops_per_block: rep.ops.map as f64 / rep.blocks as f64,
        });
    }
    Ok(curve)
}

/// Fails if any coded point's realized rate lies below `R_cond(mse)`.
pub fn check_rate_bound(curve: &Curve) -> Result<()> {
    for p in &curve.points {
        if let Some(e) = p.empirical {
            if e.rate_bits_per_dim < e.r_cond_at_mse {
                return Err(GmtcError::InvariantViolation(format!(
                    "{}: realized rate {} below R_cond(D_emp) = {}",
                    curve.scheme, e.rate_bits_per_dim, e.r_cond_at_mse
                )));
            }
        }
    }
    Ok(())
}

/// `(rate, nmse_db)` pairs of the coded points, sorted by rate.
pub fn empirical_pairs(curve: &Curve) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = curve
        .points
        .iter()
        .filter_map(|p| p.empirical.map(|e| (e.rate_bits_per_dim, e.nmse_db)))
        .collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

/// Piecewise-linear NMSE (dB) at `rate`; `None` outside the sampled range.
pub fn interpolate_at_rate(pairs: &[(f64, f64)], rate: f64) -> Option<f64> {
    let i = pairs.windows(2).position(|w| w[0].0 <= rate && rate <= w[1].0)?;
    let (a, b) = (pairs[i], pairs[i + 1]);
    if b.0 == a.0 {
        return Some(a.1.min(b.1));
    }
    Some(a.1 + (b.1 - a.1) * (rate - a.0) / (b.0 - a.0))
}

/// One CSV row per point across all curves.
pub fn curves_csv(curves: &[Curve]) -> String {
    let mut s = String::from(
        "scheme,k,dim,tau,target_kind,target,water_level,r_cond,r_gmtc_upper,theory_distortion,theory_nmse_db,\
         rate_bits_per_dim,mse,nmse_db,label_bits_per_dim,map_accuracy,r_cond_at_mse\n",
    );
    for c in curves {
        for p in &c.points {
            let (kind, target) = match p.target {
                RdTarget::Rate(r) => ("rate", r),
                RdTarget::Distortion(d) => ("distortion", d),
                RdTarget::WaterLevel(m) => ("water_level", m),
            };
            let t = &p.theoretical;
            s.push_str(&format!(
                "{},{},{},{},{kind},{target},{},{},{},{},{}",
                c.scheme, c.k, c.dim, c.tau, p.water_level, t.r_cond, t.r_gmtc_upper, t.distortion, t.nmse_db
            ));
            match p.empirical {
                Some(e) => s.push_str(&format!(
                    ",{},{},{},{},{},{}\n",
                    e.rate_bits_per_dim,
                    e.mse,
                    e.nmse_db,
                    e.label_bits_per_dim,
                    e.map_accuracy.map(|a| a.to_string()).unwrap_or_default(),
                    e.r_cond_at_mse
                )),
                None => s.push_str(",,,,,,\n"),
            }
        }
    }
    s
}

/// Ground-truth dictionary of a synthetic mixture, and the map from the
/// mixture's component index to the dictionary's canonical index.
pub fn oracle_dictionary(spec: &MixtureSpec) -> Result<(TransformDictionary, Vec<usize>)> {
    let comps: Vec<DictionaryComponent> = spec
        .weights()
        .iter()
        .zip(spec.components())
        .map(|(&weight, e)| DictionaryComponent { weight, eig: e.clone() })
        .collect();
    let dict = TransformDictionary::from_components(spec.mode(), comps.clone())?;
    let mut taken = vec![false; dict.k()];
    let perm = comps
        .iter()
        .map(|c| {
            let j = dict
                .components()
                .iter()
                .enumerate()
                .position(|(j, d)| !taken[j] && d == c)
                .expect("canonical order is a permutation");
            taken[j] = true;
            j
        })
        .collect();
    Ok((dict, perm))
}
