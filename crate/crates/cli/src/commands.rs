use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gmtc_core::codec::{count_encoder_flops, decode_batch, encode_batch, segment_batch, EncoderConfig, LabelSource};
use gmtc_core::experiment::{bound_curve, check_rate_bound, coded_curve, curves_csv, oracle_dictionary, Curve};
use gmtc_core::fit::{build_dictionary, em_fit, DictionaryComponent, EmConfig, EmInit, TransformDictionary};
use gmtc_core::formats::{
    audit_dictionary_bytes, dictionary_from_bytes, dictionary_hash, dictionary_to_bytes, labels_from_bytes,
    labels_to_bytes, write_atomic, CsibinFile, GmtbFile, ParameterAudit, Stacking,
};
use gmtc_core::rd::RdTarget;
use gmtc_core::synth::{dft_log_uniform_mixture, geometry_mixture, real_stacked_spec, synth_mixture_dataset, ArrayConfig};
use gmtc_core::tensor::{hermitian_eig, ComplexVectorBatch, FieldMode};
use gmtc_core::{GmtcError, Result};
use serde::Serialize;

use crate::{
    AuditArgs, BoundsArgs, DecodeArgs, EncodeArgs, EvalArgs, FitArgs, InitArg, Law, ModeArg, Scheme, SweepArgs,
    SynthArgs,
};

/// Test streams are drawn under a seed disjoint from the training seed.
const TEST_SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Serialize)]
struct Report<'a, A: Serialize> {
    verb: &'static str,
    config: &'a A,
    seed: u64,
    counts: BTreeMap<&'static str, usize>,
    curves: Vec<Curve>,
    runtime_seconds: f64,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| GmtcError::Format(format!("{}: {e}", path.display())))
}

fn read_csibin(path: &Path) -> Result<CsibinFile> {
    CsibinFile::from_bytes(&read(path)?)
}

fn read_dict(path: &Path) -> Result<TransformDictionary> {
    dictionary_from_bytes(&read(path)?)
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    labels_from_bytes(&read(path)?)
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| GmtcError::Format(e.to_string()))?;
    v.push(b'\n');
    Ok(v)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    print!("{}", String::from_utf8_lossy(&json_bytes(value)?));
    Ok(())
}

fn csv_path(out: &Path) -> PathBuf {
    out.with_extension("csv")
}

/// Writes the JSON report and its CSV mirror, then enforces the rate bound.
fn emit_report<A: Serialize>(
    verb: &'static str,
    config: &A,
    seed: u64,
    counts: BTreeMap<&'static str, usize>,
    curves: Vec<Curve>,
    start: Instant,
    out: &Path,
) -> Result<()> {
    let report = Report {
        verb,
        config,
        seed,
        counts,
        curves,
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    write_atomic(out, &json_bytes(&report)?)?;
    write_atomic(&csv_path(out), curves_csv(&report.curves).as_bytes())?;
    for c in &report.curves {
        check_rate_bound(c)?;
    }
    Ok(())
}

/// `kind:v1,v2,..` with kind one of rate, distortion, mu.
pub fn parse_grid(s: &str) -> Result<Vec<RdTarget>> {
    let bad = || GmtcError::InvalidArgument(format!("bad grid {s:?}; expected rate:|distortion:|mu: followed by numbers"));
    let (kind, values) = s.split_once(':').ok_or_else(bad)?;
    let make: fn(f64) -> RdTarget = match kind {
        "rate" => RdTarget::Rate,
        "distortion" => RdTarget::Distortion,
        "mu" | "water-level" => RdTarget::WaterLevel,
        _ => return Err(bad()),
    };
    let out = values
        .split(',')
        .map(|v| v.trim().parse::<f64>().map(make).map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn check_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(GmtcError::InvalidArgument(format!("--{name} must be at least 1")));
    }
    Ok(())
}

/// Optional segmentation; each label is repeated once per segment.
fn prepare(data: ComplexVectorBatch, labels: Option<Vec<usize>>, segment: Option<usize>) -> Result<(ComplexVectorBatch, Option<Vec<usize>>)> {
    if let Some(l) = &labels {
        if l.len() != data.len() {
            return Err(GmtcError::DimensionMismatch {
                expected: data.len(),
                actual: l.len(),
            });
        }
    }
    let Some(m) = segment else {
        return Ok((data, labels));
    };
    let seg = segment_batch(&data, m)?;
    let per = seg.len() / data.len().max(1);
    let labels = labels.map(|l| l.iter().flat_map(|&c| std::iter::repeat_n(c, per)).collect());
    Ok((seg, labels))
}

fn check_dict_data(dict: &TransformDictionary, data: &ComplexVectorBatch) -> Result<()> {
    if dict.dim() != data.dim() {
        return Err(GmtcError::DimensionMismatch {
            expected: dict.dim(),
            actual: data.dim(),
        });
    }
    if dict.mode() != data.mode() {
        return Err(GmtcError::Format("dictionary and data field modes differ".into()));
    }
    Ok(())
}

fn check_audit(a: &ParameterAudit) -> Result<()> {
    if a.total_scalars != a.formula {
        return Err(GmtcError::InvariantViolation(format!(
            "serialized scalars {} differ from 2KN^2 + 2KN + C* = {}",
            a.total_scalars, a.formula
        )));
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    check_positive("k", a.k)?;
    check_positive("dim", a.dim)?;
    check_positive("n-train", a.n_train)?;
    check_positive("n-test", a.n_test)?;
    let (spec, stacking) = match a.law {
        Law::Dft => (dft_log_uniform_mixture(a.k, a.dim, a.seed)?, Stacking::Generic),
        Law::Geometry => {
            check_positive("n-tx", a.n_tx)?;
            check_positive("paths", a.paths)?;
            if !a.dim.is_multiple_of(a.n_tx) {
                return Err(GmtcError::InvalidArgument(format!("--n-tx {} does not divide --dim {}", a.n_tx, a.dim)));
            }
            let n_sc = a.dim / a.n_tx;
            let cfg = ArrayConfig {
                n_tx: a.n_tx,
                n_sc,
                spacing: 1.0 / n_sc as f64,
            };
            (geometry_mixture(a.k, cfg, a.paths, a.max_delay, a.seed)?, Stacking::Kronecker)
        }
    };
    let (train, train_labels) = synth_mixture_dataset(&spec, a.n_train, a.seed);
    let (test, test_labels) = synth_mixture_dataset(&spec, a.n_test, a.seed ^ TEST_SEED_MIX);
    let (train, test, truth_spec, stacking) = match a.mode {
        ModeArg::Complex => (train, test, spec, stacking),
        ModeArg::Real => {
            let n = 2 * a.dim;
            (segment_batch(&train, n)?, segment_batch(&test, n)?, real_stacked_spec(&spec)?, Stacking::RealStacked)
        }
    };
    let (truth, perm) = oracle_dictionary(&truth_spec)?;
    let canon = |l: &[usize]| l.iter().map(|&c| perm[c]).collect::<Vec<_>>();

    std::fs::create_dir_all(&a.out)?;
    let file = |data| CsibinFile { stacking, data };
    write_atomic(&a.out.join("train.csibin"), &file(train).to_bytes())?;
    write_atomic(&a.out.join("test.csibin"), &file(test).to_bytes())?;
    write_atomic(&a.out.join("train.labels"), &labels_to_bytes(&canon(&train_labels)))?;
    write_atomic(&a.out.join("test.labels"), &labels_to_bytes(&canon(&test_labels)))?;
    write_atomic(&a.out.join("truth.gmtd"), &dictionary_to_bytes(&truth))?;

    #[derive(Serialize)]
    struct Manifest<'a> {
        config: &'a SynthArgs,
        dim: usize,
        power_per_dim: f64,
        dictionary_hash: String,
        files: [&'static str; 5],
    }
    let manifest = Manifest {
        config: a,
        dim: truth.dim(),
        power_per_dim: truth.pooled_spectrum().source_power() / truth.dim() as f64,
        dictionary_hash: format!("{:016x}", dictionary_hash(&truth)),
        files: ["train.csibin", "test.csibin", "train.labels", "test.labels", "truth.gmtd"],
    };
    let bytes = json_bytes(&manifest)?;
    write_atomic(&a.out.join("synth.json"), &bytes)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

fn em_config(k: usize, a: &FitArgs) -> EmConfig {
    let mut cfg = EmConfig::new(k);
    cfg.max_iters = a.max_iters;
    cfg.tol = a.tol;
    cfg.reg = a.reg;
    cfg.seed = a.seed;
    cfg.init = match a.init {
        InitArg::Kmeans => EmInit::KMeansEnergy,
        InitArg::Random => EmInit::RandomResponsibility,
    };
    cfg
}

pub fn fit(a: &FitArgs) -> Result<()> {
    check_positive("k", a.k)?;
    let (data, _) = prepare(read_csibin(&a.train)?.data, None, a.segment)?;
    let (model, trace) = em_fit(&data, &em_config(a.k, a))?;
    for (i, ll) in trace.log_likelihood.iter().enumerate() {
        eprintln!("iter {i:4}  log-likelihood {ll:.9e}");
    }
    for w in &trace.warnings {
        eprintln!("warning: {w}");
    }
    let dict = build_dictionary(&model)?;
    let bytes = dictionary_to_bytes(&dict);
    write_atomic(&a.out, &bytes)?;
    if let Some(path) = &a.trace {
        #[derive(Serialize)]
        struct Trace<'a> {
            config: &'a FitArgs,
            samples: usize,
            k_final: usize,
            log_likelihood: &'a [f64],
            prune_events: &'a [usize],
            converged: bool,
            warnings: &'a [String],
        }
        let t = Trace {
            config: a,
            samples: data.len(),
            k_final: dict.k(),
            log_likelihood: &trace.log_likelihood,
            prune_events: &trace.prune_events,
            converged: trace.converged,
            warnings: &trace.warnings,
        };
        write_atomic(path, &json_bytes(&t)?)?;
    }
    if a.audit {
        let audit = audit_dictionary_bytes(&bytes)?;
        print_json(&audit)?;
        check_audit(&audit)?;
    }
    Ok(())
}

pub fn bounds(a: &BoundsArgs) -> Result<()> {
    let start = Instant::now();
    let dict = read_dict(&a.dict)?;
    let grid = parse_grid(&a.grid.grid)?;
    let curve = bound_curve("bounds", &dict, &grid, a.grid.tau)?;
    emit_report("bounds", a, a.seed, BTreeMap::new(), vec![curve], start, &a.out)
}

pub fn encode(a: &EncodeArgs) -> Result<()> {
    let dict = read_dict(&a.dict)?;
    let data = read_csibin(&a.data)?.data;
    check_dict_data(&dict, &data)?;
    let labels = a.labels.as_deref().map(read_labels).transpose()?;
    let (data, labels) = prepare(data, labels, None)?;
    let target = match parse_grid(&a.target)?.as_slice() {
        [t] => *t,
        _ => return Err(GmtcError::InvalidArgument("--target takes a single value".into())),
    };
    let cfg = EncoderConfig::for_target(dict.clone(), target, a.tau)?;
    let source = match &labels {
        Some(l) => LabelSource::Oracle(l),
        None => LabelSource::Map,
    };
    let enc = encode_batch(&cfg, &data, source)?;
    let file = GmtbFile {
        mode: dict.mode(),
        dict_hash: dictionary_hash(&dict),
        water_level: cfg.allocation().water_level(),
        tau: a.tau as u16,
        dim: dict.dim() as u32,
        blocks: data.len() as u64,
        groups: enc.groups,
    };
    let bytes = file.to_bytes();
    write_atomic(&a.out, &bytes)?;
    let payload_bits: u64 = file.groups.iter().map(|g| g.bit_length()).sum();
    #[derive(Serialize)]
    struct Summary {
        blocks: usize,
        water_level: f64,
        payload_bits: u64,
        bits_per_dim: f64,
        file_bytes: usize,
    }
    print_json(&Summary {
        blocks: data.len(),
        water_level: file.water_level,
        payload_bits,
        bits_per_dim: payload_bits as f64 / (data.len() * dict.dim()) as f64,
        file_bytes: bytes.len(),
    })
}

pub fn decode(a: &DecodeArgs) -> Result<()> {
    let dict = read_dict(&a.dict)?;
    let file = GmtbFile::from_bytes(&read(&a.stream)?)?;
    let actual = dictionary_hash(&dict);
    if file.dict_hash != actual {
        return Err(GmtcError::DictionaryMismatch {
            expected: file.dict_hash,
            actual,
        });
    }
    if file.mode != dict.mode() || file.dim as usize != dict.dim() {
        return Err(GmtcError::Format("stream header disagrees with dictionary".into()));
    }
    let cfg = EncoderConfig::for_water_level(dict, file.water_level, file.tau as usize)?;
    let (labels, data) = decode_batch(&cfg, &file.groups, file.blocks as usize)?;
    write_atomic(
        &a.out,
        &CsibinFile {
            stacking: Stacking::Generic,
            data,
        }
        .to_bytes(),
    )?;
    if let Some(path) = &a.labels_out {
        write_atomic(path, &labels_to_bytes(&labels))?;
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let start = Instant::now();
    let file = read_csibin(&a.data)?;
    if a.identity {
        let bytes = file.to_bytes();
        write_atomic(&a.out, &bytes)?;
        #[derive(Serialize)]
        struct Summary {
            count: usize,
            dim: usize,
            mode: &'static str,
            stacking: u8,
            energy: f64,
        }
        return print_json(&Summary {
            count: file.data.len(),
            dim: file.data.dim(),
            mode: match file.data.mode() {
                FieldMode::Complex => "complex",
                FieldMode::Real => "real",
            },
            stacking: file.stacking.code(),
            energy: file.data.total_energy(),
        });
    }
    let dict = read_dict(a.dict.as_deref().expect("clap requires --dict without --identity"))?;
    let labels = a.labels.as_deref().map(read_labels).transpose()?;
    let blocks = file.data.len();
    let (data, labels) = prepare(file.data, labels, a.segment)?;
    check_dict_data(&dict, &data)?;
    let grid = parse_grid(&a.grid.grid)?;
    let curve = match &labels {
        Some(l) => coded_curve("oracle-label", &dict, &grid, a.grid.tau, &data, LabelSource::Oracle(l), Some(l))?,
        None => coded_curve("map", &dict, &grid, a.grid.tau, &data, LabelSource::Map, None)?,
    };
    let counts = BTreeMap::from([("samples", blocks), ("blocks", data.len())]);
    emit_report("eval", a, a.seed, counts, vec![curve], start, &a.out)
}

fn single_covariance(dict: &TransformDictionary) -> Result<TransformDictionary> {
    let eig = hermitian_eig(&dict.average_covariance())?;
    TransformDictionary::from_components(dict.mode(), vec![DictionaryComponent { weight: 1.0, eig }])
}

pub fn rd_sweep(a: &SweepArgs) -> Result<()> {
    let start = Instant::now();
    let grid = parse_grid(&a.grid.grid)?;
    let tau = a.grid.tau;
    let test = read_csibin(&a.data)?.data;
    let samples = test.len();
    let labels = a.labels.as_deref().map(read_labels).transpose()?;
    let (test, labels) = prepare(test, labels, a.segment)?;
    let train = match &a.train {
        Some(p) => Some(prepare(read_csibin(p)?.data, None, a.segment)?.0),
        None => None,
    };
    let dict = a.dict.as_deref().map(read_dict).transpose()?;
    if let Some(d) = &dict {
        check_dict_data(d, &test)?;
    }
    let need = |what: &str, ok: bool| {
        if ok {
            Ok(())
        } else {
            Err(GmtcError::InvalidArgument(format!("{what} is required here")))
        }
    };

    let mut curves = Vec::new();
    for s in &a.baselines {
        match s {
            Scheme::Map => {
                need("--dict", dict.is_some())?;
                let d = dict.as_ref().unwrap();
                let truth = labels.as_deref();
                curves.push(coded_curve("map", d, &grid, tau, &test, LabelSource::Map, truth)?);
            }
            Scheme::OracleLabel => {
                need("--dict", dict.is_some())?;
                need("--labels", labels.is_some())?;
                let l = labels.as_deref().unwrap();
                let d = dict.as_ref().unwrap();
                curves.push(coded_curve("oracle-label", d, &grid, tau, &test, LabelSource::Oracle(l), Some(l))?);
            }
            Scheme::Tc => {
                let d = match (&train, &dict) {
                    (Some(t), _) => build_dictionary(&em_fit(t, &EmConfig::new(1))?.0)?,
                    (None, Some(d)) => single_covariance(d)?,
                    (None, None) => return Err(GmtcError::InvalidArgument("tc needs --train or --dict".into())),
                };
                curves.push(coded_curve("tc", &d, &grid, 1, &test, LabelSource::Map, None)?);
            }
        }
    }
    if !a.fit_k.is_empty() {
        need("--train", train.is_some())?;
        let t = train.as_ref().unwrap();
        for &k in &a.fit_k {
            check_positive("fit-k", k)?;
            let mut cfg = EmConfig::new(k);
            cfg.seed = a.seed;
            let d = build_dictionary(&em_fit(t, &cfg)?.0)?;
            curves.push(coded_curve(&format!("fit-k{k}"), &d, &grid, tau, &test, LabelSource::Map, None)?);
        }
    }
    let mut counts = BTreeMap::from([("test_samples", samples), ("test_blocks", test.len())]);
    if let Some(t) = &train {
        counts.insert("train_blocks", t.len());
    }
    emit_report("rd-sweep", a, a.seed, counts, curves, start, &a.out)
}

pub fn audit(a: &AuditArgs) -> Result<()> {
    let bytes = read(&a.dict)?;
    let params = audit_dictionary_bytes(&bytes)?;
    let (measured, formula) = count_encoder_flops(params.n)?;
    #[derive(Serialize)]
    struct Audit {
        parameters: ParameterAudit,
        encoder_ops_measured: u64,
        encoder_ops_formula: u64,
    }
    let out = Audit {
        parameters: params,
        encoder_ops_measured: measured,
        encoder_ops_formula: formula,
    };
    let json = json_bytes(&out)?;
    if let Some(p) = &a.out {
        write_atomic(p, &json)?;
    }
    print!("{}", String::from_utf8_lossy(&json));
    check_audit(&params)?;
    if measured > 2 * formula {
        return Err(GmtcError::InvariantViolation(format!(
            "encoder ops {measured} exceed twice N^2 + 4N = {formula}"
        )));
    }
    Ok(())
}
