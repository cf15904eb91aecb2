use gmtc_core::codec::{decode_batch, encode_batch, segment_batch, EncoderConfig, LabelSource};
use gmtc_core::entropy::{decode_symbols, encode_symbols, Bitstream, RangeDecoder, RangeEncoder, SymbolModel};
use gmtc_core::experiment::oracle_dictionary;
use gmtc_core::fit::EmTrace;
use gmtc_core::formats::{
    dictionary_from_bytes, dictionary_to_bytes, labels_from_bytes, labels_to_bytes, CsibinFile, GmtbFile, Stacking,
};
use gmtc_core::rd::{solve_water_level, waterfill_at_level, PooledSpectrum, RdTarget};
use gmtc_core::synth::{dft_log_uniform_mixture, synth_mixture_dataset};
use gmtc_core::tensor::{hermitian_eig, ComplexVectorBatch, FieldMode, HermitianMatrix};
use gmtc_core::Complex64;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn model_strategy() -> impl Strategy<Value = SymbolModel> {
    prop_oneof![
        prop::collection::vec(0.0f64..1.0, 1..64).prop_map(|w| {
            let s: f64 = w.iter().sum();
            let n = w.len() as f64;
            let pmf: Vec<f64> = w.iter().map(|x| if s > 0.0 { x / s } else { 1.0 / n }).collect();
            SymbolModel::categorical(&pmf).unwrap()
        }),
        (-2.0f64..2.0, -1.5f64..1.0).prop_map(|(ls, lr)| {
            let sigma = 10f64.powf(ls);
            SymbolModel::discretized_gaussian(sigma, sigma * 10f64.powf(lr)).unwrap()
        }),
    ]
}

fn in_support(m: &SymbolModel, u: f64) -> i64 {
    let (lo, hi) = m.support();
    (lo + ((hi - lo + 1) as f64 * u) as i64).min(hi)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn range_coder_round_trip(
        models in prop::collection::vec(model_strategy(), 1..6),
        picks in prop::collection::vec((any::<prop::sample::Index>(), 0.0f64..1.0), 0..48),
    ) {
        let chosen: Vec<&SymbolModel> = picks.iter().map(|(i, _)| &models[i.index(models.len())]).collect();
        let symbols: Vec<i64> = chosen.iter().zip(&picks).map(|(m, (_, u))| in_support(m, *u)).collect();
        let stream = encode_symbols(&chosen, &symbols).unwrap();
        prop_assert_eq!(decode_symbols(&chosen, &stream).unwrap(), symbols);
    }

    #[test]
    fn escaped_indices_round_trip(
        sigmas in prop::collection::vec(0.05f64..5.0, 1..24),
        raw in prop::collection::vec(any::<i32>(), 24),
    ) {
        let models: Vec<SymbolModel> = sigmas.iter().map(|&s| SymbolModel::discretized_gaussian(s, 1.0).unwrap()).collect();
        let idx: Vec<i64> = raw.iter().take(models.len()).map(|&r| r as i64).collect();
        let mut enc = RangeEncoder::new();
        for (m, &i) in models.iter().zip(&idx) {
            enc.encode_index(m, i).unwrap();
        }
        let s = enc.finish();
        let mut dec = RangeDecoder::new(&s.bytes);
        let back: Vec<i64> = models.iter().map(|m| dec.decode_index(m).unwrap()).collect();
        prop_assert_eq!(back, idx);
    }
}

fn batch_strategy() -> impl Strategy<Value = ComplexVectorBatch> {
    (any::<bool>(), 1usize..9, 0usize..20).prop_flat_map(|(real, dim, count)| {
        prop::collection::vec((-1e3f32..1e3, -1e3f32..1e3), dim * count).prop_map(move |v| {
            let mode = if real { FieldMode::Real } else { FieldMode::Complex };
            let data = v
                .iter()
                .map(|&(a, b)| Complex64::new(a as f64, if real { 0.0 } else { b as f64 }))
                .collect();
            ComplexVectorBatch::from_flat(mode, dim, data).unwrap()
        })
    })
}

fn hermitian_strategy() -> impl Strategy<Value = HermitianMatrix> {
    (1usize..8).prop_flat_map(|n| {
        prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n * n).prop_map(move |v| {
            let mut a = vec![Complex64::new(0.0, 0.0); n * n];
            for i in 0..n {
                for j in 0..n {
                    let z = Complex64::new(v[i * n + j].0, v[i * n + j].1);
                    a[i * n + j] += z;
                    a[j * n + i] += z.conj();
                }
            }
            HermitianMatrix::new(n, a).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn csibin_round_trip(data in batch_strategy(), st in 0u8..3) {
        let file = CsibinFile { stacking: Stacking::from_code(st).unwrap(), data };
        let bytes = file.to_bytes();
        let back = CsibinFile::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.data.as_flat(), file.data.as_flat());
    }

    #[test]
    fn labels_round_trip(labels in prop::collection::vec(0usize..1000, 0..200)) {
        prop_assert_eq!(labels_from_bytes(&labels_to_bytes(&labels)).unwrap(), labels);
    }

    #[test]
    fn dictionary_round_trip(k in 1usize..5, n in 1usize..9, seed in any::<u64>(), flip in any::<prop::sample::Index>()) {
        let (dict, _) = oracle_dictionary(&dft_log_uniform_mixture(k, n, seed).unwrap()).unwrap();
        let bytes = dictionary_to_bytes(&dict);
        let back = dictionary_from_bytes(&bytes).unwrap();
        prop_assert_eq!(dictionary_to_bytes(&back), bytes.clone());
        let mut bad = bytes;
        let i = flip.index(bad.len());
        bad[i] ^= 0x40;
        prop_assert!(dictionary_from_bytes(&bad).is_err());
    }

    #[test]
    fn gmtb_round_trip(
        groups in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..40), 0..10),
        mu in 1e-6f64..1e3,
        hash in any::<u64>(),
        tau in 1u16..100,
    ) {
        let file = GmtbFile {
            mode: FieldMode::Complex,
            dict_hash: hash,
            water_level: mu,
            tau,
            dim: 7,
            blocks: groups.len() as u64 * tau as u64,
            groups: groups.into_iter().map(|bytes| Bitstream { bytes }).collect(),
        };
        let bytes = file.to_bytes();
        let back = GmtbFile::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.groups, file.groups);
    }

    #[test]
    fn eigen_round_trip(a in hermitian_strategy()) {
        let n = a.dim();
        let eig = hermitian_eig(&a).unwrap();
        let l = eig.eigenvalues();
        let scale = a.max_abs().max(1.0);
        prop_assert!(l.windows(2).all(|w| w[0] >= w[1]));
        for i in 0..n {
            for j in 0..n {
                let d = gmtc_core::tensor::dot_conj(eig.column(i), eig.column(j));
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((d - want).norm() < 1e-10);
            }
        }
        // eigenvalues clamp negatives to zero, so compare against the PSD part
        let na = DMatrix::from_row_slice(n, n, a.as_slice());
        let mut oracle: Vec<f64> = na.symmetric_eigen().eigenvalues.iter().copied().collect();
        oracle.sort_by(|x, y| y.total_cmp(x));
        for (x, y) in l.iter().zip(&oracle) {
            if *y > 1e-9 * scale {
                prop_assert!((x - y).abs() < 1e-9 * scale, "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn psd_reconstruction(a in hermitian_strategy()) {
        // A^H A is PSD, so reconstruction from the clamped spectrum is exact
        let n = a.dim();
        let mut g = HermitianMatrix::zeros(n);
        for r in 0..n {
            g.add_outer(1.0, &(0..n).map(|c| a.get(r, c).conj()).collect::<Vec<_>>());
        }
        let eig = hermitian_eig(&g).unwrap();
        prop_assert!(eig.reconstruct().sub_frobenius(&g) < 1e-9 * g.frobenius_norm().max(1.0));
        prop_assert!(eig.eigenvalues().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn waterfilling_invariants(
        spectra in prop::collection::vec(prop::collection::vec(1e-3f64..1e3, 4), 1..4),
        mus in prop::collection::vec(1e-3f64..1e3, 2),
        real in any::<bool>(),
    ) {
        let k = spectra.len();
        let mode = if real { FieldMode::Real } else { FieldMode::Complex };
        let w = vec![1.0 / k as f64; k];
        let spec = PooledSpectrum::new(mode, &w, &spectra).unwrap();
        let (lo, hi) = (mus[0].min(mus[1]), mus[0].max(mus[1]));
        let a = waterfill_at_level(&spec, lo).unwrap();
        let b = waterfill_at_level(&spec, hi).unwrap();
        prop_assert!(a.rate() >= b.rate() && a.distortion() <= b.distortion());
        let d: f64 = spectra.iter().flat_map(|s| s.iter().map(|&l| l.min(lo))).sum::<f64>() / (k * 4) as f64;
        prop_assert!((a.distortion() - d).abs() <= 1e-12 * d);
        if a.rate() > 0.0 {
            let back = solve_water_level(&spec, RdTarget::Rate(a.rate())).unwrap();
            prop_assert!((back.distortion() - a.distortion()).abs() <= 1e-8 * a.distortion());
        }
    }

    #[test]
    fn segmentation_conserves_energy(data in batch_strategy(), pick in any::<prop::sample::Index>()) {
        let full = data.dim() * data.mode().real_components();
        let divisors: Vec<usize> = (1..=full).filter(|m| full % m == 0).collect();
        let m = divisors[pick.index(divisors.len())];
        let seg = segment_batch(&data, m).unwrap();
        prop_assert_eq!(seg.len(), data.len() * full / m);
        prop_assert!((seg.total_energy() - data.total_energy()).abs() <= 1e-9 * data.total_energy().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn codec_decode_matches_encoder(seed in any::<u64>(), rate in 0.1f64..3.0, tau in 1usize..5) {
        let spec = dft_log_uniform_mixture(3, 6, seed).unwrap();
        let (dict, _) = oracle_dictionary(&spec).unwrap();
        let (data, _) = synth_mixture_dataset(&spec, 20, seed);
        let cfg = EncoderConfig::for_rate(dict.clone(), rate, tau).unwrap();
        let enc = encode_batch(&cfg, &data, LabelSource::Map).unwrap();
        // a decoder rebuilt from the water level alone must agree
        let dec_cfg = EncoderConfig::for_water_level(dict, cfg.allocation().water_level(), tau).unwrap();
        let (labels, recon) = decode_batch(&dec_cfg, &enc.groups, data.len()).unwrap();
        let (labels2, recon2) = decode_batch(&cfg, &enc.groups, data.len()).unwrap();
        prop_assert_eq!(&labels, &labels2);
        prop_assert_eq!(recon.as_flat(), recon2.as_flat());
        let want: Vec<usize> = enc.blocks.iter().map(|b| b.label).collect();
        prop_assert_eq!(labels2, want);
    }
}

#[test]
fn report_types_serialize() {
    for t in [RdTarget::Rate(1.5), RdTarget::Distortion(0.25), RdTarget::WaterLevel(2.0)] {
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<RdTarget>(&s).unwrap(), t);
    }
    assert_eq!(serde_json::to_string(&RdTarget::Rate(1.0)).unwrap(), r#"{"kind":"rate","value":1.0}"#);
    let trace = EmTrace {
        log_likelihood: vec![-3.0, -2.5],
        prune_events: vec![1],
        converged: true,
        warnings: vec!["w".into()],
    };
    let back: EmTrace = serde_json::from_str(&serde_json::to_string(&trace).unwrap()).unwrap();
    assert_eq!(back, trace);
}
