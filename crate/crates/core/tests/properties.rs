mod common;

use proptest::prelude::*;

use common::{brute_force_plan, random, toy};
use quantkit::autobit::{plan, Assignment, ConfigCandidate, ModuleCandidates, Solver};
use quantkit::binfact::{msvid_init, BinaryFactorMatrix, BinaryFormat};
use quantkit::metrics::{psta_schedule, smooth_ste};
use quantkit::model::{LayerId, Role};
use quantkit::pipeline::{ocw, run_layerwise_sweep, LayerSpec, PrecisionMap, SweepOptions};
use quantkit::preprocess::incoherence;
use quantkit::quant::{decode_payload, encode_payload, quantize_matrix, storage_bytes, Granularity, QuantConfig, ScaleMode, Scheme};
use quantkit::stats::CalibStats;
use quantkit::Matrix;

fn granularity() -> impl Strategy<Value = Granularity> {
    prop_oneof![Just(Granularity::PerTensor), Just(Granularity::PerChannel), (1usize..9).prop_map(Granularity::PerGroup)]
}

fn config() -> impl Strategy<Value = QuantConfig> {
    (1u8..=8, prop::bool::ANY, granularity()).prop_filter_map("symmetric needs two bits", |(bits, sym, g)| {
        let scheme = if sym { Scheme::Symmetric } else { Scheme::Asymmetric };
        QuantConfig::new(bits, scheme, g).ok()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn codes_stay_in_range_and_payload_matches_storage(
        cfg in config(), rows in 1usize..10, cols in 1usize..14, seed in 0u64..10_000, mse in prop::bool::ANY,
    ) {
        let w = random(rows, cols, seed, 1.0);
        let mode = if mse { ScaleMode::MseGrid } else { ScaleMode::Minmax };
        let q = quantize_matrix(&w, &cfg, mode).unwrap();
        let (lo, hi) = cfg.code_range();
        prop_assert!(q.codes().iter().all(|&c| (lo..=hi).contains(&c)));
        let payload = encode_payload(&q);
        prop_assert_eq!(payload.len(), storage_bytes(&q));
        let back = decode_payload(&payload, rows, cols, cfg).unwrap();
        prop_assert_eq!(back.codes(), q.codes());
        prop_assert_eq!(back.dequantize(), q.dequantize());
    }

    #[test]
    fn reconstruction_error_is_bounded_by_half_a_step(
        bits in 2u8..=8, rows in 1usize..8, cols in 1usize..12, seed in 0u64..10_000,
    ) {
        let w = random(rows, cols, seed, 1.0);
        let cfg = QuantConfig::asymmetric(bits, Granularity::PerChannel).unwrap();
        let q = quantize_matrix(&w, &cfg, ScaleMode::Minmax).unwrap();
        let d = q.dequantize();
        for i in 0..rows {
            for j in 0..cols {
                let g = q.grid_of(i, j);
                let (lo, hi) = g.range();
                let v = w.get(i, j).clamp(lo, hi);
                prop_assert!((v - d.get(i, j)).abs() <= 0.5 * g.scale * (1.0 + 1e-4) + 1e-6);
            }
        }
    }

    #[test]
    fn statistics_from_batches_equal_statistics_of_the_concatenation(
        dim in 1usize..6, lens in prop::collection::vec(1usize..8, 1..5), seed in 0u64..10_000,
    ) {
        let batches: Vec<(Matrix, Matrix)> = lens
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                let x = random(n, dim, seed + 2 * k as u64, 1.0);
                let xh = x.add(&random(n, dim, seed + 2 * k as u64 + 1, 0.1)).unwrap();
                (x, xh)
            })
            .collect();
        let mut streamed = CalibStats::new(dim);
        for (x, xh) in &batches {
            streamed.accumulate(x, xh).unwrap();
        }
        let stack = |f: fn(&(Matrix, Matrix)) -> &Matrix| {
            Matrix::from_rows(&batches.iter().flat_map(|b| (0..f(b).rows()).map(move |i| f(b).row(i).to_vec())).collect::<Vec<_>>()).unwrap()
        };
        let mut whole = CalibStats::new(dim);
        whole.accumulate(&stack(|b| &b.0), &stack(|b| &b.1)).unwrap();
        prop_assert_eq!(streamed.token_count, whole.token_count);
        let scale = whole.gram.amax().max(1.0);
        prop_assert!((&streamed.gram - &whole.gram).amax() <= 1e-9 * scale);
        prop_assert!((&streamed.cross - &whole.cross).amax() <= 1e-9 * scale);
    }

    #[test]
    fn incoherence_is_at_least_one(rows in 1usize..12, cols in 1usize..12, seed in 0u64..10_000, spike in 0.0f32..50.0) {
        let mut w = random(rows, cols, seed, 1.0);
        w.set(0, 0, w.get(0, 0) + spike);
        let mu = incoherence(&w).unwrap();
        prop_assert!(mu >= 1.0 - 1e-9);
        prop_assert!(mu <= ((rows * cols) as f64).sqrt() + 1e-6);
    }

    #[test]
    fn smooth_rounding_is_monotone_and_brackets_the_floor(x in -20.0f64..20.0, dx in 0.0f64..3.0, k in 0.5f64..40.0) {
        let (a, ga) = smooth_ste(x, k);
        let (b, _) = smooth_ste(x + dx, k);
        prop_assert!(b >= a - 1e-12);
        prop_assert!(ga >= 0.0);
        prop_assert!(a >= x.floor() && a <= x.floor() + 1.0);
    }

    #[test]
    fn temperature_ramp_stays_between_its_endpoints(epochs in 2usize..50, frac in 0.0f64..1.0, lo in 0.1f64..10.0, span in 0.0f64..30.0) {
        let e = ((epochs - 1) as f64 * frac) as usize;
        let k = psta_schedule(e, epochs, lo, lo + span).unwrap();
        prop_assert!(k >= lo - 1e-12 && k <= lo + span + 1e-12);
    }

    #[test]
    fn binary_factors_survive_encoding(
        rows in 2usize..12, cols in 2usize..12, rank in 1usize..5, mdbf in prop::bool::ANY, seed in 0u64..10_000,
    ) {
        let (format, ell) = if mdbf { (BinaryFormat::Mdbf, 2) } else { (BinaryFormat::Dbf, 1) };
        let w = random(rows, cols, seed, 1.0);
        let f = msvid_init(&w, rank, ell, format).unwrap().to_storage();
        let bytes = f.encode();
        prop_assert_eq!(bytes.len(), f.storage_bytes());
        let back = BinaryFactorMatrix::decode(&bytes, format, rows, cols, rank, f.ell()).unwrap();
        prop_assert_eq!(back.dequantize(), f.dequantize());
    }

    #[test]
    fn every_solver_respects_the_budget_and_finds_the_optimum(
        table in prop::collection::vec(prop::collection::vec((1u64..40, 0.0f64..10.0), 1..5), 1..5),
        slack in 0u64..60,
    ) {
        let modules: Vec<ModuleCandidates> = table
            .iter()
            .enumerate()
            .map(|(b, cands)| ModuleCandidates {
                layer: LayerId::new(b, Role::Q),
                params: 64,
                candidates: cands
                    .iter()
                    .map(|&(cost_bytes, err)| ConfigCandidate { config: QuantConfig::symmetric(4, Granularity::PerChannel).unwrap(), cost_bytes, err })
                    .collect(),
            })
            .collect();
        let floor: u64 = table.iter().map(|c| c.iter().map(|p| p.0).min().unwrap()).sum();
        let budget = floor + slack;
        let costs: Vec<Vec<u64>> = table.iter().map(|c| c.iter().map(|p| p.0).collect()).collect();
        let errs: Vec<Vec<f64>> = table.iter().map(|c| c.iter().map(|p| p.1).collect()).collect();
        let best = brute_force_plan(&costs, &errs, budget).unwrap();
        for solver in [Solver::Exhaustive, Solver::Dp, Solver::BranchBound] {
            let p = plan(&modules, budget, solver).unwrap();
            let cost: u64 = p.assignment.iter().map(|a: &Assignment| a.candidate.cost_bytes).sum();
            prop_assert!(cost <= budget);
            prop_assert_eq!(cost, p.total_cost);
            prop_assert!((p.total_err - best).abs() <= 1e-9 * best.max(1.0));
        }
        if floor > 0 {
            prop_assert!(plan(&modules, floor - 1, Solver::Dp).is_err());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn containers_round_trip_quantized_models(seed in 0u64..1000, bits in 2u8..=8, group in prop::sample::select(vec![0usize, 4, 16])) {
        let m = toy(seed);
        let (c, _) = common::toy_data(seed, 256);
        let granularity = if group == 0 { Granularity::PerChannel } else { Granularity::PerGroup(group) };
        let spec = LayerSpec::Uniform { bits, scheme: Scheme::Asymmetric, granularity };
        let (q, _) = run_layerwise_sweep(&m, &c, &PrecisionMap::uniform(spec), &SweepOptions::default()).unwrap();
        let bytes = ocw::to_bytes(&q).unwrap();
        prop_assert_eq!(ocw::from_bytes(&bytes).unwrap(), q.clone());
        prop_assert_eq!(ocw::to_bytes(&ocw::from_bytes(&bytes).unwrap()).unwrap(), bytes);
    }
}
