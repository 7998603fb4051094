mod common;

use std::collections::HashSet;

use matwheel::dataset::{parse_structure_record, serialize_record, split_dataset, split_sizes, subsample_labeled};
use matwheel::evaluation::{aggregate, mae, parse_report_csv, render_csv};
use matwheel::flywheel::{ArmResult, ArmSpec, Composition};
use matwheel::generator::{decode_material, encode_material, encoding_len};
use matwheel::graph::{build_graph, NeighborParams};
use matwheel::predictor::{forward, init_predictor, PredictorConfig};
use matwheel::rng::seeded;
use matwheel::structure::{validate_structure, wrap_coords};
use matwheel::{CrystalStructure, DatasetMeta, LabelKind, PropertyRecord};
use proptest::prelude::*;

fn records(n: usize) -> Vec<PropertyRecord<f64>> {
    (0..n)
        .map(|i| {
            let s = CrystalStructure {
                id: format!("r{i}"),
                lattice: [[4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 4.0]],
                species: vec![1],
                frac_coords: vec![[0.0, 0.0, 0.0]],
            };
            PropertyRecord::new(s, i as f64, LabelKind::Real)
        })
        .collect()
}

fn structure_strategy() -> impl Strategy<Value = CrystalStructure<f64>> {
    (any::<u64>(), 1usize..6).prop_map(|(seed, n)| common::random_structure(&mut seeded(seed), n, "p"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_ids(n in 1usize..5000, seed in any::<u64>()) {
        let recs = records(n);
        let split = split_dataset(&recs, (0.70, 0.15, 0.15), seed).unwrap();
        prop_assert_eq!(split.sizes(), split_sizes(n, (0.70, 0.15, 0.15)));
        let (a, b) = (n as f64 * 0.70, n as f64 * 0.15);
        prop_assert_eq!(split.sizes().0, (a + 1e-9).floor() as usize);
        prop_assert_eq!(split.sizes().1, (b + 1e-9).floor() as usize);
        let all: HashSet<&String> = split.train_ids.iter().chain(&split.val_ids).chain(&split.test_ids).collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(split_dataset(&recs, (0.70, 0.15, 0.15), seed).unwrap(), split);
    }

    #[test]
    fn subsample_partitions_train(n in 1usize..2000, fraction in 0.001f64..=1.0, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        let (lab, unl) = subsample_labeled(&ids, fraction, seed);
        prop_assert_eq!(lab.len(), ((fraction * n as f64 + 1e-9).floor() as usize).max(1).min(n));
        let all: HashSet<&String> = lab.iter().chain(&unl).collect();
        prop_assert_eq!(all.len(), n);
    }

    #[test]
    fn wrap_is_idempotent(coords in prop::collection::vec(prop::array::uniform3(-1e6f64..1e6), 1..6)) {
        let s = CrystalStructure {
            id: "w".into(),
            lattice: [[3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 3.0]],
            species: vec![6; coords.len()],
            frac_coords: coords,
        };
        let once = wrap_coords(&s);
        prop_assert!(once.frac_coords.iter().flatten().all(|&x| (0.0..1.0).contains(&x)));
        prop_assert_eq!(wrap_coords(&once), once);
    }

    #[test]
    fn parse_serialize_round_trip(s in structure_strategy(), y in -1e4f64..1e4) {
        let rec = PropertyRecord::new(s, y, LabelKind::Pseudo);
        let line = serialize_record(&rec);
        let back: PropertyRecord<f64> = parse_structure_record(&line).unwrap();
        prop_assert_eq!(back.label_kind, LabelKind::Pseudo);
        prop_assert_eq!(&back.structure.species, &rec.structure.species);
        prop_assert!((back.property - y).abs() <= 1e-12 * y.abs().max(1.0));
        for (a, b) in back.structure.frac_coords.iter().flatten().zip(rec.structure.frac_coords.iter().flatten()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert_eq!(serialize_record(&back), line);
    }

    #[test]
    fn prediction_is_translation_invariant(s in structure_strategy(), shift in prop::array::uniform3(-2.0f64..2.0)) {
        let neighbor = NeighborParams { cutoff: 4.0, n_centers: 8, ..NeighborParams::default() };
        let model = init_predictor::<f64>(&PredictorConfig { embed_dim: 4, hidden_dim: 4, ..PredictorConfig::default() }, &neighbor);
        let mut moved = s.clone();
        for f in &mut moved.frac_coords {
            for k in 0..3 {
                f[k] += shift[k];
            }
        }
        let moved = wrap_coords(&moved);
        let a = forward(&model, &build_graph(&s, &neighbor).unwrap()).unwrap();
        let b = forward(&model, &build_graph(&moved, &neighbor).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-8, "{} vs {}", a, b);
    }

    #[test]
    fn any_encoding_decodes_to_a_valid_structure(
        v in prop::collection::vec(prop_oneof![-1e3f64..1e3, Just(f64::NAN), Just(f64::INFINITY), Just(-1e300)], encoding_len(5)),
    ) {
        let s = decode_material(&v, 5).unwrap();
        let meta = DatasetMeta::new("any", 5, (0.0, 1.0)).unwrap();
        prop_assert!(validate_structure(&s, &meta).is_ok(), "{:?}", s);
    }

    #[test]
    fn encode_decode_preserves_species_and_cell(s in structure_strategy()) {
        let v = encode_material(&s, 6).unwrap();
        let back = decode_material(&v, 6).unwrap();
        prop_assert_eq!(&back.species, &s.species);
        let (p, q) = (matwheel::lattice::cell_parameters(&s.lattice), matwheel::lattice::cell_parameters(&back.lattice));
        for k in 0..6 {
            prop_assert!((p[k] - q[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn mae_is_symmetric_and_zero_on_identity(v in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..50)) {
        let (p, t): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        prop_assert_eq!(mae(&p, &p).unwrap(), 0.0);
        prop_assert_eq!(mae(&p, &t).unwrap(), mae(&t, &p).unwrap());
    }

    #[test]
    fn aggregation_ignores_order_and_round_trips_csv(
        metrics in prop::collection::vec(0.0f64..500.0, 6..30),
        rotate in 0usize..30,
    ) {
        let results: Vec<ArmResult> = metrics
            .iter()
            .enumerate()
            .map(|(i, &m)| ArmResult {
                arm: ArmSpec::ALL[i % 6],
                run_index: i / 6,
                round: 1,
                seed: i as u64,
                test_metric: m,
                train_set_composition: Composition::default(),
                best_epoch: None,
                synthetic_out_of_range: 0,
            })
            .collect();
        let mut shuffled = results.clone();
        shuffled.rotate_left(rotate % results.len());
        shuffled.reverse();
        let cells = aggregate(&results).unwrap();
        prop_assert_eq!(&aggregate(&shuffled).unwrap(), &cells);
        let (name, back) = parse_report_csv(&render_csv("d", &cells)).unwrap();
        prop_assert_eq!(name, "d");
        prop_assert_eq!(back.len(), cells.len());
        let rounded = |x: f64| format!("{x:.6}").parse::<f64>().unwrap();
        for (a, b) in back.iter().zip(&cells) {
            prop_assert_eq!((a.arm, a.round, a.n), (b.arm, b.round, b.n));
            prop_assert!((a.mean - rounded(b.mean)).abs() < 1e-9 && (a.std - rounded(b.std)).abs() < 1e-9);
        }
        prop_assert_eq!(render_csv("d", &back), render_csv("d", &cells));
    }
}
