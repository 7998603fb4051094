mod common;

use std::collections::BTreeMap;
use std::path::Path;

use common::tiny_run_config;
use matwheel::flywheel::{ArmSpec, Composition, Flywheel, Scenario};
use matwheel::rundir;
use matwheel::structure::validate_structure;
use matwheel::toy::{toy_dataset, toy_meta};
use matwheel::{Error, LabelKind};

fn pipeline(n_runs: usize, seed: u64, edit: impl FnOnce(&mut matwheel::RunConfig)) -> matwheel::Pipeline {
    let mut cfg = tiny_run_config(n_runs, seed);
    edit(&mut cfg);
    Flywheel::new(cfg, toy_dataset(100, 2), Vec::new()).unwrap()
}

fn comp(real: usize, pseudo: usize, synthetic: usize) -> Composition {
    Composition { real, pseudo, synthetic }
}

#[test]
fn compositions_follow_arm_definitions() {
    let fw = pipeline(2, 1, |_| {});
    let out = fw.run_all(&[Scenario::Full, Scenario::Semi], 2).unwrap();
    assert_eq!(out.results.len(), 12);
    for r in &out.results {
        let want = match r.arm {
            ArmSpec::F => comp(70, 0, 0),
            ArmSpec::GF => comp(0, 0, 60),
            ArmSpec::FPlusGF => comp(70, 0, 60),
            ArmSpec::S => comp(7, 0, 0),
            ArmSpec::GS => comp(0, 0, 60),
            ArmSpec::SPlusGS => comp(7, 0, 60),
        };
        assert_eq!(r.train_set_composition, want, "{:?}", r.arm);
        assert!(r.test_metric.is_finite());
    }
    assert_eq!(out.test_leaks, 0);
    assert_eq!(out.test_reads, 12);
}

#[test]
fn scenario_results_cover_arms_and_runs() {
    let fw = pipeline(3, 4, |_| {});
    let out = fw.run_scenario(Scenario::Full, 1).unwrap();
    let keys: Vec<(ArmSpec, usize)> = out.results.iter().map(|r| (r.arm, r.run_index)).collect();
    let mut want = Vec::new();
    for arm in ArmSpec::for_scenario(Scenario::Full) {
        for run in 0..3 {
            want.push((arm, run));
        }
    }
    assert_eq!(keys, want);
}

#[test]
fn runs_are_reproducible_and_independent_of_jobs() {
    let a = pipeline(2, 9, |_| {}).run_scenario(Scenario::Semi, 1).unwrap();
    let b = pipeline(2, 9, |_| {}).run_scenario(Scenario::Semi, 3).unwrap();
    assert_eq!(a.results, b.results);
    let c = pipeline(2, 10, |_| {}).run_scenario(Scenario::Semi, 1).unwrap();
    assert_ne!(a.results, c.results);
}

#[test]
fn standalone_arm_matches_batched_run() {
    let fw = pipeline(2, 5, |_| {});
    let out = fw.run_all(&[Scenario::Full, Scenario::Semi], 1).unwrap();
    for arm in [ArmSpec::SPlusGS, ArmSpec::GF] {
        let splits = fw.splits(1).unwrap();
        let alone = fw.run_arm(arm, &splits, 1, 1).unwrap();
        let batched = out.results.iter().find(|r| r.arm == arm && r.run_index == 1).unwrap();
        assert_eq!(&alone, batched);
    }
}

#[test]
fn semi_bookkeeping_and_test_sealing() {
    let fw = pipeline(1, 3, |_| {});
    let splits = fw.splits(0).unwrap();
    assert_eq!(splits.labeled.len() + splits.unlabeled.len(), splits.train.len());
    assert!(matches!(splits.test.labels(), Err(Error::TestLeak)));
    assert_eq!(splits.test.sealed_reads(), 1);
    let out = fw.run_scenario(Scenario::Semi, 1).unwrap();
    let stage = &out.stages[0];
    assert_eq!(stage.pseudo_labels.len() + splits.labeled.len(), splits.train.len());
    assert_eq!(out.test_leaks, 0);
}

#[test]
fn one_round_equals_semi_scenario() {
    let fw = pipeline(2, 6, |c| c.rounds = 1);
    assert_eq!(fw.run_flywheel_iterations(1).unwrap().results, fw.run_scenario(Scenario::Semi, 1).unwrap().results);
}

#[test]
fn later_rounds_relabel_with_previous_final_model() {
    let fw = pipeline(1, 7, |c| c.rounds = 3);
    let out = fw.run_flywheel_iterations(1).unwrap();
    let rounds: Vec<usize> = out.results.iter().map(|r| r.round).collect();
    assert_eq!(rounds, [1, 1, 1, 2, 2, 2, 3, 3, 3]);
    let pseudo: BTreeMap<usize, &Vec<f64>> = out.stages.iter().map(|s| (s.round, &s.pseudo_labels)).collect();
    assert_eq!(pseudo.len(), 3);
    assert_ne!(pseudo[&1], pseudo[&2]);
    let first = fw.run_scenario(Scenario::Semi, 1).unwrap();
    assert_eq!(&out.results[..3], &first.results[..]);
    for stage in &out.stages {
        assert_eq!(stage.synthetic_ids.len(), 60);
    }
    assert!(out.results.iter().all(|r| r.test_metric.is_finite()));
}

#[test]
fn synthetic_structures_of_every_round_are_valid() {
    use matwheel::generator::generate_synthetic_set;
    let fw = pipeline(1, 8, |c| c.rounds = 2);
    let out = fw.run_flywheel_iterations(1).unwrap();
    let meta = toy_meta();
    for stage in &out.stages {
        for r in generate_synthetic_set(&stage.generator, &stage.kde, 200, meta.max_atoms, 1) {
            validate_structure(&r.structure, &meta).unwrap();
            assert_eq!(r.label_kind, LabelKind::Synthetic);
        }
    }
}

#[test]
fn options_change_compositions_and_sharing() {
    let fw = pipeline(2, 11, |c| {
        c.options.include_pseudo_in_final = true;
        c.options.fixed_split = true;
        c.options.shared_synthetic = true;
    });
    let out = fw.run_all(&[Scenario::Full, Scenario::Semi], 1).unwrap();
    let s_gs: Vec<_> = out.results.iter().filter(|r| r.arm == ArmSpec::SPlusGS).collect();
    assert!(s_gs.iter().all(|r| r.train_set_composition == comp(7, 63, 60)));
    assert_eq!(fw.splits(0).unwrap().assignment, fw.splits(1).unwrap().assignment);
    let full: Vec<_> = out.stages.iter().filter(|s| s.scenario == Scenario::Full).collect();
    assert_eq!(full[0].synthetic_ids, full[1].synthetic_ids);
    assert_eq!(full[0].generator, full[1].generator);
}

#[test]
fn external_pool_joins_from_round_two() {
    let mut external = toy_dataset::<f64>(20, 99);
    for (k, r) in external.iter_mut().enumerate() {
        r.structure.id = format!("ext-{k}");
    }
    let mut cfg = tiny_run_config(1, 12);
    cfg.rounds = 2;
    let fw = Flywheel::new(cfg, toy_dataset(100, 2), external).unwrap();
    let out = fw.run_flywheel_iterations(1).unwrap();
    let sizes: Vec<(usize, usize)> = out.stages.iter().map(|s| (s.round, s.pseudo_labels.len())).collect();
    assert_eq!(sizes, [(1, 63), (2, 83)]);
}

#[test]
fn invalid_configs_are_rejected_with_field_names() {
    let mut cfg = tiny_run_config(1, 0);
    cfg.labeled_fraction = 0.0;
    cfg.n_runs = 0;
    let err = Flywheel::new(cfg, toy_dataset::<f64>(10, 1), Vec::new()).err().unwrap();
    let Error::Config(msg) = err else { panic!("{err:?}") };
    assert!(msg.contains("labeled_fraction") && msg.contains("n_runs"), "{msg}");
    let cfg = tiny_run_config(1, 0);
    assert!(matches!(Flywheel::<f64>::new(cfg, Vec::new(), Vec::new()), Err(Error::EmptyDataset)));
}

fn dir_snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn run_directory_is_complete_and_byte_identical_on_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let fw = pipeline(2, 13, |_| {});
        let out = fw.run_all(&[Scenario::Full, Scenario::Semi], 1).unwrap();
        rundir::write_run(dir, fw.config(), "toy", &out).unwrap();
        assert!(rundir::is_complete(dir));
    }
    let (sa, sb) = (dir_snapshot(&a), dir_snapshot(&b));
    assert_eq!(sa, sb);
    for name in ["config.json", "seeds.csv", "results.json", "report.csv", "report.md", "DONE", "kde/semi-run1-round1.json"] {
        assert!(sa.contains_key(name), "{name}");
    }
    assert_eq!(sa.keys().filter(|k| k.starts_with("checkpoints/predictor-")).count(), 12);
    let csv = String::from_utf8(sa["report.csv"].clone()).unwrap();
    assert_eq!(csv.lines().count(), 7);
    let stored = rundir::read_results(&a).unwrap();
    assert_eq!(stored.results.len(), 12);
    rundir::begin(&a).unwrap();
    assert!(!rundir::is_complete(&a));
}
