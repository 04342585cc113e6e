use std::path::PathBuf;

use proptest::prelude::*;
use voltguard::scenario::{load_case_dir, save_case_dir, synth_case, SynthSpec};

fn sample_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/case3")
}

#[test]
fn sample_case_loads() {
    let b = load_case_dir(&sample_dir()).unwrap();
    assert_eq!(b.n(), 3);
    assert_eq!(b.len(), 41);
    assert_eq!(b.labels[0], "0");
    assert_eq!(b.config.v0_kv2, 144.0);
    assert!((b.config.v_min() - 129.96).abs() < 1e-9);
    assert!((b.config.v_max() - 158.76).abs() < 1e-9);
    assert!(b.eta_star() > 0.0);
}

#[test]
fn sample_case_round_trips() {
    let b = load_case_dir(&sample_dir()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_case_dir(&b, dir.path()).unwrap();
    assert_eq!(load_case_dir(dir.path()).unwrap(), b);
    for f in ["edges.csv", "series.csv", "case.conf"] {
        let a = std::fs::read_to_string(sample_dir().join(f)).unwrap();
        let c = std::fs::read_to_string(dir.path().join(f)).unwrap();
        assert_eq!(a, c, "{f} changed on rewrite");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn synthetic_cases_round_trip_exactly(n in 1usize..7, seed in 0u64..1000) {
        let mut spec = SynthSpec::new(n, seed);
        spec.len = 15;
        let b = synth_case(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_case_dir(&b, dir.path()).unwrap();
        let back = load_case_dir(dir.path()).unwrap();
        prop_assert_eq!(back, b);
    }
}
