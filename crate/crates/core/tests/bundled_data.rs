//! The files under `data/` must match what the library constructs. Set
//! `WHISKERS_REGEN_DATA=1` to rewrite them.

use std::path::PathBuf;
use whiskers::celestial::{TailEntry, TorusData};
use whiskers::fixtures::{benchmark_map, golden};
use whiskers::model::ModelData;
use whiskers::PrimarySystem;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data")
}

fn torus_sample() -> TorusData {
    TorusData {
        omega: vec![golden(), 2f64.sqrt() - 1.0],
        order_cap: 8,
        known_degree: 12,
        mu_n: 1.0,
        m_n: 1.0,
        big_m_n: 1.0,
        inner_angular_momentum: 0.4,
        tails: vec![
            TailEntry { component: "q".into(), monomial: vec![7, 0, 0, 0, 0, 0], mode: vec![0, 0], re: 0.3, im: 0.0 },
            TailEntry { component: "p".into(), monomial: vec![6, 1, 0, 0, 0, 0], mode: vec![1, 0], re: 0.05, im: 0.02 },
            TailEntry { component: "p".into(), monomial: vec![6, 1, 0, 0, 0, 0], mode: vec![-1, 0], re: 0.05, im: -0.02 },
            TailEntry { component: "phi1".into(), monomial: vec![6, 0, 0, 0, 0, 0], mode: vec![0, 1], re: 0.0, im: -0.1 },
            TailEntry { component: "phi1".into(), monomial: vec![6, 0, 0, 0, 0, 0], mode: vec![0, -1], re: 0.0, im: 0.1 },
        ],
    }
}

fn expected() -> Vec<(&'static str, String)> {
    let pretty = |v: serde_json::Value| serde_json::to_string_pretty(&v).unwrap() + "\n";
    vec![
        ("benchmark_map.json", pretty(serde_json::to_value(benchmark_map(64).to_file()).unwrap())),
        ("torus_sample.json", pretty(serde_json::to_value(torus_sample()).unwrap())),
        (
            "kepler.json",
            pretty(serde_json::to_value(PrimarySystem::single(1.0, vec![golden()]).unwrap().to_file()).unwrap()),
        ),
        (
            "circular_pair.json",
            pretty(serde_json::to_value(PrimarySystem::circular_pair(0.9, 0.1, 1.0, 8).unwrap().to_file()).unwrap()),
        ),
    ]
}

#[test]
fn bundled_files_are_current() {
    let dir = data_dir();
    let regen = std::env::var("WHISKERS_REGEN_DATA").is_ok_and(|v| v == "1");
    for (name, text) in expected() {
        let path = dir.join(name);
        if regen {
            std::fs::create_dir_all(&dir).unwrap();
            std::fs::write(&path, &text).unwrap();
        }
        let on_disk = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
        let a: serde_json::Value = serde_json::from_str(&on_disk).unwrap();
        let b: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(a, b, "{name} is stale");
    }
}

#[test]
fn bundled_files_load() {
    let dir = data_dir();
    let m = ModelData::load(&dir.join("benchmark_map.json")).unwrap();
    assert!(m.validate().is_empty());
    assert_eq!(m.to_file(), benchmark_map(64).to_file());
    let t = TorusData::load(&dir.join("torus_sample.json")).unwrap();
    assert_eq!(t, torus_sample());
    let k = PrimarySystem::load(&dir.join("kepler.json")).unwrap();
    assert_eq!(k.dim(), 1);
    let pair = PrimarySystem::load(&dir.join("circular_pair.json")).unwrap();
    assert!((pair.total_mass() - 1.0).abs() < 1e-15);
}
