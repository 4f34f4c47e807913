#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use chiptrap::fields::SolveOptions;
use chiptrap::geometry::GeometryParams;
use chiptrap::trap::TrapModel;

pub fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("bases")
}

/// Baseline geometry at 2 um, solved once and cached between runs.
pub fn baseline_model() -> &'static TrapModel {
    static MODEL: OnceLock<TrapModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = cache_dir();
        std::fs::create_dir_all(&dir).expect("cache dir");
        TrapModel::solve_cached(&GeometryParams::baseline(), 2e-6, &SolveOptions::default(), &dir).expect("baseline bases").0
    })
}
