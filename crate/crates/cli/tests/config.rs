use std::path::Path;

use chiptrap_cli::config::{schema_value, RunConfig};
use chiptrap_cli::{load_config, CliError, BASELINE_CONFIG};

fn manifest(rel: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

/// Compares a committed file with freshly generated text. Setting
/// CHIPTRAP_BLESS=1 rewrites it instead.
fn check_committed(rel: &str, fresh: &str) {
    let path = manifest(rel);
    if std::env::var_os("CHIPTRAP_BLESS").is_some() {
        std::fs::write(&path, fresh).unwrap();
    }
    let committed = std::fs::read_to_string(&path).unwrap();
    assert_eq!(committed, fresh, "{rel} is stale; rerun with CHIPTRAP_BLESS=1");
}

#[test]
fn published_schema_matches_the_types() {
    check_committed("schema/config.schema.json", &(serde_json::to_string_pretty(&schema_value()).unwrap() + "\n"));
}

#[test]
fn bundled_baseline_config_is_the_default() {
    check_committed("configs/baseline.json", &(serde_json::to_string_pretty(&RunConfig::default()).unwrap() + "\n"));
    assert_eq!(RunConfig::from_json(BASELINE_CONFIG).unwrap(), RunConfig::default());
    assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
}

#[test]
fn unit_suffixed_keys() {
    let text = serde_json::to_string(&RunConfig::default()).unwrap();
    for key in ["\"s_m\"", "\"V0_V\"", "\"Omega_rad_per_s\"", "\"stray_field_V_per_m\"", "\"depth_ref_eV\"", "\"capacitance_F\""] {
        assert!(text.contains(key), "{key}");
    }
    let cfg = RunConfig::from_json(r#"{"drive": {"V0_V": 6.5}, "geometry": {"s_m": 5e-5}}"#).unwrap();
    assert_eq!(cfg.drive.v0_v, 6.5);
    assert_eq!(cfg.geometry.s_m, 5e-5);
    assert_eq!(cfg.drive.omega_rad_per_s, RunConfig::default().drive.omega_rad_per_s);
}

#[test]
fn unknown_key_is_named() {
    let e = RunConfig::from_json(r#"{"drive": {"V0": 8.0}}"#).unwrap_err();
    assert!(e.contains("drive.V0"), "{e}");
    let e = RunConfig::from_json(r#"{"drive": {"species": {"mass": 1.0}}}"#).unwrap_err();
    assert!(e.contains("drive.species.mass"), "{e}");
    let e = RunConfig::from_json(r#"{"geometry": {"s_m": "wide"}}"#).unwrap_err();
    assert!(e.contains("s_m"), "{e}");
    assert!(RunConfig::from_json("{").unwrap_err().contains("invalid JSON"));
}

#[test]
fn out_of_range_values_are_rejected() {
    for bad in [
        r#"{"geometry": {"s_m": -1.0}}"#,
        r#"{"grid": {"tol": 0.0}}"#,
        r#"{"drive": {"zone_segment": 4}}"#,
        r#"{"drive": {"dc_voltages_V": [1.0]}}"#,
        r#"{"shuttle": {"durations_s": []}}"#,
        r#"{"tickle": {"electrode": 99}}"#,
    ] {
        assert!(RunConfig::from_json(bad).is_err(), "{bad}");
    }
}

#[test]
fn config_errors_exit_with_two() {
    let dir = std::env::temp_dir().join(format!("chiptrap-cfg-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let p = dir.join("bad.json");
    std::fs::write(&p, r#"{"heat": {"S_E": 1.0}}"#).unwrap();
    let e = load_config(Some(&p)).unwrap_err();
    assert!(matches!(e, CliError::Config(_)) && e.exit_code() == 2);
    let missing = load_config(Some(&dir.join("absent.json"))).unwrap_err();
    assert_eq!(missing.exit_code(), 2);
    assert_eq!(CliError::Compute("x".into()).exit_code(), 1);
}

#[test]
fn hash_tracks_content() {
    let a = RunConfig::default();
    let mut b = a.clone();
    assert_eq!(a.hash(), b.hash());
    b.drive.v0_v = 7.0;
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 16);
}

#[test]
fn baseline_drive_levels() {
    let d = RunConfig::default().drive_config(None);
    assert_eq!(d.dc_voltages.len(), 16);
    // Segment 1 DC electrodes are the well centre, the rest endcaps, RF 0.
    let rf = [0, 3, 4, 7, 8, 11, 12, 15];
    for (id, v) in d.dc_voltages.iter().enumerate() {
        let want = if rf.contains(&id) {
            0.0
        } else if id / 4 == 1 {
            -0.33
        } else {
            1.0
        };
        assert_eq!(*v, want, "electrode {id}");
    }
}
