use chiptrap::analysis::mathieu_beta;
use proptest::prelude::*;

/// Independent oracle: trace of the monodromy matrix of
/// x'' + (a - 2q cos 2t) x = 0 over one period (pi), integrated with RK4.
/// For a stable solution cos(pi beta) = trace / 2.
fn floquet_beta(a: f64, q: f64) -> Option<f64> {
    let n = 20_000;
    let h = std::f64::consts::PI / n as f64;
    let rhs = |t: f64, y: [f64; 4]| {
        let k = a - 2.0 * q * (2.0 * t).cos();
        [y[1], -k * y[0], y[3], -k * y[2]]
    };
    let mut y = [1.0, 0.0, 0.0, 1.0];
    for i in 0..n {
        let t = i as f64 * h;
        let k1 = rhs(t, y);
        let y2: [f64; 4] = std::array::from_fn(|j| y[j] + 0.5 * h * k1[j]);
        let k2 = rhs(t + 0.5 * h, y2);
        let y3: [f64; 4] = std::array::from_fn(|j| y[j] + 0.5 * h * k2[j]);
        let k3 = rhs(t + 0.5 * h, y3);
        let y4: [f64; 4] = std::array::from_fn(|j| y[j] + h * k3[j]);
        let k4 = rhs(t + h, y4);
        for j in 0..4 {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    }
    let half_trace = 0.5 * (y[0] + y[3]);
    (half_trace.abs() < 1.0).then(|| half_trace.acos() / std::f64::consts::PI)
}

#[test]
fn zero_drive_gives_zero_tune() {
    assert_eq!(mathieu_beta(0.0, 0.0), Some(0.0));
}

#[test]
fn low_q_matches_lowest_order_and_oracle() {
    let b = mathieu_beta(0.0, 0.3).unwrap();
    // The lowest-order tune sqrt(q^2/2) = 0.2121 is 1.9% low here.
    assert!((b - 0.216_059_134_9).abs() < 1e-9, "{b}");
    assert!((b - (0.3f64 * 0.3 / 2.0).sqrt()).abs() / b < 0.02);
    let o = floquet_beta(0.0, 0.3).unwrap();
    assert!((b - o).abs() < 1e-9, "{b} vs {o}");
}

#[test]
fn baseline_q_tune_brackets_transverse_frequencies() {
    let b = mathieu_beta(0.0, 0.62).unwrap();
    let oracle = floquet_beta(0.0, 0.62).unwrap();
    assert!((b - oracle).abs() < 1e-9, "{b} vs {oracle}");
    let f = b * 15.9e6 / 2.0;
    assert!(f > 3.3e6 && f < 4.3e6, "{f}");
    assert!((f - 3.8255e6).abs() < 1e3);
}

#[test]
fn beyond_first_region_is_unstable() {
    assert!(mathieu_beta(0.0, 0.92).is_none());
    assert!(mathieu_beta(-0.1, 0.1).is_none());
    assert!(floquet_beta(0.0, 0.92).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn continued_fraction_matches_floquet(q in 0.05f64..0.85, a_frac in -0.5f64..0.5) {
        // Keep to the interior of the first stability region.
        let a = a_frac * 0.2 * q;
        if let (Some(b), Some(o)) = (mathieu_beta(a, q), floquet_beta(a, q)) {
            prop_assert!((b - o).abs() < 1e-9, "a={} q={} cf={} floquet={}", a, q, b, o);
        }
    }
}

#[test]
fn baseline_point_tunes() {
    // At q ~ 0.6 the exact tune sits 7-10% above sqrt(a + q^2/2).
    for (a, q, lowest_gap) in [(-0.0615, 0.599, 0.0698), (0.0469, 0.600, 0.1018)] {
        let b = mathieu_beta(a, q).unwrap();
        let o = floquet_beta(a, q).unwrap();
        assert!((b - o).abs() < 1e-9);
        let lowest = (a + q * q / 2.0f64).sqrt();
        assert!(((b - lowest) / lowest - lowest_gap).abs() < 2e-3, "{}", (b - lowest) / lowest);
    }
}
