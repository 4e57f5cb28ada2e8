//! Calibration properties against an exact rational oracle.

use envmon::calibration::*;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive};
use proptest::prelude::*;

fn rat(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

fn pow2(n: u32) -> BigRational {
    BigRational::from_integer(BigInt::one() << n)
}

/// Coefficients from the constants, computed exactly and rounded once.
fn oracle_poly(d1: f64, d2: f64, d3: f64) -> (f64, f64, f64) {
    let (d1, d2, d3) = (rat(d1), rat(d2), rat(d3));
    let four_fifths = BigRational::new(4.into(), 5.into());
    let k0 = &four_fifths / pow2(22);
    let k1 = &four_fifths / pow2(26);
    let k2 = &four_fifths / pow2(46);
    let c0 = -(k0 * (&d1 * &d2 - &d1 * &d1 * &d3 / pow2(16)));
    let c1 = k1 * (&d2 - &d1 * &d3 / pow2(15));
    let c2 = k2 * d3;
    (c0.to_f64().unwrap(), c1.to_f64().unwrap(), c2.to_f64().unwrap())
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

fn constants() -> impl Strategy<Value = (f64, f64, f64)> {
    (25_000.0..32_000.0f64, 20_000.0..30_000.0f64, -3_000.0..3_000.0f64)
}

#[test]
fn oracle_matches_worked_example() {
    let (c0, c1, c2) = oracle_poly(28205.0, 28205.0, 50.0);
    let p = poly_from_constants(&DeviceConstants::new(28205.0, 28205.0, 50.0));
    assert!((c0 - -151.6).abs() < 0.1, "{c0}");
    assert!((c1 - 3.357e-4).abs() < 1e-7, "{c1}");
    assert!((c2 - 5.68e-13).abs() < 1e-15, "{c2}");
    assert!(rel_close(p.c0, c0, 1e-13) && rel_close(p.c1, c1, 1e-13) && rel_close(p.c2, c2, 1e-13));
}

#[test]
fn discriminant_identity_exact() {
    // c1^2 - 4 c0 c2 == (K_C1 d2)^2 as rationals
    let (d1, d2, d3) = (rat(28469.0), rat(26034.0), rat(753.63));
    let four_fifths = BigRational::new(4.into(), 5.into());
    let k0 = &four_fifths / pow2(22);
    let k1 = &four_fifths / pow2(26);
    let k2 = &four_fifths / pow2(46);
    let c0 = -(k0 * (&d1 * &d2 - &d1 * &d1 * &d3 / pow2(16)));
    let c1 = &k1 * (&d2 - &d1 * &d3 / pow2(15));
    let c2 = k2 * d3;
    let lhs = &c1 * &c1 - BigRational::from_integer(4.into()) * c0 * c2;
    let rhs = (&k1 * &d2) * (k1 * d2);
    assert_eq!(lhs, rhs);
    assert!(lhs.is_positive());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn forward_map_matches_oracle((d1, d2, d3) in constants()) {
        let p = poly_from_constants(&DeviceConstants::new(d1, d2, d3));
        let (c0, c1, c2) = oracle_poly(d1, d2, d3);
        prop_assert!(rel_close(p.c0, c0, 1e-12), "c0 {} vs {}", p.c0, c0);
        // c1 is a difference of two similar terms; allow for that cancellation
        prop_assert!((p.c1 - c1).abs() <= 1e-12 * (K_C1 * (d2.abs() + (d1 * d3).abs() / 32768.0)));
        prop_assert!(rel_close(p.c2, c2, 1e-15));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn roundtrip_recovers_constants((d1, d2, d3) in constants()) {
        let d = DeviceConstants::new(d1, d2, d3);
        let back = constants_from_poly(&poly_from_constants(&d)).unwrap();
        prop_assert!((back.d1 - d1).abs() < 1e-6 * d1, "d1 {} vs {}", back.d1, d1);
        prop_assert!((back.d2 - d2).abs() < 1e-6 * d2, "d2 {} vs {}", back.d2, d2);
        prop_assert!((back.d3 - d3).abs() < 1e-6 * d3.abs().max(1.0), "d3 {} vs {}", back.d3, d3);
    }

    #[test]
    fn discriminant_identity((d1, d2, d3) in constants()) {
        let p = poly_from_constants(&DeviceConstants::new(d1, d2, d3));
        let expected = (K_C1 * d2).powi(2);
        prop_assert!(rel_close(p.discriminant(), expected, 1e-9));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn deviation_against_itself_is_zero((d1, d2, d3) in constants()) {
        let d = DeviceConstants::new(d1, d2, d3);
        if let Ok(r) = deviation_range(&d, &d, -40.0, 60.0) {
            prop_assert_eq!((r.at_lo, r.at_hi), (0.0, 0.0));
        }
    }

    #[test]
    fn deviation_sign_flips_with_swapped_roles(
        (d1, d2, d3) in constants(),
        (dd1, dd2) in (-300.0..300.0f64, -300.0..300.0f64),
    ) {
        // swapping factory and fresh changes the sign at the endpoints to
        // first order; check the sign and the magnitude loosely
        let a = DeviceConstants::new(d1, d2, d3);
        let b = DeviceConstants::new(d1 + dd1, d2 + dd2, d3);
        let (Ok(ab), Ok(ba)) = (deviation_range(&a, &b, -40.0, 60.0), deviation_range(&b, &a, -40.0, 60.0)) else {
            return Ok(());
        };
        for (x, y) in [(ab.at_lo, ba.at_lo), (ab.at_hi, ba.at_hi)] {
            prop_assert!(x * y <= 1e-9, "{x} {y}");
            prop_assert!((x + y).abs() <= 0.05 * x.abs().max(y.abs()) + 1e-9, "{x} {y}");
        }
    }

    #[test]
    fn exact_sweep_refits_to_same_curve((d1, d2, d3) in constants(), n in 20usize..60) {
        let truth = DeviceConstants::new(d1, d2, d3).to_poly();
        let mut points = Vec::new();
        for i in 0..n {
            let t = -40.0 + 100.0 * i as f64 / (n - 1) as f64;
            let Some(raw) = truth.raw_for(t) else { return Ok(()) };
            // 0.1 °C/min keeps inside the ramp limit
            points.push(SweepPoint { t_elapsed: i as f64 * 6000.0, t_ref_c: t, t_raw: raw });
        }
        let sweep = ChamberSweep::new(points, false).unwrap();
        let r = recalibrate_detailed(&sweep).unwrap();
        prop_assert!(r.max_residual_k < 1e-6, "residual {}", r.max_residual_k);
        for i in 0..=100 {
            let t = -40.0 + i as f64;
            let raw = truth.raw_for(t).unwrap();
            prop_assert!((r.poly.eval(raw) - t).abs() < 1e-6);
        }
    }

    #[test]
    fn offset_apply_remove_is_exact(
        raw in proptest::collection::vec(-880i32..2000, 1..64),
        reference in -10.0..40.0f64,
        jitter in 0i32..7,
    ) {
        // readings on the 1/16 K grid within a stable bath
        let base = raw[0];
        let readings: Vec<f64> = raw.iter().map(|r| (base + (r - base).rem_euclid(jitter + 1)) as f64 / 16.0).collect();
        let cal = ds18b20_offset(&readings, reference).unwrap();
        for &r in &readings {
            prop_assert_eq!(cal.remove(cal.apply(r)), r);
        }
        let mean = readings.iter().sum::<f64>() / readings.len() as f64;
        prop_assert!((mean + cal.offset - reference).abs() <= 2f64.powi(-20));
    }
}

#[test]
fn fit_rejects_degenerate_sweeps() {
    let pt = |t: f64, raw: f64| SweepPoint { t_elapsed: t, t_ref_c: 20.0, t_raw: raw };
    let two = ChamberSweep::new(vec![pt(0.0, 1.0), pt(60.0, 2.0)], false).unwrap();
    assert_eq!(fit_poly(&two), Err(CalibError::InsufficientData(2)));
    let same: Vec<_> = (0..5).map(|i| pt(i as f64 * 60.0, 500_000.0)).collect();
    let same = ChamberSweep::new(same, false).unwrap();
    assert!(matches!(fit_poly(&same), Err(CalibError::SingularFit { .. })));
}
