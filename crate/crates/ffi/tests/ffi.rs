use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use envmon_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0u8; 256];
    unsafe { envmon_last_error_message(buf.as_mut_ptr().cast(), buf.len()) };
    CStr::from_bytes_until_nul(&buf).unwrap().to_string_lossy().into_owned()
}

#[test]
fn calibration_roundtrip() {
    let d = EnvmonConstants { d1: 28172.0, d2: 26073.0, d3: -388.33 };
    let mut p = EnvmonPoly { c0: 0.0, c1: 0.0, c2: 0.0 };
    let mut back = EnvmonConstants { d1: 0.0, d2: 0.0, d3: 0.0 };
    unsafe {
        assert_eq!(envmon_poly_from_constants(&d, &mut p), EnvmonStatus::Ok);
        assert_eq!(envmon_constants_from_poly(&p, &mut back), EnvmonStatus::Ok);
    }
    assert!((back.d1 - d.d1).abs() < 1.0 && (back.d2 - d.d2).abs() < 1.0 && (back.d3 - d.d3).abs() < 0.01);

    let mut t = 0.0;
    let raw = 0.5 * (d.d1 + d.d2);
    unsafe { assert_eq!(envmon_compensate(&p, raw, &mut t), EnvmonStatus::Ok) };
    assert!(t.is_finite());

    let (mut lo, mut hi) = (1.0, 1.0);
    unsafe { assert_eq!(envmon_deviation_range(&d, &d, -40.0, 60.0, &mut lo, &mut hi), EnvmonStatus::Ok) };
    assert_eq!((lo, hi), (0.0, 0.0));
}

#[test]
fn errors_are_reported() {
    let bad = EnvmonPoly { c0: 1.0, c1: 0.0, c2: 1.0 };
    let mut out = EnvmonConstants { d1: 0.0, d2: 0.0, d3: 0.0 };
    unsafe {
        assert_eq!(envmon_constants_from_poly(&bad, &mut out), EnvmonStatus::Calibration);
        assert!(envmon_last_error_length() > 0);
        assert_eq!(envmon_constants_from_poly(ptr::null(), &mut out), EnvmonStatus::NullPointer);
    }
    assert!(last_error().contains("null"));
    let mut small = [0i8; 4];
    let n = unsafe { envmon_last_error_message(small.as_mut_ptr(), small.len()) };
    assert!(n > 3);
    assert_eq!(small[3], 0);
}

#[test]
fn codec_and_buffer_sizing() {
    let sau = CString::new("sau-01").unwrap();
    let sensor = CString::new("bme280@76").unwrap();
    let metric = CString::new("pressure_hpa").unwrap();
    let mut buf = [0 as std::ffi::c_char; 8];
    let mut n = 0usize;
    let st = unsafe {
        envmon_record_encode(sau.as_ptr(), 1, 2, 3, sensor.as_ptr(), metric.as_ptr(), 1013.25, buf.as_mut_ptr(), buf.len(), &mut n)
    };
    assert_eq!(st, EnvmonStatus::BufferTooSmall);
    let mut buf = vec![0 as std::ffi::c_char; n + 1];
    let st = unsafe {
        envmon_record_encode(sau.as_ptr(), 1, 2, 3, sensor.as_ptr(), metric.as_ptr(), 1013.25, buf.as_mut_ptr(), buf.len(), &mut n)
    };
    assert_eq!(st, EnvmonStatus::Ok);
    let r = unsafe { envmon_record_decode(buf.as_ptr()) };
    assert!(!r.is_null());
    unsafe {
        assert_eq!(CStr::from_ptr(envmon_record_sau_id(r)).to_str().unwrap(), "sau-01");
        assert_eq!(CStr::from_ptr(envmon_record_sensor_id(r)).to_str().unwrap(), "bme280@76");
        assert_eq!(envmon_record_value(r), 1013.25);
        assert_eq!((envmon_record_seq(r), envmon_record_timestamp_ms(r)), (1, 2));
        envmon_record_free(r);
    }
    let junk = CString::new("v1 nope").unwrap();
    assert!(unsafe { envmon_record_decode(junk.as_ptr()) }.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn archive_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("a.rra").to_str().unwrap()).unwrap();
    let key = CString::new("s:1:x:temp_c").unwrap();
    let tiers = [EnvmonTier { step_s: 1, capacity: 8, consolidation: 3 }];
    unsafe {
        let a = envmon_archive_new(key.as_ptr(), tiers.as_ptr(), 1);
        assert!(!a.is_null());
        for i in 0..12 {
            assert_eq!(envmon_archive_append(a, i * 1000, i as f64), EnvmonStatus::Ok);
        }
        assert_eq!(envmon_archive_save(a, path.as_ptr()), EnvmonStatus::Ok);
        envmon_archive_free(a);

        let b = envmon_archive_open(key.as_ptr(), path.as_ptr());
        assert!(!b.is_null());
        let mut n = 0usize;
        assert_eq!(
            envmon_archive_query(b, 0, 20_000, 100, ptr::null_mut(), ptr::null_mut(), 0, &mut n),
            EnvmonStatus::BufferTooSmall
        );
        assert_eq!(n, 8);
        let (mut ts, mut v) = (vec![0i64; n], vec![0f64; n]);
        assert_eq!(envmon_archive_query(b, 0, 20_000, 100, ts.as_mut_ptr(), v.as_mut_ptr(), n, &mut n), EnvmonStatus::Ok);
        assert_eq!(ts[0], 4000);
        assert_eq!(v[7], 11.0);
        envmon_archive_free(b);

        let bad = [EnvmonTier { step_s: 1, capacity: 8, consolidation: 9 }];
        assert!(envmon_archive_new(key.as_ptr(), bad.as_ptr(), 1).is_null());
    }
}

#[test]
fn c_smoke_test() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/<test> -> target/<profile>
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libenvmon_ffi.a");
    // cargo test only builds the rlib; ask for the static library too
    let mut build = Command::new(std::env::var("CARGO").unwrap_or_else(|_| "cargo".into()));
    build.args(["build", "--quiet", "-p", "envmon-ffi", "--lib", "--manifest-path"]).arg(manifest.join("Cargo.toml"));
    if profile_dir.file_name().is_some_and(|n| n == "release") {
        build.arg("--release");
    }
    assert!(build.status().expect("cargo").success());
    assert!(lib.exists(), "{} missing", lib.display());
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("envmon_smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&out)
        .status()
        .expect("C compiler");
    assert!(status.success());
    let run = Command::new(&out).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
