use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use saqe::pipeline::{fit_models, predict_quantiles, Method, PredictSettings};
use saqe::rng::RngStream;
use saqe::sim::{draw_sample, gen_population, PopulationDesign, ScenarioSpec};
use saqe_ffi::*;

struct Arrays {
    codes: Vec<i64>,
    x: Vec<f64>,
    y: Vec<f64>,
    census_codes: Vec<i64>,
    census_x: Vec<f64>,
    ranks: Vec<i64>,
}

fn design() -> PopulationDesign {
    PopulationDesign { areas: 6, pop_size: 80, ..ScenarioSpec::default().design() }
}

fn arrays() -> Arrays {
    let design = design();
    let pop = gen_population(&design, RngStream::new(4, 0)).unwrap();
    let (sample, census) = draw_sample(&pop, 10, RngStream::new(4, 1)).unwrap();
    let mut a = Arrays { codes: vec![], x: vec![], y: vec![], census_codes: vec![], census_x: vec![], ranks: vec![] };
    for (k, area) in sample.areas().iter().enumerate() {
        for j in 0..area.n() {
            a.codes.push(k as i64);
            a.x.extend_from_slice(area.row(j));
            a.y.push(area.y()[j]);
        }
        let c = &census.areas()[k];
        let link = c.sample_link().unwrap();
        for i in 0..c.size() {
            a.census_codes.push(k as i64);
            a.census_x.extend_from_slice(c.row(i).unwrap());
            a.ranks.push(link.iter().position(|&r| r == i).map_or(-1, |p| p as i64));
        }
    }
    a
}

fn handles(a: &Arrays) -> (*mut SaqeSample, *mut SaqeCensus) {
    let mut s = ptr::null_mut();
    let mut c = ptr::null_mut();
    unsafe {
        assert_eq!(saqe_sample_new(a.y.len(), 3, a.codes.as_ptr(), a.x.as_ptr(), a.y.as_ptr(), &mut s), SaqeStatus::Ok);
        assert_eq!(
            saqe_census_new(a.census_codes.len(), 3, a.census_codes.as_ptr(), a.census_x.as_ptr(), a.ranks.as_ptr(), &mut c),
            SaqeStatus::Ok
        );
    }
    (s, c)
}

fn last_error() -> String {
    let p = saqe_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn predictions_match_the_library() {
    let a = arrays();
    let (s, c) = handles(&a);
    let alphas = [0.1, 0.5, 0.9];
    let method = CString::new("ebel2").unwrap();
    let mut out = vec![0.0; 18];
    let st = unsafe { saqe_predict(s, c, method.as_ptr(), alphas.as_ptr(), 3, 9, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, SaqeStatus::Ok);
    assert!(saqe_last_error().is_null());

    let design = design();
    let pop = gen_population(&design, RngStream::new(4, 0)).unwrap();
    let (rs, rc) = draw_sample(&pop, 10, RngStream::new(4, 1)).unwrap();
    let settings = PredictSettings::default();
    let fits = fit_models(&rs, Some(&rc), &[Method::Ebel2], &settings, None).unwrap();
    let table = predict_quantiles(Method::Ebel2, &rs, Some(&rc), &fits, &alphas, &settings, RngStream::new(9, 0)).unwrap();
    assert_eq!(out, table.values.concat());
    unsafe {
        assert_eq!(saqe_sample_num_areas(s), 6);
        saqe_sample_free(s);
        saqe_census_free(c);
    }
}

#[test]
fn fits_expose_parameters() {
    let a = arrays();
    let (s, c) = handles(&a);
    let mut ner = ptr::null_mut();
    let mut drm = ptr::null_mut();
    unsafe {
        assert_eq!(saqe_fit_ner(s, c, &mut ner), SaqeStatus::Ok);
        let (mut sv, mut se) = (f64::NAN, f64::NAN);
        assert_eq!(saqe_ner_variances(ner, &mut sv, &mut se), SaqeStatus::Ok);
        assert!(sv >= 0.0 && se > 0.0);
        let mut len = 0;
        assert_eq!(saqe_ner_beta(ner, ptr::null_mut(), 0, &mut len), SaqeStatus::BufferTooSmall);
        assert_eq!(len, 4);
        let mut beta = vec![0.0; len];
        assert_eq!(saqe_ner_beta(ner, beta.as_mut_ptr(), len, &mut len), SaqeStatus::Ok);
        assert!(beta.iter().all(|b| b.is_finite()));

        assert_eq!(saqe_fit_drm(s, &mut drm), SaqeStatus::Ok);
        assert!(saqe_drm_max_constraint_violation(drm) <= 1e-6);
        assert!(saqe_drm_max_constraint_violation(ptr::null()).is_nan());

        saqe_ner_free(ner);
        saqe_drm_free(drm);
        saqe_sample_free(s);
        saqe_census_free(c);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let a = arrays();
    let (s, _c) = handles(&a);
    let alphas = [0.5];
    let mut out = [0.0; 6];
    let ebel = CString::new("ebel2").unwrap();
    let bogus = CString::new("greg").unwrap();
    unsafe {
        let st = saqe_predict(s, ptr::null(), ebel.as_ptr(), alphas.as_ptr(), 1, 1, out.as_mut_ptr(), 6);
        assert_eq!(st, SaqeStatus::Config);
        assert!(last_error().contains("census"));

        let st = saqe_predict(s, ptr::null(), bogus.as_ptr(), alphas.as_ptr(), 1, 1, out.as_mut_ptr(), 6);
        assert_eq!(st, SaqeStatus::Config);

        let st = saqe_predict(s, ptr::null(), ebel.as_ptr(), alphas.as_ptr(), 1, 1, out.as_mut_ptr(), 5);
        assert_eq!(st, SaqeStatus::BufferTooSmall);

        let bad_alpha = [1.5];
        let dir = CString::new("dir").unwrap();
        let st = saqe_predict(s, ptr::null(), dir.as_ptr(), bad_alpha.as_ptr(), 1, 1, out.as_mut_ptr(), 6);
        assert_eq!(st, SaqeStatus::Config);

        let st = saqe_predict(ptr::null(), ptr::null(), dir.as_ptr(), alphas.as_ptr(), 1, 1, out.as_mut_ptr(), 6);
        assert_eq!(st, SaqeStatus::NullPointer);
        assert!(last_error().contains("sample"));

        let mut h = ptr::null_mut();
        let y = [1.0, f64::NAN];
        let x = [0.0, 1.0];
        let codes = [0i64, 0];
        assert_eq!(saqe_sample_new(2, 1, codes.as_ptr(), x.as_ptr(), y.as_ptr(), &mut h), SaqeStatus::Validation);
        assert!(h.is_null());

        let missing = CString::new("/nonexistent/survey.csv").unwrap();
        let col = CString::new("area").unwrap();
        let st = saqe_sample_load_csv(missing.as_ptr(), col.as_ptr(), col.as_ptr(), col.as_ptr(), &mut h);
        assert_eq!(st, SaqeStatus::Config);

        saqe_sample_free(s);
        saqe_sample_free(ptr::null_mut());
    }
}

#[test]
fn census_ranks_must_be_contiguous() {
    let a = arrays();
    let mut ranks = a.ranks.clone();
    let i = ranks.iter().position(|&r| r == 0).unwrap();
    ranks[i] = 40;
    let mut c = ptr::null_mut();
    let st = unsafe {
        saqe_census_new(a.census_codes.len(), 3, a.census_codes.as_ptr(), a.census_x.as_ptr(), ranks.as_ptr(), &mut c)
    };
    assert_eq!(st, SaqeStatus::Validation);
}

#[test]
fn bootstrap_is_seeded() {
    let a = arrays();
    let (s, c) = handles(&a);
    let alphas = [0.25, 0.75];
    let el = CString::new("el").unwrap();
    let run = |seed| {
        let mut out = vec![0.0; 12];
        let st = unsafe { saqe_bootstrap_mse(s, c, el.as_ptr(), alphas.as_ptr(), 2, 8, seed, out.as_mut_ptr(), 12) };
        assert_eq!(st, SaqeStatus::Ok);
        out
    };
    let first = run(3);
    assert_eq!(first, run(3));
    assert_ne!(first, run(4));
    assert!(first.iter().all(|&m| m >= 0.0 && m.is_finite()));
    unsafe {
        saqe_sample_free(s);
        saqe_census_free(c);
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(saqe_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/saqe.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["saqe_predict", "saqe_bootstrap_mse", "saqe_last_error", "saqe_sample_free", "SAQE_STATUS_OK"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let compiler = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"saqe.h\"\nint probe(void) { SaqeSample *s = 0; saqe_sample_free(s); return SAQE_STATUS_OK; }\n",
    )
    .unwrap();
    let status = Command::new(&compiler)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .status();
    match status {
        Ok(s) => assert!(s.success(), "C compiler rejected the header"),
        Err(e) => panic!("no C compiler available as '{compiler}': {e}"),
    }
}
