use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use wsi_triage::config::Config;
use wsi_triage::confidence::{score, PredictionMatrix};
use wsi_triage::manifest::{build_splits_with, SlideRecord, Split, SplitScheme};
use wsi_triage::pipeline::run_slide;
use wsi_triage::synth::{default_labs, generate_corpus_with, SlideGeometry};
use wsi_triage::workflow::train_reference;
use wsi_triage_ffi::*;

fn last_error() -> String {
    let p = wt_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn missing_model_dir_is_an_io_error_naming_the_file() {
    let dir = CString::new("/nonexistent/models").unwrap();
    let mut handle: *mut WtModels = ptr::null_mut();
    let status = unsafe { wt_models_load(dir.as_ptr(), &mut handle) };
    assert_eq!(status, WtStatus::Io);
    assert!(handle.is_null());
    assert!(last_error().contains("/nonexistent/models/reference_stats.txt"));
}

#[test]
fn null_arguments_are_rejected() {
    let status = unsafe { wt_models_load(ptr::null(), ptr::null_mut()) };
    assert_eq!(status, WtStatus::NullArgument);
    let mut s = 0.0;
    let mut c = 0;
    assert_eq!(unsafe { wt_score_matrix(ptr::null(), 3, &mut s, &mut c) }, WtStatus::NullArgument);
    unsafe { wt_models_free(ptr::null_mut()) };
}

#[test]
fn score_matrix_matches_the_library() {
    let rows = vec![[0.1, 0.7, 0.2, 0.0], [0.3, 0.5, 0.9, 0.1], [0.2, 0.6, 0.1, 0.4]];
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let (mut s, mut c) = (0.0, -1);
    assert_eq!(unsafe { wt_score_matrix(flat.as_ptr(), 3, &mut s, &mut c) }, WtStatus::Ok);
    let expected = score(&PredictionMatrix::new(rows).unwrap());
    assert_eq!(s, expected.value);
    assert_eq!(c, expected.class.index() as i32);

    assert_eq!(unsafe { wt_score_matrix(flat.as_ptr(), 0, &mut s, &mut c) }, WtStatus::InvalidInput);
    let bad = [0.5, 1.5, 0.0, 0.0];
    assert_eq!(unsafe { wt_score_matrix(bad.as_ptr(), 1, &mut s, &mut c) }, WtStatus::InvalidInput);
}

#[test]
fn calibrate_thresholds_reports_unreachable_as_infinity() {
    let scores = [0.9, 0.8, 0.7, 0.6];
    let correct = [1u8, 1, 0, 1];
    let targets = [0.75, 0.95, 1.0];
    let mut out = [0.0; 3];
    let status = unsafe { wt_calibrate_thresholds(scores.as_ptr(), correct.as_ptr(), 4, targets.as_ptr(), 3, out.as_mut_ptr()) };
    assert_eq!(status, WtStatus::Ok);
    // retained accuracies at 0, 0.6, 0.7, 0.8, 0.9: 3/4, 3/4, 2/3, 1, 1
    assert_eq!(out, [0.0, 0.8, 0.8]);

    let wrong = [0u8; 4];
    let status = unsafe { wt_calibrate_thresholds(scores.as_ptr(), wrong.as_ptr(), 4, targets.as_ptr(), 1, out.as_mut_ptr()) };
    assert_eq!(status, WtStatus::Ok);
    assert!(out[0].is_infinite());

    let status = unsafe { wt_calibrate_thresholds(scores.as_ptr(), correct.as_ptr(), 0, targets.as_ptr(), 1, out.as_mut_ptr()) };
    assert_eq!(status, WtStatus::InvalidInput);
}

#[test]
fn classify_slide_matches_the_library_pipeline() {
    let geom = SlideGeometry { height: 512, width: 768 };
    let corpus = generate_corpus_with(16, &default_labs()[..1], 1..=1, 11, geom).unwrap();
    let dev = build_splits_with(&corpus.manifest, SplitScheme::Development, [0.5, 0.25, 0.25], 3).unwrap();
    let train: Vec<SlideRecord> = dev.in_split(Split::Train).cloned().collect();
    let val: Vec<SlideRecord> = dev.in_split(Split::Validation).cloned().collect();
    let mut cfg = Config::default();
    cfg.classifier.epochs = 60;
    let (bundle, _) = train_reference(&train, &val, &corpus, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    bundle.save(dir.path()).unwrap();

    let cdir = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut handle: *mut WtModels = ptr::null_mut();
    assert_eq!(unsafe { wt_models_load(cdir.as_ptr(), &mut handle) }, WtStatus::Ok);
    let key = CString::new("confidence.T").unwrap();
    let bad = CString::new("zero").unwrap();
    assert_eq!(unsafe { wt_models_set_config(handle, key.as_ptr(), bad.as_ptr()) }, WtStatus::Parse);
    let unknown = CString::new("no.such.key").unwrap();
    let one = CString::new("1").unwrap();
    assert_eq!(unsafe { wt_models_set_config(handle, unknown.as_ptr(), one.as_ptr()) }, WtStatus::Config);
    assert!(last_error().contains("no.such.key"));

    let mut classified = 0;
    for record in dev.in_split(Split::Test) {
        let raster = corpus.render(record).unwrap().raster;
        let id = CString::new(record.slide_id.as_str()).unwrap();
        let mut out = WtSlideResult {
            outcome: -1,
            class_index: -1,
            score: 0.0,
            column_means: [0.0; 4],
            level: 0,
        };
        let status = unsafe {
            wt_classify_slide(handle, id.as_ptr(), raster.as_raw().as_ptr(), raster.width(), raster.height(), &mut out)
        };
        assert_eq!(status, WtStatus::Ok, "{}", last_error());
        let expected = run_slide(record, &corpus, &bundle, &Config::default()).result.outcome;
        match expected {
            wsi_triage::aggregation::SlideOutcome::Classified { class, score, matrix } => {
                classified += 1;
                assert_eq!(out.outcome, WT_OUTCOME_CLASSIFIED);
                assert_eq!(out.class_index, class.index() as i32);
                assert_eq!(out.score, score);
                assert_eq!(out.column_means, matrix.column_means());
                assert!(out.level >= 0);
            }
            _ => assert_eq!(out.outcome, WT_OUTCOME_NO_ROI),
        }
    }
    assert!(classified > 0);

    let id = CString::new("x").unwrap();
    let mut out = std::mem::MaybeUninit::<WtSlideResult>::uninit();
    let status = unsafe { wt_classify_slide(handle, id.as_ptr(), ptr::null(), 4, 4, out.as_mut_ptr()) };
    assert_eq!(status, WtStatus::NullArgument);
    unsafe { wt_models_free(handle) };
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(wt_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/wsi_triage.h");
    assert!(header.exists());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"wsi_triage.h\"\n\
         int main(void) {\n\
           WtModels *m = 0;\n\
           WtSlideResult r;\n\
           enum WtStatus s = wt_models_load(\"models\", &m);\n\
           if (s == WT_STATUS_OK) wt_classify_slide(m, \"id\", 0, 0, 0, &r);\n\
           wt_models_free(m);\n\
           return s == WT_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let out = match Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    {
        Ok(o) => o,
        Err(e) => {
            eprintln!("skipping: no C compiler `{cc}`: {e}");
            return;
        }
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
