//! C ABI over the triage engine.
//!
//! Every function returns a [`WtStatus`]; on failure the message is available
//! from [`wt_last_error_message`] on the same thread. Model bundles are
//! opaque [`WtModels`] handles released with [`wt_models_free`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use wsi_triage::aggregation::SlideOutcome;
use wsi_triage::confidence::{calibrate_thresholds, score, PredictionMatrix, Threshold};
use wsi_triage::config::Config;
use wsi_triage::image::RgbImage;
use wsi_triage::manifest::SlideRecord;
use wsi_triage::models::ModelBundle;
use wsi_triage::pipeline::{run_slide, SlideSource};
use wsi_triage::{ClassLabel, Error, N_CLASSES};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WtStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidInput = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Undefined = 6,
    Panic = 7,
}

/// Loaded models plus the run configuration used by [`wt_classify_slide`].
pub struct WtModels {
    bundle: ModelBundle,
    config: Config,
}

/// `outcome` values of [`WtSlideResult`].
pub const WT_OUTCOME_CLASSIFIED: i32 = 0;
pub const WT_OUTCOME_NO_ROI: i32 = 1;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WtSlideResult {
    /// `WT_OUTCOME_CLASSIFIED` or `WT_OUTCOME_NO_ROI`.
    pub outcome: i32,
    /// Class index (0 Basaloid, 1 Squamous, 2 Melanocytic, 3 Other); -1 without ROI.
    pub class_index: i32,
    /// Confidence score; NaN without ROI.
    pub score: f64,
    pub column_means: [f64; 4],
    /// Highest confidence level whose threshold the score clears; 0 for none,
    /// -1 when the models carry no thresholds.
    pub level: i32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> WtStatus {
    match e {
        Error::InvalidInput(_) => WtStatus::InvalidInput,
        Error::Parse { .. } => WtStatus::Parse,
        Error::Io { .. } => WtStatus::Io,
        Error::UndefinedAuc(_) => WtStatus::Undefined,
        Error::UnknownConfigKey(_) | Error::Config(_) => WtStatus::Config,
    }
}

fn guard(f: impl FnOnce() -> Result<(), WtStatus>) -> WtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WtStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            WtStatus::Panic
        }
    }
}

fn fail(e: Error) -> WtStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn null(name: &str) -> WtStatus {
    set_error(format!("null argument `{name}`"));
    WtStatus::NullArgument
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, WtStatus> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("`{name}` is not valid UTF-8"));
        WtStatus::InvalidInput
    })
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn wt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a model directory written by `wsi-triage train` or `calibrate`.
#[no_mangle]
pub unsafe extern "C" fn wt_models_load(dir: *const c_char, out: *mut *mut WtModels) -> WtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = str_arg(dir, "dir")?;
        let bundle = ModelBundle::load(Path::new(dir)).map_err(fail)?;
        *out = Box::into_raw(Box::new(WtModels {
            bundle,
            config: Config::default(),
        }));
        Ok(())
    })
}

/// Releases a handle from [`wt_models_load`]. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn wt_models_free(models: *mut WtModels) {
    if !models.is_null() {
        drop(Box::from_raw(models));
    }
}

/// Sets one configuration key (same keys as the config file).
#[no_mangle]
pub unsafe extern "C" fn wt_models_set_config(models: *mut WtModels, key: *const c_char, value: *const c_char) -> WtStatus {
    guard(|| {
        let m = models.as_mut().ok_or_else(|| null("models"))?;
        let key = str_arg(key, "key")?;
        let value = str_arg(value, "value")?;
        m.config.set_override(&format!("{key}={value}")).map_err(fail)
    })
}

struct OneRaster<'a>(&'a RgbImage);

impl SlideSource for OneRaster<'_> {
    fn load(&self, _: &SlideRecord) -> wsi_triage::Result<RgbImage> {
        Ok(self.0.clone())
    }
}

/// Classifies one slide from packed 8-bit RGB rows (`width * height * 3`
/// bytes). `slide_id` keys the random masks, so the same id and pixels give
/// the same result.
#[no_mangle]
pub unsafe extern "C" fn wt_classify_slide(
    models: *const WtModels,
    slide_id: *const c_char,
    rgb: *const u8,
    width: usize,
    height: usize,
    out: *mut WtSlideResult,
) -> WtStatus {
    guard(|| {
        let m = models.as_ref().ok_or_else(|| null("models"))?;
        let slide_id = str_arg(slide_id, "slide_id")?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let len = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| fail(Error::InvalidInput("raster size overflows".into())))?;
        let raster = RgbImage::from_raw(width, height, std::slice::from_raw_parts(rgb, len).to_vec()).map_err(fail)?;
        let record = SlideRecord {
            slide_id: slide_id.to_string(),
            specimen_id: slide_id.to_string(),
            lab_id: String::new(),
            truth: ClassLabel::Other,
            raster_path: Default::default(),
        };
        let run = run_slide(&record, &OneRaster(&raster), &m.bundle, &m.config);
        let result = match run.result.outcome {
            SlideOutcome::Classified { class, score, matrix } => {
                let level = match &m.bundle.thresholds {
                    None => -1,
                    Some(t) => (1..=t.levels())
                        .filter(|&k| matches!(t.get(k), Some(Threshold::Value(v)) if score >= v))
                        .max()
                        .unwrap_or(0) as i32,
                };
                WtSlideResult {
                    outcome: WT_OUTCOME_CLASSIFIED,
                    class_index: class.index() as i32,
                    score,
                    column_means: matrix.column_means(),
                    level,
                }
            }
            SlideOutcome::NoRoi => WtSlideResult {
                outcome: WT_OUTCOME_NO_ROI,
                class_index: -1,
                score: f64::NAN,
                column_means: [f64::NAN; 4],
                level: 0,
            },
            SlideOutcome::Failed { error } => return Err(fail(Error::InvalidInput(error))),
        };
        *out = result;
        Ok(())
    })
}

/// Confidence score of a row-major `t x 4` matrix of sigmoid outputs: the
/// largest column mean and its class index.
#[no_mangle]
pub unsafe extern "C" fn wt_score_matrix(values: *const f64, t: usize, out_score: *mut f64, out_class: *mut i32) -> WtStatus {
    guard(|| {
        if values.is_null() {
            return Err(null("values"));
        }
        if out_score.is_null() || out_class.is_null() {
            return Err(null("out"));
        }
        let len = t
            .checked_mul(N_CLASSES)
            .ok_or_else(|| fail(Error::InvalidInput("matrix size overflows".into())))?;
        let flat = std::slice::from_raw_parts(values, len);
        let rows = flat.chunks_exact(N_CLASSES).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        let s = score(&PredictionMatrix::new(rows).map_err(fail)?);
        *out_score = s.value;
        *out_class = s.class.index() as i32;
        Ok(())
    })
}

/// Smallest threshold per target whose retained validation accuracy reaches
/// it. `correct[i]` is non-zero when specimen i was classified correctly.
/// Unreachable targets are reported as +infinity.
#[no_mangle]
pub unsafe extern "C" fn wt_calibrate_thresholds(
    scores: *const f64,
    correct: *const u8,
    n: usize,
    targets: *const f64,
    n_targets: usize,
    out_thresholds: *mut f64,
) -> WtStatus {
    guard(|| {
        if scores.is_null() || correct.is_null() || targets.is_null() || out_thresholds.is_null() {
            return Err(null("scores/correct/targets/out_thresholds"));
        }
        let s = std::slice::from_raw_parts(scores, n);
        let c = std::slice::from_raw_parts(correct, n);
        let results: Vec<(f64, bool)> = s.iter().zip(c).map(|(&s, &c)| (s, c != 0)).collect();
        let targets = std::slice::from_raw_parts(targets, n_targets);
        let set = calibrate_thresholds(&results, targets).map_err(fail)?;
        let out = std::slice::from_raw_parts_mut(out_thresholds, n_targets);
        for (o, t) in out.iter_mut().zip(&set.thresholds) {
            *o = match t {
                Threshold::Value(v) => *v,
                Threshold::Unreachable => f64::INFINITY,
            };
        }
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
