//! C ABI for the moit library.
//!
//! Conventions:
//! - Handles (`MoitDataset`, `MoitConfig`, `MoitRun`) are opaque pointers
//!   created and destroyed by this library; free each with its matching
//!   `*_free` function exactly once.
//! - Fallible functions return a [`MoitStatus`]; on anything but `Ok` the
//!   message is available from [`moit_last_error`] until the next failing
//!   call on the same thread.
//! - Strings returned as `char*` are NUL-terminated, owned by the caller,
//!   and must be released with [`moit_string_free`].
//! - No function panics across the boundary; internal panics surface as
//!   `MoitStatus::Runtime`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use moit::{
    config::ExperimentConfig,
    data,
    detect,
    model,
    train::{self, EpochMetrics},
    Dataset, Error, Rng, Split,
};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoitStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullPointer = 1,
    /// An argument or configuration value was rejected.
    InvalidArgument = 2,
    /// Filesystem failure.
    Io = 3,
    /// A dataset, config, or CSV file failed to parse.
    Parse = 4,
    /// A checkpoint was missing or malformed.
    Checkpoint = 5,
    /// Numeric or internal failure.
    Runtime = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> MoitStatus {
    match err {
        Error::InvalidConfig(_) | Error::BadK { .. } | Error::InvalidMapping { .. } => {
            MoitStatus::InvalidArgument
        }
        Error::Io(_) => MoitStatus::Io,
        Error::Parse(_) => MoitStatus::Parse,
        Error::Checkpoint(_) => MoitStatus::Checkpoint,
        _ => MoitStatus::Runtime,
    }
}

fn fail(err: &Error) -> MoitStatus {
    set_error(&err.to_string());
    status_of(err)
}

/// Runs a closure, converting panics and errors into status codes.
fn guarded(f: impl FnOnce() -> Result<MoitStatus, Error>) -> MoitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(status)) => status,
        Ok(Err(e)) => fail(&e),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "internal panic".into());
            set_error(&msg);
            MoitStatus::Runtime
        }
    }
}

unsafe fn cstr_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, Error> {
    if ptr.is_null() {
        return Err(Error::InvalidConfig(format!("{name} is NULL")));
    }
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| Error::Parse(format!("{name} is not valid UTF-8")))
}

fn to_owned_cstring(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .unwrap_or_default()
        .into_raw()
}

/// Message of the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn moit_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn moit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Frees a string returned by this library.
///
/// # Safety
/// `s` must be a pointer previously returned by a `moit_*` function that
/// documents caller ownership, and must not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn moit_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

// ---------------------------------------------------------------------------
// Dataset handle
// ---------------------------------------------------------------------------

/// Opaque dataset handle.
pub struct MoitDataset {
    inner: Dataset,
}

/// Generates a Gaussian-blob dataset. `noise` is "none", "sym", or "asym";
/// `asym_group` is the circular-mapping group size (0 = all classes).
///
/// # Safety
/// `noise` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn moit_dataset_generate(
    classes: usize,
    per_class: usize,
    dim: usize,
    center_spread: f64,
    cluster_sigma: f64,
    noise: *const c_char,
    noise_rate: f64,
    asym_group: usize,
    seed: u64,
    out: *mut *mut MoitDataset,
) -> MoitStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out is NULL");
            return Ok(MoitStatus::NullPointer);
        }
        let noise: moit::NoiseKind = unsafe { cstr_arg(noise, "noise")? }.parse()?;
        if !(0.0..=1.0).contains(&noise_rate) {
            return Err(Error::InvalidConfig("noise_rate must be in [0, 1]".into()));
        }
        let mut dataset = data::make_blobs(classes, per_class, dim, center_spread, cluster_sigma, seed)?;
        match noise {
            moit::NoiseKind::None => {}
            moit::NoiseKind::Symmetric => {
                data::inject_symmetric(&mut dataset, noise_rate, &mut Rng::new(seed).derive(0x5e11))
            }
            moit::NoiseKind::Asymmetric => {
                let mapping = data::circular_group_mapping(classes, asym_group);
                data::inject_asymmetric(&mut dataset, noise_rate, &mapping, &mut Rng::new(seed).derive(0x5e11))?;
            }
        }
        unsafe { *out = Box::into_raw(Box::new(MoitDataset { inner: dataset })) };
        Ok(MoitStatus::Ok)
    })
}

/// Loads a dataset file written by `moit_dataset_save` (or the CLI).
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn moit_dataset_load(path: *const c_char, out: *mut *mut MoitDataset) -> MoitStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out is NULL");
            return Ok(MoitStatus::NullPointer);
        }
        let path = unsafe { cstr_arg(path, "path")? };
        let dataset = data::load_dataset(Path::new(path))?;
        unsafe { *out = Box::into_raw(Box::new(MoitDataset { inner: dataset })) };
        Ok(MoitStatus::Ok)
    })
}

/// Writes the dataset in the documented text format.
///
/// # Safety
/// `dataset` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn moit_dataset_save(dataset: *const MoitDataset, path: *const c_char) -> MoitStatus {
    guarded(|| {
        let Some(ds) = (unsafe { dataset.as_ref() }) else {
            set_error("dataset is NULL");
            return Ok(MoitStatus::NullPointer);
        };
        let path = unsafe { cstr_arg(path, "path")? };
        data::save_dataset(&ds.inner, Path::new(path))?;
        Ok(MoitStatus::Ok)
    })
}

/// Number of samples; 0 for a NULL handle.
///
/// # Safety
/// `dataset` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moit_dataset_len(dataset: *const MoitDataset) -> usize {
    unsafe { dataset.as_ref() }.map_or(0, |d| d.inner.len())
}

/// Feature dimension; 0 for a NULL handle.
///
/// # Safety
/// `dataset` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moit_dataset_dim(dataset: *const MoitDataset) -> usize {
    unsafe { dataset.as_ref() }.map_or(0, |d| d.inner.dim())
}

/// Class count; 0 for a NULL handle.
///
/// # Safety
/// `dataset` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moit_dataset_classes(dataset: *const MoitDataset) -> usize {
    unsafe { dataset.as_ref() }.map_or(0, |d| d.inner.classes)
}

/// Number of samples whose label differs from the hidden clean label.
///
/// # Safety
/// `dataset` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moit_dataset_noisy_count(dataset: *const MoitDataset) -> usize {
    unsafe { dataset.as_ref() }.map_or(0, |d| d.inner.noise_mask().iter().filter(|&&m| m).count())
}

/// # Safety
/// `dataset` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn moit_dataset_free(dataset: *mut MoitDataset) {
    if !dataset.is_null() {
        drop(unsafe { Box::from_raw(dataset) });
    }
}

// ---------------------------------------------------------------------------
// Config handle
// ---------------------------------------------------------------------------

/// Opaque experiment-configuration handle.
pub struct MoitConfig {
    inner: ExperimentConfig,
}

/// Creates a config with the library defaults.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn moit_config_default(out: *mut *mut MoitConfig) -> MoitStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out is NULL");
            return Ok(MoitStatus::NullPointer);
        }
        unsafe {
            *out = Box::into_raw(Box::new(MoitConfig {
                inner: ExperimentConfig::default(),
            }))
        };
        Ok(MoitStatus::Ok)
    })
}

/// Parses a full `key = value` config text over the defaults.
///
/// # Safety
/// `text` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn moit_config_parse(text: *const c_char, out: *mut *mut MoitConfig) -> MoitStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out is NULL");
            return Ok(MoitStatus::NullPointer);
        }
        let text = unsafe { cstr_arg(text, "text")? };
        let config = ExperimentConfig::parse(text)?;
        config.train.validate()?;
        unsafe { *out = Box::into_raw(Box::new(MoitConfig { inner: config })) };
        Ok(MoitStatus::Ok)
    })
}

/// Sets one configuration key (same keys as the config file format).
///
/// # Safety
/// `config` must be a live handle; `key` and `value` valid NUL-terminated
/// strings.
#[no_mangle]
pub unsafe extern "C" fn moit_config_set(
    config: *mut MoitConfig,
    key: *const c_char,
    value: *const c_char,
) -> MoitStatus {
    guarded(|| {
        let Some(cfg) = (unsafe { config.as_mut() }) else {
            set_error("config is NULL");
            return Ok(MoitStatus::NullPointer);
        };
        let key = unsafe { cstr_arg(key, "key")? };
        let value = unsafe { cstr_arg(value, "value")? };
        cfg.inner.apply(key, value)?;
        Ok(MoitStatus::Ok)
    })
}

/// Renders the resolved configuration; caller frees with
/// [`moit_string_free`]. Returns NULL for a NULL handle.
///
/// # Safety
/// `config` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moit_config_render(config: *const MoitConfig) -> *mut c_char {
    match unsafe { config.as_ref() } {
        Some(cfg) => to_owned_cstring(cfg.inner.render()),
        None => std::ptr::null_mut(),
    }
}

/// # Safety
/// `config` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn moit_config_free(config: *mut MoitConfig) {
    if !config.is_null() {
        drop(unsafe { Box::from_raw(config) });
    }
}

// ---------------------------------------------------------------------------
// Training runs
// ---------------------------------------------------------------------------

/// Opaque handle to a completed training (and optional fine-tuning) run.
pub struct MoitRun {
    params: model::ModelParams,
    metrics: Vec<EpochMetrics>,
    detection_csv: String,
    clean_global: Vec<usize>,
    clean_size: usize,
}

/// Trains on the dataset with the given configuration.
///
/// # Safety
/// `config` and `dataset` must be live handles; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn moit_train(
    config: *const MoitConfig,
    dataset: *const MoitDataset,
    out: *mut *mut MoitRun,
) -> MoitStatus {
    guarded(|| {
        let (Some(cfg), Some(ds)) = (unsafe { config.as_ref() }, unsafe { dataset.as_ref() }) else {
            set_error("config or dataset is NULL");
            return Ok(MoitStatus::NullPointer);
        };
        if out.is_null() {
            set_error("out is NULL");
            return Ok(MoitStatus::NullPointer);
        }
        let output = train::train_moit(&cfg.inner.train, &ds.inner)?;
        let train_labels: Vec<usize> = output.train_indices.iter().map(|&i| ds.inner.labels[i]).collect();
        let mask = ds.inner.noise_mask();
        let train_mask: Vec<bool> = output.train_indices.iter().map(|&i| mask[i]).collect();
        let run = MoitRun {
            detection_csv: detect::detection_csv(&output.detection, &train_labels, &train_mask),
            clean_global: output.clean_global_indices(),
            clean_size: output.detection.clean_size(),
            params: output.params,
            metrics: output.metrics,
        };
        unsafe { *out = Box::into_raw(Box::new(run)) };
        Ok(MoitStatus::Ok)
    })
}

/// Fine-tunes the run's model on its detected clean set, replacing the
/// stored parameters and appending the fine-tuning metrics.
///
/// # Safety
/// All three handles must be live.
#[no_mangle]
pub unsafe extern "C" fn moit_run_finetune(
    run: *mut MoitRun,
    config: *const MoitConfig,
    dataset: *const MoitDataset,
) -> MoitStatus {
    guarded(|| {
        let (Some(r), Some(cfg), Some(ds)) = (
            unsafe { run.as_mut() },
            unsafe { config.as_ref() },
            unsafe { dataset.as_ref() },
        ) else {
            set_error("run, config, or dataset is NULL");
            return Ok(MoitStatus::NullPointer);
        };
        let (params, metrics) =
            train::finetune_moit_plus(&r.params, &r.clean_global, &ds.inner, &cfg.inner.train)?;
        r.params = params;
        r.metrics.extend(metrics);
        Ok(MoitStatus::Ok)
    })
}

/// Number of logged epochs (training plus any fine-tuning).
///
/// # Safety
/// `run` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moit_run_epoch_count(run: *const MoitRun) -> usize {
    unsafe { run.as_ref() }.map_or(0, |r| r.metrics.len())
}

/// Test accuracy of the last logged epoch (NaN when nothing was logged).
///
/// # Safety
/// `run` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moit_run_test_accuracy(run: *const MoitRun) -> f64 {
    unsafe { run.as_ref() }
        .and_then(|r| r.metrics.last())
        .map_or(f64::NAN, |m| m.test_acc)
}

/// Weighted k-NN accuracy of the last logged epoch (NaN when empty).
///
/// # Safety
/// `run` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moit_run_knn_accuracy(run: *const MoitRun) -> f64 {
    unsafe { run.as_ref() }
        .and_then(|r| r.metrics.last())
        .map_or(f64::NAN, |m| m.knn_acc)
}

/// Size of the detected clean set.
///
/// # Safety
/// `run` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moit_run_clean_size(run: *const MoitRun) -> usize {
    unsafe { run.as_ref() }.map_or(0, |r| r.clean_size)
}

/// Full metrics CSV; caller frees with [`moit_string_free`].
///
/// # Safety
/// `run` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moit_run_metrics_csv(run: *const MoitRun) -> *mut c_char {
    match unsafe { run.as_ref() } {
        Some(r) => to_owned_cstring(train::metrics_csv(&r.metrics)),
        None => std::ptr::null_mut(),
    }
}

/// Detection CSV of the final detection pass; caller frees with
/// [`moit_string_free`].
///
/// # Safety
/// `run` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moit_run_detection_csv(run: *const MoitRun) -> *mut c_char {
    match unsafe { run.as_ref() } {
        Some(r) => to_owned_cstring(r.detection_csv.clone()),
        None => std::ptr::null_mut(),
    }
}

/// Saves the run's model in the documented checkpoint format.
///
/// # Safety
/// `run` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn moit_run_save_checkpoint(run: *const MoitRun, path: *const c_char) -> MoitStatus {
    guarded(|| {
        let Some(r) = (unsafe { run.as_ref() }) else {
            set_error("run is NULL");
            return Ok(MoitStatus::NullPointer);
        };
        let path = unsafe { cstr_arg(path, "path")? };
        model::save_checkpoint(&r.params, Path::new(path))?;
        Ok(MoitStatus::Ok)
    })
}

/// # Safety
/// `run` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn moit_run_free(run: *mut MoitRun) {
    if !run.is_null() {
        drop(unsafe { Box::from_raw(run) });
    }
}

/// Evaluates a saved checkpoint against a dataset file: classifier accuracy
/// and weighted k-NN accuracy on a deterministic test split.
///
/// # Safety
/// `checkpoint` and `data` must be valid NUL-terminated strings;
/// `out_classifier_acc` and `out_knn_acc` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn moit_eval_checkpoint(
    checkpoint: *const c_char,
    data: *const c_char,
    knn_k: usize,
    test_fraction: f64,
    out_classifier_acc: *mut f64,
    out_knn_acc: *mut f64,
) -> MoitStatus {
    guarded(|| {
        if out_classifier_acc.is_null() || out_knn_acc.is_null() {
            set_error("output pointer is NULL");
            return Ok(MoitStatus::NullPointer);
        }
        let ckpt_path = unsafe { cstr_arg(checkpoint, "checkpoint")? };
        let data_path = unsafe { cstr_arg(data, "data")? };
        if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
            return Err(Error::InvalidConfig("test_fraction must be in (0, 1)".into()));
        }
        let params = model::load_checkpoint(Path::new(ckpt_path))?;
        let mut dataset = data::load_dataset(Path::new(data_path))?;
        dataset.assign_splits(test_fraction);
        if params.input_dim() != dataset.dim() || params.classes() != dataset.classes {
            return Err(Error::Checkpoint("checkpoint dims do not match dataset".into()));
        }
        let k = knn_k.min(dataset.indices_of(Split::Train).len()).max(1);
        let (cls, knn) = train::evaluate_on_split(&params, &dataset, k, 1)?;
        unsafe {
            *out_classifier_acc = cls;
            *out_knn_acc = knn;
        }
        Ok(MoitStatus::Ok)
    })
}
