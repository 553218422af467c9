//! C interface to `cyto_core`.
//!
//! Every fallible function returns a [`CytoStatus`]; on failure the message
//! is available from [`cyto_last_error_message`] on the same thread. Handles
//! are opaque, created by `*_new`/`*_read`/`*_load` functions and released
//! with the matching `*_free`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use cyto_core::cvt::{
    classify_cells, count_parameters, load_weights, random_weights, CvTConfig, CvtError,
    TensorStore,
};
use cyto_core::flowseg::{compute_gt_flows, flow_qc, follow_flows, FlowConfig, FlowSegError};
use cyto_core::imaging::{
    read_flows, read_label_map, write_flows, write_label_map, FlowField, ImagingError, LabelMap,
    RasterImage,
};
use cyto_core::metrics::{binary_seg_metrics, MetricsError};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CytoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Dimension = 5,
    Model = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// CvT architecture variant, passed as `uint32_t`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CytoVariant {
    Original13 = 0,
    PaperTable = 1,
}

/// Flow-following parameters; obtain defaults from
/// [`cyto_flow_params_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CytoFlowParams {
    pub flow_threshold: f64,
    pub cellprob_threshold: f64,
    pub n_euler_steps: usize,
    pub step_size: f64,
    pub min_mask_pixels: usize,
}

/// Binary foreground metrics of a predicted against a reference map.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CytoSegMetrics {
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Opaque instance label map (0 = background).
pub struct CytoLabelMap {
    inner: LabelMap,
}

/// Opaque flow field: `dy`, `dx` and `cellprob` planes, row-major.
pub struct CytoFlowField {
    inner: FlowField,
}

/// Opaque classifier: architecture plus weights.
pub struct CytoModel {
    cfg: CvTConfig,
    weights: TensorStore,
}

struct FfiError {
    status: CytoStatus,
    message: String,
}

impl FfiError {
    fn new(status: CytoStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<ImagingError> for FfiError {
    fn from(e: ImagingError) -> Self {
        let status = match &e {
            ImagingError::Io(_) => CytoStatus::Io,
            ImagingError::Format { .. } => CytoStatus::Format,
            ImagingError::Dimensions { .. }
            | ImagingError::BufferLength { .. }
            | ImagingError::Mismatch(_) => CytoStatus::Dimension,
            _ => CytoStatus::InvalidArgument,
        };
        Self::new(status, e.to_string())
    }
}

impl From<CvtError> for FfiError {
    fn from(e: CvtError) -> Self {
        match e {
            CvtError::Imaging(e) => e.into(),
            CvtError::Io(e) => Self::new(CytoStatus::Io, e.to_string()),
            CvtError::Shape(_) => Self::new(CytoStatus::Dimension, e.to_string()),
            CvtError::Config(_) => Self::new(CytoStatus::InvalidArgument, e.to_string()),
            other => Self::new(CytoStatus::Model, other.to_string()),
        }
    }
}

impl From<FlowSegError> for FfiError {
    fn from(e: FlowSegError) -> Self {
        match e {
            FlowSegError::Imaging(e) => e.into(),
            FlowSegError::Predictor(_) => Self::new(CytoStatus::Dimension, e.to_string()),
            other => Self::new(CytoStatus::InvalidArgument, other.to_string()),
        }
    }
}

impl From<MetricsError> for FfiError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Imaging(e) => e.into(),
            MetricsError::Dimensions(_) => Self::new(CytoStatus::Dimension, e.to_string()),
            other => Self::new(CytoStatus::InvalidArgument, other.to_string()),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn call(f: impl FnOnce() -> Result<(), FfiError>) -> CytoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CytoStatus::Ok,
        Ok(Err(e)) => {
            set_last_error(&e.message);
            e.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            CytoStatus::Panic
        }
    }
}

fn null(what: &str) -> FfiError {
    FfiError::new(CytoStatus::NullPointer, format!("{what} is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, FfiError> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, FfiError> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| FfiError::new(CytoStatus::InvalidArgument, "path is not valid UTF-8"))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), FfiError> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cyto_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the calling thread's most recent failure, or an empty string.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cyto_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(c"".as_ptr(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn cyto_clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

// ------------------------------------------------------------ label maps

/// Copies `width * height` row-major labels into a new map.
///
/// # Safety
/// `data` must point to `width * height` readable `uint32_t`; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cyto_label_map_new(
    width: usize,
    height: usize,
    data: *const u32,
    out: *mut *mut CytoLabelMap,
) -> CytoStatus {
    call(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let n = width
            .checked_mul(height)
            .ok_or_else(|| FfiError::new(CytoStatus::Dimension, "width * height overflows"))?;
        let labels = std::slice::from_raw_parts(data, n).to_vec();
        put(
            out,
            CytoLabelMap {
                inner: LabelMap::new(width, height, labels)?,
            },
        )
    })
}

/// Reads a 16-bit label PNG.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cyto_label_map_read(
    path: *const c_char,
    out: *mut *mut CytoLabelMap,
) -> CytoStatus {
    call(|| {
        put(
            out,
            CytoLabelMap {
                inner: read_label_map(path_arg(path)?)?,
            },
        )
    })
}

/// # Safety
/// `map` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cyto_label_map_write(
    map: *const CytoLabelMap,
    path: *const c_char,
) -> CytoStatus {
    call(|| Ok(write_label_map(&deref(map, "map")?.inner, path_arg(path)?)?))
}

/// # Safety
/// `map` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn cyto_label_map_width(map: *const CytoLabelMap) -> usize {
    map.as_ref().map_or(0, |m| m.inner.width())
}

/// # Safety
/// `map` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn cyto_label_map_height(map: *const CytoLabelMap) -> usize {
    map.as_ref().map_or(0, |m| m.inner.height())
}

/// Number of distinct non-zero labels.
///
/// # Safety
/// `map` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn cyto_label_map_instance_count(map: *const CytoLabelMap) -> usize {
    map.as_ref().map_or(0, |m| m.inner.instance_count())
}

/// Row-major labels, valid while the handle lives.
///
/// # Safety
/// `map` must be a live handle or null (returns null).
#[no_mangle]
pub unsafe extern "C" fn cyto_label_map_data(map: *const CytoLabelMap) -> *const u32 {
    map.as_ref()
        .map_or(std::ptr::null(), |m| m.inner.labels().as_ptr())
}

/// # Safety
/// `map` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cyto_label_map_free(map: *mut CytoLabelMap) {
    free(map)
}

// ----------------------------------------------------------- flow fields

#[no_mangle]
pub extern "C" fn cyto_flow_params_default() -> CytoFlowParams {
    let d = FlowConfig::default();
    CytoFlowParams {
        flow_threshold: d.flow_threshold,
        cellprob_threshold: d.cellprob_threshold,
        n_euler_steps: d.n_euler_steps,
        step_size: d.step_size,
        min_mask_pixels: d.min_mask_pixels,
    }
}

/// Ground-truth flows of a label map (unit vectors inside every instance).
///
/// # Safety
/// `map` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cyto_flow_field_from_labels(
    map: *const CytoLabelMap,
    out: *mut *mut CytoFlowField,
) -> CytoStatus {
    call(|| {
        put(
            out,
            CytoFlowField {
                inner: compute_gt_flows(&deref(map, "map")?.inner)?,
            },
        )
    })
}

/// Reads a `.cytf` flow file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cyto_flow_field_read(
    path: *const c_char,
    out: *mut *mut CytoFlowField,
) -> CytoStatus {
    call(|| {
        put(
            out,
            CytoFlowField {
                inner: read_flows(path_arg(path)?)?,
            },
        )
    })
}

/// # Safety
/// `flows` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cyto_flow_field_write(
    flows: *const CytoFlowField,
    path: *const c_char,
) -> CytoStatus {
    call(|| Ok(write_flows(&deref(flows, "flows")?.inner, path_arg(path)?)?))
}

/// # Safety
/// `flows` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn cyto_flow_field_width(flows: *const CytoFlowField) -> usize {
    flows.as_ref().map_or(0, |f| f.inner.width())
}

/// # Safety
/// `flows` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn cyto_flow_field_height(flows: *const CytoFlowField) -> usize {
    flows.as_ref().map_or(0, |f| f.inner.height())
}

/// Borrows the three planes, each `width * height` floats, valid while the
/// handle lives. Any output pointer may be null.
///
/// # Safety
/// `flows` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cyto_flow_field_planes(
    flows: *const CytoFlowField,
    dy: *mut *const f32,
    dx: *mut *const f32,
    cellprob: *mut *const f32,
) -> CytoStatus {
    call(|| {
        let f = &deref(flows, "flows")?.inner;
        for (out, plane) in [(dy, &f.dy), (dx, &f.dx), (cellprob, &f.cellprob)] {
            if !out.is_null() {
                *out = plane.as_ptr();
            }
        }
        Ok(())
    })
}

/// Follows the flows to instance masks and drops masks whose flow error
/// exceeds the threshold. `params` may be null for defaults.
///
/// # Safety
/// `flows` must be a live handle; `params` null or readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cyto_flow_field_segment(
    flows: *const CytoFlowField,
    params: *const CytoFlowParams,
    out: *mut *mut CytoLabelMap,
) -> CytoStatus {
    call(|| {
        let f = &deref(flows, "flows")?.inner;
        let p = params
            .as_ref()
            .copied()
            .unwrap_or_else(|| cyto_flow_params_default());
        let cfg = FlowConfig {
            flow_threshold: p.flow_threshold,
            cellprob_threshold: p.cellprob_threshold,
            n_euler_steps: p.n_euler_steps,
            step_size: p.step_size,
            min_mask_pixels: p.min_mask_pixels,
            diameter: None,
        };
        cfg.validate()?;
        put(
            out,
            CytoLabelMap {
                inner: flow_qc(&follow_flows(f, &cfg), f, &cfg),
            },
        )
    })
}

/// # Safety
/// `flows` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cyto_flow_field_free(flows: *mut CytoFlowField) {
    free(flows)
}

// ----------------------------------------------------------------- model

fn model_config(
    variant: u32,
    num_classes: usize,
    input_resolution: usize,
) -> Result<CvTConfig, FfiError> {
    let v = match variant {
        v if v == CytoVariant::Original13 as u32 => cyto_core::cvt::Variant::Original13,
        v if v == CytoVariant::PaperTable as u32 => cyto_core::cvt::Variant::PaperTable,
        other => {
            return Err(FfiError::new(
                CytoStatus::InvalidArgument,
                format!("unknown variant {other}"),
            ))
        }
    };
    let mut cfg = CvTConfig::new(v, num_classes);
    cfg.input_resolution = input_resolution;
    cfg.validate()?;
    Ok(cfg)
}

/// Classifier with seeded random weights (for tests and plumbing).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cyto_model_new_random(
    variant: u32,
    num_classes: usize,
    input_resolution: usize,
    seed: u64,
    out: *mut *mut CytoModel,
) -> CytoStatus {
    call(|| {
        let cfg = model_config(variant, num_classes, input_resolution)?;
        let weights = random_weights(&cfg, seed);
        put(out, CytoModel { cfg, weights })
    })
}

/// Classifier from a weights file, checked against the architecture.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cyto_model_load(
    variant: u32,
    num_classes: usize,
    input_resolution: usize,
    path: *const c_char,
    out: *mut *mut CytoModel,
) -> CytoStatus {
    call(|| {
        let cfg = model_config(variant, num_classes, input_resolution)?;
        let weights = load_weights(path_arg(path)?)?;
        weights.check(&cfg)?;
        put(out, CytoModel { cfg, weights })
    })
}

/// # Safety
/// `model` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn cyto_model_num_classes(model: *const CytoModel) -> usize {
    model.as_ref().map_or(0, |m| m.cfg.num_classes)
}

/// Trainable parameters of the architecture.
///
/// # Safety
/// `model` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn cyto_model_parameter_count(model: *const CytoModel) -> usize {
    model.as_ref().map_or(0, |m| count_parameters(&m.cfg).total)
}

/// Classifies every instance of `labels` on an interleaved 8-bit RGB image
/// of the same size. `*count` receives the number of instances; for each,
/// `ids[i]` is its label and `probs[i * num_classes ..]` its class
/// probabilities. With `capacity < *count` nothing is written and
/// `BUFFER_TOO_SMALL` is returned, so `capacity = 0` with null buffers
/// queries the count.
///
/// # Safety
/// `model` and `labels` must be live handles; `rgb` must hold
/// `width * height * 3` bytes; `ids` and `probs` must hold `capacity` and
/// `capacity * num_classes` elements; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cyto_model_classify(
    model: *const CytoModel,
    rgb: *const u8,
    width: usize,
    height: usize,
    labels: *const CytoLabelMap,
    ids: *mut u32,
    probs: *mut f64,
    capacity: usize,
    count: *mut usize,
) -> CytoStatus {
    call(|| {
        let m = deref(model, "model")?;
        let l = &deref(labels, "labels")?.inner;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if count.is_null() {
            return Err(null("count"));
        }
        let n = width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(3))
            .ok_or_else(|| FfiError::new(CytoStatus::Dimension, "image size overflows"))?;
        *count = l.instance_count();
        if capacity < *count {
            return Err(FfiError::new(
                CytoStatus::BufferTooSmall,
                format!("{} instances, capacity {capacity}", *count),
            ));
        }
        if *count > 0 && (ids.is_null() || probs.is_null()) {
            return Err(null("output buffer"));
        }
        let image = RasterImage::new(
            width,
            height,
            3,
            std::slice::from_raw_parts(rgb, n).to_vec(),
        )?;
        let cells = classify_cells(&image, l, &m.cfg, &m.weights)?;
        let k = m.cfg.num_classes;
        for (i, c) in cells.iter().enumerate() {
            *ids.add(i) = c.id;
            std::ptr::copy_nonoverlapping(c.probs.as_ptr(), probs.add(i * k), k);
        }
        *count = cells.len();
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cyto_model_free(model: *mut CytoModel) {
    free(model)
}

// --------------------------------------------------------------- metrics

/// Foreground Dice, sensitivity and specificity of `pred` against `truth`.
///
/// # Safety
/// `pred` and `truth` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cyto_seg_metrics(
    pred: *const CytoLabelMap,
    truth: *const CytoLabelMap,
    out: *mut CytoSegMetrics,
) -> CytoStatus {
    call(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = binary_seg_metrics(&deref(pred, "pred")?.inner, &deref(truth, "truth")?.inner)?;
        *out = CytoSegMetrics {
            dice: m.dice,
            sensitivity: m.sensitivity,
            specificity: m.specificity,
            tp: m.counts.tp,
            tn: m.counts.tn,
            fp: m.counts.fp,
            fn_: m.counts.fn_,
        };
        Ok(())
    })
}
