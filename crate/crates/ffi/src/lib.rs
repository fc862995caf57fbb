//! C ABI for loading a trained recognizer, decoding whole utterances and
//! running streaming sessions.
//!
//! Every function returns a [`ScmoeStatus`]. On failure a message is kept
//! per thread and can be read with [`scmoe_last_error`]. Handles are opaque
//! and must be released with the matching `_free` function. Token buffers
//! are caller-owned: when `capacity` is too small the call returns
//! `SCMOE_STATUS_BUFFER_TOO_SMALL` and writes the required length.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use scmoe::encoder::ChunkSpec;
use scmoe::model::{load_checkpoint, LossWeights, Model, ModelConfig, StreamingSession};
use scmoe::numerics::Tensor;
use scmoe::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScmoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Numeric = 5,
    Checkpoint = 6,
    Io = 7,
    BufferTooSmall = 8,
    Finished = 9,
    Panic = 10,
}

/// A loaded model; shareable between streams.
pub struct ScmoeModel {
    model: Arc<Model>,
}

/// One streaming session.
pub struct ScmoeStream {
    session: Option<StreamingSession>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> ScmoeStatus {
    match err {
        Error::Config(_) | Error::Json(_) => ScmoeStatus::Config,
        Error::Data(_) | Error::UnmappedToken(_) | Error::UnknownUtterance(_) | Error::InfeasibleCtc { .. } => {
            ScmoeStatus::Data
        }
        Error::NonFinite(_) => ScmoeStatus::Numeric,
        Error::Checkpoint(_) => ScmoeStatus::Checkpoint,
        Error::Io(_) => ScmoeStatus::Io,
        _ => ScmoeStatus::InvalidArgument,
    }
}

struct Fail(ScmoeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ScmoeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ScmoeStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            ScmoeStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(ScmoeStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(ScmoeStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn features_arg(data: *const f64, frames: usize, feat_dim: usize) -> Result<Tensor, Fail> {
    if data.is_null() {
        return Err(null("features"));
    }
    let n = frames
        .checked_mul(feat_dim)
        .ok_or_else(|| Fail(ScmoeStatus::InvalidArgument, "frames * feat_dim overflows".into()))?;
    let slice = std::slice::from_raw_parts(data, n);
    Ok(Tensor::new(vec![frames, feat_dim], slice.to_vec())?)
}

unsafe fn write_tokens(tokens: &[usize], out: *mut usize, capacity: usize, len_out: *mut usize) -> Result<(), Fail> {
    if len_out.is_null() {
        return Err(null("len_out"));
    }
    *len_out = tokens.len();
    if tokens.len() > capacity {
        return Err(Fail(
            ScmoeStatus::BufferTooSmall,
            format!("{} tokens do not fit in {capacity}", tokens.len()),
        ));
    }
    if !tokens.is_empty() {
        if out.is_null() {
            return Err(null("tokens_out"));
        }
        ptr::copy_nonoverlapping(tokens.as_ptr(), out, tokens.len());
    }
    Ok(())
}

fn spec_arg(chunk_size: i64, left_chunks: i64) -> Result<ChunkSpec, Fail> {
    Ok(ChunkSpec::new(chunk_size, left_chunks)?)
}

unsafe fn model_ref<'a>(m: *const ScmoeModel) -> Result<&'a ScmoeModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn scmoe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file.
#[no_mangle]
pub unsafe extern "C" fn scmoe_model_load(path: *const c_char, out: *mut *mut ScmoeModel) -> ScmoeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let (model, _) = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(ScmoeModel { model: Arc::new(model) }));
        Ok(())
    })
}

/// Builds an untrained model from a JSON model config (null: defaults).
#[no_mangle]
pub unsafe extern "C" fn scmoe_model_new(config_json: *const c_char, seed: u64, out: *mut *mut ScmoeModel) -> ScmoeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = if config_json.is_null() {
            ModelConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?).map_err(|e| Fail(ScmoeStatus::Config, e.to_string()))?
        };
        let model = Model::new(config, seed)?;
        *out = Box::into_raw(Box::new(ScmoeModel { model: Arc::new(model) }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn scmoe_model_free(model: *mut ScmoeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature dimension and vocabulary size the model expects.
#[no_mangle]
pub unsafe extern "C" fn scmoe_model_dims(model: *const ScmoeModel, feat_dim: *mut usize, vocab_size: *mut usize) -> ScmoeStatus {
    guard(|| {
        let m = model_ref(model)?;
        if feat_dim.is_null() || vocab_size.is_null() {
            return Err(null("output"));
        }
        *feat_dim = m.model.config.feat_dim;
        *vocab_size = m.model.config.vocab_size;
        Ok(())
    })
}

/// Total parameters and parameters activated per frame.
#[no_mangle]
pub unsafe extern "C" fn scmoe_model_count_parameters(
    model: *const ScmoeModel,
    total: *mut u64,
    activated: *mut u64,
) -> ScmoeStatus {
    guard(|| {
        let m = model_ref(model)?;
        if total.is_null() || activated.is_null() {
            return Err(null("output"));
        }
        let c = m.model.count_parameters();
        *total = c.total as u64;
        *activated = c.activated as u64;
        Ok(())
    })
}

/// Two-pass decode of row-major `features` (`frames × feat_dim`) with the
/// decoding weights (lambda 0.3, alpha 0.6).
#[no_mangle]
pub unsafe extern "C" fn scmoe_decode(
    model: *const ScmoeModel,
    features: *const f64,
    frames: usize,
    feat_dim: usize,
    chunk_size: i64,
    left_chunks: i64,
    beam: usize,
    tokens_out: *mut usize,
    capacity: usize,
    len_out: *mut usize,
    score_out: *mut f64,
) -> ScmoeStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = features_arg(features, frames, feat_dim)?;
        let spec = spec_arg(chunk_size, left_chunks)?;
        let res = m.model.attention_rescoring_decode(&x, spec, beam, &LossWeights::DECODE)?;
        if !score_out.is_null() {
            *score_out = res.best().fused_score;
        }
        write_tokens(res.transcript(), tokens_out, capacity, len_out)
    })
}

/// Opens a streaming session on `model` (the model handle may be freed afterwards).
#[no_mangle]
pub unsafe extern "C" fn scmoe_stream_new(
    model: *const ScmoeModel,
    chunk_size: i64,
    left_chunks: i64,
    beam: usize,
    out: *mut *mut ScmoeStream,
) -> ScmoeStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = spec_arg(chunk_size, left_chunks)?;
        let session = StreamingSession::new(Arc::clone(&m.model), spec, beam, LossWeights::DECODE)?;
        *out = Box::into_raw(Box::new(ScmoeStream { session: Some(session) }));
        Ok(())
    })
}

unsafe fn live_session<'a>(stream: *mut ScmoeStream) -> Result<&'a mut StreamingSession, Fail> {
    let s = stream.as_mut().ok_or_else(|| null("stream"))?;
    s.session
        .as_mut()
        .ok_or_else(|| Fail(ScmoeStatus::Finished, "stream already finished".into()))
}

/// Appends frames; `new_partials` receives how many chunks they completed.
#[no_mangle]
pub unsafe extern "C" fn scmoe_stream_push(
    stream: *mut ScmoeStream,
    features: *const f64,
    frames: usize,
    feat_dim: usize,
    new_partials: *mut usize,
) -> ScmoeStatus {
    guard(|| {
        let session = live_session(stream)?;
        let x = features_arg(features, frames, feat_dim)?;
        let emitted = session.push(&x)?;
        if !new_partials.is_null() {
            *new_partials = emitted.len();
        }
        Ok(())
    })
}

/// Latest partial transcript and its 1-based chunk index (0 before the first chunk).
#[no_mangle]
pub unsafe extern "C" fn scmoe_stream_partial(
    stream: *mut ScmoeStream,
    tokens_out: *mut usize,
    capacity: usize,
    len_out: *mut usize,
    chunk_out: *mut usize,
) -> ScmoeStatus {
    guard(|| {
        let session = live_session(stream)?;
        let (chunk, tokens) = session.partials().last().map_or((0, &[][..]), |p| (p.chunk, p.tokens.as_slice()));
        if !chunk_out.is_null() {
            *chunk_out = chunk;
        }
        write_tokens(tokens, tokens_out, capacity, len_out)
    })
}

/// Ends the stream and writes the rescored transcript. The handle stays
/// valid (for `_free`) but accepts no more frames.
#[no_mangle]
pub unsafe extern "C" fn scmoe_stream_finish(
    stream: *mut ScmoeStream,
    tokens_out: *mut usize,
    capacity: usize,
    len_out: *mut usize,
    score_out: *mut f64,
) -> ScmoeStatus {
    guard(|| {
        let s = stream.as_mut().ok_or_else(|| null("stream"))?;
        let session = s
            .session
            .take()
            .ok_or_else(|| Fail(ScmoeStatus::Finished, "stream already finished".into()))?;
        let outcome = session.finish()?;
        if !score_out.is_null() {
            *score_out = outcome.result.best().fused_score;
        }
        write_tokens(outcome.result.transcript(), tokens_out, capacity, len_out)
    })
}

#[no_mangle]
pub unsafe extern "C" fn scmoe_stream_free(stream: *mut ScmoeStream) {
    if !stream.is_null() {
        drop(Box::from_raw(stream));
    }
}
