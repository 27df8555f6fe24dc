//! C interface to `moduleformer`.
//!
//! Models are opaque `MfModel` handles. Every fallible call returns an
//! `MfStatus`; on failure the message is kept per thread and can be read
//! with [`mf_last_error`]. Tokens are byte ids in `0..vocab_size`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use moduleformer::lifecycle::{evaluate, generate, prune, EvalOptions};
use moduleformer::model::{load_checkpoint, save_checkpoint, Model, ModuleFormerConfig};
use moduleformer::Error;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Config = 4,
    Contract = 5,
    NonFinite = 6,
    Checkpoint = 7,
    PruneRefused = 8,
    Diverged = 9,
    Io = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

/// Opaque model handle.
pub struct MfModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(MfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Dimension(_) => MfStatus::Dimension,
            Error::Config(_) => MfStatus::Config,
            Error::Contract(_) => MfStatus::Contract,
            Error::NonFinite(_) => MfStatus::NonFinite,
            Error::Checkpoint(_) => MfStatus::Checkpoint,
            Error::PruneRefused { .. } => MfStatus::PruneRefused,
            Error::Diverged { .. } => MfStatus::Diverged,
            Error::Io { .. } => MfStatus::Io,
        };
        Fail(code, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MfStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(MfStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            MfStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            MfStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(m: *const MfModel) -> Result<&'a Model, Fail> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn model_mut<'a>(m: *mut MfModel) -> Result<&'a mut Model, Fail> {
    m.as_mut().map(|m| &mut m.inner).ok_or_else(|| null("model"))
}

unsafe fn c_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn write_out<T>(p: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(v);
    Ok(())
}

fn token_ids(model: &Model, tokens: &[u32]) -> Result<Vec<usize>, Fail> {
    let v = model.config.vocab_size;
    tokens
        .iter()
        .map(|&t| {
            let t = t as usize;
            if t < v {
                Ok(t)
            } else {
                Err(invalid(format!("token {t} outside vocabulary of {v}")))
            }
        })
        .collect()
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mf_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Freshly initialized model from a named preset (`"desk"` or `"tiny"`).
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_model_new(preset: *const c_char, seed: u64, out: *mut *mut MfModel) -> MfStatus {
    guard(|| {
        let mut config = match c_str(preset, "preset")? {
            "desk" => ModuleFormerConfig::desk(),
            "tiny" => ModuleFormerConfig::tiny(),
            other => return Err(invalid(format!("unknown preset {other:?}"))),
        };
        config.seed = seed;
        let model = Model::new(config)?;
        write_out(out, Box::into_raw(Box::new(MfModel { inner: model })), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_model_load(path: *const c_char, out: *mut *mut MfModel) -> MfStatus {
    guard(|| {
        let path = PathBuf::from(c_str(path, "path")?);
        let model = load_checkpoint(path)?;
        write_out(out, Box::into_raw(Box::new(MfModel { inner: model })), "out")
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mf_model_save(model: *const MfModel, path: *const c_char) -> MfStatus {
    guard(|| {
        let m = model_ref(model)?;
        save_checkpoint(m, PathBuf::from(c_str(path, "path")?))?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mf_model_free(model: *mut MfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mf_model_vocab_size(model: *const MfModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.vocab_size)
}

/// Total, expert and trainable parameter counts. Any out pointer may be null.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_model_param_counts(
    model: *const MfModel,
    total: *mut u64,
    expert: *mut u64,
    trainable: *mut u64,
) -> MfStatus {
    guard(|| {
        let m = model_ref(model)?;
        for (p, v) in [
            (total, m.param_count()),
            (expert, m.expert_param_count()),
            (trainable, m.trainable_param_count()),
        ] {
            if !p.is_null() {
                p.write(v as u64);
            }
        }
        Ok(())
    })
}

/// Next-token logits for one segment, written row-major as `n × vocab`.
///
/// # Safety
/// `tokens` must hold `n` ids; `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mf_model_logits(
    model: *const MfModel,
    tokens: *const u32,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> MfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let ids = token_ids(m, slice(tokens, n, "tokens")?)?;
        if ids.is_empty() {
            return Err(invalid("empty token sequence"));
        }
        let need = ids.len() * m.config.vocab_size;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < need {
            return Err(Fail(MfStatus::BufferTooSmall, format!("need {need} doubles, got {out_len}")));
        }
        let (logits, _) = m.logits(&ids, None)?;
        ptr::copy_nonoverlapping(logits.data().as_ptr(), out, need);
        Ok(())
    })
}

/// Held-out perplexity and mean feed-forward usage entropy over `tokens`,
/// read in segments of `seg_len` (0 = the training length). Either output
/// may be null.
///
/// # Safety
/// `tokens` must hold `n` ids; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_model_evaluate(
    model: *const MfModel,
    tokens: *const u32,
    n: usize,
    seg_len: usize,
    perplexity: *mut f64,
    usage_entropy: *mut f64,
) -> MfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let ids = token_ids(m, slice(tokens, n, "tokens")?)?;
        let seg = if seg_len == 0 { m.config.segment_length } else { seg_len };
        let r = evaluate(m, &ids, EvalOptions::new(seg, 1))?;
        if !perplexity.is_null() {
            perplexity.write(r.perplexity);
        }
        if !usage_entropy.is_null() {
            usage_entropy.write(r.usage.mean_entropy());
        }
        Ok(())
    })
}

/// Samples `n_tokens` bytes after `prompt`. The prompt is copied to the front
/// of `out`; `out_len` receives the bytes written. Temperature 0 is greedy.
///
/// # Safety
/// `prompt` must hold `prompt_len` bytes, `out` `out_cap` writable bytes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn mf_model_generate(
    model: *const MfModel,
    prompt: *const u8,
    prompt_len: usize,
    n_tokens: usize,
    temperature: f64,
    seed: u64,
    out: *mut u8,
    out_cap: usize,
    out_len: *mut usize,
) -> MfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let prompt = slice(prompt, prompt_len, "prompt")?;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_cap < prompt_len + n_tokens {
            return Err(Fail(
                MfStatus::BufferTooSmall,
                format!("need {} bytes, got {out_cap}", prompt_len + n_tokens),
            ));
        }
        let text = generate(m, prompt, n_tokens, temperature, seed)?;
        ptr::copy_nonoverlapping(text.as_ptr(), out, text.len());
        write_out(out_len, text.len(), "out_len")
    })
}

/// Counts expert usage on `tokens` and removes experts whose max-normalized
/// frequency is below `tau`. On refusal the model is unchanged.
///
/// # Safety
/// `tokens` must hold `n` ids; `expert_params_after` may be null.
#[no_mangle]
pub unsafe extern "C" fn mf_model_prune(
    model: *mut MfModel,
    tokens: *const u32,
    n: usize,
    tau: f64,
    expert_params_after: *mut u64,
) -> MfStatus {
    guard(|| {
        let m = model_mut(model)?;
        let ids = token_ids(m, slice(tokens, n, "tokens")?)?;
        let usage = evaluate(m, &ids, EvalOptions::new(m.config.segment_length, 1))?.usage;
        let report = prune(m, &usage, tau)?;
        if !expert_params_after.is_null() {
            expert_params_after.write(report.expert_params_after as u64);
        }
        Ok(())
    })
}
