//! C interface to the pipeline.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free`. Every fallible call returns a [`PfStatus`]; on
//! failure the message is kept per thread and read with
//! [`pf_last_error_message`]. Panics are caught at the boundary and reported
//! as [`PfStatus::Panic`].
//!
//! # Safety
//!
//! Every pointer argument must be null or valid for the access its
//! documentation describes: handles come from this library and are freed at
//! most once, and array arguments hold at least the stated element count.
//! Null is always detected and reported, never dereferenced.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use pointfuse::comms::{encoded_len, pack, unpack, CommReport, MessagePacket};
use pointfuse::error::Error;
use pointfuse::harness::{run_pipeline, token_budget, RunReport, ScenarioConfig};
use pointfuse::serialization::hilbert_key;
use pointfuse::tensor::Matrix;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    ShapeMismatch = 3,
    Numeric = 4,
    Decode = 5,
    Io = 6,
    Json = 7,
    Utf8 = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Scenario configuration.
pub struct PfConfig(ScenarioConfig);

/// Result of one pipeline run.
pub struct PfReport(RunReport);

/// A decoded message packet.
pub struct PfPacket(MessagePacket);

/// Headline numbers of a run.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PfRunSummary {
    pub agents: usize,
    pub fused_tokens: usize,
    pub payload_bytes: u64,
    pub total_bytes: u64,
    pub foreground_total: usize,
    pub foreground_retained: usize,
    pub recall: f64,
    pub aligned_recall: f64,
    pub offset_loss: f64,
    pub flops_total: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> PfStatus {
    match err {
        Error::InvalidInput(_) | Error::UnknownModule(_) => PfStatus::InvalidInput,
        Error::ShapeMismatch { .. } => PfStatus::ShapeMismatch,
        Error::DegenerateNormalization { .. } => PfStatus::Numeric,
        Error::BadMagic { .. } | Error::UnsupportedVersion { .. } | Error::Length { .. } => PfStatus::Decode,
        Error::Io(_) => PfStatus::Io,
        Error::Json(_) => PfStatus::Json,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (PfStatus, String)>) -> PfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PfStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            PfStatus::Panic
        }
    }
}

fn lib(err: Error) -> (PfStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (PfStatus, String) {
    (PfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (PfStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), (PfStatus, String)> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Copies `bytes` into `buf`. `written` receives the length needed, which on
/// [`PfStatus::BufferTooSmall`] tells the caller how much to allocate.
unsafe fn copy_out(bytes: &[u8], buf: *mut u8, cap: usize, written: *mut usize) -> Result<(), (PfStatus, String)> {
    if !written.is_null() {
        written.write(bytes.len());
    }
    if cap < bytes.len() {
        return Err((PfStatus::BufferTooSmall, format!("need {} bytes, have {cap}", bytes.len())));
    }
    if !bytes.is_empty() {
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
    }
    Ok(())
}

/// Length of the thread's last error message in bytes, excluding the NUL.
#[no_mangle]
pub extern "C" fn pf_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message, NUL-terminated and truncated to `cap`.
/// Returns the number of bytes written, excluding the NUL.
#[no_mangle]
pub unsafe extern "C" fn pf_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    if buf.is_null() || cap == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let n = e.len().min(cap - 1);
        ptr::copy_nonoverlapping(e.as_ptr().cast::<c_char>(), buf, n);
        *buf.add(n) = 0;
        n
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn pf_config_new_default(out: *mut *mut PfConfig) -> PfStatus {
    guard(|| write_out(out, Box::into_raw(Box::new(PfConfig(ScenarioConfig::default()))), "out"))
}

/// Parses a JSON scenario; absent fields take their defaults.
#[no_mangle]
pub unsafe extern "C" fn pf_config_from_json(json: *const c_char, out: *mut *mut PfConfig) -> PfStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        let text = CStr::from_ptr(json).to_str().map_err(|e| (PfStatus::Utf8, e.to_string()))?;
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| (PfStatus::Json, e.to_string()))?;
        cfg.validate().map_err(lib)?;
        write_out(out, Box::into_raw(Box::new(PfConfig(cfg))), "out")
    })
}

unsafe fn config_mut<'a>(cfg: *mut PfConfig) -> Result<&'a mut ScenarioConfig, (PfStatus, String)> {
    cfg.as_mut().map(|c| &mut c.0).ok_or_else(|| null("config"))
}

#[no_mangle]
pub unsafe extern "C" fn pf_config_set_seed(cfg: *mut PfConfig, seed: u64) -> PfStatus {
    guard(|| {
        config_mut(cfg)?.seed = seed;
        Ok(())
    })
}

/// Tokens each agent transmits; 0 transmits everything.
#[no_mangle]
pub unsafe extern "C" fn pf_config_set_top_k(cfg: *mut PfConfig, k: usize) -> PfStatus {
    guard(|| {
        config_mut(cfg)?.top_k = (k > 0).then_some(k);
        Ok(())
    })
}

/// Neighbor localization noise: meters and radians.
#[no_mangle]
pub unsafe extern "C" fn pf_config_set_noise(cfg: *mut PfConfig, pos_std: f64, rot_std: f64) -> PfStatus {
    guard(|| {
        if !(pos_std >= 0.0 && rot_std >= 0.0) {
            return Err((PfStatus::InvalidInput, "noise standard deviations must be non-negative".into()));
        }
        let c = config_mut(cfg)?;
        c.noise_pos_std = pos_std;
        c.noise_rot_std = rot_std;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pf_config_free(cfg: *mut PfConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Ego foreground tokens per ground-truth vehicle, from tokenization alone.
#[no_mangle]
pub unsafe extern "C" fn pf_token_budget(cfg: *const PfConfig, mean_per_vehicle: *mut f64, total_foreground: *mut usize) -> PfStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("config"))?;
        let b = token_budget(&cfg.0).map_err(lib)?;
        write_out(mean_per_vehicle, b.mean_per_vehicle, "mean_per_vehicle")?;
        write_out(total_foreground, b.total_foreground, "total_foreground")
    })
}

/// Runs the full pipeline for `cfg`.
#[no_mangle]
pub unsafe extern "C" fn pf_run(cfg: *const PfConfig, out: *mut *mut PfReport) -> PfStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let report = run_pipeline(&cfg.0).map_err(lib)?;
        write_out(out, Box::into_raw(Box::new(PfReport(report))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn pf_report_summary(report: *const PfReport, out: *mut PfRunSummary) -> PfStatus {
    guard(|| {
        let r = &report.as_ref().ok_or_else(|| null("report"))?.0;
        let summary = PfRunSummary {
            agents: r.agents.len(),
            fused_tokens: r.fused_tokens,
            payload_bytes: r.comm.payload_bytes,
            total_bytes: r.comm.total_bytes,
            foreground_total: r.recall.foreground_total,
            foreground_retained: r.recall.foreground_retained,
            recall: r.recall.recall,
            aligned_recall: r.recall.aligned_recall,
            offset_loss: r.alignment.offset_loss,
            flops_total: r.flops.total,
        };
        write_out(out, summary, "out")
    })
}

/// Full report as JSON, not NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pf_report_to_json(report: *const PfReport, buf: *mut u8, cap: usize, written: *mut usize) -> PfStatus {
    guard(|| {
        let r = &report.as_ref().ok_or_else(|| null("report"))?.0;
        let json = serde_json::to_vec(r).map_err(|e| (PfStatus::Json, e.to_string()))?;
        copy_out(&json, buf, cap, written)
    })
}

#[no_mangle]
pub unsafe extern "C" fn pf_report_free(report: *mut PfReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Byte counts of a `k`-token, `d`-feature packet.
#[no_mangle]
pub unsafe extern "C" fn pf_packet_bytes(k: usize, d: usize, payload_bytes: *mut u64, total_bytes: *mut u64) -> PfStatus {
    guard(|| {
        let c = CommReport::for_shape(k, d);
        write_out(payload_bytes, c.payload_bytes, "payload_bytes")?;
        write_out(total_bytes, c.total_bytes, "total_bytes")
    })
}

/// Serializes one packet. `features` is row-major `k × d`, `coords` is
/// `k × 3`, `pose` is `[x, y, z, yaw, pitch, roll]`.
#[no_mangle]
pub unsafe extern "C" fn pf_packet_encode(
    agent_id: u32,
    k: usize,
    d: usize,
    features: *const f32,
    coords: *const f32,
    pose: *const f32,
    buf: *mut u8,
    cap: usize,
    written: *mut usize,
) -> PfStatus {
    guard(|| {
        if d == 0 {
            return Err((PfStatus::InvalidInput, "feature width must be positive".into()));
        }
        let f = slice(features, k * d, "features")?;
        let c = slice(coords, k * 3, "coords")?;
        let p = slice(pose, 6, "pose")?;
        if !written.is_null() {
            written.write(encoded_len(k, d));
        }
        if cap < encoded_len(k, d) {
            return Err((PfStatus::BufferTooSmall, format!("need {} bytes, have {cap}", encoded_len(k, d))));
        }
        let packet = MessagePacket {
            agent_id,
            features: Matrix::from_fn(k, d, |i, j| f[i * d + j]),
            coords: c.chunks_exact(3).map(|v| [v[0], v[1], v[2]]).collect(),
            pose: [p[0], p[1], p[2], p[3], p[4], p[5]],
        };
        copy_out(&pack(&packet), buf, cap, written)
    })
}

#[no_mangle]
pub unsafe extern "C" fn pf_packet_decode(buf: *const u8, len: usize, out: *mut *mut PfPacket) -> PfStatus {
    guard(|| {
        let bytes = slice(buf, len, "buf")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let packet = unpack(bytes).map_err(lib)?;
        write_out(out, Box::into_raw(Box::new(PfPacket(packet))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn pf_packet_shape(packet: *const PfPacket, agent_id: *mut u32, k: *mut usize, d: *mut usize) -> PfStatus {
    guard(|| {
        let p = &packet.as_ref().ok_or_else(|| null("packet"))?.0;
        write_out(agent_id, p.agent_id, "agent_id")?;
        write_out(k, p.k(), "k")?;
        write_out(d, p.d(), "d")
    })
}

/// Copies the packet arrays into caller buffers sized from [`pf_packet_shape`].
/// Any output pointer may be null to skip that array.
#[no_mangle]
pub unsafe extern "C" fn pf_packet_copy(packet: *const PfPacket, features: *mut f32, coords: *mut f32, pose: *mut f32) -> PfStatus {
    guard(|| {
        let p = &packet.as_ref().ok_or_else(|| null("packet"))?.0;
        let fs = p.features.as_slice();
        if !features.is_null() && !fs.is_empty() {
            ptr::copy_nonoverlapping(fs.as_ptr(), features, fs.len());
        }
        if !coords.is_null() {
            for (i, c) in p.coords.iter().enumerate() {
                ptr::copy_nonoverlapping(c.as_ptr(), coords.add(3 * i), 3);
            }
        }
        if !pose.is_null() {
            ptr::copy_nonoverlapping(p.pose.as_ptr(), pose, 6);
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pf_packet_free(packet: *mut PfPacket) {
    if !packet.is_null() {
        drop(Box::from_raw(packet));
    }
}

/// Position of `(x, y)` along the Hilbert curve over a `2^order` grid.
#[no_mangle]
pub unsafe extern "C" fn pf_hilbert_key(x: u32, y: u32, order: u32, out: *mut u64) -> PfStatus {
    guard(|| write_out(out, hilbert_key(x, y, order).map_err(lib)?, "out"))
}
