use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use pointfuse_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; pf_last_error_length() + 1];
    let n = unsafe { pf_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let s = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string();
    assert_eq!(s.len(), n);
    s
}

fn small_config() -> *mut PfConfig {
    let json = CString::new(
        r#"{
            "scene": {
                "agents": [{"id": 0, "x": 0, "y": 0, "yaw": 0}, {"id": 2, "x": 10, "y": 3.5, "yaw": 0}],
                "vehicles": {"count": 3, "x_extent": [-15, 15]},
                "clutter_density": 0.05,
                "range": {"min": [-20, -10, -3], "max": [20, 10, 1]}
            },
            "top_k": 100,
            "locality_sample": 64,
            "model": {
                "encoder": {"num_blocks": 1, "d": 8, "d_g": 4, "n_state": 4, "window": 64, "d_sc": 4, "d_sp": 4, "rank": 2,
                            "freq": {"window": [8, 8], "alpha": 0.125, "beta": 0.25, "epsilon": 1e-6, "downsample": [4, 4]},
                            "ordering": "semantic", "ordering_seed": 0},
                "fusion": {"encoder": {"num_blocks": 1, "d": 8, "d_g": 4, "n_state": 4, "window": 64, "d_sc": 4, "d_sp": 4, "rank": 2,
                            "freq": {"window": [8, 8], "alpha": 0.125, "beta": 0.25, "epsilon": 1e-6, "downsample": [4, 4]},
                            "ordering": "semantic", "ordering_seed": 0},
                           "delta_max": 2.0, "proposal_hidden": 8, "num_blocks": 1}
            }
        }"#,
    )
    .unwrap();
    let mut cfg = ptr::null_mut();
    let status = unsafe { pf_config_from_json(json.as_ptr(), &mut cfg) };
    assert_eq!(status, PfStatus::Ok, "{}", last_error());
    cfg
}

#[test]
fn run_and_summarize() {
    let cfg = small_config();
    let mut report = ptr::null_mut();
    unsafe {
        assert_eq!(pf_run(cfg, &mut report), PfStatus::Ok, "{}", last_error());
        let mut s = PfRunSummary::default();
        assert_eq!(pf_report_summary(report, &mut s), PfStatus::Ok);
        assert_eq!(s.agents, 2);
        assert!(s.fused_tokens > 0 && s.total_bytes > s.payload_bytes);
        assert!((0.0..=1.0).contains(&s.recall));

        // too-small buffer reports the size it needs
        let mut need = 0usize;
        assert_eq!(pf_report_to_json(report, ptr::null_mut(), 0, &mut need), PfStatus::BufferTooSmall);
        let mut buf = vec![0u8; need];
        assert_eq!(pf_report_to_json(report, buf.as_mut_ptr(), buf.len(), &mut need), PfStatus::Ok);
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v["fused_tokens"].as_u64().unwrap() as usize, s.fused_tokens);
        pf_report_free(report);

        // a different seed changes the run
        assert_eq!(pf_config_set_seed(cfg, 99), PfStatus::Ok);
        assert_eq!(pf_config_set_top_k(cfg, 0), PfStatus::Ok);
        assert_eq!(pf_run(cfg, &mut report), PfStatus::Ok, "{}", last_error());
        let mut t = PfRunSummary::default();
        pf_report_summary(report, &mut t);
        assert_ne!(s, t);
        pf_report_free(report);
        pf_config_free(cfg);
    }
}

#[test]
fn packet_round_trip() {
    let (k, d) = (5usize, 4usize);
    let features: Vec<f32> = (0..k * d).map(|i| i as f32 * 0.5 - 3.0).collect();
    let coords: Vec<f32> = (0..k * 3).map(|i| i as f32 - 7.25).collect();
    let pose = [1.0f32, -2.0, 1.5, 0.25, 0.0, f32::NAN];
    unsafe {
        let mut need = 0usize;
        let st = pf_packet_encode(9, k, d, features.as_ptr(), coords.as_ptr(), pose.as_ptr(), ptr::null_mut(), 0, &mut need);
        assert_eq!(st, PfStatus::BufferTooSmall);
        let (mut payload, mut total) = (0u64, 0u64);
        assert_eq!(pf_packet_bytes(k, d, &mut payload, &mut total), PfStatus::Ok);
        assert_eq!(payload, 4 * (k as u64 * (d as u64 + 3) + 6));
        assert_eq!(total as usize, need);

        let mut buf = vec![0u8; need];
        let st = pf_packet_encode(9, k, d, features.as_ptr(), coords.as_ptr(), pose.as_ptr(), buf.as_mut_ptr(), buf.len(), &mut need);
        assert_eq!(st, PfStatus::Ok);
        let mut packet = ptr::null_mut();
        assert_eq!(pf_packet_decode(buf.as_ptr(), buf.len(), &mut packet), PfStatus::Ok);
        let (mut id, mut k2, mut d2) = (0u32, 0usize, 0usize);
        assert_eq!(pf_packet_shape(packet, &mut id, &mut k2, &mut d2), PfStatus::Ok);
        assert_eq!((id, k2, d2), (9, k, d));
        let (mut f2, mut c2, mut p2) = (vec![0f32; k * d], vec![0f32; k * 3], [0f32; 6]);
        assert_eq!(pf_packet_copy(packet, f2.as_mut_ptr(), c2.as_mut_ptr(), p2.as_mut_ptr()), PfStatus::Ok);
        assert_eq!(f2, features);
        assert_eq!(c2, coords);
        assert_eq!(p2.map(f32::to_bits), pose.map(f32::to_bits));
        pf_packet_free(packet);

        buf[0] ^= 0xff;
        assert_eq!(pf_packet_decode(buf.as_ptr(), buf.len(), &mut packet), PfStatus::Decode);
        assert!(last_error().contains("magic"));
        assert_eq!(pf_packet_decode(buf.as_ptr(), 3, &mut packet), PfStatus::Decode);
    }
}

#[test]
fn error_codes() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(pf_config_from_json(ptr::null(), &mut cfg), PfStatus::NullPointer);
        let bad = CString::new(r#"{"nope": 1}"#).unwrap();
        assert_eq!(pf_config_from_json(bad.as_ptr(), &mut cfg), PfStatus::Json);
        assert!(last_error().contains("nope"));
        let zero_k = CString::new(r#"{"top_k": 0}"#).unwrap();
        assert_eq!(pf_config_from_json(zero_k.as_ptr(), &mut cfg), PfStatus::InvalidInput);
        let bytes = [0xffu8, 0xfe, 0];
        assert_eq!(pf_config_from_json(bytes.as_ptr().cast(), &mut cfg), PfStatus::Utf8);
        assert!(cfg.is_null());

        assert_eq!(pf_config_new_default(&mut cfg), PfStatus::Ok);
        assert_eq!(last_error(), "");
        assert_eq!(pf_config_set_noise(cfg, -1.0, 0.0), PfStatus::InvalidInput);
        assert_eq!(pf_config_set_seed(ptr::null_mut(), 1), PfStatus::NullPointer);
        assert_eq!(pf_run(cfg, ptr::null_mut()), PfStatus::NullPointer);
        assert_eq!(pf_report_summary(ptr::null(), ptr::null_mut()), PfStatus::NullPointer);
        let (mut mean, mut total) = (0.0, 0usize);
        assert_eq!(pf_token_budget(cfg, &mut mean, &mut total), PfStatus::Ok);
        assert!(mean > 0.0 && total > 0);
        pf_config_free(cfg);
        pf_config_free(ptr::null_mut());
        pf_report_free(ptr::null_mut());
        pf_packet_free(ptr::null_mut());

        let mut key = 0u64;
        assert_eq!(pf_hilbert_key(1, 0, 1, &mut key), PfStatus::Ok);
        assert_eq!(key, 3);
        assert_eq!(pf_hilbert_key(4, 0, 2, &mut key), PfStatus::InvalidInput);
        assert_eq!(pf_packet_encode(0, 1, 0, ptr::null(), ptr::null(), ptr::null(), ptr::null_mut(), 0, ptr::null_mut()), PfStatus::InvalidInput);
        assert_eq!(pf_packet_encode(0, 1, 2, ptr::null(), ptr::null(), ptr::null(), ptr::null_mut(), 0, ptr::null_mut()), PfStatus::NullPointer);
    }
}

#[test]
fn truncated_error_message() {
    unsafe {
        let mut cfg = ptr::null_mut();
        pf_config_from_json(ptr::null(), &mut cfg);
        let mut buf = [0 as c_char; 4];
        assert_eq!(pf_last_error_message(buf.as_mut_ptr(), buf.len()), 3);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_bytes(), b"jso");
        assert_eq!(pf_last_error_message(ptr::null_mut(), 8), 0);
        assert_eq!(CStr::from_ptr(pf_version()).to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}

#[test]
fn header_declares_the_interface() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/pointfuse.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "pf_config_new_default",
        "pf_config_from_json",
        "pf_run",
        "pf_report_summary",
        "pf_report_to_json",
        "pf_packet_encode",
        "pf_packet_decode",
        "pf_last_error_message",
        "typedef struct PfConfig PfConfig",
        "PF_STATUS_BUFFER_TOO_SMALL = 9",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    // when a C compiler is present, the header must compile on its own
    let dir = tempfile_dir();
    let src = dir.join("use_header.c");
    std::fs::write(&src, "#include \"pointfuse.h\"\nint main(void) { PfConfig *c = 0; return pf_config_new_default(&c) == PF_STATUS_OK ? 0 : 1; }\n").unwrap();
    match Command::new("cc").arg("-fsyntax-only").arg("-Wall").arg("-Werror").arg("-I").arg(header.parent().unwrap()).arg(&src).output() {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("skipping C compile check: {e}"),
    }
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("pointfuse-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
