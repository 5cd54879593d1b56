use std::ffi::{c_char, CStr, CString};
use std::ptr;

use agentrl_core::policy::{log_prob, InitConfig, ModelConfig, PolicyParams};
use agentrl_core::vocab::Token;
use agentrl_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let mut needed = 0;
    unsafe {
        agentrl_last_error(buf.as_mut_ptr(), buf.len(), &mut needed);
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn policy_round_trip_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("p.bin").to_str().unwrap()).unwrap();
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(agentrl_policy_new(c"{\"d_model\": 8}".as_ptr(), 3, &mut p), AgentrlStatus::Ok);
        let mut n = 0;
        assert_eq!(agentrl_policy_param_count(p, &mut n), AgentrlStatus::Ok);
        let cfg = ModelConfig { d_model: 8, ..Default::default() };
        let reference = PolicyParams::init(cfg, InitConfig::default(), 3).unwrap();
        assert_eq!(n, reference.len());

        assert_eq!(agentrl_policy_save(p, path.as_ptr()), AgentrlStatus::Ok);
        let mut q = ptr::null_mut();
        assert_eq!(agentrl_policy_load(path.as_ptr(), &mut q), AgentrlStatus::Ok);

        let ctx = [0u32, 1, 20, 21];
        let act = [22u32, 7];
        let (mut a, mut b) = (0.0, 0.0);
        assert_eq!(agentrl_policy_log_prob(p, ctx.as_ptr(), 4, act.as_ptr(), 2, &mut a), AgentrlStatus::Ok);
        assert_eq!(agentrl_policy_log_prob(q, ctx.as_ptr(), 4, act.as_ptr(), 2, &mut b), AgentrlStatus::Ok);
        let want = log_prob(&reference, &[Token(0), Token(1), Token(20), Token(21)], &[Token(22), Token(7)]).unwrap();
        assert_eq!(a.to_bits(), want.to_bits());
        assert_eq!(a.to_bits(), b.to_bits());
        agentrl_policy_free(p);
        agentrl_policy_free(q);
    }
}

#[test]
fn sampling_is_seeded_and_reports_buffer_size() {
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(agentrl_policy_new(ptr::null(), 1, &mut p), AgentrlStatus::Ok);
        let ctx = [0u32, 1, 30];
        let (mut x, mut y) = ([0u32; 16], [0u32; 16]);
        let (mut nx, mut ny) = (0, 0);
        assert_eq!(agentrl_policy_sample(p, ctx.as_ptr(), 3, 12, 9, x.as_mut_ptr(), 16, &mut nx), AgentrlStatus::Ok);
        assert_eq!(agentrl_policy_sample(p, ctx.as_ptr(), 3, 12, 9, y.as_mut_ptr(), 16, &mut ny), AgentrlStatus::Ok);
        assert!((1..=12).contains(&nx));
        assert_eq!(x[..nx], y[..ny]);
        if nx > 1 {
            let mut small = [0u32; 1];
            let mut n = 0;
            let s = agentrl_policy_sample(p, ctx.as_ptr(), 3, 12, 9, small.as_mut_ptr(), 1, &mut n);
            assert_eq!(s, AgentrlStatus::BufferTooSmall);
            assert_eq!(n, nx);
        }
        agentrl_policy_free(p);
    }
}

#[test]
fn errors_map_to_codes_and_messages() {
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(agentrl_policy_new(c"{\"d_model\": 7}".as_ptr(), 0, &mut p), AgentrlStatus::Config);
        assert!(p.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(agentrl_policy_load(c"/nonexistent/p.bin".as_ptr(), &mut p), AgentrlStatus::Io);
        assert_eq!(agentrl_policy_new(ptr::null(), 0, ptr::null_mut()), AgentrlStatus::NullPointer);
        let mut n = 0;
        assert_eq!(agentrl_policy_param_count(ptr::null(), &mut n), AgentrlStatus::NullPointer);
        assert_eq!(agentrl_policy_new(c"{".as_ptr(), 0, &mut p), AgentrlStatus::Config);

        let bad = [0xffu8, 0];
        let mut c = ptr::null_mut();
        assert_eq!(agentrl_catalog_load(bad.as_ptr() as *const c_char, &mut c), AgentrlStatus::InvalidString);

        let mut run = ptr::null_mut();
        assert_eq!(agentrl_run(c"{\"queue_sizee\": 1}".as_ptr(), ptr::null(), &mut run), AgentrlStatus::Config);
        assert!(last_error().contains("queue_sizee"));

        // freeing null is a no-op
        agentrl_policy_free(ptr::null_mut());
        agentrl_catalog_free(ptr::null_mut());
        agentrl_run_free(ptr::null_mut());
    }
}

#[test]
fn catalog_handles() {
    unsafe {
        let mut c = ptr::null_mut();
        assert_eq!(agentrl_catalog_builtin(0, &mut c), AgentrlStatus::Ok);
        let mut n = 0;
        assert_eq!(agentrl_catalog_len(c, &mut n), AgentrlStatus::Ok);
        assert_eq!(n, 60);
        let mut needed = 0;
        assert_eq!(agentrl_catalog_task_id(c, 0, ptr::null_mut(), 0, &mut needed), AgentrlStatus::BufferTooSmall);
        let mut buf = vec![0 as c_char; needed];
        assert_eq!(agentrl_catalog_task_id(c, 0, buf.as_mut_ptr(), needed, &mut needed), AgentrlStatus::Ok);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), "calc-easy-0");
        assert_eq!(agentrl_catalog_task_id(c, 60, buf.as_mut_ptr(), needed, &mut needed), AgentrlStatus::Config);
        agentrl_catalog_free(c);
    }
}

#[test]
fn training_run_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let cfg = c"{\"queue_size\": 2, \"updates\": 2, \"cispo\": {\"group_size\": 2}, \"eval\": {\"every\": 0, \"episodes_per_task\": 1, \"tasks\": [\"calc-easy-0\"]}}";
    unsafe {
        let mut run = ptr::null_mut();
        assert_eq!(agentrl_run(cfg.as_ptr(), out.as_ptr(), &mut run), AgentrlStatus::Ok, "{}", last_error());
        let mut n = 0;
        assert_eq!(agentrl_run_update_count(run, &mut n), AgentrlStatus::Ok);
        assert_eq!(n, 2);
        let mut needed = 0;
        agentrl_run_report_json(run, ptr::null_mut(), 0, &mut needed);
        let mut buf = vec![0 as c_char; needed];
        assert_eq!(agentrl_run_report_json(run, buf.as_mut_ptr(), needed, &mut needed), AgentrlStatus::Ok);
        let report: serde_json::Value = serde_json::from_str(CStr::from_ptr(buf.as_ptr()).to_str().unwrap()).unwrap();
        assert_eq!(report["updates"], 2);

        let mut p = ptr::null_mut();
        assert_eq!(agentrl_run_policy(run, &mut p), AgentrlStatus::Ok);
        let saved = PolicyParams::load(&dir.path().join("checkpoint.bin")).unwrap();
        let mut count = 0;
        agentrl_policy_param_count(p, &mut count);
        assert_eq!(count, saved.len());
        agentrl_policy_free(p);
        agentrl_run_free(run);
    }
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/agentrl.h")).unwrap();
    for name in [
        "typedef struct AgentrlPolicy AgentrlPolicy",
        "typedef struct AgentrlCatalog AgentrlCatalog",
        "typedef struct AgentrlRun AgentrlRun",
        "AGENTRL_STATUS_OK = 0",
        "agentrl_last_error",
        "agentrl_policy_new",
        "agentrl_policy_sample",
        "agentrl_catalog_task_id",
        "agentrl_run_report_json",
        "agentrl_run_free",
    ] {
        assert!(h.contains(name), "{name}");
    }
}

/// Compiles and runs a C program against the generated header and the
/// shared library. Skipped when no C compiler is installed.
#[test]
fn c_program_links_against_the_library() {
    use std::process::Command;
    let manifest = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libagentrl_ffi.so");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or shared library");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg("-L")
        .arg(&profile_dir)
        .arg(format!("-Wl,-rpath,{}", profile_dir.display()))
        .arg("-lagentrl_ffi")
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
