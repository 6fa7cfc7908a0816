use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use tpm_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(tpm_last_error()) }.to_string_lossy().into_owned()
}

fn shape(class_id: u32, n: usize, seed: u64) -> *mut TpmCloud {
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { tpm_generate_shape(class_id, n, seed, &mut c) }, TpmStatus::Ok);
    c
}

#[test]
fn cloud_roundtrip_and_label() {
    let xyz = [0.0f32, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.0];
    let mut c = ptr::null_mut();
    unsafe {
        assert_eq!(tpm_cloud_new(xyz.as_ptr(), 3, &mut c), TpmStatus::Ok);
        let mut n = 0;
        assert_eq!(tpm_cloud_len(c, &mut n), TpmStatus::Ok);
        assert_eq!(n, 3);
        let mut back = [0.0f32; 9];
        assert_eq!(tpm_cloud_points(c, back.as_mut_ptr(), 9), TpmStatus::Ok);
        assert_eq!(back, xyz);
        assert_eq!(tpm_cloud_points(c, back.as_mut_ptr(), 8), TpmStatus::BufferTooSmall);
        let mut label = 0;
        assert_eq!(tpm_cloud_label(c, &mut label), TpmStatus::Ok);
        assert_eq!(label, -1);
        tpm_cloud_free(c);
    }
    let s = shape(3, 64, 7);
    let mut label = 0;
    unsafe {
        tpm_cloud_label(s, &mut label);
        tpm_cloud_free(s);
    }
    assert_eq!(label, 3);
}

#[test]
fn errors_set_status_and_message() {
    let mut c = ptr::null_mut();
    unsafe {
        assert_eq!(tpm_cloud_new(ptr::null(), 4, &mut c), TpmStatus::NullPointer);
        assert!(last_error().contains("xyz"));
        assert_eq!(tpm_generate_shape(99, 64, 0, &mut c), TpmStatus::InvalidArgument);
        assert!(!last_error().is_empty());
        let same = [1.0f32; 12];
        let mut d = ptr::null_mut();
        assert_eq!(tpm_cloud_new(same.as_ptr(), 4, &mut d), TpmStatus::Ok);
        let mut n = ptr::null_mut();
        assert_eq!(tpm_cloud_normalize(d, &mut n), TpmStatus::DegenerateCloud);
        tpm_cloud_free(d);
        assert_eq!(tpm_cloud_len(ptr::null(), &mut 0), TpmStatus::NullPointer);
        let mut out = [0.0; 3];
        assert_eq!(tpm_derive_mask_triple(0.7, out.as_mut_ptr()), TpmStatus::Ok);
        assert!(last_error().is_empty());
        tpm_cloud_free(ptr::null_mut());
        tpm_model_free(ptr::null_mut());
    }
}

#[test]
fn fps_indices_are_distinct() {
    let c = shape(0, 128, 1);
    let mut idx = [usize::MAX; 16];
    unsafe {
        assert_eq!(tpm_fps(c, 16, 5, idx.as_mut_ptr()), TpmStatus::Ok);
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 16);
        assert!(idx.iter().all(|&i| i < 128));
        assert_eq!(tpm_fps(c, 129, 5, idx.as_mut_ptr()), TpmStatus::InvalidArgument);
        tpm_cloud_free(c);
    }
}

#[test]
fn chamfer_and_weights() {
    let a = [0.0f32, 0.0, 0.0];
    let b = [1.0f32, 0.0, 0.0];
    let mut d = 0.0;
    unsafe {
        assert_eq!(tpm_chamfer(a.as_ptr(), 1, b.as_ptr(), 1, &mut d), TpmStatus::Ok);
        assert!((d - 2.0).abs() < 1e-12);
        assert_eq!(tpm_chamfer(a.as_ptr(), 0, b.as_ptr(), 1, &mut d), TpmStatus::InvalidArgument);

        let ratios = [0.6, 0.5, 0.4];
        let mut w = [0.0; 3];
        assert_eq!(tpm_loss_weights(ratios.as_ptr(), 3, w.as_mut_ptr()), TpmStatus::Ok);
        for (got, want) in w.iter().zip([0.4, 1.0 / 3.0, 4.0 / 15.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        let mut t = [0.0; 3];
        assert_eq!(tpm_derive_mask_triple(0.7, t.as_mut_ptr()), TpmStatus::Ok);
        assert_eq!(t, [0.7, 0.5, 0.3]);
    }
}

#[test]
fn global_feature_matches_dim_and_is_deterministic() {
    let mut m = ptr::null_mut();
    let c = shape(2, 256, 3);
    unsafe {
        assert_eq!(tpm_model_init_desk(1, &mut m), TpmStatus::Ok);
        let (mut dim, mut pts) = (0, 0);
        tpm_model_feature_dim(m, &mut dim);
        tpm_model_points(m, &mut pts);
        assert_eq!(dim, 128);
        assert_eq!(pts, 256);
        let mut f1 = vec![0.0f32; dim];
        let mut f2 = vec![0.0f32; dim];
        assert_eq!(tpm_global_feature(m, c, -1.0, 9, f1.as_mut_ptr(), dim), TpmStatus::Ok);
        assert_eq!(tpm_global_feature(m, c, -1.0, 9, f2.as_mut_ptr(), dim), TpmStatus::Ok);
        assert_eq!(f1, f2);
        assert!(f1.iter().all(|v| v.is_finite()));
        assert_eq!(tpm_global_feature(m, c, 0.6, 9, f2.as_mut_ptr(), dim), TpmStatus::Ok);
        assert_ne!(f1, f2);
        assert_eq!(tpm_global_feature(m, c, -1.0, 9, f2.as_mut_ptr(), dim - 1), TpmStatus::BufferTooSmall);
        tpm_model_free(m);
        tpm_cloud_free(c);
    }
}

#[test]
fn model_load_reports_missing_and_bad_files() {
    let dir = std::env::temp_dir().join(format!("tpm_ffi_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let missing = CString::new(dir.join("nope.tpmc").to_str().unwrap()).unwrap();
    let bad_path = dir.join("bad.tpmc");
    std::fs::write(&bad_path, b"not a checkpoint at all").unwrap();
    let bad = CString::new(bad_path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(tpm_model_load(missing.as_ptr(), &mut m), TpmStatus::Io);
        assert_eq!(tpm_model_load(bad.as_ptr(), &mut m), TpmStatus::Format);
        assert_eq!(tpm_model_load(ptr::null(), &mut m), TpmStatus::NullPointer);
    }
    assert!(m.is_null());
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/tpm.h")).unwrap();
    for name in [
        "tpm_last_error",
        "tpm_cloud_new",
        "tpm_generate_shape",
        "tpm_cloud_len",
        "tpm_cloud_label",
        "tpm_cloud_points",
        "tpm_cloud_normalize",
        "tpm_cloud_free",
        "tpm_fps",
        "tpm_chamfer",
        "tpm_loss_weights",
        "tpm_derive_mask_triple",
        "tpm_model_load",
        "tpm_model_init_desk",
        "tpm_model_feature_dim",
        "tpm_model_points",
        "tpm_global_feature",
        "tpm_model_free",
        "TPM_STATUS_OK",
        "typedef struct TpmCloud TpmCloud",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

/// Compile a small C program against the header; skipped without a C compiler.
#[test]
fn header_compiles_as_c() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let src = std::env::temp_dir().join(format!("tpm_ffi_check_{}.c", std::process::id()));
    std::fs::write(
        &src,
        "#include \"tpm.h\"\nint main(void) { TpmStatus s = TPM_STATUS_OK; TpmCloud *c = 0; (void)c; return (int)s; }\n",
    )
    .unwrap();
    let out = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-I")
        .arg(dir.join("include"))
        .arg(&src)
        .output();
    let _ = std::fs::remove_file(&src);
    match out {
        Ok(o) => assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr)),
        Err(_) => eprintln!("no C compiler; skipping"),
    }
}
