use std::ffi::{CStr, CString};
use std::ptr;

use morphable::config::Config;
use morphable::data::synth::{generate_dataset, Family, SynthSpec};
use morphable::model::Model;
use morphable::render::axis_angle_to_matrix;
use morphable_ffi::*;

fn last_error() -> String {
    let p = m3d_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn tiny_model(dir: &std::path::Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let spec = SynthSpec {
        image_size: 32,
        feature_size: 16,
        channels: 16,
        points: 64,
        focal: 48.0,
        ..SynthSpec::new(Family::Ellipsoid, 1, 1, 2)
    };
    let (data, _, _) = generate_dataset(&spec).unwrap();
    let cfg = Config {
        grid: 8,
        sdf_hidden: 32,
        deform_hidden: 16,
        feature_hidden: 16,
        feature_dim: 8,
        encoder_out_dims: vec![8, 8, 8, 8],
        adapter_out_dims: vec![8, 8, 8],
        vertex_samples: 10,
        pose_steps: 3,
        pose_yaw_steps: 2,
        pose_elevations: vec![0.0],
        ..Config::default()
    };
    let mut model = Model::<f32>::new(&cfg, 16).unwrap();
    let s = &data.videos[0].samples[0];
    model.camera = Some(morphable::model::ReferenceCamera {
        translation: s.translation,
        intrinsics: s.intrinsics,
    });
    let mp = dir.join("model.mcm");
    model.save(&mp).unwrap();
    let fp = dir.join("x.feat");
    std::fs::write(&fp, s.features.to_bytes()).unwrap();
    (mp, fp)
}

#[test]
fn null_arguments_are_reported() {
    let mut out: *mut M3dModel = ptr::null_mut();
    let st = unsafe { m3d_model_load(ptr::null(), &mut out) };
    assert_eq!(st, M3dStatus::NullPointer);
    assert!(last_error().contains("null"));
    assert!(out.is_null());
    unsafe { m3d_model_free(ptr::null_mut()) };
    unsafe { m3d_features_free(ptr::null_mut()) };
}

#[test]
fn missing_model_file_is_an_io_error() {
    let mut out: *mut M3dModel = ptr::null_mut();
    let path = CString::new("/nonexistent/model.mcm").unwrap();
    let st = unsafe { m3d_model_load(path.as_ptr(), &mut out) };
    assert_eq!(st, M3dStatus::Io);
    assert!(last_error().contains("nonexistent"));
}

#[test]
fn feature_shape_is_checked() {
    let data = [0.0f32; 10];
    let mut out: *mut M3dFeatures = ptr::null_mut();
    let st = unsafe { m3d_features_new(2, 2, 2, data.as_ptr(), data.len(), &mut out) };
    assert_eq!(st, M3dStatus::Shape);
    let st = unsafe { m3d_features_new(2, 1, 5, data.as_ptr(), data.len(), &mut out) };
    assert_eq!(st, M3dStatus::Ok);
    unsafe { m3d_features_free(out) };
}

#[test]
fn geodesic_error_matches_the_rust_api() {
    let a = axis_angle_to_matrix([0.0, 0.0, 0.0]).concat();
    let b = axis_angle_to_matrix([0.0, 0.5, 0.0]).concat();
    let mut deg = 0.0;
    let st = unsafe { m3d_geodesic_error_deg(a.as_ptr(), b.as_ptr(), &mut deg) };
    assert_eq!(st, M3dStatus::Ok);
    assert!((deg - 0.5f64.to_degrees()).abs() < 1e-9);
}

#[test]
fn load_estimate_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (mp, fp) = tiny_model(dir.path());
    let mut model: *mut M3dModel = ptr::null_mut();
    assert_eq!(unsafe { m3d_model_load(cstr(&mp).as_ptr(), &mut model) }, M3dStatus::Ok);
    let mut n = 0usize;
    assert_eq!(unsafe { m3d_model_param_count(model, &mut n) }, M3dStatus::Ok);
    assert!(n > 0);
    let mut c = 0usize;
    assert_eq!(unsafe { m3d_model_input_channels(model, &mut c) }, M3dStatus::Ok);
    assert_eq!(c, 16);

    let mut feats: *mut M3dFeatures = ptr::null_mut();
    assert_eq!(unsafe { m3d_features_load(cstr(&fp).as_ptr(), &mut feats) }, M3dStatus::Ok);
    let copy = dir.path().join("copy.feat");
    assert_eq!(unsafe { m3d_features_save(feats, cstr(&copy).as_ptr()) }, M3dStatus::Ok);
    assert_eq!(std::fs::read(&fp).unwrap(), std::fs::read(&copy).unwrap());

    let mut r = [0.0f64; 9];
    let mut score = f64::NAN;
    assert_eq!(unsafe { m3d_estimate_pose(model, feats, r.as_mut_ptr(), &mut score) }, M3dStatus::Ok, "{}", last_error());
    assert!(score.is_finite());
    // Rows of a rotation are orthonormal.
    for i in 0..3 {
        for j in 0..3 {
            let d: f64 = (0..3).map(|k| r[3 * i + k] * r[3 * j + k]).sum();
            assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
        }
    }

    let obj = dir.path().join("t.obj");
    assert_eq!(unsafe { m3d_model_export_obj(model, cstr(&obj).as_ptr()) }, M3dStatus::Ok);
    assert!(std::fs::read_to_string(&obj).unwrap().contains("\nf "));

    unsafe {
        m3d_features_free(feats);
        m3d_model_free(model);
    }
}

#[test]
fn header_declares_every_entry_point() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/morphable.h")).unwrap();
    for name in [
        "m3d_last_error",
        "m3d_version",
        "m3d_model_load",
        "m3d_model_free",
        "m3d_model_param_count",
        "m3d_model_input_channels",
        "m3d_model_export_obj",
        "m3d_features_new",
        "m3d_features_load",
        "m3d_features_save",
        "m3d_features_free",
        "m3d_estimate_pose",
        "m3d_geodesic_error_deg",
        "M3D_STATUS_OK",
    ] {
        assert!(h.contains(name), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"morphable.h\"\nint main(void) { M3dModel *m = 0; return m3d_model_load(\"x\", &m) == M3D_STATUS_OK; }\n",
    )
    .unwrap();
    let out = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
        .ok_or(())
}
