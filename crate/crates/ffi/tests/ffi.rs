use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use cyto_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(cyto_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

/// Two disks on a 40x32 canvas, numbered by first appearance.
fn two_disks() -> (usize, usize, Vec<u32>) {
    let (w, h) = (40usize, 32usize);
    let labels = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            if (x - 28).pow(2) + (y - 14).pow(2) < 36 {
                1
            } else if (x - 10).pow(2) + (y - 16).pow(2) < 49 {
                2
            } else {
                0
            }
        })
        .collect();
    (w, h, labels)
}

fn new_map(w: usize, h: usize, labels: &[u32]) -> *mut CytoLabelMap {
    let mut map = ptr::null_mut();
    assert_eq!(
        unsafe { cyto_label_map_new(w, h, labels.as_ptr(), &mut map) },
        CytoStatus::Ok
    );
    map
}

#[test]
fn label_map_round_trip_and_accessors() {
    let (w, h, labels) = two_disks();
    let map = new_map(w, h, &labels);
    unsafe {
        assert_eq!(
            (cyto_label_map_width(map), cyto_label_map_height(map)),
            (w, h)
        );
        assert_eq!(cyto_label_map_instance_count(map), 2);
        assert_eq!(
            std::slice::from_raw_parts(cyto_label_map_data(map), w * h),
            labels.as_slice()
        );

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("l.png").to_str().unwrap()).unwrap();
        assert_eq!(cyto_label_map_write(map, path.as_ptr()), CytoStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(
            cyto_label_map_read(path.as_ptr(), &mut back),
            CytoStatus::Ok
        );
        assert_eq!(
            std::slice::from_raw_parts(cyto_label_map_data(back), w * h),
            labels.as_slice()
        );
        cyto_label_map_free(back);
        cyto_label_map_free(map);
        cyto_label_map_free(ptr::null_mut());
    }
}

#[test]
fn errors_set_status_and_message() {
    unsafe {
        cyto_clear_last_error();
        assert_eq!(last_error(), "");
        let mut out = ptr::null_mut();
        assert_eq!(
            cyto_label_map_new(4, 4, ptr::null(), &mut out),
            CytoStatus::NullPointer
        );
        assert!(out.is_null());
        assert!(last_error().contains("null"), "{}", last_error());

        let missing = CString::new("/nonexistent/dir/x.png").unwrap();
        assert_eq!(
            cyto_label_map_read(missing.as_ptr(), &mut out),
            CytoStatus::Io
        );
        assert_eq!(
            cyto_flow_field_read(missing.as_ptr(), &mut ptr::null_mut()),
            CytoStatus::Io
        );

        // A split instance is not a valid label map.
        let split = [1u32, 0, 1, 0];
        assert_eq!(
            cyto_label_map_new(4, 1, split.as_ptr(), &mut out),
            CytoStatus::Ok
        );
        let mut flows = ptr::null_mut();
        assert_eq!(
            cyto_flow_field_from_labels(out, &mut flows),
            CytoStatus::InvalidArgument
        );
        assert!(last_error().contains("4-connected"), "{}", last_error());
        cyto_label_map_free(out);

        assert_eq!(
            cyto_model_new_random(7, 5, 64, 0, &mut ptr::null_mut()),
            CytoStatus::InvalidArgument
        );
        assert_eq!(
            cyto_model_new_random(0, 5, 0, 0, &mut ptr::null_mut()),
            CytoStatus::InvalidArgument
        );
        cyto_clear_last_error();
        assert_eq!(last_error(), "");
        assert_eq!(cyto_label_map_width(ptr::null()), 0);
    }
}

#[test]
fn flows_are_unit_inside_masks_and_segment_back() {
    let (w, h, labels) = two_disks();
    let map = new_map(w, h, &labels);
    unsafe {
        let mut flows = ptr::null_mut();
        assert_eq!(cyto_flow_field_from_labels(map, &mut flows), CytoStatus::Ok);
        assert_eq!(
            (cyto_flow_field_width(flows), cyto_flow_field_height(flows)),
            (w, h)
        );
        let (mut dy, mut dx, mut cp) = (ptr::null(), ptr::null(), ptr::null());
        assert_eq!(
            cyto_flow_field_planes(flows, &mut dy, &mut dx, &mut cp),
            CytoStatus::Ok
        );
        let (dy, dx, cp) = (
            std::slice::from_raw_parts(dy, w * h),
            std::slice::from_raw_parts(dx, w * h),
            std::slice::from_raw_parts(cp, w * h),
        );
        let mut zeros = 0;
        for i in 0..w * h {
            let n = (dx[i] * dx[i] + dy[i] * dy[i]).sqrt();
            if labels[i] == 0 {
                assert_eq!((n, cp[i]), (0.0, 0.0));
            } else if n == 0.0 {
                zeros += 1;
            } else {
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
        assert!(zeros <= 2);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("f.cytf").to_str().unwrap()).unwrap();
        assert_eq!(cyto_flow_field_write(flows, path.as_ptr()), CytoStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(
            cyto_flow_field_read(path.as_ptr(), &mut back),
            CytoStatus::Ok
        );

        let mut seg = ptr::null_mut();
        assert_eq!(
            cyto_flow_field_segment(back, ptr::null(), &mut seg),
            CytoStatus::Ok
        );
        let mut m = CytoSegMetrics::default();
        assert_eq!(cyto_seg_metrics(seg, map, &mut m), CytoStatus::Ok);
        assert_eq!(cyto_label_map_instance_count(seg), 2);
        assert!(m.dice > 0.99, "{m:?}");

        let mut bad = cyto_flow_params_default();
        bad.step_size = -1.0;
        assert_eq!(
            cyto_flow_field_segment(back, &bad, &mut ptr::null_mut()),
            CytoStatus::InvalidArgument
        );

        let other = new_map(4, 4, &[0; 16]);
        assert_eq!(cyto_seg_metrics(other, map, &mut m), CytoStatus::Dimension);
        for p in [seg, other, map] {
            cyto_label_map_free(p);
        }
        cyto_flow_field_free(back);
        cyto_flow_field_free(flows);
    }
}

#[test]
fn model_classifies_every_instance() {
    let (w, h, labels) = two_disks();
    let map = new_map(w, h, &labels);
    let rgb: Vec<u8> = labels
        .iter()
        .flat_map(|&l| {
            if l > 0 {
                [90, 110, 90]
            } else {
                [210, 210, 220]
            }
        })
        .collect();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(
            cyto_model_new_random(0, 5, 64, 3, &mut model),
            CytoStatus::Ok
        );
        assert_eq!(cyto_model_num_classes(model), 5);
        assert_eq!(cyto_model_parameter_count(model), 19_614_405);

        let mut count = 0;
        let status = cyto_model_classify(
            model,
            rgb.as_ptr(),
            w,
            h,
            map,
            ptr::null_mut(),
            ptr::null_mut(),
            0,
            &mut count,
        );
        assert_eq!((status, count), (CytoStatus::BufferTooSmall, 2));
        let mut ids = [0u32; 2];
        let mut probs = [0f64; 10];
        let status = cyto_model_classify(
            model,
            rgb.as_ptr(),
            w,
            h,
            map,
            ids.as_mut_ptr(),
            probs.as_mut_ptr(),
            2,
            &mut count,
        );
        assert_eq!(status, CytoStatus::Ok, "{}", last_error());
        assert_eq!(ids, [1, 2]);
        for row in probs.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|p| *p > 0.0));
        }
        let status = cyto_model_classify(
            model,
            rgb.as_ptr(),
            w + 1,
            h,
            map,
            ids.as_mut_ptr(),
            probs.as_mut_ptr(),
            2,
            &mut count,
        );
        assert_eq!(status, CytoStatus::Dimension);

        let missing = CString::new("/nonexistent/w.bin").unwrap();
        assert_eq!(
            cyto_model_load(0, 5, 64, missing.as_ptr(), &mut ptr::null_mut()),
            CytoStatus::Io
        );
        cyto_model_free(model);
        cyto_label_map_free(map);
    }
}

#[test]
fn header_is_generated() {
    let header =
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/cyto.h"))
            .unwrap();
    for sym in [
        "cyto_last_error_message",
        "typedef struct CytoLabelMap CytoLabelMap",
        "typedef struct CytoFlowField CytoFlowField",
        "typedef struct CytoModel CytoModel",
        "CYTO_STATUS_BUFFER_TOO_SMALL",
        "cyto_model_classify",
    ] {
        assert!(header.contains(sym), "missing {sym}");
    }
}

/// Directory holding this build's `libcyto_ffi.a` (the test binary lives in
/// its `deps/` subdirectory).
fn artifact_dir() -> PathBuf {
    std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf()
}

#[test]
fn c_program_links_against_static_library() {
    let lib = artifact_dir().join("libcyto_ffi.a");
    assert!(lib.is_file(), "{} not built", lib.display());
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cyto_smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .args(["-std=c11", "-Wall", "-Werror", "-o"])
        .arg(&out)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap_or_else(|e| panic!("running {cc}: {e}"));
    assert!(status.success(), "C compilation failed");
    let run = Command::new(&out).output().unwrap();
    assert!(
        run.status.success(),
        "smoke program exited {:?}: {}",
        run.status.code(),
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(String::from_utf8_lossy(&run.stdout).contains("2 cells"));
}
