use std::ffi::{CStr, CString};
use std::ptr;

use ddsfl::config::PipelineConfig;
use ddsfl::dataio::{GrayImage, Split};
use ddsfl::deepstack::{save_model, train_deep_images, DeepModel, TrainImages};
use ddsfl::encode::describe_image;
use ddsfl::synth::{generate, SynthConfig};
use ddsfl_ffi::*;

fn tiny_model() -> (DeepModel, Vec<(Vec<u8>, usize)>) {
    let scfg = SynthConfig {
        width: 32,
        height: 32,
        train_per_class: 4,
        test_per_class: 2,
        ..Default::default()
    };
    let items = generate(&scfg, 4).unwrap();
    // quantize like an 8-bit image file so both paths see the same pixels
    let quantized: Vec<(Vec<u8>, usize, Split)> = items
        .iter()
        .map(|(img, c, s)| (img.data().iter().map(|v| (v * 255.0).round() as u8).collect(), *c, *s))
        .collect();
    let to_img = |b: &[u8]| GrayImage::new(32, 32, b.iter().map(|&v| v as f64 / 255.0).collect()).unwrap();
    let train: Vec<_> = quantized.iter().filter(|t| t.2 == Split::Train).collect();
    let images = TrainImages::new(train.iter().map(|t| to_img(&t.0)).collect(), train.iter().map(|t| t.1).collect(), 3).unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.layers.truncate(1);
    cfg.layers[0].num_filters = 8;
    cfg.layers[0].hyper.outer_rounds = 2;
    cfg.data.patches_per_image = 20;
    cfg.encode.codebook_size = 8;
    let model = train_deep_images(&images, &cfg, 1, false).unwrap();
    let test = quantized.into_iter().filter(|t| t.2 == Split::Test).map(|t| (t.0, t.1)).collect();
    (model, test)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(ddsfl_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn load_describe_predict_match_the_library() {
    let (model, test) = tiny_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    save_model(&model, &path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();

    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { ddsfl_model_load(cpath.as_ptr(), &mut handle) }, DdsflStatus::Ok);
    assert!(!handle.is_null());
    assert_eq!(unsafe { ddsfl_model_num_layers(handle) }, 1);
    assert_eq!(unsafe { ddsfl_model_num_classes(handle) }, 3);
    let len = unsafe { ddsfl_model_descriptor_len(handle) };
    assert_eq!(len, 21 * 8);

    for (pixels, _) in &test {
        let mut out = vec![0.0; len];
        let st = unsafe { ddsfl_describe_gray8(handle, pixels.as_ptr(), 32, 32, out.as_mut_ptr(), len) };
        assert_eq!(st, DdsflStatus::Ok);
        let img = GrayImage::new(32, 32, pixels.iter().map(|&v| v as f64 / 255.0).collect()).unwrap();
        let expected = describe_image(&img, &model).unwrap();
        assert_eq!(out, expected);
        let mut class = u32::MAX;
        assert_eq!(unsafe { ddsfl_predict_gray8(handle, pixels.as_ptr(), 32, 32, &mut class) }, DdsflStatus::Ok);
        let want = model.classifier.as_ref().unwrap().predict(&expected).unwrap();
        assert_eq!(class as usize, want);
    }

    let mut small = vec![0.0; len - 1];
    let st = unsafe { ddsfl_describe_gray8(handle, test[0].0.as_ptr(), 32, 32, small.as_mut_ptr(), len - 1) };
    assert_eq!(st, DdsflStatus::BufferTooSmall);
    assert!(last_error().contains("needs"));
    unsafe { ddsfl_model_free(handle) };
}

#[test]
fn errors_are_reported() {
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { ddsfl_model_load(ptr::null(), &mut handle) }, DdsflStatus::NullPointer);

    let missing = CString::new("/nonexistent/model.bin").unwrap();
    assert_eq!(unsafe { ddsfl_model_load(missing.as_ptr(), &mut handle) }, DdsflStatus::Io);
    assert!(!last_error().is_empty());
    assert!(handle.is_null());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a model at all").unwrap();
    let cjunk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ddsfl_model_load(cjunk.as_ptr(), &mut handle) }, DdsflStatus::Format);
    assert!(last_error().contains("bad magic"));

    assert_eq!(unsafe { ddsfl_model_num_layers(ptr::null()) }, 0);
    assert_eq!(unsafe { ddsfl_model_descriptor_len(ptr::null()) }, 0);
    let mut class = 0u32;
    let px = [0u8; 4];
    assert_eq!(
        unsafe { ddsfl_predict_gray8(ptr::null(), px.as_ptr(), 2, 2, &mut class) },
        DdsflStatus::NullPointer
    );
    unsafe { ddsfl_model_free(ptr::null_mut()) };
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/ddsfl.h")).unwrap();
    for name in [
        "ddsfl_model_load",
        "ddsfl_model_free",
        "ddsfl_describe_gray8",
        "ddsfl_predict_gray8",
        "ddsfl_last_error",
        "DDSFL_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    // the header must compile on its own when a C compiler is around
    if let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-x", "c", concat!(env!("CARGO_MANIFEST_DIR"), "/include/ddsfl.h")])
        .output()
    {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
