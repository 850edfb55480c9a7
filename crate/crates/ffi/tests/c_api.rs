use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use maskgan::data::{synth_shapes, to_unpaired};
use maskgan::training::{save_checkpoint, train, Checkpoint, Direction, Task, TrainConfig, TrainData};
use maskgan_ffi::*;

fn tiny_checkpoint(task: Task) -> Checkpoint {
    let cfg = TrainConfig {
        epochs: 1,
        image_size: 16,
        base_channels: 2,
        depth: 2,
        disc_base_channels: 2,
        disc_layers: 1,
        seed: 5,
        ..TrainConfig::new(task)
    };
    let ds = synth_shapes(4, 16, 5).unwrap();
    let unpaired = to_unpaired(&ds, 5);
    let data = match task {
        Task::Cgan => TrainData::Paired(&ds),
        Task::Cyclegan => TrainData::Unpaired(&unpaired),
    };
    train(&cfg, data, None).unwrap()
}

fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = maskgan_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn load(path: &Path, direction: u32) -> (MaskganStatus, *mut MaskganGenerator) {
    let mut h = ptr::null_mut();
    let s = unsafe { maskgan_generator_load(c_path(path).as_ptr(), direction, &mut h) };
    (s, h)
}

#[test]
fn run_matches_library_forward() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(Task::Cyclegan);
    let path = dir.path().join("c.mgan");
    save_checkpoint(&ckpt, &path).unwrap();
    let sample = &synth_shapes(1, 16, 9).unwrap().samples[0];

    for (code, dir_enum, input) in [
        (MASKGAN_DIRECTION_A_TO_B, Direction::AToB, &sample.image),
        (MASKGAN_DIRECTION_B_TO_A, Direction::BToA, &sample.mask),
    ] {
        let (s, h) = load(&path, code);
        assert_eq!(s, MaskganStatus::Ok);
        let (mut size, mut cin, mut cout) = (0, 0, 0);
        assert_eq!(unsafe { maskgan_generator_shape(h, &mut size, &mut cin, &mut cout) }, MaskganStatus::Ok);
        assert_eq!((size, cin, cout), (16, 1, 1));

        let mut out = vec![0.0f32; 256];
        let s = unsafe { maskgan_generator_run(h, input.data().as_ptr(), 256, out.as_mut_ptr(), 256) };
        assert_eq!(s, MaskganStatus::Ok);
        let expected = ckpt.generator(None, dir_enum).unwrap().generate(input).unwrap();
        assert_eq!(out, expected.data());
        assert!(maskgan_last_error_message().is_null());
        unsafe { maskgan_generator_free(h) };
    }
}

#[test]
fn wrong_buffer_lengths_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.mgan");
    save_checkpoint(&tiny_checkpoint(Task::Cgan), &path).unwrap();
    let (_, h) = load(&path, MASKGAN_DIRECTION_A_TO_B);
    let input = vec![0.0f32; 255];
    let mut out = vec![0.0f32; 256];
    let s = unsafe { maskgan_generator_run(h, input.as_ptr(), input.len(), out.as_mut_ptr(), 256) };
    assert_eq!(s, MaskganStatus::InvalidArgument);
    assert!(last_error().contains("256"));
    unsafe { maskgan_generator_free(h) };
}

#[test]
fn load_failures_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (s, h) = load(&dir.path().join("missing.mgan"), 0);
    assert_eq!((s, h.is_null()), (MaskganStatus::Io, true));

    let path = dir.path().join("cgan.mgan");
    save_checkpoint(&tiny_checkpoint(Task::Cgan), &path).unwrap();
    let (s, h) = load(&path, MASKGAN_DIRECTION_B_TO_A);
    assert_eq!((s, h.is_null()), (MaskganStatus::TaskMismatch, true));
    assert!(last_error().contains("cyclegan"));

    let (s, _) = load(&path, 7);
    assert_eq!(s, MaskganStatus::InvalidArgument);

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let bad = dir.path().join("flipped.mgan");
    std::fs::write(&bad, &bytes).unwrap();
    let (s, h) = load(&bad, 0);
    assert_eq!((s, h.is_null()), (MaskganStatus::CorruptCheckpoint, true));
}

#[test]
fn null_pointers_rejected() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { maskgan_generator_load(ptr::null(), 0, &mut h) }, MaskganStatus::NullPointer);
    let mut v = 0usize;
    assert_eq!(
        unsafe { maskgan_generator_shape(ptr::null(), &mut v, &mut v, &mut v) },
        MaskganStatus::NullPointer
    );
    let mut x = 0.0;
    assert_eq!(
        unsafe { maskgan_mask_metrics(ptr::null(), ptr::null(), 4, 0.0, &mut x, &mut x, &mut x) },
        MaskganStatus::NullPointer
    );
    unsafe { maskgan_generator_free(ptr::null_mut()) };
}

#[test]
fn metrics_by_counting() {
    // pred fg = {0,1,2}, target fg = {1,2,3}: |∩| = 2, |∪| = 4, agree on 4 of 6.
    let pred = [1.0f32, 1.0, 1.0, -1.0, -1.0, -1.0];
    let target = [-1.0f32, 1.0, 1.0, 1.0, -1.0, -1.0];
    let (mut iou, mut dice, mut acc) = (0.0, 0.0, 0.0);
    let s = unsafe {
        maskgan_mask_metrics(pred.as_ptr(), target.as_ptr(), 6, 0.0, &mut iou, &mut dice, &mut acc)
    };
    assert_eq!(s, MaskganStatus::Ok);
    assert_eq!((iou, dice, acc), (2.0 / 4.0, 4.0 / 6.0, 4.0 / 6.0));

    let s = unsafe {
        maskgan_mask_metrics(pred.as_ptr(), target.as_ptr(), 0, 0.0, &mut iou, &mut dice, &mut acc)
    };
    assert_eq!(s, MaskganStatus::InvalidArgument);
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/maskgan.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "maskgan_generator_load",
        "maskgan_generator_run",
        "maskgan_generator_shape",
        "maskgan_generator_free",
        "maskgan_mask_metrics",
        "maskgan_last_error_message",
        "MASKGAN_STATUS_CORRUPT_CHECKPOINT",
    ] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"maskgan.h\"\nint main(void) { MaskganGenerator *h = 0; \
         return maskgan_generator_load(\"x\", MASKGAN_DIRECTION_A_TO_B, &h) == MASKGAN_STATUS_OK; }\n",
    )
    .unwrap();
    let Ok(status) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
    else {
        eprintln!("no C compiler found; syntax check skipped");
        return;
    };
    assert!(status.success());
}
