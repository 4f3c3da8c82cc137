use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use seqtrans::data::save_split;
use seqtrans::eval::{EvalProtocol, Negatives};
use seqtrans::synth::{generate_split, SynthSpec};
use seqtrans::train::{fit, save_checkpoint, TrainConfig};
use seqtrans::Variant;
use seqtrans_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    split: CString,
    checkpoint: CString,
    n_items: usize,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::noisy_cycle(3, 4, 8, 20, 0.8, 2).unwrap();
    let ds = generate_split(&spec).unwrap();
    let split = dir.path().join("split.txt");
    save_split(&ds, &split).unwrap();
    let cfg = TrainConfig {
        variant: Variant::Tstm,
        d: 8,
        max_epochs: 1,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let protocol = EvalProtocol {
        negatives: Negatives::FullCatalog,
        ..EvalProtocol::default()
    };
    let ck = fit(&ds, &cfg, &protocol, None).unwrap().checkpoint;
    let checkpoint = dir.path().join("checkpoint.bin");
    save_checkpoint(&ck, &checkpoint).unwrap();
    Fixture {
        n_items: ds.catalog.n_items(),
        split: c_path(&split),
        checkpoint: c_path(&checkpoint),
        _dir: dir,
    }
}

fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = seqtrans_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn load_score_evaluate() {
    let fx = fixture();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(seqtrans_dataset_load(fx.split.as_ptr(), &mut ds), SeqtransStatus::Ok);
        assert_eq!(seqtrans_dataset_num_users(ds), 20);
        assert_eq!(seqtrans_dataset_num_items(ds), fx.n_items);
        assert_eq!(seqtrans_dataset_num_categories(ds), 3);

        let mut model = ptr::null_mut();
        assert_eq!(seqtrans_model_load(fx.checkpoint.as_ptr(), &mut model), SeqtransStatus::Ok);
        assert_eq!(CStr::from_ptr(seqtrans_model_variant(model)).to_str().unwrap(), "tstm");
        assert_eq!(seqtrans_model_num_items(model), fx.n_items);

        let items = [1usize, 5, 9];
        let cats = [1usize, 2, 3];
        let mut scores = vec![f64::NAN; fx.n_items];
        let st = seqtrans_model_score(model, 0, items.as_ptr(), cats.as_ptr(), 3, scores.as_mut_ptr(), scores.len());
        assert_eq!(st, SeqtransStatus::Ok);
        assert!(scores.iter().all(|s| s.is_finite()));

        let cutoffs = [1usize, 5, 10];
        let mut hit = [0.0; 3];
        let mut ndcg = [0.0; 3];
        let st = seqtrans_evaluate(
            model,
            ds,
            SeqtransSplit::Test,
            0,
            1,
            cutoffs.as_ptr(),
            3,
            hit.as_mut_ptr(),
            ndcg.as_mut_ptr(),
        );
        assert_eq!(st, SeqtransStatus::Ok);
        assert!(hit.windows(2).all(|w| w[0] <= w[1]));
        for (h, n) in hit.iter().zip(&ndcg) {
            assert!((0.0..=1.0).contains(h) && n <= h);
        }

        seqtrans_model_free(model);
        seqtrans_dataset_free(ds);
    }
}

#[test]
fn errors_become_status_codes() {
    let fx = fixture();
    unsafe {
        let mut ds = ptr::null_mut();
        let missing = CString::new("/nonexistent/split.txt").unwrap();
        assert_eq!(seqtrans_dataset_load(missing.as_ptr(), &mut ds), SeqtransStatus::Io);
        assert!(ds.is_null());
        assert!(last_error().contains("nonexistent"));

        assert_eq!(seqtrans_dataset_load(ptr::null(), &mut ds), SeqtransStatus::NullPointer);

        // a split file is not a checkpoint
        let mut model = ptr::null_mut();
        let st = seqtrans_model_load(fx.split.as_ptr(), &mut model);
        assert!(matches!(st, SeqtransStatus::Parse | SeqtransStatus::Corrupt | SeqtransStatus::Mismatch));
        assert!(model.is_null());

        assert_eq!(seqtrans_model_load(fx.checkpoint.as_ptr(), &mut model), SeqtransStatus::Ok);
        let mut small = vec![0.0; fx.n_items - 1];
        let items = [1usize];
        let st = seqtrans_model_score(model, 0, items.as_ptr(), items.as_ptr(), 1, small.as_mut_ptr(), small.len());
        assert_eq!(st, SeqtransStatus::BufferTooSmall);

        let mut scores = vec![0.0; fx.n_items];
        let bad = [fx.n_items + 7];
        let st = seqtrans_model_score(model, 0, bad.as_ptr(), items.as_ptr(), 1, scores.as_mut_ptr(), scores.len());
        assert_eq!(st, SeqtransStatus::InvalidArgument);
        assert!(last_error().contains("item id"));

        seqtrans_model_free(model);
        seqtrans_model_free(ptr::null_mut());
        seqtrans_dataset_free(ptr::null_mut());
        assert_eq!(seqtrans_dataset_num_users(ptr::null()), 0);
        assert!(seqtrans_model_variant(ptr::null()).is_null());
    }
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(seqtrans_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/seqtrans.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["seqtrans_dataset_load", "seqtrans_model_score", "seqtrans_evaluate", "seqtrans_last_error"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let Ok(status) = Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).status() else {
        eprintln!("no C compiler found; skipping syntax check");
        return;
    };
    assert!(status.success());
}
