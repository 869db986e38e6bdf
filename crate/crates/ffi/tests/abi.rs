use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use entrec::checkpoint::{Checkpoint, Stage};
use entrec::config::ModelConfig;
use entrec::data::{parse_news_tsv, Dataset, ParseLimits};
use entrec::params::ParameterStore;
use entrec::pipeline::sized_for;
use entrec::ranker::Recommender;
use entrec::rng::SeedStream;
use entrec_ffi::*;

fn news() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/mind_tiny/news.tsv")
}

/// An untrained recommender over the fixture news, saved as a checkpoint.
fn checkpoint(dir: &Path, stage: Stage) -> PathBuf {
    let (raw, _) = parse_news_tsv(&news(), ParseLimits::default()).unwrap();
    let ds = Dataset::build(raw, Vec::new(), 1);
    let base = ModelConfig {
        dim: 8,
        entity_dim: 8,
        ffn_dim: 16,
        pool_hidden: 8,
        title_heads: 2,
        see_heads: 2,
        user_heads: 2,
        title_layers: 1,
        see_layers: 1,
        ..Default::default()
    };
    let cfg = sized_for(&base, &ds);
    let model = Recommender::new(&cfg).unwrap();
    let mut store = ParameterStore::new();
    model.init(&mut store, &SeedStream::new(1)).unwrap();
    let path = dir.join("m.ckpt");
    Checkpoint {
        stage,
        config: cfg,
        store,
        vocab: ds.vocab.clone(),
        entities: ds.entities.clone(),
    }
    .save(&path)
    .unwrap();
    path
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(entrec_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn open(ckpt: &Path) -> (EntrecStatus, *mut EntrecModel) {
    let mut m = ptr::null_mut();
    let (a, b) = (c(ckpt.to_str().unwrap()), c(news().to_str().unwrap()));
    let st = unsafe { entrec_model_open(a.as_ptr(), b.as_ptr(), &mut m) };
    (st, m)
}

fn recommend(
    m: *const EntrecModel,
    history: &[&str],
    cands: &[&str],
    k: usize,
) -> (EntrecStatus, Vec<(usize, f64)>) {
    let hs: Vec<CString> = history.iter().map(|s| c(s)).collect();
    let cs: Vec<CString> = cands.iter().map(|s| c(s)).collect();
    let hp: Vec<*const c_char> = hs.iter().map(|s| s.as_ptr()).collect();
    let cp: Vec<*const c_char> = cs.iter().map(|s| s.as_ptr()).collect();
    let mut idx = vec![usize::MAX; cands.len()];
    let mut scores = vec![f64::NAN; cands.len()];
    let mut n = usize::MAX;
    let st = unsafe {
        entrec_recommend(
            m,
            hp.as_ptr(),
            hp.len(),
            cp.as_ptr(),
            cp.len(),
            k,
            idx.as_mut_ptr(),
            scores.as_mut_ptr(),
            &mut n,
        )
    };
    let n = if st == EntrecStatus::Ok { n } else { 0 };
    (st, idx.into_iter().zip(scores).take(n).collect())
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(entrec_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn open_rank_close() {
    let dir = tempfile::tempdir().unwrap();
    let (st, m) = open(&checkpoint(dir.path(), Stage::Recsys));
    assert_eq!(st, EntrecStatus::Ok, "{}", last_error());
    assert!(!m.is_null());

    let cands = ["N3", "N4", "N5", "N6"];
    let (st, all) = recommend(m, &["N1", "N2", "N10"], &cands, 10);
    assert_eq!(st, EntrecStatus::Ok, "{}", last_error());
    assert_eq!(all.len(), 4);
    let mut seen: Vec<usize> = all.iter().map(|r| r.0).collect();
    seen.sort();
    assert_eq!(seen, vec![0, 1, 2, 3]);
    assert!(all.windows(2).all(|w| w[0].1 >= w[1].1));

    let (st, top) = recommend(m, &["N1", "N2", "N10"], &cands, 2);
    assert_eq!(st, EntrecStatus::Ok);
    assert_eq!(top, all[..2].to_vec());

    let (st, _) = recommend(m, &["N1"], &["N2", "MISSING"], 2);
    assert_eq!(st, EntrecStatus::Data);
    assert!(last_error().contains("MISSING"));
    let (st, _) = recommend(m, &[], &["N2"], 1);
    assert_eq!(st, EntrecStatus::Usage);
    let (st, _) = recommend(m, &["N1"], &["N2"], 0);
    assert_eq!(st, EntrecStatus::Usage);
    let (st, _) = recommend(ptr::null(), &["N1"], &["N2"], 1);
    assert_eq!(st, EntrecStatus::InvalidPointer);

    unsafe { entrec_model_close(m) };
    unsafe { entrec_model_close(ptr::null_mut()) };
}

#[test]
fn open_failures_report_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let (st, m) = open(&dir.path().join("absent.ckpt"));
    assert_eq!(st, EntrecStatus::Data);
    assert!(m.is_null());
    assert!(last_error().contains("absent.ckpt"));

    let (st, m) = open(&checkpoint(dir.path(), Stage::Pretrain));
    assert_eq!(st, EntrecStatus::Usage);
    assert!(m.is_null());

    let mut m = ptr::null_mut();
    let st = unsafe { entrec_model_open(ptr::null(), ptr::null(), &mut m) };
    assert_eq!(st, EntrecStatus::InvalidPointer);
    let st = unsafe { entrec_model_open(ptr::null(), ptr::null(), ptr::null_mut()) };
    assert_eq!(st, EntrecStatus::InvalidPointer);
}

#[test]
fn metrics_match_the_library() {
    let scores = [0.9, 0.1, 0.5, 0.5, 0.3];
    let labels = [0u8, 1, 1, 0, 0];
    let mut out = EntrecMetrics::default();
    let st = unsafe { entrec_metrics(scores.as_ptr(), labels.as_ptr(), 5, &mut out) };
    assert_eq!(st, EntrecStatus::Ok);
    let m = entrec::metrics::impression_metrics(&scores, &labels).unwrap();
    assert_eq!(
        (out.auc, out.mrr, out.ndcg5, out.ndcg10),
        (m.auc, m.mrr, m.ndcg5, m.ndcg10)
    );
    // Pairs: 0.1 loses all three, 0.5 beats 0.3 and ties 0.5.
    assert_eq!(out.auc, 1.5 / 6.0);

    let st = unsafe { entrec_metrics(scores.as_ptr(), [0u8; 5].as_ptr(), 5, &mut out) };
    assert_eq!(st, EntrecStatus::Undefined);
    let st = unsafe { entrec_metrics(scores.as_ptr(), [2u8, 0, 0, 0, 0].as_ptr(), 5, &mut out) };
    assert_eq!(st, EntrecStatus::Usage);
    assert_eq!(last_error(), "label 2 is not 0 or 1");
}

#[test]
fn header_declares_the_interface() {
    let h = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/entrec.h"))
        .unwrap();
    for sym in [
        "entrec_model_open",
        "entrec_model_close",
        "entrec_recommend",
        "entrec_metrics",
        "entrec_last_error",
        "entrec_version",
        "typedef struct EntrecModel EntrecModel",
        "ENTREC_STATUS_OK = 0",
    ] {
        assert!(h.contains(sym), "header lacks `{sym}`");
    }
}
