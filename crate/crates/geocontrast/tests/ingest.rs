mod common;

use std::fs;

use geocontrast::ingest::{label_histogram, load_funsd, load_rvlcdip_invoices, partition};
use geocontrast::synth;
use geocontrast::PipelineError;
use geocontrast_core::labels::Dataset;

#[test]
fn validation_split_depends_only_on_seed() {
    let dir = tempfile::tempdir().unwrap();
    let root = common::funsd_root(dir.path(), 10, 2);
    let ids = |seed| {
        let (s, _) = load_funsd(&root, 0.3, seed).unwrap();
        let v: Vec<String> = s.validation.iter().map(|d| d.id.clone()).collect();
        (s.train.len(), v)
    };
    let (n, a) = ids(7);
    assert_eq!((n, a.len()), (7, 3));
    assert_eq!(ids(7).1, a);
    let others: Vec<_> = (0..20).map(|s| ids(s).1).collect();
    assert!(others.iter().any(|o| *o != a), "seed has no effect on the split");
}

#[test]
fn partition_is_disjoint_and_order_preserving() {
    let dir = tempfile::tempdir().unwrap();
    let root = common::funsd_root(dir.path(), 9, 1);
    let (s, _) = load_funsd(&root, 0.0, 0).unwrap();
    let all: Vec<String> = s.train.iter().map(|d| d.id.clone()).collect();
    let (kept, held) = partition(s.train, 0.34, 3);
    assert_eq!(held.len(), 3);
    let mut merged: Vec<String> = kept.iter().chain(&held).map(|d| d.id.clone()).collect();
    merged.sort();
    assert_eq!(merged, all);
    assert!(kept.windows(2).all(|w| w[0].id < w[1].id));
}

#[test]
fn label_histogram_matches_raw_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let root = common::funsd_root(dir.path(), 4, 2);
    let labels = Dataset::Funsd.labels();
    let mut want = vec![0usize; labels.len()];
    for sub in ["training_data", "testing_data"] {
        for f in fs::read_dir(root.join(sub).join("annotations")).unwrap() {
            let v: serde_json::Value = serde_json::from_slice(&fs::read(f.unwrap().path()).unwrap()).unwrap();
            for e in v["form"].as_array().unwrap() {
                let name = e["label"].as_str().unwrap();
                let idx = (0..labels.len())
                    .find(|&i| labels.name(i).eq_ignore_ascii_case(name))
                    .unwrap();
                want[idx] += 1;
            }
        }
    }
    let (s, _) = load_funsd(&root, 0.0, 0).unwrap();
    let docs: Vec<_> = s.train.iter().chain(&s.test).cloned().collect();
    assert_eq!(label_histogram(&docs, labels.len()), want);
    assert!(
        want.iter().all(|&c| c > 0),
        "synthetic forms should use every class: {want:?}"
    );
}

#[test]
fn page_without_image_is_skipped_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let root = common::funsd_root(dir.path(), 3, 1);
    fs::remove_file(root.join("training_data/images/synth_train_0001.png")).unwrap();
    let (s, report) = load_funsd(&root, 0.0, 0).unwrap();
    assert_eq!(s.train.len(), 2);
    assert!(s.train.iter().all(|d| d.id != "synth_train_0001"));
    assert_eq!(report.skipped.len(), 1);
    assert!(report.skipped[0].annotation.ends_with("synth_train_0001.json"));
}

#[test]
fn missing_layout_is_a_missing_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_funsd(&dir.path().join("nope"), 0.1, 0).unwrap_err();
    assert!(matches!(err, PipelineError::Missing(_)));
    assert_eq!(err.category(), "missing-prerequisite");
}

#[test]
fn invoices_get_a_seeded_test_split_and_table_regions() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("inv");
    synth::write_invoices(&root, 10, 1).unwrap();
    let (a, _) = load_rvlcdip_invoices(&root, 0.1, 0.2, 5).unwrap();
    let (b, _) = load_rvlcdip_invoices(&root, 0.1, 0.2, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.test.len(), 2);
    assert_eq!(a.len(), 10);
    let doc = &a.train[0];
    assert_eq!(doc.tables.len(), 1);
    let t = doc.tables[0];
    let inside = doc.records.iter().filter(|r| r.table.is_some()).count();
    let centers_inside = doc
        .records
        .iter()
        .filter(|r| {
            let [x, y] = r.bbox.center();
            x >= t.xmin && x <= t.xmax && y >= t.ymin && y <= t.ymax
        })
        .count();
    assert!(inside > 0);
    assert_eq!(inside, centers_inside);
}
