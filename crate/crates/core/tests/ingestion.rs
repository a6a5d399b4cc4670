use std::io::Write;
use std::path::Path;

use xfer::data::{examples, ingest, split_stratified, SplitRatios, Vocabulary, CLS, SEP};

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn politifact_fixture_counts() {
    let report = ingest(&fixture("politifact.jsonl")).unwrap();
    assert_eq!(report.items.len(), 948);
    assert_eq!(report.total_fake(), 420);
    assert_eq!(report.total_real(), 528);
    let c = &report.counts["politifact"];
    assert_eq!((c.fake, c.real), (420, 528));
    assert!(report.rejected.is_empty());
}

#[test]
fn three_line_counts() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, r#"{{"text":"flu shots cause flu","label":1,"domain":"health"}}"#).unwrap();
    writeln!(f, r#"{{"text":"vaccines are tested","label":0,"domain":"health"}}"#).unwrap();
    writeln!(f, r#"{{"text":"senate passed the bill","label":1,"domain":"politics"}}"#).unwrap();
    let report = ingest(f.path()).unwrap();
    assert_eq!(report.items.len(), 3);
    assert_eq!((report.counts["health"].fake, report.counts["health"].real), (1, 1));
    assert_eq!((report.counts["politics"].fake, report.counts["politics"].real), (1, 0));
}

#[test]
fn vocabulary_and_splits_are_reproducible() {
    let report = ingest(&fixture("politifact.jsonl")).unwrap();
    let a = Vocabulary::build(&report.items, 2).unwrap();
    let mut reversed = report.items.clone();
    reversed.reverse();
    let b = Vocabulary::build(&reversed, 2).unwrap();
    assert_eq!(a.to_text(), b.to_text());
    assert_eq!(a.fingerprint(), b.fingerprint());

    let s1 = split_stratified(&report.items, SplitRatios::default(), 3).unwrap();
    let s2 = split_stratified(&reversed, SplitRatios::default(), 3).unwrap();
    assert_eq!(s1, s2);
    let d = &s1["politifact"];
    assert_eq!(d.train.len() + d.val.len() + d.test.len(), 948);

    let ex = examples(&d.test, &a, 12).unwrap();
    for e in &ex {
        assert_eq!(e.seq.ids[0], CLS);
        assert_eq!(*e.seq.ids.last().unwrap(), SEP);
        assert!(e.seq.ids.len() <= 12);
    }
}
