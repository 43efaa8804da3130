use std::io::Write;

use guidemt::data::*;
use guidemt::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_corpus() -> SyntheticCorpus {
    let spec = CorpusSpec {
        n_lexemes: 4,
        n_fillers: 5,
        n_parallel: 12,
        n_monolingual: 8,
        n_dev: 4,
        n_contrastive: 6,
        d_local: 5,
        d_global: 7,
        signal_dims: 3,
        ..CorpusSpec::default()
    };
    generate_synthetic_corpus(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

fn dims() -> FeatureDims {
    FeatureDims {
        max_local: 3,
        d_local: 5,
        d_global: 7,
    }
}

#[test]
fn round_trip_every_kind() {
    let c = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("p.jsonl", Dataset::Parallel(c.parallel.clone())),
        ("m.jsonl", Dataset::Monolingual(c.monolingual.clone())),
        ("c.jsonl", Dataset::Contrastive(c.contrastive.clone())),
    ];
    for (name, ds) in cases {
        let path = dir.path().join(name);
        save_dataset(&path, &ds, &c.vocab).unwrap();
        let back = load_dataset(&path, ds.kind(), &c.vocab, &dims()).unwrap();
        assert_eq!(back, ds, "{name}");
    }
}

#[test]
fn corpus_directory_round_trip() {
    let c = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    c.write(dir.path()).unwrap();
    for f in CORPUS_FILES {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let vocab = Vocabulary::load(&dir.path().join("vocab.txt")).unwrap();
    assert_eq!(vocab, c.vocab);
    let key = CorpusKey::load(&dir.path().join("key.json")).unwrap();
    assert_eq!(key, c.key);
}

#[test]
fn empty_file_is_an_empty_dataset() {
    let c = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::write(&path, "\n\n").unwrap();
    let ds = load_dataset(&path, DatasetKind::Parallel, &c.vocab, &dims()).unwrap();
    assert!(ds.is_empty());
}

fn rewrite_line(path: &std::path::Path, line: usize, edit: impl Fn(&mut serde_json::Value)) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut out = std::fs::File::create(path).unwrap();
    for (i, l) in text.lines().enumerate() {
        if i + 1 == line {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            edit(&mut v);
            writeln!(out, "{v}").unwrap();
        } else {
            writeln!(out, "{l}").unwrap();
        }
    }
}

fn record_line(e: Error) -> usize {
    match e {
        Error::Record { line, .. } => line,
        other => panic!("expected a record error, got {other}"),
    }
}

#[test]
fn bad_records_name_their_line() {
    let c = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.jsonl");
    let write = || save_dataset(&path, &Dataset::Parallel(c.parallel.clone()), &c.vocab).unwrap();

    write();
    rewrite_line(&path, 3, |v| v["alignments"] = serde_json::json!([[0, 1, 9]]));
    let e = load_dataset(&path, DatasetKind::Parallel, &c.vocab, &dims()).unwrap_err();
    assert_eq!(record_line(e), 3);

    write();
    rewrite_line(&path, 2, |v| v["source"] = serde_json::json!("w00 unknownword"));
    let e = load_dataset(&path, DatasetKind::Parallel, &c.vocab, &dims()).unwrap_err();
    assert_eq!(record_line(e), 2);

    write();
    let wider = FeatureDims { d_global: 8, ..dims() };
    let e = load_dataset(&path, DatasetKind::Parallel, &c.vocab, &wider).unwrap_err();
    assert_eq!(record_line(e), 1);

    write();
    let fewer = FeatureDims { max_local: 2, ..dims() };
    assert!(load_dataset(&path, DatasetKind::Parallel, &c.vocab, &fewer).is_err());

    write();
    let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
    writeln!(f, "{{not json").unwrap();
    let e = load_dataset(&path, DatasetKind::Parallel, &c.vocab, &dims()).unwrap_err();
    assert_eq!(record_line(e), c.parallel.len() + 1);
}

#[test]
fn monolingual_file_rejected_as_parallel() {
    let c = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    save_dataset(&path, &Dataset::Monolingual(c.monolingual.clone()), &c.vocab).unwrap();
    assert!(load_dataset(&path, DatasetKind::Parallel, &c.vocab, &dims()).is_err());
}

#[test]
fn default_spec_has_155_items() {
    let c = generate_synthetic_corpus(&CorpusSpec::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(c.contrastive.len(), 155);
    assert!(c.key.lexemes.len() >= 20);
    assert!(c.parallel.len() >= 400);
    for item in &c.contrastive {
        assert_ne!(item.translation_a, item.translation_b);
        assert_eq!(item.source, c.contrastive.iter().find(|i| i.id == item.id).unwrap().source);
        assert_ne!(item.correct_for_image(1), item.correct_for_image(2));
    }
}
