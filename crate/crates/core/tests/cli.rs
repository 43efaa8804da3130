use std::path::Path;

use clap::CommandFactory;
use guidemt::cli::{run, Cli, EXIT_INVALID, EXIT_IO, EXIT_OK, EXIT_USAGE};

const TINY: &str = r#"
[model]
d_model = 8
n_heads = 2
d_ffn = 16
n_encoder_layers = 1
n_decoder_layers = 1
max_text_len = 8
n_local_features = 3
d_local_in = 6
d_global_in = 8
adapter_reduction = 4

[train]
batch_size = 4
lr = 1e-3
max_steps = 12
eval_every = 6
backbone_steps = 4
"#;

const SMALL_CORPUS: &str = r#"
n_lexemes = 4
n_fillers = 6
n_parallel = 24
n_monolingual = 16
n_dev = 4
n_contrastive = 6
d_local = 6
d_global = 8
signal_dims = 4
"#;

fn guidemt(args: &[&str]) -> i32 {
    run(std::iter::once("guidemt").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn no_arguments_is_a_usage_error() {
    assert_eq!(guidemt(&[]), EXIT_USAGE);
    assert_eq!(guidemt(&["train", "--no-such-flag"]), EXIT_USAGE);
    assert_eq!(guidemt(&["train"]), EXIT_USAGE);
    assert_eq!(guidemt(&["train", "--dataset", "x", "--out", "y", "--preset", "bogus"]), EXIT_USAGE);
    assert_eq!(guidemt(&["--help"]), EXIT_OK);
}

#[test]
fn every_flag_is_documented() {
    let mut cmd = Cli::command();
    cmd.build();
    let mut checked = 0;
    for sub in cmd.get_subcommands() {
        if sub.get_name() == "help" {
            continue;
        }
        assert!(sub.get_about().is_some(), "{} lacks a description", sub.get_name());
        let help = sub.clone().render_long_help().to_string();
        for arg in sub.get_arguments() {
            let id = arg.get_id().as_str();
            if id == "help" || id == "version" {
                continue;
            }
            assert!(arg.get_help().is_some(), "{} --{id} lacks help", sub.get_name());
            let long = arg.get_long().unwrap_or_else(|| panic!("{id} has no long form"));
            assert!(help.contains(&format!("--{long}")), "{} help omits --{long}", sub.get_name());
            checked += 1;
        }
    }
    assert!(checked >= 30, "{checked}");
}

#[test]
fn subcommands_named_as_documented() {
    let cmd = Cli::command();
    let names: Vec<&str> = cmd.get_subcommands().map(|s| s.get_name()).collect();
    for want in ["gen-data", "train", "translate", "eval-contrastive", "eval-bleu", "inspect-attention", "ablate"] {
        assert!(names.contains(&want), "{want}");
    }
}

#[test]
fn gen_data_default_spec_writes_155_items() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    assert_eq!(guidemt(&["gen-data", "--out", p(&out)]), EXIT_OK);
    let items = std::fs::read_to_string(out.join("contrastive.jsonl")).unwrap();
    assert_eq!(items.lines().count(), 155);
    for f in guidemt::data::CORPUS_FILES {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("corpus.toml"), SMALL_CORPUS).unwrap();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    let data = d.join("data");
    assert_eq!(guidemt(&["gen-data", "--config", p(&d.join("corpus.toml")), "--seed", "2", "--out", p(&data)]), EXIT_OK);

    let run_dir = d.join("run");
    let train = |out: &Path, seed: &str| {
        guidemt(&["train", "--dataset", p(&data), "--config", p(&d.join("tiny.toml")), "--seed", seed, "--out", p(out)])
    };
    assert_eq!(train(&run_dir, "7"), EXIT_OK);
    for f in ["checkpoint.bin", "last.bin", "metrics.jsonl", "summary.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().filter(|l| l.contains("\"record\":\"step\"")).count(), 16);
    assert!(metrics.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));

    let again = d.join("again");
    assert_eq!(train(&again, "7"), EXIT_OK);
    assert_eq!(
        std::fs::read(run_dir.join("checkpoint.bin")).unwrap(),
        std::fs::read(again.join("checkpoint.bin")).unwrap()
    );

    let ckpt = run_dir.join("checkpoint.bin");
    let report = d.join("report.jsonl");
    assert_eq!(
        guidemt(&["eval-contrastive", "--checkpoint", p(&ckpt), "--dataset", p(&data.join("contrastive.jsonl")), "--out", p(&report)]),
        EXIT_OK
    );
    let lines: Vec<String> = std::fs::read_to_string(&report).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 7);
    let summary: serde_json::Value = serde_json::from_str(lines.last().unwrap()).unwrap();
    assert_eq!(summary["summary"]["total"], 12);

    let text_only = d.join("text_only.jsonl");
    assert_eq!(
        guidemt(&["eval-contrastive", "--text-only", "--checkpoint", p(&ckpt), "--dataset", p(&data.join("contrastive.jsonl")), "--out", p(&text_only)]),
        EXIT_OK
    );
    let last = std::fs::read_to_string(&text_only).unwrap();
    let s: serde_json::Value = serde_json::from_str(last.lines().last().unwrap()).unwrap();
    assert_eq!(s["summary"]["accuracy"], 0.5);
    assert_eq!(s["summary"]["ties"], 0);

    let hyp = d.join("hyp.tsv");
    assert_eq!(
        guidemt(&["translate", "--checkpoint", p(&ckpt), "--dataset", p(&data.join("dev.jsonl")), "--out", p(&hyp)]),
        EXIT_OK
    );
    assert_eq!(std::fs::read_to_string(&hyp).unwrap().lines().count(), 4);
    assert_eq!(
        guidemt(&["eval-bleu", "--checkpoint", p(&ckpt), "--dataset", p(&data.join("dev.jsonl"))]),
        EXIT_OK
    );
    let att = d.join("att.json");
    assert_eq!(
        guidemt(&["inspect-attention", "--checkpoint", p(&ckpt), "--dataset", p(&data.join("dev.jsonl")), "--index", "1", "--out", p(&att)]),
        EXIT_OK
    );
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&att).unwrap()).unwrap();
    let n = doc["labels"].as_array().unwrap().len();
    assert_eq!(doc["scores"].as_array().unwrap().len(), n);
    assert_eq!(
        guidemt(&["inspect-attention", "--checkpoint", p(&ckpt), "--dataset", p(&data.join("dev.jsonl")), "--index", "99"]),
        EXIT_INVALID
    );

    let ab = d.join("ablate");
    assert_eq!(
        guidemt(&["ablate", "--dataset", p(&data), "--config", p(&d.join("tiny.toml")), "--preset", "no-global", "--out", p(&ab)]),
        EXIT_OK
    );
    let table = std::fs::read_to_string(ab.join("table.tsv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(2).unwrap().starts_with("no-global\t"));
}

#[test]
fn error_classes_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(guidemt(&["train", "--dataset", p(&d.join("missing")), "--out", p(&d.join("o"))]), EXIT_IO);
    std::fs::write(d.join("bad.toml"), "[train]\nlr = -1.0\n").unwrap();
    std::fs::write(d.join("corpus.toml"), SMALL_CORPUS).unwrap();
    let data = d.join("data");
    assert_eq!(guidemt(&["gen-data", "--config", p(&d.join("corpus.toml")), "--out", p(&data)]), EXIT_OK);
    assert_eq!(
        guidemt(&["train", "--dataset", p(&data), "--config", p(&d.join("bad.toml")), "--out", p(&d.join("o"))]),
        EXIT_INVALID
    );
    std::fs::write(d.join("typo.toml"), "[train]\nlearning_rate = 1.0\n").unwrap();
    assert_eq!(
        guidemt(&["train", "--dataset", p(&data), "--config", p(&d.join("typo.toml")), "--out", p(&d.join("o"))]),
        EXIT_INVALID
    );
    let hyp = d.join("h.txt");
    std::fs::write(&hyp, "the cat\n").unwrap();
    let refs = d.join("r.txt");
    std::fs::write(&refs, "the cat\nanother\n").unwrap();
    assert_eq!(guidemt(&["eval-bleu", "--hypotheses", p(&hyp), "--references", p(&refs)]), EXIT_INVALID);
    std::fs::write(&refs, "the cat\n").unwrap();
    assert_eq!(guidemt(&["eval-bleu", "--hypotheses", p(&hyp), "--references", p(&refs)]), EXIT_OK);
    assert_eq!(guidemt(&["eval-bleu", "--smoothing", "add-one"]), EXIT_INVALID);
}
