mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use probekit::ingest::{write_dataset, TaskDataset};
use probekit::report::{parse_table_csv, round_2dp};
use probekit::reprstore::ReprStore;
use probekit::trainer::RunReport;

fn probekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probekit")).args(args).env_remove("PROBEKIT_SEED").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn save_task(dir: &Path, ds: &TaskDataset, name: &str) -> PathBuf {
    let path = dir.join(format!("{name}.jsonl"));
    let mut records = Vec::new();
    let mut vocab = Vec::new();
    write_dataset(ds, &mut records, &mut vocab).unwrap();
    std::fs::write(&path, records).unwrap();
    std::fs::write(dir.join(format!("{name}.vocab.json")), vocab).unwrap();
    path
}

fn save_store(dir: &Path, store: &ReprStore, name: &str) -> PathBuf {
    let path = dir.join(format!("{name}.cwrs"));
    std::fs::write(&path, store.as_bytes()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let (ds, store) = common::layer_signal_task(5, 80, 8, 0.5, 1.0);
    (save_store(dir, &store, "x"), save_task(dir, &ds, "sig"))
}

#[test]
fn sweep_writes_metrics_and_heatmap_row_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (store, task) = fixture(dir.path());
    let outs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("r{i}"))).collect();
    for out in &outs {
        let o = probekit(&["sweep", "--store", s(&store), "--task", s(&task), "--probe", "linear", "--out", s(out), "--epochs", "5", "--seed", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["metrics.json", "heatmap_row.csv", "heatmap.svg"] {
        let a = std::fs::read(outs[0].join(f)).unwrap();
        let b = std::fs::read(outs[1].join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between reruns");
    }
    let reports: Vec<RunReport> = serde_json::from_slice(&std::fs::read(outs[0].join("metrics.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 4);
    assert!(reports.iter().all(|r| r.task == "layer-signal"));
    let seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, [3, 3 ^ 1, 3 ^ 2, 3 ^ 3]);
    let row = std::fs::read_to_string(outs[0].join("heatmap_row.csv")).unwrap();
    let lines: Vec<&str> = row.lines().collect();
    assert_eq!(lines[0], "task,representation,arch,0,1,2,mix");
    assert_eq!(lines.len(), 2);
}

#[test]
fn missing_store_is_an_io_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let (_, task) = fixture(dir.path());
    let missing = dir.path().join("nope.cwrs");
    let o = probekit(&["sweep", "--store", s(&missing), "--task", s(&task), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error[io]: "), "{err}");
    assert!(err.contains(s(&missing)), "{err}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(probekit(&["sweep", "--bogus"]).status.code(), Some(2));
    assert_eq!(probekit(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let (store, task) = fixture(dir.path());
    let o = probekit(&["train", "--store", s(&store), "--task", s(&task), "--layer", "0", "--probe", "cnn", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]: "));
    assert_eq!(probekit(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_store_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, task) = fixture(dir.path());
    let bad = dir.path().join("bad.cwrs");
    std::fs::write(&bad, b"definitely not a store").unwrap();
    let o = probekit(&["sweep", "--store", s(&bad), "--task", s(&task), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains(s(&bad)));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (store, task) = fixture(dir.path());
    let out = dir.path().join("t");
    let o = Command::new(env!("CARGO_BIN_EXE_probekit"))
        .args(["train", "--store", s(&store), "--task", s(&task), "--layer", "mix", "--out", s(&out), "--epochs", "4"])
        .env("PROBEKIT_SEED", "42")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let r: RunReport = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(r.seed, 42);
    assert_eq!(r.layer.label(), "mix");
    assert_eq!(r.mix_weights.as_ref().map(Vec::len), Some(3));
    assert!(out.join("probe.ckpt").exists());
    assert!(std::fs::read_to_string(out.join("predictions.jsonl")).unwrap().lines().count() > 0);
}

#[test]
fn report_emits_one_svg_per_grid_and_reparsable_tables() {
    let dir = tempfile::tempdir().unwrap();
    let (store, task) = fixture(dir.path());
    let (ds2, store2) = common::next_token_task(2, 60, 6);
    let store2 = save_store(dir.path(), &store2, "y");
    let task2 = save_task(dir.path(), &ds2, "next");
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    for (st, t, out) in [(&store, &task, &r1), (&store2, &task2, &r2)] {
        let o = probekit(&["sweep", "--store", s(st), "--task", s(t), "--out", s(out), "--epochs", "4"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let figs = dir.path().join("figs");
    let o = probekit(&["report", "--in", s(&r1), s(&r2), "--format", "svg", "--out", s(&figs)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut svgs: Vec<String> =
        std::fs::read_dir(&figs).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    svgs.sort();
    assert_eq!(svgs, ["heatmap_synthetic-layers.svg", "heatmap_synthetic-next.svg"]);
    let svg = std::fs::read_to_string(figs.join("heatmap_synthetic-next.svg")).unwrap();
    // one store layer plus the mix, two task columns
    assert_eq!(svg.matches(r#"class="cell""#).count(), 2 * 2);

    let tables = dir.path().join("tables");
    let o = probekit(&["report", "--in", s(&r1), s(&r2), "--format", "csv", "--out", s(&tables)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let parsed = parse_table_csv(std::fs::File::open(tables.join("tables.csv")).unwrap()).unwrap();
    let mut reports: Vec<RunReport> = Vec::new();
    for r in [&r1, &r2] {
        reports.extend(serde_json::from_slice::<Vec<RunReport>>(&std::fs::read(r.join("metrics.json")).unwrap()).unwrap());
    }
    assert_eq!(parsed.rows.len(), reports.len());
    for rep in &reports {
        let row = parsed
            .rows
            .iter()
            .find(|row| row.representation == rep.representation && row.layer == rep.layer.label())
            .unwrap();
        let col = parsed.tasks.iter().position(|t| *t == rep.task).unwrap();
        assert_eq!(row.values[col], Some(round_2dp(rep.value)));
    }
}

#[test]
fn report_on_missing_input_fails_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("r9");
    let o = probekit(&["report", "--in", s(&missing), "--format", "json", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(s(&missing)));
}

const CONLLU: &str = "# sent_id = 1
1\tThe\tthe\tDET\tDT\t_\t2\tdet\t_\t_
2\tdog\tdog\tNOUN\tNN\t_\t3\tnsubj\t_\t_
3\tbarks\tbark\tVERB\tVBZ\t_\t0\troot\t_\t_

1\tCats\tcat\tNOUN\tNNS\t_\t2\tnsubj\t_\t_
2\tsleep\tsleep\tVERB\tVBP\t_\t0\troot\t_\t_

";

#[test]
fn compile_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("tiny.conllu");
    let text: String = (0..10).map(|_| CONLLU).collect();
    std::fs::write(&input, text).unwrap();
    let out = dir.path().join("data");
    let o = probekit(&["compile", "--input", s(&input), "--format", "conllu", "--task", "upos", "--name", "pos", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ds = probekit::report::cli::load_task(&out.join("pos.jsonl")).unwrap();
    assert_eq!(ds.name, "pos");
    assert_eq!(ds.num_sentences(), 20);
    assert_eq!(ds.instances.len(), 50);
    assert_eq!(ds.splits.train.len() + ds.splits.dev.len() + ds.splits.test.len(), 20);

    let o = probekit(&["compile", "--input", s(&input), "--format", "columns", "--task", "bio", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let broken = dir.path().join("broken.conllu");
    std::fs::write(&broken, "1\tonly-two-columns\n\n").unwrap();
    let o = probekit(&["compile", "--input", s(&broken), "--format", "conllu", "--task", "upos", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn bilm_probe_writes_report_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, store) = common::cyclic_corpus(3, 10, 60, 8);
    let store = save_store(dir.path(), &store, "c");
    let text: String = corpus.iter().map(|s| s.join(" ") + "\n").collect();
    let corpus_path = dir.path().join("c.txt");
    std::fs::write(&corpus_path, text).unwrap();
    let out = dir.path().join("b");
    let o = probekit(&["bilm-probe", "--store", s(&store), "--corpus", s(&corpus_path), "--out", s(&out), "--epochs", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("bilm.json")).unwrap()).unwrap();
    let layer = &v["layers"][0];
    for k in ["fwd_ppl", "bwd_ppl", "avg_ppl", "V", "oov_rate"] {
        assert!(layer.get(k).is_some(), "missing {k}");
    }
    assert!(std::fs::read_to_string(out.join("perplexity.svg")).unwrap().contains("<polyline"));
}

#[test]
fn pretrain_and_transfer_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let target = common::marker_task(31, 60, 8, false);
    let related = common::marker_task(32, 60, 8, true);
    let target_path = save_task(dir.path(), &target, "target");
    save_task(dir.path(), &related, "related");
    let sents: String = target.sentences.iter().map(|s| s.join(" ") + "\n").collect();
    let sents_path = dir.path().join("sents.txt");
    std::fs::write(&sents_path, sents).unwrap();

    let out = dir.path().join("p");
    let o = probekit(&[
        "pretrain", "--objective", "supervised", "--task", s(&target_path), "--dump", s(&sents_path), "--hidden", "8",
        "--epochs", "3", "--patience", "1", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let store = ReprStore::open(&out.join("store.cwrs")).unwrap();
    assert_eq!(store.header().model_name, "minictx-v1");
    assert_eq!((store.num_layers(), store.dim(), store.num_sentences()), (3, 16, 60));
    assert!(out.join("ctx.ckpt").exists());

    let config = dir.path().join("transfer.toml");
    std::fs::write(
        &config,
        r#"hidden = 8
probe = "linear"
targets = ["target.jsonl"]

[train]
max_epochs = 3
patience = 1

[[pretrain]]
name = "parity"
objective = "supervised"
task = "related.jsonl"

[[pretrain]]
name = "lm"
objective = "bilm"
corpus = "sents.txt"
"#,
    )
    .unwrap();
    let out = dir.path().join("t");
    let o = probekit(&["transfer", "--config", s(&config), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("transfer.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "pretraining,0,1,2,mix,layer_average");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("untrained,"));
    let svg = std::fs::read_to_string(out.join("transfer.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="cell""#).count(), 3 * 4);
}

#[test]
fn grid_config_runs_every_combination() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let config = dir.path().join("grid.toml");
    std::fs::write(
        &config,
        "[train]\nmax_epochs = 3\npatience = 1\n\n[[run]]\nstore = \"x.cwrs\"\ntasks = [\"sig.jsonl\"]\nprobes = [\"linear\", \"mlp\"]\n",
    )
    .unwrap();
    let out = dir.path().join("grid");
    let o = probekit(&["sweep", "--config", s(&config), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for arch in ["linear", "mlp1024"] {
        assert!(out.join("synthetic-layers").join("sig").join(arch).join("metrics.json").exists());
    }
    let o = probekit(&["report", "--in", s(&out), "--format", "json", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("tables.json")).unwrap()).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 8);
}
