use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use docrec::corpus::load_corpus;
use docrec::embed::{DocumentBank, VectorStore};
use docrec::rng::seeded;
use docrec::tensor::Tensor;
use docrec_cli::manifest::{read_manifests, sha256_file};
use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"
[synth]
n_doctors = 10
dialogues_per_doctor = 20

[pretrain]
epochs = 4

[model]
heads = 4
mlp_hidden = 32
neg_ratio = 5
pool_size = 10
max_epochs = 6

[model.encoder]
hash_buckets = 512
dim = 24
"#;

fn docrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_docrec"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = docrec(args);
    assert!(
        out.status.success(),
        "docrec {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    docrec(args).status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// A temp dir holding `small.toml` and a generated corpus under `data/`.
struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        let ws = Self { dir };
        ok(&["gen-synth", "--config", &ws.s("small.toml"), "--out", &ws.s("data")]);
        ws
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.p(rel).display().to_string()
    }

    /// `cmd` with the corpus, config and an output directory.
    fn args<'a>(&'a self, cmd: &'a str, out: &str, rest: &[&'a str]) -> Vec<String> {
        let mut v: Vec<String> = vec![
            cmd.into(),
            "--doctors".into(),
            self.s("data/doctors.jsonl"),
            "--dialogues".into(),
            self.s("data/dialogues.jsonl"),
            "--out".into(),
            self.s(out),
        ];
        if !matches!(cmd, "explain" | "recommend" | "serve") && !rest.contains(&"--config") {
            v.push("--config".into());
            v.push(self.s("small.toml"));
        }
        v.extend(rest.iter().map(|s| s.to_string()));
        v
    }

    fn ok(&self, cmd: &str, out: &str, rest: &[&str]) -> String {
        let args = self.args(cmd, out, rest);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
    }

    fn code(&self, cmd: &str, out: &str, rest: &[&str]) -> i32 {
        let args = self.args(cmd, out, rest);
        code(&args.iter().map(String::as_str).collect::<Vec<_>>())
    }
}

#[test]
fn full_workflow() {
    let ws = Workspace::new();
    assert!(ws.p("data/ground_truth.json").exists());

    ws.ok("split", "split", &[]);
    let split = json(&ws.p("split/split.json"));
    assert_eq!(split["train_dialogues"].as_array().unwrap().len(), 160);

    let pre = ws.ok("pretrain", "pre", &["--split", &ws.s("split/split.json")]);
    assert!(pre.contains("held-out pair accuracy"));
    assert!(ws.p("pre/encoder.ckpt").exists());

    ws.ok(
        "train",
        "train",
        &[
            "--checkpoint",
            &ws.s("pre/encoder.ckpt"),
            "--split",
            &ws.s("split/split.json"),
        ],
    );
    let report = json(&ws.p("train/train_report.json"));
    assert!(report["best_val_loss"].as_f64().unwrap() <= report["initial_val_loss"].as_f64().unwrap());

    let table = ws.ok(
        "eval",
        "eval",
        &["--checkpoint", &ws.s("train/model.ckpt"), "--bucket", "department"],
    );
    assert!(table.contains("department=topic0"), "{table}");
    let eval = json(&ws.p("eval/eval.json"));
    assert_eq!(eval["overall"]["count"], 20);
    assert_eq!(eval["buckets"]["department"].as_object().unwrap().len(), 5);

    let rec = ws.ok(
        "recommend",
        "rec",
        &[
            "--checkpoint",
            &ws.s("train/model.ckpt"),
            "--query",
            "t1_0 t1_3 t1_4",
            "--top",
            "5",
        ],
    );
    let lines: Vec<(String, f64)> = rec
        .lines()
        .map(|l| {
            let (id, s) = l.split_once('\t').expect("tab separated");
            (id.to_string(), s.parse().unwrap())
        })
        .collect();
    assert_eq!(lines.len(), 5);
    assert!(lines.windows(2).all(|w| w[0].1 >= w[1].1), "{rec}");
    let corpus = load_corpus(&ws.p("data/doctors.jsonl"), &ws.p("data/dialogues.jsonl")).unwrap();
    assert!(lines.iter().all(|(id, _)| corpus.doctor(id).is_some()));
    assert_eq!(lines.iter().map(|l| &l.0).collect::<HashSet<_>>().len(), 5);

    let exp = ws.ok(
        "explain",
        "rec",
        &[
            "--checkpoint",
            &ws.s("train/model.ckpt"),
            "--query",
            "t1_0 t1_3",
            "--doctor",
            "d01",
            "--top-k",
            "3",
        ],
    );
    assert_eq!(exp.lines().filter(|l| l.starts_with("head ")).count(), 4);
    let explained = json(&ws.p("rec/explain.json"));
    assert_eq!(explained["heads"][0]["top_tokens"].as_array().unwrap().len(), 3);

    let manifests = read_manifests(&ws.p("train")).unwrap();
    let m = &manifests[0];
    assert_eq!(m.command, "train");
    assert_eq!(
        m.inputs["doctors"].sha256,
        sha256_file(&ws.p("data/doctors.jsonl")).unwrap()
    );
    assert_eq!(
        m.inputs["encoder"].sha256,
        sha256_file(&ws.p("pre/encoder.ckpt")).unwrap()
    );
    assert!(m.inputs.contains_key("split"));
    assert_eq!(m.checkpoints, vec![ws.p("train/model.ckpt")]);
    assert!(m.artifacts.iter().all(|a| a.exists()));
    assert_eq!(m.config.model.heads, 4);
    assert_eq!(m.seeds["model"], 0);
    assert!(m.metrics["best_epoch"].as_u64().unwrap() >= 1);
    let rec_manifest = &read_manifests(&ws.p("rec")).unwrap()[0];
    assert_eq!(rec_manifest.metrics["results"], 5);
}

#[test]
fn identical_runs_give_identical_reports() {
    let ws = Workspace::new();
    for out in ["a", "b"] {
        ws.ok("train", &format!("{out}/train"), &["--seed", "3"]);
        ws.ok(
            "eval",
            &format!("{out}/eval"),
            &["--checkpoint", &ws.s(&format!("{out}/train/model.ckpt"))],
        );
    }
    for file in ["train/model.ckpt", "train/train_report.json", "eval/eval.json"] {
        assert_eq!(
            fs::read(ws.p(&format!("a/{file}"))).unwrap(),
            fs::read(ws.p(&format!("b/{file}"))).unwrap(),
            "{file}"
        );
    }
    let a = &read_manifests(&ws.p("a/train")).unwrap()[0];
    let b = &read_manifests(&ws.p("b/train")).unwrap()[0];
    assert_eq!(a.config, b.config);
    assert_eq!(a.inputs, b.inputs);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.seeds["split"], 3);
}

#[test]
fn seed_averaging_reports_the_mean() {
    let ws = Workspace::new();
    let out = ws.ok("eval", "seeds", &["--seeds", "0,1,2"]);
    assert!(out.contains("mean"));
    let report = json(&ws.p("seeds/eval_seeds.json"));
    let runs = report["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 3);
    assert_eq!(
        runs.iter().map(|r| r["seed"].as_u64().unwrap()).collect::<Vec<_>>(),
        [0, 1, 2]
    );
    for key in ["p_at_1", "map", "err_at_5"] {
        let values: Vec<f64> = runs
            .iter()
            .map(|r| r["test"]["overall"][key].as_f64().unwrap())
            .collect();
        let mean = values.iter().sum::<f64>() / 3.0;
        assert!((report["mean"][key].as_f64().unwrap() - mean).abs() < 1e-12, "{key}");
    }
    for s in 0..3 {
        assert!(ws.p(&format!("seeds/model_seed{s}.ckpt")).exists());
    }
}

#[test]
fn sweep_heads_gives_one_report_per_head_count() {
    let ws = Workspace::new();
    let out = ws.ok("sweep-heads", "sweep", &[]);
    let runs = json(&ws.p("sweep/sweep_heads.json"));
    let heads: Vec<u64> = runs
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["heads"].as_u64().unwrap())
        .collect();
    assert_eq!(heads, [2, 4, 6, 8]);
    assert_eq!(out.lines().count(), 5);
    assert_eq!(ws.code("sweep-heads", "sweep", &["--heads", "5"]), 3);
}

#[test]
fn baselines_write_reports() {
    let ws = Workspace::new();
    for kind in ["random", "frequency", "knn", "cos_profile", "cos_dialogue", "mlp_pd"] {
        let out = ws.ok("baseline", "base", &["--kind", kind]);
        assert!(out.starts_with(&format!("baseline {kind}")));
        let report = json(&ws.p(&format!("base/baseline_{kind}.json")));
        let p1 = report["overall"]["p_at_1"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p1));
    }
    assert!(ws.p("base/baseline_mlp_pd.ckpt").exists());
    assert_eq!(read_manifests(&ws.p("base")).unwrap().len(), 6);
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&[
        "grad-check",
        "--config",
        "small",
        "--mode",
        "full",
        "--out",
        &dir.path().display().to_string(),
    ]);
    let last = out.lines().last().unwrap();
    assert!(last.starts_with("max relative error"), "{out}");
    assert!(last.ends_with("PASS"), "{out}");
}

#[test]
fn failures_are_categorized() {
    let ws = Workspace::new();
    // unknown flag: argument parsing
    assert_eq!(ws.code("train", "x", &["--bogus"]), 2);
    assert_eq!(code(&["grad-check", "--config", "large"]), 2);
    // missing file: input
    assert_eq!(
        code(&[
            "stats",
            "--doctors",
            &ws.s("none.jsonl"),
            "--dialogues",
            &ws.s("none.jsonl"),
            "--out",
            &ws.s("x")
        ]),
        4
    );
    // unknown config key and invalid value: config
    fs::write(ws.p("bad.toml"), "hedas = 3\n").unwrap();
    assert_eq!(ws.code("train", "x", &["--config", &ws.s("bad.toml")]), 3);
    fs::write(ws.p("bad.toml"), "[model]\nlambda = 0.5\n").unwrap();
    assert_eq!(ws.code("train", "x", &["--config", &ws.s("bad.toml")]), 3);
    assert_eq!(ws.code("train", "x", &["--pool-size", "3"]), 3);

    ws.ok("train", "t", &[]);
    let ckpt = ws.s("t/model.ckpt");
    assert_eq!(
        ws.code(
            "recommend",
            "x",
            &["--checkpoint", &ckpt, "--query", "fever", "--top", "0"]
        ),
        3
    );
    assert_eq!(ws.code("recommend", "x", &["--checkpoint", &ckpt, "--query", "   "]), 4);
    assert_eq!(ws.code("eval", "x", &["--checkpoint", &ckpt, "--heads", "2"]), 3);
    assert_eq!(
        ws.code(
            "explain",
            "x",
            &["--checkpoint", &ckpt, "--query", "fever", "--doctor", "nobody"]
        ),
        4
    );
    // a split naming dialogues outside the corpus
    fs::write(
        ws.p("split.json"),
        "{\"seed\": 0, \"train_dialogues\": [\"ghost\"], \"queries\": []}",
    )
    .unwrap();
    assert_eq!(ws.code("train", "x", &["--split", &ws.s("split.json")]), 4);
}

/// Writes a vector file covering every corpus document, as an external
/// encoder would.
fn write_vectors(ws: &Workspace, dim: usize) -> PathBuf {
    let corpus = load_corpus(&ws.p("data/doctors.jsonl"), &ws.p("data/dialogues.jsonl")).unwrap();
    let bank = DocumentBank::build(&corpus, &HashSet::new(), 64);
    let mut rng = seeded(5);
    let vectors: HashMap<String, Tensor> = bank
        .profiles
        .iter()
        .chain(&bank.dialogues)
        .chain(&bank.queries)
        .map(|d| (d.id.clone(), Tensor::xavier(1, dim, &mut rng)))
        .collect();
    let path = ws.p("vectors.jsonl");
    VectorStore { dim, vectors }
        .write(fs::File::create(&path).unwrap())
        .unwrap();
    path
}

#[test]
fn precomputed_vectors_flow_through_train_and_eval() {
    let ws = Workspace::new();
    let vectors = write_vectors(&ws, 12);
    let v = vectors.display().to_string();
    ws.ok("train", "vt", &["--vectors", &v, "--heads", "3"]);
    let m = &read_manifests(&ws.p("vt")).unwrap()[0];
    assert_eq!(m.config.model.encoder.dim, 12);
    assert_eq!(m.inputs["vectors"].sha256, sha256_file(&vectors).unwrap());
    let ckpt = ws.s("vt/model.ckpt");
    ws.ok("eval", "ve", &["--checkpoint", &ckpt, "--vectors", &v]);
    assert_eq!(json(&ws.p("ve/eval.json"))["overall"]["count"], 20);
    // the checkpoint cannot run without its vectors
    assert_eq!(ws.code("eval", "ve", &["--checkpoint", &ckpt]), 3);
    // free-text queries have no precomputed vector
    assert_eq!(
        ws.code(
            "recommend",
            "vr",
            &["--checkpoint", &ckpt, "--vectors", &v, "--query", "fever"]
        ),
        4
    );
    ws.ok("baseline", "vb", &["--kind", "cos_dialogue", "--vectors", &v]);
    assert_eq!(ws.code("baseline", "vb", &["--kind", "mlp_p", "--vectors", &v]), 3);

    fs::write(
        ws.p("short.jsonl"),
        "{\"dim\":12}\n{\"id\":\"profile:d00\",\"vec\":[1.0]}\n",
    )
    .unwrap();
    assert_eq!(ws.code("train", "vt", &["--vectors", &ws.s("short.jsonl")]), 4);
}
