//! One function per subcommand.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use docrec::baselines::{train_mlp_baseline, BaselineKind, FrozenBaseline};
use docrec::corpus::{corpus_stats, load_corpus, load_term_list, split_dataset, Corpus, Query, QuerySplit, SplitSpec};
use docrec::embed::{load_vectors, DocumentBank, HashEncoder, TextEncoder, VectorStore};
use docrec::metrics::MetricsReport;
use docrec::pipeline::pretrain_encoder;
use docrec::ranker::{
    evaluate, evaluate_with, grad_check_model, train, BucketKey, EncoderMode, EvalReport, LoadedModel, RankContext,
    Recommender, TrainReport, DEFAULT_LENGTH_EDGES,
};
use docrec::selflearn::{load_encoder, save_encoder};
use docrec::synth::generate;
use docrec::tensor::ParamStore;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ConfigError, RunConfig};
use crate::manifest::Run;
use crate::serve::{self, Snapshot};
use crate::{CheckFailed, Command, CorpusArgs, ModelArgs, RunArgs, SplitArgs};

type Result<T> = anyhow::Result<T>;

/// Gradient checks pass below this maximum relative error.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-3;

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest { corpus, run } => ingest(&corpus, &run),
        Command::Stats { corpus, run, lexicon } => stats(&corpus, &run, lexicon),
        Command::Split { corpus, run } => split(&corpus, &run),
        Command::GenSynth { run } => gen_synth(&run),
        Command::Pretrain { corpus, run, split } => pretrain(&corpus, &run, &split),
        Command::Train {
            corpus,
            run,
            split,
            model,
            checkpoint,
            vectors,
        } => train_cmd(&corpus, &run, &split, &model, checkpoint, vectors),
        Command::Eval {
            corpus,
            run,
            split,
            model,
            checkpoint,
            seeds,
            bucket,
            vectors,
        } => match (checkpoint, seeds) {
            (Some(ckpt), _) => eval_checkpoint(&corpus, &run, &split, &model, &ckpt, bucket, vectors),
            (None, Some(seeds)) => eval_seeds(&corpus, &run, &split, &model, &seeds, bucket, vectors),
            (None, None) => Err(ConfigError::invalid("eval needs --checkpoint or --seeds")),
        },
        Command::Baseline {
            corpus,
            run,
            split,
            model,
            kind,
            checkpoint,
            vectors,
            bucket,
        } => baseline(&corpus, &run, &split, &model, kind, checkpoint, vectors, bucket),
        Command::SweepHeads {
            corpus,
            run,
            split,
            heads,
            pool_size,
            checkpoint,
        } => sweep_heads(&corpus, &run, &split, &heads, pool_size, checkpoint),
        Command::Explain {
            corpus,
            run,
            checkpoint,
            query,
            doctor,
            top_k,
            lexicon,
            vectors,
        } => explain(&corpus, &run, &checkpoint, &query, &doctor, top_k, lexicon, vectors),
        Command::Recommend {
            corpus,
            run,
            checkpoint,
            query,
            top,
            pool_size,
            vectors,
        } => recommend(&corpus, &run, &checkpoint, &query, top, pool_size, vectors),
        Command::GradCheck {
            config: _,
            out,
            seed,
            mode,
            eps,
        } => grad_check(&out, seed, mode, eps),
        Command::Serve {
            corpus,
            out,
            checkpoint,
            vectors,
            pool_size,
            host,
            port,
        } => serve_cmd(&corpus, &out, &checkpoint, vectors, pool_size, &host, port),
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn apply_model_args(cfg: &mut RunConfig, args: &ModelArgs) {
    if let Some(h) = args.heads {
        cfg.model.heads = h;
    }
    if let Some(p) = args.pool_size {
        cfg.model.pool_size = p;
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn read_corpus(run: &mut Run, args: &CorpusArgs) -> Result<Corpus> {
    let corpus = load_corpus(&args.doctors, &args.dialogues)?;
    run.input("doctors", &args.doctors)?;
    run.input("dialogues", &args.dialogues)?;
    Ok(corpus)
}

fn read_stoplist(run: &mut Run, cfg: &RunConfig) -> Result<HashSet<String>> {
    match &cfg.stoplist {
        Some(path) => {
            let list = load_term_list(path)?;
            run.input("stoplist", path)?;
            Ok(list)
        }
        None => Ok(HashSet::new()),
    }
}

fn read_lexicon(run: &mut Run, flag: Option<PathBuf>, cfg: &RunConfig) -> Result<Option<HashSet<String>>> {
    match flag.or_else(|| cfg.lexicon.clone()) {
        Some(path) => {
            let lexicon = load_term_list(&path)?;
            run.input("lexicon", &path)?;
            Ok(Some(lexicon))
        }
        None => Ok(None),
    }
}

fn read_vectors(run: &mut Run, path: Option<PathBuf>) -> Result<Option<Arc<VectorStore>>> {
    match path {
        Some(path) => {
            let store = load_vectors(&path).with_context(|| format!("loading vectors {}", path.display()))?;
            run.input("vectors", &path)?;
            Ok(Some(Arc::new(store)))
        }
        None => Ok(None),
    }
}

/// Every id a split file mentions must exist in the corpus with the same owner.
fn check_split(corpus: &Corpus, split: &SplitSpec) -> docrec::Result<()> {
    let bad = |msg: String| docrec::Error::Data(format!("split does not match corpus: {msg}"));
    for id in &split.train_dialogues {
        if corpus.dialogue(id).is_none() {
            return Err(bad(format!("unknown dialogue {id:?}")));
        }
    }
    for q in &split.queries {
        match corpus.dialogue(&q.source_dialogue_id) {
            Some(d) if d.doctor_id == q.gold_doctor_id => {}
            Some(_) => return Err(bad(format!("query {} has the wrong doctor", q.query_id))),
            None => return Err(bad(format!("unknown dialogue {:?}", q.source_dialogue_id))),
        }
    }
    Ok(())
}

fn resolve_split(run: &mut Run, args: &SplitArgs, corpus: &Corpus, seed: u64) -> Result<SplitSpec> {
    match &args.split {
        Some(path) => {
            let split: SplitSpec =
                serde_json::from_reader(open(path)?).with_context(|| format!("parsing split {}", path.display()))?;
            check_split(corpus, &split)?;
            run.input("split", path)?;
            Ok(split)
        }
        None => Ok(split_dataset(corpus, seed)),
    }
}

fn read_encoder(run: &mut Run, path: &Path, cfg: &mut RunConfig) -> Result<ParamStore> {
    let (store, enc_cfg) = load_encoder(open(path)?).with_context(|| format!("loading encoder {}", path.display()))?;
    run.input("encoder", path)?;
    cfg.model.encoder = enc_cfg;
    Ok(store)
}

fn read_model(run: &mut Run, path: &Path, vectors: Option<Arc<VectorStore>>) -> Result<LoadedModel> {
    let loaded =
        Recommender::load(open(path)?, vectors).with_context(|| format!("loading model {}", path.display()))?;
    run.input("checkpoint", path)?;
    Ok(loaded)
}

fn save_model(
    run: &mut Run,
    name: &str,
    model: &Recommender,
    split: &SplitSpec,
    stoplist: &HashSet<String>,
) -> Result<PathBuf> {
    let path = run.checkpoint(name);
    let mut w = create(&path)?;
    model.save(&mut w, split.seed, stoplist, "train")?;
    w.flush()?;
    Ok(path)
}

fn test_queries(split: &SplitSpec) -> Vec<&Query> {
    split.queries(QuerySplit::Test).collect()
}

fn nonempty_query(query: &str) -> Result<()> {
    if query.trim().is_empty() {
        return Err(docrec::Error::Data("query is empty".into()).into());
    }
    Ok(())
}

fn metrics_json(m: &MetricsReport) -> Value {
    json!({ "p_at_1": m.p_at_1, "map": m.map, "err_at_5": m.err_at_5, "queries": m.count })
}

fn print_history(report: &TrainReport) {
    println!("{:>5}  {:>10}  {:>10}", "epoch", "train", "val");
    println!("{:>5}  {:>10}  {:>10.5}", 0, "-", report.initial_val_loss);
    for r in &report.history {
        let mark = if r.epoch == report.best_epoch { " *" } else { "" };
        println!("{:>5}  {:>10.5}  {:>10.5}{mark}", r.epoch, r.train_loss, r.val_loss);
    }
}

fn ingest(args: &CorpusArgs, run_args: &RunArgs) -> Result<()> {
    let cfg = load_config(run_args)?;
    let mut run = Run::start("ingest", &cfg, &run_args.out)?;
    let corpus = read_corpus(&mut run, args)?;
    let doctors = run.artifact("doctors.jsonl");
    let dialogues = run.artifact("dialogues.jsonl");
    corpus.save(&doctors, &dialogues)?;
    println!(
        "{} doctors, {} dialogues -> {}",
        corpus.doctors().len(),
        corpus.dialogues().len(),
        run.out().display()
    );
    run.finish(json!({ "doctors": corpus.doctors().len(), "dialogues": corpus.dialogues().len() }))?;
    Ok(())
}

fn stats(args: &CorpusArgs, run_args: &RunArgs, lexicon: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(run_args)?;
    let mut run = Run::start("stats", &cfg, &run_args.out)?;
    let corpus = read_corpus(&mut run, args)?;
    let lexicon = read_lexicon(&mut run, lexicon, &cfg)?.unwrap_or_default();
    let report = corpus_stats(&corpus, &lexicon);
    run.write_json("stats.json", &report)?;
    let rows: [(&str, String); 9] = [
        ("doctors", report.doctor_count.to_string()),
        ("dialogues", report.dialogue_count.to_string()),
        ("departments", report.department_count.to_string()),
        ("avg tokens / query", format!("{:.2}", report.avg_tokens_query)),
        ("avg tokens / dialogue", format!("{:.2}", report.avg_tokens_dialogue)),
        ("avg tokens / profile", format!("{:.2}", report.avg_tokens_profile)),
        (
            "medical terms, profiles",
            format!("{:.3}", report.medical_term_fraction_profile),
        ),
        (
            "medical terms, patient turns",
            format!("{:.3}", report.medical_term_fraction_patient_turns),
        ),
        (
            "medical terms, doctor turns",
            format!("{:.3}", report.medical_term_fraction_doctor_turns),
        ),
    ];
    for (k, v) in rows {
        println!("{k:<30} {v:>10}");
    }
    for (name, h) in [
        ("dialogues per doctor", &report.dialogues_per_doctor_histogram),
        ("dialogue length", &report.dialogue_length_histogram),
    ] {
        println!("\n{name}");
        for (i, c) in h.counts.iter().enumerate() {
            println!("  [{:>5}, {:>5})  {c}", h.edges[i], h.edges[i + 1]);
        }
    }
    run.finish(serde_json::to_value(&report)?)?;
    Ok(())
}

fn split(args: &CorpusArgs, run_args: &RunArgs) -> Result<()> {
    let cfg = load_config(run_args)?;
    let mut run = Run::start("split", &cfg, &run_args.out)?;
    let corpus = read_corpus(&mut run, args)?;
    let split = split_dataset(&corpus, cfg.split_seed);
    run.write_json("split.json", &split)?;
    let val = split.queries(QuerySplit::Val).count();
    let test = split.queries(QuerySplit::Test).count();
    println!(
        "seed {}: {} training dialogues, {val} validation queries, {test} test queries",
        split.seed,
        split.train_dialogues.len()
    );
    run.finish(json!({ "train_dialogues": split.train_dialogues.len(), "val_queries": val, "test_queries": test }))?;
    Ok(())
}

fn gen_synth(run_args: &RunArgs) -> Result<()> {
    let cfg = load_config(run_args)?;
    let mut run = Run::start("gen-synth", &cfg, &run_args.out)?;
    let synth = generate(&cfg.synth)?;
    let doctors = run.artifact("doctors.jsonl");
    let dialogues = run.artifact("dialogues.jsonl");
    synth.corpus.save(&doctors, &dialogues)?;
    let truth = run.artifact("ground_truth.json");
    synth.write_ground_truth(create(&truth)?)?;
    println!(
        "{} doctors, {} dialogues -> {}",
        synth.corpus.doctors().len(),
        synth.corpus.dialogues().len(),
        run.out().display()
    );
    run.finish(json!({ "doctors": synth.corpus.doctors().len(), "dialogues": synth.corpus.dialogues().len() }))?;
    Ok(())
}

fn pretrain(args: &CorpusArgs, run_args: &RunArgs, split_args: &SplitArgs) -> Result<()> {
    let cfg = load_config(run_args)?;
    cfg.validate()?;
    let mut run = Run::start("pretrain", &cfg, &run_args.out)?;
    let corpus = read_corpus(&mut run, args)?;
    let stoplist = read_stoplist(&mut run, &cfg)?;
    let split = resolve_split(&mut run, split_args, &corpus, cfg.split_seed)?;
    let bank = DocumentBank::build(&corpus, &stoplist, cfg.model.encoder.hash_buckets);
    let (store, encoder, report) = pretrain_encoder(&corpus, &split, &bank, cfg.model.encoder, &cfg.pretrain)?;
    let path = run.checkpoint("encoder.ckpt");
    let mut w = create(&path)?;
    save_encoder(&store, &encoder, &mut w)?;
    w.flush()?;
    run.write_json("pretrain_report.json", &report)?;
    println!("{:>5}  {:>10}  {:>10}", "epoch", "train", "held-out");
    for (i, (t, h)) in report.loss_curve.iter().zip(&report.heldout_loss).enumerate() {
        let mark = if i + 1 == report.best_epoch { " *" } else { "" };
        println!("{:>5}  {t:>10.5}  {h:>10.5}{mark}", i + 1);
    }
    println!(
        "held-out pair accuracy {:.3} (untrained {:.3}) over {} pairs",
        report.accuracy, report.initial_accuracy, report.heldout_pairs
    );
    run.finish(json!({ "accuracy": report.accuracy, "initial_accuracy": report.initial_accuracy, "best_epoch": report.best_epoch }))?;
    Ok(())
}

fn train_cmd(
    args: &CorpusArgs,
    run_args: &RunArgs,
    split_args: &SplitArgs,
    model_args: &ModelArgs,
    checkpoint: Option<PathBuf>,
    vectors: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(run_args)?;
    apply_model_args(&mut cfg, model_args);
    let mut run = Run::start("train", &cfg, &run_args.out)?;
    let corpus = read_corpus(&mut run, args)?;
    let stoplist = read_stoplist(&mut run, &cfg)?;
    let split = resolve_split(&mut run, split_args, &corpus, cfg.split_seed)?;
    let vectors = read_vectors(&mut run, vectors)?;
    let pretrained = match &checkpoint {
        Some(path) => Some(read_encoder(&mut run, path, &mut cfg)?),
        None => None,
    };
    if let Some(v) = &vectors {
        cfg.model.encoder.dim = v.dim;
    }
    cfg.validate()?;
    run.record_config(&cfg);
    let bank = DocumentBank::build(&corpus, &stoplist, cfg.model.encoder.hash_buckets);
    let ctx = RankContext::for_model(&corpus, &split, &bank, &cfg.model);
    let mut model = Recommender::init(cfg.model.clone(), pretrained.as_ref(), vectors)?;
    let report = train(&mut model, &ctx)?;
    save_model(&mut run, "model.ckpt", &model, &split, &stoplist)?;
    run.write_json("train_report.json", &report)?;
    print_history(&report);
    println!(
        "best epoch {} (validation loss {:.5})",
        report.best_epoch, report.best_val_loss
    );
    run.finish(json!({ "best_epoch": report.best_epoch, "best_val_loss": report.best_val_loss, "initial_val_loss": report.initial_val_loss }))?;
    Ok(())
}

fn eval_checkpoint(
    args: &CorpusArgs,
    run_args: &RunArgs,
    split_args: &SplitArgs,
    model_args: &ModelArgs,
    checkpoint: &Path,
    bucket: Option<BucketKey>,
    vectors: Option<PathBuf>,
) -> Result<()> {
    if model_args.heads.is_some() {
        return Err(ConfigError::invalid("--heads is fixed by the checkpoint"));
    }
    let mut cfg = load_config(run_args)?;
    let mut run = Run::start("eval", &cfg, &run_args.out)?;
    let corpus = read_corpus(&mut run, args)?;
    let vectors = read_vectors(&mut run, vectors)?;
    let loaded = read_model(&mut run, checkpoint, vectors)?;
    let mut model = loaded.model;
    if let Some(p) = model_args.pool_size {
        model.config.pool_size = p;
    }
    cfg.split_seed = loaded.split_seed;
    cfg.model = model.config.clone();
    run.record_config(&cfg);
    let split = resolve_split(&mut run, split_args, &corpus, loaded.split_seed)?;
    let bank = DocumentBank::build(&corpus, &loaded.stoplist, model.config.encoder.hash_buckets);
    let ctx = RankContext::for_model(&corpus, &split, &bank, &model.config);
    let report = evaluate(&model, &ctx, &test_queries(&split), bucket, &DEFAULT_LENGTH_EDGES)?;
    run.write_json("eval.json", &report)?;
    print!("{}", report.to_table());
    run.finish(metrics_json(&report.overall))?;
    Ok(())
}

struct Trained {
    model: Recommender,
    train: TrainReport,
    test: EvalReport,
}

fn train_and_test(
    ctx: &RankContext,
    cfg: &RunConfig,
    pretrained: Option<&ParamStore>,
    vectors: Option<Arc<VectorStore>>,
    bucket: Option<BucketKey>,
) -> Result<Trained> {
    let mut model = Recommender::init(cfg.model.clone(), pretrained, vectors)?;
    let train_report = train(&mut model, ctx)?;
    let test = evaluate(&model, ctx, &test_queries(ctx.split), bucket, &DEFAULT_LENGTH_EDGES)?;
    Ok(Trained {
        model,
        train: train_report,
        test,
    })
}

#[derive(Serialize)]
struct SeedRun {
    seed: u64,
    best_epoch: usize,
    test: EvalReport,
}

fn mean_metrics(reports: &[&MetricsReport]) -> MetricsReport {
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    MetricsReport {
        p_at_1: mean(|r| r.p_at_1),
        map: mean(|r| r.map),
        err_at_5: mean(|r| r.err_at_5),
        count: reports.first().map_or(0, |r| r.count),
    }
}

fn print_metric_rows(label: &str, rows: &[(String, MetricsReport)]) {
    println!("{label:>8}  {:>6}  {:>6}  {:>6}  {:>6}", "P@1", "MAP", "ERR@5", "n");
    for (name, m) in rows {
        println!(
            "{name:>8}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6}",
            m.p_at_1, m.map, m.err_at_5, m.count
        );
    }
}

fn eval_seeds(
    args: &CorpusArgs,
    run_args: &RunArgs,
    split_args: &SplitArgs,
    model_args: &ModelArgs,
    seeds: &[u64],
    bucket: Option<BucketKey>,
    vectors: Option<PathBuf>,
) -> Result<()> {
    if seeds.is_empty() {
        return Err(ConfigError::invalid("--seeds needs at least one seed"));
    }
    let mut cfg = load_config(run_args)?;
    apply_model_args(&mut cfg, model_args);
    let mut run = Run::start("eval", &cfg, &run_args.out)?;
    let corpus = read_corpus(&mut run, args)?;
    let stoplist = read_stoplist(&mut run, &cfg)?;
    let split = resolve_split(&mut run, split_args, &corpus, cfg.split_seed)?;
    let vectors = read_vectors(&mut run, vectors)?;
    if let Some(v) = &vectors {
        cfg.model.encoder.dim = v.dim;
    }
    cfg.validate()?;
    run.record_config(&cfg);
    let bank = DocumentBank::build(&corpus, &stoplist, cfg.model.encoder.hash_buckets);
    let ctx = RankContext::for_model(&corpus, &split, &bank, &cfg.model);
    let mut runs = Vec::new();
    for &seed in seeds {
        let mut c = cfg.clone();
        c.set_training_seed(seed);
        let pretrained = match (c.self_learning, &vectors) {
            (true, None) => Some(pretrain_encoder(&corpus, &split, &bank, c.model.encoder, &c.pretrain)?.0),
            _ => None,
        };
        let t = train_and_test(&ctx, &c, pretrained.as_ref(), vectors.clone(), bucket)?;
        save_model(&mut run, &format!("model_seed{seed}.ckpt"), &t.model, &split, &stoplist)?;
        runs.push(SeedRun {
            seed,
            best_epoch: t.train.best_epoch,
            test: t.test,
        });
    }
    let mean = mean_metrics(&runs.iter().map(|r| &r.test.overall).collect::<Vec<_>>());
    run.write_json("eval_seeds.json", &json!({ "runs": runs, "mean": mean }))?;
    let mut rows: Vec<(String, MetricsReport)> = runs.iter().map(|r| (r.seed.to_string(), r.test.overall)).collect();
    rows.push(("mean".into(), mean));
    print_metric_rows("seed", &rows);
    if bucket.is_some() {
        for r in &runs {
            println!("\nseed {}", r.seed);
            print!("{}", r.test.to_table());
        }
    }
    run.finish(json!({ "mean": metrics_json(&mean), "seeds": seeds }))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn baseline(
    args: &CorpusArgs,
    run_args: &RunArgs,
    split_args: &SplitArgs,
    model_args: &ModelArgs,
    kind: Option<BaselineKind>,
    checkpoint: Option<PathBuf>,
    vectors: Option<PathBuf>,
    bucket: Option<BucketKey>,
) -> Result<()> {
    let mut cfg = load_config(run_args)?;
    apply_model_args(&mut cfg, model_args);
    if let Some(k) = kind {
        cfg.baseline.kind = k;
    }
    let kind = cfg.baseline.kind;
    let mut run = Run::start("baseline", &cfg, &run_args.out)?;
    let corpus = read_corpus(&mut run, args)?;
    let stoplist = read_stoplist(&mut run, &cfg)?;
    let split = resolve_split(&mut run, split_args, &corpus, cfg.split_seed)?;
    if kind.mlp_mode().is_some() && vectors.is_some() {
        return Err(ConfigError::invalid(format!(
            "{kind} trains its own encoder; --vectors is not supported"
        )));
    }
    let vectors = read_vectors(&mut run, vectors)?;
    let mut store = match &checkpoint {
        Some(path) => read_encoder(&mut run, path, &mut cfg)?,
        None => ParamStore::new(),
    };
    if let Some(v) = &vectors {
        cfg.model.encoder.dim = v.dim;
    }
    cfg.validate()?;
    run.record_config(&cfg);
    let bank = DocumentBank::build(&corpus, &stoplist, cfg.model.encoder.hash_buckets);
    let ctx = RankContext::for_model(&corpus, &split, &bank, &cfg.model);
    let queries = test_queries(&split);
    let report = if kind.mlp_mode().is_some() {
        let pretrained = checkpoint.is_some().then_some(&store);
        let (model, train_report) = train_mlp_baseline(&ctx, kind, &cfg.model, pretrained)?;
        save_model(&mut run, &format!("baseline_{kind}.ckpt"), &model, &split, &stoplist)?;
        run.write_json(&format!("baseline_{kind}_train.json"), &train_report)?;
        evaluate(&model, &ctx, &queries, bucket, &DEFAULT_LENGTH_EDGES)?
    } else {
        let text = match vectors {
            Some(v) => TextEncoder::Precomputed(v),
            None if checkpoint.is_some() => TextEncoder::Hash(HashEncoder::attach(&store, cfg.model.encoder)?),
            None => TextEncoder::Hash(HashEncoder::init(&mut store, cfg.model.encoder)?),
        };
        let ranker = FrozenBaseline::new(&ctx, &cfg.baseline, &text, &store)?;
        evaluate_with(&ctx, &queries, bucket, &DEFAULT_LENGTH_EDGES, |q| {
            let idx = corpus
                .dialogue_idx(&q.source_dialogue_id)
                .ok_or_else(|| docrec::Error::Data(format!("unknown dialogue {}", q.source_dialogue_id)))?;
            ranker.rank(&bank.queries[idx])
        })?
    };
    run.write_json(&format!("baseline_{kind}.json"), &report)?;
    println!("baseline {kind}");
    print!("{}", report.to_table());
    run.finish(json!({ "kind": kind, "test": metrics_json(&report.overall) }))?;
    Ok(())
}

#[derive(Serialize)]
struct HeadRun {
    heads: usize,
    best_epoch: usize,
    test: EvalReport,
}

fn sweep_heads(
    args: &CorpusArgs,
    run_args: &RunArgs,
    split_args: &SplitArgs,
    heads: &[usize],
    pool_size: Option<usize>,
    checkpoint: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(run_args)?;
    if let Some(p) = pool_size {
        cfg.model.pool_size = p;
    }
    let mut run = Run::start("sweep-heads", &cfg, &run_args.out)?;
    let corpus = read_corpus(&mut run, args)?;
    let stoplist = read_stoplist(&mut run, &cfg)?;
    let split = resolve_split(&mut run, split_args, &corpus, cfg.split_seed)?;
    let supplied = match &checkpoint {
        Some(path) => Some(read_encoder(&mut run, path, &mut cfg)?),
        None => None,
    };
    for &h in heads {
        if h == 0 || cfg.model.encoder.dim % h != 0 {
            return Err(ConfigError::invalid(format!(
                "head count {h} does not divide embedding dim {}",
                cfg.model.encoder.dim
            )));
        }
    }
    cfg.validate()?;
    run.record_config(&cfg);
    let bank = DocumentBank::build(&corpus, &stoplist, cfg.model.encoder.hash_buckets);
    let pretrained = match supplied {
        Some(store) => Some(store),
        None if cfg.self_learning => {
            Some(pretrain_encoder(&corpus, &split, &bank, cfg.model.encoder, &cfg.pretrain)?.0)
        }
        None => None,
    };
    let ctx = RankContext::for_model(&corpus, &split, &bank, &cfg.model);
    let mut runs = Vec::new();
    for &h in heads {
        let mut c = cfg.clone();
        c.model.heads = h;
        let t = train_and_test(&ctx, &c, pretrained.as_ref(), None, None)?;
        save_model(&mut run, &format!("model_heads{h}.ckpt"), &t.model, &split, &stoplist)?;
        runs.push(HeadRun {
            heads: h,
            best_epoch: t.train.best_epoch,
            test: t.test,
        });
    }
    run.write_json("sweep_heads.json", &runs)?;
    let rows: Vec<(String, MetricsReport)> = runs.iter().map(|r| (r.heads.to_string(), r.test.overall)).collect();
    print_metric_rows("heads", &rows);
    let summary: Vec<Value> = runs
        .iter()
        .map(|r| json!({ "heads": r.heads, "test": metrics_json(&r.test.overall) }))
        .collect();
    run.finish(Value::Array(summary))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn explain(
    args: &CorpusArgs,
    run_args: &RunArgs,
    checkpoint: &Path,
    query: &str,
    doctor: &str,
    top_k: usize,
    lexicon: Option<PathBuf>,
    vectors: Option<PathBuf>,
) -> Result<()> {
    nonempty_query(query)?;
    let mut cfg = load_config(run_args)?;
    let mut run = Run::start("explain", &cfg, &run_args.out)?;
    let corpus = read_corpus(&mut run, args)?;
    let lexicon = read_lexicon(&mut run, lexicon, &cfg)?;
    let vectors = read_vectors(&mut run, vectors)?;
    let loaded = read_model(&mut run, checkpoint, vectors)?;
    let model = loaded.model;
    cfg.split_seed = loaded.split_seed;
    cfg.model = model.config.clone();
    run.record_config(&cfg);
    let split = split_dataset(&corpus, loaded.split_seed);
    let bank = DocumentBank::build(&corpus, &loaded.stoplist, model.config.encoder.hash_buckets);
    let ctx = RankContext::for_model(&corpus, &split, &bank, &model.config);
    let doc = bank.adhoc_query("query:adhoc", query);
    let exp = model.explain(&ctx, &doc, doctor, top_k, lexicon.as_ref())?;
    run.write_json("explain.json", &exp)?;
    println!("doctor {}  score {:.6}", exp.doctor_id, exp.score);
    for head in &exp.heads {
        let mut order: Vec<usize> = (0..head.weights.len()).collect();
        order.sort_by(|&a, &b| head.weights[b].total_cmp(&head.weights[a]));
        let docs: Vec<String> = order
            .iter()
            .take(3)
            .map(|&i| format!("{} {:.3}", exp.attended[i], head.weights[i]))
            .collect();
        let tokens: Vec<String> = head.top_tokens.iter().map(|(t, w)| format!("{t} {w:.3}")).collect();
        println!("head {}: {}", head.head, docs.join(", "));
        println!("        tokens: {}", tokens.join(", "));
    }
    run.finish(json!({ "doctor_id": exp.doctor_id, "score": exp.score }))?;
    Ok(())
}

fn recommend(
    args: &CorpusArgs,
    run_args: &RunArgs,
    checkpoint: &Path,
    query: &str,
    top: usize,
    pool_size: Option<usize>,
    vectors: Option<PathBuf>,
) -> Result<()> {
    if top == 0 {
        return Err(ConfigError::invalid("--top must be at least 1"));
    }
    nonempty_query(query)?;
    let cfg = load_config(run_args)?;
    let mut run = Run::start("recommend", &cfg, &run_args.out)?;
    let corpus = read_corpus(&mut run, args)?;
    let vectors = read_vectors(&mut run, vectors)?;
    let bytes = std::fs::read(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    run.input("checkpoint", checkpoint)?;
    let snapshot = Snapshot::build(&corpus, &bytes, vectors, pool_size)?;
    let results = snapshot.recommend(query, top)?;
    for r in &results {
        println!("{}\t{:.6}", r.doctor_id, r.score);
    }
    run.write_json(
        "recommend.json",
        &json!({ "query": query, "results": results, "model_id": snapshot.model_id }),
    )?;
    run.finish(json!({ "results": results.len(), "model_id": snapshot.model_id }))?;
    Ok(())
}

fn grad_check(out: &Path, seed: u64, mode: Option<EncoderMode>, eps: f64) -> Result<()> {
    let mut cfg = RunConfig::default();
    cfg.set_seed(seed);
    let mut run = Run::start("grad-check", &cfg, out)?;
    let modes: Vec<EncoderMode> = match mode {
        Some(m) => vec![m],
        None => EncoderMode::ALL.to_vec(),
    };
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for m in modes {
        let r = grad_check_model(m, seed, eps)?;
        let pass = r.max_rel_error < GRAD_CHECK_TOLERANCE;
        println!(
            "{:<12} max relative error {:.3e} ({}[{}])  {}",
            m.name(),
            r.max_rel_error,
            r.worst_param,
            r.worst_index,
            if pass { "PASS" } else { "FAIL" }
        );
        worst = worst.max(r.max_rel_error);
        rows.push(json!({ "mode": m, "max_rel_error": r.max_rel_error, "worst_param": r.worst_param, "coordinates": r.coordinates, "pass": pass }));
    }
    let pass = worst < GRAD_CHECK_TOLERANCE;
    println!(
        "max relative error {worst:.3e} (tolerance {GRAD_CHECK_TOLERANCE:.0e}): {}",
        if pass { "PASS" } else { "FAIL" }
    );
    run.write_json("grad_check.json", &rows)?;
    run.finish(json!({ "max_rel_error": worst, "pass": pass }))?;
    if !pass {
        return Err(CheckFailed(format!(
            "max relative error {worst:.3e} exceeds {GRAD_CHECK_TOLERANCE:.0e}"
        ))
        .into());
    }
    Ok(())
}

fn serve_cmd(
    args: &CorpusArgs,
    out: &Path,
    checkpoint: &Path,
    vectors: Option<PathBuf>,
    pool_size: Option<usize>,
    host: &str,
    port: u16,
) -> Result<()> {
    let mut run = Run::start("serve", &RunConfig::default(), out)?;
    let corpus = read_corpus(&mut run, args)?;
    let vectors = read_vectors(&mut run, vectors)?;
    let bytes = std::fs::read(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    run.input("checkpoint", checkpoint)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        let addr = listener.local_addr()?;
        run.finish(json!({ "address": addr.to_string() }))?;
        eprintln!("listening on http://{addr}");
        serve::run(listener, move || {
            Ok(Snapshot::build(&corpus, &bytes, vectors, pool_size)?)
        })
        .await
    })
}
