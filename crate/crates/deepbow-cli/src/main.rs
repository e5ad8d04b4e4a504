//! Command-line workflow around the deepbow library: build a vocabulary,
//! train a model, precompute stores, then score, explain, evaluate,
//! benchmark, or serve. Results go to stdout as JSON (one object per
//! line where output is repeated); progress notes go to stderr.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use deepbow::config::Config;
use deepbow::eval::{bench_latency, evaluate};
use deepbow::model::DeepBowModel;
use deepbow::scoring::{score_q_synonym, score_q_weight, ScoreMode};
use deepbow::serve::{serve, handle_request, ServiceState};
use deepbow::store::{precompute, BoWStore, Side};
use deepbow::synth::{generate, write_dataset, write_synonym_flags, SynthConfig};
use deepbow::training::{load_dataset, train, TrainConfig};
use deepbow::vocab::{build_vocabulary, segmenter_by_id, Vocabulary};

#[derive(Parser)]
#[command(name = "deepbow", version, about = "Sparse bag-of-words relevance pipeline")]
struct Cli {
    /// JSON config file; absent sections use desk-scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config's train section.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Accepted for compatibility: every command is already deterministic
    /// for a fixed seed and input.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary from a corpus file (one text per line).
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; datasets are TSV lines `query<TAB>product<TAB>label`.
    Train {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        /// Checkpoint path for the best-validation model.
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode a corpus of `id<TAB>text` lines into a representation store.
    Precompute {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        texts: PathBuf,
        /// `query` or `product`.
        #[arg(long)]
        side: String,
        /// Query encoding head: `q_weight` or `q_synonym`.
        #[arg(long, default_value = "q_synonym")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score stored pairs: one `--qid`/`--pid` pair, or a TSV of
    /// `qid<TAB>pid` lines via `--pairs`.
    Score {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        products: PathBuf,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        qid: Option<String>,
        #[arg(long)]
        pid: Option<String>,
        #[arg(long, default_value = "q_synonym")]
        mode: String,
    },
    /// Term-by-term match breakdown for one stored pair.
    Explain {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        products: PathBuf,
        #[arg(long)]
        qid: String,
        #[arg(long)]
        pid: String,
        #[arg(long, default_value = "q_synonym")]
        mode: String,
    },
    /// Ranking metrics over labeled pairs (`qid<TAB>pid<TAB>label`).
    Eval {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        products: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value = "q_synonym")]
        mode: String,
    },
    /// Wall-clock scoring benchmark over stored pairs (`qid<TAB>pid`).
    Bench {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        products: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value = "q_synonym")]
        mode: String,
        #[arg(long, default_value_t = 100)]
        reps: usize,
    },
    /// Answer score/encode/explain requests as line-delimited JSON over
    /// TCP until interrupted.
    Serve {
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        products: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Answer the requests from stdin instead of listening on a
        /// socket; useful for scripted transcripts.
        #[arg(long)]
        stdin: bool,
    },
    /// Generate the synthetic synonym-overlap dataset.
    GenData {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 2000)]
        words: usize,
        #[arg(long, default_value_t = 200)]
        synonym_pairs: usize,
        #[arg(long, default_value_t = 20_000)]
        train: usize,
        #[arg(long, default_value_t = 2_000)]
        test: usize,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let mut config = match &cli.config {
        Some(path) => Config::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    match &cli.command {
        Command::BuildVocab { corpus, out } => build_vocab_cmd(&config, corpus, out),
        Command::Train {
            vocab,
            train,
            valid,
            out,
        } => train_cmd(&config, vocab, train, valid, out),
        Command::Precompute {
            vocab,
            model,
            texts,
            side,
            mode,
            out,
        } => precompute_cmd(&config, vocab, model, texts, side, mode, out),
        Command::Score {
            queries,
            products,
            pairs,
            qid,
            pid,
            mode,
        } => score_cmd(queries, products, pairs.as_deref(), qid.as_deref(), pid.as_deref(), mode),
        Command::Explain {
            vocab,
            queries,
            products,
            qid,
            pid,
            mode,
        } => explain_cmd(vocab, queries, products, qid, pid, mode),
        Command::Eval {
            queries,
            products,
            pairs,
            mode,
        } => eval_cmd(queries, products, pairs, mode),
        Command::Bench {
            queries,
            products,
            pairs,
            mode,
            reps,
        } => bench_cmd(queries, products, pairs, mode, *reps),
        Command::Serve {
            queries,
            products,
            model,
            vocab,
            stdin,
        } => serve_cmd(
            &config,
            queries.as_deref(),
            products.as_deref(),
            model.as_deref(),
            vocab.as_deref(),
            *stdin,
        ),
        Command::GenData {
            out_dir,
            words,
            synonym_pairs,
            train,
            test,
        } => gen_data_cmd(&config, &cli, out_dir, *words, *synonym_pairs, *train, *test),
    }
}

fn parse_mode(mode: &str) -> Result<ScoreMode> {
    mode.parse::<ScoreMode>()
        .map_err(|e| anyhow::anyhow!("{e}"))
}

fn parse_side(side: &str) -> Result<Side> {
    match side {
        "query" => Ok(Side::Query),
        "product" => Ok(Side::Product),
        other => bail!("side must be `query` or `product`, got `{other}`"),
    }
}

fn load_store(path: &Path) -> Result<BoWStore> {
    BoWStore::load(path).with_context(|| format!("loading store {}", path.display()))
}

/// Reads TSV lines with exactly `n` fields.
fn read_tsv(path: &Path, n: usize) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.splitn(n, '\t').map(str::to_string).collect();
        if fields.len() != n {
            bail!(
                "{} line {}: expected {n} tab-separated fields",
                path.display(),
                lineno + 1
            );
        }
        rows.push(fields);
    }
    Ok(rows)
}

fn build_vocab_cmd(config: &Config, corpus: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(corpus)
        .with_context(|| format!("reading corpus {}", corpus.display()))?;
    let segmenter = segmenter_by_id(&config.vocab.segmenter)?;
    let vocab = build_vocabulary(
        text.lines().filter(|l| !l.is_empty()),
        config.vocab.v,
        config.vocab.b,
        config.vocab.ngram_order,
        segmenter.as_ref(),
    )?;
    vocab.save(out)?;
    println!(
        "{}",
        json!({
            "v": vocab.v(),
            "B": vocab.b(),
            "index_space": vocab.index_space(),
            "hash": vocab.content_hash(),
            "path": out.display().to_string(),
        })
    );
    Ok(())
}

fn train_cmd(config: &Config, vocab: &Path, train_path: &Path, valid: &Path, out: &Path) -> Result<()> {
    let vocab = Vocabulary::load(vocab)?;
    let train_set = load_dataset(train_path)?;
    let valid_set = load_dataset(valid)?;
    let train_cfg: TrainConfig = config.train.clone();
    let mut model = DeepBowModel::new(&config.model, &vocab, train_cfg.seed)?;
    let report = train(&mut model, &vocab, &train_set, &valid_set, &train_cfg, |m| {
        println!(
            "{}",
            json!({"epoch": m.epoch, "loss": m.loss, "roc_auc": m.roc_auc, "neg_pr_auc": m.neg_pr_auc})
        );
        let _ = std::io::stdout().flush();
    })?;
    model.save(out)?;
    println!(
        "{}",
        json!({
            "best_epoch": report.best_epoch,
            "best_roc_auc": report.best_roc_auc,
            "steps": report.steps,
            "skipped_train": report.skipped_train,
            "skipped_valid": report.skipped_valid,
            "checkpoint": out.display().to_string(),
            "checkpoint_hash": model.content_hash(),
        })
    );
    Ok(())
}

fn precompute_cmd(
    config: &Config,
    vocab: &Path,
    model: &Path,
    texts: &Path,
    side: &str,
    mode: &str,
    out: &Path,
) -> Result<()> {
    let vocab = Vocabulary::load(vocab)?;
    let model = DeepBowModel::load(model)?;
    let side = parse_side(side)?;
    let mode = parse_mode(mode)?;
    let rows = read_tsv(texts, 2)?;
    let items: Vec<(String, String)> = rows
        .into_iter()
        .map(|mut row| (row.remove(0), row.remove(0)))
        .collect();
    let (store, stats) = precompute(&model, &vocab, items, side, mode, &config.truncation)?;
    store.save(out)?;
    println!(
        "{}",
        json!({
            "side": side.to_string(),
            "stored": stats.stored,
            "skipped": stats.skipped,
            "duplicates": stats.duplicates,
            "path": out.display().to_string(),
        })
    );
    Ok(())
}

fn score_one(q: &BoWStore, d: &BoWStore, qid: &str, pid: &str, mode: ScoreMode) -> Result<f64> {
    let q = q
        .get(qid)
        .with_context(|| format!("query id `{qid}` not in store"))?;
    let d = d
        .get(pid)
        .with_context(|| format!("product id `{pid}` not in store"))?;
    Ok(match mode {
        ScoreMode::QWeight => score_q_weight(q, d)?,
        ScoreMode::QSynonym => score_q_synonym(q, d)?.score,
    })
}

fn score_cmd(
    queries: &Path,
    products: &Path,
    pairs: Option<&Path>,
    qid: Option<&str>,
    pid: Option<&str>,
    mode: &str,
) -> Result<()> {
    let mode = parse_mode(mode)?;
    let q_store = load_store(queries)?;
    let p_store = load_store(products)?;
    let pairs: Vec<(String, String)> = match (pairs, qid, pid) {
        (Some(path), None, None) => read_tsv(path, 2)?
            .into_iter()
            .map(|mut r| (r.remove(0), r.remove(0)))
            .collect(),
        (None, Some(q), Some(p)) => vec![(q.to_string(), p.to_string())],
        _ => bail!("provide either --pairs or both --qid and --pid"),
    };
    for (qid, pid) in &pairs {
        let score = score_one(&q_store, &p_store, qid, pid, mode)?;
        println!("{}", json!({"qid": qid, "pid": pid, "score": score}));
    }
    Ok(())
}

fn explain_cmd(
    vocab: &Path,
    queries: &Path,
    products: &Path,
    qid: &str,
    pid: &str,
    mode: &str,
) -> Result<()> {
    let mode = parse_mode(mode)?;
    let vocab = Vocabulary::load(vocab)?;
    let q_store = load_store(queries)?;
    let p_store = load_store(products)?;
    let q = q_store
        .get(qid)
        .with_context(|| format!("query id `{qid}` not in store"))?;
    let d = p_store
        .get(pid)
        .with_context(|| format!("product id `{pid}` not in store"))?;
    let explanation = deepbow::scoring::explain(q, d, &vocab, mode)?;
    let matches: Vec<serde_json::Value> = explanation
        .matches
        .iter()
        .map(|r| json!({"term": r.term, "p": r.p, "g": r.g, "pg": r.pg}))
        .collect();
    println!("{}", json!({"matches": matches, "total": explanation.total}));
    Ok(())
}

fn eval_cmd(queries: &Path, products: &Path, pairs: &Path, mode: &str) -> Result<()> {
    let mode = parse_mode(mode)?;
    let q_store = load_store(queries)?;
    let p_store = load_store(products)?;
    let rows = read_tsv(pairs, 3)?;
    let mut scores = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for row in &rows {
        let label: u8 = match row[2].as_str() {
            "0" => 0,
            "1" => 1,
            other => bail!("label must be 0 or 1, got `{other}`"),
        };
        scores.push(score_one(&q_store, &p_store, &row[0], &row[1], mode)?);
        labels.push(label);
    }
    let report = evaluate(&scores, &labels)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn bench_cmd(queries: &Path, products: &Path, pairs: &Path, mode: &str, reps: usize) -> Result<()> {
    let mode = parse_mode(mode)?;
    let q_store = load_store(queries)?;
    let p_store = load_store(products)?;
    let pairs: Vec<(String, String)> = read_tsv(pairs, 2)?
        .into_iter()
        .map(|mut r| (r.remove(0), r.remove(0)))
        .collect();
    let report = bench_latency(&q_store, &p_store, &pairs, mode, reps)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn serve_cmd(
    config: &Config,
    queries: Option<&Path>,
    products: Option<&Path>,
    model: Option<&Path>,
    vocab: Option<&Path>,
    stdin: bool,
) -> Result<()> {
    let queries = queries.map(load_store).transpose()?;
    let products = products.map(load_store).transpose()?;
    let model = match (model, vocab) {
        (Some(m), Some(v)) => Some((DeepBowModel::load(m)?, Vocabulary::load(v)?)),
        (None, None) => None,
        _ => bail!("--model and --vocab must be given together"),
    };
    let state = ServiceState::new(queries, products, model, config.serve.threshold)?;
    if stdin {
        let lines = std::io::stdin().lines();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            println!("{}", handle_request(&state, &line));
            let _ = std::io::stdout().flush();
        }
        return Ok(());
    }
    let service = serve(state, config.serve.port)?;
    println!("{}", json!({"listening": service.local_addr().to_string()}));
    let _ = std::io::stdout().flush();
    loop {
        std::thread::park();
    }
}

fn gen_data_cmd(
    config: &Config,
    cli: &Cli,
    out_dir: &Path,
    words: usize,
    synonym_pairs: usize,
    train: usize,
    test: usize,
) -> Result<()> {
    let cfg = SynthConfig {
        words,
        synonym_pairs,
        train,
        test,
        seed: cli.seed.unwrap_or(config.train.seed),
        ..SynthConfig::default()
    };
    let data = generate(&cfg)?;
    std::fs::create_dir_all(out_dir)?;
    write_dataset(&out_dir.join("train.tsv"), &data.train)?;
    write_dataset(&out_dir.join("test.tsv"), &data.test)?;
    write_synonym_flags(&out_dir.join("test_flags.tsv"), &data.test)?;
    std::fs::write(out_dir.join("corpus.txt"), data.vocabulary_corpus().join("\n"))?;
    let flagged = data.test.iter().filter(|e| e.synonym_dependent).count();
    println!(
        "{}",
        json!({
            "train": data.train.len(),
            "test": data.test.len(),
            "test_synonym_dependent": flagged,
            "out_dir": out_dir.display().to_string(),
        })
    );
    Ok(())
}
