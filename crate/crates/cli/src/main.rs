use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use molfuse::chem::render_prompt;
use molfuse::knowledge::{
    save_embeddings, BuiltinProvider, ChatClient, ChatConfig, EmbeddingProvider, EmbeddingStore,
};
use molfuse::model::Variant;
use molfuse::pipeline::{
    analyze_run, assign_splits, eval_run, load_dataset, train_run, LoadOptions, PipelineError,
    Predictor, Representation, RunConfig, Split, TaskSpec,
};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "molfuse",
    version,
    about = "Graph + chemist-knowledge molecular property prediction"
)]
struct Cli {
    /// Log filter (error, warn, info, debug); overrides RUST_LOG.
    #[arg(long, global = true)]
    log: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderKind {
    Builtin,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Valid => Some(Split::Valid),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Render one knowledge-extraction prompt per molecule into <out>/<id>.txt.
    Prompt {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        allow_skips: bool,
    },
    /// Send prompts to a chat-completions endpoint, caching every response.
    ///
    /// Reads MOLFUSE_CHAT_API_KEY, MOLFUSE_CHAT_API_BASE and MOLFUSE_CHAT_MODEL.
    Generate {
        /// Directory of <id>.txt prompt files.
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        cache_dir: PathBuf,
        /// Directory for <id>.txt responses.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
    },
    /// Embed knowledge texts into the binary embedding container.
    Embed {
        /// Directory of <id>.txt files, or a CSV with `id,text` columns.
        #[arg(long)]
        texts: PathBuf,
        #[arg(long, value_enum, default_value = "builtin")]
        provider: ProviderKind,
        #[arg(long, default_value_t = 128)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        provider_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign train/valid/test splits and write splits.csv.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        allow_skips: bool,
    },
    /// Train a model; flags override the JSON config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        /// Embedding container directory.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        allow_skips: bool,
    },
    /// Evaluate a checkpoint and print its metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        allow_skips: bool,
    },
    /// One-off prediction for a SMILES string and knowledge text.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        smiles: String,
        #[arg(long)]
        knowledge_text: String,
    },
    /// PCA, entropy and correlation analysis of pooled representations.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Comma-separated subset of chem, mol, fused; default: all the
        /// variant provides.
        #[arg(long, value_delimiter = ',')]
        representation: Vec<Representation>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API for a checkpoint.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, value_enum, default_value = "builtin")]
        provider: ProviderKind,
    },
}

struct Failure {
    kind: &'static str,
    message: String,
}

impl Failure {
    fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind {
            "config" | "usage" => 2,
            "data" => 3,
            _ => 4,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::new(e.kind(), e.to_string())
    }
}

impl From<molfuse::knowledge::KnowledgeError> for Failure {
    fn from(e: molfuse::knowledge::KnowledgeError) -> Self {
        PipelineError::from(e).into()
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::new("io", format!("{}: {e}", path.display()))
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut logger =
        env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if let Some(filter) = &cli.log {
        logger.parse_filters(filter);
    }
    logger.init();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.kind, f.message.replace('\n', " "));
            ExitCode::from(f.exit_code())
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Prompt {
            dataset,
            task,
            out,
            allow_skips,
        } => prompt(&dataset, &task, &out, allow_skips),
        Cmd::Generate {
            prompts,
            cache_dir,
            out,
            concurrency,
        } => generate(&prompts, cache_dir, &out, concurrency),
        Cmd::Embed {
            texts,
            provider: ProviderKind::Builtin,
            dim,
            provider_seed,
            out,
        } => embed(&texts, dim, provider_seed, &out),
        Cmd::Split {
            dataset,
            task,
            seed,
            out,
            allow_skips,
        } => split(&dataset, &task, seed, &out, allow_skips),
        Cmd::Train {
            config,
            task,
            data,
            variant,
            embeddings,
            epochs,
            batch_size,
            lr,
            seed,
            out,
            allow_skips,
        } => {
            let mut v = match &config {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                    serde_json::from_str(&text)
                        .map_err(|e| Failure::new("config", format!("{}: {e}", p.display())))?
                }
                None => json!({}),
            };
            let obj = v
                .as_object_mut()
                .ok_or_else(|| Failure::new("config", "config file must hold a JSON object"))?;
            let mut set = |path: &[&str], val: Value| {
                let mut cur = &mut *obj;
                for key in &path[..path.len() - 1] {
                    cur = cur
                        .entry(key.to_string())
                        .or_insert_with(|| json!({}))
                        .as_object_mut()
                        .expect("config sections are objects");
                }
                cur.insert(path[path.len() - 1].to_string(), val);
            };
            if let Some(t) = task {
                set(&["task"], json!(t));
            }
            if let Some(d) = data {
                set(&["data"], json!(d));
            }
            if let Some(x) = variant {
                set(&["model", "variant"], json!(x));
            }
            if let Some(e) = embeddings {
                set(&["knowledge", "embeddings"], json!(e));
            }
            if let Some(x) = epochs {
                set(&["train", "epochs"], json!(x));
            }
            if let Some(x) = batch_size {
                set(&["train", "batch_size"], json!(x));
            }
            if let Some(x) = lr {
                set(&["train", "lr"], json!(x));
            }
            if let Some(x) = seed {
                set(&["seed"], json!(x));
            }
            if let Some(x) = out {
                set(&["output_dir"], json!(x));
            }
            if allow_skips {
                set(&["allow_skips"], json!(true));
            }
            let cfg: RunConfig =
                serde_json::from_value(v).map_err(|e| Failure::new("config", e.to_string()))?;
            let s = train_run(&cfg)?;
            print_json(&json!({
                "run_dir": s.run_dir,
                "best_epoch": s.best_epoch,
                "epochs_run": s.epochs_run,
                "valid": s.valid,
                "test": s.test,
            }));
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            data,
            embeddings,
            split,
            allow_skips,
        } => {
            let e = eval_run(
                &checkpoint,
                &data,
                embeddings.as_deref(),
                split.split(),
                allow_skips,
            )?;
            print_json(&serde_json::to_value(e).expect("json"));
            Ok(())
        }
        Cmd::Predict {
            checkpoint,
            smiles,
            knowledge_text,
        } => {
            let p = Predictor::load(&checkpoint)?;
            let out = p.predict(&smiles, &knowledge_text)?;
            let outputs: Vec<Value> = p
                .meta
                .label_names
                .iter()
                .zip(&out.outputs)
                .map(|(l, v)| json!({"label": l, "value": v}))
                .collect();
            print_json(&json!({
                "task": p.meta.task.name,
                "variant": p.network.config.variant,
                "outputs": outputs,
                "gates": out.gates.iter().map(|g| json!({"xattn": g.0, "dense": g.1})).collect::<Vec<_>>(),
            }));
            Ok(())
        }
        Cmd::Analyze {
            checkpoint,
            data,
            embeddings,
            split,
            representation,
            out,
        } => {
            let reps = if representation.is_empty() {
                let v = Predictor::load(&checkpoint)?.network.config.variant;
                Representation::ALL
                    .into_iter()
                    .filter(|r| match r {
                        Representation::Chem => v.uses_knowledge(),
                        Representation::Mol => v.uses_graph(),
                        Representation::Fused => v == Variant::Full,
                    })
                    .collect()
            } else {
                representation
            };
            let results = analyze_run(
                &checkpoint,
                &data,
                embeddings.as_deref(),
                split.split(),
                &reps,
                &out,
            )?;
            let summary: Vec<Value> = results
                .iter()
                .map(|a| {
                    json!({
                        "representation": a.representation,
                        "samples": a.ids.len(),
                        "width": a.vectors.first().map_or(0, Vec::len),
                        "explained_variance": a.pca.explained,
                        "mean_entropy": a.entropy.iter().sum::<f64>() / a.entropy.len() as f64,
                    })
                })
                .collect();
            print_json(&json!({"out": out, "analyses": summary}));
            Ok(())
        }
        Cmd::Serve {
            checkpoint,
            port,
            host,
            provider: ProviderKind::Builtin,
        } => {
            if !checkpoint.is_file() {
                return Err(Failure::new(
                    "data",
                    format!("checkpoint {} not found", checkpoint.display()),
                ));
            }
            let rt =
                tokio::runtime::Runtime::new().map_err(|e| Failure::new("io", e.to_string()))?;
            rt.block_on(molfuse_server::serve((host, port).into(), checkpoint))
                .map_err(|e| match e {
                    molfuse_server::ServeError::Checkpoint(e) => Failure::from(e),
                    molfuse_server::ServeError::Io(e) => Failure::new("io", e.to_string()),
                })
        }
    }
}

fn prompt(dataset: &Path, task: &str, out: &Path, allow_skips: bool) -> Result<(), Failure> {
    let spec = TaskSpec::builtin(task).map_err(|e| {
        Failure::new(
            "usage",
            format!("{e}; usage: molfuse prompt --dataset <CSV> --task <NAME> --out <DIR>"),
        )
    })?;
    let bundle = load_dataset(dataset, &spec, LoadOptions { allow_skips })?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    for r in &bundle.records {
        let text =
            render_prompt(&r.graph, task).map_err(|e| Failure::new("usage", e.to_string()))?;
        let path = out.join(format!("{}.txt", r.id));
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }
    print_json(
        &json!({"prompts": bundle.records.len(), "skipped": bundle.skipped.len(), "out": out}),
    );
    Ok(())
}

/// Sorted `(id, path)` for every `*.txt` file in `dir`.
fn text_files(dir: &Path) -> Result<Vec<(String, PathBuf)>, Failure> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                files.push((stem.to_string(), path.clone()));
            }
        }
    }
    files.sort();
    Ok(files)
}

fn generate(
    prompts: &Path,
    cache_dir: PathBuf,
    out: &Path,
    concurrency: usize,
) -> Result<(), Failure> {
    let mut cfg = ChatConfig::from_env(cache_dir)?;
    cfg.concurrency = concurrency.max(1);
    let files = text_files(prompts)?;
    let texts = files
        .iter()
        .map(|(_, p)| fs::read_to_string(p).map_err(|e| io_err(p, e)))
        .collect::<Result<Vec<_>, _>>()?;
    let client = ChatClient::new(cfg);
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let (mut cached, mut fresh, mut failed) = (0, 0, Vec::new());
    for ((id, _), result) in files.iter().zip(client.generate_many(&texts)) {
        match result {
            Ok(g) => {
                if g.from_cache {
                    cached += 1;
                } else {
                    fresh += 1;
                }
                let path = out.join(format!("{id}.txt"));
                fs::write(&path, g.text).map_err(|e| io_err(&path, e))?;
            }
            Err(e) => {
                log::error!("{id}: {e}");
                failed.push(id.clone());
            }
        }
    }
    print_json(&json!({"generated": fresh, "cached": cached, "failed": failed.len()}));
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(
            "io",
            format!(
                "{} prompts failed (first: {}); rerun to resume from cache",
                failed.len(),
                failed[0]
            ),
        ))
    }
}

fn embed(texts: &Path, dim: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    if dim == 0 {
        return Err(Failure::new("usage", "--dim must be positive"));
    }
    let provider = BuiltinProvider::new(dim, seed);
    let mut store = EmbeddingStore::new();
    let mut add = |id: String, text: &str, origin: String| -> Result<(), Failure> {
        let e = provider
            .embed(text)
            .map_err(|e| Failure::new("data", format!("{origin}: {e}")))?;
        store.insert(id, e);
        Ok(())
    };
    if texts.is_dir() {
        for (id, path) in text_files(texts)? {
            let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            add(id, &text, path.display().to_string())?;
        }
    } else {
        let mut rdr =
            csv::Reader::from_path(texts).map_err(|e| Failure::new("data", e.to_string()))?;
        let headers = rdr
            .headers()
            .map_err(|e| Failure::new("data", e.to_string()))?
            .clone();
        let col = |n: &str| {
            headers.iter().position(|h| h == n).ok_or_else(|| {
                Failure::new("data", format!("{}: missing column `{n}`", texts.display()))
            })
        };
        let (ci, ct) = (col("id")?, col("text")?);
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Failure::new("data", e.to_string()))?;
            add(
                rec[ci].to_string(),
                &rec[ct],
                format!("{} row {}", texts.display(), row + 1),
            )?;
        }
    }
    if store.is_empty() {
        return Err(Failure::new(
            "data",
            format!("no texts found in {}", texts.display()),
        ));
    }
    save_embeddings(out, &store)?;
    print_json(&json!({"embedded": store.len(), "provider": provider.id(), "out": out}));
    Ok(())
}

fn split(
    dataset: &Path,
    task: &str,
    seed: u64,
    out: &Path,
    allow_skips: bool,
) -> Result<(), Failure> {
    let mut spec = TaskSpec::builtin(task).map_err(|e| Failure::new("usage", e.to_string()))?;
    spec.seed = seed;
    let mut bundle = load_dataset(dataset, &spec, LoadOptions { allow_skips })?;
    let warnings = assign_splits(&mut bundle);
    let mut w = csv::Writer::from_path(out).map_err(|e| Failure::new("io", e.to_string()))?;
    let io = |e: csv::Error| Failure::new("io", e.to_string());
    w.write_record(["id", "split", "scaffold"]).map_err(io)?;
    for (r, s) in bundle.records.iter().zip(&bundle.splits) {
        w.write_record([r.id.as_str(), s.as_str(), r.scaffold.as_str()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| io_err(out, e))?;
    let counts: Vec<usize> = Split::ALL
        .iter()
        .map(|&s| bundle.indices(s).len())
        .collect();
    print_json(&json!({
        "policy": spec.split,
        "train": counts[0],
        "valid": counts[1],
        "test": counts[2],
        "skipped": bundle.skipped.len(),
        "warnings": warnings,
    }));
    Ok(())
}
