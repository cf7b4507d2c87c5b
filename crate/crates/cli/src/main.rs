use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use contextfed::dutycycle::{read_timeline_csv, simulate, Detectors};
use contextfed::embed::{
    hash_embed, save_embeddings, tfidf_embed, tfidf_fit, EmbeddingStore, DEFAULT_DIM,
};
use contextfed::eval::{cohort_for_seed, run_experiment, text_chunks, EmbeddingConfig, ExperimentConfig};
use contextfed::synth::{generate_cohort, save_cohort, CohortSpec};
use contextfed::textprep::{clean_text, load_table, PrepConfig};
use serde_json::json;

#[derive(Parser)]
#[command(name = "contextfed", version, about = "Context-aware federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedMode {
    Hash,
    Tfidf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort as JSONL.
    Synth {
        /// Cohort spec JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        signal_strength: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clean raw text, one input per line, into space-joined tokens.
    Prep {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON with optional `abbreviations`, `emoji`, `dictionary` paths and `max_letter_run`.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Embed token lines (or `{sample_id, text}` JSONL) into an embedding file.
    Embed {
        #[arg(long, value_enum, default_value = "hash")]
        mode: EmbedMode,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Vector dimension (vocabulary size for tfidf).
        #[arg(long, default_value_t = DEFAULT_DIM)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the text chunks an experiment embeds, as `{sample_id, text}` JSONL.
    Samples {
        #[arg(long)]
        config: PathBuf,
        /// Experiment seed selecting the cohort; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate duty-cycled collection over a minute timeline CSV.
    Dutycycle {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "en")]
        language: String,
    },
    /// Run an experiment and write its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check an experiment config without running it.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn line(&self) -> String {
        let (kind, message) = match self {
            Failure::Usage(m) => ("usage", m),
            Failure::Config(m) => ("config", m),
            Failure::Runtime(m) => ("runtime", m),
        };
        json!({ "error": kind, "message": message.replace('\n', " ") }).to_string()
    }
}

/// Config errors keep exit code 1; anything else is a runtime failure.
fn runtime(e: contextfed::Error) -> Failure {
    match e {
        contextfed::Error::Config(m) => Failure::Config(m),
        other => Failure::Runtime(other.to_string()),
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn read_json(path: &Path) -> Result<serde_json::Value, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn load_experiment(path: &Path) -> Result<ExperimentConfig, Failure> {
    let value = read_json(path)?;
    let mut cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    // relative paths are relative to the config file
    let base = path.parent().unwrap_or(Path::new(""));
    if let Some(p) = &mut cfg.cohort_path {
        *p = base.join(&*p);
    }
    if let EmbeddingConfig::File { path: p } = &mut cfg.embedding {
        *p = base.join(&*p);
    }
    cfg.validate()
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

fn cmd_synth(
    config: Option<PathBuf>,
    seed: Option<u64>,
    users: Option<usize>,
    signal_strength: Option<f64>,
    out: &Path,
) -> Result<(), Failure> {
    let mut spec: CohortSpec = match config {
        Some(p) => serde_json::from_value(read_json(&p)?).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
        None => CohortSpec::default(),
    };
    if let Some(s) = seed {
        spec.rng_seed = s;
    }
    if let Some(u) = users {
        spec.num_users = u;
    }
    if let Some(s) = signal_strength {
        spec.signal_strength = s;
    }
    spec.validate().map_err(config_err)?;
    let cohort = generate_cohort(&spec).map_err(runtime)?;
    save_cohort(&cohort, out).map_err(runtime)
}

fn prep_config(path: Option<PathBuf>) -> Result<PrepConfig, Failure> {
    let Some(path) = path else {
        return Ok(PrepConfig::default());
    };
    let value = read_json(&path)?;
    let obj = value
        .as_object()
        .ok_or_else(|| Failure::Config(format!("{}: expected a JSON object", path.display())))?;
    for key in obj.keys() {
        if !["abbreviations", "emoji", "dictionary", "max_letter_run"].contains(&key.as_str()) {
            return Err(Failure::Config(format!("{}: unknown field `{key}`", path.display())));
        }
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let path_of = |key: &str| obj.get(key).and_then(|v| v.as_str()).map(|s| base.join(s));
    let bundled = PrepConfig::default();
    let abbreviations = match path_of("abbreviations") {
        Some(p) => load_table(&p).map_err(config_err)?,
        None => bundled.abbreviations().clone(),
    };
    let emoji = match path_of("emoji") {
        Some(p) => load_table(&p).map_err(config_err)?,
        None => bundled
            .emoji_names()
            .map(|(k, v)| (k.to_string(), v.to_vec()))
            .collect(),
    };
    let mut cfg = PrepConfig::new(abbreviations, emoji).map_err(config_err)?;
    if let Some(p) = path_of("dictionary") {
        let words: BTreeSet<String> = std::fs::read_to_string(&p)
            .map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
            .split_whitespace()
            .map(str::to_lowercase)
            .collect();
        cfg = cfg.with_autocorrect(words);
    }
    if let Some(run) = obj.get("max_letter_run") {
        cfg.max_letter_run = run
            .as_u64()
            .filter(|&r| r >= 1)
            .ok_or_else(|| Failure::Config("max_letter_run must be a positive integer".into()))?
            as usize;
    }
    Ok(cfg)
}

fn cmd_prep(input: &Path, out: &Path, config: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = prep_config(config)?;
    let reader = open(input)?;
    let mut w = create(out)?;
    for line in reader.lines() {
        let line = line.map_err(io_err(input))?;
        writeln!(w, "{}", clean_text(&line, &cfg).join(" ")).map_err(io_err(out))?;
    }
    w.flush().map_err(io_err(out))
}

/// `(sample_id, tokens)` from either plain token lines (ids are 1-based
/// line numbers) or `{sample_id, text}` JSON lines.
fn read_samples(input: &Path) -> Result<Vec<(String, Vec<String>)>, Failure> {
    let mut out = Vec::new();
    for (i, line) in open(input)?.lines().enumerate() {
        let line = line.map_err(io_err(input))?;
        if line.trim_start().starts_with('{') {
            let v: serde_json::Value = serde_json::from_str(&line)
                .map_err(|e| Failure::Runtime(format!("{}:{}: {e}", input.display(), i + 1)))?;
            let id = v.get("sample_id").and_then(|s| s.as_str());
            let text = v.get("text").and_then(|s| s.as_str());
            let (Some(id), Some(text)) = (id, text) else {
                return Err(Failure::Runtime(format!(
                    "{}:{}: expected sample_id and text",
                    input.display(),
                    i + 1
                )));
            };
            out.push((id.to_string(), text.split_whitespace().map(String::from).collect()));
        } else {
            out.push(((i + 1).to_string(), line.split_whitespace().map(String::from).collect()));
        }
    }
    Ok(out)
}

fn cmd_embed(mode: EmbedMode, input: &Path, out: &Path, dim: usize, seed: u64) -> Result<(), Failure> {
    if dim == 0 {
        return Err(Failure::Usage("--dim must be at least 1".into()));
    }
    let samples = read_samples(input)?;
    let mut store = EmbeddingStore::default();
    match mode {
        EmbedMode::Hash => {
            for (id, tokens) in samples {
                store.insert(id, hash_embed::<f64>(&tokens, dim, seed)).map_err(runtime)?;
            }
        }
        EmbedMode::Tfidf => {
            let corpus: Vec<Vec<String>> = samples.iter().map(|(_, t)| t.clone()).collect();
            let vocab = tfidf_fit(&corpus, (1, 3), dim).map_err(runtime)?;
            for (id, tokens) in samples {
                store.insert(id, tfidf_embed::<f64>(&tokens, &vocab)).map_err(runtime)?;
            }
        }
    }
    save_embeddings(&store, out).map_err(runtime)
}

fn cmd_samples(config: &Path, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let cfg = load_experiment(config)?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let cohort = cohort_for_seed(&cfg, seed).map_err(runtime)?;
    let window = cfg.task_spec().window;
    let mut w = create(out)?;
    for client in &cohort {
        for chunk in text_chunks(client, &cfg.sources, window, cfg.chunk_size) {
            let line = json!({ "sample_id": chunk.sample_id, "text": chunk.tokens.join(" ") });
            writeln!(w, "{line}").map_err(io_err(out))?;
        }
    }
    w.flush().map_err(io_err(out))
}

fn cmd_dutycycle(input: &Path, out: &Path, language: &str) -> Result<(), Failure> {
    let timeline = read_timeline_csv(open(input)?).map_err(runtime)?;
    let detectors = Detectors::from_timeline(&timeline, language);
    let trace = simulate(&timeline, &detectors, language);
    let mut w = create(out)?;
    serde_json::to_writer_pretty(&mut w, &trace).map_err(|e| Failure::Runtime(e.to_string()))?;
    w.flush().map_err(io_err(out))
}

fn cmd_run(config: &Path, out: &Path) -> Result<(), Failure> {
    let mut cfg = load_experiment(config)?;
    cfg.output_dir = Some(out.to_path_buf());
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let manifest = json!({
        "tool": "contextfed",
        "version": env!("CARGO_PKG_VERSION"),
        "config_path": config.display().to_string(),
        "seeds": cfg.seeds,
        "config": cfg,
    });
    let mut w = create(&out.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| Failure::Runtime(e.to_string()))?;
    w.flush().map_err(io_err(out))?;
    let report = run_experiment(&cfg).map_err(runtime)?;
    report.save(out).map_err(runtime)
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth {
            config,
            seed,
            users,
            signal_strength,
            out,
        } => cmd_synth(config, seed, users, signal_strength, &out),
        Command::Prep { input, out, config } => cmd_prep(&input, &out, config),
        Command::Embed {
            mode,
            input,
            out,
            dim,
            seed,
        } => cmd_embed(mode, &input, &out, dim, seed),
        Command::Samples { config, seed, out } => cmd_samples(&config, seed, &out),
        Command::Dutycycle { input, out, language } => cmd_dutycycle(&input, &out, &language),
        Command::Run { config, out } => cmd_run(&config, &out),
        Command::ValidateConfig { config } => load_experiment(&config).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            let f = Failure::Usage(first.to_string());
            eprintln!("{}", f.line());
            return ExitCode::from(f.code());
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code())
        }
    }
}
