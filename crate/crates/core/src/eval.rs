//! Tasks, metrics and the leave-one-user-out experiment harness.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::call::{
    canonical_members, context_texts, resolve_profile, CallClient, CallTrainer, EnsembleMode,
    EnsembleModel, Granularity, LongInputMode, MemberInputs, MemberKey, PeriodInputs,
};
use crate::context::Source;
use crate::embed::{
    chunk_tokens, load_embeddings, pool_max, tfidf_fit, Embedder, EmbeddingStore, HashEmbedder,
    DEFAULT_CHUNK, DEFAULT_DIM,
};
use crate::error::{Error, Result};
use crate::fl::{run_rounds, FlConfig, LinearTrainer};
use crate::model::{self, report_regression, LinearModel, Sample, Task, TrainConfig};
use crate::seed;
use crate::synth::{generate_cohort, load_cohort, nontext_features, ClientDataset, CohortSpec};

pub const PHQ9_MAX: i64 = 27;
pub const PHQ9_THRESHOLD: i64 = 5;
pub const DEFAULT_SEEDS: [u64; 3] = [17, 42, 1009];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    Depression,
    Stress,
    Anxiety,
    Mood,
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskName::Depression => "depression",
            TaskName::Stress => "stress",
            TaskName::Anxiety => "anxiety",
            TaskName::Mood => "mood",
        })
    }
}

/// What is predicted, from which window of data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: TaskName,
    pub kind: Task,
    pub window: Granularity,
}

impl TaskSpec {
    /// Depression is a classification over the whole study window; the
    /// other tasks are daily regressions.
    pub fn new(name: TaskName) -> Self {
        match name {
            TaskName::Depression => TaskSpec {
                name,
                kind: Task::Classification,
                window: Granularity::PerPeriod,
            },
            _ => TaskSpec {
                name,
                kind: Task::Regression,
                window: Granularity::PerDay,
            },
        }
    }

    /// Ground truth for one period of one client.
    pub fn label(&self, client: &ClientDataset, period: usize) -> Result<Option<f64>> {
        Ok(match self.name {
            TaskName::Depression => Some(f64::from(binarize_phq9(i64::from(client.phq9))?)),
            TaskName::Stress => client.daily_labels.get(period).map(|l| l.stress),
            TaskName::Anxiety => client.daily_labels.get(period).map(|l| l.anxiety),
            TaskName::Mood => client.daily_labels.get(period).map(|l| l.mood),
        })
    }

    pub fn periods(&self, client: &ClientDataset) -> usize {
        match self.window {
            Granularity::PerPeriod => 1,
            Granularity::PerDay => client.days,
        }
    }

    pub fn metric_name(&self) -> &'static str {
        match self.kind {
            Task::Classification => "auroc",
            Task::Regression => "mae",
        }
    }
}

/// 1 for at least mild depression.
pub fn binarize_phq9(score: i64) -> Result<u8> {
    if !(0..=PHQ9_MAX).contains(&score) {
        return Err(Error::Phq9OutOfRange(score));
    }
    Ok(u8::from(score >= PHQ9_THRESHOLD))
}

/// Area under the ROC curve from midranks: the probability that a positive
/// outscores a negative, counting ties as one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuroc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, kept integral
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share the midrank (i+j+2)/2
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank_sum2 += tied_pos * (i + j + 2) as u128;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let total: f64 = preds.iter().zip(labels).map(|(p, l)| (p - l).abs()).sum();
    Ok(total / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub test_user: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub validation_users: Vec<String>,
    pub train_users: Vec<String>,
}

/// One fold per user, training on everyone else.
pub fn louo_folds(user_ids: &[String]) -> Result<Vec<Fold>> {
    louo_with_validation(user_ids, 0)
}

/// Like [`louo_folds`], but the `v` users following the test user
/// (cyclically) are held out for validation.
pub fn louo_with_validation(user_ids: &[String], v: usize) -> Result<Vec<Fold>> {
    let n = user_ids.len();
    if n < 2 || v + 2 > n {
        return Err(Error::TooFewUsers(n));
    }
    Ok((0..n)
        .map(|i| {
            let validation: Vec<String> = (1..=v).map(|k| user_ids[(i + k) % n].clone()).collect();
            let train = user_ids
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i && !(1..=v).any(|k| (i + k) % n == j))
                .map(|(_, u)| u.clone())
                .collect();
            Fold {
                test_user: user_ids[i].clone(),
                validation_users: validation,
                train_users: train,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "cl_nontext")]
    ClNonText,
    #[serde(rename = "fl_text")]
    FlText,
    #[serde(rename = "fedtherapist")]
    FedTherapist,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::ClNonText => "cl_nontext",
            Method::FlText => "fl_text",
            Method::FedTherapist => "fedtherapist",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbeddingConfig {
    Hash {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Vocabulary fit per fold on the training users' text.
    Tfidf {
        #[serde(default = "default_dim")]
        vocab_size: usize,
    },
    /// Precomputed vectors keyed by sample id (see [`text_chunks`]).
    File { path: PathBuf },
}

fn default_dim() -> usize {
    DEFAULT_DIM
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig::Hash {
            dim: DEFAULT_DIM,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FoldMode {
    #[default]
    Louo,
    LouoWithValidation {
        validation_users: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub sources: BTreeSet<Source>,
    pub task: TaskName,
    pub ensemble_mode: EnsembleMode,
    pub long_input_mode: LongInputMode,
    pub chunk_size: usize,
    pub embedding: EmbeddingConfig,
    pub fl: FlConfig,
    /// Generated cohort; ignored when `cohort_path` is set.
    pub cohort: CohortSpec,
    pub cohort_path: Option<PathBuf>,
    /// Regenerate the synthetic cohort with each experiment seed.
    pub reseed_cohort: bool,
    /// Z-score text vectors with training-fold statistics.
    pub standardize_text: bool,
    pub folds: FoldMode,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::FedTherapist,
            sources: Source::ALL.into_iter().collect(),
            task: TaskName::Depression,
            ensemble_mode: EnsembleMode::Weighted,
            long_input_mode: LongInputMode::FullPool,
            chunk_size: DEFAULT_CHUNK,
            embedding: EmbeddingConfig::default(),
            fl: FlConfig::default(),
            cohort: CohortSpec::default(),
            cohort_path: None,
            reseed_cohort: true,
            standardize_text: true,
            folds: FoldMode::Louo,
            seeds: DEFAULT_SEEDS.to_vec(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.method != Method::ClNonText && self.sources.is_empty() {
            return Err(Error::Config(format!("method {} requires nonempty sources", self.method)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be at least 1".into()));
        }
        match &self.embedding {
            EmbeddingConfig::Hash { dim, .. } if *dim == 0 => {
                return Err(Error::Config("embedding dim must be at least 1".into()))
            }
            EmbeddingConfig::Tfidf { vocab_size } if *vocab_size == 0 => {
                return Err(Error::Config("vocab_size must be at least 1".into()))
            }
            _ => {}
        }
        let generated_per_seed = self.cohort_path.is_none() && self.reseed_cohort && self.seeds.len() > 1;
        if matches!(self.embedding, EmbeddingConfig::File { .. }) && generated_per_seed {
            return Err(Error::Config(
                "a file embedding covers one cohort; with several seeds set reseed_cohort false or use cohort_path".into(),
            ));
        }
        if let FoldMode::LouoWithValidation { validation_users: 0 } = self.folds {
            return Err(Error::Config("validation_users must be at least 1".into()));
        }
        self.fl.validate()?;
        if self.cohort_path.is_none() {
            self.cohort.validate()?;
        }
        Ok(())
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec::new(self.task)
    }

    fn fold_list(&self, users: &[String]) -> Result<Vec<Fold>> {
        match self.folds {
            FoldMode::Louo => louo_folds(users),
            FoldMode::LouoWithValidation { validation_users } => louo_with_validation(users, validation_users),
        }
    }
}

/// The cohort an experiment seed runs on.
pub fn cohort_for_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ClientDataset>> {
    match &cfg.cohort_path {
        Some(path) => load_cohort(path),
        None => {
            let mut spec = cfg.cohort.clone();
            if cfg.reseed_cohort {
                spec.rng_seed = seed;
            }
            generate_cohort(&spec)
        }
    }
}

/// Which text a chunk was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ChunkGroup {
    Member(MemberKey),
    /// All selected sources, no context split.
    Pooled,
}

/// A chunk of text with the id it is embedded under.
#[derive(Debug, Clone, PartialEq)]
pub struct TextChunk {
    pub sample_id: String,
    pub user_id: String,
    pub period: usize,
    pub group: ChunkGroup,
    pub chunk: usize,
    pub tokens: Vec<String>,
}

/// `user:period:source:label:chunk` for members, `user:period:pooled:chunk`
/// for pooled text.
pub fn sample_id(user_id: &str, period: usize, group: ChunkGroup, chunk: usize) -> String {
    match group {
        ChunkGroup::Member(k) => format!("{user_id}:{period}:{}:{}:{chunk}", k.source, k.label),
        ChunkGroup::Pooled => format!("{user_id}:{period}:pooled:{chunk}"),
    }
}

/// Every text chunk a client contributes: per-member groups and pooled
/// text, per period of `granularity`.
pub fn text_chunks(
    client: &ClientDataset,
    sources: &BTreeSet<Source>,
    granularity: Granularity,
    chunk_size: usize,
) -> Vec<TextChunk> {
    let profile = resolve_profile(client);
    let mut groups: BTreeMap<(usize, ChunkGroup), Vec<String>> = context_texts(client, &profile, sources, granularity)
        .into_iter()
        .map(|((p, k), toks)| ((p, ChunkGroup::Member(k)), toks))
        .collect();
    let mut events: Vec<_> = client.events.iter().filter(|e| sources.contains(&e.source)).collect();
    events.sort_by_key(|e| e.timestamp);
    for e in events {
        if let Some(p) = crate::call::period_of(client, e.timestamp, granularity) {
            groups
                .entry((p, ChunkGroup::Pooled))
                .or_default()
                .extend(e.tokens.iter().cloned());
        }
    }
    let mut out = Vec::new();
    for ((period, group), tokens) in groups {
        for (chunk, toks) in chunk_tokens(&tokens, chunk_size).into_iter().enumerate() {
            out.push(TextChunk {
                sample_id: sample_id(&client.user_id, period, group, chunk),
                user_id: client.user_id.clone(),
                period,
                group,
                chunk,
                tokens: toks,
            });
        }
    }
    out
}

enum VectorSource<'a> {
    Embedder(&'a dyn Embedder<f64>),
    Store(&'a EmbeddingStore),
}

impl VectorSource<'_> {
    fn vector(&self, c: &TextChunk) -> Result<Vec<f64>> {
        match self {
            VectorSource::Embedder(e) => Ok(e.embed(&c.tokens)),
            VectorSource::Store(s) => s
                .get(&c.sample_id)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::MissingEmbedding(c.sample_id.clone())),
        }
    }

    fn dim(&self) -> Option<usize> {
        match self {
            VectorSource::Embedder(e) => Some(e.dim()),
            VectorSource::Store(s) => s.dim,
        }
    }
}

/// Everything a method needs about one `(user, period)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodData {
    pub period: usize,
    pub label: f64,
    pub members: MemberInputs<f64>,
    pub pooled: Vec<Vec<f64>>,
    pub nontext: Vec<f64>,
}

impl PeriodData {
    pub fn has_text(&self) -> bool {
        !self.pooled.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserData {
    pub user_id: String,
    pub periods: Vec<PeriodData>,
}

fn apply_mode(vectors: Vec<Vec<f64>>, mode: LongInputMode) -> Result<Vec<Vec<f64>>> {
    Ok(match mode {
        LongInputMode::Single => vectors,
        LongInputMode::FullPool if vectors.is_empty() => vectors,
        LongInputMode::FullPool => vec![pool_max(&vectors)?],
    })
}

fn mean_columns<R: AsRef<[f64]>>(rows: &[R]) -> Vec<f64> {
    let n = rows.len().max(1) as f64;
    let dim = rows.first().map_or(0, |r| r.as_ref().len());
    (0..dim).map(|j| rows.iter().map(|r| r.as_ref()[j]).sum::<f64>() / n).collect()
}

fn assemble_user(
    client: &ClientDataset,
    chunks: &[TextChunk],
    task: &TaskSpec,
    mode: LongInputMode,
    vectors: &VectorSource<'_>,
) -> Result<UserData> {
    let mut grouped: BTreeMap<usize, BTreeMap<ChunkGroup, Vec<Vec<f64>>>> = BTreeMap::new();
    for c in chunks {
        let v = vectors.vector(c)?;
        if let Some(dim) = vectors.dim() {
            if v.len() != dim {
                return Err(Error::EmbeddingDim {
                    sample_id: c.sample_id.clone(),
                    expected: dim,
                    actual: v.len(),
                });
            }
        }
        grouped.entry(c.period).or_default().entry(c.group).or_default().push(v);
    }
    let mut periods = Vec::new();
    for period in 0..task.periods(client) {
        let Some(label) = task.label(client, period)? else {
            continue;
        };
        let mut members = MemberInputs::new();
        let mut pooled = Vec::new();
        for (group, vs) in grouped.remove(&period).unwrap_or_default() {
            let vs = apply_mode(vs, mode)?;
            match group {
                ChunkGroup::Member(k) => {
                    members.insert(k, vs);
                }
                ChunkGroup::Pooled => pooled = vs,
            }
        }
        let nontext = match task.window {
            Granularity::PerDay => nontext_features(client, period),
            Granularity::PerPeriod => {
                mean_columns(&(0..client.days).map(|d| nontext_features(client, d)).collect::<Vec<_>>())
            }
        };
        periods.push(PeriodData {
            period,
            label,
            members,
            pooled,
            nontext,
        });
    }
    Ok(UserData {
        user_id: client.user_id.clone(),
        periods,
    })
}

/// One prediction on a held-out `(user, period)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub user_id: String,
    pub period: usize,
    pub label: f64,
    /// Probability for classification, `0..=100` for regression.
    pub prediction: f64,
    /// Scores of the members that had input, on the same scale.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub member_scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub seed: u64,
    pub fold: usize,
    pub test_user: String,
    pub train_users: usize,
    /// Undefined for a single-user AUROC.
    pub metric: Option<f64>,
    pub predictions: Vec<Prediction>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub validation_predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub metric: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_metric: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub member_metrics: BTreeMap<String, Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_weights: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPeriod {
    pub seed: u64,
    pub user_id: String,
    pub period: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation over the defined values.
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(MeanStd { mean, std: var.sqrt() })
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: Method,
    pub task: TaskName,
    pub metric: String,
    pub ensemble_mode: Option<EnsembleMode>,
    pub seeds: Vec<u64>,
    pub num_users: usize,
    pub fold_count: usize,
    pub folds: Vec<FoldRecord>,
    pub per_seed: Vec<SeedSummary>,
    pub summary: Option<MeanStd>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub member_summary: BTreeMap<String, MeanStd>,
    pub skipped: Vec<SkippedPeriod>,
}

impl Report {
    pub fn folds_for_seed(&self, seed: u64) -> impl Iterator<Item = &FoldRecord> {
        self.folds.iter().filter(move |f| f.seed == seed)
    }

    /// `seed,fold,test_user,user_id,period,label,prediction` rows.
    pub fn write_predictions_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["seed", "fold", "test_user", "split", "user_id", "period", "label", "prediction"])?;
        for f in &self.folds {
            let rows = f
                .predictions
                .iter()
                .map(|p| ("test", p))
                .chain(f.validation_predictions.iter().map(|p| ("validation", p)));
            for (split, p) in rows {
                w.write_record([
                    f.seed.to_string(),
                    f.fold.to_string(),
                    f.test_user.clone(),
                    split.to_string(),
                    p.user_id.clone(),
                    p.period.to_string(),
                    p.label.to_string(),
                    p.prediction.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("predictions.csv", e))?;
        Ok(())
    }

    /// `scope,name,seed,value` rows: per-seed and mean/std metrics for the
    /// method and each member.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scope", "name", "seed", "value"])?;
        let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for s in &self.per_seed {
            w.write_record(["method", &self.metric, &s.seed.to_string(), &fmt_opt(s.metric)])?;
            for (member, v) in &s.member_metrics {
                w.write_record(["member", member, &s.seed.to_string(), &fmt_opt(*v)])?;
            }
        }
        if let Some(ms) = self.summary {
            w.write_record(["method", &self.metric, "mean", &ms.mean.to_string()])?;
            w.write_record(["method", &self.metric, "std", &ms.std.to_string()])?;
        }
        for (member, ms) in &self.member_summary {
            w.write_record(["member", member, "mean", &ms.mean.to_string()])?;
            w.write_record(["member", member, "std", &ms.std.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("summary.csv", e))?;
        Ok(())
    }

    /// Writes `report.json`, `predictions.csv` and `summary.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        let f = std::fs::File::create(&json).map_err(|e| Error::io(&json, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        let p = dir.join("predictions.csv");
        self.write_predictions_csv(std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?)?;
        let s = dir.join("summary.csv");
        self.write_summary_csv(std::fs::File::create(&s).map_err(|e| Error::io(&s, e))?)?;
        Ok(())
    }
}

/// Z-scoring statistics fit on training rows; constant columns get unit
/// scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let mean = mean_columns(rows);
        let n = rows.len().max(1) as f64;
        let scale = (0..mean.len())
            .map(|j| {
                let var = rows.iter().map(|r| (r.as_ref()[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Z-scores every text vector with statistics of the training users' text
/// periods: one standardizer per member and one for pooled text.
pub fn standardize_text(users: &[UserData], train_ids: &[String]) -> Vec<UserData> {
    let train: BTreeSet<&str> = train_ids.iter().map(String::as_str).collect();
    let mut rows: BTreeMap<ChunkGroup, Vec<&[f64]>> = BTreeMap::new();
    for u in users.iter().filter(|u| train.contains(u.user_id.as_str())) {
        for p in text_periods(u) {
            for (k, vs) in &p.members {
                rows.entry(ChunkGroup::Member(*k))
                    .or_default()
                    .extend(vs.iter().map(Vec::as_slice));
            }
            rows.entry(ChunkGroup::Pooled)
                .or_default()
                .extend(p.pooled.iter().map(Vec::as_slice));
        }
    }
    let z: BTreeMap<ChunkGroup, Standardizer> = rows
        .into_iter()
        .map(|(g, r)| (g, Standardizer::fit(&r)))
        .collect();
    let apply = |g: ChunkGroup, vs: &[Vec<f64>]| -> Vec<Vec<f64>> {
        match z.get(&g) {
            Some(s) => vs.iter().map(|v| s.apply(v)).collect(),
            None => vs.to_vec(),
        }
    };
    users
        .iter()
        .map(|u| UserData {
            user_id: u.user_id.clone(),
            periods: u
                .periods
                .iter()
                .map(|p| PeriodData {
                    members: p
                        .members
                        .iter()
                        .map(|(k, vs)| (*k, apply(ChunkGroup::Member(*k), vs)))
                        .collect(),
                    pooled: apply(ChunkGroup::Pooled, &p.pooled),
                    ..p.clone()
                })
                .collect(),
        })
        .collect()
}

/// Seed for one fold's training.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed::derive(&[seed, fold as u64])
}

fn to_reported(task: Task, score: f64) -> f64 {
    match task {
        Task::Classification => score,
        Task::Regression => report_regression(score),
    }
}

/// Per-seed inputs shared by every fold.
struct SeedData {
    seed: u64,
    clients: Vec<ClientDataset>,
    chunks: Vec<Vec<TextChunk>>,
    /// Present unless vectors depend on the fold.
    users: Option<Vec<UserData>>,
}

struct FoldOutcome {
    record: FoldRecord,
    ensemble_weights: Option<Vec<f64>>,
}

fn index_of(users: &[UserData]) -> BTreeMap<&str, usize> {
    users.iter().enumerate().map(|(i, u)| (u.user_id.as_str(), i)).collect()
}

/// The centralized non-text baseline trained on `train`, returned with its
/// feature scaling. Runs `rounds * local_epochs` epochs.
pub fn cl_nontext_model(
    cfg: &ExperimentConfig,
    train: &[&UserData],
    rng_seed: u64,
) -> (Standardizer, LinearModel<f64>) {
    let task = cfg.task_spec().kind;
    let rows: Vec<Vec<f64>> = train
        .iter()
        .flat_map(|u| u.periods.iter().map(|p| p.nontext.clone()))
        .collect();
    let z = Standardizer::fit(&rows);
    let samples: Vec<Sample<f64>> = train
        .iter()
        .flat_map(|u| u.periods.iter().map(|p| Sample::new(z.apply(&p.nontext), p.label)))
        .collect();
    let tc = TrainConfig {
        epochs: cfg.fl.rounds * cfg.fl.local_epochs,
        rng_seed,
        ..cfg.fl.train.clone()
    };
    let dim = z.mean.len();
    let model = model::train(&LinearModel::zeros(dim, task), &samples, &tc);
    (z, model)
}

fn fl_config(cfg: &ExperimentConfig, rng_seed: u64) -> FlConfig {
    FlConfig {
        rng_seed,
        ..cfg.fl.clone()
    }
}

fn text_periods(u: &UserData) -> impl Iterator<Item = &PeriodData> {
    u.periods.iter().filter(|p| p.has_text())
}

enum Trained {
    NonText(Standardizer, LinearModel<f64>),
    Text(LinearModel<f64>),
    Call(EnsembleModel<f64>),
}

impl Trained {
    fn predict(&self, user: &UserData, task: Task) -> Result<Vec<Prediction>> {
        let mut out = Vec::new();
        for p in &user.periods {
            let (score, member_scores) = match self {
                Trained::NonText(z, m) => (m.predict_score(&z.apply(&p.nontext))?, BTreeMap::new()),
                Trained::Text(m) => {
                    if !p.has_text() {
                        continue;
                    }
                    (m.predict_score_chunks(&p.pooled)?, BTreeMap::new())
                }
                Trained::Call(ens) => {
                    if !p.has_text() {
                        continue;
                    }
                    let scores = ens.member_scores(&p.members)?;
                    let members = ens
                        .keys()
                        .iter()
                        .zip(&scores)
                        .filter(|(k, _)| p.members.get(k).is_some_and(|c| !c.is_empty()))
                        .map(|(k, &s)| (k.to_string(), to_reported(task, s)))
                        .collect();
                    (ens.combine(&scores), members)
                }
            };
            out.push(Prediction {
                user_id: user.user_id.clone(),
                period: p.period,
                label: p.label,
                prediction: to_reported(task, score),
                member_scores,
            });
        }
        Ok(out)
    }
}

fn train_method(cfg: &ExperimentConfig, train: &[&UserData], dim: usize, rng_seed: u64) -> Result<Trained> {
    let task = cfg.task_spec().kind;
    match cfg.method {
        Method::ClNonText => {
            let (z, m) = cl_nontext_model(cfg, train, rng_seed);
            Ok(Trained::NonText(z, m))
        }
        Method::FlText => {
            let clients: Vec<Vec<Sample<f64>>> = train
                .iter()
                .map(|u| {
                    text_periods(u)
                        .flat_map(|p| p.pooled.iter().map(|x| Sample::new(x.clone(), p.label)))
                        .collect()
                })
                .collect();
            let trainer = LinearTrainer { task, dim };
            let init = LinearModel::<f64>::zeros(dim, task).to_params();
            let state = run_rounds(&fl_config(cfg, rng_seed), &trainer, &clients, init, |_, _| Vec::new())?;
            let mut m = LinearModel::zeros(dim, task);
            m.read_params(&state.global_params);
            Ok(Trained::Text(m))
        }
        Method::FedTherapist => {
            let template = EnsembleModel::<f64>::new(&cfg.sources, dim, task, cfg.ensemble_mode);
            let keys = template.keys();
            let clients: Vec<CallClient<f64>> = train
                .iter()
                .map(|u| {
                    let periods = text_periods(u)
                        .map(|p| PeriodInputs {
                            user_id: u.user_id.clone(),
                            period: p.period,
                            label: p.label,
                            inputs: p.members.clone(),
                        })
                        .collect();
                    CallClient::new(&keys, periods)
                })
                .collect();
            let init = template.to_params();
            let trainer = CallTrainer { template };
            let state = run_rounds(&fl_config(cfg, rng_seed), &trainer, &clients, init, |_, _| Vec::new())?;
            let mut ens = trainer.template.clone();
            ens.read_params(&state.global_params);
            Ok(Trained::Call(ens))
        }
    }
}

fn fold_metric(task: Task, preds: &[Prediction]) -> Option<f64> {
    match task {
        Task::Classification => {
            let (s, l): (Vec<f64>, Vec<u8>) = preds.iter().map(|p| (p.prediction, p.label as u8)).unzip();
            auroc(&s, &l).ok()
        }
        Task::Regression => {
            let (s, l): (Vec<f64>, Vec<f64>) = preds.iter().map(|p| (p.prediction, p.label)).unzip();
            mae(&s, &l).ok()
        }
    }
}

fn embed_dim(cfg: &ExperimentConfig, store: Option<&EmbeddingStore>) -> usize {
    match &cfg.embedding {
        EmbeddingConfig::Hash { dim, .. } => *dim,
        EmbeddingConfig::Tfidf { vocab_size } => *vocab_size,
        EmbeddingConfig::File { .. } => store.and_then(|s| s.dim).unwrap_or(0),
    }
}

fn run_fold(
    cfg: &ExperimentConfig,
    data: &SeedData,
    fold_index: usize,
    fold: &Fold,
    store: Option<&EmbeddingStore>,
) -> Result<FoldOutcome> {
    let task = cfg.task_spec();
    let fold_users;
    let users: &[UserData] = match &data.users {
        Some(u) => u,
        None => {
            fold_users = tfidf_users(cfg, data, &fold.train_users)?;
            &fold_users
        }
    };
    let standardized;
    let users: &[UserData] = if cfg.standardize_text && cfg.method != Method::ClNonText {
        standardized = standardize_text(users, &fold.train_users);
        &standardized
    } else {
        users
    };
    let dim = match &cfg.embedding {
        EmbeddingConfig::Tfidf { .. } => users
            .iter()
            .flat_map(|u| u.periods.iter())
            .find_map(|p| p.pooled.first().map(Vec::len))
            .unwrap_or(0),
        _ => embed_dim(cfg, store),
    };
    let index = index_of(users);
    let pick = |ids: &[String]| -> Vec<&UserData> { ids.iter().map(|id| &users[index[id.as_str()]]).collect() };
    let train_users = pick(&fold.train_users);
    let trained = train_method(cfg, &train_users, dim, fold_seed(data.seed, fold_index))?;
    let test = &users[index[fold.test_user.as_str()]];
    let predictions = trained.predict(test, task.kind)?;
    let mut validation_predictions = Vec::new();
    for v in pick(&fold.validation_users) {
        validation_predictions.extend(trained.predict(v, task.kind)?);
    }
    let ensemble_weights = match &trained {
        Trained::Call(ens) => Some(ens.effective_weights()),
        _ => None,
    };
    Ok(FoldOutcome {
        record: FoldRecord {
            seed: data.seed,
            fold: fold_index,
            test_user: fold.test_user.clone(),
            train_users: fold.train_users.len(),
            metric: fold_metric(task.kind, &predictions),
            predictions,
            validation_predictions,
        },
        ensemble_weights,
    })
}

fn tfidf_users(cfg: &ExperimentConfig, data: &SeedData, train_ids: &[String]) -> Result<Vec<UserData>> {
    let EmbeddingConfig::Tfidf { vocab_size } = cfg.embedding else {
        return Err(Error::Config("fold-specific vectors need a tfidf embedding".into()));
    };
    let train: BTreeSet<&str> = train_ids.iter().map(String::as_str).collect();
    let corpus: Vec<Vec<String>> = data
        .chunks
        .iter()
        .flatten()
        .filter(|c| c.group == ChunkGroup::Pooled && train.contains(c.user_id.as_str()))
        .map(|c| c.tokens.clone())
        .collect();
    let vocab = tfidf_fit(&corpus, (1, 3), vocab_size)?;
    let source = VectorSource::Embedder(&vocab);
    let task = cfg.task_spec();
    data.clients
        .iter()
        .zip(&data.chunks)
        .map(|(c, ch)| assemble_user(c, ch, &task, cfg.long_input_mode, &source))
        .collect()
}

fn prepare_seed(cfg: &ExperimentConfig, seed: u64, store: Option<&EmbeddingStore>) -> Result<SeedData> {
    let clients = cohort_for_seed(cfg, seed)?;
    let task = cfg.task_spec();
    let chunks: Vec<Vec<TextChunk>> = clients
        .par_iter()
        .map(|c| text_chunks(c, &cfg.sources, task.window, cfg.chunk_size))
        .collect();
    let hash;
    let source = match (&cfg.embedding, store) {
        (EmbeddingConfig::Hash { dim, seed }, _) => {
            hash = HashEmbedder { dim: *dim, seed: *seed };
            Some(VectorSource::Embedder(&hash))
        }
        (EmbeddingConfig::File { .. }, Some(s)) => Some(VectorSource::Store(s)),
        _ => None,
    };
    let users = match source {
        Some(src) => Some(
            clients
                .par_iter()
                .zip(&chunks)
                .map(|(c, ch)| assemble_user(c, ch, &task, cfg.long_input_mode, &src))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    Ok(SeedData {
        seed,
        clients,
        chunks,
        users,
    })
}

/// Text-free periods that text methods skip.
fn skipped_periods(cfg: &ExperimentConfig, data: &SeedData) -> Result<Vec<SkippedPeriod>> {
    if cfg.method == Method::ClNonText {
        return Ok(Vec::new());
    }
    let task = cfg.task_spec();
    let mut out = Vec::new();
    for (client, chunks) in data.clients.iter().zip(&data.chunks) {
        let with_text: BTreeSet<usize> = chunks
            .iter()
            .filter(|c| c.group == ChunkGroup::Pooled)
            .map(|c| c.period)
            .collect();
        for period in 0..task.periods(client) {
            if task.label(client, period)?.is_some() && !with_text.contains(&period) {
                out.push(SkippedPeriod {
                    seed: data.seed,
                    user_id: client.user_id.clone(),
                    period,
                    reason: "no text in the selected sources".into(),
                });
            }
        }
    }
    Ok(out)
}

fn check_context_data(cfg: &ExperimentConfig, data: &SeedData) -> Result<()> {
    if cfg.method == Method::ClNonText {
        return Ok(());
    }
    let keys: BTreeSet<MemberKey> = canonical_members(&cfg.sources).into_iter().collect();
    let any = data.chunks.iter().flatten().any(|c| match c.group {
        ChunkGroup::Member(k) => keys.contains(&k),
        ChunkGroup::Pooled => false,
    });
    if any {
        Ok(())
    } else {
        Err(Error::NoContextData)
    }
}

fn summarize_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    outcomes: &[&FoldOutcome],
) -> SeedSummary {
    let task = cfg.task_spec().kind;
    let preds: Vec<Prediction> = outcomes
        .iter()
        .flat_map(|o| o.record.predictions.iter().cloned())
        .collect();
    let val: Vec<Prediction> = outcomes
        .iter()
        .flat_map(|o| o.record.validation_predictions.iter().cloned())
        .collect();
    let mut member_metrics = BTreeMap::new();
    let mut ensemble_weights = None;
    if cfg.method == Method::FedTherapist {
        for key in canonical_members(&cfg.sources) {
            let name = key.to_string();
            let sub: Vec<Prediction> = preds
                .iter()
                .filter_map(|p| {
                    p.member_scores.get(&name).map(|&s| Prediction {
                        prediction: s,
                        member_scores: BTreeMap::new(),
                        ..p.clone()
                    })
                })
                .collect();
            member_metrics.insert(name, fold_metric(task, &sub));
        }
        let ws: Vec<&Vec<f64>> = outcomes.iter().filter_map(|o| o.ensemble_weights.as_ref()).collect();
        if !ws.is_empty() {
            let mean = mean_columns(&ws.iter().map(|w| w.to_vec()).collect::<Vec<_>>());
            ensemble_weights = Some(
                canonical_members(&cfg.sources)
                    .iter()
                    .map(|k| k.to_string())
                    .zip(mean)
                    .collect(),
            );
        }
    }
    SeedSummary {
        seed,
        metric: fold_metric(task, &preds),
        validation_metric: if val.is_empty() { None } else { fold_metric(task, &val) },
        member_metrics,
        ensemble_weights,
    }
}

/// Runs every seed and fold of the configured experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let store = match &cfg.embedding {
        EmbeddingConfig::File { path } => Some(load_embeddings(path)?),
        _ => None,
    };
    if let Some(s) = &store {
        if s.dim.is_none() {
            return Err(Error::Config("embedding file holds no vectors".into()));
        }
    }
    // one seed at a time keeps memory flat in the number of seeds
    let mut skipped = Vec::new();
    let mut num_users = 0;
    let mut fold_count = None;
    let mut records = Vec::new();
    let mut per_seed = Vec::new();
    for &s in &cfg.seeds {
        let data = prepare_seed(cfg, s, store.as_ref())?;
        check_context_data(cfg, &data)?;
        skipped.extend(skipped_periods(cfg, &data)?);
        let ids: Vec<String> = data.clients.iter().map(|c| c.user_id.clone()).collect();
        num_users = ids.len();
        let folds = cfg.fold_list(&ids)?;
        fold_count.get_or_insert(folds.len());
        let outcomes: Vec<FoldOutcome> = folds
            .par_iter()
            .enumerate()
            .map(|(f, fold)| run_fold(cfg, &data, f, fold, store.as_ref()))
            .collect::<Result<_>>()?;
        let mine: Vec<&FoldOutcome> = outcomes.iter().collect();
        per_seed.push(summarize_seed(cfg, data.seed, &mine));
        records.extend(outcomes.into_iter().map(|o| o.record));
    }
    let defined: Vec<f64> = per_seed.iter().filter_map(|s| s.metric).collect();
    let mut member_summary = BTreeMap::new();
    if let Some(first) = per_seed.first() {
        for name in first.member_metrics.keys() {
            let vals: Vec<f64> = per_seed
                .iter()
                .filter_map(|s| s.member_metrics.get(name).copied().flatten())
                .collect();
            if let Some(ms) = MeanStd::of(&vals) {
                member_summary.insert(name.clone(), ms);
            }
        }
    }
    let fold_count = fold_count.unwrap_or(0);
    Ok(Report {
        method: cfg.method,
        task: cfg.task,
        metric: cfg.task_spec().metric_name().to_string(),
        ensemble_mode: (cfg.method == Method::FedTherapist).then_some(cfg.ensemble_mode),
        seeds: cfg.seeds.clone(),
        num_users,
        fold_count,
        folds: records,
        per_seed,
        summary: MeanStd::of(&defined),
        member_summary,
        skipped,
    })
}

/// Per-user inputs for one seed with hash or file vectors, as the
/// experiment sees them.
pub fn user_data(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<UserData>> {
    let store = match &cfg.embedding {
        EmbeddingConfig::File { path } => Some(load_embeddings(path)?),
        _ => None,
    };
    prepare_seed(cfg, seed, store.as_ref())?
        .users
        .ok_or_else(|| Error::Config("fold-independent vectors need a hash or file embedding".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phq9_threshold() {
        assert_eq!(binarize_phq9(5).unwrap(), 1);
        assert_eq!(binarize_phq9(4).unwrap(), 0);
        assert_eq!(binarize_phq9(0).unwrap(), 0);
        assert_eq!(binarize_phq9(27).unwrap(), 1);
        assert!(binarize_phq9(28).is_err());
        assert!(binarize_phq9(-1).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.0);
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedAuroc)));
        // one tie between classes: pairs (0.5>0.2)=1, (0.5=0.5)=1/2
        assert_eq!(auroc(&[0.5, 0.5, 0.2], &[1, 0, 0]).unwrap(), 0.75);
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[10.0], &[20.0]).unwrap(), 10.0);
        assert!(mae(&[1.0], &[]).is_err());
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("u{i:02}")).collect()
    }

    #[test]
    fn louo_shape() {
        let folds = louo_folds(&ids(2)).unwrap();
        assert_eq!(folds[0].train_users, vec!["u01"]);
        assert_eq!(folds[1].train_users, vec!["u00"]);
        assert!(louo_folds(&ids(1)).is_err());
        let folds = louo_folds(&ids(46)).unwrap();
        assert_eq!(folds.len(), 46);
        assert!(folds.iter().all(|f| f.train_users.len() == 45));
    }

    #[test]
    fn validation_folds_wrap() {
        let folds = louo_with_validation(&ids(46), 5).unwrap();
        let last = &folds[45];
        assert_eq!(last.validation_users, vec!["u00", "u01", "u02", "u03", "u04"]);
        assert_eq!(last.train_users.len(), 40);
        assert!(!last.train_users.contains(&"u45".to_string()));
        assert!(louo_with_validation(&ids(6), 5).is_err());
    }

    #[test]
    fn task_specs() {
        assert_eq!(TaskSpec::new(TaskName::Depression).kind, Task::Classification);
        for name in [TaskName::Stress, TaskName::Anxiety, TaskName::Mood] {
            let t = TaskSpec::new(name);
            assert_eq!((t.kind, t.window), (Task::Regression, Granularity::PerDay));
        }
    }

    #[test]
    fn config_checks() {
        let mut cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        cfg.sources.clear();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("sources"), "{err}");
        cfg.method = Method::ClNonText;
        cfg.validate().unwrap();
        let parsed: ExperimentConfig = serde_json::from_str(r#"{"method":"fl_text","embedding":{"kind":"tfidf"}}"#).unwrap();
        assert_eq!(parsed.embedding, EmbeddingConfig::Tfidf { vocab_size: DEFAULT_DIM });
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"methd":"fl_text"}"#).is_err());
    }

    #[test]
    fn file_embedding_needs_one_cohort() {
        let mut cfg = ExperimentConfig {
            embedding: EmbeddingConfig::File { path: "v.jsonl".into() },
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("reseed_cohort"));
        cfg.seeds = vec![3];
        cfg.validate().unwrap();
        cfg.seeds = vec![3, 4];
        cfg.reseed_cohort = false;
        cfg.validate().unwrap();
    }

    #[test]
    fn standardizer() {
        let z = Standardizer::fit(&[vec![1.0, 5.0], vec![3.0, 5.0]]);
        assert_eq!(z.apply(&[3.0, 5.0]), vec![1.0, 0.0]);
    }

    #[test]
    fn sample_ids() {
        let k = MemberKey::new(Source::Keyboard, crate::context::ContextLabel::TimeNight);
        assert_eq!(sample_id("u1", 0, ChunkGroup::Member(k), 2), "u1:0:keyboard:T_N:2");
        assert_eq!(sample_id("u1", 3, ChunkGroup::Pooled, 0), "u1:3:pooled:0");
    }
}
