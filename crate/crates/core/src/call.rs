//! Context-aware language learning.
//!
//! Text is partitioned by `(source, context label)`; each partition trains
//! its own linear head ("member"), and the ensemble combines member scores
//! either by plain averaging (`E_A`) or by trained weights `W` kept on the
//! probability simplex (`E_E`).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::context::{assign_contexts, detect_home, ContextLabel, Source, UserProfile};
use crate::embed::{chunk_tokens, pool_max, Embedder};
use crate::error::{Error, Result};
use crate::fl::LocalTrainer;
use crate::model::{self, LinearModel, Sample, Task, TrainConfig};
use crate::scalar::{dot, Scalar};
use crate::seed;
use crate::synth::ClientDataset;

/// One ensemble member: a source and one of its context labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MemberKey {
    pub source: Source,
    pub label: ContextLabel,
}

impl MemberKey {
    pub fn new(source: Source, label: ContextLabel) -> Self {
        MemberKey { source, label }
    }
}

impl fmt::Display for MemberKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.source, self.label)
    }
}

/// Members for a set of sources, speech before keyboard, labels in
/// canonical order.
pub fn canonical_members(sources: &BTreeSet<Source>) -> Vec<MemberKey> {
    Source::ALL
        .iter()
        .filter(|s| sources.contains(s))
        .flat_map(|&s| s.labels().iter().map(move |&l| MemberKey::new(s, l)))
        .collect()
}

/// 6 for speech, 8 for keyboard, 14 for both.
pub fn count_members(sources: &BTreeSet<Source>) -> usize {
    canonical_members(sources).len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnsembleMode {
    #[serde(rename = "E_A")]
    Average,
    #[serde(rename = "E_E")]
    Weighted,
}

impl fmt::Display for EnsembleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnsembleMode::Average => "E_A",
            EnsembleMode::Weighted => "E_E",
        })
    }
}

/// How chunked text becomes model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LongInputMode {
    /// Max-pool chunk embeddings into one vector.
    FullPool,
    /// One sample per chunk; predictions average chunk logits.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerDay,
    PerPeriod,
}

/// Chunk embeddings per member for one prediction. A member with no entry
/// (or no chunks) had no text in its context.
pub type MemberInputs<T> = BTreeMap<MemberKey, Vec<Vec<T>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel<T> {
    pub task: Task,
    pub mode: EnsembleMode,
    pub members: Vec<(MemberKey, LinearModel<T>)>,
    /// Trained weights; only consulted in `E_E` mode.
    pub weights: Vec<T>,
}

impl<T: Scalar> EnsembleModel<T> {
    pub fn new(sources: &BTreeSet<Source>, dim: usize, task: Task, mode: EnsembleMode) -> Self {
        let keys = canonical_members(sources);
        let n = keys.len();
        EnsembleModel {
            task,
            mode,
            members: keys
                .into_iter()
                .map(|k| (k, LinearModel::zeros(dim, task)))
                .collect(),
            weights: vec![T::one() / T::of_usize(n.max(1)); n],
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn keys(&self) -> Vec<MemberKey> {
        self.members.iter().map(|(k, _)| *k).collect()
    }

    pub fn member(&self, key: &MemberKey) -> Option<&LinearModel<T>> {
        self.members.iter().find(|(k, _)| k == key).map(|(_, m)| m)
    }

    pub fn dim(&self) -> usize {
        self.members.first().map_or(0, |(_, m)| m.dim())
    }

    /// Weights applied at prediction time.
    pub fn effective_weights(&self) -> Vec<T> {
        match self.mode {
            EnsembleMode::Average => {
                vec![T::one() / T::of_usize(self.members.len()); self.members.len()]
            }
            EnsembleMode::Weighted => self.weights.clone(),
        }
    }

    /// Member scores in canonical order; members without input fall back to
    /// their bias-only score.
    pub fn member_scores(&self, inputs: &MemberInputs<T>) -> Result<Vec<T>> {
        let present = self
            .members
            .iter()
            .any(|(k, _)| inputs.get(k).is_some_and(|c| !c.is_empty()));
        if !present {
            return Err(Error::NoContextData);
        }
        self.members
            .iter()
            .map(|(k, m)| match inputs.get(k) {
                Some(chunks) => m.predict_score_chunks(chunks),
                None => Ok(m.bias_score()),
            })
            .collect()
    }

    pub fn combine(&self, scores: &[T]) -> T {
        dot(&self.effective_weights(), scores)
    }

    pub fn predict(&self, inputs: &MemberInputs<T>) -> Result<T> {
        Ok(self.combine(&self.member_scores(inputs)?))
    }

    pub fn num_params(&self) -> usize {
        self.members.iter().map(|(_, m)| m.num_params()).sum::<usize>() + self.weights.len()
    }

    /// Members in canonical order (weights then bias each), then `W`.
    pub fn to_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, m) in &self.members {
            m.write_params(&mut out);
        }
        out.extend_from_slice(&self.weights);
        out
    }

    pub fn read_params(&mut self, params: &[T]) {
        let mut offset = 0;
        for (_, m) in &mut self.members {
            m.read_params(&params[offset..]);
            offset += m.num_params();
        }
        let n = self.weights.len();
        self.weights.copy_from_slice(&params[offset..offset + n]);
    }
}

/// Free function form of [`EnsembleModel::predict`].
pub fn ensemble_predict<T: Scalar>(ens: &EnsembleModel<T>, inputs: &MemberInputs<T>) -> Result<T> {
    ens.predict(inputs)
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: DeserializeOwned"))]
struct MemberCheckpoint<T> {
    source: Source,
    label: ContextLabel,
    model: LinearModel<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: DeserializeOwned"))]
struct EnsembleCheckpoint<T> {
    task: Task,
    mode: EnsembleMode,
    members: Vec<MemberCheckpoint<T>>,
    weights: Vec<T>,
}

impl<T: Scalar + Serialize> Serialize for EnsembleModel<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        EnsembleCheckpoint {
            task: self.task,
            mode: self.mode,
            members: self
                .members
                .iter()
                .map(|(k, m)| MemberCheckpoint {
                    source: k.source,
                    label: k.label,
                    model: m.clone(),
                })
                .collect(),
            weights: self.weights.clone(),
        }
        .serialize(s)
    }
}

impl<'de, T: Scalar + DeserializeOwned> Deserialize<'de> for EnsembleModel<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let ck = EnsembleCheckpoint::<T>::deserialize(d)?;
        if ck.weights.len() != ck.members.len() {
            return Err(serde::de::Error::custom("weights and members differ in length"));
        }
        Ok(EnsembleModel {
            task: ck.task,
            mode: ck.mode,
            members: ck
                .members
                .into_iter()
                .map(|m| (MemberKey::new(m.source, m.label), m.model))
                .collect(),
            weights: ck.weights,
        })
    }
}

/// Euclidean projection onto `{w : w_i ≥ 0, Σ w_i = 1}`.
pub fn project_simplex<T: Scalar>(v: &[T]) -> Vec<T> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cumulative = T::zero();
    let mut theta = T::zero();
    for (i, &u) in sorted.iter().enumerate() {
        cumulative = cumulative + u;
        let t = (cumulative - T::one()) / T::of_usize(i + 1);
        if u - t > T::zero() {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(T::zero())).collect()
}

/// Loss of a combined score against a raw label.
pub fn ensemble_loss<T: Scalar>(task: Task, combined: T, y: T) -> T {
    match task {
        Task::Classification => {
            let eps = T::of(1e-12);
            let c = combined.max(eps).min(T::one() - eps);
            -(y * c.ln() + (T::one() - y) * (T::one() - c).ln())
        }
        Task::Regression => {
            let t = y / T::of(model::LABEL_SCALE);
            (combined - t) * (combined - t)
        }
    }
}

fn ensemble_loss_slope<T: Scalar>(task: Task, combined: T, y: T) -> T {
    match task {
        Task::Classification => {
            let eps = T::of(1e-12);
            let c = combined.max(eps).min(T::one() - eps);
            (c - y) / (c * (T::one() - c))
        }
        Task::Regression => (combined - y / T::of(model::LABEL_SCALE)) * T::of(2.0),
    }
}

/// SGD on the ensemble loss over fixed member-score vectors, projecting
/// `W` back onto the simplex after every step.
pub fn train_ensemble_weights<T: Scalar>(
    weights: &[T],
    scores: &[Vec<T>],
    labels: &[T],
    task: Task,
    cfg: &TrainConfig,
) -> Vec<T> {
    let mut w = weights.to_vec();
    if scores.is_empty() {
        return w;
    }
    let lr = T::of(cfg.learning_rate);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(seed::derive(&[cfg.rng_seed, epoch as u64, 0xE5])));
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut g = vec![T::zero(); w.len()];
            for &i in batch {
                let slope = ensemble_loss_slope(task, dot(&w, &scores[i]), labels[i]);
                for (gj, &s) in g.iter_mut().zip(&scores[i]) {
                    *gj = *gj + slope * s;
                }
            }
            let n = T::of_usize(batch.len());
            for (wj, gj) in w.iter_mut().zip(&g) {
                *wj = *wj - lr * *gj / n;
            }
            w = project_simplex(&w);
        }
    }
    w
}

/// One `(user, period)` worth of model input.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodInputs<T> {
    pub user_id: String,
    pub period: usize,
    pub label: T,
    pub inputs: MemberInputs<T>,
}

/// A single training example for one member.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSample<T> {
    pub member: MemberKey,
    pub x: Vec<T>,
    pub label: T,
    pub user_id: String,
    pub period: usize,
}

/// The user's profile with a home location filled in from the event
/// trace when it is missing.
pub fn resolve_profile(client: &ClientDataset) -> UserProfile {
    let mut profile = client.profile.clone();
    if profile.home_center.is_none() {
        let fixes: Vec<_> = client.events.iter().map(|e| e.geo).collect();
        profile.home_center = detect_home(&fixes, profile.home_radius_m).ok();
    }
    profile
}

/// Period index of an event, or `None` when it falls outside the window.
pub fn period_of(client: &ClientDataset, timestamp: i64, granularity: Granularity) -> Option<usize> {
    let day = client.day_of(timestamp);
    if day < 0 || day >= client.days as i64 {
        return None;
    }
    Some(match granularity {
        Granularity::PerDay => day as usize,
        Granularity::PerPeriod => 0,
    })
}

/// Tokens per `(period, member)`, concatenated in timestamp order. Each
/// event feeds every member whose label it carries.
pub fn context_texts(
    client: &ClientDataset,
    profile: &UserProfile,
    sources: &BTreeSet<Source>,
    granularity: Granularity,
) -> BTreeMap<(usize, MemberKey), Vec<String>> {
    let mut groups: BTreeMap<(usize, MemberKey), Vec<String>> = BTreeMap::new();
    let mut events: Vec<_> = client.events.iter().filter(|e| sources.contains(&e.source)).collect();
    events.sort_by_key(|e| e.timestamp);
    for e in events {
        let Some(period) = period_of(client, e.timestamp, granularity) else {
            continue;
        };
        for label in assign_contexts(e, profile) {
            groups
                .entry((period, MemberKey::new(e.source, label)))
                .or_default()
                .extend(e.tokens.iter().cloned());
        }
    }
    groups
}

/// Embeds one text group according to the long-input mode.
pub fn embed_group<T: Scalar, E: Embedder<T> + ?Sized>(
    tokens: &[String],
    embedder: &E,
    mode: LongInputMode,
    chunk_size: usize,
) -> Vec<Vec<T>> {
    let chunks: Vec<Vec<T>> = chunk_tokens(tokens, chunk_size)
        .iter()
        .map(|c| embedder.embed(c))
        .collect();
    match mode {
        LongInputMode::Single => chunks,
        LongInputMode::FullPool => pool_max(&chunks).map(|v| vec![v]).unwrap_or_default(),
    }
}

/// Per-period member inputs for one client. Periods for which `label_of`
/// returns `None`, or that have no text, are skipped.
#[allow(clippy::too_many_arguments)]
pub fn build_period_inputs<T, E, F>(
    client: &ClientDataset,
    sources: &BTreeSet<Source>,
    granularity: Granularity,
    mode: LongInputMode,
    chunk_size: usize,
    embedder: &E,
    label_of: F,
) -> Vec<PeriodInputs<T>>
where
    T: Scalar,
    E: Embedder<T> + ?Sized,
    F: Fn(usize) -> Option<T>,
{
    let profile = resolve_profile(client);
    let mut by_period: BTreeMap<usize, MemberInputs<T>> = BTreeMap::new();
    for ((period, key), tokens) in context_texts(client, &profile, sources, granularity) {
        let vectors = embed_group(&tokens, embedder, mode, chunk_size);
        if !vectors.is_empty() {
            by_period.entry(period).or_default().insert(key, vectors);
        }
    }
    by_period
        .into_iter()
        .filter_map(|(period, inputs)| {
            label_of(period).map(|label| PeriodInputs {
                user_id: client.user_id.clone(),
                period,
                label,
                inputs,
            })
        })
        .collect()
}

/// Flattens period inputs into per-member training samples.
pub fn to_context_samples<T: Scalar>(periods: &[PeriodInputs<T>]) -> Vec<ContextSample<T>> {
    let mut out = Vec::new();
    for p in periods {
        for (key, vectors) in &p.inputs {
            for x in vectors {
                out.push(ContextSample {
                    member: *key,
                    x: x.clone(),
                    label: p.label,
                    user_id: p.user_id.clone(),
                    period: p.period,
                });
            }
        }
    }
    out
}

/// Context samples for one client.
#[allow(clippy::too_many_arguments)]
pub fn build_context_datasets<T, E, F>(
    client: &ClientDataset,
    sources: &BTreeSet<Source>,
    granularity: Granularity,
    mode: LongInputMode,
    chunk_size: usize,
    embedder: &E,
    label_of: F,
) -> Vec<ContextSample<T>>
where
    T: Scalar,
    E: Embedder<T> + ?Sized,
    F: Fn(usize) -> Option<T>,
{
    to_context_samples(&build_period_inputs(
        client, sources, granularity, mode, chunk_size, embedder, label_of,
    ))
}

/// Training data for one client, laid out against a fixed member order.
#[derive(Debug, Clone, PartialEq)]
pub struct CallClient<T> {
    /// Samples per member, aligned with the ensemble's member order.
    pub member_samples: Vec<Vec<Sample<T>>>,
    /// Per-period member inputs for the ensemble-weight phase.
    pub periods: Vec<PeriodInputs<T>>,
}

impl<T: Scalar> CallClient<T> {
    pub fn new(keys: &[MemberKey], periods: Vec<PeriodInputs<T>>) -> Self {
        let mut member_samples = vec![Vec::new(); keys.len()];
        for p in &periods {
            for (j, key) in keys.iter().enumerate() {
                if let Some(vectors) = p.inputs.get(key) {
                    member_samples[j].extend(vectors.iter().map(|x| Sample::new(x.clone(), p.label)));
                }
            }
        }
        CallClient { member_samples, periods }
    }

    pub fn num_samples(&self) -> usize {
        self.member_samples.iter().map(Vec::len).sum()
    }
}

/// Local CALL training: every member runs `cfg.epochs` epochs of SGD on its
/// own samples; in `E_E` mode the weights then take `cfg.epochs` passes over
/// this client's member-score vectors with the members held fixed.
pub fn train_call_local<T: Scalar>(
    ens: &EnsembleModel<T>,
    client: &CallClient<T>,
    cfg: &TrainConfig,
) -> EnsembleModel<T> {
    let mut next = ens.clone();
    if cfg.epochs == 0 {
        return next;
    }
    for ((_, m), samples) in next.members.iter_mut().zip(&client.member_samples) {
        if !samples.is_empty() {
            *m = model::train(m, samples, cfg);
        }
    }
    if next.mode == EnsembleMode::Weighted {
        let mut scores = Vec::with_capacity(client.periods.len());
        let mut labels = Vec::with_capacity(client.periods.len());
        for p in &client.periods {
            if let Ok(s) = next.member_scores(&p.inputs) {
                scores.push(s);
                labels.push(p.label);
            }
        }
        next.weights = train_ensemble_weights(&next.weights, &scores, &labels, next.task, cfg);
    }
    next
}

/// FedAvg adapter for ensembles.
#[derive(Debug, Clone)]
pub struct CallTrainer<T> {
    pub template: EnsembleModel<T>,
}

impl<T: Scalar> LocalTrainer<T> for CallTrainer<T> {
    type Client = CallClient<T>;

    fn sample_count(&self, client: &Self::Client) -> usize {
        client.num_samples()
    }

    fn train_local(&self, params: &[T], client: &Self::Client, epochs: usize, cfg: &TrainConfig) -> Vec<T> {
        let mut ens = self.template.clone();
        ens.read_params(params);
        let cfg = TrainConfig { epochs, ..cfg.clone() };
        train_call_local(&ens, client, &cfg).to_params()
    }
}
