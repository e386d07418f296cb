//! Multiresolution training.
//!
//! A pipeline run trains a full-rank model through a sequence of increasingly
//! fine resolutions, copying each coarse weight into every child cell between
//! stages. The last full-rank tensor is CP-decomposed to initialise a low-rank
//! model, which continues through its own schedule with the court and
//! defender factor rows copied the same way. The decision threshold is tuned
//! on the validation split and the final model is scored on the test split.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discretizer::{
    court_cell, defender_cells, extend_cell, finegrain_map, pool_cells, CourtGeometry,
    DefenderGridSpec, FinegrainMap, GridRes, ResolutionPair,
};
use crate::error::{Error, Result};
use crate::ingest::{DatasetSplit, LabeledSample, PlayerMap};
use crate::model::{
    bce, mean_loss, probabilities, temporal_prox, ContextKind, FullRankModel,
    LowRankModel, Model, ModelLayout, PipelineVariant, SampleEncoding, Variant, PROB_EPS,
};
use crate::tensor_ops::{cp_als, AlsOptions, CpFactors, DenseTensor, Matrix};

/// Temporal penalty weight used by `dynamic_quarter` when none is configured.
pub const DEFAULT_DYNAMIC_LAMBDA: f64 = 0.0002;

/// Quarters per game.
pub const QUARTERS: usize = 4;

/// Index of fine context `t` (out of `fine`) on a grid of `coarse` contexts.
pub fn coarse_context(t: usize, fine: usize, coarse: usize) -> usize {
    (2 * t + 1) * coarse / (2 * fine)
}

/// The resolution and context count one stage trains at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub pair: ResolutionPair,
    pub contexts: usize,
}

impl Stage {
    pub fn layout(&self, variant: Variant, players: usize) -> Result<ModelLayout> {
        let contexts = if variant == Variant::Base { 1 } else { self.contexts };
        ModelLayout::new(variant, players, contexts, self.pair.court, self.pair.defender)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.contexts > 1 {
            write!(f, "{}/t{}", self.pair, self.contexts)
        } else {
            write!(f, "{}", self.pair)
        }
    }
}

/// Turns labeled samples into model encodings at any stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub geometry: CourtGeometry,
    /// Grid at the finest defender resolution in use. Coarser stages pool its
    /// cells onto their parents.
    pub defender_grid: DefenderGridSpec,
    pub variant: Variant,
    /// Number of distinct sample contexts. Base models ignore the context.
    pub contexts: usize,
}

impl Encoder {
    fn pooling(&self, stage: &Stage) -> Result<Option<FinegrainMap>> {
        let fine = self.defender_grid.resolution;
        if stage.pair.defender == fine {
            return Ok(None);
        }
        finegrain_map(stage.pair.defender, fine).map(Some)
    }

    fn encode_with(
        &self,
        s: &LabeledSample,
        stage: &Stage,
        pooling: Option<&FinegrainMap>,
    ) -> Result<SampleEncoding> {
        let f = s.context as usize;
        if self.variant != Variant::Base && f >= self.contexts {
            return Err(Error::OutOfRange(format!(
                "sample context {f} outside [0, {})",
                self.contexts
            )));
        }
        let cell = court_cell(s.bh_pos, &self.geometry, stage.pair.court)?;
        let (context, court) = match self.variant {
            Variant::Base => (0, cell),
            Variant::St => (coarse_context(f, self.contexts, stage.contexts), cell),
            Variant::Dynamic => (f, extend_cell(cell, f, stage.pair.court, self.contexts)?),
        };
        let fine = defender_cells(s.bh_pos, s.basket_pos, &s.defenders, &self.defender_grid)?;
        let defenders = match pooling {
            Some(map) => pool_cells(&fine, map),
            None => fine,
        };
        Ok(SampleEncoding {
            player: s.player,
            context: context as u32,
            court: court as u32,
            defenders: defenders.into_iter().map(|d| d as u32).collect(),
            label: s.label,
        })
    }

    pub fn encode(&self, s: &LabeledSample, stage: &Stage) -> Result<SampleEncoding> {
        let pooling = self.pooling(stage)?;
        self.encode_with(s, stage, pooling.as_ref())
    }

    pub fn encode_all(&self, samples: &[LabeledSample], stage: &Stage) -> Result<Vec<SampleEncoding>> {
        if self.variant == Variant::Dynamic && stage.contexts != self.contexts {
            return Err(Error::Shape(format!(
                "dynamic stages use all {} contexts, got {}",
                self.contexts, stage.contexts
            )));
        }
        let pooling = self.pooling(stage)?;
        samples
            .par_iter()
            .map(|s| self.encode_with(s, stage, pooling.as_ref()))
            .collect()
    }
}

/// Resolutions visited by the full-rank and low-rank stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResolutionSchedule {
    pub full_rank: Vec<ResolutionPair>,
    pub low_rank: Vec<ResolutionPair>,
    /// Context counts of the leading full-rank stages of ST models; every
    /// later stage uses all contexts.
    pub context_schedule: Vec<usize>,
}

impl Default for ResolutionSchedule {
    fn default() -> Self {
        let pair = |c: (usize, usize), d: (usize, usize)| ResolutionPair {
            court: GridRes::new(c.0, c.1),
            defender: GridRes::new(d.0, d.1),
        };
        Self {
            full_rank: vec![pair((4, 5), (6, 6)), pair((8, 10), (6, 6)), pair((8, 10), (12, 12))],
            low_rank: vec![pair((8, 10), (12, 12)), pair((20, 25), (12, 12)), pair((40, 50), (12, 12))],
            context_schedule: vec![1],
        }
    }
}

impl ResolutionSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.full_rank.is_empty() || self.low_rank.is_empty() {
            return Err(Error::invalid("resolution schedules must be non-empty"));
        }
        if self.full_rank.last() != self.low_rank.first() {
            return Err(Error::invalid(format!(
                "the last full-rank resolution {} must equal the first low-rank resolution {}",
                self.full_rank.last().unwrap(),
                self.low_rank[0]
            )));
        }
        let all: Vec<&ResolutionPair> = self.full_rank.iter().chain(&self.low_rank[1..]).collect();
        for w in all.windows(2) {
            finegrain_map(w[0].court, w[1].court)?;
            finegrain_map(w[0].defender, w[1].defender)?;
        }
        let finest = self.finest_defender();
        for p in &all {
            finegrain_map(p.defender, finest)?;
        }
        if self.context_schedule.contains(&0) {
            return Err(Error::invalid("context counts must be positive"));
        }
        if self.context_schedule.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("context schedule must be non-decreasing"));
        }
        Ok(())
    }

    /// The finest defender grid visited by either stage.
    pub fn finest_defender(&self) -> GridRes {
        self.full_rank
            .iter()
            .chain(&self.low_rank)
            .map(|p| p.defender)
            .max_by_key(|r| r.cells())
            .expect("validated schedules are non-empty")
    }

    pub fn full_rank_stages(&self, variant: Variant, contexts: usize) -> Vec<Stage> {
        self.full_rank
            .iter()
            .enumerate()
            .map(|(k, &pair)| {
                let contexts = match variant {
                    Variant::Base => 1,
                    Variant::Dynamic => contexts,
                    Variant::St => self
                        .context_schedule
                        .get(k)
                        .map_or(contexts, |&c| c.min(contexts)),
                };
                Stage { pair, contexts }
            })
            .collect()
    }

    pub fn low_rank_stages(&self, variant: Variant, contexts: usize) -> Vec<Stage> {
        let contexts = if variant == Variant::Base { 1 } else { contexts };
        self.low_rank
            .iter()
            .map(|&pair| Stage { pair, contexts })
            .collect()
    }
}

/// How the decision threshold is chosen. Serialized as `"tuned"` or a number.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ThresholdRepr", into = "ThresholdRepr")]
pub enum ThresholdPolicy {
    /// Grid search on the validation split.
    Tuned,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ThresholdRepr {
    Fixed(f64),
    Named(String),
}

impl TryFrom<ThresholdRepr> for ThresholdPolicy {
    type Error = String;

    fn try_from(r: ThresholdRepr) -> std::result::Result<Self, String> {
        match r {
            ThresholdRepr::Fixed(t) if t > 0.0 && t < 1.0 => Ok(ThresholdPolicy::Fixed(t)),
            ThresholdRepr::Fixed(t) => Err(format!("threshold {t} outside (0, 1)")),
            ThresholdRepr::Named(s) if s == "tuned" => Ok(ThresholdPolicy::Tuned),
            ThresholdRepr::Named(s) => Err(format!("unknown threshold policy `{s}`")),
        }
    }
}

impl From<ThresholdPolicy> for ThresholdRepr {
    fn from(p: ThresholdPolicy) -> Self {
        match p {
            ThresholdPolicy::Tuned => ThresholdRepr::Named("tuned".into()),
            ThresholdPolicy::Fixed(t) => ThresholdRepr::Fixed(t),
        }
    }
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Initial step size of the full-rank stages.
    pub learning_rate: f64,
    /// Initial step size of the low-rank stages.
    pub low_rank_learning_rate: f64,
    pub lr_decay: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub rank: usize,
    /// Temporal penalty weight; `None` picks the variant default.
    pub lambda: Option<f64>,
    pub seed: u64,
    /// Fraction of negative samples kept in each epoch.
    pub negative_keep: f64,
    pub threshold: ThresholdPolicy,
    pub als_max_iters: usize,
    pub schedule: ResolutionSchedule,
    pub geometry: CourtGeometry,
    /// (frontal, lateral) span of the defender grid in feet.
    pub defender_extent_ft: (f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            learning_rate: 1.0,
            low_rank_learning_rate: 0.5,
            lr_decay: 0.5,
            patience: 1,
            batch_size: 64,
            rank: 10,
            lambda: None,
            seed: 0,
            negative_keep: 1.0,
            threshold: ThresholdPolicy::Tuned,
            als_max_iters: 500,
            schedule: ResolutionSchedule::default(),
            geometry: CourtGeometry::default(),
            defender_extent_ft: (24.0, 24.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.learning_rate) || !positive(self.low_rank_learning_rate) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid(format!("lr_decay {} outside (0, 1]", self.lr_decay)));
        }
        if self.patience == 0 || self.batch_size == 0 || self.rank == 0 {
            return Err(Error::invalid("patience, batch_size and rank must be positive"));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::invalid(format!("lambda {l} must be non-negative")));
            }
        }
        if !(self.negative_keep > 0.0 && self.negative_keep <= 1.0) {
            return Err(Error::invalid(format!(
                "negative_keep {} outside (0, 1]",
                self.negative_keep
            )));
        }
        self.geometry.validate()?;
        self.schedule.validate()?;
        self.defender_grid().validate()
    }

    /// Penalty weight for `variant`. Only dynamic models carry the penalty.
    pub fn lambda_for(&self, variant: PipelineVariant) -> Result<f64> {
        match (self.lambda, variant.structure()) {
            (None, _) if variant == PipelineVariant::DynamicQuarter => Ok(DEFAULT_DYNAMIC_LAMBDA),
            (None, _) => Ok(0.0),
            (Some(l), Variant::Dynamic) => Ok(l),
            (Some(0.0), _) => Ok(0.0),
            (Some(l), _) => Err(Error::invalid(format!(
                "lambda {l} given for {variant}, which has no temporal penalty"
            ))),
        }
    }

    pub fn defender_grid(&self) -> DefenderGridSpec {
        DefenderGridSpec::with_extent(self.schedule.finest_defender(), self.defender_extent_ft)
    }
}

/// Classification quality at one threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Mean cross-entropy of the scored samples.
    pub val_loss: f64,
    pub threshold: f64,
}

/// F1, precision and recall of `scores >= threshold` against `labels`.
pub fn metrics_from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Metrics> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty sample set"));
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    let mut loss = 0.0;
    for (&p, &y) in scores.iter().zip(labels) {
        let pred = p >= threshold;
        match (pred, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
        let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        loss -= if y == 1 { pc.ln() } else { (1.0 - pc).ln() };
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Metrics {
        f1: ratio(2 * tp, 2 * tp + fp + fneg),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
        val_loss: loss / scores.len() as f64,
        threshold,
    })
}

/// The candidate thresholds 0.05, 0.10, ..., 0.95.
pub fn threshold_grid() -> impl Iterator<Item = f64> {
    (1..20).map(|k| k as f64 / 20.0)
}

/// Grid threshold with the highest F1; ties go to the lowest threshold.
pub fn tune_threshold_scores(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let mut best = (f64::NEG_INFINITY, 0.05);
    for t in threshold_grid() {
        let f1 = metrics_from_scores(scores, labels, t)?.f1;
        if f1 > best.0 {
            best = (f1, t);
        }
    }
    Ok(best.1)
}

pub fn evaluate(model: &Model, samples: &[SampleEncoding], threshold: f64) -> Result<Metrics> {
    let scores = probabilities(model, samples)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    metrics_from_scores(&scores, &labels, threshold)
}

pub fn tune_threshold(model: &Model, validation: &[SampleEncoding]) -> Result<f64> {
    let scores = probabilities(model, validation)?;
    let labels: Vec<u8> = validation.iter().map(|s| s.label).collect();
    tune_threshold_scores(&scores, &labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    FullRank,
    LowRank,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::FullRank => "full_rank",
            StageKind::LowRank => "low_rank",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub kind: StageKind,
    pub stage: Stage,
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept; 0 means none improved on the start.
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub kind: StageKind,
    pub stage: Stage,
    pub seconds: f64,
}

/// Everything a pipeline run reports. Wall-clock timings are kept out of the
/// serialized form so that reports of identical runs are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: PipelineVariant,
    pub stages: Vec<StageLog>,
    /// Relative reconstruction error of the CP handoff.
    pub handoff_error: f64,
    pub threshold: f64,
    pub validation: Metrics,
    pub test: Metrics,
    #[serde(skip)]
    pub timings: Vec<StageTiming>,
}

impl TrainReport {
    /// Epoch log as CSV with columns
    /// `stage,resolution,epoch,train_loss,val_loss,lr`.
    pub fn write_metrics_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["stage", "resolution", "epoch", "train_loss", "val_loss", "lr"])?;
        for s in &self.stages {
            for e in &s.epochs {
                w.write_record([
                    s.kind.as_str().to_string(),
                    s.stage.to_string(),
                    e.epoch.to_string(),
                    e.train_loss.to_string(),
                    e.val_loss.to_string(),
                    e.lr.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<metrics csv>", e))
    }
}

/// Player to playstyle-cluster assignment, keyed by raw player id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Playstyles {
    pub clusters: usize,
    pub by_player: BTreeMap<i64, u32>,
}

/// Number of contexts of `variant` and each sample's context index.
pub fn assign_contexts(
    samples: &[LabeledSample],
    variant: PipelineVariant,
    players: &PlayerMap,
    playstyles: Option<&Playstyles>,
) -> Result<(usize, Vec<u32>)> {
    match variant.context_kind() {
        None => Ok((1, vec![0; samples.len()])),
        Some(ContextKind::Quarter) => {
            let ctx = samples
                .iter()
                .map(|s| {
                    if (1..=QUARTERS as u8).contains(&s.quarter) {
                        Ok(u32::from(s.quarter - 1))
                    } else {
                        Err(Error::invalid(format!("quarter {} outside 1..=4", s.quarter)))
                    }
                })
                .collect::<Result<_>>()?;
            Ok((QUARTERS, ctx))
        }
        Some(ContextKind::Playstyle) => {
            let ps = playstyles.ok_or_else(|| {
                Error::invalid(format!("variant {variant} needs a playstyle assignment"))
            })?;
            if ps.clusters == 0 {
                return Err(Error::invalid("playstyle assignment has no clusters"));
            }
            if let Some((p, c)) = ps.by_player.iter().find(|(_, &c)| c as usize >= ps.clusters) {
                return Err(Error::invalid(format!(
                    "player {p} assigned to cluster {c}, but only {} clusters exist",
                    ps.clusters
                )));
            }
            let mut missing = Vec::new();
            let mut ctx = Vec::with_capacity(samples.len());
            for s in samples {
                let raw = players
                    .raw(s.player)
                    .ok_or_else(|| Error::OutOfRange(format!("dense player {}", s.player)))?;
                match ps.by_player.get(&raw) {
                    Some(&c) => ctx.push(c),
                    None => {
                        missing.push(raw);
                        ctx.push(0);
                    }
                }
            }
            if !missing.is_empty() {
                missing.sort_unstable();
                missing.dedup();
                return Err(Error::invalid(format!(
                    "players without a playstyle cluster: {missing:?}"
                )));
            }
            Ok((ps.clusters, ctx))
        }
    }
}

fn with_contexts(samples: &[LabeledSample], ctx: &[u32]) -> Vec<LabeledSample> {
    samples
        .iter()
        .zip(ctx)
        .map(|(s, &c)| LabeledSample {
            context: c,
            ..s.clone()
        })
        .collect()
}

/// Parent index along each model axis when moving from `from` to `to`.
struct AxisMaps {
    context: Vec<usize>,
    court: Vec<usize>,
    defender: Vec<usize>,
}

fn axis_maps(from: &ModelLayout, to: &ModelLayout) -> Result<AxisMaps> {
    if from.variant != to.variant || from.players != to.players {
        return Err(Error::Shape(format!(
            "cannot finegrain a {:?} model of {} players into a {:?} model of {}",
            from.variant, from.players, to.variant, to.players
        )));
    }
    let context = match to.variant {
        Variant::St if to.contexts >= from.contexts => (0..to.contexts)
            .map(|t| coarse_context(t, to.contexts, from.contexts))
            .collect(),
        Variant::St => {
            return Err(Error::Shape(format!(
                "cannot finegrain {} contexts into {}",
                from.contexts, to.contexts
            )))
        }
        _ if from.contexts == to.contexts => vec![0],
        _ => return Err(Error::Shape("context count changed for a non-ST model".into())),
    };
    let mut court_map = finegrain_map(from.court, to.court)?;
    if to.variant == Variant::Dynamic {
        court_map = court_map.repeated(to.contexts);
    }
    Ok(AxisMaps {
        context,
        court: court_map.parent,
        defender: finegrain_map(from.defender, to.defender)?.parent,
    })
}

/// Copies every coarse weight into each of its children.
pub fn finegrain_full(model: &FullRankModel, to: ModelLayout) -> Result<FullRankModel> {
    let maps = axis_maps(&model.layout, &to)?;
    let from = &model.layout;
    let (tc, xc, dc) = (from.context_axis(), from.court_axis(), from.defender.cells());
    let (tf, xf, df) = (to.context_axis(), to.court_axis(), to.defender.cells());
    let old = model.weights.values();
    let mut values = Vec::with_capacity(to.players * tf * xf * df);
    for i in 0..to.players {
        for t in 0..tf {
            let pt = if to.variant == Variant::St { maps.context[t] } else { 0 };
            for x in 0..xf {
                let base = ((i * tc + pt) * xc + maps.court[x]) * dc;
                values.extend(maps.defender.iter().map(|&pd| old[base + pd]));
            }
        }
    }
    Ok(FullRankModel {
        layout: to,
        weights: DenseTensor::from_vec(&to.full_shape(), values)?,
        bias: model.bias,
    })
}

fn copy_rows(m: &Matrix, parent: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(parent.len(), m.cols);
    for (r, &p) in parent.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(p));
    }
    out
}

/// Copies court, defender and context factor rows into their children.
pub fn finegrain_low(model: &LowRankModel, to: ModelLayout) -> Result<LowRankModel> {
    let maps = axis_maps(&model.layout, &to)?;
    let mut factors = vec![model.a().clone()];
    if let Some(b) = model.b() {
        factors.push(copy_rows(b, &maps.context));
    }
    factors.push(copy_rows(model.c(), &maps.court));
    factors.push(copy_rows(model.d(), &maps.defender));
    LowRankModel::new(to, CpFactors::new(factors)?, model.bias)
}

/// Rescales each component so all its factor columns share one norm. The
/// reconstructed tensor is unchanged.
pub fn balance_factors(factors: &mut CpFactors) {
    let modes = factors.factors.len() as f64;
    for k in 0..factors.rank {
        let norms: Vec<f64> = factors
            .factors
            .iter()
            .map(|f| (0..f.rows).map(|r| f.get(r, k).powi(2)).sum::<f64>().sqrt())
            .collect();
        if norms.contains(&0.0) {
            continue;
        }
        let g = norms.iter().map(|n| n.ln()).sum::<f64>() / modes;
        for (f, n) in factors.factors.iter_mut().zip(&norms) {
            let s = (g - n.ln()).exp();
            for r in 0..f.rows {
                let v = f.get(r, k);
                f.set(r, k, v * s);
            }
        }
    }
}

/// Settings shared by every stage of a run.
struct StageContext<'a> {
    config: &'a TrainConfig,
    lambda: f64,
}

fn epoch_order(rng: &mut ChaCha8Rng, train: &[SampleEncoding], keep: f64) -> Vec<usize> {
    let mut order: Vec<usize> = if keep < 1.0 {
        (0..train.len())
            .filter(|&i| train[i].label == 1 || rng.random::<f64>() < keep)
            .collect()
    } else {
        (0..train.len()).collect()
    };
    order.shuffle(rng);
    order
}

/// One pass of minibatch SGD; returns the mean pre-update training loss.
fn sgd_epoch(model: &mut Model, train: &[SampleEncoding], order: &[usize], batch: usize, lr: f64) -> f64 {
    let mut loss = 0.0;
    match model {
        Model::Full(m) => {
            let mut updates: Vec<(usize, f64)> = Vec::new();
            for chunk in order.chunks(batch) {
                let n = chunk.len() as f64;
                updates.clear();
                let mut db = 0.0;
                for &i in chunk {
                    let enc = &train[i];
                    let (l, dz) = bce(m.logit_unchecked(enc), enc.label);
                    loss += l;
                    let g = dz / n;
                    db += g;
                    m.for_each_touched(enc, |off| updates.push((off, g)));
                }
                let w = m.weights.values_mut();
                for &(off, g) in &updates {
                    w[off] -= lr * g;
                }
                m.bias -= lr * db;
            }
        }
        Model::LowRank(m) => {
            let mut grads: Vec<Matrix> = m
                .factors
                .factors
                .iter()
                .map(|f| Matrix::zeros(f.rows, f.cols))
                .collect();
            for chunk in order.chunks(batch) {
                let n = chunk.len() as f64;
                for g in grads.iter_mut() {
                    g.data.fill(0.0);
                }
                let mut db = 0.0;
                for &i in chunk {
                    let enc = &train[i];
                    let (l, dz) = bce(m.logit_unchecked(enc), enc.label);
                    loss += l;
                    let g = dz / n;
                    db += g;
                    m.add_sample_grad(enc, g, &mut grads);
                }
                for (f, g) in m.factors.factors.iter_mut().zip(&grads) {
                    for (v, d) in f.data.iter_mut().zip(&g.data) {
                        *v -= lr * d;
                    }
                }
                m.bias -= lr * db;
            }
        }
    }
    loss / order.len().max(1) as f64
}

/// Applies the temporal penalty accumulated over `steps` SGD steps as one
/// proximal step.
fn penalty_prox(model: &mut Model, lambda: f64, lr: f64, steps: usize) -> Result<()> {
    let layout = *model.layout();
    if layout.variant != Variant::Dynamic || lambda == 0.0 || steps == 0 {
        return Ok(());
    }
    let step = lr * lambda * steps as f64;
    match model {
        Model::Full(m) => {
            let shape = m.weights.shape().to_vec();
            temporal_prox(m.weights.values_mut(), &shape, 1, layout.contexts, step)
        }
        Model::LowRank(m) => {
            let cm = m.c_mode();
            let c = &mut m.factors.factors[cm];
            let shape = [c.rows, c.cols];
            temporal_prox(&mut c.data, &shape, 0, layout.contexts, step)
        }
    }
}

fn run_stage(
    model: &mut Model,
    kind: StageKind,
    stage: Stage,
    train: &[SampleEncoding],
    val: &[SampleEncoding],
    lr0: f64,
    ctx: &StageContext<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<StageLog> {
    let cfg = ctx.config;
    let label = format!("{} {}", kind.as_str(), stage);
    let initial = mean_loss(model, val)?;
    let mut log = StageLog {
        kind,
        stage,
        initial_val_loss: initial,
        epochs: Vec::new(),
        best_epoch: 0,
    };
    if !initial.is_finite() {
        return Err(Error::Diverged {
            stage: label,
            epoch: 0,
            loss: initial,
        });
    }
    let mut best = (initial, model.clone());
    let mut prev = initial;
    let mut increases = 0;
    let mut lr = lr0;
    for epoch in 1..=cfg.max_epochs {
        let order = epoch_order(rng, train, cfg.negative_keep);
        let train_loss = sgd_epoch(model, train, &order, cfg.batch_size, lr);
        penalty_prox(model, ctx.lambda, lr, order.len().div_ceil(cfg.batch_size))?;
        let val_loss = if model.is_finite() { mean_loss(model, val)? } else { f64::NAN };
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        if !(train_loss.is_finite() && val_loss.is_finite()) {
            return Err(Error::Diverged {
                stage: label,
                epoch,
                loss: if train_loss.is_finite() { val_loss } else { train_loss },
            });
        }
        if val_loss < best.0 {
            best = (val_loss, model.clone());
            log.best_epoch = epoch;
        } else {
            lr *= cfg.lr_decay;
        }
        increases = if val_loss > prev { increases + 1 } else { 0 };
        prev = val_loss;
        if increases >= cfg.patience {
            break;
        }
    }
    *model = best.1;
    Ok(log)
}

/// Initial bias: the log-odds of the training positive rate.
pub fn prior_bias(samples: &[LabeledSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let pos = samples.iter().filter(|s| s.label == 1).count() as f64;
    let rate = (pos / samples.len() as f64).clamp(1e-6, 1.0 - 1e-6);
    (rate / (1.0 - rate)).ln()
}

/// Everything needed to reproduce encodings for a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub variant: PipelineVariant,
    pub model: LowRankModel,
    pub encoder: Encoder,
    pub players: PlayerMap,
    pub playstyles: Option<Playstyles>,
    pub threshold: f64,
    pub fingerprint: String,
}

pub const MODEL_FORMAT: &str = "courtgrid-model/1";

impl ModelFile {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text)?;
        if file.format != MODEL_FORMAT {
            return Err(Error::invalid(format!(
                "{}: unsupported model format `{}`",
                path.display(),
                file.format
            )));
        }
        Ok(file)
    }

    /// Stage matching the model's final resolution.
    pub fn stage(&self) -> Stage {
        let l = &self.model.layout;
        Stage {
            pair: ResolutionPair {
                court: l.court,
                defender: l.defender,
            },
            contexts: l.contexts,
        }
    }

    /// Re-indexes raw samples onto this model's players and contexts and
    /// encodes them at the final resolution.
    pub fn encode(&self, samples: &[LabeledSample], players: &PlayerMap) -> Result<Vec<SampleEncoding>> {
        let mut samples = samples.to_vec();
        players.translate(&mut samples, &self.players)?;
        let (_, ctx) = assign_contexts(&samples, self.variant, &self.players, self.playstyles.as_ref())?;
        let samples = with_contexts(&samples, &ctx);
        self.encoder.encode_all(&samples, &self.stage())
    }
}

/// Result of [`run_pipeline`].
#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub model: LowRankModel,
    pub encoder: Encoder,
    pub report: TrainReport,
}

/// Trains full-rank stages with copy-finegraining in between.
pub fn train_full_rank(
    mut model: FullRankModel,
    encoder: &Encoder,
    split: &DatasetSplit<LabeledSample>,
    stages: &[Stage],
    config: &TrainConfig,
    lambda: f64,
    rng: &mut ChaCha8Rng,
    report: &mut Vec<StageLog>,
    timings: &mut Vec<StageTiming>,
) -> Result<FullRankModel> {
    let ctx = StageContext { config, lambda };
    for (k, &stage) in stages.iter().enumerate() {
        let start = Instant::now();
        let layout = stage.layout(encoder.variant, model.layout.players)?;
        if k > 0 {
            model = finegrain_full(&model, layout)?;
        } else if model.layout != layout {
            return Err(Error::Shape("initial model does not match the first stage".into()));
        }
        let train = encoder.encode_all(&split.train, &stage)?;
        let val = encoder.encode_all(&split.validation, &stage)?;
        let mut m = Model::Full(model);
        let log = run_stage(&mut m, StageKind::FullRank, stage, &train, &val, config.learning_rate, &ctx, rng)?;
        model = match m {
            Model::Full(f) => f,
            Model::LowRank(_) => unreachable!("stage keeps the model form"),
        };
        report.push(log);
        timings.push(StageTiming {
            kind: StageKind::FullRank,
            stage,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(model)
}

/// Trains low-rank stages; the first stage must match `init`'s resolution.
pub fn train_low_rank(
    mut model: LowRankModel,
    encoder: &Encoder,
    split: &DatasetSplit<LabeledSample>,
    stages: &[Stage],
    config: &TrainConfig,
    lambda: f64,
    rng: &mut ChaCha8Rng,
    report: &mut Vec<StageLog>,
    timings: &mut Vec<StageTiming>,
) -> Result<LowRankModel> {
    let ctx = StageContext { config, lambda };
    for (k, &stage) in stages.iter().enumerate() {
        let start = Instant::now();
        let layout = stage.layout(encoder.variant, model.layout.players)?;
        if k > 0 {
            model = finegrain_low(&model, layout)?;
        } else if model.layout != layout {
            return Err(Error::Shape("handoff model does not match the first low-rank stage".into()));
        }
        let train = encoder.encode_all(&split.train, &stage)?;
        let val = encoder.encode_all(&split.validation, &stage)?;
        let mut m = Model::LowRank(model);
        let log = run_stage(
            &mut m,
            StageKind::LowRank,
            stage,
            &train,
            &val,
            config.low_rank_learning_rate,
            &ctx,
            rng,
        )?;
        model = match m {
            Model::LowRank(l) => l,
            Model::Full(_) => unreachable!("stage keeps the model form"),
        };
        report.push(log);
        timings.push(StageTiming {
            kind: StageKind::LowRank,
            stage,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(model)
}

/// Full pipeline: context assignment, full-rank stages, CP handoff, low-rank
/// stages, threshold selection and test evaluation.
pub fn run_pipeline(
    split: &DatasetSplit<LabeledSample>,
    players: &PlayerMap,
    playstyles: Option<&Playstyles>,
    config: &TrainConfig,
    variant: PipelineVariant,
) -> Result<PipelineOutcome> {
    config.validate()?;
    let lambda = config.lambda_for(variant)?;
    if players.is_empty() {
        return Err(Error::invalid("no players"));
    }
    if split.train.is_empty() || split.validation.is_empty() || split.test.is_empty() {
        return Err(Error::invalid("train, validation and test splits must all be non-empty"));
    }
    let prep = |s: &[LabeledSample]| -> Result<(usize, Vec<LabeledSample>)> {
        let (f, ctx) = assign_contexts(s, variant, players, playstyles)?;
        Ok((f, with_contexts(s, &ctx)))
    };
    let (contexts, train) = prep(&split.train)?;
    let split = DatasetSplit {
        train,
        validation: prep(&split.validation)?.1,
        test: prep(&split.test)?.1,
        seed: split.seed,
    };
    let structure = variant.structure();
    let encoder = Encoder {
        geometry: config.geometry,
        defender_grid: config.defender_grid(),
        variant: structure,
        contexts,
    };
    let full_stages = config.schedule.full_rank_stages(structure, contexts);
    let low_stages = config.schedule.low_rank_stages(structure, contexts);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stages = Vec::new();
    let mut timings = Vec::new();
    let layout = full_stages[0].layout(structure, players.len())?;
    let init = FullRankModel::random(layout, prior_bias(&split.train), config.seed);
    let full = train_full_rank(
        init, &encoder, &split, &full_stages, config, lambda, &mut rng, &mut stages, &mut timings,
    )?;

    let start = Instant::now();
    let mut full = full;
    // The first low-rank stage may carry more contexts than the last
    // full-rank stage when the context schedule is long.
    let handoff_layout = low_stages[0].layout(structure, players.len())?;
    if full.layout != handoff_layout {
        full = finegrain_full(&full, handoff_layout)?;
    }
    let (low, handoff_error) = handoff(&full, config)?;
    timings.push(StageTiming {
        kind: StageKind::LowRank,
        stage: low_stages[0],
        seconds: start.elapsed().as_secs_f64(),
    });

    let low = train_low_rank(
        low, &encoder, &split, &low_stages, config, lambda, &mut rng, &mut stages, &mut timings,
    )?;

    let last = low_stages.last().expect("validated schedules are non-empty");
    let model = Model::LowRank(low);
    let val = encoder.encode_all(&split.validation, last)?;
    let test = encoder.encode_all(&split.test, last)?;
    let threshold = match config.threshold {
        ThresholdPolicy::Tuned => tune_threshold(&model, &val)?,
        ThresholdPolicy::Fixed(t) => t,
    };
    let validation = evaluate(&model, &val, threshold)?;
    let test = evaluate(&model, &test, threshold)?;
    let Model::LowRank(model) = model else {
        unreachable!("constructed as low-rank above")
    };
    Ok(PipelineOutcome {
        model,
        encoder,
        report: TrainReport {
            variant,
            stages,
            handoff_error,
            threshold,
            validation,
            test,
            timings,
        },
    })
}

/// CP-decomposes a full-rank model into a balanced low-rank one; also
/// returns the relative reconstruction error.
pub fn handoff(full: &FullRankModel, config: &TrainConfig) -> Result<(LowRankModel, f64)> {
    let als = cp_als(
        &full.weights,
        AlsOptions {
            rank: config.rank,
            max_iters: config.als_max_iters,
            tol: 1e-9,
            seed: config.seed,
        },
    )?;
    let error = als.final_error();
    let mut factors = als.factors;
    balance_factors(&mut factors);
    Ok((LowRankModel::new(full.layout, factors, full.bias)?, error))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_ops::cp_reconstruct;
    use proptest::prelude::*;
    use rand::Rng;

    fn gr(r: usize, c: usize) -> GridRes {
        GridRes::new(r, c)
    }

    fn pair(c: GridRes, d: GridRes) -> ResolutionPair {
        ResolutionPair { court: c, defender: d }
    }

    fn sample(rng: &mut ChaCha8Rng, players: u32, contexts: u32) -> LabeledSample {
        let bh = (rng.random_range(0.5..49.5), rng.random_range(0.5..46.5));
        let n = rng.random_range(0..5);
        let defenders = (0..n)
            .map(|_| (bh.0 + rng.random_range(-10.0..10.0), bh.1 + rng.random_range(-10.0..10.0)))
            .collect();
        let context = rng.random_range(0..contexts);
        LabeledSample {
            game_id: "g".into(),
            quarter: (context % 4 + 1) as u8,
            timestamp_s: 0.0,
            player: rng.random_range(0..players),
            context,
            bh_pos: bh,
            basket_pos: (25.0, 5.25),
            defenders,
            label: rng.random_range(0..2),
        }
    }

    fn encoder(variant: Variant, contexts: usize, finest: GridRes) -> Encoder {
        Encoder {
            geometry: CourtGeometry::default(),
            defender_grid: DefenderGridSpec::for_resolution(finest),
            variant,
            contexts,
        }
    }

    fn logits(model: &Model, encs: &[SampleEncoding]) -> Vec<f64> {
        encs.iter().map(|e| model.logit(e).unwrap()).collect()
    }

    /// Finegrains a random model along `from -> to` and compares every
    /// sample's logit before and after.
    fn check_full_finegrain(variant: Variant, contexts: usize, from: Stage, to: Stage) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<_> = (0..300).map(|_| sample(&mut rng, 3, contexts as u32)).collect();
        let enc = encoder(variant, contexts, gr(12, 12));
        let coarse = FullRankModel::random(from.layout(variant, 3).unwrap(), 0.3, 1);
        let fine = finegrain_full(&coarse, to.layout(variant, 3).unwrap()).unwrap();
        let before = logits(&Model::Full(coarse), &enc.encode_all(&samples, &from).unwrap());
        let after = logits(&Model::Full(fine), &enc.encode_all(&samples, &to).unwrap());
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn full_finegrain_court_preserves_logits() {
        let from = Stage { pair: pair(gr(4, 5), gr(6, 6)), contexts: 1 };
        let to = Stage { pair: pair(gr(8, 10), gr(6, 6)), contexts: 1 };
        check_full_finegrain(Variant::Base, 1, from, to);
    }

    #[test]
    fn full_finegrain_defender_preserves_logits() {
        let from = Stage { pair: pair(gr(8, 10), gr(6, 6)), contexts: 1 };
        let to = Stage { pair: pair(gr(8, 10), gr(12, 12)), contexts: 1 };
        check_full_finegrain(Variant::Base, 1, from, to);
    }

    #[test]
    fn full_finegrain_context_preserves_logits() {
        for t in [4, 7] {
            let from = Stage { pair: pair(gr(4, 5), gr(6, 6)), contexts: 1 };
            let to = Stage { pair: pair(gr(8, 10), gr(6, 6)), contexts: t };
            check_full_finegrain(Variant::St, t, from, to);
        }
    }

    #[test]
    fn full_finegrain_dynamic_preserves_logits() {
        let from = Stage { pair: pair(gr(4, 5), gr(6, 6)), contexts: 4 };
        let to = Stage { pair: pair(gr(8, 10), gr(12, 12)), contexts: 4 };
        check_full_finegrain(Variant::Dynamic, 4, from, to);
    }

    #[test]
    fn low_finegrain_preserves_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (variant, contexts) in [(Variant::Base, 1), (Variant::St, 4), (Variant::Dynamic, 4)] {
            let samples: Vec<_> = (0..300).map(|_| sample(&mut rng, 3, contexts as u32)).collect();
            let enc = encoder(variant, contexts, gr(12, 12));
            let from = Stage { pair: pair(gr(4, 5), gr(6, 6)), contexts };
            let to = Stage { pair: pair(gr(8, 10), gr(12, 12)), contexts };
            let full = FullRankModel::random(from.layout(variant, 3).unwrap(), 0.1, 2);
            let cfg = TrainConfig { rank: 3, als_max_iters: 20, ..TrainConfig::default() };
            let (low, _) = handoff(&full, &cfg).unwrap();
            let fine = finegrain_low(&low, to.layout(variant, 3).unwrap()).unwrap();
            let before = logits(&Model::LowRank(low), &enc.encode_all(&samples, &from).unwrap());
            let after = logits(&Model::LowRank(fine), &enc.encode_all(&samples, &to).unwrap());
            for (a, b) in before.iter().zip(&after) {
                assert!((a - b).abs() < 1e-9, "{variant:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn finegrain_rejects_coarsening() {
        let l = |c| ModelLayout::new(Variant::Base, 2, 1, c, gr(6, 6)).unwrap();
        let m = FullRankModel::zeros(l(gr(8, 10)));
        assert!(finegrain_full(&m, l(gr(4, 5))).is_err());
    }

    #[test]
    fn balance_preserves_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mat = |r: usize, s: f64| Matrix::from_fn(r, 2, |_, _| s * rng.random_range(-1.0..1.0));
        let mut f = CpFactors::new(vec![mat(3, 100.0), mat(4, 0.01), mat(5, 1.0)]).unwrap();
        let before = cp_reconstruct(&f);
        balance_factors(&mut f);
        let after = cp_reconstruct(&f);
        for (a, b) in before.values().iter().zip(after.values()) {
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
        let n0 = f.factors[0].column(0).iter().map(|v| v * v).sum::<f64>();
        let n1 = f.factors[1].column(0).iter().map(|v| v * v).sum::<f64>();
        assert!((n0 - n1).abs() < 1e-9 * n0);
    }

    #[test]
    fn f1_examples() {
        let m = metrics_from_scores(&[0.9, 0.1, 0.8], &[1, 0, 1], 0.5).unwrap();
        assert_eq!(m.f1, 1.0);
        // TP=2, FP=1, FN=1.
        let m = metrics_from_scores(&[0.9, 0.9, 0.9, 0.1], &[1, 1, 0, 1], 0.5).unwrap();
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        let m = metrics_from_scores(&[0.1; 10], &[0, 0, 0, 0, 0, 0, 0, 0, 1, 1], 0.5).unwrap();
        assert_eq!((m.f1, m.precision, m.recall), (0.0, 0.0, 0.0));
    }

    #[test]
    fn evaluate_rejects_empty_and_bad_threshold() {
        assert!(metrics_from_scores(&[], &[], 0.5).is_err());
        assert!(metrics_from_scores(&[0.5], &[1], 1.0).is_err());
    }

    #[test]
    fn constant_predictor_picks_lowest_threshold() {
        let t = tune_threshold_scores(&[0.5; 6], &[1, 0, 1, 0, 0, 1]).unwrap();
        assert_eq!(t, 0.05);
    }

    #[test]
    fn separable_scores_pick_lowest_separating_threshold() {
        let t = tune_threshold_scores(&[0.12, 0.2, 0.61, 0.7], &[0, 0, 1, 1]).unwrap();
        // Every grid value in (0.2, 0.61] separates; the lowest is 0.25.
        assert_eq!(t, 0.25);
    }

    proptest! {
        #[test]
        fn grid_threshold_is_within_a_step_of_fine_scan(
            data in proptest::collection::vec((0.0..1.0f64, 0u8..2), 5..80)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
            let t = tune_threshold_scores(&scores, &labels).unwrap();
            let grid_f1 = metrics_from_scores(&scores, &labels, t).unwrap().f1;
            // Any threshold within one grid step of the fine-scan optimum is
            // at least as good as the grid's nearest point below it, so the
            // grid can only lose what lies strictly between grid points.
            let mut best = (0.0, 0.001);
            for k in 1..1000 {
                let ft = k as f64 / 1000.0;
                let f = metrics_from_scores(&scores, &labels, ft).unwrap().f1;
                if f > best.0 { best = (f, ft); }
            }
            prop_assert!(grid_f1 <= best.0 + 1e-12);
            let near = threshold_grid()
                .filter(|g| (g - best.1).abs() <= 0.05 + 1e-12)
                .map(|g| metrics_from_scores(&scores, &labels, g).unwrap().f1)
                .fold(0.0, f64::max);
            prop_assert!(grid_f1 >= near - 1e-12);
        }

        #[test]
        fn f1_matches_brute_force(
            data in proptest::collection::vec((0.0..1.0f64, 0u8..2), 1..60), t in 0.01..0.99f64
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
            let m = metrics_from_scores(&scores, &labels, t).unwrap();
            let tp = data.iter().filter(|d| d.0 >= t && d.1 == 1).count() as f64;
            let fp = data.iter().filter(|d| d.0 >= t && d.1 == 0).count() as f64;
            let fneg = data.iter().filter(|d| d.0 < t && d.1 == 1).count() as f64;
            let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) };
            prop_assert!((m.f1 - f1).abs() < 1e-15);
        }
    }

    #[test]
    fn schedule_defaults_validate() {
        let s = ResolutionSchedule::default();
        s.validate().unwrap();
        assert_eq!(s.finest_defender(), gr(12, 12));
        let st = s.full_rank_stages(Variant::St, 4);
        assert_eq!(st.iter().map(|s| s.contexts).collect::<Vec<_>>(), vec![1, 4, 4]);
        assert_eq!(s.full_rank.last(), s.low_rank.first());
    }

    #[test]
    fn schedule_rejects_bad_handoff_and_empty() {
        let mut s = ResolutionSchedule::default();
        s.low_rank[0] = pair(gr(20, 25), gr(12, 12));
        assert!(s.validate().is_err());
        let mut s = ResolutionSchedule::default();
        s.full_rank.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn config_lambda_defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.lambda_for(PipelineVariant::DynamicQuarter).unwrap(), DEFAULT_DYNAMIC_LAMBDA);
        assert_eq!(c.lambda_for(PipelineVariant::DynamicPlaystyle).unwrap(), 0.0);
        assert_eq!(c.lambda_for(PipelineVariant::Base).unwrap(), 0.0);
        let c = TrainConfig { lambda: Some(1.0), ..TrainConfig::default() };
        assert!(c.lambda_for(PipelineVariant::StQuarter).is_err());
        assert_eq!(c.lambda_for(PipelineVariant::DynamicPlaystyle).unwrap(), 1.0);
    }

    #[test]
    fn config_toml_round_trip() {
        let c = TrainConfig {
            threshold: ThresholdPolicy::Fixed(0.3),
            lambda: Some(0.5),
            ..TrainConfig::default()
        };
        let text = toml::to_string(&c).unwrap();
        assert!(text.contains("\"8x10/12x12\""), "{text}");
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
    }

    #[test]
    fn missing_playstyles_list_players() {
        let players = PlayerMap::from_ids([10, 20, 30]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples: Vec<_> = (0..30).map(|_| sample(&mut rng, 3, 1)).collect();
        let ps = Playstyles { clusters: 2, by_player: BTreeMap::from([(20, 1)]) };
        let err = assign_contexts(&samples, PipelineVariant::StPlaystyle, &players, Some(&ps))
            .unwrap_err()
            .to_string();
        assert!(err.contains("[10, 30]"), "{err}");
        assert!(assign_contexts(&samples, PipelineVariant::StPlaystyle, &players, None).is_err());
    }

    fn tiny_split(n: usize, seed: u64) -> DatasetSplit<LabeledSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<_> = (0..n)
            .map(|_| {
                let mut s = sample(&mut rng, 3, 4);
                // Shots are likelier near the basket.
                let near = (s.bh_pos.1 < 15.0) as u8;
                s.label = u8::from(rng.random::<f64>() < 0.1 + 0.6 * f64::from(near));
                s
            })
            .collect();
        crate::ingest::split_dataset(&samples, (0.6, 0.2, 0.2), seed).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        let p = |c: GridRes| pair(c, gr(6, 6));
        TrainConfig {
            max_epochs: 3,
            rank: 2,
            schedule: ResolutionSchedule {
                full_rank: vec![p(gr(4, 5)), p(gr(8, 10))],
                low_rank: vec![p(gr(8, 10))],
                context_schedule: vec![1],
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let split = tiny_split(200, 1);
        let cfg = TrainConfig { max_epochs: 0, ..tiny_config() };
        let stage = Stage { pair: cfg.schedule.full_rank[0], contexts: 1 };
        let enc = encoder(Variant::Base, 1, gr(6, 6));
        let init = FullRankModel::random(stage.layout(Variant::Base, 3).unwrap(), 0.0, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = train_full_rank(
            init.clone(), &enc, &split, &[stage], &cfg, 0.0, &mut rng, &mut vec![], &mut vec![],
        )
        .unwrap();
        assert_eq!(out, init);
        let (low, _) = handoff(&init, &cfg).unwrap();
        let out = train_low_rank(
            low.clone(), &enc, &split, &[stage], &cfg, 0.0, &mut rng, &mut vec![], &mut vec![],
        )
        .unwrap();
        assert_eq!(out, low);
    }

    #[test]
    fn pipeline_runs_for_every_variant() {
        let split = tiny_split(600, 2);
        let players = PlayerMap::from_ids([1, 2, 3]);
        let ps = Playstyles { clusters: 2, by_player: BTreeMap::from([(1, 0), (2, 1), (3, 1)]) };
        for v in PipelineVariant::ALL {
            let out = run_pipeline(&split, &players, Some(&ps), &tiny_config(), v).unwrap();
            let r = &out.report;
            assert_eq!(r.stages.len(), 3, "{v}");
            for s in &r.stages {
                assert!(s.epochs.len() <= 3);
                assert!(s.epochs.windows(2).all(|w| w[1].lr <= w[0].lr));
            }
            assert!((0.0..=1.0).contains(&r.test.f1));
            let enc = out.encoder;
            assert_eq!(enc.contexts, match v.context_kind() {
                None => 1,
                Some(ContextKind::Quarter) => 4,
                Some(ContextKind::Playstyle) => 2,
            });
        }
    }

    #[test]
    fn pipeline_is_deterministic() {
        let split = tiny_split(400, 3);
        let players = PlayerMap::from_ids([1, 2, 3]);
        let run = || {
            let out = run_pipeline(&split, &players, None, &tiny_config(), PipelineVariant::DynamicQuarter)
                .unwrap();
            let mut csv = Vec::new();
            out.report.write_metrics_csv(&mut csv).unwrap();
            (serde_json::to_string(&out.report).unwrap(), csv, out.model)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_lowers_validation_loss() {
        let split = tiny_split(3000, 4);
        let cfg = TrainConfig { max_epochs: 10, ..tiny_config() };
        let stage = Stage { pair: cfg.schedule.full_rank[0], contexts: 1 };
        let enc = encoder(Variant::Base, 1, gr(6, 6));
        let init = FullRankModel::zeros(stage.layout(Variant::Base, 3).unwrap());
        let mut logs = vec![];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train_full_rank(init, &enc, &split, &[stage], &cfg, 0.0, &mut rng, &mut logs, &mut vec![])
            .unwrap();
        assert!((logs[0].initial_val_loss - std::f64::consts::LN_2).abs() < 1e-12);
        let best = logs[0].epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert!(best < std::f64::consts::LN_2);
    }

    #[test]
    fn divergence_names_the_epoch() {
        let split = tiny_split(300, 5);
        let cfg = TrainConfig { learning_rate: f64::INFINITY, ..tiny_config() };
        let stage = Stage { pair: cfg.schedule.full_rank[0], contexts: 1 };
        let enc = encoder(Variant::Base, 1, gr(6, 6));
        let init = FullRankModel::zeros(stage.layout(Variant::Base, 3).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = train_full_rank(init, &enc, &split, &[stage], &cfg, 0.0, &mut rng, &mut vec![], &mut vec![])
            .unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
    }

    #[test]
    fn model_file_round_trip() {
        let split = tiny_split(300, 6);
        let players = PlayerMap::from_ids([1, 2, 3]);
        let out = run_pipeline(&split, &players, None, &tiny_config(), PipelineVariant::StQuarter).unwrap();
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            variant: PipelineVariant::StQuarter,
            model: out.model,
            encoder: out.encoder,
            players,
            playstyles: None,
            threshold: out.report.threshold,
            fingerprint: "abc".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        file.save(&path).unwrap();
        assert_eq!(ModelFile::load(&path).unwrap(), file);
    }

    #[test]
    fn coarse_context_examples() {
        assert!((0..4).all(|t| coarse_context(t, 4, 1) == 0));
        assert_eq!((0..4).map(|t| coarse_context(t, 4, 2)).collect::<Vec<_>>(), vec![0, 0, 1, 1]);
        assert_eq!((0..4).map(|t| coarse_context(t, 4, 4)).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }
}
