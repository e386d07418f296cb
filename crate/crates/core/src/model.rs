//! Full-rank and CP low-rank shot classifiers.
//!
//! Every sample activates one court cell `d1` and a (possibly empty) multiset
//! of defender cells `d2`. The logit is
//!
//! ```text
//! full-rank: bias + Σ_{d2} W[i, (t,) d1, d2]
//! low-rank:  bias + Σ_{d2} Σ_k A[i,k] (B[t,k]) C[d1,k] D[d2,k]
//! ```
//!
//! and the shot probability is the logistic function of the logit. The
//! `Dynamic` variant keeps one court block per context in the court axis, so
//! `d1` is already offset by `f * |court|` when it reaches the model.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discretizer::GridRes;
use crate::error::{Error, Result};
use crate::tensor_ops::{cp_als, AlsOptions, CpFactors, DenseTensor, Matrix};

/// Probability clamp used by the cross-entropy.
pub const PROB_EPS: f64 = 1e-12;

/// Structural model family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    St,
    Dynamic,
}

/// What the non-spatial context of a sample means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    Quarter,
    Playstyle,
}

/// Model family together with its context source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineVariant {
    Base,
    StQuarter,
    StPlaystyle,
    DynamicQuarter,
    DynamicPlaystyle,
}

impl PipelineVariant {
    pub const ALL: [PipelineVariant; 5] = [
        PipelineVariant::Base,
        PipelineVariant::StQuarter,
        PipelineVariant::StPlaystyle,
        PipelineVariant::DynamicQuarter,
        PipelineVariant::DynamicPlaystyle,
    ];

    pub fn structure(self) -> Variant {
        match self {
            PipelineVariant::Base => Variant::Base,
            PipelineVariant::StQuarter | PipelineVariant::StPlaystyle => Variant::St,
            PipelineVariant::DynamicQuarter | PipelineVariant::DynamicPlaystyle => {
                Variant::Dynamic
            }
        }
    }

    pub fn context_kind(self) -> Option<ContextKind> {
        match self {
            PipelineVariant::Base => None,
            PipelineVariant::StQuarter | PipelineVariant::DynamicQuarter => {
                Some(ContextKind::Quarter)
            }
            PipelineVariant::StPlaystyle | PipelineVariant::DynamicPlaystyle => {
                Some(ContextKind::Playstyle)
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineVariant::Base => "base",
            PipelineVariant::StQuarter => "st_quarter",
            PipelineVariant::StPlaystyle => "st_playstyle",
            PipelineVariant::DynamicQuarter => "dynamic_quarter",
            PipelineVariant::DynamicPlaystyle => "dynamic_playstyle",
        }
    }
}

impl fmt::Display for PipelineVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PipelineVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }
}

/// Axis sizes of a model at one resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLayout {
    pub variant: Variant,
    pub players: usize,
    /// T for `St`, F for `Dynamic`, 1 for `Base`.
    pub contexts: usize,
    pub court: GridRes,
    pub defender: GridRes,
}

impl ModelLayout {
    pub fn new(
        variant: Variant,
        players: usize,
        contexts: usize,
        court: GridRes,
        defender: GridRes,
    ) -> Result<Self> {
        if players == 0 || contexts == 0 {
            return Err(Error::Shape(format!(
                "model needs at least one player and context, got {players} and {contexts}"
            )));
        }
        if variant == Variant::Base && contexts != 1 {
            return Err(Error::Shape("base models have exactly one context".into()));
        }
        Ok(Self {
            variant,
            players,
            contexts,
            court,
            defender,
        })
    }

    /// Length of the court axis (F side-by-side courts for `Dynamic`).
    pub fn court_axis(&self) -> usize {
        match self.variant {
            Variant::Dynamic => self.court.cells() * self.contexts,
            _ => self.court.cells(),
        }
    }

    /// Length of the explicit context axis (1 unless `St`).
    pub fn context_axis(&self) -> usize {
        match self.variant {
            Variant::St => self.contexts,
            _ => 1,
        }
    }

    pub fn full_shape(&self) -> Vec<usize> {
        match self.variant {
            Variant::St => vec![
                self.players,
                self.contexts,
                self.court_axis(),
                self.defender.cells(),
            ],
            _ => vec![self.players, self.court_axis(), self.defender.cells()],
        }
    }

    /// Index of the court axis within [`ModelLayout::full_shape`].
    pub fn court_mode(&self) -> usize {
        match self.variant {
            Variant::St => 2,
            _ => 1,
        }
    }

    pub(crate) fn check(&self, enc: &SampleEncoding) -> Result<()> {
        let bad = |what: &str, v: u32, n: usize| {
            Err(Error::OutOfRange(format!("{what} {v} outside [0, {n})")))
        };
        if enc.player as usize >= self.players {
            return bad("player", enc.player, self.players);
        }
        if enc.context as usize >= self.contexts {
            return bad("context", enc.context, self.contexts);
        }
        if enc.court as usize >= self.court_axis() {
            return bad("court cell", enc.court, self.court_axis());
        }
        let nd = self.defender.cells();
        if let Some(&d) = enc.defenders.iter().find(|&&d| d as usize >= nd) {
            return bad("defender cell", d, nd);
        }
        Ok(())
    }
}

/// One sample's active cells.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEncoding {
    pub player: u32,
    /// Context index `t` (ST) or block `f` (Dynamic); 0 for base models.
    pub context: u32,
    /// Court cell, already block-offset for `Dynamic`.
    pub court: u32,
    /// Active defender cells. Cells may repeat when a coarse grid pools
    /// several occupied fine cells.
    pub defenders: Vec<u32>,
    pub label: u8,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logit_of(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Clamped binary cross-entropy of one prediction and its derivative with
/// respect to the logit.
#[inline]
pub(crate) fn bce(z: f64, label: u8) -> (f64, f64) {
    let p = sigmoid(z);
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let y = f64::from(label);
    let loss = -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
    let dz = if p == pc { p - y } else { 0.0 };
    (loss, dz)
}

/// Full-rank weight tensor plus bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullRankModel {
    pub layout: ModelLayout,
    pub weights: DenseTensor,
    pub bias: f64,
}

impl FullRankModel {
    pub fn zeros(layout: ModelLayout) -> Self {
        Self {
            weights: DenseTensor::zeros(&layout.full_shape()),
            layout,
            bias: 0.0,
        }
    }

    /// Weights drawn uniformly from (-0.01, 0.01).
    pub fn random(layout: ModelLayout, bias: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros(layout);
        for w in m.weights.values_mut() {
            *w = rng.random_range(-0.01..0.01);
        }
        m.bias = bias;
        m
    }

    #[inline]
    fn base_offset(&self, enc: &SampleEncoding) -> usize {
        let l = &self.layout;
        let t = if l.variant == Variant::St { enc.context as usize } else { 0 };
        ((enc.player as usize * l.context_axis() + t) * l.court_axis() + enc.court as usize)
            * l.defender.cells()
    }

    #[inline]
    pub(crate) fn logit_unchecked(&self, enc: &SampleEncoding) -> f64 {
        let base = self.base_offset(enc);
        let w = self.weights.values();
        self.bias + enc.defenders.iter().map(|&d| w[base + d as usize]).sum::<f64>()
    }

    pub fn logit(&self, enc: &SampleEncoding) -> Result<f64> {
        self.layout.check(enc)?;
        Ok(self.logit_unchecked(enc))
    }

    /// Calls `sink(offset)` once per active defender cell; each call is a
    /// unit contribution to the logit's derivative.
    #[inline]
    pub(crate) fn for_each_touched(&self, enc: &SampleEncoding, mut sink: impl FnMut(usize)) {
        let base = self.base_offset(enc);
        for &d in &enc.defenders {
            sink(base + d as usize);
        }
    }
}

/// CP-factorized model. Factor order is `[A, B, C, D]` for `St` and
/// `[A, C, D]` otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankModel {
    pub layout: ModelLayout,
    pub factors: CpFactors,
    pub bias: f64,
}

impl LowRankModel {
    pub fn new(layout: ModelLayout, factors: CpFactors, bias: f64) -> Result<Self> {
        let expected = layout.full_shape();
        if factors.shape() != expected {
            return Err(Error::Shape(format!(
                "factor shapes {:?} do not match layout {:?}",
                factors.shape(),
                expected
            )));
        }
        Ok(Self {
            layout,
            factors,
            bias,
        })
    }

    pub fn rank(&self) -> usize {
        self.factors.rank
    }

    pub fn a(&self) -> &Matrix {
        &self.factors.factors[0]
    }

    pub fn b(&self) -> Option<&Matrix> {
        (self.layout.variant == Variant::St).then(|| &self.factors.factors[1])
    }

    pub fn c(&self) -> &Matrix {
        &self.factors.factors[self.c_mode()]
    }

    pub fn d(&self) -> &Matrix {
        &self.factors.factors[self.c_mode() + 1]
    }

    pub fn c_mode(&self) -> usize {
        self.layout.court_mode()
    }

    /// Per-component contributions `A·(B)·C·ΣD` whose sum plus the bias is
    /// the logit.
    #[inline]
    pub fn component_terms(&self, enc: &SampleEncoding, out: &mut [f64]) {
        let cm = self.c_mode();
        let f = &self.factors.factors;
        let a = f[0].row(enc.player as usize);
        let c = f[cm].row(enc.court as usize);
        let dm = &f[cm + 1];
        for (k, o) in out.iter_mut().enumerate() {
            let s: f64 = enc.defenders.iter().map(|&d| dm.get(d as usize, k)).sum();
            *o = a[k] * c[k] * s;
        }
        if cm == 2 {
            let b = f[1].row(enc.context as usize);
            for (o, bk) in out.iter_mut().zip(b) {
                *o *= bk;
            }
        }
    }

    #[inline]
    pub(crate) fn logit_unchecked(&self, enc: &SampleEncoding) -> f64 {
        let cm = self.c_mode();
        let f = &self.factors.factors;
        let a = f[0].row(enc.player as usize);
        let c = f[cm].row(enc.court as usize);
        let dm = &f[cm + 1];
        let b = (cm == 2).then(|| f[1].row(enc.context as usize));
        let mut z = self.bias;
        for k in 0..self.rank() {
            let s: f64 = enc.defenders.iter().map(|&d| dm.get(d as usize, k)).sum();
            let bk = b.map_or(1.0, |b| b[k]);
            z += a[k] * bk * c[k] * s;
        }
        z
    }

    pub fn logit(&self, enc: &SampleEncoding) -> Result<f64> {
        self.layout.check(enc)?;
        Ok(self.logit_unchecked(enc))
    }

    /// Adds `g · ∂logit/∂factor` for one sample into `grads` (one matrix per
    /// factor).
    #[inline]
    pub(crate) fn add_sample_grad(&self, enc: &SampleEncoding, g: f64, grads: &mut [Matrix]) {
        let cm = self.c_mode();
        let f = &self.factors.factors;
        let (i, d1) = (enc.player as usize, enc.court as usize);
        let dm = &f[cm + 1];
        for k in 0..self.rank() {
            let s: f64 = enc.defenders.iter().map(|&d| dm.get(d as usize, k)).sum();
            let a = f[0].get(i, k);
            let c = f[cm].get(d1, k);
            let b = if cm == 2 { f[1].get(enc.context as usize, k) } else { 1.0 };
            grads[0].data[i * self.rank() + k] += g * b * c * s;
            if cm == 2 {
                grads[1].data[enc.context as usize * self.rank() + k] += g * a * c * s;
            }
            grads[cm].data[d1 * self.rank() + k] += g * a * b * s;
            let abc = g * a * b * c;
            for &d in &enc.defenders {
                grads[cm + 1].data[d as usize * self.rank() + k] += abc;
            }
        }
    }
}

/// Either model form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Full(FullRankModel),
    LowRank(LowRankModel),
}

impl Model {
    pub fn layout(&self) -> &ModelLayout {
        match self {
            Model::Full(m) => &m.layout,
            Model::LowRank(m) => &m.layout,
        }
    }

    pub fn bias(&self) -> f64 {
        match self {
            Model::Full(m) => m.bias,
            Model::LowRank(m) => m.bias,
        }
    }

    pub fn logit(&self, enc: &SampleEncoding) -> Result<f64> {
        match self {
            Model::Full(m) => m.logit(enc),
            Model::LowRank(m) => m.logit(enc),
        }
    }

    pub fn probability(&self, enc: &SampleEncoding) -> Result<f64> {
        self.logit(enc).map(sigmoid)
    }

    /// All parameters flattened, bias last.
    pub fn params(&self) -> Vec<f64> {
        let mut out = match self {
            Model::Full(m) => m.weights.values().to_vec(),
            Model::LowRank(m) => m
                .factors
                .factors
                .iter()
                .flat_map(|f| f.data.iter().copied())
                .collect(),
        };
        out.push(self.bias());
        out
    }

    /// Inverse of [`Model::params`].
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let n = self.params_len();
        if params.len() != n {
            return Err(Error::Shape(format!("{} parameters for a model with {n}", params.len())));
        }
        match self {
            Model::Full(m) => {
                m.weights.values_mut().copy_from_slice(&params[..n - 1]);
                m.bias = params[n - 1];
            }
            Model::LowRank(m) => {
                let mut off = 0;
                for f in m.factors.factors.iter_mut() {
                    let len = f.data.len();
                    f.data.copy_from_slice(&params[off..off + len]);
                    off += len;
                }
                m.bias = params[off];
            }
        }
        Ok(())
    }

    pub fn params_len(&self) -> usize {
        1 + match self {
            Model::Full(m) => m.weights.len(),
            Model::LowRank(m) => m.factors.factors.iter().map(|f| f.data.len()).sum(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bias().is_finite()
            && match self {
                Model::Full(m) => m.weights.is_finite(),
                Model::LowRank(m) => m
                    .factors
                    .factors
                    .iter()
                    .all(|f| f.data.iter().all(|v| v.is_finite())),
            }
    }

    pub(crate) fn logit_unchecked(&self, enc: &SampleEncoding) -> f64 {
        match self {
            Model::Full(m) => m.logit_unchecked(enc),
            Model::LowRank(m) => m.logit_unchecked(enc),
        }
    }

    pub fn check_all(&self, encs: &[SampleEncoding]) -> Result<()> {
        encs.iter().try_for_each(|e| self.layout().check(e))
    }
}

/// Loss breakdown.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub data_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
}

/// Gradient of the total loss, flattened in [`Model::params`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
}

/// Mean cross-entropy over `batch` plus `lambda` times the adjacent-block
/// penalty (Dynamic models only), with its exact gradient.
pub fn loss_and_grad(
    model: &Model,
    batch: &[SampleEncoding],
    lambda: f64,
) -> Result<(LossReport, Gradient)> {
    if batch.is_empty() {
        return Err(Error::invalid("loss of an empty batch"));
    }
    model.check_all(batch)?;
    let n = batch.len() as f64;
    let mut grad = vec![0.0; model.params_len()];
    let mut data_loss = 0.0;
    let last = grad.len() - 1;
    match model {
        Model::Full(m) => {
            for enc in batch {
                let (l, dz) = bce(m.logit_unchecked(enc), enc.label);
                data_loss += l;
                let g = dz / n;
                m.for_each_touched(enc, |off| grad[off] += g);
                grad[last] += g;
            }
        }
        Model::LowRank(m) => {
            let mut mats: Vec<Matrix> = m
                .factors
                .factors
                .iter()
                .map(|f| Matrix::zeros(f.rows, f.cols))
                .collect();
            let mut db = 0.0;
            for enc in batch {
                let (l, dz) = bce(m.logit_unchecked(enc), enc.label);
                data_loss += l;
                let g = dz / n;
                m.add_sample_grad(enc, g, &mut mats);
                db += g;
            }
            let mut off = 0;
            for f in &mats {
                grad[off..off + f.data.len()].copy_from_slice(&f.data);
                off += f.data.len();
            }
            grad[last] = db;
        }
    }
    data_loss /= n;
    let (reg_loss, reg_grad) = regularization(model, lambda)?;
    if let Some(rg) = reg_grad {
        for (g, r) in grad.iter_mut().zip(rg) {
            *g += r;
        }
    }
    Ok((
        LossReport {
            data_loss,
            reg_loss,
            total: data_loss + reg_loss,
        },
        Gradient { values: grad },
    ))
}

/// Block penalty and its gradient in [`Model::params`] order (without the
/// bias entry). `None` when the model carries no penalty.
pub fn regularization(model: &Model, lambda: f64) -> Result<(f64, Option<Vec<f64>>)> {
    let layout = model.layout();
    if layout.variant != Variant::Dynamic || lambda == 0.0 {
        return Ok((0.0, None));
    }
    let f = layout.contexts;
    match model {
        Model::Full(m) => {
            let (p, g) = temporal_penalty(m.weights.values(), m.weights.shape(), 1, f, lambda)?;
            Ok((p, Some(g)))
        }
        Model::LowRank(m) => {
            let c = m.c();
            let (p, gc) = temporal_penalty(&c.data, &[c.rows, c.cols], 0, f, lambda)?;
            let mut g = vec![0.0; model.params_len() - 1];
            let off: usize = m.factors.factors[..m.c_mode()].iter().map(|f| f.data.len()).sum();
            g[off..off + gc.len()].copy_from_slice(&gc);
            Ok((p, Some(g)))
        }
    }
}

/// Splits `axis` into `blocks` equal blocks and returns
/// `lambda · Σ_f ‖X_f − X_{f−1}‖²_F` with its gradient.
pub fn temporal_penalty(
    values: &[f64],
    shape: &[usize],
    axis: usize,
    blocks: usize,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    let (outer, block_len, inner) = block_geometry(values, shape, axis, blocks)?;
    let axis_len = shape[axis];
    let mut grad = vec![0.0; values.len()];
    let mut penalty = 0.0;
    for o in 0..outer {
        for f in 1..blocks {
            for j in 0..block_len {
                let cur = (o * axis_len + f * block_len + j) * inner;
                let prev = (o * axis_len + (f - 1) * block_len + j) * inner;
                for q in 0..inner {
                    let diff = values[cur + q] - values[prev + q];
                    penalty += diff * diff;
                    grad[cur + q] += 2.0 * lambda * diff;
                    grad[prev + q] -= 2.0 * lambda * diff;
                }
            }
        }
    }
    Ok((lambda * penalty, grad))
}

fn block_geometry(
    values: &[f64],
    shape: &[usize],
    axis: usize,
    blocks: usize,
) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() || values.len() != shape.iter().product::<usize>() {
        return Err(Error::Shape(format!("bad block axis {axis} for shape {shape:?}")));
    }
    if blocks == 0 || !shape[axis].is_multiple_of(blocks) {
        return Err(Error::Shape(format!(
            "axis of length {} is not divisible into {blocks} blocks",
            shape[axis]
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis] / blocks, inner))
}

/// Proximal step for [`temporal_penalty`]: replaces `values` by the minimiser
/// of `½‖X − values‖² + step · Σ_f ‖X_f − X_{f−1}‖²`, which solves
/// `(I + 2·step·L) X = values` along the block index with `L` the path-graph
/// Laplacian.
pub fn temporal_prox(
    values: &mut [f64],
    shape: &[usize],
    axis: usize,
    blocks: usize,
    step: f64,
) -> Result<()> {
    let (outer, block_len, inner) = block_geometry(values, shape, axis, blocks)?;
    if blocks < 2 || step == 0.0 {
        return Ok(());
    }
    let mut sys = DMatrix::<f64>::identity(blocks, blocks);
    for f in 1..blocks {
        let s = 2.0 * step;
        sys[(f, f)] += s;
        sys[(f - 1, f - 1)] += s;
        sys[(f, f - 1)] -= s;
        sys[(f - 1, f)] -= s;
    }
    let inv = sys
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular proximal system".into()))?;
    let axis_len = shape[axis];
    let mut fiber = vec![0.0; blocks];
    for o in 0..outer {
        for j in 0..block_len {
            for q in 0..inner {
                let at = |f: usize| (o * axis_len + f * block_len + j) * inner + q;
                for (f, v) in fiber.iter_mut().enumerate() {
                    *v = values[at(f)];
                }
                for f in 0..blocks {
                    values[at(f)] = (0..blocks).map(|g| inv[(f, g)] * fiber[g]).sum();
                }
            }
        }
    }
    Ok(())
}

/// Initializes a low-rank model from a CP decomposition of `full`'s weights.
pub fn init_lowrank_from_full(
    full: &FullRankModel,
    rank: usize,
    seed: u64,
) -> Result<LowRankModel> {
    init_lowrank_with(
        full,
        AlsOptions {
            rank,
            max_iters: 500,
            tol: 1e-9,
            seed,
        },
    )
}

pub fn init_lowrank_with(full: &FullRankModel, opts: AlsOptions) -> Result<LowRankModel> {
    let out = cp_als(&full.weights, opts)?;
    LowRankModel::new(full.layout, out.factors, full.bias)
}

const EVAL_CHUNK: usize = 4096;

/// Probabilities for all encodings. Work is split into fixed chunks, so the
/// result does not depend on the thread count.
pub fn probabilities(model: &Model, encs: &[SampleEncoding]) -> Result<Vec<f64>> {
    model.check_all(encs)?;
    Ok(encs
        .par_chunks(EVAL_CHUNK)
        .flat_map_iter(|chunk| chunk.iter().map(|e| sigmoid(model.logit_unchecked(e))))
        .collect())
}

/// Mean cross-entropy over `encs`, reduced in a fixed chunk order.
pub fn mean_loss(model: &Model, encs: &[SampleEncoding]) -> Result<f64> {
    if encs.is_empty() {
        return Err(Error::invalid("loss of an empty sample set"));
    }
    model.check_all(encs)?;
    let partial: Vec<f64> = encs
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|e| bce(model.logit_unchecked(e), e.label).0)
                .sum()
        })
        .collect();
    Ok(partial.iter().sum::<f64>() / encs.len() as f64)
}
