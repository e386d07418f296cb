//! Synthetic samples drawn from a planted low-rank model.
//!
//! Each sample picks a player, a context, a uniform court position and a few
//! defenders placed inside the planted defender grid. The label is Bernoulli
//! with the planted probability, optionally mixed with symmetric label noise.
//! Because the generating probability is known exactly, [`bayes_oracle`]
//! gives the best achievable predictions for any generated set.

use std::path::Path;

use nalgebra::{DMatrix, Dyn, QR};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::discretizer::{CourtGeometry, DefenderGridSpec, GridRes, ResolutionPair};
use crate::error::{Error, Result};
use crate::ingest::{LabeledSample, PlayerMap};
use crate::model::{sigmoid, LowRankModel, ModelLayout, Variant};
use crate::tensor_ops::{CpFactors, Matrix};
use crate::trainer::{Encoder, Stage, QUARTERS};

/// Basket position used for generated samples, in court feet.
pub const BASKET: (f64, f64) = (25.0, 5.25);

/// Raw id of dense player 0 in generated files.
pub const FIRST_PLAYER_ID: i64 = 1000;

/// Ground truth and sampling settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub model: LowRankModel,
    pub geometry: CourtGeometry,
    /// Grid the planted defender factor lives on.
    pub defender_grid: DefenderGridSpec,
    /// Inclusive range of defenders per sample.
    pub defender_count: (usize, usize),
    /// Probability of flipping each label.
    pub label_noise: f64,
    /// Fixed context of each player (playstyle-like data). When absent the
    /// context is the quarter.
    pub player_contexts: Option<Vec<u32>>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `rows x cols` matrix with orthonormal columns (`rows >= cols`).
fn orthonormal_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let g = DMatrix::<f64>::from_fn(rows, cols, |_, _| rng.sample(StandardNormal));
    let q = QR::<f64, Dyn, Dyn>::new(g).q();
    Matrix::from_fn(rows, cols, |r, c| q[(r, c)])
}

impl PlantedSpec {
    /// Spec around `model` with default sampling settings.
    pub fn new(model: LowRankModel) -> Self {
        let defender_grid = DefenderGridSpec::for_resolution(model.layout.defender);
        Self {
            model,
            geometry: CourtGeometry::default(),
            defender_grid,
            defender_count: (1, 4),
            label_noise: 0.0,
            player_contexts: None,
        }
    }

    /// Random base-variant truth. Factors are Gaussian and the player factor
    /// is scaled so that the interaction part of the logit has standard
    /// deviation `signal` over generated samples.
    pub fn base(
        players: usize,
        rank: usize,
        pair: ResolutionPair,
        bias: f64,
        signal: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = ModelLayout::new(Variant::Base, players, 1, pair.court, pair.defender)?;
        let a = gaussian(&mut rng, players, rank);
        let c = gaussian(&mut rng, pair.court.cells(), rank);
        let d = gaussian(&mut rng, pair.defender.cells(), rank);
        let model = LowRankModel::new(layout, CpFactors::new(vec![a, c, d])?, bias)?;
        let mut spec = Self::new(model);
        spec.calibrate(signal, seed)?;
        Ok(spec)
    }

    /// Truth whose court pattern changes by quarter. Quarter `f` sees the
    /// court factor `C · diag(B[f, :])`, where `C` has orthonormal columns and
    /// the rows of `B` are unit vectors with pairwise correlation `rho`, so
    /// the four court blocks have pairwise correlation `rho`. Requires
    /// `rank >= 4`. A single shared court map cannot express this model.
    pub fn quarter_varying(
        players: usize,
        rank: usize,
        pair: ResolutionPair,
        rho: f64,
        bias: f64,
        signal: f64,
        seed: u64,
    ) -> Result<Self> {
        if rank < QUARTERS {
            return Err(Error::invalid(format!(
                "quarter-varying truth needs rank >= {QUARTERS}, got {rank}"
            )));
        }
        let f = QUARTERS as f64;
        if !(rho > -1.0 / (f - 1.0) && rho < 1.0) {
            return Err(Error::invalid(format!("correlation {rho} is not attainable")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = ModelLayout::new(Variant::St, players, QUARTERS, pair.court, pair.defender)?;
        let gram = DMatrix::<f64>::from_fn(QUARTERS, QUARTERS, |i, j| if i == j { 1.0 } else { rho });
        let l = gram
            .cholesky()
            .ok_or_else(|| Error::Numerical("block correlation matrix is not positive definite".into()))?
            .l();
        let q = orthonormal_columns(&mut rng, rank, QUARTERS);
        let b = Matrix::from_fn(QUARTERS, rank, |i, k| {
            (0..QUARTERS).map(|j| l[(i, j)] * q.get(k, j)).sum()
        });
        let a = gaussian(&mut rng, players, rank);
        let c = orthonormal_columns(&mut rng, pair.court.cells(), rank);
        let d = gaussian(&mut rng, pair.defender.cells(), rank);
        let model = LowRankModel::new(layout, CpFactors::new(vec![a, b, c, d])?, bias)?;
        let mut spec = Self::new(model);
        spec.calibrate(signal, seed)?;
        Ok(spec)
    }

    /// Rescales the player factor so the interaction logit has standard
    /// deviation `signal` on a pilot sample.
    fn calibrate(&mut self, signal: f64, seed: u64) -> Result<()> {
        if !(signal > 0.0 && signal.is_finite()) {
            return Err(Error::invalid(format!("signal {signal} must be positive")));
        }
        let pilot = generate(self, 4000, seed ^ 0x5eed)?;
        let enc = self.encoder();
        let stage = self.stage();
        let bias = self.model.bias;
        let z: Vec<f64> = pilot
            .iter()
            .map(|s| Ok(self.model.logit(&enc.encode(s, &stage)?)? - bias))
            .collect::<Result<_>>()?;
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
        if sd == 0.0 {
            return Err(Error::Numerical("planted model has no signal to calibrate".into()));
        }
        for v in self.model.factors.factors[0].data.iter_mut() {
            *v *= signal / sd;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.model.layout;
        if self.defender_grid.resolution != l.defender {
            return Err(Error::Shape(format!(
                "defender grid {} does not match the planted {}",
                self.defender_grid.resolution, l.defender
            )));
        }
        self.defender_grid.validate()?;
        self.geometry.validate()?;
        let (lo, hi) = self.defender_count;
        if lo > hi {
            return Err(Error::invalid(format!("defender count range {lo}..={hi} is empty")));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::invalid(format!("label noise {} outside [0, 0.5)", self.label_noise)));
        }
        match &self.player_contexts {
            Some(pc) => {
                if pc.len() != l.players {
                    return Err(Error::Shape(format!(
                        "{} player contexts for {} players",
                        pc.len(),
                        l.players
                    )));
                }
                if pc.iter().any(|&c| c as usize >= l.contexts) {
                    return Err(Error::OutOfRange("player context beyond the planted contexts".into()));
                }
            }
            None if l.contexts != 1 && l.contexts != QUARTERS => {
                return Err(Error::invalid(format!(
                    "{} contexts need an explicit player-context assignment",
                    l.contexts
                )));
            }
            None => {}
        }
        Ok(())
    }

    /// Encoder reproducing the planted model's inputs.
    pub fn encoder(&self) -> Encoder {
        Encoder {
            geometry: self.geometry,
            defender_grid: self.defender_grid,
            variant: self.model.layout.variant,
            contexts: self.model.layout.contexts,
        }
    }

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

    /// Raw ids written for the generated players.
    pub fn player_map(&self) -> PlayerMap {
        PlayerMap::from_ids((0..self.model.layout.players as i64).map(|i| FIRST_PLAYER_ID + i))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Draws `n` samples. Identical seeds give identical samples.
pub fn generate(spec: &PlantedSpec, n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let l = &spec.model.layout;
    let encoder = spec.encoder();
    let stage = spec.stage();
    let grid = &spec.defender_grid;
    let res: GridRes = grid.resolution;
    let (cell_h, cell_w) = (
        grid.extent_ft.0 / res.rows as f64,
        grid.extent_ft.1 / res.cols as f64,
    );
    // Offsets stay a little inside the grid so none falls off an edge.
    let margin = 1e-3;
    let frontal = (
        -(grid.anchor.1 as f64) * cell_h + margin,
        (res.rows - grid.anchor.1) as f64 * cell_h - margin,
    );
    let lateral = (
        -(grid.anchor.0 as f64) * cell_w + margin,
        (res.cols - grid.anchor.0) as f64 * cell_w - margin,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for idx in 0..n {
        let player = rng.random_range(0..l.players);
        let (quarter, context) = match &spec.player_contexts {
            Some(pc) => (rng.random_range(1..=QUARTERS as u8), pc[player]),
            None => {
                let q = rng.random_range(1..=QUARTERS as u8);
                (q, u32::from(q - 1))
            }
        };
        let bh = loop {
            let p = (
                rng.random_range(0.0..spec.geometry.width_ft),
                rng.random_range(0.0..spec.geometry.depth_ft),
            );
            if (p.0 - BASKET.0).hypot(p.1 - BASKET.1) > 1e-6 {
                break p;
            }
        };
        let (ux, uy) = {
            let (dx, dy) = (BASKET.0 - bh.0, BASKET.1 - bh.1);
            let n = dx.hypot(dy);
            (dx / n, dy / n)
        };
        let count = rng.random_range(spec.defender_count.0..=spec.defender_count.1);
        let defenders = (0..count)
            .map(|_| {
                let f = rng.random_range(frontal.0..frontal.1);
                let s = rng.random_range(lateral.0..lateral.1);
                // Lateral axis is (uy, -ux).
                (bh.0 + f * ux + s * uy, bh.1 + f * uy - s * ux)
            })
            .collect();
        let mut sample = LabeledSample {
            game_id: format!("synth-{seed}-{:04}", idx / 2000),
            quarter,
            timestamp_s: rng.random_range(0.0..720.0),
            player: player as u32,
            context,
            bh_pos: bh,
            basket_pos: BASKET,
            defenders,
            label: 0,
        };
        let enc = encoder.encode(&sample, &stage)?;
        let p = noisy(sigmoid(spec.model.logit(&enc)?), spec.label_noise);
        sample.label = u8::from(rng.random::<f64>() < p);
        out.push(sample);
    }
    Ok(out)
}

fn noisy(p: f64, flip: f64) -> f64 {
    flip + (1.0 - 2.0 * flip) * p
}

/// Exact probability that the generator labels `sample` positive.
pub fn bayes_oracle(spec: &PlantedSpec, sample: &LabeledSample) -> Result<f64> {
    let enc = spec.encoder().encode(sample, &spec.stage())?;
    Ok(noisy(sigmoid(spec.model.logit(&enc)?), spec.label_noise))
}

/// Oracle probabilities for many samples.
pub fn bayes_scores(spec: &PlantedSpec, samples: &[LabeledSample]) -> Result<Vec<f64>> {
    let encs = spec.encoder().encode_all(samples, &spec.stage())?;
    encs.iter()
        .map(|e| Ok(noisy(sigmoid(spec.model.logit(e)?), spec.label_noise)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use crate::trainer::{metrics_from_scores, tune_threshold_scores};

    fn pair(c: (usize, usize), d: (usize, usize)) -> ResolutionPair {
        ResolutionPair {
            court: GridRes::new(c.0, c.1),
            defender: GridRes::new(d.0, d.1),
        }
    }

    fn base_spec(bias: f64) -> PlantedSpec {
        PlantedSpec::base(20, 3, pair((8, 10), (6, 6)), bias, 2.0, 11).unwrap()
    }

    #[test]
    fn saturated_negative_bias_gives_all_zero_labels() {
        let mut spec = base_spec(-20.0);
        for f in spec.model.factors.factors.iter_mut() {
            f.data.fill(0.0);
        }
        let s = generate(&spec, 2000, 1).unwrap();
        assert!(s.iter().all(|s| s.label == 0));
    }

    #[test]
    fn positive_rate_matches_mean_probability() {
        let spec = base_spec(-1.0);
        let s = generate(&spec, 100_000, 2).unwrap();
        let p = bayes_scores(&spec, &s).unwrap();
        let expected: f64 = p.iter().sum();
        let var: f64 = p.iter().map(|p| p * (1.0 - p)).sum();
        let got = s.iter().filter(|s| s.label == 1).count() as f64;
        assert!((got - expected).abs() < 3.0 * var.sqrt(), "{got} vs {expected}");
    }

    #[test]
    fn same_seed_same_samples() {
        let spec = base_spec(-1.0);
        assert_eq!(generate(&spec, 500, 3).unwrap(), generate(&spec, 500, 3).unwrap());
        assert_ne!(generate(&spec, 500, 3).unwrap(), generate(&spec, 500, 4).unwrap());
    }

    #[test]
    fn players_are_uniform() {
        let spec = base_spec(0.0);
        let s = generate(&spec, 100_000, 5).unwrap();
        let mut counts = [0usize; 20];
        for x in &s {
            counts[x.player as usize] += 1;
        }
        let e = 100_000.0 / 20.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 99.9th percentile of chi-squared with 19 degrees of freedom.
        assert!(chi2 < 43.82, "chi2 = {chi2}");
    }

    #[test]
    fn zero_factors_give_one_half() {
        let mut spec = base_spec(0.0);
        for f in spec.model.factors.factors.iter_mut() {
            f.data.fill(0.0);
        }
        spec.model.bias = 0.0;
        for s in generate(&spec, 100, 6).unwrap() {
            assert_eq!(bayes_oracle(&spec, &s).unwrap(), 0.5);
        }
    }

    #[test]
    fn oracle_equals_planted_model() {
        let spec = base_spec(-0.5);
        let model = Model::LowRank(spec.model.clone());
        let enc = spec.encoder();
        for s in generate(&spec, 200, 7).unwrap() {
            let p = model.probability(&enc.encode(&s, &spec.stage()).unwrap()).unwrap();
            let o = bayes_oracle(&spec, &s).unwrap();
            assert!((p - o).abs() < 1e-12);
            assert!(o > 0.0 && o < 1.0);
        }
    }

    #[test]
    fn defenders_land_inside_the_grid() {
        let spec = base_spec(0.0);
        let enc = spec.encoder();
        for s in generate(&spec, 500, 8).unwrap() {
            let e = enc.encode(&s, &spec.stage()).unwrap();
            assert!(!e.defenders.is_empty());
            assert!(e.defenders.len() <= s.defenders.len());
        }
    }

    #[test]
    fn oracle_beats_perturbed_predictors() {
        let spec = base_spec(-1.5);
        let s = generate(&spec, 20_000, 9).unwrap();
        let labels: Vec<u8> = s.iter().map(|s| s.label).collect();
        let oracle = bayes_scores(&spec, &s).unwrap();
        let t = tune_threshold_scores(&oracle, &labels).unwrap();
        let best = metrics_from_scores(&oracle, &labels, t).unwrap().f1;
        let mut other = spec.clone();
        let a = &mut other.model.factors.factors[0];
        for v in a.data.iter_mut().step_by(2) {
            *v = -*v;
        }
        let worse = bayes_scores(&other, &s).unwrap();
        let t2 = tune_threshold_scores(&worse, &labels).unwrap();
        assert!(metrics_from_scores(&worse, &labels, t2).unwrap().f1 < best);
    }

    #[test]
    fn quarter_blocks_have_requested_correlation() {
        for rho in [0.0, 0.3] {
            let spec = PlantedSpec::quarter_varying(10, 5, pair((8, 10), (6, 6)), rho, -1.0, 2.0, 3)
                .unwrap();
            let b = spec.model.b().unwrap();
            let c = spec.model.c();
            let block = |f: usize| -> Vec<f64> {
                (0..c.rows)
                    .flat_map(|r| (0..c.cols).map(move |k| (r, k)))
                    .map(|(r, k)| c.get(r, k) * b.get(f, k))
                    .collect()
            };
            let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
            for f in 0..4 {
                for g in 0..4 {
                    let (x, y) = (block(f), block(g));
                    let corr = dot(&x, &y) / (dot(&x, &x) * dot(&y, &y)).sqrt();
                    let want = if f == g { 1.0 } else { rho };
                    assert!((corr - want).abs() < 1e-9, "{f},{g}: {corr}");
                }
            }
        }
        assert!(PlantedSpec::quarter_varying(10, 3, pair((8, 10), (6, 6)), 0.3, 0.0, 1.0, 0).is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = base_spec(-1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("planted.json");
        spec.save(&path).unwrap();
        assert_eq!(PlantedSpec::load(&path).unwrap(), spec);
    }

    #[test]
    fn player_contexts_drive_sample_context() {
        let mut spec = PlantedSpec::quarter_varying(6, 4, pair((4, 5), (6, 6)), 0.0, 0.0, 1.0, 1).unwrap();
        spec.player_contexts = Some(vec![0, 1, 2, 3, 0, 1]);
        for s in generate(&spec, 300, 2).unwrap() {
            assert_eq!(s.context, [0, 1, 2, 3, 0, 1][s.player as usize]);
        }
        spec.player_contexts = Some(vec![0; 5]);
        assert!(generate(&spec, 10, 2).is_err());
    }
}
