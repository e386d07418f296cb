//! Canonical sample files, shot labeling, dataset splits and synergy tables.
//!
//! A sample file holds one JSON object per line:
//!
//! ```text
//! {"game_id":"0021500001","quarter":1,"t":12.4,"player":201566,
//!  "bh":[31.2,20.5],"basket":[25.0,5.25],"defenders":[[30.1,18.0]],"label":0}
//! ```
//!
//! Positions are in feet. Raw player ids are densified to `0..I` in ascending
//! id order at load time; the mapping travels with every trained model.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One frame of tracking data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackingFrame {
    pub game_id: String,
    pub quarter: u8,
    pub timestamp_s: f64,
    pub ballhandler_id: u32,
    pub bh_pos: (f64, f64),
    pub basket_pos: (f64, f64),
    pub defenders: Vec<(f64, f64)>,
}

/// A shot event.
#[derive(Clone, Debug, PartialEq)]
pub struct Shot {
    pub player: u32,
    pub game_id: String,
    pub quarter: u8,
    pub timestamp_s: f64,
}

/// A frame with its dense player index and shoot-within-horizon label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub game_id: String,
    pub quarter: u8,
    pub timestamp_s: f64,
    pub player: u32,
    /// Quarter index 0..=3 after ingestion; pipelines may replace it with a
    /// playstyle cluster.
    pub context: u32,
    pub bh_pos: (f64, f64),
    pub basket_pos: (f64, f64),
    pub defenders: Vec<(f64, f64)>,
    pub label: u8,
}

/// Dense index to raw player id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlayerMap {
    ids: Vec<i64>,
}

impl PlayerMap {
    /// Builds the map from raw ids in ascending order.
    pub fn from_ids(ids: impl IntoIterator<Item = i64>) -> Self {
        let mut ids: Vec<i64> = ids.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn raw(&self, dense: u32) -> Option<i64> {
        self.ids.get(dense as usize).copied()
    }

    pub fn dense(&self, raw: i64) -> Option<u32> {
        self.ids.binary_search(&raw).ok().map(|i| i as u32)
    }

    pub fn ids(&self) -> &[i64] {
        &self.ids
    }

    /// Re-indexes samples densified under `self` onto `target`.
    pub fn translate(&self, samples: &mut [LabeledSample], target: &PlayerMap) -> Result<()> {
        let mut missing = Vec::new();
        for s in samples.iter_mut() {
            let raw = self
                .raw(s.player)
                .ok_or_else(|| Error::OutOfRange(format!("dense player {}", s.player)))?;
            match target.dense(raw) {
                Some(d) => s.player = d,
                None => missing.push(raw),
            }
        }
        if !missing.is_empty() {
            missing.sort_unstable();
            missing.dedup();
            return Err(Error::invalid(format!("players not known to the model: {missing:?}")));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    game_id: String,
    quarter: u8,
    t: f64,
    player: i64,
    bh: [f64; 2],
    basket: [f64; 2],
    defenders: Vec<[f64; 2]>,
    label: u8,
}

fn check_record(r: &SampleRecord) -> std::result::Result<(), String> {
    if !(1..=4).contains(&r.quarter) {
        return Err(format!("quarter {} outside 1..=4", r.quarter));
    }
    if !(r.t.is_finite() && r.t >= 0.0) {
        return Err(format!("timestamp {} must be finite and non-negative", r.t));
    }
    if r.label > 1 {
        return Err(format!("label {} is not 0 or 1", r.label));
    }
    let finite = |p: &[f64; 2]| p[0].is_finite() && p[1].is_finite();
    if !finite(&r.bh) || !finite(&r.basket) || !r.defenders.iter().all(finite) {
        return Err("non-finite position".into());
    }
    Ok(())
}

/// Reads canonical JSONL samples.
pub fn parse_samples(path: impl AsRef<Path>) -> Result<(Vec<LabeledSample>, PlayerMap)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_samples(BufReader::new(file), &path.display().to_string())
}

/// [`parse_samples`] over any reader; `name` labels error messages.
pub fn read_samples(reader: impl Read, name: &str) -> Result<(Vec<LabeledSample>, PlayerMap)> {
    let mut records = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io(name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: name.to_string(),
            line: n + 1,
            msg,
        };
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        check_record(&rec).map_err(parse_err)?;
        records.push(rec);
    }
    let map = PlayerMap::from_ids(records.iter().map(|r| r.player));
    let samples = records
        .into_iter()
        .map(|r| LabeledSample {
            player: map.dense(r.player).expect("id collected above"),
            context: u32::from(r.quarter - 1),
            game_id: r.game_id,
            quarter: r.quarter,
            timestamp_s: r.t,
            bh_pos: (r.bh[0], r.bh[1]),
            basket_pos: (r.basket[0], r.basket[1]),
            defenders: r.defenders.iter().map(|d| (d[0], d[1])).collect(),
            label: r.label,
        })
        .collect();
    Ok((samples, map))
}

/// Writes samples in the canonical format, restoring raw player ids.
pub fn write_samples(
    out: impl Write,
    samples: &[LabeledSample],
    map: &PlayerMap,
) -> Result<()> {
    let mut w = BufWriter::new(out);
    for s in samples {
        let rec = SampleRecord {
            game_id: s.game_id.clone(),
            quarter: s.quarter,
            t: s.timestamp_s,
            player: map
                .raw(s.player)
                .ok_or_else(|| Error::OutOfRange(format!("dense player {}", s.player)))?,
            bh: [s.bh_pos.0, s.bh_pos.1],
            basket: [s.basket_pos.0, s.basket_pos.1],
            defenders: s.defenders.iter().map(|d| [d.0, d.1]).collect(),
            label: s.label,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io("<sample output>", e))?;
    }
    w.flush().map_err(|e| Error::io("<sample output>", e))
}

pub fn save_samples(path: impl AsRef<Path>, samples: &[LabeledSample], map: &PlayerMap) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_samples(file, samples, map)
}

fn sort_key_le(a: (&str, u8, f64), b: (&str, u8, f64)) -> bool {
    (a.0, a.1) < (b.0, b.1) || ((a.0, a.1) == (b.0, b.1) && a.2 <= b.2)
}

/// Labels each frame 1 iff its ball-handler shoots in the same game and
/// quarter at a time in `(t, t + horizon_s]`.
pub fn label_frames(
    frames: &[TrackingFrame],
    shots: &[Shot],
    horizon_s: f64,
) -> Result<Vec<LabeledSample>> {
    if !(horizon_s > 0.0 && horizon_s.is_finite()) {
        return Err(Error::invalid(format!("horizon must be positive, got {horizon_s}")));
    }
    for (i, w) in frames.windows(2).enumerate() {
        let a = (w[0].game_id.as_str(), w[0].quarter, w[0].timestamp_s);
        let b = (w[1].game_id.as_str(), w[1].quarter, w[1].timestamp_s);
        if !sort_key_le(a, b) {
            return Err(Error::invalid(format!("frames not sorted at index {}", i + 1)));
        }
    }
    for (i, w) in shots.windows(2).enumerate() {
        let a = (w[0].game_id.as_str(), w[0].quarter, w[0].timestamp_s);
        let b = (w[1].game_id.as_str(), w[1].quarter, w[1].timestamp_s);
        if !sort_key_le(a, b) {
            return Err(Error::invalid(format!("shots not sorted at index {}", i + 1)));
        }
    }
    let mut by_key: HashMap<(&str, u8, u32), Vec<f64>> = HashMap::new();
    for s in shots {
        by_key
            .entry((s.game_id.as_str(), s.quarter, s.player))
            .or_default()
            .push(s.timestamp_s);
    }
    frames
        .iter()
        .map(|f| {
            if !(1..=4).contains(&f.quarter) {
                return Err(Error::invalid(format!("quarter {} outside 1..=4", f.quarter)));
            }
            let t = f.timestamp_s;
            let shoots = by_key
                .get(&(f.game_id.as_str(), f.quarter, f.ballhandler_id))
                .is_some_and(|times| {
                    // First shot strictly after t.
                    let i = times.partition_point(|&s| s <= t);
                    times.get(i).is_some_and(|&s| s <= t + horizon_s)
                });
            Ok(LabeledSample {
                game_id: f.game_id.clone(),
                quarter: f.quarter,
                timestamp_s: t,
                player: f.ballhandler_id,
                context: u32::from(f.quarter - 1),
                bh_pos: f.bh_pos,
                basket_pos: f.basket_pos,
                defenders: f.defenders.clone(),
                label: u8::from(shoots),
            })
        })
        .collect()
}

/// Train / validation / test partition.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
    pub seed: u64,
}

/// Shuffles with a seeded generator and cuts at the rounded ratio
/// boundaries.
pub fn split_dataset<T: Clone>(
    samples: &[T],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit<T>> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<T>>();
    Ok(DatasetSplit {
        train: pick(&order[..n_train]),
        validation: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
        seed,
    })
}

pub const PLAY_TYPES: usize = 11;

/// One player's synergy play-type profile.
#[derive(Clone, Debug, PartialEq)]
pub struct SynergyRow {
    pub player: i64,
    pub frequencies: [f64; PLAY_TYPES],
    pub points_per_possession: [f64; PLAY_TYPES],
    pub total_volume: f64,
}

impl SynergyRow {
    /// Frequencies, then points per possession, then volume.
    pub fn features(&self) -> [f64; 2 * PLAY_TYPES + 1] {
        let mut out = [0.0; 2 * PLAY_TYPES + 1];
        out[..PLAY_TYPES].copy_from_slice(&self.frequencies);
        out[PLAY_TYPES..2 * PLAY_TYPES].copy_from_slice(&self.points_per_possession);
        out[2 * PLAY_TYPES] = self.total_volume;
        out
    }
}

/// Expected header columns, in canonical order.
pub fn synergy_columns() -> Vec<String> {
    let mut cols = vec!["player".to_string()];
    cols.extend((1..=PLAY_TYPES).map(|i| format!("freq_{i}")));
    cols.extend((1..=PLAY_TYPES).map(|i| format!("ppp_{i}")));
    cols.push("volume".into());
    cols
}

pub fn parse_synergy_table(path: impl AsRef<Path>) -> Result<Vec<SynergyRow>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_synergy_table(file, &path.display().to_string())
}

/// Reads a synergy CSV. Columns are located by header name, so any column
/// order is accepted, but every expected column must be present exactly once.
pub fn read_synergy_table(reader: impl Read, name: &str) -> Result<Vec<SynergyRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let expected = synergy_columns();
    let mut position = Vec::with_capacity(expected.len());
    for col in &expected {
        let found: Vec<usize> = header
            .iter()
            .enumerate()
            .filter(|(_, h)| h == col)
            .map(|(i, _)| i)
            .collect();
        match found.as_slice() {
            [i] => position.push(*i),
            [] => return Err(Error::invalid(format!("{name}: header is missing column `{col}`"))),
            _ => return Err(Error::invalid(format!("{name}: column `{col}` appears twice"))),
        }
    }
    if header.len() != expected.len() {
        return Err(Error::invalid(format!(
            "{name}: header has {} columns, expected {}",
            header.len(),
            expected.len()
        )));
    }
    let mut rows = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        let player_field = rec.get(position[0]).unwrap_or("");
        let player: i64 = player_field.parse().map_err(|_| Error::Parse {
            path: name.into(),
            line,
            msg: format!("bad player id `{player_field}`"),
        })?;
        if rec.len() != expected.len() {
            return Err(Error::Parse {
                path: name.into(),
                line,
                msg: format!(
                    "player {player}: {} features, expected {}",
                    rec.len().saturating_sub(1),
                    2 * PLAY_TYPES + 1
                ),
            });
        }
        let mut vals = [0.0f64; 2 * PLAY_TYPES + 1];
        for (j, v) in vals.iter_mut().enumerate() {
            let field = &rec[position[j + 1]];
            *v = field.parse().map_err(|_| Error::Parse {
                path: name.into(),
                line,
                msg: format!("player {player}: bad value `{field}` in `{}`", expected[j + 1]),
            })?;
        }
        let bad = |msg: String| Error::Parse {
            path: name.into(),
            line,
            msg: format!("player {player}: {msg}"),
        };
        if let Some(f) = vals[..PLAY_TYPES].iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(bad(format!("frequency {f} outside [0, 1]")));
        }
        if let Some(p) = vals[PLAY_TYPES..].iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(bad(format!("negative or non-finite value {p}")));
        }
        let mut row = SynergyRow {
            player,
            frequencies: [0.0; PLAY_TYPES],
            points_per_possession: [0.0; PLAY_TYPES],
            total_volume: vals[2 * PLAY_TYPES],
        };
        row.frequencies.copy_from_slice(&vals[..PLAY_TYPES]);
        row.points_per_possession
            .copy_from_slice(&vals[PLAY_TYPES..2 * PLAY_TYPES]);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(player: i64, label: u8) -> String {
        format!(
            r#"{{"game_id":"g1","quarter":2,"t":3.5,"player":{player},"bh":[10.0,20.0],"basket":[25.0,5.25],"defenders":[[11.0,19.0]],"label":{label}}}"#
        )
    }

    #[test]
    fn empty_file() {
        let (s, m) = read_samples("".as_bytes(), "x").unwrap();
        assert!(s.is_empty());
        assert_eq!(m.len(), 0);
    }

    #[test]
    fn single_line() {
        let (s, m) = read_samples(line(5, 1).as_bytes(), "x").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].label, 1);
        assert_eq!(s[0].context, 1);
        assert_eq!(m.raw(0), Some(5));
    }

    #[test]
    fn sparse_ids_are_densified() {
        let text = format!("{}\n{}\n{}\n", line(97, 0), line(12, 1), line(97, 1));
        let (s, m) = read_samples(text.as_bytes(), "x").unwrap();
        assert_eq!(s.iter().map(|x| x.player).collect::<Vec<_>>(), vec![1, 0, 1]);
        assert_eq!(m.ids(), &[12, 97]);
        let mut out = Vec::new();
        write_samples(&mut out, &s, &m).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{}\nnot json\n", line(1, 0));
        match read_samples(text.as_bytes(), "f.jsonl") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_field_is_error() {
        let text = line(1, 0).replace("\"label\"", "\"extra\":1,\"label\"");
        assert!(read_samples(text.as_bytes(), "x").is_err());
    }

    #[test]
    fn bad_quarter_is_error() {
        let text = line(1, 0).replace("\"quarter\":2", "\"quarter\":5");
        assert!(read_samples(text.as_bytes(), "x").is_err());
    }

    fn frame(t: f64) -> TrackingFrame {
        TrackingFrame {
            game_id: "g".into(),
            quarter: 1,
            timestamp_s: t,
            ballhandler_id: 3,
            bh_pos: (10.0, 10.0),
            basket_pos: (25.0, 5.25),
            defenders: vec![],
        }
    }

    fn shot(t: f64) -> Shot {
        Shot {
            player: 3,
            game_id: "g".into(),
            quarter: 1,
            timestamp_s: t,
        }
    }

    #[test]
    fn shot_window() {
        let label = |shot_t: f64| label_frames(&[frame(10.0)], &[shot(shot_t)], 1.0).unwrap()[0].label;
        assert_eq!(label(10.5), 1);
        assert_eq!(label(11.5), 0);
        assert_eq!(label(11.0), 1);
        assert_eq!(label(10.0), 0);
    }

    #[test]
    fn boundary_against_brute_force() {
        let frames = [frame(9.0), frame(10.0), frame(11.0)];
        let shots = [shot(11.0)];
        let got: Vec<u8> = label_frames(&frames, &shots, 1.0)
            .unwrap()
            .iter()
            .map(|s| s.label)
            .collect();
        let brute: Vec<u8> = frames
            .iter()
            .map(|f| {
                u8::from(shots.iter().any(|s| {
                    s.timestamp_s > f.timestamp_s && s.timestamp_s <= f.timestamp_s + 1.0
                }))
            })
            .collect();
        assert_eq!(got, brute);
        assert_eq!(got, vec![0, 1, 0]);
    }

    #[test]
    fn other_player_or_quarter_does_not_count() {
        let mut s = shot(10.5);
        s.player = 4;
        assert_eq!(label_frames(&[frame(10.0)], &[s], 1.0).unwrap()[0].label, 0);
        let mut s = shot(10.5);
        s.quarter = 2;
        assert_eq!(label_frames(&[frame(10.0)], &[s], 1.0).unwrap()[0].label, 0);
    }

    #[test]
    fn unsorted_is_error() {
        assert!(label_frames(&[frame(2.0), frame(1.0)], &[], 1.0).is_err());
        assert!(label_frames(&[frame(1.0)], &[shot(2.0), shot(1.0)], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn shrinking_horizon_never_adds_positives(
            times in proptest::collection::vec(0.0..60.0f64, 1..20),
            shot_times in proptest::collection::vec(0.0..60.0f64, 0..10),
            h in 0.01..3.0f64, shrink in 0.0..1.0f64,
        ) {
            let mut times = times;
            times.sort_by(f64::total_cmp);
            let mut shot_times = shot_times;
            shot_times.sort_by(f64::total_cmp);
            let frames: Vec<_> = times.iter().map(|&t| frame(t)).collect();
            let shots: Vec<_> = shot_times.iter().map(|&t| shot(t)).collect();
            let wide = label_frames(&frames, &shots, h).unwrap();
            let narrow = label_frames(&frames, &shots, h * shrink.max(1e-3)).unwrap();
            for (w, n) in wide.iter().zip(&narrow) {
                prop_assert!(n.label <= w.label);
            }
        }

        #[test]
        fn split_is_a_partition(n in 0usize..200, seed in 0u64..1000) {
            let ids: Vec<usize> = (0..n).collect();
            let s = split_dataset(&ids, (0.7, 0.2, 0.1), seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, ids);
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ids: Vec<usize> = (0..10).collect();
        let s = split_dataset(&ids, (0.8, 0.1, 0.1), 0).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, split_dataset(&ids, (0.8, 0.1, 0.1), 0).unwrap());
        let third = 1.0 / 3.0;
        let s = split_dataset(&ids, (third, third, third), 4).unwrap();
        for len in [s.train.len(), s.validation.len(), s.test.len()] {
            assert!((len as f64 - 10.0 / 3.0).abs() <= 1.0);
        }
    }

    #[test]
    fn split_of_empty_is_empty() {
        let s = split_dataset::<u8>(&[], (0.8, 0.1, 0.1), 0).unwrap();
        assert!(s.train.is_empty() && s.validation.is_empty() && s.test.is_empty());
    }

    #[test]
    fn split_rejects_bad_ratios() {
        assert!(split_dataset(&[1, 2], (0.5, 0.5, 0.5), 0).is_err());
        assert!(split_dataset(&[1, 2], (1.0, 0.0, 0.0), 0).is_err());
    }

    fn synergy_text(rows: &[Vec<String>]) -> String {
        let mut s = synergy_columns().join(",");
        s.push('\n');
        for r in rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    fn zero_row(player: i64) -> Vec<String> {
        std::iter::once(player.to_string())
            .chain(std::iter::repeat_n("0".to_string(), 23))
            .collect()
    }

    #[test]
    fn synergy_zero_row() {
        let rows = read_synergy_table(synergy_text(&[zero_row(7)]).as_bytes(), "s").unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].features(), [0.0; 23]);
    }

    #[test]
    fn synergy_two_players() {
        let rows =
            read_synergy_table(synergy_text(&[zero_row(1), zero_row(2)]).as_bytes(), "s").unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.features().len() == 23));
    }

    #[test]
    fn synergy_missing_header_column() {
        let text = synergy_text(&[]).replace(",volume", "");
        assert!(read_synergy_table(text.as_bytes(), "s").is_err());
    }

    #[test]
    fn synergy_short_row_names_player() {
        let mut r = zero_row(42);
        r.pop();
        let err = read_synergy_table(synergy_text(&[r]).as_bytes(), "s").unwrap_err();
        assert!(err.to_string().contains("player 42"), "{err}");
    }

    #[test]
    fn synergy_columns_by_header_name() {
        let mut cols = synergy_columns();
        cols.swap(1, 23);
        let mut vals = zero_row(3);
        vals[1] = "5.5".into(); // now the volume column
        let text = format!("{}\n{}\n", cols.join(","), vals.join(","));
        let rows = read_synergy_table(text.as_bytes(), "s").unwrap();
        assert_eq!(rows[0].total_volume, 5.5);
        assert_eq!(rows[0].frequencies[0], 0.0);
    }
}
