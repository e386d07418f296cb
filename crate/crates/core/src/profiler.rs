//! Heatmap performance profiles from low-rank factors.
//!
//! Column `k` of the court factor is a spatial pattern shared by all players.
//! A player's profile weighs each pattern by `A[i,k]` (times `B[t,k]` for ST
//! models) and ranks the patterns by the magnitude of that weight.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::discretizer::GridRes;
use crate::error::{Error, Result};
use crate::model::{LowRankModel, SampleEncoding, Variant};
use crate::tensor_ops::Matrix;

pub const DEFAULT_TOP_N: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Factor column.
    pub component: usize,
    pub player: Option<u32>,
    /// ST context `t`.
    pub context: Option<u32>,
    /// Dynamic court block `f`.
    pub block: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// Court-shaped values, row-major.
    pub grid: Matrix,
    pub weight: f64,
    pub provenance: Provenance,
}

/// Heatmaps ordered by descending `|weight|`, ties by component index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    heatmaps: Vec<Heatmap>,
}

impl ProfileSet {
    pub fn new(mut heatmaps: Vec<Heatmap>) -> Self {
        heatmaps.sort_by(|a, b| {
            b.weight
                .abs()
                .total_cmp(&a.weight.abs())
                .then(a.provenance.component.cmp(&b.provenance.component))
        });
        Self { heatmaps }
    }

    pub fn heatmaps(&self) -> &[Heatmap] {
        &self.heatmaps
    }

    pub fn len(&self) -> usize {
        self.heatmaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heatmaps.is_empty()
    }

    pub fn truncate(mut self, n: usize) -> Self {
        self.heatmaps.truncate(n);
        self
    }
}

fn column_grid(c: &Matrix, k: usize, offset: usize, court: GridRes, scale: f64) -> Matrix {
    Matrix::from_fn(court.rows, court.cols, |r, col| {
        scale * c.get(offset + r * court.cols + col, k)
    })
}

fn check_player(model: &LowRankModel, player: u32) -> Result<()> {
    if player as usize >= model.layout.players {
        return Err(Error::OutOfRange(format!(
            "player {player} outside [0, {})",
            model.layout.players
        )));
    }
    Ok(())
}

/// Unweighted court patterns, each weighted by the mean player (and mean
/// context) loading.
pub fn general_heatmaps(model: &LowRankModel) -> Result<ProfileSet> {
    if model.layout.variant == Variant::Dynamic {
        return Err(Error::invalid(
            "dynamic models have one court factor per context; use context_heatmaps",
        ));
    }
    let (a, c) = (model.a(), model.c());
    let mean = |m: &Matrix, k: usize| m.column(k).iter().sum::<f64>() / m.rows as f64;
    let heatmaps = (0..model.rank())
        .map(|k| {
            let weight = mean(a, k) * model.b().map_or(1.0, |b| mean(b, k));
            Heatmap {
                grid: column_grid(c, k, 0, model.layout.court, 1.0),
                weight,
                provenance: Provenance {
                    component: k,
                    ..Provenance::default()
                },
            }
        })
        .collect();
    Ok(ProfileSet::new(heatmaps))
}

/// Weight-scaled court patterns of one player, top `top_n` by `|weight|`.
///
/// `context` is required for ST models and must be absent for base models.
pub fn player_profiles(
    model: &LowRankModel,
    player: u32,
    context: Option<u32>,
    top_n: usize,
) -> Result<ProfileSet> {
    check_player(model, player)?;
    let b = match (model.layout.variant, context) {
        (Variant::Dynamic, _) => {
            return Err(Error::invalid("dynamic models are profiled per context with context_heatmaps"))
        }
        (Variant::Base, None) => None,
        (Variant::Base, Some(t)) => {
            return Err(Error::invalid(format!("base models have no context, got {t}")))
        }
        (Variant::St, None) => return Err(Error::invalid("ST models need a context")),
        (Variant::St, Some(t)) if t as usize >= model.layout.contexts => {
            return Err(Error::OutOfRange(format!(
                "context {t} outside [0, {})",
                model.layout.contexts
            )))
        }
        (Variant::St, Some(t)) => model.b().map(|b| b.row(t as usize)),
    };
    let a = model.a().row(player as usize);
    let heatmaps = (0..model.rank())
        .map(|k| {
            let weight = a[k] * b.map_or(1.0, |b| b[k]);
            Heatmap {
                grid: column_grid(model.c(), k, 0, model.layout.court, weight),
                weight,
                provenance: Provenance {
                    component: k,
                    player: Some(player),
                    context,
                    block: None,
                },
            }
        })
        .collect();
    Ok(ProfileSet::new(heatmaps).truncate(top_n))
}

/// Per-block profiles of a dynamic model, keyed by block `f`.
pub fn context_heatmaps(
    model: &LowRankModel,
    player: u32,
    top_n: usize,
) -> Result<BTreeMap<u32, ProfileSet>> {
    if model.layout.variant != Variant::Dynamic {
        return Err(Error::invalid("context_heatmaps needs a dynamic model"));
    }
    check_player(model, player)?;
    let court = model.layout.court;
    let a = model.a().row(player as usize);
    Ok((0..model.layout.contexts as u32)
        .map(|f| {
            let heatmaps = (0..model.rank())
                .map(|k| Heatmap {
                    grid: column_grid(model.c(), k, f as usize * court.cells(), court, a[k]),
                    weight: a[k],
                    provenance: Provenance {
                        component: k,
                        player: Some(player),
                        context: None,
                        block: Some(f),
                    },
                })
                .collect();
            (f, ProfileSet::new(heatmaps).truncate(top_n))
        })
        .collect())
}

/// Logit of `enc` rebuilt from the full (untruncated) weighted profiles of
/// its player and context: `bias + Σ_h grid_h[d1] · Σ_{d2} D[d2, k_h]`.
pub fn logit_from_profiles(model: &LowRankModel, enc: &SampleEncoding) -> Result<f64> {
    model.layout.check(enc)?;
    let k = model.rank();
    let court = model.layout.court.cells();
    let (profiles, d1) = match model.layout.variant {
        Variant::Base => (player_profiles(model, enc.player, None, k)?, enc.court as usize),
        Variant::St => (
            player_profiles(model, enc.player, Some(enc.context), k)?,
            enc.court as usize,
        ),
        Variant::Dynamic => {
            let f = enc.court as usize / court;
            let mut sets = context_heatmaps(model, enc.player, k)?;
            (sets.remove(&(f as u32)).expect("block in range"), enc.court as usize % court)
        }
    };
    let d = model.d();
    let mut z = model.bias;
    for h in profiles.heatmaps() {
        let kk = h.provenance.component;
        let s: f64 = enc.defenders.iter().map(|&j| d.get(j as usize, kk)).sum();
        z += h.grid.data[d1] * s;
    }
    Ok(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Raster,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Raster => "ppm",
        }
    }
}

/// `<variant>_<player|general>_<context>_k<component>`.
pub fn file_stem(variant: &str, player: Option<&str>, context: Option<&str>, component: usize) -> String {
    format!(
        "{variant}_{}_{}_k{component}",
        player.unwrap_or("general"),
        context.unwrap_or("all")
    )
}

/// Rows of the grid as comma-separated values with 9 significant digits.
pub fn write_csv<W: Write>(grid: &Matrix, mut out: W) -> std::io::Result<()> {
    for r in 0..grid.rows {
        let line: Vec<String> = grid.row(r).iter().map(|v| format!("{v:.8e}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()
}

pub fn parse_csv(text: &str) -> Result<Matrix> {
    let mut rows = 0;
    let mut data = Vec::new();
    let mut cols = None;
    for (i, line) in text.lines().enumerate() {
        let vals = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: "<heatmap>".into(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        if *cols.get_or_insert(vals.len()) != vals.len() {
            return Err(Error::Parse {
                path: "<heatmap>".into(),
                line: i + 1,
                msg: "ragged row".into(),
            });
        }
        data.extend(vals);
        rows += 1;
    }
    Matrix::from_vec(rows, cols.unwrap_or(0), data)
}

/// Diverging colour for `v` in [-1, 1]: blue below zero, white at zero, red
/// above.
pub fn diverging_color(v: f64) -> [u8; 3] {
    let level = (255.0 * (1.0 - v.abs().min(1.0))).round() as u8;
    if v > 0.0 {
        [255, level, level]
    } else {
        [level, level, 255]
    }
}

/// Binary P6 pixmap with each cell drawn as a `scale`×`scale` block, colours
/// normalised by the grid's largest magnitude.
pub fn write_ppm<W: Write>(grid: &Matrix, scale: usize, mut out: W) -> Result<()> {
    if grid.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("heatmap contains non-finite values".into()));
    }
    let scale = scale.max(1);
    let max = grid.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (w, h) = (grid.cols * scale, grid.rows * scale);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(w * h * 3);
    for r in 0..grid.rows {
        let row: Vec<u8> = grid
            .row(r)
            .iter()
            .flat_map(|&v| {
                let c = diverging_color(if max > 0.0 { v / max } else { 0.0 });
                std::iter::repeat_n(c, scale).flatten()
            })
            .collect();
        for _ in 0..scale {
            bytes.extend_from_slice(&row);
        }
    }
    out.write_all(&bytes)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io("<raster>", e))
}

/// Pixels per heatmap cell in exported rasters.
pub const RASTER_SCALE: usize = 16;

pub fn export_heatmap(hm: &Heatmap, path: impl AsRef<Path>, format: ExportFormat) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    match format {
        ExportFormat::Csv => write_csv(&hm.grid, &mut w).map_err(|e| Error::io(path, e)),
        ExportFormat::Raster => write_ppm(&hm.grid, RASTER_SCALE, &mut w).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            e => e,
        }),
    }
}

/// Writes a CSV and a raster for every heatmap of `set` into `dir`, returning
/// the written paths.
pub fn export_profile_set(
    set: &ProfileSet,
    dir: impl AsRef<Path>,
    variant: &str,
    player: Option<&str>,
    context: Option<&str>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut written = Vec::new();
    for hm in set.heatmaps() {
        let stem = file_stem(variant, player, context, hm.provenance.component);
        for format in [ExportFormat::Csv, ExportFormat::Raster] {
            let path = dir.join(format!("{stem}.{}", format.extension()));
            export_heatmap(hm, &path, format)?;
            written.push(path);
        }
    }
    Ok(written)
}
