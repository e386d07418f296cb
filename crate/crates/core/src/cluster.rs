//! Playstyle clustering of synergy play-type features.
//!
//! Features are standardized per column, projected onto their leading
//! principal components and grouped with k-means. Cluster ids become the
//! context of the playstyle variants.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SynergyRow;
use crate::tensor_ops::Matrix;
use crate::trainer::Playstyles;

/// Column means and population standard deviations of a feature matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub stdev: Vec<f64>,
}

impl Scaler {
    /// Scales `x` column-wise; zero-variance columns become zeros.
    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols != self.mean.len() {
            return Err(Error::Shape(format!(
                "expected {} columns, got {}",
                self.mean.len(),
                x.cols
            )));
        }
        Ok(Matrix::from_fn(x.rows, x.cols, |r, c| {
            if self.stdev[c] > 0.0 {
                (x.get(r, c) - self.mean[c]) / self.stdev[c]
            } else {
                0.0
            }
        }))
    }
}

/// Standardizes every column to mean 0 and unit population variance.
pub fn standardize(x: &Matrix) -> Result<(Matrix, Scaler)> {
    if x.rows < 2 {
        return Err(Error::invalid(format!(
            "standardize needs at least 2 rows, got {}",
            x.rows
        )));
    }
    let n = x.rows as f64;
    let mut mean = vec![0.0; x.cols];
    let mut stdev = vec![0.0; x.cols];
    for c in 0..x.cols {
        let m = (0..x.rows).map(|r| x.get(r, c)).sum::<f64>() / n;
        let var = (0..x.rows).map(|r| (x.get(r, c) - m).powi(2)).sum::<f64>() / n;
        mean[c] = m;
        // Columns that are constant up to rounding are treated as constant.
        stdev[c] = if var.sqrt() > 1e-12 * m.abs().max(1.0) {
            var.sqrt()
        } else {
            0.0
        };
    }
    let scaler = Scaler { mean, stdev };
    Ok((scaler.transform(x)?, scaler))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// One unit-norm component per row, by descending variance.
    pub components: Matrix,
    pub explained_variance: Vec<f64>,
    /// Trace of the covariance matrix.
    pub total_variance: f64,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.rows
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| if self.total_variance > 0.0 { v / self.total_variance } else { 0.0 })
            .collect()
    }

    /// `(x - mean) · componentsᵀ`.
    pub fn project(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols != self.mean.len() {
            return Err(Error::Shape(format!(
                "expected {} columns, got {}",
                self.mean.len(),
                x.cols
            )));
        }
        let comps = &self.components;
        Ok(Matrix::from_fn(x.rows, comps.rows, |r, k| {
            x.row(r)
                .iter()
                .zip(&self.mean)
                .zip(comps.row(k))
                .map(|((v, m), w)| (v - m) * w)
                .sum()
        }))
    }
}

/// Principal components of the population covariance of `x`.
///
/// Each component is signed so that its largest-magnitude entry is positive.
pub fn pca_fit(x: &Matrix, n_components: usize) -> Result<PcaModel> {
    if n_components == 0 {
        return Err(Error::invalid("n_components must be at least 1"));
    }
    if x.rows < n_components || x.cols < n_components {
        return Err(Error::invalid(format!(
            "cannot extract {n_components} components from a {}x{} matrix",
            x.rows, x.cols
        )));
    }
    let n = x.rows as f64;
    let d = x.cols;
    let mean: Vec<f64> = (0..d)
        .map(|c| (0..x.rows).map(|r| x.get(r, c)).sum::<f64>() / n)
        .collect();
    let centered = DMatrix::from_fn(x.rows, d, |r, c| x.get(r, c) - mean[c]);
    let cov = (centered.transpose() * &centered) / n;
    let total_variance = cov.trace();
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut components = Matrix::zeros(n_components, d);
    let mut explained_variance = Vec::with_capacity(n_components);
    for (k, &j) in order.iter().take(n_components).enumerate() {
        let v = eig.eigenvectors.column(j);
        let pivot = (0..d).fold(0, |best, i| if v[i].abs() > v[best].abs() { i } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            components.set(k, i, sign * v[i]);
        }
        explained_variance.push(eig.eigenvalues[j].max(0.0));
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        total_variance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansOptions {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub restarts: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            k: 7,
            seed: 0,
            max_iters: 300,
            restarts: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub centers: Matrix,
    pub assignment: Vec<u32>,
    pub inertia: f64,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_history: Vec<f64>,
    pub restart: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.rows {
        let d = sq_dist(p, centers.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seed(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows;
    let mut centers = Matrix::zeros(k, points.cols);
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centers.row(c)));
        }
    }
    centers
}

fn lloyd(points: &Matrix, mut centers: Matrix, max_iters: usize) -> (Matrix, Vec<u32>, Vec<f64>) {
    let (n, k, dim) = (points.rows, centers.rows, points.cols);
    let mut assignment = vec![u32::MAX; n];
    let mut history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, a) in assignment.iter_mut().enumerate() {
            let (c, d) = nearest(points.row(i), &centers);
            inertia += d;
            if *a != c as u32 {
                *a = c as u32;
                changed = true;
            }
        }
        history.push(inertia);
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a as usize] += 1;
            for (s, v) in sums.row_mut(a as usize).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        // An empty cluster keeps its previous center.
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                let cnt = count as f64;
                for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / cnt;
                }
            }
        }
    }
    (centers, assignment, history)
}

/// k-means++ seeding followed by Lloyd iterations, best of several restarts.
///
/// Restarts run in parallel; each draws from its own stream of the seeded
/// generator and ties in inertia go to the lowest restart index.
pub fn kmeans(points: &Matrix, opts: &KMeansOptions) -> Result<KMeansFit> {
    if opts.k == 0 || opts.restarts == 0 {
        return Err(Error::invalid("k and restarts must be at least 1"));
    }
    if points.rows < opts.k {
        return Err(Error::invalid(format!(
            "k-means needs at least k = {} points, got {}",
            opts.k, points.rows
        )));
    }
    if points.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("k-means input contains non-finite values"));
    }
    let fits: Vec<KMeansFit> = (0..opts.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(r as u64);
            let init = plus_plus_seed(points, opts.k, &mut rng);
            let (centers, assignment, history) = lloyd(points, init, opts.max_iters);
            let inertia = (0..points.rows)
                .map(|i| sq_dist(points.row(i), centers.row(assignment[i] as usize)))
                .sum();
            KMeansFit {
                centers,
                assignment,
                inertia,
                inertia_history: history,
                restart: r,
            }
        })
        .collect();
    let best = fits
        .into_iter()
        .reduce(|best, f| if f.inertia < best.inertia { f } else { best })
        .expect("at least one restart");
    Ok(best)
}

/// Mean silhouette coefficient over all points.
///
/// Points in singleton clusters score 0, as do points whose intra- and
/// nearest-cluster distances are both zero.
pub fn silhouette(points: &Matrix, assignment: &[u32]) -> Result<f64> {
    if assignment.len() != points.rows {
        return Err(Error::Shape(format!(
            "{} labels for {} points",
            assignment.len(),
            points.rows
        )));
    }
    let mut sizes: BTreeMap<u32, usize> = BTreeMap::new();
    for &a in assignment {
        *sizes.entry(a).or_default() += 1;
    }
    if sizes.len() < 2 {
        return Err(Error::invalid("silhouette needs at least 2 clusters"));
    }
    let labels: Vec<u32> = sizes.keys().copied().collect();
    let total: f64 = (0..points.rows)
        .into_par_iter()
        .map(|i| {
            let own = assignment[i];
            if sizes[&own] == 1 {
                return 0.0;
            }
            let mut sums: HashMap<u32, f64> = HashMap::new();
            for (j, &label) in assignment.iter().enumerate() {
                if j != i {
                    *sums.entry(label).or_default() +=
                        sq_dist(points.row(i), points.row(j)).sqrt();
                }
            }
            let a = sums.get(&own).copied().unwrap_or(0.0) / (sizes[&own] - 1) as f64;
            let b = labels
                .iter()
                .filter(|&&l| l != own)
                .map(|l| sums.get(l).copied().unwrap_or(0.0) / sizes[l] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / points.rows as f64)
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} labels", a.len(), b.len())));
    }
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let mut joint: HashMap<(u32, u32), f64> = HashMap::new();
    let mut rows: HashMap<u32, f64> = HashMap::new();
    let mut cols: HashMap<u32, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0;
        *rows.entry(x).or_default() += 1.0;
        *cols.entry(y).or_default() += 1.0;
    }
    let index: f64 = joint.values().map(|&v| choose2(v)).sum();
    let sum_a: f64 = rows.values().map(|&v| choose2(v)).sum();
    let sum_b: f64 = cols.values().map(|&v| choose2(v)).sum();
    let pairs = choose2(a.len() as f64);
    if pairs == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / pairs;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlaystyleOptions {
    pub kmeans: KMeansOptions,
    pub n_components: usize,
    /// One name per cluster id; `cluster_<id>` when absent.
    pub names: Option<Vec<String>>,
}

impl Default for PlaystyleOptions {
    fn default() -> Self {
        Self {
            kmeans: KMeansOptions::default(),
            n_components: 3,
            names: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub scaler: Scaler,
    pub pca: PcaModel,
    pub centers: Matrix,
    pub players: Vec<i64>,
    pub assignment: Vec<u32>,
    pub label_names: Vec<String>,
    pub inertia: f64,
    /// Silhouette of the projected points, absent when fewer than two
    /// clusters are occupied.
    pub silhouette: Option<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centers.rows
    }

    pub fn playstyles(&self) -> Playstyles {
        Playstyles {
            clusters: self.k(),
            by_player: self.players.iter().copied().zip(self.assignment.iter().copied()).collect(),
        }
    }

    /// Writes `player,cluster_id,cluster_name` rows in input order.
    pub fn write_assignments<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["player", "cluster_id", "cluster_name"])?;
        for (&p, &c) in self.players.iter().zip(&self.assignment) {
            w.write_record([p.to_string(), c.to_string(), self.label_names[c as usize].clone()])?;
        }
        w.flush().map_err(|e| Error::io("<assignments>", e))?;
        Ok(())
    }

    pub fn save_assignments(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_assignments(std::io::BufWriter::new(file))
    }
}

/// Standardize, project onto principal components and cluster.
pub fn assign_playstyles(rows: &[SynergyRow], opts: &PlaystyleOptions) -> Result<ClusterModel> {
    let k = opts.kmeans.k;
    if rows.len() < k {
        return Err(Error::invalid(format!(
            "need at least {k} players to form {k} playstyles, got {}",
            rows.len()
        )));
    }
    let mut seen = BTreeMap::new();
    let dups: Vec<String> = rows
        .iter()
        .filter(|r| seen.insert(r.player, ()).is_some())
        .map(|r| r.player.to_string())
        .collect();
    if !dups.is_empty() {
        return Err(Error::invalid(format!("duplicate synergy rows for players {}", dups.join(", "))));
    }
    let names = match &opts.names {
        Some(n) if n.len() != k => {
            return Err(Error::invalid(format!("{} cluster names for k = {k}", n.len())))
        }
        Some(n) => n.clone(),
        None => (0..k).map(|c| format!("cluster_{c}")).collect(),
    };
    let width = rows[0].features().len();
    let x = Matrix::from_vec(
        rows.len(),
        width,
        rows.iter().flat_map(|r| r.features()).collect(),
    )?;
    let (z, scaler) = standardize(&x)?;
    let pca = pca_fit(&z, opts.n_components)?;
    let proj = pca.project(&z)?;
    let fit = kmeans(&proj, &opts.kmeans)?;
    let silhouette = silhouette(&proj, &fit.assignment).ok();
    Ok(ClusterModel {
        scaler,
        pca,
        centers: fit.centers,
        players: rows.iter().map(|r| r.player).collect(),
        assignment: fit.assignment,
        label_names: names,
        inertia: fit.inertia,
        silhouette,
    })
}

#[derive(Deserialize)]
struct AssignmentRecord {
    player: i64,
    cluster_id: u32,
    #[allow(dead_code)]
    cluster_name: String,
}

/// Reads a `player,cluster_id,cluster_name` file. The cluster count is one
/// more than the largest id present.
pub fn parse_assignments(path: impl AsRef<Path>) -> Result<Playstyles> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut by_player = BTreeMap::new();
    for (i, rec) in r.deserialize::<AssignmentRecord>().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line,
            msg: e.to_string(),
        })?;
        if by_player.insert(rec.player, rec.cluster_id).is_some() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line,
                msg: format!("player {} assigned twice", rec.player),
            });
        }
    }
    let clusters = by_player.values().max().map_or(0, |&m| m as usize + 1);
    if clusters == 0 {
        return Err(Error::invalid(format!("{}: no assignments", path.display())));
    }
    Ok(Playstyles { clusters, by_player })
}
