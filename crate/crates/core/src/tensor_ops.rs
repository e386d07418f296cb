//! Dense tensors, CP factor sets and CP-ALS.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// `selfᵀ self`, a cols x cols matrix.
    pub fn gram(&self) -> Matrix {
        let k = self.cols;
        let mut g = Matrix::zeros(k, k);
        for r in 0..self.rows {
            let row = self.row(r);
            for a in 0..k {
                for b in 0..k {
                    g.data[a * k + b] += row[a] * row[b];
                }
            }
        }
        g
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("invalid tensor shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!(
                "{} values for shape {shape:?}",
                values.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::Shape(format!(
                "{}-index into a {}-mode tensor",
                index.len(),
                self.shape.len()
            )));
        }
        let mut off = 0;
        for (m, (&i, &n)) in index.iter().zip(&self.shape).enumerate() {
            if i >= n {
                return Err(Error::OutOfRange(format!("index {i} >= {n} on mode {m}")));
            }
            off = off * n + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.values[self.offset(index)?])
    }

    pub fn frobenius(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// CP factor set: one `mode_size x rank` matrix per mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpFactors {
    pub rank: usize,
    pub factors: Vec<Matrix>,
}

impl CpFactors {
    pub fn new(factors: Vec<Matrix>) -> Result<Self> {
        let rank = factors
            .first()
            .map(|f| f.cols)
            .ok_or_else(|| Error::Shape("CP factor set with no modes".into()))?;
        if rank == 0 {
            return Err(Error::Shape("CP rank must be positive".into()));
        }
        if let Some(bad) = factors.iter().find(|f| f.cols != rank) {
            return Err(Error::Shape(format!(
                "factor with {} columns in a rank-{rank} set",
                bad.cols
            )));
        }
        Ok(Self { rank, factors })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.rows).collect()
    }
}

/// Sums the rank-1 outer products of `factors`.
pub fn cp_reconstruct(factors: &CpFactors) -> DenseTensor {
    let shape = factors.shape();
    let k = factors.rank;
    let n: usize = shape.iter().product();
    let mut values = vec![0.0; n];
    let mut index = vec![0usize; shape.len()];
    let mut prod = vec![0.0; k];
    for v in values.iter_mut() {
        prod.fill(1.0);
        for (m, &i) in index.iter().enumerate() {
            let row = factors.factors[m].row(i);
            for (p, &x) in prod.iter_mut().zip(row) {
                *p *= x;
            }
        }
        *v = prod.iter().sum();
        increment(&mut index, &shape);
    }
    DenseTensor { shape, values }
}

fn increment(index: &mut [usize], shape: &[usize]) {
    for m in (0..index.len()).rev() {
        index[m] += 1;
        if index[m] < shape[m] {
            return;
        }
        index[m] = 0;
    }
}

/// Matricized-tensor times Khatri-Rao product for `mode`.
fn mttkrp(x: &DenseTensor, factors: &[Matrix], mode: usize, rank: usize) -> Matrix {
    let shape = x.shape();
    let mut out = Matrix::zeros(shape[mode], rank);
    let mut index = vec![0usize; shape.len()];
    let mut prod = vec![0.0; rank];
    for &v in x.values() {
        if v != 0.0 {
            prod.fill(v);
            for (m, &i) in index.iter().enumerate() {
                if m == mode {
                    continue;
                }
                for (p, &f) in prod.iter_mut().zip(factors[m].row(i)) {
                    *p *= f;
                }
            }
            for (o, &p) in out.row_mut(index[mode]).iter_mut().zip(&prod) {
                *o += p;
            }
        }
        increment(&mut index, shape);
    }
    out
}

const ALS_RIDGE: f64 = 1e-8;

/// Options for [`cp_als`].
#[derive(Clone, Copy, Debug)]
pub struct AlsOptions {
    pub rank: usize,
    pub max_iters: usize,
    /// Stop when the relative drop in reconstruction error falls below this.
    pub tol: f64,
    pub seed: u64,
}

/// Result of [`cp_als`].
#[derive(Clone, Debug)]
pub struct AlsOutcome {
    pub factors: CpFactors,
    /// Relative Frobenius reconstruction error after each sweep.
    pub errors: Vec<f64>,
}

impl AlsOutcome {
    pub fn final_error(&self) -> f64 {
        self.errors.last().copied().unwrap_or(f64::NAN)
    }
}

/// CP decomposition by alternating least squares from a seeded
/// uniform(-0.5, 0.5) start. Iteration stops once the relative improvement
/// drops below `opts.tol`, so the recorded errors never increase.
pub fn cp_als(x: &DenseTensor, opts: AlsOptions) -> Result<AlsOutcome> {
    if opts.rank == 0 {
        return Err(Error::invalid("CP rank must be at least 1"));
    }
    if !x.is_finite() {
        return Err(Error::Numerical("tensor to decompose has non-finite entries".into()));
    }
    let shape = x.shape().to_vec();
    let k = opts.rank;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut factors: Vec<Matrix> = shape
        .iter()
        .map(|&n| Matrix::from_fn(n, k, |_, _| rng.random_range(-0.5..0.5)))
        .collect();
    let norm = x.frobenius();
    let rel_error = |factors: &[Matrix]| -> f64 {
        let recon = cp_reconstruct(&CpFactors {
            rank: k,
            factors: factors.to_vec(),
        });
        let diff: f64 = recon
            .values()
            .iter()
            .zip(x.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            diff / norm
        } else {
            diff
        }
    };

    let mut errors = Vec::new();
    let mut prev = f64::INFINITY;
    for _ in 0..opts.max_iters {
        let before = factors.clone();
        for mode in 0..shape.len() {
            let m = mttkrp(x, &factors, mode, k);
            let mut v = DMatrix::from_element(k, k, 1.0);
            for (other, f) in factors.iter().enumerate() {
                if other != mode {
                    let g = f.gram();
                    for a in 0..k {
                        for b in 0..k {
                            v[(a, b)] *= g.get(a, b);
                        }
                    }
                }
            }
            for a in 0..k {
                v[(a, a)] += ALS_RIDGE;
            }
            factors[mode] = solve_rows(&m, v)?;
        }
        let err = rel_error(&factors);
        if !err.is_finite() {
            return Err(Error::Numerical("CP-ALS produced a non-finite error".into()));
        }
        // At the ridge-limited floor a sweep can raise the error by a few
        // ulps; such a sweep is discarded and iteration ends.
        if err > prev {
            factors = before;
            break;
        }
        errors.push(err);
        let improvement = if prev.is_finite() && prev > 0.0 {
            (prev - err) / prev
        } else if prev.is_finite() {
            0.0
        } else {
            f64::INFINITY
        };
        prev = err;
        if improvement < opts.tol {
            break;
        }
    }
    Ok(AlsOutcome {
        factors: CpFactors { rank: k, factors },
        errors,
    })
}

/// Solves `U v = m` for every row of `U`, with `v` symmetric positive
/// (semi)definite.
fn solve_rows(m: &Matrix, v: DMatrix<f64>) -> Result<Matrix> {
    let k = v.nrows();
    let mut out = Matrix::zeros(m.rows, k);
    let solve: Box<dyn Fn(DVector<f64>) -> Option<DVector<f64>>> = match v.clone().cholesky() {
        Some(ch) => Box::new(move |b| Some(ch.solve(&b))),
        None => {
            let lu = v.lu();
            Box::new(move |b| lu.solve(&b))
        }
    };
    for r in 0..m.rows {
        let b = DVector::from_row_slice(m.row(r));
        let x = solve(b).ok_or_else(|| Error::Numerical("singular ALS normal equations".into()))?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("CP-ALS produced NaN factors".into()));
        }
        out.row_mut(r).copy_from_slice(x.as_slice());
    }
    Ok(out)
}

/// Column matching between two CP factor sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    /// `permutation[j]` is the estimated column matched to truth column `j`.
    pub permutation: Vec<usize>,
    /// `signs[m][j]` is the sign of the mode-`m` cosine of pair `j`.
    pub signs: Vec<Vec<f64>>,
    /// Per-pair congruence: product over modes of |cosine|.
    pub cosines: Vec<f64>,
    pub mean_cosine: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Greedily matches estimated components to true ones by the largest
/// congruence (product of per-mode |cosine|), resolving CP's permutation and
/// sign ambiguity.
pub fn align_factors(est: &CpFactors, truth: &CpFactors) -> Result<Alignment> {
    if est.shape() != truth.shape() || est.rank != truth.rank {
        return Err(Error::Shape(format!(
            "cannot align rank-{} {:?} with rank-{} {:?}",
            est.rank,
            est.shape(),
            truth.rank,
            truth.shape()
        )));
    }
    let k = est.rank;
    let modes = est.factors.len();
    let cos: Vec<Vec<Vec<f64>>> = (0..modes)
        .map(|m| {
            let e: Vec<Vec<f64>> = (0..k).map(|c| est.factors[m].column(c)).collect();
            (0..k)
                .map(|j| {
                    let t = truth.factors[m].column(j);
                    e.iter().map(|ec| cosine(ec, &t)).collect()
                })
                .collect()
        })
        .collect();
    let score = |j: usize, e: usize| -> f64 { (0..modes).map(|m| cos[m][j][e].abs()).product() };

    let mut permutation = vec![usize::MAX; k];
    let mut used = vec![false; k];
    for _ in 0..k {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for j in (0..k).filter(|&j| permutation[j] == usize::MAX) {
            for e in (0..k).filter(|&e| !used[e]) {
                let s = score(j, e);
                if s > best.0 {
                    best = (s, j, e);
                }
            }
        }
        permutation[best.1] = best.2;
        used[best.2] = true;
    }
    let signs = (0..modes)
        .map(|m| {
            (0..k)
                .map(|j| if cos[m][j][permutation[j]] < 0.0 { -1.0 } else { 1.0 })
                .collect()
        })
        .collect();
    let cosines: Vec<f64> = (0..k).map(|j| score(j, permutation[j])).collect();
    let mean_cosine = cosines.iter().sum::<f64>() / k as f64;
    Ok(Alignment {
        permutation,
        signs,
        cosines,
        mean_cosine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn random_factors(shape: &[usize], k: usize, seed: u64) -> CpFactors {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        CpFactors::new(
            shape
                .iter()
                .map(|&n| Matrix::from_fn(n, k, |_, _| normal.sample(&mut rng)))
                .collect(),
        )
        .unwrap()
    }

    fn opts(rank: usize, max_iters: usize) -> AlsOptions {
        AlsOptions {
            rank,
            max_iters,
            tol: 1e-12,
            seed: 3,
        }
    }

    #[test]
    fn rank_one_recovery() {
        let f = random_factors(&[3, 4, 5], 1, 1);
        let x = cp_reconstruct(&f);
        let out = cp_als(&x, opts(1, 200)).unwrap();
        assert!(out.final_error() < 1e-6, "{}", out.final_error());
    }

    #[test]
    fn overcomplete_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DenseTensor::from_vec(&[2, 2, 2], (0..8).map(|_| rng.random()).collect()).unwrap();
        let out = cp_als(&x, opts(8, 2000)).unwrap();
        assert!(out.final_error() < 1e-6, "{}", out.final_error());
    }

    #[test]
    fn random_rank_three_recovery_and_monotone_error() {
        let truth = random_factors(&[4, 5, 6], 3, 2);
        let x = cp_reconstruct(&truth);
        let out = cp_als(&x, opts(3, 500)).unwrap();
        assert!(out.final_error() < 1e-4, "{}", out.final_error());
        for w in out.errors.windows(2) {
            assert!(w[1] <= w[0] + 1e-10);
        }
        let recon = cp_reconstruct(&out.factors);
        for (a, b) in recon.values().iter().zip(x.values()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let x = cp_reconstruct(&random_factors(&[3, 4, 5], 2, 5));
        let a = cp_als(&x, opts(2, 20)).unwrap();
        let b = cp_als(&x, opts(2, 20)).unwrap();
        assert_eq!(a.factors, b.factors);
    }

    #[test]
    fn rejects_nan() {
        let x = DenseTensor::from_vec(&[1, 2], vec![1.0, f64::NAN]).unwrap();
        assert!(cp_als(&x, opts(1, 5)).is_err());
    }

    #[test]
    fn zero_factors_reconstruct_zero() {
        let f = CpFactors::new(vec![Matrix::zeros(2, 2), Matrix::zeros(3, 2)]).unwrap();
        assert!(cp_reconstruct(&f).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_vectors_give_single_entry() {
        let e = |n: usize, i: usize| Matrix::from_fn(n, 1, |r, _| if r == i { 1.0 } else { 0.0 });
        let f = CpFactors::new(vec![e(2, 1), e(3, 2), e(4, 0)]).unwrap();
        let t = cp_reconstruct(&f);
        for (off, &v) in t.values().iter().enumerate() {
            let expected = if off == t.offset(&[1, 2, 0]).unwrap() { 1.0 } else { 0.0 };
            assert_eq!(v, expected);
        }
    }

    #[test]
    fn reconstruction_is_multilinear() {
        let f = random_factors(&[2, 3, 4], 2, 11);
        let mut g = f.clone();
        for r in 0..g.factors[1].rows {
            let v = g.factors[1].get(r, 0) * 3.0;
            g.factors[1].set(r, 0, v);
        }
        let only = |f: &CpFactors, k: usize| {
            let cols = f
                .factors
                .iter()
                .map(|m| Matrix::from_fn(m.rows, 1, |r, _| m.get(r, k)))
                .collect();
            cp_reconstruct(&CpFactors::new(cols).unwrap())
        };
        let a = only(&f, 0);
        let b = only(&g, 0);
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((3.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn align_identity() {
        let f = random_factors(&[4, 5], 3, 4);
        let a = align_factors(&f, &f).unwrap();
        assert_eq!(a.permutation, vec![0, 1, 2]);
        assert!(a.signs.iter().flatten().all(|&s| s == 1.0));
        assert!((a.mean_cosine - 1.0).abs() < 1e-12);
    }

    #[test]
    fn align_swapped_and_negated() {
        let truth = random_factors(&[4, 5], 2, 6);
        let mut est = truth.clone();
        for m in est.factors.iter_mut() {
            for r in 0..m.rows {
                let (a, b) = (m.get(r, 0), m.get(r, 1));
                m.set(r, 0, b);
                m.set(r, 1, a);
            }
        }
        for r in 0..est.factors[0].rows {
            let v = est.factors[0].get(r, 0);
            est.factors[0].set(r, 0, -v);
        }
        let a = align_factors(&est, &truth).unwrap();
        assert_eq!(a.permutation, vec![1, 0]);
        // Truth column 1 is est column 0, negated in mode 0.
        assert_eq!(a.signs[0], vec![1.0, -1.0]);
        assert_eq!(a.signs[1], vec![1.0, 1.0]);
        assert!((a.mean_cosine - 1.0).abs() < 1e-12);
    }

    #[test]
    fn align_noisy_copy() {
        let truth = random_factors(&[20, 30], 3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut est = truth.clone();
        for m in est.factors.iter_mut() {
            for v in m.data.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        assert!(align_factors(&est, &truth).unwrap().mean_cosine > 0.99);
    }

    #[test]
    fn align_zero_column_contributes_zero() {
        let truth = random_factors(&[3, 3], 1, 1);
        let est = CpFactors::new(vec![Matrix::zeros(3, 1), Matrix::zeros(3, 1)]).unwrap();
        assert_eq!(align_factors(&est, &truth).unwrap().mean_cosine, 0.0);
    }

    #[test]
    fn tensor_offset_checks_bounds() {
        let t = DenseTensor::zeros(&[2, 3]);
        assert_eq!(t.offset(&[1, 2]).unwrap(), 5);
        assert!(t.offset(&[2, 0]).is_err());
        assert!(t.offset(&[0]).is_err());
    }
}
