//! Dominant direction of a set of difference vectors and how well each
//! vector lines up with it.
//!
//! Matrices are `rows x dim` row-major `f64` slices.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng_from_seed;

pub const POWER_TOLERANCE: f64 = 1e-10;
pub const POWER_MAX_ITERATIONS: usize = 10_000;
/// Rows shorter than this carry no direction and are left out of the ratios.
pub const MIN_ROW_NORM: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    Float::sqrt(dot(a, a))
}

/// Cosine similarity; zero when either vector vanishes.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        (dot(a, b) / d).clamp(-1.0, 1.0)
    }
}

fn check_matrix(v: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || !v.len().is_multiple_of(dim) || v.is_empty() {
        return Err(Error::Input(format!(
            "matrix of {} values is not a whole number of rows of length {dim}",
            v.len()
        )));
    }
    Ok(v.len() / dim)
}

/// Unit direction `w` maximizing `sum_i (v_i . w)^2` and the coefficients
/// `c_i = v_i . w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub direction: Vec<f64>,
    pub coefficients: Vec<f64>,
    /// `sum_i c_i^2`, the top eigenvalue of `V^T V`.
    pub energy: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// First right-singular vector of `v` by power iteration on `V^T V`
/// (without centring the rows), oriented so that the coefficients sum to a
/// non-negative value.
pub fn align_vector(v: &[f64], dim: usize) -> Result<Alignment> {
    let rows = check_matrix(v, dim)?;
    let row = |i: usize| &v[i * dim..(i + 1) * dim];
    let (best, best_norm) = (0..rows)
        .map(|i| (i, norm(row(i))))
        .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    if best_norm <= 0.0 || best_norm.is_nan() {
        return Err(Error::Input("all difference vectors are zero; no direction is defined".into()));
    }
    // Largest row plus a small fixed tilt so the start is never exactly
    // orthogonal to the dominant direction.
    let mut x: Vec<f64> = row(best).iter().map(|&a| a / best_norm).collect();
    let tilt = 1e-2 / Float::sqrt(dim as f64);
    for (k, xi) in x.iter_mut().enumerate() {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        *xi += sign * tilt / (1.0 + k as f64 / dim as f64);
    }
    normalize(&mut x);
    let mut proj = vec![0.0; rows];
    let mut next = vec![0.0; dim];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < POWER_MAX_ITERATIONS {
        iterations += 1;
        for (i, p) in proj.iter_mut().enumerate() {
            *p = dot(row(i), &x);
        }
        next.iter_mut().for_each(|a| *a = 0.0);
        for (i, &p) in proj.iter().enumerate() {
            for (a, &b) in next.iter_mut().zip(row(i)) {
                *a += p * b;
            }
        }
        if normalize(&mut next) == 0.0 {
            return Err(Error::Input("difference vectors have no dominant direction".into()));
        }
        let delta = Float::sqrt(x.iter().zip(&next).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
        core::mem::swap(&mut x, &mut next);
        if delta < POWER_TOLERANCE {
            converged = true;
            break;
        }
    }
    let mut coefficients: Vec<f64> = (0..rows).map(|i| dot(row(i), &x)).collect();
    if coefficients.iter().sum::<f64>() < 0.0 {
        x.iter_mut().for_each(|a| *a = -*a);
        coefficients.iter_mut().for_each(|c| *c = -*c);
    }
    Ok(Alignment {
        energy: coefficients.iter().map(|c| c * c).sum(),
        direction: x,
        coefficients,
        iterations,
        converged,
    })
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = norm(x);
    if n > 0.0 {
        x.iter_mut().for_each(|a| *a /= n);
    }
    n
}

/// `|v_i . w| / |v_i|` for each row with norm at least [`MIN_ROW_NORM`].
#[derive(Debug, Clone, PartialEq)]
pub struct Ratios {
    pub values: Vec<f64>,
    /// Indices of the rows left out as (numerically) zero.
    pub excluded: Vec<usize>,
}

pub fn relative_ratios(v: &[f64], dim: usize, direction: &[f64]) -> Result<Ratios> {
    let rows = check_matrix(v, dim)?;
    if direction.len() != dim {
        return Err(Error::Input(format!("direction of length {} for rows of length {dim}", direction.len())));
    }
    let mut values = Vec::with_capacity(rows);
    let mut excluded = Vec::new();
    for i in 0..rows {
        let r = &v[i * dim..(i + 1) * dim];
        let n = norm(r);
        if n < MIN_ROW_NORM {
            excluded.push(i);
        } else {
            values.push((Float::abs(dot(r, direction)) / n).min(1.0));
        }
    }
    Ok(Ratios { values, excluded })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, Float::sqrt(var))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Ratios of `rows` standard-normal vectors in `dim` dimensions against
/// their own alignment direction, pooled over `trials`.
pub fn random_baseline(dim: usize, rows: usize, trials: usize, seed: u64) -> Result<BaselineStats> {
    let ratios = random_ratios(dim, rows, trials, seed)?;
    let (mean, std) = mean_std(&ratios);
    Ok(BaselineStats {
        mean,
        std,
        count: ratios.len(),
    })
}

/// Every pooled ratio behind [`random_baseline`].
pub fn random_ratios(dim: usize, rows: usize, trials: usize, seed: u64) -> Result<Vec<f64>> {
    if dim == 0 || rows == 0 || trials == 0 {
        return Err(Error::Config("baseline needs positive dim, rows and trials".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::with_capacity(rows * trials);
    let mut v = vec![0.0; rows * dim];
    for _ in 0..trials {
        for x in v.iter_mut() {
            *x = StandardNormal.sample(&mut rng);
        }
        let a = align_vector(&v, dim)?;
        out.extend(relative_ratios(&v, dim, &a.direction)?.values);
    }
    Ok(out)
}

/// Fixed-width bins over `[lo, hi]`; the top edge belongs to the last bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(bins: usize, lo: f64, hi: f64) -> Self {
        Histogram {
            lo,
            hi,
            counts: vec![0; bins.max(1)],
        }
    }

    /// 50 bins over `[-1, 1]`.
    pub fn cosine() -> Self {
        Self::new(50, -1.0, 1.0)
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    /// Adds `x`, clamped into range.
    pub fn add(&mut self, x: f64) {
        let bins = self.counts.len();
        let k = Float::floor((x - self.lo) / self.width());
        let k = if k.is_nan() { 0 } else { (k.max(0.0) as usize).min(bins - 1) };
        self.counts[k] += 1;
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = self.width();
        (0..self.counts.len()).map(|k| self.lo + (k as f64 + 0.5) * w).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Offsets `k * 0.05 * sqrt(dim)` for `k = -5..=5`.
pub fn perturbation_offsets(dim: usize) -> [f64; 11] {
    let step = 0.05 * Float::sqrt(dim as f64);
    core::array::from_fn(|i| (i as f64 - 5.0) * step)
}
