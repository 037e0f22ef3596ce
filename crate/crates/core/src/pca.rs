//! Principal-component analysis via power iteration with deflation, plus a
//! tie-aware Spearman rank correlation. Used to examine how the learned
//! metadata embedding organizes acquisition parameters.

use crate::error::{CoreError, Result};

/// Mean vector, principal axes, and explained variances of a dataset.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm principal axes, strongest first. The entry of largest
    /// magnitude in each axis is made positive so results are deterministic.
    pub components: Vec<Vec<f64>>,
    /// Sample variance captured by each axis (covariance eigenvalues).
    pub variances: Vec<f64>,
}

impl Pca {
    /// Coordinates of `x` along the principal axes.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(CoreError::shape(format!(
                "project: vector length {} vs fitted dimension {}",
                x.len(),
                self.mean.len()
            )));
        }
        Ok(self
            .components
            .iter()
            .map(|c| {
                x.iter()
                    .zip(c.iter().zip(&self.mean))
                    .map(|(&v, (&ci, &mi))| (v - mi) * ci)
                    .sum()
            })
            .collect())
    }
}

fn mat_vec(m: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|i| (0..d).map(|j| m[i * d + j] * v[j]).sum())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

/// Fixes the sign so the largest-magnitude entry is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Dominant eigenpair of a symmetric PSD matrix by power iteration. The
/// start vector is the largest column, which always overlaps the dominant
/// eigenspace for a PSD matrix.
fn dominant_eigenpair(m: &[f64], d: usize, tol: f64, max_iter: usize) -> Result<(f64, Vec<f64>)> {
    let mut v = {
        let mut best = 0usize;
        let mut best_norm = -1.0f64;
        for j in 0..d {
            let n: f64 = (0..d).map(|i| m[i * d + j] * m[i * d + j]).sum::<f64>();
            if n > best_norm {
                best_norm = n;
                best = j;
            }
        }
        let col: Vec<f64> = (0..d).map(|i| m[i * d + best]).collect();
        let n = norm(&col);
        if n == 0.0 {
            // Zero matrix: any unit vector is an eigenvector with value 0.
            let mut e = vec![0.0; d];
            e[0] = 1.0;
            return Ok((0.0, e));
        }
        col.iter().map(|&x| x / n).collect::<Vec<f64>>()
    };
    for _ in 0..max_iter {
        let mut next = mat_vec(m, d, &v);
        let n = norm(&next);
        if n == 0.0 {
            // v is entirely in the null space; eigenvalue 0.
            return Ok((0.0, v));
        }
        next.iter_mut().for_each(|x| *x /= n);
        let align: f64 = next.iter().zip(&v).map(|(&a, &b)| a * b).sum();
        if align < 0.0 {
            next.iter_mut().for_each(|x| *x = -*x);
        }
        let delta: f64 = next
            .iter()
            .zip(&v)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        v = next;
        if delta < tol {
            let mv = mat_vec(m, d, &v);
            let lambda: f64 = v.iter().zip(&mv).map(|(&a, &b)| a * b).sum();
            return Ok((lambda.max(0.0), v));
        }
    }
    Err(CoreError::numerical(format!(
        "power iteration did not converge within {max_iter} iterations"
    )))
}

/// Fits the top `k` principal components of row-vector samples using the
/// sample covariance (n - 1 normalization).
pub fn fit_pca(data: &[Vec<f64>], k: usize, tol: f64, max_iter: usize) -> Result<Pca> {
    if data.is_empty() {
        return Err(CoreError::validation("pca needs at least one sample"));
    }
    let d = data[0].len();
    if d == 0 {
        return Err(CoreError::validation("pca samples must be non-empty"));
    }
    if data.iter().any(|r| r.len() != d) {
        return Err(CoreError::shape("pca samples have inconsistent lengths"));
    }
    if k == 0 || k > d {
        return Err(CoreError::validation(format!(
            "component count {k} must be in 1..={d}"
        )));
    }
    let n = data.len();
    let mut mean = vec![0.0f64; d];
    for row in data {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut cov = vec![0.0f64; d * d];
    for row in data {
        let c: Vec<f64> = row.iter().zip(&mean).map(|(&x, &m)| x - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += c[i] * c[j] / denom;
            }
        }
    }

    let mut components = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for _ in 0..k {
        let (lambda, mut v) = dominant_eigenpair(&cov, d, tol, max_iter)?;
        // Deflate: remove the captured direction from the covariance.
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        canonical_sign(&mut v);
        components.push(v);
        variances.push(lambda);
    }
    Ok(Pca {
        mean,
        components,
        variances,
    })
}

/// Average ranks (1-based), assigning tied values the mean of their ranks.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0usize;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties (the Pearson
/// correlation of the rank vectors). Errors if either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CoreError::shape(format!(
            "spearman: lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(CoreError::validation("spearman needs at least two pairs"));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut num = 0.0f64;
    let mut va = 0.0f64;
    let mut vb = 0.0f64;
    for i in 0..a.len() {
        let da = ra[i] - ma;
        let db = rb[i] - mb;
        num += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(CoreError::numerical(
            "spearman undefined for a constant input",
        ));
    }
    Ok(num / (va * vb).sqrt())
}
