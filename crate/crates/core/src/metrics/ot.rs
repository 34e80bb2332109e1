use crate::autodiff::Tensor;
use crate::rng;
use crate::scalar::Scalar;

use super::MetricsError;

/// Largest sample count accepted by [`w2_exact`].
pub const W2_EXACT_CAP: usize = 512;

/// Minimum-cost perfect matching of a square cost matrix (row-major, `n × n`).
///
/// Shortest augmenting paths with potentials, O(n³). Returns the column
/// assigned to each row.
pub fn assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n × n");
    // 1-based arrays; index 0 is the virtual source column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            let row = &cost[(i0 - 1) * n..i0 * n];
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[owner[j] - 1] = j - 1;
    }
    out
}

fn rows_f64<T: Scalar>(x: &Tensor<T>) -> (usize, usize, Vec<f64>) {
    let n = x.shape()[0];
    let d = x.numel() / n.max(1);
    (n, d, x.data().iter().map(|v| v.f64()).collect())
}

/// Exact empirical W2: `√(min_σ Σ‖a_i − b_σ(i)‖² / n)`.
pub fn w2_exact<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T, MetricsError> {
    let (n, d, a) = rows_f64(a);
    let (m, e, b) = rows_f64(b);
    if n != m || d != e {
        return Err(MetricsError::Size(format!("{n}×{d} vs {m}×{e}")));
    }
    if n > W2_EXACT_CAP {
        return Err(MetricsError::Cap { n, cap: W2_EXACT_CAP });
    }
    if n == 0 {
        return Err(MetricsError::Empty("w2_exact"));
    }
    if d == 1 {
        // the monotone coupling is optimal on the line
        return Ok(T::of(w2_sorted(a, b)));
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..n {
            let bj = &b[j * d..(j + 1) * d];
            cost[i * n + j] = ai.iter().zip(bj).map(|(p, q)| (p - q) * (p - q)).sum();
        }
    }
    let sigma = assignment(&cost, n);
    let total: f64 = sigma.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(T::of((total / n as f64).sqrt()))
}

fn w2_sorted(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let s: f64 = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum();
    (s / a.len() as f64).sqrt()
}

/// Mean over `n_proj` random unit directions of the 1-D W2 between projections.
pub fn w2_sliced<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, n_proj: usize, seed: u64) -> Result<T, MetricsError> {
    let (n, d, a) = rows_f64(a);
    let (m, e, b) = rows_f64(b);
    if n != m || d != e {
        return Err(MetricsError::Size(format!("{n}×{d} vs {m}×{e}")));
    }
    if n == 0 || n_proj == 0 {
        return Err(MetricsError::Empty("w2_sliced"));
    }
    let mut r = rng::derive(seed, "sliced");
    let mut acc = 0.0;
    for _ in 0..n_proj {
        let mut dir: Vec<f64> = (0..d).map(|_| rng::normal(&mut r)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let project = |x: &[f64]| -> Vec<f64> { x.chunks(d).map(|row| row.iter().zip(&dir).map(|(p, q)| p * q).sum()).collect() };
        acc += w2_sorted(project(&a), project(&b));
    }
    Ok(T::of(acc / n_proj as f64))
}
