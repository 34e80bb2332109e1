use crate::models::TensorMap;
use crate::scalar::Scalar;

use super::MetricsError;

/// Global L2 norm over every gradient block.
pub fn grad_norm<T: Scalar>(grads: &TensorMap<T>) -> Result<T, MetricsError> {
    if grads.is_empty() {
        return Err(MetricsError::Empty("gradients"));
    }
    Ok(grads.values().map(|g| g.sq_norm()).sum::<T>().sqrt())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares line through `(x, ln y)`.
pub fn log_linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit, MetricsError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(MetricsError::Size(format!("{} abscissae, {} values", x.len(), y.len())));
    }
    if let Some(v) = y.iter().find(|v| !(**v > 0.0)) {
        return Err(MetricsError::Domain(format!("log of {v}")));
    }
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = ly.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(MetricsError::Domain("abscissae are all equal".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LinearFit { slope, intercept: my - slope * mx, r2 })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Rank correlation with averaged ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(MetricsError::Size(format!("{} vs {}", a.len(), b.len())));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let m = (n + 1.0) / 2.0;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - m) * (y - m)).sum();
    let va: f64 = ra.iter().map(|x| (x - m) * (x - m)).sum();
    let vb: f64 = rb.iter().map(|y| (y - m) * (y - m)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn grad_norm_examples() {
        let mut g = TensorMap::new();
        g.insert("a".into(), Tensor::<f64>::zeros(vec![3]));
        assert_eq!(grad_norm(&g).unwrap(), 0.0);
        g.insert("b".into(), Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        assert_eq!(grad_norm(&g).unwrap(), 5.0);
        g.insert("c".into(), Tensor::new(vec![1], vec![12.0]).unwrap());
        assert_eq!(grad_norm(&g).unwrap(), 13.0);
        assert!(grad_norm(&TensorMap::<f64>::new()).is_err());
    }

    #[test]
    fn exponential_decay_fits_exactly() {
        let x: Vec<f64> = (0..10).map(|i| i as f64 * 25.0).collect();
        let y: Vec<f64> = x.iter().map(|t| 0.8 * (-0.01 * t).exp()).collect();
        let fit = log_linear_fit(&x, &y).unwrap();
        assert!((fit.slope + 0.01).abs() < 1e-12 && (fit.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 90.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), Some(2.5));
    }
}
