use crate::autodiff::Tensor;
use crate::scalar::Scalar;

use super::MetricsError;

/// Regular per-dimension binning. Points outside the box fall in the edge bins.
#[derive(Clone, Debug, PartialEq)]
pub struct HistGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub bins: usize,
}

impl HistGrid {
    /// Box spanning mean ± `k`·std of the pooled samples in every dimension.
    pub fn pooled<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, bins: usize, k: f64) -> Result<Self, MetricsError> {
        let d = dims(a)?;
        if dims(b)? != d {
            return Err(MetricsError::Size(format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let mut lo = Vec::with_capacity(d);
        let mut hi = Vec::with_capacity(d);
        for j in 0..d {
            let vals: Vec<f64> = [a, b].iter().flat_map(|x| x.data().iter().skip(j).step_by(d).map(|v| v.f64())).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt().max(1e-12);
            lo.push(mean - k * std);
            hi.push(mean + k * std);
        }
        Ok(Self { lo, hi, bins })
    }

    fn cell(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        for (j, v) in x.iter().enumerate() {
            let w = (self.hi[j] - self.lo[j]) / self.bins as f64;
            let b = ((v - self.lo[j]) / w).floor().clamp(0.0, (self.bins - 1) as f64) as usize;
            idx = idx * self.bins + b;
        }
        idx
    }
}

fn dims<T: Scalar>(x: &Tensor<T>) -> Result<usize, MetricsError> {
    if x.shape()[0] == 0 || x.numel() == 0 {
        return Err(MetricsError::Empty("sample set"));
    }
    Ok(x.numel() / x.shape()[0])
}

fn rows<T: Scalar>(x: &Tensor<T>) -> impl Iterator<Item = Vec<f64>> + '_ {
    let d = x.numel() / x.shape()[0];
    x.data().chunks(d).map(|r| r.iter().map(|v| v.f64()).collect())
}

fn frequencies(cells: impl Iterator<Item = usize>, k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    let mut n = 0usize;
    for c in cells {
        counts[c] += 1;
        n += 1;
    }
    counts.into_iter().map(|c| c as f64 / n as f64).collect()
}

/// `½ Σ_bins |p̂_A − p̂_B|` on a shared grid.
pub fn tv_hist<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, grid: &HistGrid) -> Result<T, MetricsError> {
    let d = dims(a)?;
    if dims(b)? != d || grid.lo.len() != d || grid.hi.len() != d || grid.bins == 0 {
        return Err(MetricsError::Size(format!("samples {:?} / {:?} on a {}-d grid", a.shape(), b.shape(), grid.lo.len())));
    }
    let k = grid.bins.pow(d as u32);
    let pa = frequencies(rows(a).map(|r| grid.cell(&r)), k);
    let pb = frequencies(rows(b).map(|r| grid.cell(&r)), k);
    Ok(T::of(0.5 * pa.iter().zip(&pb).map(|(p, q)| (p - q).abs()).sum::<f64>()))
}

/// Disjoint, exhaustive cells of sample space.
#[derive(Clone, Debug, PartialEq)]
pub enum Partition {
    /// Nearest-centre cells.
    Voronoi { centers: Vec<Vec<f64>> },
    /// Intervals of a projection `⟨direction, x⟩` split at sorted interior `edges`.
    Quantile { direction: Vec<f64>, edges: Vec<f64> },
}

impl Partition {
    /// `k` equal-mass bins of the projection of `reference` onto `direction`.
    pub fn quantiles<T: Scalar>(reference: &Tensor<T>, direction: Vec<f64>, k: usize) -> Result<Self, MetricsError> {
        if dims(reference)? != direction.len() || k == 0 {
            return Err(MetricsError::Size("projection direction does not match samples".into()));
        }
        let mut proj: Vec<f64> = rows(reference).map(|r| r.iter().zip(&direction).map(|(p, q)| p * q).sum()).collect();
        proj.sort_by(f64::total_cmp);
        let edges = (1..k).map(|i| proj[(i * proj.len() / k).min(proj.len() - 1)]).collect();
        Ok(Self::Quantile { direction, edges })
    }

    pub fn cells(&self) -> usize {
        match self {
            Self::Voronoi { centers } => centers.len(),
            Self::Quantile { edges, .. } => edges.len() + 1,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Voronoi { centers } => centers.first().map_or(0, Vec::len),
            Self::Quantile { direction, .. } => direction.len(),
        }
    }

    /// Index of the cell holding `x`; ties go to the lower index.
    pub fn assign(&self, x: &[f64]) -> usize {
        match self {
            Self::Voronoi { centers } => {
                let d2 = |c: &Vec<f64>| c.iter().zip(x).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
                let mut best = 0;
                for (k, c) in centers.iter().enumerate() {
                    if d2(c) < d2(&centers[best]) {
                        best = k;
                    }
                }
                best
            }
            Self::Quantile { direction, edges } => {
                let p: f64 = direction.iter().zip(x).map(|(a, b)| a * b).sum();
                edges.partition_point(|&e| e <= p)
            }
        }
    }

    /// Fraction of rows of `x` in each cell.
    pub fn masses<T: Scalar>(&self, x: &Tensor<T>) -> Result<Vec<f64>, MetricsError> {
        if dims(x)? != self.dim() {
            return Err(MetricsError::Size(format!("{:?} against a {}-d partition", x.shape(), self.dim())));
        }
        Ok(frequencies(rows(x).map(|r| self.assign(&r)), self.cells()))
    }
}

/// `max_k |p̂_A(cell k) − p̂_B(cell k)|`.
pub fn mode_mass_gap<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, partition: &Partition) -> Result<T, MetricsError> {
    let pa = partition.masses(a)?;
    let pb = partition.masses(b)?;
    Ok(T::of(pa.iter().zip(&pb).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::GmmSpec;
    use crate::rng;

    #[test]
    fn identical_and_disjoint_tv() {
        let a = Tensor::new(vec![4, 1], vec![0.0, 0.1, 0.2, 0.3]).unwrap();
        let b = Tensor::new(vec![4, 1], vec![5.0, 5.1, 5.2, 5.3]).unwrap();
        let grid = HistGrid { lo: vec![-1.0], hi: vec![6.0], bins: 70 };
        assert_eq!(tv_hist(&a, &a, &grid).unwrap(), 0.0);
        assert_eq!(tv_hist(&a, &b, &grid).unwrap(), 1.0);
        assert!(matches!(tv_hist(&a, &Tensor::zeros(vec![2, 2]), &grid), Err(MetricsError::Size(_))));
    }

    #[test]
    fn all_in_one_cell_versus_uniform() {
        let g = GmmSpec::ring(8, 2.0, 0.01);
        let part = Partition::Voronoi { centers: g.means.clone() };
        let a = Tensor::from_fn(vec![80, 2], |i| if i % 2 == 0 { 2.0 } else { 0.0 });
        let b = Tensor::new(vec![8, 2], g.means.concat()).unwrap();
        assert!((mode_mass_gap(&a, &b, &part).unwrap() - 0.875).abs() < 1e-15);
    }

    #[test]
    fn same_distribution_small_gap() {
        let g = GmmSpec::ring(8, 2.0, 0.05);
        let part = Partition::Voronoi { centers: g.means.clone() };
        let (a, _) = g.sample::<f64>(4000, &mut rng::seeded(1));
        let (b, _) = g.sample::<f64>(4000, &mut rng::seeded(2));
        assert!(mode_mass_gap(&a, &b, &part).unwrap() < 0.03);
    }

    #[test]
    fn quantile_cells_have_equal_mass() {
        let x: Tensor<f64> = rng::normal_tensor(vec![1000, 3], &mut rng::seeded(4));
        let part = Partition::quantiles(&x, vec![1.0, 0.0, 0.0], 4).unwrap();
        let m = part.masses(&x).unwrap();
        assert!(m.iter().all(|v| (v - 0.25).abs() < 0.01), "{m:?}");
    }

    #[test]
    fn gap_bounded_by_tv_on_shared_binning() {
        // a partition made of whole histogram cells cannot exceed the histogram TV
        let mut r = rng::seeded(5);
        let a: Tensor<f64> = rng::normal_tensor(vec![500, 1], &mut r);
        let b: Tensor<f64> = rng::normal_tensor(vec![500, 1], &mut r).map(|v| v + 0.4);
        let grid = HistGrid { lo: vec![-4.0], hi: vec![4.0], bins: 16 };
        let part = Partition::Quantile { direction: vec![1.0], edges: vec![-1.0, 0.0, 2.5] };
        assert!(mode_mass_gap(&a, &b, &part).unwrap() <= tv_hist(&a, &b, &grid).unwrap() + 1e-12);
    }
}
