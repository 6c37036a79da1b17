//! Binned densities and the statistical comparisons used to confront
//! flux-quadrature predictions with trajectory-ensemble estimates.

use crate::error::{CoreError, Result};

/// Masses over consecutive bins, optionally with per-bin standard errors.
#[derive(Debug, Clone)]
pub struct BinnedDensity {
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
    pub stderr: Option<Vec<f64>>,
}

impl BinnedDensity {
    pub fn new(edges: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        if edges.len() != masses.len() + 1 {
            return Err(CoreError::IncompatibleBinning(format!(
                "{} edges for {} masses",
                edges.len(),
                masses.len()
            )));
        }
        if edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoreError::IncompatibleBinning(
                "edges must be strictly increasing".into(),
            ));
        }
        if masses.iter().any(|&m| m < 0.0 || !m.is_finite()) {
            return Err(CoreError::InvalidParameter(
                "masses must be finite and nonnegative".into(),
            ));
        }
        Ok(BinnedDensity {
            edges,
            masses,
            stderr: None,
        })
    }

    pub fn with_stderr(mut self, stderr: Vec<f64>) -> Result<Self> {
        if stderr.len() != self.masses.len() {
            return Err(CoreError::IncompatibleBinning(
                "stderr length does not match bins".into(),
            ));
        }
        self.stderr = Some(stderr);
        Ok(self)
    }

    pub fn total(&self) -> f64 {
        self.masses.iter().sum()
    }

    fn check_same_edges(&self, other: &BinnedDensity) -> Result<()> {
        if self.edges.len() != other.edges.len()
            || self
                .edges
                .iter()
                .zip(&other.edges)
                .any(|(a, b)| (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())))
        {
            return Err(CoreError::IncompatibleBinning(
                "bin edges differ".into(),
            ));
        }
        Ok(())
    }
}

/// Scale masses to unit total.
pub fn normalize(d: &BinnedDensity) -> Result<BinnedDensity> {
    let total = d.total();
    if total <= 0.0 {
        return Err(CoreError::DegenerateInput("zero total mass".into()));
    }
    let masses = d.masses.iter().map(|m| m / total).collect();
    let stderr = d
        .stderr
        .as_ref()
        .map(|s| s.iter().map(|e| e / total).collect());
    Ok(BinnedDensity {
        edges: d.edges.clone(),
        masses,
        stderr,
    })
}

/// `sum_k |a_k - b_k|` on identical binnings.
pub fn l1_distance(a: &BinnedDensity, b: &BinnedDensity) -> Result<f64> {
    a.check_same_edges(b)?;
    Ok(a.masses
        .iter()
        .zip(&b.masses)
        .map(|(x, y)| (x - y).abs())
        .sum())
}

/// Kolmogorov-Smirnov distance `max_k |CDF_a - CDF_b|` of the normalized
/// distributions on identical binnings.
pub fn ks_distance(a: &BinnedDensity, b: &BinnedDensity) -> Result<f64> {
    a.check_same_edges(b)?;
    let (ta, tb) = (a.total(), b.total());
    if ta <= 0.0 || tb <= 0.0 {
        return Err(CoreError::DegenerateInput("zero total mass".into()));
    }
    let mut ca = 0.0;
    let mut cb = 0.0;
    let mut ks: f64 = 0.0;
    for (x, y) in a.masses.iter().zip(&b.masses) {
        ca += x / ta;
        cb += y / tb;
        ks = ks.max((ca - cb).abs());
    }
    Ok(ks)
}

/// Coverage of `predicted` by `empirical +- k stderr`.
#[derive(Debug, Clone)]
pub struct CoverageReport {
    /// Fraction of bins with `|empirical - predicted| <= k * stderr`.
    pub fraction: f64,
    /// Indices and z-scores of the bins outside the band.
    pub outliers: Vec<(usize, f64)>,
}

/// Fraction of bins where the prediction lies within `k` empirical standard
/// errors. The empirical density must carry stderr values.
pub fn coverage_report(
    empirical: &BinnedDensity,
    predicted: &BinnedDensity,
    k: f64,
) -> Result<CoverageReport> {
    empirical.check_same_edges(predicted)?;
    let stderr = empirical.stderr.as_ref().ok_or_else(|| {
        CoreError::InvalidParameter("empirical density carries no standard errors".into())
    })?;
    let mut outliers = Vec::new();
    for (i, ((e, p), s)) in empirical
        .masses
        .iter()
        .zip(&predicted.masses)
        .zip(stderr)
        .enumerate()
    {
        let z = if *s > 0.0 {
            (e - p).abs() / s
        } else if (e - p).abs() == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        if z > k {
            outliers.push((i, z));
        }
    }
    let n = empirical.masses.len();
    Ok(CoverageReport {
        fraction: (n - outliers.len()) as f64 / n as f64,
        outliers,
    })
}

/// One-sample Kolmogorov-Smirnov statistic of `samples` against a
/// continuous CDF.
pub fn ks_statistic_sorted<F: Fn(f64) -> f64>(sorted: &[f64], cdf: F) -> f64 {
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max(((i + 1) as f64 / n - f).abs());
        d = d.max((f - i as f64 / n).abs());
    }
    d
}

/// Pearson chi-square statistic of observed counts against expected counts.
pub fn chi_square(observed: &[f64], expected: &[f64]) -> f64 {
    observed
        .iter()
        .zip(expected)
        .filter(|(_, e)| **e > 0.0)
        .map(|(o, e)| (o - e) * (o - e) / e)
        .sum()
}

/// Histogram of sample values over the given edges; out-of-range samples
/// are dropped. Returns counts.
pub fn histogram(samples: &[f64], edges: &[f64]) -> Vec<f64> {
    let mut counts = vec![0.0; edges.len() - 1];
    let lo = edges[0];
    let hi = edges[edges.len() - 1];
    let nb = counts.len();
    for &s in samples {
        if s < lo || s >= hi {
            continue;
        }
        // uniform edges fast path with binary-search fallback
        let w = (hi - lo) / nb as f64;
        let mut idx = ((s - lo) / w) as usize;
        idx = idx.min(nb - 1);
        if s < edges[idx] || s >= edges[idx + 1] {
            idx = match edges.binary_search_by(|e| e.partial_cmp(&s).unwrap()) {
                Ok(j) => j.min(nb - 1),
                Err(j) => j - 1,
            };
        }
        counts[idx] += 1.0;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bd(edges: &[f64], masses: &[f64]) -> BinnedDensity {
        BinnedDensity::new(edges.to_vec(), masses.to_vec()).unwrap()
    }

    #[test]
    fn normalize_basics() {
        let d = bd(&[0.0, 1.0, 2.0], &[2.0, 2.0]);
        let n = normalize(&d).unwrap();
        assert_eq!(n.masses, vec![0.5, 0.5]);
        let again = normalize(&n).unwrap();
        for (a, b) in n.masses.iter().zip(&again.masses) {
            assert!((a - b).abs() <= 1e-15);
        }
        let zero = bd(&[0.0, 1.0], &[0.0]);
        assert!(matches!(normalize(&zero), Err(CoreError::DegenerateInput(_))));
    }

    #[test]
    fn distances() {
        let a = bd(&[0.0, 1.0, 2.0], &[1.0, 0.0]);
        let b = bd(&[0.0, 1.0, 2.0], &[0.0, 1.0]);
        assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(ks_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_distance(&a, &b).unwrap(), 2.0);
        assert_eq!(ks_distance(&a, &b).unwrap(), 1.0);
        let c = bd(&[0.0, 0.5, 1.0], &[1.0, 0.0]);
        assert!(l1_distance(&a, &c).is_err());
    }

    #[test]
    fn ks_bounded_by_half_l1() {
        // on identical normalized binnings KS <= L1/2
        let a = bd(&[0.0, 1.0, 2.0, 3.0, 4.0], &[0.1, 0.4, 0.3, 0.2]);
        let b = bd(&[0.0, 1.0, 2.0, 3.0, 4.0], &[0.25, 0.25, 0.25, 0.25]);
        let ks = ks_distance(&a, &b).unwrap();
        let l1 = l1_distance(&a, &b).unwrap();
        assert!(ks <= l1 / 2.0 + 1e-15);
    }

    #[test]
    fn coverage_corner_cases() {
        let e = bd(&[0.0, 1.0, 2.0], &[0.5, 0.5]).with_stderr(vec![0.1, 0.1]).unwrap();
        let same = bd(&[0.0, 1.0, 2.0], &[0.5, 0.5]);
        let r = coverage_report(&e, &same, 3.0).unwrap();
        assert_eq!(r.fraction, 1.0);
        let shifted = bd(&[0.0, 1.0, 2.0], &[1.5, 1.5]);
        let r = coverage_report(&e, &shifted, 3.0).unwrap();
        assert_eq!(r.fraction, 0.0);
        assert_eq!(r.outliers.len(), 2);
    }

    #[test]
    fn binned_refinement_consistency() {
        // binning a smooth density two ways: L1 between a coarse binning and
        // the coarsened fine binning stays below the refinement bound
        let f = |x: f64| (-x * x / 2.0).exp();
        let coarse_edges: Vec<f64> = (0..=16).map(|i| -4.0 + 0.5 * i as f64).collect();
        let fine_edges: Vec<f64> = (0..=64).map(|i| -4.0 + 0.125 * i as f64).collect();
        let quad = |a: f64, b: f64| {
            // 4-point GL per bin
            let (x, w) = crate::numeric::gauss_legendre_on(4, a, b);
            x.iter().zip(&w).map(|(xi, wi)| wi * f(*xi)).sum::<f64>()
        };
        let coarse: Vec<f64> = coarse_edges.windows(2).map(|e| quad(e[0], e[1])).collect();
        let fine: Vec<f64> = fine_edges.windows(2).map(|e| quad(e[0], e[1])).collect();
        let refolded: Vec<f64> = fine.chunks(4).map(|c| c.iter().sum()).collect();
        let a = bd(&coarse_edges, &coarse);
        let b = bd(&coarse_edges, &refolded);
        assert!(l1_distance(&a, &b).unwrap() <= 1e-7);
    }

    #[test]
    fn ks_one_sample_statistic() {
        let sorted: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        let d = ks_statistic_sorted(&sorted, |x| x.clamp(0.0, 1.0));
        assert!(d <= 0.005 + 1e-12, "uniform grid KS {d}");
    }
}
