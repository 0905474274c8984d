//! Positioning error metrics: per-sample Euclidean error, mean error,
//! empirical CDF, and the {90, 80, 67, 50}% percentile protocol.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Euclidean distance between a predicted and a true 2D coordinate.
pub fn error_distance(pred: [f64; 2], truth: [f64; 2]) -> Result<f64> {
    if !pred.iter().chain(truth.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("error_distance input".into()));
    }
    let dx = pred[0] - truth[0];
    let dy = pred[1] - truth[1];
    Ok((dx * dx + dy * dy).sqrt())
}

/// Nearest-rank percentile: sort ascending and return the element at index
/// ceil(p/100 * n) - 1.
pub fn percentile(errors: &[f64], p: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Empty("percentile over empty error list".into()));
    }
    if !(0.0 < p && p < 100.0) {
        return Err(Error::config(format!("percentile level {p} outside (0, 100)")));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite error"));
    let n = sorted.len();
    let rank = (p / 100.0 * n as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

/// Percentile levels used throughout, matching the cellular evaluation
/// protocol.
pub const PERCENTILE_LEVELS: [f64; 4] = [90.0, 80.0, 67.0, 50.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Percentiles {
    pub p90: f64,
    pub p80: f64,
    pub p67: f64,
    pub p50: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PerSampleError {
    pub id: u64,
    pub error_m: f64,
    pub is_los: bool,
    pub sector: u8,
}

/// Per-sample metadata carried into a report.
#[derive(Debug, Clone, Copy)]
pub struct SampleMeta {
    pub id: u64,
    pub sector: u8,
    pub is_los: bool,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub n: usize,
    pub mean_error_m: f64,
    pub percentiles: Percentiles,
    pub per_sample: Vec<PerSampleError>,
    /// Sorted (error, cumulative fraction) pairs; last fraction is 1.
    pub cdf_points: Vec<(f64, f64)>,
    /// Mean error over LoS / NLoS subsets, when both are present.
    pub mean_los_m: Option<f64>,
    pub mean_nlos_m: Option<f64>,
    /// Mean error per sector id.
    pub mean_per_sector: Vec<(u8, f64)>,
}

/// Build a full evaluation report from aligned prediction/truth lists.
pub fn build_report(
    predictions: &[[f64; 2]],
    truths: &[[f64; 2]],
    meta: &[SampleMeta],
) -> Result<EvalReport> {
    if predictions.len() != truths.len() || predictions.len() != meta.len() {
        return Err(Error::ShapeMismatch {
            context: "build_report".into(),
            expected: vec![predictions.len(); 3],
            actual: vec![predictions.len(), truths.len(), meta.len()],
        });
    }
    if predictions.is_empty() {
        return Err(Error::Empty("build_report with no samples".into()));
    }

    let mut per_sample = Vec::with_capacity(predictions.len());
    for ((p, t), m) in predictions.iter().zip(truths).zip(meta) {
        per_sample.push(PerSampleError {
            id: m.id,
            error_m: error_distance(*p, *t)?,
            is_los: m.is_los,
            sector: m.sector,
        });
    }

    let errors: Vec<f64> = per_sample.iter().map(|s| s.error_m).collect();
    let n = errors.len();
    let mean_error_m = errors.iter().sum::<f64>() / n as f64;

    let percentiles = Percentiles {
        p90: percentile(&errors, 90.0)?,
        p80: percentile(&errors, 80.0)?,
        p67: percentile(&errors, 67.0)?,
        p50: percentile(&errors, 50.0)?,
    };

    let mut sorted = errors.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cdf_points = sorted
        .iter()
        .enumerate()
        .map(|(i, &e)| (e, (i + 1) as f64 / n as f64))
        .collect();

    let subset_mean = |keep: &dyn Fn(&PerSampleError) -> bool| -> Option<f64> {
        let vals: Vec<f64> = per_sample.iter().filter(|s| keep(s)).map(|s| s.error_m).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let mean_los_m = subset_mean(&|s| s.is_los);
    let mean_nlos_m = subset_mean(&|s| !s.is_los);

    let mut sectors: Vec<u8> = per_sample.iter().map(|s| s.sector).collect();
    sectors.sort_unstable();
    sectors.dedup();
    let mean_per_sector = sectors
        .into_iter()
        .filter_map(|sec| subset_mean(&|s| s.sector == sec).map(|m| (sec, m)))
        .collect();

    Ok(EvalReport {
        n,
        mean_error_m,
        percentiles,
        per_sample,
        cdf_points,
        mean_los_m,
        mean_nlos_m,
        mean_per_sector,
    })
}

impl EvalReport {
    /// Per-sample CSV: {id, error_m, sector, los}.
    pub fn write_report_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "id,error_m,sector,los")?;
        for s in &self.per_sample {
            writeln!(f, "{},{:.6},{},{}", s.id, s.error_m, s.sector, u8::from(s.is_los))?;
        }
        Ok(())
    }

    /// Summary CSV: {metric, value}.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "metric,value")?;
        writeln!(f, "n,{}", self.n)?;
        writeln!(f, "mean_error_m,{:.6}", self.mean_error_m)?;
        writeln!(f, "p90_m,{:.6}", self.percentiles.p90)?;
        writeln!(f, "p80_m,{:.6}", self.percentiles.p80)?;
        writeln!(f, "p67_m,{:.6}", self.percentiles.p67)?;
        writeln!(f, "p50_m,{:.6}", self.percentiles.p50)?;
        if let Some(v) = self.mean_los_m {
            writeln!(f, "mean_los_m,{v:.6}")?;
        }
        if let Some(v) = self.mean_nlos_m {
            writeln!(f, "mean_nlos_m,{v:.6}")?;
        }
        for (sec, v) in &self.mean_per_sector {
            writeln!(f, "mean_sector{sec}_m,{v:.6}")?;
        }
        Ok(())
    }

    /// CDF CSV: {error_m, fraction}, the plotting input for CDF curves.
    pub fn write_cdf_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "error_m,fraction")?;
        for (e, frac) in &self.cdf_points {
            writeln!(f, "{e:.6},{frac:.8}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn distance_three_four_five() {
        assert_eq!(error_distance([3.0, 4.0], [0.0, 0.0]).unwrap(), 5.0);
        assert_eq!(error_distance([1.5, -2.0], [1.5, -2.0]).unwrap(), 0.0);
    }

    #[test]
    fn distance_rejects_non_finite() {
        assert!(error_distance([f64::NAN, 0.0], [0.0, 0.0]).is_err());
        assert!(error_distance([0.0, 0.0], [f64::INFINITY, 0.0]).is_err());
    }

    /// Independently coded distance oracle.
    fn distance_oracle(a: [f64; 2], b: [f64; 2]) -> f64 {
        f64::hypot(a[0] - b[0], a[1] - b[1])
    }

    #[test]
    fn distance_matches_oracle_on_random_pairs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let a = [rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3)];
            let b = [rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3)];
            let got = error_distance(a, b).unwrap();
            assert!((got - distance_oracle(a, b)).abs() < 1e-12);
        }
    }

    #[test]
    fn percentile_nearest_rank_on_known_list() {
        let v: Vec<f64> = (1..=10).map(|x| x as f64).collect();
        assert_eq!(percentile(&v, 50.0).unwrap(), 5.0);
        assert_eq!(percentile(&v, 90.0).unwrap(), 9.0);
        assert_eq!(percentile(&v, 80.0).unwrap(), 8.0);
        assert_eq!(percentile(&v, 67.0).unwrap(), 7.0);
    }

    #[test]
    fn percentile_singleton() {
        for p in [1.0, 50.0, 99.0] {
            assert_eq!(percentile(&[7.0], p).unwrap(), 7.0);
        }
    }

    #[test]
    fn percentile_empty_errors() {
        assert!(percentile(&[], 50.0).is_err());
    }

    /// Full-sort oracle: identical definition coded independently.
    fn percentile_oracle(errors: &[f64], p: f64) -> f64 {
        let mut s = errors.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = ((p / 100.0) * s.len() as f64).ceil() as usize - 1;
        s[idx]
    }

    #[test]
    fn percentile_matches_sort_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let errors: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..500.0)).collect();
        for p in PERCENTILE_LEVELS {
            assert_eq!(percentile(&errors, p).unwrap(), percentile_oracle(&errors, p));
        }
    }

    #[test]
    fn report_all_zero_errors() {
        let preds = vec![[1.0, 1.0]; 5];
        let meta: Vec<SampleMeta> = (0..5)
            .map(|i| SampleMeta { id: i, sector: 0, is_los: true })
            .collect();
        let rep = build_report(&preds, &preds, &meta).unwrap();
        assert_eq!(rep.mean_error_m, 0.0);
        assert_eq!(rep.percentiles.p90, 0.0);
        assert_eq!(rep.percentiles.p50, 0.0);
    }

    #[test]
    fn report_known_small_case() {
        // errors [1, 2, 3, 4] -> mean 2.5, p50 = element at ceil(0.5*4)-1 = idx 1 = 2
        let truths = vec![[0.0, 0.0]; 4];
        let preds = vec![[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]];
        let meta: Vec<SampleMeta> = (0..4)
            .map(|i| SampleMeta { id: i, sector: (i % 3) as u8, is_los: i % 2 == 0 })
            .collect();
        let rep = build_report(&preds, &truths, &meta).unwrap();
        assert!((rep.mean_error_m - 2.5).abs() < 1e-12);
        assert_eq!(rep.percentiles.p50, 2.0);
        assert_eq!(rep.cdf_points.last().unwrap().1, 1.0);
    }

    #[test]
    fn report_length_mismatch() {
        let meta = [SampleMeta { id: 0, sector: 0, is_los: true }];
        assert!(build_report(&[[0.0, 0.0]], &[], &meta).is_err());
    }

    proptest! {
        #[test]
        fn percentile_ordering_holds(errors in proptest::collection::vec(0.0f64..1e4, 1..200)) {
            let rep_p: Vec<f64> = PERCENTILE_LEVELS
                .iter()
                .map(|&p| percentile(&errors, p).unwrap())
                .collect();
            // p90 >= p80 >= p67 >= p50
            prop_assert!(rep_p[0] >= rep_p[1]);
            prop_assert!(rep_p[1] >= rep_p[2]);
            prop_assert!(rep_p[2] >= rep_p[3]);
        }

        #[test]
        fn permutation_invariance(mut errors in proptest::collection::vec(0.0f64..1e4, 2..100), swap_a in 0usize..100, swap_b in 0usize..100) {
            let before = percentile(&errors, 67.0).unwrap();
            let mean_before: f64 = errors.iter().sum::<f64>() / errors.len() as f64;
            let (a, b) = (swap_a % errors.len(), swap_b % errors.len());
            errors.swap(a, b);
            prop_assert_eq!(before, percentile(&errors, 67.0).unwrap());
            let mean_after: f64 = errors.iter().sum::<f64>() / errors.len() as f64;
            prop_assert!((mean_before - mean_after).abs() < 1e-9);
        }

        #[test]
        fn cdf_points_monotone(errors in proptest::collection::vec(0.0f64..1e4, 1..100)) {
            let preds: Vec<[f64; 2]> = errors.iter().map(|&e| [e, 0.0]).collect();
            let truths = vec![[0.0, 0.0]; errors.len()];
            let meta: Vec<SampleMeta> = (0..errors.len() as u64)
                .map(|id| SampleMeta { id, sector: 0, is_los: false })
                .collect();
            let rep = build_report(&preds, &truths, &meta).unwrap();
            for w in rep.cdf_points.windows(2) {
                prop_assert!(w[1].0 >= w[0].0);
                prop_assert!(w[1].1 >= w[0].1);
            }
            prop_assert!((rep.cdf_points.last().unwrap().1 - 1.0).abs() < 1e-12);
        }
    }
}
