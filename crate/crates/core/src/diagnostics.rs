//! Insertion-rank tests for sampler bias and the shrinkage test harness.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};
use crate::special::normal_quantile;

/// Insertion of a new point at rank `order` among `live_count` positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertionRecord {
    pub order: usize,
    pub live_count: usize,
}

impl InsertionRecord {
    pub fn new(order: usize, live_count: usize) -> Result<Self> {
        if live_count == 0 || order >= live_count {
            return Err(NestError::invalid(format!(
                "insertion order {order} outside [0, {live_count})"
            )));
        }
        Ok(InsertionRecord { order, live_count })
    }

    fn term(&self) -> f64 {
        (2 * self.order + 1) as f64 / self.live_count as f64
    }
}

/// Running rank-sum statistic. With a window only the most recent
/// insertions count.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UTestAccumulator {
    pub sum_term: f64,
    pub count_n1: usize,
    pub window: Option<usize>,
    recent: VecDeque<f64>,
}

pub const DEFAULT_WINDOW: usize = 1000;

impl UTestAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_window(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(NestError::invalid("window must be positive"));
        }
        Ok(UTestAccumulator {
            window: Some(window),
            ..Default::default()
        })
    }

    pub fn record_insertion(&mut self, order: usize, live_count: usize) -> Result<()> {
        let rec = InsertionRecord::new(order, live_count)?;
        self.push(rec);
        Ok(())
    }

    pub fn push(&mut self, rec: InsertionRecord) {
        let t = rec.term();
        if let Some(w) = self.window {
            self.recent.push_back(t);
            if self.recent.len() > w {
                self.recent.pop_front();
            }
            // Recomputed from the window to avoid drift from add/subtract.
            self.sum_term = self.recent.iter().sum();
            self.count_n1 = self.recent.len();
        } else {
            self.sum_term += t;
            self.count_n1 += 1;
        }
    }

    pub fn reset(&mut self) {
        self.sum_term = 0.0;
        self.count_n1 = 0;
        self.recent.clear();
    }

    /// z = (sum - n1) / sqrt(n1 / 3). Negative z means new points land
    /// too low in the live set.
    pub fn z_score(&self) -> Result<f64> {
        if self.count_n1 == 0 {
            return Err(NestError::InvalidState("no insertions recorded".into()));
        }
        let n1 = self.count_n1 as f64;
        Ok((self.sum_term - n1) / (n1 / 3.0).sqrt())
    }
}

/// z over a whole sequence of records.
pub fn z_of(records: &[InsertionRecord]) -> Result<f64> {
    let mut acc = UTestAccumulator::new();
    records.iter().for_each(|r| acc.push(*r));
    acc.z_score()
}

/// Asymptotic Kolmogorov survival function with Stephens' small-sample
/// correction.
pub fn kolmogorov_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sided KS test of the ranks against the discrete uniform law on
/// `0..N`. The discreteness makes the asymptotic p-value conservative.
pub fn ks_test(records: &[InsertionRecord]) -> Result<f64> {
    if records.len() < 5 {
        return Err(NestError::invalid("KS test needs at least 5 records"));
    }
    let n_live = records[0].live_count;
    if records.iter().any(|r| r.live_count != n_live) {
        return Err(NestError::invalid("KS test requires a constant live count"));
    }
    let mut hist = vec![0usize; n_live];
    for r in records {
        hist[r.order] += 1;
    }
    let n = records.len() as f64;
    let mut cum = 0usize;
    let mut d: f64 = 0.0;
    for (k, h) in hist.iter().enumerate() {
        cum += h;
        let emp = cum as f64 / n;
        let model = (k + 1) as f64 / n_live as f64;
        d = d.max((emp - model).abs());
    }
    Ok(kolmogorov_pvalue(d, records.len()))
}

/// Segments obtained by resetting the accumulator whenever |z| exceeds the
/// threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub lengths: Vec<usize>,
    pub iterations: usize,
    /// True if there are more segments than `iterations / 10^5.5`.
    pub flagged: bool,
}

pub const SEGMENT_THRESHOLD: f64 = 4.0;
pub const MIN_SEGMENT_LOG10: f64 = 5.5;

pub fn run_segment_monitor(
    threshold_z: f64,
    records: impl IntoIterator<Item = InsertionRecord>,
) -> Result<SegmentReport> {
    if !(threshold_z > 0.0) {
        return Err(NestError::invalid("threshold must be positive"));
    }
    let mut acc = UTestAccumulator::new();
    let mut lengths = Vec::new();
    let mut iterations = 0usize;
    for r in records {
        iterations += 1;
        acc.push(r);
        if acc.z_score()?.abs() > threshold_z {
            lengths.push(acc.count_n1);
            acc.reset();
        }
    }
    let allowed = iterations as f64 / 10f64.powf(MIN_SEGMENT_LOG10);
    Ok(SegmentReport {
        flagged: lengths.len() as f64 > allowed,
        lengths,
        iterations,
    })
}

/// z per consecutive chunk of `chunk` records, for the Bonferroni mode.
pub fn chunked_z(records: &[InsertionRecord], chunk: usize) -> Result<Vec<f64>> {
    if chunk == 0 {
        return Err(NestError::invalid("chunk must be positive"));
    }
    records.chunks(chunk).map(z_of).collect()
}

/// Two-sided |z| threshold giving family-wise false-positive rate `alpha`
/// over `tests` tests.
pub fn bonferroni_threshold(alpha: f64, tests: usize) -> f64 {
    -normal_quantile(alpha / (2.0 * tests.max(1) as f64))
}

/// Counts exact likelihood ties among live points seen during a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlateauWarnings {
    pub events: usize,
    pub tied_points: usize,
}

impl PlateauWarnings {
    pub fn record(&mut self, tied: usize) {
        if tied >= 2 {
            self.events += 1;
            self.tied_points += tied;
        }
    }
}

/// Outcome of the shrinkage test: successive contour-volume ratios of dead
/// points compared with the Beta(N, 1) law of a perfect sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageReport {
    pub ratios: usize,
    pub mean: f64,
    pub expected: f64,
    pub z: f64,
    pub biased: bool,
}

pub const SHRINKAGE_Z_LIMIT: f64 = 3.0;

/// Mean ratio test over the true volumes `log_volumes` of consecutive dead
/// points, all removed with `n_live` live points.
pub fn shrinkage_from_volumes(log_volumes: &[f64], n_live: usize) -> Result<ShrinkageReport> {
    if n_live == 0 {
        return Err(NestError::invalid("live count must be positive"));
    }
    let mut prev = 0.0;
    let mut ratios = Vec::with_capacity(log_volumes.len());
    for &lx in log_volumes {
        ratios.push((lx - prev).exp());
        prev = lx;
    }
    if ratios.is_empty() {
        return Err(NestError::invalid("no volume ratios"));
    }
    let n = n_live as f64;
    let expected = n / (n + 1.0);
    let sd = (n / ((n + 1.0) * (n + 1.0) * (n + 2.0))).sqrt();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let z = (mean - expected) / (sd / (ratios.len() as f64).sqrt());
    Ok(ShrinkageReport {
        ratios: ratios.len(),
        mean,
        expected,
        z,
        biased: z.abs() > SHRINKAGE_Z_LIMIT,
    })
}

/// Run constant-N sampling for `iterations` steps on a problem with known
/// contour volumes and test the volume ratios.
pub fn shrinkage_test(
    problem: &dyn crate::problems::Problem,
    sampler: crate::lrps::Sampler,
    n_live: usize,
    iterations: usize,
    seed: u64,
) -> Result<ShrinkageReport> {
    use crate::agents::{pre_drain_history, run_classic};
    use crate::integrator::ShrinkageEstimator;
    use crate::termination::TerminationPolicy;

    let policy = TerminationPolicy {
        epsilon_remainder: 0.0,
        max_iterations: Some(iterations),
        ..Default::default()
    };
    let run = run_classic(
        problem,
        n_live,
        policy,
        sampler,
        ShrinkageEstimator::Arithmetic,
        seed,
    )?;
    let used = pre_drain_history(&run.state, run.agent.exhausted_at).len();
    // Volumes may be unknown for the outermost contours; then the chain
    // starts at the first known one.
    let known: Vec<Option<f64>> = run.state.dead_points[..used]
        .iter()
        .map(|d| problem.log_volume_at(d.log_likelihood))
        .collect();
    let skipped = known.iter().take_while(|v| v.is_none()).count();
    let lx: Vec<f64> = known[skipped..].iter().map_while(|v| *v).collect();
    if skipped == 0 {
        shrinkage_from_volumes(&lx, n_live)
    } else {
        let Some((&first, rest)) = lx.split_first() else {
            return Err(NestError::invalid("problem exposes no contour volumes"));
        };
        let rel: Vec<f64> = rest.iter().map(|v| v - first).collect();
        shrinkage_from_volumes(&rel, n_live)
    }
}
