//! Kaplan–Meier curves, the two-group log-rank test, median-score risk
//! stratification and durable-response labels. Times are in months.

use crate::error::{bail, Result};
use serde::{Deserialize, Serialize};

/// Event-free months required for a durable response.
pub const DURABLE_MONTHS: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskGroup {
    High,
    Low,
}

impl RiskGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            RiskGroup::High => "high",
            RiskGroup::Low => "low",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub time: f64,
    /// `true` when the event was observed, `false` when censored.
    pub event: bool,
    pub group: RiskGroup,
}

impl SurvivalRecord {
    pub fn new(time: f64, event: bool, group: RiskGroup) -> Self {
        Self { time, event, group }
    }
}

fn check_records(records: &[SurvivalRecord]) -> Result<()> {
    if let Some(r) = records.iter().find(|r| !(r.time >= 0.0) || !r.time.is_finite()) {
        bail!(Data, "survival time must be finite and nonnegative, got {}", r.time);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmStep {
    pub time: f64,
    pub at_risk: usize,
    pub events: usize,
    pub censored: usize,
    /// S(t) just after `time`.
    pub survival: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    /// One row per distinct observed time, ascending.
    pub steps: Vec<KmStep>,
    pub median: Option<f64>,
}

impl KmCurve {
    pub fn survival_at(&self, t: f64) -> f64 {
        self.steps.iter().take_while(|s| s.time <= t).last().map_or(1.0, |s| s.survival)
    }
}

/// Distinct times ascending with (events, censored) counts.
fn tabulate(records: &[SurvivalRecord]) -> Vec<(f64, usize, usize)> {
    let mut sorted: Vec<&SurvivalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    for r in sorted {
        match out.last_mut() {
            Some(last) if last.0 == r.time => {
                if r.event {
                    last.1 += 1
                } else {
                    last.2 += 1
                }
            }
            _ => out.push((r.time, r.event as usize, (!r.event) as usize)),
        }
    }
    out
}

pub fn km_estimate(records: &[SurvivalRecord]) -> Result<KmCurve> {
    if records.is_empty() {
        bail!(Data, "Kaplan–Meier needs at least one record");
    }
    check_records(records)?;
    // Between censorings the product-limit factors telescope, so S is kept as
    // anchor · (still at risk) / (at risk at the anchor). Without censoring
    // this is exactly the empirical survival fraction.
    let mut at_risk = records.len();
    let (mut anchor, mut anchor_n) = (1.0, at_risk);
    let mut s = 1.0;
    let mut median = None;
    let mut steps = Vec::new();
    for (time, events, censored) in tabulate(records) {
        if events > 0 {
            s = anchor * (at_risk - events) as f64 / anchor_n as f64;
            if median.is_none() && s <= 0.5 {
                median = Some(time);
            }
        }
        steps.push(KmStep { time, at_risk, events, censored, survival: s });
        at_risk -= events + censored;
        if censored > 0 {
            (anchor, anchor_n) = (s, at_risk);
        }
    }
    Ok(KmCurve { steps, median })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRankResult {
    pub chi2: f64,
    pub p_value: f64,
    /// `(O_a/E_a) / (O_b/E_b)`; `None` when an expected count is zero.
    pub hazard_ratio: Option<f64>,
    /// Always `"observed_over_expected"`: not a proportional-hazards fit.
    pub hazard_ratio_method: String,
    pub observed: [f64; 2],
    pub expected: [f64; 2],
    pub variance: f64,
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi2_sf_1df(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        libm::erfc((x / 2.0).sqrt())
    }
}

pub fn log_rank(group_a: &[SurvivalRecord], group_b: &[SurvivalRecord]) -> Result<LogRankResult> {
    if group_a.is_empty() || group_b.is_empty() {
        bail!(Data, "log-rank needs two nonempty groups ({} and {})", group_a.len(), group_b.len());
    }
    check_records(group_a)?;
    check_records(group_b)?;
    let tagged: Vec<(f64, bool, usize)> = group_a
        .iter()
        .map(|r| (r.time, r.event, 0))
        .chain(group_b.iter().map(|r| (r.time, r.event, 1)))
        .collect();
    if !tagged.iter().any(|t| t.1) {
        bail!(Analysis, "log-rank test is undefined without any events");
    }
    let mut times: Vec<f64> = tagged.iter().filter(|t| t.1).map(|t| t.0).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();

    let (mut o, mut e, mut var) = ([0.0f64; 2], [0.0f64; 2], 0.0);
    for &t in &times {
        let mut n = [0usize; 2];
        let mut d = [0usize; 2];
        for &(time, event, g) in &tagged {
            if time >= t {
                n[g] += 1;
            }
            if time == t && event {
                d[g] += 1;
            }
        }
        let nt = (n[0] + n[1]) as f64;
        let dt = (d[0] + d[1]) as f64;
        for g in 0..2 {
            o[g] += d[g] as f64;
            e[g] += dt * n[g] as f64 / nt;
        }
        if nt > 1.0 {
            var += dt * (n[0] as f64 / nt) * (n[1] as f64 / nt) * (nt - dt) / (nt - 1.0);
        }
    }
    let diff = o[0] - e[0];
    let chi2 = if var > 0.0 { diff * diff / var } else { 0.0 };
    let hazard_ratio = (e[0] > 0.0 && e[1] > 0.0 && o[1] > 0.0).then(|| (o[0] / e[0]) / (o[1] / e[1]));
    Ok(LogRankResult {
        chi2,
        p_value: chi2_sf_1df(chi2),
        hazard_ratio,
        hazard_ratio_method: "observed_over_expected".into(),
        observed: o,
        expected: e,
        variance: var,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratification {
    pub groups: Vec<RiskGroup>,
    pub median: f64,
    /// Everyone landed in one group.
    pub degenerate: bool,
}

/// Above the median is high risk; at or below is low risk.
pub fn median_stratify(scores: &[f64]) -> Result<Stratification> {
    if scores.is_empty() {
        bail!(Data, "median stratification needs at least one score");
    }
    if scores.iter().any(|s| !s.is_finite()) {
        bail!(Data, "non-finite risk score");
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    let groups: Vec<RiskGroup> = scores
        .iter()
        .map(|&s| if s > median { RiskGroup::High } else { RiskGroup::Low })
        .collect();
    let highs = groups.iter().filter(|g| **g == RiskGroup::High).count();
    Ok(Stratification { degenerate: highs == 0 || highs == n, groups, median })
}

/// `Some(true)` when event-free for at least [`DURABLE_MONTHS`], `Some(false)`
/// on an earlier event, `None` when censored before the horizon.
pub fn durable_response(time: f64, event: bool) -> Option<bool> {
    if time >= DURABLE_MONTHS {
        Some(true)
    } else if event {
        Some(false)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use RiskGroup::{High, Low};

    fn recs(pairs: &[(f64, bool)], g: RiskGroup) -> Vec<SurvivalRecord> {
        pairs.iter().map(|&(t, e)| SurvivalRecord::new(t, e, g)).collect()
    }

    #[test]
    fn km_hand_cases() {
        let c = km_estimate(&recs(&[(1.0, true), (2.0, true), (3.0, true)], Low)).unwrap();
        let s: Vec<f64> = c.steps.iter().map(|s| s.survival).collect();
        assert_eq!(s, vec![2.0 / 3.0, 1.0 / 3.0, 0.0]);
        assert_eq!(c.median, Some(2.0));

        let c = km_estimate(&recs(&[(1.0, false), (4.0, false)], Low)).unwrap();
        assert!(c.steps.iter().all(|s| s.survival == 1.0));
        assert_eq!(c.median, None);

        let c = km_estimate(&recs(&[(5.0, true)], Low)).unwrap();
        assert_eq!((c.survival_at(4.999), c.survival_at(5.0), c.median), (1.0, 0.0, Some(5.0)));

        // censoring removes a subject from later risk sets
        let c = km_estimate(&recs(&[(1.0, true), (2.0, false), (3.0, true), (4.0, true)], Low)).unwrap();
        assert_eq!(c.survival_at(3.0), 0.75 * 0.5);
        assert_eq!(c.steps[2].at_risk, 2);
        assert!(km_estimate(&[]).is_err());
    }

    #[test]
    fn log_rank_hand_case() {
        let a = recs(&[(1.0, true), (2.0, true)], High);
        let b = recs(&[(3.0, true), (4.0, true)], Low);
        let r = log_rank(&a, &b).unwrap();
        assert!((r.chi2 - 49.0 / 17.0).abs() < 1e-12);
        assert!((r.hazard_ratio.unwrap() - 19.0 / 5.0).abs() < 1e-12);
        assert!((r.p_value - chi2_sf_1df(49.0 / 17.0)).abs() < 1e-15);
    }

    #[test]
    fn log_rank_identical_and_directional() {
        let a = recs(&[(1.0, true), (3.0, false), (4.0, true)], High);
        let r = log_rank(&a, &a).unwrap();
        assert_eq!((r.chi2, r.p_value), (0.0, 1.0));

        let ev = recs(&[(1.0, true), (2.0, true), (3.0, true), (4.0, true), (5.0, true)], High);
        let cens = recs(&[(1.5, false), (2.5, false), (6.0, false), (7.0, false), (8.0, false)], Low);
        let r = log_rank(&ev, &cens).unwrap();
        assert!(r.chi2 > 0.0 && r.p_value < 0.05);

        let none = recs(&[(1.0, false)], High);
        assert!(matches!(log_rank(&none, &none), Err(crate::Error::Analysis(_))));
    }

    #[test]
    fn median_stratify_cases() {
        let s = median_stratify(&[0.1, 0.4, 0.6, 0.9]).unwrap();
        assert_eq!((s.groups.clone(), s.median), (vec![Low, Low, High, High], 0.5));
        let s = median_stratify(&[0.3; 5]).unwrap();
        assert!(s.degenerate && s.groups.iter().all(|g| *g == Low));
        let s = median_stratify(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(s.groups, vec![High, Low, Low]);
    }

    #[test]
    fn durable_response_horizon() {
        assert_eq!(durable_response(6.0, true), Some(true));
        assert_eq!(durable_response(2.0, true), Some(false));
        assert_eq!(durable_response(2.0, false), None);
    }

    proptest::proptest! {
        #[test]
        fn median_groups_balance_up_to_twice_the_ties(xs in proptest::collection::vec(0u8..6, 1..40)) {
            let scores: Vec<f64> = xs.iter().map(|&v| v as f64).collect();
            let s = median_stratify(&scores).unwrap();
            let highs = s.groups.iter().filter(|g| **g == High).count();
            let lows = scores.len() - highs;
            let ties = scores.iter().filter(|&&v| v == s.median).count();
            proptest::prop_assert!(highs.abs_diff(lows) <= 2 * ties);
        }
    }
}
