//! Survival primitives: patient records, time grids, step curves, risk scores,
//! the Kaplan–Meier estimator and Harrell's concordance index.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One patient: standardized covariates plus right-censored follow-up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub patient_id: String,
    pub covariates: Vec<f64>,
    /// Follow-up time in days.
    pub time: f64,
    /// `true` when progression was observed, `false` when censored.
    pub event: bool,
}

impl SurvivalRecord {
    pub fn new(
        patient_id: impl Into<String>,
        covariates: Vec<f64>,
        time: f64,
        event: bool,
    ) -> Result<Self> {
        let patient_id = patient_id.into();
        if !(time.is_finite() && time > 0.0) {
            return Err(Error::Input(format!(
                "patient `{patient_id}`: time must be finite and > 0, got {time}"
            )));
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("covariates of `{patient_id}`")));
        }
        Ok(Self {
            patient_id,
            covariates,
            time,
            event,
        })
    }

    pub fn dim(&self) -> usize {
        self.covariates.len()
    }
}

/// Checks that a cohort is non-empty and has a uniform covariate dimension.
pub fn cohort_dim(records: &[SurvivalRecord]) -> Result<usize> {
    let first = records
        .first()
        .ok_or_else(|| Error::Input("empty cohort".into()))?;
    let d = first.dim();
    if let Some(r) = records.iter().find(|r| r.dim() != d) {
        return Err(Error::Input(format!(
            "patient `{}` has {} covariates, expected {d}",
            r.patient_id,
            r.dim()
        )));
    }
    Ok(d)
}

pub fn event_count(records: &[SurvivalRecord]) -> usize {
    records.iter().filter(|r| r.event).count()
}

/// Ordered time points `t_1 < ... < t_m` that discretize follow-up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid(Vec<f64>);

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Input("time grid needs at least one point".into()));
        }
        if points.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Input(
                "time grid points must be finite and > 0".into(),
            ));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("time grid must be strictly increasing".into()));
        }
        Ok(Self(points))
    }

    pub fn points(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the interval holding an event at time `s`: the number of grid
    /// points strictly before `s`. Interval `k` is `(t_k, t_{k+1}]`.
    pub fn event_interval(&self, s: f64) -> usize {
        self.0.partition_point(|&t| t < s)
    }

    /// First interval still consistent with survival past censoring time `c`,
    /// i.e. the smallest `k` with `t_{k+1} > c`.
    pub fn first_interval_after(&self, c: f64) -> usize {
        self.0.partition_point(|&t| t <= c)
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;

    fn try_from(points: Vec<f64>) -> Result<Self> {
        TimeGrid::new(points)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(grid: TimeGrid) -> Self {
        grid.0
    }
}

/// Right-continuous survival step function starting at `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub times: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl SurvivalCurve {
    /// Builds a curve from step points, prepending `(0, 1)`.
    pub fn from_steps(times: &[f64], probabilities: &[f64]) -> Self {
        let mut t = Vec::with_capacity(times.len() + 1);
        let mut p = Vec::with_capacity(times.len() + 1);
        t.push(0.0);
        p.push(1.0);
        t.extend_from_slice(times);
        p.extend_from_slice(probabilities);
        Self {
            times: t,
            probabilities: p,
        }
    }

    /// Value of the step function at `t`.
    pub fn at(&self, t: f64) -> f64 {
        let idx = self.times.partition_point(|&x| x <= t);
        if idx == 0 {
            1.0
        } else {
            self.probabilities[idx - 1]
        }
    }

    pub fn is_non_increasing(&self) -> bool {
        self.probabilities.windows(2).all(|w| w[1] <= w[0])
    }

    /// Area under the step curve between 0 and the last time point.
    pub fn area(&self) -> f64 {
        self.times
            .windows(2)
            .zip(&self.probabilities)
            .map(|(w, p)| (w[1] - w[0]) * p)
            .sum()
    }
}

/// Unitless per-patient risk; higher means worse prognosis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskScore {
    pub patient_id: String,
    pub value: f64,
}

impl RiskScore {
    pub fn new(patient_id: impl Into<String>, value: f64) -> Self {
        Self {
            patient_id: patient_id.into(),
            value,
        }
    }
}

/// Concordance statistics over comparable pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Concordance {
    pub c_index: f64,
    pub comparable_pairs: u64,
    pub concordant: u64,
    pub tied_risk: u64,
}

/// Harrell's C with 0.5 credit for tied risks. A pair is comparable when the
/// patient with the strictly shorter time had an observed event.
pub fn concordance(risks: &[RiskScore], records: &[SurvivalRecord]) -> Result<Concordance> {
    let by_id: HashMap<&str, f64> = risks
        .iter()
        .map(|r| (r.patient_id.as_str(), r.value))
        .collect();
    if by_id.len() != risks.len() {
        return Err(Error::Input("duplicate patient ids among risks".into()));
    }
    let mut rows = Vec::with_capacity(records.len());
    let mut missing = Vec::new();
    for rec in records {
        match by_id.get(rec.patient_id.as_str()) {
            Some(&risk) if risk.is_finite() => rows.push((rec.time, rec.event, risk)),
            Some(_) => return Err(Error::NonFinite(format!("risk of `{}`", rec.patient_id))),
            None => missing.push(rec.patient_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::PatientMismatch(missing));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));

    let (mut comparable, mut concordant, mut tied) = (0u64, 0u64, 0u64);
    for (i, &(ti, ei, ri)) in rows.iter().enumerate() {
        if !ei {
            continue;
        }
        let later = rows[i + 1..].partition_point(|r| r.0 <= ti);
        for &(_, _, rj) in &rows[i + 1 + later..] {
            comparable += 1;
            if ri > rj {
                concordant += 1;
            } else if ri == rj {
                tied += 1;
            }
        }
    }
    if comparable == 0 {
        return Err(Error::UndefinedCIndex);
    }
    Ok(Concordance {
        c_index: (concordant as f64 + 0.5 * tied as f64) / comparable as f64,
        comparable_pairs: comparable,
        concordant,
        tied_risk: tied,
    })
}

pub fn concordance_index(risks: &[RiskScore], records: &[SurvivalRecord]) -> Result<f64> {
    concordance(risks, records).map(|c| c.c_index)
}

/// Product-limit estimate, stepping at every distinct observed time.
pub fn kaplan_meier(records: &[SurvivalRecord]) -> Result<SurvivalCurve> {
    if records.is_empty() {
        return Err(Error::Input("Kaplan-Meier needs a nonempty cohort".into()));
    }
    let mut obs: Vec<(f64, bool)> = records.iter().map(|r| (r.time, r.event)).collect();
    obs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut times = Vec::new();
    let mut probs = Vec::new();
    let mut at_risk = obs.len();
    let mut surv = 1.0;
    let mut i = 0;
    while i < obs.len() {
        let t = obs[i].0;
        let mut j = i;
        let mut deaths = 0;
        while j < obs.len() && obs[j].0 == t {
            deaths += usize::from(obs[j].1);
            j += 1;
        }
        if deaths > 0 {
            surv *= 1.0 - deaths as f64 / at_risk as f64;
        }
        times.push(t);
        probs.push(surv);
        at_risk -= j - i;
        i = j;
    }
    Ok(SurvivalCurve::from_steps(&times, &probs))
}

/// Number of grid points requested from [`make_time_grid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridSize {
    /// `ceil(sqrt(number of events))`.
    Auto,
    Fixed(usize),
}

/// Linear-interpolated quantile of an ascending slice (`p` in `[0, 1]`).
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Places grid points at the `j/(m+1)` quantiles of observed event times.
/// Duplicate quantiles collapse, so the grid can be shorter than requested.
pub fn make_time_grid(records: &[SurvivalRecord], size: GridSize) -> Result<TimeGrid> {
    let mut events: Vec<f64> = records.iter().filter(|r| r.event).map(|r| r.time).collect();
    if events.is_empty() {
        return Err(Error::NoEvents);
    }
    events.sort_by(f64::total_cmp);
    let m = match size {
        GridSize::Auto => (events.len() as f64).sqrt().ceil() as usize,
        GridSize::Fixed(0) => return Err(Error::Input("grid size must be positive".into())),
        GridSize::Fixed(m) => m,
    };
    let mut points: Vec<f64> = (1..=m)
        .map(|j| quantile_sorted(&events, j as f64 / (m + 1) as f64))
        .collect();
    points.dedup();
    TimeGrid::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, time: f64, event: bool) -> SurvivalRecord {
        SurvivalRecord::new(id, vec![], time, event).unwrap()
    }

    fn risks(values: &[f64]) -> Vec<RiskScore> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| RiskScore::new(format!("p{i}"), v))
            .collect()
    }

    fn cohort(times: &[f64], events: &[bool]) -> Vec<SurvivalRecord> {
        times
            .iter()
            .zip(events)
            .enumerate()
            .map(|(i, (&t, &e))| rec(&format!("p{i}"), t, e))
            .collect()
    }

    #[test]
    fn perfect_and_inverted_ranking() {
        let c = cohort(&[1.0, 2.0, 3.0], &[true; 3]);
        assert_eq!(
            concordance_index(&risks(&[3.0, 2.0, 1.0]), &c).unwrap(),
            1.0
        );
        assert_eq!(
            concordance_index(&risks(&[1.0, 2.0, 3.0]), &c).unwrap(),
            0.0
        );
    }

    #[test]
    fn tied_risks_get_half_credit() {
        let c = cohort(&[1.0, 2.0], &[true, true]);
        assert_eq!(concordance_index(&risks(&[1.0, 1.0]), &c).unwrap(), 0.5);
    }

    #[test]
    fn censored_earlier_time_is_not_comparable() {
        let c = cohort(&[1.0, 2.0], &[false, true]);
        assert!(matches!(
            concordance_index(&risks(&[1.0, 0.0]), &c),
            Err(Error::UndefinedCIndex)
        ));
    }

    #[test]
    fn missing_risk_is_reported() {
        let c = cohort(&[1.0, 2.0], &[true, true]);
        let err = concordance_index(&risks(&[1.0]), &c).unwrap_err();
        assert!(matches!(err, Error::PatientMismatch(ids) if ids == vec!["p1".to_string()]));
    }

    #[test]
    fn km_distinct_events() {
        let km = kaplan_meier(&cohort(&[1.0, 2.0, 3.0], &[true; 3])).unwrap();
        assert_eq!(km.times, vec![0.0, 1.0, 2.0, 3.0]);
        let expected = [1.0, 2.0 / 3.0, 1.0 / 3.0, 0.0];
        for (p, e) in km.probabilities.iter().zip(expected) {
            assert!((p - e).abs() < 1e-15);
        }
    }

    #[test]
    fn km_all_censored_stays_at_one() {
        let km = kaplan_meier(&cohort(&[1.0, 2.0, 3.0], &[false; 3])).unwrap();
        assert!(km.probabilities.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn km_with_one_censored() {
        let km = kaplan_meier(&cohort(&[1.0, 2.0, 3.0], &[true, false, true])).unwrap();
        // n=3: drop 1/3 at t=1; censored at 2 leaves one at risk; drop to 0 at 3.
        assert!((km.at(1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((km.at(2.5) - 2.0 / 3.0).abs() < 1e-15);
        assert!((km.at(3.0) - 0.0).abs() < 1e-15);
    }

    #[test]
    fn km_on_empty_cohort_fails() {
        assert!(kaplan_meier(&[]).is_err());
    }

    #[test]
    fn grid_median_of_four_events() {
        let c = cohort(&[10.0, 20.0, 30.0, 40.0], &[true; 4]);
        let g = make_time_grid(&c, GridSize::Fixed(1)).unwrap();
        assert_eq!(g.points(), &[25.0]);
    }

    #[test]
    fn grid_single_event_auto() {
        let c = cohort(&[7.0, 9.0], &[true, false]);
        let g = make_time_grid(&c, GridSize::Auto).unwrap();
        assert_eq!(g.points(), &[7.0]);
    }

    #[test]
    fn grid_auto_size_is_sqrt_of_events() {
        let times: Vec<f64> = (1..=100).map(f64::from).collect();
        let g = make_time_grid(&cohort(&times, &[true; 100]), GridSize::Auto).unwrap();
        assert_eq!(g.len(), 10);
    }

    #[test]
    fn grid_without_events_fails() {
        let c = cohort(&[1.0, 2.0], &[false, false]);
        assert!(matches!(
            make_time_grid(&c, GridSize::Auto),
            Err(Error::NoEvents)
        ));
    }

    #[test]
    fn grid_collapses_duplicate_quantiles() {
        let c = cohort(&[5.0, 5.0, 5.0, 5.0], &[true; 4]);
        let g = make_time_grid(&c, GridSize::Fixed(3)).unwrap();
        assert_eq!(g.points(), &[5.0]);
    }

    #[test]
    fn interval_indexing() {
        let g = TimeGrid::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g.event_interval(0.5), 0);
        assert_eq!(g.event_interval(1.0), 0);
        assert_eq!(g.event_interval(1.5), 1);
        assert_eq!(g.event_interval(9.0), 3);
        assert_eq!(g.first_interval_after(0.5), 0);
        assert_eq!(g.first_interval_after(2.0), 2);
        assert_eq!(g.first_interval_after(2.5), 2);
    }

    #[test]
    fn record_validation() {
        assert!(SurvivalRecord::new("a", vec![], 0.0, true).is_err());
        assert!(SurvivalRecord::new("a", vec![f64::NAN], 1.0, true).is_err());
        assert!(TimeGrid::new(vec![2.0, 1.0]).is_err());
    }
}
