//! Antolini concordance, the Kaplan–Meier censoring curve and the IPCW
//! (integrated) Brier score.
//!
//! Survival estimates are passed as `surv(i, t)`: the predicted survival of
//! subject `i` at time `t`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no comparable pairs")]
    NoComparablePairs,
    #[error("censoring survival is zero at t = {0}")]
    CensorZero(f64),
    #[error("fewer than two usable evaluation times")]
    Grid,
    #[error("empty data")]
    Empty,
    #[error("{times} times but {events} event flags")]
    Length { times: usize, events: usize },
}

fn check(times: &[f64], events: &[bool]) -> Result<(), EvalError> {
    if times.len() != events.len() {
        return Err(EvalError::Length { times: times.len(), events: events.len() });
    }
    if times.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Concordant pairs count twice and ties once, so sums stay exact integers.
fn pair_score(si: f64, sj: f64) -> u64 {
    match si.partial_cmp(&sj) {
        Some(std::cmp::Ordering::Less) => 2,
        Some(std::cmp::Ordering::Equal) => 1,
        _ => 0,
    }
}

/// Over pairs with `δ_i = 1` and `y_i < y_j`, the fraction with
/// `S_i(y_i) < S_j(y_i)`, ties counted as ½.
pub fn c_index<F>(surv: F, times: &[f64], events: &[bool]) -> Result<f64, EvalError>
where
    F: Fn(usize, f64) -> f64 + Sync,
{
    check(times, events)?;
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let per_event = exec::map_indexed(order.len(), |r| {
        let i = order[r];
        if !events[i] {
            return (0u64, 0u64);
        }
        let yi = times[i];
        let si = surv(i, yi);
        let first_later = order.partition_point(|&k| times[k] <= yi);
        order[first_later..].iter().fold((0, 0), |(score, pairs), &j| (score + pair_score(si, surv(j, yi)), pairs + 1))
    });
    let (score, pairs) = per_event.into_iter().fold((0u64, 0u64), |a, b| (a.0 + b.0, a.1 + b.1));
    if pairs == 0 {
        return Err(EvalError::NoComparablePairs);
    }
    Ok(score as f64 / (2 * pairs) as f64)
}

/// Product-limit estimate of the censoring survival function: a
/// right-continuous step function with `values[k]` holding on
/// `[steps[k], steps[k+1])` and 1 before `steps[0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCensorCurve {
    pub steps: Vec<f64>,
    pub values: Vec<f64>,
}

impl KmCensorCurve {
    /// `Ĉ(t)`.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.steps.partition_point(|&s| s <= t);
        if k == 0 {
            1.0
        } else {
            self.values[k - 1]
        }
    }

    /// `Ĉ(t⁻)`.
    pub fn left_limit(&self, t: f64) -> f64 {
        let k = self.steps.partition_point(|&s| s < t);
        if k == 0 {
            1.0
        } else {
            self.values[k - 1]
        }
    }
}

/// Kaplan–Meier curve with censorings as the events; the at-risk set at `s`
/// is every subject with `y ≥ s`.
pub fn km_censor(times: &[f64], events: &[bool]) -> Result<KmCensorCurve, EvalError> {
    check(times, events)?;
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut steps = Vec::new();
    let mut values = Vec::new();
    let mut surv = 1.0;
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let at_risk = order.len() - k;
        let mut censored = 0;
        while k < order.len() && times[order[k]] == t {
            censored += usize::from(!events[order[k]]);
            k += 1;
        }
        if censored > 0 {
            surv *= 1.0 - censored as f64 / at_risk as f64;
            steps.push(t);
            values.push(surv);
        }
    }
    Ok(KmCensorCurve { steps, values })
}

/// `(1/N) Σ [𝟙{y_i ≤ t, δ_i = 1} Ŝ_i(t)² / Ĉ(y_i⁻) + 𝟙{y_i > t} (1 − Ŝ_i(t))² / Ĉ(t)]`.
pub fn ipcw_brier<F>(surv: F, times: &[f64], events: &[bool], t: f64, censor: &KmCensorCurve) -> Result<f64, EvalError>
where
    F: Fn(usize, f64) -> f64,
{
    check(times, events)?;
    let c_t = censor.at(t);
    let mut total = 0.0;
    for i in 0..times.len() {
        let s = surv(i, t);
        if times[i] <= t && events[i] {
            let c = censor.left_limit(times[i]);
            if c <= 0.0 {
                return Err(EvalError::CensorZero(times[i]));
            }
            total += s * s / c;
        } else if times[i] > t {
            if c_t <= 0.0 {
                return Err(EvalError::CensorZero(t));
            }
            total += (1.0 - s) * (1.0 - s) / c_t;
        }
    }
    Ok(total / times.len() as f64)
}

/// Integrated Brier score and the grid times that had to be skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ibs {
    pub value: f64,
    pub skipped: Vec<f64>,
}

/// Trapezoid integral of [`ipcw_brier`] over `grid`, divided by the span of
/// the usable grid. Times where `Ĉ` vanishes are skipped and reported.
pub fn ipcw_ibs<F>(surv: F, times: &[f64], events: &[bool], grid: &[f64], censor: &KmCensorCurve) -> Result<Ibs, EvalError>
where
    F: Fn(usize, f64) -> f64 + Sync,
{
    check(times, events)?;
    let scores = exec::map_indexed(grid.len(), |k| ipcw_brier(&surv, times, events, grid[k], censor));
    let mut pts = Vec::with_capacity(grid.len());
    let mut skipped = Vec::new();
    for (k, s) in scores.into_iter().enumerate() {
        match s {
            Ok(v) => pts.push((grid[k], v)),
            Err(EvalError::CensorZero(_)) => skipped.push(grid[k]),
            Err(e) => return Err(e),
        }
    }
    if !skipped.is_empty() {
        log::warn!("skipped {} evaluation times with zero censoring survival", skipped.len());
    }
    let span = match (pts.first(), pts.last()) {
        (Some(a), Some(b)) if b.0 > a.0 => b.0 - a.0,
        _ => return Err(EvalError::Grid),
    };
    let integral: f64 = pts.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1)).sum();
    Ok(Ibs { value: integral / span, skipped })
}

/// `n` equally spaced times from the smallest observed time to the largest,
/// capped at `horizon`.
pub fn default_grid(times: &[f64], horizon: f64, n: usize) -> Vec<f64> {
    let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = times.iter().copied().fold(f64::NEG_INFINITY, f64::max).min(horizon);
    if n < 2 || !(hi > lo) {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Metrics report; `c_index` is `None` with a reason when undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub c_index: Option<f64>,
    pub c_index_reason: Option<String>,
    pub ipcw_ibs: Option<f64>,
    pub ipcw_ibs_reason: Option<String>,
    /// Grid times left out of the IBS because `Ĉ` vanished there.
    pub ipcw_ibs_skipped: Vec<f64>,
    pub n: usize,
    pub n_events: usize,
    pub grid: Vec<f64>,
}

/// C-index and IBS with the censoring curve fitted on the same data.
pub fn evaluate<F>(surv: F, times: &[f64], events: &[bool], grid: &[f64]) -> Result<Metrics, EvalError>
where
    F: Fn(usize, f64) -> f64 + Sync,
{
    let censor = km_censor(times, events)?;
    let (c_index, c_index_reason) = match c_index(&surv, times, events) {
        Ok(c) => (Some(c), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let (ipcw_ibs, ipcw_ibs_reason, ipcw_ibs_skipped) = match ipcw_ibs(&surv, times, events, grid, &censor) {
        Ok(v) => (Some(v.value), None, v.skipped),
        Err(e) => (None, Some(e.to_string()), Vec::new()),
    };
    Ok(Metrics {
        c_index,
        c_index_reason,
        ipcw_ibs,
        ipcw_ibs_reason,
        ipcw_ibs_skipped,
        n: times.len(),
        n_events: events.iter().filter(|&&e| e).count(),
        grid: grid.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::RngStream;
    use proptest::prelude::*;

    #[test]
    fn c_index_examples() {
        let times = [1.0, 2.0, 3.0, 4.0];
        let events = [true; 4];
        let anti = |i: usize, _t: f64| 0.1 * (i + 1) as f64;
        assert_eq!(c_index(anti, &times, &events).unwrap(), 1.0);
        assert_eq!(c_index(|_, _| 0.3, &times, &events).unwrap(), 0.5);
        assert_eq!(c_index(anti, &times, &[false; 4]), Err(EvalError::NoComparablePairs));
        // Equal times are not comparable.
        assert_eq!(c_index(anti, &[1.0, 1.0], &[true, true]), Err(EvalError::NoComparablePairs));
    }

    #[test]
    fn km_examples() {
        let none = km_censor(&[1.0, 2.0, 3.0], &[true; 3]).unwrap();
        assert!([0.0, 1.5, 10.0].iter().all(|&t| none.at(t) == 1.0));
        let one = km_censor(&[2.0], &[false]).unwrap();
        assert_eq!((one.at(1.99), one.at(2.0), one.left_limit(2.0)), (1.0, 0.0, 1.0));
        // Times 1..10; censored at 2, 3, 3(tie with an event), 6, 9.
        let times = [1.0, 2.0, 3.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        let events = [true, false, false, true, true, true, false, true, true, false];
        let km = km_censor(&times, &events).unwrap();
        let c2 = 1.0 - 1.0 / 9.0;
        let c3 = c2 * (1.0 - 1.0 / 8.0);
        let c6 = c3 * (1.0 - 1.0 / 4.0);
        let c9 = 0.0;
        assert_eq!(km.steps, vec![2.0, 3.0, 6.0, 9.0]);
        for (got, want) in km.values.iter().zip([c2, c3, c6, c9]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(km.left_limit(3.0), km.at(2.5));
    }

    fn oracle_step(i: usize, t: f64, times: &[f64]) -> f64 {
        if t < times[i] {
            1.0
        } else {
            0.0
        }
    }

    #[test]
    fn brier_examples() {
        let times = [0.5, 1.0, 1.5, 2.0];
        let events = [true; 4];
        let km = km_censor(&times, &events).unwrap();
        for t in [0.7, 1.2, 1.9] {
            assert_eq!(ipcw_brier(|i, t| oracle_step(i, t, &times), &times, &events, t, &km).unwrap(), 0.0);
            assert_eq!(ipcw_brier(|_, _| 0.5, &times, &events, t, &km).unwrap(), 0.25);
        }
        let grid = default_grid(&times, f64::INFINITY, 100);
        assert!((ipcw_ibs(|_, _| 0.5, &times, &events, &grid, &km).unwrap().value - 0.25).abs() < 1e-15);
        let fine = default_grid(&times, f64::INFINITY, 20_000);
        assert!(ipcw_ibs(|i, t| oracle_step(i, t, &times), &times, &events, &fine, &km).unwrap().value < 0.01);
    }

    #[test]
    fn ibs_skips_zero_censor_times() {
        let times = [1.0, 2.0, 3.0];
        let events = [true; 3];
        let km = KmCensorCurve { steps: vec![2.5], values: vec![0.0] };
        let ibs = ipcw_ibs(|_, _| 0.5, &times, &events, &[1.0, 2.0, 2.5, 3.0], &km).unwrap();
        assert_eq!(ibs.skipped, vec![2.5, 3.0]);
        assert!(ibs.value > 0.0);
    }

    fn brute_c(surv: &dyn Fn(usize, f64) -> f64, y: &[f64], d: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..y.len() {
            for j in 0..y.len() {
                if d[i] && y[i] < y[j] {
                    den += 1.0;
                    let (a, b) = (surv(i, y[i]), surv(j, y[i]));
                    num += if a < b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    fn brute_brier(surv: &dyn Fn(usize, f64) -> f64, y: &[f64], d: &[bool], t: f64) -> f64 {
        // Censoring survival as a direct product over distinct times.
        let mut distinct: Vec<f64> = y.to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let c = |s: f64, strict: bool| -> f64 {
            let mut prod = 1.0;
            for &u in &distinct {
                if (strict && u < s) || (!strict && u <= s) {
                    let at_risk = y.iter().filter(|&&v| v >= u).count() as f64;
                    let cens = y.iter().zip(d).filter(|(&v, &e)| v == u && !e).count() as f64;
                    prod *= 1.0 - cens / at_risk;
                }
            }
            prod
        };
        let mut total = 0.0;
        for i in 0..y.len() {
            let s = surv(i, t);
            if y[i] <= t && d[i] {
                total += s * s / c(y[i], true);
            }
            if y[i] > t {
                total += (1.0 - s) * (1.0 - s) / c(t, false);
            }
        }
        total / y.len() as f64
    }

    fn random_case(rng: &mut RngStream, n: usize) -> (Vec<f64>, Vec<bool>, Vec<f64>) {
        // Rounded times produce ties; rates produce crossing-free curves.
        let y: Vec<f64> = (0..n).map(|_| (rng.uniform() * 10.0).round() / 2.0 + 0.5).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.7).collect();
        let rate: Vec<f64> = (0..n).map(|_| (rng.uniform() * 4.0).round() / 4.0 + 0.1).collect();
        (y, d, rate)
    }

    #[test]
    fn matches_brute_force_oracles() {
        let mut rng = RngStream::new(77);
        for _ in 0..50 {
            let (y, d, rate) = random_case(&mut rng, 20);
            let surv = |i: usize, t: f64| (-rate[i] * t).exp();
            if let Ok(c) = c_index(surv, &y, &d) {
                assert_eq!(c, brute_c(&surv, &y, &d));
            }
            let km = km_censor(&y, &d).unwrap();
            for t in [0.7, 1.5, 2.25, 3.0] {
                match ipcw_brier(surv, &y, &d, t, &km) {
                    Ok(b) => assert!((b - brute_brier(&surv, &y, &d, t)).abs() < 1e-12),
                    Err(EvalError::CensorZero(_)) => {}
                    Err(e) => panic!("{e}"),
                }
            }
        }
    }

    #[test]
    fn ibs_matches_fine_grid_integral() {
        let y = [0.8, 1.3, 2.0, 2.2, 3.1, 3.5, 4.0, 4.4];
        let d = [true, false, true, true, false, true, true, true];
        let surv = |i: usize, t: f64| (-(0.2 + 0.05 * i as f64) * t).exp();
        let km = km_censor(&y, &d).unwrap();
        let grid = default_grid(&y, 4.0, 200_001);
        let ibs = ipcw_ibs(surv, &y, &d, &grid, &km).unwrap().value;
        // Midpoint rule on a separate fine grid.
        let n = 400_000;
        let h = (4.0 - 0.8) / n as f64;
        let mid: f64 = (0..n).map(|k| ipcw_brier(surv, &y, &d, 0.8 + (k as f64 + 0.5) * h, &km).unwrap()).sum::<f64>() * h / 3.2;
        assert!((ibs - mid).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn c_index_invariant_under_monotone_transform(seed in 0u64..500) {
            let mut rng = RngStream::new(seed);
            let (y, d, rate) = random_case(&mut rng, 15);
            let surv = |i: usize, t: f64| (-rate[i] * t).exp();
            let warped = |i: usize, t: f64| surv(i, t).powi(3) * 2.0 - 7.0;
            prop_assert_eq!(c_index(surv, &y, &d), c_index(warped, &y, &d));
        }

        #[test]
        fn metrics_are_permutation_invariant(seed in 0u64..500) {
            let mut rng = RngStream::new(seed);
            let (y, d, rate) = random_case(&mut rng, 12);
            let mut perm: Vec<usize> = (0..12).collect();
            for k in (1..12).rev() {
                perm.swap(k, rng.index(k + 1));
            }
            let y2: Vec<f64> = perm.iter().map(|&k| y[k]).collect();
            let d2: Vec<bool> = perm.iter().map(|&k| d[k]).collect();
            let surv = |i: usize, t: f64| (-rate[i] * t).exp();
            let surv2 = |i: usize, t: f64| (-rate[perm[i]] * t).exp();
            prop_assert_eq!(c_index(surv, &y, &d), c_index(surv2, &y2, &d2));
            let grid = default_grid(&y, 4.0, 50);
            let a = ipcw_ibs(surv, &y, &d, &grid, &km_censor(&y, &d).unwrap());
            let b = ipcw_ibs(surv2, &y2, &d2, &grid, &km_censor(&y2, &d2).unwrap());
            match (a, b) {
                (Ok(a), Ok(b)) => prop_assert!((a.value - b.value).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
            }
        }

        #[test]
        fn constant_half_scores_quarter(seed in 0u64..200, n in 2usize..30) {
            let mut rng = RngStream::new(seed);
            let y: Vec<f64> = (0..n).map(|_| 0.1 + rng.uniform()).collect();
            let d = vec![true; n];
            let grid = default_grid(&y, f64::INFINITY, 37);
            prop_assume!(grid.len() > 1);
            let ibs = ipcw_ibs(|_, _| 0.5, &y, &d, &grid, &km_censor(&y, &d).unwrap()).unwrap();
            prop_assert!((ibs.value - 0.25).abs() < 1e-14);
        }
    }
}
