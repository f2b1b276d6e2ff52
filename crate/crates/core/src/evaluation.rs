//! Survival statistics: concordance, Kaplan–Meier, log-rank, Spearman.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::Survival;
use crate::error::{Error, Result};
use crate::math;

/// Harrell's concordance: a pair is comparable when the earlier time is an
/// observed event; higher risk for the earlier patient counts 1, ties 0.5.
pub fn c_index(risks: &[f64], survivals: &[Survival]) -> Result<f64> {
    if risks.len() != survivals.len() {
        return Err(Error::Contract("risk and survival counts differ".into()));
    }
    let mut comparable = 0u64;
    // doubled so that ties stay integral
    let mut score = 0u64;
    for (i, si) in survivals.iter().enumerate() {
        if si.censored {
            continue;
        }
        for (j, sj) in survivals.iter().enumerate() {
            if si.time_months < sj.time_months {
                comparable += 1;
                if risks[i] > risks[j] {
                    score += 2;
                } else if risks[i] == risks[j] {
                    score += 1;
                }
            }
        }
    }
    if comparable == 0 {
        return Err(Error::Undefined("no comparable pairs for the c-index".into()));
    }
    Ok(score as f64 / (2 * comparable) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KmStep {
    pub time: f64,
    pub survival: f64,
    pub at_risk: usize,
    pub deaths: usize,
}

/// Product-limit estimate at each distinct event time.
pub fn km_curve(survivals: &[Survival]) -> Vec<KmStep> {
    let mut sorted: Vec<Survival> = survivals.to_vec();
    sorted.sort_by(|a, b| a.time_months.total_cmp(&b.time_months));
    let mut steps = Vec::new();
    let mut s = 1.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].time_months;
        let at_risk = sorted.len() - i;
        let mut deaths = 0;
        while i < sorted.len() && sorted[i].time_months == t {
            deaths += usize::from(!sorted[i].censored);
            i += 1;
        }
        if deaths > 0 {
            s *= 1.0 - deaths as f64 / at_risk as f64;
            steps.push(KmStep {
                time: t,
                survival: s,
                at_risk,
                deaths,
            });
        }
    }
    steps
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub statistic: f64,
    pub p: f64,
}

/// Two-group log-rank test, one degree of freedom.
pub fn log_rank(a: &[Survival], b: &[Survival]) -> Result<LogRank> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("log-rank needs two non-empty groups".into()));
    }
    let mut times: Vec<f64> = a
        .iter()
        .chain(b)
        .filter(|s| !s.censored)
        .map(|s| s.time_months)
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let count = |g: &[Survival], t: f64| -> (f64, f64) {
        let at_risk = g.iter().filter(|s| s.time_months >= t).count();
        let deaths = g.iter().filter(|s| s.time_months == t && !s.censored).count();
        (at_risk as f64, deaths as f64)
    };
    let (mut observed_minus_expected, mut variance) = (0.0, 0.0);
    for t in times {
        let (na, da) = count(a, t);
        let (nb, db) = count(b, t);
        let (n, d) = (na + nb, da + db);
        observed_minus_expected += da - d * na / n;
        if n > 1.0 {
            variance += na * nb * d * (n - d) / (n * n * (n - 1.0));
        }
    }
    if variance <= 0.0 {
        return Ok(LogRank {
            statistic: 0.0,
            p: 1.0,
        });
    }
    let statistic = observed_minus_expected * observed_minus_expected / variance;
    Ok(LogRank {
        statistic,
        p: math::erfc(math::sqrt(statistic / 2.0)),
    })
}

/// Splits patients into equal halves by survival probability at the middle
/// interval; the lower half is high risk. Ties go by index, and with an odd
/// count the extra patient lands in the low-risk half.
pub fn split_by_median_risk(survival_curves: &[Vec<f64>]) -> Result<(Vec<usize>, Vec<usize>)> {
    if survival_curves.len() < 2 {
        return Err(Error::Contract("risk split needs at least two patients".into()));
    }
    let mid = survival_curves[0].len() / 2;
    let mut order: Vec<usize> = (0..survival_curves.len()).collect();
    order.sort_by(|&i, &j| {
        survival_curves[i][mid]
            .total_cmp(&survival_curves[j][mid])
            .then(i.cmp(&j))
    });
    let half = order.len() / 2;
    let mut high = order[..half].to_vec();
    let mut low = order[half..].to_vec();
    high.sort_unstable();
    low.sort_unstable();
    Ok((high, low))
}

/// 1-based ranks with ties averaged.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = alloc::vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Contract("correlation needs two equal-length samples of ≥ 2".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a constant vector".into()));
    }
    Ok((sxy / math::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Contract("correlation needs two equal-length samples of ≥ 2".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryCorrelation {
    pub category: usize,
    /// One coefficient per patient whose vectors were non-constant.
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Set when the category was skipped or some patients were undefined.
    pub note: Option<alloc::string::String>,
}

/// Per-patient Spearman between predicted and true gene vectors, grouped by
/// category. `pairs[p][c] = (predicted, truth)`.
pub fn spearman_by_category(
    pairs: &[[(Vec<f64>, Vec<f64>); crate::data::CATEGORY_COUNT]],
) -> Vec<CategoryCorrelation> {
    (0..crate::data::CATEGORY_COUNT)
        .map(|c| {
            let len = pairs.first().map_or(0, |p| p[c].1.len());
            if len < 2 {
                return CategoryCorrelation {
                    category: c,
                    values: Vec::new(),
                    mean: f64::NAN,
                    std: f64::NAN,
                    note: Some(alloc::format!("skipped: {len} genes")),
                };
            }
            let values: Vec<f64> = pairs
                .iter()
                .filter_map(|p| spearman(&p[c].0, &p[c].1).ok())
                .collect();
            let undefined = pairs.len() - values.len();
            let (mean, std) = if values.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let (m, s) = math::mean_std(&values);
                (m, if values.len() > 1 { s } else { 0.0 })
            };
            CategoryCorrelation {
                category: c,
                values,
                mean,
                std,
                note: (undefined > 0)
                    .then(|| alloc::format!("{undefined} patients with constant vectors skipped")),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s(t: f64, censored: bool) -> Survival {
        Survival {
            time_months: t,
            censored,
        }
    }

    fn random_cohort(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<Survival>) {
        let risks = (0..n).map(|_| f64::from(rng.random_range(0..6u8))).collect();
        let surv = (0..n)
            .map(|_| s(f64::from(rng.random_range(1..12u8)), rng.random_bool(0.35)))
            .collect();
        (risks, surv)
    }

    #[test]
    fn c_index_examples() {
        let surv: Vec<Survival> = (1..=5).map(|t| s(t as f64, false)).collect();
        assert_eq!(c_index(&[5.0, 4.0, 3.0, 2.0, 1.0], &surv).unwrap(), 1.0);
        assert_eq!(c_index(&[1.0; 5], &surv).unwrap(), 0.5);
        let censored = vec![s(1.0, true), s(2.0, true)];
        assert!(matches!(c_index(&[1.0, 2.0], &censored), Err(Error::Undefined(_))));
    }

    #[test]
    fn c_index_complement_without_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let surv: Vec<Survival> = (0..15)
                .map(|_| s(rng.random_range(1.0..10.0), rng.random_bool(0.3)))
                .collect();
            let risks: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
            let neg: Vec<f64> = risks.iter().map(|r| -r).collect();
            let Ok(a) = c_index(&risks, &surv) else { continue };
            let b = c_index(&neg, &surv).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn km_examples() {
        let steps = km_curve(&[s(1.0, false), s(2.0, false), s(3.0, false)]);
        let surv: Vec<f64> = steps.iter().map(|k| k.survival).collect();
        assert!((surv[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((surv[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(surv[2], 0.0);
        assert!(km_curve(&[s(4.0, true)]).is_empty());
        let all = km_curve(&[s(2.0, false); 4]);
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].survival, 0.0);
        assert_eq!(all[0].at_risk, 4);
    }

    #[test]
    fn log_rank_identical_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (_, g) = random_cohort(&mut rng, 20);
        let r = log_rank(&g, &g).unwrap();
        assert!(r.statistic.abs() < 1e-12);
        assert!((r.p - 1.0).abs() < 1e-9);
        let none = vec![s(1.0, true)];
        assert_eq!(log_rank(&none, &none).unwrap().p, 1.0);
    }

    // Tabulates the 2×2 tables one event time at a time from scratch.
    fn log_rank_oracle(a: &[Survival], b: &[Survival]) -> f64 {
        let mut all: Vec<(f64, bool, usize)> = a
            .iter()
            .map(|x| (x.time_months, x.censored, 0))
            .chain(b.iter().map(|x| (x.time_months, x.censored, 1)))
            .collect();
        all.sort_by(|x, y| x.0.total_cmp(&y.0));
        let (mut o, mut e, mut v) = (0.0, 0.0, 0.0);
        let mut last = f64::NEG_INFINITY;
        for &(t, _, _) in &all {
            if t == last {
                continue;
            }
            last = t;
            let mut table = [[0.0f64; 2]; 2]; // [group][at risk, died]
            for &(u, c, grp) in &all {
                if u >= t {
                    table[grp][0] += 1.0;
                }
                if u == t && !c {
                    table[grp][1] += 1.0;
                }
            }
            let d = table[0][1] + table[1][1];
            if d == 0.0 {
                continue;
            }
            let n = table[0][0] + table[1][0];
            o += table[0][1];
            e += d * table[0][0] / n;
            if n > 1.0 {
                v += table[0][0] * table[1][0] * d * (n - d) / (n * n * (n - 1.0));
            }
        }
        (o - e) * (o - e) / v
    }

    #[test]
    fn log_rank_hand_case() {
        let a = [s(1.0, false), s(3.0, false), s(4.0, true), s(6.0, false), s(9.0, false)];
        let b = [s(2.0, false), s(5.0, true), s(7.0, false), s(8.0, true), s(10.0, false)];
        let r = log_rank(&a, &b).unwrap();
        assert!((r.statistic - log_rank_oracle(&a, &b)).abs() < 1e-10);
        assert!(r.p > 0.0 && r.p < 1.0);
    }

    #[test]
    fn chi_square_tail_reference() {
        // P(χ²₁ > 3.841459) = 0.05
        assert!((math::erfc(math::sqrt(3.841_458_820_694_124 / 2.0)) - 0.05).abs() < 1e-9);
    }

    #[test]
    fn median_split_examples() {
        let curves: Vec<Vec<f64>> = [0.9, 0.1, 0.8, 0.2]
            .iter()
            .map(|&v| vec![1.0, 1.0, v, v])
            .collect();
        let (high, low) = split_by_median_risk(&curves).unwrap();
        assert_eq!(high, vec![1, 3]);
        assert_eq!(low, vec![0, 2]);
        let flat = vec![vec![0.5; 4]; 5];
        let (high, low) = split_by_median_risk(&flat).unwrap();
        assert_eq!(high, vec![0, 1]);
        assert_eq!(low, vec![2, 3, 4]);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 8.0, 27.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Undefined(_))));
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn spearman_report_skips_short_categories() {
        let pair = |v: Vec<f64>| (v.clone(), v);
        let p: [(Vec<f64>, Vec<f64>); 6] = [
            pair(vec![1.0, 2.0, 3.0]),
            pair(vec![1.0]),
            pair(vec![]),
            pair(vec![2.0, 1.0]),
            pair(vec![1.0, 1.0]),
            pair(vec![0.0, 5.0]),
        ];
        let report = spearman_by_category(&[p.clone(), p]);
        assert_eq!(report[0].values, vec![1.0, 1.0]);
        assert_eq!(report[0].mean, 1.0);
        assert!(report[1].note.is_some() && report[1].values.is_empty());
        assert!(report[4].note.is_some() && report[4].values.is_empty());
    }

    proptest! {
        #[test]
        fn c_index_invariant_to_monotone_transform(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (risks, surv) = random_cohort(&mut rng, 12);
            let warped: Vec<f64> = risks.iter().map(|r| math::exp(0.7 * r) - 3.0).collect();
            if let Ok(a) = c_index(&risks, &surv) {
                prop_assert_eq!(a, c_index(&warped, &surv).unwrap());
            }
        }

        #[test]
        fn km_is_non_increasing(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, surv) = random_cohort(&mut rng, 15);
            let steps = km_curve(&surv);
            let mut prev = 1.0;
            for k in steps {
                prop_assert!(k.survival <= prev && k.survival >= 0.0);
                prev = k.survival;
            }
        }

        #[test]
        fn spearman_invariant_to_monotone_transform(x in prop::collection::vec(-5.0f64..5.0, 3..20),
                                                    shift in -2.0f64..2.0) {
            let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * (i as f64 - 4.0)).collect();
            let xw: Vec<f64> = x.iter().map(|v| math::exp(*v) + shift).collect();
            if let Ok(a) = spearman(&x, &y) {
                prop_assert!((a - spearman(&xw, &y).unwrap()).abs() < 1e-12);
            }
        }

        #[test]
        fn median_split_sizes(n in 2usize..40, seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let curves: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0, 1.0, rng.random_range(0.0..1.0), 0.0]).collect();
            let (high, low) = split_by_median_risk(&curves).unwrap();
            prop_assert_eq!(high.len() + low.len(), n);
            prop_assert!(low.len() - high.len() <= 1);
        }
    }
}
