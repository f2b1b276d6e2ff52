//! Differential gene selection between early-event and long-surviving patients.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{quantile_sorted, GenomicProfile, Survival, CATEGORY_COUNT};
use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub enabled: bool,
    pub alpha: f64,
    pub min_per_category: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            enabled: true,
            alpha: 0.05,
            min_per_category: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RiskGroup {
    High,
    Low,
    Excluded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskGroups {
    pub midpoint: f64,
    pub groups: Vec<RiskGroup>,
}

impl RiskGroups {
    pub fn high(&self) -> impl Iterator<Item = usize> + '_ {
        self.members(RiskGroup::High)
    }

    pub fn low(&self) -> impl Iterator<Item = usize> + '_ {
        self.members(RiskGroup::Low)
    }

    fn members(&self, which: RiskGroup) -> impl Iterator<Item = usize> + '_ {
        self.groups
            .iter()
            .enumerate()
            .filter(move |(_, g)| **g == which)
            .map(|(i, _)| i)
    }
}

/// Splits at the median follow-up time: events at or before it are high
/// risk, anyone followed past it is low risk, early censorings are dropped.
pub fn split_risk_groups(survivals: &[Survival]) -> Result<RiskGroups> {
    if survivals.len() < 2 {
        return Err(Error::Config("risk split needs at least two patients".into()));
    }
    let mut times: Vec<f64> = survivals.iter().map(|s| s.time_months).collect();
    times.sort_by(f64::total_cmp);
    let midpoint = quantile_sorted(&times, 0.5);
    let groups = survivals
        .iter()
        .map(|s| {
            if s.time_months > midpoint {
                RiskGroup::Low
            } else if !s.censored {
                RiskGroup::High
            } else {
                RiskGroup::Excluded
            }
        })
        .collect();
    Ok(RiskGroups { midpoint, groups })
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        math::lgamma(a + b) - math::lgamma(a) - math::lgamma(b) + a * math::ln(x) + b * math::ln(1.0 - x);
    let front = math::exp(ln_front);
    // the fraction converges fast only below the mean; use symmetry above it
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Two-sided Student-t tail probability.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    incomplete_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Welch's unequal-variance t test: `(t, two-sided p)`.
pub fn welch_t(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Contract("Welch test needs two observations per group".into()));
    }
    let (mx, sx) = math::mean_std(x);
    let (my, sy) = math::mean_std(y);
    let vx = sx * sx / x.len() as f64;
    let vy = sy * sy / y.len() as f64;
    let v = vx + vy;
    if v == 0.0 {
        return Ok((0.0, 1.0));
    }
    let t = (mx - my) / math::sqrt(v);
    let df = v * v
        / (vx * vx / (x.len() as f64 - 1.0) + vy * vy / (y.len() as f64 - 1.0));
    Ok((t, student_t_two_sided(t, df)))
}

/// Benjamini–Hochberg adjusted p values, in input order.
pub fn bh_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut adjusted = alloc::vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(p[i] * m as f64 / (rank + 1) as f64);
        adjusted[i] = running.min(1.0);
    }
    adjusted
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneTest {
    pub category: usize,
    /// Index within the category's original gene list.
    pub index: usize,
    pub t: f64,
    pub p: f64,
    pub p_adjusted: f64,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneSelection {
    /// Strictly increasing kept indices per category.
    pub retained: [Vec<usize>; CATEGORY_COUNT],
    /// Empty when selection was disabled or skipped.
    pub tests: Vec<GeneTest>,
    /// Why every gene was kept without testing, if that happened.
    pub skipped: Option<String>,
}

impl GeneSelection {
    pub fn keep_all(lengths: [usize; CATEGORY_COUNT], reason: impl Into<String>) -> Self {
        GeneSelection {
            retained: core::array::from_fn(|c| (0..lengths[c]).collect()),
            tests: Vec::new(),
            skipped: Some(reason.into()),
        }
    }

    pub fn lengths(&self) -> [usize; CATEGORY_COUNT] {
        core::array::from_fn(|c| self.retained[c].len())
    }
}

/// Tests every gene across all categories jointly and keeps those with
/// adjusted p below `alpha`, topping up each category to the floor by raw p.
pub fn differential_select(
    profiles: &[&GenomicProfile],
    survivals: &[Survival],
    config: &SelectionConfig,
) -> Result<GeneSelection> {
    let Some(first) = profiles.first() else {
        return Err(Error::Config("gene selection needs training patients".into()));
    };
    if profiles.len() != survivals.len() {
        return Err(Error::Contract("profiles and survivals differ in length".into()));
    }
    let lengths = first.lengths();
    if !config.enabled {
        return Ok(GeneSelection::keep_all(lengths, "selection disabled"));
    }
    let groups = split_risk_groups(survivals)?;
    let high: Vec<usize> = groups.high().collect();
    let low: Vec<usize> = groups.low().collect();
    if high.len() < 2 || low.len() < 2 {
        return Ok(GeneSelection::keep_all(
            lengths,
            alloc::format!(
                "risk groups too small to test ({} high, {} low); all genes kept",
                high.len(),
                low.len()
            ),
        ));
    }
    let mut tests = Vec::new();
    for (c, &len) in lengths.iter().enumerate() {
        for j in 0..len {
            let sample = |ids: &[usize]| -> Vec<f64> {
                ids.iter().map(|&i| math::ln_1p(profiles[i].categories[c][j])).collect()
            };
            let (t, p) = welch_t(&sample(&high), &sample(&low))?;
            tests.push(GeneTest {
                category: c,
                index: j,
                t,
                p,
                p_adjusted: 1.0,
                retained: false,
            });
        }
    }
    let raw: Vec<f64> = tests.iter().map(|t| t.p).collect();
    for (test, adj) in tests.iter_mut().zip(bh_adjust(&raw)) {
        test.p_adjusted = adj;
        test.retained = adj < config.alpha;
    }
    for c in 0..CATEGORY_COUNT {
        let mut in_cat: Vec<usize> = (0..tests.len()).filter(|&i| tests[i].category == c).collect();
        let kept = in_cat.iter().filter(|&&i| tests[i].retained).count();
        if kept < config.min_per_category {
            in_cat.sort_by(|&a, &b| tests[a].p.total_cmp(&tests[b].p).then(a.cmp(&b)));
            let mut need = config.min_per_category - kept;
            for i in in_cat {
                if need == 0 {
                    break;
                }
                if !tests[i].retained {
                    tests[i].retained = true;
                    need -= 1;
                }
            }
        }
    }
    let retained = core::array::from_fn(|c| {
        tests
            .iter()
            .filter(|t| t.category == c && t.retained)
            .map(|t| t.index)
            .collect()
    });
    Ok(GeneSelection {
        retained,
        tests,
        skipped: None,
    })
}
