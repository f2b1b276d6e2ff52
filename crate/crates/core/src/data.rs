//! Patient records and survival-time discretization.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CATEGORY_COUNT: usize = 6;

/// Functional gene categories, in the fixed cohort-wide order.
pub const CATEGORY_NAMES: [&str; CATEGORY_COUNT] = [
    "tumor_suppression",
    "oncogenesis",
    "protein_kinases",
    "cellular_differentiation",
    "transcription",
    "cytokines_and_growth",
];

pub fn category_index(name: &str) -> Option<usize> {
    CATEGORY_NAMES.iter().position(|&n| n == name)
}

/// One patient's slide as an `N_p × d` matrix of patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBag {
    pub patient_id: String,
    pub features: Tensor,
}

impl PatchBag {
    pub fn new(patient_id: impl Into<String>, features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "patch bag must be a matrix, got {:?}",
                features.shape()
            )));
        }
        if !features.is_finite() {
            return Err(Error::Contract("patch bag contains non-finite values".into()));
        }
        Ok(PatchBag {
            patient_id: patient_id.into(),
            features,
        })
    }

    pub fn patches(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Expression values grouped into the six functional categories.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GenomicProfile {
    pub categories: [Vec<f64>; CATEGORY_COUNT],
}

impl GenomicProfile {
    pub fn lengths(&self) -> [usize; CATEGORY_COUNT] {
        core::array::from_fn(|c| self.categories[c].len())
    }

    /// Keeps only the listed gene indices per category.
    pub fn select(&self, retained: &[Vec<usize>; CATEGORY_COUNT]) -> GenomicProfile {
        GenomicProfile {
            categories: core::array::from_fn(|c| {
                retained[c].iter().map(|&j| self.categories[c][j]).collect()
            }),
        }
    }
}

/// Observed follow-up: `censored == false` means the event was observed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Survival {
    pub time_months: f64,
    pub censored: bool,
}

/// Follow-up plus its discrete interval index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurvivalLabel {
    pub time_months: f64,
    pub censored: bool,
    pub bin: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub bag: PatchBag,
    /// Absent at inference time.
    pub genomics: Option<GenomicProfile>,
    pub survival: Survival,
}

impl Patient {
    pub fn id(&self) -> &str {
        &self.bag.patient_id
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Cohort {
    pub patients: Vec<Patient>,
    /// Gene identifiers per category, aligned with `GenomicProfile` vectors.
    pub gene_ids: [Vec<String>; CATEGORY_COUNT],
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.patients.first().map(|p| p.bag.dim())
    }

    pub fn gene_lengths(&self) -> [usize; CATEGORY_COUNT] {
        core::array::from_fn(|c| self.gene_ids[c].len())
    }

    pub fn survivals(&self) -> Vec<Survival> {
        self.patients.iter().map(|p| p.survival).collect()
    }

    /// Checks the cohort-wide invariants: shared feature width and
    /// consistent per-category gene lengths.
    pub fn validate(&self) -> Result<()> {
        let Some(d) = self.feature_dim() else {
            return Err(Error::Config("cohort is empty".into()));
        };
        let lengths = self.gene_lengths();
        for p in &self.patients {
            if p.bag.dim() != d {
                return Err(Error::Config(format!(
                    "patient {} has feature width {}, cohort uses {d}",
                    p.id(),
                    p.bag.dim()
                )));
            }
            if let Some(gp) = &p.genomics {
                if gp.lengths() != lengths {
                    return Err(Error::Config(format!(
                        "patient {} has category lengths {:?}, cohort uses {lengths:?}",
                        p.id(),
                        gp.lengths()
                    )));
                }
            }
            if p.survival.time_months.is_nan() || p.survival.time_months <= 0.0 {
                return Err(Error::Config(format!(
                    "patient {} has non-positive survival time",
                    p.id()
                )));
            }
        }
        Ok(())
    }
}

/// Quantile with linear interpolation between order statistics
/// (`h = (n - 1)·q`), on already sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = crate::math::floor(h) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Interval boundaries for discrete-time hazards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    /// `bins - 1` interior cut points, non-decreasing.
    pub boundaries: Vec<f64>,
}

impl Binning {
    pub fn bins(&self) -> usize {
        self.boundaries.len() + 1
    }

    /// Right-open intervals; the last one is unbounded.
    pub fn bin_of(&self, time: f64) -> usize {
        self.boundaries.iter().take_while(|&&b| b <= time).count()
    }

    pub fn label(&self, s: Survival) -> SurvivalLabel {
        SurvivalLabel {
            time_months: s.time_months,
            censored: s.censored,
            bin: self.bin_of(s.time_months),
        }
    }
}

/// Cuts follow-up time into `bins` intervals at the quantiles of the
/// uncensored event times. Censored patients are binned by censoring time.
pub fn discretize_survival(survivals: &[Survival], bins: usize) -> Result<(Binning, Vec<usize>)> {
    if bins == 0 {
        return Err(Error::Config("at least one survival interval is required".into()));
    }
    let mut events: Vec<f64> = survivals
        .iter()
        .filter(|s| !s.censored)
        .map(|s| s.time_months)
        .collect();
    if events.is_empty() {
        return Err(Error::Config("every patient is censored; cannot place intervals".into()));
    }
    if events.len() < bins {
        return Err(Error::Config(format!(
            "{} uncensored patients cannot define {bins} intervals",
            events.len()
        )));
    }
    events.sort_by(f64::total_cmp);
    let boundaries = (1..bins)
        .map(|i| quantile_sorted(&events, i as f64 / bins as f64))
        .collect();
    let binning = Binning { boundaries };
    let ys = survivals.iter().map(|s| binning.bin_of(s.time_months)).collect();
    Ok((binning, ys))
}
