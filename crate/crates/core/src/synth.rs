//! Synthetic cohorts with known structure.
//!
//! Each patient has a mixture over `P` tissue prototypes. Patches are noisy
//! copies of prototypes drawn by that mixture, gene expression is a linear
//! map of the mixture, and hazard grows with the weight of prototype 0.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{Cohort, GenomicProfile, PatchBag, Patient, Survival, CATEGORY_COUNT};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Prototype whose weight drives hazard and the planted genes.
pub const MALIGNANT: usize = 0;

const CATEGORY_PREFIXES: [&str; CATEGORY_COUNT] = ["TS", "ONC", "PK", "CD", "TX", "CG"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub patients: usize,
    pub min_patches: usize,
    pub max_patches: usize,
    pub dim: usize,
    pub prototypes: usize,
    pub genes_per_category: [usize; CATEGORY_COUNT],
    /// Std of the isotropic noise added to each patch.
    pub patch_noise: f64,
    /// Std of the additive expression noise.
    pub gene_noise: f64,
    /// Symmetric Dirichlet concentration of the prototype mixtures.
    pub concentration: f64,
    /// Distance between the malignant prototype and the benign prototype it
    /// is a variant of; 0 draws it independently like the others.
    pub malignant_separation: f64,
    /// Log-hazard per unit of malignant weight.
    pub risk_strength: f64,
    /// Median event time of an average-risk patient.
    pub median_survival_months: f64,
    /// Target share of censored patients.
    pub censoring: f64,
    /// Share of each category's genes loading on the malignant prototype.
    pub planted_share: f64,
    /// Share of each category's genes carrying no signal at all.
    pub noise_share: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            patients: 200,
            min_patches: 32,
            max_patches: 96,
            dim: 32,
            prototypes: 6,
            genes_per_category: [4, 12, 16, 16, 48, 12],
            patch_noise: 1.0,
            gene_noise: 0.3,
            concentration: 1.0,
            malignant_separation: 2.0,
            risk_strength: 12.0,
            median_survival_months: 24.0,
            censoring: 0.3,
            planted_share: 0.4,
            noise_share: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patients == 0 || self.dim == 0 || self.prototypes == 0 {
            return fail("patients, dim and prototypes must be positive".into());
        }
        if self.prototypes > self.dim {
            return fail(format!(
                "{} prototypes cannot be independent in {} dimensions",
                self.prototypes, self.dim
            ));
        }
        if self.min_patches == 0 || self.min_patches > self.max_patches {
            return fail("patch range must satisfy 1 <= min_patches <= max_patches".into());
        }
        let non_negative = [
            self.patch_noise,
            self.gene_noise,
            self.risk_strength,
            self.malignant_separation,
        ];
        if non_negative.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return fail("noise levels and risk strength must be finite and non-negative".into());
        }
        if !(self.concentration > 0.0 && self.median_survival_months > 0.0) {
            return fail("concentration and median survival must be positive".into());
        }
        if !(0.0..1.0).contains(&self.censoring) {
            return fail("censoring share must lie in [0, 1)".into());
        }
        let shares_ok = (0.0..=1.0).contains(&self.planted_share)
            && (0.0..=1.0).contains(&self.noise_share)
            && self.planted_share + self.noise_share <= 1.0;
        if !shares_ok {
            return fail("planted and noise gene shares must be in [0, 1] and sum to at most 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneRole {
    /// Loads on the malignant prototype.
    Planted,
    /// Loads on the benign prototypes only.
    Background,
    /// Constant plus noise.
    Noise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTruth {
    /// `P × d`.
    pub prototypes: Tensor,
    /// Per patient, `P` weights summing to 1.
    pub mixtures: Vec<Vec<f64>>,
    /// Per category, one row of `P` loadings per gene; column `p` is the
    /// noiseless expression of a patient made entirely of prototype `p`.
    pub gene_maps: [Vec<Vec<f64>>; CATEGORY_COUNT],
    pub roles: [Vec<GeneRole>; CATEGORY_COUNT],
    pub risk_coefficients: Vec<f64>,
    /// Per patient log-hazard offset, centred on the cohort mean.
    pub risks: Vec<f64>,
}

fn dirichlet(rng: &mut ChaCha8Rng, k: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("validated concentration");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter().map(|g| g / total).collect()
    } else {
        // every draw underflowed; fall back to a single random prototype
        let mut m = alloc::vec![0.0; k];
        m[rng.random_range(0..k)] = 1.0;
        m
    }
}

/// Exponential censoring rate whose expected censored share over these
/// patients equals `share`; `P(C < T_i) = r / (r + λ_i)`, solved by bisection.
fn censoring_rate(event_rates: &[f64], share: f64) -> f64 {
    let expected = |r: f64| event_rates.iter().map(|l| r / (r + l)).sum::<f64>() / event_rates.len() as f64;
    let (mut lo, mut hi) = (0.0, 1.0);
    while expected(hi) < share {
        hi *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if expected(mid) < share {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("validated std")
}

/// Draws a cohort; the same `(config, seed)` always gives the same cohort.
pub fn generate(config: &SynthConfig, seed: u64) -> Result<(Cohort, PlantedTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, d) = (config.prototypes, config.dim);

    let unit = normal(1.0);
    let mut prototypes: Vec<f64> = (0..p * d).map(|_| unit.sample(&mut rng)).collect();
    if config.malignant_separation > 0.0 && p > 1 {
        // malignant = benign prototype 1 shifted along a random unit direction
        let dir: Vec<f64> = (0..d).map(|_| unit.sample(&mut rng)).collect();
        let norm = crate::math::sqrt(dir.iter().map(|v| v * v).sum());
        for k in 0..d {
            prototypes[MALIGNANT * d + k] = prototypes[d + k] + config.malignant_separation * dir[k] / norm;
        }
    }
    let prototypes = Tensor::new(alloc::vec![p, d], prototypes)?;

    let mut gene_maps: [Vec<Vec<f64>>; CATEGORY_COUNT] = Default::default();
    let mut roles: [Vec<GeneRole>; CATEGORY_COUNT] = Default::default();
    let baseline = Uniform::new(2.0, 6.0).expect("fixed range");
    let loading = Uniform::new(1.5, 3.0).expect("fixed range");
    for c in 0..CATEGORY_COUNT {
        let genes = config.genes_per_category[c];
        let planted = if genes == 0 {
            0
        } else {
            (crate::math::round(genes as f64 * config.planted_share) as usize).clamp(1, genes)
        };
        let noise = (crate::math::round(genes as f64 * config.noise_share) as usize).min(genes - planted);
        for j in 0..genes {
            let role = if j < planted {
                GeneRole::Planted
            } else if j < genes - noise {
                GeneRole::Background
            } else {
                GeneRole::Noise
            };
            roles[c].push(role);
            let base = baseline.sample(&mut rng);
            let row = (0..p)
                .map(|q| {
                    let extra = match role {
                        GeneRole::Planted if q == MALIGNANT => loading.sample(&mut rng),
                        GeneRole::Background if q != MALIGNANT => {
                            loading.sample(&mut rng) * rng.random::<f64>()
                        }
                        _ => 0.0,
                    };
                    base + extra
                })
                .collect();
            gene_maps[c].push(row);
        }
    }

    let mut risk_coefficients = alloc::vec![0.0; p];
    risk_coefficients[MALIGNANT] = config.risk_strength;

    let patch_noise = normal(config.patch_noise);
    let gene_noise = normal(config.gene_noise);
    let mut mixtures = Vec::with_capacity(config.patients);
    let mut bags = Vec::with_capacity(config.patients);
    let mut profiles = Vec::with_capacity(config.patients);
    for i in 0..config.patients {
        let mixture = dirichlet(&mut rng, p, config.concentration);
        let n = rng.random_range(config.min_patches..=config.max_patches);
        let mut features = Vec::with_capacity(n * d);
        for _ in 0..n {
            let mut u: f64 = rng.random();
            let mut proto = p - 1;
            for (q, w) in mixture.iter().enumerate() {
                if u < *w {
                    proto = q;
                    break;
                }
                u -= w;
            }
            for k in 0..d {
                let v = prototypes.at(proto, k) + patch_noise.sample(&mut rng);
                features.push(v as f32 as f64);
            }
        }
        let categories = core::array::from_fn(|c| {
            gene_maps[c]
                .iter()
                .map(|row| {
                    let clean: f64 = row.iter().zip(&mixture).map(|(a, m)| a * m).sum();
                    (clean + gene_noise.sample(&mut rng)).max(0.0)
                })
                .collect()
        });
        bags.push(PatchBag::new(format!("SYN-{:04}", i + 1), Tensor::new(alloc::vec![n, d], features)?)?);
        profiles.push(GenomicProfile { categories });
        mixtures.push(mixture);
    }

    let raw: Vec<f64> = mixtures
        .iter()
        .map(|m| m.iter().zip(&risk_coefficients).map(|(a, b)| a * b).sum())
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let risks: Vec<f64> = raw.iter().map(|r| r - mean).collect();

    let base_rate = core::f64::consts::LN_2 / config.median_survival_months;
    let event_rates: Vec<f64> = risks.iter().map(|r| base_rate * crate::math::exp(*r)).collect();
    let censor_rate = censoring_rate(&event_rates, config.censoring);
    let censor_clock = (config.censoring > 0.0).then(|| Exp::new(censor_rate).expect("positive rate"));
    let mut patients = Vec::with_capacity(config.patients);
    for ((bag, genomics), rate) in bags.into_iter().zip(profiles).zip(&event_rates) {
        let event = Exp::new(*rate)
            .expect("positive rate")
            .sample(&mut rng);
        let censor = censor_clock.map_or(f64::INFINITY, |e| e.sample(&mut rng));
        let (time, censored) = if censor < event { (censor, true) } else { (event, false) };
        patients.push(Patient {
            bag,
            genomics: Some(genomics),
            survival: Survival {
                time_months: time.max(1e-3),
                censored,
            },
        });
    }

    let gene_ids = core::array::from_fn(|c| {
        (0..config.genes_per_category[c])
            .map(|j| format!("{}_{:03}", CATEGORY_PREFIXES[c], j + 1))
            .collect()
    });
    Ok((
        Cohort { patients, gene_ids },
        PlantedTruth {
            prototypes,
            mixtures,
            gene_maps,
            roles,
            risk_coefficients,
            risks,
        },
    ))
}
