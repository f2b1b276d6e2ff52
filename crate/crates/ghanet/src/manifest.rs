//! Cohort manifest: a JSON file naming the clinical table, the optional
//! genomics pair and one bag file per patient. Relative paths resolve
//! against the manifest's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ghanet_core::data::{Cohort, PatchBag, Patient};
use serde::{Deserialize, Serialize};

use crate::bag::{read_bag, write_bag};
use crate::clinical::{read_clinical, render_clinical, ClinicalRecord};
use crate::error::{Error, Result};
use crate::genomics::{read_genomics, render_categories, render_matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenomicsFiles {
    pub matrix: PathBuf,
    pub categories: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub clinical: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genomics: Option<GenomicsFiles>,
    pub bags: BTreeMap<String, PathBuf>,
}

/// Whether a load should touch the genomics files at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Genomics {
    Load,
    Skip,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Patients come out in clinical-table order. With [`Genomics::Skip`] the
/// genomics files are never opened, so they may be absent.
pub fn load_cohort(manifest_path: &Path, genomics: Genomics) -> Result<Cohort> {
    let manifest: Manifest = read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let clinical = read_clinical(&base.join(&manifest.clinical))?;
    for id in manifest.bags.keys() {
        if !clinical.iter().any(|r| &r.patient_id == id) {
            return Err(Error::Invalid(format!(
                "{}: bag listed for `{id}`, who is not in the clinical table",
                manifest_path.display()
            )));
        }
    }
    let table = match (genomics, &manifest.genomics) {
        (Genomics::Skip, _) => None,
        (Genomics::Load, Some(g)) => Some(read_genomics(&base.join(&g.matrix), &base.join(&g.categories))?),
        (Genomics::Load, None) => {
            return Err(Error::Invalid(format!(
                "{}: this command needs genomics but the manifest lists none",
                manifest_path.display()
            )))
        }
    };
    let mut patients = Vec::with_capacity(clinical.len());
    for ClinicalRecord { patient_id, survival } in clinical {
        let bag_path = manifest.bags.get(&patient_id).ok_or_else(|| {
            Error::Invalid(format!(
                "{}: no bag listed for patient `{patient_id}`",
                manifest_path.display()
            ))
        })?;
        let features = read_bag(&base.join(bag_path))?;
        let genomics = match &table {
            None => None,
            Some(t) => Some(t.profiles.get(&patient_id).cloned().ok_or_else(|| {
                Error::Invalid(format!("patient `{patient_id}` has no column in the genomics matrix"))
            })?),
        };
        patients.push(Patient {
            bag: PatchBag::new(patient_id, features)?,
            genomics,
            survival,
        });
    }
    let cohort = Cohort {
        patients,
        gene_ids: table.map(|t| t.gene_ids).unwrap_or_default(),
    };
    cohort.validate()?;
    Ok(cohort)
}

/// Writes the cohort as `manifest.json`, `clinical.csv`, `bags/<id>.ghb`
/// and, when every patient has a profile, `genomics.tsv` plus
/// `gene_categories.tsv`. Returns the manifest path.
pub fn write_cohort(dir: &Path, cohort: &Cohort) -> Result<PathBuf> {
    let bags_dir = dir.join("bags");
    std::fs::create_dir_all(&bags_dir).map_err(|e| Error::io(&bags_dir, e))?;
    let mut bags = BTreeMap::new();
    let mut records = Vec::with_capacity(cohort.len());
    for p in &cohort.patients {
        let id = p.id();
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(Error::Invalid(format!("patient id `{id}` cannot name a file")));
        }
        let rel = PathBuf::from("bags").join(format!("{id}.ghb"));
        write_bag(&dir.join(&rel), &p.bag.features)?;
        bags.insert(id.to_string(), rel);
        records.push(ClinicalRecord {
            patient_id: id.into(),
            survival: p.survival,
        });
    }
    write_text(&dir.join("clinical.csv"), &render_clinical(&records))?;

    let profiles: Option<Vec<_>> = cohort
        .patients
        .iter()
        .map(|p| p.genomics.as_ref().map(|g| (p.id(), g)))
        .collect();
    let genomics = match profiles {
        Some(profiles) if !profiles.is_empty() => {
            write_text(&dir.join("genomics.tsv"), &render_matrix(&cohort.gene_ids, &profiles))?;
            write_text(&dir.join("gene_categories.tsv"), &render_categories(&cohort.gene_ids))?;
            Some(GenomicsFiles {
                matrix: "genomics.tsv".into(),
                categories: "gene_categories.tsv".into(),
            })
        }
        _ => None,
    };
    let manifest = Manifest {
        clinical: "clinical.csv".into(),
        genomics,
        bags,
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}
