//! Tab-separated exports. Floats use the shortest text that parses back to
//! the same value.

use std::fmt::Write as _;

use ghanet_core::data::{Survival, CATEGORY_COUNT, CATEGORY_NAMES};
use ghanet_core::evaluation::{CategoryCorrelation, KmStep};
use ghanet_core::genes::GeneSelection;
use ghanet_core::model::Associations;
use ghanet_core::train::{EpochLoss, PatientPrediction};

use crate::error::FormatError;

macro_rules! line {
    ($s:expr, $($arg:tt)*) => {
        writeln!($s, $($arg)*).expect("string write")
    };
}

pub fn loss_trace_tsv(trace: &[EpochLoss]) -> String {
    let mut s = String::from("epoch\ttotal\tnll\treconstruction\n");
    for (e, l) in trace.iter().enumerate() {
        line!(s, "{}\t{}\t{}\t{}", e + 1, l.total, l.nll, l.reconstruction);
    }
    s
}

pub fn selection_tsv(selection: &GeneSelection, gene_ids: &[Vec<String>; CATEGORY_COUNT]) -> String {
    let mut s = String::from("gene_id\tcategory\tt\tp\tp_adj\tretained\n");
    if selection.tests.is_empty() {
        for (c, kept) in selection.retained.iter().enumerate() {
            for &j in kept {
                line!(s, "{}\t{}\tNA\tNA\tNA\t1", gene_ids[c][j], CATEGORY_NAMES[c]);
            }
        }
    }
    for t in &selection.tests {
        line!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            gene_ids[t.category][t.index],
            CATEGORY_NAMES[t.category],
            t.t,
            t.p,
            t.p_adjusted,
            u8::from(t.retained)
        );
    }
    s
}

/// One row per patient; `fold` is `-` outside cross-validation.
pub fn predictions_tsv(rows: &[(Option<usize>, &PatientPrediction)]) -> String {
    let bins = rows.first().map_or(0, |(_, p)| p.hazards.len());
    let mut s = String::from("patient_id\ttime_months\tcensor\tfold\trisk");
    for j in 1..=bins {
        write!(s, "\thazard_{j}").expect("string write");
    }
    for j in 1..=bins {
        write!(s, "\tsurvival_{j}").expect("string write");
    }
    s.push('\n');
    for (fold, p) in rows {
        let fold = fold.map_or("-".to_string(), |f| f.to_string());
        write!(
            s,
            "{}\t{}\t{}\t{fold}\t{}",
            p.patient_id,
            p.outcome.time_months,
            u8::from(p.outcome.censored),
            p.risk
        )
        .expect("string write");
        for v in p.hazards.iter().chain(&p.survival) {
            write!(s, "\t{v}").expect("string write");
        }
        s.push('\n');
    }
    s
}

/// Reads back what [`predictions_tsv`] writes.
pub fn parse_predictions(text: &str) -> Result<Vec<PatientPrediction>, FormatError> {
    let mut lines = text
        .split('\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.is_empty());
    let (_, header) = lines.next().unwrap_or((1, ""));
    let cols: Vec<&str> = header.split('\t').collect();
    let fixed = ["patient_id", "time_months", "censor", "fold", "risk"];
    let bins = cols.len().saturating_sub(fixed.len()) / 2;
    let expected: Vec<String> = fixed
        .iter()
        .map(|s| s.to_string())
        .chain((1..=bins).map(|j| format!("hazard_{j}")))
        .chain((1..=bins).map(|j| format!("survival_{j}")))
        .collect();
    if bins == 0 || cols != expected {
        return Err(FormatError::Header {
            line: 1,
            expected: "patient_id, time_months, censor, fold, risk, hazard_1.., survival_1..".into(),
            found: header.into(),
        });
    }
    lines
        .map(|(line, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = |message: String| FormatError::Field { line, message };
            if f.len() != cols.len() {
                return Err(bad(format!("expected {} fields, found {}", cols.len(), f.len())));
            }
            let num = |i: usize| -> Result<f64, FormatError> {
                f[i].parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(format!("{} `{}` is not a finite number", cols[i], f[i])))
            };
            let censored = match f[2] {
                "0" => false,
                "1" => true,
                other => return Err(bad(format!("censor must be 0 or 1, found `{other}`"))),
            };
            let values = (5..cols.len()).map(num).collect::<Result<Vec<_>, _>>()?;
            Ok(PatientPrediction {
                patient_id: f[0].into(),
                outcome: Survival {
                    time_months: num(1)?,
                    censored,
                },
                risk: num(4)?,
                hazards: values[..bins].to_vec(),
                survival: values[bins..].to_vec(),
            })
        })
        .collect()
}

pub fn km_tsv(groups: &[(&str, &[KmStep])]) -> String {
    let mut s = String::from("group\ttime\tsurvival\tat_risk\n");
    for (name, steps) in groups {
        for k in *steps {
            line!(s, "{name}\t{}\t{}\t{}", k.time, k.survival, k.at_risk);
        }
    }
    s
}

pub fn spearman_tsv(report: &[CategoryCorrelation]) -> String {
    let mut s = String::from("category\tpatients\tmean\tstd\tnote\n");
    for r in report {
        let note = r.note.as_deref().unwrap_or("");
        line!(
            s,
            "{}\t{}\t{}\t{}\t{note}",
            CATEGORY_NAMES[r.category],
            r.values.len(),
            r.mean,
            r.std
        );
    }
    s
}

/// Indices of the `n` largest masked weights, ties broken by the raw score
/// and then by lower index, so each list is a prefix of the row's
/// descending order.
pub fn top_patches(assoc: &Associations, row: usize, n: usize) -> Vec<usize> {
    let (raw, masked) = (assoc.raw.row(row), assoc.masked.row(row));
    let mut order: Vec<usize> = (0..masked.len()).collect();
    order.sort_by(|&a, &b| {
        masked[b]
            .total_cmp(&masked[a])
            .then(raw[b].total_cmp(&raw[a]))
            .then(a.cmp(&b))
    });
    order.truncate(n);
    order
}

pub fn associations_tsv(assoc: &Associations) -> String {
    let patches = assoc.raw.cols();
    let mut s = String::from("block\tcategory");
    for j in 0..patches {
        write!(s, "\tpatch_{j}").expect("string write");
    }
    s.push('\n');
    for (block, m) in [("raw", &assoc.raw), ("masked", &assoc.masked)] {
        for (c, name) in CATEGORY_NAMES.iter().enumerate() {
            write!(s, "{block}\t{name}").expect("string write");
            for v in m.row(c) {
                write!(s, "\t{v}").expect("string write");
            }
            s.push('\n');
        }
    }
    for (c, name) in CATEGORY_NAMES.iter().enumerate() {
        write!(s, "topk\t{name}").expect("string write");
        for j in top_patches(assoc, c, 4) {
            write!(s, "\t{j}").expect("string write");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ghanet_core::Tensor;

    fn pred(id: &str, risk: f64) -> PatientPrediction {
        PatientPrediction {
            patient_id: id.into(),
            hazards: vec![0.1, 0.2, 0.3, 0.4],
            survival: vec![0.9, 0.72, 0.504, 0.3024],
            risk,
            outcome: Survival {
                time_months: 7.25,
                censored: true,
            },
        }
    }

    #[test]
    fn predictions_round_trip() {
        let (a, b) = (pred("A", -2.4264), pred("B", 0.1 + 0.2));
        let text = predictions_tsv(&[(Some(0), &a), (None, &b)]);
        assert_eq!(parse_predictions(&text).unwrap(), vec![a, b]);
    }

    #[test]
    fn bad_prediction_rows_name_lines() {
        let text = predictions_tsv(&[(None, &pred("A", 1.0))]);
        let broken = text.replace("\t7.25\t", "\tx\t");
        assert!(matches!(parse_predictions(&broken), Err(FormatError::Field { line: 2, .. })));
        assert!(matches!(parse_predictions("id\trisk\n"), Err(FormatError::Header { .. })));
    }

    #[test]
    fn association_export_shape() {
        let raw = Tensor::from_rows(&vec![vec![0.5, 3.0, -1.0, 2.0, 1.0]; 6]).unwrap();
        let masked = ghanet_core::hsb::topk_masked_softmax(&raw, 40.0);
        let assoc = Associations { raw, masked };
        assert_eq!(top_patches(&assoc, 0, 4), vec![1, 3, 4, 0]);
        let text = associations_tsv(&assoc);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 12 + 6);
        assert_eq!(lines[7].split('\t').filter(|&v| v == "0").count(), 3);
        assert_eq!(lines[13], "topk\ttumor_suppression\t1\t3\t4\t0");
    }
}
