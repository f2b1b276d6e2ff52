//! Expression matrix (TSV, genes as rows, patients as columns) and the
//! sidecar TSV assigning each gene to one of the six functional categories.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use ghanet_core::data::{category_index, GenomicProfile, CATEGORY_COUNT, CATEGORY_NAMES};

use crate::error::{Error, FormatError, Result};

pub const CATEGORY_HEADER: &str = "gene_id\tcategory";

/// Per-patient profiles; genes inside a category keep matrix row order.
#[derive(Debug, Clone, PartialEq)]
pub struct GenomicsTable {
    pub gene_ids: [Vec<String>; CATEGORY_COUNT],
    pub profiles: HashMap<String, GenomicProfile>,
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.split('\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// gene id → category index.
pub fn parse_categories(text: &str) -> Result<HashMap<String, usize>, FormatError> {
    let mut it = lines(text);
    match it.next() {
        Some((_, h)) if h == CATEGORY_HEADER => {}
        other => {
            let (line, found) = other.unwrap_or((1, ""));
            return Err(FormatError::Header {
                line,
                expected: CATEGORY_HEADER.replace('\t', "<TAB>"),
                found: found.into(),
            });
        }
    }
    let mut out = HashMap::new();
    for (line, l) in it {
        let Some((gene, cat)) = l.split_once('\t') else {
            return Err(FormatError::Field {
                line,
                message: "expected gene_id<TAB>category".into(),
            });
        };
        let c = category_index(cat.trim()).ok_or_else(|| FormatError::Field {
            line,
            message: format!("unknown category `{cat}`, expected one of {}", CATEGORY_NAMES.join(", ")),
        })?;
        if out.insert(gene.to_string(), c).is_some() {
            return Err(FormatError::Duplicate {
                line,
                what: "gene_id",
                id: gene.into(),
            });
        }
    }
    Ok(out)
}

/// Every matrix gene must have a category and vice versa. Values must be
/// finite and non-negative (expression levels).
pub fn parse_matrix(text: &str, categories: &HashMap<String, usize>) -> Result<GenomicsTable, FormatError> {
    let mut it = lines(text);
    let (_, header) = it.next().unwrap_or((1, ""));
    let columns: Vec<&str> = header.split('\t').collect();
    if columns.first() != Some(&"gene_id") {
        return Err(FormatError::Header {
            line: 1,
            expected: "gene_id<TAB><patient ids...>".into(),
            found: header.into(),
        });
    }
    let patients = &columns[1..];
    let mut unique = HashSet::new();
    for p in patients {
        if !unique.insert(*p) {
            return Err(FormatError::Duplicate {
                line: 1,
                what: "patient column",
                id: (*p).into(),
            });
        }
    }
    let mut gene_ids: [Vec<String>; CATEGORY_COUNT] = Default::default();
    let mut values: Vec<[Vec<f64>; CATEGORY_COUNT]> = vec![Default::default(); patients.len()];
    let mut seen = HashSet::new();
    for (line, l) in it {
        let fields: Vec<&str> = l.split('\t').collect();
        if fields.len() != columns.len() {
            return Err(FormatError::Field {
                line,
                message: format!("expected {} fields, found {}", columns.len(), fields.len()),
            });
        }
        let gene = fields[0];
        let &c = categories.get(gene).ok_or_else(|| FormatError::Field {
            line,
            message: format!("gene `{gene}` has no category in the sidecar"),
        })?;
        if !seen.insert(gene) {
            return Err(FormatError::Duplicate {
                line,
                what: "gene_id",
                id: gene.into(),
            });
        }
        gene_ids[c].push(gene.into());
        for (p, raw) in fields[1..].iter().enumerate() {
            let v: f64 = raw.trim().parse().map_err(|_| FormatError::Field {
                line,
                message: format!("`{raw}` for patient {} is not a number", patients[p]),
            })?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(FormatError::Field {
                    line,
                    message: format!("expression for patient {} must be finite and non-negative, found {raw}", patients[p]),
                });
            }
            values[p][c].push(v);
        }
    }
    if let Some(missing) = categories.keys().filter(|g| !seen.contains(g.as_str())).min() {
        return Err(FormatError::Field {
            line: 1,
            message: format!("gene `{missing}` is listed in the sidecar but has no matrix row"),
        });
    }
    let profiles = patients
        .iter()
        .zip(values)
        .map(|(p, categories)| (p.to_string(), GenomicProfile { categories }))
        .collect();
    Ok(GenomicsTable { gene_ids, profiles })
}

pub fn read_genomics(matrix: &Path, sidecar: &Path) -> Result<GenomicsTable> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let categories = parse_categories(&read(sidecar)?).map_err(|e| Error::format(sidecar, e))?;
    parse_matrix(&read(matrix)?, &categories).map_err(|e| Error::format(matrix, e))
}

pub fn render_categories(gene_ids: &[Vec<String>; CATEGORY_COUNT]) -> String {
    let mut s = format!("{CATEGORY_HEADER}\n");
    for (c, genes) in gene_ids.iter().enumerate() {
        for g in genes {
            writeln!(s, "{g}\t{}", CATEGORY_NAMES[c]).expect("string write");
        }
    }
    s
}

/// Columns follow `patients` order.
pub fn render_matrix(
    gene_ids: &[Vec<String>; CATEGORY_COUNT],
    patients: &[(&str, &GenomicProfile)],
) -> String {
    let mut s = String::from("gene_id");
    for (id, _) in patients {
        write!(s, "\t{id}").expect("string write");
    }
    s.push('\n');
    for (c, genes) in gene_ids.iter().enumerate() {
        for (j, g) in genes.iter().enumerate() {
            s.push_str(g);
            for (_, profile) in patients {
                write!(s, "\t{}", profile.categories[c][j]).expect("string write");
            }
            s.push('\n');
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIDECAR: &str = "gene_id\tcategory\nTP53\ttumor_suppression\nMYC\toncogenesis\nEGFR\tprotein_kinases\n";

    #[test]
    fn parses_in_category_order() {
        let cats = parse_categories(SIDECAR).unwrap();
        let m = "gene_id\tP1\tP2\nMYC\t1.5\t2\nTP53\t0\t3.25\nEGFR\t4\t5\n";
        let t = parse_matrix(m, &cats).unwrap();
        assert_eq!(t.gene_ids[0], vec!["TP53"]);
        assert_eq!(t.gene_ids[1], vec!["MYC"]);
        assert_eq!(t.profiles["P2"].categories[0], vec![3.25]);
        assert_eq!(t.profiles["P1"].lengths(), [1, 1, 1, 0, 0, 0]);

        let p1 = &t.profiles["P1"];
        let p2 = &t.profiles["P2"];
        let text = render_matrix(&t.gene_ids, &[("P1", p1), ("P2", p2)]);
        let again = parse_matrix(&text, &parse_categories(&render_categories(&t.gene_ids)).unwrap()).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn errors_name_lines() {
        let bad_cat = "gene_id\tcategory\nX\tmetabolism\n";
        assert!(matches!(parse_categories(bad_cat), Err(FormatError::Field { line: 2, .. })));
        let dup = "gene_id\tcategory\nX\ttranscription\nX\ttranscription\n";
        assert!(matches!(parse_categories(dup), Err(FormatError::Duplicate { line: 3, .. })));

        let cats = parse_categories(SIDECAR).unwrap();
        let nan = "gene_id\tP1\nMYC\t1\nTP53\tNaN\nEGFR\t1\n";
        assert!(matches!(parse_matrix(nan, &cats), Err(FormatError::Field { line: 3, .. })));
        let short = "gene_id\tP1\tP2\nMYC\t1\n";
        assert!(matches!(parse_matrix(short, &cats), Err(FormatError::Field { line: 2, .. })));
        let missing = "gene_id\tP1\nMYC\t1\nTP53\t1\n";
        assert!(parse_matrix(missing, &cats).is_err());
        let dup_patient = "gene_id\tP1\tP1\n";
        assert!(matches!(parse_matrix(dup_patient, &cats), Err(FormatError::Duplicate { line: 1, .. })));
    }
}
