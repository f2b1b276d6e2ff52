//! Clinical table: CSV with header `patient_id,time_months,censor`, censor 1
//! meaning the patient left follow-up without the event.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use ghanet_core::data::Survival;

use crate::error::{Error, FormatError, Result};

pub const HEADER: &str = "patient_id,time_months,censor";

#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalRecord {
    pub patient_id: String,
    pub survival: Survival,
}

/// Lines are split on `\n`; a trailing `\r` and blank lines are ignored.
pub fn parse_clinical(text: &str) -> Result<Vec<ClinicalRecord>, FormatError> {
    let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, header) = lines.next().unwrap_or((1, ""));
    if header.trim() != HEADER {
        return Err(FormatError::Header {
            line: 1,
            expected: HEADER.into(),
            found: header.into(),
        });
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        let field = |message: String| FormatError::Field { line, message };
        let [id, time, censor] = fields[..] else {
            return Err(field(format!("expected 3 fields, found {}", fields.len())));
        };
        if id.is_empty() {
            return Err(field("empty patient_id".into()));
        }
        let time_months: f64 = time
            .parse()
            .map_err(|_| field(format!("time_months `{time}` is not a number")))?;
        if !(time_months.is_finite() && time_months > 0.0) {
            return Err(field(format!("time_months must be positive, found {time}")));
        }
        let censored = match censor {
            "0" => false,
            "1" => true,
            other => return Err(field(format!("censor must be 0 or 1, found `{other}`"))),
        };
        if !seen.insert(id.to_string()) {
            return Err(FormatError::Duplicate {
                line,
                what: "patient_id",
                id: id.into(),
            });
        }
        out.push(ClinicalRecord {
            patient_id: id.into(),
            survival: Survival { time_months, censored },
        });
    }
    Ok(out)
}

pub fn render_clinical(records: &[ClinicalRecord]) -> String {
    let mut s = String::from(HEADER);
    s.push('\n');
    for r in records {
        let c = u8::from(r.survival.censored);
        writeln!(s, "{},{},{c}", r.patient_id, r.survival.time_months).expect("string write");
    }
    s
}

pub fn read_clinical(path: &Path) -> Result<Vec<ClinicalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_clinical(&text).map_err(|e| Error::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let text = "patient_id,time_months,censor\nA,12.5,0\r\nB,3,1\n\n";
        let recs = parse_clinical(text).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].survival, Survival { time_months: 3.0, censored: true });
        assert_eq!(parse_clinical(&render_clinical(&recs)).unwrap(), recs);
    }

    #[test]
    fn non_positive_time_names_the_line() {
        let err = parse_clinical("patient_id,time_months,censor\nA,1,0\nB,0,0\n").unwrap_err();
        assert!(matches!(err, FormatError::Field { line: 3, .. }), "{err}");
        let err = parse_clinical("patient_id,time_months,censor\nA,NaN,0\n").unwrap_err();
        assert!(matches!(err, FormatError::Field { line: 2, .. }));
    }

    #[test]
    fn duplicates_header_and_censor() {
        let err = parse_clinical("patient_id,time_months,censor\nA,1,0\nA,2,1\n").unwrap_err();
        assert_eq!(err, FormatError::Duplicate { line: 3, what: "patient_id", id: "A".into() });
        assert!(matches!(parse_clinical("id,time,c\n"), Err(FormatError::Header { line: 1, .. })));
        assert!(matches!(
            parse_clinical("patient_id,time_months,censor\nA,1,2\n"),
            Err(FormatError::Field { line: 2, .. })
        ));
        assert!(matches!(
            parse_clinical("patient_id,time_months,censor\nA,1\n"),
            Err(FormatError::Field { line: 2, .. })
        ));
    }
}
