//! Per-tag evaluation report as CSV.

use std::io::{self, Write};
use std::path::Path;

use super::AucReport;

/// Writes `tag,auc,n_pos,n_neg` rows followed by a `__macro__` summary row.
/// Tags whose AUC is undefined get an empty auc field.
pub fn write_report(path: &Path, tags: &[String], report: &AucReport) -> io::Result<()> {
    assert_eq!(tags.len(), report.per_tag.len());
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "tag,auc,n_pos,n_neg")?;
    for (i, tag) in tags.iter().enumerate() {
        match report.per_tag[i] {
            Some(a) => writeln!(out, "{tag},{a:.6},{},{}", report.n_pos[i], report.n_neg[i])?,
            None => writeln!(out, "{tag},,{},{}", report.n_pos[i], report.n_neg[i])?,
        }
    }
    writeln!(out, "__macro__,{:.6},,", report.macro_auc)?;
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let report = AucReport {
            per_tag: vec![Some(0.75), None],
            n_pos: vec![10, 0],
            n_neg: vec![30, 40],
            macro_auc: 0.75,
            n_skipped: 1,
        };
        write_report(&path, &["tone".to_string(), "noise".to_string()], &report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "tag,auc,n_pos,n_neg");
        assert_eq!(lines[1], "tone,0.750000,10,30");
        assert_eq!(lines[2], "noise,,0,40");
        assert_eq!(lines[3], "__macro__,0.750000,,");
    }
}
