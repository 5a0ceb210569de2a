//! Report rendering: a key=value summary block, a blank line, then one or
//! more tab-separated tables. The summary block is the machine interface;
//! `read_summary` parses it back.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::abx::AbxReport;
use crate::eval::{DistanceReport, PurityReport};

fn triphone_text(t: (usize, usize, usize)) -> String {
    format!("{}-{}-{}", t.0, t.1, t.2)
}

pub fn render_purity(report: &PurityReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "overall_purity = {:.6}", report.overall);
    let _ = writeln!(s, "scored_frames = {}", report.scored_frames);
    let _ = writeln!(s, "clusters = {}", report.per_cluster.len());
    s.push('\n');
    s.push_str("cluster\tframes\tpurity\n");
    for c in &report.per_cluster {
        let _ = writeln!(s, "{}\t{}\t{:.6}", c.cluster, c.frames, c.purity);
    }
    s
}

pub fn render_relevance(report: &DistanceReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "units = {}", report.units.len());
    let _ = writeln!(s, "mean_d_star = {:.6}", report.mean_d_star);
    if let Some(v) = report.mean_d_second {
        let _ = writeln!(s, "mean_d_second = {v:.6}");
    }
    if let Some(v) = report.mean_delta {
        let _ = writeln!(s, "mean_delta = {v:.6}");
    }
    let _ = writeln!(s, "mean_variability = {:.6}", report.mean_variability);
    let uncovered: Vec<String> = report
        .uncovered_phones
        .iter()
        .map(|p| p.to_string())
        .collect();
    let _ = writeln!(s, "uncovered_phones = {}", uncovered.join(","));
    let _ = writeln!(
        s,
        "coverage = {}",
        if uncovered.is_empty() {
            "full"
        } else {
            "partial"
        }
    );
    s.push('\n');
    s.push_str("unit\tbest_phone\td_star\tsecond_phone\td_second\tdelta\n");
    for u in &report.units {
        let second = u.second_phone.map_or(String::from("-"), |p| p.to_string());
        let d2 = u.d_second.map_or(String::from("-"), |d| format!("{d:.6}"));
        let delta = u.delta.map_or(String::from("-"), |d| format!("{d:.6}"));
        let _ = writeln!(
            s,
            "{}\t{}\t{:.6}\t{}\t{}\t{}",
            u.unit, u.best_phone, u.d_star, second, d2, delta
        );
    }
    s.push('\n');
    s.push_str("phone\tvariability\n");
    for (phone, v) in &report.phone_variability {
        let _ = writeln!(s, "{phone}\t{v:.6}");
    }
    s
}

pub fn render_abx(report: &AbxReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "condition = {}", report.condition);
    if let Some(a) = report.aggregate {
        let _ = writeln!(s, "aggregate_error = {a:.6}");
    }
    let _ = writeln!(s, "evaluated_pairs = {}", report.pairs.len());
    let _ = writeln!(s, "skipped_pairs = {}", report.skipped.len());
    let _ = writeln!(s, "total_triples = {}", report.total_triples);
    s.push('\n');
    s.push_str("context\tpairs\tmean_error\n");
    for c in &report.contexts {
        let _ = writeln!(s, "{}\t{}\t{:.6}", c.context, c.pairs, c.mean_error);
    }
    s.push('\n');
    s.push_str("context\tx\ty\ttriples\terror\n");
    for p in &report.pairs {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{:.6}",
            p.context,
            triphone_text(p.x),
            triphone_text(p.y),
            p.triples,
            p.error
        );
    }
    s
}

pub fn write_purity_report(report: &PurityReport, path: &Path) -> Result<()> {
    std::fs::write(path, render_purity(report)).map_err(|e| Error::io(path, e))
}

pub fn write_relevance_report(report: &DistanceReport, path: &Path) -> Result<()> {
    std::fs::write(path, render_relevance(report)).map_err(|e| Error::io(path, e))
}

pub fn write_abx_report(report: &AbxReport, path: &Path) -> Result<()> {
    std::fs::write(path, render_abx(report)).map_err(|e| Error::io(path, e))
}

/// Key=value pairs of the summary block (everything before the first blank
/// line).
pub fn read_summary(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, lineno as u64 + 1, "summary line without '='"))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{ClusterPurity, PurityReport};

    #[test]
    fn purity_summary_round_trips() {
        let report = PurityReport {
            per_cluster: vec![
                ClusterPurity {
                    cluster: 0,
                    purity: 1.0,
                    frames: 10,
                },
                ClusterPurity {
                    cluster: 2,
                    purity: 0.5,
                    frames: 4,
                },
            ],
            overall: 0.857143,
            scored_frames: 14,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("purity.report");
        write_purity_report(&report, &path).unwrap();
        let summary = read_summary(&path).unwrap();
        assert_eq!(summary["overall_purity"], "0.857143");
        assert_eq!(summary["scored_frames"], "14");
        assert_eq!(summary["clusters"], "2");
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("cluster\tframes\tpurity"));
        assert!(text.contains("2\t4\t0.500000"));
    }

    #[test]
    fn summary_stops_at_blank_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r");
        std::fs::write(&path, "a = 1\nb = two\n\nnot = summary\n").unwrap();
        let summary = read_summary(&path).unwrap();
        assert_eq!(summary.len(), 2);
        assert_eq!(summary["b"], "two");
    }
}
