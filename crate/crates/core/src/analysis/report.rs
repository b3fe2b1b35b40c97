use std::fmt::Write as _;

use super::{Comparison, EvaluationReport, VerificationReport};

pub const CLASS_CSV_HEADER: &str = "class_id,class_name,n,correct,accuracy";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Full report as pretty-printed JSON.
    Json,
    /// Per-class table.
    Csv,
}

/// Renders `report` in `format`. Output is a pure function of the report.
pub fn emit_report_data(report: &EvaluationReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_string_pretty(report).expect("report serializes");
            out.push('\n');
            out
        }
        ReportFormat::Csv => class_csv(report),
    }
}

pub fn class_csv(report: &EvaluationReport) -> String {
    let mut out = format!("{CLASS_CSV_HEADER}\n");
    for c in report.per_class.values() {
        let _ = writeln!(out, "{},{},{},{},{:.6}", c.class_id, field(&c.class_name), c.n, c.correct, c.accuracy);
    }
    out
}

pub fn depth_csv(report: &EvaluationReport) -> String {
    let mut out = String::from("depth,first_errors\n");
    for (depth, count) in &report.per_depth_first_error {
        let _ = writeln!(out, "{depth},{count}");
    }
    out
}

pub fn comparison_csv(comparison: &Comparison) -> String {
    let mut out = String::from("class_id,class_name,accuracy_a,accuracy_b,delta,winner\n");
    for row in &comparison.rows {
        let winner = match row.winner {
            super::Winner::A => "a",
            super::Winner::B => "b",
            super::Winner::Tie => "tie",
        };
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{winner}",
            row.class_id,
            field(&row.class_name),
            row.accuracy_a,
            row.accuracy_b,
            row.delta
        );
    }
    out
}

pub fn verification_csv(report: &VerificationReport) -> String {
    let mut out = String::from("class_id,class_name,questions_total,questions_correct,accuracy\n");
    for c in report.per_class.values() {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6}",
            c.class_id,
            field(&c.class_name),
            c.questions_total,
            c.questions_correct,
            c.accuracy
        );
    }
    out
}

/// Quotes a CSV field when it holds a separator, quote or newline.
fn field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quoting() {
        assert_eq!(field("stop"), "stop");
        assert_eq!(field("a, b"), "\"a, b\"");
        assert_eq!(field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }
}
