use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact non-negative fraction. A zero denominator reads as zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        Self { num, den }
    }

    pub fn value(self) -> f64 {
        if self.den == 0 {
            0.0
        } else {
            self.num as f64 / self.den as f64
        }
    }

    /// Whole percent, rounded half up, in integer arithmetic.
    pub fn percent(self) -> u64 {
        self.scaled_half_up(100)
    }

    /// Tenths of a percent, rounded half up: `141/151` gives `934`.
    pub fn per_mille(self) -> u64 {
        self.scaled_half_up(1000)
    }

    fn scaled_half_up(self, scale: u64) -> u64 {
        if self.den == 0 {
            return 0;
        }
        let (num, den) = (self.num as u128, self.den as u128);
        ((2 * scale as u128 * num + den) / (2 * den)) as u64
    }

    /// Equality of the represented values, `10/12 == 5/6`.
    pub fn same_value(self, other: Ratio) -> bool {
        if self.den == 0 || other.den == 0 {
            return self.value() == other.value();
        }
        self.num as u128 * other.den as u128 == other.num as u128 * self.den as u128
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// `K×K` counts, rows are true classes and columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    rows: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            rows: vec![vec![0; k]; k],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape(format!(
                "confusion matrix must be square and non-empty, got {k} rows of lengths {:?}",
                rows.iter().map(Vec::len).collect::<Vec<_>>()
            )));
        }
        Ok(Self { rows })
    }

    pub fn from_predictions(k: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut m = Self::zeros(k);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(Error::Shape(format!("class index out of range for {k} classes")));
            }
            m.rows[t][p] += 1;
        }
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.rows
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.rows[truth][predicted]
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.rows[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.rows.iter().map(|r| r[c]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|c| self.rows[c][c]).sum()
    }

    pub fn total(&self) -> u64 {
        self.rows.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> Ratio {
        Ratio::new(self.trace(), self.total())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: Ratio,
    pub recall: Ratio,
    /// `2·TP / (row sum + column sum)`, the harmonic mean of the two above.
    pub f1: Ratio,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub classes: Vec<ClassMetrics>,
    pub accuracy: Ratio,
    pub total: u64,
}

/// Per-class precision, recall, F1 and support. Precision is zero for a
/// class never predicted; F1 is zero when precision and recall both are.
pub fn classification_report(confusion: &ConfusionMatrix, class_names: &[String]) -> Result<EvalReport> {
    let k = confusion.num_classes();
    if class_names.len() != k {
        return Err(Error::Shape(format!(
            "{} class names for a {k}×{k} matrix",
            class_names.len()
        )));
    }
    let classes = (0..k)
        .map(|c| {
            let tp = confusion.get(c, c);
            let (row, col) = (confusion.row_sum(c), confusion.col_sum(c));
            ClassMetrics {
                name: class_names[c].clone(),
                precision: Ratio::new(tp, col),
                recall: Ratio::new(tp, row),
                f1: Ratio::new(2 * tp, row + col),
                support: row,
            }
        })
        .collect();
    Ok(EvalReport {
        confusion: confusion.clone(),
        classes,
        accuracy: confusion.accuracy(),
        total: confusion.total(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Text,
}

fn grid(out: &mut String, header: &[String], rows: &[(String, Vec<String>)]) {
    let label_w = rows.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0);
    let widths: Vec<usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| {
            rows.iter()
                .map(|(_, cells)| cells[i].chars().count())
                .chain([h.chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let pad = |s: &str, w: usize| format!("{}{s}", " ".repeat(w - s.chars().count()));
    let mut line = " ".repeat(label_w);
    for (h, &w) in header.iter().zip(&widths) {
        line.push_str("  ");
        line.push_str(&pad(h, w));
    }
    let _ = writeln!(out, "{}", line);
    for (label, cells) in rows {
        let mut line = format!("{label}{}", " ".repeat(label_w - label.chars().count()));
        for (c, &w) in cells.iter().zip(&widths) {
            line.push_str("  ");
            line.push_str(&pad(c, w));
        }
        let _ = writeln!(out, "{line}");
    }
}

/// Classification-report grid (metrics as rows, classes as columns), then
/// the confusion matrix (true classes as rows), then overall accuracy.
pub fn render_report_text(report: &EvalReport) -> String {
    let names: Vec<String> = report.classes.iter().map(|c| c.name.clone()).collect();
    let pct = |r: Ratio| format!("{}%", r.percent());
    let metric = |label: &str, f: &dyn Fn(&ClassMetrics) -> String| {
        (label.to_string(), report.classes.iter().map(f).collect())
    };
    let mut out = String::new();
    grid(
        &mut out,
        &names,
        &[
            metric("precision", &|c| pct(c.precision)),
            metric("recall", &|c| pct(c.recall)),
            metric("f1-score", &|c| pct(c.f1)),
            metric("support", &|c| c.support.to_string()),
        ],
    );
    out.push('\n');
    let rows: Vec<(String, Vec<String>)> = names
        .iter()
        .zip(report.confusion.rows())
        .map(|(n, r)| (n.clone(), r.iter().map(u64::to_string).collect()))
        .collect();
    grid(&mut out, &names, &rows);
    let pm = report.accuracy.per_mille();
    let _ = writeln!(
        out,
        "\naccuracy {}.{}% ({})",
        pm / 10,
        pm % 10,
        report.accuracy
    );
    out
}

pub fn render_report_json(report: &EvalReport) -> Result<String> {
    #[derive(Serialize)]
    struct Percents {
        precision: u64,
        recall: u64,
        f1: u64,
    }
    #[derive(Serialize)]
    struct Doc<'a> {
        #[serde(flatten)]
        report: &'a EvalReport,
        accuracy_percent: f64,
        percents: Vec<Percents>,
    }
    let doc = Doc {
        report,
        accuracy_percent: report.accuracy.per_mille() as f64 / 10.0,
        percents: report
            .classes
            .iter()
            .map(|c| Percents {
                precision: c.precision.percent(),
                recall: c.recall.percent(),
                f1: c.f1.percent(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&doc)?;
    s.push('\n');
    Ok(s)
}

pub fn export_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    let body = match format {
        ReportFormat::Json => render_report_json(report)?,
        ReportFormat::Text => render_report_text(report),
    };
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Parses a JSON report written by [`export_report`].
pub fn read_report_json(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(Ratio::new(1, 2).percent(), 50);
        assert_eq!(Ratio::new(1, 200).percent(), 1);
        assert_eq!(Ratio::new(1, 201).percent(), 0);
        assert_eq!(Ratio::new(2, 3).percent(), 67);
        assert_eq!(Ratio::new(141, 151).per_mille(), 934);
        assert_eq!(Ratio::new(0, 0).percent(), 0);
        assert!(Ratio::new(10, 12).same_value(Ratio::new(5, 6)));
    }

    #[test]
    fn identity_matrix_is_perfect() {
        let m = ConfusionMatrix::from_predictions(3, &[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let r = classification_report(&m, &names).unwrap();
        assert_eq!(r.accuracy.percent(), 100);
        for c in &r.classes {
            assert_eq!((c.precision.percent(), c.recall.percent(), c.f1.percent()), (100, 100, 100));
        }
        assert_eq!(r.classes[2].support, 2);
    }

    #[test]
    fn never_predicted_class_has_zero_precision() {
        let m = ConfusionMatrix::from_rows(vec![vec![2, 0], vec![3, 0]]).unwrap();
        let names = vec!["x".to_string(), "y".to_string()];
        let r = classification_report(&m, &names).unwrap();
        assert_eq!(r.classes[1].precision.value(), 0.0);
        assert_eq!(r.classes[1].f1.value(), 0.0);
        let text = render_report_text(&r);
        assert!(!text.contains("n/a") && !text.contains("NaN"));
    }

    #[test]
    fn non_square_rejected() {
        assert!(ConfusionMatrix::from_rows(vec![vec![1, 2]]).is_err());
        assert!(ConfusionMatrix::from_rows(vec![]).is_err());
    }
}
