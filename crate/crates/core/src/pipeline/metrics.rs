//! Confusion matrices and per-class precision, recall and F1.
//!
//! File format: a first line of class names, then one row of counts per
//! class (rows are ground truth, columns predictions). Blank lines and lines
//! starting with `#` are skipped.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::cloud::UNLABELED;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    /// `counts[truth][prediction]`.
    pub counts: Vec<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub name: String,
    pub support: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    pub overall_accuracy: f64,
    /// Unweighted mean F1 over classes with nonzero support.
    pub average_f1: f64,
    pub total: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let c = classes.len();
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; c]; c],
        }
    }

    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = classes.len();
        if c == 0 || counts.len() != c || counts.iter().any(|r| r.len() != c) {
            return Err(Error::Shape(format!("confusion matrix must be {c}x{c}")));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    /// Counts label pairs, skipping unlabeled ground truth.
    pub fn from_labels(classes: Vec<String>, truth: &[u8], predicted: &[u8]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} truth labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut m = ConfusionMatrix::new(classes);
        let c = m.classes.len();
        for (&t, &p) in truth.iter().zip(predicted) {
            if t == UNLABELED {
                continue;
            }
            if t as usize >= c || p as usize >= c {
                return Err(Error::InvalidArgument(format!("label pair ({t}, {p}) outside {c} classes")));
            }
            m.counts[t as usize][p as usize] += 1;
        }
        Ok(m)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let (_, header) = lines.next().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "missing class-name header".into(),
        })?;
        let classes: Vec<String> = header.split_whitespace().map(String::from).collect();
        let mut counts = Vec::new();
        for (i, line) in lines {
            let row: std::result::Result<Vec<u64>, _> = line.split_whitespace().map(str::parse).collect();
            let row = row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("bad count: {e}"),
            })?;
            if row.len() != classes.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected {} counts, found {}", classes.len(), row.len()),
                });
            }
            counts.push(row);
        }
        if counts.len() != classes.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: text.lines().count(),
                msg: format!("expected {} rows, found {}", classes.len(), counts.len()),
            });
        }
        Self::from_counts(classes, counts)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.classes.join(" ");
        s.push('\n');
        for row in &self.counts {
            let r: Vec<String> = row.iter().map(u64::to_string).collect();
            s.push_str(&r.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn evaluate(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::InvalidArgument("confusion matrix is all zero".into()));
        }
        let c = self.classes.len();
        let mut per_class = Vec::with_capacity(c);
        let mut trace = 0;
        for k in 0..c {
            let tp = self.counts[k][k];
            trace += tp;
            let support: u64 = self.counts[k].iter().sum();
            let predicted: u64 = (0..c).map(|r| self.counts[r][k]).sum();
            let precision = (predicted > 0).then(|| tp as f64 / predicted as f64);
            let recall = (support > 0).then(|| tp as f64 / support as f64);
            let f1 = match (precision, recall) {
                (_, None) => None,
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                _ => Some(0.0),
            };
            per_class.push(ClassMetrics {
                name: self.classes[k].clone(),
                support,
                precision,
                recall,
                f1,
            });
        }
        let defined: Vec<f64> = per_class.iter().filter_map(|m| m.f1).collect();
        for m in per_class.iter().filter(|m| m.f1.is_none()) {
            log::warn!("class `{}` has no ground-truth points; excluded from average F1", m.name);
        }
        let average_f1 = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        Ok(Metrics {
            per_class,
            overall_accuracy: trace as f64 / total as f64,
            average_f1,
            total,
        })
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "undef".to_string(), |x| format!("{x:.4}"))
}

impl Metrics {
    /// Aligned table followed by `key=value` lines.
    pub fn report(&self, mode: &str) -> String {
        let w = self.per_class.iter().map(|m| m.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        writeln!(s, "# metrics computed on {mode} points").unwrap();
        writeln!(s, "{:<w$} {:>10} {:>9} {:>9} {:>9}", "class", "support", "precision", "recall", "f1").unwrap();
        for m in &self.per_class {
            writeln!(
                s,
                "{:<w$} {:>10} {:>9} {:>9} {:>9}",
                m.name,
                m.support,
                cell(m.precision),
                cell(m.recall),
                cell(m.f1)
            )
            .unwrap();
        }
        writeln!(s, "mode={mode}").unwrap();
        writeln!(s, "total={}", self.total).unwrap();
        writeln!(s, "oa={:.6}", self.overall_accuracy).unwrap();
        writeln!(s, "avg_f1={:.6}", self.average_f1).unwrap();
        for m in &self.per_class {
            for (key, v) in [("precision", m.precision), ("recall", m.recall), ("f1", m.f1)] {
                writeln!(s, "{key}.{}={}", m.name, v.map_or("undef".into(), |x| format!("{x:.6}"))).unwrap();
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn diagonal_is_perfect() {
        let m = ConfusionMatrix::from_counts(names(3), vec![vec![5, 0, 0], vec![0, 2, 0], vec![0, 0, 9]]).unwrap();
        let e = m.evaluate().unwrap();
        assert_eq!(e.overall_accuracy, 1.0);
        assert_eq!(e.average_f1, 1.0);
        assert!(e.per_class.iter().all(|c| c.precision == Some(1.0) && c.recall == Some(1.0)));
    }

    #[test]
    fn two_by_two_by_hand() {
        let m = ConfusionMatrix::from_counts(names(2), vec![vec![8, 2], vec![1, 9]]).unwrap();
        let e = m.evaluate().unwrap();
        let c0 = &e.per_class[0];
        assert!((c0.precision.unwrap() - 8.0 / 9.0).abs() < 1e-15);
        assert!((c0.recall.unwrap() - 0.8).abs() < 1e-15);
        let f1 = 2.0 * (8.0 / 9.0) * 0.8 / (8.0 / 9.0 + 0.8);
        assert!((c0.f1.unwrap() - f1).abs() < 1e-15);
        assert!((f1 - 0.8421).abs() < 5e-5);
        assert!((e.overall_accuracy - 0.85).abs() < 1e-15);
    }

    #[test]
    fn zero_support_is_excluded() {
        let m = ConfusionMatrix::from_counts(names(3), vec![vec![4, 0, 0], vec![0, 0, 0], vec![0, 2, 2]]).unwrap();
        let e = m.evaluate().unwrap();
        assert_eq!(e.per_class[1].f1, None);
        assert_eq!(e.per_class[1].precision, Some(0.0));
        let f2 = 2.0 * 0.5 / 1.5;
        assert!((e.average_f1 - (1.0 + f2) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn all_zero_is_an_error() {
        assert!(ConfusionMatrix::new(names(2)).evaluate().is_err());
    }

    #[test]
    fn text_round_trip_and_parse_errors() {
        let m = ConfusionMatrix::from_counts(names(2), vec![vec![1, 2], vec![3, 4]]).unwrap();
        let p = Path::new("m.txt");
        assert_eq!(ConfusionMatrix::parse(&m.to_text(), p).unwrap(), m);
        assert!(ConfusionMatrix::parse("a b\n1 2\n3\n", p).is_err());
        assert!(ConfusionMatrix::parse("a b\n1 2\n", p).is_err());
        assert!(ConfusionMatrix::parse("a b\n1 x\n3 4\n", p).is_err());
    }

    #[test]
    fn from_labels_skips_unlabeled() {
        let m = ConfusionMatrix::from_labels(names(2), &[0, 1, UNLABELED, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(m.counts, vec![vec![1, 0], vec![1, 1]]);
    }
}
