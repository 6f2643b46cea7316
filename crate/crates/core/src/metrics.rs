//! Per-label scores, their support-weighted F1, and the confusion matrix.

use std::fmt::Write as _;

use crate::data::LabelSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold occurrences.
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_label: Vec<LabelMetrics>,
    pub weighted_f1: f64,
    /// `confusion[predicted][gold]`.
    pub confusion: Vec<Vec<usize>>,
    /// Set when some precision or recall had a zero denominator.
    pub zero_division: bool,
}

impl EvalReport {
    pub fn total(&self) -> usize {
        self.per_label.iter().map(|m| m.support).sum()
    }

    /// Fraction of sentences on the diagonal.
    pub fn accuracy(&self) -> f64 {
        let diag: usize = (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum();
        ratio(diag, self.total()).unwrap_or(0.0)
    }

    pub fn labels(&self) -> Vec<String> {
        self.per_label.iter().map(|m| m.label.clone()).collect()
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Support-weighted mean of per-label F1; labels with zero support carry
/// zero weight.
pub fn weighted_f1_from(f1: &[f64], support: &[usize]) -> f64 {
    let total: usize = support.iter().sum();
    if total == 0 {
        return 0.0;
    }
    f1.iter().zip(support).map(|(f, &s)| f * s as f64).sum::<f64>() / total as f64
}

/// Scores predicted label paths against gold paths.
pub fn evaluate(pred: &[Vec<usize>], gold: &[Vec<usize>], labels: &LabelSet) -> Result<EvalReport> {
    if pred.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} predicted paths for {} gold paths",
            pred.len(),
            gold.len()
        )));
    }
    let l = labels.len();
    let mut confusion = vec![vec![0usize; l]; l];
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Contract(format!(
                "abstract {i}: {} predictions for {} sentences",
                p.len(),
                g.len()
            )));
        }
        for (&a, &b) in p.iter().zip(g) {
            if a >= l || b >= l {
                return Err(Error::Contract(format!("label index out of range for {l} labels")));
            }
            confusion[a][b] += 1;
        }
    }
    Ok(report_from_confusion(confusion, labels.names()))
}

/// Derives every metric from a `predicted × gold` count matrix.
pub fn report_from_confusion(confusion: Vec<Vec<usize>>, names: &[String]) -> EvalReport {
    let l = names.len();
    let mut zero_division = false;
    let per_label: Vec<LabelMetrics> = (0..l)
        .map(|c| {
            let tp = confusion[c][c];
            let predicted: usize = confusion[c].iter().sum();
            let support: usize = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            zero_division |= precision.is_none() || recall.is_none();
            let (p, r) = (precision.unwrap_or(0.0), recall.unwrap_or(0.0));
            let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            LabelMetrics {
                label: names[c].clone(),
                precision: p,
                recall: r,
                f1,
                support,
            }
        })
        .collect();
    let f1: Vec<f64> = per_label.iter().map(|m| m.f1).collect();
    let support: Vec<usize> = per_label.iter().map(|m| m.support).collect();
    EvalReport {
        weighted_f1: weighted_f1_from(&f1, &support),
        per_label,
        confusion,
        zero_division,
    }
}

/// Shortest prefixes that tell the labels apart.
pub fn initials(names: &[String]) -> Vec<String> {
    names
        .iter()
        .map(|name| {
            let chars: Vec<char> = name.chars().collect();
            for k in 1..=chars.len() {
                let prefix: String = chars[..k].iter().collect();
                let clash = names
                    .iter()
                    .any(|other| other != name && other.starts_with(prefix.as_str()));
                if !clash {
                    return prefix;
                }
            }
            name.clone()
        })
        .collect()
}

/// Fixed-width text report with percentages to one decimal.
pub fn format_report(report: &EvalReport) -> String {
    let names = report.labels();
    let width = names.iter().map(String::len).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$} {:>9} {:>9} {:>9} {:>9}",
        "label", "precision", "recall", "f1", "support"
    );
    for m in &report.per_label {
        let _ = writeln!(
            out,
            "{:<width$} {:>9.1} {:>9.1} {:>9.1} {:>9}",
            m.label,
            100.0 * m.precision,
            100.0 * m.recall,
            100.0 * m.f1,
            m.support
        );
    }
    let _ = writeln!(out, "weighted_f1 {:.1}", 100.0 * report.weighted_f1);
    let _ = writeln!(out, "accuracy {:.1}", 100.0 * report.accuracy());
    if report.zero_division {
        let _ = writeln!(out, "note: zero denominators were scored as 0");
    }
    let short = initials(&names);
    let cell = report
        .confusion
        .iter()
        .flatten()
        .map(|c| c.to_string().len())
        .chain(short.iter().map(String::len))
        .max()
        .unwrap_or(1)
        .max(4);
    let _ = writeln!(out, "confusion (rows = predicted, columns = true)");
    let _ = write!(out, "{:<cell$}", "");
    for s in &short {
        let _ = write!(out, " {s:>cell$}");
    }
    out.push('\n');
    for (s, row) in short.iter().zip(&report.confusion) {
        let _ = write!(out, "{s:<cell$}");
        for c in row {
            let _ = write!(out, " {c:>cell$}");
        }
        out.push('\n');
    }
    out
}

/// Numbers recovered from a [`format_report`] table. Percentages keep their
/// printed precision.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedReport {
    /// `(label, precision, recall, f1, support)`, percentages.
    pub rows: Vec<(String, f64, f64, f64, usize)>,
    pub weighted_f1: f64,
    pub confusion: Vec<Vec<usize>>,
}

pub fn parse_report(text: &str) -> Result<ParsedReport> {
    let bad = |msg: String| Error::Format {
        path: "report".into(),
        msg,
    };
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`")));
    let count = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad count `{s}`")));
    let mut lines = text.lines();
    lines
        .next()
        .filter(|h| h.starts_with("label"))
        .ok_or_else(|| bad("missing header".into()))?;
    let mut rows = Vec::new();
    let mut weighted = None;
    for line in lines.by_ref() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["weighted_f1", v] => {
                weighted = Some(num(v)?);
            }
            ["accuracy", _] | ["note:", ..] => {}
            ["confusion", ..] => break,
            [label, p, r, f1, s] => rows.push((label.to_string(), num(p)?, num(r)?, num(f1)?, count(s)?)),
            _ => return Err(bad(format!("unexpected line `{line}`"))),
        }
    }
    let weighted_f1 = weighted.ok_or_else(|| bad("missing weighted_f1".into()))?;
    lines.next().ok_or_else(|| bad("missing confusion header".into()))?;
    let confusion = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().skip(1).map(count).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    if confusion.len() != rows.len() || confusion.iter().any(|r| r.len() != rows.len()) {
        return Err(bad("confusion matrix does not match label rows".into()));
    }
    Ok(ParsedReport {
        rows,
        weighted_f1,
        confusion,
    })
}

/// One metric per line as `key = value`, fractions at full precision.
pub fn report_kv(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "sentences = {}", report.total());
    let _ = writeln!(out, "weighted_f1 = {}", report.weighted_f1);
    let _ = writeln!(out, "accuracy = {}", report.accuracy());
    let _ = writeln!(out, "zero_division = {}", report.zero_division);
    for m in &report.per_label {
        let _ = writeln!(out, "label.{}.precision = {}", m.label, m.precision);
        let _ = writeln!(out, "label.{}.recall = {}", m.label, m.recall);
        let _ = writeln!(out, "label.{}.f1 = {}", m.label, m.f1);
        let _ = writeln!(out, "label.{}.support = {}", m.label, m.support);
    }
    for (i, row) in report.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "confusion.{} = {}", report.per_label[i].label, cells.join(" "));
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn labels(names: &[&str]) -> LabelSet {
        LabelSet::new(names.iter().copied()).unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let set = labels(&["A", "B", "C"]);
        let gold = vec![vec![0, 1, 2], vec![2, 2]];
        let r = evaluate(&gold, &gold, &set).unwrap();
        assert!(r.per_label.iter().all(|m| m.f1 == 1.0));
        assert_eq!(r.weighted_f1, 1.0);
        assert_eq!(r.confusion, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 3]]);
        assert!(!r.zero_division);
        assert!(evaluate(&gold[..1], &gold, &set).is_err());
    }

    #[test]
    fn hand_counted_two_label_case() {
        // gold A A B B, pred A B B B: A p=1 r=.5, B p=2/3 r=1
        let set = labels(&["A", "B"]);
        let r = evaluate(&[vec![0, 1, 1, 1]], &[vec![0, 0, 1, 1]], &set).unwrap();
        let fa = 2.0 * 0.5 / 1.5;
        let fb = 2.0 * (2.0 / 3.0) / (5.0 / 3.0);
        assert!((r.per_label[0].f1 - fa).abs() < 1e-12);
        assert!((r.per_label[1].f1 - fb).abs() < 1e-12);
        assert!((r.weighted_f1 - (fa + fb) / 2.0).abs() < 1e-12);
        assert_eq!(r.accuracy(), 0.75);
    }

    #[test]
    fn zero_support_is_flagged_and_excluded() {
        let set = labels(&["A", "B", "C"]);
        let r = evaluate(&[vec![0, 0]], &[vec![0, 0]], &set).unwrap();
        assert!(r.zero_division);
        assert_eq!(r.weighted_f1, 1.0);
    }

    #[test]
    fn initials_are_unique_prefixes() {
        let n: Vec<String> = ["BACKGROUND", "OBJECTIVE", "METHODS", "RESULTS", "CONCLUSIONS"]
            .map(String::from)
            .to_vec();
        assert_eq!(initials(&n), ["B", "O", "M", "R", "C"]);
        let n: Vec<String> = ["Background", "Intervention", "Outcome", "Population", "Study", "Other"]
            .map(String::from)
            .to_vec();
        assert_eq!(initials(&n), ["B", "I", "Ou", "P", "S", "Ot"]);
    }

    #[test]
    fn golden_two_label_report() {
        let set = labels(&["A", "B"]);
        let r = evaluate(&[vec![0, 1, 1, 1]], &[vec![0, 0, 1, 1]], &set).unwrap();
        let expected = "\
label  precision    recall        f1   support
A          100.0      50.0      66.7         2
B           66.7     100.0      80.0         2
weighted_f1 73.3
accuracy 75.0
confusion (rows = predicted, columns = true)
        A    B
A       1    0
B       1    2
";
        let text = format_report(&r);
        assert_eq!(text, expected);
        assert_eq!(text.matches("weighted_f1").count(), 1);
        let parsed = parse_report(&text).unwrap();
        assert_eq!(parsed.rows[0], ("A".into(), 100.0, 50.0, 66.7, 2));
        assert_eq!(parsed.weighted_f1, 73.3);
        assert_eq!(parsed.confusion, r.confusion);
    }

    #[test]
    fn kv_block_has_one_metric_per_line() {
        let set = labels(&["A", "B"]);
        let r = evaluate(&[vec![0, 1]], &[vec![0, 1]], &set).unwrap();
        let kv = report_kv(&r);
        assert!(kv.lines().all(|l| l.split(" = ").count() == 2));
        assert!(kv.contains("weighted_f1 = 1\n"));
    }

    fn paths() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<Vec<usize>>)> {
        prop::collection::vec(
            prop::collection::vec((0usize..4, 0usize..4), 1..6),
            1..6,
        )
        .prop_map(|abs| {
            let pred = abs.iter().map(|a| a.iter().map(|p| p.0).collect()).collect();
            let gold = abs.iter().map(|a| a.iter().map(|p| p.1).collect()).collect();
            (pred, gold)
        })
    }

    proptest! {
        #[test]
        fn invariants_hold((pred, gold) in paths()) {
            let set = labels(&["A", "B", "C", "D"]);
            let r = evaluate(&pred, &gold, &set).unwrap();
            let total: usize = gold.iter().map(Vec::len).sum();
            prop_assert_eq!(r.total(), total);
            prop_assert_eq!(r.confusion.iter().flatten().sum::<usize>(), total);
            let correct = pred.iter().flatten().zip(gold.iter().flatten()).filter(|(a, b)| a == b).count();
            prop_assert!((r.accuracy() - correct as f64 / total as f64).abs() < 1e-12);

            // Relabeling by a permutation leaves the weighted F1 unchanged.
            let perm = [2usize, 0, 3, 1];
            let map = |p: &Vec<Vec<usize>>| -> Vec<Vec<usize>> {
                p.iter().map(|a| a.iter().map(|&y| perm[y]).collect()).collect()
            };
            let r2 = evaluate(&map(&pred), &map(&gold), &set).unwrap();
            prop_assert!((r.weighted_f1 - r2.weighted_f1).abs() < 1e-12);
        }
    }
}
