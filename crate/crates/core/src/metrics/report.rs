use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    binary_metrics, bootstrap_cis, macro_average, one_vs_rest, pct, rater_auc, roc_auc, round_to, ConfusionMatrix3,
    MetricRow, MetricsError,
};
use crate::exec::Exec;
use crate::fusion::{ClassScores, Diagnosis};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluateOptions {
    /// Bootstrap resamples for the 95% intervals; 0 skips them.
    pub n_resamples: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        Self { n_resamples: 1000, seed: 0, exec: Exec::Parallel }
    }
}

/// 95% intervals of the four interval-bearing columns.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RowCi {
    pub sensitivity: Option<(f64, f64)>,
    pub specificity: Option<(f64, f64)>,
    pub accuracy: Option<(f64, f64)>,
    pub auc: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub metrics: MetricRow,
    pub ci: RowCi,
}

/// Per-class one-vs-rest rows followed by their macro average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub title: String,
    pub cases: usize,
    pub confusion: ConfusionMatrix3,
    pub rows: Vec<ReportRow>,
}

type Item = (Diagnosis, Diagnosis, Option<ClassScores>);

/// Per-class rows and the macro row, AUC from scores when every item has
/// them and from the single operating point otherwise. Each row holds
/// `[sensitivity, specificity, accuracy, auc]` in that order.
fn rows_for(items: &[Item]) -> Result<(ConfusionMatrix3, Vec<MetricRow>), MetricsError> {
    let cm = ConfusionMatrix3::from_pairs(items.iter().map(|i| (i.0, i.1)));
    let scored = items.iter().all(|i| i.2.is_some());
    let mut rows = Vec::with_capacity(4);
    for cls in Diagnosis::ALL {
        let counts = one_vs_rest(&cm, cls);
        let mut row = binary_metrics(&counts)?;
        row.auc = if scored {
            let s: Vec<(f64, bool)> =
                items.iter().map(|i| (i.2.expect("scored").get(cls), i.0 == cls)).collect();
            roc_auc(&s).ok()
        } else {
            rater_auc(&counts).ok()
        };
        rows.push(row);
    }
    rows.push(macro_average(&rows)?);
    Ok((cm, rows))
}

fn ci_fields(r: &MetricRow) -> [Option<f64>; 4] {
    [r.sensitivity, r.specificity, r.accuracy, r.auc]
}

pub fn evaluate(title: &str, items: &[Item], opts: &EvaluateOptions) -> Result<MetricReport, MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::Empty("evaluation set"));
    }
    let (confusion, rows) = rows_for(items)?;
    // Only quantities defined on the full data get an interval.
    let defined: Vec<(usize, usize)> = rows
        .iter()
        .enumerate()
        .flat_map(|(r, row)| ci_fields(row).into_iter().enumerate().filter(|f| f.1.is_some()).map(move |f| (r, f.0)))
        .collect();
    let mut cis = vec![RowCi::default(); rows.len()];
    if opts.n_resamples > 0 {
        let eval = |sample: &[Item]| match rows_for(sample) {
            Ok((_, rs)) => defined.iter().map(|&(r, f)| ci_fields(&rs[r])[f]).collect(),
            Err(_) => vec![None],
        };
        let bounds = bootstrap_cis(items, eval, opts.n_resamples, opts.seed, opts.exec)?;
        for (&(r, f), b) in defined.iter().zip(bounds) {
            let v = Some((b.lower, b.upper));
            match f {
                0 => cis[r].sensitivity = v,
                1 => cis[r].specificity = v,
                2 => cis[r].accuracy = v,
                _ => cis[r].auc = v,
            }
        }
    }
    let names = ["Control", "CL", "CLP", "Average"];
    Ok(MetricReport {
        title: title.to_string(),
        cases: items.len(),
        confusion,
        rows: rows
            .into_iter()
            .zip(cis)
            .zip(names)
            .map(|((metrics, ci), name)| ReportRow { name: name.to_string(), metrics, ci })
            .collect(),
    })
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", pct(x)))
}

fn fmt_ci(v: Option<f64>, ci: Option<(f64, f64)>) -> String {
    match ci {
        Some((lo, hi)) => format!("{} ({:.2}-{:.2})", fmt_pct(v), pct(lo), pct(hi)),
        None => fmt_pct(v),
    }
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 9] = [
        "Class",
        "Sensitivity (95% CI)",
        "Specificity (95% CI)",
        "Accuracy (95% CI)",
        "FNR",
        "FPR",
        "F1",
        "Youden",
        "AUC (95% CI)",
    ];

    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    fn cells(&self) -> Vec<[String; 9]> {
        self.rows
            .iter()
            .map(|r| {
                let m = &r.metrics;
                [
                    r.name.clone(),
                    fmt_ci(m.sensitivity, r.ci.sensitivity),
                    fmt_ci(m.specificity, r.ci.specificity),
                    fmt_ci(m.accuracy, r.ci.accuracy),
                    fmt_pct(m.fnr),
                    fmt_pct(m.fpr),
                    fmt_pct(m.f1),
                    m.youden.map_or_else(|| "-".into(), |y| format!("{:.2}", round_to(y, 2))),
                    fmt_ci(m.auc, r.ci.auc),
                ]
            })
            .collect()
    }

    /// Aligned plain-text table; percentages at two decimals.
    pub fn to_text(&self) -> String {
        let cells = self.cells();
        let mut width = Self::COLUMNS.map(str::len);
        for row in &cells {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let _ = writeln!(out, "{} (n = {})", self.title, self.cases);
        let line = |out: &mut String, row: &[&str]| {
            let padded: Vec<String> = row.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(&mut out, &Self::COLUMNS);
        let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
        let _ = writeln!(out, "{}", rule.join("  "));
        for row in &cells {
            line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }

    /// Machine-readable table: one row per class, raw fractions, empty
    /// cells for undefined values.
    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "class",
            "sensitivity",
            "sensitivity_lo",
            "sensitivity_hi",
            "specificity",
            "specificity_lo",
            "specificity_hi",
            "accuracy",
            "accuracy_lo",
            "accuracy_hi",
            "fnr",
            "fpr",
            "f1",
            "youden",
            "auc",
            "auc_lo",
            "auc_hi",
        ])?;
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let lo = |v: Option<(f64, f64)>| f(v.map(|c| c.0));
        let hi = |v: Option<(f64, f64)>| f(v.map(|c| c.1));
        for r in &self.rows {
            let m = &r.metrics;
            w.write_record([
                r.name.clone(),
                f(m.sensitivity),
                lo(r.ci.sensitivity),
                hi(r.ci.sensitivity),
                f(m.specificity),
                lo(r.ci.specificity),
                hi(r.ci.specificity),
                f(m.accuracy),
                lo(r.ci.accuracy),
                hi(r.ci.accuracy),
                f(m.fnr),
                f(m.fpr),
                f(m.f1),
                f(m.youden),
                f(m.auc),
                lo(r.ci.auc),
                hi(r.ci.auc),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(pairs: &[(Diagnosis, Diagnosis, usize)]) -> Vec<Item> {
        pairs.iter().flat_map(|&(t, p, n)| std::iter::repeat_n((t, p, None), n)).collect()
    }

    #[test]
    fn perfect_predictions() {
        use Diagnosis::*;
        let it = items(&[(Control, Control, 20), (Cl, Cl, 3), (Clp, Clp, 7)]);
        let r = evaluate("perfect", &it, &EvaluateOptions { n_resamples: 200, ..Default::default() }).unwrap();
        for row in &r.rows {
            assert_eq!(row.metrics.sensitivity, Some(1.0));
            assert_eq!(row.metrics.auc, Some(1.0));
            assert_eq!(row.ci.sensitivity, Some((1.0, 1.0)));
        }
        let text = r.to_text();
        assert!(text.contains("100.00 (100.00-100.00)"));
        assert_eq!(r.to_csv().unwrap().lines().count(), 5);
    }

    #[test]
    fn clp_counts_reproduce_row() {
        use Diagnosis::*;
        // CLP one-vs-rest counts TP 67, FN 3, FP 3, TN 513.
        let it = items(&[(Clp, Clp, 67), (Clp, Control, 3), (Control, Clp, 3), (Control, Control, 513)]);
        let r = evaluate("clp", &it, &EvaluateOptions { n_resamples: 0, ..Default::default() }).unwrap();
        let m = r.row("CLP").unwrap().metrics;
        assert_eq!(
            [m.sensitivity, m.specificity, m.accuracy, m.f1].map(|v| pct(v.unwrap())),
            [95.71, 99.42, 98.98, 95.71]
        );
        // CL has no cases, so its sensitivity is undefined and is left out of
        // the average.
        assert_eq!(r.row("CL").unwrap().metrics.sensitivity, None);
        assert!(r.to_text().contains("95.71"));
    }

    #[test]
    fn order_independent() {
        use Diagnosis::*;
        let mut it = items(&[(Control, Control, 30), (Control, Cl, 2), (Cl, Cl, 4), (Clp, Clp, 9), (Clp, Cl, 1)]);
        let o = EvaluateOptions { n_resamples: 100, seed: 5, exec: Exec::Sequential };
        let a = evaluate("x", &it, &o).unwrap();
        it.reverse();
        let b = evaluate("x", &it, &o).unwrap();
        assert_eq!(a.rows.iter().map(|r| r.metrics).collect::<Vec<_>>(), b.rows.iter().map(|r| r.metrics).collect::<Vec<_>>());
    }
}
