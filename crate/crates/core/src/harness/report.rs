//! Aggregation and report rendering (CSV + Markdown).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunRecord;
use crate::algorithms::ALGORITHMS;
use crate::error::{Error, Result};
use crate::pseudodomain::REGISTRY;
use crate::trainer::TrainMode;

/// Mean and standard error (sample std / sqrt(n)); a single value has zero
/// error.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Accuracy fractions as percent with one decimal, e.g. `62.0 ± 1.2`.
pub fn format_cell(mean: f64, stderr: f64) -> String {
    format!("{:.1} ± {:.1}", 100.0 * mean, 100.0 * stderr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub target: String,
    pub trials: usize,
    pub mean: f64,
    pub stderr: f64,
    pub single_trial: bool,
    pub cell: String,
}

fn configured_transforms(r: &RunRecord) -> Vec<String> {
    r.config
        .get("transforms")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_else(|| r.transforms.clone())
}

/// Row label: algorithm plus transform set (pmdg) or `mdg`. A dagger marks
/// sets shortened by an exclusion.
pub fn method_label(r: &RunRecord) -> String {
    match r.mode {
        TrainMode::Mdg => format!("{} (mdg)", r.algorithm),
        TrainMode::Pmdg => format!("{} ({})", r.algorithm, configured_transforms(r).join("+")),
    }
}

fn push_unique(v: &mut Vec<String>, s: &str) {
    if !v.iter().any(|x| x == s) {
        v.push(s.to_string());
    }
}

/// Accuracies per (method, target), in first-appearance order.
fn collect(records: &[RunRecord]) -> (Vec<String>, Vec<String>, BTreeMap<(String, String), Vec<f64>>) {
    let (mut methods, mut targets) = (Vec::new(), Vec::new());
    let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        let m = method_label(r);
        push_unique(&mut methods, &m);
        for (t, &a) in &r.accuracies {
            push_unique(&mut targets, t);
            cells.entry((m.clone(), t.clone())).or_default().push(a);
        }
    }
    (methods, targets, cells)
}

/// One row per (method, target) cell.
pub fn aggregate(records: &[RunRecord]) -> Result<Vec<AggregateRow>> {
    if records.is_empty() {
        return Err(Error::Data("no records to aggregate".into()));
    }
    let (methods, targets, cells) = collect(records);
    let mut rows = Vec::new();
    for m in &methods {
        for t in &targets {
            if let Some(xs) = cells.get(&(m.clone(), t.clone())) {
                let (mean, stderr) = mean_stderr(xs);
                rows.push(AggregateRow {
                    method: m.clone(),
                    target: t.clone(),
                    trials: xs.len(),
                    mean,
                    stderr,
                    single_trial: xs.len() == 1,
                    cell: format_cell(mean, stderr),
                });
            }
        }
    }
    Ok(rows)
}

/// A row of a results table; cells are `(mean, stderr)` fractions.
pub type TableRow = (String, Vec<Option<(f64, f64)>>);

fn rank_marks(rows: &[TableRow], col: usize) -> Vec<&'static str> {
    let shown = |v: f64| (1000.0 * v).round() as i64;
    let mut distinct: Vec<i64> = rows.iter().filter_map(|(_, c)| c[col].map(|(m, _)| shown(m))).collect();
    distinct.sort_unstable_by(|a, b| b.cmp(a));
    distinct.dedup();
    rows.iter()
        .map(|(_, c)| match c[col] {
            Some((m, _)) if Some(&shown(m)) == distinct.first() => "**",
            Some((m, _)) if Some(&shown(m)) == distinct.get(1) => "_",
            _ => "",
        })
        .collect()
}

/// Markdown table; per column the best mean is bold and the second best
/// underlined, compared at display precision.
pub fn render_table_markdown(header: &[String], rows: &[TableRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| Method | {} |", header.join(" | "));
    let _ = writeln!(out, "|---|{}", "---:|".repeat(header.len()));
    let marks: Vec<Vec<&str>> = (0..header.len()).map(|c| rank_marks(rows, c)).collect();
    for (i, (label, cells)) in rows.iter().enumerate() {
        let shown: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(c, cell)| match cell {
                Some((m, s)) => {
                    let mark = marks[c][i];
                    format!("{mark}{}{mark}", format_cell(*m, *s))
                }
                None => "-".into(),
            })
            .collect();
        let _ = writeln!(out, "| {label} | {} |", shown.join(" | "));
    }
    out
}

fn table_rows(records: &[RunRecord]) -> (Vec<String>, Vec<TableRow>) {
    let (methods, targets, cells) = collect(records);
    let mut rows = Vec::new();
    for m in &methods {
        let mut row: Vec<Option<(f64, f64)>> = targets
            .iter()
            .map(|t| cells.get(&(m.clone(), t.clone())).map(|xs| mean_stderr(xs)))
            .collect();
        // per-trial average over the targets, then statistics over trials
        let mut by_trial: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in records.iter().filter(|r| &method_label(r) == m) {
            by_trial.entry(r.trial).or_default().extend(r.accuracies.values());
        }
        let complete: Vec<f64> = by_trial
            .values()
            .filter(|v| v.len() == targets.len())
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .collect();
        row.push((!complete.is_empty()).then(|| mean_stderr(&complete)));
        rows.push((m.clone(), row));
    }
    let mut header = targets;
    header.push("Avg".into());
    (header, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainMatrix {
    /// Transform sets in registry order.
    pub rows: Vec<String>,
    /// Algorithms in registry order.
    pub cols: Vec<String>,
    /// Gain in accuracy points; `None` where the grid has no records.
    pub cells: Vec<Vec<Option<f64>>>,
}

fn per_target_means(records: &[&RunRecord]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        for (t, &a) in &r.accuracies {
            acc.entry(t.clone()).or_default().push(a);
        }
    }
    acc.into_iter().map(|(t, xs)| (t, mean_stderr(&xs).0)).collect()
}

/// Mean accuracy gain of `method` over `baseline` in points, over the
/// method's targets.
pub fn gain(method: &[&RunRecord], baseline: &[&RunRecord]) -> Result<f64> {
    let m = per_target_means(method);
    let b = per_target_means(baseline);
    if m.is_empty() {
        return Err(Error::Data("no method records".into()));
    }
    let mut diff = 0.0;
    for (t, v) in &m {
        let base = b
            .get(t)
            .ok_or_else(|| Error::Data(format!("missing baseline for target `{t}`")))?;
        diff += v - base;
    }
    Ok(100.0 * diff / m.len() as f64)
}

fn set_order(set: &[String]) -> Vec<usize> {
    set.iter()
        .map(|t| REGISTRY.iter().position(|r| r == t).unwrap_or(usize::MAX))
        .collect()
}

/// Transform label for gain rows: the set minus `org`, or `org` alone.
fn gain_row_label(set: &[String]) -> String {
    let rest: Vec<&str> = set.iter().map(String::as_str).filter(|t| *t != "org").collect();
    if rest.is_empty() {
        "org".into()
    } else {
        rest.join("+")
    }
}

/// Gains of pmdg records over the baseline (ERM on `[org]`) per transform
/// set and algorithm.
pub fn gain_matrix(records: &[RunRecord], baseline: &[RunRecord]) -> Result<GainMatrix> {
    if baseline.is_empty() {
        return Err(Error::Data("missing baseline records".into()));
    }
    if let Some(r) = baseline.iter().find(|r| r.algorithm != "erm" || r.transforms != ["org"]) {
        return Err(Error::Data(format!(
            "baseline must be erm on [org], found {}",
            method_label(r)
        )));
    }
    let base: Vec<&RunRecord> = baseline.iter().collect();
    let mut sets: Vec<Vec<String>> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.mode == TrainMode::Pmdg) {
        let set = configured_transforms(r);
        let label = gain_row_label(&set);
        if !sets.iter().any(|s| gain_row_label(s) == label) {
            sets.push(set);
        }
        groups.entry((label, r.algorithm.clone())).or_default().push(r);
    }
    if groups.is_empty() {
        return Err(Error::Data("no pmdg records for the gain matrix".into()));
    }
    sets.sort_by_key(|s| set_order(s));
    let rows: Vec<String> = sets.iter().map(|s| gain_row_label(s)).collect();
    let cols: Vec<String> = ALGORITHMS
        .iter()
        .filter(|a| groups.keys().any(|(_, g)| g == *a))
        .map(|a| a.to_string())
        .collect();
    let mut cells = Vec::new();
    for row in &rows {
        let mut line = Vec::new();
        for col in &cols {
            line.push(match groups.get(&(row.clone(), col.clone())) {
                Some(g) => Some(gain(g, &base)?),
                None => None,
            });
        }
        cells.push(line);
    }
    Ok(GainMatrix { rows, cols, cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pearson: f64,
    pub spearman: f64,
    /// `(algorithm, mdg accuracy, pmdg accuracy)`.
    pub points: Vec<(String, f64, f64)>,
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Data("pearson needs two equal-length series of length >= 2".into()));
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numerical {
            op: "pearson",
            detail: "a series is constant".into(),
        });
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    pearson(&ranks(xs), &ranks(ys))
}

pub fn correlation_report(mdg: &BTreeMap<String, f64>, pmdg: &BTreeMap<String, f64>) -> Result<CorrelationReport> {
    if mdg.keys().ne(pmdg.keys()) {
        let a: Vec<&String> = mdg.keys().collect();
        let b: Vec<&String> = pmdg.keys().collect();
        return Err(Error::Data(format!("algorithm keys differ: mdg {a:?} vs pmdg {b:?}")));
    }
    if mdg.len() < 3 {
        return Err(Error::Data(format!("need at least 3 algorithms, got {}", mdg.len())));
    }
    let points: Vec<(String, f64, f64)> = mdg.iter().map(|(k, &x)| (k.clone(), x, pmdg[k])).collect();
    let xs: Vec<f64> = points.iter().map(|p| p.1).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.2).collect();
    Ok(CorrelationReport {
        pearson: pearson(&xs, &ys)?,
        spearman: spearman(&xs, &ys)?,
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Table,
    Gains,
    EqualData,
    Correlation,
}

impl ReportKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "table" => ReportKind::Table,
            "gains" => ReportKind::Gains,
            "equal_data" | "equal-data" => ReportKind::EqualData,
            "correlation" => ReportKind::Correlation,
            other => {
                return Err(Error::Unknown {
                    kind: "report",
                    name: other.into(),
                    registered: "table, gains, equal_data, correlation".into(),
                })
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ReportKind::Table => "table",
            ReportKind::Gains => "gains",
            ReportKind::EqualData => "equal_data",
            ReportKind::Correlation => "correlation",
        }
    }
}

fn mode_name(m: TrainMode) -> &'static str {
    match m {
        TrainMode::Pmdg => "pmdg",
        TrainMode::Mdg => "mdg",
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn render_table(records: &[RunRecord]) -> (String, String) {
    let (header, rows) = table_rows(records);
    let mut csv = String::from("method");
    for h in &header {
        let _ = write!(csv, ",{0}_mean,{0}_stderr", csv_field(h));
    }
    csv.push('\n');
    for (label, cells) in &rows {
        csv.push_str(&csv_field(label));
        for c in cells {
            match c {
                Some((m, s)) => {
                    let _ = write!(csv, ",{:.4},{:.4}", 100.0 * m, 100.0 * s);
                }
                None => csv.push_str(",,"),
            }
        }
        csv.push('\n');
    }
    (csv, render_table_markdown(&header, &rows))
}

fn render_gains(records: &[RunRecord]) -> Result<(String, String)> {
    let baseline: Vec<RunRecord> = records
        .iter()
        .filter(|r| r.mode == TrainMode::Pmdg && r.algorithm == "erm" && r.transforms == ["org"])
        .cloned()
        .collect();
    let g = gain_matrix(records, &baseline)?;
    let mut csv = format!("transform,{}\n", g.cols.join(","));
    let mut md = format!("| transform | {} |\n|---|{}\n", g.cols.join(" | "), "---:|".repeat(g.cols.len()));
    for (row, cells) in g.rows.iter().zip(&g.cells) {
        let num: Vec<String> = cells.iter().map(|c| c.map(|v| format!("{v:.1}")).unwrap_or_default()).collect();
        let signed: Vec<String> = cells
            .iter()
            .map(|c| c.map(|v| format!("{:+.1}", v + 0.0)).unwrap_or_else(|| "-".into()))
            .collect();
        let _ = writeln!(csv, "{},{}", csv_field(row), num.join(","));
        let _ = writeln!(md, "| {row} | {} |", signed.join(" | "));
    }
    Ok((csv, md))
}

fn render_equal_data(records: &[RunRecord]) -> Result<(String, String)> {
    let mut series: BTreeMap<(&'static str, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        let n = r.sample_counts.values().sum::<usize>();
        series.entry((mode_name(r.mode), n)).or_default().push(r.mean_accuracy());
    }
    for arm in ["pmdg", "mdg"] {
        if !series.keys().any(|(a, _)| *a == arm) {
            return Err(Error::Data(format!("equal_data report needs {arm} records")));
        }
    }
    let mut csv = String::from("arm,n,mean,stderr,trials\n");
    let mut md = String::from("| arm | n | accuracy |\n|---|---:|---:|\n");
    for ((arm, n), xs) in &series {
        let (m, s) = mean_stderr(xs);
        let _ = writeln!(csv, "{arm},{n},{:.4},{:.4},{}", 100.0 * m, 100.0 * s, xs.len());
        let _ = writeln!(md, "| {arm} | {n} | {} |", format_cell(m, s));
    }
    Ok((csv, md))
}

fn render_correlation(records: &[RunRecord]) -> Result<(String, String)> {
    let mut by: BTreeMap<(&'static str, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        by.entry((mode_name(r.mode), r.algorithm.clone())).or_default().push(r.mean_accuracy());
    }
    let pick = |mode: &str| -> BTreeMap<String, f64> {
        by.iter()
            .filter(|((m, _), _)| *m == mode)
            .map(|((_, a), xs)| (a.clone(), 100.0 * mean_stderr(xs).0))
            .collect()
    };
    let rep = correlation_report(&pick("mdg"), &pick("pmdg"))?;
    let mut csv = String::from("algorithm,mdg,pmdg\n");
    let mut md = String::from("| algorithm | mdg | pmdg |\n|---|---:|---:|\n");
    for (a, x, y) in &rep.points {
        let _ = writeln!(csv, "{a},{x:.4},{y:.4}");
        let _ = writeln!(md, "| {a} | {x:.1} | {y:.1} |");
    }
    let _ = write!(md, "\nPearson r = {:.4}, Spearman rho = {:.4}\n", rep.pearson, rep.spearman);
    Ok((csv, md))
}

/// Writes `<kind>.csv` and `<kind>.md` into `out_dir`.
pub fn render_report(kind: ReportKind, records: &[RunRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::Data(format!("no records for the {} report", kind.name())));
    }
    let (csv, md) = match kind {
        ReportKind::Table => render_table(records),
        ReportKind::Gains => render_gains(records)?,
        ReportKind::EqualData => render_equal_data(records)?,
        ReportKind::Correlation => render_correlation(records)?,
    };
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join(format!("{}.csv", kind.name()));
    let md_path = out_dir.join(format!("{}.md", kind.name()));
    std::fs::write(&csv_path, csv)?;
    std::fs::write(&md_path, md)?;
    Ok(vec![csv_path, md_path])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::records::tests::record;
    use proptest::prelude::*;

    #[test]
    fn worked_cell() {
        let (m, s) = mean_stderr(&[0.60, 0.62, 0.64]);
        assert!((s - 0.02 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(format_cell(m, s), "62.0 ± 1.2");
        assert_eq!(format_cell(0.606, 0.013), "60.6 ± 1.3");
    }

    #[test]
    fn single_trial_is_flagged() {
        let rows = aggregate(&[record("erm", &["org"], 0, &[("t", 0.5)])]).unwrap();
        assert!(rows[0].single_trial);
        assert_eq!(rows[0].cell, "50.0 ± 0.0");
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn bold_and_underline() {
        let rows: Vec<TableRow> = vec![
            ("a".into(), vec![Some((0.506, 0.01))]),
            ("b".into(), vec![Some((0.559, 0.01))]),
            ("c".into(), vec![Some((0.553, 0.01))]),
        ];
        let md = render_table_markdown(&["t".into()], &rows);
        assert_eq!(
            md,
            "| Method | t |\n|---|---:|\n| a | 50.6 ± 1.0 |\n| b | **55.9 ± 1.0** |\n| c | _55.3 ± 1.0_ |\n"
        );
    }

    #[test]
    fn gains_against_baseline() {
        let base: Vec<RunRecord> = [0.60, 0.61, 0.61].iter().enumerate().map(|(i, &a)| record("erm", &["org"], i, &[("t", a)])).collect();
        let mut recs = base.clone();
        for (i, a) in [0.64, 0.65, 0.65].into_iter().enumerate() {
            recs.push(record("coral", &["org", "edge"], i, &[("t", a)]));
            recs.push(record("erm", &["org", "mixup"], i, &[("t", a)]));
        }
        let g = gain_matrix(&recs, &base).unwrap();
        assert_eq!(g.rows, vec!["org", "mixup", "edge"]);
        assert_eq!(g.cols, vec!["erm", "coral"]);
        assert_eq!(g.cells[0][0], Some(0.0));
        assert!((g.cells[1][0].unwrap() - 4.0).abs() < 1e-9);
        assert!((g.cells[2][1].unwrap() - 4.0).abs() < 1e-9);
        assert_eq!(g.cells[2][0], None);
        assert!(gain_matrix(&recs, &[]).is_err());
        let other = vec![record("erm", &["org"], 0, &[("u", 0.5)])];
        assert!(gain_matrix(&recs, &other).is_err());
    }

    #[test]
    fn correlation_examples() {
        let m = |v: &[f64]| -> BTreeMap<String, f64> { v.iter().enumerate().map(|(i, &x)| (format!("a{i}"), x)).collect() };
        let r = correlation_report(&m(&[1.0, 2.0, 3.0, 5.0]), &m(&[1.0, 2.0, 3.0, 5.0])).unwrap();
        assert!((r.pearson - 1.0).abs() < 1e-12 && (r.spearman - 1.0).abs() < 1e-12);
        let r = correlation_report(&m(&[1.0, 2.0, 3.0]), &m(&[9.0, 4.0, 1.0])).unwrap();
        assert!((r.spearman + 1.0).abs() < 1e-12);
        // closed form on the four-point fixture
        let xs = [60.0, 62.0, 61.0, 64.0];
        let ys = [55.0, 58.0, 56.0, 60.0];
        assert!((pearson(&xs, &ys).unwrap() - 0.990_267_5).abs() < 1e-6);
        let mut bad = m(&[1.0, 2.0, 3.0]);
        bad.insert("zz".into(), 1.0);
        assert!(correlation_report(&bad, &m(&[1.0, 2.0, 3.0, 4.0])).is_err());
        assert!(correlation_report(&m(&[1.0, 2.0]), &m(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn ties_share_rank() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn renders_all_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let mut recs = Vec::new();
        for (i, alg) in ["erm", "sd", "coral"].iter().enumerate() {
            for mode in [TrainMode::Pmdg, TrainMode::Mdg] {
                let mut r = record(alg, &["org"], 0, &[("t", 0.5 + 0.05 * i as f64 + if mode == TrainMode::Mdg { 0.01 } else { 0.0 })]);
                r.mode = mode;
                recs.push(r);
            }
        }
        for kind in [ReportKind::Table, ReportKind::Gains, ReportKind::EqualData, ReportKind::Correlation] {
            let files = render_report(kind, &recs, dir.path()).unwrap();
            assert_eq!(files.len(), 2);
        }
        let gains = std::fs::read_to_string(dir.path().join("gains.csv")).unwrap();
        assert!(gains.starts_with("transform,erm,coral,sd\n"));
        let eq = std::fs::read_to_string(dir.path().join("equal_data.csv")).unwrap();
        assert!(eq.starts_with("arm,n,mean,stderr,trials\nmdg,100,"));
        assert!(render_report(ReportKind::Table, &[], dir.path()).is_err());
    }

    proptest! {
        #[test]
        fn aggregation_matches_recomputation(xs in proptest::collection::vec(0.0f64..1.0, 1..8)) {
            let recs: Vec<RunRecord> = xs.iter().enumerate().map(|(i, &a)| record("erm", &["org"], i, &[("t", a)])).collect();
            let row = &aggregate(&recs).unwrap()[0];
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let se = if xs.len() > 1 { (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) / n).sqrt() } else { 0.0 };
            prop_assert!((row.mean - mean).abs() < 1e-12);
            prop_assert!((row.stderr - se).abs() < 1e-12);
        }

        #[test]
        fn gain_is_antisymmetric(a in proptest::collection::vec(0.0f64..1.0, 1..5), b in proptest::collection::vec(0.0f64..1.0, 1..5)) {
            let ra: Vec<RunRecord> = a.iter().enumerate().map(|(i, &x)| record("erm", &["org"], i, &[("t", x)])).collect();
            let rb: Vec<RunRecord> = b.iter().enumerate().map(|(i, &x)| record("sd", &["org"], i, &[("t", x)])).collect();
            let ab = gain(&ra.iter().collect::<Vec<_>>(), &rb.iter().collect::<Vec<_>>()).unwrap();
            let ba = gain(&rb.iter().collect::<Vec<_>>(), &ra.iter().collect::<Vec<_>>()).unwrap();
            prop_assert!((ab + ba).abs() < 1e-9);
        }

        #[test]
        fn coefficients_bounded(xs in proptest::collection::vec(-10.0f64..10.0, 3..10), seed in 0u64..1000) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * ((seed + i as u64) % 7) as f64 - i as f64).collect();
            if let (Ok(p), Ok(s)) = (pearson(&xs, &ys), spearman(&xs, &ys)) {
                prop_assert!((-1.0..=1.0).contains(&p) && (-1.0..=1.0).contains(&s));
            }
        }
    }
}
