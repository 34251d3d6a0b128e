//! Aligned-text and CSV renderings of aggregated metrics.

use std::path::Path;

use cdcl_core::eval::MetricsReport;

use crate::error::CliError;
use crate::pipeline::write_atomic;

/// Table columns: metric key and header.
pub const COLUMNS: &[(&str, &str)] = &[
    ("knn_acc", "kNN"),
    ("znorm_knn_acc", "kNN(Z)"),
    ("linear_acc", "linear"),
    ("train_kbet", "kBET train"),
    ("test_kbet", "kBET test"),
    ("test_znorm_kbet", "kBET test(Z)"),
    ("test_grit", "grit"),
    ("test_znorm_grit", "grit(Z)"),
    ("nsc_moa_acc", "NSC-MoA"),
    ("unseen_znorm_knn_acc", "unseen kNN(Z)"),
];

fn present(reports: &[MetricsReport]) -> Vec<&(&'static str, &'static str)> {
    COLUMNS
        .iter()
        .filter(|(k, _)| reports.iter().any(|r| r.metrics.contains_key(*k)))
        .collect()
}

/// Fixed-width table with `mean ± std` cells and an `n` column.
pub fn render_text(reports: &[MetricsReport]) -> String {
    let cols = present(reports);
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("method".to_string())
        .chain(cols.iter().map(|(_, h)| h.to_string()))
        .chain(std::iter::once("n".to_string()))
        .collect()];
    for r in reports {
        let mut row = vec![r.method.clone()];
        for (k, _) in &cols {
            row.push(match r.metrics.get(*k) {
                Some(s) => format!("{:.3} ± {:.3}", s.mean, s.std),
                None => "-".into(),
            });
        }
        let n = r.metrics.values().map(|s| s.n_folds).max().unwrap_or(0);
        row.push(n.to_string());
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let pad = widths[j] - c.chars().count();
                if j == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

/// One row per method with `<key>_mean`, `<key>_std` and `<key>_n` columns.
pub fn render_csv(reports: &[MetricsReport]) -> Result<String, CliError> {
    let cols = present(reports);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method".to_string()];
    for (k, _) in &cols {
        header.extend([format!("{k}_mean"), format!("{k}_std"), format!("{k}_n")]);
    }
    let csv_err = |e: csv::Error| CliError::from(cdcl_core::Error::from(e));
    w.write_record(&header).map_err(csv_err)?;
    for r in reports {
        let mut rec = vec![r.method.clone()];
        for (k, _) in &cols {
            match r.metrics.get(*k) {
                Some(s) => rec.extend([format!("{:?}", s.mean), format!("{:?}", s.std), s.n_folds.to_string()]),
                None => rec.extend(["".into(), "".into(), "0".into()]),
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| csv_err(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_tables(dir: &Path, stem: &str, reports: &[MetricsReport]) -> Result<(), CliError> {
    write_atomic(&dir.join(format!("{stem}.txt")), render_text(reports).as_bytes())?;
    write_atomic(&dir.join(format!("{stem}.csv")), render_csv(reports)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;

    fn report(method: &str, knn: &[f64]) -> MetricsReport {
        let folds: Vec<BTreeMap<String, f64>> = knn.iter().map(|&v| [("knn_acc".to_string(), v)].into()).collect();
        MetricsReport::aggregate(method, "h", &folds)
    }

    #[test]
    fn text_columns_align() {
        let text = render_text(&[report("CDCL", &[0.5, 0.7]), report("SSL-DINO", &[0.25])]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("method"));
        assert!(lines[2].contains("0.600 ± 0.141"));
        assert!(lines[3].contains("0.250 ± 0.000"));
        let width = |l: &str| l.chars().count();
        assert_eq!(width(lines[2]), width(lines[3]));
    }

    #[test]
    fn csv_has_mean_std_and_count() {
        let csv = render_csv(&[report("CDCL", &[0.5, 0.7])]).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "method,knn_acc_mean,knn_acc_std,knn_acc_n");
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "CDCL");
        assert!((row[1].parse::<f64>().unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(row[3], "2");
    }
}
