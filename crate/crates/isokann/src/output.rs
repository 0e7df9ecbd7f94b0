//! CSV artifact writers. Floats are printed with 17 significant digits so the
//! files parse back bit-for-bit; rows follow deterministic input order, which
//! keeps artifacts byte-identical across reruns of the same seed.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::learn::LoopReport;
use crate::sampling::VarianceRow;

/// 17 significant digits: enough to reproduce any f64 exactly on parse.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn coord_headers(dim: usize) -> Vec<String> {
    if dim == 1 {
        vec!["x".to_string()]
    } else {
        (0..dim).map(|a| format!("x{a}")).collect()
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loop report, one row per outer iteration. Wall-clock time is deliberately
/// not a column: artifacts of a seeded run must be byte-identical.
pub fn write_report_csv(path: &Path, report: &LoopReport) -> Result<()> {
    let mut text = String::from(
        "iter,shift_a,shift_b,fit_a,fit_b,fit_residual_rms,loss,validation_change,mean_ess,points_used,importance\n",
    );
    for r in &report.records {
        writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.iter,
            fmt_f64(r.shift_a),
            fmt_f64(r.shift_b),
            fmt_f64(r.fit_a),
            fmt_f64(r.fit_b),
            fmt_f64(r.fit_residual_rms),
            fmt_f64(r.loss),
            fmt_f64(r.validation_change),
            fmt_f64(r.mean_ess),
            r.points_used,
            r.importance,
        )
        .expect("string write");
    }
    write_file(path, &text)
}

/// A scalar field sampled on a point set: coordinate columns then one value
/// column. Used for the learned chi and for checkpoint exports.
pub fn write_grid_csv(
    path: &Path,
    value_name: &str,
    points: &[Vec<f64>],
    values: &[f64],
) -> Result<()> {
    assert_eq!(points.len(), values.len(), "one value per point");
    let dim = points.first().map_or(1, Vec::len);
    let mut text = coord_headers(dim).join(",");
    text.push(',');
    text.push_str(value_name);
    text.push('\n');
    for (x, v) in points.iter().zip(values) {
        for c in x {
            text.push_str(&fmt_f64(*c));
            text.push(',');
        }
        text.push_str(&fmt_f64(*v));
        text.push('\n');
    }
    write_file(path, &text)
}

/// Grid-oracle reference: nodes, chi_ref, and the shift-scale constants of the
/// converged power iteration (repeated per row so the file stands alone).
pub fn write_oracle_csv(
    path: &Path,
    nodes: &[Vec<f64>],
    chi_ref: &[f64],
    a: f64,
    b: f64,
) -> Result<()> {
    assert_eq!(nodes.len(), chi_ref.len(), "one chi_ref per node");
    let dim = nodes.first().map_or(1, Vec::len);
    let mut text = coord_headers(dim).join(",");
    text.push_str(",chi_ref,a,b\n");
    for (x, v) in nodes.iter().zip(chi_ref) {
        for c in x {
            text.push_str(&fmt_f64(*c));
            text.push(',');
        }
        writeln!(text, "{},{},{}", fmt_f64(*v), fmt_f64(a), fmt_f64(b)).expect("string write");
    }
    write_file(path, &text)
}

/// Plain-vs-importance variance comparison, one row per evaluation point.
pub fn write_variance_csv(path: &Path, rows: &[VarianceRow]) -> Result<()> {
    let dim = rows.first().map_or(1, |r| r.x.len());
    let mut text = coord_headers(dim).join(",");
    text.push_str(",plain_mean,plain_var,is_mean,is_var,ratio,ess\n");
    for r in rows {
        for c in &r.x {
            text.push_str(&fmt_f64(*c));
            text.push(',');
        }
        writeln!(
            text,
            "{},{},{},{},{},{}",
            fmt_f64(r.plain_mean),
            fmt_f64(r.plain_var),
            fmt_f64(r.is_mean),
            fmt_f64(r.is_var),
            fmt_f64(r.ratio),
            fmt_f64(r.ess),
        )
        .expect("string write");
    }
    write_file(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::IterationRecord;
    use crate::rng::{domain, SplitRng};

    #[test]
    fn formatted_floats_parse_back_exactly() {
        let mut rng = SplitRng::from_key(7, domain::SIMULATION, 0, 0);
        for k in 0..2000 {
            let v = match k % 4 {
                0 => rng.standard_normal(),
                1 => rng.standard_normal() * 1e18,
                2 => rng.standard_normal() * 1e-18,
                _ => rng.uniform(),
            };
            let parsed: f64 = fmt_f64(v).parse().unwrap();
            assert_eq!(parsed.to_bits(), v.to_bits(), "value {v}");
        }
        for v in [0.0, -0.0, f64::MIN_POSITIVE, f64::MAX, 1.0 / 3.0] {
            let parsed: f64 = fmt_f64(v).parse().unwrap();
            assert_eq!(parsed.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn report_csv_has_no_wall_time_column() {
        let report = LoopReport {
            records: vec![IterationRecord {
                iter: 0,
                shift_a: 0.5,
                shift_b: 0.25,
                fit_a: f64::NAN,
                fit_b: f64::NAN,
                fit_residual_rms: f64::NAN,
                loss: 1e-3,
                validation_change: 0.1,
                mean_ess: 32.0,
                points_used: 16,
                importance: false,
                wall_seconds: 12.34,
            }],
            converged: false,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        write_report_csv(&path, &report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("wall"), "{text}");
        assert!(!text.contains("12.34"));
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iter,shift_a,shift_b,fit_a,fit_b,fit_residual_rms,loss,validation_change,mean_ess,points_used,importance"
        );
        let row = lines.next().unwrap();
        assert!(row.starts_with("0,"));
        assert!(row.ends_with(",16,false"));
        assert!(row.contains("NaN"));
    }

    #[test]
    fn grid_csv_headers_follow_dimension() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("chi1.csv");
        write_grid_csv(&p1, "chi", &[vec![-1.0], vec![1.0]], &[0.0, 1.0]).unwrap();
        let t1 = std::fs::read_to_string(&p1).unwrap();
        assert!(t1.starts_with("x,chi\n"), "{t1}");
        assert_eq!(t1.lines().count(), 3);

        let p2 = dir.path().join("chi2.csv");
        write_grid_csv(&p2, "chi", &[vec![0.0, 1.0]], &[0.5]).unwrap();
        let t2 = std::fs::read_to_string(&p2).unwrap();
        assert!(t2.starts_with("x0,x1,chi\n"), "{t2}");
    }

    #[test]
    fn variance_csv_column_order() {
        let rows = vec![VarianceRow {
            x: vec![0.25],
            plain_mean: 0.5,
            plain_var: 2.0,
            is_mean: 0.5,
            is_var: 0.25,
            ratio: 8.0,
            ess: 900.0,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("compare.csv");
        write_variance_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "x,plain_mean,plain_var,is_mean,is_var,ratio,ess");
        let cols: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(cols.len(), 7);
        assert_eq!(cols[5].parse::<f64>().unwrap(), 8.0);
    }

    #[test]
    fn oracle_csv_repeats_constants() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oracle.csv");
        write_oracle_csv(&path, &[vec![-1.0], vec![0.5]], &[0.1, 0.9], 0.7, 0.2).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "x,chi_ref,a,b");
        for row in text.lines().skip(1) {
            let cols: Vec<&str> = row.split(',').collect();
            assert_eq!(cols[2].parse::<f64>().unwrap(), 0.7);
            assert_eq!(cols[3].parse::<f64>().unwrap(), 0.2);
        }
    }
}
