//! CSV and summary emission. Numbers use Rust's shortest round-trip format,
//! so re-reading a file reproduces the logged values exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::payload_only::EtaReport;
use super::runner::CaseResult;
use super::{MetricsLog, MetricsRow, Summary};
use crate::control::InterfaceSample;
use crate::error::{Error, Result};

const LEADING: [&str; 9] = ["t", "e_p", "e_v", "e_R", "e_omega", "Psi", "dW", "sigma_L", "sigma_A"];

/// Column names for agents with the given contact counts.
pub fn metrics_header(contacts_per_agent: &[usize]) -> Vec<String> {
    let mut h: Vec<String> = LEADING.iter().map(|s| s.to_string()).collect();
    for (j, &n) in contacts_per_agent.iter().enumerate() {
        for b in 0..n {
            h.push(format!("lam_{}_{}", j + 1, b + 1));
        }
    }
    h.push("eta".into());
    h.push("phi".into());
    h
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

fn write_table(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let err = csv_error(path);
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(&err)?;
    w.write_record(header).map_err(&err)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn row_values(r: &MetricsRow) -> Vec<f64> {
    let mut v = vec![r.t, r.e_p, r.e_v, r.e_r, r.e_omega, r.psi, r.dw, r.sigma_l, r.sigma_a];
    v.extend_from_slice(&r.lambda);
    v.push(r.eta);
    v.push(r.phi);
    v
}

pub fn write_metrics(path: &Path, log: &MetricsLog) -> Result<()> {
    if log.rows.is_empty() {
        return Err(Error::InvalidInput(format!("{}: refusing to write an empty log", path.display())));
    }
    write_table(path, &metrics_header(&log.contacts_per_agent), log.rows.iter().map(row_values))
}

/// Reads a metrics file; the contact layout is recovered from the `lam_j_b` columns.
pub fn read_metrics(path: &Path) -> Result<MetricsLog> {
    let parse = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_error(path))?;
    let header: Vec<String> = r.headers().map_err(csv_error(path))?.iter().map(String::from).collect();
    let mut contacts: Vec<usize> = Vec::new();
    for name in header.iter().filter(|h| h.starts_with("lam_")) {
        let j: usize = name
            .split('_')
            .nth(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse(format!("bad column {name}")))?;
        if contacts.len() < j {
            contacts.resize(j, 0);
        }
        contacts[j - 1] += 1;
    }
    if header != metrics_header(&contacts) {
        return Err(parse(format!("unexpected header {header:?}")));
    }
    let n_lam: usize = contacts.iter().sum();
    let mut log = MetricsLog {
        contacts_per_agent: contacts,
        rows: Vec::new(),
    };
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_error(path))?;
        let v = rec
            .iter()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse(format!("row {}: {e}", line + 1)))?;
        if v.len() != header.len() {
            return Err(parse(format!("row {} has {} fields", line + 1, v.len())));
        }
        log.rows.push(MetricsRow {
            t: v[0],
            e_p: v[1],
            e_v: v[2],
            e_r: v[3],
            e_omega: v[4],
            psi: v[5],
            dw: v[6],
            sigma_l: v[7],
            sigma_a: v[8],
            lambda: v[9..9 + n_lam].to_vec(),
            eta: v[9 + n_lam],
            phi: v[10 + n_lam],
        });
    }
    Ok(log)
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    fs::write(path, summary.to_string()).map_err(|e| Error::io(path, e))
}

const INTERFACE_LEADING: [&str; 5] = ["t", "t_k", "dW", "e_lambda", "e_lambda_k"];

/// `t, t_k, dW, e_lambda, e_lambda_k, rho_1 … rho_N` at the logging rate.
pub fn write_interface(path: &Path, result: &CaseResult) -> Result<()> {
    let n = result.interface.first().map_or(0, |s| s.rho.len());
    let mut header: Vec<String> = INTERFACE_LEADING.iter().map(|s| s.to_string()).collect();
    header.extend((1..=n).map(|j| format!("rho_{j}")));
    write_table(
        path,
        &header,
        result.interface.iter().zip(&result.e_lambda).map(|(s, e)| {
            let mut v = vec![s.t, s.t_k, s.dw, *e, s.e_lambda_k];
            v.extend_from_slice(&s.rho);
            v
        }),
    )
}

/// Reads the samples of an interface file written by [`write_interface`].
pub fn read_interface(path: &Path) -> Result<Vec<InterfaceSample>> {
    let parse = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_error(path))?;
    let header: Vec<String> = r.headers().map_err(csv_error(path))?.iter().map(String::from).collect();
    let n = header.len().saturating_sub(INTERFACE_LEADING.len());
    let mut expected: Vec<String> = INTERFACE_LEADING.iter().map(|s| s.to_string()).collect();
    expected.extend((1..=n).map(|j| format!("rho_{j}")));
    if header != expected {
        return Err(parse(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_error(path))?;
        let v = rec
            .iter()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse(format!("row {}: {e}", line + 1)))?;
        if v.len() != header.len() {
            return Err(parse(format!("row {} has {} fields", line + 1, v.len())));
        }
        out.push(InterfaceSample {
            t: v[0],
            t_k: v[1],
            dw: v[2],
            e_lambda_k: v[4],
            rho: v[5..].to_vec(),
        });
    }
    Ok(out)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `metrics.csv`, `interface.csv` and `summary.txt` in `dir`.
pub fn write_case(dir: &Path, result: &CaseResult) -> Result<()> {
    ensure_dir(dir)?;
    write_metrics(&dir.join("metrics.csv"), &result.log)?;
    write_interface(&dir.join("interface.csv"), result)?;
    write_summary(&dir.join("summary.txt"), &result.summary)
}

const COMPARISON_KEYS: [&str; 14] = [
    "rms_e_p",
    "rms_e_v",
    "rms_e_R",
    "rms_e_omega",
    "rms_Psi",
    "rms_dW",
    "rms_sigma_L",
    "rms_sigma_A",
    "max_lambda",
    "max_phi",
    "interface_alpha",
    "interface_gamma",
    "interface_theta",
    "interface_coverage",
];

/// `comparison.csv` and an aligned `comparison.txt` with one row per case.
pub fn write_comparison(dir: &Path, results: &[CaseResult]) -> Result<()> {
    ensure_dir(dir)?;
    let n_agents = results.first().map_or(0, |r| r.agent_models.len());
    let mut keys: Vec<String> = COMPARISON_KEYS.iter().map(|s| s.to_string()).collect();
    keys.extend((1..=n_agents).map(|j| format!("interface_kappa_{j}")));
    let cell = |r: &CaseResult, k: &str| r.summary.get(k).unwrap_or("nan").to_string();

    let path = dir.join("comparison.csv");
    let err = csv_error(&path);
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&path)
        .map_err(&err)?;
    let mut header = vec!["case".to_string()];
    header.extend(keys.iter().cloned());
    w.write_record(&header).map_err(&err)?;
    for r in results {
        let mut row = vec![r.case.to_string()];
        row.extend(keys.iter().map(|k| cell(r, k)));
        w.write_record(&row).map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("comparison.txt");
    let mut text = String::new();
    let width = keys.iter().map(|k| k.len()).max().unwrap_or(4);
    text.push_str(&format!("{:width$}", "metric"));
    for r in results {
        text.push_str(&format!("  {:>14}", r.case.name()));
    }
    text.push('\n');
    for k in &keys {
        text.push_str(&format!("{k:width$}"));
        for r in results {
            let v = r.summary.get_f64(k).map_or("n/a".to_string(), |v| format!("{v:.6e}"));
            text.push_str(&format!("  {v:>14}"));
        }
        text.push('\n');
    }
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))
}

fn aligned(results: &[CaseResult]) -> usize {
    results.iter().map(|r| r.log.rows.len()).min().unwrap_or(0)
}

/// Per-figure data bundles: tracking errors, interface disturbance with the
/// fitted envelope, predictive uncertainty, and contact forces.
pub fn write_figures(dir: &Path, results: &[CaseResult], eta: Option<&EtaReport>) -> Result<()> {
    ensure_dir(dir)?;
    let n = aligned(results);
    let t = |i: usize| results[0].log.rows[i].t;
    let mut header = vec!["t".to_string()];
    for r in results {
        header.push(format!("e_p_{}", r.case));
    }
    for r in results {
        header.push(format!("Psi_{}", r.case));
    }
    write_table(
        &dir.join("fig1_tracking.csv"),
        &header,
        (0..n).map(|i| {
            let mut v = vec![t(i)];
            v.extend(results.iter().map(|r| r.log.rows[i].e_p));
            v.extend(results.iter().map(|r| r.log.rows[i].psi));
            v
        }),
    )?;

    let mut header = vec!["t".to_string()];
    for r in results {
        header.push(format!("dW_{}", r.case));
        header.push(format!("envelope_{}", r.case));
    }
    write_table(
        &dir.join("fig2_interface.csv"),
        &header,
        (0..n).map(|i| {
            let mut v = vec![t(i)];
            for r in results {
                v.push(r.log.rows[i].dw);
                v.push(r.interface_fit.as_ref().map_or(f64::NAN, |f| f.bound(&r.interface[i])));
            }
            v
        }),
    )?;

    let mut header = vec!["t".to_string()];
    for r in results {
        header.push(format!("sigma_L_{}", r.case));
        header.push(format!("sigma_A_{}", r.case));
    }
    write_table(
        &dir.join("fig3_uncertainty.csv"),
        &header,
        (0..n).map(|i| {
            let mut v = vec![t(i)];
            for r in results {
                v.push(r.log.rows[i].sigma_l);
                v.push(r.log.rows[i].sigma_a);
            }
            v
        }),
    )?;

    if let Some(last) = results.last() {
        let lam_cols: Vec<String> = metrics_header(&last.log.contacts_per_agent)
            .into_iter()
            .filter(|h| h.starts_with("lam_"))
            .collect();
        let mut header = vec!["t".to_string()];
        header.extend(lam_cols.iter().map(|c| format!("{c}_{}", last.case)));
        header.push(format!("eta_{}", last.case));
        write_table(
            &dir.join("fig4_contact_forces.csv"),
            &header,
            last.log.rows.iter().map(|r| {
                let mut v = vec![r.t];
                v.extend_from_slice(&r.lambda);
                v.push(r.eta);
                v
            }),
        )?;
    }
    if let Some(e) = eta {
        let lam_cols: Vec<String> = metrics_header(&e.with.contacts_per_agent)
            .into_iter()
            .filter(|h| h.starts_with("lam_"))
            .collect();
        let mut header = vec!["t".to_string()];
        header.extend(lam_cols.iter().map(|c| format!("{c}_zero")));
        header.extend(lam_cols.iter().map(|c| format!("{c}_active")));
        header.push("eta".into());
        header.push("e_p_zero".into());
        header.push("e_p_active".into());
        write_table(
            &dir.join("fig4_internal_forces.csv"),
            &header,
            e.without.rows.iter().zip(&e.with.rows).map(|(a, b)| {
                let mut v = vec![a.t];
                v.extend_from_slice(&a.lambda);
                v.extend_from_slice(&b.lambda);
                v.push(b.eta);
                v.push(a.e_p);
                v.push(b.e_p);
                v
            }),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log() -> MetricsLog {
        MetricsLog {
            contacts_per_agent: vec![2, 2],
            rows: (0..5)
                .map(|k| MetricsRow {
                    t: 0.01 * k as f64,
                    e_p: 1.0 / 3.0 + k as f64,
                    e_v: 1e-300,
                    e_r: std::f64::consts::PI,
                    e_omega: 0.0,
                    psi: 2.5e-17,
                    dw: 123456.789,
                    sigma_l: 1.0,
                    sigma_a: 0.1 + 0.2,
                    lambda: vec![1.1, 2.2, 3.3, 4.4 + k as f64],
                    eta: 0.0,
                    phi: 1e-15,
                })
                .collect(),
        }
    }

    #[test]
    fn header_has_fixed_schema() {
        let h = metrics_header(&[2, 2]);
        assert_eq!(h.len(), 15);
        assert_eq!(
            h,
            [
                "t", "e_p", "e_v", "e_R", "e_omega", "Psi", "dW", "sigma_L", "sigma_A", "lam_1_1", "lam_1_2", "lam_2_1",
                "lam_2_2", "eta", "phi"
            ]
        );
    }

    #[test]
    fn metrics_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let l = log();
        write_metrics(&path, &l).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), l);
        let text = fs::read_to_string(&path).unwrap();
        assert!(!text.contains('\r'));
        assert!(text.starts_with("t,e_p,e_v,e_R,"));
    }

    #[test]
    fn empty_log_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let empty = MetricsLog::default();
        assert!(write_metrics(&dir.path().join("m.csv"), &empty).is_err());
    }

    #[test]
    fn unwritable_path_is_named() {
        let err = write_metrics(Path::new("/nonexistent/dir/m.csv"), &log()).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/m.csv"), "{err}");
    }

    #[test]
    fn interface_reader_checks_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.csv");
        fs::write(&path, "t,t_k,dW,e_lambda,e_lambda_k,rho_1,rho_2\n0.5,0,0.25,0.1,0.2,0.01,0.02\n").unwrap();
        let s = read_interface(&path).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].e_lambda_k, 0.2);
        assert_eq!(s[0].rho, vec![0.01, 0.02]);
        fs::write(&path, "t,dW\n0,1\n").unwrap();
        assert!(read_interface(&path).is_err());
    }
}
