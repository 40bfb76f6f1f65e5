//! CSV export and import of datasets: feature columns `x_0…`, then one
//! column per named label channel.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub fn write_dataset(path: &Path, dataset: &Dataset, channel_names: &[&str]) -> Result<()> {
    if channel_names.len() != dataset.out_dim() {
        return Err(Error::InvalidInput(format!(
            "{} channel names for {} channels",
            channel_names.len(),
            dataset.out_dim()
        )));
    }
    let csv_err = |e: csv::Error| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = (0..dataset.in_dim()).map(|k| format!("x_{k}")).collect();
    header.extend(channel_names.iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(csv_err)?;
    for (x, y) in dataset.inputs().iter().zip(dataset.labels()) {
        w.write_record(x.iter().chain(y).map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dataset written by [`write_dataset`]; columns named `x_*` are
/// features, the rest labels.
pub fn read_dataset(path: &Path) -> Result<(Dataset, Vec<String>)> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| parse_err(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    let in_dim = header.iter().take_while(|h| h.starts_with("x_")).count();
    let names = header[in_dim..].to_vec();
    let mut data = Dataset::new(in_dim, names.len());
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let vals = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(format!("row {}: {e}", line + 1)))?;
        if vals.len() != header.len() {
            return Err(parse_err(format!("row {} has {} fields", line + 1, vals.len())));
        }
        data.push(vals[..in_dim].to_vec(), vals[in_dim..].to_vec())?;
    }
    Ok((data, names))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let mut d = Dataset::new(2, 2);
        d.push(vec![0.1, -1.0 / 3.0], vec![1e-300, 7.0]).unwrap();
        d.push(vec![std::f64::consts::PI, 2.0], vec![-0.0, 1.23456789012345e10]).unwrap();
        write_dataset(&path, &d, &["f_x", "f_y"]).unwrap();
        let (back, names) = read_dataset(&path).unwrap();
        assert_eq!(names, vec!["f_x", "f_y"]);
        assert_eq!(back.inputs(), d.inputs());
        assert_eq!(back.labels(), d.labels());
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_dataset(Path::new("/nonexistent/dir/data.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/data.csv"));
    }
}
