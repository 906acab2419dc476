//! Dataset files: a CSV with header `y,x0,...,x{D-1}` and a JSON sidecar
//! recording where the data came from.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Domain, DriftKind, DriftSpec, TaskSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub task: TaskSpec,
    pub drift: Option<DriftSpec>,
    pub domain: Domain,
    pub drift_tag: DriftKind,
    pub n_samples: usize,
    pub n_classes: usize,
    pub input_dim: usize,
    pub subpop: Vec<usize>,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{other:?}"),
        },
    }
}

/// Writes `ds` to `csv_path` and its sidecar next to it (same stem, `.json`).
pub fn write_dataset(
    csv_path: &Path,
    ds: &Dataset,
    task: &TaskSpec,
    drift: Option<&DriftSpec>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(csv_path).map_err(|e| csv_err(csv_path, e))?;
    let d = ds.input_dim();
    let header: Vec<String> = std::iter::once("y".to_string())
        .chain((0..d).map(|j| format!("x{j}")))
        .collect();
    w.write_record(&header).map_err(|e| csv_err(csv_path, e))?;
    let mut record = Vec::with_capacity(d + 1);
    for i in 0..ds.len() {
        record.clear();
        record.push(ds.y[i].to_string());
        record.extend(ds.x.row(i).iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(|e| csv_err(csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;

    let sidecar = Sidecar {
        task: task.clone(),
        drift: drift.cloned(),
        domain: ds.domain,
        drift_tag: ds.drift,
        n_samples: ds.len(),
        n_classes: ds.n_classes,
        input_dim: d,
        subpop: ds.subpop.clone(),
    };
    let sc_path = sidecar_path(csv_path);
    let text = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(&sc_path, text).map_err(|e| Error::io(&sc_path, e))
}

/// Reads a dataset written by [`write_dataset`], including its sidecar.
pub fn read_dataset(csv_path: &Path) -> Result<(Dataset, Sidecar)> {
    let sc_path = sidecar_path(csv_path);
    let text = std::fs::read_to_string(&sc_path).map_err(|e| Error::io(&sc_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;

    let mut r = csv::Reader::from_path(csv_path).map_err(|e| csv_err(csv_path, e))?;
    let header = r.headers().map_err(|e| csv_err(csv_path, e))?.clone();
    let d = header.len().saturating_sub(1);
    let expected_header = header.get(0) == Some("y")
        && (0..d).all(|j| header.get(j + 1) == Some(format!("x{j}").as_str()));
    if !expected_header || d != sidecar.input_dim {
        return Err(Error::Parse {
            path: csv_path.to_path_buf(),
            line: 1,
            msg: format!(
                "expected header y,x0..x{}",
                sidecar.input_dim.saturating_sub(1)
            ),
        });
    }
    let mut x = Vec::with_capacity(sidecar.n_samples * d);
    let mut y = Vec::with_capacity(sidecar.n_samples);
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(csv_path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::Parse {
            path: csv_path.to_path_buf(),
            line,
            msg,
        };
        let label: usize = rec[0]
            .parse()
            .map_err(|_| bad(format!("bad label {:?}", &rec[0])))?;
        y.push(label);
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| bad(format!("bad value {field:?}")))?;
            x.push(v);
        }
    }
    let rows = y.len();
    if rows != sidecar.n_samples || sidecar.subpop.len() != rows {
        return Err(Error::Input(format!(
            "{}: {rows} rows but sidecar describes {}",
            csv_path.display(),
            sidecar.n_samples
        )));
    }
    let ds = Dataset {
        x: Tensor2::from_vec(rows, d, x)?,
        y,
        subpop: sidecar.subpop.clone(),
        n_classes: sidecar.n_classes,
        domain: sidecar.domain,
        drift: sidecar.drift_tag,
    };
    ds.validate()?;
    Ok((ds, sidecar))
}
