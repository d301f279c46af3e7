//! File formats: parameter and report JSON, dataset CSV, and atomic writes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, ModelSpec, Theta};

/// Nested JSON form of [`Theta`]: `gate[k][d][p]` for the `K-1` free
/// experts and `experts[m][k][d][p]` for the `M-1` free classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaJson {
    pub spec: ModelSpec,
    pub gate: Vec<Vec<Vec<f64>>>,
    pub experts: Vec<Vec<Vec<Vec<f64>>>>,
}

impl From<Theta> for ThetaJson {
    fn from(t: Theta) -> Self {
        let s = *t.spec();
        let gate = (0..s.k - 1)
            .map(|k| (0..=s.d).map(|d| (0..s.p).map(|p| t.gate_coef(k, d, p)).collect()).collect())
            .collect();
        let experts = (0..s.m - 1)
            .map(|m| {
                (0..s.k)
                    .map(|k| {
                        (0..=s.d)
                            .map(|d| (0..s.p).map(|p| t.expert_coef(m, k, d, p)).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        ThetaJson {
            spec: s,
            gate,
            experts,
        }
    }
}

impl TryFrom<ThetaJson> for Theta {
    type Error = Error;

    fn try_from(j: ThetaJson) -> Result<Self> {
        let s = j.spec;
        s.validate().map_err(|e| Error::Schema(e.to_string()))?;
        let shape_err = |what: &str| Error::Schema(format!("{what} array does not match spec {s:?}"));
        if j.gate.len() != s.k - 1 {
            return Err(shape_err("gate"));
        }
        if j.experts.len() != s.m - 1 {
            return Err(shape_err("experts"));
        }
        let mut theta = Theta::zeros(s);
        for (k, by_d) in j.gate.iter().enumerate() {
            if by_d.len() != s.d + 1 {
                return Err(shape_err("gate"));
            }
            for (d, by_p) in by_d.iter().enumerate() {
                if by_p.len() != s.p {
                    return Err(shape_err("gate"));
                }
                for (p, &v) in by_p.iter().enumerate() {
                    theta.set_gate_coef(k, d, p, v);
                }
            }
        }
        for (m, by_k) in j.experts.iter().enumerate() {
            if by_k.len() != s.k {
                return Err(shape_err("experts"));
            }
            for (k, by_d) in by_k.iter().enumerate() {
                if by_d.len() != s.d + 1 {
                    return Err(shape_err("experts"));
                }
                for (d, by_p) in by_d.iter().enumerate() {
                    if by_p.len() != s.p {
                        return Err(shape_err("experts"));
                    }
                    for (p, &v) in by_p.iter().enumerate() {
                        theta.set_expert_coef(m, k, d, p, v);
                    }
                }
            }
        }
        if !theta.is_finite() {
            return Err(Error::Schema("parameters must be finite".into()));
        }
        Ok(theta)
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Reads JSON; structural mismatches are reported as [`Error::Schema`].
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| {
        if e.is_syntax() || e.is_eof() {
            Error::Json(e)
        } else {
            Error::Schema(format!("{}: {e}", path.display()))
        }
    })
}

/// Dataset CSV contents plus the label mapping when labels were not
/// already `1..=M` integers.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCsv {
    pub data: Dataset,
    /// Original label -> 1-based class, present for string labels.
    pub label_map: Option<BTreeMap<String, usize>>,
}

/// Reads a CSV with header `x1,..,xP,y` (the label column must be last).
///
/// Labels that all parse as integers are used as given and must lie in
/// `1..=m`. Otherwise every distinct label string becomes a class, numbered
/// in sorted order; `m` (when given) must then equal the number of distinct
/// labels, else it is inferred.
pub fn read_dataset_csv(path: &Path, m: Option<usize>) -> Result<LoadedCsv> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::Schema("CSV needs at least one covariate column and a label column".into()));
    }
    let p = headers.len() - 1;
    let mut x = Vec::new();
    let mut raw = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(Error::Schema(format!("row {} has {} fields, expected {}", line + 1, rec.len(), headers.len())));
        }
        for j in 0..p {
            let v: f64 = rec[j].parse().map_err(|_| {
                Error::Schema(format!("row {}: covariate '{}' is not a number", line + 1, &rec[j]))
            })?;
            if !v.is_finite() {
                return Err(Error::Schema(format!("row {}: non-finite covariate", line + 1)));
            }
            x.push(v);
        }
        raw.push(rec[p].to_string());
    }

    let ints: Option<Vec<usize>> = raw.iter().map(|s| s.parse::<usize>().ok()).collect();
    let (labels, label_map, m) = match ints {
        Some(labels) => {
            let m = match m {
                Some(m) => m,
                None => labels.iter().copied().max().unwrap_or(2).max(2),
            };
            if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l > m) {
                return Err(Error::Schema(format!("label {bad} is outside 1..={m}")));
            }
            (labels, None, m)
        }
        None => {
            let mut map = BTreeMap::new();
            for s in &raw {
                map.entry(s.clone()).or_insert(0);
            }
            for (i, v) in map.values_mut().enumerate() {
                *v = i + 1;
            }
            let found = map.len();
            let m = m.unwrap_or(found.max(2));
            if found > m {
                return Err(Error::Schema(format!("{found} distinct labels but M = {m}")));
            }
            let labels = raw.iter().map(|s| map[s]).collect();
            (labels, Some(map), m)
        }
    };
    let data = Dataset::new(p, m, x, &labels).map_err(|e| Error::Schema(e.to_string()))?;
    Ok(LoadedCsv { data, label_map })
}

/// Writes a dataset as `x1,..,xP,y` with 1-based integer labels.
pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (1..=data.p()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for n in 0..data.len() {
        let mut row: Vec<String> = data.x_row(n).iter().map(|v| format!("{v:?}")).collect();
        row.push(data.label(n).to_string());
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Serializes rows with a header into CSV bytes.
pub fn csv_bytes<S: AsRef<str>>(header: &[&str], rows: &[Vec<S>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|s| s.as_ref()))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}
