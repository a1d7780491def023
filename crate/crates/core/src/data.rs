//! Longitudinal data containers and the wide-format delimited file layout.
//!
//! The on-disk layout is wide: one row per individual with columns
//! `id`, `t1..tJ`, `y1..yJ`, then any covariate columns, then an optional
//! `label` column (1-based class index). An empty `tj`/`yj` cell marks a
//! missing wave; the whole `(t, y)` pair is dropped for that individual, so
//! row lengths may differ across individuals.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One individual's repeated measurements and baseline covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: String,
    /// Measurement occasions, strictly increasing.
    pub times: Vec<f64>,
    /// Outcomes, same length as `times`.
    pub outcomes: Vec<f64>,
    /// Baseline covariates (possibly empty; constant length across a dataset).
    pub covariates: Vec<f64>,
    /// True class label (0-based), when known.
    pub label: Option<usize>,
}

impl Individual {
    pub fn new(
        id: impl Into<String>,
        times: Vec<f64>,
        outcomes: Vec<f64>,
        covariates: Vec<f64>,
        label: Option<usize>,
    ) -> Result<Self> {
        let ind = Self { id: id.into(), times, outcomes, covariates, label };
        ind.validate()?;
        Ok(ind)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() || self.times.len() != self.outcomes.len() {
            return Err(Error::invalid(format!(
                "individual {}: needs at least one (t, y) pair and equal lengths",
                self.id
            )));
        }
        if self.times.iter().any(|t| !t.is_finite())
            || self.outcomes.iter().any(|y| !y.is_finite())
            || self.covariates.iter().any(|x| !x.is_finite())
        {
            return Err(Error::invalid(format!("individual {}: non-finite value", self.id)));
        }
        if self.times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "individual {}: times must be strictly increasing",
                self.id
            )));
        }
        Ok(())
    }
}

/// A set of individuals with a shared covariate layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalDataset {
    pub individuals: Vec<Individual>,
    pub covariate_names: Vec<String>,
}

impl LongitudinalDataset {
    pub fn new(individuals: Vec<Individual>, covariate_names: Vec<String>) -> Result<Self> {
        let ds = Self { individuals, covariate_names };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.covariate_names.len();
        for ind in &self.individuals {
            ind.validate()?;
            if ind.covariates.len() != q {
                return Err(Error::invalid(format!(
                    "individual {}: expected {} covariates, got {}",
                    ind.id,
                    q,
                    ind.covariates.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }

    /// Observed time range over all individuals.
    pub fn time_range(&self) -> Result<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for ind in &self.individuals {
            for &t in &ind.times {
                lo = lo.min(t);
                hi = hi.max(t);
            }
        }
        if lo >= hi {
            return Err(Error::invalid("dataset spans no time range"));
        }
        Ok((lo, hi))
    }

    /// True labels when every individual carries one.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.individuals.iter().map(|i| i.label).collect()
    }

    /// Covariate matrix rows in individual order (n×q, row-major).
    pub fn covariate_rows(&self) -> Vec<&[f64]> {
        self.individuals.iter().map(|i| i.covariates.as_slice()).collect()
    }

    /// Restrict covariates to the named columns, preserving the given order.
    pub fn select_covariates(&self, names: &[String]) -> Result<LongitudinalDataset> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.covariate_names
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::invalid(format!("unknown covariate column `{n}`")))
            })
            .collect::<Result<_>>()?;
        let individuals = self
            .individuals
            .iter()
            .map(|ind| Individual {
                covariates: idx.iter().map(|&j| ind.covariates[j]).collect(),
                ..ind.clone()
            })
            .collect();
        Ok(LongitudinalDataset { individuals, covariate_names: names.to_vec() })
    }

    /// Replace the covariate block wholesale (e.g. with factor scores).
    pub fn with_covariates(
        &self,
        names: Vec<String>,
        rows: Vec<Vec<f64>>,
    ) -> Result<LongitudinalDataset> {
        if rows.len() != self.len() {
            return Err(Error::invalid("covariate row count does not match dataset"));
        }
        let individuals = self
            .individuals
            .iter()
            .zip(rows)
            .map(|(ind, covariates)| Individual { covariates, ..ind.clone() })
            .collect();
        LongitudinalDataset::new(individuals, names)
    }
}

fn parse_cell(raw: &str, line: usize, col: &str) -> Result<Option<f64>> {
    let s = raw.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| Error::Data {
        line,
        message: format!("column `{col}`: cannot parse `{s}` as a number"),
    })
}

/// Read a wide-format dataset from a delimited file.
pub fn read_wide_csv(path: impl AsRef<Path>) -> Result<LongitudinalDataset> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();

    if headers.first().map(String::as_str) != Some("id") {
        return Err(Error::Data { line: 1, message: "first column must be `id`".into() });
    }
    let t_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| wave_index(h, 't').is_some())
        .map(|(i, _)| i)
        .collect();
    let y_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| wave_index(h, 'y').is_some())
        .map(|(i, _)| i)
        .collect();
    if t_cols.is_empty() || t_cols.len() != y_cols.len() {
        return Err(Error::Data {
            line: 1,
            message: format!(
                "need matching t1..tJ and y1..yJ columns (found {} and {})",
                t_cols.len(),
                y_cols.len()
            ),
        });
    }
    let label_col = headers.iter().position(|h| h == "label");
    let covariate_cols: Vec<usize> = (1..headers.len())
        .filter(|i| !t_cols.contains(i) && !y_cols.contains(i) && Some(*i) != label_col)
        .collect();
    let covariate_names: Vec<String> =
        covariate_cols.iter().map(|&i| headers[i].clone()).collect();

    let mut individuals = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let line = row_idx + 2; // 1-based, after the header
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Data {
                line,
                message: format!("expected {} fields, got {}", headers.len(), record.len()),
            });
        }
        let id = record[0].trim().to_string();
        let mut times = Vec::new();
        let mut outcomes = Vec::new();
        for (&tc, &yc) in t_cols.iter().zip(&y_cols) {
            let t = parse_cell(&record[tc], line, &headers[tc])?;
            let y = parse_cell(&record[yc], line, &headers[yc])?;
            match (t, y) {
                (Some(t), Some(y)) => {
                    times.push(t);
                    outcomes.push(y);
                }
                (None, None) => {}
                _ => {
                    return Err(Error::Data {
                        line,
                        message: format!(
                            "wave `{}`/`{}` must be both present or both empty",
                            headers[tc], headers[yc]
                        ),
                    })
                }
            }
        }
        let covariates = covariate_cols
            .iter()
            .map(|&c| {
                parse_cell(&record[c], line, &headers[c])?.ok_or_else(|| Error::Data {
                    line,
                    message: format!("covariate `{}` is empty", headers[c]),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let label = match label_col {
            None => None,
            Some(c) => match parse_cell(&record[c], line, "label")? {
                None => None,
                Some(v) => {
                    let k = v as i64;
                    if k < 1 || v.fract() != 0.0 {
                        return Err(Error::Data {
                            line,
                            message: format!("label must be a positive integer, got `{v}`"),
                        });
                    }
                    Some((k - 1) as usize)
                }
            },
        };
        let ind =
            Individual::new(id, times, outcomes, covariates, label).map_err(|e| Error::Data {
                line,
                message: e.to_string(),
            })?;
        individuals.push(ind);
    }
    LongitudinalDataset::new(individuals, covariate_names)
}

/// Write a dataset in the wide format; waves are padded to the longest series.
pub fn write_wide_csv(ds: &LongitudinalDataset, path: impl AsRef<Path>) -> Result<()> {
    let max_j = ds.individuals.iter().map(|i| i.times.len()).max().unwrap_or(0);
    let has_labels = ds.individuals.iter().any(|i| i.label.is_some());
    let mut writer = csv::Writer::from_path(path.as_ref())?;

    let mut header = vec!["id".to_string()];
    header.extend((1..=max_j).map(|j| format!("t{j}")));
    header.extend((1..=max_j).map(|j| format!("y{j}")));
    header.extend(ds.covariate_names.iter().cloned());
    if has_labels {
        header.push("label".into());
    }
    writer.write_record(&header)?;

    for ind in &ds.individuals {
        let mut row = vec![ind.id.clone()];
        for j in 0..max_j {
            row.push(ind.times.get(j).map(|t| t.to_string()).unwrap_or_default());
        }
        for j in 0..max_j {
            row.push(ind.outcomes.get(j).map(|y| y.to_string()).unwrap_or_default());
        }
        for x in &ind.covariates {
            row.push(x.to_string());
        }
        if has_labels {
            row.push(ind.label.map(|z| (z + 1).to_string()).unwrap_or_default());
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

fn wave_index(header: &str, prefix: char) -> Option<usize> {
    let rest = header.strip_prefix(prefix)?;
    rest.parse::<usize>().ok().filter(|&j| j >= 1)
}
