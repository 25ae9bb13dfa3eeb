//! Marginal distributions: synthetic generators and CSV sample files.
//!
//! CSV layout: UTF-8, a header `x0,x1,…`, one point per line, values written
//! with 17 significant digits so that a save/load round trip is exact.

use std::f64::consts::{PI, TAU};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Matrix2D;

pub const DEFAULT_NOISE: f64 = 0.05;
pub const DEFAULT_CIRCLE_FACTOR: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarginalSpec {
    /// `N(mean, sd²·I)` in `mean.len()` dimensions.
    IsotropicGaussian { mean: Vec<f64>, sd: f64, n: usize },
    /// Two interleaved half circles with Gaussian noise.
    TwoMoons { noise: f64, n: usize },
    /// Concentric circles of radius 1 and `factor` with Gaussian noise.
    TwoCircles { noise: f64, factor: f64, n: usize },
    /// Samples read from a CSV file.
    CsvFile { path: PathBuf },
}

impl MarginalSpec {
    /// Gaussian with the same scalar mean in every coordinate.
    pub fn gaussian(mean: f64, sd: f64, dim: usize, n: usize) -> Self {
        MarginalSpec::IsotropicGaussian {
            mean: vec![mean; dim],
            sd,
            n,
        }
    }

    pub fn two_moons(n: usize) -> Self {
        MarginalSpec::TwoMoons {
            noise: DEFAULT_NOISE,
            n,
        }
    }

    pub fn two_circles(n: usize) -> Self {
        MarginalSpec::TwoCircles {
            noise: DEFAULT_NOISE,
            factor: DEFAULT_CIRCLE_FACTOR,
            n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_n = |n: usize| {
            if n == 0 {
                Err(shape_err!("sample count must be at least 1"))
            } else {
                Ok(())
            }
        };
        let check_noise = |noise: f64| {
            if noise >= 0.0 && noise.is_finite() {
                Ok(())
            } else {
                Err(domain_err!(
                    "noise must be a finite value >= 0, got {noise}"
                ))
            }
        };
        match self {
            MarginalSpec::IsotropicGaussian { mean, sd, n } => {
                check_n(*n)?;
                if mean.is_empty() || mean.iter().any(|m| !m.is_finite()) {
                    return Err(domain_err!(
                        "gaussian mean must be a non-empty finite vector"
                    ));
                }
                if !(*sd > 0.0 && sd.is_finite()) {
                    return Err(domain_err!("gaussian sd must be positive, got {sd}"));
                }
            }
            MarginalSpec::TwoMoons { noise, n } => {
                check_n(*n)?;
                check_noise(*noise)?;
            }
            MarginalSpec::TwoCircles { noise, factor, n } => {
                check_n(*n)?;
                check_noise(*noise)?;
                if !(*factor > 0.0 && *factor < 1.0) {
                    return Err(domain_err!(
                        "circle factor must lie in (0, 1), got {factor}"
                    ));
                }
            }
            MarginalSpec::CsvFile { .. } => {}
        }
        Ok(())
    }

    /// Dimension of the samples, if known without reading a file.
    pub fn dim(&self) -> Option<usize> {
        match self {
            MarginalSpec::IsotropicGaussian { mean, .. } => Some(mean.len()),
            MarginalSpec::TwoMoons { .. } | MarginalSpec::TwoCircles { .. } => Some(2),
            MarginalSpec::CsvFile { .. } => None,
        }
    }

    /// The dataset described by this spec. CSV files are read as-is.
    pub fn generate(&self, rng: &mut Rng) -> Result<Matrix2D> {
        match self {
            MarginalSpec::IsotropicGaussian { n, .. }
            | MarginalSpec::TwoMoons { n, .. }
            | MarginalSpec::TwoCircles { n, .. } => self.sample(*n, rng),
            MarginalSpec::CsvFile { path } => load_csv(path),
        }
    }

    /// `n` fresh points. Built-in kinds draw new samples; CSV files are
    /// resampled with replacement.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Matrix2D> {
        self.validate()?;
        if n == 0 {
            return Err(shape_err!("sample count must be at least 1"));
        }
        match self {
            MarginalSpec::IsotropicGaussian { mean, sd, .. } => {
                let d = mean.len();
                let mut data = Vec::with_capacity(n * d);
                for _ in 0..n {
                    for m in mean {
                        data.push(m + sd * rng.standard_normal());
                    }
                }
                Matrix2D::from_vec(n, d, data)
            }
            MarginalSpec::TwoMoons { noise, .. } => {
                let upper = n.div_ceil(2);
                let mut data = Vec::with_capacity(2 * n);
                for i in 0..n {
                    let t = rng.uniform_range(0.0, PI);
                    let (x, y) = if i < upper {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    data.push(x);
                    data.push(y);
                }
                add_noise(&mut data, *noise, rng);
                Matrix2D::from_vec(n, 2, data)
            }
            MarginalSpec::TwoCircles { noise, factor, .. } => {
                let outer = n.div_ceil(2);
                let mut data = Vec::with_capacity(2 * n);
                for i in 0..n {
                    let t = rng.uniform_range(0.0, TAU);
                    let r = if i < outer { 1.0 } else { *factor };
                    data.push(r * t.cos());
                    data.push(r * t.sin());
                }
                add_noise(&mut data, *noise, rng);
                Matrix2D::from_vec(n, 2, data)
            }
            MarginalSpec::CsvFile { path } => {
                let base = load_csv(path)?;
                let idx: Vec<usize> = (0..n).map(|_| rng.below(base.rows())).collect();
                base.select_rows(&idx)
            }
        }
    }
}

fn add_noise(data: &mut [f64], noise: f64, rng: &mut Rng) {
    if noise > 0.0 {
        for v in data {
            *v += noise * rng.standard_normal();
        }
    }
}

pub fn save_csv(path: impl AsRef<Path>, m: &Matrix2D) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..m.cols()).map(|j| format!("x{j}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for row in m.row_iter() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a sample matrix. A first line with any non-numeric field is a header.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Matrix2D> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;

    let mut cols: Option<usize> = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(k as u64 + 1, |p| p.line());
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(|f| f.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if k == 0 => {
                cols = Some(record.len());
                continue;
            }
            Err(_) => {
                return Err(Error::Parse {
                    line,
                    msg: format!(
                        "non-numeric field in {:?}",
                        record.iter().collect::<Vec<_>>()
                    ),
                })
            }
        };
        let expected = *cols.get_or_insert(values.len());
        if values.len() != expected {
            return Err(Error::Parse {
                line,
                msg: format!("expected {expected} fields, found {}", values.len()),
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line,
                msg: format!("non-finite value {v}"),
            });
        }
        data.extend(values);
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    if rows == 0 || cols == 0 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("{} contains no samples", path.display()),
        });
    }
    Matrix2D::from_vec(rows, cols, data)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            msg: format!("{}: {other:?}", path.display()),
        },
    }
}
