//! Data containers, synthetic generators and CSV ingestion.
//!
//! All randomness flows through explicitly seeded ChaCha8 streams so that a
//! given `(command, seed)` pair reproduces the same dataset on any platform.

use std::path::Path;

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// An `n x d` observation matrix, stored row major.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: Vec<f64>,
    n: usize,
    d: usize,
    pub column_names: Option<Vec<String>>,
}

impl DataMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Input("data matrix needs at least one row".into()));
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(Error::Input("data matrix needs at least one column".into()));
        }
        let mut values = Vec::with_capacity(rows.len() * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Input(format!(
                    "ragged data: row {} has {} entries, expected {d}",
                    i + 1,
                    row.len()
                )));
            }
            for (j, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Input(format!(
                        "non-finite value at row {}, column {}",
                        i + 1,
                        j + 1
                    )));
                }
            }
            values.extend_from_slice(row);
        }
        Ok(DataMatrix {
            n: rows.len(),
            d,
            values,
            column_names: None,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.d)
    }

    /// Copy of the matrix restricted to the given (0-based) columns.
    pub fn project(&self, dims: &[usize]) -> Result<DataMatrix> {
        if dims.is_empty() {
            return Err(Error::Input(
                "projection needs at least one dimension".into(),
            ));
        }
        for &j in dims {
            if j >= self.d {
                return Err(Error::Input(format!(
                    "projection dimension {} out of range for {} columns",
                    j + 1,
                    self.d
                )));
            }
        }
        let mut values = Vec::with_capacity(self.n * dims.len());
        for i in 0..self.n {
            let row = self.row(i);
            values.extend(dims.iter().map(|&j| row[j]));
        }
        Ok(DataMatrix {
            values,
            n: self.n,
            d: dims.len(),
            column_names: self
                .column_names
                .as_ref()
                .map(|names| dims.iter().map(|&j| names[j].clone()).collect()),
        })
    }

    /// Sample covariance with divisor `n` around the sample mean.
    pub fn sample_covariance(&self) -> DMatrix<f64> {
        let mut mean = vec![0.0; self.d];
        for row in self.rows_iter() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= self.n as f64;
        }
        let mut cov = DMatrix::zeros(self.d, self.d);
        for row in self.rows_iter() {
            for a in 0..self.d {
                for b in 0..self.d {
                    cov[(a, b)] += (row[a] - mean[a]) * (row[b] - mean[b]);
                }
            }
        }
        cov / self.n as f64
    }
}

/// RNG stream for a named experiment and seed. ChaCha8 is fixed as the
/// project-wide generator so seeds stay portable.
pub fn seeded_rng(stream: u64, seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn standard_normals(rng: &mut ChaCha8Rng, count: usize) -> Vec<f64> {
    (0..count).map(|_| rng.sample(StandardNormal)).collect()
}

/// Toy scenario names from the bivariate Gaussian suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyScenario {
    Ds,
    NestedDs,
    Ms,
    NestedMs,
}

impl ToyScenario {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ds" => Ok(ToyScenario::Ds),
            "nested_ds" => Ok(ToyScenario::NestedDs),
            "ms" => Ok(ToyScenario::Ms),
            "nested_ms" => Ok(ToyScenario::NestedMs),
            other => Err(Error::Config(format!("unknown toy scenario '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ToyScenario::Ds => "ds",
            ToyScenario::NestedDs => "nested_ds",
            ToyScenario::Ms => "ms",
            ToyScenario::NestedMs => "nested_ms",
        }
    }

    /// Generator variances per dimension: `diag(1, 1/2)` for data selection,
    /// the identity for the well-specified scenarios.
    pub fn generator_variances(&self) -> [f64; 2] {
        match self {
            ToyScenario::Ds => [1.0, 0.5],
            _ => [1.0, 1.0],
        }
    }
}

/// Draw `n` points from the bivariate Gaussian of the toy suite.
pub fn generate_toy(scenario: ToyScenario, n: usize, seed: u64) -> DataMatrix {
    let vars = scenario.generator_variances();
    let sds = [vars[0].sqrt(), vars[1].sqrt()];
    let mut rng = seeded_rng(0x1071, seed);
    let z = standard_normals(&mut rng, n * 2);
    let mut values = Vec::with_capacity(n * 2);
    for i in 0..n {
        values.push(z[2 * i] * sds[0]);
        values.push(z[2 * i + 1] * sds[1]);
    }
    DataMatrix {
        values,
        n,
        d: 2,
        column_names: None,
    }
}

/// pPCA simulation scenarios: dimensions 5 and 6 violate the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PpcaScenario {
    A,
    B,
}

impl PpcaScenario {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(PpcaScenario::A),
            "B" | "b" => Ok(PpcaScenario::B),
            other => Err(Error::Config(format!("unknown ppca scenario '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PpcaScenario::A => "A",
            PpcaScenario::B => "B",
        }
    }
}

/// Factor loading matrix for the well-specified block of the simulation.
pub fn simulation_loading() -> DMatrix<f64> {
    DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 1.0, 0.0, 1.0, -1.0, -1.0])
}

/// Simulate the six-dimensional dataset: dimensions 1-4 follow a pPCA model
/// with `k = 2` and unit noise, dimensions 5-6 are corrupted according to the
/// scenario. Returns the data and the include/exclude ground truth per
/// dimension (`true` = include).
pub fn generate_ppca_sim(scenario: PpcaScenario, n: usize, seed: u64) -> (DataMatrix, Vec<bool>) {
    let h = simulation_loading();
    let mut rng = seeded_rng(0x9ca, seed);
    let mut values = Vec::with_capacity(n * 6);
    for _ in 0..n {
        let z = [
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        ];
        for a in 0..4 {
            let mean = h[(a, 0)] * z[0] + h[(a, 1)] * z[1];
            values.push(mean + rng.sample::<f64, _>(StandardNormal));
        }
        let w: bool = rng.random_bool(0.5);
        let (g1, g2) = (
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        match scenario {
            PpcaScenario::A => {
                let sd = if w { 0.05_f64.sqrt() } else { 1.0 };
                values.push(sd * g1);
                values.push(sd * g2);
            }
            PpcaScenario::B => {
                // Covariance [[1, rho], [rho, 1]] via its Cholesky factor.
                let rho: f64 = if w { -0.99 } else { 0.99 };
                values.push(g1);
                values.push(rho * g1 + (1.0 - rho * rho).sqrt() * g2);
            }
        }
    }
    let truth = vec![true, true, true, true, false, false];
    (
        DataMatrix {
            values,
            n,
            d: 6,
            column_names: None,
        },
        truth,
    )
}

/// Read a rectangular numeric CSV. A single non-numeric header row is
/// detected and used for column names. With `standardize`, each column is
/// centred and scaled to unit variance (divisor `n`).
pub fn ingest_csv(path: &Path, standardize: bool) -> Result<DataMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut names: Option<Vec<String>> = None;
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })?;
        let line = idx + 1;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, _>> =
            record.iter().map(|f| f.parse::<f64>()).collect();
        if idx == 0 && parsed.iter().any(|p| p.is_err()) {
            names = Some(record.iter().map(|s| s.to_string()).collect());
            continue;
        }
        let mut row = Vec::with_capacity(record.len());
        for (col, value) in parsed.into_iter().enumerate() {
            match value {
                Ok(v) if v.is_finite() => row.push(v),
                Ok(_) => {
                    return Err(Error::Input(format!(
                        "non-finite value at row {line}, column {}",
                        col + 1
                    )))
                }
                Err(_) => {
                    return Err(Error::Input(format!(
                        "non-numeric cell at row {line}, column {}: '{}'",
                        col + 1,
                        &record[col]
                    )))
                }
            }
        }
        rows.push(row);
    }
    if rows.len() < 2 {
        return Err(Error::InsufficientData {
            need: 2,
            got: rows.len(),
        });
    }
    let width = rows[0].len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(Error::Input(format!(
                "ragged csv: row {} has {} cells, expected {width}",
                i + 1,
                row.len()
            )));
        }
    }
    if let Some(ref names) = names {
        if names.len() != width {
            return Err(Error::Input(format!(
                "header has {} names but rows have {width} cells",
                names.len()
            )));
        }
    }

    let mut data = DataMatrix::from_rows(rows)?;
    data.column_names = names;
    if standardize {
        standardize_columns(&mut data)?;
    }
    Ok(data)
}

fn standardize_columns(data: &mut DataMatrix) -> Result<()> {
    let (n, d) = (data.n, data.d);
    for j in 0..d {
        let mean = (0..n).map(|i| data.values[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|i| (data.values[i * d + j] - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        if var <= 0.0 {
            let name = data
                .column_names
                .as_ref()
                .map(|c| c[j].clone())
                .unwrap_or_else(|| format!("{}", j + 1));
            return Err(Error::Input(format!(
                "column {name} is constant and cannot be standardized"
            )));
        }
        let sd = var.sqrt();
        for i in 0..n {
            data.values[i * d + j] = (data.values[i * d + j] - mean) / sd;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::io::Write;

    #[test]
    fn toy_data_is_seed_deterministic() {
        let a = generate_toy(ToyScenario::Ds, 100, 42);
        let b = generate_toy(ToyScenario::Ds, 100, 42);
        assert_eq!(a, b);
        let c = generate_toy(ToyScenario::Ds, 100, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn toy_ds_covariance_matches_generator() {
        let data = generate_toy(ToyScenario::Ds, 100_000, 1);
        let cov = data.sample_covariance();
        assert_relative_eq!(cov[(0, 0)], 1.0, max_relative = 0.02);
        assert_relative_eq!(cov[(1, 1)], 0.5, max_relative = 0.02);
        let n = data.n_rows() as f64;
        for j in 0..2 {
            let mean = data.rows_iter().map(|r| r[j]).sum::<f64>() / n;
            assert!(mean.abs() < 4.0 / n.sqrt());
        }
    }

    #[test]
    fn ppca_sim_truth_and_moments() {
        let (data, truth) = generate_ppca_sim(PpcaScenario::A, 60_000, 3);
        assert_eq!(truth, vec![true, true, true, true, false, false]);
        let cov = data.sample_covariance();
        // Mixture variance of dimension 5: (1 + 0.05) / 2.
        assert_relative_eq!(cov[(4, 4)], 0.525, max_relative = 0.05);

        let (data_b, _) = generate_ppca_sim(PpcaScenario::B, 60_000, 3);
        let cov_b = data_b.sample_covariance();
        assert_relative_eq!(cov_b[(4, 4)], 1.0, max_relative = 0.05);
        assert_relative_eq!(cov_b[(5, 5)], 1.0, max_relative = 0.05);
        // The +-0.99 mixture cancels in the covariance even though the pair
        // is jointly non-Gaussian.
        assert!(cov_b[(4, 5)].abs() < 0.05);
    }

    #[test]
    fn csv_roundtrip_and_standardize() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "a,b").unwrap();
        writeln!(f, "1.0,2.0").unwrap();
        writeln!(f, "3.0,4.0").unwrap();
        writeln!(f, "5.0,9.0").unwrap();
        drop(f);

        let raw = ingest_csv(&path, false).unwrap();
        assert_eq!(raw.n_rows(), 3);
        assert_eq!(raw.row(1), &[3.0, 4.0]);
        assert_eq!(raw.column_names.as_deref().unwrap(), ["a", "b"]);

        let std = ingest_csv(&path, true).unwrap();
        for j in 0..2 {
            let mean = std.rows_iter().map(|r| r[j]).sum::<f64>() / 3.0;
            let var = std.rows_iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / 3.0;
            assert_relative_eq!(mean, 0.0, epsilon = 1e-12);
            assert_relative_eq!(var, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn csv_nan_cell_is_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "1.0,2.0\n3.0,NaN\n4.0,5.0\n").unwrap();
        let err = ingest_csv(&path, false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2") && msg.contains("column 2"), "{msg}");
    }

    #[test]
    fn csv_constant_column_rejected_when_standardizing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("const.csv");
        std::fs::write(&path, "1.0,7.0\n2.0,7.0\n3.0,7.0\n").unwrap();
        assert!(ingest_csv(&path, false).is_ok());
        assert!(matches!(ingest_csv(&path, true), Err(Error::Input(_))));
    }

    #[test]
    fn csv_ragged_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ragged.csv");
        std::fs::write(&path, "1.0,2.0\n3.0\n").unwrap();
        assert!(matches!(ingest_csv(&path, false), Err(Error::Input(_))));
    }
}
