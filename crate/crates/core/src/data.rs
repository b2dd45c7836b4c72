//! Dataset loading, toy generators and the seeded train/test split.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fraction of rows assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.85;

/// Smallest size accepted by [`generate_toy`].
pub const MIN_TOY_POINTS: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset has no usable rows")]
    EmptyDataset,
    #[error("column `{column}` is not numeric (line {line})")]
    NonNumericColumn { column: String, line: usize },
    #[error("unknown target column `{0}`")]
    UnknownTarget(String),
    #[error("unknown generator `{0}` (expected smooth1d or step1d)")]
    UnknownGenerator(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which column holds the regression target.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TargetColumn {
    #[default]
    Last,
    Index(usize),
    Name(String),
}

impl FromStr for TargetColumn {
    type Err = std::convert::Infallible;

    /// Integers select by position, anything else by header name.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => TargetColumn::Index(i),
            Err(_) if s == "last" => TargetColumn::Last,
            Err(_) => TargetColumn::Name(s.to_string()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ToyGenerator {
    Smooth1d,
    Step1d,
}

impl ToyGenerator {
    pub fn name(&self) -> &'static str {
        match self {
            ToyGenerator::Smooth1d => "smooth1d",
            ToyGenerator::Step1d => "step1d",
        }
    }

    fn sample_x(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            ToyGenerator::Smooth1d => rng.random_range(0.0..6.0),
            ToyGenerator::Step1d => rng.random_range(-1.0..1.0),
        }
    }

    /// Noise-free response.
    pub fn response(&self, x: f64) -> f64 {
        match self {
            ToyGenerator::Smooth1d => (2.0 * x).sin() + 0.4 * (5.0 * x).cos(),
            ToyGenerator::Step1d => {
                if x < 0.0 {
                    -1.0
                } else {
                    1.0
                }
            }
        }
    }
}

impl fmt::Display for ToyGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ToyGenerator {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "smooth1d" => Ok(ToyGenerator::Smooth1d),
            "step1d" => Ok(ToyGenerator::Step1d),
            other => Err(DataError::UnknownGenerator(other.to_string())),
        }
    }
}

/// A seeded 85/15 split with inputs and targets standardized by training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedDataset {
    pub x_train: DMatrix<f64>,
    pub y_train: DVector<f64>,
    pub x_test: DMatrix<f64>,
    pub y_test: DVector<f64>,
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
    pub seed: u64,
    /// File path or generator name.
    pub source: String,
}

impl StandardizedDataset {
    /// Shuffles `(x, y)` with `seed`, splits and standardizes.
    pub fn from_raw(x: DMatrix<f64>, y: DVector<f64>, seed: u64, source: impl Into<String>) -> Result<Self, DataError> {
        let n = x.nrows();
        if n == 0 {
            return Err(DataError::EmptyDataset);
        }
        if y.len() != n {
            return Err(DataError::InvalidArgument(format!(
                "{n} input rows but {} targets",
                y.len()
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        order.shuffle(&mut rng);

        let n_train = train_size(n);
        let (train_idx, test_idx) = order.split_at(n_train);

        let x_train_raw = x.select_rows(train_idx);
        let x_test_raw = x.select_rows(test_idx);
        let y_train_raw = y.select_rows(train_idx);
        let y_test_raw = y.select_rows(test_idx);

        let d = x.ncols();
        let mut x_mean = Vec::with_capacity(d);
        let mut x_scale = Vec::with_capacity(d);
        for j in 0..d {
            let (mu, s) = mean_and_scale(x_train_raw.column(j).iter().copied());
            x_mean.push(mu);
            x_scale.push(s);
        }
        let (y_mean, y_scale) = mean_and_scale(y_train_raw.iter().copied());

        let standardize_x = |m: &DMatrix<f64>| {
            let mut out = m.clone();
            for j in 0..d {
                out.column_mut(j).apply(|v| *v = (*v - x_mean[j]) / x_scale[j]);
            }
            out
        };
        let standardize_y = |v: &DVector<f64>| v.map(|t| (t - y_mean) / y_scale);

        Ok(Self {
            x_train: standardize_x(&x_train_raw),
            x_test: standardize_x(&x_test_raw),
            y_train: standardize_y(&y_train_raw),
            y_test: standardize_y(&y_test_raw),
            x_mean,
            x_scale,
            y_mean,
            y_scale,
            seed,
            source: source.into(),
        })
    }

    pub fn n_train(&self) -> usize {
        self.x_train.nrows()
    }

    pub fn n_test(&self) -> usize {
        self.x_test.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.x_train.ncols()
    }
}

/// `round(0.85 N)`.
pub fn train_size(n: usize) -> usize {
    ((TRAIN_FRACTION * n as f64).round() as usize).min(n)
}

/// Population mean and standard deviation; a constant column gets scale 1.
fn mean_and_scale(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let sd = var.sqrt();
    if sd > 1e-12 * mean.abs().max(1.0) {
        (mean, sd)
    } else {
        (mean, 1.0)
    }
}

fn split_fields(line: &str, comma: bool) -> Vec<&str> {
    if comma {
        line.split(',').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

fn parse_field(token: &str) -> Option<f64> {
    if token.is_empty() {
        return Some(f64::NAN);
    }
    token.parse::<f64>().ok()
}

/// Inputs, targets and the header names of the input columns.
pub type ParsedTable = (DMatrix<f64>, DVector<f64>, Vec<String>);

/// Parses delimited numeric text with a header row.
///
/// Rows containing NaN or empty fields are dropped.
pub fn parse_table(text: &str, target: &TargetColumn) -> Result<ParsedTable, DataError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (_, header) = lines.next().ok_or(DataError::EmptyDataset)?;
    let comma = header.contains(',');
    let names: Vec<String> = split_fields(header, comma).iter().map(|s| s.to_string()).collect();
    let width = names.len();
    if width < 2 {
        return Err(DataError::Parse {
            line: 1,
            message: "need at least one input column and one target column".into(),
        });
    }
    let target_idx = match target {
        TargetColumn::Last => width - 1,
        TargetColumn::Index(i) if *i < width => *i,
        TargetColumn::Index(i) => return Err(DataError::UnknownTarget(i.to_string())),
        TargetColumn::Name(name) => names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| DataError::UnknownTarget(name.clone()))?,
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut first_data_line = true;
    for (line_no, line) in lines {
        let fields = split_fields(line, comma);
        if fields.len() != width {
            return Err(DataError::Parse {
                line: line_no,
                message: format!("expected {width} fields, found {}", fields.len()),
            });
        }
        let mut row = Vec::with_capacity(width);
        for (j, tok) in fields.iter().enumerate() {
            match parse_field(tok) {
                Some(v) => row.push(v),
                None if first_data_line => {
                    return Err(DataError::NonNumericColumn {
                        column: names[j].clone(),
                        line: line_no,
                    })
                }
                None => {
                    return Err(DataError::Parse {
                        line: line_no,
                        message: format!("cannot parse `{tok}` in column `{}`", names[j]),
                    })
                }
            }
        }
        first_data_line = false;
        if row.iter().all(|v| v.is_finite()) {
            rows.push(row);
        }
    }
    if rows.is_empty() {
        return Err(DataError::EmptyDataset);
    }

    let n = rows.len();
    let d = width - 1;
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][if j < target_idx { j } else { j + 1 }]);
    let y = DVector::from_fn(n, |i, _| rows[i][target_idx]);
    let input_names = names
        .into_iter()
        .enumerate()
        .filter(|(j, _)| *j != target_idx)
        .map(|(_, n)| n)
        .collect();
    Ok((x, y, input_names))
}

/// Reads, shuffles, splits and standardizes a delimited text file.
pub fn load_dataset(path: &Path, target: &TargetColumn, seed: u64) -> Result<StandardizedDataset, DataError> {
    let text = std::fs::read_to_string(path)?;
    let (x, y, _) = parse_table(&text, target)?;
    StandardizedDataset::from_raw(x, y, seed, path.display().to_string())
}

/// Raw `(x, y)` draws from a toy generator, before splitting.
pub fn sample_toy(
    generator: ToyGenerator,
    n: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<(DMatrix<f64>, DVector<f64>), DataError> {
    if n < MIN_TOY_POINTS {
        return Err(DataError::InvalidArgument(format!(
            "toy datasets need at least {MIN_TOY_POINTS} points, got {n}"
        )));
    }
    if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
        return Err(DataError::InvalidArgument(format!(
            "noise_sd must be non-negative, got {noise_sd}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let xs: Vec<f64> = (0..n).map(|_| generator.sample_x(&mut rng)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| generator.response(x) + noise_sd * noise.sample(&mut rng))
        .collect();
    Ok((DMatrix::from_vec(n, 1, xs), DVector::from_vec(ys)))
}

/// Generates, splits and standardizes a toy dataset.
pub fn generate_toy(name: &str, n: usize, noise_sd: f64, seed: u64) -> Result<StandardizedDataset, DataError> {
    let generator: ToyGenerator = name.parse()?;
    let (x, y) = sample_toy(generator, n, noise_sd, seed)?;
    StandardizedDataset::from_raw(x, y, seed, generator.name())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twenty_rows_split_17_3() {
        let x = DMatrix::from_fn(20, 2, |i, j| (i * 3 + j) as f64);
        let y = DVector::from_fn(20, |i, _| i as f64);
        let ds = StandardizedDataset::from_raw(x, y, 0, "t").unwrap();
        assert_eq!((ds.n_train(), ds.n_test()), (17, 3));
    }

    #[test]
    fn training_columns_are_standardized() {
        let ds = generate_toy("smooth1d", 200, 0.1, 3).unwrap();
        let col = ds.x_train.column(0);
        let n = col.len() as f64;
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-8);
        let ym = ds.y_train.sum() / n;
        assert!(ym.abs() < 1e-10);
    }

    #[test]
    fn constant_target_is_centered_with_unit_scale() {
        let x = DMatrix::from_fn(12, 1, |i, _| i as f64);
        let y = DVector::from_element(12, 4.0);
        let ds = StandardizedDataset::from_raw(x, y, 1, "c").unwrap();
        assert_eq!(ds.y_scale, 1.0);
        assert!(ds.y_train.iter().chain(ds.y_test.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn noiseless_step_is_sign() {
        let (x, y) = sample_toy(ToyGenerator::Step1d, 50, 0.0, 9).unwrap();
        for i in 0..50 {
            assert!(y[i] == 1.0 || y[i] == -1.0);
            assert_eq!(y[i], if x[(i, 0)] < 0.0 { -1.0 } else { 1.0 });
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let a = generate_toy("smooth1d", 40, 0.1, 5).unwrap();
        let b = generate_toy("smooth1d", 40, 0.1, 5).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            generate_toy("snelson", 40, 0.1, 5),
            Err(DataError::UnknownGenerator(_))
        ));
    }

    #[test]
    fn parses_comma_and_whitespace() {
        let csv = "a,b,t\n1,2,3\n4,5,6\n";
        let (x, y, names) = parse_table(csv, &TargetColumn::Last).unwrap();
        assert_eq!(x, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 5.0]));
        assert_eq!(y, DVector::from_vec(vec![3.0, 6.0]));
        assert_eq!(names, vec!["a", "b"]);

        let ws = "a b t\n1 2 3\n4 5 6\n";
        let (x2, y2, _) = parse_table(ws, &TargetColumn::Name("a".into())).unwrap();
        assert_eq!(y2, DVector::from_vec(vec![1.0, 4.0]));
        assert_eq!(x2, DMatrix::from_row_slice(2, 2, &[2.0, 3.0, 5.0, 6.0]));
    }

    #[test]
    fn nan_rows_are_dropped() {
        let csv = "a,t\n1,2\nnan,3\n4,\n5,6\n";
        let (x, _, _) = parse_table(csv, &TargetColumn::Last).unwrap();
        assert_eq!(x.nrows(), 2);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match parse_table("a,t\n1,2\n3\n", &TargetColumn::Last) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse_table("a,t\nfoo,2\n", &TargetColumn::Last) {
            Err(DataError::NonNumericColumn { column, .. }) => assert_eq!(column, "a"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_table("a,t\n", &TargetColumn::Last),
            Err(DataError::EmptyDataset)
        ));
        assert!(matches!(
            parse_table("a,t\n1,2\n", &TargetColumn::Name("z".into())),
            Err(DataError::UnknownTarget(_))
        ));
    }
}
