//! Tabular classification datasets.
//!
//! Features are stored row-major in one flat buffer. Labels are always
//! dense ids in `0..n_labels`; the original label values from the source
//! file are kept in [`Dataset::label_values`].

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: no data rows")]
    Empty { path: String },
    #[error("{path}:{line}: column {column}: `{cell}` is not numeric")]
    NonNumeric {
        path: String,
        line: usize,
        column: usize,
        cell: String,
    },
    #[error("{path}:{line}: label `{cell}` is not an integer")]
    BadLabel {
        path: String,
        line: usize,
        cell: String,
    },
    #[error("{path}:{line}: expected {expected} columns, found {found}")]
    Ragged {
        path: String,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("label column {column} out of range for {n_columns} columns")]
    LabelColumn { column: usize, n_columns: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid split: {0}")]
    Split(String),
}

/// Which CSV column holds the class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelColumn {
    Index(usize),
    #[default]
    Last,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    features: Vec<f64>,
    labels: Vec<usize>,
    n_features: usize,
    n_labels: usize,
    /// Original label value for each dense label id.
    pub label_values: Vec<i64>,
}

impl Dataset {
    /// Builds a dataset from in-memory rows. Labels must already be dense.
    pub fn from_rows(
        name: impl Into<String>,
        rows: &[Vec<f64>],
        labels: Vec<usize>,
        n_labels: usize,
    ) -> Result<Self, DatasetError> {
        if rows.is_empty() {
            return Err(DatasetError::Invalid("n_samples must be at least 1".into()));
        }
        if rows.len() != labels.len() {
            return Err(DatasetError::Invalid(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let n_features = rows[0].len();
        if n_features == 0 {
            return Err(DatasetError::Invalid("rows have no features".into()));
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n_features) {
            return Err(DatasetError::Invalid(format!(
                "row {i} has {} features, expected {n_features}",
                r.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_labels) {
            return Err(DatasetError::Invalid(format!(
                "label {l} outside 0..{n_labels}"
            )));
        }
        Ok(Self {
            name: name.into(),
            features: rows.iter().flatten().copied().collect(),
            labels,
            n_features,
            n_labels,
            label_values: (0..n_labels as i64).collect(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.features.chunks_exact(self.n_features)
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            name: name.into(),
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_features: self.n_features,
            n_labels: self.n_labels,
            label_values: self.label_values.clone(),
        }
    }
}

/// Loads a comma-separated file with one integer label column.
///
/// Labels are remapped to dense ids in ascending order of their original
/// values. A dataset with a single class loads with a warning.
pub fn load_csv(
    path: &Path,
    label_column: LabelColumn,
    has_header: bool,
) -> Result<Dataset, DatasetError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: shown.clone(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| shown.clone());

    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    if has_header {
        lines.next();
    }

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    let mut n_columns = None;
    let mut label_idx = 0;
    for (i, line) in lines {
        let line_no = i + 1;
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let expected = *n_columns.get_or_insert_with(|| cells.len());
        if cells.len() != expected {
            return Err(DatasetError::Ragged {
                path: shown,
                line: line_no,
                expected,
                found: cells.len(),
            });
        }
        if raw_labels.is_empty() {
            label_idx = match label_column {
                LabelColumn::Index(c) if c < expected => c,
                LabelColumn::Index(c) => {
                    return Err(DatasetError::LabelColumn {
                        column: c,
                        n_columns: expected,
                    })
                }
                LabelColumn::Last => expected - 1,
            };
            if expected < 2 {
                return Err(DatasetError::Invalid(
                    "need at least one feature column besides the label".into(),
                ));
            }
        }
        for (c, cell) in cells.iter().enumerate() {
            if c == label_idx {
                raw_labels.push(parse_label(cell).ok_or_else(|| DatasetError::BadLabel {
                    path: shown.clone(),
                    line: line_no,
                    cell: cell.to_string(),
                })?);
            } else {
                let v: f64 = cell
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| DatasetError::NonNumeric {
                        path: shown.clone(),
                        line: line_no,
                        column: c,
                        cell: cell.to_string(),
                    })?;
                features.push(v);
            }
        }
    }
    let Some(n_columns) = n_columns else {
        return Err(DatasetError::Empty { path: shown });
    };

    let mut label_values = raw_labels.clone();
    label_values.sort_unstable();
    label_values.dedup();
    if label_values.len() == 1 {
        log::warn!("{shown}: only one class ({}) present", label_values[0]);
    }
    let labels = raw_labels
        .iter()
        .map(|v| label_values.binary_search(v).expect("value was collected"))
        .collect();

    Ok(Dataset {
        name,
        features,
        labels,
        n_features: n_columns - 1,
        n_labels: label_values.len(),
        label_values,
    })
}

fn parse_label(cell: &str) -> Option<i64> {
    if let Ok(v) = cell.parse::<i64>() {
        return Some(v);
    }
    let v: f64 = cell.parse().ok()?;
    (v.is_finite() && v.fract() == 0.0 && v.abs() < 9.0e15).then_some(v as i64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.6,
            validation_fraction: 0.3,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let fr = [
            self.train_fraction,
            self.validation_fraction,
            self.test_fraction,
        ];
        if fr.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(DatasetError::Split(format!(
                "fractions must lie in (0,1), got {fr:?}"
            )));
        }
        let sum: f64 = fr.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::Split(format!(
                "fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    /// Partition sizes for `n` samples: floors for validation and test,
    /// the remainder goes to train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        // the epsilon absorbs products like 10 * 0.3 landing a hair under 3
        let floor = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
        let validation = floor(self.validation_fraction);
        let test = floor(self.test_fraction);
        (n.saturating_sub(validation + test), validation, test)
    }
}

/// Seeded shuffle followed by a train/validation/test cut.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset), DatasetError> {
    spec.validate()?;
    let n = ds.n_samples();
    let (n_train, n_val, n_test) = spec.sizes(n);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(DatasetError::Split(format!(
            "{n} samples give empty partition (train {n_train}, validation {n_val}, test {n_test})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let (train, rest) = order.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok((
        ds.subset(format!("{}/train", ds.name), train),
        ds.subset(format!("{}/validation", ds.name), val),
        ds.subset(format!("{}/test", ds.name), test),
    ))
}

/// Per-column affine map onto `[0, 1]`, fitted on one dataset and reused
/// on others. Values outside the fitted range are clipped.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(ds: &Dataset) -> Self {
        let mut min = vec![f64::INFINITY; ds.n_features()];
        let mut max = vec![f64::NEG_INFINITY; ds.n_features()];
        for row in ds.rows() {
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Self { min, max }
    }

    pub fn scale(&self, column: usize, v: f64) -> f64 {
        let (lo, hi) = (self.min[column], self.max[column]);
        if hi > lo {
            ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    pub fn transform(&self, ds: &Dataset) -> Dataset {
        let mut out = ds.clone();
        let nf = out.n_features;
        for (i, v) in out.features.iter_mut().enumerate() {
            *v = self.scale(i % nf, *v);
        }
        out
    }
}

/// Fits a scaler on `ds` and applies it; the scaler is returned so
/// validation and test data can reuse the training statistics.
pub fn minmax_normalize(ds: &Dataset) -> (Dataset, MinMaxScaler) {
    let scaler = MinMaxScaler::fit(ds);
    (scaler.transform(ds), scaler)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn toy(n: usize) -> Dataset {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let labels = (0..n).map(|i| i % 2).collect();
        Dataset::from_rows("toy", &rows, labels, 2).unwrap()
    }

    #[test]
    fn load_remaps_labels() {
        let f = write_tmp("a,b,c,y\n1,2,3,2\n4,5,6,2\n7,8,9,7\n1,1,1,7\n");
        let ds = load_csv(f.path(), LabelColumn::Last, true).unwrap();
        assert_eq!(ds.n_features(), 3);
        assert_eq!(ds.n_labels(), 2);
        assert_eq!(ds.labels(), &[0, 0, 1, 1]);
        assert_eq!(ds.label_values, vec![2, 7]);
        assert_eq!(ds.row(2), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn load_label_by_index() {
        let f = write_tmp("5,0.5,1.5\n3,2.5,3.5\n");
        let ds = load_csv(f.path(), LabelColumn::Index(0), false).unwrap();
        assert_eq!(ds.labels(), &[1, 0]);
        assert_eq!(ds.row(0), &[0.5, 1.5]);
    }

    #[test]
    fn load_penbase_shape() {
        let mut s = String::new();
        for i in 0..30 {
            let row: Vec<String> = (0..16).map(|j| ((i * 7 + j) % 101).to_string()).collect();
            s.push_str(&format!("{},{}\n", row.join(","), i % 10));
        }
        let ds = load_csv(write_tmp(&s).path(), LabelColumn::Last, false).unwrap();
        assert_eq!((ds.n_features(), ds.n_labels()), (16, 10));
    }

    #[test]
    fn load_mnist_shape() {
        let mut s = String::new();
        for i in 0..20 {
            let row: Vec<String> = (0..784).map(|j| ((i + j) % 256).to_string()).collect();
            s.push_str(&format!("{},{}\n", row.join(","), i % 10));
        }
        let ds = load_csv(write_tmp(&s).path(), LabelColumn::Last, false).unwrap();
        assert_eq!((ds.n_features(), ds.n_labels()), (784, 10));
    }

    #[test]
    fn load_errors() {
        assert!(matches!(
            load_csv(Path::new("/nonexistent/x.csv"), LabelColumn::Last, false),
            Err(DatasetError::Io { .. })
        ));
        assert!(matches!(
            load_csv(write_tmp("").path(), LabelColumn::Last, false),
            Err(DatasetError::Empty { .. })
        ));
        assert!(matches!(
            load_csv(write_tmp("h\n").path(), LabelColumn::Last, true),
            Err(DatasetError::Empty { .. })
        ));
        assert!(matches!(
            load_csv(write_tmp("1,x,0\n").path(), LabelColumn::Last, false),
            Err(DatasetError::NonNumeric { line: 1, column: 1, .. })
        ));
        assert!(matches!(
            load_csv(write_tmp("1,2,0.5\n").path(), LabelColumn::Last, false),
            Err(DatasetError::BadLabel { .. })
        ));
        assert!(matches!(
            load_csv(write_tmp("1,2,0\n1,0\n").path(), LabelColumn::Last, false),
            Err(DatasetError::Ragged { line: 2, .. })
        ));
        assert!(matches!(
            load_csv(write_tmp("1,2,0\n").path(), LabelColumn::Index(5), false),
            Err(DatasetError::LabelColumn { .. })
        ));
    }

    #[test]
    fn single_class_loads() {
        let ds = load_csv(write_tmp("1,3\n2,3\n").path(), LabelColumn::Last, false).unwrap();
        assert_eq!(ds.n_labels(), 1);
    }

    #[test]
    fn from_rows_checks_invariants() {
        assert!(Dataset::from_rows("x", &[], vec![], 2).is_err());
        assert!(Dataset::from_rows("x", &[vec![1.0], vec![1.0, 2.0]], vec![0, 0], 2).is_err());
        assert!(Dataset::from_rows("x", &[vec![1.0]], vec![2], 2).is_err());
    }

    #[test]
    fn split_sizes() {
        let spec = SplitSpec {
            seed: 1,
            ..SplitSpec::default()
        };
        let (a, b, c) = split(&toy(10), &spec).unwrap();
        assert_eq!((a.n_samples(), b.n_samples(), c.n_samples()), (6, 3, 1));
        assert_eq!(spec.sizes(7), (5, 2, 0));
        assert!(matches!(split(&toy(7), &spec), Err(DatasetError::Split(_))));
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let bad = SplitSpec {
            train_fraction: 0.5,
            validation_fraction: 0.3,
            test_fraction: 0.1,
            seed: 0,
        };
        assert!(split(&toy(100), &bad).is_err());
        let zero = SplitSpec {
            train_fraction: 1.0,
            validation_fraction: 0.0,
            test_fraction: 0.0,
            seed: 0,
        };
        assert!(split(&toy(100), &zero).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        let spec = SplitSpec {
            seed: 9,
            ..SplitSpec::default()
        };
        let ds = toy(50);
        assert_eq!(split(&ds, &spec).unwrap(), split(&ds, &spec).unwrap());
        let other = SplitSpec { seed: 10, ..spec };
        assert_ne!(split(&ds, &spec).unwrap().0, split(&ds, &other).unwrap().0);
    }

    #[test]
    fn minmax_examples() {
        let ds = Dataset::from_rows(
            "m",
            &[vec![2.0, 5.0], vec![4.0, 5.0], vec![6.0, 5.0]],
            vec![0, 1, 0],
            2,
        )
        .unwrap();
        let (n, scaler) = minmax_normalize(&ds);
        let col0: Vec<f64> = n.rows().map(|r| r[0]).collect();
        let col1: Vec<f64> = n.rows().map(|r| r[1]).collect();
        assert_eq!(col0, vec![0.0, 0.5, 1.0]);
        assert_eq!(col1, vec![0.0, 0.0, 0.0]);
        assert_eq!(scaler.scale(0, 1.0), 0.0);
        assert_eq!(scaler.scale(0, 9.0), 1.0);
    }
}
