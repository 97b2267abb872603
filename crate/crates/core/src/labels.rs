//! Label universe, verbalizer, emotion hierarchy and label–label correlation.
//!
//! The canonical label order of a [`LabelSchema`] fixes the indexing of every
//! vector and matrix in the crate.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

pub const DEFAULT_MASK_TOKEN: &str = "[MASK]";
/// Lower clamp applied to correlations when they become contrastive weights.
pub const DEFAULT_EPSILON: f64 = 0.05;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("degenerate input: {0} has zero variance")]
    DegenerateInput(String),
    #[error("need at least 2 observations, got {0}")]
    TooFewObservations(usize),
    #[error("epsilon must lie in (0, 1), got {0}")]
    BadEpsilon(f64),
    #[error("schema invariant violated: {0}")]
    InvariantViolation(String),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("column mismatch: {0}")]
    ColumnMismatch(String),
    #[error("{path}: parse error at line {line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = LabelError> = std::result::Result<T, E>;

/// Three-level emotion path for one label, coarse to fine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionPath {
    pub basic: String,
    pub secondary: String,
    pub tertiary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSchema {
    labels: Vec<String>,
    verbalizer: Vec<String>,
    hierarchy: Option<Vec<EmotionPath>>,
    mask_token: String,
}

impl LabelSchema {
    /// `entries` are `(label, verbalizer word)` pairs in canonical order.
    pub fn new<S: Into<String>>(entries: Vec<(S, S)>, hierarchy: Option<Vec<EmotionPath>>) -> Result<Self> {
        let (labels, verbalizer): (Vec<String>, Vec<String>) =
            entries.into_iter().map(|(l, v)| (l.into(), v.into())).unzip();
        let schema = Self { labels, verbalizer, hierarchy, mask_token: DEFAULT_MASK_TOKEN.to_owned() };
        schema.validate()?;
        Ok(schema)
    }

    pub fn with_mask_token(mut self, token: impl Into<String>) -> Result<Self> {
        self.mask_token = token.into();
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabelError::InvariantViolation(m));
        if self.labels.len() < 2 {
            return bad(format!("need at least 2 labels, got {}", self.labels.len()));
        }
        let mut seen = HashSet::new();
        for (label, word) in self.labels.iter().zip(&self.verbalizer) {
            if label.trim().is_empty() {
                return bad("empty label name".into());
            }
            if !seen.insert(label.as_str()) {
                return bad(format!("duplicate label `{label}`"));
            }
            if word.trim().is_empty() {
                return bad(format!("missing verbalizer word for `{label}`"));
            }
        }
        if let Some(h) = &self.hierarchy {
            if h.len() != self.labels.len() {
                return bad("hierarchy must cover every label".into());
            }
            for (label, p) in self.labels.iter().zip(h) {
                if p.basic.is_empty() || p.secondary.is_empty() || p.tertiary.is_empty() {
                    return bad(format!("incomplete hierarchy entry for `{label}`"));
                }
            }
        }
        if self.mask_token.is_empty() {
            return bad("empty mask token".into());
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn mask_token(&self) -> &str {
        &self.mask_token
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| LabelError::UnknownLabel(label.to_owned()))
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn verbalizer_word(&self, index: usize) -> &str {
        &self.verbalizer[index]
    }

    pub fn verbalizer_words(&self) -> &[String] {
        &self.verbalizer
    }

    pub fn hierarchy(&self) -> Option<&[EmotionPath]> {
        self.hierarchy.as_deref()
    }

    pub fn path_of(&self, index: usize) -> Option<&EmotionPath> {
        self.hierarchy.as_ref().map(|h| &h[index])
    }

    /// Replaces the hierarchy with one loaded from a `label,basic,secondary,tertiary` file.
    pub fn attach_hierarchy(mut self, mapping: HashMap<String, EmotionPath>) -> Result<Self> {
        let mut paths = Vec::with_capacity(self.labels.len());
        for label in &self.labels {
            match mapping.get(label) {
                Some(p) => paths.push(p.clone()),
                None => {
                    return Err(LabelError::InvariantViolation(format!(
                        "hierarchy mapping has no entry for `{label}`"
                    )))
                }
            }
        }
        self.hierarchy = Some(paths);
        self.validate()?;
        Ok(self)
    }
}

#[derive(Debug, Deserialize)]
struct SchemaRow {
    label: String,
    verbalizer_word: String,
    #[serde(default)]
    basic: Option<String>,
    #[serde(default)]
    secondary: Option<String>,
    #[serde(default)]
    tertiary: Option<String>,
}

fn non_empty(s: Option<String>) -> Option<String> {
    s.map(|s| s.trim().to_owned()).filter(|s| !s.is_empty())
}

/// Reads a schema file with header `label,verbalizer_word[,basic,secondary,tertiary]`.
///
/// Hierarchy columns are either empty on every row (no hierarchy) or filled on
/// every row.
pub fn load_schema(path: impl AsRef<Path>) -> Result<LabelSchema> {
    let path = path.as_ref();
    let mut reader = csv_reader(path)?;
    let mut entries = Vec::new();
    let mut paths = Vec::new();
    for record in reader.deserialize::<SchemaRow>() {
        let row = record.map_err(|e| csv_parse_error(path, e))?;
        let levels = [non_empty(row.basic), non_empty(row.secondary), non_empty(row.tertiary)];
        paths.push(levels);
        entries.push((row.label.trim().to_owned(), row.verbalizer_word.trim().to_owned()));
    }
    let any = paths.iter().any(|p| p.iter().any(Option::is_some));
    let hierarchy = if any {
        let mut out = Vec::with_capacity(paths.len());
        for ([b, s, t], (label, _)) in paths.into_iter().zip(&entries) {
            match (b, s, t) {
                (Some(basic), Some(secondary), Some(tertiary)) => {
                    out.push(EmotionPath { basic, secondary, tertiary })
                }
                _ => {
                    return Err(LabelError::InvariantViolation(format!(
                        "incomplete hierarchy entry for `{label}`"
                    )))
                }
            }
        }
        Some(out)
    } else {
        None
    };
    LabelSchema::new(entries, hierarchy)
}

/// Reads a `label,basic,secondary,tertiary` mapping file.
pub fn load_hierarchy(path: impl AsRef<Path>) -> Result<HashMap<String, EmotionPath>> {
    #[derive(Deserialize)]
    struct Row {
        label: String,
        basic: String,
        secondary: String,
        tertiary: String,
    }
    let path = path.as_ref();
    let mut reader = csv_reader(path)?;
    let mut out = HashMap::new();
    for record in reader.deserialize::<Row>() {
        let r = record.map_err(|e| csv_parse_error(path, e))?;
        let p = EmotionPath {
            basic: r.basic.trim().to_owned(),
            secondary: r.secondary.trim().to_owned(),
            tertiary: r.tertiary.trim().to_owned(),
        };
        if out.insert(r.label.trim().to_owned(), p).is_some() {
            return Err(LabelError::InvariantViolation(format!("duplicate hierarchy row for `{}`", r.label)));
        }
    }
    Ok(out)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LabelError::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.len() < 2 {
        return Err(LabelError::TooFewObservations(a.len()));
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut cov, mut var_a, mut var_b) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 {
        return Err(LabelError::DegenerateInput("first vector".into()));
    }
    if var_b == 0.0 {
        return Err(LabelError::DegenerateInput("second vector".into()));
    }
    Ok((cov / (var_a.sqrt() * var_b.sqrt())).clamp(-1.0, 1.0))
}

/// Symmetric label–label Pearson matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    labels: Vec<String>,
    rho: Matrix,
}

impl CorrelationMatrix {
    /// Validates a precomputed matrix. Symmetry must hold exactly.
    pub fn from_matrix(labels: Vec<String>, rho: Matrix) -> Result<Self> {
        let n = labels.len();
        if rho.shape() != (n, n) {
            return Err(LabelError::ColumnMismatch(format!(
                "correlation matrix is {}x{} but there are {n} labels",
                rho.rows(),
                rho.cols()
            )));
        }
        if !rho.is_symmetric() {
            return Err(LabelError::InvariantViolation("correlation matrix is not symmetric".into()));
        }
        for i in 0..n {
            if rho[(i, i)] != 1.0 {
                return Err(LabelError::InvariantViolation(format!("rho[{i}][{i}] != 1")));
            }
            for j in 0..n {
                let v = rho[(i, j)];
                if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&v) {
                    return Err(LabelError::InvariantViolation(format!("rho[{i}][{j}] = {v} outside [-1, 1]")));
                }
            }
        }
        Ok(Self { labels, rho })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn matrix(&self) -> &Matrix {
        &self.rho
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rho[(i, j)]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_table(path, &self.labels, &self.rho)
    }

    /// Loads a matrix previously written by [`CorrelationMatrix::save`], reordered to `schema`.
    pub fn load(path: impl AsRef<Path>, schema: &LabelSchema) -> Result<Self> {
        let (header, m) = read_table(path)?;
        let order = canonical_order(&header, schema)?;
        let n = order.len();
        if m.rows() != n {
            return Err(LabelError::ColumnMismatch(format!("expected {n} rows, found {}", m.rows())));
        }
        let mut rho = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                rho[(i, j)] = m[(order[i], order[j])];
            }
        }
        Self::from_matrix(schema.labels().to_vec(), rho)
    }
}

/// Pearson correlation between every pair of columns of `judgments`.
///
/// Only the upper triangle is computed; the lower one is mirrored so symmetry
/// is exact.
pub fn estimate_correlation(judgments: &Matrix, schema: &LabelSchema) -> Result<CorrelationMatrix> {
    let n = schema.len();
    if judgments.cols() != n {
        return Err(LabelError::ColumnMismatch(format!(
            "judgments have {} columns, schema has {n} labels",
            judgments.cols()
        )));
    }
    if judgments.rows() < 2 {
        return Err(LabelError::TooFewObservations(judgments.rows()));
    }
    let columns: Vec<Vec<f64>> = (0..n).map(|j| judgments.column(j)).collect();
    for (j, c) in columns.iter().enumerate() {
        if c.iter().all(|&v| v == c[0]) {
            return Err(LabelError::DegenerateInput(format!("label `{}`", schema.label(j))));
        }
    }
    let mut rho = Matrix::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let r = pearson(&columns[i], &columns[j]).map_err(|e| match e {
                LabelError::DegenerateInput(_) => {
                    LabelError::DegenerateInput(format!("label `{}`", schema.label(i)))
                }
                other => other,
            })?;
            rho[(i, j)] = r;
            rho[(j, i)] = r;
        }
    }
    CorrelationMatrix::from_matrix(schema.labels().to_vec(), rho)
}

/// Positive contrastive weights `alpha[i][j]` in `[epsilon, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    labels: Vec<String>,
    alpha: Matrix,
    epsilon: f64,
}

impl WeightMatrix {
    /// All-ones weights: the unweighted contrastive loss.
    pub fn uniform(labels: Vec<String>) -> Self {
        let n = labels.len();
        Self { labels, alpha: Matrix::from_vec(n, n, vec![1.0; n * n]), epsilon: 1.0 }
    }

    /// Validates an explicit weight matrix (symmetric, diagonal 1, entries in `[epsilon, 1]`).
    pub fn from_matrix(labels: Vec<String>, alpha: Matrix, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon).or_else(|e| if epsilon == 1.0 { Ok(()) } else { Err(e) })?;
        let n = labels.len();
        if alpha.shape() != (n, n) {
            return Err(LabelError::ColumnMismatch(format!("weight matrix must be {n}x{n}")));
        }
        if !alpha.is_symmetric() {
            return Err(LabelError::InvariantViolation("weight matrix is not symmetric".into()));
        }
        for i in 0..n {
            if alpha[(i, i)] != 1.0 {
                return Err(LabelError::InvariantViolation(format!("alpha[{i}][{i}] != 1")));
            }
            for j in 0..n {
                let v = alpha[(i, j)];
                if !(epsilon..=1.0).contains(&v) {
                    return Err(LabelError::InvariantViolation(format!(
                        "alpha[{i}][{j}] = {v} outside [{epsilon}, 1]"
                    )));
                }
            }
        }
        Ok(Self { labels, alpha, epsilon })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.alpha[(i, j)]
    }

    pub fn matrix(&self) -> &Matrix {
        &self.alpha
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_table(path, &self.labels, &self.alpha)
    }

    /// Loads a matrix written by [`WeightMatrix::save`], reordered to `schema`
    /// and validated against `epsilon`.
    pub fn load(path: impl AsRef<Path>, schema: &LabelSchema, epsilon: f64) -> Result<Self> {
        let (header, m) = read_table(path)?;
        let order = canonical_order(&header, schema)?;
        let n = order.len();
        if m.rows() != n {
            return Err(LabelError::ColumnMismatch(format!("expected {n} rows, found {}", m.rows())));
        }
        let mut alpha = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                alpha[(i, j)] = m[(order[i], order[j])];
            }
        }
        Self::from_matrix(schema.labels().to_vec(), alpha, epsilon)
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon < 1.0 {
        Ok(())
    } else {
        Err(LabelError::BadEpsilon(epsilon))
    }
}

/// `alpha = max(rho, epsilon)` off the diagonal, `1` on it.
pub fn correlation_to_weights(rho: &CorrelationMatrix, epsilon: f64) -> Result<WeightMatrix> {
    check_epsilon(epsilon)?;
    let n = rho.len();
    let mut alpha = Matrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                alpha[(i, j)] = rho.get(i, j).max(epsilon).min(1.0);
            }
        }
    }
    Ok(WeightMatrix { labels: rho.labels().to_vec(), alpha, epsilon })
}

/// Maps each schema label to its column in `header`.
pub fn canonical_order(header: &[String], schema: &LabelSchema) -> Result<Vec<usize>> {
    if header.len() != schema.len() {
        return Err(LabelError::ColumnMismatch(format!(
            "header has {} columns, schema has {} labels",
            header.len(),
            schema.len()
        )));
    }
    let mut seen = HashSet::new();
    for h in header {
        if !seen.insert(h.as_str()) {
            return Err(LabelError::ColumnMismatch(format!("duplicate column `{h}`")));
        }
    }
    schema
        .labels()
        .iter()
        .map(|l| {
            header
                .iter()
                .position(|h| h == l)
                .ok_or_else(|| LabelError::ColumnMismatch(format!("missing column for label `{l}`")))
        })
        .collect()
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|source| LabelError::Io { path: path.to_owned(), source })?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn csv_parse_error(path: &Path, e: csv::Error) -> LabelError {
    let line = e.position().map_or(0, |p| p.line());
    LabelError::Parse { path: path.to_owned(), line, message: e.to_string() }
}

/// Writes a comma-separated numeric table with a header row. Values use the
/// shortest representation that parses back to the identical `f64`.
pub fn write_table(path: impl AsRef<Path>, header: &[String], m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| LabelError::Io { path: path.to_owned(), source })
}

/// Reads a table written by [`write_table`] (or any comma-separated numeric
/// table with a header row).
pub fn read_table(path: impl AsRef<Path>) -> Result<(Vec<String>, Matrix)> {
    let path = path.as_ref();
    let mut reader = csv_reader(path)?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_parse_error(path, e))?
        .iter()
        .map(|h| h.trim().to_owned())
        .collect();
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_parse_error(path, e))?;
        let line = record.position().map_or(idx as u64 + 2, |p| p.line());
        if record.len() != header.len() {
            return Err(LabelError::Parse {
                path: path.to_owned(),
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let mut row = Vec::with_capacity(record.len());
        for field in record.iter() {
            let v: f64 = field.trim().parse().map_err(|_| LabelError::Parse {
                path: path.to_owned(),
                line,
                message: format!("not a number: `{field}`"),
            })?;
            if !v.is_finite() {
                return Err(LabelError::Parse { path: path.to_owned(), line, message: "non-finite value".into() });
            }
            row.push(v);
        }
        rows.push(row);
    }
    let m = Matrix::from_rows(&rows).unwrap_or_else(|| Matrix::zeros(0, header.len()));
    Ok((header, m))
}
