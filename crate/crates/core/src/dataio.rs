//! Corpus loading, the K-shot split protocol and rater-judgment tables.
//!
//! Corpus files are delimiter-separated with columns `text`, `labels`, `id`
//! (`.tsv` is tab-separated, anything else comma-separated). A header row is
//! optional. Labels are schema names or 0-based schema indices; several
//! labels are separated by commas, as in the raw GoEmotions release.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{self, LabelError, LabelSchema};
use crate::matrix::Matrix;
use crate::seeds;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: parse error at line {line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },
    #[error("{path}: line {line}: unknown label `{value}`")]
    UnknownLabel { path: PathBuf, line: u64, value: String },
    #[error("class `{class}` has {available} examples, need {needed}")]
    InsufficientExamples { class: String, available: usize, needed: usize },
    #[error("{what}: pool has {available} examples left, need {needed}")]
    InsufficientPool { what: &'static str, available: usize, needed: usize },
    #[error("duplicate source id `{0}`")]
    DuplicateId(String),
    #[error("source id `{0}` not found in the corpus")]
    MissingId(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid split protocol: {0}")]
    BadProtocol(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Label(#[from] LabelError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub label: String,
    pub source_id: String,
}

/// What to do with rows carrying more than one label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MultiLabelPolicy {
    /// Drop them.
    #[default]
    SingleOnly,
    /// One example per label, with source id `"{id}#{label}"`.
    Expand,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_owned(), source }
}

fn is_header(record: &csv::StringRecord) -> bool {
    let f: Vec<String> = record.iter().map(|s| s.trim().to_ascii_lowercase()).collect();
    f.len() == 3 && f[0] == "text" && (f[1] == "labels" || f[1] == "label") && (f[2] == "id" || f[2] == "source_id")
}

fn parse_label(raw: &str, schema: &LabelSchema) -> Option<usize> {
    let raw = raw.trim();
    if let Ok(i) = schema.index_of(raw) {
        return Some(i);
    }
    raw.parse::<usize>().ok().filter(|&i| i < schema.len())
}

/// Loads a corpus in file order. Empty texts, unknown labels and repeated ids
/// are errors.
pub fn load_corpus(path: impl AsRef<Path>, schema: &LabelSchema, policy: MultiLabelPolicy) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let delimiter = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("tsv")) { b'\t' } else { b',' };
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .quoting(delimiter == b',')
        .flexible(true)
        .from_reader(file);
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Parse {
            path: path.to_owned(),
            line: e.position().map_or(idx as u64 + 1, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(idx as u64 + 1, |p| p.line());
        if idx == 0 && is_header(&record) {
            continue;
        }
        let parse = |message: String| DataError::Parse { path: path.to_owned(), line, message };
        if record.len() != 3 {
            return Err(parse(format!("expected 3 fields (text, labels, id), found {}", record.len())));
        }
        let text = record[0].trim();
        let id = record[2].trim();
        if text.is_empty() {
            return Err(parse("empty text".into()));
        }
        if id.is_empty() {
            return Err(parse("empty id".into()));
        }
        let mut row_labels = Vec::new();
        for raw in record[1].split(',') {
            let i = parse_label(raw, schema).ok_or_else(|| DataError::UnknownLabel {
                path: path.to_owned(),
                line,
                value: raw.trim().to_owned(),
            })?;
            if !row_labels.contains(&i) {
                row_labels.push(i);
            }
        }
        if !ids.insert(id.to_owned()) {
            return Err(DataError::DuplicateId(id.to_owned()));
        }
        match (row_labels.as_slice(), policy) {
            ([single], _) => out.push(Example {
                text: text.to_owned(),
                label: schema.label(*single).to_owned(),
                source_id: id.to_owned(),
            }),
            (_, MultiLabelPolicy::SingleOnly) => {}
            (many, MultiLabelPolicy::Expand) => {
                for &i in many {
                    out.push(Example {
                        text: text.to_owned(),
                        label: schema.label(i).to_owned(),
                        source_id: format!("{id}#{}", schema.label(i)),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Split sizes. The defaults are 500 validation examples and a 5% test sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitProtocol {
    pub validation_size: usize,
    pub test_fraction: f64,
}

impl Default for SplitProtocol {
    fn default() -> Self {
        Self { validation_size: 500, test_fraction: 0.05 }
    }
}

impl SplitProtocol {
    pub fn test_size(&self, pool: usize) -> usize {
        // the tiny slack keeps e.g. 0.29 * 100 from flooring to 28
        ((self.test_fraction * pool as f64) + 1e-9).floor() as usize
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return Err(DataError::BadProtocol(format!("test_fraction {} not in [0, 1]", self.test_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSplit {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub k: usize,
    pub seed: u64,
}

/// Persisted form of a split: member ids only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitArtifact {
    pub k: usize,
    pub seed: u64,
    /// Seed actually fed to the sampler.
    pub split_seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitArtifact {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|source| DataError::Json { path: path.to_owned(), source })?;
        text.push('\n');
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| DataError::Json { path: path.to_owned(), source })
    }

    /// Rebuilds the split from the pools it was drawn from.
    pub fn resolve(&self, train_pool: &[Example], test_pool: &[Example]) -> Result<FewShotSplit> {
        let pick = |ids: &[String], pool: &[Example]| -> Result<Vec<Example>> {
            let index: std::collections::HashMap<&str, &Example> =
                pool.iter().map(|e| (e.source_id.as_str(), e)).collect();
            ids.iter()
                .map(|id| index.get(id.as_str()).map(|e| (*e).clone()).ok_or_else(|| DataError::MissingId(id.clone())))
                .collect()
        };
        Ok(FewShotSplit {
            train: pick(&self.train, train_pool)?,
            validation: pick(&self.validation, train_pool)?,
            test: pick(&self.test, test_pool)?,
            k: self.k,
            seed: self.seed,
        })
    }
}

impl FewShotSplit {
    pub fn artifact(&self) -> SplitArtifact {
        let ids = |v: &[Example]| v.iter().map(|e| e.source_id.clone()).collect();
        SplitArtifact {
            k: self.k,
            seed: self.seed,
            split_seed: seeds::derive(self.seed, "split"),
            train: ids(&self.train),
            validation: ids(&self.validation),
            test: ids(&self.test),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.artifact().save(path)
    }

    /// Per-class train counts in schema order.
    pub fn train_counts(&self, schema: &LabelSchema) -> Vec<(String, usize)> {
        schema
            .labels()
            .iter()
            .map(|l| (l.clone(), self.train.iter().filter(|e| &e.label == l).count()))
            .collect()
    }
}

/// Indices of `pool` sorted by source id, so sampling does not depend on file order.
fn sorted_by_id(pool: &[Example]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.sort_by(|&a, &b| pool[a].source_id.cmp(&pool[b].source_id));
    idx
}

fn draw(rng: &mut seeds::Rng, from: &[usize], n: usize) -> Vec<usize> {
    let mut ranks = rand::seq::index::sample(rng, from.len(), n).into_vec();
    ranks.sort_unstable();
    ranks.into_iter().map(|r| from[r]).collect()
}

/// Draws `k` examples per class present in `train_pool`, then the validation
/// set from the remainder, then a uniform sample of `test_pool`.
///
/// Members of each list are in source-id order (train grouped by class in
/// schema order). Uses ChaCha20 seeded with `seeds::derive(seed, "split")`.
pub fn sample_few_shot(
    train_pool: &[Example],
    test_pool: &[Example],
    k: usize,
    seed: u64,
    schema: &LabelSchema,
    protocol: &SplitProtocol,
) -> Result<FewShotSplit> {
    protocol.validate()?;
    if k == 0 {
        return Err(DataError::BadProtocol("k must be at least 1".into()));
    }
    for e in train_pool.iter().chain(test_pool) {
        schema.index_of(&e.label)?;
    }
    let mut rng = seeds::named_rng(seed, "split");
    let order = sorted_by_id(train_pool);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); schema.len()];
    for &i in &order {
        by_class[schema.index_of(&train_pool[i].label)?].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < k {
            return Err(DataError::InsufficientExamples {
                class: schema.label(c).to_owned(),
                available: members.len(),
                needed: k,
            });
        }
    }
    let present = by_class.iter().filter(|m| !m.is_empty()).count();
    if train_pool.len() < present * k + protocol.validation_size {
        return Err(DataError::InsufficientPool {
            what: "train pool",
            available: train_pool.len(),
            needed: present * k + protocol.validation_size,
        });
    }

    let mut taken = vec![false; train_pool.len()];
    let mut train = Vec::with_capacity(present * k);
    for members in by_class.iter().filter(|m| !m.is_empty()) {
        for i in draw(&mut rng, members, k) {
            taken[i] = true;
            train.push(train_pool[i].clone());
        }
    }
    let rest: Vec<usize> = order.iter().copied().filter(|&i| !taken[i]).collect();
    let validation: Vec<Example> =
        draw(&mut rng, &rest, protocol.validation_size).into_iter().map(|i| train_pool[i].clone()).collect();

    let test_order = sorted_by_id(test_pool);
    let n_test = protocol.test_size(test_pool.len());
    let test: Vec<Example> = draw(&mut rng, &test_order, n_test).into_iter().map(|i| test_pool[i].clone()).collect();

    let mut seen = HashSet::new();
    for e in train.iter().chain(&validation).chain(&test) {
        if !seen.insert(e.source_id.as_str()) {
            return Err(DataError::DuplicateId(e.source_id.clone()));
        }
    }
    Ok(FewShotSplit { train, validation, test, k, seed })
}

/// Rater judgments as an items × labels matrix with columns in schema order.
pub fn load_rater_judgments(path: impl AsRef<Path>, schema: &LabelSchema) -> Result<Matrix> {
    let (header, m) = labels::read_table(path)?;
    let order = labels::canonical_order(&header, schema)?;
    let rows: Vec<Vec<f64>> = (0..m.rows()).map(|r| order.iter().map(|&c| m[(r, c)]).collect()).collect();
    Ok(Matrix::from_rows(&rows).unwrap_or_else(|| Matrix::zeros(0, schema.len())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn schema3() -> LabelSchema {
        LabelSchema::new(vec![("a", "a"), ("b", "b"), ("c", "c")], None).unwrap()
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    fn pool(per_class: &[usize], prefix: &str) -> Vec<Example> {
        let labels = ["a", "b", "c"];
        let mut out = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            for j in 0..n {
                out.push(Example {
                    text: format!("text {c} {j}"),
                    label: labels[c].into(),
                    source_id: format!("{prefix}{c}-{j:03}"),
                });
            }
        }
        out
    }

    #[test]
    fn three_rows_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.csv", "text,labels,id\nhello there,b,z1\n\"well, ok\",0,a2\nbye,c,m3\n");
        let ex = load_corpus(&p, &schema3(), MultiLabelPolicy::SingleOnly).unwrap();
        let ids: Vec<&str> = ex.iter().map(|e| e.source_id.as_str()).collect();
        assert_eq!(ids, ["z1", "a2", "m3"]);
        assert_eq!(ex[1].text, "well, ok");
        assert_eq!(ex[1].label, "a");
    }

    #[test]
    fn unknown_label_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.tsv", "one\ta\tx1\ntwo\tzzz\tx2\n");
        match load_corpus(&p, &schema3(), MultiLabelPolicy::SingleOnly) {
            Err(DataError::UnknownLabel { line, value, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(value, "zzz");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_rows_report_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.tsv", "one\ta\tx1\ntwo\ta\n");
        assert!(matches!(load_corpus(&p, &schema3(), MultiLabelPolicy::SingleOnly), Err(DataError::Parse { line: 2, .. })));
        let p = write(&dir, "d.tsv", "one\ta\tx1\none\tb\tx1\n");
        assert!(matches!(load_corpus(&p, &schema3(), MultiLabelPolicy::SingleOnly), Err(DataError::DuplicateId(_))));
    }

    #[test]
    fn multi_label_policy() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.tsv", "one\t0,2\tx1\ntwo\t1\tx2\n");
        assert_eq!(load_corpus(&p, &schema3(), MultiLabelPolicy::SingleOnly).unwrap().len(), 1);
        let ex = load_corpus(&p, &schema3(), MultiLabelPolicy::Expand).unwrap();
        let ids: Vec<&str> = ex.iter().map(|e| e.source_id.as_str()).collect();
        assert_eq!(ids, ["x1#a", "x1#c", "x2"]);
    }

    #[test]
    fn goemotions_fixture_counts() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
        let schema = labels::load_schema(root.join("goemotions_schema.csv")).unwrap();
        let train = root.join("goemotions_fixture/train.tsv");
        // counted independently from the raw file: 1300 rows, 40 of them
        // carrying two labels
        assert_eq!(load_corpus(&train, &schema, MultiLabelPolicy::SingleOnly).unwrap().len(), 1260);
        assert_eq!(load_corpus(&train, &schema, MultiLabelPolicy::Expand).unwrap().len(), 1340);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let train = pool(&[30, 30, 30], "tr");
        let test = pool(&[20, 20, 20], "te");
        let proto = SplitProtocol { validation_size: 20, test_fraction: 0.05 };
        let s = sample_few_shot(&train, &test, 5, 7, &schema3(), &proto).unwrap();
        assert_eq!(s.train.len(), 15);
        assert_eq!(s.validation.len(), 20);
        assert_eq!(s.test.len(), 3);
        assert_eq!(s.train_counts(&schema3()), vec![("a".into(), 5), ("b".into(), 5), ("c".into(), 5)]);
        let again = sample_few_shot(&train, &test, 5, 7, &schema3(), &proto).unwrap();
        assert_eq!(s, again);
        let mut shuffled = train.clone();
        shuffled.reverse();
        assert_eq!(sample_few_shot(&shuffled, &test, 5, 7, &schema3(), &proto).unwrap(), s);
        assert_ne!(sample_few_shot(&train, &test, 5, 8, &schema3(), &proto).unwrap().train, s.train);
    }

    #[test]
    fn insufficient_class_is_named() {
        let train = pool(&[30, 3, 30], "tr");
        let err = sample_few_shot(&train, &[], 5, 0, &schema3(), &SplitProtocol { validation_size: 0, test_fraction: 0.0 });
        match err {
            Err(DataError::InsufficientExamples { class, available: 3, needed: 5 }) => assert_eq!(class, "b"),
            other => panic!("{other:?}"),
        }
        let err = sample_few_shot(&pool(&[6, 6, 6], "tr"), &[], 5, 0, &schema3(), &SplitProtocol::default());
        assert!(matches!(err, Err(DataError::InsufficientPool { .. })));
    }

    #[test]
    fn absent_classes_are_skipped() {
        let train = pool(&[4, 0, 4], "tr");
        let s = sample_few_shot(&train, &[], 2, 0, &schema3(), &SplitProtocol { validation_size: 1, test_fraction: 0.0 }).unwrap();
        assert_eq!(s.train.len(), 4);
    }

    #[test]
    fn artifact_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let train = pool(&[10, 10, 10], "tr");
        let test = pool(&[10, 10, 10], "te");
        let proto = SplitProtocol { validation_size: 6, test_fraction: 0.1 };
        let s = sample_few_shot(&train, &test, 2, 3, &schema3(), &proto).unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        s.save(&p1).unwrap();
        sample_few_shot(&train, &test, 2, 3, &schema3(), &proto).unwrap().save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let back = SplitArtifact::load(&p1).unwrap().resolve(&train, &test).unwrap();
        assert_eq!(back, s);
        assert!(matches!(SplitArtifact::load(&p1).unwrap().resolve(&train[..3], &test), Err(DataError::MissingId(_))));
    }

    #[test]
    fn judgments_are_reordered() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "j.csv", "c,a,b\n0.3,0.1,0.2\n0.6,0.4,0.5\n0.9,0.7,0.8\n1.2,1.0,1.1\n");
        let m = load_rater_judgments(&p, &schema3()).unwrap();
        assert_eq!(m.shape(), (4, 3));
        assert_eq!(m.row(0), &[0.1, 0.2, 0.3]);
        assert_eq!(m.row(3), &[1.0, 1.1, 1.2]);
        let p = write(&dir, "k.csv", "a,b\n1,2\n");
        assert!(matches!(load_rater_judgments(&p, &schema3()), Err(DataError::Label(LabelError::ColumnMismatch(_)))));
    }

    proptest! {
        #[test]
        fn split_invariants(na in 5usize..12, nb in 5usize..12, nc in 5usize..12, k in 1usize..4, seed: u64, val in 0usize..6) {
            let train = pool(&[na, nb, nc], "tr");
            let test = pool(&[nb, nc, na], "te");
            let proto = SplitProtocol { validation_size: val, test_fraction: 0.3 };
            let s = sample_few_shot(&train, &test, k, seed, &schema3(), &proto).unwrap();
            prop_assert_eq!(s.train.len(), 3 * k);
            for (_, c) in s.train_counts(&schema3()) {
                prop_assert_eq!(c, k);
            }
            prop_assert_eq!(s.validation.len(), val);
            prop_assert_eq!(s.test.len(), proto.test_size(test.len()));
            let mut ids = HashSet::new();
            for e in s.train.iter().chain(&s.validation).chain(&s.test) {
                prop_assert!(ids.insert(e.source_id.clone()));
            }
        }
    }
}
