//! Labeled datasets, client partitioners, splits, and ingestion.
//!
//! A [`LabeledDataset`] stores row-major `f64` features with integer class
//! labels. Partitioners divide a dataset across simulated clients either
//! homogeneously (per-class counts differ by at most one between clients) or
//! according to an explicit per-client per-class [`PartitionPlan`]. Both are
//! driven entirely by the seed passed in: the same seed always selects the
//! same rows.
//!
//! Datasets round-trip through the tensor container format: a file holds one
//! `features` tensor of shape `[rows, width]` and one `labels` tensor of
//! shape `[rows]` with integral values.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::{ParameterSet, Tensor};
use crate::seeds;

/// Row-major feature matrix with one integer label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    width: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    /// Builds a dataset, validating widths, label range, and finiteness.
    pub fn new(
        features: Vec<f64>,
        width: usize,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("feature width must be positive".into()));
        }
        if num_classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        if features.len() != labels.len() * width {
            return Err(Error::WidthMismatch {
                expected: labels.len() * width,
                got: features.len(),
                row: 0,
            });
        }
        if let Some(index) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { name: "features".into(), index });
        }
        for &label in &labels {
            if label >= num_classes {
                return Err(Error::LabelOutOfRange { label, num_classes });
            }
        }
        Ok(Self { features, width, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }

    /// Number of rows per class, indexed by class id.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &label in &self.labels {
            counts[label] += 1;
        }
        counts
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.width);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self { features, width: self.width, labels, num_classes: self.num_classes }
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &label) in self.labels.iter().enumerate() {
            by_class[label].push(i);
        }
        by_class
    }

    /// Writes the dataset in the tensor container format. Empty datasets
    /// cannot be encoded (tensor dimensions are positive) and are rejected.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyInput("empty dataset"));
        }
        let features = Tensor::new(vec![self.len(), self.width], self.features.clone())?;
        let labels = Tensor::new(
            vec![self.len()],
            self.labels.iter().map(|&l| l as f64).collect(),
        )?;
        let set = ParameterSet::new(vec![
            ("features".into(), features),
            ("labels".into(), labels),
        ])?;
        set.save(path)
    }

    /// Reads a dataset written by [`save`](Self::save). The class count is
    /// inferred as `max label + 1`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let set = ParameterSet::load(path)?;
        let layers = set.layers();
        if layers.len() != 2 || layers[0].0 != "features" || layers[1].0 != "labels" {
            return Err(Error::Decode(
                "dataset file must hold a `features` block then a `labels` block".into(),
            ));
        }
        let features = &layers[0].1;
        let labels = &layers[1].1;
        if features.shape().len() != 2 {
            return Err(Error::Decode("features block must be rank 2".into()));
        }
        if labels.shape().len() != 1 || labels.shape()[0] != features.shape()[0] {
            return Err(Error::Decode("labels block must be rank 1 with one entry per row".into()));
        }
        let mut parsed = Vec::with_capacity(labels.len());
        for (i, &v) in labels.values().iter().enumerate() {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Parse {
                    row: i + 1,
                    col: 1,
                    message: format!("label must be a non-negative integer, got {v}"),
                });
            }
            parsed.push(v as usize);
        }
        let num_classes = parsed.iter().max().map_or(1, |&m| m + 1);
        Self::new(features.values().to_vec(), features.shape()[1], parsed, num_classes)
    }
}

/// Per-client per-class row counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    counts: Vec<Vec<usize>>,
}

impl PartitionPlan {
    /// Builds a plan from a `clients x classes` count matrix.
    pub fn new(counts: Vec<Vec<usize>>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::EmptyInput("partition plan has no clients"));
        }
        let width = counts[0].len();
        if width == 0 {
            return Err(Error::EmptyInput("partition plan has no classes"));
        }
        for (i, row) in counts.iter().enumerate() {
            if row.len() != width {
                return Err(Error::WidthMismatch { expected: width, got: row.len(), row: i });
            }
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn num_clients(&self) -> usize {
        self.counts.len()
    }

    pub fn num_classes(&self) -> usize {
        self.counts[0].len()
    }

    /// Total rows assigned to each client.
    pub fn client_totals(&self) -> Vec<usize> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }
}

/// Splits the per-class remainders of an even division so that every class
/// count differs by at most one between clients and the client totals are as
/// equal as the remainders allow. Extras are dealt to clients in ascending
/// order with a cursor that carries across classes, walking classes from the
/// highest id down.
fn homogeneous_counts(class_counts: &[usize], num_clients: usize) -> Vec<Vec<usize>> {
    let num_classes = class_counts.len();
    let mut counts = vec![vec![0usize; num_classes]; num_clients];
    for (class, &n) in class_counts.iter().enumerate() {
        let base = n / num_clients;
        for client in &mut counts {
            client[class] = base;
        }
    }
    let mut cursor = 0usize;
    for class in (0..num_classes).rev() {
        for _ in 0..class_counts[class] % num_clients {
            counts[cursor][class] += 1;
            cursor = (cursor + 1) % num_clients;
        }
    }
    counts
}

/// Partitions a dataset across clients with near-identical class mixes.
///
/// Every client receives `floor(n_k / clients)` rows of class `k`; the
/// remainders are dealt so that per-class counts differ by at most one and
/// client totals stay balanced. Which concrete rows go where is decided by a
/// per-class shuffle derived from `seed`.
pub fn partition_homogeneous(
    dataset: &LabeledDataset,
    num_clients: usize,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    if num_clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if num_clients == 1 {
        return Ok(vec![dataset.clone()]);
    }
    let counts = homogeneous_counts(&dataset.class_counts(), num_clients);
    deal_by_counts(dataset, &counts, seed)
}

/// Partitions a dataset according to an explicit plan.
///
/// The plan's class count must match the dataset and each class column must
/// fit inside the rows available; otherwise the offending `(client, class)`
/// cell is reported. Rows left unassigned by the plan are simply unused.
pub fn partition_by_plan(
    dataset: &LabeledDataset,
    plan: &PartitionPlan,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    if plan.num_classes() != dataset.num_classes() {
        return Err(Error::WidthMismatch {
            expected: dataset.num_classes(),
            got: plan.num_classes(),
            row: 0,
        });
    }
    let available = dataset.class_counts();
    let mut remaining = available;
    for (client, row) in plan.counts().iter().enumerate() {
        for (class, &requested) in row.iter().enumerate() {
            if requested > remaining[class] {
                return Err(Error::InfeasiblePlan {
                    client,
                    class,
                    requested,
                    available: remaining[class],
                });
            }
            remaining[class] -= requested;
        }
    }
    deal_by_counts(dataset, plan.counts(), seed)
}

fn deal_by_counts(
    dataset: &LabeledDataset,
    counts: &[Vec<usize>],
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    let mut by_class = dataset.indices_by_class();
    let mut rng = seeds::derive_rng(seed, "partition", &[]);
    for indices in &mut by_class {
        indices.shuffle(&mut rng);
    }
    let mut offsets = vec![0usize; dataset.num_classes()];
    let mut clients = Vec::with_capacity(counts.len());
    for row in counts {
        let mut picked = Vec::new();
        for (class, &count) in row.iter().enumerate() {
            let start = offsets[class];
            picked.extend_from_slice(&by_class[class][start..start + count]);
            offsets[class] += count;
        }
        picked.sort_unstable();
        clients.push(dataset.subset(&picked));
    }
    Ok(clients)
}

/// Nearest integer with exact halves rounded down.
fn round_half_down(x: f64) -> usize {
    (x - 0.5).ceil().max(0.0) as usize
}

/// Stratified train/test split.
///
/// Each class contributes `round(count * test_fraction)` rows to the test
/// side (halves round down). If the per-class rounds do not add up to the
/// rounded overall target, the difference is absorbed by the largest classes
/// first, so the split size is stable. Returns `(train, test)`.
pub fn stratified_split(
    dataset: &LabeledDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must lie strictly between 0 and 1, got {test_fraction}"
        )));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyInput("empty dataset"));
    }
    let class_counts = dataset.class_counts();
    let mut test_counts: Vec<usize> = class_counts
        .iter()
        .map(|&n| round_half_down(n as f64 * test_fraction).min(n))
        .collect();
    let target = round_half_down(dataset.len() as f64 * test_fraction);
    let mut diff = target as i64 - test_counts.iter().sum::<usize>() as i64;
    let mut order: Vec<usize> = (0..class_counts.len()).collect();
    order.sort_by(|&a, &b| class_counts[b].cmp(&class_counts[a]).then(a.cmp(&b)));
    for &class in &order {
        if diff == 0 {
            break;
        }
        if diff > 0 {
            let room = (class_counts[class] - test_counts[class]) as i64;
            let take = diff.min(room);
            test_counts[class] += take as usize;
            diff -= take;
        } else {
            let take = (-diff).min(test_counts[class] as i64);
            test_counts[class] -= take as usize;
            diff += take;
        }
    }

    let mut by_class = dataset.indices_by_class();
    let mut rng = seeds::derive_rng(seed, "split", &[]);
    let mut test_idx = Vec::new();
    let mut train_idx = Vec::new();
    for (class, indices) in by_class.iter_mut().enumerate() {
        indices.shuffle(&mut rng);
        let (test_part, train_part) = indices.split_at(test_counts[class]);
        test_idx.extend_from_slice(test_part);
        train_idx.extend_from_slice(train_part);
    }
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((dataset.subset(&train_idx), dataset.subset(&test_idx)))
}

/// Uniform random subset of `round(len * fraction)` rows, without
/// replacement. Rejects fractions that select no rows.
pub fn shadow_sample(
    dataset: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "sample fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let size = round_half_down(dataset.len() as f64 * fraction).min(dataset.len());
    if size == 0 {
        return Err(Error::EmptyInput("shadow sample is empty"));
    }
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = seeds::derive_rng(seed, "shadow", &[]);
    indices.shuffle(&mut rng);
    indices.truncate(size);
    Ok(dataset.subset(&indices))
}

/// Generates `num_classes * per_class` rows of Gaussian blobs.
///
/// Class means are drawn uniformly from `[-3, 3]^dim`; rows scatter around
/// their mean with standard deviation `spread`. With `spread` near zero every
/// class collapses onto its own point, so the classes are separable by
/// construction.
pub fn synth_blobs(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes == 0 || dim == 0 || per_class == 0 {
        return Err(Error::Config("blob generator needs positive classes, dim, and count".into()));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(Error::Config(format!("spread must be finite and non-negative, got {spread}")));
    }
    let mut rng = seeds::derive_rng(seed, "blobs", &[]);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect())
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &m in mean {
                features.push(m + spread * normal.sample(&mut rng));
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(features, dim, labels, num_classes)
}

/// Loads a CSV of `feature..., label` rows.
///
/// Fields are `.`-decimal floats; the final column is a non-negative integer
/// label. `has_header` skips one leading header line. The class count is
/// inferred as `max label + 1`. Positions in errors are 1-based over data
/// rows and columns.
pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (row_idx, record) in reader.records().enumerate() {
        let row = row_idx + 1;
        let record = record.map_err(|e| Error::Parse { row, col: 0, message: e.to_string() })?;
        if record.len() < 2 {
            return Err(Error::Parse {
                row,
                col: record.len(),
                message: "need at least one feature column and a label column".into(),
            });
        }
        let row_width = record.len() - 1;
        match width {
            None => width = Some(row_width),
            Some(expected) if expected != row_width => {
                return Err(Error::WidthMismatch { expected, got: row_width, row });
            }
            _ => {}
        }
        for col in 0..row_width {
            let field = &record[col];
            let value: f64 = field.parse().map_err(|_| Error::Parse {
                row,
                col: col + 1,
                message: format!("invalid float {field:?}"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    row,
                    col: col + 1,
                    message: format!("non-finite value {field:?}"),
                });
            }
            features.push(value);
        }
        let label_field = &record[row_width];
        let label: usize = label_field.parse().map_err(|_| Error::Parse {
            row,
            col: row_width + 1,
            message: format!("label must be a non-negative integer, got {label_field:?}"),
        })?;
        labels.push(label);
    }
    let width = width.ok_or(Error::EmptyInput("empty dataset"))?;
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
    LabeledDataset::new(features, width, labels, num_classes)
}
