use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Labelled inputs, one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: DenseMatrix,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: DenseMatrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.ncols() != labels.len() {
            return Err(Error::dim(format!(
                "{} input columns but {} labels",
                inputs.ncols(),
                labels.len()
            )));
        }
        if inputs.ncols() == 0 {
            return Err(Error::InvalidInput("dataset has no samples".into()));
        }
        if classes < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        crate::linalg::ensure_finite(&inputs, "dataset inputs")?;
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn inputs(&self) -> &DenseMatrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.nrows()
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            inputs: self.inputs.columns(0, n).into_owned(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_columns(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    /// Gaussian clusters, one per class.
    BlobsFine,
    /// Same inputs as `BlobsFine` with twice as many clusters; cluster pairs
    /// `(2k, 2k+1)` share label `k`.
    BlobsCoarse,
    /// Clusters from an independent random stream, with every centre
    /// coordinate offset by `2·spread`; the inputs share no samples and
    /// little mass with the blob families.
    ShiftedDist,
}

impl TaskFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskFamily::BlobsFine => "blobs-fine",
            TaskFamily::BlobsCoarse => "blobs-coarse",
            TaskFamily::ShiftedDist => "shifted-dist",
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs-fine" => Ok(TaskFamily::BlobsFine),
            "blobs-coarse" => Ok(TaskFamily::BlobsCoarse),
            "shifted-dist" => Ok(TaskFamily::ShiftedDist),
            other => Err(Error::InvalidInput(format!(
                "unknown task family `{other}`"
            ))),
        }
    }
}

/// Parameters of a synthetic classification task.
///
/// `classes` is always the number of labels the task exposes. The input
/// distribution depends only on `(family, input_dim, clusters, spread,
/// noise, seed)`, so a fine task with `2k` classes and a coarse task with
/// `k` classes and the same seed see identical inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub family: TaskFamily,
    pub classes: usize,
    pub input_dim: usize,
    pub samples: usize,
    /// Standard deviation of the cluster centres.
    pub spread: f64,
    /// Standard deviation of the within-cluster noise.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn new(family: TaskFamily, classes: usize, samples: usize, seed: u64) -> Self {
        Self {
            family,
            classes,
            input_dim: 16,
            samples,
            spread: 1.0,
            noise: 1.0,
            seed,
        }
    }

    pub fn clusters(&self) -> usize {
        match self.family {
            TaskFamily::BlobsCoarse => 2 * self.classes,
            _ => self.classes,
        }
    }

    fn label_of(&self, cluster: usize) -> usize {
        match self.family {
            TaskFamily::BlobsCoarse => cluster / 2,
            _ => cluster,
        }
    }

    /// Parses `family[:key=value,...]`, e.g. `blobs-fine:classes=10,samples=2000,seed=3`.
    pub fn parse(text: &str) -> Result<Self> {
        let (family, rest) = match text.split_once(':') {
            Some((f, r)) => (f, r),
            None => (text, ""),
        };
        let mut spec = Self::new(family.trim().parse()?, 10, 2000, 0);
        for pair in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("expected key=value, got `{pair}`")))?;
            let bad = |_| Error::InvalidInput(format!("bad value for `{key}`: `{value}`"));
            match key.trim() {
                "classes" => spec.classes = value.trim().parse().map_err(bad)?,
                "input_dim" | "dim" => spec.input_dim = value.trim().parse().map_err(bad)?,
                "samples" => spec.samples = value.trim().parse().map_err(bad)?,
                "seed" => spec.seed = value.trim().parse().map_err(bad)?,
                "spread" => {
                    spec.spread = value.trim().parse().map_err(|_| {
                        Error::InvalidInput(format!("bad value for `spread`: `{value}`"))
                    })?
                }
                "noise" => {
                    spec.noise = value.trim().parse().map_err(|_| {
                        Error::InvalidInput(format!("bad value for `noise`: `{value}`"))
                    })?
                }
                other => return Err(Error::InvalidInput(format!("unknown task key `{other}`"))),
            }
        }
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.samples < self.clusters() {
            return Err(Error::InvalidInput(format!(
                "{} samples cannot cover {} clusters",
                self.samples,
                self.clusters()
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::InvalidInput("input_dim must be positive".into()));
        }
        if !(self.spread.is_finite()
            && self.spread > 0.0
            && self.noise.is_finite()
            && self.noise >= 0.0)
        {
            return Err(Error::InvalidInput(
                "spread must be positive and noise non-negative".into(),
            ));
        }
        Ok(())
    }
}

const SHIFT_STREAM: u64 = 0x5348_4946_5445_4400;

/// Draws a dataset. Clusters are visited round-robin so class counts differ
/// by at most one; the sample order is then shuffled.
pub fn generate_task(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let clusters = spec.clusters();
    let d = spec.input_dim;
    let shifted = spec.family == TaskFamily::ShiftedDist;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    if shifted {
        rng.set_stream(SHIFT_STREAM);
    }
    let mut normal = move || -> f64 { rng.sample(StandardNormal) };

    let offset = if shifted { 2.0 * spec.spread } else { 0.0 };
    let centres = DenseMatrix::from_fn(d, clusters, |_, _| offset + spec.spread * normal());

    let mut assignment: Vec<usize> = (0..spec.samples).map(|i| i % clusters).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    if shifted {
        order_rng.set_stream(SHIFT_STREAM);
    }
    assignment.shuffle(&mut order_rng);

    let mut inputs = DenseMatrix::zeros(d, spec.samples);
    for (j, &c) in assignment.iter().enumerate() {
        for r in 0..d {
            inputs[(r, j)] = centres[(r, c)] + spec.noise * normal();
        }
    }
    let labels = assignment.iter().map(|&c| spec.label_of(c)).collect();
    Dataset::new(inputs, labels, spec.classes)
}
