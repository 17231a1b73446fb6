//! Streaming CountSketch summaries of feature/gradient columns.
//!
//! Every sample is hashed to one bucket (per block) with a random sign, and
//! its feature and gradient columns are added into the matching bucket
//! columns of `F̃` (`d_f × M`) and `G̃` (`d_g × M`). The sketched kernels are
//! then `K̃_f = F̃ᵀF̃` and `K̃_g = G̃ᵀG̃`.
//!
//! Bucket and sign are a pure function of `(seed, sample index, block)`:
//! a ChaCha8 keystream keyed by the seed, with the block as stream id and
//! the sample index as the word position. Sketches are therefore
//! reproducible and independent of the order in which batches arrive.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::representation::{self, FeatureGradientBatch, KernelRepresentation, Variant};

/// Default bucket count.
pub const DEFAULT_BUCKETS: usize = 512;
/// Largest `d_f · d_g` for which the exact `Σ g fᵀ` accumulator is kept.
pub const MPSI_MAX_ENTRIES: usize = 4_000_000;

/// How samples are assigned to buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hashing {
    /// Uniform bucket and Rademacher sign per block.
    CountSketch,
    /// Sample `i` goes to bucket `i` with sign `+1`; an unsketched reference
    /// path that needs `M ≥ N` and a single block.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SketchConfig {
    buckets: usize,
    seed: u64,
    blocks: usize,
    hashing: Hashing,
}

impl SketchConfig {
    pub fn new(buckets: usize, seed: u64, blocks: usize) -> Result<Self> {
        if buckets < 1 {
            return Err(Error::Config("bucket count must be at least 1".into()));
        }
        if blocks < 1 || !buckets.is_multiple_of(blocks) {
            return Err(Error::Config(format!(
                "block count {blocks} must be at least 1 and divide the bucket count {buckets}"
            )));
        }
        Ok(Self {
            buckets,
            seed,
            blocks,
            hashing: Hashing::CountSketch,
        })
    }

    /// Single-block CountSketch.
    pub fn count_sketch(buckets: usize, seed: u64) -> Result<Self> {
        Self::new(buckets, seed, 1)
    }

    /// The identity assignment over `n` samples.
    pub fn identity(n: usize) -> Result<Self> {
        let mut cfg = Self::new(n, 0, 1)?;
        cfg.hashing = Hashing::Identity;
        Ok(cfg)
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn hashing(&self) -> Hashing {
        self.hashing
    }

    pub fn block_width(&self) -> usize {
        self.buckets / self.blocks
    }

    /// Magnitude of every nonzero in the sketch matrix.
    pub fn scale(&self) -> f64 {
        1.0 / (self.blocks as f64).sqrt()
    }
}

/// Where one sample lands in one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    /// Bucket within the block, in `[0, M/s)`.
    pub bucket: usize,
    /// Column of the accumulator, `block · M/s + bucket`.
    pub column: usize,
    pub sign: i8,
}

fn draw(word: u64, width: usize) -> (usize, i8) {
    let bucket = (((word >> 1) as u128 * width as u128) >> 63) as usize;
    let sign = if word & 1 == 1 { 1 } else { -1 };
    (bucket, sign)
}

/// Sequential reader of assignments for consecutive sample indices.
struct AssignmentStream {
    config: SketchConfig,
    rngs: Vec<ChaCha8Rng>,
    next_index: u64,
}

impl AssignmentStream {
    fn starting_at(config: SketchConfig, index: u64) -> Self {
        let rngs = match config.hashing {
            Hashing::Identity => Vec::new(),
            Hashing::CountSketch => (0..config.blocks)
                .map(|block| {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                    rng.set_stream(block as u64);
                    rng.set_word_pos(2 * index as u128);
                    rng
                })
                .collect(),
        };
        Self {
            config,
            rngs,
            next_index: index,
        }
    }

    fn next_into(&mut self, out: &mut Vec<Assignment>) -> Result<()> {
        out.clear();
        let index = self.next_index;
        self.next_index += 1;
        match self.config.hashing {
            Hashing::Identity => {
                let bucket = usize::try_from(index)
                    .ok()
                    .filter(|&b| b < self.config.buckets)
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "identity assignment has {} buckets but sample index {index}",
                            self.config.buckets
                        ))
                    })?;
                out.push(Assignment {
                    bucket,
                    column: bucket,
                    sign: 1,
                });
            }
            Hashing::CountSketch => {
                let width = self.config.block_width();
                for (block, rng) in self.rngs.iter_mut().enumerate() {
                    let (bucket, sign) = draw(rng.next_u64(), width);
                    out.push(Assignment {
                        bucket,
                        column: block * width + bucket,
                        sign,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Bucket and sign of `sample_index` in every block.
pub fn hash_assignment(config: &SketchConfig, sample_index: u64) -> Result<Vec<Assignment>> {
    let mut out = Vec::with_capacity(config.blocks);
    AssignmentStream::starting_at(*config, sample_index).next_into(&mut out)?;
    Ok(out)
}

/// Calls `visit(j, assignments)` for samples `first_index + j`, `j < n`.
pub(crate) fn for_each_assignment(
    config: &SketchConfig,
    first_index: u64,
    n: usize,
    mut visit: impl FnMut(usize, &[Assignment]),
) -> Result<()> {
    let mut stream = AssignmentStream::starting_at(*config, first_index);
    let mut slots = Vec::with_capacity(config.blocks);
    for j in 0..n {
        stream.next_into(&mut slots)?;
        visit(j, &slots);
    }
    Ok(())
}

/// Explicit `M × n` sketch matrix for samples `0..n`, built from the same
/// assignments the streaming path uses.
pub fn countsketch_matrix(config: &SketchConfig, n: usize) -> Result<DenseMatrix> {
    if n < 1 {
        return Err(Error::Config(
            "sketch matrix needs at least one column".into(),
        ));
    }
    let mut s = DenseMatrix::zeros(config.buckets, n);
    let mut stream = AssignmentStream::starting_at(*config, 0);
    let mut slots = Vec::with_capacity(config.blocks);
    for j in 0..n {
        stream.next_into(&mut slots)?;
        for a in &slots {
            s[(a.column, j)] += f64::from(a.sign) * config.scale();
        }
    }
    Ok(s)
}

/// Layer and smoothing metadata carried alongside a sketch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SketchMeta {
    pub layer_id: u32,
    pub beta: f64,
}

impl Default for SketchMeta {
    fn default() -> Self {
        Self {
            layer_id: 0,
            beta: 0.5,
        }
    }
}

/// Mutable streaming accumulators. Single writer; parallel ingestion goes
/// through disjoint index ranges and [`SketchState::merge`].
#[derive(Debug, Clone, PartialEq)]
pub struct SketchState {
    config: SketchConfig,
    meta: SketchMeta,
    features: DenseMatrix,
    gradients: DenseMatrix,
    samples: u64,
    trace_f: f64,
    trace_g: f64,
    trace_fg: f64,
    mpsi: Option<DenseMatrix>,
}

impl SketchState {
    pub fn new(config: SketchConfig, d_f: usize, d_g: usize, track_mpsi: bool) -> Result<Self> {
        if d_f < 1 || d_g < 1 {
            return Err(Error::Config(format!(
                "feature and gradient dimensions must be at least 1 (got {d_f}, {d_g})"
            )));
        }
        let mpsi = if track_mpsi {
            if d_f.saturating_mul(d_g) > MPSI_MAX_ENTRIES {
                return Err(Error::Config(format!(
                    "mean-embedding accumulator of {d_g}x{d_f} exceeds {MPSI_MAX_ENTRIES} entries"
                )));
            }
            Some(DenseMatrix::zeros(d_g, d_f))
        } else {
            None
        };
        Ok(Self {
            config,
            meta: SketchMeta::default(),
            features: DenseMatrix::zeros(d_f, config.buckets),
            gradients: DenseMatrix::zeros(d_g, config.buckets),
            samples: 0,
            trace_f: 0.0,
            trace_g: 0.0,
            trace_fg: 0.0,
            mpsi,
        })
    }

    pub fn with_meta(mut self, meta: SketchMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn config(&self) -> &SketchConfig {
        &self.config
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn feature_dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn gradient_dim(&self) -> usize {
        self.gradients.nrows()
    }

    pub fn feature_accumulator(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn gradient_accumulator(&self) -> &DenseMatrix {
        &self.gradients
    }

    pub fn absorb(&mut self, batch: &FeatureGradientBatch) -> Result<()> {
        if batch.feature_dim() != self.feature_dim() || batch.gradient_dim() != self.gradient_dim()
        {
            return Err(Error::dim(format!(
                "batch is {}/{} (features/gradients) but sketch expects {}/{}",
                batch.feature_dim(),
                batch.gradient_dim(),
                self.feature_dim(),
                self.gradient_dim()
            )));
        }
        let scale = self.config.scale();
        let mut stream = AssignmentStream::starting_at(self.config, batch.first_index());
        let mut slots = Vec::with_capacity(self.config.blocks);
        for j in 0..batch.len() {
            stream.next_into(&mut slots)?;
            let f = batch.features().column(j);
            let g = batch.gradients().column(j);
            for a in &slots {
                let w = f64::from(a.sign) * scale;
                self.features.column_mut(a.column).axpy(w, &f, 1.0);
                self.gradients.column_mut(a.column).axpy(w, &g, 1.0);
            }
            let nf = f.norm_squared();
            let ng = g.norm_squared();
            self.trace_f += nf;
            self.trace_g += ng;
            self.trace_fg += nf * ng;
            if let Some(m) = self.mpsi.as_mut() {
                m.ger(1.0, &g, &f, 1.0);
            }
        }
        self.samples += batch.len() as u64;
        Ok(())
    }

    /// Adds the accumulators of a state built over a disjoint index range.
    pub fn merge(&mut self, other: &SketchState) -> Result<()> {
        if self.config != other.config {
            return Err(Error::Incomparable(
                "cannot merge sketches with different configurations".into(),
            ));
        }
        if self.features.shape() != other.features.shape()
            || self.gradients.shape() != other.gradients.shape()
        {
            return Err(Error::dim(
                "cannot merge sketches with different dimensions",
            ));
        }
        match (self.mpsi.as_mut(), other.mpsi.as_ref()) {
            (Some(a), Some(b)) => *a += b,
            (None, None) => {}
            _ => {
                return Err(Error::InsufficientAccumulators(
                    "one of the merged sketches does not track the mean embedding".into(),
                ))
            }
        }
        self.features += &other.features;
        self.gradients += &other.gradients;
        self.samples += other.samples;
        self.trace_f += other.trace_f;
        self.trace_g += other.trace_g;
        self.trace_fg += other.trace_fg;
        Ok(())
    }

    pub fn finalize(self) -> Result<SketchSummary> {
        if self.samples == 0 {
            return Err(Error::EmptySketch);
        }
        Ok(SketchSummary { state: self })
    }
}

/// Immutable snapshot of a finished sketch.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchSummary {
    state: SketchState,
}

/// Raw fields of a summary, used by the file format.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryParts {
    pub config: SketchConfig,
    pub meta: SketchMeta,
    pub features: DenseMatrix,
    pub gradients: DenseMatrix,
    pub samples: u64,
    pub trace_f: f64,
    pub trace_g: f64,
    pub trace_fg: f64,
    pub mpsi: Option<DenseMatrix>,
}

impl SketchSummary {
    pub fn from_parts(parts: SummaryParts) -> Result<Self> {
        let m = parts.config.buckets;
        if parts.features.ncols() != m || parts.gradients.ncols() != m {
            return Err(Error::dim(
                "accumulator width does not match the bucket count",
            ));
        }
        if parts.features.nrows() < 1 || parts.gradients.nrows() < 1 {
            return Err(Error::dim(
                "feature and gradient dimensions must be at least 1",
            ));
        }
        if let Some(mp) = &parts.mpsi {
            if mp.shape() != (parts.gradients.nrows(), parts.features.nrows()) {
                return Err(Error::dim("mean-embedding accumulator has the wrong shape"));
            }
        }
        if parts.samples == 0 {
            return Err(Error::EmptySketch);
        }
        if [parts.trace_f, parts.trace_g, parts.trace_fg]
            .iter()
            .any(|t| !t.is_finite() || *t < 0.0)
        {
            return Err(Error::InvalidInput(
                "trace accumulators must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            state: SketchState {
                config: parts.config,
                meta: parts.meta,
                features: parts.features,
                gradients: parts.gradients,
                samples: parts.samples,
                trace_f: parts.trace_f,
                trace_g: parts.trace_g,
                trace_fg: parts.trace_fg,
                mpsi: parts.mpsi,
            },
        })
    }

    pub fn config(&self) -> &SketchConfig {
        &self.state.config
    }

    pub fn meta(&self) -> &SketchMeta {
        &self.state.meta
    }

    pub fn buckets(&self) -> usize {
        self.state.config.buckets
    }

    pub fn samples(&self) -> u64 {
        self.state.samples
    }

    pub fn feature_dim(&self) -> usize {
        self.state.features.nrows()
    }

    pub fn gradient_dim(&self) -> usize {
        self.state.gradients.nrows()
    }

    /// `F̃`, `d_f × M`.
    pub fn feature_sketch(&self) -> &DenseMatrix {
        &self.state.features
    }

    /// `G̃`, `d_g × M`.
    pub fn gradient_sketch(&self) -> &DenseMatrix {
        &self.state.gradients
    }

    /// `Σ_j ‖f_j‖²`
    pub fn trace_f(&self) -> f64 {
        self.state.trace_f
    }

    /// `Σ_j ‖g_j‖²`
    pub fn trace_g(&self) -> f64 {
        self.state.trace_g
    }

    /// `Σ_j ‖f_j‖²‖g_j‖²`, the exact trace of the combined kernel.
    pub fn trace_fg(&self) -> f64 {
        self.state.trace_fg
    }

    /// `Σ_j g_j f_jᵀ` when tracked.
    pub fn mpsi(&self) -> Option<&DenseMatrix> {
        self.state.mpsi.as_ref()
    }

    pub fn sketched_feature_kernel(&self) -> Result<KernelRepresentation> {
        self.sketched_gram(&self.state.features, Variant::Feature)
    }

    pub fn sketched_gradient_kernel(&self) -> Result<KernelRepresentation> {
        self.sketched_gram(&self.state.gradients, Variant::Gradient)
    }

    fn sketched_gram(&self, acc: &DenseMatrix, variant: Variant) -> Result<KernelRepresentation> {
        let k = linalg::symmetrize(&(acc.transpose() * acc));
        Ok(
            KernelRepresentation::new(k, variant, self.state.samples, true)?
                .with_layer(self.state.meta.layer_id),
        )
    }

    /// `M × M` kernel of the requested variant. The combined kernel is
    /// `K̃_f ∘ K̃_g`. The elementwise variant is not recoverable from the
    /// bucket sums and is rejected.
    pub fn kernel(&self, variant: Variant, rel_tol: f64) -> Result<KernelRepresentation> {
        match variant {
            Variant::Feature => self.sketched_feature_kernel(),
            Variant::Gradient => self.sketched_gradient_kernel(),
            Variant::Elementwise => Err(Error::InsufficientAccumulators(
                "summaries hold bucket sums of f and g separately; the elementwise variant needs sums of f∘g".into(),
            )),
            other => {
                let kf = self.sketched_feature_kernel()?;
                let kg = self.sketched_gradient_kernel()?;
                representation::combine(&kf, &kg, other, rel_tol)
            }
        }
    }

    pub fn into_parts(self) -> SummaryParts {
        let s = self.state;
        SummaryParts {
            config: s.config,
            meta: s.meta,
            features: s.features,
            gradients: s.gradients,
            samples: s.samples,
            trace_f: s.trace_f,
            trace_g: s.trace_g,
            trace_fg: s.trace_fg,
            mpsi: s.mpsi,
        }
    }
}

/// Sketches every batch into a fresh state and finalizes it.
pub fn sketch_batches<'a>(
    config: SketchConfig,
    batches: impl IntoIterator<Item = &'a FeatureGradientBatch>,
    track_mpsi: bool,
    meta: SketchMeta,
) -> Result<SketchSummary> {
    let mut iter = batches.into_iter().peekable();
    let first = iter.peek().ok_or(Error::EmptySketch)?;
    let mut state = SketchState::new(
        config,
        first.feature_dim(),
        first.gradient_dim(),
        track_mpsi,
    )?
    .with_meta(meta);
    for b in iter {
        state.absorb(b)?;
    }
    state.finalize()
}
