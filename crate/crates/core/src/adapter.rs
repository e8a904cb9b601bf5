//! Shape-routed adapter bank.
//!
//! Each adapter is a bias-free bottleneck `ReLU(f W1) W2` mixed back into its
//! input with residual factor `lambda`. A region is routed to exactly one
//! adapter by the bin its aspect ratio (h/w) falls in; bins are left-open,
//! right-closed intervals `(s_{k-1}, s_k]` covering `(0, inf)`.
//!
//! Vectors follow the row-vector convention `f W1 W2`, so `W1` is `D x Dh`
//! and `W2` is `Dh x D`. Adapter and bin indices are zero-based.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{ensure, ensure_dim, Error, Result};
use crate::geometry::{aspect_ratio, BoundingBox};

pub type Feature = DVector<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
}

/// Intermediate values of one adapter pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct AdapterTrace {
    pub pre_activation: DVector<f64>,
    pub hidden: DVector<f64>,
    pub output: DVector<f64>,
}

impl Adapter {
    pub fn zeros(dim: usize, hidden_dim: usize) -> Self {
        Adapter {
            w1: DMatrix::zeros(dim, hidden_dim),
            w2: DMatrix::zeros(hidden_dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    fn validate(&self) -> Result<()> {
        ensure_dim("adapter w2 rows", self.w1.ncols(), self.w2.nrows())?;
        ensure_dim("adapter w2 cols", self.w1.nrows(), self.w2.ncols())?;
        ensure(
            self.w1.iter().chain(self.w2.iter()).all(|v| v.is_finite()),
            || "adapter weights contain non-finite values".into(),
        )
    }

    pub fn trace(&self, f: &Feature) -> Result<AdapterTrace> {
        ensure_dim("adapter input", self.dim(), f.len())?;
        let pre_activation = self.w1.tr_mul(f);
        // subgradient at exactly zero is zero
        let hidden = pre_activation.map(|v| if v > 0.0 { v } else { 0.0 });
        let output = self.w2.tr_mul(&hidden);
        Ok(AdapterTrace {
            pre_activation,
            hidden,
            output,
        })
    }

    pub fn forward(&self, f: &Feature) -> Result<Feature> {
        Ok(self.trace(f)?.output)
    }
}

/// Aspect-ratio boundaries `0 = s_0 < s_1 < ... < s_N = inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinPartition {
    boundaries: Vec<f64>,
}

impl BinPartition {
    /// Builds a partition from its interior boundaries `s_1 .. s_{N-1}`.
    pub fn from_interior(interior: &[f64]) -> Result<Self> {
        ensure(interior.iter().all(|s| s.is_finite() && *s > 0.0), || {
            format!("interior boundaries must be positive and finite: {interior:?}")
        })?;
        ensure(interior.windows(2).all(|w| w[0] < w[1]), || {
            format!("boundaries must be strictly increasing: {interior:?}")
        })?;
        let mut boundaries = Vec::with_capacity(interior.len() + 2);
        boundaries.push(0.0);
        boundaries.extend_from_slice(interior);
        boundaries.push(f64::INFINITY);
        Ok(BinPartition { boundaries })
    }

    /// `n` bins with interior boundaries `4^(2k/n - 1)`, geometrically spaced
    /// between 1/4 and 4 and symmetric around square regions.
    pub fn geometric(n: usize) -> Result<Self> {
        ensure(n >= 1, || "partition needs at least one bin".into())?;
        let interior: Vec<f64> = (1..n)
            .map(|k| 4f64.powf(2.0 * k as f64 / n as f64 - 1.0))
            .collect();
        Self::from_interior(&interior)
    }

    pub fn num_bins(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// All `N + 1` boundaries including `0` and `inf`.
    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn interior(&self) -> &[f64] {
        &self.boundaries[1..self.boundaries.len() - 1]
    }

    /// `(lower, upper]` edges of bin `k`.
    pub fn edges(&self, k: usize) -> (f64, f64) {
        (self.boundaries[k], self.boundaries[k + 1])
    }

    pub fn bin_of(&self, ratio: f64) -> Result<usize> {
        ensure(ratio.is_finite() && ratio > 0.0, || {
            format!("aspect ratio must be positive and finite, got {ratio}")
        })?;
        // first boundary >= ratio is s_k with s_{k-1} < ratio <= s_k
        let k = self.boundaries.partition_point(|&s| s < ratio);
        Ok(k - 1)
    }
}

/// One-hot routing weights over the `N` adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocationWeights {
    index: usize,
    len: usize,
}

impl AllocationWeights {
    pub fn new(index: usize, len: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::OutOfRange {
                what: "allocation",
                index,
                len,
            });
        }
        Ok(AllocationWeights { index, len })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn onehot(&self) -> DVector<f64> {
        DVector::from_fn(self.len, |k, _| if k == self.index { 1.0 } else { 0.0 })
    }
}

pub fn allocate(partition: &BinPartition, ratio: f64) -> Result<AllocationWeights> {
    AllocationWeights::new(partition.bin_of(ratio)?, partition.num_bins())
}

/// Multiplies the `D x N` stack by the one-hot column.
pub fn select_adapted(stack: &DMatrix<f64>, y: &AllocationWeights) -> Result<Feature> {
    ensure_dim("adapted stack columns", y.len(), stack.ncols())?;
    Ok(stack * y.onehot())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub num_adapters: usize,
    /// Bottleneck width; `None` means `max(1, D / 4)`.
    pub hidden_dim: Option<usize>,
    pub lambda: f64,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            num_adapters: 10,
            hidden_dim: None,
            lambda: 0.9,
        }
    }
}

pub fn default_hidden_dim(dim: usize) -> usize {
    (dim / 4).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBank {
    adapters: Vec<Adapter>,
    partition: BinPartition,
    lambda: f64,
    dim: usize,
    hidden_dim: usize,
}

impl AdapterBank {
    pub fn new(adapters: Vec<Adapter>, partition: BinPartition, lambda: f64) -> Result<Self> {
        ensure(!adapters.is_empty(), || "bank needs at least one adapter".into())?;
        ensure_dim("partition bins", adapters.len(), partition.num_bins())?;
        ensure((0.0..=1.0).contains(&lambda), || {
            format!("lambda must lie in [0, 1], got {lambda}")
        })?;
        let dim = adapters[0].dim();
        let hidden_dim = adapters[0].hidden_dim();
        ensure(dim >= 1 && hidden_dim >= 1, || "adapter dims must be positive".into())?;
        for a in &adapters {
            ensure_dim("adapter dim", dim, a.dim())?;
            ensure_dim("adapter hidden dim", hidden_dim, a.hidden_dim())?;
            a.validate()?;
        }
        Ok(AdapterBank {
            adapters,
            partition,
            lambda,
            dim,
            hidden_dim,
        })
    }

    /// Fresh bank: `W2 = 0` and `W1` uniform in `+-1/sqrt(D)`.
    ///
    /// With `W2 = 0` every adapted feature is `(1 - lambda) f`, so cosine
    /// classification starts out identical to the un-adapted features.
    pub fn init(
        dim: usize,
        hidden_dim: usize,
        partition: BinPartition,
        lambda: f64,
        seed: u64,
    ) -> Result<Self> {
        ensure(dim >= 1 && hidden_dim >= 1, || "adapter dims must be positive".into())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        let adapters = (0..partition.num_bins())
            .map(|_| Adapter {
                w1: DMatrix::from_fn(dim, hidden_dim, |_, _| rng.random_range(-bound..=bound)),
                w2: DMatrix::zeros(hidden_dim, dim),
            })
            .collect();
        Self::new(adapters, partition, lambda)
    }

    pub fn from_config(dim: usize, cfg: &BankConfig, partition: Option<BinPartition>, seed: u64) -> Result<Self> {
        let partition = match partition {
            Some(p) => p,
            None => BinPartition::geometric(cfg.num_adapters)?,
        };
        ensure_dim("partition bins", cfg.num_adapters, partition.num_bins())?;
        let hidden = cfg.hidden_dim.unwrap_or_else(|| default_hidden_dim(dim));
        Self::init(dim, hidden, partition, cfg.lambda, seed)
    }

    pub fn adapters(&self) -> &[Adapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [Adapter] {
        &mut self.adapters
    }

    pub fn adapter(&self, j: usize) -> Result<&Adapter> {
        self.adapters.get(j).ok_or(Error::OutOfRange {
            what: "adapter",
            index: j,
            len: self.adapters.len(),
        })
    }

    pub fn partition(&self) -> &BinPartition {
        &self.partition
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        ensure((0.0..=1.0).contains(&lambda), || {
            format!("lambda must lie in [0, 1], got {lambda}")
        })?;
        self.lambda = lambda;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn num_adapters(&self) -> usize {
        self.adapters.len()
    }

    pub fn parameter_count(&self) -> usize {
        2 * self.num_adapters() * self.dim * self.hidden_dim
    }

    /// `lambda * Adapter_j(f) + (1 - lambda) * f`.
    pub fn residual_mix(&self, j: usize, f: &Feature) -> Result<Feature> {
        let out = self.adapter(j)?.forward(f)?;
        Ok(self.mix(&out, f))
    }

    pub(crate) fn mix(&self, adapter_out: &Feature, f: &Feature) -> Feature {
        adapter_out * self.lambda + f * (1.0 - self.lambda)
    }

    /// `D x N` matrix whose column `j` is `residual_mix(j, f)`.
    pub fn adapt_all(&self, f: &Feature) -> Result<DMatrix<f64>> {
        ensure_dim("feature", self.dim, f.len())?;
        let cols = (0..self.num_adapters())
            .map(|j| self.residual_mix(j, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_columns(&cols))
    }

    pub fn allocate(&self, bbox: &BoundingBox) -> Result<AllocationWeights> {
        allocate(&self.partition, aspect_ratio(bbox)?)
    }

    /// Adapted feature for a region. Only the routed adapter is evaluated;
    /// the one-hot selection makes this identical to selecting from
    /// [`AdapterBank::adapt_all`].
    pub fn adapt_region(&self, f: &Feature, bbox: &BoundingBox) -> Result<Feature> {
        ensure(f.iter().all(|v| v.is_finite()), || "feature contains non-finite values".into())?;
        let y = self.allocate(bbox)?;
        self.residual_mix(y.index(), f)
    }

    // -- serialization -----------------------------------------------------

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = BankHeader {
            format: BANK_FORMAT.into(),
            version: BANK_VERSION,
            dim: self.dim,
            hidden_dim: self.hidden_dim,
            num_adapters: self.num_adapters(),
            lambda: self.lambda,
            interior_boundaries: self.partition.interior().to_vec(),
        };
        let mut blob = Vec::with_capacity(self.parameter_count());
        for a in &self.adapters {
            push_row_major(&mut blob, &a.w1);
            push_row_major(&mut blob, &a.w2);
        }
        container::encode(&header, &blob)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, blob): (BankHeader, _) = container::split(BANK_FORMAT, bytes)?;
        container::check_kind(BANK_FORMAT, &h.format)?;
        container::check_version(BANK_FORMAT, h.version, BANK_VERSION)?;
        if h.interior_boundaries.len() + 1 != h.num_adapters || h.dim == 0 || h.hidden_dim == 0 {
            return Err(Error::InconsistentHeader {
                format: BANK_FORMAT,
                detail: format!(
                    "{} adapters with {} interior boundaries, dim {} hidden {}",
                    h.num_adapters,
                    h.interior_boundaries.len(),
                    h.dim,
                    h.hidden_dim
                ),
            });
        }
        let per = h.dim * h.hidden_dim;
        let values = container::decode_f32(BANK_FORMAT, blob, 2 * per * h.num_adapters)?;
        let adapters = values
            .chunks_exact(2 * per)
            .map(|c| Adapter {
                w1: DMatrix::from_row_iterator(h.dim, h.hidden_dim, c[..per].iter().map(|&v| f64::from(v))),
                w2: DMatrix::from_row_iterator(h.hidden_dim, h.dim, c[per..].iter().map(|&v| f64::from(v))),
            })
            .collect();
        let partition = BinPartition::from_interior(&h.interior_boundaries)?;
        Self::new(adapters, partition, h.lambda)
    }

    /// Rounds every weight through `f32`, the precision of the on-disk format.
    pub fn quantized(&self) -> Self {
        let q = |m: &DMatrix<f64>| m.map(|v| f64::from(v as f32));
        AdapterBank {
            adapters: self
                .adapters
                .iter()
                .map(|a| Adapter { w1: q(&a.w1), w2: q(&a.w2) })
                .collect(),
            ..self.clone()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}

fn push_row_major(out: &mut Vec<f32>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)] as f32);
        }
    }
}

const BANK_FORMAT: &str = "sia.adapter_bank";
const BANK_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BankHeader {
    format: String,
    version: u32,
    dim: usize,
    hidden_dim: usize,
    num_adapters: usize,
    lambda: f64,
    /// `s_1 .. s_{N-1}`; `s_0 = 0` and `s_N = inf` are implicit.
    interior_boundaries: Vec<f64>,
}
