//! Sparse CTR predictors: logistic regression, factorization machine and a
//! DeepFM-lite (FM plus a one-hidden-layer ReLU MLP over the same field
//! embeddings).
//!
//! Parameters live in one flat `f32` array. For `F` fields, `H` hashed
//! indices per field, embedding size `K` and `U` hidden units the layout is:
//!
//! | block            | length    | offset of element                     |
//! |------------------|-----------|---------------------------------------|
//! | bias             | 1         | `0`                                   |
//! | linear weights   | `F*H`     | `1 + f*H + i`                         |
//! | embeddings       | `F*H*K`   | `1 + F*H + (f*H + i)*K + k`           |
//! | hidden weights   | `U*F*K`   | `emb_end + u*F*K + j`                 |
//! | hidden biases    | `U`       | `hw_end + u`                          |
//! | output weights   | `U`       | `hb_end + u`                          |
//! | output bias      | 1         | `ow_end`                              |
//!
//! LR stops after the linear block, FM after the embeddings.
//! Forward and backward passes compute in `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::Example;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Lr,
    Fm,
    DeepFm,
}

impl std::str::FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lr" => Ok(ArchKind::Lr),
            "fm" => Ok(ArchKind::Fm),
            "deepfm" => Ok(ArchKind::DeepFm),
            other => Err(Error::InvalidConfig(format!(
                "unknown architecture `{other}` (expected lr, fm or deepfm)"
            ))),
        }
    }
}

pub const DEFAULT_EMBEDDING_DIM: usize = 8;
pub const DEFAULT_HIDDEN_UNITS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub kind: ArchKind,
    pub embedding_dim: usize,
    pub hidden_units: usize,
    pub field_count: usize,
    pub hash_dim: usize,
}

/// Offsets of each parameter block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub linear: usize,
    pub embeddings: usize,
    pub hidden_weights: usize,
    pub hidden_bias: usize,
    pub output_weights: usize,
    pub output_bias: usize,
    pub total: usize,
}

impl ArchDescriptor {
    pub fn lr(field_count: usize, hash_dim: usize) -> Self {
        ArchDescriptor {
            kind: ArchKind::Lr,
            embedding_dim: 0,
            hidden_units: 0,
            field_count,
            hash_dim,
        }
    }

    pub fn fm(field_count: usize, hash_dim: usize, embedding_dim: usize) -> Self {
        ArchDescriptor {
            kind: ArchKind::Fm,
            embedding_dim,
            hidden_units: 0,
            field_count,
            hash_dim,
        }
    }

    pub fn deepfm(field_count: usize, hash_dim: usize, embedding_dim: usize, hidden_units: usize) -> Self {
        ArchDescriptor {
            kind: ArchKind::DeepFm,
            embedding_dim,
            hidden_units,
            field_count,
            hash_dim,
        }
    }

    /// Builds a descriptor of the given kind with the default sizes.
    pub fn with_defaults(kind: ArchKind, field_count: usize, hash_dim: usize) -> Self {
        match kind {
            ArchKind::Lr => Self::lr(field_count, hash_dim),
            ArchKind::Fm => Self::fm(field_count, hash_dim, DEFAULT_EMBEDDING_DIM),
            ArchKind::DeepFm => Self::deepfm(field_count, hash_dim, DEFAULT_EMBEDDING_DIM, DEFAULT_HIDDEN_UNITS),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.field_count == 0 {
            return Err(Error::InvalidConfig("field_count must be positive".into()));
        }
        if self.hash_dim < 2 {
            return Err(Error::InvalidConfig("hash_dim must be >= 2".into()));
        }
        if self.kind != ArchKind::Lr && self.embedding_dim == 0 {
            return Err(Error::InvalidConfig("embedding_dim must be positive".into()));
        }
        if self.kind == ArchKind::DeepFm && self.hidden_units == 0 {
            return Err(Error::InvalidConfig("hidden_units must be positive".into()));
        }
        Ok(())
    }

    /// Embedding size actually used by this architecture (0 for LR).
    pub fn effective_embedding_dim(&self) -> usize {
        match self.kind {
            ArchKind::Lr => 0,
            _ => self.embedding_dim,
        }
    }

    pub fn effective_hidden_units(&self) -> usize {
        match self.kind {
            ArchKind::DeepFm => self.hidden_units,
            _ => 0,
        }
    }

    pub fn layout(&self) -> ParamLayout {
        let fh = self.field_count * self.hash_dim;
        let k = self.effective_embedding_dim();
        let u = self.effective_hidden_units();
        let linear = 1;
        let embeddings = linear + fh;
        let hidden_weights = embeddings + fh * k;
        let hidden_bias = hidden_weights + u * self.field_count * k;
        let output_weights = hidden_bias + u;
        let output_bias = output_weights + u;
        let total = if self.kind == ArchKind::DeepFm {
            output_bias + 1
        } else {
            hidden_weights
        };
        ParamLayout {
            linear,
            embeddings,
            hidden_weights,
            hidden_bias,
            output_weights,
            output_bias,
            total,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

/// Immutable, versioned parameter set. Cloning is cheap; the parameter
/// array is shared.
#[derive(Clone, Debug)]
pub struct ModelSnapshot {
    arch: ArchDescriptor,
    version: u64,
    rng_seed: u64,
    params: Arc<Vec<f32>>,
}

fn uniform_limit(fan_in: usize, fan_out: usize) -> f32 {
    (6.0 / (fan_in + fan_out) as f64).sqrt() as f32
}

impl ModelSnapshot {
    /// Fresh model at version 0. Bias and linear weights start at zero.
    /// Embedding tables (fan-in `hash_dim`, fan-out `embedding_dim`) and MLP
    /// weights are Glorot-uniform; MLP biases start at zero.
    pub fn init(arch: ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut params = vec![0.0_f32; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |block: &mut [f32], limit: f32| {
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            block.iter_mut().for_each(|w| *w = dist.sample(&mut rng));
        };
        let k = arch.effective_embedding_dim();
        if k > 0 {
            fill(
                &mut params[layout.embeddings..layout.hidden_weights],
                uniform_limit(arch.hash_dim, k),
            );
        }
        let u = arch.effective_hidden_units();
        if u > 0 {
            let width = arch.field_count * k;
            fill(
                &mut params[layout.hidden_weights..layout.hidden_bias],
                uniform_limit(width, u),
            );
            fill(
                &mut params[layout.output_weights..layout.output_bias],
                uniform_limit(u, 1),
            );
        }
        Ok(ModelSnapshot {
            arch,
            version: 0,
            rng_seed: seed,
            params: Arc::new(params),
        })
    }

    /// Wraps an explicit parameter vector, checking length and finiteness.
    pub fn from_params(arch: ArchDescriptor, version: u64, rng_seed: u64, params: Vec<f32>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::DescriptorMismatch(format!(
                "{:?} expects {} parameters, got {}",
                arch.kind,
                arch.param_count(),
                params.len()
            )));
        }
        if let Some(offset) = params.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFinite(format!("parameter at offset {offset}")));
        }
        Ok(ModelSnapshot {
            arch,
            version,
            rng_seed,
            params: Arc::new(params),
        })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    /// Same parameters under a new version number.
    pub fn with_version(&self, version: u64) -> Self {
        ModelSnapshot {
            version,
            ..self.clone()
        }
    }

    /// Bitwise equality of descriptor, version, seed and every parameter.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.version == other.version
            && self.rng_seed == other.rng_seed
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn check_example(&self, example: &Example) -> Result<()> {
        if example.indices.len() != self.arch.field_count {
            return Err(Error::FieldCountMismatch {
                expected: self.arch.field_count,
                got: example.indices.len(),
            });
        }
        for (field, &index) in example.indices.iter().enumerate() {
            if index as usize >= self.arch.hash_dim {
                return Err(Error::IndexOutOfRange {
                    id: example.id,
                    field,
                    index,
                    hash_dim: self.arch.hash_dim,
                });
            }
        }
        Ok(())
    }

    fn row(&self, field: usize, index: u32) -> usize {
        field * self.arch.hash_dim + index as usize
    }

    fn activations(&self, example: &Example) -> Activations {
        let arch = &self.arch;
        let layout = arch.layout();
        let p = &self.params[..];
        let k = arch.effective_embedding_dim();
        let fields = arch.field_count;

        let mut logit = p[0] as f64;
        for (f, &i) in example.indices.iter().enumerate() {
            logit += p[layout.linear + self.row(f, i)] as f64;
        }

        let mut sums = vec![0.0; k];
        let mut concat = vec![0.0; fields * k];
        if k > 0 {
            let mut squares = 0.0;
            for (f, &i) in example.indices.iter().enumerate() {
                let base = layout.embeddings + self.row(f, i) * k;
                for d in 0..k {
                    let v = p[base + d] as f64;
                    concat[f * k + d] = v;
                    sums[d] += v;
                    squares += v * v;
                }
            }
            let total: f64 = sums.iter().map(|s| s * s).sum();
            logit += 0.5 * (total - squares);
        }

        let u = arch.effective_hidden_units();
        let mut hidden = vec![0.0; u];
        if u > 0 {
            let width = fields * k;
            let mut out = p[layout.output_bias] as f64;
            for (unit, pre) in hidden.iter_mut().enumerate() {
                let w = &p[layout.hidden_weights + unit * width..layout.hidden_weights + (unit + 1) * width];
                let z = p[layout.hidden_bias + unit] as f64
                    + w.iter().zip(&concat).map(|(&a, &b)| a as f64 * b).sum::<f64>();
                *pre = z;
                if z > 0.0 {
                    out += p[layout.output_weights + unit] as f64 * z;
                }
            }
            logit += out;
        }

        Activations {
            logit,
            sums,
            concat,
            hidden,
        }
    }

    /// Logit `h(x; theta)` of one example.
    pub fn forward(&self, example: &Example) -> Result<f64> {
        self.check_example(example)?;
        let logit = self.activations(example).logit;
        if !logit.is_finite() {
            return Err(Error::NonFinite(format!("logit of example {}", example.id)));
        }
        Ok(logit)
    }

    /// Hidden-layer pre-activations (empty unless DeepFM). Useful for
    /// telling whether a perturbation crosses a ReLU kink.
    pub fn hidden_preactivations(&self, example: &Example) -> Result<Vec<f64>> {
        self.check_example(example)?;
        Ok(self.activations(example).hidden)
    }

    /// Logits of many examples; forward passes may run in parallel but the
    /// output order always matches the input order.
    pub fn forward_batch(&self, examples: &[Example]) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        examples.par_iter().map(|e| self.forward(e)).collect()
    }

    /// Adds `upstream * d(logit)/d(theta)` into `grads`, touching only the
    /// parameters this example reaches.
    pub fn backward(&self, example: &Example, upstream: f64, grads: &mut GradientBuffer) -> Result<()> {
        self.check_example(example)?;
        if grads.len() != self.params.len() {
            return Err(Error::LengthMismatch {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        grads.count += 1;
        if upstream == 0.0 {
            return Ok(());
        }
        let arch = &self.arch;
        let layout = arch.layout();
        let p = &self.params[..];
        let k = arch.effective_embedding_dim();
        let u = arch.effective_hidden_units();
        let fields = arch.field_count;
        let acts = self.activations(example);

        grads.add(0, upstream);
        for (f, &i) in example.indices.iter().enumerate() {
            grads.add(layout.linear + self.row(f, i), upstream);
        }
        if k == 0 {
            return Ok(());
        }

        // d(logit)/d(embedding input), FM part: s_k - v_{f,k}.
        let mut d_concat: Vec<f64> = (0..fields * k).map(|j| acts.sums[j % k] - acts.concat[j]).collect();

        if u > 0 {
            let width = fields * k;
            grads.add(layout.output_bias, upstream);
            for unit in 0..u {
                let z = acts.hidden[unit];
                if z <= 0.0 {
                    continue;
                }
                grads.add(layout.output_weights + unit, upstream * z);
                let dz = p[layout.output_weights + unit] as f64;
                grads.add(layout.hidden_bias + unit, upstream * dz);
                let row = layout.hidden_weights + unit * width;
                for j in 0..width {
                    grads.add(row + j, upstream * dz * acts.concat[j]);
                    d_concat[j] += dz * p[row + j] as f64;
                }
            }
        }

        for (f, &i) in example.indices.iter().enumerate() {
            let base = layout.embeddings + self.row(f, i) * k;
            for d in 0..k {
                grads.add(base + d, upstream * d_concat[f * k + d]);
            }
        }
        Ok(())
    }

    /// Returns a new snapshot (version + 1) with one Adagrad step applied.
    /// `self` is left untouched.
    pub fn apply_update(&self, grads: &GradientBuffer, optimizer: &mut Adagrad) -> Result<ModelSnapshot> {
        self.clone().into_updated(grads, optimizer)
    }

    /// Like [`apply_update`](Self::apply_update) but consumes the snapshot, so
    /// the parameter array is updated in place when nothing else shares it.
    pub fn into_updated(mut self, grads: &GradientBuffer, optimizer: &mut Adagrad) -> Result<ModelSnapshot> {
        if grads.len() != self.params.len() {
            return Err(Error::LengthMismatch {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        optimizer.check(grads)?;
        optimizer.step(Arc::make_mut(&mut self.params).as_mut_slice(), grads)?;
        self.version += 1;
        Ok(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut file = fs::File::create(&tmp)?;
            file.write_all(&bytes)?;
            file.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Serialized form: one JSON manifest line, then the little-endian
    /// `f32` payload.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload: Vec<u8> = self.params.iter().flat_map(|w| w.to_le_bytes()).collect();
        let manifest = SnapshotManifest {
            format: SNAPSHOT_FORMAT.into(),
            format_version: SNAPSHOT_FORMAT_VERSION,
            arch: self.arch,
            version: self.version,
            rng_seed: self.rng_seed,
            param_count: self.params.len(),
            payload_bytes: payload.len(),
            checksum: checksum(&payload),
        };
        let mut out = serde_json::to_vec(&manifest)?;
        out.push(b'\n');
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes.iter().position(|&b| b == b'\n').ok_or(Error::TruncatedSnapshot {
            expected: bytes.len() + 1,
            found: bytes.len(),
        })?;
        let manifest: SnapshotManifest =
            serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::InvalidManifest(e.to_string()))?;
        if manifest.format != SNAPSHOT_FORMAT {
            return Err(Error::InvalidManifest(format!("unknown format `{}`", manifest.format)));
        }
        if manifest.format_version != SNAPSHOT_FORMAT_VERSION {
            return Err(Error::InvalidManifest(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let payload = &bytes[newline + 1..];
        if payload.len() < manifest.payload_bytes {
            return Err(Error::TruncatedSnapshot {
                expected: manifest.payload_bytes,
                found: payload.len(),
            });
        }
        manifest
            .arch
            .validate()
            .map_err(|e| Error::DescriptorMismatch(e.to_string()))?;
        let expected = manifest.arch.param_count();
        if manifest.param_count != expected
            || manifest.payload_bytes != expected * 4
            || payload.len() != manifest.payload_bytes
        {
            return Err(Error::DescriptorMismatch(format!(
                "{:?} descriptor needs {} parameters ({} bytes); manifest declares {} parameters and payload has {} bytes",
                manifest.arch.kind,
                expected,
                expected * 4,
                manifest.param_count,
                payload.len()
            )));
        }
        let actual = checksum(payload);
        if actual != manifest.checksum {
            return Err(Error::ChecksumMismatch {
                expected: manifest.checksum,
                actual,
            });
        }
        let params = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_params(manifest.arch, manifest.version, manifest.rng_seed, params)
    }
}

struct Activations {
    logit: f64,
    /// Per-dimension sum of the active embeddings.
    sums: Vec<f64>,
    /// Active embeddings concatenated field by field.
    concat: Vec<f64>,
    /// Hidden pre-activations.
    hidden: Vec<f64>,
}

pub const SNAPSHOT_FORMAT: &str = "confrank-snapshot";
pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotManifest {
    format: String,
    format_version: u32,
    arch: ArchDescriptor,
    version: u64,
    rng_seed: u64,
    param_count: usize,
    payload_bytes: usize,
    checksum: String,
}

fn checksum(payload: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(payload)))
}

/// Sparse gradient accumulator with the same layout as the parameters.
#[derive(Clone, Debug)]
pub struct GradientBuffer {
    values: Vec<f64>,
    touched: Vec<usize>,
    marked: Vec<bool>,
    count: usize,
}

impl GradientBuffer {
    pub fn new(len: usize) -> Self {
        GradientBuffer {
            values: vec![0.0; len],
            touched: Vec::new(),
            marked: vec![false; len],
            count: 0,
        }
    }

    pub fn for_snapshot(snapshot: &ModelSnapshot) -> Self {
        Self::new(snapshot.params().len())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of backward calls accumulated since the last clear.
    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn add(&mut self, offset: usize, value: f64) {
        if !self.marked[offset] {
            self.marked[offset] = true;
            self.touched.push(offset);
        }
        self.values[offset] += value;
    }

    pub fn get(&self, offset: usize) -> f64 {
        self.values[offset]
    }

    /// Touched offsets with their values, in first-touch order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.touched.iter().map(|&o| (o, self.values[o]))
    }

    pub fn touched(&self) -> usize {
        self.touched.len()
    }

    pub fn clear(&mut self) {
        for &o in &self.touched {
            self.values[o] = 0.0;
            self.marked[o] = false;
        }
        self.touched.clear();
        self.count = 0;
    }
}

fn default_lr() -> f64 {
    0.05
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdagradConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub initial_accumulator: f64,
}

impl Default for AdagradConfig {
    fn default() -> Self {
        AdagradConfig {
            lr: default_lr(),
            eps: default_eps(),
            initial_accumulator: 0.0,
        }
    }
}

/// Adagrad state: `w <- w - lr * g / (sqrt(G) + eps)` where `G` accumulates
/// squared gradients, including the current one. Only touched coordinates
/// are updated.
#[derive(Clone, Debug)]
pub struct Adagrad {
    config: AdagradConfig,
    accum: Vec<f64>,
}

impl Adagrad {
    pub fn new(config: AdagradConfig, param_count: usize) -> Self {
        Adagrad {
            config,
            accum: vec![config.initial_accumulator; param_count],
        }
    }

    pub fn config(&self) -> &AdagradConfig {
        &self.config
    }

    pub fn accumulator(&self, offset: usize) -> f64 {
        self.accum[offset]
    }

    fn check(&self, grads: &GradientBuffer) -> Result<()> {
        if grads.len() != self.accum.len() {
            return Err(Error::LengthMismatch {
                expected: self.accum.len(),
                got: grads.len(),
            });
        }
        if let Some((offset, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { offset });
        }
        Ok(())
    }

    fn step(&mut self, params: &mut [f32], grads: &GradientBuffer) -> Result<()> {
        let AdagradConfig { lr, eps, .. } = self.config;
        for (offset, g) in grads.iter() {
            let acc = &mut self.accum[offset];
            *acc += g * g;
            let updated = params[offset] as f64 - lr * g / (acc.sqrt() + eps);
            let updated = updated as f32;
            if !updated.is_finite() {
                return Err(Error::NonFiniteGradient { offset });
            }
            params[offset] = updated;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn example(indices: Vec<u32>) -> Example {
        Example {
            id: 1,
            timestamp: 0,
            label: true,
            indices,
        }
    }

    #[test]
    fn lr_init_is_all_zero() {
        let snap = ModelSnapshot::init(ArchDescriptor::lr(3, 10), 1).unwrap();
        assert_eq!(snap.params().len(), 3 * 10 + 1);
        assert!(snap.params().iter().all(|&w| w == 0.0));
        assert_eq!(snap.forward(&example(vec![1, 2, 3])).unwrap(), 0.0);
    }

    #[test]
    fn lr_ignores_embedding_and_hidden_sizes() {
        let mut arch = ArchDescriptor::lr(3, 10);
        arch.embedding_dim = 16;
        arch.hidden_units = 32;
        assert_eq!(arch.param_count(), 31);
    }

    #[test]
    fn deepfm_param_count_closed_form() {
        let (f, h, k, u) = (4, 50, 8, 16);
        let arch = ArchDescriptor::deepfm(f, h, k, u);
        // bias + linear + embeddings + W1 + b1 + w2 + b2
        let expected = 1 + f * h + f * h * k + u * (f * k) + u + u + 1;
        assert_eq!(arch.param_count(), expected);
        assert_eq!(expected, 1 + 200 + 1600 + 512 + 16 + 16 + 1);
        let snap = ModelSnapshot::init(arch, 3).unwrap();
        assert_eq!(snap.params().len(), expected);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let arch = ArchDescriptor::deepfm(3, 20, 4, 5);
        let a = ModelSnapshot::init(arch, 7).unwrap();
        let b = ModelSnapshot::init(arch, 7).unwrap();
        let c = ModelSnapshot::init(arch, 8).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn init_respects_glorot_limits() {
        let arch = ArchDescriptor::deepfm(3, 20, 4, 5);
        let snap = ModelSnapshot::init(arch, 7).unwrap();
        let l = arch.layout();
        let p = snap.params();
        assert!(p[..l.embeddings].iter().all(|&w| w == 0.0));
        let emb = uniform_limit(20, 4);
        assert!(p[l.embeddings..l.hidden_weights].iter().all(|w| w.abs() <= emb));
        assert!(p[l.embeddings..l.hidden_weights].iter().any(|&w| w != 0.0));
        assert!(p[l.hidden_bias..l.output_weights].iter().all(|&w| w == 0.0));
        assert_eq!(p[l.output_bias], 0.0);
    }

    #[test]
    fn forward_rejects_bad_examples() {
        let snap = ModelSnapshot::init(ArchDescriptor::fm(2, 8, 2), 1).unwrap();
        assert!(matches!(
            snap.forward(&example(vec![1, 8])),
            Err(Error::IndexOutOfRange { field: 1, index: 8, .. })
        ));
        assert!(matches!(
            snap.forward(&example(vec![1])),
            Err(Error::FieldCountMismatch { expected: 2, got: 1 })
        ));
    }

    fn set_embedding(params: &mut [f32], arch: &ArchDescriptor, field: usize, index: u32, v: &[f32]) {
        let k = arch.embedding_dim;
        let base = arch.layout().embeddings + (field * arch.hash_dim + index as usize) * k;
        params[base..base + k].copy_from_slice(v);
    }

    #[test]
    fn fm_equal_embeddings_interaction() {
        let fields = 5;
        let arch = ArchDescriptor::fm(fields, 6, 3);
        let v = [0.5_f32, -1.25, 2.0];
        let mut params = vec![0.0; arch.param_count()];
        let ex = example(vec![1, 2, 3, 4, 5]);
        for (f, &i) in ex.indices.iter().enumerate() {
            set_embedding(&mut params, &arch, f, i, &v);
        }
        let snap = ModelSnapshot::from_params(arch, 0, 0, params).unwrap();
        let norm2: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum();
        let f = fields as f64;
        let closed_form = 0.5 * (f * f - f) * norm2;
        // Direct pairwise sum over field pairs.
        let pairwise: f64 = (0..fields)
            .flat_map(|i| (i + 1..fields).map(move |j| (i, j)))
            .map(|_| norm2)
            .sum();
        assert!((closed_form - pairwise).abs() < 1e-12);
        assert!((snap.forward(&ex).unwrap() - closed_form).abs() < 1e-9);
    }

    #[test]
    fn fm_identity_matches_pairwise_sum() {
        let arch = ArchDescriptor::fm(6, 30, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..20 {
            let snap = ModelSnapshot::init(arch, seed).unwrap();
            let mut params = snap.params().to_vec();
            params.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
            let snap = ModelSnapshot::from_params(arch, 0, 0, params.clone()).unwrap();
            let ex = example((0..6).map(|_| rng.random_range(0..30)).collect());
            let l = arch.layout();
            let emb = |f: usize| -> Vec<f64> {
                let base = l.embeddings + (f * 30 + ex.indices[f] as usize) * 4;
                params[base..base + 4].iter().map(|&x| x as f64).collect()
            };
            let mut expected = params[0] as f64;
            for f in 0..6 {
                expected += params[l.linear + f * 30 + ex.indices[f] as usize] as f64;
                for g in f + 1..6 {
                    expected += emb(f).iter().zip(emb(g)).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            assert!((snap.forward(&ex).unwrap() - expected).abs() < 1e-5);
        }
    }

    #[test]
    fn deepfm_with_zero_mlp_equals_fm() {
        let fm_arch = ArchDescriptor::fm(3, 12, 4);
        let deep_arch = ArchDescriptor::deepfm(3, 12, 4, 7);
        let fm = ModelSnapshot::init(fm_arch, 5).unwrap();
        let mut params = vec![0.0; deep_arch.param_count()];
        params[..fm_arch.param_count()].copy_from_slice(fm.params());
        let deep = ModelSnapshot::from_params(deep_arch, 0, 0, params).unwrap();
        let ex = example(vec![3, 0, 11]);
        assert_eq!(fm.forward(&ex).unwrap(), deep.forward(&ex).unwrap());
    }

    #[test]
    fn backward_zero_upstream_is_no_op() {
        let snap = ModelSnapshot::init(ArchDescriptor::deepfm(3, 12, 4, 7), 5).unwrap();
        let mut g = GradientBuffer::for_snapshot(&snap);
        snap.backward(&example(vec![1, 2, 3]), 0.0, &mut g).unwrap();
        assert_eq!(g.touched(), 0);
        assert_eq!(g.count(), 1);
    }

    #[test]
    fn lr_backward_hits_active_weights() {
        let arch = ArchDescriptor::lr(3, 10);
        let snap = ModelSnapshot::init(arch, 1).unwrap();
        let mut g = GradientBuffer::for_snapshot(&snap);
        snap.backward(&example(vec![4, 0, 9]), -0.75, &mut g).unwrap();
        let hit: Vec<(usize, f64)> = g.iter().collect();
        assert_eq!(hit, vec![(0, -0.75), (1 + 4, -0.75), (1 + 10, -0.75), (1 + 29, -0.75)]);
        g.clear();
        assert_eq!(g.touched(), 0);
        assert!(g.iter().next().is_none());
        assert_eq!(g.get(5), 0.0);
    }

    fn fd_check(arch: ArchDescriptor, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = ModelSnapshot::init(arch, seed).unwrap();
        let mut params = base.params().to_vec();
        params.iter_mut().for_each(|w| *w = rng.random_range(-0.5..0.5));
        let snap = ModelSnapshot::from_params(arch, 0, 0, params.clone()).unwrap();
        let ex = example(
            (0..arch.field_count)
                .map(|_| rng.random_range(0..arch.hash_dim as u32))
                .collect(),
        );
        let mut grads = GradientBuffer::for_snapshot(&snap);
        snap.backward(&ex, 1.0, &mut grads).unwrap();
        for _ in 0..25 {
            let offset = match grads.touched() {
                0 => 0,
                n => grads.iter().nth(rng.random_range(0..n)).unwrap().0,
            };
            let h = 1e-3_f32;
            let eval = |delta: f32| {
                let mut p = params.clone();
                p[offset] += delta;
                let actual = p[offset] - params[offset];
                (
                    ModelSnapshot::from_params(arch, 0, 0, p).unwrap().forward(&ex).unwrap(),
                    actual as f64,
                )
            };
            let signs = |delta: f32| {
                let mut p = params.clone();
                p[offset] += delta;
                let s = ModelSnapshot::from_params(arch, 0, 0, p).unwrap();
                s.hidden_preactivations(&ex)
                    .unwrap()
                    .iter()
                    .map(|z| *z > 0.0)
                    .collect::<Vec<_>>()
            };
            if signs(h) != signs(-h) {
                // Stencil straddles a ReLU kink; the derivative is undefined there.
                continue;
            }
            let (up, hu) = eval(h);
            let (down, hd) = eval(-h);
            let numeric = (up - down) / (hu - hd);
            let analytic = grads.get(offset);
            let scale = analytic.abs().max(numeric.abs());
            assert!(
                (analytic - numeric).abs() <= 1e-6_f64.max(1e-4 * scale),
                "{:?} offset {offset}: analytic {analytic} numeric {numeric}",
                arch.kind
            );
        }
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        for seed in 0..4 {
            fd_check(ArchDescriptor::lr(4, 9), seed);
            fd_check(ArchDescriptor::fm(4, 9, 3), seed);
            fd_check(ArchDescriptor::deepfm(4, 9, 3, 5), seed);
        }
    }

    #[test]
    fn zero_gradient_update_keeps_params() {
        let snap = ModelSnapshot::init(ArchDescriptor::fm(2, 5, 2), 3).unwrap();
        let mut opt = Adagrad::new(AdagradConfig::default(), snap.params().len());
        let mut g = GradientBuffer::for_snapshot(&snap);
        g.add(3, 0.0);
        let next = snap.apply_update(&g, &mut opt).unwrap();
        assert_eq!(next.version(), snap.version() + 1);
        assert!(next
            .params()
            .iter()
            .zip(snap.params())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn single_adagrad_step_arithmetic() {
        let arch = ArchDescriptor::lr(1, 2);
        let snap = ModelSnapshot::init(arch, 0).unwrap();
        let cfg = AdagradConfig {
            lr: 0.1,
            eps: 1e-8,
            initial_accumulator: 0.0,
        };
        let mut opt = Adagrad::new(cfg, arch.param_count());
        let mut g = GradientBuffer::for_snapshot(&snap);
        g.add(1, 1.0);
        let next = snap.apply_update(&g, &mut opt).unwrap();
        assert_eq!(opt.accumulator(1), 1.0);
        assert!((next.params()[1] as f64 + 0.1).abs() < 1e-7);
        // Original untouched.
        assert_eq!(snap.params()[1], 0.0);
    }

    #[test]
    fn repeated_gradients_give_shrinking_steps() {
        let arch = ArchDescriptor::lr(1, 2);
        let mut snap = ModelSnapshot::init(arch, 0).unwrap();
        let mut opt = Adagrad::new(AdagradConfig::default(), arch.param_count());
        let mut g = GradientBuffer::for_snapshot(&snap);
        g.add(1, 0.3);
        let mut last_step = f64::INFINITY;
        for _ in 0..50 {
            let next = snap.apply_update(&g, &mut opt).unwrap();
            let step = (next.params()[1] as f64 - snap.params()[1] as f64).abs();
            assert!(step <= last_step);
            last_step = step;
            snap = next;
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_with_offset() {
        let snap = ModelSnapshot::init(ArchDescriptor::lr(1, 4), 0).unwrap();
        let mut opt = Adagrad::new(AdagradConfig::default(), snap.params().len());
        let mut g = GradientBuffer::for_snapshot(&snap);
        g.add(2, 1.0);
        g.add(3, f64::NAN);
        assert!(matches!(
            snap.apply_update(&g, &mut opt),
            Err(Error::NonFiniteGradient { offset: 3 })
        ));
        // Nothing applied.
        assert_eq!(opt.accumulator(2), 0.0);
    }

    #[test]
    fn into_updated_does_not_disturb_shared_snapshot() {
        let snap = ModelSnapshot::init(ArchDescriptor::lr(1, 4), 0).unwrap();
        let held = snap.clone();
        let mut opt = Adagrad::new(AdagradConfig::default(), snap.params().len());
        let mut g = GradientBuffer::for_snapshot(&snap);
        g.add(1, 1.0);
        let next = snap.into_updated(&g, &mut opt).unwrap();
        assert_eq!(held.params()[1], 0.0);
        assert!(next.params()[1] < 0.0);
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        let snap = ModelSnapshot::init(ArchDescriptor::deepfm(3, 16, 4, 6), 99)
            .unwrap()
            .with_version(12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.snap");
        snap.save(&path).unwrap();
        let loaded = ModelSnapshot::load(&path).unwrap();
        assert!(snap.bit_eq(&loaded));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let snap = ModelSnapshot::init(ArchDescriptor::fm(2, 8, 2), 1).unwrap();
        let mut bytes = snap.to_bytes().unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        assert!(matches!(
            ModelSnapshot::from_bytes(&bytes),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn truncated_file_is_reported() {
        let snap = ModelSnapshot::init(ArchDescriptor::fm(2, 8, 2), 1).unwrap();
        let bytes = snap.to_bytes().unwrap();
        assert!(matches!(
            ModelSnapshot::from_bytes(&bytes[..bytes.len() - 5]),
            Err(Error::TruncatedSnapshot { .. })
        ));
        let header_only = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert!(matches!(
            ModelSnapshot::from_bytes(&bytes[..header_only]),
            Err(Error::TruncatedSnapshot { .. })
        ));
    }

    #[test]
    fn lr_manifest_over_fm_payload_is_descriptor_mismatch() {
        let fm = ModelSnapshot::init(ArchDescriptor::fm(2, 8, 2), 1).unwrap();
        let bytes = fm.to_bytes().unwrap();
        let newline = bytes.iter().position(|&b| b == b'\n').unwrap();
        let mut manifest: serde_json::Value = serde_json::from_slice(&bytes[..newline]).unwrap();
        manifest["arch"]["kind"] = "lr".into();
        let mut forged = serde_json::to_vec(&manifest).unwrap();
        forged.extend_from_slice(&bytes[newline..]);
        assert!(matches!(
            ModelSnapshot::from_bytes(&forged),
            Err(Error::DescriptorMismatch(_))
        ));
    }
}
