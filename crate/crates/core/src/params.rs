//! Named parameter storage with a deterministic flat layout.
//!
//! A [`ParamSet`] keeps its entries in lexicographic name order, so the
//! flattened vector never depends on insertion order. All values are `f64`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MgError, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(MgError::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape.get(1).copied().unwrap_or(1);
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.shape.get(1).copied().unwrap_or(1);
        &mut self.data[r * cols..(r + 1) * cols]
    }
}

/// Ordered list of `(name, dims)` pairs describing a [`ParamSet`] layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    entries: Vec<(String, Vec<usize>)>,
}

impl ShapeSpec {
    /// Builds a spec, sorting entries by name. Duplicate names are rejected.
    pub fn new(mut entries: Vec<(String, Vec<usize>)>) -> Result<Self> {
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(MgError::LayoutMismatch(format!(
                "duplicate parameter name `{}`",
                w[0].0
            )));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, Vec<usize>)] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, d)| d.iter().product::<usize>())
            .sum()
    }
}

/// Learnable parameters keyed by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces an entry. Rejects non-finite values.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if tensor.data.iter().any(|x| !x.is_finite()) {
            return Err(MgError::NonFinite(format!("parameter `{name}`")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, tensor: Tensor) -> Result<Self> {
        self.insert(name, tensor)?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn shape_spec(&self) -> ShapeSpec {
        ShapeSpec {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.shape.clone()))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape.clone())))
                .collect(),
        }
    }

    pub fn zeros(spec: &ShapeSpec) -> Self {
        Self {
            entries: spec
                .entries
                .iter()
                .map(|(k, d)| (k.clone(), Tensor::zeros(d.clone())))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape == vb.shape)
    }

    pub(crate) fn check_layout(&self, other: &ParamSet, what: &str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(MgError::LayoutMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape_spec().entries,
                other.shape_spec().entries
            )))
        }
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values().map(|x| x * x).sum()
    }

    pub fn norm_inf(&self) -> f64 {
        self.values().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Inner product; layouts are assumed equal.
    pub fn dot(&self, other: &ParamSet) -> f64 {
        self.values().zip(other.values()).map(|(a, b)| a * b).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.values().flat_map(|t| t.data.iter().copied())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub(crate) fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(MgError::NonFinite(what.to_string()))
        }
    }

    /// `self += a * other`, element-wise. Layouts must match.
    pub(crate) fn axpy(&mut self, a: f64, other: &ParamSet) {
        for (dst, src) in self.entries.values_mut().zip(other.entries.values()) {
            for (x, y) in dst.data.iter_mut().zip(&src.data) {
                *x += a * y;
            }
        }
    }

    /// Returns `self + a * other`.
    pub fn add_scaled(&self, a: f64, other: &ParamSet) -> Result<ParamSet> {
        self.check_layout(other, "add_scaled")?;
        let mut out = self.clone();
        out.axpy(a, other);
        out.ensure_finite("add_scaled result")?;
        Ok(out)
    }

    pub fn scaled(&self, a: f64) -> ParamSet {
        let mut out = self.clone();
        for t in out.entries.values_mut() {
            t.data.iter_mut().for_each(|x| *x *= a);
        }
        out
    }

    /// Stable 64-bit FNV-1a digest over names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0100_0000_01b3;
        let mut h = OFFSET;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(PRIME);
            }
        };
        for (k, t) in &self.entries {
            eat(k.as_bytes());
            for d in &t.shape {
                eat(&(*d as u64).to_le_bytes());
            }
            for x in &t.data {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Concatenates all entries in name order.
pub fn flatten(p: &ParamSet) -> Vec<f64> {
    p.values().collect()
}

/// Inverse of [`flatten`] for the given layout.
pub fn unflatten(values: &[f64], spec: &ShapeSpec) -> Result<ParamSet> {
    let total = spec.total();
    if values.len() != total {
        return Err(MgError::LengthMismatch {
            expected: total,
            actual: values.len(),
        });
    }
    let mut out = ParamSet::new();
    let mut offset = 0;
    for (name, dims) in &spec.entries {
        let n: usize = dims.iter().product();
        out.insert(
            name.clone(),
            Tensor::new(dims.clone(), values[offset..offset + n].to_vec())?,
        )?;
        offset += n;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    Raw,
    #[default]
    TensorNormalized,
}

/// A perturbation direction with the same layout as some [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    params: ParamSet,
    mode: NormMode,
}

impl Direction {
    /// Wraps arbitrary values as a raw direction.
    pub fn raw(params: ParamSet) -> Self {
        Self {
            params,
            mode: NormMode::Raw,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }
}

/// Draws an i.i.d. standard-normal direction with layout `spec`.
///
/// Under [`NormMode::TensorNormalized`] each entry is rescaled to the L2 norm
/// of the matching entry of `reference` (zero when that norm is zero).
pub fn random_direction(
    spec: &ShapeSpec,
    seed: u64,
    reference: &ParamSet,
    mode: NormMode,
) -> Result<Direction> {
    if reference.shape_spec() != *spec {
        return Err(MgError::LayoutMismatch(
            "random_direction: reference does not match spec".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, dims) in spec.entries() {
        let n: usize = dims.iter().product();
        let mut data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        if mode == NormMode::TensorNormalized {
            let target = reference.get(name).map_or(0.0, Tensor::norm);
            let own = data.iter().map(|x| x * x).sum::<f64>().sqrt();
            let factor = if target == 0.0 || own == 0.0 {
                0.0
            } else {
                target / own
            };
            data.iter_mut().for_each(|x| *x *= factor);
        }
        params.insert(name.clone(), Tensor::new(dims.clone(), data)?)?;
    }
    Ok(Direction { params, mode })
}

/// Returns `p + m * d1 + n * d2` without touching `p`.
pub fn perturb(p: &ParamSet, d1: &Direction, m: f64, d2: &Direction, n: f64) -> Result<ParamSet> {
    p.check_layout(&d1.params, "perturb (first direction)")?;
    p.check_layout(&d2.params, "perturb (second direction)")?;
    let mut out = p.clone();
    for ((dst, a), b) in out
        .entries
        .values_mut()
        .zip(d1.params.entries.values())
        .zip(d2.params.entries.values())
    {
        for ((x, da), db) in dst.data.iter_mut().zip(&a.data).zip(&b.data) {
            *x = *x + m * da + n * db;
        }
    }
    out.ensure_finite("perturbed parameters")?;
    Ok(out)
}

const CKPT_MAGIC: &[u8; 8] = b"MGCKPT01";

#[derive(Serialize, Deserialize)]
struct CkptEntry {
    name: String,
    dims: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    entries: Vec<CkptEntry>,
    total: usize,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Writes a `.mgckpt` file: magic, u64 LE header length, JSON header, then
/// every value as little-endian f64 in flatten order.
pub fn save_checkpoint(path: &Path, params: &ParamSet, meta: serde_json::Value) -> Result<()> {
    let mut offset = 0;
    let entries = params
        .iter()
        .map(|(name, t)| {
            let e = CkptEntry {
                name: name.to_string(),
                dims: t.shape().to_vec(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&CkptHeader {
        entries,
        total: offset,
        meta,
    })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for x in params.values() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`], returning parameters and metadata.
pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, serde_json::Value)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(MgError::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let header: CkptHeader = serde_json::from_slice(&header)?;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != header.total * 8 {
        return Err(MgError::Checkpoint(format!(
            "expected {} values, found {} bytes",
            header.total,
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut params = ParamSet::new();
    for e in &header.entries {
        let n: usize = e.dims.iter().product();
        if e.offset + n > values.len() {
            return Err(MgError::Checkpoint(format!("entry `{}` out of bounds", e.name)));
        }
        params.insert(
            e.name.clone(),
            Tensor::new(e.dims.clone(), values[e.offset..e.offset + n].to_vec())?,
        )?;
    }
    Ok((params, header.meta))
}
