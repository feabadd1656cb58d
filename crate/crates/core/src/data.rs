//! Interaction datasets: loading, splitting, negative sampling, statistics and
//! a planted-factor synthetic generator.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MgError, Result};
use crate::models::Triplet;

/// Dense row-major matrix of item content features.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(MgError::LengthMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Modality name to `num_items x dim` feature matrix.
pub type Features = BTreeMap<String, Matrix>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = MgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(MgError::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Result of [`load_interactions`].
#[derive(Debug, Clone, PartialEq)]
pub struct RawInteractions {
    pub user_tokens: Vec<String>,
    pub item_tokens: Vec<String>,
    pub pairs: Vec<(usize, usize)>,
    pub duplicates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_users: usize,
    num_items: usize,
    interactions: Vec<(usize, usize)>,
    splits: Vec<Split>,
    positives: Vec<BTreeSet<usize>>,
    pub features: Features,
    pub item_tokens: Vec<String>,
    pub user_tokens: Vec<String>,
}

impl Dataset {
    /// Builds a dataset with every interaction assigned to the training split.
    /// Duplicate pairs are dropped.
    pub fn new(num_users: usize, num_items: usize, pairs: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut interactions = Vec::with_capacity(pairs.len());
        let mut positives = vec![BTreeSet::new(); num_users];
        for (u, i) in pairs {
            if u >= num_users {
                return Err(MgError::IndexOutOfRange {
                    what: "user",
                    index: u,
                    limit: num_users,
                });
            }
            if i >= num_items {
                return Err(MgError::IndexOutOfRange {
                    what: "item",
                    index: i,
                    limit: num_items,
                });
            }
            if seen.insert((u, i)) {
                interactions.push((u, i));
                positives[u].insert(i);
            }
        }
        let splits = vec![Split::Train; interactions.len()];
        Ok(Self {
            num_users,
            num_items,
            interactions,
            splits,
            positives,
            features: Features::new(),
            item_tokens: (0..num_items).map(|i| format!("i{i}")).collect(),
            user_tokens: (0..num_users).map(|u| format!("u{u}")).collect(),
        })
    }

    pub fn from_raw(raw: RawInteractions) -> Result<Self> {
        let mut ds = Self::new(raw.user_tokens.len(), raw.item_tokens.len(), raw.pairs)?;
        ds.user_tokens = raw.user_tokens;
        ds.item_tokens = raw.item_tokens;
        Ok(ds)
    }

    pub fn with_features(mut self, features: Features) -> Result<Self> {
        for (m, f) in &features {
            if f.rows() != self.num_items {
                return Err(MgError::LayoutMismatch(format!(
                    "features for `{m}` have {} rows, dataset has {} items",
                    f.rows(),
                    self.num_items
                )));
            }
        }
        self.features = features;
        Ok(self)
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn interactions(&self) -> &[(usize, usize)] {
        &self.interactions
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    /// All positives of `u`, regardless of split.
    pub fn positives(&self, u: usize) -> &BTreeSet<usize> {
        &self.positives[u]
    }

    /// Items of `u` in the given split.
    pub fn items_in(&self, u: usize, split: Split) -> BTreeSet<usize> {
        self.by_split(split)
            .filter(|(uu, _)| *uu == u)
            .map(|(_, i)| i)
            .collect()
    }

    pub fn by_split(&self, split: Split) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.interactions
            .iter()
            .zip(&self.splits)
            .filter(move |(_, s)| **s == split)
            .map(|(p, _)| *p)
    }

    /// Per-user item sets for one split.
    pub fn split_sets(&self, split: Split) -> Vec<BTreeSet<usize>> {
        let mut sets = vec![BTreeSet::new(); self.num_users];
        for (u, i) in self.by_split(split) {
            sets[u].insert(i);
        }
        sets
    }

    pub fn feature_dims(&self) -> BTreeMap<String, usize> {
        self.features.iter().map(|(m, f)| (m.clone(), f.cols())).collect()
    }
}

/// Reads `user<TAB>item` lines. A first line starting with `user` is a header.
/// Whitespace separation is accepted when a line has no tab.
pub fn load_interactions(path: &Path) -> Result<RawInteractions> {
    let text = fs::read_to_string(path)?;
    let mut users: HashMap<String, usize> = HashMap::new();
    let mut items: HashMap<String, usize> = HashMap::new();
    let mut raw = RawInteractions {
        user_tokens: Vec::new(),
        item_tokens: Vec::new(),
        pairs: Vec::new(),
        duplicates: 0,
    };
    let mut seen = BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if n == 0 && line.starts_with("user") {
            continue;
        }
        let fields: Vec<&str> = if line.contains('\t') {
            line.split('\t').collect()
        } else {
            line.split_whitespace().collect()
        };
        if fields.len() != 2 || fields.iter().any(|f| f.trim().is_empty()) {
            return Err(MgError::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: format!("expected 2 fields, found {}", fields.len()),
            });
        }
        let u = intern(&mut users, &mut raw.user_tokens, fields[0].trim());
        let i = intern(&mut items, &mut raw.item_tokens, fields[1].trim());
        if seen.insert((u, i)) {
            raw.pairs.push((u, i));
        } else {
            raw.duplicates += 1;
        }
    }
    if raw.pairs.is_empty() {
        return Err(MgError::NoInteractions(path.to_path_buf()));
    }
    if raw.duplicates > 0 {
        warn!("{}: dropped {} duplicate interactions", path.display(), raw.duplicates);
    }
    Ok(raw)
}

fn intern(map: &mut HashMap<String, usize>, tokens: &mut Vec<String>, tok: &str) -> usize {
    if let Some(&i) = map.get(tok) {
        return i;
    }
    let i = tokens.len();
    map.insert(tok.to_string(), i);
    tokens.push(tok.to_string());
    i
}

pub fn write_interactions(path: &Path, ds: &Dataset) -> Result<()> {
    let mut out = String::from("user\titem\n");
    for &(u, i) in &ds.interactions {
        out.push_str(&ds.user_tokens[u]);
        out.push('\t');
        out.push_str(&ds.item_tokens[i]);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Result of [`load_features`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLoad {
    pub matrix: Matrix,
    /// Items without a row (filled with zeros).
    pub missing: usize,
    /// Rows whose token is not a known item (ignored).
    pub unknown: usize,
}

/// Reads `item,v0,...,v{D-1}` rows aligned to `item_tokens`.
pub fn load_features(path: &Path, modality: &str, item_tokens: &[String]) -> Result<FeatureLoad> {
    let text = fs::read_to_string(path)?;
    let index: HashMap<&str, usize> = item_tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();
    let mut width = None;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; item_tokens.len()];
    let mut unknown = 0;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let token = fields.next().unwrap_or("").trim();
        let values = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| MgError::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: e.to_string(),
            })?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MgError::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: "non-finite feature value".into(),
            });
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(MgError::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    msg: format!("expected {w} values, found {}", values.len()),
                })
            }
            _ => {}
        }
        match index.get(token) {
            Some(&i) => rows[i] = Some(values),
            None => unknown += 1,
        }
    }
    let width = width.ok_or_else(|| MgError::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: "no feature rows".into(),
    })?;
    if width == 0 {
        return Err(MgError::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "feature rows carry no values".into(),
        });
    }
    let missing = rows.iter().filter(|r| r.is_none()).count();
    let data: Vec<f64> = rows
        .into_iter()
        .flat_map(|r| r.unwrap_or_else(|| vec![0.0; width]))
        .collect();
    if missing > 0 || unknown > 0 {
        warn!("modality `{modality}`: {missing} items without features, {unknown} unknown tokens");
    }
    Ok(FeatureLoad {
        matrix: Matrix::new(item_tokens.len(), width, data)?,
        missing,
        unknown,
    })
}

/// Writes features in the format read by [`load_features`].
pub fn write_features(path: &Path, matrix: &Matrix, item_tokens: &[String]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for (i, tok) in item_tokens.iter().enumerate().take(matrix.rows()) {
        write!(w, "{tok}")?;
        for v in matrix.row(i) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

/// Per-user random split. Users with fewer than three interactions stay in
/// train; others get `max(1, floor(n * r))` valid and test items, the rest train.
pub fn split(dataset: &Dataset, ratios: SplitRatios, seed: u64) -> Result<Dataset> {
    let sum = ratios.train + ratios.valid + ratios.test;
    if (sum - 1.0).abs() > 1e-9 || ratios.train < 0.0 || ratios.valid < 0.0 || ratios.test < 0.0 {
        return Err(MgError::Config(format!("split ratios must sum to 1 (got {sum})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_users];
    for (idx, &(u, _)) in dataset.interactions.iter().enumerate() {
        by_user[u].push(idx);
    }
    let mut splits = vec![Split::Train; dataset.interactions.len()];
    for idx in &mut by_user {
        let n = idx.len();
        if n < 3 {
            continue;
        }
        idx.shuffle(&mut rng);
        let n_valid = ((n as f64 * ratios.valid).floor() as usize).max(1);
        let n_test = ((n as f64 * ratios.test).floor() as usize).max(1).min(n - n_valid);
        for &j in &idx[..n_valid] {
            splits[j] = Split::Valid;
        }
        for &j in &idx[n_valid..n_valid + n_test] {
            splits[j] = Split::Test;
        }
    }
    let mut out = dataset.clone();
    out.splits = splits;
    Ok(out)
}

/// Draws BPR triplets from the training split.
pub struct TripletSampler<'a> {
    dataset: &'a Dataset,
    train: Vec<(usize, usize)>,
}

impl<'a> TripletSampler<'a> {
    pub fn new(dataset: &'a Dataset) -> Result<Self> {
        let train: Vec<(usize, usize)> = dataset.by_split(Split::Train).collect();
        if train.is_empty() {
            return Err(MgError::Sampling("training split is empty".into()));
        }
        if train
            .iter()
            .all(|&(u, _)| dataset.positives[u].len() >= dataset.num_items)
        {
            return Err(MgError::Sampling(
                "every training user has interacted with every item".into(),
            ));
        }
        Ok(Self { dataset, train })
    }

    /// Uniform training interaction with a uniform non-positive item.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Triplet {
        loop {
            let (u, i) = self.train[rng.random_range(0..self.train.len())];
            let pos = &self.dataset.positives[u];
            if pos.len() >= self.dataset.num_items {
                continue;
            }
            loop {
                let j = rng.random_range(0..self.dataset.num_items);
                if !pos.contains(&j) {
                    return Triplet::new(u, i, j);
                }
            }
        }
    }

    pub fn sample_batch<R: Rng>(&self, rng: &mut R, n: usize) -> Vec<Triplet> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// One triplet per training interaction, negatives drawn from `seed`.
    /// Used as the fixed evaluation batch for losses and landscapes.
    pub fn full_pass(&self, seed: u64) -> Vec<Triplet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.train
            .iter()
            .filter(|&&(u, _)| self.dataset.positives[u].len() < self.dataset.num_items)
            .map(|&(u, i)| {
                let pos = &self.dataset.positives[u];
                loop {
                    let j = rng.random_range(0..self.dataset.num_items);
                    if !pos.contains(&j) {
                        return Triplet::new(u, i, j);
                    }
                }
            })
            .collect()
    }
}

/// Single-draw convenience over [`TripletSampler`].
pub fn sample_triplet<R: Rng>(dataset: &Dataset, rng: &mut R) -> Result<Triplet> {
    Ok(TripletSampler::new(dataset)?.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub sparsity: f64,
}

impl DatasetStats {
    pub fn from_counts(users: usize, items: usize, interactions: usize) -> Self {
        let cells = users as f64 * items as f64;
        let sparsity = if cells > 0.0 {
            (1.0 - interactions as f64 / cells).clamp(0.0, 1.0)
        } else {
            0.0
        };
        Self {
            users,
            items,
            interactions,
            sparsity,
        }
    }

    /// Sparsity as a percentage rounded to two decimals.
    pub fn sparsity_percent(&self) -> f64 {
        (self.sparsity * 10_000.0).round() / 100.0
    }
}

pub fn stats(dataset: &Dataset) -> DatasetStats {
    DatasetStats::from_counts(dataset.num_users, dataset.num_items, dataset.interactions.len())
}

/// Parameters of [`synth_generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub latent_dim: usize,
    pub modality_dims: BTreeMap<String, usize>,
    pub noise_std: f64,
    pub interactions_per_user: usize,
    /// Standard deviation of the planted scores; larger values concentrate interactions.
    pub score_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_items: 100,
            latent_dim: 8,
            modality_dims: [("text".to_string(), 16), ("visual".to_string(), 16)].into(),
            noise_std: 0.1,
            interactions_per_user: 10,
            score_scale: 3.0,
            seed: 0,
        }
    }
}

/// Synthetic dataset with the ground truth used to generate it.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub dataset: Dataset,
    /// `num_users x latent_dim`
    pub user_latents: Matrix,
    /// `num_items x latent_dim`
    pub item_latents: Matrix,
    /// Per modality, the `dim x latent_dim` map from item latent to feature.
    pub feature_maps: BTreeMap<String, Matrix>,
}

impl SynthDataset {
    /// Planted preference score, scaled as used for sampling.
    pub fn planted_score(&self, u: usize, i: usize, scale: f64) -> f64 {
        let d = self.user_latents.cols();
        let dot: f64 = self
            .user_latents
            .row(u)
            .iter()
            .zip(self.item_latents.row(i))
            .map(|(a, b)| a * b)
            .sum();
        scale * dot / (d as f64).sqrt()
    }
}

/// Plants user and item latents `~ N(0, 1)`, builds features as a fixed random
/// linear map of the item latent plus `N(0, noise_std^2)` noise, and samples
/// each user's interactions without replacement with probability
/// proportional to `softmax(score_scale * <u, v> / sqrt(d))`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.num_users == 0 || cfg.num_items == 0 || cfg.latent_dim == 0 || cfg.interactions_per_user == 0 {
        return Err(MgError::Config("synthetic counts must be at least 1".into()));
    }
    if cfg.noise_std.is_nan() || cfg.noise_std < 0.0 {
        return Err(MgError::Config("noise_std must be non-negative".into()));
    }
    let d = cfg.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gauss = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    };
    let user_latents = Matrix::new(cfg.num_users, d, gauss(cfg.num_users * d, &mut rng))?;
    let item_latents = Matrix::new(cfg.num_items, d, gauss(cfg.num_items * d, &mut rng))?;

    let mut features = Features::new();
    let mut feature_maps = BTreeMap::new();
    for (m, &dim) in &cfg.modality_dims {
        if dim == 0 {
            return Err(MgError::Config(format!("modality `{m}` has zero dimension")));
        }
        let map: Vec<f64> = gauss(dim * d, &mut rng)
            .into_iter()
            .map(|x| x / (d as f64).sqrt())
            .collect();
        let map = Matrix::new(dim, d, map)?;
        let mut feats = Matrix::zeros(cfg.num_items, dim);
        let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE))
            .map_err(|e| MgError::Config(e.to_string()))?;
        for i in 0..cfg.num_items {
            let v = item_latents.row(i);
            for (r, out) in feats.row_mut(i).iter_mut().enumerate() {
                let clean: f64 = map.row(r).iter().zip(v).map(|(a, b)| a * b).sum();
                *out = if cfg.noise_std > 0.0 {
                    clean + noise.sample(&mut rng)
                } else {
                    clean
                };
            }
        }
        features.insert(m.clone(), feats);
        feature_maps.insert(m.clone(), map);
    }

    let per_user = cfg.interactions_per_user.min(cfg.num_items);
    let planted = SynthDataset {
        dataset: Dataset::new(cfg.num_users, cfg.num_items, Vec::new())?,
        user_latents,
        item_latents,
        feature_maps,
    };
    let mut pairs = Vec::with_capacity(cfg.num_users * per_user);
    for u in 0..cfg.num_users {
        // Gumbel top-k: equivalent to sequential softmax sampling without replacement.
        let mut keys: Vec<(f64, usize)> = (0..cfg.num_items)
            .map(|i| {
                let uni: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                (planted.planted_score(u, i, cfg.score_scale) - (-uni.ln()).ln(), i)
            })
            .collect();
        keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        pairs.extend(keys[..per_user].iter().map(|&(_, i)| (u, i)));
    }
    let dataset = Dataset::new(cfg.num_users, cfg.num_items, pairs)?.with_features(features)?;
    Ok(SynthDataset {
        dataset,
        ..planted
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn loads_interactions() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "a.tsv", "u1 i1\nu1 i2\n");
        let raw = load_interactions(&p).unwrap();
        assert_eq!((raw.user_tokens.len(), raw.item_tokens.len(), raw.pairs.len()), (1, 2, 2));

        let p = write_tmp(&dir, "b.tsv", "user\titem\nu1\ti1\nu2\ti1\nu1\ti1\n");
        let raw = load_interactions(&p).unwrap();
        assert_eq!(raw.pairs, vec![(0, 0), (1, 0)]);
        assert_eq!(raw.duplicates, 1);
    }

    #[test]
    fn interaction_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "empty.tsv", "");
        assert!(matches!(load_interactions(&p), Err(MgError::NoInteractions(_))));
        let p = write_tmp(&dir, "bad.tsv", "u1\ti1\nu2\ti2\tx\n");
        match load_interactions(&p) {
            Err(MgError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn loads_features_with_missing_items() {
        let dir = tempfile::tempdir().unwrap();
        let tokens: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let p = write_tmp(&dir, "f.csv", "a,1,2,3,4\nc,5,6,7,8\nzz,0,0,0,0\n");
        let fl = load_features(&p, "v", &tokens).unwrap();
        assert_eq!((fl.matrix.rows(), fl.matrix.cols()), (3, 4));
        assert_eq!(fl.missing, 1);
        assert_eq!(fl.unknown, 1);
        assert_eq!(fl.matrix.row(1), &[0.0; 4]);
        let p = write_tmp(&dir, "g.csv", "a,1,2\nb,1\n");
        assert!(matches!(load_features(&p, "v", &tokens), Err(MgError::Parse { line: 2, .. })));
    }

    #[test]
    fn feature_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tokens: Vec<String> = (0..4).map(|i| format!("item{i}")).collect();
        let m = Matrix::new(4, 3, (0..12).map(|x| (x as f64).sin() * 1e-3 + 0.1).collect()).unwrap();
        let p = dir.path().join("f.csv");
        write_features(&p, &m, &tokens).unwrap();
        let back = load_features(&p, "v", &tokens).unwrap();
        assert_eq!(back.matrix, m);
        assert_eq!(back.missing, 0);
    }

    fn user_with(n: usize, items: usize) -> Dataset {
        Dataset::new(1, items, (0..n).map(|i| (0, i)).collect()).unwrap()
    }

    #[test]
    fn split_counts() {
        let ds = split(&user_with(10, 20), SplitRatios::default(), 1).unwrap();
        let count = |s| ds.splits().iter().filter(|x| **x == s).count();
        assert_eq!((count(Split::Train), count(Split::Valid), count(Split::Test)), (8, 1, 1));

        let ds = split(&user_with(2, 5), SplitRatios::default(), 1).unwrap();
        assert!(ds.splits().iter().all(|s| *s == Split::Train));

        let ds = split(&user_with(3, 5), SplitRatios::default(), 1).unwrap();
        let count = |s| ds.splits().iter().filter(|x| **x == s).count();
        assert_eq!((count(Split::Train), count(Split::Valid), count(Split::Test)), (1, 1, 1));
    }

    #[test]
    fn split_is_seeded_and_validated() {
        let ds = user_with(30, 40);
        let a = split(&ds, SplitRatios::default(), 5).unwrap();
        let b = split(&ds, SplitRatios::default(), 5).unwrap();
        assert_eq!(a.splits(), b.splits());
        let bad = SplitRatios {
            train: 0.8,
            valid: 0.1,
            test: 0.2,
        };
        assert!(split(&ds, bad, 5).is_err());
    }

    #[test]
    fn forced_negative() {
        let ds = Dataset::new(1, 2, vec![(0, 0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_triplet(&ds, &mut rng).unwrap(), Triplet::new(0, 0, 1));
        }
    }

    #[test]
    fn saturated_users() {
        let ds = Dataset::new(2, 2, vec![(0, 0), (0, 1), (1, 0)]).unwrap();
        let sampler = TripletSampler::new(&ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t = sampler.sample(&mut rng);
            assert_eq!(t, Triplet::new(1, 0, 1));
        }
        let full = Dataset::new(1, 2, vec![(0, 0), (0, 1)]).unwrap();
        assert!(TripletSampler::new(&full).is_err());
    }

    #[test]
    fn negatives_are_never_positive_and_uniform() {
        // user 0 has items {0, 3}; eligible negatives are {1, 2, 4, 5}
        let ds = Dataset::new(1, 6, vec![(0, 0), (0, 3)]).unwrap();
        let sampler = TripletSampler::new(&ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 100_000;
        let mut counts = [0usize; 6];
        for _ in 0..draws {
            let t = sampler.sample(&mut rng);
            assert!(!ds.positives(0).contains(&t.neg));
            counts[t.neg] += 1;
        }
        let expected = draws as f64 / 4.0;
        let chi2: f64 = [1, 2, 4, 5]
            .iter()
            .map(|&i| (counts[i] as f64 - expected).powi(2) / expected)
            .sum();
        // 3 degrees of freedom, 99.9% quantile is 16.27
        assert!(chi2 < 16.27, "chi2 {chi2}");
    }

    #[test]
    fn known_count_sparsity() {
        let baby = DatasetStats::from_counts(19_445, 7_050, 160_792);
        assert_eq!(baby.sparsity_percent(), 99.88);
        let pin = DatasetStats::from_counts(3_226, 4_998, 9_844);
        assert_eq!(pin.sparsity_percent(), 99.94);
        assert_eq!(DatasetStats::from_counts(3, 4, 12).sparsity, 0.0);
    }

    fn small_synth(noise: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            num_users: 30,
            num_items: 25,
            latent_dim: 4,
            modality_dims: [("v".to_string(), 6)].into(),
            noise_std: noise,
            interactions_per_user: 5,
            score_scale: 3.0,
            seed,
        }
    }

    #[test]
    fn synth_counts_and_determinism() {
        let a = synth_generate(&small_synth(0.1, 3)).unwrap();
        let b = synth_generate(&small_synth(0.1, 3)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let s = stats(&a.dataset);
        assert_eq!((s.users, s.items, s.interactions), (30, 25, 150));
    }

    #[test]
    fn noiseless_features_are_linear_in_latents() {
        let s = synth_generate(&small_synth(0.0, 9)).unwrap();
        let f = &s.dataset.features["v"];
        let map = &s.feature_maps["v"];
        let mut resid = 0.0f64;
        for i in 0..f.rows() {
            for r in 0..f.cols() {
                let pred: f64 = map.row(r).iter().zip(s.item_latents.row(i)).map(|(a, b)| a * b).sum();
                resid = resid.max((pred - f.row(i)[r]).abs());
            }
        }
        assert!(resid <= 1e-9);
    }
}
