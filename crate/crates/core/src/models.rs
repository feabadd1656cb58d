//! Scoring functions, the BPR loss and its analytic gradients.
//!
//! Two score families are supported:
//!
//! * `mf`: `y(u, i) = b_i + <gamma_u, gamma_i>`
//! * `multimodal-mf`: the `mf` score plus, for every modality `m`,
//!   `<theta_u^m, E_m f_i^m>` where `E_m` is a `d x dim(m)` projection of the
//!   item's content features.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Features, Matrix};
use crate::error::{MgError, Result};
use crate::optim::Objective;
use crate::params::{ParamSet, ShapeSpec, Tensor};

pub const USER_FACTORS: &str = "user_factors";
pub const ITEM_FACTORS: &str = "item_factors";
pub const ITEM_BIAS: &str = "item_bias";

pub fn projection_name(modality: &str) -> String {
    format!("proj.{modality}")
}

pub fn user_pref_name(modality: &str) -> String {
    format!("user_pref.{modality}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mf,
    MultimodalMf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub latent_dim: usize,
    #[serde(default)]
    pub modality_dims: BTreeMap<String, usize>,
    pub l2_reg: f64,
}

impl ModelSpec {
    pub const DEFAULT_L2: f64 = 1e-4;

    pub fn mf(latent_dim: usize) -> Self {
        Self {
            kind: ModelKind::Mf,
            latent_dim,
            modality_dims: BTreeMap::new(),
            l2_reg: Self::DEFAULT_L2,
        }
    }

    pub fn multimodal(latent_dim: usize, modality_dims: BTreeMap<String, usize>) -> Self {
        Self {
            kind: ModelKind::MultimodalMf,
            latent_dim,
            modality_dims,
            l2_reg: Self::DEFAULT_L2,
        }
    }

    pub fn with_l2(mut self, l2_reg: f64) -> Self {
        self.l2_reg = l2_reg;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(MgError::Config("latent_dim must be at least 1".into()));
        }
        if !(self.l2_reg >= 0.0 && self.l2_reg.is_finite()) {
            return Err(MgError::Config(format!("l2_reg must be >= 0 (got {})", self.l2_reg)));
        }
        match self.kind {
            ModelKind::Mf if !self.modality_dims.is_empty() => Err(MgError::Config(
                "mf models take no modalities".into(),
            )),
            ModelKind::MultimodalMf if self.modality_dims.is_empty() => Err(MgError::Config(
                "multimodal-mf needs at least one modality".into(),
            )),
            _ => {
                if let Some((m, _)) = self.modality_dims.iter().find(|(_, d)| **d == 0) {
                    return Err(MgError::Config(format!("modality `{m}` has zero dimension")));
                }
                Ok(())
            }
        }
    }

    /// Parameter layout for the given population sizes.
    pub fn layout(&self, num_users: usize, num_items: usize) -> ShapeSpec {
        let d = self.latent_dim;
        let mut entries = vec![
            (USER_FACTORS.to_string(), vec![num_users, d]),
            (ITEM_FACTORS.to_string(), vec![num_items, d]),
            (ITEM_BIAS.to_string(), vec![num_items]),
        ];
        if self.kind == ModelKind::MultimodalMf {
            for (m, dim) in &self.modality_dims {
                entries.push((projection_name(m), vec![d, *dim]));
                entries.push((user_pref_name(m), vec![num_users, d]));
            }
        }
        ShapeSpec::new(entries).expect("parameter names are unique")
    }
}

/// A BPR training example: user, observed item, unobserved item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

impl Triplet {
    pub fn new(user: usize, pos: usize, neg: usize) -> Self {
        Self { user, pos, neg }
    }
}

struct Modality<'a> {
    name: &'a str,
    proj: &'a Tensor,
    pref: &'a Tensor,
    feats: &'a Matrix,
}

/// Borrowed, validated view of a model's parameters and features.
struct View<'a> {
    d: usize,
    users: usize,
    items: usize,
    user: &'a Tensor,
    item: &'a Tensor,
    bias: &'a Tensor,
    mods: Vec<Modality<'a>>,
}

fn entry<'a>(params: &'a ParamSet, name: &str) -> Result<&'a Tensor> {
    params
        .get(name)
        .ok_or_else(|| MgError::LayoutMismatch(format!("missing parameter `{name}`")))
}

impl<'a> View<'a> {
    fn new(spec: &'a ModelSpec, params: &'a ParamSet, features: &'a Features) -> Result<Self> {
        spec.validate()?;
        let d = spec.latent_dim;
        let user = entry(params, USER_FACTORS)?;
        let item = entry(params, ITEM_FACTORS)?;
        let bias = entry(params, ITEM_BIAS)?;
        let users = user.shape()[0];
        let items = item.shape()[0];
        let expected = spec.layout(users, items);
        if params.shape_spec() != expected {
            return Err(MgError::LayoutMismatch(format!(
                "parameters do not match model spec: expected {:?}, got {:?}",
                expected.entries(),
                params.shape_spec().entries()
            )));
        }
        let mut mods = Vec::new();
        if spec.kind == ModelKind::MultimodalMf {
            for (m, dim) in &spec.modality_dims {
                let feats = features
                    .get(m)
                    .ok_or_else(|| MgError::MissingModality(m.clone()))?;
                if feats.cols() != *dim || feats.rows() < items {
                    return Err(MgError::LayoutMismatch(format!(
                        "features for `{m}` are {}x{}, model needs {}x{}",
                        feats.rows(),
                        feats.cols(),
                        items,
                        dim
                    )));
                }
                mods.push(Modality {
                    name: m,
                    proj: entry(params, &projection_name(m))?,
                    pref: entry(params, &user_pref_name(m))?,
                    feats,
                });
            }
        }
        Ok(Self {
            d,
            users,
            items,
            user,
            item,
            bias,
            mods,
        })
    }

    fn check_user(&self, u: usize) -> Result<()> {
        if u >= self.users {
            return Err(MgError::IndexOutOfRange {
                what: "user",
                index: u,
                limit: self.users,
            });
        }
        Ok(())
    }

    fn check_item(&self, i: usize) -> Result<()> {
        if i >= self.items {
            return Err(MgError::IndexOutOfRange {
                what: "item",
                index: i,
                limit: self.items,
            });
        }
        Ok(())
    }

    fn check_triplet(&self, t: &Triplet) -> Result<()> {
        self.check_user(t.user)?;
        self.check_item(t.pos)?;
        self.check_item(t.neg)
    }

    fn score(&self, u: usize, i: usize) -> f64 {
        let mut y = self.bias.data()[i] + dot(self.user.row(u), self.item.row(i));
        for m in &self.mods {
            let h = project(m.proj, m.feats.row(i), self.d);
            y += dot(m.pref.row(u), &h);
        }
        y
    }

    fn scores_for(&self, u: usize) -> Vec<f64> {
        (0..self.items).map(|i| self.score(u, i)).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `E f` for a `d x dim` projection.
fn project(proj: &Tensor, f: &[f64], d: usize) -> Vec<f64> {
    (0..d).map(|r| dot(proj.row(r), f)).collect()
}

/// `E^T v` for a `d x dim` projection.
fn project_t(proj: &Tensor, v: &[f64]) -> Vec<f64> {
    let dim = proj.shape()[1];
    let mut out = vec![0.0; dim];
    for (r, vr) in v.iter().enumerate() {
        for (o, e) in out.iter_mut().zip(proj.row(r)) {
            *o += vr * e;
        }
    }
    out
}

/// Logistic function, branch form to avoid overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln sigmoid(x)` computed as a stable softplus of `-x`.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    let z = -x;
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn score(
    spec: &ModelSpec,
    params: &ParamSet,
    u: usize,
    i: usize,
    features: &Features,
) -> Result<f64> {
    let view = View::new(spec, params, features)?;
    view.check_user(u)?;
    view.check_item(i)?;
    Ok(view.score(u, i))
}

/// Scores of every item for user `u`.
pub fn score_all(
    spec: &ModelSpec,
    params: &ParamSet,
    u: usize,
    features: &Features,
) -> Result<Vec<f64>> {
    let view = View::new(spec, params, features)?;
    view.check_user(u)?;
    Ok(view.scores_for(u))
}

/// Precomputed scorer for ranking many users against a fixed model.
pub struct Scorer<'a> {
    view: View<'a>,
}

impl<'a> Scorer<'a> {
    pub fn new(spec: &'a ModelSpec, params: &'a ParamSet, features: &'a Features) -> Result<Self> {
        Ok(Self {
            view: View::new(spec, params, features)?,
        })
    }

    pub fn num_items(&self) -> usize {
        self.view.items
    }

    pub fn num_users(&self) -> usize {
        self.view.users
    }

    pub fn scores(&self, u: usize) -> Result<Vec<f64>> {
        self.view.check_user(u)?;
        Ok(self.view.scores_for(u))
    }
}

/// Mean BPR loss over `batch` plus `l2_reg * |params|^2`.
pub fn bpr_loss(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &[Triplet],
    features: &Features,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(MgError::Config("empty batch".into()));
    }
    let view = View::new(spec, params, features)?;
    let mut data = 0.0;
    for t in batch {
        view.check_triplet(t)?;
        data += neg_log_sigmoid(view.score(t.user, t.pos) - view.score(t.user, t.neg));
    }
    Ok(data / batch.len() as f64 + spec.l2_reg * params.norm_sq())
}

/// Analytic gradient of [`bpr_loss`] with respect to every parameter.
pub fn grad_params(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &[Triplet],
    features: &Features,
) -> Result<ParamSet> {
    if batch.is_empty() {
        return Err(MgError::Config("empty batch".into()));
    }
    let view = View::new(spec, params, features)?;
    let d = view.d;
    let n = batch.len() as f64;
    let mut g = params.zeros_like();

    // Accumulate into flat buffers, written back once at the end.
    let mut g_user = vec![0.0; view.user.len()];
    let mut g_item = vec![0.0; view.item.len()];
    let mut g_bias = vec![0.0; view.bias.len()];
    let mut g_proj: Vec<Vec<f64>> = view.mods.iter().map(|m| vec![0.0; m.proj.len()]).collect();
    let mut g_pref: Vec<Vec<f64>> = view.mods.iter().map(|m| vec![0.0; m.pref.len()]).collect();

    for t in batch {
        view.check_triplet(t)?;
        let x = view.score(t.user, t.pos) - view.score(t.user, t.neg);
        // d/dx of -ln sigmoid(x) is -sigmoid(-x)
        let c = -sigmoid(-x) / n;
        let gu = view.user.row(t.user);
        let gi = view.item.row(t.pos);
        let gj = view.item.row(t.neg);
        for k in 0..d {
            g_user[t.user * d + k] += c * (gi[k] - gj[k]);
            g_item[t.pos * d + k] += c * gu[k];
            g_item[t.neg * d + k] -= c * gu[k];
        }
        g_bias[t.pos] += c;
        g_bias[t.neg] -= c;
        for (mi, m) in view.mods.iter().enumerate() {
            let df: Vec<f64> = m
                .feats
                .row(t.pos)
                .iter()
                .zip(m.feats.row(t.neg))
                .map(|(a, b)| a - b)
                .collect();
            let edf = project(m.proj, &df, d);
            let pref = m.pref.row(t.user);
            let dim = df.len();
            for k in 0..d {
                g_pref[mi][t.user * d + k] += c * edf[k];
                let ck = c * pref[k];
                for (gp, dfj) in g_proj[mi][k * dim..(k + 1) * dim].iter_mut().zip(&df) {
                    *gp += ck * dfj;
                }
            }
        }
    }

    let put = |g: &mut ParamSet, name: &str, buf: Vec<f64>| {
        g.get_mut(name).expect("layout checked").data_mut().copy_from_slice(&buf);
    };
    put(&mut g, USER_FACTORS, g_user);
    put(&mut g, ITEM_FACTORS, g_item);
    put(&mut g, ITEM_BIAS, g_bias);
    let names: Vec<&str> = view.mods.iter().map(|m| m.name).collect();
    for ((name, gp), gr) in names.iter().zip(g_proj).zip(g_pref) {
        put(&mut g, &projection_name(name), gp);
        put(&mut g, &user_pref_name(name), gr);
    }
    if spec.l2_reg > 0.0 {
        g.axpy(2.0 * spec.l2_reg, params);
    }
    g.ensure_finite("parameter gradient")?;
    Ok(g)
}

/// Gradients of the BPR loss with respect to item content features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGradients {
    /// modality -> item -> gradient of length `dim(modality)`
    pub per_item: BTreeMap<String, BTreeMap<usize, Vec<f64>>>,
    /// Squared L2 norm over all items and modalities.
    pub norm_sq: f64,
}

pub fn grad_features(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &[Triplet],
    features: &Features,
) -> Result<FeatureGradients> {
    if spec.kind != ModelKind::MultimodalMf {
        return Err(MgError::NeedsMultimodal { op: "grad_features" });
    }
    if batch.is_empty() {
        return Err(MgError::Config("empty batch".into()));
    }
    let view = View::new(spec, params, features)?;
    let n = batch.len() as f64;
    let mut per_item: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for t in batch {
        view.check_triplet(t)?;
        let x = view.score(t.user, t.pos) - view.score(t.user, t.neg);
        let c = -sigmoid(-x) / n;
        for m in &view.mods {
            let back = project_t(m.proj, m.pref.row(t.user));
            let grads = per_item.entry(m.name.to_string()).or_default();
            let dim = back.len();
            for (item, sign) in [(t.pos, 1.0), (t.neg, -1.0)] {
                let gi = grads.entry(item).or_insert_with(|| vec![0.0; dim]);
                for (g, b) in gi.iter_mut().zip(&back) {
                    *g += sign * c * b;
                }
            }
        }
    }
    let norm_sq = per_item
        .values()
        .flat_map(|m| m.values())
        .flat_map(|v| v.iter())
        .map(|x| x * x)
        .sum();
    Ok(FeatureGradients { per_item, norm_sq })
}

/// Mean of `(1 + |E_m f_i|^2) / |E_m|_F^2` over distinct batch items and
/// modalities. Returns `+inf` if any projection is identically zero.
pub fn layer_ratio(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &[Triplet],
    features: &Features,
) -> Result<f64> {
    if spec.kind != ModelKind::MultimodalMf {
        return Err(MgError::NeedsMultimodal { op: "layer_ratio" });
    }
    let view = View::new(spec, params, features)?;
    let mut items = BTreeSet::new();
    for t in batch {
        view.check_triplet(t)?;
        items.insert(t.pos);
        items.insert(t.neg);
    }
    if items.is_empty() {
        return Err(MgError::Config("empty batch".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for m in &view.mods {
        let jac = m.proj.norm().powi(2);
        if jac == 0.0 {
            return Ok(f64::INFINITY);
        }
        for &i in &items {
            let h = project(m.proj, m.feats.row(i), view.d);
            total += (1.0 + dot(&h, &h)) / jac;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Gaussian initialization `N(0, scale^2)` for factors and projections,
/// zeros for item biases.
pub fn init_params(
    spec: &ModelSpec,
    num_users: usize,
    num_items: usize,
    seed: u64,
    scale: f64,
) -> Result<ParamSet> {
    spec.validate()?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(MgError::Config(format!("init scale must be positive (got {scale})")));
    }
    let normal = Normal::new(0.0, scale).map_err(|e| MgError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, dims) in spec.layout(num_users, num_items).entries() {
        let n: usize = dims.iter().product();
        let data = if name == ITEM_BIAS {
            vec![0.0; n]
        } else {
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        params.insert(name.clone(), Tensor::new(dims.clone(), data)?)?;
    }
    Ok(params)
}

/// Indices of the `k` highest scores outside `exclude`; ties go to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize, exclude: &BTreeSet<usize>) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|i| !exclude.contains(i)).collect();
    candidates.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    candidates.truncate(k);
    candidates
}

pub fn recommend_topk(
    spec: &ModelSpec,
    params: &ParamSet,
    u: usize,
    k: usize,
    features: &Features,
    exclude: &BTreeSet<usize>,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(MgError::Config("k must be at least 1".into()));
    }
    let scores = score_all(spec, params, u, features)?;
    Ok(top_k_indices(&scores, k, exclude))
}

/// BPR loss over a fixed batch as an [`Objective`].
#[derive(Clone, Copy)]
pub struct BprObjective<'a> {
    pub spec: &'a ModelSpec,
    pub features: &'a Features,
    pub batch: &'a [Triplet],
}

impl Objective for BprObjective<'_> {
    fn loss(&self, p: &ParamSet) -> Result<f64> {
        bpr_loss(self.spec, p, self.batch, self.features)
    }

    fn grad(&self, p: &ParamSet) -> Result<ParamSet> {
        grad_params(self.spec, p, self.batch, self.features)
    }
}

/// Owning variant of [`BprObjective`] for per-iteration mini-batches.
pub struct BatchObjective<'a> {
    pub spec: &'a ModelSpec,
    pub features: &'a Features,
    pub batch: Vec<Triplet>,
}

impl Objective for BatchObjective<'_> {
    fn loss(&self, p: &ParamSet) -> Result<f64> {
        bpr_loss(self.spec, p, &self.batch, self.features)
    }

    fn grad(&self, p: &ParamSet) -> Result<ParamSet> {
        grad_params(self.spec, p, &self.batch, self.features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mf_params(user: &[f64], item: &[f64], bias: &[f64], d: usize) -> ParamSet {
        ParamSet::new()
            .with(USER_FACTORS, Tensor::new(vec![user.len() / d, d], user.to_vec()).unwrap())
            .unwrap()
            .with(ITEM_FACTORS, Tensor::new(vec![item.len() / d, d], item.to_vec()).unwrap())
            .unwrap()
            .with(ITEM_BIAS, Tensor::from_vec(bias.to_vec()))
            .unwrap()
    }

    #[test]
    fn mf_score_arithmetic() {
        let spec = ModelSpec::mf(2);
        let p = mf_params(&[1.0, 0.0], &[0.5, 2.0], &[0.1], 2);
        let y = score(&spec, &p, 0, 0, &Features::new()).unwrap();
        assert!((y - 0.6).abs() < 1e-15);
        assert!(matches!(
            score(&spec, &p, 0, 1, &Features::new()),
            Err(MgError::IndexOutOfRange { what: "item", .. })
        ));
    }

    #[test]
    fn zero_params_score_zero() {
        let spec = ModelSpec::multimodal(3, [("v".to_string(), 2)].into());
        let p = ParamSet::zeros(&spec.layout(2, 3));
        let feats: Features = [("v".to_string(), Matrix::new(3, 2, vec![1.0; 6]).unwrap())].into();
        for u in 0..2 {
            for i in 0..3 {
                assert_eq!(score(&spec, &p, u, i, &feats).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn multimodal_term_hand_example() {
        let spec = ModelSpec::multimodal(1, [("v".to_string(), 2)].into());
        let mut p = mf_params(&[1.0], &[0.5], &[0.1], 1);
        p.insert(projection_name("v"), Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap())
            .unwrap();
        p.insert(user_pref_name("v"), Tensor::new(vec![1, 1], vec![0.5]).unwrap())
            .unwrap();
        let feats: Features = [("v".to_string(), Matrix::new(1, 2, vec![2.0, 3.0]).unwrap())].into();
        let y = score(&spec, &p, 0, 0, &feats).unwrap();
        assert!((y - (0.6 + 2.5)).abs() < 1e-15);
        assert!(matches!(
            score(&spec, &p, 0, 0, &Features::new()),
            Err(MgError::MissingModality(_))
        ));
    }

    #[test]
    fn bpr_loss_values() {
        let spec = ModelSpec::mf(1).with_l2(0.0);
        // Equal scores for both items.
        let p = mf_params(&[1.0], &[0.5, 0.5], &[0.0, 0.0], 1);
        let l = bpr_loss(&spec, &p, &[Triplet::new(0, 0, 1)], &Features::new()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        // Score gap of exactly one.
        let p = mf_params(&[1.0], &[1.0, 0.0], &[0.0, 0.0], 1);
        let l = bpr_loss(&spec, &p, &[Triplet::new(0, 0, 1)], &Features::new()).unwrap();
        assert!((l - 0.313_261_687_518_222_8).abs() < 1e-12, "{l}");
        // Huge gap leaves only the regularizer.
        let spec = ModelSpec::mf(1).with_l2(0.01);
        let p = mf_params(&[1.0], &[1e3, 0.0], &[0.0, 0.0], 1);
        let l = bpr_loss(&spec, &p, &[Triplet::new(0, 0, 1)], &Features::new()).unwrap();
        assert!((l - 0.01 * p.norm_sq()).abs() < 1e-9);
        assert!(bpr_loss(&spec, &p, &[], &Features::new()).is_err());
    }

    #[test]
    fn gradient_at_origin_is_zero() {
        let spec = ModelSpec::multimodal(2, [("v".to_string(), 3)].into()).with_l2(0.0);
        let p = ParamSet::zeros(&spec.layout(2, 3));
        let feats: Features = [("v".to_string(), Matrix::new(3, 3, (0..9).map(f64::from).collect()).unwrap())].into();
        let g = grad_params(&spec, &p, &[Triplet::new(0, 0, 1), Triplet::new(1, 2, 0)], &feats).unwrap();
        // Biases still receive +-1/2 per triplet; factor blocks vanish.
        for (name, t) in g.iter() {
            if name != ITEM_BIAS {
                assert!(t.data().iter().all(|x| *x == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn gradient_limit_is_pure_regularizer() {
        let spec = ModelSpec::mf(1).with_l2(0.05);
        let p = mf_params(&[1.0], &[1e3, 0.0], &[0.0, 0.0], 1);
        let g = grad_params(&spec, &p, &[Triplet::new(0, 0, 1)], &Features::new()).unwrap();
        let expected = p.scaled(0.1);
        for (a, b) in g.values().zip(expected.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn feature_gradients_need_multimodal() {
        let spec = ModelSpec::mf(1);
        let p = mf_params(&[1.0], &[1.0, 0.0], &[0.0, 0.0], 1);
        assert!(matches!(
            grad_features(&spec, &p, &[Triplet::new(0, 0, 1)], &Features::new()),
            Err(MgError::NeedsMultimodal { .. })
        ));
    }

    #[test]
    fn zero_projection_feature_gradient() {
        let spec = ModelSpec::multimodal(2, [("v".to_string(), 2)].into());
        let mut p = init_params(&spec, 2, 3, 1, 0.5).unwrap();
        p.insert(projection_name("v"), Tensor::zeros(vec![2, 2])).unwrap();
        let feats: Features = [("v".to_string(), Matrix::new(3, 2, vec![1.0; 6]).unwrap())].into();
        let batch = [Triplet::new(0, 0, 1), Triplet::new(1, 2, 1)];
        let fg = grad_features(&spec, &p, &batch, &feats).unwrap();
        assert_eq!(fg.norm_sq, 0.0);
        assert_eq!(layer_ratio(&spec, &p, &batch, &feats).unwrap(), f64::INFINITY);
    }

    #[test]
    fn feature_gradient_norm_ignores_batch_order() {
        let spec = ModelSpec::multimodal(2, [("v".to_string(), 3)].into());
        let p = init_params(&spec, 3, 4, 2, 0.5).unwrap();
        let feats: Features = [("v".to_string(), Matrix::new(4, 3, (0..12).map(|x| x as f64 * 0.1).collect()).unwrap())].into();
        let a = [Triplet::new(0, 0, 1), Triplet::new(1, 2, 3), Triplet::new(2, 1, 0)];
        let b = [a[2], a[0], a[1]];
        let na = grad_features(&spec, &p, &a, &feats).unwrap().norm_sq;
        let nb = grad_features(&spec, &p, &b, &feats).unwrap().norm_sq;
        assert!((na - nb).abs() <= 1e-14 * na);
        let la = bpr_loss(&spec, &p, &a, &feats).unwrap();
        let lb = bpr_loss(&spec, &p, &b, &feats).unwrap();
        assert!((la - lb).abs() <= 1e-14 * la);
    }

    fn ratio_setup(proj: Vec<f64>, f: Vec<f64>) -> (ModelSpec, ParamSet, Features) {
        let spec = ModelSpec::multimodal(2, [("v".to_string(), 2)].into());
        let mut p = init_params(&spec, 1, 2, 0, 0.1).unwrap();
        p.insert(projection_name("v"), Tensor::new(vec![2, 2], proj).unwrap()).unwrap();
        let mut rows = f.clone();
        rows.extend(f);
        let feats: Features = [("v".to_string(), Matrix::new(2, 2, rows).unwrap())].into();
        (spec, p, feats)
    }

    #[test]
    fn layer_ratio_identity() {
        let (spec, p, feats) = ratio_setup(vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 1.0]);
        let r = layer_ratio(&spec, &p, &[Triplet::new(0, 0, 1)], &feats).unwrap();
        assert!((r - 1.5).abs() < 1e-15);
    }

    #[test]
    fn layer_ratio_scaling() {
        let base = vec![1.0, 0.3, -0.2, 1.0];
        let scaled: Vec<f64> = base.iter().map(|x| x * 10.0).collect();
        let batch = [Triplet::new(0, 0, 1)];
        // |h|^2 >> 1: the ratio tends to |Ef|^2 / |E|_F^2, invariant in scale.
        let big = vec![10.0, 5.0];
        let (spec, p, feats) = ratio_setup(base.clone(), big.clone());
        let r1 = layer_ratio(&spec, &p, &batch, &feats).unwrap();
        let (spec, p, feats) = ratio_setup(scaled.clone(), big);
        let r10 = layer_ratio(&spec, &p, &batch, &feats).unwrap();
        assert!((r10 - r1).abs() / r1 < 0.05);
        // |h|^2 << 1: the ratio tends to 1 / |E|_F^2, so scaling E by c divides it by c^2.
        let tiny = vec![1e-4, -2e-4];
        let (spec, p, feats) = ratio_setup(base, tiny.clone());
        let r1 = layer_ratio(&spec, &p, &batch, &feats).unwrap();
        let (spec, p, feats) = ratio_setup(scaled, tiny);
        let r10 = layer_ratio(&spec, &p, &batch, &feats).unwrap();
        assert!((r10 * 100.0 - r1).abs() / r1 < 0.05);
    }

    #[test]
    fn layer_ratio_denominator_ignores_feature_scale() {
        let proj = vec![1.0, 0.3, -0.2, 1.0];
        let batch = [Triplet::new(0, 0, 1)];
        let (spec, p, feats) = ratio_setup(proj.clone(), vec![1.0, 2.0]);
        let r1 = layer_ratio(&spec, &p, &batch, &feats).unwrap();
        let (spec, p, feats) = ratio_setup(proj, vec![3.0, 6.0]);
        let r3 = layer_ratio(&spec, &p, &batch, &feats).unwrap();
        let jac = p.get(&projection_name("v")).unwrap().norm().powi(2);
        // (1 + 9|h|^2)/jac vs (1 + |h|^2)/jac
        let h2 = r1 * jac - 1.0;
        assert!(((r3 * jac - 1.0) - 9.0 * h2).abs() < 1e-12);
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ModelSpec::multimodal(4, [("t".to_string(), 3)].into());
        let a = init_params(&spec, 5, 6, 9, 0.1).unwrap();
        let b = init_params(&spec, 5, 6, 9, 0.1).unwrap();
        assert_eq!(a, b);
        assert!(a.get(ITEM_BIAS).unwrap().data().iter().all(|x| *x == 0.0));
        assert!(init_params(&spec, 5, 6, 9, 0.0).is_err());
    }

    #[test]
    fn init_std_matches_scale() {
        let spec = ModelSpec::mf(10);
        let p = init_params(&spec, 500, 500, 4, 0.3).unwrap();
        let v = p.get(USER_FACTORS).unwrap().data();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        assert!((std - 0.3).abs() < 0.03, "{std}");
    }

    #[test]
    fn topk_ordering_and_ties() {
        let scores = [0.9, 0.1, 0.5];
        assert_eq!(top_k_indices(&scores, 2, &BTreeSet::new()), vec![0, 2]);
        assert_eq!(top_k_indices(&scores, 2, &[0].into()), vec![2, 1]);
        let tied = [0.2, 0.7, 0.7];
        assert_eq!(top_k_indices(&tied, 3, &BTreeSet::new()), vec![1, 2, 0]);
        assert_eq!(top_k_indices(&tied, 10, &[1].into()), vec![2, 0]);
    }

    #[test]
    fn recommend_rejects_zero_k() {
        let spec = ModelSpec::mf(1);
        let p = mf_params(&[1.0], &[1.0, 0.0], &[0.0, 0.0], 1);
        assert!(recommend_topk(&spec, &p, 0, 0, &Features::new(), &BTreeSet::new()).is_err());
        assert_eq!(
            recommend_topk(&spec, &p, 0, 5, &Features::new(), &BTreeSet::new()).unwrap(),
            vec![0, 1]
        );
    }
}
