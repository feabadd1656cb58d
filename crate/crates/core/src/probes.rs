//! Top-k metrics and the robustness / flatness probes.
//!
//! Every probe works on private copies of the parameters and features it is
//! given; callers' values are never modified.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Features, Split};
use crate::error::{MgError, Result};
use crate::exec::Exec;
use crate::models::{
    self, bpr_loss, grad_features, grad_params, layer_ratio, ModelKind, ModelSpec, Scorer, Triplet,
    ITEM_FACTORS, USER_FACTORS,
};
use crate::optim::{
    mirror_step, normal_step, sam_step, train, FnObjective, MgConfig, Objective, OptState,
    OptimizerKind,
};
use crate::params::{random_direction, Direction, NormMode, ParamSet, Tensor};

/// Average-precision normalizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapNorm {
    /// `1 / min(k, |T_u|)`
    #[default]
    MinKTest,
    /// `1 / |T_u|`
    TestSize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    pub split: Split,
    pub map_norm: MapNorm,
    pub exec: Exec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 5,
            split: Split::Test,
            map_norm: MapNorm::MinKTest,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: usize,
    pub recall: f64,
    pub precision: f64,
    pub ap: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub recall: f64,
    pub precision: f64,
    pub map: f64,
    pub ndcg: f64,
}

impl MetricSummary {
    fn fields(&self) -> [f64; 4] {
        [self.recall, self.precision, self.map, self.ndcg]
    }

    fn from_fields(f: [f64; 4]) -> Self {
        Self {
            recall: f[0],
            precision: f[1],
            map: f[2],
            ndcg: f[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub k: usize,
    pub recall: f64,
    pub precision: f64,
    pub map: f64,
    pub ndcg: f64,
    pub users: usize,
    #[serde(skip)]
    pub per_user: Vec<UserMetrics>,
}

impl MetricReport {
    pub fn summary(&self) -> MetricSummary {
        MetricSummary {
            recall: self.recall,
            precision: self.precision,
            map: self.map,
            ndcg: self.ndcg,
        }
    }
}

/// Metrics of one ranked list against a relevant set. `ranked` holds at most
/// `k` items.
pub fn ranking_metrics(
    user: usize,
    ranked: &[usize],
    relevant: &BTreeSet<usize>,
    k: usize,
    map_norm: MapNorm,
) -> UserMetrics {
    let mut hits = 0usize;
    let mut ap = 0.0;
    let mut dcg = 0.0;
    for (r, item) in ranked.iter().take(k).enumerate() {
        if relevant.contains(item) {
            hits += 1;
            let rank = (r + 1) as f64;
            ap += hits as f64 / rank;
            dcg += 1.0 / (rank + 1.0).log2();
        }
    }
    let ideal = k.min(relevant.len());
    let idcg: f64 = (1..=ideal).map(|r| 1.0 / (r as f64 + 1.0).log2()).sum();
    let ap_norm = match map_norm {
        MapNorm::MinKTest => ideal,
        MapNorm::TestSize => relevant.len(),
    };
    UserMetrics {
        user,
        recall: hits as f64 / relevant.len() as f64,
        precision: hits as f64 / k as f64,
        ap: if ap_norm > 0 { ap / ap_norm as f64 } else { 0.0 },
        ndcg: if idcg > 0.0 { dcg / idcg } else { 0.0 },
    }
}

/// REC/PREC/MAP/NDCG@k on `cfg.split`, averaged over users with at least one
/// item in that split. Training positives are removed from the candidates
/// unless the split evaluated is the training split itself.
pub fn topk_metrics(
    spec: &ModelSpec,
    params: &ParamSet,
    dataset: &Dataset,
    features: &Features,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if cfg.k == 0 {
        return Err(MgError::Config("k must be at least 1".into()));
    }
    let scorer = Scorer::new(spec, params, features)?;
    if scorer.num_users() != dataset.num_users() || scorer.num_items() != dataset.num_items() {
        return Err(MgError::LayoutMismatch(format!(
            "model is {}x{}, dataset is {}x{}",
            scorer.num_users(),
            scorer.num_items(),
            dataset.num_users(),
            dataset.num_items()
        )));
    }
    let targets = dataset.split_sets(cfg.split);
    let train_sets = if cfg.split == Split::Train {
        vec![BTreeSet::new(); dataset.num_users()]
    } else {
        dataset.split_sets(Split::Train)
    };
    let users: Vec<usize> = (0..dataset.num_users())
        .filter(|&u| !targets[u].is_empty())
        .collect();
    if users.is_empty() {
        return Err(MgError::Evaluation(format!(
            "no users with {:?} items",
            cfg.split
        )));
    }
    let per_user = cfg.exec.try_map(users.len(), |idx| {
        let u = users[idx];
        let scores = scorer.scores(u)?;
        let ranked = models::top_k_indices(&scores, cfg.k, &train_sets[u]);
        Ok::<_, MgError>(ranking_metrics(u, &ranked, &targets[u], cfg.k, cfg.map_norm))
    })?;
    let n = per_user.len() as f64;
    let mean = |f: fn(&UserMetrics) -> f64| per_user.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        k: cfg.k,
        recall: mean(|m| m.recall),
        precision: mean(|m| m.precision),
        map: mean(|m| m.ap),
        ndcg: mean(|m| m.ndcg),
        users: per_user.len(),
        per_user,
    })
}

/// Loss values on a 2-D slice `p + m d1 + n d2` of parameter space.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandscapeGrid {
    pub m_values: Vec<f64>,
    pub n_values: Vec<f64>,
    /// `losses[i][j]` is the loss at `(m_values[i], n_values[j])`; non-finite
    /// losses are stored as `+inf`.
    pub losses: Vec<Vec<f64>>,
    pub seeds: (u64, u64),
    pub range: f64,
}

impl LandscapeGrid {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "m\\n")?;
        for n in &self.n_values {
            write!(w, ",{n}")?;
        }
        writeln!(w)?;
        for (m, row) in self.m_values.iter().zip(&self.losses) {
            write!(w, "{m}")?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn center(&self) -> Option<f64> {
        let i = self.m_values.iter().position(|m| *m == 0.0)?;
        let j = self.n_values.iter().position(|n| *n == 0.0)?;
        Some(self.losses[i][j])
    }
}

/// `points` equally spaced values on `[-range, range]`; the middle value is
/// exactly zero when `points` is odd.
pub fn linspace_symmetric(range: f64, points: usize) -> Vec<f64> {
    let denom = (points - 1) as f64;
    (0..points)
        .map(|i| range * (2.0 * i as f64 - denom) / denom)
        .collect()
}

/// Evaluates `loss_fn` on a `grid_points x grid_points` grid spanned by two
/// tensor-normalized directions drawn from `seed` and `seed + 1`.
pub fn landscape<F>(
    params: &ParamSet,
    loss_fn: F,
    grid_points: usize,
    range: f64,
    seed: u64,
    exec: Exec,
) -> Result<LandscapeGrid>
where
    F: Fn(&ParamSet) -> Result<f64> + Sync + Send,
{
    if grid_points < 2 {
        return Err(MgError::Config("grid needs at least 2 points".into()));
    }
    if !range.is_finite() {
        return Err(MgError::Config("landscape range must be finite".into()));
    }
    let spec = params.shape_spec();
    let d1 = random_direction(&spec, seed, params, NormMode::TensorNormalized)?;
    let d2 = random_direction(&spec, seed.wrapping_add(1), params, NormMode::TensorNormalized)?;
    let values = linspace_symmetric(range, grid_points);
    let cells = exec.map(grid_points * grid_points, |c| {
        let (i, j) = (c / grid_points, c % grid_points);
        crate::params::perturb(params, &d1, values[i], &d2, values[j])
            .and_then(|p| loss_fn(&p))
            .ok()
            .filter(|l| l.is_finite())
            .unwrap_or(f64::INFINITY)
    });
    Ok(LandscapeGrid {
        m_values: values.clone(),
        n_values: values,
        losses: cells.chunks(grid_points).map(<[f64]>::to_vec).collect(),
        seeds: (seed, seed.wrapping_add(1)),
        range,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlatnessScalars {
    pub grad_norm: f64,
    /// Max loss increase over the sampled perturbations.
    pub sharpness: f64,
    /// Mean loss increase over the sampled perturbations.
    pub perturbation_gap: f64,
}

/// Random perturbation of global norm `radius`, shaped per tensor like `p`
/// (raw Gaussian when `p` is zero).
fn scaled_direction(p: &ParamSet, seed: u64, radius: f64) -> Result<ParamSet> {
    let spec = p.shape_spec();
    let mode = if p.norm_sq() > 0.0 {
        NormMode::TensorNormalized
    } else {
        NormMode::Raw
    };
    let d = random_direction(&spec, seed, p, mode)?.into_params();
    let norm = d.norm();
    Ok(if norm > 0.0 { d.scaled(radius / norm) } else { d })
}

pub fn flatness_scalars<O: Objective + Sync + ?Sized>(
    params: &ParamSet,
    objective: &O,
    radius: f64,
    samples: usize,
    seed: u64,
    exec: Exec,
) -> Result<FlatnessScalars> {
    if radius.is_nan() || radius <= 0.0 {
        return Err(MgError::Config("radius must be positive".into()));
    }
    if samples == 0 {
        return Err(MgError::Config("samples must be at least 1".into()));
    }
    let base = objective.loss(params)?;
    let grad_norm = objective.grad(params)?.norm();
    let diffs = exec.try_map(samples, |s| {
        let delta = scaled_direction(params, seed.wrapping_add(s as u64), radius)?;
        Ok::<_, MgError>(objective.loss(&params.add_scaled(1.0, &delta)?)? - base)
    })?;
    Ok(FlatnessScalars {
        grad_norm,
        sharpness: diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        perturbation_gap: diffs.iter().sum::<f64>() / samples as f64,
    })
}

/// Relative decrease `(org - perturbed) / org`; `None` when `org <= 0`.
pub fn relative_decrease(org: f64, perturbed: f64) -> Option<f64> {
    (org > 0.0).then(|| (org - perturbed) / org)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RelativeDecrease {
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub map: Option<f64>,
    pub ndcg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub probe: String,
    pub k: usize,
    pub org: MetricSummary,
    pub perturbed_mean: MetricSummary,
    pub perturbed_std: MetricSummary,
    pub relative_decrease: RelativeDecrease,
    pub per_seed: Vec<MetricSummary>,
    pub settings: serde_json::Value,
}

fn summarize(
    probe: &str,
    k: usize,
    org: MetricSummary,
    runs: Vec<MetricSummary>,
    settings: serde_json::Value,
) -> ProbeReport {
    // offsets from the first run keep the mean of identical runs exact
    let n = runs.len() as f64;
    let first = runs[0].fields();
    let mut mean = [0.0; 4];
    for r in &runs {
        for ((m, v), f) in mean.iter_mut().zip(r.fields()).zip(first) {
            *m += v - f;
        }
    }
    for (m, f) in mean.iter_mut().zip(first) {
        *m = f + *m / n;
    }
    let mut var = [0.0; 4];
    if runs.len() > 1 {
        for r in &runs {
            for ((s, v), m) in var.iter_mut().zip(r.fields()).zip(mean) {
                *s += (v - m).powi(2);
            }
        }
        var.iter_mut().for_each(|s| *s = (*s / (n - 1.0)).sqrt());
    }
    let o = org.fields();
    ProbeReport {
        probe: probe.to_string(),
        k,
        org,
        perturbed_mean: MetricSummary::from_fields(mean),
        perturbed_std: MetricSummary::from_fields(var),
        relative_decrease: RelativeDecrease {
            recall: relative_decrease(o[0], mean[0]),
            precision: relative_decrease(o[1], mean[1]),
            map: relative_decrease(o[2], mean[2]),
            ndcg: relative_decrease(o[3], mean[3]),
        },
        per_seed: runs,
        settings,
    }
}

/// Which parameter blocks receive noise in [`noise_probe`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseTarget {
    /// User and item factor matrices.
    #[default]
    Factors,
    /// Factors plus the modality projections and user preference factors.
    FactorsAndProjections,
}

fn noise_targets(spec: &ModelSpec, target: NoiseTarget) -> Vec<String> {
    let mut names = vec![USER_FACTORS.to_string(), ITEM_FACTORS.to_string()];
    if target == NoiseTarget::FactorsAndProjections {
        for m in spec.modality_dims.keys() {
            names.push(models::projection_name(m));
            names.push(models::user_pref_name(m));
        }
    }
    names
}

/// Adds `N(0, sigma^2)` noise to the target blocks and re-evaluates, `repeats` times.
#[allow(clippy::too_many_arguments)]
pub fn noise_probe(
    spec: &ModelSpec,
    params: &ParamSet,
    dataset: &Dataset,
    features: &Features,
    eval: &EvalConfig,
    sigma: f64,
    repeats: usize,
    seed: u64,
    target: NoiseTarget,
) -> Result<ProbeReport> {
    if repeats == 0 {
        return Err(MgError::Config("repeats must be at least 1".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(MgError::Config(format!("sigma must be >= 0 (got {sigma})")));
    }
    let inner = EvalConfig {
        exec: Exec::Sequential,
        ..*eval
    };
    let org = topk_metrics(spec, params, dataset, features, eval)?;
    let names = noise_targets(spec, target);
    let runs = eval.exec.try_map(repeats, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let mut noisy = params.clone();
        for name in &names {
            let t = noisy
                .get_mut(name)
                .ok_or_else(|| MgError::LayoutMismatch(format!("missing `{name}`")))?;
            for x in t.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += sigma * z;
            }
        }
        Ok::<_, MgError>(topk_metrics(spec, &noisy, dataset, features, &inner)?.summary())
    })?;
    Ok(summarize(
        "noise",
        eval.k,
        org.summary(),
        runs,
        serde_json::json!({ "sigma": sigma, "repeats": repeats, "seed": seed, "target": target }),
    ))
}

/// Feature adjustment applied by [`adjustment_probe`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjustMode {
    /// `(f_i + f_j) / 2` for a random other item `j`, rescaled to `|f_i|`.
    Mix,
    /// [`AdjustMode::Mix`] with `j = i`: only the renormalization applies.
    SelfMix,
    /// `f_i + 0.5 * mean|f| * u` for one fixed random unit vector `u` per modality.
    Shift,
}

/// Returns adjusted copies of `features` and the adjusted item indices.
pub fn adjust_features(
    features: &Features,
    num_items: usize,
    fraction: f64,
    mode: AdjustMode,
    seed: u64,
) -> Result<(Features, Vec<usize>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MgError::Config(format!("fraction must be in (0, 1] (got {fraction})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = (fraction * num_items as f64).floor() as usize;
    let mut order: Vec<usize> = (0..num_items).collect();
    order.shuffle(&mut rng);
    let mut chosen = order[..count].to_vec();
    chosen.sort_unstable();
    let partners: Vec<usize> = chosen
        .iter()
        .map(|&i| match mode {
            AdjustMode::Mix if num_items > 1 => {
                let j = rng.random_range(0..num_items - 1);
                if j >= i {
                    j + 1
                } else {
                    j
                }
            }
            _ => i,
        })
        .collect();
    let mut out = features.clone();
    for (m, mat) in out.iter_mut() {
        let src = &features[m];
        let dim = mat.cols();
        let offset: Vec<f64> = if mode == AdjustMode::Shift {
            let mean_norm = (0..src.rows()).map(|i| l2(src.row(i))).sum::<f64>() / src.rows().max(1) as f64;
            let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = l2(&raw);
            raw.iter().map(|x| 0.5 * mean_norm * x / n).collect()
        } else {
            Vec::new()
        };
        for (&i, &j) in chosen.iter().zip(&partners) {
            let fi = src.row(i);
            let row: Vec<f64> = match mode {
                AdjustMode::Shift => fi.iter().zip(&offset).map(|(a, b)| a + b).collect(),
                AdjustMode::Mix | AdjustMode::SelfMix => {
                    let mixed: Vec<f64> = fi.iter().zip(src.row(j)).map(|(a, b)| 0.5 * (a + b)).collect();
                    let (target, own) = (l2(fi), l2(&mixed));
                    if own > 0.0 {
                        mixed.iter().map(|x| x * target / own).collect()
                    } else {
                        mixed
                    }
                }
            };
            mat.row_mut(i).copy_from_slice(&row);
        }
    }
    Ok((out, chosen))
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Re-evaluates metrics with a `fraction` of items' features adjusted.
#[allow(clippy::too_many_arguments)]
pub fn adjustment_probe(
    spec: &ModelSpec,
    params: &ParamSet,
    dataset: &Dataset,
    features: &Features,
    eval: &EvalConfig,
    fraction: f64,
    mode: AdjustMode,
    seed: u64,
) -> Result<ProbeReport> {
    if spec.kind != ModelKind::MultimodalMf {
        return Err(MgError::NeedsMultimodal { op: "adjustment probe" });
    }
    let org = topk_metrics(spec, params, dataset, features, eval)?;
    let (adjusted, chosen) = adjust_features(features, dataset.num_items(), fraction, mode, seed)?;
    let run = topk_metrics(spec, params, dataset, &adjusted, eval)?;
    Ok(summarize(
        "adjust",
        eval.k,
        org.summary(),
        vec![run.summary()],
        serde_json::json!({
            "fraction": fraction,
            "mode": mode,
            "seed": seed,
            "adjusted_items": chosen.len(),
        }),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RobustnessTerms {
    /// `|grad_x L|^2` over the batch's item features.
    pub input_grad_norm_sq: f64,
    pub layer_ratio: f64,
}

pub fn robustness_terms(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &[Triplet],
    features: &Features,
) -> Result<RobustnessTerms> {
    Ok(RobustnessTerms {
        input_grad_norm_sq: grad_features(spec, params, batch, features)?.norm_sq,
        layer_ratio: layer_ratio(spec, params, batch, features)?,
    })
}

/// Two-basin test function with minima of value zero at `-1` (curvature
/// `c_sharp`) and `+1` (curvature `c_flat`):
///
/// `f(t) = s(t) * q(t)`, `s(t) = (1 - e^{-a (t+1)^2 / 2}) / (1 - e^{-2a})`,
/// `q(t) = (1 - e^{-b (t-1)^2 / 2}) / (1 - e^{-2b})`.
///
/// Each factor equals one at the other minimum, so `f''(-1) = a / (1 - e^{-2a})`;
/// the well constants `a`, `b` are solved so that this equals the requested curvature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TwoBasin {
    c_sharp: f64,
    c_flat: f64,
    #[serde(skip)]
    k_sharp: f64,
    #[serde(skip)]
    k_flat: f64,
}

impl Default for TwoBasin {
    fn default() -> Self {
        Self::new(200.0, 2.0).expect("valid curvatures")
    }
}

/// Solves `k / (1 - e^{-2k}) = c` by fixed-point iteration.
fn well_constant(c: f64) -> f64 {
    let mut k = c;
    for _ in 0..200 {
        k = c * (1.0 - (-2.0 * k).exp());
    }
    k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Basin {
    Sharp,
    Flat,
    Neither,
}

impl TwoBasin {
    pub const SHARP_MIN: f64 = -1.0;
    pub const FLAT_MIN: f64 = 1.0;
    /// Iterates beyond this magnitude count as diverged.
    pub const ESCAPE: f64 = 10.0;

    fn well(c: f64, center: f64, other: f64, t: f64) -> (f64, f64) {
        let norm = 1.0 - (-c * (other - center).powi(2) / 2.0).exp();
        let e = (-c * (t - center).powi(2) / 2.0).exp();
        ((1.0 - e) / norm, c * (t - center) * e / norm)
    }

    pub fn new(c_sharp: f64, c_flat: f64) -> Result<Self> {
        // k / (1 - e^{-2k}) > 1/2 for every k > 0
        if !(c_sharp > 0.5 && c_flat > 0.5 && c_sharp.is_finite() && c_flat.is_finite()) {
            return Err(MgError::Config(format!(
                "basin curvatures must exceed 0.5 (got {c_sharp}, {c_flat})"
            )));
        }
        Ok(Self {
            c_sharp,
            c_flat,
            k_sharp: well_constant(c_sharp),
            k_flat: well_constant(c_flat),
        })
    }

    pub fn c_sharp(&self) -> f64 {
        self.c_sharp
    }

    pub fn c_flat(&self) -> f64 {
        self.c_flat
    }

    pub fn value(&self, t: f64) -> f64 {
        self.value_grad(t).0
    }

    pub fn value_grad(&self, t: f64) -> (f64, f64) {
        let (s, ds) = Self::well(self.k_sharp, Self::SHARP_MIN, Self::FLAT_MIN, t);
        let (q, dq) = Self::well(self.k_flat, Self::FLAT_MIN, Self::SHARP_MIN, t);
        (s * q, ds * q + s * dq)
    }

    /// Location of the ridge separating the basins, by bisection on `f'`.
    pub fn barrier(&self) -> f64 {
        let (mut lo, mut hi) = (Self::SHARP_MIN + 1e-6, Self::FLAT_MIN - 1e-6);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.value_grad(mid).1 > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn classify(&self, t: f64) -> Basin {
        if !t.is_finite() || t.abs() > Self::ESCAPE {
            Basin::Neither
        } else if t < self.barrier() {
            Basin::Sharp
        } else {
            Basin::Flat
        }
    }

    fn objective(self) -> impl Objective + Sync {
        FnObjective::new(
            move |p: &ParamSet| Ok(self.value(theta_of(p))),
            move |p: &ParamSet| theta_param(self.value_grad(theta_of(p)).1),
        )
    }
}

fn theta_of(p: &ParamSet) -> f64 {
    p.get("theta").map_or(f64::NAN, |t| t.data()[0])
}

fn theta_param(t: f64) -> Result<ParamSet> {
    ParamSet::new().with("theta", Tensor::from_vec(vec![t]))
}

/// Optimizer variant compared by [`basin_benchmark`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum BasinMethod {
    /// Normal steps only, learning rate `cfg.eta`.
    Plain,
    /// The mirror-gradient schedule of `cfg`.
    Mirror,
    /// Sharpness-aware steps with radius `rho`, learning rate `cfg.eta`.
    Sam { rho: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasinArm {
    pub label: String,
    pub method: BasinMethod,
    pub cfg: MgConfig,
}

impl BasinArm {
    pub fn plain(label: &str, eta: f64, base: OptimizerKind, steps: usize) -> Result<Self> {
        Ok(Self {
            label: label.into(),
            method: BasinMethod::Plain,
            cfg: MgConfig::new(2.0, 1.0, 1, eta, base, steps)?.without_mirror(),
        })
    }

    pub fn mirror(label: &str, cfg: MgConfig) -> Self {
        Self {
            label: label.into(),
            method: BasinMethod::Mirror,
            cfg,
        }
    }

    pub fn sam(label: &str, eta: f64, rho: f64, base: OptimizerKind, steps: usize) -> Result<Self> {
        Ok(Self {
            label: label.into(),
            method: BasinMethod::Sam { rho },
            cfg: MgConfig::new(2.0, 1.0, 1, eta, base, steps)?.without_mirror(),
        })
    }

    /// Runs the arm from `theta0` and returns the final iterate.
    pub fn run(&self, f: &TwoBasin, theta0: f64) -> Result<f64> {
        let obj = f.objective();
        let p0 = theta_param(theta0)?;
        let state = OptState::new(self.cfg.base());
        match self.method {
            BasinMethod::Plain | BasinMethod::Mirror => {
                Ok(theta_of(&train(&p0, &state, &obj, &self.cfg)?.params))
            }
            BasinMethod::Sam { rho } => {
                let (mut p, mut s) = (p0, state);
                for _ in 0..self.cfg.iterations() {
                    (p, s) = sam_step(&p, &s, &obj, rho, &self.cfg)?;
                }
                Ok(theta_of(&p))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasinResult {
    pub label: String,
    pub trials: usize,
    pub flat: usize,
    pub sharp: usize,
    pub neither: usize,
    pub flat_frequency: f64,
}

/// Where each trial starts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BasinInit {
    /// Uniform on `[-3, 3]`, one draw per trial shared across arms.
    Uniform,
    Fixed(f64),
}

pub fn basin_inits(trials: usize, seed: u64, init: BasinInit) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|_| match init {
            BasinInit::Uniform => rng.random_range(-3.0..=3.0),
            BasinInit::Fixed(t) => t,
        })
        .collect()
}

/// Terminal-basin frequencies per arm over `trials` shared initial points.
pub fn basin_benchmark(
    f: &TwoBasin,
    arms: &[BasinArm],
    trials: usize,
    seed: u64,
    init: BasinInit,
    exec: Exec,
) -> Result<Vec<BasinResult>> {
    if trials == 0 {
        return Err(MgError::Config("trials must be at least 1".into()));
    }
    let inits = basin_inits(trials, seed, init);
    arms.iter()
        .map(|arm| {
            let outcomes = exec.map(trials, |i| match arm.run(f, inits[i]) {
                Ok(t) => f.classify(t),
                Err(_) => Basin::Neither,
            });
            let count = |b| outcomes.iter().filter(|o| **o == b).count();
            let flat = count(Basin::Flat);
            Ok(BasinResult {
                label: arm.label.clone(),
                trials,
                flat,
                sharp: count(Basin::Sharp),
                neither: count(Basin::Neither),
                flat_frequency: flat as f64 / trials as f64,
            })
        })
        .collect()
}

pub fn write_basin_csv<W: Write>(mut w: W, results: &[BasinResult]) -> std::io::Result<()> {
    writeln!(w, "label,trials,flat,sharp,neither,flat_frequency")?;
    for r in results {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.label, r.trials, r.flat, r.sharp, r.neither, r.flat_frequency
        )?;
    }
    Ok(())
}

/// What the adversarial perturbation acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvTarget {
    /// Item factor rows touched by the batch.
    #[default]
    ItemFactors,
    /// Content features of items in the batch.
    Features,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvConfig {
    pub epsilon: f64,
    pub lambda_adv: f64,
    pub target: AdvTarget,
}

/// `L(p) + lambda_adv * L(p; Delta)` with `Delta` the normalized loss
/// gradient on the target block scaled to `epsilon`, held constant when
/// differentiating.
pub struct AdversarialObjective<'a> {
    pub spec: &'a ModelSpec,
    pub features: &'a Features,
    pub batch: &'a [Triplet],
    pub adv: AdvConfig,
}

enum Perturbed {
    Params(ParamSet),
    Features(Features),
}

impl AdversarialObjective<'_> {
    fn perturbed(&self, p: &ParamSet) -> Result<Perturbed> {
        match self.adv.target {
            AdvTarget::ItemFactors => {
                let g = grad_params(self.spec, p, self.batch, self.features)?;
                let rows: BTreeSet<usize> = self.batch.iter().flat_map(|t| [t.pos, t.neg]).collect();
                let gi = g.get(ITEM_FACTORS).expect("model layout");
                let mut delta = gi.clone();
                let norm = rows.iter().map(|&r| gi.row(r).iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
                for r in 0..delta.shape()[0] {
                    let keep = rows.contains(&r) && norm > 0.0;
                    for x in delta.row_mut(r) {
                        *x = if keep { self.adv.epsilon * *x / norm } else { 0.0 };
                    }
                }
                let mut out = p.clone();
                let t = out.get_mut(ITEM_FACTORS).expect("model layout");
                for (x, d) in t.data_mut().iter_mut().zip(delta.data()) {
                    *x += d;
                }
                Ok(Perturbed::Params(out))
            }
            AdvTarget::Features => {
                let fg = grad_features(self.spec, p, self.batch, self.features)?;
                let norm = fg.norm_sq.sqrt();
                let mut out = self.features.clone();
                if norm > 0.0 {
                    for (m, items) in &fg.per_item {
                        let mat = out.get_mut(m).expect("modality present");
                        for (&i, g) in items {
                            for (x, gx) in mat.row_mut(i).iter_mut().zip(g) {
                                *x += self.adv.epsilon * gx / norm;
                            }
                        }
                    }
                }
                Ok(Perturbed::Features(out))
            }
        }
    }

    /// Loss at the adversarially perturbed point only.
    pub fn adversarial_loss(&self, p: &ParamSet) -> Result<f64> {
        match self.perturbed(p)? {
            Perturbed::Params(q) => bpr_loss(self.spec, &q, self.batch, self.features),
            Perturbed::Features(f) => bpr_loss(self.spec, p, self.batch, &f),
        }
    }
}

impl Objective for AdversarialObjective<'_> {
    fn loss(&self, p: &ParamSet) -> Result<f64> {
        let clean = bpr_loss(self.spec, p, self.batch, self.features)?;
        if self.adv.lambda_adv == 0.0 {
            return Ok(clean);
        }
        Ok(clean + self.adv.lambda_adv * self.adversarial_loss(p)?)
    }

    fn grad(&self, p: &ParamSet) -> Result<ParamSet> {
        let mut g = grad_params(self.spec, p, self.batch, self.features)?;
        if self.adv.lambda_adv == 0.0 {
            return Ok(g);
        }
        let g_adv = match self.perturbed(p)? {
            Perturbed::Params(q) => grad_params(self.spec, &q, self.batch, self.features)?,
            Perturbed::Features(f) => grad_params(self.spec, p, self.batch, &f)?,
        };
        g.axpy(self.adv.lambda_adv, &g_adv);
        Ok(g)
    }
}

/// One adversarial training iteration `iter`, mirrored when the schedule says so.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_train_step(
    spec: &ModelSpec,
    params: &ParamSet,
    state: &OptState,
    batch: &[Triplet],
    features: &Features,
    adv: AdvConfig,
    cfg: &MgConfig,
    iter: usize,
) -> Result<(ParamSet, OptState)> {
    if adv.epsilon.is_nan() || adv.epsilon <= 0.0 {
        return Err(MgError::Config("epsilon must be positive".into()));
    }
    let obj = AdversarialObjective {
        spec,
        features,
        batch,
        adv,
    };
    if cfg.is_mirror_iteration(iter) {
        let (p, s, _) = mirror_step(params, state, &obj, cfg, iter)?;
        Ok((p, s))
    } else {
        let (p, s, _) = normal_step(params, state, &obj, cfg, iter)?;
        Ok((p, s))
    }
}

/// Convenience: directions used by [`landscape`] for external plotting.
pub fn landscape_directions(params: &ParamSet, seed: u64) -> Result<(Direction, Direction)> {
    let spec = params.shape_spec();
    Ok((
        random_direction(&spec, seed, params, NormMode::TensorNormalized)?,
        random_direction(&spec, seed.wrapping_add(1), params, NormMode::TensorNormalized)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example_metrics() {
        // T = {A, B}; only A is retrieved, at rank 1.
        let relevant: BTreeSet<usize> = [0, 1].into();
        let m = ranking_metrics(0, &[0, 7, 8, 9, 10], &relevant, 5, MapNorm::MinKTest);
        assert!((m.recall - 0.5).abs() < 1e-15);
        assert!((m.precision - 0.2).abs() < 1e-15);
        assert!((m.ap - 0.5).abs() < 1e-15);
        assert!((m.ndcg - 1.0 / (1.0 + 1.0 / 3f64.log2())).abs() < 1e-12);
        assert!((m.ndcg - 0.61315).abs() < 1e-5);
    }

    #[test]
    fn perfect_ranking() {
        let relevant: BTreeSet<usize> = [3, 4].into();
        let m = ranking_metrics(0, &[4, 3, 0, 1, 2], &relevant, 5, MapNorm::MinKTest);
        assert_eq!((m.recall, m.ap, m.ndcg), (1.0, 1.0, 1.0));
        let m = ranking_metrics(0, &[4, 0, 3], &relevant, 3, MapNorm::TestSize);
        assert!((m.ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn linspace_has_exact_center() {
        let v = linspace_symmetric(1.0, 21);
        assert_eq!(v[10], 0.0);
        for (i, x) in v.iter().enumerate() {
            assert!((x - (-1.0 + 0.1 * i as f64)).abs() < 1e-12);
        }
        assert_eq!(v[0], -1.0);
        assert_eq!(v[20], 1.0);
    }

    #[test]
    fn relative_decrease_guard() {
        assert_eq!(relative_decrease(0.0, 0.0), None);
        assert_eq!(relative_decrease(0.5, 0.25), Some(0.5));
    }

    #[test]
    fn two_basin_shape() {
        let f = TwoBasin::default();
        assert_eq!(f.value(-1.0), 0.0);
        assert_eq!(f.value(1.0), 0.0);
        assert_eq!(f.value_grad(1.0).1, 0.0);
        // curvature by second differences of the analytic gradient
        let h = 1e-6;
        let curv = |t: f64| (f.value_grad(t + h).1 - f.value_grad(t - h).1) / (2.0 * h);
        assert!((curv(-1.0) - 200.0).abs() < 1e-3);
        assert!((curv(1.0) - 2.0).abs() < 1e-6);
        assert!(TwoBasin::new(200.0, 0.5).is_err());
        // gradient agrees with finite differences of the value
        for t in [-2.5, -1.1, -0.3, 0.4, 1.7, 2.9] {
            let fd = (f.value(t + h) - f.value(t - h)) / (2.0 * h);
            assert!((fd - f.value_grad(t).1).abs() < 1e-6, "t={t}");
        }
        let b = f.barrier();
        assert!(b > -1.0 && b < 1.0);
        assert!(f.value_grad(b).1.abs() < 1e-9);
        assert_eq!(f.classify(f64::NAN), Basin::Neither);
        assert_eq!(f.classify(-1.0), Basin::Sharp);
        assert_eq!(f.classify(1.0), Basin::Flat);
    }

    #[test]
    fn fixed_init_at_flat_minimum_stays() {
        let f = TwoBasin::default();
        let arms = [
            BasinArm::plain("sgd", 0.005, OptimizerKind::Sgd, 500).unwrap(),
            BasinArm::mirror("mg", MgConfig::new(2.0, 1.0, 1, 0.005, OptimizerKind::Sgd, 500).unwrap()),
            BasinArm::sam("sam", 0.005, 0.05, OptimizerKind::Sgd, 500).unwrap(),
        ];
        let res = basin_benchmark(&f, &arms, 1, 0, BasinInit::Fixed(1.0), Exec::Sequential).unwrap();
        for r in &res {
            assert_eq!(r.flat_frequency, 1.0, "{}", r.label);
        }
    }

    #[test]
    fn adjust_fraction_rounding_and_self_mix() {
        let feats: Features = [(
            "v".to_string(),
            crate::data::Matrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5]).unwrap(),
        )]
        .into();
        let (out, chosen) = adjust_features(&feats, 3, 0.1, AdjustMode::Mix, 0).unwrap();
        assert!(chosen.is_empty());
        assert_eq!(out, feats);
        let (out, chosen) = adjust_features(&feats, 3, 1.0, AdjustMode::SelfMix, 0).unwrap();
        assert_eq!(chosen, vec![0, 1, 2]);
        for (a, b) in out["v"].data().iter().zip(feats["v"].data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let (out, _) = adjust_features(&feats, 3, 1.0, AdjustMode::Mix, 0).unwrap();
        assert_ne!(out, feats);
        // mixing preserves each row's norm
        for i in 0..3 {
            assert!((l2(out["v"].row(i)) - l2(feats["v"].row(i))).abs() < 1e-12);
        }
        assert!(adjust_features(&feats, 3, 0.0, AdjustMode::Mix, 0).is_err());
    }
}
