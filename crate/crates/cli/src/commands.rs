use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::Context;
use mgrad::data::{self, Dataset, Features, TripletSampler};
use mgrad::models::{self, bpr_loss, grad_params, BprObjective, ModelKind, ModelSpec, Triplet};
use mgrad::optim::{train_with, write_trace_csv, MgConfig, Objective, OptState, TrainOutcome};
use mgrad::params::{load_checkpoint, save_checkpoint, ParamSet};
use mgrad::probes::{
    self, AdvConfig, AdversarialObjective, BasinArm, BasinInit, MetricReport, MetricSummary, TwoBasin,
};
use mgrad::Result as MgResult;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::settings::Settings;
use crate::{ConfigError, ProbeKind};

/// Per-iteration training objective: plain BPR or its adversarial extension.
struct TrainObjective<'a> {
    spec: &'a ModelSpec,
    features: &'a Features,
    batch: Vec<Triplet>,
    adv: Option<AdvConfig>,
}

impl Objective for TrainObjective<'_> {
    fn loss(&self, p: &ParamSet) -> MgResult<f64> {
        match self.adv {
            Some(adv) => AdversarialObjective { spec: self.spec, features: self.features, batch: &self.batch, adv }.loss(p),
            None => bpr_loss(self.spec, p, &self.batch, self.features),
        }
    }

    fn grad(&self, p: &ParamSet) -> MgResult<ParamSet> {
        match self.adv {
            Some(adv) => AdversarialObjective { spec: self.spec, features: self.features, batch: &self.batch, adv }.grad(p),
            None => grad_params(self.spec, p, &self.batch, self.features),
        }
    }
}

/// Trains from the seeded initialization; minibatches are drawn from a
/// separate stream seeded with `seed + 1`, so arms sharing `seed` see the
/// same data order.
fn fit(s: &Settings, ds: &Dataset, spec: &ModelSpec, cfg: &MgConfig, seed: u64) -> anyhow::Result<TrainOutcome> {
    if s.batch == 0 {
        anyhow::bail!(ConfigError("batch must be at least 1".into()));
    }
    if let Some(adv) = s.adv_config() {
        if adv.epsilon.is_nan() || adv.epsilon <= 0.0 {
            anyhow::bail!(ConfigError("epsilon must be positive".into()));
        }
    }
    let p0 = models::init_params(spec, ds.num_users(), ds.num_items(), seed, s.init_scale)?;
    let sampler = TripletSampler::new(ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let adv = s.adv_config();
    let out = train_with(
        &p0,
        &OptState::new(cfg.base()),
        |_| {
            Ok(TrainObjective {
                spec,
                features: &ds.features,
                batch: sampler.sample_batch(&mut rng, s.batch),
                adv,
            })
        },
        cfg,
    )?;
    Ok(out)
}

/// Fixed evaluation batch (one triplet per training interaction).
fn eval_batch(s: &Settings, ds: &Dataset) -> anyhow::Result<Vec<Triplet>> {
    Ok(TripletSampler::new(ds)?.full_pass(s.seed))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_with<F>(path: &Path, f: F) -> anyhow::Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

fn split_name(s: &Settings) -> String {
    serde_json::to_value(s.split).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

fn summary_line(r: &MetricSummary, k: usize) -> String {
    format!(
        "recall@{k} {:.4}  precision@{k} {:.4}  map@{k} {:.4}  ndcg@{k} {:.4}",
        r.recall, r.precision, r.map, r.ndcg
    )
}

pub fn train(s: &Settings) -> anyhow::Result<()> {
    let ds = s.dataset()?;
    let spec = s.model_spec(&ds)?;
    let cfg = s.mg_config()?;
    let out = fit(s, &ds, &spec, &cfg, s.seed)?;
    let batch = eval_batch(s, &ds)?;
    let final_loss = bpr_loss(&spec, &out.params, &batch, &ds.features)?;
    let report = probes::topk_metrics(&spec, &out.params, &ds, &ds.features, &s.eval_config())?;

    let meta = json!({
        "model": spec,
        "users": ds.num_users(),
        "items": ds.num_items(),
        "final_loss": final_loss,
        "optimizer": cfg,
    });
    save_checkpoint(&s.out.join("model.mgckpt"), &out.params, meta)?;
    write_with(&s.out.join("trace.csv"), |w| write_trace_csv(w, &out.trace))?;
    write_json(&s.out.join("metrics.json"), &report)?;
    println!("final loss {final_loss:.6}");
    println!("{}: {}", split_name(s), summary_line(&report.summary(), report.k));
    Ok(())
}

struct Loaded {
    spec: ModelSpec,
    params: ParamSet,
    meta: serde_json::Value,
    ds: Dataset,
}

fn load_model(s: &Settings) -> anyhow::Result<Loaded> {
    let path = s.checkpoint_path();
    if !path.exists() {
        anyhow::bail!(ConfigError(format!("checkpoint not found: {}", path.display())));
    }
    let (params, meta) = load_checkpoint(&path)?;
    let spec: ModelSpec = serde_json::from_value(meta["model"].clone())
        .map_err(|e| ConfigError(format!("{}: bad model metadata: {e}", path.display())))?;
    let ds = s.dataset()?;
    let expected = spec.layout(ds.num_users(), ds.num_items());
    if params.shape_spec() != expected {
        anyhow::bail!(ConfigError(format!(
            "{} does not match the dataset: checkpoint layout {:?}, dataset needs {:?}",
            path.display(),
            params.shape_spec().entries(),
            expected.entries()
        )));
    }
    if spec.kind == ModelKind::MultimodalMf && spec.modality_dims != ds.feature_dims() {
        anyhow::bail!(ConfigError(format!(
            "{} was trained on modalities {:?}, dataset has {:?}",
            path.display(),
            spec.modality_dims,
            ds.feature_dims()
        )));
    }
    Ok(Loaded { spec, params, meta, ds })
}

pub fn eval(s: &Settings) -> anyhow::Result<()> {
    let m = load_model(s)?;
    let report: MetricReport = probes::topk_metrics(&m.spec, &m.params, &m.ds, &m.ds.features, &s.eval_config())?;
    write_json(&s.out.join("eval.json"), &report)?;
    println!("{}: {}", split_name(s), summary_line(&report.summary(), report.k));
    Ok(())
}

pub fn probe(s: &Settings, kind: ProbeKind) -> anyhow::Result<()> {
    let m = load_model(s)?;
    let feats = &m.ds.features;
    let eval = s.eval_config();
    match kind {
        ProbeKind::Noise => {
            let r = probes::noise_probe(&m.spec, &m.params, &m.ds, feats, &eval, s.sigma, s.repeats, s.seed, s.noise_target)?;
            write_json(&s.out.join("noise.json"), &r)?;
            print_probe(&r);
        }
        ProbeKind::Adjust => {
            let r = probes::adjustment_probe(&m.spec, &m.params, &m.ds, feats, &eval, s.fraction, s.adjust_mode, s.seed)?;
            write_json(&s.out.join("adjust.json"), &r)?;
            print_probe(&r);
        }
        ProbeKind::Landscape => {
            let batch = eval_batch(s, &m.ds)?;
            let obj = BprObjective { spec: &m.spec, features: feats, batch: &batch };
            let grid = probes::landscape(&m.params, |p| obj.loss(p), s.grid, s.range, s.seed, s.exec)?;
            write_with(&s.out.join("landscape.csv"), |w| grid.write_csv(w))?;
            if let (Some(c), Some(saved)) = (grid.center(), m.meta["final_loss"].as_f64()) {
                log::info!("landscape center {c} (checkpoint loss {saved})");
            }
            println!("{}x{} grid over [-{r}, {r}]", s.grid, s.grid, r = s.range);
        }
        ProbeKind::Flatness => {
            let batch = eval_batch(s, &m.ds)?;
            let obj = BprObjective { spec: &m.spec, features: feats, batch: &batch };
            let f = probes::flatness_scalars(&m.params, &obj, s.radius, s.samples, s.seed, s.exec)?;
            write_json(
                &s.out.join("flatness.json"),
                &json!({ "grad_norm": f.grad_norm, "sharpness": f.sharpness, "perturbation_gap": f.perturbation_gap, "radius": s.radius, "samples": s.samples }),
            )?;
            println!("grad_norm {:.6e}  sharpness {:.6e}  gap {:.6e}", f.grad_norm, f.sharpness, f.perturbation_gap);
        }
        ProbeKind::Bound => {
            let batch = eval_batch(s, &m.ds)?;
            let terms = probes::robustness_terms(&m.spec, &m.params, &batch, feats)?;
            let grad_sq = grad_params(&m.spec, &m.params, &batch, feats)?.norm_sq();
            let scale = s.alpha1 * s.alpha2 * s.eta;
            write_json(
                &s.out.join("bound.json"),
                &json!({
                    "grad_norm_sq": grad_sq,
                    "input_grad_norm_sq": terms.input_grad_norm_sq,
                    "layer_ratio": terms.layer_ratio,
                    "regularizer": scale * grad_sq,
                    "robustness_term": scale * terms.layer_ratio * terms.input_grad_norm_sq,
                }),
            )?;
            println!(
                "|grad|^2 {:.6e}  |grad_x|^2 {:.6e}  layer ratio {:.6e}",
                grad_sq, terms.input_grad_norm_sq, terms.layer_ratio
            );
        }
    }
    Ok(())
}

fn print_probe(r: &probes::ProbeReport) {
    println!("original:  {}", summary_line(&r.org, r.k));
    println!("perturbed: {}", summary_line(&r.perturbed_mean, r.k));
    match r.relative_decrease.recall {
        Some(d) => println!("relative recall decrease {:.2}%", 100.0 * d),
        None => println!("relative recall decrease undefined (original recall is 0)"),
    }
}

#[derive(Serialize)]
struct Arm {
    per_seed: Vec<MetricSummary>,
    mean: MetricSummary,
    eta: f64,
}

fn arm(per_seed: Vec<MetricSummary>, eta: f64) -> Arm {
    let n = per_seed.len() as f64;
    let mean = |f: fn(&MetricSummary) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
    let mean = MetricSummary {
        recall: mean(|m| m.recall),
        precision: mean(|m| m.precision),
        map: mean(|m| m.map),
        ndcg: mean(|m| m.ndcg),
    };
    Arm { per_seed, mean, eta }
}

fn improv(mg: f64, base: f64) -> Option<f64> {
    (base > 0.0).then(|| (mg - base) / base)
}

pub fn compare(s: &Settings) -> anyhow::Result<()> {
    if s.seeds == 0 {
        anyhow::bail!(ConfigError("seeds must be at least 1".into()));
    }
    let ds = s.dataset()?;
    let spec = s.model_spec(&ds)?;
    let mg_cfg = MgConfig::new(s.alpha1, s.alpha2, s.beta, s.eta, s.base, s.iterations)?
        .with_moment_update_in_mirror(s.moment_update_in_mirror);
    let base_cfg = if s.matched_rate {
        mg_cfg.matched_baseline()
    } else {
        mg_cfg.clone().without_mirror()
    };
    let eval = s.eval_config();
    let (mut base_runs, mut mg_runs) = (Vec::new(), Vec::new());
    for i in 0..s.seeds as u64 {
        let seed = s.seed.wrapping_add(i);
        for (cfg, runs) in [(&base_cfg, &mut base_runs), (&mg_cfg, &mut mg_runs)] {
            let out = fit(s, &ds, &spec, cfg, seed)?;
            runs.push(probes::topk_metrics(&spec, &out.params, &ds, &ds.features, &eval)?.summary());
        }
        log::info!("seed {seed} done");
    }
    let (base, mg) = (arm(base_runs, base_cfg.eta()), arm(mg_runs, mg_cfg.eta()));
    let report = json!({
        "k": s.k,
        "split": s.split,
        "seeds": (0..s.seeds as u64).map(|i| s.seed.wrapping_add(i)).collect::<Vec<_>>(),
        "matched_rate": s.matched_rate,
        "baseline": base,
        "mg": mg,
        "improv": {
            "recall": improv(mg.mean.recall, base.mean.recall),
            "precision": improv(mg.mean.precision, base.mean.precision),
            "map": improv(mg.mean.map, base.mean.map),
            "ndcg": improv(mg.mean.ndcg, base.mean.ndcg),
        },
    });
    write_json(&s.out.join("compare.json"), &report)?;
    println!("baseline: {}", summary_line(&base.mean, s.k));
    println!("mg:       {}", summary_line(&mg.mean, s.k));
    Ok(())
}

pub fn gridsearch(s: &Settings) -> anyhow::Result<()> {
    let ds = s.dataset()?;
    let spec = s.model_spec(&ds)?;
    let eval = s.eval_config();
    let mut cells = Vec::new();
    for &a1 in &s.alpha1_grid {
        for &a2 in &s.alpha2_grid {
            match MgConfig::new(a1, a2, s.beta, s.eta, s.base, s.iterations) {
                Ok(cfg) => cells.push((a1, a2, cfg.with_moment_update_in_mirror(s.moment_update_in_mirror))),
                Err(e) => log::info!("skipping alpha1={a1}, alpha2={a2}: {e}"),
            }
        }
    }
    if cells.is_empty() {
        anyhow::bail!(ConfigError("no feasible (alpha1, alpha2) cell with alpha1 > alpha2 > 0".into()));
    }
    let mut rows = Vec::new();
    for (a1, a2, cfg) in cells {
        let out = fit(s, &ds, &spec, &cfg, s.seed)?;
        let r = probes::topk_metrics(&spec, &out.params, &ds, &ds.features, &eval)?;
        rows.push((a1, a2, r.recall, r.ndcg));
    }
    let mut ranked: Vec<usize> = (0..rows.len()).collect();
    ranked.sort_by(|&a, &b| rows[b].2.total_cmp(&rows[a].2).then(rows[b].3.total_cmp(&rows[a].3)).then(a.cmp(&b)));
    write_with(&s.out.join("gridsearch.csv"), |w| {
        writeln!(w, "rank,alpha1,alpha2,recall,ndcg")?;
        for (rank, &i) in ranked.iter().enumerate() {
            let (a1, a2, rec, ndcg) = rows[i];
            writeln!(w, "{},{a1},{a2},{rec},{ndcg}", rank + 1)?;
        }
        Ok(())
    })?;
    write_with(&s.out.join("heatmap.csv"), |w| {
        write!(w, "alpha1\\alpha2")?;
        for a2 in &s.alpha2_grid {
            write!(w, ",{a2}")?;
        }
        writeln!(w)?;
        for &a1 in &s.alpha1_grid {
            write!(w, "{a1}")?;
            for &a2 in &s.alpha2_grid {
                match rows.iter().find(|r| r.0 == a1 && r.1 == a2) {
                    Some(r) => write!(w, ",{}", r.2)?,
                    None => write!(w, ",")?,
                }
            }
            writeln!(w)?;
        }
        Ok(())
    })?;
    let best = rows[ranked[0]];
    println!("best: alpha1={} alpha2={} recall@{} {:.4}", best.0, best.1, s.k, best.2);
    Ok(())
}

pub fn basin(s: &Settings) -> anyhow::Result<()> {
    let mg = MgConfig::new(s.alpha1, s.alpha2, s.beta, s.eta, s.base, s.iterations)?;
    let rate = mg.effective_rate();
    let mut arms = vec![
        BasinArm::plain("plain", rate, s.base, s.iterations)?,
        BasinArm::mirror("mg", mg),
    ];
    if s.sam {
        arms.push(BasinArm::sam("sam", rate, s.rho, s.base, s.iterations)?);
    }
    let init = s.basin_init.map_or(BasinInit::Uniform, BasinInit::Fixed);
    let f = TwoBasin::default();
    let results = probes::basin_benchmark(&f, &arms, s.trials, s.seed, init, s.exec)?;
    write_with(&s.out.join("basin.csv"), |w| probes::write_basin_csv(w, &results))?;
    for r in &results {
        println!(
            "{:<6} flat {:.3}  sharp {}  neither {}  ({} trials)",
            r.label, r.flat_frequency, r.sharp, r.neither, r.trials
        );
    }
    Ok(())
}

pub fn synth(s: &Settings) -> anyhow::Result<()> {
    let ds = Settings { synth: true, ..s.clone() }.dataset()?;
    data::write_interactions(&s.out.join("interactions.tsv"), &ds)?;
    for (m, mat) in &ds.features {
        data::write_features(&s.out.join(format!("features.{m}.csv")), mat, &ds.item_tokens)?;
    }
    let st = data::stats(&ds);
    write_json(&s.out.join("stats.json"), &st)?;
    println!("{} users, {} items, {} interactions", st.users, st.items, st.interactions);
    Ok(())
}

pub fn stats(s: &Settings) -> anyhow::Result<()> {
    let ds = s.dataset()?;
    let st = data::stats(&ds);
    write_json(&s.out.join("stats.json"), &st)?;
    println!(
        "users {}  items {}  interactions {}  sparsity {:.2}%",
        st.users,
        st.items,
        st.interactions,
        st.sparsity_percent()
    );
    Ok(())
}
