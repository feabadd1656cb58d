//! Base optimizers, the mirror-gradient schedule, a sharpness-aware baseline
//! and the second-order expansion used to check the mirror step.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MgError, Result};
use crate::params::ParamSet;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const RMSPROP_DECAY: f64 = 0.99;
const RMSPROP_EPS: f64 = 1e-8;
const ADAGRAD_EPS: f64 = 1e-10;

/// Loss growth beyond this multiple of the initial loss aborts training.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Rmsprop,
    Adagrad,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Rmsprop => "rmsprop",
            OptimizerKind::Adagrad => "adagrad",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = MgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::Rmsprop),
            "adagrad" => Ok(OptimizerKind::Adagrad),
            other => Err(MgError::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Mirror-gradient hyperparameters.
///
/// Invariants (checked by every constructor): `alpha1 > alpha2 > 0`,
/// `beta >= 1`, `eta > 0`, `iterations >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MgConfig {
    alpha1: f64,
    alpha2: f64,
    beta: usize,
    eta: f64,
    base: OptimizerKind,
    iterations: usize,
    moment_update_in_mirror: bool,
}

impl Default for MgConfig {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 0.5,
            beta: 3,
            eta: 1e-3,
            base: OptimizerKind::Adam,
            iterations: 1000,
            moment_update_in_mirror: true,
        }
    }
}

impl MgConfig {
    pub fn new(
        alpha1: f64,
        alpha2: f64,
        beta: usize,
        eta: f64,
        base: OptimizerKind,
        iterations: usize,
    ) -> Result<Self> {
        let cfg = Self {
            alpha1,
            alpha2,
            beta,
            eta,
            base,
            iterations,
            moment_update_in_mirror: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha2 > 0.0 && self.alpha1.is_finite() && self.alpha2.is_finite()) {
            return Err(MgError::Config(format!(
                "alpha2 must be positive and finite (got {})",
                self.alpha2
            )));
        }
        if self.alpha1 <= self.alpha2 {
            return Err(MgError::Config(format!(
                "alpha1 > alpha2 required (got alpha1={}, alpha2={})",
                self.alpha1, self.alpha2
            )));
        }
        if self.beta == 0 {
            return Err(MgError::Config("beta must be at least 1".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(MgError::Config(format!("eta must be positive (got {})", self.eta)));
        }
        if self.iterations == 0 {
            return Err(MgError::Config("iterations must be at least 1".into()));
        }
        Ok(())
    }

    pub fn with_moment_update_in_mirror(mut self, on: bool) -> Self {
        self.moment_update_in_mirror = on;
        self
    }

    /// Disables mirror steps entirely (`beta` past any iteration budget).
    pub fn without_mirror(mut self) -> Self {
        self.beta = usize::MAX;
        self
    }

    pub fn with_eta(mut self, eta: f64) -> Result<Self> {
        self.eta = eta;
        self.validate()?;
        Ok(self)
    }

    pub fn with_iterations(mut self, iterations: usize) -> Result<Self> {
        self.iterations = iterations;
        self.validate()?;
        Ok(self)
    }

    pub fn with_base(mut self, base: OptimizerKind) -> Self {
        self.base = base;
        self
    }

    pub fn alpha1(&self) -> f64 {
        self.alpha1
    }
    pub fn alpha2(&self) -> f64 {
        self.alpha2
    }
    pub fn beta(&self) -> usize {
        self.beta
    }
    pub fn eta(&self) -> f64 {
        self.eta
    }
    pub fn base(&self) -> OptimizerKind {
        self.base
    }
    pub fn iterations(&self) -> usize {
        self.iterations
    }
    pub fn moment_update_in_mirror(&self) -> bool {
        self.moment_update_in_mirror
    }

    /// First-order step size of one mirror pair, `(alpha1 - alpha2) * eta`.
    pub fn effective_rate(&self) -> f64 {
        (self.alpha1 - self.alpha2) * self.eta
    }

    /// Plain-training counterpart whose learning rate is [`MgConfig::effective_rate`].
    pub fn matched_baseline(&self) -> Self {
        Self {
            eta: self.effective_rate(),
            ..self.clone()
        }
        .without_mirror()
    }

    pub fn is_mirror_iteration(&self, t: usize) -> bool {
        t.is_multiple_of(self.beta)
    }
}

/// A differentiable training objective. Implementations must be pure
/// functions of their argument.
pub trait Objective {
    fn loss(&self, p: &ParamSet) -> Result<f64>;
    fn grad(&self, p: &ParamSet) -> Result<ParamSet>;
}

impl<O: Objective + ?Sized> Objective for &O {
    fn loss(&self, p: &ParamSet) -> Result<f64> {
        (**self).loss(p)
    }
    fn grad(&self, p: &ParamSet) -> Result<ParamSet> {
        (**self).grad(p)
    }
}

/// Objective built from a pair of closures.
pub struct FnObjective<L, G> {
    loss: L,
    grad: G,
}

impl<L, G> FnObjective<L, G>
where
    L: Fn(&ParamSet) -> Result<f64>,
    G: Fn(&ParamSet) -> Result<ParamSet>,
{
    pub fn new(loss: L, grad: G) -> Self {
        Self { loss, grad }
    }
}

impl<L, G> Objective for FnObjective<L, G>
where
    L: Fn(&ParamSet) -> Result<f64>,
    G: Fn(&ParamSet) -> Result<ParamSet>,
{
    fn loss(&self, p: &ParamSet) -> Result<f64> {
        (self.loss)(p)
    }
    fn grad(&self, p: &ParamSet) -> Result<ParamSet> {
        (self.grad)(p)
    }
}

/// Optimizer accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    kind: OptimizerKind,
    step: u64,
    first: Option<ParamSet>,
    second: Option<ParamSet>,
}

impl OptState {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            first: None,
            second: None,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> Option<&ParamSet> {
        self.first.as_ref()
    }

    pub fn second_moment(&self) -> Option<&ParamSet> {
        self.second.as_ref()
    }
}

/// One optimizer update `p <- p - lr * direction(g, state)`.
///
/// A negative `lr` moves uphill; the mirror ascent sub-step relies on this.
pub fn base_update(
    state: &OptState,
    p: &ParamSet,
    g: &ParamSet,
    lr: f64,
) -> Result<(ParamSet, OptState)> {
    p.check_layout(g, "base_update gradient")?;
    g.ensure_finite("gradient")?;
    let mut next = state.clone();
    next.step += 1;
    let mut out = p.clone();
    match state.kind {
        OptimizerKind::Sgd => out.axpy(-lr, g),
        OptimizerKind::Adam => {
            let m = next.first.get_or_insert_with(|| p.zeros_like());
            m.check_layout(p, "adam first moment")?;
            let v = next.second.get_or_insert_with(|| p.zeros_like());
            v.check_layout(p, "adam second moment")?;
            let t = next.step as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            for (((x, mt), vt), gt) in values_mut(&mut out)
                .zip(values_mut(m))
                .zip(values_mut(v))
                .zip(g.values())
            {
                *mt = ADAM_BETA1 * *mt + (1.0 - ADAM_BETA1) * gt;
                *vt = ADAM_BETA2 * *vt + (1.0 - ADAM_BETA2) * gt * gt;
                let m_hat = *mt / c1;
                let v_hat = *vt / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        OptimizerKind::Rmsprop => {
            let v = next.second.get_or_insert_with(|| p.zeros_like());
            v.check_layout(p, "rmsprop accumulator")?;
            for ((x, vt), gt) in values_mut(&mut out).zip(values_mut(v)).zip(g.values()) {
                *vt = RMSPROP_DECAY * *vt + (1.0 - RMSPROP_DECAY) * gt * gt;
                *x -= lr * gt / (vt.sqrt() + RMSPROP_EPS);
            }
        }
        OptimizerKind::Adagrad => {
            let v = next.second.get_or_insert_with(|| p.zeros_like());
            v.check_layout(p, "adagrad accumulator")?;
            for ((x, vt), gt) in values_mut(&mut out).zip(values_mut(v)).zip(g.values()) {
                *vt += gt * gt;
                *x -= lr * gt / (vt.sqrt() + ADAGRAD_EPS);
            }
        }
    }
    out.ensure_finite("updated parameters")?;
    Ok((out, next))
}

fn values_mut(p: &mut ParamSet) -> impl Iterator<Item = &mut f64> {
    p.iter_mut().flat_map(|(_, t)| t.data_mut().iter_mut())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Normal,
    MirrorDescent,
    MirrorAscent,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Normal => "normal",
            Phase::MirrorDescent => "mirror-descent",
            Phase::MirrorAscent => "mirror-ascent",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepTrace {
    pub iter: usize,
    pub phase: Phase,
    /// Loss at the point where the sub-step's gradient was taken.
    pub loss: f64,
    pub grad_norm: f64,
}

/// Plain update with learning rate `eta`.
pub fn normal_step<O: Objective + ?Sized>(
    p: &ParamSet,
    state: &OptState,
    objective: &O,
    cfg: &MgConfig,
    iter: usize,
) -> Result<(ParamSet, OptState, StepTrace)> {
    let loss = objective.loss(p)?;
    let g = objective.grad(p)?;
    let (next, state) = base_update(state, p, &g, cfg.eta)?;
    let trace = StepTrace {
        iter,
        phase: Phase::Normal,
        loss,
        grad_norm: g.norm(),
    };
    Ok((next, state, trace))
}

/// Descent with `alpha1 * eta` followed by ascent with `alpha2 * eta` on the
/// gradient recomputed at the intermediate point.
pub fn mirror_step<O: Objective + ?Sized>(
    p: &ParamSet,
    state: &OptState,
    objective: &O,
    cfg: &MgConfig,
    iter: usize,
) -> Result<(ParamSet, OptState, [StepTrace; 2])> {
    cfg.validate()?;
    let loss0 = objective.loss(p)?;
    let g0 = objective.grad(p)?;
    let (mid, mid_state) = base_update(state, p, &g0, cfg.alpha1 * cfg.eta)?;
    let loss1 = objective.loss(&mid)?;
    let g1 = objective.grad(&mid)?;
    let (out, out_state) = base_update(&mid_state, &mid, &g1, -cfg.alpha2 * cfg.eta)?;
    let traces = [
        StepTrace {
            iter,
            phase: Phase::MirrorDescent,
            loss: loss0,
            grad_norm: g0.norm(),
        },
        StepTrace {
            iter,
            phase: Phase::MirrorAscent,
            loss: loss1,
            grad_norm: g1.norm(),
        },
    ];
    let state = if cfg.moment_update_in_mirror {
        out_state
    } else {
        state.clone()
    };
    Ok((out, state, traces))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub state: OptState,
    pub trace: Vec<StepTrace>,
}

/// Runs the mirror-gradient schedule on a fixed objective.
pub fn train<O: Objective + ?Sized>(
    p0: &ParamSet,
    state0: &OptState,
    objective: &O,
    cfg: &MgConfig,
) -> Result<TrainOutcome> {
    train_with(p0, state0, |_| Ok(objective), cfg)
}

/// Runs the mirror-gradient schedule with a per-iteration objective, e.g. a
/// freshly sampled mini-batch. `objective_at(t)` is called once per
/// iteration `t = 1..=T`; both sub-steps of a mirror pair share it.
pub fn train_with<O, F>(
    p0: &ParamSet,
    state0: &OptState,
    mut objective_at: F,
    cfg: &MgConfig,
) -> Result<TrainOutcome>
where
    O: Objective,
    F: FnMut(usize) -> Result<O>,
{
    cfg.validate()?;
    let mut params = p0.clone();
    let mut state = state0.clone();
    let mut trace = Vec::with_capacity(cfg.iterations + cfg.iterations / cfg.beta.max(1));
    let mut limit = None;
    for t in 1..=cfg.iterations {
        let objective = objective_at(t)?;
        if cfg.is_mirror_iteration(t) {
            let (p, s, tr) = mirror_step(&params, &state, &objective, cfg, t)?;
            params = p;
            state = s;
            trace.extend(tr);
        } else {
            let (p, s, tr) = normal_step(&params, &state, &objective, cfg, t)?;
            params = p;
            state = s;
            trace.push(tr);
        }
        let loss = trace[trace.len() - if cfg.is_mirror_iteration(t) { 2 } else { 1 }].loss;
        let limit = *limit.get_or_insert(DIVERGENCE_FACTOR * loss.abs().max(1.0));
        if !loss.is_finite() || loss > limit {
            return Err(MgError::Diverged { iter: t, loss });
        }
    }
    Ok(TrainOutcome {
        params,
        state,
        trace,
    })
}

/// Writes a trace as CSV with header `iter,phase,loss,grad_norm`.
pub fn write_trace_csv<W: Write>(mut w: W, trace: &[StepTrace]) -> std::io::Result<()> {
    writeln!(w, "iter,phase,loss,grad_norm")?;
    for s in trace {
        writeln!(w, "{},{},{},{}", s.iter, s.phase, s.loss, s.grad_norm)?;
    }
    Ok(())
}

/// Default central-difference step for [`hvp`]: `1e-5 * (1 + |p|_inf)`.
pub fn default_hvp_eps(p: &ParamSet) -> f64 {
    1e-5 * (1.0 + p.norm_inf())
}

/// Hessian-vector product by central differences of the gradient.
pub fn hvp<O: Objective + ?Sized>(
    objective: &O,
    p: &ParamSet,
    v: &ParamSet,
    eps: f64,
) -> Result<ParamSet> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(MgError::Config(format!("hvp eps must be positive (got {eps})")));
    }
    p.check_layout(v, "hvp direction")?;
    let plus = objective.grad(&p.add_scaled(eps, v)?)?;
    let minus = objective.grad(&p.add_scaled(-eps, v)?)?;
    let mut out = plus;
    out.axpy(-1.0, &minus);
    let out = out.scaled(0.5 / eps);
    out.ensure_finite("hessian-vector product")?;
    Ok(out)
}

/// Second-order expansion of a plain-gradient mirror pair:
/// `p - (a1 - a2) eta g - a1 a2 eta^2 H g`.
pub fn oracle_step<O: Objective + ?Sized>(
    p: &ParamSet,
    objective: &O,
    cfg: &MgConfig,
) -> Result<ParamSet> {
    let g = objective.grad(p)?;
    if g.norm_sq() == 0.0 {
        return Ok(p.clone());
    }
    let hg = hvp(objective, p, &g, default_hvp_eps(p))?;
    let eta = cfg.eta;
    let mut out = p.clone();
    out.axpy(-(cfg.alpha1 - cfg.alpha2) * eta, &g);
    out.axpy(-cfg.alpha1 * cfg.alpha2 * eta * eta, &hg);
    out.ensure_finite("oracle step")?;
    Ok(out)
}

/// Sharpness-aware step: the gradient is taken at `p + rho g / |g|` and
/// applied at `p` with learning rate `eta`.
pub fn sam_step<O: Objective + ?Sized>(
    p: &ParamSet,
    state: &OptState,
    objective: &O,
    rho: f64,
    cfg: &MgConfig,
) -> Result<(ParamSet, OptState)> {
    if rho.is_nan() || rho <= 0.0 {
        return Err(MgError::Config(format!("rho must be positive (got {rho})")));
    }
    let g = objective.grad(p)?;
    let norm = g.norm();
    let g_adv = if norm == 0.0 {
        g
    } else {
        objective.grad(&p.add_scaled(rho / norm, &g)?)?
    };
    base_update(state, p, &g_adv, cfg.eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Tensor;

    fn theta(x: &[f64]) -> ParamSet {
        ParamSet::new().with("t", Tensor::from_vec(x.to_vec())).unwrap()
    }

    fn first(p: &ParamSet) -> f64 {
        p.get("t").unwrap().data()[0]
    }

    /// L = 1/2 sum a_i t_i^2
    fn diag_quadratic(a: Vec<f64>) -> impl Objective {
        let a2 = a.clone();
        FnObjective::new(
            move |p: &ParamSet| {
                Ok(p.values().zip(&a).map(|(x, ai)| 0.5 * ai * x * x).sum())
            },
            move |p: &ParamSet| {
                let g: Vec<f64> = p.values().zip(&a2).map(|(x, ai)| ai * x).collect();
                Ok(theta(&g))
            },
        )
    }

    fn sgd_cfg(a1: f64, a2: f64, eta: f64) -> MgConfig {
        MgConfig::new(a1, a2, 1, eta, OptimizerKind::Sgd, 1).unwrap()
    }

    #[test]
    fn sgd_update() {
        let s = OptState::new(OptimizerKind::Sgd);
        let (p, s) = base_update(&s, &theta(&[1.0]), &theta(&[2.0]), 0.1).unwrap();
        assert!((first(&p) - 0.8).abs() < 1e-15);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn adam_first_step() {
        let s = OptState::new(OptimizerKind::Adam);
        let (p, _) = base_update(&s, &theta(&[0.0]), &theta(&[1.0]), 0.001).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((first(&p) - expected).abs() < 1e-18, "{}", first(&p));
        assert!((first(&p) + 0.000_999_999_990).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_keeps_params_but_advances_moments() {
        for kind in [
            OptimizerKind::Sgd,
            OptimizerKind::Adam,
            OptimizerKind::Rmsprop,
            OptimizerKind::Adagrad,
        ] {
            let s = OptState::new(kind);
            let p = theta(&[1.0, -2.0]);
            let (q, s) = base_update(&s, &p, &theta(&[0.5, 3.0]), 0.0).unwrap();
            assert_eq!(q, p, "{kind}");
            assert_eq!(s.step(), 1);
            if kind != OptimizerKind::Sgd {
                let v = s.second_moment().unwrap();
                assert!(v.values().all(|x| x > 0.0));
            }
        }
    }

    #[test]
    fn rejects_bad_gradients() {
        let s = OptState::new(OptimizerKind::Sgd);
        let p = theta(&[1.0]);
        let mut bad = ParamSet::new();
        bad.insert("u", Tensor::from_vec(vec![1.0])).unwrap();
        assert!(matches!(
            base_update(&s, &p, &bad, 0.1),
            Err(MgError::LayoutMismatch(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(MgConfig::new(0.5, 0.5, 3, 0.1, OptimizerKind::Sgd, 1).is_err());
        assert!(MgConfig::new(0.5, 1.0, 3, 0.1, OptimizerKind::Sgd, 1).is_err());
        assert!(MgConfig::new(1.0, 0.0, 3, 0.1, OptimizerKind::Sgd, 1).is_err());
        assert!(MgConfig::new(1.0, 0.5, 0, 0.1, OptimizerKind::Sgd, 1).is_err());
        assert!(MgConfig::new(1.0, 0.5, 3, 0.0, OptimizerKind::Sgd, 1).is_err());
        assert!(MgConfig::new(1.0, 0.5, 3, 0.1, OptimizerKind::Sgd, 0).is_err());
        let d = MgConfig::default();
        assert_eq!((d.alpha1(), d.alpha2(), d.beta()), (1.0, 0.5, 3));
    }

    #[test]
    fn normal_step_quadratic() {
        let obj = diag_quadratic(vec![1.0]);
        let cfg = sgd_cfg(2.0, 1.0, 0.1);
        let s = OptState::new(OptimizerKind::Sgd);
        let (p, _, tr) = normal_step(&theta(&[1.0]), &s, &obj, &cfg, 1).unwrap();
        assert!((first(&p) - 0.9).abs() < 1e-15);
        assert_eq!(tr.phase, Phase::Normal);
        let (p, _, _) = normal_step(&theta(&[0.0]), &s, &obj, &cfg, 1).unwrap();
        assert_eq!(first(&p), 0.0);
    }

    #[test]
    fn normal_step_matches_base_update() {
        let obj = diag_quadratic(vec![1.0, 3.0]);
        let cfg = sgd_cfg(2.0, 1.0, 0.05).with_base(OptimizerKind::Adam);
        let s = OptState::new(OptimizerKind::Adam);
        let p = theta(&[0.3, -1.2]);
        let (a, sa, _) = normal_step(&p, &s, &obj, &cfg, 1).unwrap();
        let (b, sb) = base_update(&s, &p, &obj.grad(&p).unwrap(), 0.05).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn mirror_step_quadratic_closed_form() {
        let obj = diag_quadratic(vec![1.0]);
        let s = OptState::new(OptimizerKind::Sgd);
        let (p, _, tr) = mirror_step(&theta(&[1.0]), &s, &obj, &sgd_cfg(2.0, 1.0, 0.1), 1).unwrap();
        assert!((first(&p) - 0.88).abs() < 1e-15);
        assert_eq!(tr[0].phase, Phase::MirrorDescent);
        assert_eq!(tr[1].phase, Phase::MirrorAscent);

        let (p, _, _) = mirror_step(&theta(&[0.0]), &s, &obj, &sgd_cfg(2.0, 1.0, 0.1), 1).unwrap();
        assert_eq!(first(&p), 0.0);
    }

    #[test]
    fn mirror_step_equal_alphas_contracts_second_order() {
        // alpha1 == alpha2 is rejected by the config, so drive the pair by hand.
        let obj = diag_quadratic(vec![1.0]);
        let s = OptState::new(OptimizerKind::Sgd);
        let p = theta(&[1.0]);
        let (mid, s1) = base_update(&s, &p, &obj.grad(&p).unwrap(), 0.1).unwrap();
        let (out, _) = base_update(&s1, &mid, &obj.grad(&mid).unwrap(), -0.1).unwrap();
        assert!((first(&out) - 0.99).abs() < 1e-15);
        assert!(mirror_step(&p, &s, &obj, &MgConfig { alpha2: 1.0, alpha1: 1.0, ..sgd_cfg(2.0, 1.0, 0.1) }, 1).is_err());
    }

    #[test]
    fn moment_flag_restores_state() {
        let obj = diag_quadratic(vec![1.0, 2.0]);
        let cfg = sgd_cfg(2.0, 1.0, 0.01).with_base(OptimizerKind::Adam);
        let s = OptState::new(OptimizerKind::Adam);
        let p = theta(&[1.0, 1.0]);
        let (_, kept, _) = mirror_step(&p, &s, &obj, &cfg, 1).unwrap();
        assert_eq!(kept.step(), 2);
        let cfg = cfg.with_moment_update_in_mirror(false);
        let (q, restored, _) = mirror_step(&p, &s, &obj, &cfg, 1).unwrap();
        assert_eq!(restored, s);
        assert_ne!(q, p);
    }

    #[test]
    fn train_schedule() {
        let obj = diag_quadratic(vec![1.0]);
        let s = OptState::new(OptimizerKind::Sgd);
        let cfg = MgConfig::new(2.0, 1.0, 3, 0.1, OptimizerKind::Sgd, 6).unwrap();
        let out = train(&theta(&[1.0]), &s, &obj, &cfg).unwrap();
        let mirrored: Vec<usize> = out
            .trace
            .iter()
            .filter(|t| t.phase != Phase::Normal)
            .map(|t| t.iter)
            .collect();
        assert_eq!(mirrored, vec![3, 3, 6, 6]);

        let every = MgConfig::new(2.0, 1.0, 1, 0.1, OptimizerKind::Sgd, 4).unwrap();
        let out = train(&theta(&[1.0]), &s, &obj, &every).unwrap();
        assert!(out.trace.iter().all(|t| t.phase != Phase::Normal));
        assert_eq!(out.trace.len(), 8);
    }

    #[test]
    fn beta_past_budget_is_plain_training() {
        let obj = diag_quadratic(vec![1.0, 4.0]);
        let s = OptState::new(OptimizerKind::Adam);
        let cfg = MgConfig::new(2.0, 1.0, 50, 0.05, OptimizerKind::Adam, 20).unwrap();
        let out = train(&theta(&[1.0, -1.0]), &s, &obj, &cfg).unwrap();
        let mut p = theta(&[1.0, -1.0]);
        let mut st = s.clone();
        for t in 1..=20 {
            let (q, s2, _) = normal_step(&p, &st, &obj, &cfg, t).unwrap();
            p = q;
            st = s2;
        }
        assert_eq!(out.params.fingerprint(), p.fingerprint());
    }

    #[test]
    fn train_aborts_on_divergence() {
        // Ascent on a concave loss grows without bound.
        let obj = FnObjective::new(
            |p: &ParamSet| Ok(first(p).powi(2) * 1e3 + 1.0),
            |p: &ParamSet| Ok(theta(&[2e3 * first(p)])),
        );
        let s = OptState::new(OptimizerKind::Sgd);
        let cfg = MgConfig::new(2.0, 1.0, 100, 1.0, OptimizerKind::Sgd, 100).unwrap();
        assert!(matches!(
            train(&theta(&[1.0]), &s, &obj, &cfg),
            Err(MgError::Diverged { .. }) | Err(MgError::NonFinite(_))
        ));
    }

    #[test]
    fn hvp_quadratic() {
        let obj = diag_quadratic(vec![2.0, 6.0]);
        let p = theta(&[0.3, -0.7]);
        let h = hvp(&obj, &p, &theta(&[1.0, 1.0]), 1e-5).unwrap();
        let v: Vec<f64> = h.values().collect();
        assert!((v[0] - 2.0).abs() < 1e-9 && (v[1] - 6.0).abs() < 1e-9);
        let z = hvp(&obj, &p, &theta(&[0.0, 0.0]), 1e-5).unwrap();
        assert!(z.values().all(|x| x == 0.0));
        assert!(hvp(&obj, &p, &theta(&[1.0, 1.0]), 0.0).is_err());
    }

    #[test]
    fn oracle_matches_mirror_on_quadratic() {
        let obj = diag_quadratic(vec![1.0]);
        let cfg = sgd_cfg(2.0, 1.0, 0.1);
        let o = oracle_step(&theta(&[1.0]), &obj, &cfg).unwrap();
        assert!((first(&o) - 0.88).abs() < 1e-10);
        let z = oracle_step(&theta(&[0.0]), &obj, &cfg).unwrap();
        assert_eq!(first(&z), 0.0);
    }

    #[test]
    fn sam_hand_example() {
        let obj = diag_quadratic(vec![1.0]);
        let cfg = sgd_cfg(2.0, 1.0, 0.1);
        let s = OptState::new(OptimizerKind::Sgd);
        let (p, _) = sam_step(&theta(&[1.0]), &s, &obj, 0.1, &cfg).unwrap();
        assert!((first(&p) - 0.89).abs() < 1e-15);

        let (z, _) = sam_step(&theta(&[0.0]), &s, &obj, 0.1, &cfg).unwrap();
        assert_eq!(first(&z), 0.0);

        let p0 = theta(&[0.4, -1.3]);
        let obj2 = diag_quadratic(vec![1.0, 5.0]);
        let (a, _) = sam_step(&p0, &s, &obj2, 1e-12, &cfg).unwrap();
        let (b, _, _) = normal_step(&p0, &s, &obj2, &cfg, 1).unwrap();
        let diff = a.add_scaled(-1.0, &b).unwrap().norm();
        assert!(diff <= 1e-9, "{diff}");
        assert!(sam_step(&p0, &s, &obj2, 0.0, &cfg).is_err());
    }

    #[test]
    fn trace_csv_format() {
        let mut buf = Vec::new();
        write_trace_csv(
            &mut buf,
            &[StepTrace {
                iter: 3,
                phase: Phase::MirrorAscent,
                loss: 0.5,
                grad_norm: 2.0,
            }],
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iter,phase,loss,grad_norm\n3,mirror-ascent,0.5,2\n"
        );
    }
}
