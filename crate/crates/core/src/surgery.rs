//! Gradient strategies and the parameter update.
//!
//! Every strategy turns the pair `(g_sim, g_reg)` into the gradient that is
//! actually applied. `LayerwiseProject` is the default: for each layer the
//! similarity gradient is kept when it agrees with the regularisation
//! gradient and otherwise projected onto the plane normal to it, so no loss
//! weight is needed. The other strategies are the baselines it is compared
//! against. The result then feeds Adam.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{GradientSet, ParamGroup, Tape};
use crate::grid::Grid2;
use crate::network::{image_tensor, RegistrationModel};
use crate::objective::{smoothness_loss, Similarity};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    /// Project per parameter group (one group per convolution layer).
    LayerwiseProject,
    /// Project once over the concatenation of all groups.
    GlobalProject,
    /// Per coordinate: keep `g_sim` where the signs agree, otherwise draw
    /// from `N(0, sigma²)`. `None` uses the std of the group's `g_sim`.
    AgrRandom { sigma: Option<f64> },
    /// `g_sim + lambda * g_reg`, the classical weighted objective.
    WeightedSum { lambda: f64 },
    SimilarityOnly,
}

impl Strategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Strategy::WeightedSum { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => {
                Err(Error::Invalid(format!("lambda must be >= 0, got {lambda}")))
            }
            Strategy::AgrRandom { sigma: Some(s) } if !(s > 0.0 && s.is_finite()) => {
                Err(Error::Invalid(format!("sigma must be > 0, got {s}")))
            }
            _ => Ok(()),
        }
    }

    /// Row label used in comparison tables.
    pub fn label(&self) -> String {
        match self {
            Strategy::LayerwiseProject => "layerwise".into(),
            Strategy::GlobalProject => "global".into(),
            Strategy::AgrRandom { sigma: None } => "agr".into(),
            Strategy::AgrRandom { sigma: Some(s) } => format!("agr(sigma={s})"),
            Strategy::WeightedSum { lambda } => format!("weighted(lambda={lambda})"),
            Strategy::SimilarityOnly => "similarity-only".into(),
        }
    }

    /// The seven regimes run by `compare`, in table order.
    pub fn comparison_set() -> Vec<Strategy> {
        vec![
            Strategy::LayerwiseProject,
            Strategy::GlobalProject,
            Strategy::AgrRandom { sigma: None },
            Strategy::WeightedSum { lambda: 0.1 },
            Strategy::WeightedSum { lambda: 0.01 },
            Strategy::WeightedSum { lambda: 0.001 },
            Strategy::SimilarityOnly,
        ]
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Parses the strategy name alone; parameters come from separate config keys.
impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layerwise" => Ok(Strategy::LayerwiseProject),
            "global" => Ok(Strategy::GlobalProject),
            "agr" => Ok(Strategy::AgrRandom { sigma: None }),
            "weighted" => Ok(Strategy::WeightedSum { lambda: 0.01 }),
            "similarity-only" => Ok(Strategy::SimilarityOnly),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected layerwise, global, agr, weighted, similarity-only)"
            ))),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Keeps `g_sim` when `<g_sim, g_reg> > 0`, otherwise removes its component
/// along `g_reg`.
pub fn project_if_conflict(g_sim: &[f64], g_reg: &[f64]) -> Result<Vec<f64>> {
    if g_sim.len() != g_reg.len() {
        return Err(Error::shape(
            "project_if_conflict",
            format!("g_sim has {} entries, g_reg {}", g_sim.len(), g_reg.len()),
        ));
    }
    let scale = g_reg.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || dot(g_sim, g_reg) > 0.0 {
        return Ok(g_sim.to_vec());
    }
    // unit direction, so the result does not depend on the size of g_reg
    let mut unit: Vec<f64> = g_reg.iter().map(|v| v / scale).collect();
    let n = dot(&unit, &unit).sqrt();
    unit.iter_mut().for_each(|v| *v /= n);
    let k = dot(g_sim, &unit);
    Ok(g_sim.iter().zip(&unit).map(|(s, u)| s - k * u).collect())
}

/// Whether each layer's similarity and regularisation gradients conflict
/// (strictly negative inner product), in sorted layer order.
pub fn conflict_flags(g_sim: &GradientSet, g_reg: &GradientSet) -> Vec<(String, bool)> {
    g_sim
        .iter()
        .map(|(id, s)| {
            let conflicting = g_reg.get(id).is_some_and(|r| dot(s, r) < 0.0);
            (id.to_string(), conflicting)
        })
        .collect()
}

fn check_keys(g_sim: &GradientSet, g_reg: &GradientSet) -> Result<()> {
    let missing_reg: Vec<&str> = g_sim.keys().filter(|k| g_reg.get(k).is_none()).collect();
    let missing_sim: Vec<&str> = g_reg.keys().filter(|k| g_sim.get(k).is_none()).collect();
    if !missing_reg.is_empty() || !missing_sim.is_empty() {
        return Err(Error::Invalid(format!(
            "gradient sets differ: missing from g_reg {missing_reg:?}, missing from g_sim {missing_sim:?}"
        )));
    }
    for (id, s) in g_sim.iter() {
        let r = g_reg.get(id).unwrap_or_default();
        if s.len() != r.len() {
            return Err(Error::shape(
                "apply_strategy",
                format!("group {id}: g_sim {} vs g_reg {}", s.len(), r.len()),
            ));
        }
    }
    Ok(())
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

fn population_std(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Combines the two gradient sets into the applied gradient.
pub fn apply_strategy<R: Rng + ?Sized>(
    strategy: &Strategy,
    g_sim: &GradientSet,
    g_reg: &GradientSet,
    rng: &mut R,
) -> Result<GradientSet> {
    strategy.validate()?;
    check_keys(g_sim, g_reg)?;
    let reg = |id: &str| g_reg.get(id).expect("keys checked");
    match *strategy {
        Strategy::SimilarityOnly => Ok(g_sim.clone()),
        Strategy::WeightedSum { lambda } => Ok(g_sim.map_values(|id, s| {
            s.iter().zip(reg(id)).map(|(a, b)| a + lambda * b).collect()
        })),
        Strategy::LayerwiseProject => {
            let mut out = GradientSet::new();
            for (id, s) in g_sim.iter() {
                out.insert(id, project_if_conflict(s, reg(id))?);
            }
            Ok(out)
        }
        Strategy::GlobalProject => {
            let projected = project_if_conflict(&g_sim.concat(), &g_reg.concat())?;
            let mut out = GradientSet::new();
            let mut off = 0;
            for (id, s) in g_sim.iter() {
                out.insert(id, projected[off..off + s.len()].to_vec());
                off += s.len();
            }
            Ok(out)
        }
        Strategy::AgrRandom { sigma } => {
            let mut out = GradientSet::new();
            for (id, s) in g_sim.iter() {
                let sd = sigma.unwrap_or_else(|| population_std(s));
                let normal = (sd > 0.0 && sd.is_finite()).then(|| Normal::new(0.0, sd).expect("positive std"));
                let v = s
                    .iter()
                    .zip(reg(id))
                    .map(|(&a, &b)| {
                        if sign(a) * sign(b) >= 0 {
                            a
                        } else {
                            normal.as_ref().map_or(0.0, |n| n.sample(rng))
                        }
                    })
                    .collect();
                out.insert(id, v);
            }
            Ok(out)
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments per layer id.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(groups: &[ParamGroup]) -> Self {
        let zeros = |g: &ParamGroup| (g.layer_id.clone(), vec![0.0; g.numel()]);
        AdamState {
            first: groups.iter().filter(|g| g.trainable).map(zeros).collect(),
            second: groups.iter().filter(|g| g.trainable).map(zeros).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every trainable group.
pub fn adam_step(groups: &mut [ParamGroup], grads: &GradientSet, state: &mut AdamState, lr: f64) -> Result<()> {
    let trainable = groups.iter().filter(|g| g.trainable).count();
    if grads.len() != trainable || state.first.len() != trainable {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} gradient groups and {} moment groups for {trainable} trainable groups",
                grads.len(),
                state.first.len()
            ),
        ));
    }
    for g in groups.iter().filter(|g| g.trainable) {
        let grad = grads
            .get(&g.layer_id)
            .ok_or_else(|| Error::shape("adam_step", format!("no gradient for {}", g.layer_id)))?;
        let m = &state.first[&g.layer_id];
        let v = &state.second[&g.layer_id];
        if grad.len() != g.numel() || m.len() != g.numel() || v.len() != g.numel() {
            return Err(Error::shape(
                "adam_step",
                format!("group {} has {} params, gradient {}", g.layer_id, g.numel(), grad.len()),
            ));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for g in groups.iter_mut().filter(|g| g.trainable) {
        let grad = grads.get(&g.layer_id).expect("checked");
        let m = state.first.get_mut(&g.layer_id).expect("checked");
        let v = state.second.get_mut(&g.layer_id).expect("checked");
        let mut i = 0;
        for t in &mut g.tensors {
            for p in t.data_mut() {
                let gi = grad[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
                i += 1;
            }
        }
    }
    Ok(())
}

/// A mini-batch of (fixed, moving) pairs of identical shape.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub fixed: &'a [&'a Grid2],
    pub moving: &'a [&'a Grid2],
}

/// Similarity and smoothness gradients from one shared forward pass.
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub l_sim: f64,
    pub l_reg: f64,
    pub g_sim: GradientSet,
    pub g_reg: GradientSet,
}

/// Runs forward (field, warp, both losses) and the two backward passes.
/// Returns the tape and forward record so callers can fold batch statistics.
pub fn loss_gradients(
    model: &RegistrationModel,
    batch: Batch<'_>,
    similarity: Similarity,
) -> Result<(LossGradients, Tape, crate::network::Forward)> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, batch.fixed, batch.moving)?;
    let moving = tape.input(image_tensor(batch.moving)?);
    let warped = tape.warp(moving, fwd.field)?;
    let sim = similarity.loss(&mut tape, warped, &image_tensor(batch.fixed)?)?;
    let reg = smoothness_loss(&mut tape, fwd.field)?;
    let g_sim = tape.backward(sim.node)?;
    let g_reg = tape.backward(reg.node)?;
    let finite = |g: &GradientSet| g.iter().all(|(_, v)| v.iter().all(|x| x.is_finite()));
    if !finite(&g_sim) || !finite(&g_reg) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok((
        LossGradients {
            l_sim: sim.value,
            l_reg: reg.value,
            g_sim,
            g_reg,
        },
        tape,
        fwd,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub l_sim: f64,
    pub l_reg: f64,
    /// Layers whose raw gradients had a negative inner product.
    pub conflicted: usize,
    pub groups: usize,
    pub sim_norm: f64,
    pub reg_norm: f64,
    pub applied_norm: f64,
    pub conflict_flags: Vec<(String, bool)>,
}

/// One optimisation step: forward, both backward passes, strategy, Adam,
/// then running batch-norm statistics.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut RegistrationModel,
    batch: Batch<'_>,
    similarity: Similarity,
    strategy: &Strategy,
    optimizer: &mut AdamState,
    lr: f64,
    rng: &mut R,
) -> Result<StepReport> {
    let (lg, tape, fwd) = loss_gradients(model, batch, similarity)?;
    let applied = apply_strategy(strategy, &lg.g_sim, &lg.g_reg, rng)?;
    let flags = conflict_flags(&lg.g_sim, &lg.g_reg);
    adam_step(model.groups_mut(), &applied, optimizer, lr)?;
    model.absorb_batch_stats(&tape, &fwd);
    Ok(StepReport {
        l_sim: lg.l_sim,
        l_reg: lg.l_reg,
        conflicted: flags.iter().filter(|(_, c)| *c).count(),
        groups: flags.len(),
        sim_norm: lg.g_sim.norm(),
        reg_norm: lg.g_reg.norm(),
        applied_norm: applied.norm(),
        conflict_flags: flags,
    })
}


#[cfg(test)]
mod properties {
    use super::*;
    use super::Strategy as Regime;
    use crate::network::RegistrationModel;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, Strategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..64, -6i32..6, -6i32..6).prop_flat_map(|(n, ea, eb)| {
            let (sa, sb) = (10f64.powi(ea), 10f64.powi(eb));
            (
                prop::collection::vec(-1.0f64..1.0, n).prop_map(move |v| v.iter().map(|x| x * sa).collect()),
                prop::collection::vec(-1.0f64..1.0, n).prop_map(move |v| v.iter().map(|x| x * sb).collect()),
            )
        })
    }

    proptest! {
        #[test]
        fn projection_properties((s, r) in pair()) {
            let g = project_if_conflict(&s, &r).unwrap();
            let n = |v: &[f64]| dot(v, v).sqrt();
            if dot(&s, &r) > 0.0 {
                prop_assert_eq!(&g, &s);
            } else {
                prop_assert!(dot(&g, &r).abs() <= 1e-10 * n(&g) * n(&r) + 1e-300);
            }
            prop_assert!(n(&g) <= n(&s));
            prop_assert!(dot(&g, &s) >= 0.0);
        }

        #[test]
        fn projection_ignores_regularisation_scale((s, r) in pair(), e in -6i32..=6) {
            let c = 10f64.powi(e);
            let base = project_if_conflict(&s, &r).unwrap();
            let scaled: Vec<f64> = r.iter().map(|v| v * c).collect();
            let g = project_if_conflict(&s, &scaled).unwrap();
            let norm = dot(&s, &s).sqrt().max(1e-300);
            for (a, b) in g.iter().zip(&base) {
                prop_assert!((a - b).abs() <= 1e-12 * norm);
            }
        }

        #[test]
        fn conflicted_count_is_bounded(
            groups in prop::collection::vec(prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..6), 1..8),
        ) {
            let (mut s, mut r) = (GradientSet::new(), GradientSet::new());
            for (i, g) in groups.iter().enumerate() {
                s.insert(format!("l{i}"), g.iter().map(|p| p.0).collect());
                r.insert(format!("l{i}"), g.iter().map(|p| p.1).collect());
            }
            let flags = conflict_flags(&s, &r);
            prop_assert_eq!(flags.len(), groups.len());
            let out = apply_strategy(&Regime::LayerwiseProject, &s, &r, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            for (id, conflicted) in flags {
                if !conflicted {
                    prop_assert_eq!(out.get(&id).unwrap(), s.get(&id).unwrap());
                }
            }
        }
    }

    #[test]
    fn identical_pair_leaves_direct_field_in_place() {
        let img = Grid2::from_fn(8, 8, |x, y| ((x * 3 + y * 5) % 8) as f64 / 8.0);
        let mut model = RegistrationModel::direct_field(8, 8);
        let mut opt = AdamState::new(model.groups());
        let before = model.groups()[0].flatten();
        let report = train_step(
            &mut model,
            Batch {
                fixed: &[&img],
                moving: &[&img],
            },
            Similarity::Mse,
            &Regime::LayerwiseProject,
            &mut opt,
            5e-3,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(report.l_sim, 0.0);
        assert_eq!(report.sim_norm, 0.0);
        assert!(report.conflicted <= report.groups);
        assert_eq!(model.groups()[0].flatten(), before);
    }
}
