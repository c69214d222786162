use serde::{Deserialize, Serialize};

use super::mixture::{alpha_gradient, mixture_state, MixtureWeights};
use super::objective::{CallCounts, LanguageObjective, ObjectiveKind, StateObjective};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::ssm::ModelParams;
use crate::store::StateIndex;

/// Projected AdamW on the mixture weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub objective: ObjectiveKind,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            steps: 10,
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            objective: ObjectiveKind::Question,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.epsilon,
            self.weight_decay,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.learning_rate < 0.0 || self.epsilon <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::input(
                "optimizer hyperparameters must be finite and non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::input("betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Loss and weights at the start of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub loss: f64,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub doc_ids: Vec<String>,
    pub steps: Vec<TraceStep>,
    pub final_alpha: Vec<f64>,
    pub calls: CallCounts,
}

impl OptimizationTrace {
    /// One JSON object per step.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("plain data serializes"));
            out.push('\n');
        }
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// Optimize `α` against any state objective. Each step costs one forward and
/// one backward pass; no extra evaluation happens after the last update.
pub fn optimize_with<T: Scalar, O: StateObjective<T>>(
    objective: &O,
    index: &StateIndex,
    init: &MixtureWeights,
    cfg: &OptimizerConfig,
) -> Result<(MixtureWeights, OptimizationTrace)> {
    cfg.validate()?;
    init.validate()?;
    let before = objective.calls();
    let k = init.len();
    let mut alpha = init.alpha.clone();
    let mut m = vec![0.0; k];
    let mut v = vec![0.0; k];
    let mut steps = Vec::with_capacity(cfg.steps);

    for t in 1..=cfg.steps {
        let w = MixtureWeights {
            doc_ids: init.doc_ids.clone(),
            alpha: alpha.clone(),
        };
        let state = mixture_state::<T>(index, &w)?;
        let (loss, g_state) = objective.loss_and_gradient(&state)?;
        if !loss.is_finite() {
            return Err(Error::input(format!("objective is not finite at step {t}")));
        }
        let grad = alpha_gradient(index, &w, &g_state)?;
        steps.push(TraceStep {
            step: t - 1,
            loss,
            alpha: alpha.clone(),
        });
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for i in 0..k {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let step = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.epsilon) + cfg.weight_decay * alpha[i];
            alpha[i] = (alpha[i] - cfg.learning_rate * step).clamp(0.0, 1.0);
        }
    }

    let after = objective.calls();
    let trace = OptimizationTrace {
        doc_ids: init.doc_ids.clone(),
        steps,
        final_alpha: alpha.clone(),
        calls: CallCounts {
            forward: after.forward - before.forward,
            backward: after.backward - before.backward,
        },
    };
    Ok((
        MixtureWeights {
            doc_ids: init.doc_ids.clone(),
            alpha,
        },
        trace,
    ))
}

/// Optimize `α` for the language-model objective selected in `cfg`.
pub fn optimize_weights<T: Scalar>(
    params: &ModelParams<T>,
    index: &StateIndex,
    query: &[u32],
    answer: Option<&[u32]>,
    init: &MixtureWeights,
    cfg: &OptimizerConfig,
) -> Result<(MixtureWeights, OptimizationTrace)> {
    index.validate_model(params)?;
    let objective = LanguageObjective::build(params, cfg.objective, query, answer)?;
    optimize_with(&objective, index, init, cfg)
}
