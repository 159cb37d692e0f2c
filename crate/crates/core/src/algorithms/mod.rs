//! Multi-domain learners sharing one update-on-K-minibatches contract.

pub mod penalties;

use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Tape, Var};
use crate::batch::MiniBatch;
use crate::error::{Error, Result};
use crate::models::{Model, Mode};
use crate::rng::{self, streams, Rng};

pub use penalties::{
    coral_penalty, groupdro_reweight, irm_penalty, mmd_penalty, sd_penalty, soft_cross_entropy,
    vrex_penalty, IrmMode,
};

/// Registered algorithm names, in registry order.
pub const ALGORITHMS: [&str; 8] = [
    "erm",
    "groupdro",
    "irm",
    "vrex",
    "coral",
    "mmd",
    "sd",
    "mixup_inter",
];

/// Known multi-domain algorithms that this crate does not implement.
pub const OUT_OF_SCOPE: [&str; 12] = [
    "arm", "cdann", "dann", "eqrm", "mldg", "mtl", "ridg", "selfreg", "sagnet", "rsc", "cad",
    "fish",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    Erm,
    GroupDro,
    Irm,
    Vrex,
    Coral,
    Mmd,
    Sd,
    MixupInter,
}

impl AlgorithmKind {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "erm" => AlgorithmKind::Erm,
            "groupdro" => AlgorithmKind::GroupDro,
            "irm" => AlgorithmKind::Irm,
            "vrex" => AlgorithmKind::Vrex,
            "coral" => AlgorithmKind::Coral,
            "mmd" => AlgorithmKind::Mmd,
            "sd" => AlgorithmKind::Sd,
            "mixup_inter" => AlgorithmKind::MixupInter,
            other if OUT_OF_SCOPE.contains(&other) => {
                return Err(Error::invalid(
                    "algorithm",
                    format!("`{other}` is not in scope; see registry: {}", ALGORITHMS.join(", ")),
                ))
            }
            other => {
                return Err(Error::Unknown {
                    kind: "algorithm".into(),
                    name: other.into(),
                    registered: ALGORITHMS.join(", "),
                })
            }
        })
    }

    pub fn name(self) -> &'static str {
        ALGORITHMS[self as usize]
    }

    pub fn pairwise(self) -> bool {
        matches!(
            self,
            AlgorithmKind::Vrex | AlgorithmKind::Coral | AlgorithmKind::Mmd | AlgorithmKind::MixupInter
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hparams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub irm_lambda: f64,
    pub irm_penalty_anneal_iters: u64,
    pub irm_mode: IrmMode,
    pub vrex_lambda: f64,
    pub vrex_penalty_anneal_iters: u64,
    pub coral_lambda: f64,
    pub mmd_lambda: f64,
    pub mmd_gammas: Vec<f64>,
    pub sd_lambda: f64,
    pub groupdro_eta: f64,
    pub mixup_alpha: f64,
}

impl Default for Hparams {
    fn default() -> Self {
        Hparams {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            irm_lambda: 100.0,
            irm_penalty_anneal_iters: 500,
            irm_mode: IrmMode::SplitHalf,
            vrex_lambda: 10.0,
            vrex_penalty_anneal_iters: 500,
            coral_lambda: 1.0,
            mmd_lambda: 1.0,
            mmd_gammas: vec![0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0],
            sd_lambda: 0.1,
            groupdro_eta: 0.01,
            mixup_alpha: 0.2,
        }
    }
}

impl Hparams {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid(format!("hparams.{key}"), msg))
            }
        };
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be positive")?;
        check((0.0..1.0).contains(&self.momentum), "momentum", "must be in [0, 1)")?;
        check(self.weight_decay >= 0.0, "weight_decay", "must be non-negative")?;
        for (key, v) in [
            ("irm_lambda", self.irm_lambda),
            ("vrex_lambda", self.vrex_lambda),
            ("coral_lambda", self.coral_lambda),
            ("mmd_lambda", self.mmd_lambda),
            ("sd_lambda", self.sd_lambda),
        ] {
            check(v >= 0.0 && v.is_finite(), key, "must be a non-negative number")?;
        }
        check(
            !self.mmd_gammas.is_empty() && self.mmd_gammas.iter().all(|&g| g > 0.0),
            "mmd_gammas",
            "must be a non-empty list of positive numbers",
        )?;
        check(self.groupdro_eta >= 0.0, "groupdro_eta", "must be non-negative")?;
        check(self.mixup_alpha > 0.0, "mixup_alpha", "must be positive")?;
        Ok(())
    }
}

/// Scalar diagnostics of one update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub task_loss: f64,
    pub penalty: f64,
    pub penalty_weight: f64,
    pub total: f64,
    pub per_domain_losses: Vec<f64>,
}

/// Random draws consumed by one update, fixed so the loss is a
/// deterministic function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    /// mixup_inter: `(a, b, lambda)` for each cross-domain pair.
    pub pairs: Vec<(usize, usize, f64)>,
    /// groupdro: weights used in the total.
    pub group_weights: Option<Vec<f64>>,
}

/// Loss, flat gradient and batch-norm statistics of one evaluation.
#[derive(Debug)]
pub struct Evaluation {
    pub report: LossReport,
    pub gradient: Vec<f64>,
    pub bn_stats: Vec<Vec<BatchStats>>,
    /// GroupDRO weights used in the total.
    pub group_weights: Option<Vec<f64>>,
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn reset(&mut self) {
        self.velocity = None;
    }

    /// `g += wd * theta; v = mu * v + g; theta -= lr * v` (first step `v = g`).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let g: Vec<f64> = grad
            .iter()
            .zip(params.iter())
            .map(|(g, p)| g + self.weight_decay * p)
            .collect();
        let v = match self.velocity.take() {
            None => g,
            Some(mut v) => {
                for (vi, gi) in v.iter_mut().zip(&g) {
                    *vi = self.momentum * *vi + gi;
                }
                v
            }
        };
        for (p, vi) in params.iter_mut().zip(&v) {
            *p -= self.lr * vi;
        }
        self.velocity = Some(v);
    }
}

#[derive(Debug, Clone)]
pub struct Algorithm {
    kind: AlgorithmKind,
    hparams: Hparams,
    model: Model,
    optimizer: Sgd,
    q: Option<Vec<f64>>,
    step: u64,
    rng: Rng,
}

/// Builds a learner; `seed` drives its own random draws.
pub fn build_algorithm(name: &str, model: Model, hparams: &Hparams, seed: u64) -> Result<Algorithm> {
    let kind = AlgorithmKind::parse(name)?;
    hparams.validate()?;
    Ok(Algorithm {
        kind,
        hparams: hparams.clone(),
        optimizer: Sgd::new(hparams.lr, hparams.momentum, hparams.weight_decay),
        model,
        q: None,
        step: 0,
        rng: rng::stream(seed, streams::ALGORITHM),
    })
}

fn truncated(batch: &MiniBatch, n: usize) -> MiniBatch {
    if batch.len() == n {
        return batch.clone();
    }
    let idx: Vec<usize> = (0..n).collect();
    let mut out = batch.with_images(batch.images.select(&idx));
    out.labels = batch.labels.select(&idx);
    out
}

impl Algorithm {
    pub fn kind(&self) -> AlgorithmKind {
        self.kind
    }

    pub fn hparams(&self) -> &Hparams {
        &self.hparams
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn set_model(&mut self, model: Model) {
        self.model = model;
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Current GroupDRO weights, once initialized.
    pub fn group_weights(&self) -> Option<&[f64]> {
        self.q.as_deref()
    }

    /// Initializes GroupDRO weights uniformly for `k` domains.
    pub fn init_group_weights(&mut self, k: usize) {
        if self.kind == AlgorithmKind::GroupDro && self.q.as_ref().is_none_or(|q| q.len() != k) {
            self.q = Some(vec![1.0 / k as f64; k]);
        }
    }

    /// Coefficient applied to the penalty at the current step.
    pub fn penalty_weight(&self) -> f64 {
        let h = &self.hparams;
        let annealed = |lambda: f64, iters: u64| if self.step >= iters { lambda } else { 1.0 };
        match self.kind {
            AlgorithmKind::Erm | AlgorithmKind::GroupDro | AlgorithmKind::MixupInter => 0.0,
            AlgorithmKind::Irm => annealed(h.irm_lambda, h.irm_penalty_anneal_iters),
            AlgorithmKind::Vrex => annealed(h.vrex_lambda, h.vrex_penalty_anneal_iters),
            AlgorithmKind::Coral => h.coral_lambda,
            AlgorithmKind::Mmd => h.mmd_lambda,
            AlgorithmKind::Sd => h.sd_lambda,
        }
    }

    fn check_batches(&self, batches: &[MiniBatch]) -> Result<()> {
        if batches.is_empty() {
            return Err(Error::invalid("batches", "at least one domain batch is required"));
        }
        if self.kind.pairwise() && batches.len() < 2 {
            return Err(Error::invalid(
                "algorithm",
                format!("{} requires ≥2 domains", self.kind.name()),
            ));
        }
        for b in batches {
            if b.num_classes != self.model.spec().num_classes {
                return Err(Error::shape(
                    "algorithm_update",
                    format!("batch has {} classes, model {}", b.num_classes, self.model.spec().num_classes),
                ));
            }
        }
        Ok(())
    }

    /// Draws this step's random quantities.
    pub fn plan(&mut self, batches: &[MiniBatch]) -> Result<StepPlan> {
        self.check_batches(batches)?;
        let mut plan = StepPlan {
            pairs: Vec::new(),
            group_weights: None,
        };
        if self.kind == AlgorithmKind::MixupInter {
            let mut perm: Vec<usize> = (0..batches.len()).collect();
            perm.shuffle(&mut self.rng);
            let beta = Beta::new(self.hparams.mixup_alpha, self.hparams.mixup_alpha)
                .map_err(|e| Error::invalid("hparams.mixup_alpha", e.to_string()))?;
            for i in 0..perm.len() {
                let j = (i + 1) % perm.len();
                plan.pairs.push((perm[i], perm[j], beta.sample(&mut self.rng)));
            }
        }
        Ok(plan)
    }

    /// Evaluates the total loss and its gradient at the current parameters.
    /// For GroupDRO, a plan without weights reweights from the current `q`.
    pub fn evaluate(&self, batches: &[MiniBatch], plan: &StepPlan) -> Result<Evaluation> {
        self.evaluate_model(&self.model, batches, plan)
    }

    fn evaluate_model(&self, model: &Model, batches: &[MiniBatch], plan: &StepPlan) -> Result<Evaluation> {
        self.check_batches(batches)?;
        let mut tape = Tape::new();
        let params = model.bind(&mut tape);
        let mut bn_stats = Vec::new();
        let mut forward = |tape: &mut Tape, batch: &MiniBatch| -> Result<(Var, Var)> {
            let x = tape.constant(batch.images.clone());
            let out = model.forward(tape, &params, x, Mode::Train)?;
            bn_stats.push(out.bn_stats);
            Ok((out.features, out.logits))
        };
        let weight = self.penalty_weight();
        let k = batches.len();
        let mut used_q = None;

        let (root, task, penalty, per_domain) = if self.kind == AlgorithmKind::MixupInter {
            let mut terms = Vec::with_capacity(plan.pairs.len());
            let mut per_domain = Vec::with_capacity(plan.pairs.len());
            for &(a, b, lambda) in &plan.pairs {
                let n = batches[a].len().min(batches[b].len());
                let (ba, bb) = (truncated(&batches[a], n), truncated(&batches[b], n));
                let mixed = ba
                    .images
                    .zip_map(&bb.images, |x, y| lambda * x + (1.0 - lambda) * y);
                let (_, logits) = forward(&mut tape, &ba.with_images(mixed))?;
                let la = tape.soft_cross_entropy(logits, &ba.targets())?;
                let lb = tape.soft_cross_entropy(logits, &bb.targets())?;
                let term = tape.weighted_sum(&[la, lb], &[lambda, 1.0 - lambda])?;
                per_domain.push(tape.scalar(term));
                terms.push(term);
            }
            let sum = tape.weighted_sum(&terms, &vec![1.0; terms.len()])?;
            let root = tape.scale(sum, 1.0 / k as f64);
            let total = tape.scalar(root);
            (root, total, 0.0, per_domain)
        } else {
            let mut feats = Vec::with_capacity(k);
            let mut logits = Vec::with_capacity(k);
            let mut risks = Vec::with_capacity(k);
            for b in batches {
                let (f, z) = forward(&mut tape, b)?;
                risks.push(tape.soft_cross_entropy(z, &b.targets())?);
                feats.push(f);
                logits.push(z);
            }
            let per_domain: Vec<f64> = risks.iter().map(|&r| tape.scalar(r)).collect();
            if per_domain.iter().any(|l| !l.is_finite()) {
                return Err(Error::Numerical {
                    op: "algorithm_update".into(),
                    detail: "non-finite domain loss".into(),
                });
            }
            let (task_var, penalty_var) = match self.kind {
                AlgorithmKind::GroupDro => {
                    let q = match &plan.group_weights {
                        Some(q) => q.clone(),
                        None => {
                            let current = self.q.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]);
                            if current.len() != k {
                                return Err(Error::invalid(
                                    "batches",
                                    "number of domains changed during training",
                                ));
                            }
                            groupdro_reweight(&current, &per_domain, self.hparams.groupdro_eta)
                        }
                    };
                    let task = tape.weighted_sum(&risks, &q)?;
                    used_q = Some(q);
                    (task, None)
                }
                _ => {
                    let task = tape.mean_of(&risks)?;
                    let penalty = match self.kind {
                        AlgorithmKind::Erm => None,
                        AlgorithmKind::Irm => {
                            let mut ps = Vec::with_capacity(k);
                            for (z, b) in logits.iter().zip(batches) {
                                ps.push(penalties::irm_on(&mut tape, *z, &b.targets(), self.hparams.irm_mode)?);
                            }
                            Some(tape.mean_of(&ps)?)
                        }
                        AlgorithmKind::Vrex => Some(penalties::vrex_on(&mut tape, &risks)?),
                        AlgorithmKind::Coral | AlgorithmKind::Mmd => {
                            let mut ps = Vec::new();
                            for i in 0..k {
                                for j in i + 1..k {
                                    ps.push(if self.kind == AlgorithmKind::Coral {
                                        penalties::coral_on(&mut tape, feats[i], feats[j])?
                                    } else {
                                        penalties::mmd_on(&mut tape, feats[i], feats[j], &self.hparams.mmd_gammas)?
                                    });
                                }
                            }
                            Some(tape.mean_of(&ps)?)
                        }
                        AlgorithmKind::Sd => {
                            let ps: Vec<Var> = logits.iter().map(|&z| penalties::sd_on(&mut tape, z)).collect();
                            Some(tape.mean_of(&ps)?)
                        }
                        AlgorithmKind::GroupDro | AlgorithmKind::MixupInter => unreachable!(),
                    };
                    (task, penalty)
                }
            };
            let task = tape.scalar(task_var);
            match penalty_var {
                None => (task_var, task, 0.0, per_domain),
                Some(p) => {
                    let pv = tape.scalar(p);
                    let root = tape.weighted_sum(&[task_var, p], &[1.0, weight])?;
                    (root, task, pv, per_domain)
                }
            }
        };

        let total = tape.scalar(root);
        if !total.is_finite() {
            return Err(Error::Numerical {
                op: "algorithm_update".into(),
                detail: format!("non-finite total loss at step {}", self.step),
            });
        }
        let grads = tape.backward(root);
        let gradient: Vec<f64> = params
            .iter()
            .zip(model.params())
            .flat_map(|(&v, p)| grads.get_or_zeros(v, &p.value).into_data())
            .collect();
        Ok(Evaluation {
            report: LossReport {
                task_loss: task,
                penalty,
                penalty_weight: if self.kind == AlgorithmKind::Erm
                    || self.kind == AlgorithmKind::GroupDro
                    || self.kind == AlgorithmKind::MixupInter
                {
                    0.0
                } else {
                    weight
                },
                total,
                per_domain_losses: per_domain,
            },
            gradient,
            bn_stats,
            group_weights: used_q,
        })
    }

    /// Total loss at arbitrary flat parameters, with a fixed plan.
    pub fn loss_at(&self, flat: &[f64], batches: &[MiniBatch], plan: &StepPlan) -> Result<f64> {
        let mut model = self.model.clone();
        model.set_flat_params(flat)?;
        Ok(self.evaluate_model(&model, batches, plan)?.report.total)
    }

    /// Fills the GroupDRO weights the next evaluation would use, so the plan
    /// fully determines the loss.
    pub fn freeze_plan(&self, batches: &[MiniBatch], plan: &mut StepPlan) -> Result<()> {
        if self.kind == AlgorithmKind::GroupDro && plan.group_weights.is_none() {
            let k = batches.len();
            let mut tape = Tape::new();
            let params = self.model.bind_frozen(&mut tape);
            let mut losses = Vec::with_capacity(k);
            for b in batches {
                let x = tape.constant(b.images.clone());
                let out = self.model.forward(&mut tape, &params, x, Mode::Train)?;
                let l = tape.soft_cross_entropy(out.logits, &b.targets())?;
                losses.push(tape.scalar(l));
            }
            let current = self.q.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]);
            plan.group_weights = Some(groupdro_reweight(&current, &losses, self.hparams.groupdro_eta));
        }
        Ok(())
    }

    /// One optimizer step on the K domain batches.
    pub fn update(&mut self, batches: &[MiniBatch]) -> Result<LossReport> {
        let plan = self.plan(batches)?;
        let anneal_boundary = match self.kind {
            AlgorithmKind::Irm => Some(self.hparams.irm_penalty_anneal_iters),
            AlgorithmKind::Vrex => Some(self.hparams.vrex_penalty_anneal_iters),
            _ => None,
        };
        if anneal_boundary == Some(self.step) && self.step > 0 {
            self.optimizer.reset();
        }
        let eval = self.evaluate(batches, &plan)?;
        if eval.group_weights.is_some() {
            self.q = eval.group_weights.clone();
        }
        let mut flat = self.model.flat_params();
        self.optimizer.step(&mut flat, &eval.gradient);
        self.model.set_flat_params(&flat)?;
        self.model.commit_bn_stats(&eval.bn_stats);
        self.step += 1;
        Ok(eval.report)
    }
}
