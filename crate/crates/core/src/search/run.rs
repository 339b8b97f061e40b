use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::objective::{
    train_rotation_head, DdaObjective, ObjectiveKind, RotationConfig, SearchObjective, SelfAugmentObjective,
};
use crate::augment::{
    base_augment, policy_forward_search, AugOpKind, AugmentConfig, BaseAugmentConfig, DeployedOp, DeployedPolicy,
    DeployedSubpolicy, PolicyParams, SamplingMode,
};
use crate::contrastive::{stream_rng, streams, Encoder, Optimizer, OptimizerConfig, Projector};
use crate::error::{Error, Result};
use crate::lid::LidConfig;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub epochs: usize,
    /// Policy learning rate.
    pub lr: f64,
    pub lid: LidConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub objective: ObjectiveKind,
    pub n_subpolicies: usize,
    /// Softmax temperature of the operation blend.
    pub policy_temperature: f64,
    /// NT-Xent temperature of the SelfAugment objective.
    pub ntxent_temperature: f64,
    pub rotation: RotationConfig,
    pub base: BaseAugmentConfig,
    pub augment: AugmentConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.01,
            lid: LidConfig::default(),
            batch_size: 128,
            seed: 0,
            objective: ObjectiveKind::Dda,
            n_subpolicies: 5,
            policy_temperature: 0.1,
            ntxent_temperature: 0.2,
            rotation: RotationConfig::default(),
            base: BaseAugmentConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("search needs at least one epoch".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("policy learning rate {} must be non-negative", self.lr)));
        }
        if self.n_subpolicies == 0 || !(self.policy_temperature > 0.0) {
            return Err(Error::Config(format!(
                "need at least one sub-policy and a positive temperature, got {} and {}",
                self.n_subpolicies, self.policy_temperature
            )));
        }
        self.lid.validate(self.batch_size)?;
        self.base.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub mean_lid: f64,
    pub collapsed: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SearchOutput {
    pub params: PolicyParams<f32>,
    pub log: Vec<SearchEpochLog>,
}

/// Optimises the policy against `objective` with the encoder frozen in eval mode.
pub fn search_with(
    objective: &dyn SearchObjective,
    encoder: &Encoder<f32>,
    images: &Tensor<f32>,
    config: &SearchConfig,
    init: Option<PolicyParams<f32>>,
) -> Result<SearchOutput> {
    config.validate()?;
    let n = images.shape().first().copied().unwrap_or(0);
    if n < config.batch_size {
        return Err(Error::invalid(format!(
            "search batch of {} needs at least that many images, got {n}",
            config.batch_size
        )));
    }
    let mut params = match init {
        Some(p) => p.detach(),
        None => PolicyParams::new(config.n_subpolicies, config.policy_temperature)?,
    };
    let mut shuffle_rng = stream_rng(config.seed, streams::SEARCH_SHUFFLE);
    let mut view_rng = stream_rng(config.seed, streams::SEARCH_VIEWS);
    let mut opt = Optimizer::new(OptimizerConfig::adam(config.lr));
    let m = config.batch_size;
    let n_batches = n / m;
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut lids, mut collapsed) = (0.0, Vec::new(), false);
        for b in 0..n_batches {
            let batch = images.index_select(&order[b * m..(b + 1) * m])?;
            let (b1, b2) = base_augment(&batch, &mut view_rng, &config.base)?;
            let tape = Tape::<f32>::new();
            let live = params.attach(&tape);
            let mut views = vec![policy_forward_search(&b1, &live, &config.augment)?];
            if objective.n_views() > 1 {
                views.push(policy_forward_search(&b2, &live, &config.augment)?);
            }
            let value = objective.evaluate(encoder, &views)?;
            let loss = f64::from(value.loss.item()?);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    stage: "search",
                    epoch,
                    batch: b,
                    snapshot: serde_json::to_string(&params.to_record())?,
                });
            }
            let grads = tape.backward(&value.loss)?;
            let zero = |t: &Tensor<f32>| Tensor::zeros(t.shape());
            let g_logits = grads.get(&live.logits).cloned().unwrap_or_else(|| zero(&live.logits));
            let g_raw = grads
                .get(&live.raw_magnitudes)
                .cloned()
                .unwrap_or_else(|| zero(&live.raw_magnitudes));
            opt.step(&mut [&mut params.logits, &mut params.raw_magnitudes], &[&g_logits, &g_raw])?;
            loss_sum += loss;
            if let Some(lid) = value.lid {
                collapsed |= lid.any_collapsed();
                lids.extend(lid.estimates);
            }
        }
        let entry = SearchEpochLog {
            epoch,
            loss: loss_sum / n_batches as f64,
            mean_lid: if lids.is_empty() { f64::NAN } else { lids.iter().sum::<f64>() / lids.len() as f64 },
            collapsed,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} search epoch {epoch}: loss {:.4}{}",
            objective.name(),
            entry.loss,
            if collapsed { " (collapse)" } else { "" }
        );
        log.push(entry);
    }
    Ok(SearchOutput { params, log })
}

/// Policy search minimising `-mean ln LID` of frozen-encoder representations.
pub fn dda_search(encoder: &Encoder<f32>, images: &Tensor<f32>, config: &SearchConfig) -> Result<SearchOutput> {
    search_with(&DdaObjective { lid: config.lid.clone() }, encoder, images, config, None)
}

/// SelfAugment min-max search; fits the rotation head first and returns it with the result.
pub fn selfaugment_search(
    encoder: &Encoder<f32>,
    projector: &Projector<f32>,
    images: &Tensor<f32>,
    config: &SearchConfig,
) -> Result<(SearchOutput, SelfAugmentObjective)> {
    let head = train_rotation_head(encoder, images, &config.base, &config.rotation, config.seed)?;
    log::info!("rotation head held-out accuracy {:.3}", head.accuracy);
    let objective = SelfAugmentObjective {
        projector: projector.clone(),
        head,
        temperature: config.ntxent_temperature,
    };
    let out = search_with(&objective, encoder, images, config, None)?;
    Ok((out, objective))
}

/// One uniformly chosen operation per sub-policy, with probability 1 and a
/// magnitude uniform over its range (blur sigma over the configured interval).
pub fn random_policy(seed: u64, n_subpolicies: usize, config: &AugmentConfig) -> Result<DeployedPolicy> {
    let mut rng = stream_rng(seed, streams::RANDOM_POLICY);
    let subpolicies = (0..n_subpolicies)
        .map(|_| {
            let kind = AugOpKind::ALL[rng.random_range(0..AugOpKind::ALL.len())];
            let spec = kind.magnitude_spec();
            let magnitude = if !spec.has_magnitude() {
                None
            } else if kind == AugOpKind::GaussianBlur {
                let (lo, hi) = config.random_blur_sigma;
                Some(rng.random_range(lo..=hi))
            } else {
                Some(rng.random_range(spec.low..=spec.high))
            };
            DeployedSubpolicy {
                ops: vec![DeployedOp::new(kind, 1.0, magnitude)],
            }
        })
        .collect();
    DeployedPolicy::new(SamplingMode::Categorical, subpolicies)
}
