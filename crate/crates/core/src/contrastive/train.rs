//! Contrastive pretraining loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::ntxent;
use super::model::{EncoderConfig, Mode, ProjectorConfig, SimClr};
use super::optim::{Optimizer, OptimizerConfig};
use crate::augment::{
    apply_deployed, base_augment, policy_forward_search, AugmentConfig, BaseAugmentConfig, DeployedPolicy,
    PolicyParams,
};
use crate::error::{Error, Result};
use crate::lid::{dda_loss, median, LidConfig};
use crate::tensor::{Tape, Tensor};

/// Independent random streams derived from one seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const SHUFFLE: u64 = 1;
    pub const BASE: u64 = 2;
    pub const POLICY: u64 = 3;
    pub const SEARCH_SHUFFLE: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const SEARCH_VIEWS: u64 = 6;
    pub const ROTATION: u64 = 7;
    pub const RANDOM_POLICY: u64 = 8;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    /// NT-Xent temperature.
    pub temperature: f64,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    pub base: BaseAugmentConfig,
    pub augment: AugmentConfig,
    pub bn_momentum: f64,
    /// Settings of the per-batch LID diagnostic.
    pub lid: LidConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 50,
            optimizer: OptimizerConfig::default(),
            temperature: 0.2,
            seed: 0,
            encoder: EncoderConfig::default(),
            projector: ProjectorConfig::default(),
            base: BaseAugmentConfig::default(),
            augment: AugmentConfig::default(),
            bn_momentum: 0.1,
            lid: LidConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size {} must be at least 2", self.batch_size)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("NT-Xent temperature {} must be positive", self.temperature)));
        }
        if self.base.resolution != self.encoder.resolution {
            return Err(Error::Config(format!(
                "view resolution {} differs from encoder resolution {}",
                self.base.resolution, self.encoder.resolution
            )));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!("batch-norm momentum {} outside [0, 1]", self.bn_momentum)));
        }
        self.encoder.validate()?;
        self.base.validate()?;
        self.optimizer.validate()
    }
}

/// Where the second stage of each view comes from; the base crop/flip always runs first.
#[derive(Debug, Clone, Copy)]
pub enum ViewSource<'a> {
    Base,
    Deployed(&'a DeployedPolicy),
    /// Search-mode blend, applied without gradients.
    Blend(&'a PolicyParams<f32>),
}

impl ViewSource<'_> {
    fn describe(&self) -> String {
        match self {
            ViewSource::Base => "base".into(),
            ViewSource::Deployed(p) => p.to_json(),
            ViewSource::Blend(p) => serde_json::to_string(&p.to_record()).unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub mean_lid: f64,
    pub median_lid: f64,
    pub collapsed: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub model: SimClr<f32>,
    pub log: Vec<EpochLog>,
}

/// Both views of a batch after base augmentation and the policy.
pub fn make_views(
    batch: &Tensor<f32>,
    source: ViewSource<'_>,
    base_rng: &mut ChaCha8Rng,
    policy_rng: &mut ChaCha8Rng,
    config: &TrainConfig,
) -> Result<Tensor<f32>> {
    let (v1, v2) = base_augment(batch, base_rng, &config.base)?;
    let (v1, v2) = match source {
        ViewSource::Base => (v1, v2),
        ViewSource::Deployed(p) => (
            apply_deployed(&v1, p, policy_rng, &config.augment)?,
            apply_deployed(&v2, p, policy_rng, &config.augment)?,
        ),
        ViewSource::Blend(p) => {
            let p = p.detach();
            (
                policy_forward_search(&v1, &p, &config.augment)?,
                policy_forward_search(&v2, &p, &config.augment)?,
            )
        }
    };
    Tensor::concat(&[&v1, &v2])
}

/// Trains a freshly initialised encoder and projector (or `init`) with NT-Xent
/// on two views per image.
pub fn pretrain(
    images: &Tensor<f32>,
    source: ViewSource<'_>,
    config: &TrainConfig,
    init: Option<SimClr<f32>>,
) -> Result<PretrainOutput> {
    config.validate()?;
    let n = images.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::EmptyCorpus);
    }
    let mut model = match init {
        Some(m) => m,
        None => SimClr::new(
            config.encoder.clone(),
            config.projector.clone(),
            &mut stream_rng(config.seed, streams::INIT),
        )?,
    };
    let mut shuffle_rng = stream_rng(config.seed, streams::SHUFFLE);
    let mut base_rng = stream_rng(config.seed, streams::BASE);
    let mut policy_rng = stream_rng(config.seed, streams::POLICY);
    let mut opt = Optimizer::new(config.optimizer.clone());
    let m = config.batch_size.min(n);
    let n_batches = n / m;
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut lids, mut collapsed) = (0.0, Vec::new(), false);
        for b in 0..n_batches {
            let batch = images.index_select(&order[b * m..(b + 1) * m])?;
            let views = make_views(&batch, source, &mut base_rng, &mut policy_rng, config)?;
            let tape = Tape::<f32>::new();
            let live = model.attach(&tape);
            let (z, stats) = live.encoder.forward(&views, Mode::Train)?;
            let loss = ntxent(&live.projector.project(&z)?, config.temperature)?;
            let value = f64::from(loss.item()?);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    stage: "pretrain",
                    epoch,
                    batch: b,
                    snapshot: source.describe(),
                });
            }
            let grads = tape.backward(&loss)?;
            let g: Vec<&Tensor<f32>> = live
                .params()
                .iter()
                .map(|p| grads.get(p).ok_or_else(|| Error::Backward("missing parameter gradient".into())))
                .collect::<Result<_>>()?;
            opt.step(&mut model.params_mut(), &g)?;
            model.encoder.update_running_stats(&stats, 2 * m, config.bn_momentum)?;
            loss_sum += value;
            if m > config.lid.k {
                let diag = dda_loss(&z.detach().narrow(0, m)?, &config.lid)?;
                collapsed |= diag.any_collapsed();
                lids.extend(diag.estimates);
            }
        }
        if !model.all_finite() {
            return Err(Error::NonFinite {
                stage: "pretrain weights",
                epoch,
                batch: n_batches,
                snapshot: source.describe(),
            });
        }
        let entry = EpochLog {
            epoch,
            loss: loss_sum / n_batches as f64,
            mean_lid: if lids.is_empty() { f64::NAN } else { lids.iter().sum::<f64>() / lids.len() as f64 },
            median_lid: median(&lids),
            collapsed,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "pretrain epoch {epoch}: loss {:.4} mean LID {:.3}{}",
            entry.loss,
            entry.mean_lid,
            if collapsed { " (collapse)" } else { "" }
        );
        log.push(entry);
    }
    Ok(PretrainOutput { model, log })
}
