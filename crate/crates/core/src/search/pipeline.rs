//! Pretrain with base views, search a policy on the frozen encoder, retrain
//! a fresh encoder with the found policy, then evaluate every arm.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::objective::ObjectiveKind;
use super::run::{dda_search, random_policy, selfaugment_search, SearchConfig, SearchOutput};
use crate::augment::{finalize_policy, render_policy, DeployedPolicy, SamplingMode};
use crate::contrastive::{linear_probe, pretrain, Checkpoint, Encoder, EpochLog, PretrainOutput, ProbeConfig, TrainConfig, ViewSource};
use crate::error::{Error, Result};
use crate::eval::{ingest, knn_eval, make_toy_corpus, ImageCorpus, MetricsLog, SplitManifest};
use crate::lid::{estimate_points, median, LidConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Packed record file or image directory; the procedural toy corpus when absent.
    pub path: Option<PathBuf>,
    pub toy_per_class: usize,
    pub toy_seed: u64,
    /// Images are resized to `resolution x resolution`.
    pub resolution: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            toy_per_class: 128,
            toy_seed: 0,
            resolution: 32,
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<ImageCorpus> {
        match &self.path {
            Some(p) => ingest(p, Some(self.resolution)),
            None => make_toy_corpus(self.toy_seed, self.toy_per_class, self.resolution),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Base,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Overrides the seeds of every stage.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    /// Steps 1 and 3. Resolution comes from `data`.
    pub pretrain: TrainConfig,
    /// Step 3 epochs; defaults to the pretraining epochs.
    pub retrain_epochs: Option<usize>,
    /// Batch size, base views and operation settings are taken from `pretrain`.
    pub search: SearchConfig,
    pub finalize: SamplingMode,
    pub probe: ProbeConfig,
    pub knn_k: usize,
    /// Neighbourhood settings for the representation LID of each evaluated encoder.
    pub eval_lid: LidConfig,
    pub baselines: Vec<Baseline>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            data: DataConfig::default(),
            pretrain: TrainConfig::default(),
            retrain_epochs: None,
            search: SearchConfig::default(),
            finalize: SamplingMode::Categorical,
            probe: ProbeConfig::default(),
            knn_k: 5,
            eval_lid: LidConfig::default(),
            baselines: Vec::new(),
        }
    }
}

impl PipelineConfig {
    /// Reads TOML or JSON, chosen by extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::format(path, e.to_string()))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string())),
            Some("toml") => toml::from_str(&text).map_err(|e| Error::format(path, e.to_string())),
            _ => Err(Error::format(path, "config must be .toml or .json")),
        }
    }

    /// The configuration actually run: seeds, resolution and shared search
    /// settings propagated into every stage.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = c.seed;
        c.pretrain.encoder.resolution = c.data.resolution;
        c.pretrain.base.resolution = c.data.resolution;
        c.search.seed = c.seed;
        c.search.batch_size = c.pretrain.batch_size;
        c.search.base = c.pretrain.base.clone();
        c.search.augment = c.pretrain.augment.clone();
        c.probe.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.resolved();
        c.pretrain.validate()?;
        c.search.validate()?;
        if c.knn_k == 0 {
            return Err(Error::Config("knn_k must be positive".into()));
        }
        Ok(())
    }

    pub fn retrain_config(&self) -> TrainConfig {
        let mut t = self.resolved().pretrain;
        t.epochs = self.retrain_epochs.unwrap_or(t.epochs);
        t
    }

    /// SHA-256 over the resolved configuration, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.resolved();
        c.out_dir = None;
        let json = serde_json::to_string(&c).expect("config serialises");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_id(&self) -> String {
        format!("{}-s{}", &self.hash()[..12], self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub probe_accuracy: f64,
    pub knn_accuracy: f64,
    /// Median LID of the encoder's representations of the whole corpus.
    pub median_lid: f64,
    pub collapsed_fraction: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub objective: ObjectiveKind,
    pub n_images: usize,
    pub policy: String,
    pub search_loss_first: f64,
    pub search_loss_last: f64,
    pub rotation_accuracy: Option<f64>,
    pub arms: Vec<ArmResult>,
    pub stage_seconds: Vec<(String, f64)>,
}

impl PipelineReport {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "run {} (config {}, seed {})\nobjective {}, {} images\nsearch loss {:.4} -> {:.4}\n\n{}\n",
            self.run_id,
            &self.config_hash[..12],
            self.seed,
            self.objective,
            self.n_images,
            self.search_loss_first,
            self.search_loss_last,
            self.policy
        );
        s.push_str("\narm       probe    knn      median LID  final loss\n");
        for a in &self.arms {
            s.push_str(&format!(
                "{:<9} {:<8.4} {:<8.4} {:<11.3} {:.4}\n",
                a.name, a.probe_accuracy, a.knn_accuracy, a.median_lid, a.final_loss
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct PipelineArtifacts {
    pub config: PipelineConfig,
    pub config_hash: String,
    pub initial: Checkpoint,
    pub search: SearchOutput,
    pub policy: DeployedPolicy,
    pub final_model: Checkpoint,
    pub metrics: MetricsLog,
    pub report: PipelineReport,
}

/// Median LID and collapse fraction of an encoder's representations.
pub fn representation_lid(encoder: &Encoder<f32>, corpus: &ImageCorpus, lid: &LidConfig) -> Result<(f64, f64)> {
    let z = encoder.encode_batched(&corpus.images, 256)?;
    let d = z.shape()[1];
    let points: Vec<f64> = z.data().iter().map(|&v| f64::from(v)).collect();
    let est = estimate_points(&points, d, lid)?;
    let values: Vec<f64> = est.iter().map(|e| e.estimate).collect();
    let collapsed = est.iter().filter(|e| e.collapsed).count() as f64 / est.len() as f64;
    Ok((median(&values), collapsed))
}

/// Linear probe, kNN accuracy and representation LID of one encoder.
pub fn evaluate_arm(
    name: &str,
    encoder: &Encoder<f32>,
    corpus: &ImageCorpus,
    split: &SplitManifest,
    config: &PipelineConfig,
    final_loss: f64,
) -> Result<ArmResult> {
    let c = config.resolved();
    let probe = linear_probe(encoder, &corpus.images, corpus.require_labels()?, &c.probe)?;
    let knn = knn_eval(encoder, corpus, split, c.knn_k)?;
    let (median_lid, collapsed_fraction) = representation_lid(encoder, corpus, &c.eval_lid)?;
    Ok(ArmResult {
        name: name.to_string(),
        probe_accuracy: probe.accuracy,
        knn_accuracy: knn,
        median_lid,
        collapsed_fraction,
        final_loss,
    })
}

fn log_training(metrics: &mut MetricsLog, stage: &str, log: &[EpochLog]) -> Result<()> {
    for e in log {
        metrics.push(stage, e.epoch, "loss", e.loss)?;
        metrics.push(stage, e.epoch, "mean_lid", e.mean_lid)?;
        metrics.push(stage, e.epoch, "median_lid", e.median_lid)?;
        metrics.push(stage, e.epoch, "collapse", f64::from(u8::from(e.collapsed)))?;
    }
    Ok(())
}

fn checkpoint(out: &PretrainOutput, epochs: usize, stage: &str, config: &PipelineConfig) -> Checkpoint {
    let mut ck = Checkpoint::new(out.model.clone(), epochs);
    ck.meta = serde_json::json!({
        "config_hash": config.hash(),
        "seed": config.seed,
        "stage": stage,
    });
    ck
}

struct Persist<'a> {
    dir: Option<&'a Path>,
}

impl Persist<'_> {
    fn text(&self, name: &str, contents: &str) -> Result<()> {
        if let Some(d) = self.dir {
            fs::write(d.join(name), contents)?;
        }
        Ok(())
    }

    fn checkpoint(&self, name: &str, ck: &Checkpoint) -> Result<()> {
        if let Some(d) = self.dir {
            ck.save(&d.join(name))?;
        }
        Ok(())
    }
}

/// Step 1: contrastive pretraining with base views only.
pub fn pretrain_stage(corpus: &ImageCorpus, config: &PipelineConfig) -> Result<PretrainOutput> {
    pretrain(&corpus.images, ViewSource::Base, &config.resolved().pretrain, None)
}

/// Step 3: a freshly initialised encoder trained with `policy` after the base views.
pub fn retrain_stage(corpus: &ImageCorpus, policy: &DeployedPolicy, config: &PipelineConfig) -> Result<PretrainOutput> {
    pretrain(&corpus.images, ViewSource::Deployed(policy), &config.retrain_config(), None)
}

/// Runs the full pipeline. With an output directory every artifact is written
/// as soon as its stage finishes, so a failure keeps the completed ones.
pub fn run_pipeline(config: &PipelineConfig, corpus: &ImageCorpus) -> Result<PipelineArtifacts> {
    config.validate()?;
    let c = config.resolved();
    let hash = config.hash();
    let run_id = config.run_id();
    if let Some(d) = &c.out_dir {
        fs::create_dir_all(d)?;
    }
    let persist = Persist { dir: c.out_dir.as_deref() };
    persist.text("config.json", &serde_json::to_string_pretty(&c)?)?;
    let mut metrics = MetricsLog::new(run_id.clone())?;
    let mut seconds = Vec::new();
    let mut timed = |name: &str, start: Instant| seconds.push((name.to_string(), start.elapsed().as_secs_f64()));

    let t = Instant::now();
    let initial = pretrain_stage(corpus, &c)?;
    log_training(&mut metrics, "pretrain", &initial.log)?;
    let initial_ck = checkpoint(&initial, c.pretrain.epochs, "pretrain", &c);
    persist.checkpoint("initial.ckpt", &initial_ck)?;
    persist.text("metrics.csv", &metrics.to_csv())?;
    timed("pretrain", t);

    let t = Instant::now();
    let encoder = &initial.model.encoder;
    let (search, rotation_accuracy) = match c.search.objective {
        ObjectiveKind::Dda => (dda_search(encoder, &corpus.images, &c.search)?, None),
        ObjectiveKind::SelfAugment => {
            let (out, obj) = selfaugment_search(encoder, &initial.model.projector, &corpus.images, &c.search)?;
            (out, Some(obj.head.accuracy))
        }
    };
    for e in &search.log {
        metrics.push("search", e.epoch, "loss", e.loss)?;
        metrics.push("search", e.epoch, "mean_lid", e.mean_lid)?;
        metrics.push("search", e.epoch, "collapse", f64::from(u8::from(e.collapsed)))?;
    }
    let policy = finalize_policy(&search.params, c.finalize, &c.search.augment)?;
    persist.text(
        "search_params.json",
        &serde_json::to_string_pretty(&serde_json::json!({
            "config_hash": hash,
            "seed": c.seed,
            "params": search.params.to_record(),
        }))?,
    )?;
    persist.text("policy.json", &policy.to_json_pretty())?;
    persist.text("policy.txt", &render_policy(&policy))?;
    persist.text("metrics.csv", &metrics.to_csv())?;
    timed("search", t);

    let t = Instant::now();
    let retrained = retrain_stage(corpus, &policy, &c)?;
    log_training(&mut metrics, "retrain", &retrained.log)?;
    let final_ck = checkpoint(&retrained, c.retrain_config().epochs, "retrain", &c);
    persist.checkpoint("final.ckpt", &final_ck)?;
    persist.text("metrics.csv", &metrics.to_csv())?;
    timed("retrain", t);

    let last_loss = |log: &[EpochLog]| log.last().map_or(f64::NAN, |e| e.loss);
    let mut arms = Vec::new();
    if corpus.labels.is_some() {
        let t = Instant::now();
        let split = corpus.split(c.probe.train_fraction, c.seed)?;
        persist.text("split.json", &serde_json::to_string_pretty(&split)?)?;
        let arm_name = c.search.objective.to_string();
        arms.push(evaluate_arm(&arm_name, &retrained.model.encoder, corpus, &split, &c, last_loss(&retrained.log))?);
        for baseline in &c.baselines {
            let (name, out) = match baseline {
                Baseline::Base if c.retrain_config().epochs == c.pretrain.epochs => ("base", initial.clone()),
                Baseline::Base => ("base", pretrain(&corpus.images, ViewSource::Base, &c.retrain_config(), None)?),
                Baseline::Random => {
                    let random = random_policy(c.seed, c.search.n_subpolicies, &c.search.augment)?;
                    persist.text("random_policy.json", &random.to_json_pretty())?;
                    ("random", retrain_stage(corpus, &random, &c)?)
                }
            };
            let stage = format!("baseline-{name}");
            log_training(&mut metrics, &stage, &out.log)?;
            arms.push(evaluate_arm(name, &out.model.encoder, corpus, &split, &c, last_loss(&out.log))?);
        }
        for a in &arms {
            metrics.push("eval", 0, &format!("probe_accuracy_{}", a.name), a.probe_accuracy)?;
            metrics.push("eval", 0, &format!("knn_accuracy_{}", a.name), a.knn_accuracy)?;
            metrics.push("eval", 0, &format!("median_lid_{}", a.name), a.median_lid)?;
        }
        timed("eval", t);
    }
    persist.text("metrics.csv", &metrics.to_csv())?;

    let report = PipelineReport {
        run_id,
        config_hash: hash.clone(),
        seed: c.seed,
        objective: c.search.objective,
        n_images: corpus.len(),
        policy: render_policy(&policy),
        search_loss_first: search.log.first().map_or(f64::NAN, |e| e.loss),
        search_loss_last: search.log.last().map_or(f64::NAN, |e| e.loss),
        rotation_accuracy,
        arms,
        stage_seconds: seconds,
    };
    persist.text("report.json", &serde_json::to_string_pretty(&report)?)?;
    persist.text("summary.txt", &report.summary())?;
    Ok(PipelineArtifacts {
        config: c,
        config_hash: hash,
        initial: initial_ck,
        search,
        policy,
        final_model: final_ck,
        metrics,
        report,
    })
}
