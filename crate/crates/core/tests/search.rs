use dda_core::augment::{AugOpKind, AugmentConfig, DeployedPolicy, PolicyParams};
use dda_core::contrastive::{pretrain, Checkpoint, EncoderConfig, ProjectorConfig, SimClr, TrainConfig, ViewSource};
use dda_core::eval::{make_toy_corpus, ImageCorpus, MetricsLog};
use dda_core::lid::{LidConfig, LidEstimator};
use dda_core::search::*;
use dda_core::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus() -> ImageCorpus {
    make_toy_corpus(3, 16, 16).unwrap()
}

fn small_model() -> SimClr<f32> {
    SimClr::new(
        EncoderConfig {
            in_channels: 3,
            channels: vec![4, 8],
            resolution: 16,
        },
        ProjectorConfig { hidden: 16, output: 8 },
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap()
}

fn small_search(epochs: usize) -> SearchConfig {
    let mut c = SearchConfig {
        epochs,
        batch_size: 24,
        lid: LidConfig {
            k: 4,
            ..LidConfig::default()
        },
        ..SearchConfig::default()
    };
    c.base.resolution = 16;
    c.rotation.epochs = 50;
    c
}

#[test]
fn zero_learning_rate_leaves_the_policy_unchanged() {
    let model = small_model();
    let data = corpus();
    let mut cfg = small_search(2);
    cfg.lr = 0.0;
    let out = dda_search(&model.encoder, &data.images, &cfg).unwrap();
    let init = PolicyParams::<f32>::new(cfg.n_subpolicies, cfg.policy_temperature).unwrap();
    assert_eq!(out.params.logits.to_vec(), init.logits.to_vec());
    assert_eq!(out.params.raw_magnitudes.to_vec(), init.raw_magnitudes.to_vec());
    let (sa, _) = selfaugment_search(&model.encoder, &model.projector, &data.images, &cfg).unwrap();
    assert_eq!(sa.params.logits.to_vec(), init.logits.to_vec());
}

#[test]
fn search_never_touches_the_encoder() {
    let model = small_model();
    let before = model.state_vector();
    let data = corpus();
    let out = dda_search(&model.encoder, &data.images, &small_search(2)).unwrap();
    selfaugment_search(&model.encoder, &model.projector, &data.images, &small_search(1)).unwrap();
    assert_eq!(model.state_vector(), before);
    assert_ne!(
        out.params.logits.to_vec(),
        PolicyParams::<f32>::new(5, 0.1).unwrap().logits.to_vec()
    );
}

#[test]
fn search_is_deterministic() {
    let model = small_model();
    let data = corpus();
    let a = dda_search(&model.encoder, &data.images, &small_search(2)).unwrap();
    let b = dda_search(&model.encoder, &data.images, &small_search(2)).unwrap();
    assert_eq!(a.params.logits.to_vec(), b.params.logits.to_vec());
    assert_eq!(a.params.raw_magnitudes.to_vec(), b.params.raw_magnitudes.to_vec());
    assert_eq!(a.log.iter().map(|e| e.loss).collect::<Vec<_>>(), b.log.iter().map(|e| e.loss).collect::<Vec<_>>());
}

#[test]
fn dda_search_lowers_the_loss_on_a_pretrained_encoder() {
    let data = make_toy_corpus(3, 40, 16).unwrap();
    let mut train = TrainConfig {
        batch_size: 40,
        epochs: 8,
        encoder: EncoderConfig {
            in_channels: 3,
            channels: vec![8, 16],
            resolution: 16,
        },
        projector: ProjectorConfig { hidden: 32, output: 16 },
        ..TrainConfig::default()
    };
    train.base.resolution = 16;
    train.lid.k = 8;
    let f = pretrain(&data.images, ViewSource::Base, &train, None).unwrap();
    let mut cfg = small_search(10);
    cfg.batch_size = 40;
    cfg.lid.k = 8;
    let out = dda_search(&f.model.encoder, &data.images, &cfg).unwrap();
    let (first, last) = (out.log[0].loss, out.log.last().unwrap().loss);
    assert!(last < first, "search loss {first} -> {last}");
}

/// Replaces any objective's loss by the mean of its first view.
struct Injected<'a>(&'a dyn SearchObjective);

impl SearchObjective for Injected<'_> {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn n_views(&self) -> usize {
        self.0.n_views()
    }

    fn evaluate(&self, _: &dda_core::contrastive::Encoder<f32>, views: &[Tensor<f32>]) -> Result<ObjectiveValue> {
        Ok(ObjectiveValue {
            loss: views[0].mean_all(),
            lid: None,
        })
    }
}

#[test]
fn objectives_share_augmentation_and_optimizer() {
    let model = small_model();
    let data = corpus();
    let cfg = small_search(2);
    let dda = DdaObjective { lid: cfg.lid.clone() };
    let head = train_rotation_head(&model.encoder, &data.images, &cfg.base, &cfg.rotation, 0).unwrap();
    let sa = SelfAugmentObjective {
        projector: model.projector.clone(),
        head,
        temperature: 0.2,
    };
    let a = search_with(&Injected(&dda), &model.encoder, &data.images, &cfg, None).unwrap();
    let b = search_with(&Injected(&sa), &model.encoder, &data.images, &cfg, None).unwrap();
    assert_eq!(a.params.logits.to_vec(), b.params.logits.to_vec());
    assert_eq!(a.params.raw_magnitudes.to_vec(), b.params.raw_magnitudes.to_vec());
    assert_ne!(a.params.logits.to_vec(), vec![0.0; 50]);
}

#[test]
fn selfaugment_objective_is_difference_of_components() {
    let model = small_model();
    let data = corpus();
    let cfg = small_search(1);
    let head = train_rotation_head(&model.encoder, &data.images, &cfg.base, &cfg.rotation, 0).unwrap();
    let obj = SelfAugmentObjective {
        projector: model.projector.clone(),
        head,
        temperature: 0.2,
    };
    let v1 = data.images.narrow(0, 8).unwrap();
    let v2 = data.images.narrow(8, 8).unwrap();
    let views = [v1, v2];
    let (l_ss, l_nt) = obj.components(&model.encoder, &views).unwrap();
    let total = obj.evaluate(&model.encoder, &views).unwrap().loss.item().unwrap();
    assert!((f64::from(total) - (f64::from(l_ss.item().unwrap()) - f64::from(l_nt.item().unwrap()))).abs() < 1e-6);
}

#[test]
fn rotate_batch_labels_match_turns() {
    let x = Tensor::<f32>::new(&[5, 1, 2, 2], (0..20).map(|v| v as f32).collect()).unwrap();
    let (r, labels) = rotate_batch(&x).unwrap();
    assert_eq!(labels, vec![0, 0, 1, 2, 3]);
    assert_eq!(r.narrow(0, 1).unwrap().to_vec(), x.narrow(0, 1).unwrap().to_vec());
    assert_eq!(r.narrow(2, 1).unwrap().to_vec(), x.narrow(1, 1).unwrap().rot90(1).unwrap().to_vec());
}

#[test]
fn random_policy_is_reproducible_and_in_range() {
    let cfg = AugmentConfig::default();
    assert_eq!(random_policy(4, 5, &cfg).unwrap(), random_policy(4, 5, &cfg).unwrap());
    for seed in 0..200 {
        for sub in random_policy(seed, 5, &cfg).unwrap().subpolicies {
            assert_eq!(sub.ops.len(), 1);
            let op = &sub.ops[0];
            assert_eq!(op.prob, 1.0);
            match (op.kind, op.magnitude) {
                (AugOpKind::Identical | AugOpKind::Gray, m) => assert_eq!(m, None),
                (AugOpKind::GaussianBlur, Some(m)) => assert!((0.0..=2.0).contains(&m)),
                (k, Some(m)) => k.magnitude_spec().check(m).unwrap(),
                (k, None) => panic!("{k} without magnitude"),
            }
        }
    }
}

#[test]
fn random_policy_kinds_are_uniform_per_slot() {
    let cfg = AugmentConfig::default();
    let mut counts = [[0usize; 10]; 5];
    let draws = 10_000;
    for seed in 0..draws {
        for (slot, sub) in random_policy(seed, 5, &cfg).unwrap().subpolicies.iter().enumerate() {
            counts[slot][sub.ops[0].kind.index()] += 1;
        }
    }
    for slot in counts {
        for c in slot {
            let f = c as f64 / draws as f64;
            assert!((f - 0.1).abs() <= 0.01, "frequency {f}");
        }
    }
}

fn tiny_pipeline() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.data.toy_per_class = 12;
    c.data.resolution = 16;
    c.pretrain.batch_size = 24;
    c.pretrain.epochs = 2;
    c.pretrain.encoder.channels = vec![4, 8];
    c.pretrain.projector = ProjectorConfig { hidden: 16, output: 8 };
    c.pretrain.lid.k = 4;
    c.search.epochs = 2;
    c.search.lid.k = 4;
    c.eval_lid.k = 4;
    c.probe.epochs = 50;
    c.seed = 5;
    c
}

#[test]
fn pipeline_emits_stamped_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_pipeline();
    cfg.out_dir = Some(dir.path().to_path_buf());
    cfg.baselines = vec![Baseline::Base, Baseline::Random];
    let corpus = cfg.data.load().unwrap();
    let art = run_pipeline(&cfg, &corpus).unwrap();
    assert_ne!(art.initial.model.state_vector(), art.final_model.model.state_vector());
    for ck in [&art.initial, &art.final_model] {
        assert_eq!(ck.meta["config_hash"], art.config_hash);
        assert_eq!(ck.meta["seed"], 5);
    }
    for f in [
        "config.json",
        "initial.ckpt",
        "search_params.json",
        "policy.json",
        "policy.txt",
        "final.ckpt",
        "metrics.csv",
        "report.json",
        "summary.txt",
        "split.json",
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let names: Vec<&str> = art.report.arms.iter().map(|a| a.name.as_str()).collect();
    assert_eq!(names, ["dda", "base", "random"]);
    let on_disk = Checkpoint::load(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(on_disk.model.state_vector(), art.final_model.model.state_vector());
    let policy = DeployedPolicy::from_json(&std::fs::read_to_string(dir.path().join("policy.json")).unwrap()).unwrap();
    assert_eq!(policy, art.policy);
    let metrics = MetricsLog::read(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.records(), art.metrics.records());
    assert_eq!(metrics.series("search", "loss").len(), 2);
    let snapshot = PipelineConfig::from_path(&dir.path().join("config.json")).unwrap();
    assert_eq!(snapshot.hash(), art.config_hash);
}

#[test]
fn pipeline_is_deterministic() {
    let cfg = tiny_pipeline();
    let corpus = cfg.data.load().unwrap();
    let a = run_pipeline(&cfg, &corpus).unwrap();
    let b = run_pipeline(&cfg, &corpus).unwrap();
    assert_eq!(a.policy.to_json(), b.policy.to_json());
    assert_eq!(a.metrics.records(), b.metrics.records());
}

#[test]
fn identity_policy_retrain_matches_base_pretraining() {
    let cfg = tiny_pipeline();
    let corpus = cfg.data.load().unwrap();
    let base = pretrain_stage(&corpus, &cfg).unwrap();
    let identity = retrain_stage(&corpus, &DeployedPolicy::identity(5), &cfg).unwrap();
    assert_eq!(base.model.state_vector(), identity.model.state_vector());
}

#[test]
fn config_files_load_and_hash_stably() {
    let dir = tempfile::tempdir().unwrap();
    let toml_path = dir.path().join("run.toml");
    std::fs::write(
        &toml_path,
        "seed = 3\nbaselines = [\"random\"]\n[pretrain]\nepochs = 7\n[search]\nobjective = \"self-augment\"\n[search.lid]\nestimator = \"MLE\"\n",
    )
    .unwrap();
    let cfg = PipelineConfig::from_path(&toml_path).unwrap();
    assert_eq!((cfg.seed, cfg.pretrain.epochs), (3, 7));
    assert_eq!(cfg.search.objective, ObjectiveKind::SelfAugment);
    assert_eq!(cfg.search.lid.estimator, LidEstimator::Mle);
    assert_eq!(cfg.search.epochs, 10);
    let json_path = dir.path().join("run.json");
    std::fs::write(&json_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(PipelineConfig::from_path(&json_path).unwrap().hash(), cfg.hash());
    let mut other = cfg.clone();
    other.seed = 4;
    assert_ne!(other.hash(), cfg.hash());
    assert!(PipelineConfig::from_path(&dir.path().join("missing.toml")).is_err());
}

#[test]
fn search_rejects_k_not_below_batch() {
    let model = small_model();
    let mut cfg = small_search(1);
    cfg.lid.k = 24;
    assert!(dda_search(&model.encoder, &corpus().images, &cfg).is_err());
}
