//! Mini-batch SGD-with-momentum training of the aggregation module and the
//! margin head. Aggregation parameters start at zero, so training begins
//! exactly at average pooling and moves away from it only as the gradients
//! demand.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionParams, Mode};
use crate::grad::{backward, backward_frame_level, GradientBundle, MarginHead};
use crate::pool::NanParams;
use crate::rng::SplitMix64;
use crate::synth::LabeledCorpus;
use crate::types::{FeatureSet, FeatureVector};
use crate::{Error, Result};

/// Which aggregator architecture the loop trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearSingleBlock,
    CascadedTanh,
    /// Frame-level attention baseline (one scalar weight per frame),
    /// trained with the identical loop for like-for-like comparisons.
    FrameLevel,
}

/// Trainable aggregator parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Attention(AttentionParams),
    FrameLevel(NanParams),
}

impl Model {
    pub fn zeros(dim: usize, kind: ModelKind) -> Self {
        match kind {
            ModelKind::LinearSingleBlock => {
                Model::Attention(AttentionParams::zeros(dim, Mode::LinearSingleBlock))
            }
            ModelKind::CascadedTanh => {
                Model::Attention(AttentionParams::zeros(dim, Mode::CascadedTanh))
            }
            ModelKind::FrameLevel => Model::FrameLevel(NanParams::zeros(dim)),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Attention(p) => match p.mode {
                Mode::LinearSingleBlock => ModelKind::LinearSingleBlock,
                Mode::CascadedTanh => ModelKind::CascadedTanh,
            },
            Model::FrameLevel(_) => ModelKind::FrameLevel,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::Attention(p) => p.dim(),
            Model::FrameLevel(p) => p.q.dim(),
        }
    }

    pub fn aggregator(&self) -> crate::eval::Aggregator {
        match self {
            Model::Attention(p) => crate::eval::Aggregator::DimensionWise(p.clone()),
            Model::FrameLevel(p) => crate::eval::Aggregator::FrameLevel(p.clone()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub frames_per_sampled_set_min: usize,
    pub frames_per_sampled_set_max: usize,
    pub rng_seed: u64,
    pub mode: ModelKind,
    pub margin_m: f64,
    pub scale_s: f64,
    pub momentum: f64,
    /// L2 penalty on the aggregation parameters (not the head). Zero keeps
    /// plain SGD; a small value damps identity-specific memorization in the
    /// aggregation kernels so the learned gating transfers across identities.
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 8,
            epochs: 10,
            frames_per_sampled_set_min: 8,
            frames_per_sampled_set_max: 8,
            rng_seed: 1,
            mode: ModelKind::CascadedTanh,
            margin_m: 0.2,
            scale_s: 16.0,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 && self.epochs > 0 {
            // lr = 0 is allowed as an explicit no-op run
            if self.learning_rate < 0.0 {
                return Err(Error::CountMismatch("learning_rate must be >= 0".into()));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::CountMismatch("batch_size must be >= 1".into()));
        }
        if self.frames_per_sampled_set_min == 0
            || self.frames_per_sampled_set_min > self.frames_per_sampled_set_max
        {
            return Err(Error::CountMismatch(
                "invalid frames_per_sampled_set range".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::CountMismatch("momentum must be in [0, 1)".into()));
        }
        if self.margin_m < 0.0 || self.margin_m >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::CountMismatch("margin must be in [0, pi/2)".into()));
        }
        if self.scale_s <= 0.0 {
            return Err(Error::CountMismatch("scale must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub head: MarginHead,
    pub epoch: usize,
    pub running_loss: f64,
    pub rng_state: u64,
}

/// One `epoch<TAB>batch<TAB>loss` line per batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

/// Aggregation parameters initialized so the model starts exactly at average
/// pooling, plus a seeded random-unit head.
///
/// The output path (the single kernel in linear mode; Q2 and both biases in
/// cascaded mode) starts at zero, which makes the significance matrix
/// identically zero and the weights uniform. In cascaded mode Q1 starts at
/// small random values instead of zero: with Q1 = Q2 = 0 every aggregation
/// gradient vanishes identically (Q2's gradient is scaled by the zero hidden
/// activations, Q1's by the zero Q2, and the biases are flat through the
/// row-wise softmax), so an all-zero start could never train. Seeding Q1
/// breaks that stationary point without changing the initial forward pass.
pub fn init_zero(
    dim: usize,
    num_classes: usize,
    cfg: &TrainConfig,
    rng: &mut SplitMix64,
) -> (Model, MarginHead) {
    let mut model = Model::zeros(dim, cfg.mode);
    if let Model::Attention(p) = &mut model {
        if p.mode == Mode::CascadedTanh {
            p.q1 = rng.gaussian_vec(dim * dim, 1.0 / (dim as f64).sqrt());
            // nonzero biases give the hidden units even components in the
            // frame coordinates, which per-dimension magnitude gating needs
            p.b1 = rng.gaussian_vec(dim, 0.5);
        }
    }
    let head =
        MarginHead::random_unit(dim, num_classes, rng).with_margin(cfg.margin_m, cfg.scale_s);
    (model, head)
}

fn sample_set(src: &FeatureSet, cfg: &TrainConfig, rng: &mut SplitMix64) -> FeatureSet {
    let want = rng.next_in_range(
        cfg.frames_per_sampled_set_min,
        cfg.frames_per_sampled_set_max,
    );
    let k = src.len();
    let indices: Vec<usize> = if want <= k {
        rng.sample_distinct(k, want)
    } else {
        // source smaller than requested: resample with replacement
        (0..want).map(|_| rng.next_below(k)).collect()
    };
    let frames: Vec<FeatureVector> = indices
        .iter()
        .map(|&i| src.frames()[i].clone())
        .collect();
    FeatureSet::new(frames, src.label, src.set_id.clone()).expect("want >= 1")
}

struct Velocity {
    bundle: GradientBundle,
    q_frame_level: Vec<f64>,
}

impl Velocity {
    fn zeros(dim: usize, num_classes: usize) -> Self {
        Self {
            bundle: GradientBundle::zeros(dim, num_classes),
            q_frame_level: vec![0.0; dim],
        }
    }
}

fn apply_update(
    model: &mut Model,
    head: &mut MarginHead,
    grad: &GradientBundle,
    grad_q: &[f64],
    vel: &mut Velocity,
    cfg: &TrainConfig,
) {
    let lr = cfg.learning_rate;
    let mu = cfg.momentum;
    let wd = cfg.weight_decay;
    match model {
        Model::Attention(p) => {
            for (field, (v, g)) in [
                (&mut p.q1, (&mut vel.bundle.d_q1, &grad.d_q1)),
                (&mut p.b1, (&mut vel.bundle.d_b1, &grad.d_b1)),
                (&mut p.q2, (&mut vel.bundle.d_q2, &grad.d_q2)),
                (&mut p.b2, (&mut vel.bundle.d_b2, &grad.d_b2)),
            ] {
                for i in 0..field.len() {
                    v[i] = mu * v[i] + g[i] + wd * field[i];
                    field[i] -= lr * v[i];
                }
            }
        }
        Model::FrameLevel(p) => {
            let mut q = p.q.values().to_vec();
            for i in 0..q.len() {
                vel.q_frame_level[i] = mu * vel.q_frame_level[i] + grad_q[i] + wd * q[i];
                q[i] -= lr * vel.q_frame_level[i];
            }
            p.q = FeatureVector::new(q).expect("finite update");
        }
    }
    for i in 0..head.class_weights.len() {
        vel.bundle.d_class_weights[i] =
            mu * vel.bundle.d_class_weights[i] + grad.d_class_weights[i];
        head.class_weights[i] -= lr * vel.bundle.d_class_weights[i];
    }
    head.renormalize();
}

fn run_epochs(
    corpus: &LabeledCorpus,
    cfg: &TrainConfig,
    mut model: Model,
    mut head: MarginHead,
    mut rng: SplitMix64,
    start_epoch: usize,
    history: &mut Vec<LossRecord>,
) -> Result<Checkpoint> {
    let dim = corpus.dim;
    let num_classes = head.num_classes();
    for s in &corpus.sets {
        if s.label as usize >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                num_classes,
            });
        }
    }
    let mut vel = Velocity::zeros(dim, num_classes);
    let mut running_loss = 0.0;
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.sets.len()).collect();
        rng.shuffle(&mut order);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc = GradientBundle::zeros(dim, num_classes);
            let mut acc_q = vec![0.0; dim];
            let inv = 1.0 / batch.len() as f64;
            for &set_idx in batch {
                let sampled = sample_set(&corpus.sets[set_idx], cfg, &mut rng);
                match &model {
                    Model::Attention(p) => {
                        let g = backward(&sampled, p, &head, sampled.label)?;
                        acc.add_scaled(&g, inv);
                    }
                    Model::FrameLevel(p) => {
                        let (loss, d_q, d_cw) =
                            backward_frame_level(&sampled, p, &head, sampled.label)?;
                        acc.loss_value += inv * loss;
                        for (a, g) in acc_q.iter_mut().zip(&d_q) {
                            *a += inv * g;
                        }
                        for (a, g) in acc.d_class_weights.iter_mut().zip(&d_cw) {
                            *a += inv * g;
                        }
                    }
                }
            }
            if !acc.loss_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                });
            }
            apply_update(&mut model, &mut head, &acc, &acc_q, &mut vel, cfg);
            running_loss = acc.loss_value;
            history.push(LossRecord {
                epoch,
                batch: batch_idx,
                loss: acc.loss_value,
            });
        }
    }
    Ok(Checkpoint {
        model,
        head,
        epoch: cfg.epochs,
        running_loss,
        rng_state: rng.state(),
    })
}

/// Train from zero-initialized aggregation parameters.
pub fn train(corpus: &LabeledCorpus, cfg: &TrainConfig) -> Result<(Checkpoint, Vec<LossRecord>)> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(cfg.rng_seed);
    let num_classes = corpus.label_span() as usize;
    let (model, head) = init_zero(corpus.dim, num_classes, cfg, &mut rng);
    let mut history = Vec::new();
    let ckpt = run_epochs(corpus, cfg, model, head, rng, 0, &mut history)?;
    Ok((ckpt, history))
}

/// Resume a checkpointed run until `cfg.epochs` total epochs. Momentum
/// velocity is not checkpointed; it restarts at zero on resume.
pub fn resume(
    corpus: &LabeledCorpus,
    cfg: &TrainConfig,
    ckpt: Checkpoint,
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    cfg.validate()?;
    let rng = SplitMix64::from_state(ckpt.rng_state);
    let start = ckpt.epoch;
    let mut history = Vec::new();
    let out = run_epochs(corpus, cfg, ckpt.model, ckpt.head, rng, start, &mut history)?;
    Ok((out, history))
}

/// Continue training carried-over aggregation parameters on a second corpus.
/// The head is kept when the class count matches and re-initialized
/// otherwise.
pub fn finetune(
    ckpt: Checkpoint,
    corpus2: &LabeledCorpus,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    cfg.validate()?;
    if ckpt.model.dim() != corpus2.dim {
        return Err(Error::DimensionMismatch {
            expected: ckpt.model.dim(),
            got: corpus2.dim,
        });
    }
    let num_classes = corpus2.label_span() as usize;
    let mut rng = SplitMix64::from_state(ckpt.rng_state);
    let head = if ckpt.head.num_classes() == num_classes {
        ckpt.head
    } else {
        MarginHead::random_unit(corpus2.dim, num_classes, &mut rng)
            .with_margin(cfg.margin_m, cfg.scale_s)
    };
    let mut history = Vec::new();
    let out = run_epochs(corpus2, cfg, ckpt.model, head, rng, 0, &mut history)?;
    Ok((out, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::forward;
    use crate::pool::{avg_pool, l2_normalize};
    use crate::synth::{generate, SynthConfig};

    fn small_corpus(seed: u64) -> LabeledCorpus {
        generate(&SynthConfig {
            dim: 8,
            num_identities: 2,
            sets_per_identity: 4,
            frames_per_set_min: 3,
            frames_per_set_max: 6,
            intra_class_noise_sigma: 0.1,
            rng_seed: seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            frames_per_sampled_set_min: 3,
            frames_per_sampled_set_max: 5,
            learning_rate: 0.05,
            margin_m: 0.2,
            scale_s: 4.0,
            ..Default::default()
        }
    }

    #[test]
    fn init_zero_forward_is_normalized_average() {
        let corpus = small_corpus(1);
        let cfg = quick_cfg();
        let mut rng = SplitMix64::new(cfg.rng_seed);
        let (model, _) = init_zero(8, 2, &cfg, &mut rng);
        let Model::Attention(p) = &model else {
            panic!("cascaded mode expected")
        };
        for s in &corpus.sets {
            let r = forward(s, p).unwrap();
            let expect = l2_normalize(&avg_pool(s)).unwrap();
            for m in 0..8 {
                assert!((r[m] - expect[m]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn init_zero_same_seed_same_head() {
        let cfg = quick_cfg();
        let mut r1 = SplitMix64::new(9);
        let mut r2 = SplitMix64::new(9);
        let (_, h1) = init_zero(8, 3, &cfg, &mut r1);
        let (_, h2) = init_zero(8, 3, &cfg, &mut r2);
        assert_eq!(h1, h2);
    }

    #[test]
    fn init_zero_one_dimensional_boundary() {
        let cfg = quick_cfg();
        let mut rng = SplitMix64::new(5);
        let (model, head) = init_zero(1, 2, &cfg, &mut rng);
        let Model::Attention(p) = &model else {
            panic!()
        };
        let s = FeatureSet::new(
            vec![FeatureVector::new(vec![0.7]).unwrap()],
            0,
            "one",
        )
        .unwrap();
        let r = forward(&s, p).unwrap();
        assert!((r[0].abs() - 1.0).abs() < 1e-12);
        assert_eq!(head.num_classes(), 2);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let corpus = small_corpus(2);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick_cfg()
        };
        let (ckpt, _) = train(&corpus, &cfg).unwrap();
        let mut rng = SplitMix64::new(cfg.rng_seed);
        let (model0, head0) = init_zero(8, 2, &cfg, &mut rng);
        assert_eq!(ckpt.model, model0);
        assert_eq!(ckpt.head, head0);
    }

    #[test]
    fn loss_improves_on_separable_corpus() {
        let corpus = small_corpus(3);
        let cfg = TrainConfig {
            epochs: 5,
            ..quick_cfg()
        };
        let (_, history) = train(&corpus, &cfg).unwrap();
        let first_epoch: Vec<f64> = history
            .iter()
            .filter(|r| r.epoch == 0)
            .map(|r| r.loss)
            .collect();
        let last_epoch: Vec<f64> = history
            .iter()
            .filter(|r| r.epoch == 4)
            .map(|r| r.loss)
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&last_epoch) < mean(&first_epoch),
            "{} -> {}",
            mean(&first_epoch),
            mean(&last_epoch)
        );
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = small_corpus(4);
        let cfg = quick_cfg();
        let (c1, h1) = train(&corpus, &cfg).unwrap();
        let (c2, h2) = train(&corpus, &cfg).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn frame_level_mode_trains() {
        let corpus = small_corpus(5);
        let cfg = TrainConfig {
            mode: ModelKind::FrameLevel,
            ..quick_cfg()
        };
        let (ckpt, history) = train(&corpus, &cfg).unwrap();
        assert!(matches!(ckpt.model, Model::FrameLevel(_)));
        assert!(history.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let corpus = small_corpus(6);
        let full = TrainConfig {
            epochs: 4,
            momentum: 0.0, // velocity is not checkpointed
            ..quick_cfg()
        };
        let (straight, _) = train(&corpus, &full).unwrap();

        let half = TrainConfig { epochs: 2, ..full.clone() };
        let (ckpt, _) = train(&corpus, &half).unwrap();
        let (resumed, _) = resume(&corpus, &full, ckpt).unwrap();
        assert_eq!(straight, resumed);
    }

    #[test]
    fn finetune_zero_epochs_is_identity_on_params() {
        let corpus = small_corpus(7);
        let cfg = quick_cfg();
        let (ckpt, _) = train(&corpus, &cfg).unwrap();
        let model_before = ckpt.model.clone();
        let cfg0 = TrainConfig { epochs: 0, ..cfg };
        let (after, history) = finetune(ckpt, &corpus, &cfg0).unwrap();
        assert_eq!(after.model, model_before);
        assert!(history.is_empty());
    }

    #[test]
    fn finetune_same_corpus_continues_trajectory() {
        let corpus = small_corpus(8);
        let cfg = TrainConfig {
            epochs: 3,
            ..quick_cfg()
        };
        let (ckpt, first) = train(&corpus, &cfg).unwrap();
        let (_, second) = finetune(ckpt, &corpus, &cfg).unwrap();
        let mean = |v: &[LossRecord]| {
            v.iter().map(|r| r.loss).sum::<f64>() / v.len() as f64
        };
        // the continued run should not regress to the untrained loss level
        let first_epoch: Vec<LossRecord> =
            first.iter().filter(|r| r.epoch == 0).cloned().collect();
        assert!(mean(&second) < mean(&first_epoch) * 1.1);
    }

    #[test]
    fn finetune_new_class_count_reshapes_head() {
        let corpus = small_corpus(9);
        let cfg = quick_cfg();
        let (ckpt, _) = train(&corpus, &cfg).unwrap();
        let corpus2 = generate(&SynthConfig {
            dim: 8,
            num_identities: 5,
            sets_per_identity: 2,
            frames_per_set_min: 3,
            frames_per_set_max: 5,
            rng_seed: 77,
            ..Default::default()
        })
        .unwrap();
        let cfg1 = TrainConfig { epochs: 1, ..cfg };
        let (after, _) = finetune(ckpt, &corpus2, &cfg1).unwrap();
        assert_eq!(after.head.num_classes(), 5);
        assert!(after.head.class_weights.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn finetune_dimension_mismatch_rejected() {
        let corpus = small_corpus(10);
        let cfg = quick_cfg();
        let (ckpt, _) = train(&corpus, &cfg).unwrap();
        let other = generate(&SynthConfig {
            dim: 16,
            num_identities: 2,
            sets_per_identity: 2,
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(
            finetune(ckpt, &other, &cfg),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn head_rows_stay_unit_norm() {
        let corpus = small_corpus(11);
        let (ckpt, _) = train(&corpus, &quick_cfg()).unwrap();
        for row in ckpt.head.class_weights.chunks(8) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }
}
