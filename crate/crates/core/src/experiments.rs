//! Training and evaluation of the fusion pipeline with and without routing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{
    argmax, concat_modalities, cross_entropy, decoder_backward, decoder_forward, DecoderOutput,
    DecoderParams, ModalitySpans,
};
use crate::error::{MoirError, Result};
use crate::informativeness::{
    channel_scores, plan_from_scores, rank_delta, selection_count, validate_k_prime, AlignMode,
    ChannelScores, RoutingPlan,
};
use crate::metrics::{balance_indices, MetricsReport};
use crate::router::{route_backward, route_pair, GateMode, GateParams};
use crate::synth::{degrade, Instance};
use crate::tokens::TokenSequence;

/// Derives an independent seed for a named purpose from a run seed.
pub fn substream(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then one splitmix64 round over the mix.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    /// Adam moments with beta1 = 0.9, beta2 = 0.999, eps = 1e-8 and no
    /// weight decay.
    #[default]
    AdaptiveMoments,
}

/// Where routing takes its channel scores from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Recompute scores on every presented batch.
    #[default]
    PerBatch,
    /// Score once on the whole training set and reuse those scores.
    Cached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub moir_enabled: bool,
    pub k_prime: f64,
    pub align_mode: AlignMode,
    pub gate_init: f64,
    pub gate_mode: GateMode,
    pub score_mode: ScoreMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 2e-4,
            batch_size: 8,
            optimizer: OptimizerKind::AdaptiveMoments,
            moir_enabled: true,
            k_prime: 0.10,
            align_mode: AlignMode::Interpolate,
            gate_init: 0.5,
            gate_mode: GateMode::PerChannel,
            score_mode: ScoreMode::PerBatch,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(MoirError::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(MoirError::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(MoirError::config("learning_rate must be finite and >= 0"));
        }
        validate_k_prime(self.k_prime)?;
        if !(self.gate_init > 0.0 && self.gate_init < 1.0) {
            return Err(MoirError::config("gate_init must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Decoder width settings. `key_dims = None` uses the token width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSizing {
    pub heads: usize,
    pub key_dims: Option<usize>,
}

impl Default for DecoderSizing {
    fn default() -> Self {
        Self {
            heads: 1,
            key_dims: None,
        }
    }
}

/// A trained (or freshly initialised) pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub decoder: DecoderParams,
    pub gates: GateParams,
    pub moir_enabled: bool,
    pub k_prime: f64,
    pub align_mode: AlignMode,
    pub batch_size: usize,
    pub cached_scores: Option<(ChannelScores, ChannelScores)>,
}

/// Stacked tensors for a group of instances.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens_a: TokenSequence,
    pub tokens_b: TokenSequence,
    pub questions: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_instances(items: &[&Instance]) -> Result<Self> {
        let a: Vec<&TokenSequence> = items.iter().map(|i| &i.tokens_a).collect();
        let b: Vec<&TokenSequence> = items.iter().map(|i| &i.tokens_b).collect();
        Ok(Self {
            tokens_a: TokenSequence::stack(&a)?,
            tokens_b: TokenSequence::stack(&b)?,
            questions: items.iter().map(|i| i.question.clone()).collect(),
            labels: items.iter().map(|i| i.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Everything the forward pass of one batch produces.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub plan: Option<RoutingPlan>,
    pub routed_a: TokenSequence,
    pub routed_b: TokenSequence,
    pub spans: ModalitySpans,
    pub output: DecoderOutput,
}

/// Gradients of the batch loss.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub decoder: DecoderParams,
    pub theta_a: Vec<f64>,
    pub theta_b: Vec<f64>,
    pub tokens_a: Vec<f64>,
    pub tokens_b: Vec<f64>,
    /// Cross-entropy of each batch entry; their mean is the batch loss.
    pub instance_losses: Vec<f64>,
}

impl Model {
    pub fn init(
        cfg: &TrainConfig,
        sizing: &DecoderSizing,
        dims: usize,
        classes: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(substream(cfg.seed, "init"));
        let key_dims = sizing.key_dims.unwrap_or(dims);
        Ok(Self {
            decoder: DecoderParams::init(dims, key_dims, classes, sizing.heads, &mut rng)?,
            gates: GateParams::new(dims, cfg.gate_init, cfg.gate_mode)?,
            moir_enabled: cfg.moir_enabled,
            k_prime: cfg.k_prime,
            align_mode: cfg.align_mode,
            batch_size: cfg.batch_size,
            cached_scores: None,
        })
    }

    /// Freezes channel scores computed on the given instances.
    pub fn calibrate(&mut self, data: &[Instance]) -> Result<()> {
        let refs: Vec<&Instance> = data.iter().collect();
        let batch = Batch::from_instances(&refs)?;
        self.cached_scores = Some((
            channel_scores(&batch.tokens_a)?,
            channel_scores(&batch.tokens_b)?,
        ));
        Ok(())
    }

    /// The routing plan for a batch, or `None` when routing is off.
    pub fn plan_for(&self, a: &TokenSequence, b: &TokenSequence) -> Result<Option<RoutingPlan>> {
        if !self.moir_enabled {
            return Ok(None);
        }
        let plan = match &self.cached_scores {
            Some((sa, sb)) => plan_from_scores(sa, sb, self.k_prime, self.align_mode)?,
            None => plan_from_scores(
                &channel_scores(a)?,
                &channel_scores(b)?,
                self.k_prime,
                self.align_mode,
            )?,
        };
        Ok(Some(plan))
    }

    /// Forward pass. `plan` overrides the computed routing plan.
    pub fn forward(&self, batch: &Batch, plan: Option<&RoutingPlan>) -> Result<BatchForward> {
        let plan = match plan {
            Some(p) => Some(p.clone()),
            None => self.plan_for(&batch.tokens_a, &batch.tokens_b)?,
        };
        let (routed_a, routed_b) = match &plan {
            Some(p) => {
                let r = route_pair(&batch.tokens_a, &batch.tokens_b, p, &self.gates)?;
                (r.routed_a, r.routed_b)
            }
            None => (batch.tokens_a.clone(), batch.tokens_b.clone()),
        };
        let (tokens, spans) = concat_modalities(&routed_a, &routed_b)?;
        let output = decoder_forward(&tokens, &batch.questions, &self.decoder)?;
        Ok(BatchForward {
            plan,
            routed_a,
            routed_b,
            spans,
            output,
        })
    }

    /// Mean cross-entropy of the batch and its exact gradient with respect to
    /// decoder parameters, gates and input tokens.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        plan: Option<&RoutingPlan>,
    ) -> Result<(f64, ModelGrads)> {
        let fwd = self.forward(batch, plan)?;
        let (loss, dlogits) = cross_entropy(&fwd.output.logits, &batch.labels)?;
        let instance_losses = fwd
            .output
            .logits
            .iter()
            .zip(&batch.labels)
            .map(|(l, &y)| {
                let max = l.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
                max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - l[y]
            })
            .collect();
        let dec = decoder_backward(&self.decoder, &fwd.output.cache, &fwd.output.profiles, &dlogits)?;

        let (n, la, lb, d) = (
            batch.len(),
            batch.tokens_a.tokens(),
            batch.tokens_b.tokens(),
            batch.tokens_a.dims(),
        );
        let mut up_a = Vec::with_capacity(n * la * d);
        let mut up_b = Vec::with_capacity(n * lb * d);
        let per = (la + lb) * d;
        for i in 0..n {
            let chunk = &dec.tokens[i * per..(i + 1) * per];
            up_a.extend_from_slice(&chunk[..la * d]);
            up_b.extend_from_slice(&chunk[la * d..]);
        }

        let grads = match &fwd.plan {
            Some(p) => {
                let r = route_backward(&batch.tokens_a, &batch.tokens_b, p, &self.gates, &up_a, &up_b)?;
                ModelGrads {
                    decoder: dec.params,
                    theta_a: r.grad_theta_a,
                    theta_b: r.grad_theta_b,
                    tokens_a: r.grad_a,
                    tokens_b: r.grad_b,
                    instance_losses,
                }
            }
            None => ModelGrads {
                decoder: dec.params,
                theta_a: vec![0.0; self.gates.theta_a.len()],
                theta_b: vec![0.0; self.gates.theta_b.len()],
                tokens_a: up_a,
                tokens_b: up_b,
                instance_losses,
            },
        };
        Ok((loss, grads))
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        let fwd = self.forward(batch, None)?;
        Ok(fwd.output.logits.iter().map(|l| argmax(l)).collect())
    }

    /// Predictions for a dataset, batched in index order.
    pub fn predict_all(&self, data: &[Instance]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.chunks(self.batch_size.max(1)) {
            let refs: Vec<&Instance> = chunk.iter().collect();
            out.extend(self.predict(&Batch::from_instances(&refs)?)?);
        }
        Ok(out)
    }
}

struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(shapes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

fn apply_update(
    kind: OptimizerKind,
    adam: &mut Adam,
    lr: f64,
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
) {
    match kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (x, dx) in p.iter_mut().zip(g.iter()) {
                    *x -= lr * dx;
                }
            }
        }
        OptimizerKind::AdaptiveMoments => {
            adam.step += 1;
            let c1 = 1.0 - adam.beta1.powi(adam.step);
            let c2 = 1.0 - adam.beta2.powi(adam.step);
            for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                let (m, v) = (&mut adam.m[k], &mut adam.v[k]);
                for i in 0..p.len() {
                    m[i] = adam.beta1 * m[i] + (1.0 - adam.beta1) * g[i];
                    v[i] = adam.beta2 * v[i] + (1.0 - adam.beta2) * g[i] * g[i];
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + adam.eps);
                }
            }
        }
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean training loss of each epoch.
    pub loss_history: Vec<f64>,
}

/// Mini-batch training of the decoder (and the gates when routing is on).
pub fn train(
    cfg: &TrainConfig,
    sizing: &DecoderSizing,
    data: &[Instance],
    classes: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = data
        .first()
        .ok_or_else(|| MoirError::input("training set is empty"))?;
    let dims = first.tokens_a.dims();
    let mut model = Model::init(cfg, sizing, dims, classes)?;
    if cfg.moir_enabled && cfg.score_mode == ScoreMode::Cached {
        model.calibrate(data)?;
    }

    let shapes: Vec<usize> = model
        .decoder
        .tensors()
        .iter()
        .map(|t| t.len())
        .chain([model.gates.theta_a.len(), model.gates.theta_b.len()])
        .collect();
    let mut adam = Adam::new(&shapes);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(substream(cfg.seed, "shuffle"));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        // Per-instance losses, summed in index order at the end of the epoch.
        let mut losses = vec![0.0; data.len()];
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Instance> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = Batch::from_instances(&refs)?;
            // Parameters that blew up surface as non-finite activations.
            let (loss, grads) = match model.loss_and_grads(&batch, None) {
                Err(MoirError::NumericalFailure(_)) => return Err(MoirError::TrainingDiverged { epoch }),
                other => other?,
            };
            if !loss.is_finite() {
                return Err(MoirError::TrainingDiverged { epoch });
            }
            for (&i, l) in chunk.iter().zip(&grads.instance_losses) {
                losses[i] = *l;
            }
            let Model { decoder, gates, .. } = &mut model;
            let mut params: Vec<&mut [f64]> = decoder.tensors_mut().into_iter().collect();
            let mut step_grads: Vec<&[f64]> = grads.decoder.tensors().into_iter().collect();
            if cfg.moir_enabled {
                params.push(&mut gates.theta_a);
                params.push(&mut gates.theta_b);
                step_grads.push(&grads.theta_a);
                step_grads.push(&grads.theta_b);
            }
            apply_update(cfg.optimizer, &mut adam, cfg.learning_rate, &mut params, &step_grads);
        }
        let mean = losses.iter().sum::<f64>() / data.len() as f64;
        if !mean.is_finite() {
            return Err(MoirError::TrainingDiverged { epoch });
        }
        log::debug!("epoch {epoch}: mean loss {mean:.6}");
        history.push(mean);
    }
    Ok(TrainOutcome {
        model,
        loss_history: history,
    })
}

/// Accuracy, rank deltas and attention-balance indices on a dataset.
///
/// Instances are processed in index order in chunks of the model's batch
/// size; rank deltas are averaged over chunks, balance indices over
/// instances.
pub fn evaluate(model: &Model, data: &[Instance]) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(MoirError::input("evaluation set is empty"));
    }
    let mut correct = 0usize;
    let mut mdi_sum = 0.0;
    let mut aei_sum = 0.0;
    let mut delta_a = 0.0;
    let mut delta_b = 0.0;
    let mut chunks = 0usize;
    for chunk in data.chunks(model.batch_size.max(1)) {
        let refs: Vec<&Instance> = chunk.iter().collect();
        let batch = Batch::from_instances(&refs)?;
        let fwd = model.forward(&batch, None)?;
        for (logits, &y) in fwd.output.logits.iter().zip(&batch.labels) {
            if argmax(logits) == y {
                correct += 1;
            }
        }
        for profile in &fwd.output.profiles {
            let (m, a) = balance_indices(profile, &fwd.spans)?;
            mdi_sum += m;
            aei_sum += a;
        }
        if fwd.plan.is_some() {
            delta_a += rank_delta(&batch.tokens_a, &fwd.routed_a)?;
            delta_b += rank_delta(&batch.tokens_b, &fwd.routed_b)?;
        }
        chunks += 1;
    }
    let n = data.len() as f64;
    Ok(MetricsReport {
        accuracy: correct as f64 / n,
        rank_delta_a: delta_a / chunks as f64,
        rank_delta_b: delta_b / chunks as f64,
        mdi: mdi_sum / n,
        aei: aei_sum / n,
        unchanged_rate: None,
    })
}

/// Per-chunk `(delta_A, delta_B)` effective-rank changes caused by routing,
/// chunking the data as [`evaluate`] does. Empty when routing is off.
pub fn batch_rank_deltas(model: &Model, data: &[Instance]) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for chunk in data.chunks(model.batch_size.max(1)) {
        let refs: Vec<&Instance> = chunk.iter().collect();
        let batch = Batch::from_instances(&refs)?;
        let Some(plan) = model.plan_for(&batch.tokens_a, &batch.tokens_b)? else {
            return Ok(Vec::new());
        };
        let routed = route_pair(&batch.tokens_a, &batch.tokens_b, &plan, &model.gates)?;
        out.push((
            rank_delta(&batch.tokens_a, &routed.routed_a)?,
            rank_delta(&batch.tokens_b, &routed.routed_b)?,
        ));
    }
    Ok(out)
}

/// Unchanged-prediction rates when modality A is replaced by noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub all: f64,
    pub dependent: f64,
    pub irrelevant: f64,
    pub n_dependent: usize,
    pub n_irrelevant: usize,
}

/// Predicts on clean inputs and on inputs whose A tokens are replaced by
/// fresh Gaussian noise, and reports how often the prediction is unchanged.
/// An empty stratum reports a rate of 1 (no prediction changed).
pub fn robustness_eval(model: &Model, data: &[Instance], seed: u64) -> Result<RobustnessReport> {
    let clean = model.predict_all(data)?;
    let degraded: Vec<Instance> = data
        .iter()
        .enumerate()
        .map(|(i, inst)| Instance {
            tokens_a: degrade(&inst.tokens_a, substream(seed, &format!("degrade/{i}"))),
            ..inst.clone()
        })
        .collect();
    let noisy = model.predict_all(&degraded)?;

    let mut same = [0usize; 2];
    let mut total = [0usize; 2];
    for ((inst, c), n) in data.iter().zip(&clean).zip(&noisy) {
        let k = usize::from(!inst.dependent_on_a);
        total[k] += 1;
        if c == n {
            same[k] += 1;
        }
    }
    let rate = |s: usize, t: usize| if t == 0 { 1.0 } else { s as f64 / t as f64 };
    Ok(RobustnessReport {
        all: rate(same[0] + same[1], total[0] + total[1]),
        dependent: rate(same[0], total[0]),
        irrelevant: rate(same[1], total[1]),
        n_dependent: total[0],
        n_irrelevant: total[1],
    })
}

/// One row of a k' sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k_prime: f64,
    pub selected_channels: usize,
    pub report: MetricsReport,
}

/// Trains and evaluates a routed model for each k', everything else fixed.
pub fn ablate_kprime(
    base: &TrainConfig,
    sizing: &DecoderSizing,
    train_set: &[Instance],
    test_set: &[Instance],
    classes: usize,
    values: &[f64],
) -> Result<Vec<AblationRow>> {
    for &k in values {
        validate_k_prime(k)?;
    }
    let dims = train_set
        .first()
        .map(|i| i.tokens_a.dims())
        .ok_or_else(|| MoirError::input("training set is empty"))?;
    values
        .iter()
        .map(|&k_prime| {
            let cfg = TrainConfig {
                k_prime,
                moir_enabled: true,
                ..base.clone()
            };
            let outcome = train(&cfg, sizing, train_set, classes)?;
            Ok(AblationRow {
                k_prime,
                selected_channels: selection_count(dims, k_prime),
                report: evaluate(&outcome.model, test_set)?,
            })
        })
        .collect()
}
