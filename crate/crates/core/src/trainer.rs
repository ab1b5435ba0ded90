//! Optimisation loop: AdamW with decoupled weight decay, polynomial learning
//! rate decay, per-epoch one-class center update and early stopping on the
//! epoch-mean total loss.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedder::{build_batch, EmbeddingTable};
use crate::error::{Error, Result};
use crate::masking::{sample_kappa, FrequencyTable, MaskConfig, MaskPlan, MaskScheme};
use crate::model::{ModelConfig, ModelState, Network};
use crate::sequencer::EventSequence;
use crate::tensor::{ParamSet, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub decay_power: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_rel_improvement: f64,
    pub seed: u64,
    /// Sequences longer than this are truncated.
    pub l_max: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_start: 1e-2,
            lr_end: 1e-4,
            decay_power: 1.0,
            weight_decay: 1e-4,
            batch_size: 64,
            max_epochs: 100,
            patience: 20,
            min_rel_improvement: 1e-4,
            seed: 0,
            l_max: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.lr_start) || !pos(self.lr_end) || self.lr_end > self.lr_start {
            return Err(Error::config(format!(
                "need 0 < lr_end <= lr_start, got lr_start={} lr_end={}",
                self.lr_start, self.lr_end
            )));
        }
        if !pos(self.decay_power) {
            return Err(Error::config("decay_power must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.l_max == 0 {
            return Err(Error::config("batch_size, max_epochs and l_max must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be positive"));
        }
        if self.min_rel_improvement.is_nan() || self.min_rel_improvement < 0.0 {
            return Err(Error::config("min_rel_improvement must be >= 0"));
        }
        Ok(())
    }
}

/// `lr_end + (lr_start - lr_end) * (1 - epoch/(max_epochs-1))^p` for a
/// zero-based epoch.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    if config.max_epochs <= 1 {
        return config.lr_start;
    }
    let frac = (epoch.min(config.max_epochs - 1)) as f64 / (config.max_epochs - 1) as f64;
    config.lr_end + (config.lr_start - config.lr_end) * (1.0 - frac).powf(config.decay_power)
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: ParamSet,
    v: ParamSet,
    step: i32,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let decay = 1.0 - lr * self.weight_decay;
        for i in 0..params.len() {
            let g = grads.get(i).data();
            let m = self.m.get_mut(i).data_mut();
            let v = self.v.get_mut(i).data_mut();
            for (j, p) in params.get_mut(i).data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p = *p * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Running sum of representations seen during an epoch.
#[derive(Debug, Clone)]
pub struct CenterAccumulator {
    sum: Vec<f64>,
    count: usize,
}

impl CenterAccumulator {
    pub fn new(width: usize) -> Self {
        CenterAccumulator {
            sum: vec![0.0; width],
            count: 0,
        }
    }

    pub fn add(&mut self, z: &Tensor) {
        for row in z.data().chunks(self.sum.len()) {
            for (s, v) in self.sum.iter_mut().zip(row) {
                *s += v;
            }
            self.count += 1;
        }
    }

    pub fn mean(&self) -> Option<Vec<f64>> {
        (self.count > 0).then(|| self.sum.iter().map(|s| s / self.count as f64).collect())
    }
}

/// Mean of every row of every representation batch.
pub fn update_center(batches: &[Tensor]) -> Result<Vec<f64>> {
    let width = batches.first().map(|z| z.shape()[1]).ok_or_else(|| Error::data("no representations this epoch"))?;
    let mut acc = CenterAccumulator::new(width);
    for z in batches {
        acc.add(z);
    }
    acc.mean().ok_or_else(|| Error::data("no representations this epoch"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// One-based.
    pub epoch: usize,
    pub reconstruction: f64,
    pub oneclass: f64,
    pub prediction: f64,
    pub total: f64,
    pub lr: f64,
}

pub const LOSS_LOG_HEADER: &str = "epoch,L_r,L_o,L_p,L,lr";

pub fn loss_log_csv(log: &[EpochLog], config_hash: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(h) = config_hash {
        let _ = writeln!(out, "# config_hash={h}");
    }
    out.push_str(LOSS_LOG_HEADER);
    out.push('\n');
    for e in log {
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e}",
            e.epoch, e.reconstruction, e.oneclass, e.prediction, e.total, e.lr
        );
    }
    out
}

/// Early-stop monitor: counts epochs without sufficient relative improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    min_rel: f64,
    best: f64,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_rel: f64) -> Self {
        EarlyStopper {
            patience,
            min_rel,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records an epoch's monitor value; returns true when training should stop.
    pub fn observe(&mut self, value: f64) -> bool {
        if self.best.is_infinite() || self.best - value > self.min_rel * self.best.abs() {
            self.best = value;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Flattened hyperparameters recorded in the checkpoint.
pub fn config_snapshot(model: &ModelConfig, mask: &MaskConfig, train: &TrainConfig) -> Vec<(String, String)> {
    let kappas: Vec<String> = mask.kappa_set.iter().map(|k| k.to_string()).collect();
    let kernels: Vec<String> = model.kernels.iter().map(|k| k.to_string()).collect();
    [
        ("variant", model.variant.code()),
        ("embed_dim", model.embed_dim.to_string()),
        ("hidden", model.hidden.to_string()),
        ("kernels", kernels.join(",")),
        ("alpha", model.alpha.to_string()),
        ("kappa_set", kappas.join(",")),
        ("lr_start", train.lr_start.to_string()),
        ("lr_end", train.lr_end.to_string()),
        ("decay_power", train.decay_power.to_string()),
        ("weight_decay", train.weight_decay.to_string()),
        ("batch_size", train.batch_size.to_string()),
        ("max_epochs", train.max_epochs.to_string()),
        ("patience", train.patience.to_string()),
        ("min_rel_improvement", train.min_rel_improvement.to_string()),
        ("seed", train.seed.to_string()),
        ("l_max", train.l_max.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_owned(), v))
    .collect()
}

/// Trains a model on normal sequences.
///
/// `mask.scheme` is overridden by the variant's masking scheme.
pub fn train(
    sequences: &[EventSequence],
    embedding: EmbeddingTable,
    model: ModelConfig,
    mut mask: MaskConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    mask.scheme = model.variant.masking;
    mask.validate()?;
    if model.embed_dim != embedding.dim() {
        return Err(Error::config(format!(
            "embedding width {} differs from model embed_dim {}",
            embedding.dim(),
            model.embed_dim
        )));
    }
    if sequences.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    if let Some(s) = sequences.iter().find(|s| s.label.is_anomalous()) {
        return Err(Error::data(format!("training set contains anomalous sequence {:?}", s.seq_id)));
    }

    let snapshot = config_snapshot(&model, &mask, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = Network::new(model, config.seed)?;
    let mut opt = AdamW::new(net.params(), config.weight_decay);
    let width = net.config().repr_dim();
    let mut center: Option<Vec<f64>> = None;
    let mut stopper = EarlyStopper::new(config.patience, config.min_rel_improvement);
    let mut log = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..sequences.len()).collect();

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let lr = lr_at(epoch, config);
        let mut acc = CenterAccumulator::new(width);
        let mut sums = [0.0; 4];
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&EventSequence> = chunk.iter().map(|&i| &sequences[i]).collect();
            let batch = build_batch(&refs, &embedding, config.l_max)?;
            let kappa = match mask.scheme {
                MaskScheme::None => mask.kappa_set[0],
                _ => sample_kappa(&mask, &mut rng),
            };
            let plan = MaskPlan::from_batch_frequencies(&batch, mask.scheme, kappa, &mut rng);
            let c = match &center {
                Some(c) => c.clone(),
                None => {
                    let probe = net.forward_losses(&batch, &plan, &vec![0.0; width], None)?;
                    let c = update_center(std::slice::from_ref(probe.z_a()))?;
                    center = Some(c.clone());
                    c
                }
            };
            let cache = net.forward_losses(&batch, &plan, &c, None)?;
            let losses = cache.losses;
            if !losses.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {} batch {}",
                    epoch + 1,
                    b + 1
                )));
            }
            let grads = net.backward(&cache).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {} batch {}: {m}", epoch + 1, b + 1)),
                other => other,
            })?;
            acc.add(cache.z_a());
            let n = chunk.len() as f64;
            sums[0] += losses.reconstruction * n;
            sums[1] += losses.oneclass * n;
            sums[2] += losses.prediction * n;
            sums[3] += losses.total * n;
            opt.step(net.params_mut(), &grads, lr);
            net.params().check_finite().map_err(|e| {
                Error::Numeric(format!("epoch {} batch {}: {e}", epoch + 1, b + 1))
            })?;
        }
        center = acc.mean();
        let n = sequences.len() as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            reconstruction: sums[0] / n,
            oneclass: sums[1] / n,
            prediction: sums[2] / n,
            total: sums[3] / n,
            lr,
        };
        log.push(entry);
        if stopper.observe(entry.total) {
            stopped_early = epoch + 1 < config.max_epochs;
            break;
        }
    }

    let center = center.expect("at least one batch ran");
    if center.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("one-class center is not finite".into()));
    }
    let frequencies = FrequencyTable::from_sequences(sequences, config.l_max);
    Ok(TrainOutcome {
        state: ModelState {
            network: net,
            center,
            frequencies,
            embedding,
            mask,
            l_max: config.l_max,
            epochs_trained: log.len(),
            snapshot,
        },
        log,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Label;
    use crate::model::Variant;

    #[test]
    fn lr_schedule_endpoints() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 1e-2);
        assert!((lr_at(99, &c) - 1e-4).abs() < 1e-18);
        let mid = c.lr_end + (c.lr_start - c.lr_end) * 0.5;
        assert!((mid - 5.05e-3).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for e in 0..100 {
            let lr = lr_at(e, &c);
            assert!(lr <= prev && lr >= c.lr_end && lr <= c.lr_start);
            prev = lr;
        }
        let one = TrainConfig {
            max_epochs: 1,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &one), 1e-2);
    }

    #[test]
    fn center_is_mean() {
        let v = Tensor::from_vec(&[2, 2], vec![3.0, -1.0, 3.0, -1.0]).unwrap();
        assert_eq!(update_center(&[v]).unwrap(), vec![3.0, -1.0]);
        let a = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2], vec![2.0, 2.0]).unwrap();
        assert_eq!(update_center(&[a, b]).unwrap(), vec![1.0, 1.0]);
        assert!(update_center(&[]).is_err());
    }

    #[test]
    fn early_stop_after_patience_stale_epochs() {
        let mut s = EarlyStopper::new(3, 1e-4);
        assert!(!s.observe(1.0));
        assert!(!s.observe(0.5));
        assert!(!s.observe(0.49999));
        assert!(!s.observe(0.6));
        assert!(s.observe(0.5));
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = ParamSet::new(0);
        p.push("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut g = p.zeros_like();
        g.get_mut(0).data_mut().copy_from_slice(&[0.5, -2.0]);
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &g, 0.1);
        let d = p.get(0).data();
        assert!((d[0] - 0.9).abs() < 1e-7);
        assert!((d[1] + 0.9).abs() < 1e-7);
    }

    fn tiny_corpus() -> (Vec<EventSequence>, EmbeddingTable) {
        let seqs = (0..20)
            .map(|i| EventSequence::new(format!("s{i}"), vec![1, 2, (i % 4) as u32 + 3, 1], Label::Normal))
            .collect();
        let table = EmbeddingTable::from_templates(["alpha", "beta", "gamma", "delta", "eps", "zeta"], 4, 1, None);
        (seqs, table)
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            hidden: 4,
            kernels: vec![3, 4, 5],
            alpha: 50.0,
            variant: Variant::FULL,
        }
    }

    #[test]
    fn one_epoch_and_determinism() {
        let (seqs, table) = tiny_corpus();
        let cfg = TrainConfig {
            max_epochs: 1,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = train(&seqs, table.clone(), tiny_model(), MaskConfig::default(), &cfg).unwrap();
        assert_eq!(a.log.len(), 1);
        assert_eq!(a.state.epochs_trained, 1);
        let cfg = TrainConfig { max_epochs: 4, ..cfg };
        let a = train(&seqs, table.clone(), tiny_model(), MaskConfig::default(), &cfg).unwrap();
        let b = train(&seqs, table, tiny_model(), MaskConfig::default(), &cfg).unwrap();
        assert_eq!(loss_log_csv(&a.log, None), loss_log_csv(&b.log, None));
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn refuses_anomalous_training_data() {
        let (mut seqs, table) = tiny_corpus();
        seqs[3].label = Label::Anomalous;
        let err = train(&seqs, table, tiny_model(), MaskConfig::default(), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
