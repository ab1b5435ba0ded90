//! Synthetic corpus with one dominant event and many rare ones, plus the
//! variant ablation driver.
//!
//! Event ids: `1..=dominant_events` are dominant, the next `vocab_rare` ids
//! are rare normal events, and the following `unseen_pool` ids only ever
//! appear in anomalous test sequences.
//!
//! Training holds two kinds of normal sequence: dominant-heavy ones (one
//! rare event, the other positions dominant with `dominant_fill_prob`) and
//! diverse ones (a run of consecutive rare ids). Test normals are freshly
//! drawn diverse sequences; test anomalies are diverse sequences with one
//! interior event swapped for an unseen id.

use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Label, ParserConfig, TemplateCatalog};
use crate::embedder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::evaluation::{threshold_max_f1, ScoreReport};
use crate::masking::MaskConfig;
use crate::model::{sequence_scores, ModelConfig, Variant};
use crate::sequencer::{EventSequence, SplitDataset, SplitStrategy};
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anom: usize,
    pub vocab_rare: usize,
    pub dominant_events: usize,
    pub seq_len: usize,
    /// Probability that a fill position of a dominant-heavy sequence holds a
    /// dominant event rather than a rare one.
    pub dominant_fill_prob: f64,
    /// Fraction of training sequences that are diverse (all rare events).
    pub diverse_frac: f64,
    /// Number of distinct ids available for anomaly injection.
    pub unseen_pool: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 2000,
            n_test_normal: 500,
            n_test_anom: 50,
            vocab_rare: 40,
            dominant_events: 1,
            seq_len: 8,
            dominant_fill_prob: 1.0,
            diverse_frac: 0.4,
            unseen_pool: 10,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 3 {
            return Err(Error::config("seq_len must be at least 3"));
        }
        if self.vocab_rare < self.seq_len {
            return Err(Error::config(format!(
                "vocab_rare={} is too small to build diverse sequences of length {}",
                self.vocab_rare, self.seq_len
            )));
        }
        if self.dominant_events == 0 || self.unseen_pool == 0 {
            return Err(Error::config("dominant_events and unseen_pool must be positive"));
        }
        if self.n_train == 0 || self.n_test_normal == 0 || self.n_test_anom == 0 {
            return Err(Error::config("synthetic split sizes must be positive"));
        }
        for (name, p) in [("dominant_fill_prob", self.dominant_fill_prob), ("diverse_frac", self.diverse_frac)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        Ok(())
    }

    pub fn num_events(&self) -> usize {
        self.dominant_events + self.vocab_rare + self.unseen_pool
    }

    pub fn rare_ids(&self) -> std::ops::RangeInclusive<u32> {
        let lo = self.dominant_events as u32 + 1;
        lo..=self.dominant_events as u32 + self.vocab_rare as u32
    }

    pub fn unseen_ids(&self) -> std::ops::RangeInclusive<u32> {
        let lo = (self.dominant_events + self.vocab_rare) as u32 + 1;
        lo..=self.num_events() as u32
    }
}

/// Single-token template text for a synthetic event id.
pub fn synthetic_template(id: u32) -> String {
    let mut letters = String::new();
    let mut k = id;
    loop {
        letters.insert(0, (b'a' + (k % 26) as u8) as char);
        k /= 26;
        if k == 0 {
            break;
        }
    }
    format!("synth{letters}")
}

/// Catalog holding one template per synthetic id (including unseen ids).
pub fn synthetic_catalog(config: &SynthConfig) -> Result<TemplateCatalog> {
    TemplateCatalog::from_templates(
        ParserConfig::default(),
        (1..=config.num_events() as u32).map(synthetic_template),
    )
}

/// A run of consecutive rare ids (wrapping) from a random start.
fn diverse<R: Rng>(config: &SynthConfig, rng: &mut R) -> Vec<u32> {
    let lo = *config.rare_ids().start();
    let n = config.vocab_rare as u32;
    let start = rng.random_range(0..n);
    (0..config.seq_len as u32).map(|t| lo + (start + t) % n).collect()
}

fn dominant_heavy<R: Rng>(config: &SynthConfig, rng: &mut R) -> Vec<u32> {
    let (lo, hi) = (*config.rare_ids().start(), *config.rare_ids().end());
    let anchor = rng.random_range(0..config.seq_len);
    (0..config.seq_len)
        .map(|t| {
            if t != anchor && rng.random_bool(config.dominant_fill_prob) {
                rng.random_range(1..=config.dominant_events as u32)
            } else {
                rng.random_range(lo..=hi)
            }
        })
        .collect()
}

/// Builds the train (normal only) and labelled test split.
pub fn generate(config: &SynthConfig) -> Result<SplitDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unseen: Vec<u32> = config.unseen_ids().collect();
    let train = (0..config.n_train)
        .map(|i| {
            let ids = if rng.random_bool(config.diverse_frac) {
                diverse(config, &mut rng)
            } else {
                dominant_heavy(config, &mut rng)
            };
            EventSequence::new(format!("train{i}"), ids, Label::Normal)
        })
        .collect();
    let mut test: Vec<EventSequence> = (0..config.n_test_normal)
        .map(|i| EventSequence::new(format!("norm{i}"), diverse(config, &mut rng), Label::Normal))
        .collect();
    for i in 0..config.n_test_anom {
        let mut ids = diverse(config, &mut rng);
        let pos = rng.random_range(1..ids.len() - 1);
        ids[pos] = *unseen.choose(&mut rng).expect("unseen pool is non-empty");
        test.push(EventSequence::new(format!("anom{i}"), ids, Label::Anomalous));
    }
    Ok(SplitDataset {
        train,
        test,
        strategy: SplitStrategy::Random,
        seed: config.seed,
        boundary_line: None,
    })
}

/// Training settings used for synthetic benchmark runs: a 30-epoch budget
/// with the learning rate schedule starting at 3e-3.
pub fn benchmark_train_config(config: &SynthConfig) -> TrainConfig {
    TrainConfig {
        lr_start: 3e-3,
        max_epochs: 30,
        seed: config.seed,
        l_max: config.seq_len,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub epochs: usize,
    pub mcc: f64,
    pub f1: f64,
    pub auprc: f64,
    pub auroc: f64,
}

/// Trains and evaluates each variant on the same data with the same seed.
pub fn run_ablation(
    dataset: &SplitDataset,
    embedding: &EmbeddingTable,
    codes: &[&str],
    model: &ModelConfig,
    mask: &MaskConfig,
    train_config: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let variants: Vec<Variant> = codes.iter().map(|c| Variant::parse(c)).collect::<Result<_>>()?;
    let ids: Vec<String> = dataset.test.iter().map(|s| s.seq_id.clone()).collect();
    let labels: Vec<Label> = dataset.test.iter().map(|s| s.label).collect();
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let cfg = ModelConfig {
            variant,
            ..model.clone()
        };
        let outcome = train(&dataset.train, embedding.clone(), cfg, mask.clone(), train_config)?;
        let scores = sequence_scores(&outcome.state, &dataset.test)?;
        let report = ScoreReport::build(&ids, &scores, &labels, Vec::new())?;
        debug_assert_eq!(report.metrics.f1, threshold_max_f1(&scores, &labels)?.1);
        rows.push(AblationRow {
            variant: variant.code(),
            epochs: outcome.state.epochs_trained,
            mcc: report.metrics.mcc,
            f1: report.metrics.f1,
            auprc: report.auprc,
            auroc: report.auroc,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow], config_hash: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(h) = config_hash {
        let _ = writeln!(out, "# config_hash={h}");
    }
    out.push_str("variant,epochs,MCC,F1,AUPRC,AUROC\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{:.4},{:.4}",
            r.variant, r.epochs, r.mcc, r.f1, r.auprc, r.auroc
        );
    }
    out
}
