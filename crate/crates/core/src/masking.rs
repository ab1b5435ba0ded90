//! Focus/context partitioning of batch events.
//!
//! Focus events are the least frequent `ceil(kappa * U)` unique events of a
//! batch (U = number of unique events). Focus masking zeroes them to build
//! the student input; context masking zeroes everything else to build the
//! reconstruction target.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedder::SequenceBatch;
use crate::error::{Error, Result};
use crate::sequencer::EventSequence;
use crate::tensor::Tensor;

pub const DEFAULT_KAPPA_SET: [f64; 5] = [0.05, 0.1, 0.15, 0.2, 0.3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskScheme {
    None,
    Random,
    Frequency,
}

impl MaskScheme {
    pub fn code(self) -> char {
        match self {
            MaskScheme::None => 'n',
            MaskScheme::Random => 'r',
            MaskScheme::Frequency => 'f',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KappaMode {
    Sampled,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskConfig {
    pub scheme: MaskScheme,
    pub kappa_set: Vec<f64>,
    pub kappa_mode: KappaMode,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            scheme: MaskScheme::Frequency,
            kappa_set: DEFAULT_KAPPA_SET.to_vec(),
            kappa_mode: KappaMode::Sampled,
            seed: 0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kappa_set.is_empty() {
            return Err(Error::config("kappa set must not be empty"));
        }
        let bad = |k: f64| !(k > 0.0 && k < 1.0);
        if let Some(k) = self.kappa_set.iter().copied().find(|&k| bad(k)) {
            return Err(Error::config(format!("kappa {k} outside (0,1)")));
        }
        if let KappaMode::Fixed(k) = self.kappa_mode {
            if bad(k) {
                return Err(Error::config(format!("fixed kappa {k} outside (0,1)")));
            }
        }
        Ok(())
    }

    /// Kappa values averaged over at inference.
    pub fn inference_kappas(&self) -> Vec<f64> {
        match (self.scheme, self.kappa_mode) {
            (MaskScheme::None, _) => vec![self.kappa_set[0]],
            (_, KappaMode::Fixed(k)) => vec![k],
            (_, KappaMode::Sampled) => self.kappa_set.clone(),
        }
    }
}

/// `ceil(kappa * unique)`, at least one, robust to representation error
/// such as `0.15 * 20 = 3.0000000000000004`.
pub fn focus_size(kappa: f64, unique: usize) -> usize {
    let raw = kappa * unique as f64;
    let size = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
    size.clamp(1, unique.max(1))
}

/// Occurrence counts over all real positions of the batch.
pub fn batch_event_frequencies(batch: &SequenceBatch) -> BTreeMap<u32, u64> {
    let mut counts = BTreeMap::new();
    for (&id, &real) in batch.event_grid.iter().zip(&batch.pad_mask) {
        if real {
            *counts.entry(id).or_insert(0) += 1;
        }
    }
    counts
}

/// Picks the focus events among the keys of `counts`.
pub fn select_focus<R: Rng + ?Sized>(
    counts: &BTreeMap<u32, u64>,
    kappa: f64,
    scheme: MaskScheme,
    rng: &mut R,
) -> BTreeSet<u32> {
    let unique = counts.len();
    if unique == 0 {
        return BTreeSet::new();
    }
    match scheme {
        MaskScheme::None => counts.keys().copied().collect(),
        MaskScheme::Frequency => {
            let mut order: Vec<(u64, u32)> = counts.iter().map(|(&id, &c)| (c, id)).collect();
            order.sort_unstable();
            order
                .into_iter()
                .take(focus_size(kappa, unique))
                .map(|(_, id)| id)
                .collect()
        }
        MaskScheme::Random => {
            let ids: Vec<u32> = counts.keys().copied().collect();
            index::sample(rng, unique, focus_size(kappa, unique))
                .into_iter()
                .map(|i| ids[i])
                .collect()
        }
    }
}

/// Uniform draw from the kappa set (or the fixed value).
pub fn sample_kappa<R: Rng + ?Sized>(config: &MaskConfig, rng: &mut R) -> f64 {
    match config.kappa_mode {
        KappaMode::Fixed(k) => k,
        KappaMode::Sampled => config.kappa_set[rng.random_range(0..config.kappa_set.len())],
    }
}

/// Which positions of a batch are focus.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub scheme: MaskScheme,
    pub kappa: f64,
    /// Union of the focus events over the rows of the batch.
    pub focus_events: BTreeSet<u32>,
    /// N x L; true at real positions holding a focus event.
    pub focus_positions: Vec<bool>,
}

impl MaskPlan {
    /// Batch-level plan: one focus set shared by every row.
    pub fn for_batch(batch: &SequenceBatch, focus_events: BTreeSet<u32>, scheme: MaskScheme, kappa: f64) -> Self {
        let focus_positions = match scheme {
            MaskScheme::None => batch.pad_mask.clone(),
            _ => batch
                .event_grid
                .iter()
                .zip(&batch.pad_mask)
                .map(|(id, &real)| real && focus_events.contains(id))
                .collect(),
        };
        MaskPlan {
            scheme,
            kappa,
            focus_events,
            focus_positions,
        }
    }

    /// Training-time plan from the batch's own event frequencies.
    pub fn from_batch_frequencies<R: Rng + ?Sized>(
        batch: &SequenceBatch,
        scheme: MaskScheme,
        kappa: f64,
        rng: &mut R,
    ) -> Self {
        let counts = batch_event_frequencies(batch);
        let focus = select_focus(&counts, kappa, scheme, rng);
        Self::for_batch(batch, focus, scheme, kappa)
    }

    /// Inference-time plan: each row selects its own focus from a frequency
    /// table frozen over the training data, so a sequence's plan does not
    /// depend on the rest of the batch. Unseen events count as frequency 0.
    pub fn per_sequence(
        batch: &SequenceBatch,
        scheme: MaskScheme,
        kappa: f64,
        frequencies: &FrequencyTable,
        seed: u64,
    ) -> Self {
        let l = batch.len();
        let mut focus_positions = vec![false; batch.event_grid.len()];
        let mut union = BTreeSet::new();
        for row in 0..batch.n() {
            let ids = &batch.event_grid[row * l..(row + 1) * l];
            let real = &batch.pad_mask[row * l..(row + 1) * l];
            let mut counts = BTreeMap::new();
            for (&id, _) in ids.iter().zip(real).filter(|(_, &r)| r) {
                counts.insert(id, frequencies.count(id));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(row_seed(seed, &batch.seq_ids[row], kappa));
            let focus = select_focus(&counts, kappa, scheme, &mut rng);
            for t in 0..l {
                focus_positions[row * l + t] =
                    real[t] && (scheme == MaskScheme::None || focus.contains(&ids[t]));
            }
            union.extend(focus);
        }
        MaskPlan {
            scheme,
            kappa,
            focus_events: union,
            focus_positions,
        }
    }
}

fn row_seed(seed: u64, seq_id: &str, kappa: f64) -> u64 {
    // FNV-1a over the id, mixed with the run seed and kappa bits
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seq_id.bytes().chain(kappa.to_bits().to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.rotate_left(17)
}

fn masked_copy(x: &Tensor, keep_row: impl Fn(usize) -> bool) -> Tensor {
    let d = *x.shape().last().expect("rank >= 1");
    let mut out = x.clone();
    for (row, chunk) in out.data_mut().chunks_mut(d).enumerate() {
        if !keep_row(row) {
            chunk.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

/// Zeroes focus rows: the context view `X_c`.
pub fn apply_focus_mask(x: &Tensor, plan: &MaskPlan) -> Tensor {
    masked_copy(x, |row| !plan.focus_positions[row])
}

/// Zeroes every row that is not focus: the focus view `X_f`.
pub fn apply_context_mask(x: &Tensor, plan: &MaskPlan) -> Tensor {
    masked_copy(x, |row| plan.focus_positions[row])
}

/// Event counts frozen over the training set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrequencyTable {
    counts: BTreeMap<u32, u64>,
}

impl FrequencyTable {
    /// Counts events over the first `l_max` positions of each sequence.
    pub fn from_sequences(sequences: &[EventSequence], l_max: usize) -> Self {
        let mut counts = BTreeMap::new();
        for s in sequences {
            for &id in s.event_ids.iter().take(l_max) {
                *counts.entry(id).or_insert(0) += 1;
            }
        }
        FrequencyTable { counts }
    }

    pub fn from_counts(counts: BTreeMap<u32, u64>) -> Self {
        FrequencyTable { counts }
    }

    pub fn count(&self, event_id: u32) -> u64 {
        self.counts.get(&event_id).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &BTreeMap<u32, u64> {
        &self.counts
    }
}
