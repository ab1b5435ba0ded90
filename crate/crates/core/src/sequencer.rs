//! Grouping parsed records into labeled event sequences and splitting them
//! into train/test partitions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{EventRecord, Label};
use crate::error::{Error, Result};

/// Sequences shorter than this are dropped.
pub const MIN_SEQUENCE_LEN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Session,
    EntryWindow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    pub seq_id: String,
    pub event_ids: Vec<u32>,
    pub label: Label,
    pub origin: Origin,
    pub window_size: Option<usize>,
    /// Source line span, when the sequence was cut from a parsed file.
    pub first_line: Option<u64>,
    pub last_line: Option<u64>,
}

impl EventSequence {
    pub fn new(seq_id: impl Into<String>, event_ids: Vec<u32>, label: Label) -> Self {
        EventSequence {
            seq_id: seq_id.into(),
            event_ids,
            label,
            origin: Origin::Session,
            window_size: None,
            first_line: None,
            last_line: None,
        }
    }

    /// Number of raw log messages the sequence covers.
    pub fn message_count(&self) -> usize {
        match (self.first_line, self.last_line) {
            (Some(a), Some(b)) if b >= a => (b - a + 1) as usize,
            _ => self.event_ids.len(),
        }
    }
}

/// Removes runs of identical adjacent ids, keeping the first of each run.
pub fn dedup_consecutive(event_ids: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::with_capacity(event_ids.len());
    for &id in event_ids {
        if out.last() != Some(&id) {
            out.push(id);
        }
    }
    out
}

/// A record after run-collapsing: the run's label is the OR of its members.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Collapsed {
    event_id: u32,
    label: Label,
    first_line: u64,
    last_line: u64,
}

fn collapse(records: &[EventRecord], dedup: bool) -> Vec<Collapsed> {
    let mut out: Vec<Collapsed> = Vec::with_capacity(records.len());
    for r in records {
        if dedup {
            if let Some(last) = out.last_mut() {
                if last.event_id == r.event_id {
                    last.label = last.label.or(r.label);
                    last.last_line = r.line_no;
                    continue;
                }
            }
        }
        out.push(Collapsed {
            event_id: r.event_id,
            label: r.label,
            first_line: r.line_no,
            last_line: r.line_no,
        });
    }
    out
}

#[derive(Debug, Clone)]
pub struct SessionGrouping {
    pub sequences: Vec<EventSequence>,
    pub dropped_no_key: usize,
    pub dropped_short: usize,
}

/// One sequence per session key, ordered by first appearance.
pub fn group_by_session(
    records: &[EventRecord],
    session_labels: &HashMap<String, Label>,
) -> Result<SessionGrouping> {
    let mut order: Vec<&str> = Vec::new();
    let mut members: HashMap<&str, Vec<&EventRecord>> = HashMap::new();
    let mut dropped_no_key = 0;
    for r in records {
        match r.session_key.as_deref() {
            Some(key) => members
                .entry(key)
                .or_insert_with(|| {
                    order.push(key);
                    Vec::new()
                })
                .push(r),
            None => dropped_no_key += 1,
        }
    }

    let mut sequences = Vec::with_capacity(order.len());
    let mut dropped_short = 0;
    for key in order {
        let label = *session_labels
            .get(key)
            .ok_or_else(|| Error::data(format!("session {key:?} missing from label file")))?;
        let rs = &members[key];
        if rs.len() < MIN_SEQUENCE_LEN {
            dropped_short += 1;
            continue;
        }
        sequences.push(EventSequence {
            seq_id: key.to_owned(),
            event_ids: rs.iter().map(|r| r.event_id).collect(),
            label,
            origin: Origin::Session,
            window_size: None,
            first_line: rs.first().map(|r| r.line_no),
            last_line: rs.last().map(|r| r.line_no),
        });
    }
    Ok(SessionGrouping {
        sequences,
        dropped_no_key,
        dropped_short,
    })
}

#[derive(Debug, Clone)]
pub struct WindowGrouping {
    pub sequences: Vec<EventSequence>,
    /// Records (after optional dedup) in the discarded short tail.
    pub dropped_remainder: usize,
    /// Records left after optional dedup.
    pub record_count: usize,
}

/// Non-overlapping windows of `window` consecutive records. With `dedup`,
/// runs of the same event are collapsed first.
pub fn group_fixed_window(records: &[EventRecord], window: usize, dedup: bool) -> Result<WindowGrouping> {
    if window < MIN_SEQUENCE_LEN {
        return Err(Error::config(format!(
            "window size must be >= {MIN_SEQUENCE_LEN}, got {window}"
        )));
    }
    let collapsed = collapse(records, dedup);
    let mut sequences = Vec::new();
    let mut dropped_remainder = 0;
    for (i, chunk) in collapsed.chunks(window).enumerate() {
        if chunk.len() < MIN_SEQUENCE_LEN {
            dropped_remainder += chunk.len();
            continue;
        }
        sequences.push(EventSequence {
            seq_id: format!("w{i}"),
            event_ids: chunk.iter().map(|c| c.event_id).collect(),
            label: chunk.iter().fold(Label::Normal, |acc, c| acc.or(c.label)),
            origin: Origin::EntryWindow,
            window_size: Some(window),
            first_line: Some(chunk[0].first_line),
            last_line: Some(chunk[chunk.len() - 1].last_line),
        });
    }
    Ok(WindowGrouping {
        sequences,
        dropped_remainder,
        record_count: collapsed.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitStrategy {
    Chronological,
    Random,
}

impl SplitStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "chronological" => Ok(SplitStrategy::Chronological),
            "random" => Ok(SplitStrategy::Random),
            other => Err(Error::config(format!(
                "unknown split strategy {other:?} (expected chronological or random)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SplitStrategy::Chronological => "chronological",
            SplitStrategy::Random => "random",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Vec<EventSequence>,
    pub test: Vec<EventSequence>,
    pub strategy: SplitStrategy,
    pub seed: u64,
    /// For chronological splits: first line number belonging to the test side, if any.
    pub boundary_line: Option<u64>,
}

/// Splits into train/test. Chronological splits cut at the `ratio` point of
/// the underlying log messages; a sequence straddling the cut goes to train.
pub fn split(
    sequences: Vec<EventSequence>,
    strategy: SplitStrategy,
    ratio: f64,
    seed: u64,
) -> Result<SplitDataset> {
    if sequences.is_empty() {
        return Err(Error::data("cannot split an empty sequence set"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("train ratio must lie in (0,1), got {ratio}")));
    }
    match strategy {
        SplitStrategy::Chronological => {
            let total: usize = sequences.iter().map(EventSequence::message_count).sum();
            let cut = (ratio * total as f64).round() as usize;
            let mut before = 0usize;
            let mut n_train = 0;
            for s in &sequences {
                if before < cut {
                    n_train += 1;
                }
                before += s.message_count();
            }
            let mut train = sequences;
            let test = train.split_off(n_train);
            let boundary_line = test.first().and_then(|s| s.first_line);
            Ok(SplitDataset {
                train,
                test,
                strategy,
                seed,
                boundary_line,
            })
        }
        SplitStrategy::Random => {
            let n = sequences.len();
            let n_train = (ratio * n as f64 + 0.5).floor() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut shuffled = sequences;
            shuffled.shuffle(&mut rng);
            let test = shuffled.split_off(n_train.min(n));
            Ok(SplitDataset {
                train: shuffled,
                test,
                strategy,
                seed,
                boundary_line: None,
            })
        }
    }
}

/// Keeps only normal sequences; returns them with the number discarded.
pub fn filter_training_normals(train: Vec<EventSequence>) -> Result<(Vec<EventSequence>, usize)> {
    let before = train.len();
    let normal: Vec<EventSequence> = train
        .into_iter()
        .filter(|s| s.label == Label::Normal)
        .collect();
    if normal.is_empty() {
        return Err(Error::data("training split contains no normal sequences"));
    }
    let discarded = before - normal.len();
    Ok((normal, discarded))
}

/// Counts in the style of a dataset overview table.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub sequences: usize,
    pub unique_events: usize,
    pub normal: usize,
    pub anomalous: usize,
}

impl DatasetStats {
    pub fn compute(sequences: &[EventSequence]) -> Self {
        let unique: BTreeSet<u32> = sequences.iter().flat_map(|s| s.event_ids.iter().copied()).collect();
        let anomalous = sequences.iter().filter(|s| s.label.is_anomalous()).count();
        DatasetStats {
            sequences: sequences.len(),
            unique_events: unique.len(),
            normal: sequences.len() - anomalous,
            anomalous,
        }
    }

    fn pct(&self, n: usize) -> f64 {
        if self.sequences == 0 {
            0.0
        } else {
            100.0 * n as f64 / self.sequences as f64
        }
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "#sequences={} #events={} #normal={} ({:.2}%) #anomalous={} ({:.2}%)",
            self.sequences,
            self.unique_events,
            self.normal,
            self.pct(self.normal),
            self.anomalous,
            self.pct(self.anomalous)
        )
    }
}

const DATASET_MAGIC: &str = "#logsd-dataset v1";

/// Header metadata carried by a sequence dataset file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetHeader {
    pub fields: BTreeMap<String, String>,
}

impl DatasetHeader {
    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.fields.insert(key.to_owned(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }
}

/// Serialises sequences: a header line, then `seq_id<TAB>label<TAB>ids`.
pub fn sequences_to_string(header: &DatasetHeader, sequences: &[EventSequence]) -> String {
    let mut out = String::from(DATASET_MAGIC);
    for (k, v) in &header.fields {
        out.push(' ');
        out.push_str(k);
        out.push('=');
        out.push_str(v);
    }
    out.push('\n');
    for s in sequences {
        out.push_str(&s.seq_id);
        out.push('\t');
        out.push_str(&s.label.to_string());
        out.push('\t');
        let ids: Vec<String> = s.event_ids.iter().map(u32::to_string).collect();
        out.push_str(&ids.join(" "));
        out.push('\n');
    }
    out
}

pub fn sequences_from_str(text: &str) -> Result<(DatasetHeader, Vec<EventSequence>)> {
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| Error::data("dataset file is empty"))?;
    let rest = first
        .strip_prefix(DATASET_MAGIC)
        .ok_or_else(|| Error::data(format!("not a dataset header: {first:?}")))?;
    let mut header = DatasetHeader::default();
    for field in rest.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::data(format!("bad dataset header field {field:?}")))?;
        header.fields.insert(k.to_owned(), v.to_owned());
    }
    let window_size = header.get("window").and_then(|w| w.parse().ok());
    let origin = if window_size.is_some() {
        Origin::EntryWindow
    } else {
        Origin::Session
    };
    let mut sequences = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::data(format!("dataset line {} needs 3 tab-separated columns", n + 2)));
        }
        let event_ids = cols[2]
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| Error::data(format!("dataset line {}: bad event id {t:?}", n + 2)))
            })
            .collect::<Result<Vec<u32>>>()?;
        sequences.push(EventSequence {
            seq_id: cols[0].to_owned(),
            event_ids,
            label: Label::from_digit(cols[1])?,
            origin,
            window_size,
            first_line: None,
            last_line: None,
        });
    }
    Ok((header, sequences))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(line_no: u64, event_id: u32, anomalous: bool, key: Option<&str>) -> EventRecord {
        EventRecord {
            line_no,
            label: if anomalous { Label::Anomalous } else { Label::Normal },
            event_id,
            session_key: key.map(String::from),
        }
    }

    #[test]
    fn dedup_examples() {
        assert_eq!(dedup_consecutive(&[1, 2, 2, 2, 1]), vec![1, 2, 1]);
        assert_eq!(dedup_consecutive(&[]), Vec::<u32>::new());
        assert_eq!(dedup_consecutive(&[7]), vec![7]);
    }

    proptest! {
        #[test]
        fn dedup_idempotent_and_adjacent_free(v in proptest::collection::vec(0u32..4, 0..40)) {
            let once = dedup_consecutive(&v);
            prop_assert_eq!(dedup_consecutive(&once), once.clone());
            prop_assert!(once.windows(2).all(|w| w[0] != w[1]));
        }

        #[test]
        fn window_lengths_account_for_every_record(
            ids in proptest::collection::vec(1u32..5, 0..60),
            w in 2usize..12,
            dedup in any::<bool>(),
        ) {
            let records: Vec<EventRecord> = ids.iter().enumerate()
                .map(|(i, &e)| rec(i as u64, e, false, None)).collect();
            let g = group_fixed_window(&records, w, dedup).unwrap();
            let total: usize = g.sequences.iter().map(|s| s.event_ids.len()).sum();
            prop_assert_eq!(total + g.dropped_remainder, g.record_count);
            if dedup {
                for s in &g.sequences {
                    prop_assert!(s.event_ids.windows(2).all(|p| p[0] != p[1]));
                }
            }
        }

        #[test]
        fn chronological_split_does_not_leak(n in 1usize..40, w in 2usize..6) {
            let records: Vec<EventRecord> = (0..n * w).map(|i| rec(i as u64, (i % 3) as u32 + 1, false, None)).collect();
            let g = group_fixed_window(&records, w, false).unwrap();
            let s = split(g.sequences, SplitStrategy::Chronological, 0.8, 0).unwrap();
            let max_train = s.train.iter().filter_map(|q| q.last_line).max();
            let min_test = s.test.iter().filter_map(|q| q.first_line).min();
            if let (Some(a), Some(b)) = (max_train, min_test) {
                prop_assert!(a < b);
            }
        }
    }

    #[test]
    fn session_grouping_is_stable_partition() {
        let records = vec![
            rec(0, 1, false, Some("blk_1")),
            rec(1, 2, false, Some("blk_2")),
            rec(2, 3, false, Some("blk_1")),
            rec(3, 4, false, None),
            rec(4, 5, false, Some("blk_2")),
            rec(5, 6, false, Some("blk_1")),
        ];
        let labels: HashMap<String, Label> = [
            ("blk_1".to_owned(), Label::Normal),
            ("blk_2".to_owned(), Label::Anomalous),
        ]
        .into();
        let g = group_by_session(&records, &labels).unwrap();
        assert_eq!(g.dropped_no_key, 1);
        assert_eq!(g.sequences.len(), 2);
        assert_eq!(g.sequences[0].event_ids, vec![1, 3, 6]);
        assert_eq!(g.sequences[0].label, Label::Normal);
        assert_eq!(g.sequences[1].event_ids, vec![2, 5]);
        assert_eq!(g.sequences[1].label, Label::Anomalous);
    }

    #[test]
    fn session_missing_from_labels_is_fatal() {
        let records = vec![rec(0, 1, false, Some("blk_9")), rec(1, 1, false, Some("blk_9"))];
        let err = group_by_session(&records, &HashMap::new()).err();
        assert!(matches!(err, Some(Error::Data(_))));
    }

    #[test]
    fn window_examples() {
        let records: Vec<EventRecord> = (0..7).map(|i| rec(i, i as u32 + 1, false, None)).collect();
        let g = group_fixed_window(&records, 3, false).unwrap();
        let lens: Vec<usize> = g.sequences.iter().map(|s| s.event_ids.len()).collect();
        assert_eq!(lens, vec![3, 3]);
        assert_eq!(g.dropped_remainder, 1);

        let records: Vec<EventRecord> = (0..6).map(|i| rec(i, 1 + (i % 2) as u32, false, None)).collect();
        let g = group_fixed_window(&records, 3, false).unwrap();
        assert_eq!(g.sequences.len(), 2);
        assert!(g.sequences.iter().all(|s| s.label == Label::Normal));

        let mut records = records;
        records[4].label = Label::Anomalous;
        let g = group_fixed_window(&records, 3, false).unwrap();
        assert_eq!(g.sequences[0].label, Label::Normal);
        assert_eq!(g.sequences[1].label, Label::Anomalous);

        assert!(matches!(group_fixed_window(&records, 1, false), Err(Error::Config(_))));
    }

    #[test]
    fn dedup_keeps_anomaly_of_collapsed_run() {
        let records = vec![
            rec(0, 1, false, None),
            rec(1, 2, false, None),
            rec(2, 2, true, None),
            rec(3, 3, false, None),
        ];
        let g = group_fixed_window(&records, 3, true).unwrap();
        assert_eq!(g.sequences[0].event_ids, vec![1, 2, 3]);
        assert_eq!(g.sequences[0].label, Label::Anomalous);
        assert_eq!(g.sequences[0].message_count(), 4);
    }

    #[test]
    fn chronological_equal_windows() {
        let records: Vec<EventRecord> = (0..100).map(|i| rec(i, 1 + (i % 4) as u32, false, None)).collect();
        let g = group_fixed_window(&records, 10, false).unwrap();
        let s = split(g.sequences, SplitStrategy::Chronological, 0.8, 1).unwrap();
        assert_eq!(s.train.len(), 8);
        assert_eq!(s.test.len(), 2);
        assert_eq!(s.boundary_line, Some(80));
    }

    #[test]
    fn random_split_sizes_and_determinism() {
        let seqs: Vec<EventSequence> = (0..5)
            .map(|i| EventSequence::new(format!("s{i}"), vec![1, 2], Label::Normal))
            .collect();
        let a = split(seqs.clone(), SplitStrategy::Random, 0.8, 42).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (4, 1));
        let b = split(seqs, SplitStrategy::Random, 0.8, 42).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn split_empty_is_error() {
        assert!(split(Vec::new(), SplitStrategy::Random, 0.8, 0).is_err());
    }

    #[test]
    fn filter_normals() {
        let mut seqs: Vec<EventSequence> = (0..5)
            .map(|i| EventSequence::new(format!("s{i}"), vec![1, 2], Label::Normal))
            .collect();
        let (same, d) = filter_training_normals(seqs.clone()).unwrap();
        assert_eq!((same.len(), d), (5, 0));
        seqs.push(EventSequence::new("a", vec![1, 9], Label::Anomalous));
        let (kept, discarded) = filter_training_normals(seqs).unwrap();
        assert_eq!((kept.len(), discarded), (5, 1));
        let only_anom = vec![EventSequence::new("a", vec![1, 9], Label::Anomalous)];
        assert!(filter_training_normals(only_anom).is_err());
    }

    #[test]
    fn dataset_file_roundtrip() {
        let seqs = vec![
            EventSequence::new("s0", vec![1, 2, 3], Label::Normal),
            EventSequence::new("s1", vec![4, 5], Label::Anomalous),
        ];
        let header = DatasetHeader::default()
            .with("strategy", "random")
            .with("seed", 3)
            .with("dedup", false);
        let text = sequences_to_string(&header, &seqs);
        let (h, back) = sequences_from_str(&text).unwrap();
        assert_eq!(h, header);
        assert_eq!(back, seqs);
    }

    #[test]
    fn stats_block() {
        let seqs = vec![
            EventSequence::new("s0", vec![1, 2, 3], Label::Normal),
            EventSequence::new("s1", vec![3, 4], Label::Anomalous),
        ];
        let st = DatasetStats::compute(&seqs);
        assert_eq!(st.unique_events, 4);
        assert_eq!(st.to_string(), "#sequences=2 #events=4 #normal=1 (50.00%) #anomalous=1 (50.00%)");
    }
}
