//! Subcommand implementations. Each returns the text printed on success.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use logsd::checkpoint;
use logsd::corpus::{self, load_session_labels, records_from_tsv, records_to_tsv, TemplateCatalog};
use logsd::embedder::{EmbeddingTable, WordVectors, EMBED_DIM};
use logsd::evaluation::{confusion_and_metrics, random_detector, scores_from_csv, scores_to_csv, ScoreReport};
use logsd::model::sequence_scores;
use logsd::sequencer::{
    dedup_consecutive, filter_training_normals, group_by_session, group_fixed_window, sequences_from_str,
    sequences_to_string, split, DatasetHeader, DatasetStats, EventSequence,
};
use logsd::synthbench::{ablation_csv, generate, run_ablation, synthetic_catalog};
use logsd::trainer::{loss_log_csv, train};
use logsd::{Error, Result};

use crate::config::RunConfig;

pub const PARSED_FILE: &str = "parsed.tsv";
pub const CATALOG_FILE: &str = "templates.catalog";
pub const TRAIN_FILE: &str = "train.dataset";
pub const TEST_FILE: &str = "test.dataset";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const METRICS_FILE: &str = "metrics.txt";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const CONFIG_FILE: &str = "run.config";

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join(CONFIG_FILE), &cfg.to_text())?;
    Ok(dir)
}

fn snapshot_with_hash(cfg: &RunConfig) -> Vec<(String, String)> {
    let mut s = vec![("config_hash".to_owned(), cfg.hash())];
    s.extend(cfg.snapshot());
    s
}

fn dataset_header(cfg: &RunConfig) -> Result<DatasetHeader> {
    Ok(DatasetHeader::default()
        .with("config_hash", cfg.hash())
        .with("seed", cfg.seed()?))
}

fn load_dataset(path: &Path) -> Result<Vec<EventSequence>> {
    Ok(sequences_from_str(&read(path)?)?.1)
}

fn embedding(cfg: &RunConfig, catalog: &TemplateCatalog) -> Result<EmbeddingTable> {
    let words = match cfg.path("word_vectors") {
        Some(p) => Some(WordVectors::load(&p, EMBED_DIM)?),
        None => None,
    };
    Ok(EmbeddingTable::from_catalog(catalog, cfg.num("token_seed")?, words.as_ref()))
}

pub fn cmd_parse(cfg: &RunConfig, input: Option<&Path>, out: Option<&Path>) -> Result<String> {
    let input = input
        .map(Path::to_path_buf)
        .or_else(|| cfg.path("input"))
        .ok_or_else(|| Error::config("no input log given (use --input or the input key)"))?;
    let cfg = match out {
        Some(dir) => cfg.with_overrides([("out_dir".to_owned(), dir.display().to_string())])?,
        None => cfg.clone(),
    };
    let parsed = corpus::parse_file(&input, &cfg.profile()?, &cfg.parser()?)?;
    let dir = out_dir(&cfg)?;
    let hash = cfg.hash();
    write(&dir.join(PARSED_FILE), &records_to_tsv(&parsed.records, Some(&hash)))?;
    parsed.catalog.save(&dir.join(CATALOG_FILE), Some(&hash))?;
    Ok(format!(
        "parsed {} lines into {} templates ({} malformed)\nwrote {} and {} (config_hash={hash})\n",
        parsed.records.len(),
        parsed.catalog.len(),
        parsed.skipped.malformed,
        dir.join(PARSED_FILE).display(),
        dir.join(CATALOG_FILE).display(),
    ))
}

pub fn cmd_prepare(cfg: &RunConfig) -> Result<String> {
    let dir = out_dir(cfg)?;
    let records = records_from_tsv(&read(&dir.join(PARSED_FILE))?)?;
    let dedup = cfg.flag("dedup")?;
    let mut out = String::new();
    let mut header = dataset_header(cfg)?.with("dedup", dedup);
    let sequences = if cfg.get("grouping") == "session" {
        let labels_path = cfg
            .path("session_labels")
            .ok_or_else(|| Error::config("session grouping needs the session_labels key"))?;
        let labels = load_session_labels(&labels_path)?;
        let g = group_by_session(&records, &labels)?;
        let _ = writeln!(
            out,
            "grouping=session dedup={} dropped_no_key={} dropped_short={}",
            if dedup { "enabled" } else { "disabled" },
            g.dropped_no_key,
            g.dropped_short
        );
        let mut seqs = g.sequences;
        if dedup {
            for s in &mut seqs {
                s.event_ids = dedup_consecutive(&s.event_ids);
            }
            seqs.retain(|s| s.event_ids.len() >= logsd::sequencer::MIN_SEQUENCE_LEN);
        }
        seqs
    } else {
        let window: usize = cfg.num("window")?;
        let g = group_fixed_window(&records, window, dedup)?;
        header = header.with("window", window);
        let _ = writeln!(
            out,
            "grouping=window window={window} dedup={} records={} dropped_remainder={}",
            if dedup { "enabled" } else { "disabled" },
            g.record_count,
            g.dropped_remainder
        );
        g.sequences
    };
    let all = DatasetStats::compute(&sequences);
    let strategy = cfg.split_strategy()?;
    let ds = split(sequences, strategy, cfg.num("train_ratio")?, cfg.seed()?)?;
    let _ = write!(out, "split={} ratio={}", strategy.name(), cfg.get("train_ratio"));
    if let Some(b) = ds.boundary_line {
        let _ = write!(out, " boundary_line={b}");
        header = header.with("boundary_line", b);
    }
    out.push('\n');
    let test_stats = DatasetStats::compute(&ds.test);
    let (train_normal, discarded) = filter_training_normals(ds.train)?;
    header = header.with("split", strategy.name());
    let _ = writeln!(out, "all:   {all}");
    let _ = writeln!(out, "train: {} (discarded_anomalous={discarded})", DatasetStats::compute(&train_normal));
    let _ = writeln!(out, "test:  {test_stats}");
    write(&dir.join(TRAIN_FILE), &sequences_to_string(&header, &train_normal))?;
    write(&dir.join(TEST_FILE), &sequences_to_string(&header, &ds.test))?;
    let _ = writeln!(out, "config_hash={}", cfg.hash());
    Ok(out)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let dir = out_dir(cfg)?;
    let catalog = TemplateCatalog::load(&dir.join(CATALOG_FILE))?;
    let train_set = load_dataset(&dir.join(TRAIN_FILE))?;
    let outcome = train(&train_set, embedding(cfg, &catalog)?, cfg.model()?, cfg.mask()?, &cfg.train()?)?;
    let mut state = outcome.state;
    state.snapshot = snapshot_with_hash(cfg);
    checkpoint::save(&state, &dir.join(CHECKPOINT_FILE))?;
    let hash = cfg.hash();
    write(&dir.join(LOSS_LOG_FILE), &loss_log_csv(&outcome.log, Some(&hash)))?;
    let last = outcome.log.last().expect("at least one epoch");
    Ok(format!(
        "trained {} for {} epochs{} on {} sequences; final L={:.6} (L_r={:.6} L_o={:.6} L_p={:.6})\nwrote {} (config_hash={hash})\n",
        state.network.config().variant,
        outcome.log.len(),
        if outcome.stopped_early { " (early stop)" } else { "" },
        train_set.len(),
        last.total,
        last.reconstruction,
        last.oneclass,
        last.prediction,
        dir.join(CHECKPOINT_FILE).display(),
    ))
}

pub fn cmd_score(cfg: &RunConfig) -> Result<String> {
    let dir = out_dir(cfg)?;
    let state = checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
    let test = load_dataset(&dir.join(TEST_FILE))?;
    let scores = sequence_scores(&state, &test)?;
    let ids: Vec<String> = test.iter().map(|s| s.seq_id.clone()).collect();
    let labels: Vec<_> = test.iter().map(|s| s.label).collect();
    write(&dir.join(SCORES_FILE), &scores_to_csv(&ids, &scores, &labels, &snapshot_with_hash(cfg)))?;
    Ok(format!(
        "scored {} sequences\nwrote {} (config_hash={})\n",
        test.len(),
        dir.join(SCORES_FILE).display(),
        cfg.hash()
    ))
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<String> {
    let dir = out_dir(cfg)?;
    let (ids, scores, labels) = scores_from_csv(&read(&dir.join(SCORES_FILE))?)?;
    let report = ScoreReport::build(&ids, &scores, &labels, snapshot_with_hash(cfg))?;
    write(&dir.join(REPORT_FILE), &report.to_csv())?;

    let guesses = random_detector(labels.len(), cfg.seed()?);
    let as_scores: Vec<f64> = guesses.iter().map(|l| l.as_digit() as f64).collect();
    let baseline = confusion_and_metrics(&as_scores, &labels, 0.5);
    let mut metrics = report.metrics_text();
    let _ = writeln!(metrics, "random_detector_mcc = {:.6}", baseline.mcc);
    let _ = writeln!(metrics, "random_detector_f1 = {:.6}", baseline.f1);
    write(&dir.join(METRICS_FILE), &metrics)?;

    let m = &report.metrics;
    Ok(format!(
        "threshold ({}) = {:e}\nMCC={:.4} P={:.4} R={:.4} F1={:.4} AUPRC={:.4} AUROC={:.4}\nrandom detector: MCC={:.4} F1={:.4}\nwrote {} and {} (config_hash={})\n",
        logsd::evaluation::THRESHOLD_MODE,
        report.threshold,
        m.mcc,
        m.precision,
        m.recall,
        m.f1,
        report.auprc,
        report.auroc,
        baseline.mcc,
        baseline.f1,
        dir.join(REPORT_FILE).display(),
        dir.join(METRICS_FILE).display(),
        cfg.hash()
    ))
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<String> {
    let dir = out_dir(cfg)?;
    let catalog = TemplateCatalog::load(&dir.join(CATALOG_FILE))?;
    let ds = logsd::sequencer::SplitDataset {
        train: load_dataset(&dir.join(TRAIN_FILE))?,
        test: load_dataset(&dir.join(TEST_FILE))?,
        strategy: cfg.split_strategy()?,
        seed: cfg.seed()?,
        boundary_line: None,
    };
    let codes = cfg.variants()?;
    let refs: Vec<&str> = codes.iter().map(String::as_str).collect();
    let rows = run_ablation(&ds, &embedding(cfg, &catalog)?, &refs, &cfg.model()?, &cfg.mask()?, &cfg.train()?)?;
    let csv = ablation_csv(&rows, Some(&cfg.hash()));
    write(&dir.join(ABLATION_FILE), &csv)?;
    Ok(format!("{csv}wrote {}\n", dir.join(ABLATION_FILE).display()))
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    let dir = out_dir(cfg)?;
    let synth = cfg.synth()?;
    let ds = generate(&synth)?;
    let hash = cfg.hash();
    let header = dataset_header(cfg)?.with("source", "synth");
    write(&dir.join(TRAIN_FILE), &sequences_to_string(&header, &ds.train))?;
    write(&dir.join(TEST_FILE), &sequences_to_string(&header, &ds.test))?;
    synthetic_catalog(&synth)?.save(&dir.join(CATALOG_FILE), Some(&hash))?;
    Ok(format!(
        "train: {}\ntest:  {}\nwrote {}, {} and {} (config_hash={hash})\n",
        DatasetStats::compute(&ds.train),
        DatasetStats::compute(&ds.test),
        dir.join(TRAIN_FILE).display(),
        dir.join(TEST_FILE).display(),
        dir.join(CATALOG_FILE).display(),
    ))
}
