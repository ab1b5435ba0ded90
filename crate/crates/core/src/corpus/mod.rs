//! Raw log ingestion and template mining.

mod drain;

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use regex::Regex;

use crate::error::{Error, Result};

pub use drain::{premask, similarity, ParsedContent, ParserConfig, TemplateCatalog, WILDCARD};

/// Ground-truth class of a line or sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }

    pub fn as_digit(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Anomalous => 1,
        }
    }

    pub fn from_digit(s: &str) -> Result<Self> {
        match s {
            "0" => Ok(Label::Normal),
            "1" => Ok(Label::Anomalous),
            other => Err(Error::data(format!("label must be 0 or 1, got {other:?}"))),
        }
    }

    pub fn or(self, other: Label) -> Label {
        if self.is_anomalous() || other.is_anomalous() {
            Label::Anomalous
        } else {
            Label::Normal
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_digit())
    }
}

/// How per-line labels are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelRule {
    /// First whitespace token equal to `-` means normal, anything else anomalous.
    DashNormal,
    /// Labels come from a per-session label file.
    SessionFile,
    /// Unlabeled input; every line is normal.
    AllNormal,
}

impl LabelRule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dash_normal" => Ok(LabelRule::DashNormal),
            "session_file" => Ok(LabelRule::SessionFile),
            "none" => Ok(LabelRule::AllNormal),
            other => Err(Error::config(format!(
                "unknown label_rule {other:?} (expected dash_normal, session_file or none)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelRule::DashNormal => "dash_normal",
            LabelRule::SessionFile => "session_file",
            LabelRule::AllNormal => "none",
        }
    }
}

/// Describes the layout of one raw log format.
#[derive(Debug, Clone)]
pub struct FormatProfile {
    pub label_rule: LabelRule,
    /// Index of the first whitespace-separated field belonging to the message content.
    pub content_start: usize,
    pub session_regex: Option<Regex>,
    pub session_labels: Option<PathBuf>,
}

impl FormatProfile {
    /// Supercomputer-style logs: `<label> <epoch> <date> <node> <time> <node> <type> <component> <level> <content...>`.
    pub fn bgl() -> Self {
        FormatProfile {
            label_rule: LabelRule::DashNormal,
            content_start: 9,
            session_regex: None,
            session_labels: None,
        }
    }

    /// HDFS-style logs: `<date> <time> <pid> <level> <component>: <content...>` labeled per block.
    pub fn hdfs(session_labels: Option<PathBuf>) -> Self {
        FormatProfile {
            label_rule: LabelRule::SessionFile,
            content_start: 5,
            session_regex: Some(Regex::new(r"blk_-?\d+").expect("static regex")),
            session_labels,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "bgl" | "spirit" => Ok(Self::bgl()),
            "hdfs" => Ok(Self::hdfs(None)),
            "custom" => Ok(FormatProfile {
                label_rule: LabelRule::AllNormal,
                content_start: 0,
                session_regex: None,
                session_labels: None,
            }),
            other => Err(Error::config(format!("unknown profile {other:?}"))),
        }
    }
}

/// Reads a session label file (`BlockId,Label` with `Normal`/`Anomaly` or `0`/`1`).
pub fn load_session_labels(path: &Path) -> Result<HashMap<String, Label>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(',')
            .ok_or_else(|| Error::data(format!("{}:{}: expected key,label", path.display(), n + 1)))?;
        let label = match value.trim() {
            "Normal" | "normal" | "0" => Label::Normal,
            "Anomaly" | "anomaly" | "Anomalous" | "anomalous" | "1" => Label::Anomalous,
            "Label" if n == 0 => continue,
            other => {
                return Err(Error::data(format!(
                    "{}:{}: unknown label {other:?}",
                    path.display(),
                    n + 1
                )))
            }
        };
        labels.insert(key.trim().to_owned(), label);
    }
    Ok(labels)
}

/// One physical line after label and content extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct RawLine {
    pub line_no: u64,
    pub label: Label,
    pub session_hint: Option<String>,
    pub content: String,
}

/// Lines that could not be split into label and content fields.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SkipReport {
    pub malformed: usize,
}

/// Streaming reader over a raw log file. Yields lines in file order.
pub struct RawLines {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    profile: FormatProfile,
    labels: Option<HashMap<String, Label>>,
    next_line_no: u64,
    skipped: SkipReport,
}

impl RawLines {
    pub fn skip_report(&self) -> SkipReport {
        self.skipped
    }

    fn extract(&mut self, raw: &str) -> RawLine {
        let line_no = self.next_line_no;
        self.next_line_no += 1;

        let fields: Vec<&str> = raw.split_whitespace().collect();
        let session_hint = self
            .profile
            .session_regex
            .as_ref()
            .and_then(|re| re.find(raw))
            .map(|m| m.as_str().to_owned());

        if fields.len() <= self.profile.content_start {
            self.skipped.malformed += 1;
            return RawLine {
                line_no,
                label: Label::Normal,
                session_hint,
                content: raw.to_owned(),
            };
        }

        let label = match self.profile.label_rule {
            LabelRule::DashNormal => {
                if fields[0] == "-" {
                    Label::Normal
                } else {
                    Label::Anomalous
                }
            }
            LabelRule::SessionFile => session_hint
                .as_ref()
                .and_then(|k| self.labels.as_ref().and_then(|m| m.get(k)).copied())
                .unwrap_or(Label::Normal),
            LabelRule::AllNormal => Label::Normal,
        };
        RawLine {
            line_no,
            label,
            session_hint,
            content: fields[self.profile.content_start..].join(" "),
        }
    }
}

impl Iterator for RawLines {
    type Item = Result<RawLine>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = match self.lines.next()? {
            Ok(line) => line,
            Err(e) => return Some(Err(Error::io(&self.path, e))),
        };
        Some(Ok(self.extract(&line)))
    }
}

/// Opens `path` for line-by-line extraction under `profile`.
pub fn load_raw_lines(path: &Path, profile: &FormatProfile) -> Result<RawLines> {
    let labels = match profile.label_rule {
        LabelRule::SessionFile => {
            let label_path = profile.session_labels.as_ref().ok_or_else(|| {
                Error::config("profile uses session labels but no session_labels file is configured")
            })?;
            Some(load_session_labels(label_path)?)
        }
        _ => None,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(RawLines {
        path: path.to_owned(),
        lines: BufReader::new(file).lines(),
        profile: profile.clone(),
        labels,
        next_line_no: 0,
        skipped: SkipReport::default(),
    })
}

/// A fully parsed log line.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub line_no: u64,
    pub label: Label,
    pub event_id: u32,
    pub template_text: String,
    pub params: Vec<String>,
    pub session_key: Option<String>,
}

impl LogRecord {
    pub fn event_record(&self) -> EventRecord {
        EventRecord {
            line_no: self.line_no,
            label: self.label,
            event_id: self.event_id,
            session_key: self.session_key.clone(),
        }
    }
}

/// The columns of a parsed-log TSV row; what grouping needs from a record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    pub line_no: u64,
    pub label: Label,
    pub event_id: u32,
    pub session_key: Option<String>,
}

/// Parses a single extracted line against the (mutable) catalog.
pub fn parse_line(catalog: &mut TemplateCatalog, line: RawLine) -> LogRecord {
    let parsed = catalog.parse(&line.content);
    LogRecord {
        line_no: line.line_no,
        label: line.label,
        event_id: parsed.event_id,
        template_text: parsed.template_text,
        params: parsed.params,
        session_key: line.session_hint,
    }
}

#[derive(Debug, Clone)]
pub struct ParseOutcome {
    pub records: Vec<EventRecord>,
    pub catalog: TemplateCatalog,
    pub skipped: SkipReport,
}

/// Reads and parses a whole file.
pub fn parse_file(path: &Path, profile: &FormatProfile, parser: &ParserConfig) -> Result<ParseOutcome> {
    let mut catalog = TemplateCatalog::new(parser.clone())?;
    let mut lines = load_raw_lines(path, profile)?;
    let mut records = Vec::new();
    for line in lines.by_ref() {
        records.push(parse_line(&mut catalog, line?).event_record());
    }
    Ok(ParseOutcome {
        records,
        skipped: lines.skip_report(),
        catalog,
    })
}

pub const PARSED_TSV_HEADER: &str = "line_no\tlabel\tevent_id\tsession_key";

/// Renders records as the parsed-log TSV. Lines starting with `#` carry metadata.
pub fn records_to_tsv(records: &[EventRecord], config_hash: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(hash) = config_hash {
        out.push_str(&format!("# config_hash={hash}\n"));
    }
    out.push_str(PARSED_TSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.line_no,
            r.label,
            r.event_id,
            r.session_key.as_deref().unwrap_or("")
        ));
    }
    out
}

pub fn records_from_tsv(text: &str) -> Result<Vec<EventRecord>> {
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line == PARSED_TSV_HEADER || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::data(format!(
                "parsed TSV line {} has {} columns, expected 4",
                n + 1,
                cols.len()
            )));
        }
        let bad = |what: &str| Error::data(format!("parsed TSV line {}: bad {what}", n + 1));
        records.push(EventRecord {
            line_no: cols[0].parse().map_err(|_| bad("line_no"))?,
            label: Label::from_digit(cols[1])?,
            event_id: cols[2].parse().map_err(|_| bad("event_id"))?,
            session_key: (!cols[3].is_empty()).then(|| cols[3].to_owned()),
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    const BGL: &str = "- 1117838570 2005.06.03 R02-M1-N0-C:J12-U11 2005-06-03-15.42.50.675872 R02-M1-N0-C:J12-U11 RAS KERNEL INFO instruction cache parity error corrected\n\
KERNDTLB 1117838573 2005.06.03 R23-M0-NE-C:J05-U01 2005-06-03-15.42.53.276129 R23-M0-NE-C:J05-U01 RAS KERNEL FATAL data TLB error interrupt\n\
garbage\n";

    #[test]
    fn bgl_label_rule() {
        let f = write_tmp(BGL);
        let mut lines = load_raw_lines(f.path(), &FormatProfile::bgl()).unwrap();
        let all: Vec<RawLine> = lines.by_ref().map(|l| l.unwrap()).collect();
        assert_eq!(all[0].label, Label::Normal);
        assert_eq!(all[0].content, "instruction cache parity error corrected");
        assert_eq!(all[1].label, Label::Anomalous);
        assert_eq!(all[1].content, "data TLB error interrupt");
        assert_eq!(all[2].label, Label::Normal);
        assert_eq!(all[2].content, "garbage");
        assert_eq!(lines.skip_report().malformed, 1);
        assert_eq!(
            all.iter().map(|l| l.line_no).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn empty_file_is_empty_stream() {
        let f = write_tmp("");
        let mut lines = load_raw_lines(f.path(), &FormatProfile::bgl()).unwrap();
        assert_eq!(lines.by_ref().count(), 0);
        assert_eq!(lines.skip_report().malformed, 0);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_raw_lines(Path::new("/nonexistent/log"), &FormatProfile::bgl()).err();
        assert!(matches!(err, Some(Error::Io { .. })));
    }

    #[test]
    fn session_profile_requires_label_file() {
        let f = write_tmp("x");
        let err = load_raw_lines(f.path(), &FormatProfile::hdfs(None)).err();
        assert!(matches!(err, Some(Error::Config(_))));
        let missing = FormatProfile::hdfs(Some(PathBuf::from("/nonexistent/labels.csv")));
        assert!(load_raw_lines(f.path(), &missing).is_err());
    }

    #[test]
    fn hdfs_lines_get_session_labels() {
        let log = write_tmp(
            "081109 203518 143 INFO dfs.DataNode$DataXceiver: Receiving block blk_-1608999687919862906 src: /10.250.19.102:54106 dest: /10.250.19.102:50010\n\
081109 203519 145 INFO dfs.DataNode$PacketResponder: PacketResponder 1 for block blk_7 terminating\n",
        );
        let labels = write_tmp("BlockId,Label\nblk_-1608999687919862906,Normal\nblk_7,Anomaly\n");
        let profile = FormatProfile::hdfs(Some(labels.path().to_owned()));
        let out = parse_file(log.path(), &profile, &ParserConfig::default()).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.records[0].label, Label::Normal);
        assert_eq!(out.records[1].label, Label::Anomalous);
        assert_eq!(
            out.records[0].session_key.as_deref(),
            Some("blk_-1608999687919862906")
        );
        assert_eq!(
            out.catalog.template(1).unwrap(),
            "Receiving block <*> src: <*> dest: <*>"
        );
    }

    #[test]
    fn parsing_is_deterministic() {
        let f = write_tmp(BGL);
        let a = parse_file(f.path(), &FormatProfile::bgl(), &ParserConfig::default()).unwrap();
        let b = parse_file(f.path(), &FormatProfile::bgl(), &ParserConfig::default()).unwrap();
        assert_eq!(a.records, b.records);
        let max_id = a.records.iter().map(|r| r.event_id).max().unwrap();
        assert_eq!(max_id as usize, a.catalog.len());
    }

    #[test]
    fn tsv_roundtrip() {
        let records = vec![
            EventRecord { line_no: 0, label: Label::Normal, event_id: 3, session_key: None },
            EventRecord {
                line_no: 5,
                label: Label::Anomalous,
                event_id: 1,
                session_key: Some("blk_1".into()),
            },
        ];
        let text = records_to_tsv(&records, Some("deadbeef"));
        assert_eq!(records_from_tsv(&text).unwrap(), records);
    }
}
