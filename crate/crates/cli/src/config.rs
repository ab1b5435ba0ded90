//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use logsd::corpus::{FormatProfile, ParserConfig};
use logsd::masking::{KappaMode, MaskConfig};
use logsd::model::{ModelConfig, Variant};
use logsd::sequencer::SplitStrategy;
use logsd::synthbench::SynthConfig;
use logsd::trainer::TrainConfig;
use logsd::{Error, Result};

/// Every accepted key with its default. `auto` values are resolved from the
/// profile and grouping.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "42"),
    ("out_dir", "out"),
    ("input", ""),
    ("profile", "bgl"),
    ("session_labels", ""),
    ("parser_depth", "4"),
    ("sim_threshold", "0.4"),
    ("max_children", "100"),
    ("grouping", "auto"),
    ("window", "100"),
    ("dedup", "auto"),
    ("split", "auto"),
    ("train_ratio", "0.8"),
    ("l_max", "auto"),
    ("token_seed", "auto"),
    ("word_vectors", ""),
    ("kappa_set", "0.05,0.1,0.15,0.2,0.3"),
    ("kappa_mode", "sampled"),
    ("variant", "dff"),
    ("alpha", "50"),
    ("hidden", "128"),
    ("kernels", "3,4,5"),
    ("lr_start", "0.01"),
    ("lr_end", "0.0001"),
    ("decay_power", "1"),
    ("weight_decay", "0.0001"),
    ("batch_size", "64"),
    ("max_epochs", "100"),
    ("patience", "20"),
    ("min_rel_improvement", "0.0001"),
    ("variants", "sng,srl,sfl,srf,sff,dng,drl,dfl,drf,dff"),
    ("synth_n_train", "2000"),
    ("synth_n_test_normal", "500"),
    ("synth_n_test_anom", "50"),
    ("synth_vocab_rare", "40"),
    ("synth_dominant_events", "1"),
    ("synth_seq_len", "8"),
    ("synth_dominant_fill_prob", "1"),
    ("synth_diverse_frac", "0.4"),
    ("synth_unseen_pool", "10"),
];

/// Keys that locate outputs rather than change results; left out of the hash.
const UNHASHED: &[&str] = &["out_dir"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Keys set explicitly, before defaults and `auto` resolution.
    explicit: BTreeMap<String, String>,
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_pairs(Vec::new()).expect("defaults are valid")
    }
}

impl RunConfig {
    /// Parses config text; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line {}: expected key = value", no + 1)))?;
            pairs.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        Self::from_pairs(pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::parse(&text)
    }

    pub fn from_pairs<I: IntoIterator<Item = (String, String)>>(pairs: I) -> Result<Self> {
        let mut values: BTreeMap<String, String> = KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let mut explicit = BTreeMap::new();
        for (k, v) in pairs {
            match values.get_mut(&k) {
                Some(slot) => *slot = v.clone(),
                None => return Err(Error::config(format!("unknown config key {k:?}"))),
            }
            explicit.insert(k, v);
        }
        let mut cfg = RunConfig { explicit, values };
        cfg.resolve_auto();
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_auto(&mut self) {
        let hdfs = self.values["profile"] == "hdfs";
        let set_auto = |values: &mut BTreeMap<String, String>, key: &str, v: String| {
            if values[key] == "auto" {
                values.insert(key.to_owned(), v);
            }
        };
        set_auto(&mut self.values, "grouping", if hdfs { "session" } else { "window" }.into());
        let session = self.values["grouping"] == "session";
        set_auto(&mut self.values, "dedup", (!hdfs).to_string());
        set_auto(&mut self.values, "split", if session { "random" } else { "chronological" }.into());
        let l_max = if session { "256".to_owned() } else { self.values["window"].clone() };
        set_auto(&mut self.values, "l_max", l_max);
        let seed = self.values["seed"].clone();
        set_auto(&mut self.values, "token_seed", seed);
    }

    fn validate(&self) -> Result<()> {
        FormatProfile::by_name(self.get("profile"))?;
        match self.get("grouping") {
            "session" | "window" => {}
            other => return Err(Error::config(format!("grouping must be session or window, got {other:?}"))),
        }
        SplitStrategy::parse(self.get("split"))?;
        self.parser()?;
        self.model()?;
        self.mask()?;
        self.train()?.validate()?;
        self.synth()?.validate()?;
        self.variants()?;
        self.num::<usize>("window")?;
        self.flag("dedup")?;
        let ratio: f64 = self.num("train_ratio")?;
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::config(format!("train_ratio must lie in (0,1), got {ratio}")));
        }
        Ok(())
    }

    /// Applies `key=value` overrides (command-line flags win over the file).
    pub fn with_overrides<I: IntoIterator<Item = (String, String)>>(&self, overrides: I) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = self.explicit.clone().into_iter().collect();
        pairs.extend(overrides);
        Self::from_pairs(pairs)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered config key {key}"))
    }

    pub fn num<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::config(format!("config key {key}: cannot parse {v:?}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| Error::config(format!("config key {key}: cannot parse {v:?}")))
            })
            .collect()
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            other => Err(Error::config(format!("config key {key}: expected true/false, got {other:?}"))),
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn seed(&self) -> Result<u64> {
        self.num("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out_dir"))
    }

    pub fn parser(&self) -> Result<ParserConfig> {
        let cfg = ParserConfig {
            depth: self.num("parser_depth")?,
            sim_threshold: self.num("sim_threshold")?,
            max_children: self.num("max_children")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn profile(&self) -> Result<FormatProfile> {
        let mut p = FormatProfile::by_name(self.get("profile"))?;
        if let Some(labels) = self.path("session_labels") {
            p.session_labels = Some(labels);
        }
        Ok(p)
    }

    pub fn split_strategy(&self) -> Result<SplitStrategy> {
        SplitStrategy::parse(self.get("split"))
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            embed_dim: logsd::embedder::EMBED_DIM,
            hidden: self.num("hidden")?,
            kernels: self.list("kernels")?,
            alpha: self.num("alpha")?,
            variant: Variant::parse(self.get("variant"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mask(&self) -> Result<MaskConfig> {
        let kappa_mode = match self.get("kappa_mode") {
            "sampled" => KappaMode::Sampled,
            other => match other.strip_prefix("fixed:").map(str::parse::<f64>) {
                Some(Ok(k)) => KappaMode::Fixed(k),
                _ => {
                    return Err(Error::config(format!(
                        "kappa_mode must be sampled or fixed:<value>, got {other:?}"
                    )))
                }
            },
        };
        let cfg = MaskConfig {
            scheme: Variant::parse(self.get("variant"))?.masking,
            kappa_set: self.list("kappa_set")?,
            kappa_mode,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            lr_start: self.num("lr_start")?,
            lr_end: self.num("lr_end")?,
            decay_power: self.num("decay_power")?,
            weight_decay: self.num("weight_decay")?,
            batch_size: self.num("batch_size")?,
            max_epochs: self.num("max_epochs")?,
            patience: self.num("patience")?,
            min_rel_improvement: self.num("min_rel_improvement")?,
            seed: self.seed()?,
            l_max: self.num("l_max")?,
        })
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        Ok(SynthConfig {
            n_train: self.num("synth_n_train")?,
            n_test_normal: self.num("synth_n_test_normal")?,
            n_test_anom: self.num("synth_n_test_anom")?,
            vocab_rare: self.num("synth_vocab_rare")?,
            dominant_events: self.num("synth_dominant_events")?,
            seq_len: self.num("synth_seq_len")?,
            dominant_fill_prob: self.num("synth_dominant_fill_prob")?,
            diverse_frac: self.num("synth_diverse_frac")?,
            unseen_pool: self.num("synth_unseen_pool")?,
            seed: self.seed()?,
        })
    }

    pub fn variants(&self) -> Result<Vec<String>> {
        let codes: Vec<String> = self.get("variants").split(',').map(|s| s.trim().to_owned()).collect();
        for c in &codes {
            Variant::parse(c)?;
        }
        Ok(codes)
    }

    /// Resolved settings that determine results, sorted by key.
    pub fn snapshot(&self) -> Vec<(String, String)> {
        self.values
            .iter()
            .filter(|(k, _)| !UNHASHED.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// First 16 hex digits of SHA-256 over the snapshot.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.snapshot() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        let digest = h.finalize();
        let mut out = String::with_capacity(16);
        for b in &digest[..8] {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# config_hash={}\n", self.hash());
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_by_profile() {
        let bgl = RunConfig::default();
        assert_eq!(bgl.get("grouping"), "window");
        assert_eq!(bgl.get("dedup"), "true");
        assert_eq!(bgl.get("split"), "chronological");
        assert_eq!(bgl.get("l_max"), "100");
        let hdfs = RunConfig::parse("profile = hdfs\n").unwrap();
        assert_eq!(hdfs.get("grouping"), "session");
        assert_eq!(hdfs.get("dedup"), "false");
        assert_eq!(hdfs.get("split"), "random");
        assert_eq!(hdfs.get("l_max"), "256");
    }

    #[test]
    fn rejects_unknown_and_bad_values() {
        assert!(matches!(RunConfig::parse("colour = red"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("variant = xyz"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("lr_start = fast"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("just a line"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_and_hash() {
        let base = RunConfig::parse("# comment\nwindow = 60\n").unwrap();
        assert_eq!(base.get("l_max"), "60");
        let o = base.with_overrides([("seed".to_owned(), "9".to_owned())]).unwrap();
        assert_eq!(o.get("window"), "60");
        assert_eq!(o.get("token_seed"), "9");
        assert_ne!(o.hash(), base.hash());
        let moved = base.with_overrides([("out_dir".to_owned(), "elsewhere".to_owned())]).unwrap();
        assert_eq!(moved.hash(), base.hash());
        assert_eq!(base.hash().len(), 16);
        assert!(base.with_overrides([("nope".to_owned(), "1".to_owned())]).is_err());
    }
}
