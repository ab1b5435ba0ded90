//! Fixed-depth prefix-tree template miner.
//!
//! Lines are split on whitespace and obvious variables (block ids, IPv4
//! endpoints, paths, hex strings, decimal numbers) are replaced by the
//! wildcard before routing. The tree is keyed first by token count and then
//! by the leading `depth - 2` tokens; each leaf holds the templates that share
//! that route.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

pub const WILDCARD: &str = "<*>";
const EMPTY_TOKEN: &str = "<empty>";
const CATALOG_MAGIC: &str = "#logsd-catalog v1";

/// Parser tuning knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct ParserConfig {
    pub depth: usize,
    pub sim_threshold: f64,
    pub max_children: usize,
}

impl Default for ParserConfig {
    fn default() -> Self {
        ParserConfig {
            depth: 4,
            sim_threshold: 0.4,
            max_children: 100,
        }
    }
}

impl ParserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::config(format!(
                "parser depth must be >= 2, got {}",
                self.depth
            )));
        }
        if !(self.sim_threshold > 0.0 && self.sim_threshold < 1.0) {
            return Err(Error::config(format!(
                "parser sim_threshold must lie in (0,1), got {}",
                self.sim_threshold
            )));
        }
        if self.max_children < 2 {
            return Err(Error::config("parser max_children must be >= 2"));
        }
        Ok(())
    }
}

fn mask_patterns() -> &'static [Regex] {
    static PATTERNS: OnceLock<Vec<Regex>> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        [
            r"^blk_-?\d+$",
            r"^/?\d{1,3}(\.\d{1,3}){3}(:\d+)?$",
            r"^(/[\w.\-:]+)+/?$",
            r"^0[xX][0-9a-fA-F]+$",
            r"^[0-9a-fA-F]*[0-9][0-9a-fA-F]*$",
            r"^[-+]?\d+(\.\d+)?$",
        ]
        .iter()
        .map(|p| Regex::new(p).expect("static mask pattern"))
        .collect()
    })
}

fn is_variable(token: &str) -> bool {
    mask_patterns().iter().any(|re| re.is_match(token))
}

/// Whitespace tokenization with variable pre-masking. Returns the masked
/// tokens and the original tokens in parallel.
pub fn premask(content: &str) -> (Vec<String>, Vec<String>) {
    let originals: Vec<String> = content.split_whitespace().map(str::to_owned).collect();
    if originals.is_empty() {
        return (vec![EMPTY_TOKEN.to_owned()], vec![String::new()]);
    }
    let masked = originals
        .iter()
        .map(|t| {
            if is_variable(t) {
                WILDCARD.to_owned()
            } else {
                t.clone()
            }
        })
        .collect();
    (masked, originals)
}

/// Fraction of positions whose tokens are identical. Defined as 0 for
/// sequences of different length.
pub fn similarity(a: &[String], b: &[String]) -> f64 {
    if a.len() != b.len() || a.is_empty() {
        return 0.0;
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    same as f64 / a.len() as f64
}

fn has_digit(token: &str) -> bool {
    token.bytes().any(|b| b.is_ascii_digit())
}

#[derive(Debug, Clone, Default)]
struct Node {
    children: BTreeMap<String, usize>,
    templates: Vec<u32>,
}

/// Result of routing one line through the catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedContent {
    pub event_id: u32,
    pub template_text: String,
    pub params: Vec<String>,
}

/// Mined templates plus the prefix tree used to match new lines.
#[derive(Debug, Clone)]
pub struct TemplateCatalog {
    config: ParserConfig,
    nodes: Vec<Node>,
    templates: Vec<Vec<String>>,
}

impl TemplateCatalog {
    pub fn new(config: ParserConfig) -> Result<Self> {
        config.validate()?;
        Ok(TemplateCatalog {
            config,
            nodes: vec![Node::default()],
            templates: Vec::new(),
        })
    }

    pub fn config(&self) -> &ParserConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// Template text for `event_id` (1-based).
    pub fn template(&self, event_id: u32) -> Option<String> {
        let idx = (event_id as usize).checked_sub(1)?;
        self.templates.get(idx).map(|t| t.join(" "))
    }

    /// `(event_id, template_text)` pairs in id order.
    pub fn templates(&self) -> impl Iterator<Item = (u32, String)> + '_ {
        self.templates
            .iter()
            .enumerate()
            .map(|(i, t)| (i as u32 + 1, t.join(" ")))
    }

    fn routing_depth(&self, n_tokens: usize) -> usize {
        (self.config.depth - 2).min(n_tokens)
    }

    fn find_leaf(&self, tokens: &[String]) -> Option<usize> {
        let mut node = *self.nodes[0].children.get(&tokens.len().to_string())?;
        for token in &tokens[..self.routing_depth(tokens.len())] {
            let children = &self.nodes[node].children;
            node = match children.get(token) {
                Some(&child) => child,
                None => *children.get(WILDCARD)?,
            };
        }
        Some(node)
    }

    fn child_or_insert(&mut self, parent: usize, key: &str) -> usize {
        if let Some(&child) = self.nodes[parent].children.get(key) {
            return child;
        }
        let idx = self.nodes.len();
        self.nodes.push(Node::default());
        self.nodes[parent].children.insert(key.to_owned(), idx);
        idx
    }

    fn insert_path(&mut self, tokens: &[String]) -> usize {
        let mut node = self.child_or_insert(0, &tokens.len().to_string());
        for token in &tokens[..self.routing_depth(tokens.len())] {
            let key = if token == WILDCARD || has_digit(token) {
                WILDCARD
            } else if self.nodes[node].children.contains_key(token.as_str())
                || self.nodes[node].children.len() + 1 < self.config.max_children
            {
                token.as_str()
            } else {
                WILDCARD
            };
            node = self.child_or_insert(node, key);
        }
        node
    }

    fn best_match(&self, leaf: usize, tokens: &[String]) -> Option<u32> {
        let mut best: Option<(f64, usize, u32)> = None;
        for &id in &self.nodes[leaf].templates {
            let template = &self.templates[id as usize - 1];
            let sim = similarity(template, tokens);
            if sim < self.config.sim_threshold {
                continue;
            }
            let wildcards = template.iter().filter(|t| *t == WILDCARD).count();
            let better = match best {
                None => true,
                Some((bs, bw, _)) => sim > bs || (sim == bs && wildcards > bw),
            };
            if better {
                best = Some((sim, wildcards, id));
            }
        }
        best.map(|(_, _, id)| id)
    }

    fn push_template(&mut self, tokens: Vec<String>) -> u32 {
        let leaf = self.insert_path(&tokens);
        self.templates.push(tokens);
        let id = self.templates.len() as u32;
        self.nodes[leaf].templates.push(id);
        id
    }

    /// Match `content` against the catalog, creating or generalising a
    /// template as needed.
    pub fn parse(&mut self, content: &str) -> ParsedContent {
        let (masked, originals) = premask(content);
        let matched = self
            .find_leaf(&masked)
            .and_then(|leaf| self.best_match(leaf, &masked));
        let event_id = match matched {
            Some(id) => {
                let template = &mut self.templates[id as usize - 1];
                for (slot, token) in template.iter_mut().zip(&masked) {
                    if slot != token {
                        *slot = WILDCARD.to_owned();
                    }
                }
                id
            }
            None => self.push_template(masked),
        };
        let template = &self.templates[event_id as usize - 1];
        let params = template
            .iter()
            .zip(&originals)
            .filter(|(t, _)| *t == WILDCARD)
            .map(|(_, o)| o.clone())
            .collect();
        ParsedContent {
            event_id,
            template_text: template.join(" "),
            params,
        }
    }

    /// Read-only lookup used once the catalog is frozen. Returns `None` when
    /// no template is similar enough.
    pub fn lookup(&self, content: &str) -> Option<u32> {
        let (masked, _) = premask(content);
        let leaf = self.find_leaf(&masked)?;
        self.best_match(leaf, &masked)
    }

    /// Serialise to the line-oriented catalog format.
    pub fn to_catalog_string(&self, config_hash: Option<&str>) -> String {
        let mut out = format!(
            "{CATALOG_MAGIC} depth={} sim_threshold={} max_children={}",
            self.config.depth, self.config.sim_threshold, self.config.max_children
        );
        if let Some(hash) = config_hash {
            let _ = write!(out, " config_hash={hash}");
        }
        out.push('\n');
        for (id, text) in self.templates() {
            let _ = writeln!(out, "{id}\t{text}");
        }
        out
    }

    pub fn save(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        fs::write(path, self.to_catalog_string(config_hash)).map_err(|e| Error::io(path, e))
    }

    pub fn from_catalog_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::data("catalog file is empty"))?;
        let rest = header
            .strip_prefix(CATALOG_MAGIC)
            .ok_or_else(|| Error::data(format!("not a catalog header: {header:?}")))?;
        let mut config = ParserConfig::default();
        for field in rest.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::data(format!("bad catalog header field {field:?}")))?;
            let bad = || Error::data(format!("bad catalog header value {field:?}"));
            match key {
                "depth" => config.depth = value.parse().map_err(|_| bad())?,
                "sim_threshold" => config.sim_threshold = value.parse().map_err(|_| bad())?,
                "max_children" => config.max_children = value.parse().map_err(|_| bad())?,
                _ => {}
            }
        }
        let mut catalog = TemplateCatalog::new(config)?;
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id, text) = line
                .split_once('\t')
                .ok_or_else(|| Error::data(format!("catalog line {} lacks a tab", n + 2)))?;
            let id: u32 = id
                .parse()
                .map_err(|_| Error::data(format!("catalog line {} has bad id {id:?}", n + 2)))?;
            if id as usize != catalog.len() + 1 {
                return Err(Error::data(format!(
                    "catalog ids must be dense and ordered; expected {}, found {id}",
                    catalog.len() + 1
                )));
            }
            let tokens: Vec<String> = text.split(' ').map(str::to_owned).collect();
            catalog.push_template(tokens);
        }
        Ok(catalog)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_catalog_str(&text)
    }

    /// Build a catalog directly from template strings (ids assigned in order).
    pub fn from_templates<I, S>(config: ParserConfig, templates: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut catalog = TemplateCatalog::new(config)?;
        for t in templates {
            let (masked, _) = premask(t.as_ref());
            catalog.push_template(masked);
        }
        Ok(catalog)
    }
}
