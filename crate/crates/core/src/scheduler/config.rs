//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::CorpusMode;
use crate::memory::{RetrievalStrategy, StoragePolicy};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Strategy {
    Vanilla,
    UpperBound,
    Bm25All,
    Bm25Entity,
    FocusedStochastic,
    IntensiveFocused,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Vanilla,
        Strategy::UpperBound,
        Strategy::Bm25All,
        Strategy::Bm25Entity,
        Strategy::FocusedStochastic,
        Strategy::IntensiveFocused,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::UpperBound => "upper_bound",
            Strategy::Bm25All => "bm25_all",
            Strategy::Bm25Entity => "bm25_entity",
            Strategy::FocusedStochastic => "focused_stochastic",
            Strategy::IntensiveFocused => "intensive_focused",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Strategy::ALL.into_iter().find(|x| x.as_str() == s)
    }

    /// Storage and retrieval used during pre-training, `None` without replay.
    pub fn replay_policy(self) -> Option<(StoragePolicy, RetrievalStrategy)> {
        match self {
            Strategy::Vanilla | Strategy::UpperBound => None,
            Strategy::Bm25All => Some((StoragePolicy::All, RetrievalStrategy::Bm25)),
            Strategy::Bm25Entity => Some((StoragePolicy::EntityOnly, RetrievalStrategy::Bm25)),
            Strategy::FocusedStochastic | Strategy::IntensiveFocused => {
                Some((StoragePolicy::EntityOnly, RetrievalStrategy::Random))
            }
        }
    }

    /// Only the focused strategies retire entries.
    pub fn uses_exit(self) -> bool {
        matches!(self, Strategy::FocusedStochastic | Strategy::IntensiveFocused)
    }

    fn default_epochs(self) -> u32 {
        if self == Strategy::IntensiveFocused {
            5
        } else {
            1
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

impl ConfigError {
    pub fn messages(&self) -> Vec<String> {
        match self {
            ConfigError::Invalid(v) => v.clone(),
            other => vec![other.to_string()],
        }
    }
}

/// Everything one run needs besides data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub replay_interval: u64,
    /// Explicit epochs per replay event; the strategy default applies otherwise.
    pub replay_epochs: Option<u32>,
    pub max_replays: u32,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub seeds: Vec<u64>,
    pub corpus_mode: CorpusMode,
    pub batch_size: usize,
    pub seq_len: usize,
    pub epochs: usize,
    /// `total_steps` is derived from the stream at run time.
    pub model: ModelConfig,
    /// Cap on evaluated inclusive/exclusive pairs, 0 for all.
    pub eval_max_pairs: usize,
    /// Keep only pairs memorized at the A→B boundary.
    pub filter_memorized: bool,
    pub memory_capacity: Option<usize>,
    pub upper_bound_epochs: u32,
    /// Constant learning rate for upper-bound training; `max_lr` when unset.
    pub upper_bound_lr: Option<f64>,
    pub data_dir: Option<PathBuf>,
    pub curve: CurveSettings,
}

/// Forgetting-curve knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSettings {
    pub intensive_epochs: Vec<u32>,
    pub periodic: bool,
    pub periodic_interval: u64,
    pub periodic_epochs: u32,
    /// Intensity the periodic curve starts from; the highest configured when unset.
    pub periodic_from: Option<u32>,
    pub difficulty_buckets: usize,
    /// Bucket to study, 0 = hardest.
    pub bucket: usize,
    /// Base steps of resumed pre-training after the intensive phase; 0 = one epoch.
    pub curve_steps: u64,
    pub curve_eval_every: u64,
    /// Constant learning rate for intensive and periodic sessions; `max_lr` when unset.
    pub curve_lr: Option<f64>,
}

impl Default for CurveSettings {
    fn default() -> Self {
        CurveSettings {
            intensive_epochs: vec![1, 5, 100],
            periodic: false,
            periodic_interval: 1000,
            periodic_epochs: 5,
            periodic_from: None,
            difficulty_buckets: 3,
            bucket: 0,
            curve_steps: 0,
            curve_eval_every: 1000,
            curve_lr: None,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            strategy: Strategy::Vanilla,
            replay_interval: 100,
            replay_epochs: None,
            max_replays: 5,
            eval_every: 1000,
            checkpoint_every: 1000,
            seeds: vec![1],
            corpus_mode: CorpusMode::MixedShuffled,
            batch_size: 8,
            seq_len: 128,
            epochs: 1,
            model: ModelConfig::default(),
            eval_max_pairs: 0,
            filter_memorized: false,
            memory_capacity: None,
            upper_bound_epochs: 5,
            upper_bound_lr: None,
            data_dir: None,
            curve: CurveSettings::default(),
        }
    }
}

impl RunConfig {
    /// Epochs per replay event.
    pub fn f(&self) -> u32 {
        self.replay_epochs.unwrap_or_else(|| self.strategy.default_epochs())
    }

    pub fn exit_threshold(&self) -> Option<u32> {
        self.strategy.uses_exit().then_some(self.max_replays)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.replay_interval < 1 {
            v.push("replay_interval must be ≥ 1".to_string());
        }
        if self.replay_epochs == Some(0) {
            v.push("replay_epochs must be ≥ 1".to_string());
        }
        if self.max_replays < 1 {
            v.push("max_replays must be ≥ 1".to_string());
        }
        if self.eval_every < 1 {
            v.push("eval_every must be ≥ 1".to_string());
        }
        if self.seeds.is_empty() {
            v.push("seeds must list at least one seed".to_string());
        }
        if self.batch_size < 1 {
            v.push("batch_size must be ≥ 1".to_string());
        }
        if self.seq_len < 2 {
            v.push("seq_len must be ≥ 2".to_string());
        }
        if self.seq_len > self.model.context_len {
            v.push(format!("seq_len {} exceeds context_len {}", self.seq_len, self.model.context_len));
        }
        if self.epochs < 1 {
            v.push("epochs must be ≥ 1".to_string());
        }
        if self.upper_bound_epochs < 1 {
            v.push("upper_bound_epochs must be ≥ 1".to_string());
        }
        if self.memory_capacity == Some(0) {
            v.push("memory_capacity must be ≥ 1".to_string());
        }
        for (k, lr) in [("upper_bound_lr", self.upper_bound_lr), ("curve_lr", self.curve.curve_lr)] {
            if let Some(lr) = lr {
                if !(lr.is_finite() && lr > 0.0) {
                    v.push(format!("{k} must be positive"));
                }
            }
        }
        let c = &self.curve;
        if c.periodic && c.periodic_interval < 1 {
            v.push("periodic_interval must be ≥ 1".to_string());
        }
        if c.periodic_epochs < 1 {
            v.push("periodic_epochs must be ≥ 1".to_string());
        }
        if c.intensive_epochs.is_empty() {
            v.push("intensive_epochs must list at least one value".to_string());
        }
        if let Some(p) = c.periodic_from {
            if !c.intensive_epochs.contains(&p) {
                v.push(format!("periodic_from {p} is not among intensive_epochs"));
            }
        }
        if c.difficulty_buckets < 2 {
            v.push("difficulty_buckets must be ≥ 2".to_string());
        }
        if c.bucket >= c.difficulty_buckets {
            v.push(format!("bucket {} out of range for {} buckets", c.bucket, c.difficulty_buckets));
        }
        if c.curve_eval_every < 1 {
            v.push("curve_eval_every must be ≥ 1".to_string());
        }
        // the step budget is filled in later, so check the rest with a placeholder
        let mut m = self.model;
        m.total_steps = m.total_steps.max(m.warmup_steps);
        v.extend(m.violations());
        v
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(v))
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    /// Parses and validates; every problem is reported in one error.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut errors = Vec::new();
        let mut pairs: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, val)) = line.split_once('=') else {
                errors.push(format!("line {}: expected key = value, got {line:?}", i + 1));
                continue;
            };
            let k = k.trim().to_string();
            if pairs.contains_key(&k) {
                errors.push(format!("duplicate key {k} (line {})", i + 1));
                continue;
            }
            pairs.insert(k, (i + 1, val.trim().to_string()));
        }
        let mut c = RunConfig::default();
        // strategy first: other keys are checked against it
        let mut ordered: Vec<_> = pairs.iter().collect();
        ordered.sort_by_key(|(k, _)| k.as_str() != "strategy");
        for (k, (line, val)) in ordered {
            if let Err(e) = c.set(k, val) {
                errors.push(format!("line {line}: {e}"));
            }
        }
        errors.extend(c.violations());
        if errors.is_empty() {
            Ok(c)
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    /// Applies one key; the message names the key on failure.
    pub fn set(&mut self, key: &str, val: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, val: &str) -> Result<T, String> {
            val.parse().map_err(|_| format!("{key}: cannot parse {val:?}"))
        }
        fn list<T: std::str::FromStr>(key: &str, val: &str) -> Result<Vec<T>, String> {
            val.split(',').map(|s| num(key, s.trim())).collect()
        }
        fn flag(key: &str, val: &str) -> Result<bool, String> {
            match val {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(format!("{key}: expected true or false, got {val:?}")),
            }
        }
        let m = &mut self.model;
        let c = &mut self.curve;
        match key {
            "strategy" => self.strategy = Strategy::parse(val).ok_or_else(|| format!("strategy: unknown strategy {val:?}"))?,
            "replay_interval" => self.replay_interval = num(key, val)?,
            "replay_epochs" => self.replay_epochs = Some(num(key, val)?),
            "max_replays" => self.max_replays = num(key, val)?,
            "eval_every" => self.eval_every = num(key, val)?,
            "checkpoint_every" => self.checkpoint_every = num(key, val)?,
            "seeds" => self.seeds = list(key, val)?,
            "corpus_mode" => {
                self.corpus_mode = CorpusMode::parse(val).ok_or_else(|| format!("corpus_mode: unknown mode {val:?}"))?
            }
            "storage" => {
                let want = match self.strategy.replay_policy() {
                    Some((StoragePolicy::All, _)) => "all",
                    Some(_) => "entity_only",
                    None => "none",
                };
                if val != want {
                    return Err(format!("storage: {val:?} conflicts with strategy {} (uses {want})", self.strategy));
                }
            }
            "batch_size" => self.batch_size = num(key, val)?,
            "seq_len" => self.seq_len = num(key, val)?,
            "epochs" => self.epochs = num(key, val)?,
            "n_layers" => m.n_layers = num(key, val)?,
            "d_model" => m.d_model = num(key, val)?,
            "n_heads" => m.n_heads = num(key, val)?,
            "d_ffn" => m.d_ffn = num(key, val)?,
            "vocab_size" => m.vocab_size = num(key, val)?,
            "context_len" => m.context_len = num(key, val)?,
            "max_lr" => m.max_lr = num(key, val)?,
            "min_lr_ratio" => m.min_lr_ratio = num(key, val)?,
            "warmup_steps" => m.warmup_steps = num(key, val)?,
            "weight_decay" => m.adam.weight_decay = num(key, val)?,
            "eval_max_pairs" => self.eval_max_pairs = num(key, val)?,
            "filter_memorized" => self.filter_memorized = flag(key, val)?,
            "memory_capacity" => self.memory_capacity = Some(num(key, val)?),
            "upper_bound_epochs" => self.upper_bound_epochs = num(key, val)?,
            "upper_bound_lr" => self.upper_bound_lr = Some(num(key, val)?),
            "data_dir" => self.data_dir = Some(PathBuf::from(val)),
            "intensive_epochs" => c.intensive_epochs = list(key, val)?,
            "periodic" => c.periodic = flag(key, val)?,
            "periodic_interval" => c.periodic_interval = num(key, val)?,
            "periodic_epochs" => c.periodic_epochs = num(key, val)?,
            "periodic_from" => c.periodic_from = Some(num(key, val)?),
            "difficulty_buckets" => c.difficulty_buckets = num(key, val)?,
            "bucket" => c.bucket = num(key, val)?,
            "curve_steps" => c.curve_steps = num(key, val)?,
            "curve_eval_every" => c.curve_eval_every = num(key, val)?,
            "curve_lr" => c.curve_lr = Some(num(key, val)?),
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }

    /// Normalized `key = value` text that parses back to the same config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let c = &self.curve;
        let join = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("strategy = {}", self.strategy),
            format!("replay_interval = {}", self.replay_interval),
            format!("max_replays = {}", self.max_replays),
            format!("eval_every = {}", self.eval_every),
            format!("checkpoint_every = {}", self.checkpoint_every),
            format!("seeds = {}", join(&self.seeds)),
            format!("corpus_mode = {}", self.corpus_mode.as_str()),
            format!("batch_size = {}", self.batch_size),
            format!("seq_len = {}", self.seq_len),
            format!("epochs = {}", self.epochs),
            format!("n_layers = {}", m.n_layers),
            format!("d_model = {}", m.d_model),
            format!("n_heads = {}", m.n_heads),
            format!("d_ffn = {}", m.d_ffn),
            format!("vocab_size = {}", m.vocab_size),
            format!("context_len = {}", m.context_len),
            format!("max_lr = {:e}", m.max_lr),
            format!("min_lr_ratio = {}", m.min_lr_ratio),
            format!("warmup_steps = {}", m.warmup_steps),
            format!("weight_decay = {}", m.adam.weight_decay),
            format!("eval_max_pairs = {}", self.eval_max_pairs),
            format!("filter_memorized = {}", self.filter_memorized),
            format!("upper_bound_epochs = {}", self.upper_bound_epochs),
            format!("intensive_epochs = {}", join(&c.intensive_epochs.iter().map(|&e| u64::from(e)).collect::<Vec<_>>())),
            format!("periodic = {}", c.periodic),
            format!("periodic_interval = {}", c.periodic_interval),
            format!("periodic_epochs = {}", c.periodic_epochs),
            format!("difficulty_buckets = {}", c.difficulty_buckets),
            format!("bucket = {}", c.bucket),
            format!("curve_steps = {}", c.curve_steps),
            format!("curve_eval_every = {}", c.curve_eval_every),
        ];
        let optional = [
            ("replay_epochs", self.replay_epochs.map(|x| x.to_string())),
            ("memory_capacity", self.memory_capacity.map(|x| x.to_string())),
            ("upper_bound_lr", self.upper_bound_lr.map(|x| format!("{x:e}"))),
            ("periodic_from", c.periodic_from.map(|x| x.to_string())),
            ("curve_lr", c.curve_lr.map(|x| format!("{x:e}"))),
            ("data_dir", self.data_dir.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in optional {
            if let Some(v) = v {
                lines.push(format!("{k} = {v}"));
            }
        }
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_only_file() {
        let c = RunConfig::parse("# nothing set\n\n").unwrap();
        assert_eq!(c.f(), 1);
        assert_eq!(c.replay_interval, 100);
        assert_eq!(c.max_replays, 5);
        assert_eq!(c.eval_every, 1000);
    }

    #[test]
    fn intensive_defaults_to_five_epochs() {
        let c = RunConfig::parse("strategy = intensive_focused").unwrap();
        assert_eq!(c.f(), 5);
        assert_eq!(c.exit_threshold(), Some(5));
        let c = RunConfig::parse("strategy = intensive_focused\nreplay_epochs = 2").unwrap();
        assert_eq!(c.f(), 2);
        assert_eq!(RunConfig::parse("strategy = bm25_all").unwrap().exit_threshold(), None);
    }

    #[test]
    fn zero_interval_is_rejected() {
        let e = RunConfig::parse("replay_interval = 0").unwrap_err();
        assert!(e.to_string().contains("replay_interval must be ≥ 1"), "{e}");
    }

    #[test]
    fn duplicate_and_unknown_keys_are_named() {
        let e = RunConfig::parse("eval_every = 5\neval_every = 6\nfoo = 1\nreplay_interval = 0\n").unwrap_err();
        let msgs = e.messages();
        assert!(msgs.iter().any(|m| m.contains("duplicate key eval_every")), "{msgs:?}");
        assert!(msgs.iter().any(|m| m.contains("unknown key foo")), "{msgs:?}");
        assert!(msgs.iter().any(|m| m.contains("replay_interval")), "{msgs:?}");
        assert_eq!(msgs.len(), 3);
    }

    #[test]
    fn storage_must_match_strategy() {
        assert!(RunConfig::parse("strategy = bm25_entity\nstorage = entity_only").is_ok());
        let e = RunConfig::parse("strategy = bm25_entity\nstorage = all").unwrap_err();
        assert!(e.to_string().contains("storage"));
    }

    #[test]
    fn normalized_text_roundtrips() {
        let c = RunConfig::parse("strategy = focused_stochastic\nseeds = 1,2,3\nmax_lr = 1e-3\ncurve_lr = 2e-4\nperiodic = true")
            .unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::parse(s.as_str()), Some(s));
        }
        assert_eq!(Strategy::parse("bogus"), None);
    }
}
