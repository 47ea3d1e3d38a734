//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! rounds = 30
//! task.num_classes = 10
//! generation.total_budget = 2000
//! ```
//!
//! Unknown keys, duplicate keys and invalid values are rejected with the
//! offending key and line number.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::algorithms::{AlgorithmConfig, AlgorithmKind};
use crate::data::{PartitionMode, TaskParams};
use crate::error::{Error, Result};
use crate::evaluation::{AttackSpec, ProjectionKind};
use crate::generation::{keyword_enum, AllocationStrategy, CapableClients, DiversityProfile, GenerationSpec, Guidance};

keyword_enum!(TrainingStrategy {
    Pri => "pri",
    Gen => "gen",
    P2G => "p2g",
    G2P => "g2p",
    Mixed => "mixed",
});

/// Global-model-based filtering of generated data.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSpec {
    pub start_round: usize,
    pub keep_percent: f64,
    pub category_wise: bool,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            start_round: 50,
            keep_percent: 90.0,
            category_wise: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub beta: f64,
    pub mode: PartitionMode,
    pub clients_per_domain: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            num_clients: 10,
            beta: 0.5,
            mode: PartitionMode::Label,
            clients_per_domain: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Run the membership attack every this many rounds; 0 disables it.
    pub attack_every: usize,
    pub attack: AttackSpec,
    pub projection: ProjectionKind,
    pub projection_dim: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            attack_every: 10,
            attack: AttackSpec::default(),
            projection: ProjectionKind::Random,
            projection_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    pub participation_rate: f64,
    pub strategy: TrainingStrategy,
    pub filter: Option<FilterSpec>,
    pub hidden: Vec<usize>,
    pub task: TaskParams,
    pub partition: PartitionConfig,
    pub generation: GenerationSpec,
    /// Externally produced generated pool; replaces the built-in generator.
    pub import_path: Option<PathBuf>,
    pub algorithm: AlgorithmConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            rounds: 100,
            participation_rate: 1.0,
            strategy: TrainingStrategy::Mixed,
            filter: None,
            hidden: vec![64, 64],
            task: TaskParams::default(),
            partition: PartitionConfig::default(),
            generation: GenerationSpec::default(),
            import_path: None,
            algorithm: AlgorithmConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Every accepted key, in serialization order.
pub const KEYS: &[&str] = &[
    "seed",
    "rounds",
    "participation_rate",
    "strategy",
    "model.hidden",
    "task.num_classes",
    "task.feature_dim",
    "task.num_domains",
    "task.class_separation",
    "task.domain_shift",
    "task.within_std",
    "task.train_per_class",
    "task.test_per_class",
    "task.generator_gap",
    "task.generator_diversity",
    "partition.num_clients",
    "partition.beta",
    "partition.mode",
    "partition.clients_per_domain",
    "generation.total_budget",
    "generation.allocation",
    "generation.guidance",
    "generation.diversity_profile",
    "generation.real_noise",
    "generation.capable",
    "generation.import_path",
    "algorithm.kind",
    "algorithm.mu",
    "algorithm.server_momentum",
    "algorithm.tau",
    "algorithm.moon_weight",
    "algorithm.decorr_weight",
    "algorithm.local_iters",
    "algorithm.batch_size",
    "algorithm.lr",
    "filter.enabled",
    "filter.start_round",
    "filter.keep_percent",
    "filter.category_wise",
    "eval.attack_every",
    "eval.attack_known_fraction",
    "eval.attack_members",
    "eval.attack_nonmembers",
    "eval.projection",
    "eval.projection_dim",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

fn mode_str(mode: PartitionMode) -> &'static str {
    match mode {
        PartitionMode::Label => "label",
        PartitionMode::Feature => "feature",
    }
}

impl ExperimentConfig {
    /// Sets one key. Filter keys are staged in `filter`, which is applied by
    /// the caller once all keys are read.
    fn set(&mut self, key: &str, value: &str, filter: &mut (bool, FilterSpec)) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "rounds" => self.rounds = parse(key, v)?,
            "participation_rate" => self.participation_rate = parse(key, v)?,
            "strategy" => self.strategy = parse(key, v)?,
            "model.hidden" => {
                self.hidden = if v.trim().is_empty() || v == "none" {
                    Vec::new()
                } else {
                    v.split(',').map(|w| parse(key, w.trim())).collect::<Result<_>>()?
                }
            }
            "task.num_classes" => self.task.num_classes = parse(key, v)?,
            "task.feature_dim" => self.task.feature_dim = parse(key, v)?,
            "task.num_domains" => self.task.num_domains = parse(key, v)?,
            "task.class_separation" => self.task.class_separation = parse(key, v)?,
            "task.domain_shift" => self.task.domain_shift = parse(key, v)?,
            "task.within_std" => self.task.within_std = parse(key, v)?,
            "task.train_per_class" => self.task.train_per_class = parse(key, v)?,
            "task.test_per_class" => self.task.test_per_class = parse(key, v)?,
            "task.generator_gap" => self.task.generator_gap = parse(key, v)?,
            "task.generator_diversity" => self.task.generator_diversity = parse(key, v)?,
            "partition.num_clients" => self.partition.num_clients = parse(key, v)?,
            "partition.beta" => self.partition.beta = parse(key, v)?,
            "partition.mode" => {
                self.partition.mode = match v {
                    "label" => PartitionMode::Label,
                    "feature" => PartitionMode::Feature,
                    _ => return Err(Error::config(key, format!("expected label or feature, got `{v}`"))),
                }
            }
            "partition.clients_per_domain" => self.partition.clients_per_domain = parse(key, v)?,
            "generation.total_budget" => self.generation.total_budget = parse(key, v)?,
            "generation.allocation" => self.generation.allocation = parse::<AllocationStrategy>(key, v)?,
            "generation.guidance" => self.generation.guidance = parse::<Guidance>(key, v)?,
            "generation.diversity_profile" => self.generation.diversity_profile = parse::<DiversityProfile>(key, v)?,
            "generation.real_noise" => self.generation.real_guidance_noise = parse(key, v)?,
            "generation.capable" => self.generation.capable = parse::<CapableClients>(key, v)?,
            "generation.import_path" => self.import_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "algorithm.kind" => self.algorithm.kind = parse::<AlgorithmKind>(key, v)?,
            "algorithm.mu" => self.algorithm.mu = parse(key, v)?,
            "algorithm.server_momentum" => self.algorithm.server_momentum = parse(key, v)?,
            "algorithm.tau" => self.algorithm.tau = parse(key, v)?,
            "algorithm.moon_weight" => self.algorithm.moon_weight = parse(key, v)?,
            "algorithm.decorr_weight" => self.algorithm.decorr_weight = parse(key, v)?,
            "algorithm.local_iters" => self.algorithm.local_iters = parse(key, v)?,
            "algorithm.batch_size" => self.algorithm.batch_size = parse(key, v)?,
            "algorithm.lr" => self.algorithm.lr = parse(key, v)?,
            "filter.enabled" => filter.0 = parse_bool(key, v)?,
            "filter.start_round" => filter.1.start_round = parse(key, v)?,
            "filter.keep_percent" => filter.1.keep_percent = parse(key, v)?,
            "filter.category_wise" => filter.1.category_wise = parse_bool(key, v)?,
            "eval.attack_every" => self.eval.attack_every = parse(key, v)?,
            "eval.attack_known_fraction" => self.eval.attack.known_fraction = parse(key, v)?,
            "eval.attack_members" => self.eval.attack.eval_member_count = parse(key, v)?,
            "eval.attack_nonmembers" => self.eval.attack.eval_nonmember_count = parse(key, v)?,
            "eval.projection" => self.eval.projection = parse::<ProjectionKind>(key, v)?,
            "eval.projection_dim" => self.eval.projection_dim = parse(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies one `key = value` override to an already valid config and revalidates.
    pub fn with_override(&self, key: &str, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = self.clone();
        let mut filter = (self.filter.is_some(), self.filter.clone().unwrap_or_default());
        cfg.set(key, value, &mut filter)?;
        cfg.filter = filter.0.then_some(filter.1);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses config text. Relative `generation.import_path` values are
    /// resolved against `base_dir` when given.
    pub fn parse_str(text: &str, base_dir: Option<&Path>) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut filter = (false, FilterSpec::default());
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected `key = value`, got `{content}`"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) && KEYS.contains(&key) {
                return Err(Error::config(key, format!("line {line}: duplicate key")));
            }
            cfg.set(key, value, &mut filter).map_err(|e| match e {
                Error::Config { key, msg } => Error::config(key, format!("line {line}: {msg}")),
                other => other,
            })?;
        }
        cfg.filter = filter.0.then_some(filter.1);
        if let (Some(base), Some(p)) = (base_dir, cfg.import_path.as_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?;
        Self::parse_str(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::config("rounds", "must be >= 1"));
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return Err(Error::config("participation_rate", "must be in (0, 1]"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "layer widths must be positive"));
        }
        self.task.validate()?;
        if self.partition.num_clients < 1 {
            return Err(Error::config("partition.num_clients", "must be >= 1"));
        }
        if !(self.partition.beta > 0.0 && self.partition.beta.is_finite()) {
            return Err(Error::config("partition.beta", "must be a finite value > 0"));
        }
        if self.partition.mode == PartitionMode::Feature {
            if self.partition.clients_per_domain < 1 {
                return Err(Error::config("partition.clients_per_domain", "must be >= 1"));
            }
            if self.partition.num_clients != self.task.num_domains * self.partition.clients_per_domain {
                return Err(Error::config(
                    "partition.num_clients",
                    "feature mode needs num_clients = task.num_domains * partition.clients_per_domain",
                ));
            }
        }
        if !(self.generation.real_guidance_noise >= 0.0 && self.generation.real_guidance_noise.is_finite()) {
            return Err(Error::config("generation.real_noise", "must be >= 0"));
        }
        if let CapableClients::Ids(ids) = &self.generation.capable {
            if let Some(bad) = ids.iter().find(|&&k| k >= self.partition.num_clients) {
                return Err(Error::config("generation.capable", format!("client {bad} does not exist")));
            }
        }
        self.algorithm.validate()?;
        if let Some(f) = &self.filter {
            if !(f.keep_percent > 0.0 && f.keep_percent <= 100.0) {
                return Err(Error::config("filter.keep_percent", "must be in (0, 100]"));
            }
        }
        if self.eval.attack_every > 0 {
            self.eval.attack.validate()?;
        }
        if self.eval.projection == ProjectionKind::Random && self.eval.projection_dim == 0 {
            return Err(Error::config("eval.projection_dim", "must be >= 1"));
        }
        Ok(())
    }

    /// Value of `key` as it would be written in a config file.
    pub fn get(&self, key: &str) -> Option<String> {
        let filter = self.filter.clone().unwrap_or_default();
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        Some(match key {
            "seed" => self.seed.to_string(),
            "rounds" => self.rounds.to_string(),
            "participation_rate" => self.participation_rate.to_string(),
            "strategy" => self.strategy.to_string(),
            "model.hidden" if self.hidden.is_empty() => "none".into(),
            "model.hidden" => list(&self.hidden),
            "task.num_classes" => self.task.num_classes.to_string(),
            "task.feature_dim" => self.task.feature_dim.to_string(),
            "task.num_domains" => self.task.num_domains.to_string(),
            "task.class_separation" => self.task.class_separation.to_string(),
            "task.domain_shift" => self.task.domain_shift.to_string(),
            "task.within_std" => self.task.within_std.to_string(),
            "task.train_per_class" => self.task.train_per_class.to_string(),
            "task.test_per_class" => self.task.test_per_class.to_string(),
            "task.generator_gap" => self.task.generator_gap.to_string(),
            "task.generator_diversity" => self.task.generator_diversity.to_string(),
            "partition.num_clients" => self.partition.num_clients.to_string(),
            "partition.beta" => self.partition.beta.to_string(),
            "partition.mode" => mode_str(self.partition.mode).into(),
            "partition.clients_per_domain" => self.partition.clients_per_domain.to_string(),
            "generation.total_budget" => self.generation.total_budget.to_string(),
            "generation.allocation" => self.generation.allocation.to_string(),
            "generation.guidance" => self.generation.guidance.to_string(),
            "generation.diversity_profile" => self.generation.diversity_profile.to_string(),
            "generation.real_noise" => self.generation.real_guidance_noise.to_string(),
            "generation.capable" => self.generation.capable.to_string(),
            "generation.import_path" => self.import_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "algorithm.kind" => self.algorithm.kind.to_string(),
            "algorithm.mu" => self.algorithm.mu.to_string(),
            "algorithm.server_momentum" => self.algorithm.server_momentum.to_string(),
            "algorithm.tau" => self.algorithm.tau.to_string(),
            "algorithm.moon_weight" => self.algorithm.moon_weight.to_string(),
            "algorithm.decorr_weight" => self.algorithm.decorr_weight.to_string(),
            "algorithm.local_iters" => self.algorithm.local_iters.to_string(),
            "algorithm.batch_size" => self.algorithm.batch_size.to_string(),
            "algorithm.lr" => self.algorithm.lr.to_string(),
            "filter.enabled" => self.filter.is_some().to_string(),
            "filter.start_round" => filter.start_round.to_string(),
            "filter.keep_percent" => filter.keep_percent.to_string(),
            "filter.category_wise" => filter.category_wise.to_string(),
            "eval.attack_every" => self.eval.attack_every.to_string(),
            "eval.attack_known_fraction" => self.eval.attack.known_fraction.to_string(),
            "eval.attack_members" => self.eval.attack.eval_member_count.to_string(),
            "eval.attack_nonmembers" => self.eval.attack.eval_nonmember_count.to_string(),
            "eval.projection" => self.eval.projection.to_string(),
            "eval.projection_dim" => self.eval.projection_dim.to_string(),
            _ => return None,
        })
    }

    /// Full resolved config, one `key = value` per line, every key present.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("every listed key has a value"));
        }
        out
    }
}
