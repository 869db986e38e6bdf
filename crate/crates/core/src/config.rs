//! Hyperparameters for the model, both training stages and a full run.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamWConfig;

/// How the title and entity sides are cast into the shared dimension `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    /// Stacked affine + tanh layers.
    AffineTanh,
    /// No projection; requires `entity_dim == dim`. Used by tests.
    Identity,
}

/// Attention pattern inside the two user-encoder towers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TowerAttention {
    /// Queries from one stream, keys from the other.
    Cross,
    /// Each tower attends over its own stream only.
    SelfOnly,
}

/// How the title and entity vectors of a user or candidate are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Learned sigmoid gate between the two vectors.
    Gate,
    /// Concatenation followed by a frozen random projection back to `d`.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Shared embedding dimension `d`.
    pub dim: usize,
    /// Entity memory dimension `d_e`.
    pub entity_dim: usize,
    pub title_layers: usize,
    pub title_heads: usize,
    /// Depth `L` of the signature entity encoder.
    pub see_layers: usize,
    pub see_heads: usize,
    pub user_heads: usize,
    pub ffn_dim: usize,
    /// Hidden width of additive attention pooling.
    pub pool_hidden: usize,
    pub max_title_len: usize,
    pub max_entities: usize,
    /// Dropout inside transformer layers.
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub layer_norm_affine: bool,
    pub title_positions: bool,
    pub entity_positions: bool,
    pub projection: ProjectionKind,
    pub projection_layers: usize,
    pub tower_attention: TowerAttention,
    pub aggregation: Aggregation,
    /// User and candidate aggregation share one gate.
    pub tie_gates: bool,
    pub freeze_token_embeddings: bool,
    /// Standard deviation of the normal init for token and entity tables.
    pub embedding_std: f64,
    /// Token vocabulary size, including the unknown token.
    pub vocab_size: usize,
    /// Entity memory rows `d_c`, including the handle and unknown rows.
    pub entity_count: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            entity_dim: 100,
            title_layers: 2,
            title_heads: 4,
            see_layers: 2,
            see_heads: 4,
            user_heads: 4,
            ffn_dim: 256,
            pool_hidden: 128,
            max_title_len: 20,
            max_entities: 10,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
            layer_norm_affine: true,
            title_positions: true,
            entity_positions: true,
            projection: ProjectionKind::AffineTanh,
            projection_layers: 1,
            tower_attention: TowerAttention::Cross,
            aggregation: Aggregation::Gate,
            tie_gates: true,
            freeze_token_embeddings: false,
            embedding_std: 0.02,
            vocab_size: 1,
            entity_count: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                problems.push(msg)
            }
        };
        check(
            self.dim >= 2 && self.dim % 2 == 0,
            format!("dim {} must be even and >= 2", self.dim),
        );
        check(
            self.entity_dim >= 2 && self.entity_dim % 2 == 0,
            format!("entity_dim {} must be even and >= 2", self.entity_dim),
        );
        for (name, heads, width) in [
            ("title_heads", self.title_heads, self.dim),
            ("see_heads", self.see_heads, self.entity_dim),
            ("user_heads", self.user_heads, self.dim),
        ] {
            check(
                heads > 0 && width % heads == 0,
                format!("{name}={heads} does not divide width {width}"),
            );
        }
        check(self.ffn_dim > 0, "ffn_dim must be positive".into());
        check(self.pool_hidden > 0, "pool_hidden must be positive".into());
        check(
            self.max_title_len > 0,
            "max_title_len must be positive".into(),
        );
        check(
            (0.0..1.0).contains(&self.dropout),
            format!("dropout {} outside [0,1)", self.dropout),
        );
        check(
            self.layer_norm_eps > 0.0,
            "layer_norm_eps must be positive".into(),
        );
        check(
            self.embedding_std > 0.0,
            format!("embedding_std {} must be positive", self.embedding_std),
        );
        check(self.vocab_size >= 1, "vocab_size must be >= 1".into());
        check(
            self.entity_count >= 2,
            "entity_count must include handle and unk rows".into(),
        );
        if self.projection == ProjectionKind::Identity {
            check(
                self.entity_dim == self.dim,
                "identity projection needs entity_dim == dim".into(),
            );
        } else {
            check(
                self.projection_layers >= 1,
                "projection_layers must be >= 1".into(),
            );
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub batch_size: usize,
    /// Temperature of the entity-title term.
    pub tau_et: f64,
    /// Temperature of the title-mirror term.
    pub tau_hh: f64,
    /// Temperature of the entity-mirror term.
    pub tau_ee: f64,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    /// Rescale alpha, beta and delta to sum to one.
    pub normalize_weights: bool,
    pub mirror_dropout: f64,
    pub epochs: usize,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            tau_et: 0.1,
            tau_hh: 0.1,
            tau_ee: 0.1,
            alpha: 0.3,
            beta: 0.2,
            delta: 0.2,
            normalize_weights: false,
            mirror_dropout: 0.1,
            epochs: 2,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("pretrain batch_size must be >= 2".into()));
        }
        if [self.tau_et, self.tau_hh, self.tau_ee]
            .iter()
            .any(|&t| !(t > 0.0))
        {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if [self.alpha, self.beta, self.delta]
            .iter()
            .any(|&w| !(w >= 0.0))
        {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.normalize_weights && self.alpha + self.beta + self.delta == 0.0 {
            return Err(Error::Config(
                "cannot normalize all-zero loss weights".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.mirror_dropout) {
            return Err(Error::Config("mirror_dropout outside [0,1)".into()));
        }
        self.optimizer.validate()
    }

    /// `(alpha, beta, delta)` after optional normalization.
    pub fn weights(&self) -> (f64, f64, f64) {
        if self.normalize_weights {
            let s = self.alpha + self.beta + self.delta;
            (self.alpha / s, self.beta / s, self.delta / s)
        } else {
            (self.alpha, self.beta, self.delta)
        }
    }
}

/// How the ranking loss consumes the click scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NceMode {
    /// Sampled-softmax cross-entropy over raw dot products.
    Standard,
    /// Softmax over the scores, then the log-likelihood ratio of those
    /// probabilities (two softmaxes in sequence).
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecsysConfig {
    pub batch_size: usize,
    /// Negatives per positive, `r`.
    pub negatives: usize,
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    pub grad_clip: f64,
    pub nce_mode: NceMode,
    /// Independent tapes per mini-batch; fixed so results do not depend on
    /// the thread count.
    pub shards: usize,
    /// Keep the epoch with the best validation AUC.
    pub select_best: bool,
    /// Share of training impressions (latest by time) held out for
    /// validation when no validation set is given.
    pub validation_fraction: f64,
    /// Steps between validation passes; 0 validates once per epoch.
    pub validate_every: usize,
}

impl Default for RecsysConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            negatives: 4,
            epochs: 3,
            optimizer: AdamWConfig::default(),
            grad_clip: 1.0,
            nce_mode: NceMode::Standard,
            shards: 4,
            select_best: true,
            validation_fraction: 0.05,
            validate_every: 0,
        }
    }
}

impl RecsysConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.negatives == 0 || self.shards == 0 {
            return Err(Error::Config(
                "batch_size, negatives and shards must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction outside [0,1)".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub min_history: usize,
    pub max_history: usize,
    /// Tokens seen fewer times map to the unknown token.
    pub min_token_freq: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            min_history: 5,
            max_history: 50,
            min_token_freq: 2,
        }
    }
}

/// Everything one CLI invocation needs; echoed into every output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub recsys: RecsysConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            threads: 0,
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            recsys: RecsysConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Settings sized for one desktop CPU core: a 64-wide model with
    /// normal(0, 1) embedding tables and larger learning rates. Matches
    /// `configs/desk.toml`.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.model.dim = 64;
        cfg.model.entity_dim = 64;
        cfg.model.ffn_dim = 128;
        cfg.model.pool_hidden = 64;
        cfg.model.embedding_std = 1.0;
        cfg.pretrain.batch_size = 64;
        cfg.pretrain.optimizer.lr_title = 3e-3;
        cfg.pretrain.optimizer.lr_other = 3e-3;
        cfg.recsys.optimizer.lr_title = 1e-3;
        cfg.recsys.optimizer.lr_other = 1e-3;
        cfg.recsys.shards = 1;
        cfg
    }

    /// Reads a `.toml` or `.json` file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    /// Architecture checks only; `vocab_size` and `entity_count` are filled
    /// in from data later.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.recsys.validate()?;
        if self.data.min_history > self.data.max_history || self.data.max_history == 0 {
            return Err(Error::Config(
                "history bounds must satisfy 0 < min <= max".into(),
            ));
        }
        Ok(())
    }

    /// Applies a `section.key=value` override; the value is parsed as JSON
    /// and falls back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override `{assignment}` is not key=value")))?;
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self)?;
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .get_mut(part)
                .ok_or_else(|| Error::Usage(format!("unknown config key `{key}`")))?;
        }
        *node = value;
        *self = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    /// The configuration after applying an ablation variant.
    pub fn with_variant(&self, variant: Variant) -> RunConfig {
        let mut cfg = self.clone();
        match variant {
            Variant::Full | Variant::NoIntra => {}
            Variant::NoClEt => cfg.pretrain.alpha = 0.0,
            Variant::NoClTtEe => {
                cfg.pretrain.beta = 0.0;
                cfg.pretrain.delta = 0.0;
            }
            Variant::NoInter => cfg.model.tower_attention = TowerAttention::SelfOnly,
            Variant::NoAgg => cfg.model.aggregation = Aggregation::Concat,
        }
        cfg
    }
}

/// Model variants used to measure each component's contribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// No contrastive pre-training; the recommender starts from scratch.
    NoIntra,
    /// Pre-training without the entity-title term.
    NoClEt,
    /// Pre-training without the two mirror terms.
    NoClTtEe,
    /// Self-attention instead of cross attention in the user towers.
    NoInter,
    /// Concatenation instead of gated aggregation.
    NoAgg,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoIntra,
        Variant::NoClEt,
        Variant::NoClTtEe,
        Variant::NoInter,
        Variant::NoAgg,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoIntra => "no_intra",
            Variant::NoClEt => "no_cl_et",
            Variant::NoClTtEe => "no_cl_tt_ee",
            Variant::NoInter => "no_inter",
            Variant::NoAgg => "no_agg",
        }
    }

    /// Whether stage two starts from a pre-trained news encoder.
    pub fn uses_pretraining(&self) -> bool {
        *self != Variant::NoIntra
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown variant `{s}` (expected one of: {})",
                    Variant::ALL.map(|v| v.as_str()).join(", ")
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_file_matches_desk() {
        let path = Path::new(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../configs/desk.toml"
        ));
        assert_eq!(RunConfig::load(path).unwrap(), RunConfig::desk());
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn indivisible_heads_are_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.title_heads = 3;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("title_heads"), "{err}");
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let mut cfg = RunConfig::default();
        cfg.set("pretrain.tau_et=0.5").unwrap();
        cfg.set("model.tower_attention=self_only").unwrap();
        assert_eq!(cfg.pretrain.tau_et, 0.5);
        assert_eq!(cfg.model.tower_attention, TowerAttention::SelfOnly);
        assert!(cfg.set("model.nope=1").is_err());
        assert!(cfg.set("model.dim=\"x\"").is_err());
    }

    #[test]
    fn variants_parse_and_apply() {
        assert_eq!("no_inter".parse::<Variant>().unwrap(), Variant::NoInter);
        assert!(matches!("bogus".parse::<Variant>(), Err(Error::Usage(_))));
        let base = RunConfig::default();
        assert_eq!(base.with_variant(Variant::Full), base);
        assert_eq!(base.with_variant(Variant::NoClEt).pretrain.alpha, 0.0);
        let v = base.with_variant(Variant::NoClTtEe);
        assert_eq!((v.pretrain.beta, v.pretrain.delta), (0.0, 0.0));
        assert_eq!(
            base.with_variant(Variant::NoAgg).model.aggregation,
            Aggregation::Concat
        );
    }

    #[test]
    fn weights_literal_unless_normalized() {
        let mut p = PretrainConfig::default();
        assert_eq!(p.weights(), (0.3, 0.2, 0.2));
        p.normalize_weights = true;
        let (a, b, d) = p.weights();
        assert!((a + b + d - 1.0).abs() < 1e-12);
        assert!((a - 0.3 / 0.7).abs() < 1e-12);
    }
}
