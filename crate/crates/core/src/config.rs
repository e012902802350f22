//! Experiment configuration: the training hyperparameters, the attacker,
//! data and model sections, plus TOML loading with `--field value`
//! overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_rational::Ratio;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::PatternParams;
use crate::error::{Error, Result};
use crate::nn::{NetSpec, StatsMode, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
use crate::tensor::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Vanilla,
    Advprop,
    Fast,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Vanilla => "vanilla",
            Mode::Advprop => "advprop",
            Mode::Fast => "fast",
        })
    }
}

/// Adversarial fraction held as an exact rational in `[0, 1]`.
///
/// Accepts `"1/5"`, `"0.2"`, or a TOML number; decimals are converted
/// digit-for-digit, so `0.2` is exactly `1/5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PAdv(Ratio<u64>);

impl PAdv {
    pub fn new(numer: u64, denom: u64) -> Result<Self> {
        if denom == 0 || numer > denom {
            return Err(Error::config("p_adv", format!("{numer}/{denom} is not in [0, 1]")));
        }
        Ok(Self(Ratio::new(numer, denom)))
    }

    pub fn zero() -> Self {
        Self(Ratio::from_integer(0))
    }

    pub fn ratio(self) -> Ratio<u64> {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }

    pub fn is_zero(self) -> bool {
        *self.0.numer() == 0
    }

    pub fn is_one(self) -> bool {
        self.0.numer() == self.0.denom()
    }
}

impl Default for PAdv {
    fn default() -> Self {
        Self(Ratio::new(1, 5))
    }
}

impl FromStr for PAdv {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::config("p_adv", format!("cannot parse `{s}` as a fraction"));
        if let Some((a, b)) = s.split_once('/') {
            let a = a.trim().parse().map_err(|_| bad())?;
            let b = b.trim().parse().map_err(|_| bad())?;
            return PAdv::new(a, b);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if (int.is_empty() && frac.is_empty())
            || !int.chars().all(|c| c.is_ascii_digit())
            || !frac.chars().all(|c| c.is_ascii_digit())
            || frac.len() > 18
        {
            return Err(bad());
        }
        let denom = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let numer = int
            .checked_mul(denom)
            .and_then(|v| v.checked_add(frac))
            .ok_or_else(bad)?;
        PAdv::new(numer, denom)
    }
}

impl fmt::Display for PAdv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self.0.denom() == 1 {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl Serialize for PAdv {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PAdv {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = PAdv;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a fraction in [0, 1] such as \"1/5\" or 0.2")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<PAdv, E> {
                v.parse().map_err(E::custom)
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<PAdv, E> {
                // Shortest round-trip decimal, e.g. 0.2 -> "0.2".
                format!("{v}").parse().map_err(E::custom)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<PAdv, E> {
                u64::try_from(v)
                    .map_err(E::custom)
                    .and_then(|v| PAdv::new(v, 1).map_err(E::custom))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<PAdv, E> {
                PAdv::new(v, 1).map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// ℓ∞ radius in [0, 1]-normalized pixel units.
    pub epsilon: f64,
    pub steps: u32,
    pub random_init: bool,
    pub targeted: bool,
    pub stats_mode: StatsMode,
    /// Multi-step step size; defaults to `2.5·ε/K` (and `ε` when `K = 1`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    /// Also clip `x + δ` to the valid image range.
    pub clip_image: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0 / 255.0,
            steps: 1,
            random_init: true,
            targeted: false,
            stats_mode: StatsMode::Batch,
            step_size: None,
            clip_image: false,
        }
    }
}

impl AttackConfig {
    pub fn step_size(&self) -> f64 {
        self.step_size.unwrap_or(if self.steps <= 1 {
            self.epsilon
        } else {
            2.5 * self.epsilon / self.steps as f64
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("attack.epsilon", "must be a positive finite number"));
        }
        if self.steps == 0 {
            return Err(Error::config("attack.steps", "must be at least 1"));
        }
        if let Some(a) = self.step_size {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::config("attack.step_size", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Where update-speed rescaling is applied relative to β-weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleStage {
    /// On the combined gradient.
    AfterCombine,
    /// On each pass gradient before combining.
    PerComponent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub p_adv: PAdv,
    pub beta: f64,
    pub base_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub lr: f64,
    /// Multiplicative learning-rate factor applied at each decay epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply weight decay to Aux-branch batch-norm parameters too.
    pub aux_weight_decay: bool,
    /// Clean sub-batch size B; the full batch is B / (1 − p_adv).
    pub batch_size: usize,
    pub shards: usize,
    pub shuffle_bn: bool,
    pub rebalance: bool,
    pub sync_update_speed: bool,
    pub rescale_stage: RescaleStage,
    /// Shrink epochs and decay points by the relative per-epoch cost.
    pub calibrate_epochs: bool,
    pub seed: u64,
    pub attack: AttackConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Fast,
            p_adv: PAdv::default(),
            beta: 0.5,
            base_epochs: 105,
            decay_epochs: vec![30, 60, 90, 100],
            lr: 0.1,
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            aux_weight_decay: true,
            batch_size: 64,
            shards: 2,
            shuffle_bn: true,
            rebalance: true,
            sync_update_speed: true,
            rescale_stage: RescaleStage::AfterCombine,
            calibrate_epochs: true,
            seed: 0,
            attack: AttackConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn vanilla() -> Self {
        Self {
            mode: Mode::Vanilla,
            ..Self::default()
        }
    }

    pub fn advprop(steps: u32) -> Self {
        Self {
            mode: Mode::Advprop,
            attack: AttackConfig {
                steps,
                targeted: true,
                ..AttackConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn fast() -> Self {
        Self::default()
    }

    /// The adversarial fraction actually used by the step (AdvProp pairs
    /// every example, vanilla uses none).
    pub fn effective_p_adv(&self) -> PAdv {
        match self.mode {
            Mode::Vanilla => PAdv::zero(),
            Mode::Advprop => PAdv::new(1, 1).expect("valid"),
            Mode::Fast => self.p_adv,
        }
    }

    /// β actually applied: the configured value when re-balancing, else 1.
    pub fn effective_beta(&self) -> f64 {
        if self.rebalance {
            self.beta
        } else {
            1.0
        }
    }

    /// Examples drawn per step.
    pub fn total_batch(&self) -> usize {
        match self.mode {
            Mode::Fast => {
                let p = self.p_adv.ratio();
                let clean = Ratio::from_integer(1u64) - p;
                if *clean.numer() == 0 {
                    return 0;
                }
                let total = Ratio::from_integer(self.batch_size as u64) / clean;
                if total.is_integer() {
                    total.to_integer() as usize
                } else {
                    0
                }
            }
            _ => self.batch_size,
        }
    }

    /// Size of the adversarial sub-batch X₂ (fast mode).
    pub fn adv_batch(&self) -> usize {
        match self.mode {
            Mode::Fast => self.total_batch() - self.batch_size,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attack.validate()?;
        if self.base_epochs == 0 {
            return Err(Error::config("base_epochs", "must be at least 1"));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("decay_epochs", "must be strictly increasing"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be a non-negative finite number"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::config("lr_decay", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be non-negative"));
        }
        if self.shards == 0 {
            return Err(Error::config("shards", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        let need_per_shard = |count: usize, field: &str, what: &str| -> Result<()> {
            if count % self.shards != 0 {
                return Err(Error::config(
                    field,
                    format!("{what} of {count} is not divisible by {} shards", self.shards),
                ));
            }
            if count / self.shards < 2 {
                return Err(Error::config(
                    field,
                    format!(
                        "{what} of {count} over {} shards leaves fewer than 2 examples per shard",
                        self.shards
                    ),
                ));
            }
            Ok(())
        };
        need_per_shard(self.batch_size, "batch_size", "clean batch")?;
        match self.mode {
            Mode::Vanilla => {}
            Mode::Advprop => {}
            Mode::Fast => {
                if self.attack.steps != 1 {
                    return Err(Error::config(
                        "attack.steps",
                        "gradient reuse needs a single-step attack (steps = 1)",
                    ));
                }
                if self.attack.targeted {
                    return Err(Error::config(
                        "attack.targeted",
                        "gradient reuse needs an untargeted attack on the true label",
                    ));
                }
                if self.attack.stats_mode != StatsMode::Batch {
                    return Err(Error::config(
                        "attack.stats_mode",
                        "the reused noise pass is a training pass and must use batch statistics",
                    ));
                }
                if self.p_adv.is_one() {
                    return Err(Error::config("p_adv", "must leave a clean sub-batch (p_adv < 1)"));
                }
                if self.total_batch() == 0 {
                    return Err(Error::config(
                        "p_adv",
                        format!(
                            "batch_size {} / (1 - {}) is not an integer",
                            self.batch_size, self.p_adv
                        ),
                    ));
                }
                if self.sync_update_speed && self.p_adv.is_zero() {
                    return Err(Error::config(
                        "sync_update_speed",
                        "rescaling by 1/p_adv is undefined for p_adv = 0",
                    ));
                }
                if self.shuffle_bn && self.shards < 2 {
                    return Err(Error::config("shuffle_bn", "needs at least 2 shards"));
                }
                if !self.p_adv.is_zero() {
                    need_per_shard(self.adv_batch(), "p_adv", "adversarial sub-batch")?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    SynthBlobs,
    SynthPatterns,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_size: usize,
    pub test_size: usize,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub separation: f64,
    pub seed: u64,
    /// Generator parameters for `synth_patterns`.
    pub patterns: PatternParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::SynthPatterns,
            train_size: 10_000,
            test_size: 2_000,
            classes: 10,
            channels: 1,
            height: 16,
            width: 16,
            separation: 1.0,
            seed: 1,
            patterns: PatternParams::default(),
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub conv_channels: Vec<usize>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![8, 16],
            bn_momentum: DEFAULT_BN_MOMENTUM,
            bn_eps: DEFAULT_BN_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Run the corruption suite on the test split after training.
    pub corruptions: bool,
    pub corruption_seed: u64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            corruptions: true,
            corruption_seed: 2024,
            batch_size: 250,
        }
    }
}

/// Full experiment file: the `TrainConfig` fields at top level plus
/// `[attack]`, `[data]`, `[model]` and `[eval]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub precision: Precision,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            precision: Precision::F32,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn net_spec(&self, in_channels: usize, height: usize, width: usize, classes: usize) -> NetSpec {
        NetSpec {
            in_channels,
            height,
            width,
            classes,
            conv_channels: self.model.conv_channels.clone(),
            bn_momentum: self.model.bn_momentum,
            bn_eps: self.model.bn_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval.batch_size == 0 {
            return Err(Error::config("eval.batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.model.bn_momentum) || self.model.bn_momentum == 0.0 {
            return Err(Error::config("model.bn_momentum", "must be in (0, 1)"));
        }
        if self.data.source == DataSource::Idx
            && (self.data.train_images.is_none() || self.data.train_labels.is_none())
        {
            return Err(Error::config(
                "data.train_images",
                "idx source needs train_images and train_labels",
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses TOML text, applies `overrides` (dotted field → raw value), and
    /// validates. Unknown fields are rejected with their full path.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        for (key, raw) in overrides {
            set_dotted(&mut table, key, parse_value(raw))?;
        }
        if table.get("mode").and_then(|m| m.as_str()) == Some("advprop") {
            // Baseline attack unless the file says otherwise: targeted PGD-5.
            if let Some(attack) = table
                .entry("attack")
                .or_insert_with(|| toml::Value::Table(Default::default()))
                .as_table_mut()
            {
                attack.entry("steps").or_insert(toml::Value::Integer(5));
                attack.entry("targeted").or_insert(toml::Value::Boolean(true));
            }
        }
        let schema: toml::Table = toml::Table::try_from(ExperimentConfig::default()).expect("config serializes");
        if let Some(unknown) = unknown_key(&table, &schema, "") {
            return Err(Error::config(unknown, "unknown field"));
        }
        let cfg: ExperimentConfig = ExperimentConfig::deserialize(table)
            .map_err(|e| Error::config(field_of(&e), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_toml_with(&text, overrides)
    }
}

fn field_of(e: &toml::de::Error) -> String {
    let msg = e.message();
    msg.split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<file>".into())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| {
        Error::config(key, "empty override name")
    })?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn unknown_key(input: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    for (k, v) in input {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (v, known.get(k)) {
            (_, None) => {
                // Optional fields are omitted when unset; only flag names
                // the schema does not know at all.
                if !OPTIONAL_KEYS.contains(&path.as_str()) {
                    return Some(path);
                }
            }
            (toml::Value::Table(a), Some(toml::Value::Table(b))) => {
                if let Some(p) = unknown_key(a, b, &path) {
                    return Some(p);
                }
            }
            _ => {}
        }
    }
    None
}

const OPTIONAL_KEYS: &[&str] = &[
    "attack.step_size",
    "data.train_images",
    "data.train_labels",
    "data.test_images",
    "data.test_labels",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advprop_mode_defaults_to_targeted_pgd5() {
        let o = |k: &str, v: &str| (k.to_string(), v.to_string());
        let cfg = ExperimentConfig::from_toml_with("mode = \"advprop\"", &[]).unwrap();
        assert_eq!(cfg.train.attack, TrainConfig::advprop(5).attack);
        let cfg = ExperimentConfig::from_toml_with("", &[o("mode", "advprop"), o("attack.steps", "1")]).unwrap();
        assert_eq!((cfg.train.attack.steps, cfg.train.attack.targeted), (1, true));
        let cfg = ExperimentConfig::from_toml_with("mode = \"advprop\"\n[attack]\ntargeted = false", &[]).unwrap();
        assert_eq!((cfg.train.attack.steps, cfg.train.attack.targeted), (5, false));
        let cfg = ExperimentConfig::from_toml_with("mode = \"fast\"", &[]).unwrap();
        assert_eq!((cfg.train.attack.steps, cfg.train.attack.targeted), (1, false));
    }

    #[test]
    fn p_adv_parsing_is_exact() {
        assert_eq!("0.2".parse::<PAdv>().unwrap(), PAdv::new(1, 5).unwrap());
        assert_eq!("1/9".parse::<PAdv>().unwrap(), PAdv::new(1, 9).unwrap());
        assert_eq!("0.11".parse::<PAdv>().unwrap(), PAdv::new(11, 100).unwrap());
        assert_eq!("1".parse::<PAdv>().unwrap(), PAdv::new(1, 1).unwrap());
        assert!("1.5".parse::<PAdv>().is_err());
        assert!("abc".parse::<PAdv>().is_err());
        assert!("-0.1".parse::<PAdv>().is_err());
    }

    #[test]
    fn batch_sizing_follows_clean_sub_batch() {
        let mut c = TrainConfig::fast();
        for (p, total, adv) in [((1, 5), 80, 16), ((1, 9), 72, 8), ((1, 3), 96, 32), ((1, 2), 128, 64)] {
            c.p_adv = PAdv::new(p.0, p.1).unwrap();
            assert_eq!(c.total_batch(), total);
            assert_eq!(c.adv_batch(), adv);
            c.validate().unwrap();
        }
        c.p_adv = PAdv::new(1, 7).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn fast_mode_invariants() {
        let mut c = TrainConfig::fast();
        c.attack.steps = 2;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::fast();
        c.attack.targeted = true;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::fast();
        c.shards = 1;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "shuffle_bn"));
        let mut c = TrainConfig::fast();
        c.p_adv = PAdv::zero();
        assert!(c.validate().is_err());
        c.sync_update_speed = false;
        c.validate().unwrap();
        TrainConfig::vanilla().validate().unwrap();
        TrainConfig::advprop(5).validate().unwrap();
    }

    #[test]
    fn toml_overrides_and_unknown_fields() {
        let cfg = ExperimentConfig::from_toml_with(
            "mode = \"fast\"\np_adv = 0.2\n[attack]\nepsilon = 0.01\n",
            &[
                ("base_epochs".into(), "7".into()),
                ("attack.random_init".into(), "false".into()),
                ("p_adv".into(), "1/9".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.base_epochs, 7);
        assert!(!cfg.train.attack.random_init);
        assert_eq!(cfg.train.attack.epsilon, 0.01);
        assert_eq!(cfg.train.p_adv, PAdv::new(1, 9).unwrap());

        let err = ExperimentConfig::from_toml_with("bogus = 1\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config { field, .. } if field == "bogus"));
        let err = ExperimentConfig::from_toml_with("[attack]\nepsilom = 1\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config { field, .. } if field.contains("epsilom")));
        let err = ExperimentConfig::from_toml_with("lr = -1.0\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config { field, .. } if field == "lr"));
    }

    #[test]
    fn serialized_config_round_trips() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_with(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
    }
}
