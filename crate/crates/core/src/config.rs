//! Run configuration: flat `key = value` text, overridable key by key.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::DatasetConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::loss::{LossConfig, Reduction};
use crate::model::EncoderSharing;
use crate::retrieval::ScoreMode;
use crate::tensor::{AdamConfig, Precision};
use crate::weighting::{WeightLevels, WeightMode};

/// Which components of the training objective are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Ablation {
    /// No weighting, triplet loss.
    Base,
    /// Local weights only, triplet loss.
    NoGlobalNoQuad,
    /// Local weights only, quadruplet loss.
    NoGlobal,
    /// Local and global weights, quadruplet loss.
    #[default]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Base, Ablation::NoGlobalNoQuad, Ablation::NoGlobal, Ablation::Full];

    pub fn levels(self) -> WeightLevels {
        match self {
            Ablation::Base => WeightLevels::NONE,
            Ablation::NoGlobalNoQuad | Ablation::NoGlobal => WeightLevels {
                local: true,
                global: false,
            },
            Ablation::Full => WeightLevels::ALL,
        }
    }

    pub fn domain_term(self) -> bool {
        matches!(self, Ablation::NoGlobal | Ablation::Full)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Base => "base",
            Ablation::NoGlobalNoQuad => "no-g-q",
            Ablation::NoGlobal => "no-g",
            Ablation::Full => "full",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?} (expected base, no-g-q, no-g or full)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub dataset: DatasetConfig,
    pub weight_mode: WeightMode,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Dataset directory for training and evaluation.
    pub data: PathBuf,
    pub adam: AdamConfig,
    pub ablation: Ablation,
    pub precision: Precision,
    pub encoder_sharing: EncoderSharing,
    pub strict_zs: bool,
    pub score_mode: ScoreMode,
    pub k_list: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            dataset: DatasetConfig::default(),
            weight_mode: WeightMode::default(),
            batch_size: 16,
            epochs: 30,
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: PathBuf::from("data"),
            adam: AdamConfig {
                lr: 3e-4,
                ..AdamConfig::default()
            },
            ablation: Ablation::default(),
            precision: Precision::F32,
            encoder_sharing: EncoderSharing::default(),
            strict_zs: false,
            score_mode: ScoreMode::default(),
            k_list: vec![100, 200],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key}"))),
    }
}

impl RunConfig {
    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "grid" => {
                self.encoder.grid = parse(key, v)?;
                self.dataset.grid = self.encoder.grid;
            }
            "patch" => self.encoder.patch = parse(key, v)?,
            "d" => self.encoder.d = parse(key, v)?,
            "layers" => self.encoder.layers = parse(key, v)?,
            "heads" => self.encoder.heads = parse(key, v)?,
            "d_text" => self.encoder.d_text = parse(key, v)?,
            "alpha" => self.loss.alpha = parse(key, v)?,
            "beta" => self.loss.beta = parse(key, v)?,
            "reduction" => {
                self.loss.reduction = match v {
                    "sum" => Reduction::Sum,
                    "mean" => Reduction::Mean,
                    _ => return Err(Error::Config(format!("invalid value {v:?} for reduction"))),
                }
            }
            "num_classes" => self.dataset.num_classes = parse(key, v)?,
            "seen_classes" => self.dataset.seen_classes = parse(key, v)?,
            "samples_per_class_train" => self.dataset.samples_per_class_train = parse(key, v)?,
            "gallery_per_class_test" => self.dataset.gallery_per_class_test = parse(key, v)?,
            "queries_per_class_test" => self.dataset.queries_per_class_test = parse(key, v)?,
            "corruption_rate" => self.dataset.corruption_rate = parse(key, v)?,
            "weight_mode" => self.weight_mode = v.parse()?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "data" => self.data = PathBuf::from(v),
            "lr" => self.adam.lr = parse(key, v)?,
            "weight_decay" => self.adam.weight_decay = parse(key, v)?,
            "ablation" => self.ablation = v.parse()?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("invalid value {v:?} for precision"))),
                }
            }
            "encoder_sharing" => self.encoder_sharing = v.parse()?,
            "strict_zs" => self.strict_zs = parse_bool(key, v)?,
            "mode" | "score_mode" => self.score_mode = v.parse()?,
            "k_list" => {
                self.k_list = v
                    .split(',')
                    .map(|k| parse::<usize>(key, k.trim()))
                    .collect::<Result<_>>()?
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.encoder.grid != self.dataset.grid {
            return Err(Error::Config(format!(
                "encoder grid {} differs from dataset grid {}",
                self.encoder.grid, self.dataset.grid
            )));
        }
        if self.k_list.contains(&0) {
            return Err(Error::Config("k_list entries must be positive".into()));
        }
        Ok(())
    }

    /// Text form accepted by [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let e = &self.encoder;
        let ds = &self.dataset;
        let k: Vec<String> = self.k_list.iter().map(|k| k.to_string()).collect();
        let lines = [
            ("grid", e.grid.to_string()),
            ("patch", e.patch.to_string()),
            ("d", e.d.to_string()),
            ("layers", e.layers.to_string()),
            ("heads", e.heads.to_string()),
            ("d_text", e.d_text.to_string()),
            ("alpha", self.loss.alpha.to_string()),
            ("beta", self.loss.beta.to_string()),
            (
                "reduction",
                match self.loss.reduction {
                    Reduction::Sum => "sum",
                    Reduction::Mean => "mean",
                }
                .to_string(),
            ),
            ("num_classes", ds.num_classes.to_string()),
            ("seen_classes", ds.seen_classes.to_string()),
            ("samples_per_class_train", ds.samples_per_class_train.to_string()),
            ("gallery_per_class_test", ds.gallery_per_class_test.to_string()),
            ("queries_per_class_test", ds.queries_per_class_test.to_string()),
            ("corruption_rate", ds.corruption_rate.to_string()),
            ("weight_mode", self.weight_mode.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("data", self.data.display().to_string()),
            ("lr", self.adam.lr.to_string()),
            ("weight_decay", self.adam.weight_decay.to_string()),
            ("ablation", self.ablation.to_string()),
            (
                "precision",
                match self.precision {
                    Precision::F32 => "f32",
                    Precision::F64 => "f64",
                }
                .to_string(),
            ),
            ("encoder_sharing", self.encoder_sharing.to_string()),
            ("strict_zs", self.strict_zs.to_string()),
            ("score_mode", self.score_mode.to_string()),
            ("k_list", k.join(",")),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\nd = 32\nheads = 2 # inline\nablation = no-g\nprecision = f64\nk_list = 5, 10\n")
            .unwrap();
        assert_eq!(cfg.encoder.d, 32);
        assert_eq!(cfg.ablation, Ablation::NoGlobal);
        assert_eq!(cfg.k_list, vec![5, 10]);
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        let mut cfg = RunConfig::default();
        for text in ["nonsense", "colour = red", "d = wide", "ablation = most"] {
            assert!(matches!(cfg.apply_text(text), Err(Error::Config(_))), "{text}");
        }
        cfg.batch_size = 1;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn ablations_map_to_distinct_components() {
        let tuples: Vec<_> = Ablation::ALL.iter().map(|a| (a.levels(), a.domain_term())).collect();
        for i in 0..tuples.len() {
            for j in i + 1..tuples.len() {
                assert_ne!(tuples[i], tuples[j]);
            }
        }
        assert_eq!(Ablation::Base.levels(), WeightLevels::NONE);
        assert!(!Ablation::Base.domain_term());
        assert_eq!("no-g-q".parse::<Ablation>().unwrap(), Ablation::NoGlobalNoQuad);
    }
}
