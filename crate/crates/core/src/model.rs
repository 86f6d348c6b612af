//! The full set of trainable modules plus checkpoint files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::encoders::{Encoder, EncoderConfig, Modality, TextProvider, TokenSet, POSITION_LR_SCALE};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rng::SeedTree;
use crate::tensor::{io, Precision, Tensor};
use crate::weighting::CrossAttention;

/// Samples per inference batch; bounds tape memory during embedding.
const EMBED_CHUNK: usize = 32;

/// Which encoder parameters the sketch and image branches have in common.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum EncoderSharing {
    /// Two independent encoders.
    Separate,
    /// Own patch projections, shared positions, global token and blocks.
    #[default]
    Trunk,
    /// One encoder for both modalities.
    Full,
}

impl fmt::Display for EncoderSharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderSharing::Separate => "separate",
            EncoderSharing::Trunk => "trunk",
            EncoderSharing::Full => "full",
        })
    }
}

impl FromStr for EncoderSharing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separate" => Ok(EncoderSharing::Separate),
            "trunk" => Ok(EncoderSharing::Trunk),
            "full" => Ok(EncoderSharing::Full),
            other => Err(Error::Config(format!("unknown encoder sharing {other:?} (expected separate, trunk or full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    pub seen_classes: Vec<usize>,
    pub sharing: EncoderSharing,
}

impl ModelConfig {
    /// Flat `key = value` pairs, also used to diff checkpoints.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let e = &self.encoder;
        let seen: Vec<String> = self.seen_classes.iter().map(|c| c.to_string()).collect();
        [
            ("grid", e.grid.to_string()),
            ("patch", e.patch.to_string()),
            ("channels", e.channels.to_string()),
            ("d", e.d.to_string()),
            ("layers", e.layers.to_string()),
            ("heads", e.heads.to_string()),
            ("d_text", e.d_text.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("seen_classes", seen.join(",")),
            ("encoder_sharing", self.sharing.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub sketch: Encoder,
    /// Shares some or all parameter ids with `sketch`, per the config.
    pub image: Encoder,
    pub text: TextProvider,
    pub cross: CrossAttention,
}

impl Model {
    pub fn new(config: ModelConfig, seeds: &SeedTree) -> Result<Self> {
        config.encoder.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeds.stream("init");
        let (sketch, image) = match config.sharing {
            EncoderSharing::Separate => (
                Encoder::new(&mut store, "sketch", &config.encoder, &mut rng)?,
                Encoder::new(&mut store, "image", &config.encoder, &mut rng)?,
            ),
            EncoderSharing::Trunk => {
                let sketch = Encoder::with_trunk_name(&mut store, "sketch", "trunk", &config.encoder, &mut rng)?;
                let image = sketch.sharing_trunk(&mut store, "image", &mut rng);
                (sketch, image)
            }
            EncoderSharing::Full => {
                let encoder = Encoder::new(&mut store, "encoder", &config.encoder, &mut rng)?;
                (encoder.clone(), encoder)
            }
        };
        let text = TextProvider::new(&mut store, config.num_classes, &config.seen_classes, &config.encoder, &mut rng)?;
        let cross = CrossAttention::new(&mut store, config.encoder.d, config.encoder.heads, &mut rng);
        Ok(Self {
            config,
            store,
            sketch,
            image,
            text,
            cross,
        })
    }

    /// Per-parameter learning-rate multipliers, in store order.
    pub fn lr_scales(&self) -> Vec<f64> {
        let positions = [self.sketch.positions, self.image.positions];
        self.store
            .ids()
            .map(|id| if positions.contains(&id) { POSITION_LR_SCALE } else { 1.0 })
            .collect()
    }

    pub fn encoder(&self, modality: Modality) -> &Encoder {
        match modality {
            Modality::Image => &self.image,
            _ => &self.sketch,
        }
    }

    /// Uni-modal token sets for every sample, no gradient recorded.
    pub fn embed(&self, samples: &[&Tensor], modality: Modality, precision: Precision) -> Result<Vec<TokenSet>> {
        let encoder = self.encoder(modality);
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EMBED_CHUNK) {
            out.extend(encoder.encode_batch(&self.store, chunk, modality, precision)?);
        }
        Ok(out)
    }

    /// Writes `manifest` plus one tensor file per parameter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (k, v) in self.config.to_pairs() {
            manifest.push_str(&format!("{k} = {v}\n"));
        }
        for (name, t) in self.store.names().iter().zip(self.store.tensors()) {
            let shape: Vec<String> = t.shape().iter().map(|e| e.to_string()).collect();
            manifest.push_str(&format!("param {name} {}\n", shape.join("x")));
            io::save(t, &dir.join(format!("{name}.bin")))?;
        }
        fs::write(dir.join("manifest"), manifest)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`Model::save`]. The stored
    /// configuration must match `config`; differences are listed key by key.
    pub fn load(dir: &Path, config: ModelConfig) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest"))?;
        let mut stored = BTreeMap::new();
        for line in text.lines() {
            if line.starts_with("param ") {
                continue;
            }
            if let Some((k, v)) = line.split_once(" = ") {
                stored.insert(k.to_string(), v.to_string());
            }
        }
        let want = config.to_pairs();
        let diffs: Vec<String> = want
            .iter()
            .filter(|(k, v)| stored.get(*k) != Some(v))
            .map(|(k, v)| format!("{k}: run has {v}, checkpoint has {}", stored.get(k).map_or("<missing>", |s| s)))
            .collect();
        if !diffs.is_empty() {
            return Err(Error::Config(format!("checkpoint config differs: {}", diffs.join("; "))));
        }
        // Initial values are overwritten, so the seed is irrelevant.
        let mut model = Model::new(config, &SeedTree::new(0))?;
        let mut loaded = ParamStore::new();
        for name in model.store.names() {
            loaded.add(name.clone(), io::load(&dir.join(format!("{name}.bin")))?);
        }
        model.store.load_from(&loaded)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(sharing: EncoderSharing) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                grid: 8,
                patch: 4,
                channels: 1,
                d: 8,
                layers: 1,
                heads: 2,
                d_text: 4,
            },
            num_classes: 3,
            seen_classes: vec![0, 1],
            sharing,
        }
    }

    #[test]
    fn sharing_modes_share_the_right_parameters() {
        let full = Model::new(config(EncoderSharing::Full), &SeedTree::new(1)).unwrap();
        assert_eq!(full.sketch.patch_proj.weight, full.image.patch_proj.weight);
        let trunk = Model::new(config(EncoderSharing::Trunk), &SeedTree::new(1)).unwrap();
        assert_ne!(trunk.sketch.patch_proj.weight, trunk.image.patch_proj.weight);
        assert_eq!(trunk.sketch.positions, trunk.image.positions);
        assert_eq!(trunk.sketch.blocks[0].attn.wq, trunk.image.blocks[0].attn.wq);
        assert_eq!(trunk.store.name(trunk.image.patch_proj.weight), "image.patch_proj.weight");
        let separate = Model::new(config(EncoderSharing::Separate), &SeedTree::new(1)).unwrap();
        assert_ne!(separate.sketch.positions, separate.image.positions);
        assert!(separate.store.len() > trunk.store.len() && trunk.store.len() == full.store.len() + 2);
        for m in [&full, &trunk, &separate] {
            let scaled = m.lr_scales().iter().filter(|&&s| s != 1.0).count();
            assert_eq!(scaled, if m.config.sharing == EncoderSharing::Separate { 2 } else { 1 });
        }
        assert_eq!("trunk".parse::<EncoderSharing>().unwrap(), EncoderSharing::Trunk);
        assert!("both".parse::<EncoderSharing>().is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_config_diff() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::new(config(EncoderSharing::Separate), &SeedTree::new(2)).unwrap();
        m.store.round_to(Precision::F32);
        m.save(dir.path()).unwrap();
        let back = Model::load(dir.path(), config(EncoderSharing::Separate)).unwrap();
        assert_eq!(back.store.tensors(), m.store.tensors());

        let mut other = config(EncoderSharing::Separate);
        other.encoder.d = 16;
        other.encoder.heads = 4;
        let err = Model::load(dir.path(), other).unwrap_err().to_string();
        assert!(err.contains("d: run has 16, checkpoint has 8"), "{err}");
        assert!(!err.contains("heads: run has 2"), "{err}");
    }
}
