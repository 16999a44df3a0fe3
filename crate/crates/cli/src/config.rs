//! The run configuration: one TOML file with `[gen]`, `[model]` and
//! `[train]` sections. Command-line flags override file values.

use std::path::Path;

use anyhow::{Context, Result};
use formgraph::mmpan::ModelConfig;
use formgraph::patcher::Step;
use formgraph::synthgen::GenConfig;
use formgraph::trainer::TrainConfig;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Seeds both the generator and training when set.
    pub seed: Option<u64>,
    pub gen: GenConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
}

/// A preset plus optional size overrides.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    pub k1: Option<usize>,
    pub k2: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub fc_c: Option<usize>,
    pub text_embed_dim: Option<usize>,
    pub te_hidden: Option<usize>,
    pub te_out: Option<usize>,
    pub ce_hidden: Option<usize>,
    pub sam_hidden: Option<usize>,
    pub attn_size: Option<usize>,
    pub row_eps: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "desk".into(),
            k1: None,
            k2: None,
            height: None,
            width: None,
            fc_c: None,
            text_embed_dim: None,
            te_hidden: None,
            te_out: None,
            ce_hidden: None,
            sam_hidden: None,
            attn_size: None,
            row_eps: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, preset: Option<&str>, step: Step) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(preset.unwrap_or(&self.preset), step)?;
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut cfg.k1, self.k1);
        set(&mut cfg.k2, self.k2);
        set(&mut cfg.height, self.height);
        set(&mut cfg.width, self.width);
        set(&mut cfg.fc_c, self.fc_c);
        set(&mut cfg.text_embed_dim, self.text_embed_dim);
        set(&mut cfg.te_hidden, self.te_hidden);
        set(&mut cfg.te_out, self.te_out);
        set(&mut cfg.ce_hidden, self.ce_hidden);
        set(&mut cfg.sam_hidden, self.sam_hidden);
        set(&mut cfg.attn_size, self.attn_size);
        if let Some(eps) = self.row_eps {
            cfg.row_eps = eps;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<CliConfig> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text)
                    .map_err(|e| anyhow::anyhow!("{}", e.message()))
                    .with_context(|| format!("config {}", p.display()))?
            }
            None => CliConfig::default(),
        };
        if let Some(s) = seed.or(cfg.seed) {
            cfg.seed = Some(s);
            cfg.gen.seed = s;
            cfg.train.seed = s;
        }
        cfg.gen.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_parse_and_seed_spreads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "seed = 4\n[gen]\npages = 3\nfields_per_page = [1, 2]\n[model]\npreset = \"desk\"\nfc_c = 32\n[train]\nlr = 0.001\n",
        )
        .unwrap();
        let cfg = CliConfig::load(Some(&path), None).unwrap();
        assert_eq!((cfg.gen.pages, cfg.gen.seed, cfg.train.seed), (3, 4, 4));
        assert_eq!(cfg.model.resolve(None, Step::Step1).unwrap().fc_c, 32);
        assert_eq!(CliConfig::load(Some(&path), Some(9)).unwrap().gen.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for text in ["colour = 1\n", "[gen]\npagez = 1\n", "[model]\nlayers = 3\n", "[train]\nepochs = 2\n"] {
            let path = dir.path().join("c.toml");
            std::fs::write(&path, text).unwrap();
            assert!(CliConfig::load(Some(&path), None).is_err(), "{text}");
        }
    }
}
