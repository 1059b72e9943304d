//! Model configuration and the parameter bundle shared by every stage.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};
use crate::layers::{init_linear, register_final_norm, register_layer, ParamStore};

/// End-of-sequence text token.
pub const EOS: usize = 0;
/// Task-instruction token standing in for the prefix template.
pub const TASK: usize = 1;
/// Separator token standing in for the postfix template.
pub const SEP: usize = 2;
/// First id available to real text tokens.
pub const TEXT_BASE: usize = 3;

/// Hyperparameters for the full pipeline. Defaults follow the reference
/// configuration (320 ms chunks, 25x upsampling, 4-layer LM); the toy
/// training task shrinks several of them through its run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Input feature width per 20 ms frame.
    pub d_in: usize,
    pub enc_d_model: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    /// Frames per encoder chunk (default 32 = 640 ms of new input per read
    /// at 20 ms frames, i.e. a 320 ms average theoretical latency).
    pub chunk_frames: usize,
    /// Duration of one feature frame in milliseconds.
    pub frame_ms: u64,
    /// Frames stacked per prompt in the boundary-unaware baseline.
    pub stack_group: usize,
    pub lm_d_model: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    /// Text vocabulary including the 3 special tokens.
    pub text_vocab: usize,
    /// Maximum decoder layout length (prefix + prompts + postfix + generated).
    pub max_positions: usize,
    pub gen_d_model: usize,
    pub gen_layers: usize,
    pub gen_heads: usize,
    /// Speech-unit vocabulary (excluding the CTC blank).
    pub unit_vocab: usize,
    /// Upsampling rate U: speech frames generated per LM token.
    pub upsample: usize,
    /// Fixed template token ids surrounding the speech prompt.
    pub prefix_ids: Vec<usize>,
    pub postfix_ids: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 16,
            enc_d_model: 32,
            enc_layers: 2,
            enc_heads: 2,
            chunk_frames: 32,
            frame_ms: 20,
            stack_group: 16,
            lm_d_model: 64,
            lm_layers: 4,
            lm_heads: 4,
            text_vocab: 32,
            max_positions: 128,
            gen_d_model: 64,
            gen_layers: 2,
            gen_heads: 4,
            unit_vocab: 16,
            upsample: 25,
            prefix_ids: vec![TASK],
            postfix_ids: vec![SEP],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(PipelineError::Config(msg.to_string()))
            }
        };
        check(self.d_in >= 1, "d_in must be >= 1")?;
        check(self.enc_d_model >= 2, "encoder width must be >= 2 (one dim feeds the firing weight)")?;
        check(
            self.enc_d_model % self.enc_heads == 0,
            "encoder width must divide evenly into heads",
        )?;
        check(
            self.lm_d_model % self.lm_heads == 0,
            "LM width must divide evenly into heads",
        )?;
        check(
            self.gen_d_model % self.gen_heads == 0,
            "generator width must divide evenly into heads",
        )?;
        check(self.chunk_frames >= 1, "chunk_frames must be >= 1")?;
        check(self.stack_group >= 1, "stack_group must be >= 1")?;
        check(self.upsample >= 1, "upsample rate must be >= 1")?;
        check(self.unit_vocab >= 1, "unit vocabulary must be non-empty")?;
        check(
            self.text_vocab > TEXT_BASE,
            "text vocabulary must include at least one real token",
        )?;
        check(
            self.prefix_ids.iter().chain(&self.postfix_ids).all(|&t| t < self.text_vocab),
            "template token out of vocabulary range",
        )?;
        check(self.frame_ms >= 1, "frame_ms must be >= 1")?;
        Ok(())
    }

    /// Width of the CTC output row: units plus blank (index 0).
    pub fn ctc_width(&self) -> usize {
        self.unit_vocab + 1
    }

    /// CIF carry width: encoder output minus the firing-weight dimension.
    pub fn carry_dim(&self) -> usize {
        self.enc_d_model - 1
    }
}

/// Full parameter bundle. Construction registers every module's weights so a
/// stage-1 checkpoint already contains the (still untrained) stage-2
/// parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

/// Config plus bound parameters — what forward passes actually consume.
pub struct ModelView<'a> {
    pub cfg: &'a ModelConfig,
    pub p: crate::layers::Scoped<'a>,
}

/// Scope prefixes trained in stage 1 (boundary-aware mode).
pub const STAGE1_SCOPES_CIF: &[&str] = &["enc.", "cif.", "lm."];
/// Scope prefixes trained in stage 1 (stack-16 baseline mode).
pub const STAGE1_SCOPES_STACK: &[&str] = &["enc.", "stack.", "lm."];
/// Scope prefixes trained in stage 2 (both modes).
pub const STAGE2_SCOPES: &[&str] = &["fuse.", "gen."];

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (de, dl, dg) = (cfg.enc_d_model, cfg.lm_d_model, cfg.gen_d_model);

        p.add("enc.in.w", &[cfg.d_in, de], init_linear(&mut rng, cfg.d_in, de));
        p.add("enc.in.b", &[de], vec![0.0; de]);
        for l in 0..cfg.enc_layers {
            register_layer(&mut p, &mut rng, &format!("enc.l{l}"), de);
        }
        register_final_norm(&mut p, "enc", de);

        let carry = cfg.carry_dim();
        p.add("cif.proj.w", &[carry, dl], init_linear(&mut rng, carry, dl));
        p.add("cif.proj.b", &[dl], vec![0.0; dl]);

        let stacked = cfg.stack_group * de;
        p.add("stack.proj.w", &[stacked, dl], init_linear(&mut rng, stacked, dl));
        p.add("stack.proj.b", &[dl], vec![0.0; dl]);

        p.add(
            "lm.emb",
            &[cfg.text_vocab, dl],
            init_linear(&mut rng, cfg.text_vocab, dl),
        );
        p.add(
            "lm.pos",
            &[cfg.max_positions, dl],
            init_linear(&mut rng, cfg.max_positions, dl),
        );
        for l in 0..cfg.lm_layers {
            register_layer(&mut p, &mut rng, &format!("lm.l{l}"), dl);
        }
        register_final_norm(&mut p, "lm", dl);
        p.add("lm.head.w", &[dl, cfg.text_vocab], init_linear(&mut rng, dl, cfg.text_vocab));
        p.add("lm.head.b", &[cfg.text_vocab], vec![0.0; cfg.text_vocab]);

        // Uniform fusion over LM layers at init.
        p.add("fuse.beta", &[cfg.lm_layers], vec![0.0; cfg.lm_layers]);

        p.add("gen.in.w", &[dl, dg], init_linear(&mut rng, dl, dg));
        p.add("gen.in.b", &[dg], vec![0.0; dg]);
        p.add("gen.pos", &[cfg.upsample, dg], init_linear(&mut rng, cfg.upsample, dg));
        for l in 0..cfg.gen_layers {
            register_layer(&mut p, &mut rng, &format!("gen.l{l}"), dg);
        }
        register_final_norm(&mut p, "gen", dg);
        let w = cfg.ctc_width();
        p.add("gen.head.w", &[dg, w], init_linear(&mut rng, dg, w));
        p.add("gen.head.b", &[w], vec![0.0; w]);

        Ok(Model { cfg, params: p })
    }

    /// Bind parameters (see [`ParamStore::bind`]) and wrap with the config.
    pub fn view<'a>(&'a self, bind: &'a crate::layers::PBind) -> ModelView<'a> {
        ModelView {
            cfg: &self.cfg,
            p: crate::layers::Scoped::new(&self.params, bind),
        }
    }

    /// Serialize parameters plus config and caller metadata.
    pub fn save(&self, path: &Path, extra_meta: serde_json::Value) -> Result<()> {
        let mut ck = self.params.to_checkpoint();
        ck.set_meta(serde_json::json!({
            "config": self.cfg,
            "extra": extra_meta,
        }));
        ck.save(path)?;
        Ok(())
    }

    /// Load a checkpoint written by [`Model::save`]; returns the caller
    /// metadata alongside the model.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let ck = tinytensor::Checkpoint64::load(path)
            .map_err(|e| PipelineError::Data(format!("checkpoint {}: {e}", path.display())))?;
        let cfg: ModelConfig = serde_json::from_value(ck.meta()["config"].clone())
            .map_err(|e| PipelineError::Data(format!("checkpoint config: {e}")))?;
        cfg.validate()?;
        let loaded = ParamStore::from_checkpoint(&ck)?;
        // Re-register under the config to verify the shape layout, then copy.
        let mut model = Model::new(cfg, 0)?;
        model.params.load_values(&loaded)?;
        Ok((model, ck.meta()["extra"].clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.enc_heads = 3; // 32 % 3 != 0
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.chunk_frames = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.prefix_ids = vec![999];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::new(ModelConfig::default(), 3).unwrap();
        let b = Model::new(ModelConfig::default(), 3).unwrap();
        for name in a.params.names() {
            assert_eq!(a.params.value(name), b.params.value(name), "{name}");
        }
        let c = Model::new(ModelConfig::default(), 4).unwrap();
        assert_ne!(a.params.value("lm.emb"), c.params.value("lm.emb"));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::new(ModelConfig::default(), 9).unwrap();
        model
            .save(&path, serde_json::json!({"stage": 1}))
            .unwrap();
        let (back, meta) = Model::load(&path).unwrap();
        assert_eq!(meta["stage"], 1);
        assert_eq!(back.cfg, model.cfg);
        for name in model.params.names() {
            assert_eq!(model.params.value(name), back.params.value(name), "{name}");
        }
    }
}
