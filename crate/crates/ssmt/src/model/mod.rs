//! The full network: hybrid encoder, dual query decoders, and auxiliary
//! heads behind one parameter store and a single forward entry point.

pub mod decoder;
pub mod encoder;
pub mod heads;
pub mod params;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SsmtError};
use params::{Binding, ParamStore};
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters. The CNN branch always halves resolution
/// per stage and its stage count must land the coarsest map exactly on the
/// token grid, so `cnn_channels.len()` is tied to `log2(patch)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d_enc: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub cnn_channels: Vec<usize>,
    pub d_dec: usize,
    pub queries: usize,
    pub refine_iters: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk(64, 8)
    }
}

impl ModelConfig {
    /// Desk-scale defaults for a given canvas and patch size.
    pub fn desk(image_size: usize, patch: usize) -> Self {
        let stages = patch.trailing_zeros() as usize;
        ModelConfig {
            image_size,
            patch,
            d_enc: 32,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            cnn_channels: (0..stages).map(|i| 8 << i).collect(),
            d_dec: 32,
            queries: 4,
            refine_iters: 3,
        }
    }

    /// Token grid side length.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SsmtError::Config(msg));
        if self.patch < 2 || !self.patch.is_power_of_two() {
            return fail(format!("patch must be a power of two >= 2, got {}", self.patch));
        }
        if self.image_size == 0 || self.image_size % self.patch != 0 {
            return fail(format!(
                "image_size {} not divisible by patch {}",
                self.image_size, self.patch
            ));
        }
        if self.heads == 0 || self.d_enc % self.heads != 0 {
            return fail(format!(
                "d_enc {} not divisible by heads {}",
                self.d_enc, self.heads
            ));
        }
        let stages = self.patch.trailing_zeros() as usize;
        if self.cnn_channels.len() != stages {
            return fail(format!(
                "cnn_channels needs {} stages for patch {} so the coarsest map sits on the token grid, got {}",
                stages,
                self.patch,
                self.cnn_channels.len()
            ));
        }
        if self.cnn_channels.iter().any(|&c| c == 0) {
            return fail("cnn_channels must be positive".to_string());
        }
        if self.layers == 0 || self.mlp_ratio == 0 {
            return fail("layers and mlp_ratio must be at least 1".to_string());
        }
        if self.d_dec == 0 || self.queries == 0 || self.refine_iters == 0 {
            return fail("d_dec, queries, refine_iters must be at least 1".to_string());
        }
        Ok(())
    }
}

/// Which heads a forward pass materializes. The nodule decoder is the
/// primary task; the rest can be ablated or phase-disabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSet {
    pub nodule: bool,
    pub gland: bool,
    pub size: bool,
    pub recon: bool,
}

impl TaskSet {
    pub fn all() -> Self {
        TaskSet {
            nodule: true,
            gland: true,
            size: true,
            recon: true,
        }
    }

    /// Phase 1 trains reconstruction only.
    pub fn pretrain() -> Self {
        TaskSet {
            nodule: false,
            gland: false,
            size: false,
            recon: true,
        }
    }
}

/// One sample's forward products; absent heads were not materialized.
pub struct ForwardOut {
    pub encoder: encoder::EncoderOut,
    pub nodule: Option<decoder::DecoderOut>,
    pub gland: Option<decoder::DecoderOut>,
    pub size_pred: Option<Var>,
    pub recon: Option<Var>,
}

/// Model = config + named parameters.
#[derive(Debug, Clone)]
pub struct SsmtModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

impl SsmtModel {
    /// Validate the config and initialize every parameter (including heads
    /// that later phases may freeze or ablate, so checkpoints are total).
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        encoder::register(&cfg, seed, &mut store)?;
        decoder::register(&cfg, seed, &mut store)?;
        heads::register(&cfg, seed, &mut store)?;
        Ok(SsmtModel { cfg, store })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &mut Binding,
        image: &[f32],
        tasks: TaskSet,
    ) -> Result<ForwardOut> {
        let enc = encoder::encode(tape, b, &self.cfg, image)?;
        let nodule = if tasks.nodule {
            Some(decoder::decode(tape, b, &self.cfg, &enc, decoder::BranchId::Nodule)?)
        } else {
            None
        };
        let gland = if tasks.gland {
            Some(decoder::decode(tape, b, &self.cfg, &enc, decoder::BranchId::Gland)?)
        } else {
            None
        };
        let size_pred = if tasks.size {
            Some(heads::predict_size(tape, b, enc.pooled)?)
        } else {
            None
        };
        let recon = if tasks.recon {
            let coarsest = *enc.skips.last().expect("at least one CNN stage");
            Some(heads::reconstruct(tape, b, &self.cfg, enc.f_t, coarsest)?)
        } else {
            None
        };
        Ok(ForwardOut {
            encoder: enc,
            nodule,
            gland,
            size_pred,
            recon,
        })
    }
}

/// Phase-1 trainability: encoder and reconstruction head only.
pub fn pretrain_trainable(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("rec.")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    #[test]
    fn config_validation_catches_each_bad_field() {
        assert!(ModelConfig::desk(64, 8).validate().is_ok());
        let mut c = ModelConfig::desk(64, 8);
        c.patch = 6;
        assert!(c.validate().is_err(), "non power of two patch");
        let mut c = ModelConfig::desk(64, 8);
        c.image_size = 60;
        assert!(c.validate().is_err(), "indivisible size");
        let mut c = ModelConfig::desk(64, 8);
        c.heads = 5;
        assert!(c.validate().is_err(), "heads must divide d_enc");
        let mut c = ModelConfig::desk(64, 8);
        c.cnn_channels = vec![8, 16];
        assert!(c.validate().is_err(), "stage count tied to patch");
        let mut c = ModelConfig::desk(64, 8);
        c.refine_iters = 0;
        assert!(c.validate().is_err(), "at least one refinement");
    }

    #[test]
    fn full_forward_produces_all_heads_with_expected_shapes() {
        let model = SsmtModel::new(ModelConfig::desk(32, 4), 42).unwrap();
        let mut rng = rng_for(42, "img", &[]);
        let img: Vec<f32> = (0..32 * 32).map(|_| rng.random()).collect();
        let mut tape = Tape::new();
        let mut b = Binding::all_trainable(&model.store);
        let out = model.forward(&mut tape, &mut b, &img, TaskSet::all()).unwrap();
        let nod = out.nodule.unwrap();
        assert_eq!(tape.shape(nod.prob_out), [1, 32, 32]);
        assert_eq!(tape.shape(out.gland.unwrap().prob_out), [1, 32, 32]);
        assert_eq!(tape.shape(out.size_pred.unwrap()), [1, 1]);
        assert_eq!(tape.shape(out.recon.unwrap()), [1, 32, 32]);
        assert_eq!(nod.s_history.len(), model.cfg.refine_iters + 1);
        assert_eq!(nod.attn_history.len(), model.cfg.refine_iters);
    }

    #[test]
    fn pretrain_tasks_skip_every_supervised_head() {
        let model = SsmtModel::new(ModelConfig::desk(32, 4), 7).unwrap();
        let img = vec![0.25; 32 * 32];
        let mut tape = Tape::new();
        let mut b = Binding::all_trainable(&model.store);
        let out = model.forward(&mut tape, &mut b, &img, TaskSet::pretrain()).unwrap();
        assert!(out.nodule.is_none());
        assert!(out.gland.is_none());
        assert!(out.size_pred.is_none());
        assert!(out.recon.is_some());
        // no decoder or size parameter was ever bound
        assert!(b
            .bound()
            .all(|(n, _)| pretrain_trainable(n)));
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let model = SsmtModel::new(ModelConfig::desk(32, 4), 11).unwrap();
            let mut rng = rng_for(11, "img", &[]);
            let img: Vec<f32> = (0..32 * 32).map(|_| rng.random()).collect();
            let mut tape = Tape::new();
            let mut b = Binding::all_trainable(&model.store);
            let out = model.forward(&mut tape, &mut b, &img, TaskSet::all()).unwrap();
            tape.value(out.nodule.unwrap().prob_out).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
