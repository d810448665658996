//! The full pipeline: frames to visual tokens, attribute sentences to text
//! tokens, fusion, and per-class logits.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{ClassHeads, FusionConfig, FusionStack};
use crate::tensor::{checkpoint, ParamStore, Scalar, Tape, Tensor, Var};
use crate::text::{AttributeSchema, PromptBank, TextConfig, TextEncoder};
use crate::vision::{Frame, VisionEncoder, VitConfig};

/// Prefixes of the parameters that stay fixed under the freeze policy.
pub const ENCODER_PREFIXES: [&str; 2] = ["vision.", "text."];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vision: VitConfig,
    pub text: TextConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        let d = self.vision.dim;
        if self.text.heads == 0 || d % self.text.heads != 0 {
            return Err(Error::Usage(format!("dim {d} is not divisible by {} text heads", self.text.heads)));
        }
        if self.text.max_len < 3 {
            return Err(Error::Usage("text max_len must be at least 3".into()));
        }
        if self.text.mlp_ratio == 0 {
            return Err(Error::Usage("text mlp_ratio must be at least 1".into()));
        }
        self.fusion.validate(d)
    }

    pub fn dim(&self) -> usize {
        self.vision.dim
    }
}

/// Model structure plus its parameter values.
#[derive(Debug, Clone)]
pub struct VtfModel<T> {
    pub config: ModelConfig,
    pub schema: AttributeSchema,
    pub prompts: PromptBank,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub fusion: FusionStack,
    pub heads: ClassHeads,
    pub params: ParamStore<T>,
}

impl<T: Scalar> VtfModel<T> {
    /// Randomly initialised model; encoders start frozen.
    pub fn new(config: ModelConfig, schema: AttributeSchema, seed: u64) -> Result<Self> {
        config.validate()?;
        let prompts = PromptBank::new(&schema, config.text.max_len)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.dim();
        let vision = VisionEncoder::new(&mut params, config.vision, &mut rng)?;
        let text = TextEncoder::new(&mut params, &config.text, prompts.vocab.len(), d, &mut rng)?;
        let fusion = FusionStack::new(&mut params, &config.fusion, d, &mut rng)?;
        let heads = ClassHeads::new(&mut params, schema.class_count(), d, &mut rng)?;
        let mut model = VtfModel {
            config,
            schema,
            prompts,
            vision,
            text,
            fusion,
            heads,
            params,
        };
        model.freeze_encoders(true);
        Ok(model)
    }

    pub fn freeze_encoders(&mut self, frozen: bool) {
        for prefix in ENCODER_PREFIXES {
            self.params.set_trainable(prefix, !frozen);
        }
    }

    pub fn encoders_frozen(&self) -> bool {
        self.params
            .iter()
            .filter(|(_, p)| ENCODER_PREFIXES.iter().any(|pre| p.name.starts_with(pre)))
            .all(|(_, p)| !p.trainable)
    }

    pub fn class_count(&self) -> usize {
        self.schema.class_count()
    }

    /// `F_v [N_v, D]` on the tape from a stack of frame patches
    /// `[T, patches, P*P*3]`.
    pub fn visual_tokens(&self, tape: &mut Tape<T>, patches: Var) -> Result<Var> {
        let per_frame = self.vision.forward(tape, &self.params, patches)?;
        tape.mean_axis(per_frame, 0)
    }

    /// `F_t [C, D]` on the tape.
    pub fn text_tokens(&self, tape: &mut Tape<T>) -> Result<Var> {
        self.text.embed(tape, &self.params, &self.prompts)
    }

    /// Concatenates `F_v` and `F_t`, runs the fusion stack and the heads.
    /// Returns logits `[C]`.
    pub fn head_logits(&self, tape: &mut Tape<T>, visual: Var, text: Var, trace: Option<&mut Vec<Var>>) -> Result<Var> {
        let nv = tape.shape(visual)[0];
        let m = tape.shape(text)[0];
        if m != self.class_count() {
            return Err(Error::ModelMismatch(format!(
                "model has {} class heads but {m} text tokens were given",
                self.class_count()
            )));
        }
        let d = self.config.dim();
        let x = tape.concat(&[visual, text], 0)?;
        let x = tape.reshape(x, &[1, nv + m, d])?;
        let x = self.fusion.forward(tape, &self.params, x, trace)?;
        let logits = self.heads.forward(tape, &self.params, x, nv)?;
        tape.reshape(logits, &[m])
    }

    /// Patch stacks for a tracklet's frames.
    pub fn prepare(&self, frames: &[&Frame]) -> Result<Tensor<T>> {
        self.vision.prepare(frames)
    }

    /// Full forward pass on a tape, from prepared patches to logits `[C]`.
    pub fn logits_on_tape(&self, tape: &mut Tape<T>, patches: &Tensor<T>, trace: Option<&mut Vec<Var>>) -> Result<Var> {
        let p = tape.constant(patches.clone());
        let visual = self.visual_tokens(tape, p)?;
        let text = self.text_tokens(tape)?;
        self.head_logits(tape, visual, text, trace)
    }

    pub fn encode_visual(&self, frames: &[&Frame]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = tape.constant(self.prepare(frames)?);
        let v = self.visual_tokens(&mut tape, p)?;
        Ok(tape.value(v).clone())
    }

    pub fn encode_text(&self) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let v = self.text_tokens(&mut tape)?;
        Ok(tape.value(v).clone())
    }

    /// Logits from precomputed `F_v` and `F_t`.
    pub fn logits_from_tokens(&self, visual: &Tensor<T>, text: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let v = tape.constant(visual.clone());
        let t = tape.constant(text.clone());
        let y = self.head_logits(&mut tape, v, t, None)?;
        Ok(tape.value(y).clone())
    }

    pub fn forward(&self, frames: &[&Frame]) -> Result<Tensor<T>> {
        let visual = self.encode_visual(frames)?;
        let text = self.encode_text()?;
        self.logits_from_tokens(&visual, &text)
    }

    /// Logits plus every fusion attention map `[1, heads, n, n]`, block by
    /// block.
    pub fn forward_with_attention(&self, frames: &[&Frame]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let patches = self.prepare(frames)?;
        let mut trace = Vec::new();
        let y = self.logits_on_tape(&mut tape, &patches, Some(&mut trace))?;
        let maps = trace.iter().map(|&v| tape.value(v).clone()).collect();
        Ok((tape.value(y).clone(), maps))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.params, path)
    }

    /// Overwrites parameters from a checkpoint; names and shapes must match.
    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        let values: BTreeMap<String, Tensor<f32>> = checkpoint::load(path)?;
        self.params.assign(&values)
    }

    /// Same structure and values in another precision.
    pub fn cast<U: Scalar>(&self) -> VtfModel<U> {
        VtfModel {
            config: self.config,
            schema: self.schema.clone(),
            prompts: self.prompts.clone(),
            vision: self.vision.clone(),
            text: self.text.clone(),
            fusion: self.fusion.clone(),
            heads: self.heads.clone(),
            params: self.params.cast(),
        }
    }
}
