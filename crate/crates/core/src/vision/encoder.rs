use rand::Rng;
use serde::{Deserialize, Serialize};

use super::frame::{pad_to_square, patchify, standardize, Frame, CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, LayerNorm, Linear, TransformerBlock};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl VitConfig {
    /// CPU-sized encoder used for tests and experiments.
    pub fn desk() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 8,
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
        }
    }

    /// ViT-B/16 token geometry at 224x224 input.
    pub fn paper() -> Self {
        VitConfig {
            image_size: 224,
            patch_size: 16,
            dim: 512,
            depth: 12,
            heads: 8,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Usage(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Usage(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Usage("mlp_ratio must be at least 1".into()));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        let grid = self.image_size / self.patch_size;
        grid * grid
    }

    /// Patch tokens plus the class token.
    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn patch_values(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }
}

impl Default for VitConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Frame indices to keep when a tracklet has more than `budget` frames:
/// uniform stride starting at frame 0. Shorter tracklets keep every frame.
pub fn sample_frames(len: usize, budget: usize) -> Vec<usize> {
    if len <= budget {
        return (0..len).collect();
    }
    (0..budget).map(|i| i * len / budget).collect()
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub config: VitConfig,
    pub patch_embed: Linear,
    pub class_token: ParamId,
    pub position: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_post: LayerNorm,
}

impl VisionEncoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, config: VitConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let patch_embed = Linear::new(store, "vision.patch_embed", config.patch_values(), d, rng)?;
        let class_token = store.add("vision.class_token", normal_tensor(&[1, d], 0.02, rng), true)?;
        let position = store.add("vision.position", normal_tensor(&[config.tokens(), d], 0.01, rng), true)?;
        let blocks = (0..config.depth)
            .map(|i| TransformerBlock::new(store, &format!("vision.blocks.{i}"), d, config.heads, config.mlp_ratio, rng))
            .collect::<Result<_>>()?;
        Ok(VisionEncoder {
            config,
            patch_embed,
            class_token,
            position,
            blocks,
            ln_post: LayerNorm::new(store, "vision.ln_post", d)?,
        })
    }

    /// Pads every frame and stacks its standardised patches into
    /// `[T, patches, P*P*3]`.
    pub fn prepare<T: Scalar>(&self, frames: &[&Frame]) -> Result<Tensor<T>> {
        if frames.is_empty() {
            return Err(Error::Contract("tracklet has no frames".into()));
        }
        let mut data = Vec::with_capacity(frames.len() * self.config.patches() * self.config.patch_values());
        for f in frames {
            let square = pad_to_square(f, self.config.image_size)?;
            let mut p = patchify::<T>(&square, self.config.patch_size)?;
            standardize(&mut p);
            data.extend(p.into_data());
        }
        Tensor::new([frames.len(), self.config.patches(), self.config.patch_values()], data)
    }

    /// `[T, patches, P*P*3]` patch stacks to per-frame tokens `[T, N_v, D]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, patches: Var) -> Result<Var> {
        let frames = match *tape.shape(patches) {
            [t, n, v] if n == self.config.patches() && v == self.config.patch_values() => t,
            _ => {
                let expected = [0, self.config.patches(), self.config.patch_values()];
                return Err(Error::shape("vision encoder", tape.shape(patches), &expected));
            }
        };
        let d = self.config.dim;
        let x = self.patch_embed.forward(tape, store, patches)?;
        let cls = tape.param(store, self.class_token);
        let cls = tape.gather(cls, &vec![0; frames])?;
        let cls = tape.reshape(cls, &[frames, 1, d])?;
        let x = tape.concat(&[cls, x], 1)?;
        let pos = tape.param(store, self.position);
        let mut x = tape.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(tape, store, x, None)?;
        }
        self.ln_post.forward(tape, store, x)
    }

    /// Per-frame token values `[T, N_v, D]` without recording gradients.
    pub fn encode_frames<T: Scalar>(&self, store: &ParamStore<T>, frames: &[&Frame]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let patches = tape.constant(self.prepare(frames)?);
        let out = self.forward(&mut tape, store, patches)?;
        Ok(tape.value(out).clone())
    }
}
