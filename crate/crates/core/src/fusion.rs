//! Fusion transformer over concatenated visual and text tokens, and the
//! per-attribute classification heads.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, TransformerBlock};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Replace the transformer with one shared linear layer per token.
    pub no_fusion: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            blocks: 3,
            heads: 4,
            mlp_ratio: 4,
            no_fusion: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.no_fusion {
            return Ok(());
        }
        if self.blocks == 0 {
            return Err(Error::Usage("fusion needs at least one block".into()));
        }
        if self.heads == 0 || dim % self.heads != 0 {
            return Err(Error::Usage(format!("dim {dim} is not divisible by {} fusion heads", self.heads)));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Usage("fusion mlp_ratio must be at least 1".into()));
        }
        Ok(())
    }
}

/// `[visual tokens; text tokens]` with the row where text tokens start.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedSequence<T> {
    pub tokens: Tensor<T>,
    pub boundary: usize,
}

impl<T: Scalar> FusedSequence<T> {
    pub fn concat(visual: &Tensor<T>, text: &Tensor<T>) -> Result<Self> {
        match (visual.shape(), text.shape()) {
            ([nv, d], [m, d2]) if d == d2 => {
                let mut data = visual.data().to_vec();
                data.extend_from_slice(text.data());
                Ok(FusedSequence {
                    tokens: Tensor::new([nv + m, *d], data)?,
                    boundary: *nv,
                })
            }
            (a, b) => Err(Error::shape("concat tokens", a, b)),
        }
    }

    pub fn text_len(&self) -> usize {
        self.tokens.shape()[0] - self.boundary
    }
}

#[derive(Debug, Clone)]
pub enum FusionStack {
    Transformer(Vec<TransformerBlock>),
    Linear(Linear),
}

impl FusionStack {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &FusionConfig,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(dim)?;
        if cfg.no_fusion {
            return Ok(FusionStack::Linear(Linear::new(store, "fusion.linear", dim, dim, rng)?));
        }
        Self::transformer(store, dim, cfg.heads, cfg.blocks, cfg.mlp_ratio, rng)
    }

    /// Any number of blocks, including zero.
    pub fn transformer<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        dim: usize,
        heads: usize,
        blocks: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..blocks)
            .map(|i| TransformerBlock::new(store, &format!("fusion.blocks.{i}"), dim, heads, mlp_ratio, rng))
            .collect::<Result<_>>()?;
        Ok(FusionStack::Transformer(blocks))
    }

    /// `x: [batch, n, dim]`; attention weights of every block are pushed
    /// onto `trace` when given.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        match self {
            FusionStack::Transformer(blocks) => {
                let mut x = x;
                for block in blocks {
                    x = block.forward(tape, store, x, trace.as_deref_mut())?;
                }
                Ok(x)
            }
            FusionStack::Linear(linear) => linear.forward(tape, store, x),
        }
    }

    pub fn zero_output_projections<T: Scalar>(&self, store: &mut ParamStore<T>) {
        if let FusionStack::Transformer(blocks) = self {
            for b in blocks {
                b.zero_output_projections(store);
            }
        }
    }
}

/// One linear head per class. Head `m` reads text token `m` of the fused
/// sequence: `logit_m = <token_m, weight_m> + bias_m`.
#[derive(Debug, Clone)]
pub struct ClassHeads {
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
    pub dim: usize,
}

impl ClassHeads {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, classes: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w = (0..classes * dim).map(|_| T::of(dist.sample(rng))).collect();
        Ok(ClassHeads {
            weight: store.add("heads.weight", Tensor::new([classes, dim], w)?, true)?,
            bias: store.add("heads.bias", Tensor::zeros([classes]), true)?,
            classes,
            dim,
        })
    }

    /// `fused: [batch, boundary + C, dim]` to logits `[batch, C]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, fused: Var, boundary: usize) -> Result<Var> {
        let shape = tape.shape(fused).to_vec();
        let [_, n, d] = shape[..] else {
            return Err(Error::shape("classify", &shape, &[self.classes, self.dim]));
        };
        if d != self.dim {
            return Err(Error::shape("classify", &shape, &[self.classes, self.dim]));
        }
        if n < boundary || n - boundary != self.classes {
            return Err(Error::ModelMismatch(format!(
                "model has {} class heads but the sequence carries {} text tokens",
                self.classes,
                n.saturating_sub(boundary)
            )));
        }
        let text = tape.narrow(fused, 1, boundary, self.classes)?;
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let prod = tape.mul(text, w)?;
        let dots = tape.sum_axis(prod, 2)?;
        tape.add(dots, b)
    }

    /// Logits for one fused sequence, outside any training tape.
    pub fn classify<T: Scalar>(&self, store: &ParamStore<T>, fused: &FusedSequence<T>) -> Result<Tensor<T>> {
        if fused.text_len() != self.classes {
            return Err(Error::ModelMismatch(format!(
                "model has {} class heads but the schema has {} classes",
                self.classes,
                fused.text_len()
            )));
        }
        let mut tape = Tape::new();
        let [n, d] = fused.tokens.shape()[..] else { unreachable!("fused tokens are 2-d") };
        let x = tape.constant(fused.tokens.reshape([1, n, d])?);
        let y = self.forward(&mut tape, store, x, fused.boundary)?;
        tape.value(y).reshape([self.classes])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{normal_tensor, MultiHeadAttention};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn attention_matches_scalar_reference() {
        let mut store = ParamStore::<f64>::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 2, 1, &mut rng(7)).unwrap();
        for (id, scale) in [(mha.query.bias, 0.3), (mha.key.bias, -0.2), (mha.value.bias, 0.1), (mha.out.bias, 0.05)] {
            store.tensor_mut(id).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = scale * (i as f64 + 1.0));
        }
        let x: Tensor<f64> = normal_tensor(&[1, 3, 2], 1.0, &mut rng(8));
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = mha.forward(&mut tape, &store, xv, None).unwrap();

        let w = |l: &Linear| (store.tensor(l.weight).data().to_vec(), store.tensor(l.bias).data().to_vec());
        let project = |(wt, b): &(Vec<f64>, Vec<f64>), row: &[f64]| -> Vec<f64> {
            (0..2).map(|j| row[0] * wt[j] + row[1] * wt[2 + j] + b[j]).collect()
        };
        let (wq, wk, wv, wo) = (w(&mha.query), w(&mha.key), w(&mha.value), w(&mha.out));
        let rows: Vec<&[f64]> = x.data().chunks(2).collect();
        let q: Vec<Vec<f64>> = rows.iter().map(|r| project(&wq, r)).collect();
        let k: Vec<Vec<f64>> = rows.iter().map(|r| project(&wk, r)).collect();
        let v: Vec<Vec<f64>> = rows.iter().map(|r| project(&wv, r)).collect();
        let mut expected = Vec::new();
        for qi in &q {
            let scores: Vec<f64> = k.iter().map(|kj| (qi[0] * kj[0] + qi[1] * kj[1]) / 2f64.sqrt()).collect();
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            let ctx: Vec<f64> = (0..2).map(|c| (0..3).map(|j| e[j] / z * v[j][c]).sum()).collect();
            expected.extend(project(&wo, &ctx));
        }
        for (a, b) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn zeroed_stack_is_identity() {
        let mut store = ParamStore::<f32>::new();
        let stack = FusionStack::new(&mut store, &FusionConfig::default(), 16, &mut rng(1)).unwrap();
        stack.zero_output_projections(&mut store);
        let mut tape = Tape::new();
        let x = tape.constant(normal_tensor(&[1, 9, 16], 1.0, &mut rng(2)));
        let y = stack.forward(&mut tape, &store, x, None).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn heads_on_zero_tokens_give_biases() {
        let mut store = ParamStore::<f32>::new();
        let heads = ClassHeads::new(&mut store, 43, 8, &mut rng(3)).unwrap();
        let bias: Vec<f32> = (0..43).map(|i| i as f32 * 0.1 - 2.0).collect();
        store.tensor_mut(heads.bias).data_mut().copy_from_slice(&bias);
        let fused = FusedSequence::concat(&Tensor::zeros([5, 8]), &Tensor::zeros([43, 8])).unwrap();
        let logits = heads.classify(&store, &fused).unwrap();
        assert_eq!(logits.shape(), &[43]);
        assert_eq!(logits.data(), &bias[..]);
    }

    #[test]
    fn class_count_mismatch_is_reported() {
        let mut store = ParamStore::<f32>::new();
        let heads = ClassHeads::new(&mut store, 4, 8, &mut rng(3)).unwrap();
        let fused = FusedSequence::concat(&Tensor::zeros([5, 8]), &Tensor::zeros([3, 8])).unwrap();
        assert!(matches!(heads.classify(&store, &fused), Err(Error::ModelMismatch(_))));
    }

    #[test]
    fn permuting_text_rows_and_heads_permutes_logits() {
        let (c, d) = (6, 8);
        let mut store = ParamStore::<f64>::new();
        let heads = ClassHeads::new(&mut store, c, d, &mut rng(4)).unwrap();
        store.tensor_mut(heads.bias).data_mut().iter_mut().enumerate().for_each(|(i, b)| *b = i as f64);
        let visual: Tensor<f64> = normal_tensor(&[3, d], 1.0, &mut rng(5));
        let text: Tensor<f64> = normal_tensor(&[c, d], 1.0, &mut rng(6));
        let base = heads.classify(&store, &FusedSequence::concat(&visual, &text).unwrap()).unwrap();

        let perm = [3, 0, 5, 1, 4, 2];
        let permute_rows = |t: &Tensor<f64>, width: usize| {
            let data = perm.iter().flat_map(|&i| t.data()[i * width..(i + 1) * width].to_vec()).collect();
            Tensor::new(t.shape(), data).unwrap()
        };
        let text_p = permute_rows(&text, d);
        let w_p = permute_rows(store.tensor(heads.weight), d);
        let b_p = permute_rows(store.tensor(heads.bias), 1);
        *store.tensor_mut(heads.weight) = w_p;
        *store.tensor_mut(heads.bias) = b_p;
        let permuted = heads.classify(&store, &FusedSequence::concat(&visual, &text_p).unwrap()).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(permuted.data()[k], base.data()[i]);
        }
    }

    #[test]
    fn no_fusion_has_no_blocks() {
        let mut store = ParamStore::<f32>::new();
        let cfg = FusionConfig {
            no_fusion: true,
            ..FusionConfig::default()
        };
        FusionStack::new(&mut store, &cfg, 16, &mut rng(1)).unwrap();
        assert!(store.names().all(|n| !n.starts_with("fusion.blocks.")));
        assert!(store.id("fusion.linear.weight").is_some());
    }
}
