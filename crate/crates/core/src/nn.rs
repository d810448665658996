//! Layers shared by the vision encoder, the text encoder and the fusion
//! transformer. Each layer only stores [`ParamId`]s; values live in a
//! [`ParamStore`] and are read onto a [`Tape`] during forward.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

pub(crate) fn normal_tensor<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn uniform_tensor<T: Scalar, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// `y = x W + b` with `W: [in, out]`, applied over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_tensor(&[in_dim, out_dim], bound, rng), true)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_dim]), true)?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.tensor_mut(self.weight).data_mut().fill(T::zero());
        store.tensor_mut(self.bias).data_mut().fill(T::zero());
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full([dim], T::one()), true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([dim]), true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Multi-head self-attention over `[batch, n, dim]`. Scores are scaled by
/// the square root of the per-head width.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Usage(format!("dim {dim} is not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn split_heads<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, b: usize, n: usize) -> Result<Var> {
        let x = tape.reshape(x, &[b, n, self.heads, self.head_dim()])?;
        tape.transpose(x, 1, 2)
    }

    /// `trace`, when given, receives the `[batch, heads, n, n]` attention
    /// weights.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let [b, n, d] = match *tape.shape(x) {
            [b, n, d] if d == self.dim => [b, n, d],
            _ => return Err(Error::shape("attention", tape.shape(x), &[self.dim])),
        };
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, x)?;
        let v = self.value.forward(tape, store, x)?;
        let q = self.split_heads(tape, q, b, n)?;
        let k = self.split_heads(tape, k, b, n)?;
        let v = self.split_heads(tape, v, b, n)?;
        let kt = tape.transpose(k, 2, 3)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (self.head_dim() as f64).sqrt());
        let attn = tape.softmax(scores, 3)?;
        if let Some(trace) = trace {
            trace.push(attn);
        }
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.transpose(ctx, 1, 2)?;
        let ctx = tape.reshape(ctx, &[b, n, d])?;
        self.out.forward(tape, store, ctx)
    }
}

/// `linear -> GELU -> linear`
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }
}

/// Pre-norm residual block: `x + MHA(LN(x))`, then `+ MLP(LN(.))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if mlp_ratio == 0 {
            return Err(Error::Usage("mlp_ratio must be at least 1".into()));
        }
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let h = self.attn.forward(tape, store, h, trace)?;
        let x = tape.add(x, h)?;
        let h = self.ln2.forward(tape, store, x)?;
        let h = self.mlp.forward(tape, store, h)?;
        tape.add(x, h)
    }

    /// Zeroes the attention and MLP output projections, which turns the
    /// block into the identity map.
    pub fn zero_output_projections<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.attn.out.zero(store);
        self.mlp.fc2.zero(store);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input<T: Scalar>(tape: &mut Tape<T>, shape: &[usize], seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        tape.constant(normal_tensor(shape, 1.0, &mut rng))
    }

    #[test]
    fn single_token_attention_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = random_input(&mut tape, &[1, 1, 8], 1);
        let mut trace = Vec::new();
        mha.forward(&mut tape, &store, x, Some(&mut trace)).unwrap();
        assert_eq!(tape.value(trace[0]).data(), &[1.0, 1.0]);
    }

    #[test]
    fn identical_keys_give_uniform_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_f64([1, 2, 4], &[0.3, -1.0, 2.0, 0.5, 0.3, -1.0, 2.0, 0.5]).unwrap());
        let mut trace = Vec::new();
        mha.forward(&mut tape, &store, x, Some(&mut trace)).unwrap();
        assert_eq!(tape.value(trace[0]).data(), &[0.5; 4]);
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        assert!(MultiHeadAttention::new(&mut store, "a", 10, 4, &mut rng).is_err());
    }

    #[test]
    fn zeroed_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let block = TransformerBlock::new(&mut store, "b", 8, 2, 4, &mut rng).unwrap();
        block.zero_output_projections(&mut store);
        let mut tape = Tape::new();
        let x = random_input(&mut tape, &[2, 5, 8], 9);
        let y = block.forward(&mut tape, &store, x, None).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn block_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let block = TransformerBlock::new(&mut store, "b", 8, 4, 2, &mut rng).unwrap();
        for n in [1, 3, 17] {
            let mut tape = Tape::new();
            let x = random_input(&mut tape, &[1, n, 8], n as u64);
            let y = block.forward(&mut tape, &store, x, None).unwrap();
            assert_eq!(tape.shape(y), &[1, n, 8]);
        }
    }
}
