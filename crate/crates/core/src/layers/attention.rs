use super::{Activation, Builder, Dense, Forward, Init};
use crate::error::{Error, Result};
use crate::tensor::{Element, Var};

/// Multi-head scaled dot-product self-attention over `[B, T, C]` tokens.
///
/// Query, key and value projections are `C -> C`; head `h` uses columns
/// `h*d .. (h+1)*d` with `d = C / heads`, attention logits are scaled by
/// `1/sqrt(d)`, and the concatenated heads go through an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(
                "msa",
                format!("embedding dim {dim} not divisible by {heads} heads"),
            ));
        }
        let init = Init::XavierUniform {
            fan_in: dim,
            fan_out: dim,
        };
        let mut s = b.scope(name);
        Ok(MultiHeadAttention {
            query: Dense::with_init(&mut s, "query", dim, dim, init)?,
            key: Dense::with_init(&mut s, "key", dim, dim, init)?,
            value: Dense::with_init(&mut s, "value", dim, dim, init)?,
            output: Dense::with_init(&mut s, "output", dim, dim, init)?,
            heads,
            dim,
        })
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        self.forward_with_weights(f, x).map(|(out, _)| out)
    }

    /// Attention output plus the attention weights as `[B, heads, T, T]`.
    pub fn forward_with_weights<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<(Var, Var)> {
        let shape = f.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "msa",
                lhs: shape,
                rhs: vec![self.dim],
            });
        }
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        let (h, d) = (self.heads, self.dim / self.heads);

        let split_heads = |f: &mut Forward<'_, T>, proj: &Dense| -> Result<Var> {
            let y = proj.forward(f, x)?;
            let y = f.tape.reshape(y, &[b, t, h, d])?;
            let y = f.tape.permute(y, &[0, 2, 1, 3])?;
            f.tape.reshape(y, &[b * h, t, d])
        };
        let q = split_heads(f, &self.query)?;
        let k = split_heads(f, &self.key)?;
        let v = split_heads(f, &self.value)?;

        let scores = f.tape.batch_matmul(q, k, true)?;
        let scores = f.tape.mul_scalar(scores, T::of(1.0 / (d as f64).sqrt()));
        let weights = f.tape.softmax(scores, 2)?;
        let ctx = f.tape.batch_matmul(weights, v, false)?;
        let ctx = f.tape.reshape(ctx, &[b, h, t, d])?;
        let ctx = f.tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = f.tape.reshape(ctx, &[b, t, c])?;
        let out = self.output.forward(f, ctx)?;
        let weights = f.tape.reshape(weights, &[b, h, t, t])?;
        Ok((out, weights))
    }
}

/// Per-token two-layer perceptron `C -> r*C -> C` with GELU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub expand: Dense,
    pub project: Dense,
}

impl FeedForward {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, name: &str, dim: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::invalid("ffn", "expansion ratio must be at least 1"));
        }
        let hidden = dim * ratio;
        let mut s = b.scope(name);
        Ok(FeedForward {
            expand: Dense::with_init(
                &mut s,
                "expand",
                dim,
                hidden,
                Init::XavierUniform {
                    fan_in: dim,
                    fan_out: hidden,
                },
            )?,
            project: Dense::with_init(
                &mut s,
                "project",
                hidden,
                dim,
                Init::XavierUniform {
                    fan_in: hidden,
                    fan_out: dim,
                },
            )?,
        })
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let h = self.expand.forward(f, x)?;
        let h = Activation::Gelu.apply(&mut f.tape, h);
        self.project.forward(f, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Mode, ParamStore};
    use crate::tensor::{Fill, Tensor};

    fn tokens(b: usize, t: usize, c: usize, seed: u64) -> Tensor<f64> {
        Tensor::create(
            &[b, t, c],
            Fill::Uniform {
                low: -1.0,
                high: 1.0,
                seed,
            },
        )
        .unwrap()
    }

    fn randomize(store: &mut ParamStore<f64>, seed: u64) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let n = store.get(id).numel();
            let r = Tensor::<f64>::create(
                &[n],
                Fill::Uniform {
                    low: -0.5,
                    high: 0.5,
                    seed: seed + id.index() as u64,
                },
            )
            .unwrap();
            store.get_mut(id).data_mut().copy_from_slice(r.data());
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::<f64>::new();
        assert!(MultiHeadAttention::new(&mut Builder::new(&mut store, 0), "a", 6, 4).is_err());
    }

    #[test]
    fn single_token_weight_is_one() {
        let mut store = ParamStore::<f64>::new();
        let att = MultiHeadAttention::new(&mut Builder::new(&mut store, 0), "a", 4, 2).unwrap();
        randomize(&mut store, 3);
        let x = tokens(1, 1, 4, 1);
        let mut f = Forward::new(&store, Mode::Eval, 0);
        let v = f.input(x.clone());
        let (out, w) = att.forward_with_weights(&mut f, v).unwrap();
        assert!(f.tape.value(w).data().iter().all(|&a| a == 1.0));
        // output = (x Wv + bv) Wo + bo
        let wv = store.get(att.value.weight).data();
        let bv = store.get(att.value.bias).data();
        let wo = store.get(att.output.weight).data();
        let bo = store.get(att.output.bias).data();
        let vproj: Vec<f64> = (0..4)
            .map(|j| bv[j] + (0..4).map(|i| x.data()[i] * wv[i * 4 + j]).sum::<f64>())
            .collect();
        for j in 0..4 {
            let want = bo[j] + (0..4).map(|i| vproj[i] * wo[i * 4 + j]).sum::<f64>();
            assert!((f.tape.value(out).data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_split_attention_evenly() {
        let mut store = ParamStore::<f64>::new();
        let att = MultiHeadAttention::new(&mut Builder::new(&mut store, 0), "a", 4, 1).unwrap();
        let row: Vec<f64> = vec![0.3, -0.2, 0.9, 0.1];
        let x = Tensor::from_vec(&[1, 2, 4], [row.clone(), row].concat()).unwrap();
        let mut f = Forward::new(&store, Mode::Eval, 0);
        let v = f.input(x);
        let (_, w) = att.forward_with_weights(&mut f, v).unwrap();
        for &a in f.tape.value(w).data() {
            assert!((a - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn ffn_zero_weights_give_zero() {
        let mut store = ParamStore::<f64>::new();
        let ffn = FeedForward::new(&mut Builder::new(&mut store, 0), "f", 4, 2).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut f = Forward::new(&store, Mode::Eval, 0);
        let v = f.input(tokens(2, 3, 4, 5));
        let y = ffn.forward(&mut f, v).unwrap();
        assert!(f.tape.value(y).data().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn ffn_is_per_token() {
        let mut store = ParamStore::<f64>::new();
        let ffn = FeedForward::new(&mut Builder::new(&mut store, 1), "f", 4, 2).unwrap();
        let x = tokens(1, 3, 4, 6);
        let perm = [2usize, 0, 1];
        let px: Vec<f64> = perm
            .iter()
            .flat_map(|&i| x.data()[i * 4..(i + 1) * 4].to_vec())
            .collect();
        let mut f = Forward::new(&store, Mode::Eval, 0);
        let a = f.input(x);
        let b = f.input(Tensor::from_vec(&[1, 3, 4], px).unwrap());
        let ya = ffn.forward(&mut f, a).unwrap();
        let yb = ffn.forward(&mut f, b).unwrap();
        let (ya, yb) = (f.tape.value(ya).data(), f.tape.value(yb).data());
        for (slot, &src) in perm.iter().enumerate() {
            assert_eq!(&yb[slot * 4..(slot + 1) * 4], &ya[src * 4..(src + 1) * 4]);
        }
    }
}
