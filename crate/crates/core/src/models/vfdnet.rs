use super::ModelConfig;
use crate::error::Result;
use crate::layers::{Builder, Dense, Dropout, FeedForward, Forward, Init, LayerNorm, MultiHeadAttention, ParamId};
use crate::tensor::{Element, Var};

/// Cuts `[B, 3, H, W]` images into non-overlapping `P x P` patches, projects
/// each flattened patch to `C` dims, prepends the class token and adds the
/// position embedding.
#[derive(Clone, Debug)]
pub struct PatchEmbedding {
    pub projection: Dense,
    pub class_token: ParamId,
    pub position: ParamId,
    pub patch_size: usize,
    pub num_patches: usize,
}

impl PatchEmbedding {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, c: &ModelConfig) -> Result<Self> {
        let p = c.patch_size;
        let n = c.num_patches();
        let mut s = b.scope("embed");
        Ok(PatchEmbedding {
            projection: Dense::with_init(
                &mut s,
                "projection",
                p * p * 3,
                c.embed_dim,
                Init::XavierUniform {
                    fan_in: p * p * 3,
                    fan_out: c.embed_dim,
                },
            )?,
            class_token: s.param("class_token", &[1, c.embed_dim], Init::Normal { std: 0.02 })?,
            position: s.param("position", &[n + 1, c.embed_dim], Init::Normal { std: 0.02 })?,
            patch_size: p,
            num_patches: n,
        })
    }

    /// `[B, 3, H, W] -> [B, N, P*P*3]`, each patch flattened row by row with
    /// channels innermost.
    pub fn patchify<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let s = f.tape.shape(x).to_vec();
        let p = self.patch_size;
        let (gh, gw) = (s[2] / p, s[3] / p);
        let y = f.tape.reshape(x, &[s[0], s[1], gh, p, gw, p])?;
        let y = f.tape.permute(y, &[0, 2, 4, 3, 5, 1])?;
        f.tape.reshape(y, &[s[0], gh * gw, p * p * s[1]])
    }

    /// Token sequence `[B, N + 1, C]`.
    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let batch = f.tape.shape(x)[0];
        let patches = self.patchify(f, x)?;
        let tokens = self.projection.forward(f, patches)?;
        let cls = f.param(self.class_token);
        let cls = f.tape.broadcast_leading(cls, batch);
        let seq = f.tape.concat(&[cls, tokens], 1)?;
        let pos = f.param(self.position);
        f.tape.add_suffix(seq, pos)
    }
}

/// Pre-norm transformer block:
/// `q = h + MSA(LN(h))`, `h' = q + FFN(LN(q))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, name: &str, c: &ModelConfig) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(EncoderBlock {
            norm1: LayerNorm::new(&mut s, "norm1", c.embed_dim)?,
            attention: MultiHeadAttention::new(&mut s, "attention", c.embed_dim, c.heads)?,
            norm2: LayerNorm::new(&mut s, "norm2", c.embed_dim)?,
            ffn: FeedForward::new(&mut s, "ffn", c.embed_dim, c.mlp_ratio)?,
        })
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, h: Var) -> Result<Var> {
        let n = self.norm1.forward(f, h)?;
        let a = self.attention.forward(f, n)?;
        let q = f.tape.add(h, a)?;
        let n = self.norm2.forward(f, q)?;
        let m = self.ffn.forward(f, n)?;
        f.tape.add(q, m)
    }
}

#[derive(Clone, Debug)]
pub struct Vfdnet {
    pub embed: PatchEmbedding,
    pub blocks: Vec<EncoderBlock>,
    pub dropout: Dropout,
    pub head: Dense,
}

impl Vfdnet {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, c: &ModelConfig) -> Result<Self> {
        let embed = PatchEmbedding::new(b, c)?;
        let blocks = (0..c.depth)
            .map(|k| EncoderBlock::new(b, &format!("block{k}"), c))
            .collect::<Result<_>>()?;
        Ok(Vfdnet {
            embed,
            blocks,
            dropout: Dropout::new(c.dropout)?,
            head: Dense::with_init(
                b,
                "head",
                c.embed_dim,
                1,
                Init::XavierUniform {
                    fan_in: c.embed_dim,
                    fan_out: 1,
                },
            )?,
        })
    }

    /// Sequence length including the class token.
    pub fn sequence_len(&self) -> usize {
        self.embed.num_patches + 1
    }

    pub fn weight_layers(&self) -> usize {
        // projection, four attention projections and two FFN layers per block, head
        2 + 6 * self.blocks.len()
    }

    pub fn encode<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let mut h = self.embed.forward(f, x)?;
        for block in &self.blocks {
            h = block.forward(f, h)?;
        }
        Ok(h)
    }

    pub fn logits<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let h = self.encode(f, x)?;
        let cls = f.tape.select(h, 1, 0)?;
        let cls = self.dropout.forward(f, cls)?;
        self.head.forward(f, cls)
    }
}
