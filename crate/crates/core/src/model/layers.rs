use super::params::{Init, ParamLayout, ParamStore, INIT_STD};
use crate::tensor::{ParamId, Result, Tape, Tensor, Var, LAYER_NORM_EPS};

/// Additive score bias for blocked attention entries.
pub const MASK_BIAS: f64 = -1e9;

fn param(tape: &mut Tape, params: &ParamStore, id: ParamId) -> Var {
    tape.param(id, params.get(id))
}

/// `y = x·W + b`, with `W` stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn declare(layout: &mut ParamLayout, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: layout.declare(format!("{name}.weight"), &[in_dim, out_dim], Init::Normal(INIT_STD)),
            bias: layout.declare(format!("{name}.bias"), &[out_dim], Init::Zeros),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: Var) -> Result<Var> {
        let w = param(tape, params, self.weight);
        let b = param(tape, params, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn declare(layout: &mut ParamLayout, name: &str, dim: usize) -> Self {
        Self {
            gain: layout.declare(format!("{name}.gain"), &[dim], Init::Ones),
            bias: layout.declare(format!("{name}.bias"), &[dim], Init::Zeros),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: Var) -> Result<Var> {
        let g = param(tape, params, self.gain);
        let b = param(tape, params, self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Builds a `[B, 1, Tq, Tk]` bias: 0 where query `i` may see key `j`,
/// [`MASK_BIAS`] elsewhere. `key_mask` is `[B, Tk]` row-major.
pub fn attention_bias(key_mask: &[bool], batch: usize, tq: usize, tk: usize, causal: bool) -> Tensor {
    assert_eq!(key_mask.len(), batch * tk, "key mask size");
    let mut data = Vec::with_capacity(batch * tq * tk);
    for b in 0..batch {
        for i in 0..tq {
            for j in 0..tk {
                let open = key_mask[b * tk + j] && (!causal || j <= i);
                data.push(if open { 0.0 } else { MASK_BIAS });
            }
        }
    }
    Tensor::new(vec![batch, 1, tq, tk], data).expect("bias shape")
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn declare(layout: &mut ParamLayout, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            query: Linear::declare(layout, &format!("{name}.query"), dim, dim),
            key: Linear::declare(layout, &format!("{name}.key"), dim, dim),
            value: Linear::declare(layout, &format!("{name}.value"), dim, dim),
            output: Linear::declare(layout, &format!("{name}.output"), dim, dim),
            heads,
        }
    }

    /// Scaled dot-product attention of `query[B, Tq, d]` over
    /// `memory[B, Tk, d]`. Returns the projected context and the attention
    /// probabilities `[B, H, Tq, Tk]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        query: Var,
        memory: Var,
        bias: &Tensor,
        dropout: f64,
    ) -> Result<(Var, Var)> {
        let (b, tq, d) = dims3(tape, query);
        let tk = tape.shape(memory)[1];
        let h = self.heads;
        let dh = d / h;
        let q = self.query.forward(tape, params, query)?;
        let q = tape.reshape(q, &[b, tq, h, dh])?;
        let q = tape.permute(q, &[0, 2, 1, 3])?;
        let k = self.key.forward(tape, params, memory)?;
        let k = tape.reshape(k, &[b, tk, h, dh])?;
        let k = tape.permute(k, &[0, 2, 3, 1])?;
        let v = self.value.forward(tape, params, memory)?;
        let v = tape.reshape(v, &[b, tk, h, dh])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;

        let scores = tape.matmul(q, k)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let bias = tape.input(bias.clone());
        let scores = tape.add(scores, bias)?;
        let probs = tape.softmax(scores)?;
        let dropped = tape.dropout(probs, dropout)?;
        let ctx = tape.matmul(dropped, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, tq, d])?;
        let out = self.output.forward(tape, params, ctx)?;
        Ok((out, probs))
    }
}

/// Linear, GELU, dropout, Linear.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn declare(layout: &mut ParamLayout, name: &str, dim: usize, ffn: usize) -> Self {
        Self {
            inner: Linear::declare(layout, &format!("{name}.inner"), dim, ffn),
            outer: Linear::declare(layout, &format!("{name}.outer"), ffn, dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: Var, dropout: f64) -> Result<Var> {
        let h = self.inner.forward(tape, params, x)?;
        let h = tape.gelu(h)?;
        let h = tape.dropout(h, dropout)?;
        self.outer.forward(tape, params, h)
    }
}

/// `LayerNorm(x + sublayer)`.
pub fn add_norm(tape: &mut Tape, params: &ParamStore, norm: &LayerNorm, x: Var, sub: Var) -> Result<Var> {
    let s = tape.add(x, sub)?;
    norm.forward(tape, params, s)
}

pub(crate) fn dims3(tape: &Tape, x: Var) -> (usize, usize, usize) {
    let s = tape.shape(x);
    (s[0], s[1], s[2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_bias_pattern() {
        let t = attention_bias(&[true, true, false], 1, 3, 3, true);
        let d = t.data();
        assert_eq!(&d[0..3], &[0.0, MASK_BIAS, MASK_BIAS]);
        assert_eq!(&d[3..6], &[0.0, 0.0, MASK_BIAS]);
        assert_eq!(&d[6..9], &[0.0, 0.0, MASK_BIAS]);
    }

    #[test]
    fn attention_rows_sum_to_one_and_skip_padding() {
        let mut layout = ParamLayout::new();
        let attn = MultiHeadAttention::declare(&mut layout, "a", 4, 2);
        let params = ParamStore::init(&layout, 1);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 3, 4], (0..12).map(|v| v as f64 * 0.1).collect()).unwrap());
        let bias = attention_bias(&[true, true, false], 1, 3, 3, false);
        let (out, probs) = attn.forward(&mut tape, &params, x, x, &bias, 0.0).unwrap();
        assert_eq!(tape.shape(out), &[1, 3, 4]);
        let p = tape.value(probs);
        assert_eq!(p.shape(), &[1, 2, 3, 3]);
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(row[2], 0.0);
        }
    }
}
