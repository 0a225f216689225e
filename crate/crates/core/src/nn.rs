//! Layers built from tape operations: linear maps, layer norm, the MLP and
//! the post-norm cross-attention block used by both Perceiver stages.

use std::ops::Range;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng64;
use crate::tape::{Tape, Var};

/// Affine map with weight stored as (out, in).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Weight drawn from N(0, std^2), bias zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
        frozen: bool,
        rng: &mut Rng64,
    ) -> Self {
        let weight = store.normal(&format!("{name}.weight"), fan_out, fan_in, std, frozen, rng);
        let bias = bias.then(|| store.constant(&format!("{name}.bias"), fan_out, 0.0, frozen));
        Self { weight, bias }
    }

    pub fn param_count(fan_in: usize, fan_out: usize, bias: bool) -> usize {
        fan_in * fan_out + if bias { fan_out } else { 0 }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, frozen: bool) -> Self {
        Self {
            gain: store.constant(&format!("{name}.gain"), width, 1.0, frozen),
            bias: store.constant(&format!("{name}.bias"), width, 0.0, frozen),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gain), tape.param(self.bias));
        tape.layer_norm(x, g, b)
    }
}

/// `d -> 4d -> d` with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, frozen: bool, rng: &mut Rng64) -> Self {
        let hidden = 4 * width;
        Self {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, true, (width as f64).powf(-0.5), frozen, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, width, true, (hidden as f64).powf(-0.5), frozen, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }
}

/// A set of query rows that attend only to a contiguous range of key rows.
#[derive(Debug, Clone)]
pub struct AttentionGroup {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
    /// Per-key validity inside `keys`; `None` means every key is valid.
    pub key_mask: Option<Vec<bool>>,
}

/// Cross-attention block: `x = LN(latents + O(attn))`, `y = LN(x + MLP(x))`.
#[derive(Debug, Clone)]
pub struct CrossAttentionBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm1: LayerNorm,
    pub mlp: Mlp,
    pub norm2: LayerNorm,
    pub heads: usize,
    pub width: usize,
}

/// Output of a block together with the attention node of every group.
pub struct BlockOutput {
    pub output: Var,
    pub attention: Vec<Var>,
}

impl CrossAttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut Rng64) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::invalid(format!("{heads} heads do not divide width {width}")));
        }
        let std = (width as f64).powf(-0.5);
        // A key bias only shifts every score of a query by the same amount,
        // which softmax ignores, so keys have none.
        let mut lin = |suffix: &str, rng: &mut Rng64| {
            Linear::new(store, &format!("{name}.attn.{suffix}"), width, width, suffix != "k", std, false, rng)
        };
        let query = lin("q", rng);
        let key = lin("k", rng);
        let value = lin("v", rng);
        let output = lin("o", rng);
        Ok(Self {
            query,
            key,
            value,
            output,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width, false),
            mlp: Mlp::new(store, &format!("{name}.mlp"), width, false, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width, false),
            heads,
            width,
        })
    }

    pub fn param_count(width: usize) -> usize {
        12 * width * width + 12 * width
    }

    /// `latents` (rows, d) attend to `inputs` (n, d) according to `groups`,
    /// which must cover every latent row exactly once, in order.
    pub fn forward(&self, tape: &mut Tape, latents: Var, inputs: Var, groups: &[AttentionGroup]) -> Result<BlockOutput> {
        let q = self.query.forward(tape, latents)?;
        let k = self.key.forward(tape, inputs)?;
        let v = self.value.forward(tape, inputs)?;
        let (rows, n) = (tape.value(latents).nrows(), tape.value(inputs).nrows());

        let whole = groups.len() == 1 && groups[0].queries == (0..rows) && groups[0].keys == (0..n);
        let mut attention = Vec::with_capacity(groups.len());
        let attended = if whole {
            let g = &groups[0];
            let mask = g.key_mask.as_ref().map(|m| broadcast_mask(m, rows));
            let a = tape.attention(q, k, v, self.heads, mask.as_ref())?;
            attention.push(a);
            a
        } else {
            let mut next_row = 0;
            let mut parts = Vec::with_capacity(groups.len());
            for g in groups {
                if g.queries.start != next_row || g.queries.is_empty() || g.keys.is_empty() || g.keys.end > n {
                    return Err(Error::shape(format!("bad attention group {g:?}")));
                }
                next_row = g.queries.end;
                let (qr, kr) = (g.queries.len(), g.keys.len());
                let qg = tape.slice_rows(q, g.queries.start, qr)?;
                let kg = tape.slice_rows(k, g.keys.start, kr)?;
                let vg = tape.slice_rows(v, g.keys.start, kr)?;
                let mask = g.key_mask.as_ref().map(|m| broadcast_mask(m, qr));
                let a = tape.attention(qg, kg, vg, self.heads, mask.as_ref())?;
                attention.push(a);
                parts.push(a);
            }
            if next_row != rows {
                return Err(Error::shape(format!("groups cover {next_row} of {rows} latent rows")));
            }
            tape.concat_rows(&parts)?
        };

        let projected = self.output.forward(tape, attended)?;
        let x = tape.add(latents, projected)?;
        let x = self.norm1.forward(tape, x)?;
        let h = self.mlp.forward(tape, x)?;
        let y = tape.add(x, h)?;
        let output = self.norm2.forward(tape, y)?;
        Ok(BlockOutput { output, attention })
    }
}

fn broadcast_mask(mask: &[bool], rows: usize) -> Array2<bool> {
    Array2::from_shape_fn((rows, mask.len()), |(_, j)| mask[j])
}
