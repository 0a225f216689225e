//! Toy decoder-only language model with LoRA adapters and a visual prefix.
//!
//! The base model (embeddings, attention, MLPs, norms) is frozen. Trainable
//! state is the projection from connector tokens into the model width and
//! the LoRA factors on the query and value projections of every layer.
//! The sequence seen by the model is `[c visual positions] ++ [<bos>, object,
//! segment, caption..., <eos>]` under a causal mask; logits are produced only
//! for text positions.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Segment, TargetObject};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng64;
use crate::tape::{Tape, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercased whitespace tokenization shared by the vocabulary and the metrics.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first, then every corpus token in lexicographic order.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut words: Vec<String> = corpus.iter().flat_map(|c| tokenize(c.as_ref())).collect();
        words.sort();
        words.dedup();
        words.retain(|w| !SPECIALS.contains(&w.as_str()));
        Ok(Self::from_tokens(
            SPECIALS.iter().map(|s| s.to_string()).chain(words).collect(),
        ))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins non-special tokens, stopping at `<eos>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id >= UNK)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS {
            return Err(Error::Format("vocabulary must start with the four special tokens".into()));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Format("vocabulary has duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        Self::from_text(&tokens.join("\n"))
    }
}

/// Model input and per-position targets for one caption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    /// `[<bos>, object, segment, caption...]`
    pub inputs: Vec<usize>,
    /// Next-token targets, ending in `<eos>`.
    pub targets: Vec<usize>,
    /// False on the prompt positions, which are given rather than predicted.
    pub loss_mask: Vec<bool>,
}

pub fn prompt_ids(vocab: &Vocab, object: TargetObject, segment: Segment) -> Vec<usize> {
    vec![BOS, vocab.id(object.as_str()), vocab.id(segment.as_str())]
}

/// Words the prompt can contain; add these to the vocabulary corpus.
pub fn prompt_words() -> Vec<&'static str> {
    TargetObject::ALL
        .iter()
        .map(|o| o.as_str())
        .chain(Segment::ALL.iter().map(|s| s.as_str()))
        .collect()
}

pub fn caption_sequence(vocab: &Vocab, object: TargetObject, segment: Segment, caption: &str) -> TokenSequence {
    let prompt = prompt_ids(vocab, object, segment);
    let caption = vocab.encode(caption);
    let mut inputs = prompt.clone();
    inputs.extend(&caption);
    let mut targets: Vec<usize> = inputs[1..].to_vec();
    targets.push(EOS);
    let loss_mask = (0..inputs.len()).map(|i| i + 1 >= prompt.len()).collect();
    TokenSequence {
        inputs,
        targets,
        loss_mask,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLmConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    /// Width of the incoming visual tokens (connector D2).
    pub visual_dim: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Std of the frozen token embedding, which doubles as the output head.
    pub embed_std: f64,
    pub position_std: f64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            layers: 2,
            heads: 4,
            max_len: 256,
            visual_dim: 128,
            lora_rank: 4,
            lora_alpha: 8.0,
            embed_std: 0.2,
            position_std: 0.02,
        }
    }
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.d_model, self.layers, self.max_len, self.visual_dim, self.lora_rank].contains(&0) {
            return Err(Error::invalid("language model dimensions must be positive"));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "{} heads do not divide d_model {}",
                self.heads, self.d_model
            )));
        }
        Ok(())
    }

    /// Trainable LoRA parameters: q and v in every layer, `r * d * 2` each.
    pub fn lora_param_count(&self) -> usize {
        self.layers * 2 * self.lora_rank * self.d_model * 2
    }
}

/// Low-rank update `(alpha / r) * B * A` for a (d_out, d_in) projection.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// Down projection, (r, d_in).
    pub down: ParamId,
    /// Up projection, (d_out, r); zero at initialization.
    pub up: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut Rng64) -> Self {
        Self {
            down: store.normal(&format!("{name}.down"), rank, d_in, (d_in as f64).powf(-0.5), false, rng),
            up: store.zeros(&format!("{name}.up"), d_out, rank, false),
            rank,
            alpha,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let down = tape.param(self.down);
        let up = tape.param(self.up);
        let h = tape.linear(x, down, None)?;
        let h = tape.linear(h, up, None)?;
        Ok(tape.scale(h, self.scale()))
    }

    /// `(alpha / r) * B * A`, the same shape as the adapted weight.
    pub fn delta(&self, store: &ParamStore) -> Array2<f64> {
        store.value(self.up).dot(store.value(self.down)) * self.scale()
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct LayerAdapters {
    pub query: LoraAdapter,
    pub value: LoraAdapter,
}

#[derive(Debug, Clone)]
pub struct ToyLm {
    pub config: ToyLmConfig,
    pub vocab_size: usize,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub visual_projection: ParamId,
    /// `None` after the adapters have been merged into the base weights.
    pub adapters: Option<Vec<LayerAdapters>>,
}

/// Result of greedy decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Generated ids, including the final `<eos>` when one was produced.
    pub tokens: Vec<usize>,
    /// True when decoding stopped at the length limit without `<eos>`.
    pub truncated: bool,
}

impl ToyLm {
    pub fn new(config: ToyLmConfig, vocab_size: usize, store: &mut ParamStore, rng: &mut Rng64) -> Result<Self> {
        config.validate()?;
        if vocab_size <= UNK {
            return Err(Error::invalid("vocabulary must contain the special tokens"));
        }
        let d = config.d_model;
        let std = (d as f64).powf(-0.5);
        let token_embedding = store.normal("lm.base.token_embedding", vocab_size, d, config.embed_std, true, rng);
        let position_embedding = store.normal("lm.base.position_embedding", config.max_len, d, config.position_std, true, rng);
        let layers = (0..config.layers)
            .map(|i| {
                let name = format!("lm.base.layers.{i}");
                let mut lin = |s: &str, rng: &mut Rng64| Linear::new(store, &format!("{name}.attn.{s}"), d, d, true, std, true, rng);
                let query = lin("q", rng);
                let key = lin("k", rng);
                let value = lin("v", rng);
                let output = lin("o", rng);
                DecoderLayer {
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, true),
                    query,
                    key,
                    value,
                    output,
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, true),
                    mlp: Mlp::new(store, &format!("{name}.mlp"), d, true, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, "lm.base.final_norm", d, true);
        let visual_projection = store.normal(
            "lm.visual_projection.weight",
            d,
            config.visual_dim,
            (config.visual_dim as f64).powf(-0.5),
            false,
            rng,
        );
        let adapters = (0..config.layers)
            .map(|i| {
                let name = format!("lm.lora.layers.{i}");
                LayerAdapters {
                    query: LoraAdapter::new(store, &format!("{name}.q"), d, d, config.lora_rank, config.lora_alpha, rng),
                    value: LoraAdapter::new(store, &format!("{name}.v"), d, d, config.lora_rank, config.lora_alpha, rng),
                }
            })
            .collect();
        Ok(Self {
            config,
            vocab_size,
            token_embedding,
            position_embedding,
            layers,
            final_norm,
            visual_projection,
            adapters: Some(adapters),
        })
    }

    pub fn check_length(&self, prefix_len: usize, text_len: usize) -> Result<()> {
        if prefix_len + text_len > self.config.max_len {
            return Err(Error::invalid(format!(
                "sequence of {prefix_len} visual + {text_len} text positions exceeds max length {}",
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// Logits for the text positions, shape (T, V).
    pub fn forward(&self, tape: &mut Tape, prefix: Var, ids: &[usize]) -> Result<Var> {
        let (c, width) = tape.value(prefix).dim();
        let t = ids.len();
        if t == 0 {
            return Err(Error::invalid("forward needs at least one token"));
        }
        if width != self.config.visual_dim {
            return Err(Error::shape(format!(
                "visual tokens of width {width}, expected {}",
                self.config.visual_dim
            )));
        }
        self.check_length(c, t)?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
        }

        let proj = tape.param(self.visual_projection);
        let visual = tape.linear(prefix, proj, None)?;
        let table = tape.param(self.token_embedding);
        let text = tape.gather_rows(table, ids)?;
        let x = tape.concat_rows(&[visual, text])?;
        let positions: Vec<usize> = (0..c + t).collect();
        let pos_table = tape.param(self.position_embedding);
        let pos = tape.gather_rows(pos_table, &positions)?;
        let mut x = tape.add(x, pos)?;

        let n = c + t;
        let causal = Array2::from_shape_fn((n, n), |(i, j)| j <= i);
        for (i, layer) in self.layers.iter().enumerate() {
            let adapters = self.adapters.as_ref().map(|a| &a[i]);
            let h = layer.norm1.forward(tape, x)?;
            let mut q = layer.query.forward(tape, h)?;
            let k = layer.key.forward(tape, h)?;
            let mut v = layer.value.forward(tape, h)?;
            if let Some(a) = adapters {
                let dq = a.query.forward(tape, h)?;
                q = tape.add(q, dq)?;
                let dv = a.value.forward(tape, h)?;
                v = tape.add(v, dv)?;
            }
            let attended = tape.attention(q, k, v, self.config.heads, Some(&causal))?;
            let out = layer.output.forward(tape, attended)?;
            x = tape.add(x, out)?;
            let h = layer.norm2.forward(tape, x)?;
            let h = layer.mlp.forward(tape, h)?;
            x = tape.add(x, h)?;
        }
        let x = self.final_norm.forward(tape, x)?;
        let text = tape.slice_rows(x, c, t)?;
        tape.linear(text, table, None)
    }

    pub fn forward_value(&self, store: &ParamStore, prefix: &Array2<f64>, ids: &[usize]) -> Result<Array2<f64>> {
        let mut tape = Tape::new(store);
        let p = tape.input(prefix.clone());
        let logits = self.forward(&mut tape, p, ids)?;
        Ok(tape.value(logits).clone())
    }

    /// Greedy decoding after `prompt`; ties go to the lowest id.
    pub fn generate(&self, store: &ParamStore, prefix: &Array2<f64>, prompt: &[usize], max_new: usize) -> Result<Generation> {
        if max_new == 0 {
            return Err(Error::invalid("max_len must be at least 1"));
        }
        let mut ids = prompt.to_vec();
        let mut tokens = Vec::new();
        while tokens.len() < max_new && prefix.nrows() + ids.len() < self.config.max_len {
            let logits = self.forward_value(store, prefix, &ids)?;
            let last = logits.row(logits.nrows() - 1);
            let next = last
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0;
            tokens.push(next);
            if next == EOS {
                return Ok(Generation { tokens, truncated: false });
            }
            ids.push(next);
        }
        Ok(Generation { tokens, truncated: true })
    }

    /// Folds the adapters into the query/value weights. The returned store
    /// holds `W + (alpha/r) B A` and the returned model has no adapters.
    pub fn lora_merge(&self, store: &ParamStore) -> Result<(ParamStore, ToyLm)> {
        let adapters = self
            .adapters
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no adapters to merge"))?;
        let mut merged = store.clone();
        for (layer, a) in self.layers.iter().zip(adapters) {
            for (linear, adapter) in [(&layer.query, &a.query), (&layer.value, &a.value)] {
                let base = store.value(linear.weight);
                let delta = adapter.delta(store);
                if base.dim() != delta.dim() {
                    return Err(Error::shape(format!(
                        "adapter {:?} vs weight {:?}",
                        delta.dim(),
                        base.dim()
                    )));
                }
                merged.set(linear.weight, base + &delta)?;
            }
        }
        let mut lm = self.clone();
        lm.adapters = None;
        Ok((merged, lm))
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.adapters
            .iter()
            .flatten()
            .flat_map(|a| [a.query.down, a.query.up, a.value.down, a.value.up])
            .collect()
    }
}
