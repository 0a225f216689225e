//! Connector and language model wired together with the two training losses.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::connector::{Connector, ConnectorConfig};
use crate::datamodel::{slice_event, Sample, Segment, TargetObject};
use crate::error::{Error, Result};
use crate::featurestore::FeatureTensor;
use crate::lm::{caption_sequence, prompt_ids, Generation, ToyLm, ToyLmConfig, Vocab};
use crate::losses::{generation_loss, matching_loss, DEFAULT_TEMPERATURE};
use crate::params::ParamStore;
use crate::rng::Rng64;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub connector: ConnectorConfig,
    pub lm: ToyLmConfig,
    /// Softmax temperature of the matching loss.
    pub temperature: f64,
    /// Longest caption `generate` will produce, in tokens.
    pub max_caption_len: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            connector: ConnectorConfig::default(),
            lm: ToyLmConfig::default(),
            temperature: DEFAULT_TEMPERATURE,
            max_caption_len: 64,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Narrow widths (16) and 4 output tokens, for fast tests.
    pub fn tiny() -> Self {
        Self {
            connector: ConnectorConfig {
                fused_dim: 16,
                output_dim: 16,
                num_tokens: 4,
                heads: 2,
                max_frames: 48,
                ..ConnectorConfig::default()
            },
            lm: ToyLmConfig {
                d_model: 16,
                heads: 2,
                max_len: 96,
                visual_dim: 16,
                ..ToyLmConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.connector.validate()?;
        self.lm.validate()?;
        if self.lm.visual_dim != self.connector.output_dim {
            return Err(Error::invalid(format!(
                "language model expects visual width {}, connector produces {}",
                self.lm.visual_dim, self.connector.output_dim
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be finite and positive"));
        }
        if self.max_caption_len == 0 {
            return Err(Error::invalid("max_caption_len must be at least 1"));
        }
        Ok(())
    }
}

/// Loss nodes for one sample.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub matching: Var,
    pub generation: Var,
    /// `matching + generation`, or `generation` alone when matching is off.
    pub total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l_m: f64,
    pub l_g: f64,
    pub l: f64,
}

#[derive(Debug, Clone)]
pub struct PerspectiveNet {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub connector: Connector,
    pub lm: ToyLm,
}

impl PerspectiveNet {
    /// Builds the model and a freshly initialized parameter store.
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng64::new(config.init_seed);
        let connector = Connector::new(config.connector.clone(), &mut store, &mut rng)?;
        let lm = ToyLm::new(config.lm.clone(), vocab.len(), &mut store, &mut rng)?;
        Ok((
            Self {
                config,
                vocab,
                connector,
                lm,
            },
            store,
        ))
    }

    /// Records f_V, f_E, the matching loss and the caption loss for one sample.
    pub fn loss(&self, tape: &mut Tape, tensor: &FeatureTensor, sample: &Sample, matching: bool) -> Result<LossNodes> {
        let task = sample.task_id();
        let window = slice_event(sample, tensor.num_frames())?;
        let full = self.connector.connect(tape, tensor, task, None)?;
        let event = self.connector.connect(tape, tensor, task, Some(window))?;
        let l_m = matching_loss(tape, full, event, self.config.temperature)?;
        let seq = caption_sequence(&self.vocab, sample.object, sample.segment, &sample.caption);
        let logits = self.lm.forward(tape, full, &seq.inputs)?;
        let l_g = generation_loss(tape, logits, &seq.targets, &seq.loss_mask)?;
        let total = if matching { tape.add(l_m, l_g)? } else { l_g };
        Ok(LossNodes {
            matching: l_m,
            generation: l_g,
            total,
        })
    }

    pub fn loss_value(&self, store: &ParamStore, tensor: &FeatureTensor, sample: &Sample, matching: bool) -> Result<LossValues> {
        let mut tape = Tape::new(store);
        let nodes = self.loss(&mut tape, tensor, sample, matching)?;
        Ok(LossValues {
            l_m: tape.scalar(nodes.matching),
            l_g: tape.scalar(nodes.generation),
            l: tape.scalar(nodes.total),
        })
    }

    /// f_V: connector output over the whole video.
    pub fn visual_context(&self, store: &ParamStore, tensor: &FeatureTensor, task: usize) -> Result<Array2<f64>> {
        Ok(self.connector.connect_value(store, tensor, task, None)?.0)
    }

    pub fn generate(&self, store: &ParamStore, tensor: &FeatureTensor, object: TargetObject, segment: Segment) -> Result<Generation> {
        let context = self.visual_context(store, tensor, crate::datamodel::task_id(object, segment))?;
        let prompt = prompt_ids(&self.vocab, object, segment);
        self.lm.generate(store, &context, &prompt, self.config.max_caption_len)
    }

    /// Greedy caption for a sample, decoded to text.
    pub fn caption(&self, store: &ParamStore, tensor: &FeatureTensor, sample: &Sample) -> Result<String> {
        let generation = self.generate(store, tensor, sample.object, sample.segment)?;
        Ok(self.vocab.decode(&generation.tokens))
    }
}

/// Vocabulary over the manifest captions plus every prompt word.
pub fn training_vocab(samples: &[Sample]) -> Result<Vocab> {
    let mut corpus: Vec<&str> = samples.iter().map(|s| s.caption.as_str()).collect();
    let prompt = crate::lm::prompt_words().join(" ");
    corpus.push(&prompt);
    Vocab::build(&corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurestore::{encode_sample, StubEncoder};
    use crate::losses::matching_loss_value;
    use crate::synth::gen_overfit_fixture;

    #[test]
    fn full_window_matching_equals_self_matching() {
        let fx = gen_overfit_fixture(3);
        let vocab = training_vocab(&fx.manifest.samples).unwrap();
        let (model, store) = PerspectiveNet::new(ModelConfig::tiny(), vocab).unwrap();
        let enc = StubEncoder::default();
        let mut sample = fx.samples[0].sample.clone();
        let tensor = encode_sample(&enc, &fx.samples[0].views).unwrap();
        sample.start_s = 0;
        sample.end_s = tensor.num_frames() as u64 - 1;
        let values = model.loss_value(&store, &tensor, &sample, true).unwrap();
        let f = model.visual_context(&store, &tensor, sample.task_id()).unwrap();
        assert_eq!(values.l_m, matching_loss_value(&f, &f, model.config.temperature).unwrap());
        assert_eq!(values.l, values.l_m + values.l_g);
        let off = model.loss_value(&store, &tensor, &sample, false).unwrap();
        assert_eq!(off.l, off.l_g);
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let mut config = ModelConfig::tiny();
        config.lm.visual_dim = 8;
        assert!(config.validate().is_err());
    }
}
