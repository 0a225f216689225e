//! Training loop, Adam, gradient checking and the PNCK checkpoint format.
//!
//! One optimizer step consumes `accumulation` micro-batches of `batch_size`
//! samples. Each sample contributes `L_M + L_G` (or `L_G` alone with the
//! matching loss switched off); gradients are averaged over the samples of a
//! micro-batch and then over the micro-batches of a step. The update is
//! clipped to a global norm, applied with Adam, and every parameter and moment
//! is rounded to f32 so a checkpoint reproduces the in-memory state exactly.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datamodel::{slice_event, Manifest, Sample};
use crate::error::{Error, Result};
use crate::featurestore::{atomic_write, cache_path, read_cache_file, FeatureTensor};
use crate::lm::{caption_sequence, Vocab};
use crate::model::{training_vocab, LossValues, ModelConfig, PerspectiveNet};
use crate::params::{round_f32, ParamId, ParamStore};
use crate::rng::Rng64;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub accumulation: usize,
    pub eval_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Hold out roughly 10% of samples (by id hash) for evaluation.
    pub holdout: bool,
    pub matching_loss: bool,
    /// Single-threaded numerics and zeroed wall-clock fields in the log.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 5e-5,
            batch_size: 2,
            accumulation: 2,
            eval_every: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            max_steps: None,
            clip_norm: Some(1.0),
            holdout: true,
            matching_loss: true,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.accumulation == 0 || self.eval_every == 0 {
            return Err(Error::invalid("epochs, batch size, accumulation and eval interval must be positive"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::invalid("max_steps must be positive"));
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.lr) || !positive(self.eps) {
            return Err(Error::invalid("learning rate and epsilon must be finite and positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if let Some(c) = self.clip_norm {
            if !positive(c) {
                return Err(Error::invalid("clip norm must be finite and positive"));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second Adam moments of one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
}

impl Moments {
    pub fn zeros(dim: (usize, usize)) -> Self {
        Self {
            m: Array2::zeros(dim),
            v: Array2::zeros(dim),
        }
    }
}

/// Bias-corrected Adam step `t` (1-based) applied in place.
pub fn adam_update(
    name: &str,
    param: &mut Array2<f64>,
    grad: &Array2<f64>,
    moments: &mut Moments,
    t: u64,
    adam: &AdamParams,
) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("Adam step counter starts at 1"));
    }
    let dim = param.dim();
    if grad.dim() != dim || moments.m.dim() != dim || moments.v.dim() != dim {
        return Err(Error::shape(format!(
            "`{name}`: parameter {dim:?}, gradient {:?}, moments {:?}",
            grad.dim(),
            moments.m.dim()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    let c1 = 1.0 - adam.beta1.powi(t as i32);
    let c2 = 1.0 - adam.beta2.powi(t as i32);
    ndarray::Zip::from(param)
        .and(grad)
        .and(&mut moments.m)
        .and(&mut moments.v)
        .for_each(|p, &g, m, v| {
            *m = adam.beta1 * *m + (1.0 - adam.beta1) * g;
            *v = adam.beta2 * *v + (1.0 - adam.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= adam.lr * m_hat / (v_hat.sqrt() + adam.eps);
        });
    Ok(())
}

/// Something that can produce the cached features of a sample.
pub trait FeatureSource {
    fn features(&self, sample: &Sample) -> Result<FeatureTensor>;
}

impl FeatureSource for HashMap<String, FeatureTensor> {
    fn features(&self, sample: &Sample) -> Result<FeatureTensor> {
        self.get(&sample.id)
            .cloned()
            .ok_or_else(|| Error::invalid("no features for this sample").in_sample(&sample.id))
    }
}

/// Directory of `<id>.pnf1` caches.
#[derive(Debug, Clone)]
pub struct CacheDir(pub PathBuf);

impl FeatureSource for CacheDir {
    fn features(&self, sample: &Sample) -> Result<FeatureTensor> {
        read_cache_file(&cache_path(&self.0, &sample.id)).map_err(|e| e.in_sample(&sample.id))
    }
}

/// FNV-1a over the id; about 10% of ids land in the held-out split.
pub fn is_holdout(id: &str) -> bool {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h % 100 < 10
}

/// One optimizer step as written to the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_m: f64,
    pub l_g: f64,
    pub l: f64,
    pub lr: f64,
    pub wall_ms: u64,
    #[serde(skip)]
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: u64,
    pub l_m: f64,
    pub l_g: f64,
    pub l: f64,
    pub samples: usize,
}

/// Model, parameters and optimizer state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: PerspectiveNet,
    pub store: ParamStore,
    pub config: TrainConfig,
    pub moments: HashMap<ParamId, Moments>,
    /// Number of optimizer updates applied so far.
    pub step: u64,
    pending: Option<PendingState>,
}

#[derive(Debug, Clone)]
struct PendingState {
    grads: HashMap<ParamId, Array2<f64>>,
    losses: Vec<LossValues>,
}

impl TrainState {
    pub fn new(model: PerspectiveNet, store: ParamStore, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let moments = store
            .trainable_ids()
            .into_iter()
            .map(|id| (id, Moments::zeros(store.value(id).dim())))
            .collect();
        Ok(Self {
            model,
            store,
            config,
            moments,
            step: 0,
            pending: None,
        })
    }

    /// Fresh model whose vocabulary covers the manifest captions.
    pub fn for_manifest(manifest: &Manifest, model: ModelConfig, config: TrainConfig) -> Result<Self> {
        let vocab = training_vocab(&manifest.samples)?;
        let (model, store) = PerspectiveNet::new(model, vocab)?;
        Self::new(model, store, config)
    }

    fn sample_gradients(&self, sample: &Sample, tensor: &FeatureTensor) -> Result<(HashMap<ParamId, Array2<f64>>, LossValues)> {
        let run = || -> Result<_> {
            let mut tape = Tape::new(&self.store);
            let nodes = self.model.loss(&mut tape, tensor, sample, self.config.matching_loss)?;
            let values = LossValues {
                l_m: tape.scalar(nodes.matching),
                l_g: tape.scalar(nodes.generation),
                l: tape.scalar(nodes.total),
            };
            if !values.l.is_finite() {
                return Err(Error::NonFinite("training loss".into()));
            }
            Ok((tape.backward(nodes.total).into_params(), values))
        };
        run().map_err(|e| e.in_sample(&sample.id))
    }

    /// Mean gradients and losses over a micro-batch.
    pub fn batch_gradients(&self, batch: &[(&Sample, &FeatureTensor)]) -> Result<(HashMap<ParamId, Array2<f64>>, LossValues)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let results: Vec<Result<_>> = if self.config.deterministic || batch.len() == 1 {
            batch.iter().map(|(s, t)| self.sample_gradients(s, t)).collect()
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = batch
                    .iter()
                    .map(|(s, t)| scope.spawn(move || self.sample_gradients(s, t)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("gradient worker panicked"))
                    .collect()
            })
        };
        let n = batch.len() as f64;
        let mut grads: HashMap<ParamId, Array2<f64>> = HashMap::new();
        let mut mean = LossValues { l_m: 0.0, l_g: 0.0, l: 0.0 };
        for result in results {
            let (g, values) = result?;
            for (id, value) in g {
                match grads.get_mut(&id) {
                    Some(acc) => acc.scaled_add(1.0 / n, &value),
                    None => {
                        grads.insert(id, value / n);
                    }
                }
            }
            mean.l_m += values.l_m / n;
            mean.l_g += values.l_g / n;
            mean.l += values.l / n;
        }
        Ok((grads, mean))
    }

    /// Processes one micro-batch. Returns the step record when this
    /// micro-batch completes an accumulation group and an update is applied.
    pub fn train_step(&mut self, batch: &[(&Sample, &FeatureTensor)], started: Instant) -> Result<Option<StepRecord>> {
        let (grads, losses) = self.batch_gradients(batch)?;
        let pending = self.pending.get_or_insert_with(|| PendingState {
            grads: HashMap::new(),
            losses: Vec::new(),
        });
        for (id, g) in grads {
            match pending.grads.get_mut(&id) {
                Some(acc) => *acc += &g,
                None => {
                    pending.grads.insert(id, g);
                }
            }
        }
        pending.losses.push(losses);
        if pending.losses.len() >= self.config.accumulation {
            self.flush(started)
        } else {
            Ok(None)
        }
    }

    /// Applies any partially accumulated gradients as one update.
    pub fn flush(&mut self, started: Instant) -> Result<Option<StepRecord>> {
        let Some(pending) = self.pending.take() else {
            return Ok(None);
        };
        let count = pending.losses.len() as f64;
        let mut grads = pending.grads;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x / count);
        }
        let clipped = self.apply_update(grads)?;
        let mean = |f: fn(&LossValues) -> f64| pending.losses.iter().map(f).sum::<f64>() / count;
        Ok(Some(StepRecord {
            step: self.step,
            l_m: mean(|v| v.l_m),
            l_g: mean(|v| v.l_g),
            l: mean(|v| v.l),
            lr: self.config.lr,
            wall_ms: if self.config.deterministic {
                0
            } else {
                started.elapsed().as_millis() as u64
            },
            clipped,
        }))
    }

    /// Clips, runs Adam on every trainable parameter and re-rounds to f32.
    /// Returns whether clipping was active.
    fn apply_update(&mut self, mut grads: HashMap<ParamId, Array2<f64>>) -> Result<bool> {
        let trainable = self.store.trainable_ids();
        // Summed in parameter order so the norm is reproducible.
        let norm = trainable
            .iter()
            .filter_map(|id| grads.get(id))
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let mut clipped = false;
        if let Some(limit) = self.config.clip_norm {
            if norm > limit {
                clipped = true;
                for g in grads.values_mut() {
                    g.mapv_inplace(|x| x * limit / norm);
                }
            }
        }
        let t = self.step + 1;
        let adam = self.config.adam();
        for id in trainable {
            let dim = self.store.value(id).dim();
            let grad = grads.remove(&id).unwrap_or_else(|| Array2::zeros(dim));
            let name = self.store.get(id).name.clone();
            let moments = self.moments.entry(id).or_insert_with(|| Moments::zeros(dim));
            adam_update(&name, self.store.value_mut(id), &grad, moments, t, &adam)?;
            self.store.value_mut(id).mapv_inplace(round_f32);
            moments.m.mapv_inplace(round_f32);
            moments.v.mapv_inplace(round_f32);
        }
        self.step = t;
        Ok(clipped)
    }

    pub fn evaluate(&self, data: &[(&Sample, &FeatureTensor)]) -> Result<EvalRecord> {
        let mut sum = LossValues { l_m: 0.0, l_g: 0.0, l: 0.0 };
        for (sample, tensor) in data {
            let v = self
                .model
                .loss_value(&self.store, tensor, sample, self.config.matching_loss)
                .map_err(|e| e.in_sample(&sample.id))?;
            sum.l_m += v.l_m;
            sum.l_g += v.l_g;
            sum.l += v.l;
        }
        let n = data.len().max(1) as f64;
        Ok(EvalRecord {
            step: self.step,
            l_m: sum.l_m / n,
            l_g: sum.l_g / n,
            l: sum.l / n,
            samples: data.len(),
        })
    }
}

/// Output locations for [`fit`].
#[derive(Default)]
pub struct FitOptions<'a> {
    /// Rewritten at every evaluation and at the end.
    pub checkpoint: Option<&'a Path>,
    /// Receives one JSON object per optimizer step.
    pub log: Option<&'a mut dyn Write>,
}

#[derive(Debug, Clone, Default)]
pub struct FitReport {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub train_ids: Vec<String>,
    pub eval_ids: Vec<String>,
}

impl FitReport {
    pub fn clipped_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.clipped).count()
    }
}

/// Loads every sample's features and checks it can be trained on.
pub fn preflight(state: &TrainState, manifest: &Manifest, features: &dyn FeatureSource) -> Result<Vec<FeatureTensor>> {
    manifest.validate()?;
    let c = state.model.config.connector.num_tokens;
    manifest
        .samples
        .iter()
        .map(|sample| {
            let check = || -> Result<FeatureTensor> {
                let tensor = features.features(sample)?;
                if tensor.dim() != state.model.config.connector.feature_dim {
                    return Err(Error::shape(format!(
                        "feature width {} vs connector input {}",
                        tensor.dim(),
                        state.model.config.connector.feature_dim
                    )));
                }
                if tensor.num_frames() > state.model.config.connector.max_frames {
                    return Err(Error::invalid(format!(
                        "{} frames exceed the connector limit of {}",
                        tensor.num_frames(),
                        state.model.config.connector.max_frames
                    )));
                }
                slice_event(sample, tensor.num_frames())?;
                let seq = caption_sequence(&state.model.vocab, sample.object, sample.segment, &sample.caption);
                state.model.lm.check_length(c, seq.inputs.len())?;
                Ok(tensor)
            };
            check().map_err(|e| match e {
                e @ Error::InSample { .. } => e,
                e => e.in_sample(&sample.id),
            })
        })
        .collect()
}

fn write_log(log: &mut Option<&mut dyn Write>, record: &StepRecord) -> Result<()> {
    if let Some(w) = log.as_mut() {
        let line = serde_json::to_string(record).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Runs the full training protocol on `state`.
pub fn fit(state: &mut TrainState, manifest: &Manifest, features: &dyn FeatureSource, mut options: FitOptions<'_>) -> Result<FitReport> {
    let tensors = preflight(state, manifest, features)?;
    let all: Vec<usize> = (0..manifest.samples.len()).collect();
    let (train, held): (Vec<usize>, Vec<usize>) = if state.config.holdout {
        all.iter().partition(|&&i| !is_holdout(&manifest.samples[i].id))
    } else {
        (all.clone(), Vec::new())
    };
    if train.is_empty() {
        return Err(Error::invalid("no training samples after the held-out split"));
    }
    let eval_idx = if held.is_empty() { &train } else { &held };
    let pair = |i: usize| (&manifest.samples[i], &tensors[i]);
    let eval_set: Vec<_> = eval_idx.iter().map(|&i| pair(i)).collect();

    let mut report = FitReport {
        train_ids: train.iter().map(|&i| manifest.samples[i].id.clone()).collect(),
        eval_ids: eval_idx.iter().map(|&i| manifest.samples[i].id.clone()).collect(),
        ..FitReport::default()
    };
    let started = Instant::now();
    let cap = state.config.max_steps.map_or(u64::MAX, |s| s as u64);
    let mut rng = Rng64::new(state.config.seed);

    let mut on_step = |state: &mut TrainState, record: StepRecord, report: &mut FitReport| -> Result<()> {
        write_log(&mut options.log, &record)?;
        report.steps.push(record);
        if state.step.is_multiple_of(state.config.eval_every as u64) {
            report.evals.push(state.evaluate(&eval_set)?);
            if let Some(path) = options.checkpoint {
                save_checkpoint(state, path)?;
            }
        }
        Ok(())
    };

    'epochs: for _ in 0..state.config.epochs {
        let mut order = train.clone();
        rng.shuffle(&mut order);
        for chunk in order.chunks(state.config.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| pair(i)).collect();
            if let Some(record) = state.train_step(&batch, started)? {
                on_step(state, record, &mut report)?;
                if state.step >= cap {
                    break 'epochs;
                }
            }
        }
        if let Some(record) = state.flush(started)? {
            on_step(state, record, &mut report)?;
            if state.step >= cap {
                break;
            }
        }
    }
    state.pending = None;

    if report.evals.last().map(|e| e.step) != Some(state.step) {
        report.evals.push(state.evaluate(&eval_set)?);
        if let Some(path) = options.checkpoint {
            save_checkpoint(state, path)?;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest `|analytic - numeric|`, useful for comparing step sizes.
    pub max_abs_error: f64,
    /// `name[index]` of the entry with the largest error.
    pub worst: String,
    pub checked: usize,
    /// Names of the parameter arrays that were checked.
    pub params: Vec<String>,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central finite differences on the first 8 entries of every trainable array.
pub fn grad_check(
    model: &PerspectiveNet,
    store: &ParamStore,
    tensor: &FeatureTensor,
    sample: &Sample,
    h: f64,
    matching: bool,
) -> Result<GradCheckReport> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let loss_at = |s: &ParamStore| -> Result<f64> { Ok(model.loss_value(s, tensor, sample, matching)?.l) };
    let mut tape = Tape::new(store);
    let nodes = model.loss(&mut tape, tensor, sample, matching)?;
    let grads = tape.backward(nodes.total);

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: String::new(),
        checked: 0,
        params: Vec::new(),
    };
    for id in store.trainable_ids() {
        let param = store.get(id);
        let dim = param.value.dim();
        let zeros = Array2::zeros(dim);
        let analytic = grads.param(id).unwrap_or(&zeros);
        for flat in 0..param.len().min(8) {
            let at = (flat / dim.1, flat % dim.1);
            let original = probe.value(id)[at];
            probe.value_mut(id)[at] = original + h;
            let plus = loss_at(&probe)?;
            probe.value_mut(id)[at] = original - h;
            let minus = loss_at(&probe)?;
            probe.value_mut(id)[at] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[at], numeric);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((analytic[at] - numeric).abs());
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = err;
                report.worst = format!("{}[{flat}]", param.name);
            }
        }
        report.params.push(param.name.clone());
    }
    Ok(report)
}

const CKPT_MAGIC: &[u8; 4] = b"PNCK";
const CKPT_VERSION: u32 = 1;

fn put_name(buf: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("parameter name too long: {name}")))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    Ok(())
}

fn put_f32s(buf: &mut Vec<u8>, values: &Array2<f64>) {
    for &x in values.iter() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

/// Serializes parameters, moments, step and a JSON echo of the configuration
/// and vocabulary. Pending accumulated gradients are not stored.
pub fn checkpoint_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(state.store.len() as u32).to_le_bytes());
    for (_, p) in state.store.iter() {
        put_name(&mut buf, &p.name)?;
        buf.push(p.frozen as u8);
        buf.push(p.shape.len() as u8);
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut buf, &p.value);
    }
    let trainable = state.store.trainable_ids();
    buf.extend_from_slice(&(trainable.len() as u32).to_le_bytes());
    for id in trainable {
        let p = state.store.get(id);
        put_name(&mut buf, &p.name)?;
        let zeros = Moments::zeros(p.value.dim());
        let m = state.moments.get(&id).unwrap_or(&zeros);
        put_f32s(&mut buf, &m.m);
        put_f32s(&mut buf, &m.v);
    }
    buf.extend_from_slice(&state.step.to_le_bytes());
    let echo = json!({
        "model": state.model.config,
        "train": state.config,
        "vocab": state.model.vocab.tokens(),
    });
    let text = serde_json::to_vec(&echo).map_err(|e| Error::Format(e.to_string()))?;
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(&text);
    Ok(buf)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    atomic_write(path, &checkpoint_bytes(state)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Corrupt(format!("checkpoint truncated at byte {}", self.at)));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))
    }

    fn f32s(&mut self, dim: (usize, usize)) -> Result<Array2<f64>> {
        let n = dim.0.checked_mul(dim.1).and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::Corrupt("shape overflow".into()))?;
        let values = self
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Array2::from_shape_vec(dim, values).map_err(|e| Error::Corrupt(e.to_string()))
    }
}

#[derive(Deserialize)]
struct ConfigEcho {
    model: ModelConfig,
    train: TrainConfig,
    vocab: Vec<String>,
}

/// Rebuilds a training state from checkpoint bytes.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 4 || &bytes[..4] != CKPT_MAGIC {
        return Err(Error::Format("not a PNCK checkpoint (bad magic)".into()));
    }
    let mut cur = Cursor { bytes, at: 4 };
    let version = cur.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name = cur.name()?;
        let frozen = cur.u8()? != 0;
        let rank = cur.u8()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let dim = match shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(Error::Corrupt(format!("`{name}` has unsupported rank {rank}"))),
        };
        let value = cur.f32s(dim)?;
        entries.push((name, frozen, shape, value));
    }
    let n_moments = cur.u32()? as usize;
    let mut moment_entries = Vec::new();
    for _ in 0..n_moments {
        let name = cur.name()?;
        let dim = entries
            .iter()
            .find(|e| e.0 == name)
            .map(|e| e.3.dim())
            .ok_or_else(|| Error::Corrupt(format!("moments for unknown parameter `{name}`")))?;
        let m = cur.f32s(dim)?;
        let v = cur.f32s(dim)?;
        moment_entries.push((name, Moments { m, v }));
    }
    let step = cur.u64()?;
    let len = cur.u32()? as usize;
    let echo: ConfigEcho = serde_json::from_slice(cur.take(len)?).map_err(|e| Error::Corrupt(format!("config echo: {e}")))?;
    if cur.at != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - cur.at)));
    }

    let vocab = Vocab::from_token_list(echo.vocab).map_err(|e| Error::Corrupt(e.to_string()))?;
    let (model, mut store) = PerspectiveNet::new(echo.model, vocab).map_err(|e| Error::Corrupt(e.to_string()))?;
    if entries.len() != store.len() {
        return Err(Error::Corrupt(format!(
            "checkpoint has {} parameters, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, frozen, shape, value) in entries {
        let id = store.id(&name).ok_or_else(|| Error::Corrupt(format!("unknown parameter `{name}`")))?;
        let p = store.get(id);
        if p.frozen != frozen || p.shape != shape {
            return Err(Error::Corrupt(format!("`{name}` does not match the model layout")));
        }
        store.set(id, value)?;
    }
    let mut state = TrainState::new(model, store, echo.train).map_err(|e| Error::Corrupt(e.to_string()))?;
    for (name, moments) in moment_entries {
        let id = state.store.id(&name).expect("checked above");
        if state.store.get(id).frozen {
            return Err(Error::Corrupt(format!("moments stored for frozen `{name}`")));
        }
        state.moments.insert(id, moments);
    }
    state.step = step;
    Ok(state)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    parse_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurestore::{encode_sample, StubEncoder};
    use crate::synth::{gen_dataset, gen_overfit_fixture, SynthDataset};

    fn features(data: &SynthDataset) -> HashMap<String, FeatureTensor> {
        let enc = StubEncoder::default();
        data.samples
            .iter()
            .map(|s| (s.sample.id.clone(), encode_sample(&enc, &s.views).unwrap()))
            .collect()
    }

    fn tiny_state(data: &SynthDataset, config: TrainConfig) -> TrainState {
        TrainState::for_manifest(&data.manifest, ModelConfig::tiny(), config).unwrap()
    }

    fn no_holdout() -> TrainConfig {
        TrainConfig {
            holdout: false,
            deterministic: true,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let adam = TrainConfig::default().adam();
        let mut p = Array2::from_elem((1, 1), 0.5);
        let mut m = Moments::zeros((1, 1));
        adam_update("w", &mut p, &Array2::from_elem((1, 1), 0.1), &mut m, 1, &adam).unwrap();
        let expected = -5e-5 * 0.1 / (0.1 + 1e-8);
        assert!((p[[0, 0]] - 0.5 - expected).abs() < 1e-15);

        let mut q = Array2::from_elem((2, 3), 0.25);
        let mut m = Moments::zeros((2, 3));
        adam_update("w", &mut q, &Array2::zeros((2, 3)), &mut m, 1, &adam).unwrap();
        assert!(q.iter().all(|&x| x == 0.25));
    }

    #[test]
    fn adam_is_deterministic_and_checks_input() {
        let adam = TrainConfig::default().adam();
        let g = Array2::from_shape_fn((2, 2), |(i, j)| (i as f64 - j as f64) * 0.3);
        let (mut a, mut b) = (Array2::from_elem((2, 2), 1.0), Array2::from_elem((2, 2), 1.0));
        let (mut ma, mut mb) = (Moments::zeros((2, 2)), Moments::zeros((2, 2)));
        for t in 1..=3 {
            adam_update("a", &mut a, &g, &mut ma, t, &adam).unwrap();
            adam_update("b", &mut b, &g, &mut mb, t, &adam).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        let bad = Array2::from_elem((2, 2), f64::NAN);
        let err = adam_update("connector.tasks", &mut a, &bad, &mut ma, 4, &adam).unwrap_err();
        assert!(err.to_string().contains("connector.tasks"));
        assert!(adam_update("a", &mut a, &g, &mut ma, 0, &adam).is_err());
        assert!(adam_update("a", &mut a, &Array2::zeros((1, 2)), &mut ma, 1, &adam).is_err());
    }

    #[test]
    fn accumulation_matches_a_single_larger_batch() {
        let data = gen_overfit_fixture(4);
        let feats = features(&data);
        let batch: Vec<_> = data.samples[..2].iter().map(|s| (&s.sample, &feats[&s.sample.id])).collect();
        let started = Instant::now();

        let mut whole = tiny_state(&data, TrainConfig { batch_size: 2, accumulation: 1, ..no_holdout() });
        let mut parts = tiny_state(&data, TrainConfig { batch_size: 1, accumulation: 2, ..no_holdout() });
        let a = whole.train_step(&batch, started).unwrap().unwrap();
        assert!(parts.train_step(&batch[..1], started).unwrap().is_none());
        let b = parts.train_step(&batch[1..], started).unwrap().unwrap();
        assert!((a.l - b.l).abs() < 1e-12);
        for (id, p) in whole.store.iter() {
            let diff = (&p.value - parts.store.value(id)).iter().fold(0f64, |m, x| m.max(x.abs()));
            assert!(diff < 1e-6, "{} differs by {diff}", p.name);
        }
    }

    #[test]
    fn a_step_leaves_the_base_untouched() {
        let data = gen_overfit_fixture(5);
        let feats = features(&data);
        let mut state = tiny_state(&data, no_holdout());
        let before = state.store.clone();
        let batch: Vec<_> = data.samples[..2].iter().map(|s| (&s.sample, &feats[&s.sample.id])).collect();
        for _ in 0..2 {
            state.train_step(&batch, Instant::now()).unwrap();
        }
        assert_eq!(state.step, 1);
        for (id, p) in state.store.iter() {
            if p.frozen {
                assert!(p.name.starts_with("lm.base."), "{}", p.name);
                assert!(p.value.iter().zip(before.value(id)).all(|(a, b)| a.to_bits() == b.to_bits()));
            } else {
                assert!(!p.name.starts_with("lm.base."));
            }
        }
        let trainable = state.store.names(false);
        assert!(trainable.iter().all(|n| n.starts_with("connector.") || n.starts_with("lm.lora.") || n == "lm.visual_projection.weight"));
        for group in ["connector.stage1.", "connector.stage2.", "connector.positions", "connector.tasks", "lm.lora.", "lm.visual_projection"] {
            assert!(trainable.iter().any(|n| n.starts_with(group)), "{group}");
        }
    }

    #[test]
    fn eval_schedule_and_determinism() {
        let data = gen_dataset(2, 3).unwrap();
        let feats = features(&data);
        let config = TrainConfig {
            epochs: 1000,
            batch_size: 1,
            accumulation: 1,
            max_steps: Some(250),
            ..no_holdout()
        };
        let run = || {
            let mut state = tiny_state(&data, config.clone());
            let mut log = Vec::new();
            let report = fit(&mut state, &data.manifest, &feats, FitOptions { log: Some(&mut log), ..FitOptions::default() }).unwrap();
            (report, log, state.step)
        };
        let (a, log_a, steps) = run();
        let (b, log_b, _) = run();
        assert_eq!(steps, 250);
        assert_eq!(a.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![100, 200, 250]);
        assert_eq!(log_a, log_b);
        assert!(a.steps.iter().zip(&b.steps).all(|(x, y)| x.l.to_bits() == y.l.to_bits()));
        let first: serde_json::Value = serde_json::from_slice(log_a.split(|&c| c == b'\n').next().unwrap()).unwrap();
        let keys: Vec<_> = first.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 6);
        for k in ["step", "l_m", "l_g", "l", "lr", "wall_ms"] {
            assert!(first.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn parallel_and_serial_gradients_agree() {
        let data = gen_overfit_fixture(6);
        let feats = features(&data);
        let batch: Vec<_> = data.samples[..2].iter().map(|s| (&s.sample, &feats[&s.sample.id])).collect();
        let serial = tiny_state(&data, no_holdout());
        let mut parallel = serial.clone();
        parallel.config.deterministic = false;
        let (ga, la) = serial.batch_gradients(&batch).unwrap();
        let (gb, lb) = parallel.batch_gradients(&batch).unwrap();
        assert_eq!(la, lb);
        for (id, g) in &ga {
            assert!(g.iter().zip(gb[id].iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn preflight_rejects_missing_features() {
        let data = gen_overfit_fixture(1);
        let mut feats = features(&data);
        feats.remove("fixture-03");
        let mut state = tiny_state(&data, no_holdout());
        let err = fit(&mut state, &data.manifest, &feats, FitOptions::default()).unwrap_err();
        assert!(err.to_string().contains("fixture-03"), "{err}");
        assert_eq!(state.step, 0);
    }

    #[test]
    fn disabled_matching_trains_on_generation_only() {
        let data = gen_overfit_fixture(2);
        let feats = features(&data);
        let config = TrainConfig { matching_loss: false, max_steps: Some(3), ..no_holdout() };
        let mut state = tiny_state(&data, config);
        let report = fit(&mut state, &data.manifest, &feats, FitOptions::default()).unwrap();
        for s in &report.steps {
            assert_eq!(s.l, s.l_g);
            assert!(s.l_m.is_finite() && s.l_m >= 0.0);
        }
    }

    #[test]
    fn gradient_check_on_tiny_model() {
        let data = gen_overfit_fixture(3);
        let feats = features(&data);
        let mut state = tiny_state(&data, no_holdout());
        let mut rng = Rng64::new(11);
        for id in state.model.lm.adapter_ids() {
            let dim = state.store.value(id).dim();
            state.store.set(id, Array2::from_shape_simple_fn(dim, || 0.1 * rng.normal())).unwrap();
        }
        let s = &data.samples[0].sample;
        let report = grad_check(&state.model, &state.store, &feats[&s.id], s, 1e-5, true).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert!(report.params.iter().all(|n| !n.starts_with("lm.base.")));
        assert_eq!(report.params.len(), state.store.trainable_ids().len());
        let coarse = grad_check(&state.model, &state.store, &feats[&s.id], s, 1e-3, true).unwrap();
        assert!(report.max_abs_error <= coarse.max_abs_error + 1e-8, "{report:?} {coarse:?}");
    }

    #[test]
    fn holdout_is_about_ten_percent() {
        let held = (0..2000).filter(|i| is_holdout(&format!("sample-{i}"))).count();
        assert!((150..250).contains(&held), "{held}");
        assert_eq!(is_holdout("abc"), is_holdout("abc"));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let data = gen_overfit_fixture(8);
        let feats = features(&data);
        let mut state = tiny_state(&data, TrainConfig { max_steps: Some(2), ..no_holdout() });
        fit(&mut state, &data.manifest, &feats, FitOptions::default()).unwrap();
        let bytes = checkpoint_bytes(&state).unwrap();
        let loaded = parse_checkpoint(&bytes).unwrap();
        assert_eq!(loaded.step, state.step);
        assert_eq!(loaded.config, state.config);
        assert_eq!(loaded.model.vocab, state.model.vocab);
        assert_eq!(checkpoint_bytes(&loaded).unwrap(), bytes);
        for s in &data.samples {
            let t = &feats[&s.sample.id];
            let a = state.model.loss_value(&state.store, t, &s.sample, true).unwrap();
            let b = loaded.model.loss_value(&loaded.store, t, &s.sample, true).unwrap();
            assert_eq!(a.l.to_bits(), b.l.to_bits());
        }
    }

    #[test]
    fn damaged_checkpoints_are_classified() {
        let data = gen_overfit_fixture(9);
        let state = tiny_state(&data, no_holdout());
        let bytes = checkpoint_bytes(&state).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(parse_checkpoint(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(parse_checkpoint(&bad), Err(Error::UnsupportedVersion(2))));
        for cut in [10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(parse_checkpoint(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(parse_checkpoint(&extra), Err(Error::Corrupt(_))));
    }
}
