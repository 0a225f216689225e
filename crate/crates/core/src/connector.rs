//! The Double Perceiver connector.
//!
//! Stage 1 runs a single learned latent over the views present at each
//! timestep, producing one fused vector per second. Stage 2 prepends the task
//! token, adds learned temporal positions (task token at position 0, second
//! `t` at position `t + 1`) and lets `c` latents summarize the sequence. The
//! output shape `(c, D2)` does not depend on the number of views or frames.
//!
//! There is no positional signal across views, so stage 1 is invariant to the
//! order in which cameras are listed.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datamodel::{EventWindow, NUM_TASKS};
use crate::error::{Error, Result};
use crate::featurestore::FeatureTensor;
use crate::nn::{AttentionGroup, CrossAttentionBlock, Linear};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng64;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectorConfig {
    /// Frame feature width D.
    pub feature_dim: usize,
    /// Fused per-timestep width D1 (also stage-1 working width).
    pub fused_dim: usize,
    /// Output token width D2 (also stage-2 working width).
    pub output_dim: usize,
    /// Number of output tokens c.
    pub num_tokens: usize,
    pub heads: usize,
    pub stage1_depth: usize,
    pub stage2_depth: usize,
    /// Longest supported video in frames; the position table has one more row.
    pub max_frames: usize,
    /// Std of the latent, position and task tables.
    pub table_std: f64,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            fused_dim: 128,
            output_dim: 128,
            num_tokens: 20,
            heads: 4,
            stage1_depth: 1,
            stage2_depth: 1,
            max_frames: 64,
            table_std: 0.02,
        }
    }
}

impl ConnectorConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.feature_dim,
            self.fused_dim,
            self.output_dim,
            self.num_tokens,
            self.stage1_depth,
            self.stage2_depth,
            self.max_frames,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("connector dimensions must be positive"));
        }
        for width in [self.fused_dim, self.output_dim] {
            if self.heads == 0 || width % self.heads != 0 {
                return Err(Error::invalid(format!(
                    "{} heads do not divide width {width}",
                    self.heads
                )));
            }
        }
        Ok(())
    }

    /// Total parameter count of a connector built from this config.
    pub fn param_count(&self) -> usize {
        PerceiverStage::param_count(1, self.fused_dim, self.feature_dim, self.fused_dim, self.stage1_depth)
            + PerceiverStage::param_count(
                self.num_tokens,
                self.output_dim,
                self.fused_dim,
                self.output_dim,
                self.stage2_depth,
            )
            + (self.max_frames + 1) * self.fused_dim
            + NUM_TASKS * self.fused_dim
    }
}

/// Learned latents plus cross-attention blocks between an input and output projection.
#[derive(Debug, Clone)]
pub struct PerceiverStage {
    pub input: Linear,
    pub latents: ParamId,
    pub blocks: Vec<CrossAttentionBlock>,
    pub output: Linear,
    pub num_latents: usize,
    pub width: usize,
}

impl PerceiverStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        num_latents: usize,
        width: usize,
        in_dim: usize,
        out_dim: usize,
        depth: usize,
        heads: usize,
        latent_std: f64,
        rng: &mut Rng64,
    ) -> Result<Self> {
        let input = Linear::new(store, &format!("{name}.input"), in_dim, width, true, (in_dim as f64).powf(-0.5), false, rng);
        let latents = store.normal(&format!("{name}.latents"), num_latents, width, latent_std, false, rng);
        let blocks = (0..depth)
            .map(|i| CrossAttentionBlock::new(store, &format!("{name}.block{i}"), width, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let output = Linear::new(store, &format!("{name}.output"), width, out_dim, true, (width as f64).powf(-0.5), false, rng);
        Ok(Self {
            input,
            latents,
            blocks,
            output,
            num_latents,
            width,
        })
    }

    pub fn param_count(num_latents: usize, width: usize, in_dim: usize, out_dim: usize, depth: usize) -> usize {
        Linear::param_count(in_dim, width, true)
            + num_latents * width
            + depth * CrossAttentionBlock::param_count(width)
            + Linear::param_count(width, out_dim, true)
    }

    /// Runs the stage with `latent_rows[i]` as the latent used by query row `i`.
    pub fn forward(&self, tape: &mut Tape, latent_rows: &[usize], inputs: Var, groups: &[AttentionGroup]) -> Result<StageOutput> {
        let table = tape.param(self.latents);
        let mut latents = tape.gather_rows(table, latent_rows)?;
        let projected = self.input.forward(tape, inputs)?;
        let mut attention = Vec::new();
        for block in &self.blocks {
            let out = block.forward(tape, latents, projected, groups)?;
            latents = out.output;
            attention.push(out.attention);
        }
        let output = self.output.forward(tape, latents)?;
        Ok(StageOutput { output, attention })
    }
}

pub struct StageOutput {
    pub output: Var,
    /// Attention nodes, indexed by block then group.
    pub attention: Vec<Vec<Var>>,
}

/// Fixed-size visual context, shape (c, D2).
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectorOutput(pub Array2<f64>);

impl ConnectorOutput {
    pub fn num_tokens(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }
}

#[derive(Debug, Clone)]
pub struct Connector {
    pub config: ConnectorConfig,
    pub stage1: PerceiverStage,
    pub stage2: PerceiverStage,
    pub positions: ParamId,
    pub tasks: ParamId,
}

impl Connector {
    pub fn new(config: ConnectorConfig, store: &mut ParamStore, rng: &mut Rng64) -> Result<Self> {
        config.validate()?;
        let stage1 = PerceiverStage::new(
            store,
            "connector.stage1",
            1,
            config.fused_dim,
            config.feature_dim,
            config.fused_dim,
            config.stage1_depth,
            config.heads,
            config.table_std,
            rng,
        )?;
        let stage2 = PerceiverStage::new(
            store,
            "connector.stage2",
            config.num_tokens,
            config.output_dim,
            config.fused_dim,
            config.output_dim,
            config.stage2_depth,
            config.heads,
            config.table_std,
            rng,
        )?;
        let positions = store.normal("connector.positions", config.max_frames + 1, config.fused_dim, config.table_std, false, rng);
        let tasks = store.normal("connector.tasks", NUM_TASKS, config.fused_dim, config.table_std, false, rng);
        Ok(Self {
            config,
            stage1,
            stage2,
            positions,
            tasks,
        })
    }

    /// Stage 1 over several timesteps at once. `frames[i]` holds the valid
    /// view features of timestep `i`; returns (timesteps, D1).
    fn fuse(&self, tape: &mut Tape, frames: &[Vec<ArrayView2<'_, f32>>]) -> Result<(Var, StageOutput)> {
        let d = self.config.feature_dim;
        let mut rows: Vec<f64> = Vec::new();
        let mut groups = Vec::with_capacity(frames.len());
        let mut start = 0;
        for (t, views) in frames.iter().enumerate() {
            if views.is_empty() {
                return Err(Error::invalid(format!("timestep {t} has no unmasked view")));
            }
            for view in views {
                if view.ncols() != d {
                    return Err(Error::shape(format!("feature width {} vs configured {d}", view.ncols())));
                }
                rows.extend(view.iter().map(|&x| x as f64));
            }
            let end = start + views.iter().map(|v| v.nrows()).sum::<usize>();
            groups.push(AttentionGroup {
                queries: t..t + 1,
                keys: start..end,
                key_mask: None,
            });
            start = end;
        }
        let inputs = Array2::from_shape_vec((start, d), rows).map_err(|e| Error::shape(e.to_string()))?;
        let inputs = tape.input(inputs);
        let out = self.stage1.forward(tape, &vec![0; frames.len()], inputs, &groups)?;
        Ok((out.output, out))
    }

    /// Fuses the views of one timestep into a (1, D1) vector.
    pub fn view_fuse(&self, tape: &mut Tape, features: ArrayView2<'_, f32>, view_mask: &[bool]) -> Result<Var> {
        if view_mask.len() != features.nrows() {
            return Err(Error::shape(format!(
                "{} views but {} mask entries",
                features.nrows(),
                view_mask.len()
            )));
        }
        let valid: Vec<ArrayView2<'_, f32>> = (0..features.nrows())
            .filter(|&v| view_mask[v])
            .map(|v| features.slice(ndarray::s![v..v + 1, ..]))
            .collect();
        if valid.is_empty() {
            return Err(Error::invalid("no unmasked view at this timestep"));
        }
        Ok(self.fuse(tape, &[valid])?.0)
    }

    /// Stage 2 over fused rows observed at seconds `times`; returns (c, D2).
    pub fn temporal_summarize(&self, tape: &mut Tape, fused: Var, times: &[usize], task: usize) -> Result<Var> {
        if task >= NUM_TASKS {
            return Err(Error::invalid(format!("task id {task} outside [0, {NUM_TASKS})")));
        }
        if times.is_empty() || tape.value(fused).nrows() != times.len() {
            return Err(Error::shape(format!(
                "{} fused rows for {} timestamps",
                tape.value(fused).nrows(),
                times.len()
            )));
        }
        if let Some(&t) = times.iter().find(|&&t| t >= self.config.max_frames) {
            return Err(Error::invalid(format!(
                "second {t} exceeds position table capacity of {} frames",
                self.config.max_frames
            )));
        }
        let task_table = tape.param(self.tasks);
        let task_row = tape.gather_rows(task_table, &[task])?;
        let sequence = tape.concat_rows(&[task_row, fused])?;
        let position_ids: Vec<usize> = std::iter::once(0).chain(times.iter().map(|t| t + 1)).collect();
        let table = tape.param(self.positions);
        let positions = tape.gather_rows(table, &position_ids)?;
        let inputs = tape.add(sequence, positions)?;
        let n = times.len() + 1;
        let c = self.config.num_tokens;
        let groups = [AttentionGroup {
            queries: 0..c,
            keys: 0..n,
            key_mask: None,
        }];
        let latent_rows: Vec<usize> = (0..c).collect();
        Ok(self.stage2.forward(tape, &latent_rows, inputs, &groups)?.output)
    }

    /// Full connector. With a window, only frames in `[start, end]` are used
    /// (event context f_E); without one the whole video is used (f_V).
    pub fn connect(&self, tape: &mut Tape, tensor: &FeatureTensor, task: usize, window: Option<EventWindow>) -> Result<Var> {
        let nf = tensor.num_frames();
        let window = match window {
            Some(w) if w.end >= nf => {
                return Err(Error::EmptyWindow(format!(
                    "window [{}, {}] outside {nf} frames",
                    w.start, w.end
                )))
            }
            Some(w) => w,
            None => EventWindow { start: 0, end: nf - 1 },
        };
        let mut times = Vec::new();
        let mut frames = Vec::new();
        for t in window.start..=window.end {
            let at = tensor.at_time(t);
            let views: Vec<_> = (0..tensor.num_views())
                .filter(|&v| tensor.mask()[[v, t]])
                .map(|v| at.slice_move(ndarray::s![v..v + 1, ..]))
                .collect();
            // Seconds where every view has already ended carry no information.
            if !views.is_empty() {
                times.push(t);
                frames.push(views);
            }
        }
        if frames.is_empty() {
            return Err(Error::EmptyWindow(format!(
                "no valid frame in [{}, {}]",
                window.start, window.end
            )));
        }
        let (fused, _) = self.fuse(tape, &frames)?;
        self.temporal_summarize(tape, fused, &times, task)
    }

    /// Evaluates [`Connector::connect`] without keeping the graph.
    pub fn connect_value(&self, store: &ParamStore, tensor: &FeatureTensor, task: usize, window: Option<EventWindow>) -> Result<ConnectorOutput> {
        let mut tape = Tape::new(store);
        let out = self.connect(&mut tape, tensor, task, window)?;
        Ok(ConnectorOutput(tape.value(out).clone()))
    }

    /// Stage-1 block-0 attention for one timestep, one matrix per head.
    pub fn view_attention(&self, store: &ParamStore, features: ArrayView2<'_, f32>, view_mask: &[bool]) -> Result<Vec<Array2<f64>>> {
        let mut tape = Tape::new(store);
        let valid: Vec<_> = (0..features.nrows())
            .filter(|&v| view_mask[v])
            .map(|v| features.slice(ndarray::s![v..v + 1, ..]))
            .collect();
        let (_, stage) = self.fuse(&mut tape, &[valid])?;
        let node = stage.attention[0][0];
        Ok(tape.attention_weights(node).expect("attention node").to_vec())
    }
}

/// One cross-attention block applied to explicit latents and inputs with a
/// key mask. Returns the block output and the per-head attention weights.
pub fn cross_attend(
    tape: &mut Tape,
    block: &CrossAttentionBlock,
    latents: Var,
    inputs: Var,
    key_mask: &[bool],
) -> Result<(Var, Vec<Array2<f64>>)> {
    let (k, n) = (tape.value(latents).nrows(), tape.value(inputs).nrows());
    if key_mask.len() != n {
        return Err(Error::shape(format!("{n} inputs but {} mask entries", key_mask.len())));
    }
    if !key_mask.iter().any(|&m| m) {
        return Err(Error::invalid("every key is masked"));
    }
    let groups = [AttentionGroup {
        queries: 0..k,
        keys: 0..n,
        key_mask: Some(key_mask.to_vec()),
    }];
    let out = block.forward(tape, latents, inputs, &groups)?;
    let weights = tape.attention_weights(out.attention[0]).expect("attention node").to_vec();
    Ok((out.output, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn small_config() -> ConnectorConfig {
        ConnectorConfig {
            feature_dim: 8,
            fused_dim: 8,
            output_dim: 12,
            num_tokens: 3,
            heads: 2,
            max_frames: 16,
            ..ConnectorConfig::default()
        }
    }

    fn random_tensor(nv: usize, nf: usize, d: usize, rng: &mut Rng64) -> FeatureTensor {
        let data = Array3::from_shape_simple_fn((nv, nf, d), || rng.normal() as f32);
        FeatureTensor::new(data, Array2::from_elem((nv, nf), true)).unwrap()
    }

    #[test]
    fn param_count_matches_hand_count() {
        // D=8, D1=8, D2=12, c=3, depth 1, 16 frames:
        // stage1: 8*8+8 + 1*8 + (12*64+12*8) + 8*8+8 = 72 + 8 + 864 + 72 = 1016
        // stage2: 8*12+12 + 3*12 + (12*144+12*12) + 12*12+12 = 108 + 36 + 1872 + 156 = 2172
        // tables: 17*8 + 10*8 = 216
        let config = small_config();
        assert_eq!(config.param_count(), 1016 + 2172 + 216);
        let mut store = ParamStore::new();
        Connector::new(config.clone(), &mut store, &mut Rng64::new(0)).unwrap();
        assert_eq!(store.count(false), config.param_count());
        assert_eq!(store.count(true), 0);
    }

    #[test]
    fn single_key_gets_all_weight() {
        let mut store = ParamStore::new();
        let mut rng = Rng64::new(1);
        let block = CrossAttentionBlock::new(&mut store, "b", 8, 2, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let lat = tape.input(Array2::from_shape_simple_fn((1, 8), || rng.normal()));
        let inp = tape.input(Array2::from_shape_simple_fn((1, 8), || rng.normal()));
        let (_, weights) = cross_attend(&mut tape, &block, lat, inp, &[true]).unwrap();
        for head in weights {
            assert_eq!(head[[0, 0]], 1.0);
        }
    }

    #[test]
    fn masked_keys_do_not_affect_output() {
        let mut store = ParamStore::new();
        let mut rng = Rng64::new(2);
        let block = CrossAttentionBlock::new(&mut store, "b", 8, 2, &mut rng).unwrap();
        let lat = Array2::from_shape_simple_fn((3, 8), || rng.normal());
        let inp = Array2::from_shape_simple_fn((5, 8), || rng.normal());
        let mask = [true, false, true, true, false];
        let run = |inputs: Array2<f64>| {
            let mut tape = Tape::new(&store);
            let l = tape.input(lat.clone());
            let i = tape.input(inputs);
            let (out, weights) = cross_attend(&mut tape, &block, l, i, &mask).unwrap();
            (tape.value(out).clone(), weights)
        };
        let (base, weights) = run(inp.clone());
        for head in &weights {
            for row in head.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert_eq!(row[1], 0.0);
                assert_eq!(row[4], 0.0);
            }
        }
        let mut perturbed = inp;
        perturbed.row_mut(1).fill(1e6);
        perturbed.row_mut(4).mapv_inplace(|v| -3.0 * v + 7.0);
        let (again, _) = run(perturbed);
        assert!(base.iter().zip(again.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));

        let mut tape = Tape::new(&store);
        let l = tape.input(lat.clone());
        let i = tape.input(Array2::zeros((2, 8)));
        assert!(cross_attend(&mut tape, &block, l, i, &[false, false]).is_err());
    }

    #[test]
    fn output_shape_is_constant() {
        let config = small_config();
        let mut store = ParamStore::new();
        let mut rng = Rng64::new(3);
        let connector = Connector::new(config, &mut store, &mut rng).unwrap();
        for (nv, nf) in [(1, 1), (2, 5), (4, 16)] {
            let t = random_tensor(nv, nf, 8, &mut rng);
            let out = connector.connect_value(&store, &t, 3, None).unwrap();
            assert_eq!(out.shape(), (3, 12));
        }
        let too_long = random_tensor(1, 17, 8, &mut rng);
        assert!(connector.connect_value(&store, &too_long, 0, None).is_err());
    }

    #[test]
    fn connect_is_the_composition_of_its_stages() {
        let config = small_config();
        let mut store = ParamStore::new();
        let mut rng = Rng64::new(4);
        let connector = Connector::new(config, &mut store, &mut rng).unwrap();
        let tensor = random_tensor(3, 6, 8, &mut rng);
        let window = EventWindow::new(1, 4).unwrap();
        let direct = connector.connect_value(&store, &tensor, 7, Some(window)).unwrap();

        let mut tape = Tape::new(&store);
        let fused: Vec<Var> = (1..=4)
            .map(|t| {
                connector
                    .view_fuse(&mut tape, tensor.at_time(t), &tensor.view_mask_at(t))
                    .unwrap()
            })
            .collect();
        let fused = tape.concat_rows(&fused).unwrap();
        let out = connector.temporal_summarize(&mut tape, fused, &[1, 2, 3, 4], 7).unwrap();
        let composed = tape.value(out);
        assert!(direct.0.iter().zip(composed.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn full_window_equals_no_window() {
        let mut store = ParamStore::new();
        let mut rng = Rng64::new(5);
        let connector = Connector::new(small_config(), &mut store, &mut rng).unwrap();
        let tensor = random_tensor(2, 5, 8, &mut rng);
        let a = connector.connect_value(&store, &tensor, 0, None).unwrap();
        let b = connector
            .connect_value(&store, &tensor, 0, Some(EventWindow::new(0, 4).unwrap()))
            .unwrap();
        assert_eq!(a, b);
        assert!(connector
            .connect_value(&store, &tensor, 0, Some(EventWindow::new(2, 5).unwrap()))
            .is_err());
    }

    #[test]
    fn fully_masked_timesteps_are_skipped() {
        let mut store = ParamStore::new();
        let mut rng = Rng64::new(6);
        let connector = Connector::new(small_config(), &mut store, &mut rng).unwrap();
        let data = Array3::from_shape_simple_fn((2, 4, 8), || rng.normal() as f32);
        let mut mask = Array2::from_elem((2, 4), true);
        mask[[0, 3]] = false;
        mask[[1, 3]] = false;
        let tensor = FeatureTensor::new(data, mask).unwrap();
        assert!(connector.connect_value(&store, &tensor, 0, None).is_ok());
        assert!(matches!(
            connector.connect_value(&store, &tensor, 0, Some(EventWindow::new(3, 3).unwrap())),
            Err(Error::EmptyWindow(_))
        ));
        let mut tape = Tape::new(&store);
        assert!(connector
            .view_fuse(&mut tape, tensor.at_time(3), &tensor.view_mask_at(3))
            .is_err());
    }

    #[test]
    fn task_token_changes_output() {
        let mut store = ParamStore::new();
        let mut rng = Rng64::new(7);
        let connector = Connector::new(small_config(), &mut store, &mut rng).unwrap();
        let tensor = random_tensor(2, 4, 8, &mut rng);
        let a = connector.connect_value(&store, &tensor, 2, None).unwrap();
        let b = connector.connect_value(&store, &tensor, 5, None).unwrap();
        assert_ne!(a, b);
        assert!(connector.connect_value(&store, &tensor, 10, None).is_err());
    }
}
