//! Event-matching, generation and total losses.
//!
//! Event matching compares the full-video context `f_V` with the
//! event-window context `f_E` token by token. Rows are L2-normalized, the
//! `(c, c)` similarity matrix is divided by a temperature, each row goes
//! through a softmax, and the cross-entropy against the identity keeps only
//! the diagonal: `L_M = -(1/c) Σ_i log p_ii`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone)]
pub struct MatchingInputs {
    pub full: Array2<f64>,
    pub event: Array2<f64>,
    pub temperature: f64,
}

impl MatchingInputs {
    pub fn new(full: Array2<f64>, event: Array2<f64>, temperature: f64) -> Result<Self> {
        let inputs = Self { full, event, temperature };
        inputs.validate()?;
        Ok(inputs)
    }

    fn validate(&self) -> Result<()> {
        check_matching(&self.full, &self.event, self.temperature)
    }

    pub fn loss(&self) -> Result<f64> {
        matching_loss_value(&self.full, &self.event, self.temperature)
    }
}

fn check_matching(full: &Array2<f64>, event: &Array2<f64>, temperature: f64) -> Result<()> {
    if full.dim() != event.dim() {
        return Err(Error::shape(format!(
            "f_V {:?} vs f_E {:?}",
            full.dim(),
            event.dim()
        )));
    }
    if full.nrows() == 0 {
        return Err(Error::shape("matching loss needs at least one token"));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::invalid(format!("temperature {temperature} must be finite and positive")));
    }
    if full.iter().chain(event.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matching inputs".into()));
    }
    Ok(())
}

/// Records the event-matching loss on `tape`.
pub fn matching_loss(tape: &mut Tape, full: Var, event: Var, temperature: f64) -> Result<Var> {
    check_matching(tape.value(full), tape.value(event), temperature)?;
    let c = tape.value(full).nrows();
    let full = tape.row_normalize(full)?;
    let event = tape.row_normalize(event)?;
    let similarity = tape.matmul_t(full, event)?;
    let logits = tape.scale(similarity, 1.0 / temperature);
    let targets: Vec<usize> = (0..c).collect();
    tape.cross_entropy(logits, &targets, &vec![true; c])
}

pub fn matching_loss_value(full: &Array2<f64>, event: &Array2<f64>, temperature: f64) -> Result<f64> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let f = tape.input(full.clone());
    let e = tape.input(event.clone());
    let loss = matching_loss(&mut tape, f, e, temperature)?;
    Ok(tape.scalar(loss))
}

/// Mean token cross-entropy over positions where `mask` is true.
pub fn generation_loss(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    if tape.value(logits).iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    tape.cross_entropy(logits, targets, mask)
}

pub fn generation_loss_value(logits: &Array2<f64>, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let l = tape.input(logits.clone());
    let loss = generation_loss(&mut tape, l, targets, mask)?;
    Ok(tape.scalar(loss))
}

/// `L = L_M + L_G` with unit weights.
pub fn total_loss(matching: f64, generation: f64) -> Result<f64> {
    if !matching.is_finite() {
        return Err(Error::NonFinite("matching loss".into()));
    }
    if !generation.is_finite() {
        return Err(Error::NonFinite("generation loss".into()));
    }
    Ok(matching + generation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng64;

    fn random(rows: usize, cols: usize, rng: &mut Rng64) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.normal())
    }

    /// Rows are orthonormal (Gram-Schmidt on random vectors); needs rows <= cols.
    fn orthonormal_rows(rows: usize, cols: usize, rng: &mut Rng64) -> Array2<f64> {
        let mut m = random(rows, cols, rng);
        for i in 0..rows {
            for j in 0..i {
                let proj = m.row(i).dot(&m.row(j));
                let rj = m.row(j).to_owned();
                m.row_mut(i).scaled_add(-proj, &rj);
            }
            let n = m.row(i).dot(&m.row(i)).sqrt();
            m.row_mut(i).mapv_inplace(|v| v / n);
        }
        m
    }

    #[test]
    fn constant_rows_give_ln_c() {
        let mut rng = Rng64::new(1);
        let row = random(1, 16, &mut rng);
        let full = random(20, 16, &mut rng);
        let event = Array2::from_shape_fn((20, 16), |(_, j)| row[[0, j]]);
        let loss = matching_loss_value(&full, &event, 0.07).unwrap();
        assert!((loss - 20f64.ln()).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn single_token_is_zero() {
        let mut rng = Rng64::new(2);
        let loss = matching_loss_value(&random(1, 8, &mut rng), &random(1, 8, &mut rng), 0.07).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn orthonormal_identity_closed_form() {
        let mut rng = Rng64::new(3);
        let f = orthonormal_rows(20, 32, &mut rng);
        let loss = matching_loss_value(&f, &f, 0.05).unwrap();
        let expected = (19.0 * (-20f64).exp()).ln_1p();
        assert!((loss - expected).abs() <= 1e-6 * expected, "{loss} vs {expected}");
    }

    #[test]
    fn matching_errors() {
        let mut rng = Rng64::new(4);
        let a = random(3, 4, &mut rng);
        assert!(matching_loss_value(&a, &random(2, 4, &mut rng), 0.07).is_err());
        assert!(matching_loss_value(&a, &a, 0.0).is_err());
        let mut zero = a.clone();
        zero.row_mut(1).fill(0.0);
        assert!(matching_loss_value(&zero, &a, 0.07).is_err());
        let mut nan = a.clone();
        nan[[0, 0]] = f64::NAN;
        assert!(matches!(matching_loss_value(&nan, &a, 0.07), Err(Error::NonFinite(_))));
        assert!(MatchingInputs::new(a.clone(), a, -1.0).is_err());
    }

    #[test]
    fn aligned_rows_beat_permuted_rows() {
        for seed in 0..100 {
            let mut rng = Rng64::new(seed);
            let f = orthonormal_rows(8, 16, &mut rng);
            let mut order: Vec<usize> = (0..8).collect();
            rng.shuffle(&mut order);
            let permuted = f.select(ndarray::Axis(0), &order);
            let tau = 0.05 + 0.15 * rng.next_f64();
            let aligned = matching_loss_value(&f, &f, tau).unwrap();
            let shuffled = matching_loss_value(&f, &permuted, tau).unwrap();
            assert!(aligned <= shuffled, "seed {seed}: {aligned} > {shuffled}");
        }
    }

    #[test]
    fn positive_row_scaling_is_ignored() {
        let mut rng = Rng64::new(5);
        let full = random(6, 10, &mut rng);
        let event = random(6, 10, &mut rng);
        let base = matching_loss_value(&full, &event, 0.07).unwrap();
        let mut scaled_full = full.clone();
        let mut scaled_event = event.clone();
        for i in 0..6 {
            scaled_full.row_mut(i).mapv_inplace(|v| v * (0.1 + i as f64 * 3.7));
            scaled_event.row_mut(i).mapv_inplace(|v| v * (50.0 / (1.0 + i as f64)));
        }
        let again = matching_loss_value(&scaled_full, &scaled_event, 0.07).unwrap();
        assert!((base - again).abs() < 1e-6);
    }

    #[test]
    fn matching_gradients_match_finite_differences() {
        let mut rng = Rng64::new(6);
        let full = random(5, 7, &mut rng);
        let event = random(5, 7, &mut rng);
        let tau = 0.2;
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let f = tape.input_with_grad(full.clone());
        let e = tape.input_with_grad(event.clone());
        let loss = matching_loss(&mut tape, f, e, tau).unwrap();
        let grads = tape.backward(loss);
        let h = 1e-5;
        for (which, var) in [(0, f), (1, e)] {
            let analytic = grads.wrt(var).unwrap();
            for r in 0..5 {
                for c in 0..7 {
                    let eval = |delta: f64| {
                        let (mut a, mut b) = (full.clone(), event.clone());
                        if which == 0 {
                            a[[r, c]] += delta;
                        } else {
                            b[[r, c]] += delta;
                        }
                        matching_loss_value(&a, &b, tau).unwrap()
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    let a = analytic[[r, c]];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                    assert!(rel < 1e-4, "[{which}][{r},{c}] {a} vs {numeric}");
                }
            }
        }
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let logits = Array2::from_elem((3, 7), 0.25);
        let loss = generation_loss_value(&logits, &[0, 3, 6], &[true; 3]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn confident_target_closed_form() {
        let mut logits = Array2::zeros((1, 4));
        logits[[0, 2]] = 100.0;
        let loss = generation_loss_value(&logits, &[2], &[true]).unwrap();
        let expected = (3.0 * (-100f64).exp()).ln_1p();
        assert!((loss - expected).abs() < 1e-12);
        assert!(loss < 1e-12);

        let mut margin = Array2::zeros((2, 5));
        margin[[0, 1]] = 50.0;
        margin[[1, 4]] = 50.0;
        assert!(generation_loss_value(&margin, &[1, 4], &[true, true]).unwrap() < 1e-9);
    }

    #[test]
    fn masked_targets_are_ignored() {
        let mut rng = Rng64::new(7);
        let logits = random(4, 6, &mut rng);
        let mask = [true, false, true, true];
        let a = generation_loss_value(&logits, &[1, 2, 3, 4], &mask).unwrap();
        let b = generation_loss_value(&logits, &[1, 5, 3, 4], &mask).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a >= 0.0);
        assert!(generation_loss_value(&logits, &[1, 2, 3, 4], &[false; 4]).is_err());
    }

    #[test]
    fn total_is_plain_sum() {
        assert_eq!(total_loss(0.0, 1.25).unwrap(), 1.25);
        let t = total_loss(20f64.ln(), 7f64.ln()).unwrap();
        assert!((t - 140f64.ln()).abs() < 1e-9);
        assert_eq!(total_loss(0.3, 0.9).unwrap(), total_loss(0.9, 0.3).unwrap());
        assert!(total_loss(f64::NAN, 1.0).is_err());
        assert!(total_loss(1.0, f64::INFINITY).is_err());
    }
}
