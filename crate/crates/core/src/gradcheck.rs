//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::backbone::MultimodalModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor used in the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Starting step for [`check_model`]. Large enough that roundoff stays well below the
/// smallest adaptor gradients; kink-safe halving shrinks it where needed.
pub const MODEL_CHECK_STEP: f64 = 1e-3;

/// Kink-safe halving gives up below this step.
pub const MIN_STEP: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many entries per tensor (sampled with `seed`); `None` checks all.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
    /// Halve the step per entry until the ReLU pattern at both `x ± h` equals the one at `x`,
    /// so that the difference never straddles a kink.
    pub kink_safe: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries_per_param: None,
            seed: 0,
            kink_safe: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradError {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamGradError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares tape gradients with central differences for every named parameter.
///
/// `forward` receives the tape and one leaf per parameter (in order) and must
/// return a scalar loss. It must be deterministic.
pub fn finite_diff_check<F>(params: &[(String, Tensor)], forward: F, options: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if options.step <= 0.0 || !options.step.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {}",
            options.step
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t)).collect();
    let loss = forward(&mut tape, &vars)?;
    let base_pattern = tape.relu_pattern();
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("param leaf has a gradient").to_vec())
        .collect();
    drop(tape);

    let eval = |values: &[Tensor]| -> Result<(f64, bool)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t)).collect();
        let loss = forward(&mut tape, &vars)?;
        let same = !options.kink_safe || tape.relu_pattern() == base_pattern;
        Ok((tape.value(loss).item(), same))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport::default();
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let n = tensor.numel();
        let entries: Vec<usize> = match options.max_entries_per_param {
            Some(k) if k < n => {
                let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let mut worst = (0.0, 0);
        for &e in &entries {
            let orig = values[pi].data()[e];
            let mut h = options.step;
            let numeric = loop {
                values[pi].data_mut()[e] = orig + h;
                let (plus, same_plus) = eval(&values)?;
                values[pi].data_mut()[e] = orig - h;
                let (minus, same_minus) = eval(&values)?;
                values[pi].data_mut()[e] = orig;
                if (same_plus && same_minus) || h / 2.0 < MIN_STEP {
                    break (plus - minus) / (2.0 * h);
                }
                h /= 2.0;
            };
            let err = relative_error(analytic[pi][e], numeric);
            if err > worst.0 || !err.is_finite() {
                worst = (err, e);
            }
        }
        report.params.push(ParamGradError {
            name: name.clone(),
            checked: entries.len(),
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    Ok(report)
}

/// Randomizes every adaptor of `model` to `N(0, std²)` entries with all triplets active, so
/// that adaptor gradients are not vanishingly small at the check point.
pub fn randomize_adaptors(model: &mut MultimodalModel, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for a in model.adaptors_mut() {
        for t in a.tensors_mut() {
            *t = Tensor::randn(t.shape().to_vec(), std, &mut rng);
        }
        for i in 0..a.rank() {
            let v = a.lambda().data()[i];
            a.set_triplet(i, true, v);
        }
    }
}

/// Finite-difference check of the full multimodal forward and cross-entropy loss of `model`
/// on a random batch of `batch` samples drawn with `seed`. Always kink-safe.
pub fn check_model(model: &MultimodalModel, batch: usize, options: &GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x9e37_79b9_7f4a_7c15);
    let shape = vec![batch, cfg.input_channels, cfg.image_size, cfg.image_size];
    let inputs: Vec<Tensor> = (0..model.input_modalities())
        .map(|_| Tensor::randn(shape.clone(), 1.0, &mut rng))
        .collect();
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..cfg.head.classes)).collect();
    let params = model.params();
    finite_diff_check(
        &params,
        |tape, vars| {
            let bound = model.bind_with(vars)?;
            let xs: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let logits = model.record_logits(tape, &bound, &xs)?;
            tape.cross_entropy(logits, &labels)
        },
        &GradCheckOptions {
            kink_safe: true,
            ..options.clone()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_parameter_model_has_empty_report() {
        let report = finite_diff_check(
            &[],
            |tape, _| Ok(tape.constant(Tensor::scalar(1.0))),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.params.is_empty());
        assert_eq!(report.max_rel_error(), 0.0);
    }

    #[test]
    fn linear_regression_matches_analytic_gradient() {
        // y = w·x + b on three points, loss = mean squared error.
        let xs = [0.5, -1.0, 2.0];
        let ys = [1.0, 0.2, -0.7];
        let (w, b) = (0.3, -0.1);
        let x = Tensor::new(vec![3, 1], xs.to_vec()).unwrap();
        let y = Tensor::new(vec![3, 1], ys.to_vec()).unwrap();
        let params = vec![
            ("w".to_string(), Tensor::new(vec![1, 1], vec![w]).unwrap()),
            ("b".to_string(), Tensor::new(vec![1], vec![b]).unwrap()),
        ];
        let forward = |tape: &mut Tape, v: &[Var]| {
            let xv = tape.constant(x.clone());
            let pred = tape.linear(xv, v[0], Some(v[1]))?;
            tape.mse(pred, &y)
        };
        // closed form: dL/dw = 2/n Σ (w x + b − y) x, dL/db = 2/n Σ (w x + b − y)
        let mut dw = 0.0;
        let mut db = 0.0;
        for i in 0..3 {
            let r = w * xs[i] + b - ys[i];
            dw += 2.0 / 3.0 * r * xs[i];
            db += 2.0 / 3.0 * r;
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t)).collect();
        let loss = forward(&mut tape, &vars).unwrap();
        tape.backward(loss).unwrap();
        assert!((tape.grad(vars[0]).unwrap()[0] - dw).abs() < 1e-14);
        assert!((tape.grad(vars[1]).unwrap()[0] - db).abs() < 1e-14);

        let report = finite_diff_check(&params, forward, &GradCheckOptions::default()).unwrap();
        assert!(report.passes(1e-6), "{report:?}");
    }

    #[test]
    fn reports_wrong_gradient() {
        // A forward whose "gradient" is wrong cannot be built from tape ops, so
        // instead check that the metric flags disagreement.
        assert!(relative_error(1.0, 1.1) > 0.09);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }

    #[test]
    fn kink_safe_step_avoids_relu_corner() {
        // input sits 1e-7 from the kink, well inside the default step
        let x = Tensor::new(vec![3], vec![1e-7, -0.5, 0.8]).unwrap();
        let forward = |tape: &mut Tape, v: &[Var]| {
            let r = tape.relu(v[0]);
            Ok(tape.sum(r))
        };
        let params = vec![("x".to_string(), x)];
        let plain = finite_diff_check(&params, forward, &GradCheckOptions::default()).unwrap();
        assert!(plain.max_rel_error() > 0.1);
        let safe = GradCheckOptions {
            kink_safe: true,
            ..Default::default()
        };
        assert!(finite_diff_check(&params, forward, &safe).unwrap().max_rel_error() < 1e-9);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let opts = GradCheckOptions {
            step: 0.0,
            ..Default::default()
        };
        assert!(finite_diff_check(&[], |t, _| Ok(t.constant(Tensor::scalar(0.0))), &opts).is_err());
    }
}
