//! Finite-difference check of the full training objective against autodiff.

use super::paired::{param_kinds, PairedEvaluator, K};
use crate::architecture::ShapedNetModel;
use crate::engine::{relative_error, GradCheck, Graph, NormMode};
use crate::error::{Error, Result};
use crate::loss::{total_loss_graph, BfLossMode, GridTarget, LossWeights};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

use rand::seq::index::sample;

#[derive(Debug, Clone)]
pub struct ModelCheckOptions {
    pub h: f64,
    /// Check at most this many coordinates per parameter tensor (all if `None`).
    pub per_tensor: Option<usize>,
    pub seed: u64,
    /// Batch statistics (`Train`) or stored running statistics (`Infer`).
    pub norm: NormMode,
}

impl Default for ModelCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-12,
            per_tensor: None,
            seed: 0,
            norm: NormMode::Train,
        }
    }
}

/// Worst coordinate of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub coordinates: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckReport {
    pub overall: GradCheck,
    pub tensors: Vec<TensorCheck>,
    /// Coordinates whose step was shrunk because the two evaluations
    /// straddled an activation kink.
    pub kink_retries: usize,
}

/// Central differences of the training loss with respect to every model
/// parameter, compared with the gradient from one backward pass.
///
/// The two perturbed evaluations of each coordinate run together through a
/// paired evaluator (see [`super::paired`]), reusing every layer upstream of
/// the perturbed parameter. When the leaky-ReLU sign pattern (or the
/// absolute body-fat error) differs between the two evaluations, the step is
/// shrunk by 8x, at most four times.
pub fn check_model_gradients(
    model: &ShapedNetModel,
    images: &Tensor,
    target: &GridTarget,
    weights: &LossWeights,
    mode: BfLossMode,
    opts: &ModelCheckOptions,
) -> Result<ModelCheckReport> {
    if !(opts.h > 0.0) {
        return Err(Error::Parameter(format!(
            "finite-difference step must be > 0, got {}",
            opts.h
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let pv = model.bind_params(&mut g, true);
    let fv = model.forward_graph(&mut g, x, &pv, opts.norm, None, None)?;
    let lv = total_loss_graph(&mut g, fv.heads, fv.bf, target, weights, mode, &model.config)?;
    g.backward(lv.total)?;
    let analytic: Vec<Vec<f64>> = pv
        .iter()
        .zip(model.params())
        .map(|(v, (_, _, t))| g.grad(*v).map_or_else(|| vec![0.0; t.len()], |s| s.to_vec()))
        .collect();
    let baseline: Vec<Tensor> = fv.layer_outputs.iter().map(|v| g.value(*v).clone()).collect();
    drop(g);

    let kinds = param_kinds(model);
    let mut eval = PairedEvaluator::new(model, images, &baseline, target, weights, mode, opts.norm);
    let mut report = ModelCheckReport {
        overall: GradCheck {
            max_relative_error: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
            coordinates: 0,
        },
        tensors: Vec::new(),
        kink_retries: 0,
    };

    for (pi, ((name, _, tensor), (owner, kind))) in model.params().into_iter().zip(kinds).enumerate() {
        let len = tensor.len();
        let coords: Vec<usize> = match opts.per_tensor {
            Some(k) if k < len => {
                let mut rng = seeded(derive_seed(opts.seed, pi as u64));
                let mut idx = sample(&mut rng, len, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..len).collect(),
        };
        let mut tc = TensorCheck {
            name,
            coordinates: 0,
            max_relative_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for chunk in coords.chunks(K) {
            let mut numeric = eval.run(owner, kind, tensor.data(), chunk, &vec![opts.h; chunk.len()]);
            let mut values = numeric.numeric[..chunk.len()].to_vec();
            let mut pending: Vec<usize> = (0..chunk.len()).filter(|&k| numeric.kinked[k]).collect();
            let mut h = opts.h;
            for _ in 0..4 {
                if pending.is_empty() {
                    break;
                }
                h /= 8.0;
                report.kink_retries += pending.len();
                let elems: Vec<usize> = pending.iter().map(|&k| chunk[k]).collect();
                numeric = eval.run(owner, kind, tensor.data(), &elems, &vec![h; elems.len()]);
                let mut still = Vec::new();
                for (j, &k) in pending.iter().enumerate() {
                    values[k] = numeric.numeric[j];
                    if numeric.kinked[j] {
                        still.push(k);
                    }
                }
                pending = still;
            }
            for (&ei, &n) in chunk.iter().zip(&values) {
                let a = analytic[pi][ei];
                let err = relative_error(a, n);
                if tc.coordinates == 0 || err > tc.max_relative_error {
                    tc.max_relative_error = err;
                    tc.worst_index = ei;
                    tc.analytic = a;
                    tc.numeric = n;
                }
                tc.coordinates += 1;
            }
        }
        let o = &mut report.overall;
        if o.coordinates == 0 || tc.max_relative_error > o.max_relative_error {
            o.max_relative_error = tc.max_relative_error;
            o.worst = (pi, tc.worst_index);
            o.analytic = tc.analytic;
            o.numeric = tc.numeric;
        }
        o.coordinates += tc.coordinates;
        report.tensors.push(tc);
    }
    Ok(report)
}

/// Plain central difference of one coordinate: two full forward passes and
/// a subtraction of the two loss values.
#[allow(clippy::too_many_arguments)]
pub fn naive_central_difference(
    model: &ShapedNetModel,
    images: &Tensor,
    target: &GridTarget,
    weights: &LossWeights,
    mode: BfLossMode,
    norm: NormMode,
    param: usize,
    element: usize,
    h: f64,
) -> Result<f64> {
    let mut work = model.clone();
    let orig = work.params_mut()[param].data()[element];
    work.params_mut()[param].data_mut()[element] = orig + h;
    let plus = eval(&work, images, target, weights, mode, norm)?;
    work.params_mut()[param].data_mut()[element] = orig - h;
    let minus = eval(&work, images, target, weights, mode, norm)?;
    Ok((plus - minus) / (2.0 * h))
}

fn eval(
    model: &ShapedNetModel,
    images: &Tensor,
    target: &GridTarget,
    weights: &LossWeights,
    mode: BfLossMode,
    norm: NormMode,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let params = model.bind_params(&mut g, false);
    let fv = model.forward_graph(&mut g, x, &params, norm, None, None)?;
    let lv = total_loss_graph(&mut g, fv.heads, fv.bf, target, weights, mode, &model.config)?;
    let v = g.value(lv.total).data()[0];
    if !v.is_finite() {
        return Err(Error::Evaluation("loss is not finite".into()));
    }
    Ok(v)
}
