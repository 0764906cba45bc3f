use rand::Rng;

use super::arch::{LayerConfig, LayerPlan};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::tensor::{LogitBatch, Tensor};

enum Aux {
    None,
    ArgMax(Vec<usize>),
    Mask(Vec<f64>),
}

/// Activations of one example: `acts[i]` is the input of layer `i`, the last
/// entry is the network output.
struct Trace {
    acts: Vec<Vec<f64>>,
    aux: Vec<Aux>,
}

fn check_input(params: &ModelParams, input: &Tensor) -> Result<()> {
    let arch = params.architecture();
    if input.row_len() != arch.input_len() || input.shape().len() < 2 {
        let layer = arch
            .plans()
            .first()
            .map(|p| p.label(0))
            .unwrap_or_else(|| "input".into());
        return Err(Error::ShapeMismatch {
            layer,
            expected: format!(
                "[batch, {}] ({} channels x {})",
                arch.input_len(),
                arch.input().channels,
                arch.input().length
            ),
            got: format!("{:?}", input.shape()),
        });
    }
    Ok(())
}

fn forward_layer(
    plan: &LayerPlan,
    layer: &super::params::LayerParams,
    x: &[f64],
    rng: Option<&mut (dyn rand::RngCore + '_)>,
) -> (Vec<f64>, Aux) {
    match plan.config {
        LayerConfig::Dense { units } => {
            let n_in = x.len();
            let mut out = layer.bias.clone();
            for (o, out_o) in out.iter_mut().enumerate().take(units) {
                let w = &layer.weights[o * n_in..(o + 1) * n_in];
                *out_o += w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
            (out, Aux::None)
        }
        LayerConfig::Conv1d { filters, kernel } => {
            let c_in = plan.input.channels;
            let l_in = plan.input.length;
            let l_out = plan.output.length;
            let mut out = vec![0.0; filters * l_out];
            for f in 0..filters {
                let row = &mut out[f * l_out..(f + 1) * l_out];
                row.fill(layer.bias[f]);
                for c in 0..c_in {
                    let xs = &x[c * l_in..(c + 1) * l_in];
                    let w = &layer.weights[(f * c_in + c) * kernel..(f * c_in + c + 1) * kernel];
                    for (p, r) in row.iter_mut().enumerate() {
                        *r += w.iter().zip(&xs[p..p + kernel]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            (out, Aux::None)
        }
        LayerConfig::Maxpool1d { pool } => {
            let c = plan.input.channels;
            let l_in = plan.input.length;
            let l_out = plan.output.length;
            let mut out = Vec::with_capacity(c * l_out);
            let mut arg = Vec::with_capacity(c * l_out);
            for ch in 0..c {
                for q in 0..l_out {
                    let start = ch * l_in + q * pool;
                    let mut best = start;
                    // strict comparison: ties go to the lowest index
                    for j in start + 1..start + pool {
                        if x[j] > x[best] {
                            best = j;
                        }
                    }
                    out.push(x[best]);
                    arg.push(best);
                }
            }
            (out, Aux::ArgMax(arg))
        }
        LayerConfig::Relu => (x.iter().map(|&v| v.max(0.0)).collect(), Aux::None),
        LayerConfig::Dropout { rate } => {
            let rate = rate.unwrap_or(0.0);
            match rng {
                Some(rng) if rate > 0.0 => {
                    let keep = 1.0 / (1.0 - rate);
                    let mask: Vec<f64> = x
                        .iter()
                        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                        .collect();
                    let out = x.iter().zip(&mask).map(|(a, m)| a * m).collect();
                    (out, Aux::Mask(mask))
                }
                _ => (x.to_vec(), Aux::None),
            }
        }
        LayerConfig::SoftmaxOutput => (x.to_vec(), Aux::None),
    }
}

fn forward_example(params: &ModelParams, x: &[f64], mut rng: Option<&mut dyn rand::RngCore>) -> Trace {
    let plans = params.architecture().plans();
    let mut acts = Vec::with_capacity(plans.len() + 1);
    let mut aux = Vec::with_capacity(plans.len());
    acts.push(x.to_vec());
    for (plan, layer) in plans.iter().zip(params.layers()) {
        let (out, a) = forward_layer(plan, layer, acts.last().unwrap(), rng.as_deref_mut());
        acts.push(out);
        aux.push(a);
    }
    Trace { acts, aux }
}

fn backward_example(params: &ModelParams, trace: &Trace, dout: &[f64], grads: &mut ModelParams) -> Vec<f64> {
    let plans = params.architecture().plans();
    let mut g = dout.to_vec();
    for (i, plan) in plans.iter().enumerate().rev() {
        let x = &trace.acts[i];
        let layer = &params.layers()[i];
        let gl = &mut grads.layers_mut()[i];
        g = match plan.config {
            LayerConfig::Dense { units } => {
                let n_in = x.len();
                let mut dx = vec![0.0; n_in];
                for o in 0..units {
                    let go = g[o];
                    gl.bias[o] += go;
                    let w = &layer.weights[o * n_in..(o + 1) * n_in];
                    let dw = &mut gl.weights[o * n_in..(o + 1) * n_in];
                    for k in 0..n_in {
                        dw[k] += go * x[k];
                        dx[k] += w[k] * go;
                    }
                }
                dx
            }
            LayerConfig::Conv1d { filters, kernel } => {
                let c_in = plan.input.channels;
                let l_in = plan.input.length;
                let l_out = plan.output.length;
                let mut dx = vec![0.0; c_in * l_in];
                for f in 0..filters {
                    let go = &g[f * l_out..(f + 1) * l_out];
                    gl.bias[f] += go.iter().sum::<f64>();
                    for c in 0..c_in {
                        let base = (f * c_in + c) * kernel;
                        let xs = &x[c * l_in..(c + 1) * l_in];
                        for (p, &gp) in go.iter().enumerate() {
                            for k in 0..kernel {
                                gl.weights[base + k] += gp * xs[p + k];
                                dx[c * l_in + p + k] += layer.weights[base + k] * gp;
                            }
                        }
                    }
                }
                dx
            }
            LayerConfig::Maxpool1d { .. } => {
                let mut dx = vec![0.0; x.len()];
                if let Aux::ArgMax(arg) = &trace.aux[i] {
                    for (&j, &gq) in arg.iter().zip(&g) {
                        dx[j] += gq;
                    }
                }
                dx
            }
            LayerConfig::Relu => x
                .iter()
                .zip(&g)
                .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                .collect(),
            LayerConfig::Dropout { .. } => match &trace.aux[i] {
                Aux::Mask(mask) => g.iter().zip(mask).map(|(a, m)| a * m).collect(),
                _ => g,
            },
            LayerConfig::SoftmaxOutput => g,
        };
    }
    g
}

/// Logits for every input row.
///
/// With `training` set, dropout masks are drawn from `rng` example by
/// example; otherwise `rng` is never touched.
pub fn forward<R: Rng + ?Sized>(
    params: &ModelParams,
    input: &Tensor,
    training: bool,
    rng: &mut R,
) -> Result<LogitBatch> {
    check_input(params, input)?;
    if !training {
        return infer(params, input);
    }
    let n = params.architecture().n_classes();
    let mut out = Vec::with_capacity(input.batch_len() * n);
    let mut rng = rng;
    for row in input.rows() {
        let mut trace = forward_example(params, row, Some(&mut rng as &mut dyn rand::RngCore));
        out.append(trace.acts.last_mut().unwrap());
    }
    Ok(Tensor::from_parts_unchecked(vec![input.batch_len(), n], out))
}

/// Inference-mode logits (dropout disabled).
pub fn infer(params: &ModelParams, input: &Tensor) -> Result<LogitBatch> {
    infer_with(params, input, false)
}

/// Inference-mode logits, optionally evaluating rows on the rayon pool.
/// Row order and values do not depend on `parallel`.
pub fn infer_with(params: &ModelParams, input: &Tensor, parallel: bool) -> Result<LogitBatch> {
    check_input(params, input)?;
    let n = params.architecture().n_classes();
    let rows: Vec<&[f64]> = input.rows().collect();
    let outs = crate::par::map(parallel, &rows, |row| {
        let mut trace = forward_example(params, row, None);
        trace.acts.pop().unwrap()
    });
    let data = outs.into_iter().flatten().collect();
    Ok(Tensor::from_parts_unchecked(vec![input.batch_len(), n], data))
}

/// Loss value and gradient of `loss` over the batch, w.r.t. every parameter.
///
/// `loss` teachers must be row-aligned with `inputs`. Dropout masks are drawn
/// from `rng` in the same order as [`forward`] draws them.
pub fn backward<R: Rng + ?Sized>(
    params: &ModelParams,
    inputs: &Tensor,
    labels: &[usize],
    loss: &LossSpec,
    rng: &mut R,
) -> Result<(f64, ModelParams)> {
    check_input(params, inputs)?;
    loss.validate()?;
    if labels.len() != inputs.batch_len() {
        return Err(Error::ShapeMismatch {
            layer: "labels".into(),
            expected: format!("{} labels", inputs.batch_len()),
            got: format!("{} labels", labels.len()),
        });
    }
    let n = params.architecture().n_classes();
    let mut rng = rng;
    let traces: Vec<Trace> = inputs
        .rows()
        .map(|row| forward_example(params, row, Some(&mut rng as &mut dyn rand::RngCore)))
        .collect();
    let mut logits = Vec::with_capacity(traces.len() * n);
    for t in &traces {
        logits.extend_from_slice(t.acts.last().unwrap());
    }
    let logits = Tensor::from_parts_unchecked(vec![traces.len(), n], logits);
    let (value, dlogits) = loss.value_and_grad(&logits, labels)?;
    let mut grads = ModelParams::zeros(params.architecture());
    for (trace, d) in traces.iter().zip(dlogits.rows()) {
        backward_example(params, trace, d, &mut grads);
    }
    Ok((value, grads))
}

/// `params - lr * grads`.
pub fn sgd_step(params: &ModelParams, grads: &ModelParams, lr: f64) -> Result<ModelParams> {
    let mut next = params.clone();
    next.add_scaled(grads, -lr)?;
    Ok(next)
}
