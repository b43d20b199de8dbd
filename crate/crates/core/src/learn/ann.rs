//! Feed-forward regression network: `n_layers` dense ReLU layers of equal
//! width, a linear output unit, and a rectifier on the output so predicted
//! counts are never negative.
//!
//! Inputs are standardized with statistics from the training rows; the
//! scaler travels with the model. Training is mini-batch Adam (step 1e-3)
//! with fan-in scaled uniform initialization, single-threaded and fully
//! determined by the seed.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Observations, Scaler};
use crate::error::{Error, Result};
use crate::learn::loss::Loss;
use crate::seed;

pub const LEARNING_RATE: f64 = 1e-3;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnSpec {
    pub loss: Loss,
    pub n_layers: usize,
    pub layer_width: usize,
    pub n_epochs: usize,
    pub batch_size: usize,
    pub k: usize,
}

impl AnnSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.layer_width == 0 {
            return Err(Error::InvalidConfig(
                "ann needs n_layers >= 1 and layer_width >= 1".into(),
            ));
        }
        if !self.batch_size.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "batch size must be a power of two, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Dense layer, weights row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / inputs.max(1) as f64).sqrt();
        Dense {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| rng.random_range(-limit..limit)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.inputs).zip(&self.bias))
        {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnModel {
    pub spec: AnnSpec,
    pub columns: Vec<String>,
    pub scaler: Scaler,
    /// Hidden layers followed by the single-unit output layer.
    pub layers: Vec<Dense>,
    /// Training loss over all training rows before training and after each
    /// epoch.
    pub loss_curve: Vec<f64>,
}

impl AnnModel {
    /// Prediction for an unscaled row.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut x = row.to_vec();
        self.scaler.transform_row(&mut x);
        self.forward_scaled(&x)
    }

    fn forward_scaled(&self, x: &[f64]) -> f64 {
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.outputs];
            layer.forward(&cur, &mut next);
            if l < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            cur = next;
        }
        cur[0].max(0.0)
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(sizes: &[usize]) -> Self {
        Adam {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (k, p) in params.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                p[i] -= LEARNING_RATE * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Forward pass keeping every layer's pre-activations.
fn forward_trace(layers: &[Dense], x: &[f64]) -> Vec<Vec<f64>> {
    let mut pre = Vec::with_capacity(layers.len());
    let mut cur = x.to_vec();
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let mut z = vec![0.0; layer.outputs];
        layer.forward(&cur, &mut z);
        cur = if l < last {
            z.iter().map(|v| v.max(0.0)).collect()
        } else {
            z.clone()
        };
        pre.push(z);
    }
    pre
}

fn full_loss(model: &AnnModel, x: &[f64], y: &[f64], w: usize) -> Result<f64> {
    if y.is_empty() {
        return Ok(0.0);
    }
    let pred: Vec<f64> = x
        .chunks_exact(w.max(1))
        .take(y.len())
        .map(|r| model.forward_scaled(r))
        .collect();
    model.spec.loss.value(y, &pred)
}

/// Batch loss and its gradient with respect to every weight and bias, in
/// `[w0, b0, w1, b1, ...]` order. `rows` are already scaled.
fn batch_gradient(layers: &[Dense], loss: Loss, rows: &[&[f64]], y: &[f64]) -> Result<(f64, Vec<Vec<f64>>)> {
    let depth = layers.len();
    let traces: Vec<Vec<Vec<f64>>> = rows.iter().map(|r| forward_trace(layers, r)).collect();
    let yhat: Vec<f64> = traces.iter().map(|t| t[depth - 1][0].max(0.0)).collect();
    let value = loss.value(y, &yhat)?;
    let dy = loss.grad(y, &yhat)?;

    let mut grads: Vec<Vec<f64>> = layers
        .iter()
        .flat_map(|l| [vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]])
        .collect();
    for (s, input) in rows.iter().enumerate() {
        let trace = &traces[s];
        // output rectifier
        let mut delta = vec![if trace[depth - 1][0] > 0.0 { dy[s] } else { 0.0 }];
        for l in (0..depth).rev() {
            let layer = &layers[l];
            let below: Vec<f64> = if l == 0 {
                input.to_vec()
            } else {
                trace[l - 1].iter().map(|v| v.max(0.0)).collect()
            };
            let (gw, gb) = {
                let (a, b) = grads.split_at_mut(2 * l + 1);
                (&mut a[2 * l], &mut b[0])
            };
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (g, a) in row.iter_mut().zip(&below) {
                    *g += d * a;
                }
            }
            if l > 0 {
                let mut back = vec![0.0; layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (acc, wv) in back.iter_mut().zip(row) {
                        *acc += d * wv;
                    }
                }
                for (acc, z) in back.iter_mut().zip(&trace[l - 1]) {
                    if *z <= 0.0 {
                        *acc = 0.0;
                    }
                }
                delta = back;
            }
        }
    }
    Ok((value, grads))
}

/// Trains a network on `train`, calling `on_epoch(epoch, model)` after each
/// epoch (1-based).
pub fn fit_ann_observed<O: Observations>(
    spec: &AnnSpec,
    train: &O,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &AnnModel),
) -> Result<AnnModel> {
    spec.validate()?;
    let scaler = Scaler::fit(train);
    let scaled = scaler.apply(train);
    let (n, w) = (scaled.n_rows(), scaled.n_cols());
    let x = scaled.data();
    let y = scaled.targets();

    let mut rng = seed::rng(seed);
    let mut layers = Vec::with_capacity(spec.n_layers + 1);
    let mut inputs = w;
    for _ in 0..spec.n_layers {
        layers.push(Dense::init(inputs, spec.layer_width, &mut rng));
        inputs = spec.layer_width;
    }
    let mut out = Dense::init(inputs, 1, &mut rng);
    // start the output at the mean target so the rectifier is initially open
    out.bias[0] = if n == 0 { 0.0 } else { y.iter().sum::<f64>() / n as f64 };
    layers.push(out);

    let mut model = AnnModel {
        spec: *spec,
        columns: train.columns().to_vec(),
        scaler,
        layers,
        loss_curve: Vec::with_capacity(spec.n_epochs + 1),
    };
    model.loss_curve.push(full_loss(&model, x, y, w)?);

    let sizes: Vec<usize> = model
        .layers
        .iter()
        .flat_map(|l| [l.weights.len(), l.bias.len()])
        .collect();
    let mut adam = Adam::new(&sizes);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=spec.n_epochs {
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks(spec.batch_size).enumerate() {
            let rows: Vec<&[f64]> = batch.iter().map(|&r| &x[r * w..(r + 1) * w]).collect();
            let yb: Vec<f64> = batch.iter().map(|&r| y[r]).collect();
            let (loss, grads) = batch_gradient(&model.layers, spec.loss, &rows, &yb)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b, loss });
            }
            let params: Vec<&mut [f64]> = model
                .layers
                .iter_mut()
                .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
                .collect();
            adam.step(params, &grads);
        }
        let loss = full_loss(&model, x, y, w)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0, loss });
        }
        model.loss_curve.push(loss);
        on_epoch(epoch, &model);
    }
    Ok(model)
}

pub fn fit_ann<O: Observations>(spec: &AnnSpec, train: &O, seed: u64) -> Result<AnnModel> {
    fit_ann_observed(spec, train, seed, |_, _| {})
}
