//! Dense MLP numerics on flat `f64` parameter vectors.
//!
//! A model is a stack of dense layers; every layer except the last is followed
//! by a ReLU. Layer `l` stores its weights as a `fan_in x fan_out` row-major
//! block followed by `fan_out` biases, so `z = a * W + b`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Input/output width of one dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.fan_out
    }
}

/// All weights and biases of an MLP, flattened. Also used for gradients,
/// control variates and momentum buffers, which share the model's layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    values: Vec<f64>,
    layers: Vec<LayerShape>,
}

impl ModelParams {
    /// Layer shapes for widths `[d, h1, ..., C]`.
    pub fn shapes_for(widths: &[usize]) -> Result<Vec<LayerShape>> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid(format!(
                "layer widths {widths:?} must list at least input and output, all positive"
            )));
        }
        Ok(widths
            .windows(2)
            .map(|w| LayerShape {
                fan_in: w[0],
                fan_out: w[1],
            })
            .collect())
    }

    pub fn zeros(layers: Vec<LayerShape>) -> Self {
        let len = layers.iter().map(LayerShape::len).sum();
        ModelParams {
            values: vec![0.0; len],
            layers,
        }
    }

    pub fn from_values(layers: Vec<LayerShape>, values: Vec<f64>) -> Result<Self> {
        let len: usize = layers.iter().map(LayerShape::len).sum();
        if len != values.len() {
            return Err(Error::shape(format!(
                "layers need {len} values, got {}",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index,
                context: "model parameters".into(),
            });
        }
        Ok(ModelParams { values, layers })
    }

    /// He initialization: weights ~ N(0, 2 / fan_in), biases zero.
    pub fn init_he(widths: &[usize], rng: &mut Rng) -> Result<Self> {
        let layers = Self::shapes_for(widths)?;
        let mut params = Self::zeros(layers.clone());
        let mut offset = 0;
        for shape in &layers {
            let std = (2.0 / shape.fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("std is positive");
            for v in &mut params.values[offset..offset + shape.weight_len()] {
                *v = normal.sample(rng);
            }
            offset += shape.len();
        }
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layers.clone())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn num_outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers == other.layers
    }

    pub fn check_same_shape(&self, other: &ModelParams, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: layouts differ ({:?} vs {:?})",
                self.layers, other.layers
            )))
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// `self - other`
    pub fn sub(&self, other: &ModelParams) -> Result<ModelParams> {
        self.check_same_shape(other, "sub")?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(ModelParams {
            values,
            layers: self.layers.clone(),
        })
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &ModelParams) -> Result<f64> {
        self.check_same_shape(other, "distance")?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let offset: usize = self.layers[..l].iter().map(LayerShape::len).sum();
        let shape = self.layers[l];
        let w = &self.values[offset..offset + shape.weight_len()];
        let b = &self.values[offset + shape.weight_len()..offset + shape.len()];
        (w, b)
    }
}

/// Inputs and labels for one forward/backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows == 0 {
            return Err(Error::invalid("batch must contain at least one sample"));
        }
        if inputs.rows != labels.len() {
            return Err(Error::shape(format!(
                "{} input rows but {} labels",
                inputs.rows,
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Everything backward needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[l]` is the ReLU output of layer `l - 1`.
    pub activations: Vec<Matrix>,
    /// Pre-activations of each hidden layer.
    pub pre_activations: Vec<Matrix>,
    pub logits: Matrix,
}

impl ForwardTrace {
    /// Penultimate representation: the input to the output layer.
    pub fn features(&self) -> &Matrix {
        self.activations.last().expect("trace holds the input")
    }
}

fn affine(input: &Matrix, w: &[f64], b: &[f64], shape: LayerShape) -> Matrix {
    let mut out = Matrix::zeros(input.rows, shape.fan_out);
    for i in 0..input.rows {
        let x = input.row(i);
        let o = out.row_mut(i);
        o.copy_from_slice(b);
        for (k, &xk) in x.iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            let wk = &w[k * shape.fan_out..(k + 1) * shape.fan_out];
            for (oj, wkj) in o.iter_mut().zip(wk) {
                *oj += xk * wkj;
            }
        }
    }
    out
}

pub fn forward(params: &ModelParams, inputs: &Matrix) -> Result<ForwardTrace> {
    if inputs.cols != params.input_dim() {
        return Err(Error::shape(format!(
            "input width {} does not match first layer fan-in {}",
            inputs.cols,
            params.input_dim()
        )));
    }
    let n_layers = params.layers.len();
    let mut activations = vec![inputs.clone()];
    let mut pre_activations = Vec::with_capacity(n_layers - 1);
    for l in 0..n_layers {
        let (w, b) = params.layer(l);
        let z = affine(activations.last().unwrap(), w, b, params.layers[l]);
        if l + 1 == n_layers {
            if let Some(index) = z.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    index,
                    context: "logits".into(),
                });
            }
            return Ok(ForwardTrace {
                activations,
                pre_activations,
                logits: z,
            });
        }
        let mut a = z.clone();
        a.data.iter_mut().for_each(|v| *v = v.max(0.0));
        pre_activations.push(z);
        activations.push(a);
    }
    unreachable!("a model has at least one layer")
}

/// Convenience: forward a labeled batch.
pub fn forward_batch(params: &ModelParams, batch: &Batch) -> Result<ForwardTrace> {
    forward(params, &batch.inputs)
}

/// Mean softmax cross-entropy and its gradient `(softmax - onehot) / n`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let classes = logits.cols;
    if classes < 2 {
        return Err(Error::invalid("cross-entropy needs at least two classes"));
    }
    if logits.rows != labels.len() || labels.is_empty() {
        return Err(Error::shape(format!(
            "{} logit rows but {} labels",
            logits.rows,
            labels.len()
        )));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::invalid(format!(
            "label {y} at row {i} out of range for {classes} classes"
        )));
    }
    let n = labels.len() as f64;
    let mut grad = Matrix::zeros(logits.rows, classes);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let g = grad.row_mut(i);
        let mut sum = 0.0;
        for (gj, &zj) in g.iter_mut().zip(row) {
            *gj = (zj - max).exp();
            sum += *gj;
        }
        loss += sum.ln() - (row[y] - max);
        for gj in g.iter_mut() {
            *gj /= sum * n;
        }
        g[y] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

/// Per-sample cross-entropy of `params` on `batch`.
pub fn per_sample_losses(params: &ModelParams, batch: &Batch) -> Result<Vec<f64>> {
    let trace = forward_batch(params, batch)?;
    let classes = trace.logits.cols;
    batch
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y >= classes {
                return Err(Error::invalid(format!("label {y} out of range")));
            }
            let row = trace.logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
            Ok(lse - row[y])
        })
        .collect()
}

/// Gradient of the loss whose logit gradient is `dlogits`.
pub fn backward(params: &ModelParams, trace: &ForwardTrace, dlogits: &Matrix) -> Result<ModelParams> {
    backward_with_features(params, trace, dlogits, None)
}

/// Like [`backward`], with an extra loss gradient injected at the penultimate features.
pub fn backward_with_features(
    params: &ModelParams,
    trace: &ForwardTrace,
    dlogits: &Matrix,
    dfeatures: Option<&Matrix>,
) -> Result<ModelParams> {
    let n_layers = params.layers.len();
    let n = trace.logits.rows;
    let stale = trace.activations.len() != n_layers
        || trace
            .activations
            .iter()
            .zip(&params.layers)
            .any(|(a, s)| a.cols != s.fan_in || a.rows != n)
        || trace.logits.cols != params.num_outputs();
    if stale {
        return Err(Error::shape("forward trace does not match these parameters"));
    }
    if dlogits.rows != n || dlogits.cols != params.num_outputs() {
        return Err(Error::shape(format!(
            "dlogits is {}x{}, expected {n}x{}",
            dlogits.rows,
            dlogits.cols,
            params.num_outputs()
        )));
    }
    if let Some(df) = dfeatures {
        let feats = trace.features();
        if df.rows != feats.rows || df.cols != feats.cols {
            return Err(Error::shape("feature gradient does not match features"));
        }
    }

    let mut grad = params.zeros_like();
    let mut delta = dlogits.clone();
    let mut offset = grad.values.len();
    for l in (0..n_layers).rev() {
        let shape = params.layers[l];
        offset -= shape.len();
        let input = &trace.activations[l];
        {
            let (gw, gb) = grad.values[offset..offset + shape.len()].split_at_mut(shape.weight_len());
            for i in 0..n {
                let d = delta.row(i);
                for (k, &xk) in input.row(i).iter().enumerate() {
                    if xk == 0.0 {
                        continue;
                    }
                    let gwk = &mut gw[k * shape.fan_out..(k + 1) * shape.fan_out];
                    for (g, dj) in gwk.iter_mut().zip(d) {
                        *g += xk * dj;
                    }
                }
                for (g, dj) in gb.iter_mut().zip(d) {
                    *g += dj;
                }
            }
        }
        if l == 0 {
            break;
        }
        let (w, _) = params.layer(l);
        let mut dinput = Matrix::zeros(n, shape.fan_in);
        for i in 0..n {
            let d = delta.row(i);
            let di = dinput.row_mut(i);
            for (k, dik) in di.iter_mut().enumerate() {
                let wk = &w[k * shape.fan_out..(k + 1) * shape.fan_out];
                *dik = wk.iter().zip(d).map(|(a, b)| a * b).sum();
            }
        }
        if l + 1 == n_layers {
            if let Some(df) = dfeatures {
                for (a, b) in dinput.data.iter_mut().zip(&df.data) {
                    *a += b;
                }
            }
        }
        let pre = &trace.pre_activations[l - 1];
        for (a, &z) in dinput.data.iter_mut().zip(&pre.data) {
            if z <= 0.0 {
                *a = 0.0;
            }
        }
        delta = dinput;
    }
    Ok(grad)
}

/// Returns `params - lr * gradient`.
pub fn sgd_step(params: &ModelParams, gradient: &ModelParams, lr: f64) -> Result<ModelParams> {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, gradient, lr)?;
    Ok(out)
}

/// In-place SGD update. `lr = 0` is accepted and leaves the parameters untouched.
pub fn sgd_step_in_place(params: &mut ModelParams, gradient: &ModelParams, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate {lr} must be finite and >= 0")));
    }
    params.check_same_shape(gradient, "sgd step")?;
    if let Some(index) = gradient.first_non_finite() {
        return Err(Error::NonFinite {
            index,
            context: "gradient".into(),
        });
    }
    for (p, g) in params.values.iter_mut().zip(&gradient.values) {
        *p -= lr * g;
    }
    Ok(())
}

/// Argmax prediction per row, ties to the lowest class index.
pub fn predict(params: &ModelParams, inputs: &Matrix) -> Result<Vec<usize>> {
    let trace = forward(params, inputs)?;
    Ok((0..trace.logits.rows)
        .map(|i| argmax(trace.logits.row(i)))
        .collect())
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Random `rows x cols` matrix with standard normal entries; test and demo helper.
pub fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    Matrix { rows, cols, data }
}
