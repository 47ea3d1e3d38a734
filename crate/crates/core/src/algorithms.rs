//! Local training and server updates for FedAvg, FedAvgM, FedProx, SCAFFOLD,
//! MOON and FedDecorr.

use rand::seq::SliceRandom;

use crate::data::LabeledPool;
use crate::error::{Error, Result};
use crate::generation::keyword_enum;
use crate::numerics::{
    backward_with_features, forward, forward_batch, sgd_step_in_place, softmax_cross_entropy, Matrix, ModelParams,
};
use crate::rng::Rng;

keyword_enum!(AlgorithmKind {
    FedAvg => "fedavg",
    FedAvgM => "fedavgm",
    FedProx => "fedprox",
    Scaffold => "scaffold",
    Moon => "moon",
    FedDecorr => "feddecorr",
});

#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmConfig {
    pub kind: AlgorithmKind,
    /// FedProx proximal weight.
    pub mu: f64,
    /// FedAvgM server momentum, in `[0, 1)`.
    pub server_momentum: f64,
    /// MOON temperature.
    pub tau: f64,
    pub moon_weight: f64,
    pub decorr_weight: f64,
    pub local_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        AlgorithmConfig {
            kind: AlgorithmKind::FedAvg,
            mu: 0.01,
            server_momentum: 0.9,
            tau: 0.5,
            moon_weight: 1.0,
            decorr_weight: 0.1,
            local_iters: 200,
            batch_size: 64,
            lr: 0.01,
        }
    }
}

impl AlgorithmConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("algorithm.mu", self.mu >= 0.0 && self.mu.is_finite(), "must be >= 0"),
            (
                "algorithm.server_momentum",
                (0.0..1.0).contains(&self.server_momentum),
                "must be in [0, 1)",
            ),
            ("algorithm.tau", self.tau > 0.0 && self.tau.is_finite(), "must be > 0"),
            ("algorithm.moon_weight", self.moon_weight >= 0.0 && self.moon_weight.is_finite(), "must be >= 0"),
            (
                "algorithm.decorr_weight",
                self.decorr_weight >= 0.0 && self.decorr_weight.is_finite(),
                "must be >= 0",
            ),
            ("algorithm.local_iters", self.local_iters >= 1, "must be >= 1"),
            ("algorithm.batch_size", self.batch_size >= 1, "must be >= 1"),
            ("algorithm.lr", self.lr >= 0.0 && self.lr.is_finite(), "must be >= 0"),
        ];
        for (key, ok, msg) in checks {
            if !ok {
                return Err(Error::config(key, msg));
            }
        }
        if self.kind == AlgorithmKind::Scaffold && self.lr == 0.0 {
            return Err(Error::config("algorithm.lr", "scaffold needs lr > 0"));
        }
        Ok(())
    }
}

/// Per-client state that persists across rounds, including rounds the client sits out.
#[derive(Debug, Clone, Default)]
pub struct ClientTrainState {
    /// SCAFFOLD client control variate `c_k`; zero until first set.
    pub control: Option<ModelParams>,
    /// MOON: the client's local model from its last participation.
    pub previous_local: Option<ModelParams>,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: ModelParams,
    pub momentum: ModelParams,
    /// SCAFFOLD global control variate `c`.
    pub control: ModelParams,
}

impl ServerState {
    pub fn new(global: ModelParams) -> Self {
        ServerState {
            momentum: global.zeros_like(),
            control: global.zeros_like(),
            global,
        }
    }
}

/// Outcome of one client's local training.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub model: ModelParams,
    /// SCAFFOLD: `new c_k - old c_k`.
    pub control_delta: Option<ModelParams>,
}

/// Epoch-shuffled mini-batches without replacement; reshuffles when fewer
/// than a full batch remains.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl EpochSampler {
    pub fn new(len: usize, batch_size: usize, rng: &mut Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        EpochSampler {
            order,
            cursor: 0,
            batch_size: batch_size.min(len),
        }
    }

    pub fn next_batch(&mut self, rng: &mut Rng) -> &[usize] {
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor += self.batch_size;
        &self.order[start..self.cursor]
    }
}

/// Gradient of `(mu / 2) ||local - global||^2` with respect to `local`.
pub fn fedprox_term(local: &ModelParams, global: &ModelParams, mu: f64) -> Result<ModelParams> {
    let mut diff = local.sub(global)?;
    diff.scale(mu);
    Ok(diff)
}

/// `grad - c_k + c`
pub fn scaffold_correction(grad: &ModelParams, client_control: &ModelParams, control: &ModelParams) -> Result<ModelParams> {
    let mut out = grad.clone();
    out.axpy(-1.0, client_control)?;
    out.axpy(1.0, control)?;
    Ok(out)
}

/// Difference-form control update: `c_k - c + (global - local) / (E lr)`.
pub fn scaffold_update_control(
    global: &ModelParams,
    local: &ModelParams,
    local_iters: usize,
    lr: f64,
    client_control: &ModelParams,
    control: &ModelParams,
) -> Result<ModelParams> {
    let steps = local_iters as f64 * lr;
    if !(steps > 0.0) {
        return Err(Error::invalid("scaffold control update needs local_iters * lr > 0"));
    }
    let mut out = client_control.sub(control)?;
    out.axpy(1.0 / steps, &global.sub(local)?)?;
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity and its gradient with respect to `z`.
fn cosine_with_grad(z: &[f64], other: &[f64], z_norm: f64) -> (f64, Vec<f64>) {
    let o_norm = dot(other, other).sqrt();
    let cos = dot(z, other) / (z_norm * o_norm);
    let grad = z
        .iter()
        .zip(other)
        .map(|(zi, oi)| oi / (z_norm * o_norm) - cos * zi / (z_norm * z_norm))
        .collect();
    (cos, grad)
}

/// Model-contrastive loss for one representation:
/// `-log(e^{cos(z,zg)/tau} / (e^{cos(z,zg)/tau} + e^{cos(z,zp)/tau}))`,
/// with its gradient with respect to `z`.
pub fn moon_loss(z: &[f64], z_global: &[f64], z_prev: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    if z.len() != z_global.len() || z.len() != z_prev.len() {
        return Err(Error::shape("moon representations must have equal length"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("moon temperature must be > 0"));
    }
    let norms = [dot(z, z).sqrt(), dot(z_global, z_global).sqrt(), dot(z_prev, z_prev).sqrt()];
    if norms.iter().any(|&n| n == 0.0) {
        return Err(Error::invalid("moon loss undefined for a zero-norm representation"));
    }
    let (cos_pos, g_pos) = cosine_with_grad(z, z_global, norms[0]);
    let (cos_neg, g_neg) = cosine_with_grad(z, z_prev, norms[0]);
    let (s_pos, s_neg) = (cos_pos / tau, cos_neg / tau);
    let max = s_pos.max(s_neg);
    let lse = max + ((s_pos - max).exp() + (s_neg - max).exp()).ln();
    let loss = lse - s_pos;
    let p_pos = (s_pos - lse).exp();
    let p_neg = (s_neg - lse).exp();
    let grad = g_pos
        .iter()
        .zip(&g_neg)
        .map(|(gp, gn)| ((p_pos - 1.0) * gp + p_neg * gn) / tau)
        .collect();
    Ok((loss, grad))
}

const DECORR_EPS: f64 = 1e-8;

/// `||Corr(features)||_F^2 / h^2` over the batch, with its gradient with
/// respect to the `n x h` feature matrix.
pub fn feddecorr_loss(features: &Matrix) -> Result<(f64, Matrix)> {
    let (n, h) = (features.rows, features.cols);
    if n < 2 {
        return Err(Error::invalid("decorrelation loss needs at least two samples"));
    }
    if h == 0 {
        return Err(Error::invalid("decorrelation loss needs at least one feature"));
    }
    let nf = n as f64;
    let mut std = vec![0.0; h];
    let mut z = features.clone();
    for j in 0..h {
        let mean = (0..n).map(|i| features.data[i * h + j]).sum::<f64>() / nf;
        let var = (0..n).map(|i| (features.data[i * h + j] - mean).powi(2)).sum::<f64>() / nf;
        std[j] = (var + DECORR_EPS).sqrt();
        for i in 0..n {
            z.data[i * h + j] = (features.data[i * h + j] - mean) / std[j];
        }
    }
    // corr = Z^T Z / n
    let mut corr = vec![0.0; h * h];
    for i in 0..n {
        let row = z.row(i);
        for a in 0..h {
            for b in 0..h {
                corr[a * h + b] += row[a] * row[b];
            }
        }
    }
    corr.iter_mut().for_each(|v| *v /= nf);
    let hh = (h * h) as f64;
    let loss = corr.iter().map(|v| v * v).sum::<f64>() / hh;

    // dL/dZ = 4 Z corr / (n h^2)
    let mut dz = Matrix::zeros(n, h);
    for i in 0..n {
        let row = z.row(i);
        for b in 0..h {
            dz.data[i * h + b] = 4.0 * (0..h).map(|a| row[a] * corr[a * h + b]).sum::<f64>() / (nf * hh);
        }
    }
    // back through per-column standardization
    let mut grad = Matrix::zeros(n, h);
    for j in 0..h {
        let mean_g = (0..n).map(|i| dz.data[i * h + j]).sum::<f64>() / nf;
        let mean_gz = (0..n).map(|i| dz.data[i * h + j] * z.data[i * h + j]).sum::<f64>() / nf;
        for i in 0..n {
            grad.data[i * h + j] = (dz.data[i * h + j] - mean_g - z.data[i * h + j] * mean_gz) / std[j];
        }
    }
    Ok((loss, grad))
}

/// Trains a copy of `global` on `data` for `cfg.local_iters` SGD steps.
pub fn local_train(
    global: &ModelParams,
    data: &LabeledPool,
    cfg: &AlgorithmConfig,
    state: &mut ClientTrainState,
    server: &ServerState,
    rng: &mut Rng,
) -> Result<LocalUpdate> {
    local_train_phases(global, &[(data, cfg.local_iters)], cfg, state, server, rng)
}

/// Local training over consecutive phases, each a dataset and an iteration
/// count. Phases with zero iterations are skipped.
pub fn local_train_phases(
    global: &ModelParams,
    phases: &[(&LabeledPool, usize)],
    cfg: &AlgorithmConfig,
    state: &mut ClientTrainState,
    server: &ServerState,
    rng: &mut Rng,
) -> Result<LocalUpdate> {
    let mut model = global.clone();
    let client_control = match cfg.kind {
        AlgorithmKind::Scaffold => Some(state.control.clone().unwrap_or_else(|| global.zeros_like())),
        _ => None,
    };
    let moon_prev = state.previous_local.clone().unwrap_or_else(|| global.clone());
    let mut iteration = 0;
    for &(data, iters) in phases {
        if iters == 0 {
            continue;
        }
        if data.is_empty() {
            return Err(Error::invalid("local training needs a non-empty dataset"));
        }
        let mut sampler = EpochSampler::new(data.len(), cfg.batch_size, rng);
        for _ in 0..iters {
            let batch = data.batch_of(sampler.next_batch(rng))?;
            let trace = forward_batch(&model, &batch)?;
            let (mut loss, dlogits) = softmax_cross_entropy(&trace.logits, &batch.labels)?;
            let mut dfeatures: Option<Matrix> = None;

            if cfg.kind == AlgorithmKind::Moon && cfg.moon_weight > 0.0 {
                let feats = trace.features();
                let z_global = forward(global, &batch.inputs)?;
                let z_prev = forward(&moon_prev, &batch.inputs)?;
                let mut df = Matrix::zeros(feats.rows, feats.cols);
                let scale = cfg.moon_weight / batch.len() as f64;
                for i in 0..feats.rows {
                    // rows with an all-zero representation carry no contrastive signal
                    match moon_loss(feats.row(i), z_global.features().row(i), z_prev.features().row(i), cfg.tau) {
                        Ok((l, g)) => {
                            loss += scale * l;
                            for (d, gi) in df.row_mut(i).iter_mut().zip(g) {
                                *d = scale * gi;
                            }
                        }
                        Err(Error::Invalid(_)) => continue,
                        Err(e) => return Err(e),
                    }
                }
                dfeatures = Some(df);
            }

            if cfg.kind == AlgorithmKind::FedDecorr && cfg.decorr_weight > 0.0 && batch.len() >= 2 {
                let (l, mut g) = feddecorr_loss(trace.features())?;
                loss += cfg.decorr_weight * l;
                g.data.iter_mut().for_each(|v| *v *= cfg.decorr_weight);
                dfeatures = Some(g);
            }

            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    index: iteration,
                    context: "local training loss at this iteration".into(),
                });
            }

            let mut grad = backward_with_features(&model, &trace, &dlogits, dfeatures.as_ref())?;
            if cfg.kind == AlgorithmKind::FedProx && cfg.mu > 0.0 {
                grad.axpy(1.0, &fedprox_term(&model, global, cfg.mu)?)?;
            }
            if let Some(ck) = &client_control {
                grad = scaffold_correction(&grad, ck, &server.control)?;
            }
            sgd_step_in_place(&mut model, &grad, cfg.lr)?;
            iteration += 1;
        }
    }

    let mut control_delta = None;
    if let Some(ck) = client_control {
        let new_ck = scaffold_update_control(global, &model, iteration.max(1), cfg.lr, &ck, &server.control)?;
        control_delta = Some(new_ck.sub(&ck)?);
        state.control = Some(new_ck);
    }
    if cfg.kind == AlgorithmKind::Moon {
        state.previous_local = Some(model.clone());
    }
    Ok(LocalUpdate { model, control_delta })
}

/// Weighted average `sum_k p_k theta_k` with `p_k = N_k / sum_i N_i`.
pub fn aggregate(locals: &[&ModelParams], sizes: &[usize]) -> Result<ModelParams> {
    let Some(first) = locals.first() else {
        return Err(Error::invalid("aggregation needs at least one local model"));
    };
    if locals.len() != sizes.len() {
        return Err(Error::shape(format!("{} models but {} sizes", locals.len(), sizes.len())));
    }
    if sizes.contains(&0) {
        return Err(Error::invalid("aggregation sizes must be positive"));
    }
    let total: usize = sizes.iter().sum();
    // accumulate offsets from the first model so identical inputs aggregate exactly
    let mut out = (*first).clone();
    for (local, &n) in locals.iter().zip(sizes).skip(1) {
        local.check_same_shape(first, "aggregate")?;
        out.axpy(n as f64 / total as f64, &local.sub(first)?)?;
    }
    Ok(out)
}

/// Applies the averaged model to the server. FedAvgM folds
/// `avg - global` into the momentum buffer; every other kind adopts `avg`.
pub fn server_update(server: &mut ServerState, averaged: &ModelParams, cfg: &AlgorithmConfig) -> Result<()> {
    averaged.check_same_shape(&server.global, "server update")?;
    match cfg.kind {
        AlgorithmKind::FedAvgM => {
            let delta = averaged.sub(&server.global)?;
            server.momentum.scale(cfg.server_momentum);
            server.momentum.axpy(1.0, &delta)?;
            server.global.axpy(1.0, &server.momentum)?;
        }
        _ => server.global = averaged.clone(),
    }
    Ok(())
}

/// SCAFFOLD server control update: `c += (1/K) sum_selected delta c_k`.
pub fn update_server_control(server: &mut ServerState, deltas: &[&ModelParams], num_clients: usize) -> Result<()> {
    for d in deltas {
        server.control.axpy(1.0 / num_clients as f64, d)?;
    }
    Ok(())
}
