//! Accuracy, local-model accuracy, loss-threshold membership inference,
//! dataset heterogeneity and model divergence.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::data::LabeledPool;
use crate::error::{Error, Result};
use crate::generation::keyword_enum;
use crate::numerics::{per_sample_losses, predict, ModelParams};
use crate::rng::{stream, Rng, Stream};

/// One row of the per-round metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub global_test_acc: f64,
    pub avg_local_global_acc: f64,
    pub divergence: f64,
    pub mean_pairwise_cosine: f64,
    pub mean_pairwise_l2: f64,
    pub attack_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    /// Share of each side's candidates the attacker knows, in (0, 1).
    pub known_fraction: f64,
    pub eval_member_count: usize,
    pub eval_nonmember_count: usize,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            known_fraction: 0.1,
            eval_member_count: 500,
            eval_nonmember_count: 500,
        }
    }
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.known_fraction > 0.0 && self.known_fraction < 1.0) {
            return Err(Error::config("eval.attack_known_fraction", "must be in (0, 1)"));
        }
        if self.eval_member_count == 0 {
            return Err(Error::config("eval.attack_members", "must be >= 1"));
        }
        if self.eval_nonmember_count == 0 {
            return Err(Error::config("eval.attack_nonmembers", "must be >= 1"));
        }
        Ok(())
    }
}

/// Fraction of argmax-correct predictions (ties to the lowest class).
pub fn accuracy(model: &ModelParams, pool: &LabeledPool) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::invalid("accuracy of an empty pool"));
    }
    let batch = pool.to_batch()?;
    let predicted = predict(model, &batch.inputs)?;
    let correct = predicted.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / pool.len() as f64)
}

/// Unweighted mean accuracy of each local model on the global test pool.
pub fn avg_local_global_acc(locals: &[&ModelParams], test: &LabeledPool) -> Result<f64> {
    if locals.is_empty() {
        return Err(Error::invalid("no local models to evaluate"));
    }
    let sum = locals.iter().map(|m| accuracy(m, test)).sum::<Result<f64>>()?;
    Ok(sum / locals.len() as f64)
}

/// Best loss threshold on the known sets and its accuracy on held-out sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdAttack {
    /// Predict "member" when loss <= threshold.
    pub threshold: f64,
    pub known_accuracy: f64,
    pub accuracy: f64,
}

fn threshold_accuracy(threshold: f64, members: &[f64], nonmembers: &[f64]) -> f64 {
    let hits = members.iter().filter(|&&l| l <= threshold).count() + nonmembers.iter().filter(|&&l| l > threshold).count();
    hits as f64 / (members.len() + nonmembers.len()) as f64
}

/// Sweeps thresholds (below all, midpoints of sorted known losses, above all)
/// and keeps the lowest one with the best known-set accuracy.
pub fn threshold_attack(
    known_members: &[f64],
    known_nonmembers: &[f64],
    eval_members: &[f64],
    eval_nonmembers: &[f64],
) -> Result<ThresholdAttack> {
    if known_members.is_empty() || known_nonmembers.is_empty() {
        return Err(Error::invalid("attacker needs known members and non-members"));
    }
    if eval_members.is_empty() || eval_nonmembers.is_empty() {
        return Err(Error::invalid("attack evaluation needs members and non-members"));
    }
    let mut sorted: Vec<f64> = known_members.iter().chain(known_nonmembers).copied().collect();
    if sorted.iter().any(|l| !l.is_finite()) {
        return Err(Error::invalid("non-finite loss in attack data"));
    }
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut candidates = vec![sorted[0] - 1.0];
    candidates.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(sorted[sorted.len() - 1] + 1.0);

    let mut best = (f64::NEG_INFINITY, candidates[0]);
    for &t in &candidates {
        let acc = threshold_accuracy(t, known_members, known_nonmembers);
        if acc > best.0 {
            best = (acc, t);
        }
    }
    Ok(ThresholdAttack {
        threshold: best.1,
        known_accuracy: best.0,
        accuracy: threshold_accuracy(best.1, eval_members, eval_nonmembers),
    })
}

#[derive(Debug, Clone)]
pub struct MiaOutcome {
    pub attack: ThresholdAttack,
    pub known_uids: Vec<u64>,
    pub eval_uids: Vec<u64>,
}

impl MiaOutcome {
    pub fn accuracy(&self) -> f64 {
        self.attack.accuracy
    }
}

fn split_known_eval(pool: &LabeledPool, fraction: f64, eval_count: usize, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(rng);
    let known = ((fraction * pool.len() as f64).ceil() as usize).min(pool.len());
    let eval_end = (known + eval_count).min(pool.len());
    if known == 0 || eval_end == known {
        return Err(Error::invalid(format!(
            "pool of {} samples too small for a known/evaluation split",
            pool.len()
        )));
    }
    Ok((idx[..known].to_vec(), idx[known..eval_end].to_vec()))
}

/// Loss-threshold membership inference against `model`. The attacker knows a
/// fraction of each side; accuracy is measured on disjoint remainders.
pub fn mia_attack(
    model: &ModelParams,
    members: &LabeledPool,
    nonmembers: &LabeledPool,
    spec: &AttackSpec,
    rng: &mut Rng,
) -> Result<MiaOutcome> {
    spec.validate()?;
    let (m_known, m_eval) = split_known_eval(members, spec.known_fraction, spec.eval_member_count, rng)?;
    let (n_known, n_eval) = split_known_eval(nonmembers, spec.known_fraction, spec.eval_nonmember_count, rng)?;
    let m_loss = per_sample_losses(model, &members.to_batch()?)?;
    let n_loss = per_sample_losses(model, &nonmembers.to_batch()?)?;
    let pick = |losses: &[f64], idx: &[usize]| idx.iter().map(|&i| losses[i]).collect::<Vec<f64>>();
    let attack = threshold_attack(
        &pick(&m_loss, &m_known),
        &pick(&n_loss, &n_known),
        &pick(&m_loss, &m_eval),
        &pick(&n_loss, &n_eval),
    )?;
    let uid_of = |pool: &LabeledPool, idx: &[usize]| idx.iter().map(|&i| pool.samples()[i].uid).collect::<Vec<u64>>();
    let mut known_uids = uid_of(members, &m_known);
    known_uids.extend(uid_of(nonmembers, &n_known));
    let mut eval_uids = uid_of(members, &m_eval);
    eval_uids.extend(uid_of(nonmembers, &n_eval));
    Ok(MiaOutcome { attack, known_uids, eval_uids })
}

keyword_enum!(ProjectionKind {
    Identity => "identity",
    Random => "random",
});

/// Fixed linear feature map used before comparing client datasets.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    /// `d x h` row-major; `None` for identity.
    weights: Option<(usize, usize, Vec<f64>)>,
}

impl FeatureMap {
    pub fn identity() -> Self {
        FeatureMap { weights: None }
    }

    /// Gaussian projection `d -> h` with entries `N(0, 1/h)`.
    pub fn random(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, Stream::Projection, 0);
        let scale = 1.0 / (output_dim as f64).sqrt();
        let w = (0..input_dim * output_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        FeatureMap {
            weights: Some((input_dim, output_dim, w)),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.weights {
            None => Ok(x.to_vec()),
            Some((d, h, w)) => {
                if x.len() != *d {
                    return Err(Error::shape(format!("projection expects width {d}, got {}", x.len())));
                }
                let mut out = vec![0.0; *h];
                for (k, xk) in x.iter().enumerate() {
                    for (o, wkj) in out.iter_mut().zip(&w[k * h..(k + 1) * h]) {
                        *o += xk * wkj;
                    }
                }
                Ok(out)
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Pairwise similarity of client datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct Heterogeneity {
    pub cosine: Vec<Vec<f64>>,
    pub l2: Vec<Vec<f64>>,
}

impl Heterogeneity {
    /// Means over unordered off-diagonal pairs; `(1, 0)` for a single client.
    pub fn mean_pairwise(&self) -> (f64, f64) {
        let k = self.cosine.len();
        if k < 2 {
            return (1.0, 0.0);
        }
        let (mut cos, mut l2) = (0.0, 0.0);
        for i in 0..k {
            for j in i + 1..k {
                cos += self.cosine[i][j];
                l2 += self.l2[i][j];
            }
        }
        let pairs = (k * (k - 1) / 2) as f64;
        (cos / pairs, l2 / pairs)
    }
}

/// Cosine similarity and Euclidean distance between the mean mapped features
/// of every pair of client pools.
pub fn dataset_heterogeneity(pools: &[&LabeledPool], map: &FeatureMap) -> Result<Heterogeneity> {
    let means = pools
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let mean = p
                .mean_features()
                .ok_or_else(|| Error::invalid(format!("client {k} has an empty pool")))?;
            // the map is linear, so mapping the mean equals the mean of mapped features
            let mapped = map.apply(&mean)?;
            if norm(&mapped) == 0.0 {
                return Err(Error::invalid(format!("client {k} has a zero-norm mean feature")));
            }
            Ok(mapped)
        })
        .collect::<Result<Vec<_>>>()?;
    let k = means.len();
    let mut cosine = vec![vec![0.0; k]; k];
    let mut l2 = vec![vec![0.0; k]; k];
    for i in 0..k {
        cosine[i][i] = 1.0;
        for j in i + 1..k {
            let dot: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| a * b).sum();
            let c = dot / (norm(&means[i]) * norm(&means[j]));
            let d = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            cosine[i][j] = c;
            cosine[j][i] = c;
            l2[i][j] = d;
            l2[j][i] = d;
        }
    }
    Ok(Heterogeneity { cosine, l2 })
}

/// Mean Euclidean distance between each local model and the aggregated global.
pub fn model_divergence(locals: &[&ModelParams], global: &ModelParams) -> Result<f64> {
    if locals.is_empty() {
        return Err(Error::invalid("no local models"));
    }
    let sum = locals.iter().map(|m| m.distance(global)).sum::<Result<f64>>()?;
    Ok(sum / locals.len() as f64)
}
