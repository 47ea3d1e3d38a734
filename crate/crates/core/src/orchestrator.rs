//! Round-by-round federated simulation: one-shot generation before round 1,
//! then sampling, optional filtering, local training, aggregation and
//! per-round evaluation.

use rand::seq::index;

use crate::algorithms::{
    aggregate, local_train_phases, server_update, update_server_control, AlgorithmKind, ClientTrainState,
    ServerState,
};
use crate::config::{ExperimentConfig, FilterSpec, TrainingStrategy};
use crate::data::{
    build_task, load_external_pool, partition_dirichlet, partition_feature_domains, LabeledPool, PartitionMode,
    PartitionSpec, Sample, SyntheticTaskSpec,
};
use crate::error::{Error, Result, StageExt};
use crate::evaluation::{
    accuracy, avg_local_global_acc, dataset_heterogeneity, mia_attack, model_divergence, FeatureMap, ProjectionKind,
    RoundRecord,
};
use crate::generation::{allocate, distribute_imported, generate_for_client, AllocationPlan};
use crate::numerics::{per_sample_losses, ModelParams};
use crate::rng::{round_client_index, stream, Stream};

/// A client's private pool, its generated pool and the currently active part
/// of the generated pool.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub private: LabeledPool,
    pub generated: LabeledPool,
    pub active_generated: LabeledPool,
}

impl ClientData {
    pub fn new(private: LabeledPool, generated: LabeledPool) -> Self {
        ClientData {
            active_generated: generated.clone(),
            private,
            generated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    First,
    Second,
}

/// `ceil(rate * K)` distinct clients, ascending. Full participation uses no randomness.
pub fn sample_clients(num_clients: usize, rate: f64, round: usize, seed: u64) -> Vec<usize> {
    let n = ((rate * num_clients as f64) - 1e-9).ceil().clamp(1.0, num_clients as f64) as usize;
    if n >= num_clients {
        return (0..num_clients).collect();
    }
    let mut rng = stream(seed, Stream::Sampling, round as u64);
    let mut picked = index::sample(&mut rng, num_clients, n).into_vec();
    picked.sort_unstable();
    picked
}

/// The pool a client trains on in `phase` under `strategy`.
pub fn build_training_set(cd: &ClientData, strategy: TrainingStrategy, phase: Phase) -> Result<LabeledPool> {
    let generated = &cd.active_generated;
    Ok(match (strategy, phase) {
        (TrainingStrategy::Gen, _) => {
            if generated.is_empty() {
                return Err(Error::invalid("strategy gen needs a non-empty generated pool"));
            }
            generated.clone()
        }
        (TrainingStrategy::Pri, _) => cd.private.clone(),
        (TrainingStrategy::Mixed, _) => cd.private.merged(generated)?,
        (_, _) if generated.is_empty() => cd.private.clone(),
        (TrainingStrategy::P2G, Phase::First) | (TrainingStrategy::G2P, Phase::Second) => cd.private.clone(),
        (TrainingStrategy::P2G, Phase::Second) | (TrainingStrategy::G2P, Phase::First) => generated.clone(),
    })
}

/// Training phases and their iteration counts. Sequential strategies split
/// `iters` as `ceil/floor`; an empty generated pool collapses them to `pri`.
pub fn training_phases(cd: &ClientData, strategy: TrainingStrategy, iters: usize) -> Result<Vec<(LabeledPool, usize)>> {
    let sequential = matches!(strategy, TrainingStrategy::P2G | TrainingStrategy::G2P);
    if sequential && !cd.active_generated.is_empty() {
        Ok(vec![
            (build_training_set(cd, strategy, Phase::First)?, iters.div_ceil(2)),
            (build_training_set(cd, strategy, Phase::Second)?, iters / 2),
        ])
    } else {
        Ok(vec![(build_training_set(cd, strategy, Phase::First)?, iters)])
    }
}

/// Number of distinct samples a client trains on; the aggregation weight.
pub fn training_size(cd: &ClientData, strategy: TrainingStrategy) -> usize {
    match strategy {
        TrainingStrategy::Pri => cd.private.len(),
        TrainingStrategy::Gen => cd.active_generated.len(),
        _ => cd.private.len() + cd.active_generated.len(),
    }
}

/// Keeps the lowest-loss `floor(x/100 * n)` generated samples under `global`,
/// per category when `category_wise`. Ties go to the smaller uid. The result
/// keeps the original order of `generated`.
pub fn filter_generated(
    generated: &LabeledPool,
    global: &ModelParams,
    keep_percent: f64,
    category_wise: bool,
) -> Result<LabeledPool> {
    if generated.is_empty() {
        return Ok(LabeledPool::new());
    }
    if !(keep_percent > 0.0 && keep_percent <= 100.0) {
        return Err(Error::config("filter.keep_percent", "must be in (0, 100]"));
    }
    let losses = per_sample_losses(global, &generated.to_batch()?)?;
    let samples = generated.samples();
    let groups: Vec<Vec<usize>> = if category_wise {
        let classes = samples.iter().map(|s| s.label).max().map_or(0, |m| m + 1);
        let mut g = vec![Vec::new(); classes];
        for (i, s) in samples.iter().enumerate() {
            g[s.label].push(i);
        }
        g
    } else {
        vec![(0..samples.len()).collect()]
    };
    let mut keep = vec![false; samples.len()];
    for mut group in groups {
        let n = ((keep_percent * group.len() as f64) / 100.0 + 1e-9).floor() as usize;
        group.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(samples[a].uid.cmp(&samples[b].uid)));
        for &i in &group[..n.min(group.len())] {
            keep[i] = true;
        }
    }
    let kept: Vec<Sample> = samples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(s, _)| s.clone())
        .collect();
    LabeledPool::from_samples(kept)
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<RoundRecord>,
    pub global: ModelParams,
    pub plan: AllocationPlan,
    /// Each client's full generated pool.
    pub generated: Vec<LabeledPool>,
}

impl ExperimentOutput {
    pub fn generated_union(&self) -> Result<LabeledPool> {
        LabeledPool::from_samples(self.generated.iter().flat_map(|p| p.samples().iter().cloned()).collect())
    }
}

/// Simulation state between rounds.
#[derive(Debug)]
pub struct Simulation {
    cfg: ExperimentConfig,
    task: SyntheticTaskSpec,
    train: LabeledPool,
    test: LabeledPool,
    clients: Vec<ClientData>,
    states: Vec<ClientTrainState>,
    server: ServerState,
    plan: AllocationPlan,
    features: FeatureMap,
    heterogeneity: Option<(f64, f64)>,
    round: usize,
}

impl Simulation {
    /// Builds the task, partitions it, allocates the budget and generates
    /// every client's pool once.
    pub fn new(cfg: &ExperimentConfig) -> Result<Simulation> {
        cfg.validate()?;
        let (task, train, test) = (|| {
            let mut rng = stream(cfg.seed, Stream::Task, 0);
            let task = cfg.task.materialize(&mut rng)?;
            let (train, test) = build_task(&task, &mut rng)?;
            Ok((task, train, test))
        })()
        .stage("task")?;

        let private = (|| {
            let ps = PartitionSpec {
                num_clients: cfg.partition.num_clients,
                beta: cfg.partition.beta,
                mode: cfg.partition.mode,
                seed: cfg.seed,
            };
            let parts = match cfg.partition.mode {
                PartitionMode::Label => partition_dirichlet(&train, &ps)?,
                PartitionMode::Feature => partition_feature_domains(&train, &ps, cfg.partition.clients_per_domain)?,
            };
            parts.iter().map(|uids| train.select(uids)).collect::<Result<Vec<_>>>()
        })()
        .stage("partition")?;

        let k = private.len();
        let counts: Vec<Vec<usize>> = private.iter().map(|p| p.label_counts(task.num_classes)).collect();
        let capable = cfg.generation.capable.resolve(k);
        let plan = allocate(&cfg.generation, &counts, &capable).stage("allocation")?;

        let generated = (|| {
            let base = train.len() as u64;
            if let Some(path) = &cfg.import_path {
                let pool = load_external_pool(path, task.num_classes)?;
                if pool.feature_dim().is_some_and(|d| d != task.feature_dim) {
                    return Err(Error::shape(format!(
                        "imported pool has {} features, task has {}",
                        pool.feature_dim().unwrap_or(0),
                        task.feature_dim
                    )));
                }
                let parts = distribute_imported(&pool, &plan, &mut (base..))?;
                return parts.into_iter().map(LabeledPool::from_samples).collect::<Result<Vec<_>>>();
            }
            let mut offset = base;
            let mut out = Vec::with_capacity(k);
            for (client, private) in private.iter().enumerate() {
                let mut rng = stream(cfg.seed, Stream::Generation, client as u64);
                let mut uids = offset..;
                let samples = generate_for_client(private, plan.row(client), &cfg.generation, &task, &mut uids, &mut rng)?;
                offset += plan.client_total(client) as u64;
                out.push(LabeledPool::from_samples(samples)?);
            }
            Ok(out)
        })()
        .stage("generation")?;

        let widths: Vec<usize> = std::iter::once(task.feature_dim)
            .chain(cfg.hidden.iter().copied())
            .chain(std::iter::once(task.num_classes))
            .collect();
        let global = ModelParams::init_he(&widths, &mut stream(cfg.seed, Stream::Init, 0)).stage("init")?;
        let features = match cfg.eval.projection {
            ProjectionKind::Identity => FeatureMap::identity(),
            ProjectionKind::Random => FeatureMap::random(task.feature_dim, cfg.eval.projection_dim, cfg.seed),
        };
        Ok(Simulation {
            cfg: cfg.clone(),
            task,
            train,
            test,
            clients: private.into_iter().zip(generated).map(|(p, g)| ClientData::new(p, g)).collect(),
            states: vec![ClientTrainState::default(); k],
            server: ServerState::new(global),
            plan,
            features,
            heterogeneity: None,
            round: 0,
        })
    }

    pub fn clients(&self) -> &[ClientData] {
        &self.clients
    }

    pub fn global(&self) -> &ModelParams {
        &self.server.global
    }

    pub fn plan(&self) -> &AllocationPlan {
        &self.plan
    }

    pub fn task(&self) -> &SyntheticTaskSpec {
        &self.task
    }

    pub fn train(&self) -> &LabeledPool {
        &self.train
    }

    pub fn test(&self) -> &LabeledPool {
        &self.test
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn client_states(&self) -> &[ClientTrainState] {
        &self.states
    }

    /// Mean pairwise (cosine, l2) over every client's current training data.
    pub fn heterogeneity(&self) -> Result<(f64, f64)> {
        let pools = self
            .clients
            .iter()
            .map(|cd| match self.cfg.strategy {
                TrainingStrategy::Pri => Ok(cd.private.clone()),
                TrainingStrategy::Gen => Ok(cd.active_generated.clone()),
                _ => cd.private.merged(&cd.active_generated),
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&LabeledPool> = pools.iter().collect();
        Ok(dataset_heterogeneity(&refs, &self.features)?.mean_pairwise())
    }

    /// Runs the next round (rounds are numbered from 1).
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let round = self.round + 1;
        let cfg = &self.cfg;
        let k = self.clients.len();
        let selected = sample_clients(k, cfg.participation_rate, round, cfg.seed);

        if let Some(FilterSpec { start_round, keep_percent, category_wise }) = cfg.filter {
            if round >= start_round {
                for &c in &selected {
                    let cd = &mut self.clients[c];
                    cd.active_generated = filter_generated(&cd.generated, &self.server.global, keep_percent, category_wise)?;
                }
                self.heterogeneity = None;
            }
        }

        let mut locals = Vec::with_capacity(selected.len());
        let mut sizes = Vec::with_capacity(selected.len());
        let mut deltas = Vec::new();
        for &c in &selected {
            let cd = &self.clients[c];
            let phases = training_phases(cd, cfg.strategy, cfg.algorithm.local_iters)?;
            let refs: Vec<(&LabeledPool, usize)> = phases.iter().map(|(p, n)| (p, *n)).collect();
            let mut rng = stream(cfg.seed, Stream::LocalTrain, round_client_index(round, c));
            let update = local_train_phases(
                &self.server.global,
                &refs,
                &cfg.algorithm,
                &mut self.states[c],
                &self.server,
                &mut rng,
            )?;
            sizes.push(training_size(cd, cfg.strategy));
            locals.push(update.model);
            if let Some(d) = update.control_delta {
                deltas.push(d);
            }
        }

        let local_refs: Vec<&ModelParams> = locals.iter().collect();
        let averaged = aggregate(&local_refs, &sizes)?;
        server_update(&mut self.server, &averaged, &cfg.algorithm)?;
        if cfg.algorithm.kind == AlgorithmKind::Scaffold {
            let delta_refs: Vec<&ModelParams> = deltas.iter().collect();
            update_server_control(&mut self.server, &delta_refs, k)?;
        }

        let global = &self.server.global;
        if let Some(i) = global.first_non_finite() {
            return Err(Error::NonFinite {
                index: i,
                context: format!("global model after round {round}"),
            });
        }
        let (cosine, l2) = match self.heterogeneity {
            Some(h) => h,
            None => {
                let h = self.heterogeneity()?;
                self.heterogeneity = Some(h);
                h
            }
        };
        let attack_acc = if cfg.eval.attack_every > 0 && round % cfg.eval.attack_every == 0 {
            let mut rng = stream(cfg.seed, Stream::Attack, round as u64);
            Some(mia_attack(global, &self.train, &self.test, &cfg.eval.attack, &mut rng)?.accuracy())
        } else {
            None
        };
        let record = RoundRecord {
            round,
            global_test_acc: accuracy(global, &self.test)?,
            avg_local_global_acc: avg_local_global_acc(&local_refs, &self.test)?,
            divergence: model_divergence(&local_refs, global)?,
            mean_pairwise_cosine: cosine,
            mean_pairwise_l2: l2,
            attack_acc,
        };
        self.round = round;
        Ok(record)
    }

    pub fn finish(self, records: Vec<RoundRecord>) -> ExperimentOutput {
        ExperimentOutput {
            records,
            global: self.server.global,
            plan: self.plan,
            generated: self.clients.into_iter().map(|c| c.generated).collect(),
        }
    }
}

/// Sets up the simulation and runs all configured rounds.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let mut sim = Simulation::new(cfg)?;
    let mut records = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        records.push(sim.run_round().stage("training")?);
    }
    Ok(sim.finish(records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Origin;

    fn sample(uid: u64, label: usize, x: f64) -> Sample {
        Sample {
            features: vec![x],
            label,
            domain: 0,
            origin: Origin::Generated,
            uid,
        }
    }

    fn small_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.rounds = 3;
        cfg.hidden = vec![8];
        cfg.task.num_classes = 3;
        cfg.task.feature_dim = 4;
        cfg.task.train_per_class = 20;
        cfg.task.test_per_class = 10;
        cfg.partition.num_clients = 4;
        cfg.algorithm.local_iters = 5;
        cfg.algorithm.batch_size = 8;
        cfg.generation.total_budget = 30;
        cfg.eval.attack_every = 0;
        cfg.eval.projection_dim = 6;
        cfg
    }

    #[test]
    fn client_sampling_counts_and_determinism() {
        assert_eq!(sample_clients(7, 1.0, 3, 1), (0..7).collect::<Vec<_>>());
        let s = sample_clients(200, 0.05, 4, 9);
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, sample_clients(200, 0.05, 4, 9));
        assert_ne!(s, sample_clients(200, 0.05, 5, 9));
        assert_eq!(sample_clients(10, 0.01, 1, 0).len(), 1);
    }

    #[test]
    fn training_sets_per_strategy() {
        let private = LabeledPool::from_samples((0..100).map(|i| sample(i, 0, 0.0)).collect()).unwrap();
        let generated = LabeledPool::from_samples((100..150).map(|i| sample(i, 1, 0.0)).collect()).unwrap();
        let cd = ClientData::new(private.clone(), generated.clone());
        assert_eq!(build_training_set(&cd, TrainingStrategy::Mixed, Phase::First).unwrap().len(), 150);
        assert_eq!(build_training_set(&cd, TrainingStrategy::Pri, Phase::First).unwrap(), private);
        assert_eq!(build_training_set(&cd, TrainingStrategy::P2G, Phase::Second).unwrap(), generated);
        assert_eq!(build_training_set(&cd, TrainingStrategy::G2P, Phase::First).unwrap(), generated);
        let phases = training_phases(&cd, TrainingStrategy::G2P, 7).unwrap();
        assert_eq!((phases[0].1, phases[1].1), (4, 3));
        assert_eq!(phases[1].0, private);

        let empty = ClientData::new(private.clone(), LabeledPool::new());
        let phases = training_phases(&empty, TrainingStrategy::P2G, 7).unwrap();
        assert_eq!(phases.len(), 1);
        assert_eq!(phases[0], (private, 7));
        assert!(build_training_set(&empty, TrainingStrategy::Gen, Phase::First).is_err());
        for s in [TrainingStrategy::Pri, TrainingStrategy::Mixed, TrainingStrategy::P2G, TrainingStrategy::G2P] {
            let total: usize = training_phases(&cd, s, 9).unwrap().iter().map(|p| p.1).sum();
            assert_eq!(total, 9);
        }
    }

    fn one_feature_model(weights: [f64; 2]) -> ModelParams {
        use crate::numerics::LayerShape;
        let shapes = vec![LayerShape { fan_in: 1, fan_out: 2 }];
        ModelParams::from_values(shapes, vec![weights[0], weights[1], 0.0, 0.0]).unwrap()
    }

    #[test]
    fn filter_drops_highest_loss() {
        // logits (0, x): class 0 loss grows with x
        let model = one_feature_model([0.0, 1.0]);
        let pool = LabeledPool::from_samples((0..10).map(|i| sample(i, 0, i as f64)).collect()).unwrap();
        let kept = filter_generated(&pool, &model, 90.0, false).unwrap();
        assert_eq!(kept.uids(), (0..9).collect::<Vec<u64>>());
        assert_eq!(filter_generated(&pool, &model, 100.0, false).unwrap(), pool);
        assert!(filter_generated(&LabeledPool::new(), &model, 50.0, false).unwrap().is_empty());
    }

    #[test]
    fn filter_category_wise_cuts_each_class() {
        let model = one_feature_model([0.0, 1.0]);
        // class 0 losses are all far above class 1 losses
        let mut samples: Vec<Sample> = (0..10).map(|i| sample(i, 0, 10.0 + i as f64)).collect();
        samples.extend((10..20).map(|i| sample(i, 1, 10.0 + i as f64)));
        let pool = LabeledPool::from_samples(samples).unwrap();
        let kept = filter_generated(&pool, &model, 90.0, true).unwrap();
        assert_eq!(kept.label_counts(2), vec![9, 9]);
        assert!(!kept.uids().contains(&9));
        assert!(!kept.uids().contains(&10));
        let plain = filter_generated(&pool, &model, 90.0, false).unwrap();
        assert_eq!(plain.label_counts(2), vec![8, 10]);
    }

    #[test]
    fn filter_ties_go_to_smaller_uid() {
        let model = one_feature_model([0.0, 0.0]);
        let pool = LabeledPool::from_samples([5, 2, 9, 1].iter().map(|&u| sample(u, 0, 1.0)).collect()).unwrap();
        let kept = filter_generated(&pool, &model, 50.0, false).unwrap();
        assert_eq!(kept.uids(), vec![2, 1]);
    }

    #[test]
    fn single_client_global_is_local_model() {
        let mut cfg = small_cfg();
        cfg.partition.num_clients = 1;
        cfg.rounds = 1;
        let mut sim = Simulation::new(&cfg).unwrap();
        let global0 = sim.global().clone();
        let cd = sim.clients()[0].clone();
        let rec = sim.run_round().unwrap();
        let phases = training_phases(&cd, cfg.strategy, cfg.algorithm.local_iters).unwrap();
        let refs: Vec<(&LabeledPool, usize)> = phases.iter().map(|(p, n)| (p, *n)).collect();
        let mut rng = stream(cfg.seed, Stream::LocalTrain, round_client_index(1, 0));
        let local = local_train_phases(
            &global0,
            &refs,
            &cfg.algorithm,
            &mut ClientTrainState::default(),
            &ServerState::new(global0.clone()),
            &mut rng,
        )
        .unwrap();
        assert_eq!(sim.global(), &local.model);
        assert_eq!(rec.divergence, 0.0);
        assert_eq!((rec.mean_pairwise_cosine, rec.mean_pairwise_l2), (1.0, 0.0));
    }

    #[test]
    fn zero_learning_rate_keeps_global() {
        let mut cfg = small_cfg();
        cfg.algorithm.lr = 0.0;
        cfg.rounds = 2;
        let sim = Simulation::new(&cfg).unwrap();
        let start = sim.global().clone();
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.global, start);
        assert!(out.records.iter().all(|r| r.divergence == 0.0));
    }

    #[test]
    fn generation_is_one_shot_and_uids_disjoint() {
        let cfg = small_cfg();
        let mut sim = Simulation::new(&cfg).unwrap();
        let before: Vec<LabeledPool> = sim.clients().iter().map(|c| c.generated.clone()).collect();
        assert_eq!(before.iter().map(|p| p.len()).sum::<usize>(), 30);
        let mut all: Vec<u64> = sim.train().uids();
        for cd in sim.clients() {
            all.extend(cd.generated.uids());
        }
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
        sim.run_round().unwrap();
        sim.run_round().unwrap();
        let after: Vec<LabeledPool> = sim.clients().iter().map(|c| c.generated.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn no_budget_matches_private_only() {
        let mut cfg = small_cfg();
        cfg.generation.total_budget = 0;
        let mixed = run_experiment(&cfg).unwrap();
        cfg.strategy = TrainingStrategy::Pri;
        let pri = run_experiment(&cfg).unwrap();
        assert_eq!(mixed.records, pri.records);
        assert_eq!(mixed.global, pri.global);

        let mut with_budget = small_cfg();
        with_budget.strategy = TrainingStrategy::Pri;
        assert_eq!(run_experiment(&with_budget).unwrap().records, pri.records);
    }

    #[test]
    fn no_capable_clients_matches_no_budget() {
        let mut cfg = small_cfg();
        cfg.generation.capable = "none".parse().unwrap();
        let none = run_experiment(&cfg).unwrap();
        assert_eq!(none.plan.total(), 0);
        cfg.generation.capable = "all".parse().unwrap();
        cfg.generation.total_budget = 0;
        assert_eq!(run_experiment(&cfg).unwrap().records, none.records);
    }

    #[test]
    fn half_capable_zeroes_other_rows() {
        let mut cfg = small_cfg();
        cfg.generation.capable = "frac:0.5".parse().unwrap();
        let out = run_experiment(&cfg).unwrap();
        let capable = cfg.generation.capable.resolve(4);
        assert_eq!(capable.len(), 2);
        for k in 0..4 {
            if !capable.contains(&k) {
                assert_eq!(out.plan.client_total(k), 0);
                assert!(out.generated[k].is_empty());
            }
        }
        assert_eq!(out.plan.total(), 30);
    }

    #[test]
    fn unselected_clients_keep_state() {
        let mut cfg = small_cfg();
        cfg.algorithm.kind = AlgorithmKind::Scaffold;
        cfg.participation_rate = 0.5;
        let mut sim = Simulation::new(&cfg).unwrap();
        sim.run_round().unwrap();
        let before = sim.client_states().to_vec();
        let selected = sample_clients(4, 0.5, 2, cfg.seed);
        sim.run_round().unwrap();
        for k in 0..4 {
            if !selected.contains(&k) {
                assert_eq!(sim.client_states()[k].control, before[k].control);
            }
        }
    }

    #[test]
    fn stage_errors_name_stage() {
        let mut cfg = small_cfg();
        cfg.strategy = TrainingStrategy::Gen;
        cfg.generation.total_budget = 0;
        let err = run_experiment(&cfg).unwrap_err();
        assert!(err.to_string().contains("training"), "{err}");
        let mut cfg = small_cfg();
        cfg.import_path = Some("/nonexistent/pool.csv".into());
        let err = run_experiment(&cfg).unwrap_err();
        assert!(err.to_string().contains("generation"), "{err}");
    }

    #[test]
    fn attack_rounds_only() {
        let mut cfg = small_cfg();
        cfg.rounds = 4;
        cfg.eval.attack_every = 2;
        cfg.eval.attack.eval_member_count = 20;
        cfg.eval.attack.eval_nonmember_count = 10;
        cfg.eval.attack.known_fraction = 0.2;
        let out = run_experiment(&cfg).unwrap();
        let present: Vec<bool> = out.records.iter().map(|r| r.attack_acc.is_some()).collect();
        assert_eq!(present, vec![false, true, false, true]);
    }
}
