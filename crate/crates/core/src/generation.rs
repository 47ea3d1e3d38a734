//! One-shot client-side data generation: budget allocation over
//! (client, category) cells and sample synthesis under each guidance mode.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::RangeFrom;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::data::{largest_remainder, LabeledPool, Origin, Sample, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::rng::Rng;

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl std::str::FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown value `{other}` (expected one of: {})",
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

pub(crate) use keyword_enum;

keyword_enum!(AllocationStrategy {
    Equal => "equal",
    Inverse => "inverse",
    Waterfill => "waterfill",
});

keyword_enum!(Guidance {
    PromptOnly => "prompt_only",
    RealData => "real_data",
    Mixed => "mixed",
});

keyword_enum!(DiversityProfile {
    Single => "single",
    Multiple => "multiple",
    Llm => "llm",
});

impl DiversityProfile {
    /// Width multiplier applied to the generator's spread.
    pub fn width(&self) -> f64 {
        match self {
            DiversityProfile::Single => 0.5,
            DiversityProfile::Multiple => 1.0,
            DiversityProfile::Llm => 1.5,
        }
    }
}

/// Which clients can run the generator.
#[derive(Debug, Clone, PartialEq)]
pub enum CapableClients {
    All,
    /// The first `ceil(f * K)` client ids.
    Fraction(f64),
    Ids(BTreeSet<usize>),
}

impl CapableClients {
    pub fn resolve(&self, num_clients: usize) -> BTreeSet<usize> {
        match self {
            CapableClients::All => (0..num_clients).collect(),
            CapableClients::Fraction(f) => (0..((f * num_clients as f64).ceil() as usize).min(num_clients)).collect(),
            CapableClients::Ids(ids) => ids.iter().copied().filter(|&k| k < num_clients).collect(),
        }
    }
}

impl fmt::Display for CapableClients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CapableClients::All => f.write_str("all"),
            CapableClients::Fraction(x) => write!(f, "frac:{x}"),
            CapableClients::Ids(ids) if ids.is_empty() => f.write_str("none"),
            CapableClients::Ids(ids) => {
                let list: Vec<String> = ids.iter().map(|k| k.to_string()).collect();
                f.write_str(&list.join(","))
            }
        }
    }
}

impl FromStr for CapableClients {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "all" => Ok(CapableClients::All),
            "none" => Ok(CapableClients::Ids(BTreeSet::new())),
            t if t.starts_with("frac:") => {
                let f: f64 = t[5..].trim().parse().map_err(|_| format!("bad fraction `{t}`"))?;
                if !(0.0..=1.0).contains(&f) {
                    return Err(format!("fraction {f} outside [0, 1]"));
                }
                Ok(CapableClients::Fraction(f))
            }
            t => t
                .split(',')
                .map(|id| id.trim().parse::<usize>().map_err(|_| format!("bad client id `{id}`")))
                .collect::<std::result::Result<BTreeSet<_>, _>>()
                .map(CapableClients::Ids),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSpec {
    pub total_budget: usize,
    pub allocation: AllocationStrategy,
    pub guidance: Guidance,
    pub diversity_profile: DiversityProfile,
    /// Noise std, in units of the task's within-class std, for real-data guidance.
    pub real_guidance_noise: f64,
    pub capable: CapableClients,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        GenerationSpec {
            total_budget: 0,
            allocation: AllocationStrategy::Equal,
            guidance: Guidance::Mixed,
            diversity_profile: DiversityProfile::Multiple,
            real_guidance_noise: 0.5,
            capable: CapableClients::All,
        }
    }
}

/// Per-client, per-category generation budgets `N[k][c]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationPlan {
    pub budgets: Vec<Vec<usize>>,
}

impl AllocationPlan {
    pub fn zeros(num_clients: usize, num_classes: usize) -> Self {
        AllocationPlan {
            budgets: vec![vec![0; num_classes]; num_clients],
        }
    }

    pub fn total(&self) -> usize {
        self.budgets.iter().flatten().sum()
    }

    pub fn row(&self, client: usize) -> &[usize] {
        &self.budgets[client]
    }

    pub fn client_total(&self, client: usize) -> usize {
        self.budgets[client].iter().sum()
    }
}

fn capable_ids(num_clients: usize, capable: &BTreeSet<usize>, budget: usize) -> Result<Vec<usize>> {
    let ids: Vec<usize> = capable.iter().copied().filter(|&k| k < num_clients).collect();
    if budget > 0 && ids.is_empty() {
        return Err(Error::invalid("a positive budget needs at least one generation-capable client"));
    }
    Ok(ids)
}

/// `M / (K'C)` per capable cell; the remainder goes one each to the first
/// cells in (client, category) order.
pub fn allocate_equal(budget: usize, num_clients: usize, num_classes: usize, capable: &BTreeSet<usize>) -> Result<AllocationPlan> {
    let ids = capable_ids(num_clients, capable, budget)?;
    let mut plan = AllocationPlan::zeros(num_clients, num_classes);
    if budget == 0 || num_classes == 0 {
        return Ok(plan);
    }
    let cells = ids.len() * num_classes;
    let base = budget / cells;
    let mut extra = budget - base * cells;
    for &k in &ids {
        for c in 0..num_classes {
            plan.budgets[k][c] = base + usize::from(extra > 0);
            extra = extra.saturating_sub(1);
        }
    }
    Ok(plan)
}

/// Budget inversely proportional to private data size:
/// `N[k][c] = M (N_max - N_k) / (C sum_i (N_max - N_i))`, over capable clients.
pub fn allocate_inverse(
    budget: usize,
    client_counts: &[usize],
    num_classes: usize,
    capable: &BTreeSet<usize>,
) -> Result<AllocationPlan> {
    let num_clients = client_counts.len();
    let ids = capable_ids(num_clients, capable, budget)?;
    let Some(n_max) = ids.iter().map(|&k| client_counts[k]).max() else {
        return Ok(AllocationPlan::zeros(num_clients, num_classes));
    };
    let weights: Vec<f64> = ids.iter().map(|&k| (n_max - client_counts[k]) as f64).collect();
    if weights.iter().all(|&w| w == 0.0) {
        return allocate_equal(budget, num_clients, num_classes, capable);
    }
    let mut plan = AllocationPlan::zeros(num_clients, num_classes);
    let per_class = largest_remainder(budget, &vec![1.0; num_classes]);
    for (c, &column) in per_class.iter().enumerate() {
        for (&k, n) in ids.iter().zip(largest_remainder(column, &weights)) {
            plan.budgets[k][c] = n;
        }
    }
    Ok(plan)
}

/// Greedy integer water-filling of `budget` units over categories with
/// existing `counts`: each unit goes to the category with the smallest
/// current total, ties to the lowest index.
pub fn waterfill_row(counts: &[usize], budget: usize) -> Vec<usize> {
    let mut alloc = vec![0; counts.len()];
    if counts.is_empty() {
        return alloc;
    }
    for _ in 0..budget {
        let target = (0..counts.len())
            .min_by_key(|&c| (counts[c] + alloc[c], c))
            .expect("non-empty");
        alloc[target] += 1;
    }
    alloc
}

/// Each capable client gets an equal share `B_k` of `M` (largest remainder),
/// spread over its categories by [`waterfill_row`].
pub fn allocate_waterfill(budget: usize, counts: &[Vec<usize>], capable: &BTreeSet<usize>) -> Result<AllocationPlan> {
    let num_clients = counts.len();
    let num_classes = counts.first().map_or(0, Vec::len);
    if counts.iter().any(|row| row.len() != num_classes) {
        return Err(Error::shape("count rows must all have the same number of categories"));
    }
    let ids = capable_ids(num_clients, capable, budget)?;
    let mut plan = AllocationPlan::zeros(num_clients, num_classes);
    if ids.is_empty() {
        return Ok(plan);
    }
    let shares = largest_remainder(budget, &vec![1.0; ids.len()]);
    for (&k, share) in ids.iter().zip(shares) {
        plan.budgets[k] = waterfill_row(&counts[k], share);
    }
    Ok(plan)
}

/// Dispatches on the configured strategy. `counts[k][c]` are private label counts.
pub fn allocate(spec: &GenerationSpec, counts: &[Vec<usize>], capable: &BTreeSet<usize>) -> Result<AllocationPlan> {
    let num_clients = counts.len();
    let num_classes = counts.first().map_or(0, Vec::len);
    if capable.is_empty() {
        // no client can generate: same as a zero budget
        return Ok(AllocationPlan::zeros(num_clients, num_classes));
    }
    match spec.allocation {
        AllocationStrategy::Equal => allocate_equal(spec.total_budget, num_clients, num_classes, capable),
        AllocationStrategy::Inverse => {
            let totals: Vec<usize> = counts.iter().map(|r| r.iter().sum()).collect();
            allocate_inverse(spec.total_budget, &totals, num_classes, capable)
        }
        AllocationStrategy::Waterfill => allocate_waterfill(spec.total_budget, counts, capable),
    }
}

fn next_uid(uids: &mut RangeFrom<u64>) -> u64 {
    uids.next().expect("uid space exhausted")
}

/// `n` class-conditional samples from the generator: world means shifted by
/// the generator gap, spread `within_std * diversity * width(profile)`, domain
/// uniform over all domains.
pub fn generate_prompt_only(
    task: &SyntheticTaskSpec,
    class: usize,
    n: usize,
    profile: DiversityProfile,
    uids: &mut RangeFrom<u64>,
    rng: &mut Rng,
) -> Result<Vec<Sample>> {
    if class >= task.num_classes {
        return Err(Error::invalid(format!("unknown class {class} (task has {})", task.num_classes)));
    }
    let std = task.within_std * task.generator_diversity * profile.width();
    Ok((0..n)
        .map(|_| {
            let domain = rng.random_range(0..task.num_domains);
            let features = task
                .mean(class, domain)
                .iter()
                .zip(&task.generator_gap)
                .map(|(m, g)| m + g + std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Sample {
                features,
                label: class,
                domain,
                origin: Origin::Generated,
                uid: next_uid(uids),
            }
        })
        .collect())
}

/// `n` perturbations of uniformly chosen real samples, noise std `noise * within_std`.
pub fn generate_real_guided(
    real: &[&Sample],
    n: usize,
    noise: f64,
    within_std: f64,
    uids: &mut RangeFrom<u64>,
    rng: &mut Rng,
) -> Result<Vec<Sample>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if real.is_empty() {
        return Err(Error::invalid("real-data guidance needs at least one real sample"));
    }
    let std = noise * within_std;
    Ok((0..n)
        .map(|_| {
            let src = real[rng.random_range(0..real.len())];
            let features = src
                .features
                .iter()
                .map(|x| x + std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Sample {
                features,
                label: src.label,
                domain: src.domain,
                origin: Origin::Generated,
                uid: next_uid(uids),
            }
        })
        .collect())
}

/// Synthesizes one client's generated pool from its plan row.
///
/// Mixed guidance splits a present class `ceil(N/2)` prompt-only and
/// `floor(N/2)` real-guided; absent classes are always prompt-only.
pub fn generate_for_client(
    private: &LabeledPool,
    plan_row: &[usize],
    spec: &GenerationSpec,
    task: &SyntheticTaskSpec,
    uids: &mut RangeFrom<u64>,
    rng: &mut Rng,
) -> Result<Vec<Sample>> {
    if plan_row.len() != task.num_classes {
        return Err(Error::shape(format!(
            "plan row has {} categories, task has {}",
            plan_row.len(),
            task.num_classes
        )));
    }
    let mut out = Vec::with_capacity(plan_row.iter().sum());
    for (class, &n) in plan_row.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let real: Vec<&Sample> = private.iter().filter(|s| s.label == class).collect();
        let (prompt, guided) = match spec.guidance {
            Guidance::PromptOnly => (n, 0),
            _ if real.is_empty() => (n, 0),
            Guidance::RealData => (0, n),
            Guidance::Mixed => (n.div_ceil(2), n / 2),
        };
        out.extend(generate_prompt_only(task, class, prompt, spec.diversity_profile, uids, rng)?);
        out.extend(generate_real_guided(&real, guided, spec.real_guidance_noise, task.within_std, uids, rng)?);
    }
    Ok(out)
}

/// Hands out an imported pool according to `plan`: client `k` takes the next
/// `N[k][c]` samples labeled `c`, in file order. Uids are reassigned from `uids`.
pub fn distribute_imported(
    pool: &LabeledPool,
    plan: &AllocationPlan,
    uids: &mut RangeFrom<u64>,
) -> Result<Vec<Vec<Sample>>> {
    let num_classes = plan.budgets.first().map_or(0, Vec::len);
    let mut by_class: Vec<std::collections::VecDeque<&Sample>> = vec![Default::default(); num_classes];
    for s in pool.iter() {
        if s.label >= num_classes {
            return Err(Error::invalid(format!("imported sample uid {} has label {}", s.uid, s.label)));
        }
        by_class[s.label].push_back(s);
    }
    plan.budgets
        .iter()
        .map(|row| {
            let mut out = Vec::new();
            for (c, &n) in row.iter().enumerate() {
                for _ in 0..n {
                    let s = by_class[c].pop_front().ok_or_else(|| {
                        Error::invalid(format!("imported pool has too few samples of class {c} for the allocation plan"))
                    })?;
                    out.push(Sample {
                        uid: next_uid(uids),
                        origin: Origin::Generated,
                        ..s.clone()
                    });
                }
            }
            Ok(out)
        })
        .collect()
}
