//! MACs-constrained evolutionary architecture search with a seed-matched
//! random-search baseline.

use super::{sample_uniform, NasError, SearchSpace};
use crate::backbone::ArchSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct SearchConfig {
    /// Population size; must be even (offspring split half mutation, half
    /// crossover).
    pub population: usize,
    pub generations: usize,
    /// Survivors selected each generation; carried over unchanged.
    pub top_k: usize,
    /// Per-parameter mutation probability.
    pub mutation_prob: f64,
    /// Resource constraint: candidates must estimate at or below this.
    pub macs_limit: f64,
    pub seed: u64,
    /// Attempts per offspring slot before declaring the constraint
    /// infeasible.
    pub resample_budget: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        // Population 50 for 20 generations is the published search recipe;
        // top-k and the mutation probability are configuration.
        Self {
            population: 50,
            generations: 20,
            top_k: 10,
            mutation_prob: 0.1,
            macs_limit: f64::INFINITY,
            seed: 0,
            resample_budget: 10_000,
        }
    }
}

/// One line of the generation log.
#[derive(Debug, Clone, Serialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_macs: f64,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub best_spec: ArchSpec,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: ArchSpec,
    pub best_fitness: f64,
    pub history: Vec<GenerationRecord>,
    /// Total fitness evaluations that were not cache hits.
    pub evaluations: usize,
}

struct Evaluator<'a> {
    fitness: &'a mut dyn FnMut(&[ArchSpec]) -> Vec<f64>,
    cache: HashMap<String, f64>,
    evaluations: usize,
}

impl<'a> Evaluator<'a> {
    fn eval_all(&mut self, specs: &[ArchSpec]) -> Result<Vec<f64>, NasError> {
        let mut missing: Vec<ArchSpec> = Vec::new();
        let mut missing_keys: Vec<String> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for s in specs {
            let key = s.to_canonical_json();
            if !self.cache.contains_key(&key) && seen.insert(key.clone()) {
                missing.push(s.clone());
                missing_keys.push(key);
            }
        }
        if !missing.is_empty() {
            let values = (self.fitness)(&missing);
            assert_eq!(values.len(), missing.len(), "one fitness per candidate");
            self.evaluations += values.len();
            for (key, v) in missing_keys.into_iter().zip(&values) {
                if !v.is_finite() {
                    return Err(NasError::NonFiniteFitness(key));
                }
                self.cache.insert(key, *v);
            }
        }
        Ok(specs
            .iter()
            .map(|s| self.cache[&s.to_canonical_json()])
            .collect())
    }
}

fn rejection_sample(
    space: &SearchSpace,
    rng: &mut ChaCha8Rng,
    config: &SearchConfig,
    constraint: &dyn Fn(&ArchSpec) -> f64,
    mut proposal: impl FnMut(&mut ChaCha8Rng) -> Result<ArchSpec, NasError>,
) -> Result<ArchSpec, NasError> {
    let _ = space;
    for _ in 0..config.resample_budget {
        let spec = proposal(rng)?;
        if constraint(&spec) <= config.macs_limit {
            return Ok(spec);
        }
    }
    Err(NasError::Infeasible {
        attempts: config.resample_budget,
        limit: config.macs_limit,
    })
}

/// Picks a choice uniformly among the alternatives to `current`; `current`
/// itself when it is the only option.
fn alter<T: Copy + PartialEq>(choices: &[T], current: T, rng: &mut ChaCha8Rng) -> T {
    let others: Vec<T> = choices.iter().copied().filter(|c| *c != current).collect();
    if others.is_empty() {
        current
    } else {
        others[rng.random_range(0..others.len())]
    }
}

fn mutate(space: &SearchSpace, parent: &ArchSpec, prob: f64, rng: &mut ChaCha8Rng) -> ArchSpec {
    let mut child = parent.clone();
    if rng.random_range(0.0..1.0) < prob {
        child.stem_channels = alter(&space.stem_choices, child.stem_channels, rng);
    }
    for (c, choices) in child.stage_channels.iter_mut().zip(&space.stage_choices) {
        if rng.random_range(0.0..1.0) < prob {
            *c = alter(choices, *c, rng);
        }
    }
    let depth_choices: Vec<usize> = (1..=space.max_depth).collect();
    for d in child.stage_depths.iter_mut() {
        if rng.random_range(0.0..1.0) < prob {
            *d = alter(&depth_choices, *d, rng);
        }
    }
    child
}

fn crossover(a: &ArchSpec, b: &ArchSpec, rng: &mut ChaCha8Rng) -> ArchSpec {
    let mut child = a.clone();
    if rng.random_range(0..2) == 1 {
        child.stem_channels = b.stem_channels;
    }
    for (i, c) in child.stage_channels.iter_mut().enumerate() {
        if rng.random_range(0..2) == 1 {
            *c = b.stage_channels[i];
        }
    }
    for (i, d) in child.stage_depths.iter_mut().enumerate() {
        if rng.random_range(0..2) == 1 {
            *d = b.stage_depths[i];
        }
    }
    child
}

/// Evolutionary search under a MACs constraint.
///
/// Generation 0 is `population` rejection-sampled uniform candidates. Each
/// generation evaluates the population, keeps the `top_k` fittest as both
/// survivors and parents, and produces `population/2` mutations plus
/// `population/2` crossovers, every offspring rejection-resampled until it
/// satisfies the constraint. Survivors re-enter the next population, which
/// is truncated back to `population` by fitness after evaluation, so the
/// best-of-generation fitness never decreases.
///
/// `fitness` is batched: it receives every not-yet-evaluated candidate of a
/// generation at once and may evaluate them in parallel; results must be
/// deterministic per candidate.
pub fn evolutionary_search(
    config: &SearchConfig,
    space: &SearchSpace,
    fitness: &mut dyn FnMut(&[ArchSpec]) -> Vec<f64>,
    constraint_macs: &dyn Fn(&ArchSpec) -> f64,
) -> Result<SearchResult, NasError> {
    assert!(config.population >= 2 && config.population.is_multiple_of(2));
    assert!(config.top_k >= 1 && config.top_k <= config.population);
    assert!(config.generations >= 1);
    space.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(config.seed, "evolution"));
    let mut evaluator = Evaluator {
        fitness,
        cache: HashMap::new(),
        evaluations: 0,
    };

    let mut population: Vec<ArchSpec> = (0..config.population)
        .map(|_| {
            rejection_sample(space, &mut rng, config, constraint_macs, |rng| {
                sample_uniform(space, rng, (1, space.max_depth))
            })
        })
        .collect::<Result<_, _>>()?;

    let mut history = Vec::with_capacity(config.generations);
    loop {
        let generation = history.len();
        let scores = evaluator.eval_all(&population)?;
        let mut order: Vec<usize> = (0..population.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .expect("finite fitness")
                .then(a.cmp(&b))
        });
        let ranked: Vec<ArchSpec> = order.iter().map(|&i| population[i].clone()).collect();
        let ranked_scores: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
        let keep = config.population.min(ranked.len());
        let population_now = &ranked[..keep];
        let scores_now = &ranked_scores[..keep];

        history.push(GenerationRecord {
            generation,
            best_macs: constraint_macs(&population_now[0]),
            best_fitness: scores_now[0],
            mean_fitness: scores_now.iter().sum::<f64>() / scores_now.len() as f64,
            best_spec: population_now[0].clone(),
        });

        if history.len() == config.generations {
            return Ok(SearchResult {
                best: population_now[0].clone(),
                best_fitness: scores_now[0],
                history,
                evaluations: evaluator.evaluations,
            });
        }

        let elites = &population_now[..config.top_k.min(keep)];
        let mut next: Vec<ArchSpec> = elites.to_vec();
        for _ in 0..config.population / 2 {
            let child = rejection_sample(space, &mut rng, config, constraint_macs, |rng| {
                let parent = &elites[rng.random_range(0..elites.len())];
                Ok(mutate(space, parent, config.mutation_prob, rng))
            })?;
            next.push(child);
        }
        for _ in 0..config.population / 2 {
            let child = rejection_sample(space, &mut rng, config, constraint_macs, |rng| {
                let a = &elites[rng.random_range(0..elites.len())];
                let b = &elites[rng.random_range(0..elites.len())];
                Ok(crossover(a, b, rng))
            })?;
            next.push(child);
        }
        population = next;
    }
}

/// Baseline with the same evaluation budget: `population x generations`
/// feasible uniform samples, best kept.
pub fn random_search(
    config: &SearchConfig,
    space: &SearchSpace,
    fitness: &mut dyn FnMut(&[ArchSpec]) -> Vec<f64>,
    constraint_macs: &dyn Fn(&ArchSpec) -> f64,
) -> Result<SearchResult, NasError> {
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(config.seed, "random-search"));
    let budget = config.population * config.generations;
    let mut evaluator = Evaluator {
        fitness,
        cache: HashMap::new(),
        evaluations: 0,
    };
    let mut best: Option<(ArchSpec, f64)> = None;
    let mut history = Vec::new();
    for generation in 0..config.generations {
        let batch: Vec<ArchSpec> = (0..budget / config.generations)
            .map(|_| {
                rejection_sample(space, &mut rng, config, constraint_macs, |rng| {
                    sample_uniform(space, rng, (1, space.max_depth))
                })
            })
            .collect::<Result<_, _>>()?;
        let scores = evaluator.eval_all(&batch)?;
        for (s, &f) in batch.iter().zip(&scores) {
            if best.as_ref().is_none_or(|(_, bf)| f > *bf) {
                best = Some((s.clone(), f));
            }
        }
        let (bs, bf) = best.clone().expect("nonempty generation");
        history.push(GenerationRecord {
            generation,
            best_macs: constraint_macs(&bs),
            best_fitness: bf,
            mean_fitness: scores.iter().sum::<f64>() / scores.len().max(1) as f64,
            best_spec: bs,
        });
    }
    let (best, best_fitness) = best.expect("at least one generation");
    Ok(SearchResult {
        best,
        best_fitness,
        history,
        evaluations: evaluator.evaluations,
    })
}
