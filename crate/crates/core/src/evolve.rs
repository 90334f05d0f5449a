//! BitOPs-constrained evolutionary search with a validation-loss proxy.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost::bitops;
use crate::error::{Error, Result};
use crate::supernet::{sample_uniform, validate_config, SearchSpace, SubnetConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionHyper {
    pub population: usize,
    pub parents: usize,
    pub mutation_prob: f64,
    pub mutation_size: usize,
    pub crossover_size: usize,
    pub epochs: usize,
    /// Rejection draws allowed per population slot.
    pub max_draws: usize,
}

impl Default for EvolutionHyper {
    fn default() -> Self {
        EvolutionHyper {
            population: 50,
            parents: 10,
            mutation_prob: 0.4,
            mutation_size: 25,
            crossover_size: 25,
            epochs: 5,
            max_draws: 100,
        }
    }
}

impl EvolutionHyper {
    pub fn validate(&self) -> Result<()> {
        if self.population == 0 || self.parents == 0 || self.epochs == 0 || self.max_draws == 0 {
            return Err(Error::config("population, parents, epochs and max_draws must be positive"));
        }
        if self.parents > self.population || self.mutation_size > self.population || self.crossover_size > self.population {
            return Err(Error::config("parent and offspring pools cannot exceed the population"));
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return Err(Error::config("mutation probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// An evaluated, feasible configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub config: SubnetConfig,
    pub loss: f64,
    pub bitops: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub index: usize,
    /// Population of this generation, best first.
    pub population: Vec<Candidate>,
    /// Best candidate seen up to and including this generation.
    pub best: Candidate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub best: Candidate,
    pub history: Vec<Generation>,
}

impl SearchOutcome {
    /// Writes `generation,best_loss,best_bitops,config` rows with a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["generation", "best_loss", "best_bitops", "config"])?;
        for g in &self.history {
            w.write_record([
                g.index.to_string(),
                g.best.loss.to_string(),
                g.best.bitops.to_string(),
                g.best.config.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

fn coin<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

/// Resamples each field with probability `p`. A changed stage depth keeps the
/// surviving layers and samples settings for new ones.
pub fn mutate<R: Rng + ?Sized>(cfg: &SubnetConfig, space: &SearchSpace, p: f64, rng: &mut R) -> SubnetConfig {
    let mut out = cfg.clone();
    if coin(rng, p) {
        out.resolution = *space.resolutions.choose(rng).expect("non-empty");
    }
    for s in 0..out.depths.len() {
        if coin(rng, p) {
            let d = *space.depths[s].choose(rng).expect("non-empty");
            out.mlp_ratios[s].truncate(d);
            out.bits[s].truncate(d);
            while out.bits[s].len() < d {
                out.mlp_ratios[s].push(space.sample_mlp(rng));
                out.bits[s].push(space.sample_layer_bits(rng));
            }
            out.depths[s] = d;
        }
        for l in 0..out.depths[s] {
            if coin(rng, p) {
                out.mlp_ratios[s][l] = space.sample_mlp(rng);
            }
            if coin(rng, p) {
                out.bits[s][l].weight = *space.weight_bits.choose(rng).expect("non-empty");
            }
            if coin(rng, p) {
                out.bits[s][l].act = *space.act_bits.choose(rng).expect("non-empty");
            }
        }
    }
    for bits in [&mut out.embed_bits, &mut out.neck_bits] {
        if coin(rng, p) {
            bits.weight = *space.weight_bits.choose(rng).expect("non-empty");
        }
        if coin(rng, p) {
            bits.act = *space.act_bits.choose(rng).expect("non-empty");
        }
    }
    out
}

/// Takes each field from `a` or `b` with equal probability. A stage's depth
/// travels together with its per-layer lists.
pub fn crossover<R: Rng + ?Sized>(a: &SubnetConfig, b: &SubnetConfig, rng: &mut R) -> SubnetConfig {
    let pick = |rng: &mut R| rng.random::<bool>();
    let mut out = a.clone();
    if pick(rng) {
        out.resolution = b.resolution;
    }
    for s in 0..out.depths.len() {
        if pick(rng) {
            out.depths[s] = b.depths[s];
            out.mlp_ratios[s] = b.mlp_ratios[s].clone();
            out.bits[s] = b.bits[s].clone();
        }
    }
    if pick(rng) {
        out.embed_bits = b.embed_bits;
    }
    if pick(rng) {
        out.neck_bits = b.neck_bits;
    }
    out
}

struct Searcher<'a, F> {
    space: &'a SearchSpace,
    eval_fn: F,
    tau: u64,
    cache: BTreeMap<String, Candidate>,
}

impl<F: FnMut(&SubnetConfig) -> Result<f64>> Searcher<'_, F> {
    fn cost(&self, cfg: &SubnetConfig) -> Result<Option<u64>> {
        validate_config(self.space, cfg)?;
        let c = bitops(cfg, self.space)?.total;
        Ok((c <= self.tau).then_some(c))
    }

    fn evaluate(&mut self, cfg: &SubnetConfig, bitops: u64) -> Result<Candidate> {
        let key = cfg.to_string();
        if let Some(c) = self.cache.get(&key) {
            return Ok(c.clone());
        }
        let loss = (self.eval_fn)(cfg)?;
        let c = Candidate {
            config: cfg.clone(),
            loss,
            bitops,
        };
        self.cache.insert(key, c.clone());
        Ok(c)
    }

    /// Draws up to `max_draws` proposals and keeps the first feasible one not
    /// already in `taken`.
    fn draw(
        &self,
        max_draws: usize,
        taken: &[(SubnetConfig, u64)],
        mut propose: impl FnMut() -> SubnetConfig,
    ) -> Result<Option<(SubnetConfig, u64)>> {
        for _ in 0..max_draws {
            let cfg = propose();
            if taken.iter().any(|(c, _)| c == &cfg) {
                continue;
            }
            if let Some(cost) = self.cost(&cfg)? {
                return Ok(Some((cfg, cost)));
            }
        }
        Ok(None)
    }
}

fn rank(pop: &mut [Candidate]) {
    pop.sort_by(|a, b| {
        a.loss
            .total_cmp(&b.loss)
            .then(a.bitops.cmp(&b.bitops))
            .then_with(|| a.config.to_string().cmp(&b.config.to_string()))
    });
}

/// Minimizes `eval_fn` over configs with `BitOPs ≤ tau`.
///
/// The initial population is rejection-sampled uniformly; each generation
/// keeps the best `parents` and refills with mutants and crossovers of them,
/// discarding infeasible or duplicate offspring. Since parents survive, the
/// best loss never increases across generations.
pub fn evolve_search<R, F>(
    space: &SearchSpace,
    eval_fn: F,
    tau: u64,
    hyper: &EvolutionHyper,
    rng: &mut R,
) -> Result<SearchOutcome>
where
    R: Rng + ?Sized,
    F: FnMut(&SubnetConfig) -> Result<f64>,
{
    space.validate()?;
    hyper.validate()?;
    let mut search = Searcher {
        space,
        eval_fn,
        tau,
        cache: BTreeMap::new(),
    };

    let mut members: Vec<(SubnetConfig, u64)> = Vec::new();
    for _ in 0..hyper.population {
        match search.draw(hyper.max_draws, &members, || sample_uniform(space, rng))? {
            Some(m) => members.push(m),
            None if members.is_empty() => {
                return Err(Error::Budget(format!(
                    "no subnet within {tau} BitOPs found in {} draws",
                    hyper.max_draws
                )))
            }
            None => break,
        }
    }

    let mut history: Vec<Generation> = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut pop = Vec::with_capacity(members.len());
        for (cfg, cost) in &members {
            pop.push(search.evaluate(cfg, *cost)?);
        }
        rank(&mut pop);
        let best = match history.last() {
            Some(prev) if prev.best.loss <= pop[0].loss => prev.best.clone(),
            _ => pop[0].clone(),
        };
        let parents: Vec<SubnetConfig> = pop.iter().take(hyper.parents).map(|c| c.config.clone()).collect();
        let parent_costs: Vec<u64> = pop.iter().take(hyper.parents).map(|c| c.bitops).collect();
        history.push(Generation {
            index: epoch,
            population: pop,
            best,
        });
        if epoch + 1 == hyper.epochs {
            break;
        }

        let mut next: Vec<(SubnetConfig, u64)> = parents.iter().cloned().zip(parent_costs).collect();
        for _ in 0..hyper.mutation_size {
            let proposal = || {
                let parent = parents.choose(rng).expect("non-empty");
                mutate(parent, space, hyper.mutation_prob, rng)
            };
            if let Some(m) = search.draw(hyper.max_draws, &next, proposal)? {
                next.push(m);
            }
        }
        for _ in 0..hyper.crossover_size {
            let proposal = || {
                let a = parents.choose(rng).expect("non-empty");
                let b = parents.choose(rng).expect("non-empty");
                crossover(a, b, rng)
            };
            if let Some(m) = search.draw(hyper.max_draws, &next, proposal)? {
                next.push(m);
            }
        }
        members = next;
    }

    let best = history.last().expect("at least one generation").best.clone();
    Ok(SearchOutcome { best, history })
}
