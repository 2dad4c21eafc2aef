//! Multi-objective genetic algorithm over (channel assignment, control sequence)
//! genomes.
//!
//! Channel assignments are never produced by flipping random labels. New
//! assignments are grown outward from one seed edge per channel, and mutations
//! move a single mirror orbit of edges to a neighbouring channel, rejecting moves
//! that would split or empty a channel. Survivors are chosen by non-dominated
//! sorting with crowding-distance truncation. The driver alternates short
//! exploitation loops with re-initialisation, parking survivors in an elite pool.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::truss::{
    channel_subgraph_connected, channels_incident_edge, is_valid_assignment, ChannelAssignment,
    TrussGraph, UNASSIGNED,
};

/// Rating assigned to every objective of a genome whose simulation failed.
pub const SENTINEL_RATING: f64 = -1e30;

/// Growth restarts before initialisation gives up on a graph.
const MAX_INIT_ATTEMPTS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvoError {
    #[error("need {needed} self-mirrored half-graph edges to seed self-mirrored channels, found {available}")]
    InsufficientSelfMirroredEdges { needed: usize, available: usize },
    #[error("need {needed} non-self-mirrored half-graph edges to seed mirrored channel pairs, found {available}")]
    InsufficientPairedEdges { needed: usize, available: usize },
    #[error("graph has self-mirrored edges but the channel map has no self-mirrored channel")]
    NoSelfMirroredChannel,
    #[error("channel growth got stuck in every one of {0} attempts")]
    InitializationStuck(usize),
    #[error("no single-orbit relabeling preserves channel connectivity")]
    NoValidMutation,
    #[error("flip probability must lie in (0, 1], got {0}")]
    InvalidFlipProbability(f64),
    #[error("genome {0} has no rating")]
    UnratedGenome(usize),
    #[error("invalid evolution config: {0}")]
    InvalidConfig(String),
}

/// Open-loop schedule: `bits[step][channel]` is the channel state during that
/// action step.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ControlSequence {
    bits: Vec<Vec<bool>>,
}

impl ControlSequence {
    pub fn new(bits: Vec<Vec<bool>>) -> Self {
        Self { bits }
    }

    pub fn zeros(n_steps: usize, n_channels: usize) -> Self {
        Self {
            bits: vec![vec![false; n_channels]; n_steps],
        }
    }

    pub fn random<R: Rng + ?Sized>(n_steps: usize, n_channels: usize, rng: &mut R) -> Self {
        let bits = (0..n_steps)
            .map(|_| (0..n_channels).map(|_| rng.random_bool(0.5)).collect())
            .collect();
        Self { bits }
    }

    pub fn n_steps(&self) -> usize {
        self.bits.len()
    }

    pub fn n_channels(&self) -> usize {
        self.bits.first().map_or(0, Vec::len)
    }

    pub fn action(&self, step: usize) -> &[bool] {
        &self.bits[step]
    }

    pub fn bits(&self) -> &[Vec<bool>] {
        &self.bits
    }

    pub fn hamming(&self, other: &Self) -> usize {
        self.bits
            .iter()
            .flatten()
            .zip(other.bits.iter().flatten())
            .filter(|(a, b)| a != b)
            .count()
    }

    pub fn is_rectangular(&self) -> bool {
        let n = self.n_channels();
        self.bits.iter().all(|row| row.len() == n)
    }
}

/// One rating per objective, higher is better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RatingVector(pub Vec<f64>);

impl RatingVector {
    pub fn sentinel(n_objectives: usize) -> Self {
        Self(vec![SENTINEL_RATING; n_objectives])
    }

    pub fn is_failed(&self) -> bool {
        self.0.iter().any(|&r| !r.is_finite() || r <= SENTINEL_RATING)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genome {
    pub channels: ChannelAssignment,
    pub control: ControlSequence,
    pub rating: Option<RatingVector>,
}

impl Genome {
    pub fn new(channels: ChannelAssignment, control: ControlSequence) -> Self {
        Self {
            channels,
            control,
            rating: None,
        }
    }

    pub fn random<R: Rng + ?Sized>(
        graph: &TrussGraph,
        n_steps: usize,
        rng: &mut R,
    ) -> Result<Self, EvoError> {
        let channels = initialize_assignment(graph, rng)?;
        let control = ControlSequence::random(n_steps, graph.n_channels(), rng);
        Ok(Self::new(channels, control))
    }
}

/// Rates genomes. Implementations must be pure so evaluation order and worker
/// count cannot change results.
pub trait Evaluator: Sync {
    fn objective_names(&self) -> Vec<String>;

    /// Never fails; a genome that cannot be simulated gets [`RatingVector::sentinel`].
    fn evaluate(&self, genome: &Genome) -> RatingVector;
}

fn mirror_assign(graph: &TrussGraph, labels: &mut [i32], edge: usize, channel: usize) {
    labels[edge] = channel as i32;
    labels[graph.edge_mirror(edge)] = graph.channel_mirror(channel) as i32;
}

/// Channels `edge` may take without breaking mirror symmetry: self-mirrored
/// edges can only carry self-mirrored channels.
fn admissible_channels(graph: &TrussGraph, edge: usize, incident: Vec<usize>) -> Vec<usize> {
    if graph.is_self_mirrored_edge(edge) {
        incident
            .into_iter()
            .filter(|&c| graph.is_self_mirrored_channel(c))
            .collect()
    } else {
        incident
    }
}

/// Channel-growing initialisation. Seeds one edge per channel (a self-mirrored
/// edge for each self-mirrored channel, a mirrored edge pair for each channel
/// pair), then repeatedly labels a random unassigned half-graph edge touching
/// the assigned region with one of its incident channels.
pub fn initialize_assignment<R: Rng + ?Sized>(
    graph: &TrussGraph,
    rng: &mut R,
) -> Result<ChannelAssignment, EvoError> {
    let half = graph.half_edges();
    let self_edges = half
        .iter()
        .filter(|&&e| graph.is_self_mirrored_edge(e))
        .count();
    let paired_edges = half.len() - self_edges;
    let self_channels = (0..graph.n_channels())
        .filter(|&c| graph.is_self_mirrored_channel(c))
        .count();
    let channel_pairs = (graph.n_channels() - self_channels) / 2;
    if self_edges < self_channels {
        return Err(EvoError::InsufficientSelfMirroredEdges {
            needed: self_channels,
            available: self_edges,
        });
    }
    if paired_edges < channel_pairs {
        return Err(EvoError::InsufficientPairedEdges {
            needed: channel_pairs,
            available: paired_edges,
        });
    }
    if self_edges > 0 && self_channels == 0 {
        return Err(EvoError::NoSelfMirroredChannel);
    }

    for _ in 0..MAX_INIT_ATTEMPTS {
        if let Some(labels) = grow_channels(graph, rng) {
            return Ok(ChannelAssignment::new(labels));
        }
    }
    Err(EvoError::InitializationStuck(MAX_INIT_ATTEMPTS))
}

fn grow_channels<R: Rng + ?Sized>(graph: &TrussGraph, rng: &mut R) -> Option<Vec<usize>> {
    let mut labels = vec![UNASSIGNED; graph.n_edges()];
    let mut unassigned: Vec<usize> = graph.half_edges().to_vec();

    for channel in 0..graph.n_channels() {
        let partner = graph.channel_mirror(channel);
        if partner < channel {
            continue;
        }
        let want_self = partner == channel;
        let pool: Vec<usize> = unassigned
            .iter()
            .copied()
            .filter(|&e| graph.is_self_mirrored_edge(e) == want_self)
            .collect();
        let &edge = pool.choose(rng)?;
        mirror_assign(graph, &mut labels, edge, channel);
        unassigned.retain(|&e| e != edge);
    }

    while !unassigned.is_empty() {
        let frontier: Vec<(usize, Vec<usize>)> = unassigned
            .iter()
            .filter_map(|&e| {
                let incident = channels_incident_edge(graph, &labels, e);
                let options = admissible_channels(graph, e, incident);
                (!options.is_empty()).then_some((e, options))
            })
            .collect();
        let (edge, options) = frontier.choose(rng)?;
        let &channel = options.choose(rng)?;
        mirror_assign(graph, &mut labels, *edge, channel);
        unassigned.retain(|e| e != edge);
    }

    debug_assert!(labels.iter().all(|&c| c >= 0));
    Some(labels.into_iter().map(|c| c as usize).collect())
}

fn all_channels_connected(graph: &TrussGraph, labels: &[usize]) -> bool {
    (0..graph.n_channels())
        .all(|c| matches!(channel_subgraph_connected(graph, labels, c), Ok(true)))
}

/// Moves one half-graph edge (and its mirror image) to a different incident
/// channel, retrying over all candidates until connectivity survives.
pub fn mutate_assignment<R: Rng + ?Sized>(
    graph: &TrussGraph,
    assignment: &ChannelAssignment,
    rng: &mut R,
) -> Result<ChannelAssignment, EvoError> {
    let mut labels = assignment.channels().to_vec();
    // Ê_c: half-graph edges touching a channel other than their own.
    let mut candidates: Vec<(usize, Vec<usize>)> = graph
        .half_edges()
        .iter()
        .filter_map(|&e| {
            let own = labels[e];
            let incident = channels_incident_edge(graph, labels.as_slice(), e);
            let options: Vec<usize> = admissible_channels(graph, e, incident)
                .into_iter()
                .filter(|&c| c != own)
                .collect();
            (!options.is_empty()).then_some((e, options))
        })
        .collect();

    while !candidates.is_empty() {
        let pick = rng.random_range(0..candidates.len());
        let (edge, options) = &mut candidates[pick];
        let edge = *edge;
        let slot = rng.random_range(0..options.len());
        let channel = options.swap_remove(slot);
        if options.is_empty() {
            candidates.swap_remove(pick);
        }

        let mirror = graph.edge_mirror(edge);
        let saved = (labels[edge], labels[mirror]);
        labels[edge] = channel;
        labels[mirror] = graph.channel_mirror(channel);
        if all_channels_connected(graph, &labels) {
            return Ok(ChannelAssignment::new(labels));
        }
        labels[edge] = saved.0;
        labels[mirror] = saved.1;
    }
    Err(EvoError::NoValidMutation)
}

/// Flips each bit independently with `flip_prob`, resampling until at least
/// one bit changed.
pub fn mutate_control<R: Rng + ?Sized>(
    control: &ControlSequence,
    rng: &mut R,
    flip_prob: f64,
) -> Result<ControlSequence, EvoError> {
    if !(flip_prob > 0.0 && flip_prob <= 1.0) {
        return Err(EvoError::InvalidFlipProbability(flip_prob));
    }
    if control.bits.iter().all(Vec::is_empty) {
        return Ok(control.clone());
    }
    loop {
        let mut changed = false;
        let bits = control
            .bits
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&b| {
                        let flip = rng.random_bool(flip_prob);
                        changed |= flip;
                        b ^ flip
                    })
                    .collect()
            })
            .collect();
        if changed {
            return Ok(ControlSequence { bits });
        }
    }
}

/// `a` dominates `b` when it is no worse everywhere and better somewhere
/// (maximisation).
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strictly = false;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return false;
        }
        if x > y {
            strictly = true;
        }
    }
    strictly
}

/// Fast non-dominated sort. Indices inside each front are ascending.
pub fn non_dominated_sort<V: AsRef<[f64]>>(ratings: &[V]) -> Vec<Vec<usize>> {
    let n = ratings.len();
    let mut dominated_by_me: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut domination_count = vec![0usize; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (ratings[i].as_ref(), ratings[j].as_ref());
            if dominates(a, b) {
                dominated_by_me[i].push(j);
                domination_count[j] += 1;
            } else if dominates(b, a) {
                dominated_by_me[j].push(i);
                domination_count[i] += 1;
            }
        }
    }

    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| domination_count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_by_me[i] {
                domination_count[j] -= 1;
                if domination_count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// NSGA-II crowding distance. Boundary points of each objective are infinite;
/// an objective with zero range contributes nothing.
pub fn crowding_distance<V: AsRef<[f64]>>(front: &[V]) -> Vec<f64> {
    let n = front.len();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![f64::INFINITY];
    }
    let n_obj = front[0].as_ref().len();
    let mut distance = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    for m in 0..n_obj {
        let value = |i: usize| front[i].as_ref()[m];
        order.sort_by(|&a, &b| value(a).total_cmp(&value(b)).then(a.cmp(&b)));
        let (lo, hi) = (value(order[0]), value(order[n - 1]));
        let range = hi - lo;
        if !(range > 0.0) {
            continue;
        }
        distance[order[0]] = f64::INFINITY;
        distance[order[n - 1]] = f64::INFINITY;
        for k in 1..n - 1 {
            distance[order[k]] += (value(order[k + 1]) - value(order[k - 1])) / range;
        }
    }
    distance
}

/// Which end of the crowding-distance ranking survives when a front overflows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrowdingPreference {
    /// Standard NSGA-II: keep the most isolated solutions.
    #[default]
    PreferHigh,
    PreferLow,
}

/// Indices (ascending) of the `keep` survivors.
pub fn select_indices<V: AsRef<[f64]>>(
    ratings: &[V],
    keep: usize,
    preference: CrowdingPreference,
) -> Vec<usize> {
    let keep = keep.min(ratings.len());
    let mut chosen = Vec::with_capacity(keep);
    for front in non_dominated_sort(ratings) {
        if chosen.len() + front.len() <= keep {
            chosen.extend_from_slice(&front);
            if chosen.len() == keep {
                break;
            }
            continue;
        }
        let members: Vec<&[f64]> = front.iter().map(|&i| ratings[i].as_ref()).collect();
        let cd = crowding_distance(&members);
        let mut ranked: Vec<usize> = (0..front.len()).collect();
        ranked.sort_by(|&a, &b| {
            let by_cd = match preference {
                CrowdingPreference::PreferHigh => cd[b].total_cmp(&cd[a]),
                CrowdingPreference::PreferLow => cd[a].total_cmp(&cd[b]),
            };
            by_cd.then(front[a].cmp(&front[b]))
        });
        let room = keep - chosen.len();
        chosen.extend(ranked[..room].iter().map(|&k| front[k]));
        break;
    }
    chosen.sort_unstable();
    chosen
}

/// NSGA-II environmental selection over rated genomes; output keeps input order.
pub fn select(
    population: &[Genome],
    keep: usize,
    preference: CrowdingPreference,
) -> Result<Vec<Genome>, EvoError> {
    let ratings = population
        .iter()
        .enumerate()
        .map(|(i, g)| {
            g.rating
                .as_ref()
                .map(|r| r.values())
                .ok_or(EvoError::UnratedGenome(i))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(select_indices(&ratings, keep, preference)
        .into_iter()
        .map(|i| population[i].clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolutionConfig {
    /// n_g, the evolving pool size (also the elite pool capacity).
    pub population: usize,
    /// Generations per exploitation loop before survivors move to the elite pool.
    pub exploitation_length: usize,
    /// Total generations, counting the initial evaluated generation 0.
    pub generations: usize,
    pub survivor_fraction: f64,
    pub assignment_mutation_prob: f64,
    pub control_mutation_prob: f64,
    pub control_flip_prob: f64,
    /// n_s, action steps in each control sequence.
    pub n_steps: usize,
    pub crowding: CrowdingPreference,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            population: 16,
            exploitation_length: 20,
            generations: 100,
            survivor_fraction: 0.5,
            assignment_mutation_prob: 0.5,
            control_mutation_prob: 1.0,
            control_flip_prob: 0.05,
            n_steps: 20,
            crowding: CrowdingPreference::PreferHigh,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<(), EvoError> {
        let bad = |msg: &str| Err(EvoError::InvalidConfig(msg.to_string()));
        if self.population == 0 {
            return bad("population must be positive");
        }
        if self.exploitation_length == 0 {
            return bad("exploitation_length must be positive");
        }
        if self.n_steps == 0 {
            return bad("n_steps must be positive");
        }
        if !(self.survivor_fraction > 0.0 && self.survivor_fraction <= 1.0) {
            return bad("survivor_fraction must lie in (0, 1]");
        }
        for (name, p) in [
            ("assignment_mutation_prob", self.assignment_mutation_prob),
            ("control_mutation_prob", self.control_mutation_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(EvoError::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.control_flip_prob > 0.0 && self.control_flip_prob <= 1.0) {
            return bad("control_flip_prob must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn survivors(&self) -> usize {
        ((self.population as f64 * self.survivor_fraction).round() as usize).clamp(1, self.population)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvolutionState {
    pub evolving_pool: Vec<Genome>,
    pub elite_pool: Vec<Genome>,
    /// Index of the most recently evaluated generation.
    pub generation: usize,
    /// Generations completed in the current exploitation loop.
    pub loop_generation: usize,
    /// Completed exploitation loops.
    pub exploration_step: usize,
    pub rng_seed: u64,
    pub rng: ChaCha8Rng,
}

impl EvolutionState {
    /// The best `population` genomes over both pools, failed genomes excluded.
    pub fn final_elites(&self, population: usize, preference: CrowdingPreference) -> Vec<Genome> {
        let all: Vec<Genome> = self
            .elite_pool
            .iter()
            .chain(&self.evolving_pool)
            .filter(|g| g.rating.as_ref().is_some_and(|r| !r.is_failed()))
            .cloned()
            .collect();
        select(&all, population, preference).unwrap_or_default()
    }
}

/// Per-generation summary. `best` is taken over the elite and evolving pools
/// together; `mean` over the evolving pool only. Failed genomes are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best: Vec<f64>,
    pub mean: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EvolutionRun {
    pub state: EvolutionState,
    pub history: Vec<GenerationRecord>,
}

/// Receives driver events; used for checkpointing.
pub trait EvolutionObserver {
    fn exploration_step(&mut self, _state: &EvolutionState) {}
    fn generation(&mut self, _record: &GenerationRecord) {}
}

impl EvolutionObserver for () {}

struct Driver<'a, E: Evaluator> {
    graph: &'a TrussGraph,
    evaluator: &'a E,
    config: &'a EvolutionConfig,
    n_objectives: usize,
}

impl<E: Evaluator> Driver<'_, E> {
    fn fresh_pool(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Genome>, EvoError> {
        (0..self.config.population)
            .map(|_| Genome::random(self.graph, self.config.n_steps, rng))
            .collect()
    }

    /// Rates unrated genomes in parallel on the current rayon pool.
    fn evaluate(&self, pool: &mut [Genome]) {
        pool.par_iter_mut()
            .filter(|g| g.rating.is_none())
            .for_each(|g| {
                let rating = self.evaluator.evaluate(g);
                g.rating = Some(if rating.0.len() == self.n_objectives {
                    rating
                } else {
                    RatingVector::sentinel(self.n_objectives)
                });
            });
    }

    fn survivors(&self, pool: &[Genome], keep: usize) -> Vec<Genome> {
        let healthy: Vec<Genome> = pool
            .iter()
            .filter(|g| g.rating.as_ref().is_some_and(|r| !r.is_failed()))
            .cloned()
            .collect();
        select(&healthy, keep, self.config.crowding).expect("pool is rated")
    }

    fn offspring(&self, parent: &Genome, rng: &mut ChaCha8Rng) -> Result<Genome, EvoError> {
        let mut child = parent.clone();
        let mut changed = false;
        if rng.random_bool(self.config.assignment_mutation_prob) {
            child.channels = match mutate_assignment(self.graph, &child.channels, rng) {
                Ok(c) => c,
                Err(EvoError::NoValidMutation) => initialize_assignment(self.graph, rng)?,
                Err(e) => return Err(e),
            };
            changed = true;
        }
        if rng.random_bool(self.config.control_mutation_prob) {
            child.control = mutate_control(&child.control, rng, self.config.control_flip_prob)?;
            changed = true;
        }
        if changed {
            child.rating = None;
        }
        Ok(child)
    }

    fn refill(&self, survivors: Vec<Genome>, rng: &mut ChaCha8Rng) -> Result<Vec<Genome>, EvoError> {
        if survivors.is_empty() {
            return self.fresh_pool(rng);
        }
        let mut pool = survivors;
        let parents = pool.len();
        let mut k = 0;
        while pool.len() < self.config.population {
            let child = self.offspring(&pool[k % parents], rng)?;
            pool.push(child);
            k += 1;
        }
        Ok(pool)
    }

    fn record(&self, state: &EvolutionState) -> GenerationRecord {
        let healthy = |g: &&Genome| g.rating.as_ref().is_some_and(|r| !r.is_failed());
        let mut best = vec![SENTINEL_RATING; self.n_objectives];
        for g in state.elite_pool.iter().chain(&state.evolving_pool).filter(healthy) {
            for (b, &r) in best.iter_mut().zip(g.rating.as_ref().unwrap().values()) {
                *b = b.max(r);
            }
        }
        let rated: Vec<&Genome> = state.evolving_pool.iter().filter(healthy).collect();
        let mean = (0..self.n_objectives)
            .map(|m| {
                if rated.is_empty() {
                    SENTINEL_RATING
                } else {
                    rated
                        .iter()
                        .map(|g| g.rating.as_ref().unwrap().values()[m])
                        .sum::<f64>()
                        / rated.len() as f64
                }
            })
            .collect();
        GenerationRecord {
            generation: state.generation,
            best,
            mean,
        }
    }

    fn audit(&self, state: &EvolutionState) {
        for g in state.evolving_pool.iter().chain(&state.elite_pool) {
            assert!(
                is_valid_assignment(self.graph, g.channels.channels()),
                "invalid channel assignment in pool at generation {}",
                state.generation
            );
        }
    }
}

/// Runs the nested exploration/exploitation loop for `config.generations`
/// generations (generation 0 included). Evaluation runs on the ambient rayon
/// pool; results do not depend on its size.
pub fn run_evolution<E: Evaluator>(
    graph: &TrussGraph,
    evaluator: &E,
    config: &EvolutionConfig,
    seed: u64,
    observer: &mut dyn EvolutionObserver,
) -> Result<EvolutionRun, EvoError> {
    config.validate()?;
    let driver = Driver {
        graph,
        evaluator,
        config,
        n_objectives: evaluator.objective_names().len(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut evolving = driver.fresh_pool(&mut rng)?;
    driver.evaluate(&mut evolving);
    let mut state = EvolutionState {
        evolving_pool: evolving,
        elite_pool: Vec::new(),
        generation: 0,
        loop_generation: 0,
        exploration_step: 0,
        rng_seed: seed,
        rng,
    };
    let keep = config.survivors();
    let mut history = Vec::with_capacity(config.generations.max(1));
    let first = driver.record(&state);
    observer.generation(&first);
    history.push(first);

    for generation in 1..config.generations {
        let survivors = driver.survivors(&state.evolving_pool, keep);
        state.evolving_pool = driver.refill(survivors, &mut state.rng)?;
        driver.evaluate(&mut state.evolving_pool);
        state.generation = generation;
        state.loop_generation += 1;

        if state.loop_generation == config.exploitation_length {
            let survivors = driver.survivors(&state.evolving_pool, keep);
            let mut candidates = std::mem::take(&mut state.elite_pool);
            candidates.extend(survivors);
            state.elite_pool = select(&candidates, config.population, config.crowding)?;
            if state.elite_pool.len() >= config.population {
                state.evolving_pool = std::mem::take(&mut state.elite_pool);
            } else {
                state.evolving_pool = driver.fresh_pool(&mut state.rng)?;
                driver.evaluate(&mut state.evolving_pool);
            }
            state.loop_generation = 0;
            state.exploration_step += 1;
            observer.exploration_step(&state);
        }

        if cfg!(debug_assertions) {
            driver.audit(&state);
        }
        let record = driver.record(&state);
        observer.generation(&record);
        history.push(record);
    }
    Ok(EvolutionRun { state, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::truss::{is_valid_assignment, Vec3};

    fn triangle(n_channels: usize) -> TrussGraph {
        TrussGraph::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y()],
            vec![[0, 1], [1, 2], [2, 0]],
            n_channels,
            vec![],
            0,
        )
        .unwrap()
    }

    #[test]
    fn single_edge_single_channel() {
        let g = TrussGraph::new(vec![Vec3::zeros(), Vec3::x()], vec![[0, 1]], 1, vec![], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(initialize_assignment(&g, &mut rng).unwrap().channels(), &[0]);
    }

    #[test]
    fn triangle_mutation_outcomes() {
        let g = triangle(2);
        let start = ChannelAssignment::new(vec![0, 0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            let m = mutate_assignment(&g, &start, &mut rng).unwrap();
            seen.insert(m.into_inner());
        }
        let expected: std::collections::BTreeSet<Vec<usize>> =
            [vec![0, 1, 1], vec![1, 0, 1]].into_iter().collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn lone_edge_channel_is_never_emptied() {
        // Path of 4 edges; channel 1 owns only the last edge.
        let g = TrussGraph::new(
            (0..5).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect(),
            vec![[0, 1], [1, 2], [2, 3], [3, 4]],
            2,
            vec![],
            0,
        )
        .unwrap();
        let start = ChannelAssignment::new(vec![0, 0, 0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let m = mutate_assignment(&g, &start, &mut rng).unwrap();
            assert_eq!(m.channel(3), 1);
            assert!(is_valid_assignment(&g, m.channels()));
        }
    }

    #[test]
    fn mutation_without_alternatives_fails() {
        let g = TrussGraph::new(vec![Vec3::zeros(), Vec3::x()], vec![[0, 1]], 1, vec![], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            mutate_assignment(&g, &ChannelAssignment::new(vec![0]), &mut rng),
            Err(EvoError::NoValidMutation)
        );
    }

    #[test]
    fn full_flip_is_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = ControlSequence::random(5, 3, &mut rng);
        let f = mutate_control(&c, &mut rng, 1.0).unwrap();
        assert_eq!(f.n_steps(), 5);
        assert_eq!(f.n_channels(), 3);
        for (a, b) in c.bits().iter().flatten().zip(f.bits().iter().flatten()) {
            assert_eq!(*a, !*b);
        }
        assert!(mutate_control(&c, &mut rng, 0.0).is_err());
        assert!(mutate_control(&c, &mut rng, 1.5).is_err());
    }

    #[test]
    fn sort_and_crowding_examples() {
        let r = vec![vec![1.0, 2.0], vec![2.0, 1.0], vec![0.0, 0.0]];
        assert_eq!(non_dominated_sort(&r), vec![vec![0, 1], vec![2]]);
        let same = vec![vec![1.0, 1.0]; 4];
        assert_eq!(non_dominated_sort(&same), vec![vec![0, 1, 2, 3]]);

        let front = vec![vec![0.0, 2.0], vec![1.0, 1.0], vec![2.0, 0.0]];
        let cd = crowding_distance(&front);
        assert_eq!(cd, vec![f64::INFINITY, 2.0, f64::INFINITY]);
        assert_eq!(crowding_distance(&[vec![3.0, 4.0]]), vec![f64::INFINITY]);

        // Second objective is flat: only the first contributes.
        let flat = vec![vec![0.0, 5.0], vec![1.0, 5.0], vec![3.0, 5.0]];
        assert_eq!(crowding_distance(&flat), vec![f64::INFINITY, 1.0, f64::INFINITY]);
    }

    fn rated(ratings: &[[f64; 2]]) -> Vec<Genome> {
        ratings
            .iter()
            .map(|r| Genome {
                channels: ChannelAssignment::new(vec![0]),
                control: ControlSequence::zeros(1, 1),
                rating: Some(RatingVector(r.to_vec())),
            })
            .collect()
    }

    #[test]
    fn select_examples() {
        let pop = rated(&[[0.0, 0.0], [2.0, 1.0], [-1.0, 1.0], [1.0, 2.0]]);
        assert_eq!(
            non_dominated_sort(&pop.iter().map(|g| g.rating.clone().unwrap().0).collect::<Vec<_>>()),
            vec![vec![1, 3], vec![0, 2]]
        );
        let kept = select(&pop, 2, CrowdingPreference::PreferHigh).unwrap();
        assert_eq!(kept, vec![pop[1].clone(), pop[3].clone()]);

        let front = rated(&[[0.0, 2.0], [1.0, 1.0], [2.0, 0.0]]);
        let kept = select_indices(
            &front.iter().map(|g| g.rating.clone().unwrap().0).collect::<Vec<_>>(),
            2,
            CrowdingPreference::PreferHigh,
        );
        assert_eq!(kept, vec![0, 2]);
        let low = select_indices(
            &[vec![0.0, 2.0], vec![1.0, 1.0], vec![2.0, 0.0]],
            1,
            CrowdingPreference::PreferLow,
        );
        assert_eq!(low, vec![1]);

        assert_eq!(select(&pop, 4, CrowdingPreference::PreferHigh).unwrap(), pop);
    }

    #[test]
    fn select_requires_ratings() {
        let mut pop = rated(&[[0.0, 0.0], [1.0, 1.0]]);
        pop[1].rating = None;
        assert_eq!(
            select(&pop, 1, CrowdingPreference::PreferHigh),
            Err(EvoError::UnratedGenome(1))
        );
    }

    #[test]
    fn config_validation() {
        assert!(EvolutionConfig::default().validate().is_ok());
        let c = EvolutionConfig {
            population: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert_eq!(EvolutionConfig::default().survivors(), 8);
    }
}
