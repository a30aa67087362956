//! Differential evolution (DE/rand/1/bin) over per-layer thresholds or
//! scales, scored by an accuracy/latency tradeoff.

use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions};
use crate::network::Network;
use crate::tensor::RngStream;
use crate::trainer::Checkpoint;

const DE_STREAM: u64 = 0xDE;
const SPLIT_STREAM: u64 = 0x5B1;

pub const DEFAULT_BOUNDS: (f64, f64) = (0.2, 2.0);
pub const DEFAULT_VALIDATION: usize = 2000;

#[derive(Clone, Debug, PartialEq)]
pub struct DeConfig {
    pub pop_size: usize,
    pub max_generations: usize,
    pub mutation_factor: f64,
    pub crossover_rate: f64,
    /// Inclusive `(low, high)` per dimension.
    pub bounds: Vec<(f64, f64)>,
    pub latency_weight: f64,
    pub seed: u64,
}

impl DeConfig {
    /// Defaults for `dims` dimensions: F 0.5, CR 0.7, population 15 per
    /// dimension capped at 60, 30 generations, latency weight 0.1.
    pub fn with_bounds(bounds: Vec<(f64, f64)>) -> Self {
        Self {
            pop_size: (15 * bounds.len()).clamp(4, 60),
            max_generations: 30,
            mutation_factor: 0.5,
            crossover_rate: 0.7,
            bounds,
            latency_weight: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pop_size < 4 {
            return Err(Error::Config(format!("pop_size {} < 4", self.pop_size)));
        }
        if !(0.0..2.0).contains(&self.mutation_factor) {
            return Err(Error::Config(format!(
                "mutation factor {} outside [0, 2)",
                self.mutation_factor
            )));
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return Err(Error::Config(format!(
                "crossover rate {} outside [0, 1]",
                self.crossover_rate
            )));
        }
        if !(self.latency_weight >= 0.0 && self.latency_weight.is_finite()) {
            return Err(Error::Config(format!(
                "latency weight {} must be >= 0",
                self.latency_weight
            )));
        }
        if self.bounds.is_empty() {
            return Err(Error::Config("no dimensions to tune".into()));
        }
        for (i, &(lo, hi)) in self.bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("bounds of dimension {i}: [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_objective: f64,
    pub best_vector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeResult {
    pub best_vector: Vec<f64>,
    pub best_objective: f64,
    /// Generation 0 is the initial population.
    pub history: Vec<GenerationRecord>,
    pub evaluations: usize,
}

impl DeResult {
    pub fn history_csv(&self) -> String {
        let dims = self.best_vector.len();
        let mut out = String::from("generation,best_objective");
        for i in 0..dims {
            write!(out, ",x{i}").expect("write to string");
        }
        out.push('\n');
        for h in &self.history {
            write!(out, "{},{:.10}", h.generation, h.best_objective).expect("write to string");
            for x in &h.best_vector {
                write!(out, ",{x:.6}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }
}

/// Minimizes `objective` within `config.bounds`, starting from a population
/// drawn uniformly within the bounds.
pub fn de_optimize(config: &DeConfig, objective: impl FnMut(&[f64]) -> Result<f64>) -> Result<DeResult> {
    config.validate()?;
    let mut init = RngStream::new(config.seed, DE_STREAM).child(0);
    let pop = (0..config.pop_size)
        .map(|_| {
            config
                .bounds
                .iter()
                .map(|&(lo, hi)| lo + (hi - lo) * init.next_f64())
                .collect()
        })
        .collect();
    de_optimize_from(config, pop, objective)
}

/// DE from a given initial population.
///
/// Each generation builds every trial first (mutant `a + F·(b − c)` from
/// three distinct members other than the target, binomial crossover with one
/// forced mutant gene, clipped to bounds), then replaces each target whose
/// trial scores no worse. Bounds with `low == high` in every dimension
/// return that point after a single evaluation.
pub fn de_optimize_from(
    config: &DeConfig,
    mut pop: Vec<Vec<f64>>,
    mut objective: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<DeResult> {
    config.validate()?;
    let dims = config.bounds.len();
    if pop.len() != config.pop_size || pop.iter().any(|x| x.len() != dims) {
        return Err(Error::Dimension(format!(
            "initial population must be {} x {dims}",
            config.pop_size
        )));
    }
    let mut evaluations = 0;
    let mut score = |x: &[f64]| -> Result<f64> {
        evaluations += 1;
        let f = objective(x)?;
        if f.is_nan() {
            return Err(Error::Numerical(format!("objective is NaN at {x:?}")));
        }
        Ok(f)
    };

    if config.bounds.iter().all(|&(lo, hi)| lo == hi) {
        let point: Vec<f64> = config.bounds.iter().map(|b| b.0).collect();
        let f = score(&point)?;
        return Ok(DeResult {
            history: vec![GenerationRecord {
                generation: 0,
                best_objective: f,
                best_vector: point.clone(),
            }],
            best_vector: point,
            best_objective: f,
            evaluations: 1,
        });
    }

    for x in pop.iter_mut() {
        for (v, &(lo, hi)) in x.iter_mut().zip(&config.bounds) {
            *v = v.clamp(lo, hi);
        }
    }
    let root = RngStream::new(config.seed, DE_STREAM);
    let mut fitness = pop.iter().map(|x| score(x)).collect::<Result<Vec<f64>>>()?;

    let best_of = |pop: &[Vec<f64>], fitness: &[f64], generation: usize| {
        let i = (0..fitness.len()).fold(0, |b, i| if fitness[i] < fitness[b] { i } else { b });
        GenerationRecord {
            generation,
            best_objective: fitness[i],
            best_vector: pop[i].clone(),
        }
    };
    let mut history = vec![best_of(&pop, &fitness, 0)];

    for generation in 1..=config.max_generations {
        let mut rng = root.child(generation as u64);
        let trials: Vec<Vec<f64>> = (0..config.pop_size)
            .map(|target| {
                let [a, b, c] = distinct_donors(&mut rng, config.pop_size, target);
                let forced = rng.below(dims as u64) as usize;
                (0..dims)
                    .map(|j| {
                        let cross = rng.next_f64() < config.crossover_rate || j == forced;
                        if cross {
                            let (lo, hi) = config.bounds[j];
                            (pop[a][j] + config.mutation_factor * (pop[b][j] - pop[c][j])).clamp(lo, hi)
                        } else {
                            pop[target][j]
                        }
                    })
                    .collect()
            })
            .collect();
        for (i, trial) in trials.into_iter().enumerate() {
            let f = score(&trial)?;
            if f <= fitness[i] {
                pop[i] = trial;
                fitness[i] = f;
            }
        }
        history.push(best_of(&pop, &fitness, generation));
    }

    let best = history.last().expect("history holds generation 0").clone();
    Ok(DeResult {
        best_vector: best.best_vector,
        best_objective: best.best_objective,
        history,
        evaluations,
    })
}

fn distinct_donors(rng: &mut RngStream, n: usize, target: usize) -> [usize; 3] {
    let mut picked = [usize::MAX; 3];
    for k in 0..3 {
        loop {
            let c = rng.below(n as u64) as usize;
            if c != target && !picked[..k].contains(&c) {
                picked[k] = c;
                break;
            }
        }
    }
    picked
}

/// `(1 − accuracy) + beta · latency / horizon`; lower is better.
pub fn tradeoff(accuracy: f64, mean_latency: f64, horizon: usize, beta: f64) -> f64 {
    (1.0 - accuracy) + beta * mean_latency / horizon as f64
}

/// Scores `candidate` (one threshold or scale per weighted layer) on
/// `subset`.
pub fn tradeoff_objective(
    net: &Network,
    candidate: &[f64],
    subset: &Dataset,
    options: &EvalOptions,
    beta: f64,
) -> Result<f64> {
    let mut trial = net.clone();
    trial.spec.set_layer_params(candidate)?;
    let report = evaluate(&trial, subset, options)?;
    Ok(tradeoff(report.accuracy, report.mean_latency, report.horizon, beta))
}

/// Seeded random `n`-image subset of `train`, in drawn order.
pub fn validation_subset(train: &Dataset, n: usize, seed: u64) -> Dataset {
    let n = n.min(train.len());
    let mut idx: Vec<usize> = (0..train.len()).collect();
    let mut rng = RngStream::new(seed, SPLIT_STREAM);
    for i in 0..n {
        let j = i + rng.below((idx.len() - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(n);
    train.subset(&idx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneOptions {
    pub validation_size: usize,
    /// Seed of the evaluation streams, fixed across candidates.
    pub eval_seed: u64,
    pub workers: usize,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            validation_size: DEFAULT_VALIDATION,
            eval_seed: 0,
            workers: 1,
        }
    }
}

/// Tunes the per-layer parameters of `ckpt` on a validation subset of
/// `train`; returns the search record and the tuned checkpoint.
pub fn tune_checkpoint(
    ckpt: &Checkpoint,
    train: &Dataset,
    config: &DeConfig,
    options: &TuneOptions,
) -> Result<(DeResult, Checkpoint)> {
    let net = ckpt.network()?;
    let dims = net.spec.layer_params().len();
    if config.bounds.len() != dims {
        return Err(Error::Config(format!(
            "{} bounds for {dims} tunable layers",
            config.bounds.len()
        )));
    }
    let subset = validation_subset(train, options.validation_size, config.seed);
    let mut eval = EvalOptions::for_network(&net);
    eval.seed = options.eval_seed;
    eval.workers = options.workers.max(1);
    let result = de_optimize(config, |x| {
        tradeoff_objective(&net, x, &subset, &eval, config.latency_weight)
    })?;
    let mut tuned = ckpt.clone();
    tuned.spec.set_layer_params(&result.best_vector)?;
    Ok((result, tuned))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(x: &[f64]) -> Result<f64> {
        Ok(x.iter().map(|v| (v - 1.0).powi(2)).sum())
    }

    #[test]
    fn finds_sphere_optimum() {
        let mut config = DeConfig::with_bounds(vec![(0.0, 2.0); 2]);
        config.pop_size = 8;
        config.max_generations = 50;
        config.seed = 3;
        let r = de_optimize(&config, sphere).unwrap();
        assert!(
            r.best_vector.iter().all(|v| (v - 1.0).abs() < 1e-2),
            "{:?}",
            r.best_vector
        );
        assert_eq!(r.history.len(), 51);
        assert_eq!(r.evaluations, 8 * 51);
    }

    #[test]
    fn best_objective_never_increases() {
        for seed in 0..5 {
            let mut config = DeConfig::with_bounds(vec![(-3.0, 3.0); 3]);
            config.seed = seed;
            config.max_generations = 20;
            let r = de_optimize(&config, |x| Ok(x.iter().map(|v| v.sin() + 0.1 * v * v).sum())).unwrap();
            assert!(r.history.windows(2).all(|w| w[1].best_objective <= w[0].best_objective));
        }
    }

    #[test]
    fn candidates_respect_bounds() {
        let mut config = DeConfig::with_bounds(vec![(0.5, 0.6), (-1.0, 4.0)]);
        config.mutation_factor = 1.9;
        de_optimize(&config, |x| {
            assert!((0.5..=0.6).contains(&x[0]) && (-1.0..=4.0).contains(&x[1]));
            Ok(-x[0] - x[1])
        })
        .unwrap();
    }

    #[test]
    fn identical_population_with_zero_f_is_fixed() {
        let mut config = DeConfig::with_bounds(vec![(0.0, 2.0); 2]);
        config.mutation_factor = 0.0;
        let pop = vec![vec![0.3, 1.7]; config.pop_size];
        let mut seen = Vec::new();
        let r = de_optimize_from(&config, pop, |x| {
            seen.push(x.to_vec());
            sphere(x)
        })
        .unwrap();
        assert!(seen.iter().all(|x| x == &[0.3, 1.7]));
        assert!(r.history.iter().all(|h| h.best_vector == [0.3, 1.7]));
    }

    #[test]
    fn degenerate_bounds_return_the_point() {
        let config = DeConfig::with_bounds(vec![(0.7, 0.7), (1.3, 1.3)]);
        let r = de_optimize(&config, sphere).unwrap();
        assert_eq!(r.best_vector, vec![0.7, 1.3]);
        assert_eq!(r.evaluations, 1);
    }

    #[test]
    fn deterministic_given_seed() {
        let config = DeConfig::with_bounds(vec![(0.0, 2.0); 3]);
        let a = de_optimize(&config, sphere).unwrap();
        let b = de_optimize(&config, sphere).unwrap();
        assert_eq!(a, b);
        let mut other = config.clone();
        other.seed = 1;
        assert_ne!(de_optimize(&other, sphere).unwrap().history, a.history);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = DeConfig::with_bounds(vec![(0.0, 1.0)]);
        c.pop_size = 3;
        assert!(de_optimize(&c, sphere).is_err());
        let mut c = DeConfig::with_bounds(vec![(2.0, 1.0)]);
        c.pop_size = 5;
        assert!(de_optimize(&c, sphere).is_err());
    }

    #[test]
    fn tradeoff_examples() {
        assert_eq!(tradeoff(1.0, 0.0, 20, 0.1), 0.0);
        assert!((tradeoff(0.98, 2.0, 20, 0.1) - 0.03).abs() < 1e-12);
        assert!((tradeoff(0.9, 7.0, 20, 0.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn history_csv_layout() {
        let r = DeResult {
            best_vector: vec![1.0, 2.0],
            best_objective: 0.5,
            history: vec![GenerationRecord {
                generation: 0,
                best_objective: 0.5,
                best_vector: vec![1.0, 2.0],
            }],
            evaluations: 4,
        };
        assert_eq!(
            r.history_csv(),
            "generation,best_objective,x0,x1\n0,0.5000000000,1.000000,2.000000\n"
        );
    }
}
