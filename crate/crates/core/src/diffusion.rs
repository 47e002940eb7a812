//! Forward-backward experiments on grammar data.
//!
//! Masking diffusion uses the schedule `β_t = 1/(T-t+1)`, under which a token
//! is masked at time `t` with probability `t/T` independently of the others.
//! Only the time-`t` state enters an experiment, so it is drawn directly.
//! Regeneration samples the exact posterior either in one BP pass
//! ([`Route::BpDirect`]) or by running the backward chain with the exact
//! score ([`Route::BackwardChain`]).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief_prop::{run_bp, sample_posterior, LeafConditioner, LeafPriorField};
use crate::error::{Error, Result};
use crate::grammar::{Datum, RuleTable, Symbol};
use crate::parallel::{try_map_indexed, Parallelism};
use crate::rng::{Purpose, StreamKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    #[default]
    BpDirect,
    BackwardChain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPattern {
    pub mask: Vec<bool>,
    pub t: usize,
    pub horizon: usize,
}

impl MaskPattern {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Masks each of `dim` positions independently with probability `t/T`.
pub fn sample_mask<R: Rng + ?Sized>(dim: usize, t: usize, horizon: usize, rng: &mut R) -> Result<MaskPattern> {
    if horizon == 0 || t > horizon {
        return Err(Error::InvalidParams(format!("inversion time {t} outside [0, {horizon}]")));
    }
    let frac = t as f64 / horizon as f64;
    let mask = (0..dim).map(|_| rng.random::<f64>() < frac).collect();
    Ok(MaskPattern { mask, t, horizon })
}

/// Noise coordinate of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "process", rename_all = "snake_case")]
pub enum Noise {
    Masking { t: usize, horizon: usize },
    Epsilon { epsilon: f64 },
}

impl Noise {
    /// `t/T` for masking, `ε` for the ε-process.
    pub fn value(&self) -> f64 {
        match *self {
            Noise::Masking { t, horizon } => t as f64 / horizon as f64,
            Noise::Epsilon { epsilon } => epsilon,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Noise::Masking { t, horizon } if horizon == 0 || t > horizon => {
                Err(Error::InvalidParams(format!("inversion time {t} outside [0, {horizon}]")))
            }
            Noise::Epsilon { epsilon } if !(0.0..=1.0).contains(&epsilon) => {
                Err(Error::InvalidParams(format!("epsilon {epsilon} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryResult {
    pub original: Datum,
    pub noise: Noise,
    /// Masked positions; `None` for the ε-process.
    pub mask: Option<Vec<bool>>,
    pub regenerated: Datum,
    pub route: Route,
}

/// One JSONL line of a trajectory batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub datum_id: usize,
    pub noise: f64,
    pub route: Route,
    pub x0: Vec<Symbol>,
    pub xhat0: Vec<Symbol>,
    pub mask: Vec<u8>,
}

impl TrajectoryResult {
    pub fn record(&self, datum_id: usize) -> TrajectoryRecord {
        TrajectoryRecord {
            datum_id,
            noise: self.noise.value(),
            route: self.route,
            x0: self.original.leaves().to_vec(),
            xhat0: self.regenerated.leaves().to_vec(),
            mask: self.mask.as_ref().map(|m| m.iter().map(|&b| b as u8).collect()).unwrap_or_default(),
        }
    }
}

/// Samples `x̂_0` given a realized mask.
pub fn regenerate_masked<R: Rng + ?Sized>(
    rules: &RuleTable,
    datum: &Datum,
    mask: &[bool],
    route: Route,
    remaining_steps: usize,
    rng: &mut R,
) -> Result<Datum> {
    let v = rules.params().v;
    let priors = LeafPriorField::masking(datum.leaves(), mask, v)?;
    match route {
        Route::BpDirect => {
            let field = run_bp(rules, &priors)?;
            sample_posterior(rules, &field, rng)
        }
        Route::BackwardChain => backward_chain(rules, datum.leaves(), mask, &priors, remaining_steps, rng),
    }
}

/// Backward masking chain from step `t` to 0 with the exact score.
///
/// At step `τ` every still-masked token is revealed with probability `1/τ`.
/// Tokens revealed in the same step are assigned one at a time, in random
/// order, each drawn from its current BP marginal and clamped before the
/// next one is considered.
fn backward_chain<R: Rng + ?Sized>(
    rules: &RuleTable,
    leaves: &[Symbol],
    mask: &[bool],
    priors: &LeafPriorField,
    t: usize,
    rng: &mut R,
) -> Result<Datum> {
    let mut cond = LeafConditioner::new(rules, priors)?;
    let mut xhat: Vec<Symbol> = leaves.to_vec();
    let mut masked: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if !masked.is_empty() && t == 0 {
        return Err(Error::InvalidParams("masked tokens at inversion time 0".into()));
    }
    let mut revealed = Vec::new();
    for tau in (1..=t).rev() {
        if masked.is_empty() {
            break;
        }
        let p = 1.0 / tau as f64;
        revealed.clear();
        masked.retain(|&i| {
            if rng.random::<f64>() < p {
                revealed.push(i);
                false
            } else {
                true
            }
        });
        revealed.shuffle(rng);
        for &i in &revealed {
            let marg = cond.leaf_marginal(i)?;
            let a = draw(&marg, rng).ok_or(Error::ZeroNormalization { level: 0, node: i })?;
            cond.clamp(i, a as Symbol)?;
            xhat[i] = a as Symbol;
        }
    }
    debug_assert!(masked.is_empty());
    rules.derive(&xhat)
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Option<usize> {
    let mut u = rng.random::<f64>();
    let mut last = None;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            if u < p {
                return Some(k);
            }
            u -= p;
            last = Some(k);
        }
    }
    last
}

/// Masks `datum` up to time `t` and regenerates it along `route`.
pub fn forward_backward_masking<R: Rng + ?Sized>(
    rules: &RuleTable,
    datum: &Datum,
    t: usize,
    horizon: usize,
    route: Route,
    rng: &mut R,
) -> Result<TrajectoryResult> {
    let mask = sample_mask(datum.leaves().len(), t, horizon, rng)?;
    let regenerated = regenerate_masked(rules, datum, &mask.mask, route, t, rng)?;
    Ok(TrajectoryResult {
        original: datum.clone(),
        noise: Noise::Masking { t, horizon },
        mask: Some(mask.mask),
        regenerated,
        route,
    })
}

/// ε-process: noisy leaf priors, one BP pass, one posterior sample.
pub fn forward_backward_epsilon<R: Rng + ?Sized>(
    rules: &RuleTable,
    datum: &Datum,
    epsilon: f64,
    rng: &mut R,
) -> Result<TrajectoryResult> {
    let priors = LeafPriorField::epsilon(datum.leaves(), epsilon, rules.params().v)?;
    let field = run_bp(rules, &priors)?;
    let regenerated = sample_posterior(rules, &field, rng)?;
    Ok(TrajectoryResult {
        original: datum.clone(),
        noise: Noise::Epsilon { epsilon },
        mask: None,
        regenerated,
        route: Route::BpDirect,
    })
}

/// Runs one forward-backward experiment for the given noise.
pub fn forward_backward<R: Rng + ?Sized>(
    rules: &RuleTable,
    datum: &Datum,
    noise: Noise,
    route: Route,
    rng: &mut R,
) -> Result<TrajectoryResult> {
    match noise {
        Noise::Masking { t, horizon } => forward_backward_masking(rules, datum, t, horizon, route, rng),
        Noise::Epsilon { epsilon } => forward_backward_epsilon(rules, datum, epsilon, rng),
    }
}

/// Draws `n` starting data, each from its own stream.
pub fn draw_data(rules: &RuleTable, n: usize, seed: u64) -> Result<Vec<Datum>> {
    draw_data_multi(std::slice::from_ref(rules), n, seed)
}

/// Like [`draw_data`], with datum `d` drawn from `grammars[d % G]`.
pub fn draw_data_multi(grammars: &[RuleTable], n: usize, seed: u64) -> Result<Vec<Datum>> {
    if grammars.is_empty() {
        return Err(Error::InvalidParams("no grammar given".into()));
    }
    (0..n)
        .map(|d| grammars[d % grammars.len()].generate(None, &mut StreamKey::new(seed, Purpose::Datum).datum(d).rng()))
        .collect()
}

/// Forward-backward ensemble: `trajectories[d][k]` is trajectory `k` of
/// datum `d`. Trajectory `(d, k)` at grid point `group` uses the stream
/// `(seed, group, d, k)` whatever the schedule.
#[allow(clippy::too_many_arguments)]
pub fn run_ensemble(
    rules: &RuleTable,
    data: &[Datum],
    noise: Noise,
    route: Route,
    n_traj: usize,
    seed: u64,
    group: u64,
    par: Parallelism,
) -> Result<Vec<Vec<TrajectoryResult>>> {
    run_ensemble_multi(std::slice::from_ref(rules), data, noise, route, n_traj, seed, group, par)
}

/// Like [`run_ensemble`], with datum `d` belonging to `grammars[d % G]`.
#[allow(clippy::too_many_arguments)]
pub fn run_ensemble_multi(
    grammars: &[RuleTable],
    data: &[Datum],
    noise: Noise,
    route: Route,
    n_traj: usize,
    seed: u64,
    group: u64,
    par: Parallelism,
) -> Result<Vec<Vec<TrajectoryResult>>> {
    noise.validate()?;
    if grammars.is_empty() {
        return Err(Error::InvalidParams("no grammar given".into()));
    }
    let jobs = data.len() * n_traj;
    let flat = try_map_indexed(jobs, par, |job| {
        let (d, k) = (job / n_traj, job % n_traj);
        let rules = &grammars[d % grammars.len()];
        let mut rng = StreamKey::new(seed, Purpose::Trajectory).group(group).datum(d).trajectory(k).rng();
        forward_backward(rules, &data[d], noise, route, &mut rng).map_err(|e| Error::Trajectory {
            datum: d,
            trajectory: k,
            noise: noise.value(),
            source: Box::new(e),
        })
    })?;
    let mut out: Vec<Vec<TrajectoryResult>> = Vec::with_capacity(data.len());
    let mut it = flat.into_iter();
    for _ in 0..data.len() {
        out.push(it.by_ref().take(n_traj).collect());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Process {
    Masking,
    Epsilon,
}

/// Per-level probability that a regenerated node equals the original one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionPoint {
    pub noise: Noise,
    /// `by_level[ℓ]`, `ℓ = 0` leaves through `L` root.
    pub by_level: Vec<f64>,
}

pub fn level_agreement(a: &Datum, b: &Datum) -> Vec<f64> {
    a.levels
        .iter()
        .zip(&b.levels)
        .map(|(x, y)| x.iter().zip(y).filter(|(p, q)| p == q).count() as f64 / x.len() as f64)
        .collect()
}

/// Reconstruction probability of every level across a noise grid.
pub fn class_reconstruction_curve(
    rules: &RuleTable,
    grid: &[Noise],
    n_data: usize,
    n_traj: usize,
    seed: u64,
    par: Parallelism,
) -> Result<Vec<ReconstructionPoint>> {
    let data = draw_data(rules, n_data, seed)?;
    let depth = rules.params().depth;
    let mut out = Vec::with_capacity(grid.len());
    for (g, &noise) in grid.iter().enumerate() {
        let ens = run_ensemble(rules, &data, noise, Route::BpDirect, n_traj, seed, g as u64, par)?;
        let mut sums = vec![0.0; depth + 1];
        let mut count = 0usize;
        for traj in ens.iter().flatten() {
            for (s, a) in sums.iter_mut().zip(level_agreement(&traj.original, &traj.regenerated)) {
                *s += a;
            }
            count += 1;
        }
        sums.iter_mut().for_each(|s| *s /= count.max(1) as f64);
        out.push(ReconstructionPoint { noise, by_level: sums });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::GrammarParams;
    use crate::rng::seeded;

    fn grammar(v: usize, m: usize, s: usize, l: usize, seed: u64) -> RuleTable {
        RuleTable::build(GrammarParams::new(v, m, s, l).unwrap(), &mut seeded(seed)).unwrap()
    }

    #[test]
    fn mask_endpoints() {
        let mut rng = seeded(0);
        assert_eq!(sample_mask(64, 0, 10, &mut rng).unwrap().masked_count(), 0);
        assert_eq!(sample_mask(64, 10, 10, &mut rng).unwrap().masked_count(), 64);
        assert!(sample_mask(64, 11, 10, &mut rng).is_err());
    }

    #[test]
    fn mask_fraction_is_binomial() {
        let (dim, trials) = (512usize, 10_000u64);
        let mut total = 0usize;
        for seed in 0..trials {
            total += sample_mask(dim, 3, 10, &mut seeded(seed)).unwrap().masked_count();
        }
        let n = (dim as f64) * trials as f64;
        let mean = total as f64 / n;
        let se = (0.3 * 0.7 / n).sqrt();
        assert!((mean - 0.3).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn zero_noise_reproduces_datum() {
        let g = grammar(8, 3, 2, 4, 3);
        let d = g.generate(None, &mut seeded(1)).unwrap();
        for route in [Route::BpDirect, Route::BackwardChain] {
            let r = forward_backward_masking(&g, &d, 0, 100, route, &mut seeded(5)).unwrap();
            assert_eq!(r.regenerated, d);
        }
        let r = forward_backward_epsilon(&g, &d, 0.0, &mut seeded(5)).unwrap();
        assert_eq!(r.regenerated, d);
    }

    #[test]
    fn unmasked_tokens_are_kept() {
        let g = grammar(8, 3, 2, 5, 3);
        let d = g.generate(None, &mut seeded(1)).unwrap();
        for route in [Route::BpDirect, Route::BackwardChain] {
            for seed in 0..30 {
                let r = forward_backward_masking(&g, &d, 40, 100, route, &mut seeded(seed)).unwrap();
                let mask = r.mask.as_ref().unwrap();
                for (i, &m) in mask.iter().enumerate() {
                    if !m {
                        assert_eq!(r.regenerated.leaves()[i], d.leaves()[i]);
                    }
                }
                g.check(&r.regenerated).unwrap();
            }
        }
    }

    #[test]
    fn full_noise_class_is_uniform() {
        let g = grammar(4, 2, 2, 3, 8);
        let d = g.generate(Some(0), &mut seeded(1)).unwrap();
        let mut counts = [0usize; 4];
        let n = 8000;
        for seed in 0..n {
            let r = forward_backward_epsilon(&g, &d, 1.0, &mut seeded(seed)).unwrap();
            counts[r.regenerated.class() as usize] += 1;
        }
        let se = (0.25f64 * 0.75 / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 4.0 * se, "{counts:?}");
        }
    }

    #[test]
    fn ensemble_is_schedule_independent() {
        let g = grammar(8, 2, 2, 4, 1);
        let data = draw_data(&g, 4, 11).unwrap();
        let noise = Noise::Masking { t: 4, horizon: 10 };
        let a = run_ensemble(&g, &data, noise, Route::BackwardChain, 5, 3, 0, Parallelism::Sequential).unwrap();
        let b = run_ensemble(&g, &data, noise, Route::BackwardChain, 5, 3, 0, Parallelism::Rayon).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|x| x.len() == 5));
    }

    #[test]
    fn invalid_noise_rejected() {
        let g = grammar(4, 2, 2, 2, 1);
        let data = draw_data(&g, 1, 0).unwrap();
        assert!(run_ensemble(&g, &data, Noise::Epsilon { epsilon: 1.2 }, Route::BpDirect, 2, 0, 0, Parallelism::Sequential).is_err());
        assert!(run_ensemble(&g, &data, Noise::Masking { t: 5, horizon: 4 }, Route::BpDirect, 2, 0, 0, Parallelism::Sequential).is_err());
    }

    #[test]
    fn record_serializes_to_expected_keys() {
        let g = grammar(4, 2, 2, 2, 1);
        let d = g.generate(None, &mut seeded(1)).unwrap();
        let r = forward_backward_masking(&g, &d, 5, 10, Route::BpDirect, &mut seeded(2)).unwrap();
        let json = serde_json::to_value(r.record(7)).unwrap();
        for key in ["datum_id", "noise", "route", "x0", "xhat0", "mask"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(json["route"], "bp_direct");
        assert_eq!(json["noise"], 0.5);
    }

    #[test]
    fn reconstruction_endpoints() {
        use crate::belief_prop::{run_bp, LeafPriorField};
        let g = grammar(8, 2, 2, 4, 2);
        let grid = [Noise::Epsilon { epsilon: 0.0 }, Noise::Epsilon { epsilon: 1.0 }];
        let (n_data, n_traj) = (64, 40);
        let curve = class_reconstruction_curve(&g, &grid, n_data, n_traj, 1, Parallelism::Rayon).unwrap();
        assert!(curve[0].by_level.iter().all(|&p| p == 1.0));
        // At full noise x0 and x̂0 are independent draws from the grammar, so
        // a node agrees with probability Σ_a π(a)², π its prior marginal.
        let d = g.generate(None, &mut seeded(0)).unwrap();
        let prior = run_bp(&g, &LeafPriorField::epsilon(d.leaves(), 1.0, 8).unwrap()).unwrap().marginals().unwrap();
        for (l, &got) in curve[1].by_level.iter().enumerate() {
            let size = g.params().level_size(l);
            let want = (0..size).map(|i| prior.node(l, i).iter().map(|p| p * p).sum::<f64>()).sum::<f64>() / size as f64;
            let se = (want * (1.0 - want) / (n_data * n_traj) as f64).sqrt();
            // Trajectories of one datum share x0, so allow a generous margin.
            assert!((got - want).abs() < 6.0 * se, "level {l}: {got} vs {want}");
        }
        assert!((curve[1].by_level[4] - 1.0 / 8.0).abs() < 0.03);
    }
}
