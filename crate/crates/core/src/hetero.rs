//! Client computing-speed profiles.
//!
//! Speeds are expressed as minutes per local step. A client's base speed is
//! drawn once; each round then draws a per-step time around it with a small
//! coefficient of variation.

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::sim::{streams, RngStream};
use crate::ClientId;

/// Std of the normal profile as a fraction of its mean.
pub const NORMAL_PROFILE_CV: f64 = 0.3;
/// Default per-round jitter (coefficient of variation).
pub const DEFAULT_JITTER_CV: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum SpeedDist {
    Homogeneous { mean: f64 },
    /// `N(mean, (0.3 mean)^2)`, truncated below at `0.05 mean`.
    Normal { mean: f64 },
    Exponential { mean: f64 },
}

impl SpeedDist {
    pub fn mean(&self) -> f64 {
        match *self {
            SpeedDist::Homogeneous { mean }
            | SpeedDist::Normal { mean }
            | SpeedDist::Exponential { mean } => mean,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            SpeedDist::Homogeneous { mean } => mean,
            SpeedDist::Normal { mean } => {
                let draw = Normal::new(mean, NORMAL_PROFILE_CV * mean)
                    .expect("mean is positive")
                    .sample(rng);
                draw.max(0.05 * mean)
            }
            SpeedDist::Exponential { mean } => {
                let draw = Exp::new(1.0 / mean).expect("mean is positive").sample(rng);
                // Exp can return exactly zero with vanishing probability
                draw.max(f64::MIN_POSITIVE)
            }
        }
    }
}

/// `m` base step times drawn from `dist`.
pub fn sample_base_speeds(dist: &SpeedDist, m: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed, streams::SPEEDS);
    (0..m).map(|_| dist.sample(&mut rng)).collect()
}

/// Duration of a `steps`-step round: `steps * t_k` with
/// `t_k ~ N(t_i, (cv t_i)^2)` truncated below at `0.5 t_i`. With `cv = 0` no
/// randomness is consumed and the result is exactly `steps * t_i`.
pub fn realize_round_time<R: Rng + ?Sized>(step_time: f64, steps: u32, jitter_cv: f64, rng: &mut R) -> f64 {
    assert!(steps >= 1, "a round has at least one step");
    let per_step = if jitter_cv > 0.0 {
        let draw = Normal::new(step_time, jitter_cv * step_time)
            .expect("step time is positive")
            .sample(rng);
        draw.max(0.5 * step_time)
    } else {
        step_time
    };
    steps as f64 * per_step
}

/// Scripted speed override: from round `round` (one-based) onward, `client`
/// runs at `step_time` minutes per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedChange {
    pub client: ClientId,
    pub round: u32,
    pub step_time: f64,
}

/// Per-client speed state for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedProfile {
    pub dist: SpeedDist,
    step_times: Vec<f64>,
    pub jitter_cv: f64,
    pub change_prob: f64,
    pub script: Vec<SpeedChange>,
}

impl SpeedProfile {
    pub fn sampled(dist: SpeedDist, m: usize, seed: u64) -> Self {
        SpeedProfile {
            dist,
            step_times: sample_base_speeds(&dist, m, seed),
            jitter_cv: DEFAULT_JITTER_CV,
            change_prob: 0.0,
            script: Vec::new(),
        }
    }

    /// Fixed step times, no jitter, no resampling.
    pub fn fixed(step_times: Vec<f64>) -> Self {
        let mean = step_times.iter().sum::<f64>() / step_times.len().max(1) as f64;
        SpeedProfile {
            dist: SpeedDist::Homogeneous { mean },
            step_times,
            jitter_cv: 0.0,
            change_prob: 0.0,
            script: Vec::new(),
        }
    }

    /// Distribution used when a speed is resampled.
    pub fn with_dist(mut self, dist: SpeedDist) -> Self {
        self.dist = dist;
        self
    }

    pub fn with_jitter(mut self, cv: f64) -> Self {
        self.jitter_cv = cv;
        self
    }

    pub fn with_change_prob(mut self, p: f64) -> Self {
        self.change_prob = p;
        self
    }

    pub fn with_script(mut self, script: Vec<SpeedChange>) -> Self {
        self.script = script;
        self
    }

    pub fn clients(&self) -> usize {
        self.step_times.len()
    }

    pub fn step_time(&self, client: ClientId) -> f64 {
        self.step_times[client]
    }

    pub fn step_times(&self) -> &[f64] {
        &self.step_times
    }

    /// Replaces the client's step time with a fresh draw from the profile distribution.
    pub fn resample_speed<R: Rng + ?Sized>(&mut self, client: ClientId, rng: &mut R) -> f64 {
        let t = self.dist.sample(rng);
        self.step_times[client] = t;
        t
    }

    /// Applies scripted or random speed changes due at the start of `round`
    /// and returns the step time in effect for it. A scripted change wins over
    /// a random one.
    pub fn begin_round<R: Rng + ?Sized>(&mut self, client: ClientId, round: u32, rng: &mut R) -> SpeedEvent {
        let scripted = self
            .script
            .iter()
            .find(|c| c.client == client && c.round == round)
            .map(|c| c.step_time);
        let before = self.step_times[client];
        if let Some(t) = scripted {
            self.step_times[client] = t;
            return SpeedEvent {
                step_time: t,
                changed_from: Some(before),
            };
        }
        if self.change_prob > 0.0 && round > 1 && rng.random::<f64>() < self.change_prob {
            let t = self.resample_speed(client, rng);
            return SpeedEvent {
                step_time: t,
                changed_from: Some(before),
            };
        }
        SpeedEvent {
            step_time: before,
            changed_from: None,
        }
    }

    /// Round duration for `client` after applying due speed changes.
    pub fn round_time<R: Rng + ?Sized>(&mut self, client: ClientId, round: u32, steps: u32, rng: &mut R) -> (f64, SpeedEvent) {
        let ev = self.begin_round(client, round, rng);
        (realize_round_time(ev.step_time, steps, self.jitter_cv, rng), ev)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedEvent {
    pub step_time: f64,
    /// Previous step time when a change happened this round.
    pub changed_from: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn homogeneous_speeds_are_equal() {
        let t = sample_base_speeds(&SpeedDist::Homogeneous { mean: 0.15 / 60.0 }, 7, 3);
        assert!(t.iter().all(|&x| x == 0.15 / 60.0));
    }

    #[test]
    fn normal_profile_mean_is_close() {
        let mu = 2.0;
        let t = sample_base_speeds(&SpeedDist::Normal { mean: mu }, 10_000, 5);
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        assert!((mean - mu).abs() / mu < 0.02, "mean {mean}");
        assert!(t.iter().all(|&x| x >= 0.05 * mu));
    }

    #[test]
    fn exponential_spread_exceeds_normal() {
        // median over seeds of the max/min ratio for m = 20
        let ratio = |dist: SpeedDist| {
            let mut r: Vec<f64> = (0..51)
                .map(|s| {
                    let t = sample_base_speeds(&dist, 20, s);
                    let max = t.iter().copied().fold(0.0, f64::max);
                    let min = t.iter().copied().fold(f64::INFINITY, f64::min);
                    max / min
                })
                .collect();
            r.sort_by(f64::total_cmp);
            r[25]
        };
        let exp = ratio(SpeedDist::Exponential { mean: 0.5 / 60.0 });
        let norm = ratio(SpeedDist::Normal { mean: 0.5 / 60.0 });
        assert!(exp > 5.0 * norm, "exp {exp} vs normal {norm}");
    }

    #[test]
    fn zero_jitter_is_exact() {
        let mut rng = RngStream::new(0, 0);
        assert_eq!(realize_round_time(0.1, 20, 0.0, &mut rng), 2.0);
        assert_eq!(realize_round_time(0.25, 28, 0.0, &mut rng), 7.0);
    }

    #[test]
    fn jitter_std_matches_cv() {
        let mut rng = RngStream::new(8, 1);
        let t = 0.3;
        let draws: Vec<f64> = (0..10_000)
            .map(|_| realize_round_time(t, 1, DEFAULT_JITTER_CV, &mut rng))
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        let target = DEFAULT_JITTER_CV * t;
        assert!((var.sqrt() - target).abs() / target < 0.1, "std {}", var.sqrt());
        assert!(draws.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn zero_change_probability_keeps_speeds() {
        let mut p = SpeedProfile::sampled(SpeedDist::Normal { mean: 1.0 }, 4, 1);
        let before = p.step_times().to_vec();
        let mut rng = RngStream::new(0, 9);
        for round in 1..50 {
            for c in 0..4 {
                p.begin_round(c, round, &mut rng);
            }
        }
        assert_eq!(p.step_times(), &before[..]);
    }

    #[test]
    fn homogeneous_resample_is_a_no_op() {
        let mut p = SpeedProfile::sampled(SpeedDist::Homogeneous { mean: 0.5 }, 3, 1).with_change_prob(1.0);
        let mut rng = RngStream::new(0, 9);
        for round in 2..10 {
            assert_eq!(p.begin_round(1, round, &mut rng).step_time, 0.5);
        }
    }

    #[test]
    fn script_applies_from_its_round() {
        let mut p = SpeedProfile::fixed(vec![0.1, 0.2, 0.25]).with_script(vec![SpeedChange {
            client: 2,
            round: 2,
            step_time: 0.2,
        }]);
        let mut rng = RngStream::new(0, 0);
        assert_eq!(p.round_time(2, 1, 20, &mut rng).0, 5.0);
        let (d, ev) = p.round_time(2, 2, 28, &mut rng);
        // 5 + 28 * 0.2 = 10.6
        assert!((5.0 + d - 10.6).abs() < 1e-12);
        assert_eq!(ev.changed_from, Some(0.25));
        assert_eq!(p.step_time(2), 0.2);
    }
}
