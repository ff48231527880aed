//! Gaussian search policy over loss/augmentation parameters and its REINFORCE update.
//!
//! Each searched parameter `j` is sampled as `rho_j ~ N(mu_j, sigma^2)` with one `sigma` shared
//! by all parameters. After an episode the best trial (by whitened reward) drives one update
//!
//! ```text
//! mu_j <- mu_j + eta * R * (rho_j - mu_j) / sigma^2
//! ```
//!
//! which is the Gaussian score function `d/dmu log N(rho; mu, sigma)` scaled by the reward.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::augment::AugMagnitude;
use crate::error::{Error, Result};
use crate::losses::{LossParams, LossVariant};

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    pub mu: Vec<f64>,
    pub sigma: f64,
    pub episode: usize,
    pub param_names: Vec<String>,
}

impl PolicyState {
    pub fn new(param_names: Vec<String>, mu: Vec<f64>, sigma: f64) -> Result<Self> {
        let state = PolicyState {
            mu,
            sigma,
            episode: 0,
            param_names,
        };
        state.validate()?;
        Ok(state)
    }

    /// Policy centred at zero in the unconstrained search space.
    pub fn centered(param_names: &[&str], sigma: f64) -> Result<Self> {
        Self::new(
            param_names.iter().map(|s| s.to_string()).collect(),
            vec![0.0; param_names.len()],
            sigma,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::contract(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.mu.len() != self.param_names.len() {
            return Err(Error::contract(format!(
                "{} means for {} parameter names",
                self.mu.len(),
                self.param_names.len()
            )));
        }
        if let Some(m) = self.mu.iter().find(|m| !m.is_finite()) {
            return Err(Error::contract(format!("non-finite policy mean {m}")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RhoSample {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub samples: Vec<RhoSample>,
    pub raw_rewards: Vec<f64>,
    pub norm_rewards: Vec<f64>,
    pub best_index: usize,
    /// Trials that failed (e.g. diverged) and were left out of the lists above.
    pub failed_trials: usize,
}

impl EpisodeResult {
    /// Builds a result from trial samples and rewards; whitens when `normalize` is set,
    /// otherwise the raw rewards are used as-is.
    pub fn from_trials(
        samples: Vec<RhoSample>,
        raw_rewards: Vec<f64>,
        normalize: bool,
        failed_trials: usize,
    ) -> Result<Self> {
        if samples.is_empty() || samples.len() != raw_rewards.len() {
            return Err(Error::contract(format!(
                "{} samples with {} rewards",
                samples.len(),
                raw_rewards.len()
            )));
        }
        let norm_rewards = if normalize {
            normalize_rewards(&raw_rewards)?
        } else {
            raw_rewards.clone()
        };
        let best_index = argmax(&norm_rewards);
        Ok(EpisodeResult {
            samples,
            raw_rewards,
            norm_rewards,
            best_index,
            failed_trials,
        })
    }
}

/// Index of the maximum; ties resolve to the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn sample_rho<R: Rng + ?Sized>(policy: &PolicyState, rng: &mut R) -> RhoSample {
    RhoSample {
        values: policy
            .mu
            .iter()
            .map(|&m| {
                let z: f64 = rng.sample(StandardNormal);
                m + policy.sigma * z
            })
            .collect(),
    }
}

/// Whitening with the population standard deviation; constant inputs map to zeros.
pub fn normalize_rewards(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::contract("cannot normalize an empty reward list"));
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return Ok(vec![0.0; raw.len()]);
    }
    Ok(raw.iter().map(|r| (r - mean) / std).collect())
}

/// Closed-form score `(rho - mu) / sigma^2` of a Gaussian with respect to its mean.
pub fn gaussian_mean_score(rho: f64, mu: f64, sigma: f64) -> f64 {
    (rho - mu) / (sigma * sigma)
}

pub fn reinforce_update(policy: &PolicyState, sample: &RhoSample, reward: f64, eta: f64) -> PolicyState {
    let mu = policy
        .mu
        .iter()
        .zip(&sample.values)
        .map(|(&m, &rho)| m + eta * reward * gaussian_mean_score(rho, m, policy.sigma))
        .collect();
    PolicyState {
        mu,
        ..policy.clone()
    }
}

/// Linear decay from `sigma0` at episode 0 to `sigma_min` at `total_episodes`.
pub fn sigma_schedule(episode: usize, total_episodes: usize, sigma0: f64, sigma_min: f64) -> f64 {
    if total_episodes == 0 {
        return sigma0;
    }
    let frac = episode.min(total_episodes) as f64 / total_episodes as f64;
    sigma0 + (sigma_min - sigma0) * frac
}

pub fn select_best(result: &EpisodeResult) -> (RhoSample, f64) {
    let i = result.best_index;
    (result.samples[i].clone(), result.norm_rewards[i])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SearchStage {
    Loss,
    Aug,
}

impl SearchStage {
    pub fn name(self) -> &'static str {
        match self {
            SearchStage::Loss => "loss",
            SearchStage::Aug => "aug",
        }
    }
}

impl fmt::Display for SearchStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SearchStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "loss" => Ok(SearchStage::Loss),
            "aug" | "augmentation" => Ok(SearchStage::Aug),
            other => Err(Error::contract(format!("unknown search stage `{other}`"))),
        }
    }
}

/// Names of the unconstrained coordinates searched in `stage` for `variant`.
pub fn search_params(variant: LossVariant, stage: SearchStage) -> Vec<&'static str> {
    match stage {
        SearchStage::Aug => vec!["aug"],
        SearchStage::Loss => match variant {
            LossVariant::Baseline => vec![],
            LossVariant::Static => vec!["tau"],
            LossVariant::Dynamic => vec!["a", "b", "c"],
            LossVariant::ScaledDynamic => vec!["a", "b", "c", "alpha"],
        },
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Values held fixed for the coordinates a stage does not search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrozenParams {
    pub loss: LossParams,
    pub aug: AugMagnitude,
}

impl Default for FrozenParams {
    fn default() -> Self {
        FrozenParams {
            loss: LossParams::baseline(),
            aug: AugMagnitude::NONE,
        }
    }
}

/// Map an unconstrained sample onto constrained parameters: `exp` for the temperature and
/// novel-class scale, identity for the polynomial, logistic for the augmentation magnitude.
pub fn decode_rho(
    sample: &RhoSample,
    variant: LossVariant,
    stage: SearchStage,
    frozen: &FrozenParams,
) -> Result<(LossParams, AugMagnitude)> {
    let names = search_params(variant, stage);
    if sample.values.len() != names.len() {
        return Err(Error::contract(format!(
            "sample has {} values but stage `{stage}` of `{variant}` searches {}",
            sample.values.len(),
            names.len()
        )));
    }
    if let Some(v) = sample.values.iter().find(|v| !v.is_finite()) {
        return Err(Error::contract(format!("non-finite sample value {v}")));
    }
    let v = &sample.values;
    match stage {
        SearchStage::Aug => Ok((frozen.loss, AugMagnitude::new(logistic(v[0]))?)),
        SearchStage::Loss => {
            let loss = match variant {
                LossVariant::Baseline => LossParams::baseline(),
                LossVariant::Static => LossParams::static_temperature(v[0].exp())?,
                LossVariant::Dynamic => LossParams::dynamic(v[0], v[1], v[2])?,
                LossVariant::ScaledDynamic => LossParams::scaled_dynamic(v[0], v[1], v[2], v[3].exp())?,
            };
            Ok((loss, frozen.aug))
        }
    }
}

/// Per-episode record for the trajectory CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub episode: usize,
    pub mu: Vec<f64>,
    pub sigma: f64,
    pub best_reward_raw: f64,
    pub best_reward_norm: f64,
}

pub const TRAJECTORY_HEADER: &str = "episode,param_name,mu,sigma,best_reward_raw,best_reward_norm";

/// One row per parameter per episode.
pub fn write_trajectory_csv<W: Write>(mut w: W, param_names: &[String], rows: &[TrajectoryRow]) -> Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    write_trajectory_rows(w, param_names, rows)
}

pub fn write_trajectory_rows<W: Write>(mut w: W, param_names: &[String], rows: &[TrajectoryRow]) -> Result<()> {
    for row in rows {
        for (name, mu) in param_names.iter().zip(&row.mu) {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                row.episode, name, mu, row.sigma, row.best_reward_raw, row.best_reward_norm
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn policy(mu: Vec<f64>, sigma: f64) -> PolicyState {
        let names = (0..mu.len()).map(|i| format!("p{i}")).collect();
        PolicyState::new(names, mu, sigma).unwrap()
    }

    #[test]
    fn tiny_sigma_returns_the_mean() {
        let p = policy(vec![0.3, -1.2], 1e-300);
        let s = sample_rho(&p, &mut rng::stream(0, "s", &[]));
        assert_eq!(s.values, p.mu);
    }

    #[test]
    fn stream_advances_between_calls() {
        let p = policy(vec![0.0], 0.1);
        let mut r = rng::stream(1, "s", &[]);
        let a = sample_rho(&p, &mut r);
        let b = sample_rho(&p, &mut r);
        assert_ne!(a, b);
        let again = sample_rho(&p, &mut rng::stream(1, "s", &[]));
        assert_eq!(a, again);
    }

    #[test]
    fn empirical_mean_within_three_standard_errors() {
        // Standard error of the mean: 0.1 / sqrt(1e5) ~= 3.2e-4, so 3 SE < 0.001 < 0.002.
        let p = policy(vec![0.5], 0.1);
        let mut r = rng::stream(2, "mc", &[]);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_rho(&p, &mut r).values[0]).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.002, "{mean}");
    }

    #[test]
    fn whitening_examples() {
        assert_eq!(normalize_rewards(&[5.0, 5.0, 5.0]).unwrap(), vec![0.0; 3]);
        let w = normalize_rewards(&[1.0, 2.0, 3.0]).unwrap();
        let s = 1.5f64.sqrt();
        for (a, b) in w.iter().zip([-s, 0.0, s]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(normalize_rewards(&[]).is_err());
    }

    #[test]
    fn update_examples() {
        let p = policy(vec![0.5], 0.1);
        let s = RhoSample { values: vec![0.6] };
        assert_eq!(reinforce_update(&p, &s, 0.0, 0.0005).mu, p.mu);
        let at_mean = RhoSample { values: vec![0.5] };
        assert_eq!(reinforce_update(&p, &at_mean, 3.7, 0.0005).mu, p.mu);
        let moved = reinforce_update(&p, &s, 1.0, 0.0005);
        assert!((moved.mu[0] - 0.505).abs() < 1e-12, "{}", moved.mu[0]);
        assert_eq!(moved.sigma, p.sigma);
        assert_eq!(moved.episode, p.episode);
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(sigma_schedule(0, 200, 0.1, 0.01), 0.1);
        assert!((sigma_schedule(200, 200, 0.1, 0.01) - 0.01).abs() < 1e-15);
        assert!((sigma_schedule(100, 200, 0.1, 0.01) - 0.055).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for e in 0..=50 {
            let s = sigma_schedule(e, 50, 0.1, 0.01);
            assert!(s <= prev);
            prev = s;
        }
    }

    #[test]
    fn best_selection() {
        let samples: Vec<RhoSample> = (0..3).map(|i| RhoSample { values: vec![i as f64] }).collect();
        let r = EpisodeResult {
            samples: samples.clone(),
            raw_rewards: vec![0.3, 1.1, -0.5],
            norm_rewards: vec![0.3, 1.1, -0.5],
            best_index: 1,
            failed_trials: 0,
        };
        assert_eq!(select_best(&r), (samples[1].clone(), 1.1));

        let single = EpisodeResult::from_trials(vec![samples[0].clone()], vec![-4.0], true, 0).unwrap();
        assert_eq!(select_best(&single), (samples[0].clone(), 0.0));

        let flat = EpisodeResult::from_trials(samples.clone(), vec![0.4; 3], true, 0).unwrap();
        let (best, reward) = select_best(&flat);
        assert_eq!((best.clone(), reward), (samples[0].clone(), 0.0));
        let p = policy(vec![7.0], 0.1);
        assert_eq!(reinforce_update(&p, &best, reward, 0.0005), p);
    }

    #[test]
    fn decode_examples() {
        let frozen = FrozenParams::default();
        let (loss, _) = decode_rho(&RhoSample { values: vec![0.0] }, LossVariant::Static, SearchStage::Loss, &frozen).unwrap();
        assert_eq!(loss.rho_tau, 1.0);

        let (loss, aug) = decode_rho(&RhoSample { values: vec![0.0] }, LossVariant::Static, SearchStage::Aug, &frozen).unwrap();
        assert_eq!(aug.value(), 0.5);
        assert_eq!(loss, frozen.loss);

        let v = vec![0.1, -0.2, 0.3, 1.2f64.ln()];
        let (loss, aug) = decode_rho(&RhoSample { values: v }, LossVariant::ScaledDynamic, SearchStage::Loss, &frozen).unwrap();
        assert!((loss.rho_alpha - 1.2).abs() < 1e-12);
        assert!((1.09..=1.2 + 1e-12).contains(&loss.rho_alpha));
        assert_eq!((loss.rho_a, loss.rho_b, loss.rho_c), (0.1, -0.2, 0.3));
        assert_eq!(aug, frozen.aug);

        let err = decode_rho(&RhoSample { values: vec![0.0, 1.0] }, LossVariant::Static, SearchStage::Loss, &frozen);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn trajectory_rows_per_parameter() {
        let names = vec!["a".to_string(), "b".to_string()];
        let rows = vec![
            TrajectoryRow { episode: 0, mu: vec![0.1, 0.2], sigma: 0.1, best_reward_raw: 0.5, best_reward_norm: 1.2 },
            TrajectoryRow { episode: 1, mu: vec![0.3, 0.4], sigma: 0.09, best_reward_raw: 0.6, best_reward_norm: 1.1 },
        ];
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &names, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 4);
        assert_eq!(lines[0], TRAJECTORY_HEADER);
        assert_eq!(lines[1], "0,a,0.1,0.1,0.5,1.2");
        assert_eq!(lines[4], "1,b,0.4,0.09,0.6,1.1");
    }
}
