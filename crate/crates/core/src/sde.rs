//! Stochastic reading of the rectified-flow sampler.
//!
//! Each Euler step becomes a Gaussian policy `N(μ_θ, σ_t² I)` whose mean
//! folds a churn-dependent drift correction into the ODE update, so sampled
//! actions have an exact log-density. `σ = 0` gives back the ODE step.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{initial_noise, FlowError, LatentGrid, VelocityModel};
use crate::rng::stream_rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("policy mean undefined at t = {0} (needs t < 1)")]
    TimeDomain(f64),
    #[error("step t = {t}, Δt = {dt} overruns t = 1")]
    StepOverrun { t: f64, dt: f64 },
    #[error("degenerate policy: σ = 0 has no density")]
    Degenerate,
    #[error("invalid churn parameters: {0}")]
    Churn(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChurnParams {
    pub s_churn: f64,
    pub s_min: f64,
    #[serde(with = "extended_f64")]
    pub s_max: f64,
    pub s_noise: f64,
}

/// JSON has no infinity: non-finite values travel as `"inf"`, `"-inf"` or `"nan"`.
mod extended_f64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string().to_lowercase())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.trim().parse::<f64>().map_err(|_| de::Error::custom(format!("not a number: {t:?}"))),
        }
    }
}

impl Default for ChurnParams {
    fn default() -> Self {
        Self {
            s_churn: 0.1,
            s_min: 0.0,
            s_max: f64::INFINITY,
            s_noise: 1.0,
        }
    }
}

impl ChurnParams {
    /// Parameters with no churn: every step is deterministic.
    pub fn deterministic() -> Self {
        Self {
            s_churn: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SdeError> {
        if !(self.s_churn >= 0.0) {
            return Err(SdeError::Churn(format!("s_churn = {} must be ≥ 0", self.s_churn)));
        }
        if !(self.s_min <= self.s_max) {
            return Err(SdeError::Churn(format!("s_min = {} exceeds s_max = {}", self.s_min, self.s_max)));
        }
        if !(self.s_noise > 0.0) {
            return Err(SdeError::Churn(format!("s_noise = {} must be > 0", self.s_noise)));
        }
        Ok(())
    }
}

pub fn gamma_of(t: f64, dt: f64, p: &ChurnParams) -> f64 {
    if t >= p.s_min && t <= p.s_max {
        (p.s_churn * dt).min(std::f64::consts::SQRT_2 - 1.0)
    } else {
        0.0
    }
}

pub fn sigma_of(t: f64, dt: f64, p: &ChurnParams) -> f64 {
    let g = gamma_of(t, dt, p);
    p.s_noise * (g * g + 2.0 * g).sqrt() * (1.0 - t)
}

/// Coefficients `(c_v, c_x)` with `μ = c_v·v + c_x·x`.
pub fn mean_coefficients(t: f64, dt: f64, sigma: f64) -> Result<(f64, f64), SdeError> {
    if !(t < 1.0) {
        return Err(SdeError::TimeDomain(t));
    }
    let s2 = sigma * sigma;
    let den = 2.0 * (1.0 - t);
    let c_v = -(t * s2 + 2.0 * (1.0 - t)) / den * dt;
    let c_x = (2.0 * (1.0 - t) + s2 * dt) / den;
    Ok((c_v, c_x))
}

pub fn policy_mean(v: &LatentGrid, x: &LatentGrid, t: f64, dt: f64, sigma: f64) -> Result<LatentGrid, SdeError> {
    if sigma == 0.0 {
        // Exact ODE update; the general coefficients round differently.
        if !(t < 1.0) {
            return Err(SdeError::TimeDomain(t));
        }
        return Ok(zip(x, v, |a, b| a - b * dt)?);
    }
    let (c_v, c_x) = mean_coefficients(t, dt, sigma)?;
    Ok(zip(x, v, |a, b| c_v * b + c_x * a)?)
}

fn zip(a: &LatentGrid, b: &LatentGrid, f: impl Fn(f64, f64) -> f64) -> Result<LatentGrid, FlowError> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(FlowError::Shape("policy operands differ in shape".into()));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
    Ok(LatentGrid::new(a.height, a.width, a.channels, data))
}

/// Sum over coordinates of the scalar Gaussian log-density `log N(a; μ, σ²)`.
pub fn policy_logprob(action: &[f64], mean: &[f64], sigma: f64) -> Result<f64, SdeError> {
    if !(sigma > 0.0) {
        return Err(SdeError::Degenerate);
    }
    let inv = 1.0 / (sigma * sigma);
    let sq: f64 = action.iter().zip(mean).map(|(a, m)| (a - m) * (a - m)).sum();
    let n = action.len() as f64;
    Ok(-0.5 * sq * inv - n * sigma.ln() - 0.5 * n * LN_2PI)
}

/// One transition `s_t → a_t` of the stochastic sampler.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyStep {
    pub t: f64,
    pub dt: f64,
    pub state: LatentGrid,
    pub action: LatentGrid,
    pub mean: LatentGrid,
    pub sigma: f64,
    /// `None` when `σ = 0` (degenerate point mass).
    pub log_prob: Option<f64>,
}

pub fn sde_step(
    model: &VelocityModel,
    state: &LatentGrid,
    cond: &[u32],
    t: f64,
    dt: f64,
    params: &ChurnParams,
    rng: &mut impl Rng,
) -> Result<PolicyStep, SdeError> {
    if t + dt > 1.0 + 1e-12 {
        return Err(SdeError::StepOverrun { t, dt });
    }
    let v = model.velocity(state, t, cond);
    let sigma = sigma_of(t, dt, params);
    let mean = policy_mean(&v, state, t, dt, sigma)?;
    finish_step(t, dt, state.clone(), mean, sigma, rng)
}

pub(crate) fn finish_step(
    t: f64,
    dt: f64,
    state: LatentGrid,
    mean: LatentGrid,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<PolicyStep, SdeError> {
    let (action, log_prob) = if sigma > 0.0 {
        let data = mean
            .data
            .iter()
            .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let a = LatentGrid::new(mean.height, mean.width, mean.channels, data);
        let lp = policy_logprob(&a.data, &mean.data, sigma)?;
        (a, Some(lp))
    } else {
        (mean.clone(), None)
    };
    Ok(PolicyStep {
        t,
        dt,
        state,
        action,
        mean,
        sigma,
        log_prob,
    })
}

/// Stream of the per-step noise for step `k` of a rollout seeded with `seed`.
pub fn step_rng(seed: u64, k: usize) -> crate::rng::StreamRng {
    stream_rng(seed, 1 + k as u64)
}

/// Full `n_steps` stochastic rollout from the seeded initial noise.
pub fn sde_rollout(
    model: &VelocityModel,
    prompt: &str,
    n_steps: usize,
    params: &ChurnParams,
    seed: u64,
) -> Result<Vec<PolicyStep>, SdeError> {
    sde_rollout_from(model, prompt, initial_noise(model, seed), n_steps, params, seed)
}

/// Rollout from a given initial state; step noise comes from `seed`.
pub fn sde_rollout_from(
    model: &VelocityModel,
    prompt: &str,
    init: LatentGrid,
    n_steps: usize,
    params: &ChurnParams,
    seed: u64,
) -> Result<Vec<PolicyStep>, SdeError> {
    params.validate()?;
    if n_steps == 0 {
        return Err(FlowError::Hyper("n_steps must be at least 1".into()).into());
    }
    let cond = model.tokenize(prompt)?;
    let dt = 1.0 / n_steps as f64;
    let mut x = init;
    let mut steps = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let step = sde_step(model, &x, &cond, k as f64 * dt, dt, params, &mut step_rng(seed, k))?;
        x = step.action.clone();
        steps.push(step);
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn churn_params_survive_json() {
        let p = ChurnParams::default();
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<ChurnParams>(&text).unwrap(), p);
    }

    #[test]
    fn gamma_and_sigma_values() {
        let p = ChurnParams::default();
        assert!((gamma_of(0.3, 0.05, &p) - 0.005).abs() < 1e-15);
        let outside = ChurnParams { s_min: 0.5, s_max: 0.6, ..p };
        assert_eq!(gamma_of(0.3, 0.05, &outside), 0.0);
        let huge = ChurnParams { s_churn: 1e6, ..p };
        assert!((gamma_of(0.3, 0.05, &huge) - 0.414_213_562_373_095).abs() < 1e-12);
        let s = sigma_of(0.5, 0.05, &p);
        assert!((s - (0.005f64 * 0.005 + 0.01).sqrt() * 0.5).abs() < 1e-15);
        assert!((s - 0.050_062_5).abs() < 1e-6);
        assert_eq!(sigma_of(1.0, 0.05, &huge), 0.0);
    }

    #[test]
    fn mean_limits() {
        let x = LatentGrid::new(1, 1, 3, vec![0.3, -1.0, 2.0]);
        let v = LatentGrid::new(1, 1, 3, vec![1.0, 0.5, -0.25]);
        let m = policy_mean(&v, &x, 0.25, 0.125, 0.0).unwrap();
        assert_eq!(m, zip(&x, &v, |a, b| a - b * 0.125).unwrap());
        let zero = LatentGrid::zeros(1, 1, 3);
        assert_eq!(policy_mean(&zero, &x, 0.4, 0.1, 0.0).unwrap(), x);
        assert!(matches!(policy_mean(&v, &x, 1.0, 0.1, 0.2), Err(SdeError::TimeDomain(_))));
        // General branch tends to the ODE update as σ → 0.
        let near = policy_mean(&v, &x, 0.25, 0.125, 1e-9).unwrap();
        assert!(near.max_abs_diff(&m) < 1e-15);
    }

    #[test]
    fn logprob_at_mode_and_translation() {
        let lp = policy_logprob(&[0.0], &[0.0], 1.0).unwrap();
        assert!((lp + 0.918_938_533_204_672_7).abs() < 1e-12);
        let a = policy_logprob(&[0.3, -0.2], &[0.1, 0.4], 0.7).unwrap();
        let b = policy_logprob(&[5.3, 4.8], &[5.1, 5.4], 0.7).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(matches!(policy_logprob(&[0.0], &[0.0], 0.0), Err(SdeError::Degenerate)));
    }

    #[test]
    fn invalid_churn_rejected() {
        assert!(ChurnParams { s_min: 1.0, s_max: 0.0, ..Default::default() }.validate().is_err());
        assert!(ChurnParams { s_noise: 0.0, ..Default::default() }.validate().is_err());
        assert!(ChurnParams::default().validate().is_ok());
    }
}
