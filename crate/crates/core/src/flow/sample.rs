use rand::Rng;
use rand_distr::StandardNormal;

use super::{decode_latent, FlowError, LatentGrid, VelocityModel};
use crate::rng::stream_rng;
use crate::synthworld::RasterImage;
use crate::tensor::Matrix;

/// Seeded unit-Gaussian latent, the state at MDP time 0.
pub fn initial_noise(model: &VelocityModel, seed: u64) -> LatentGrid {
    let c = &model.config;
    let mut rng = stream_rng(seed, 0);
    let n = c.latent_height * c.latent_width * c.latent_channels;
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    LatentGrid::new(c.latent_height, c.latent_width, c.latent_channels, data)
}

/// Euler states `x_0 … x_n` of the deterministic sampler, `Δt = 1/n_steps`.
pub fn ode_trajectory(
    model: &VelocityModel,
    prompt: &str,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<LatentGrid>, FlowError> {
    if n_steps == 0 {
        return Err(FlowError::Hyper("n_steps must be at least 1".into()));
    }
    let cond = model.tokenize(prompt)?;
    let dt = 1.0 / n_steps as f64;
    let mut states = vec![initial_noise(model, seed)];
    for k in 0..n_steps {
        let x = states.last().unwrap();
        let v = model.velocity(x, k as f64 * dt, &cond);
        states.push(x.zip_map(&v, |a, b| a - b * dt));
    }
    Ok(states)
}

pub fn ode_sample(model: &VelocityModel, prompt: &str, n_steps: usize, seed: u64) -> Result<RasterImage, FlowError> {
    let states = ode_trajectory(model, prompt, n_steps, seed)?;
    decode_latent(states.last().unwrap())
}

/// [`ode_sample`] for many (prompt, seed) pairs, evaluated as one batch per step.
pub fn ode_sample_batch(
    model: &VelocityModel,
    jobs: &[(&str, u64)],
    n_steps: usize,
) -> Result<Vec<RasterImage>, FlowError> {
    if n_steps == 0 {
        return Err(FlowError::Hyper("n_steps must be at least 1".into()));
    }
    if jobs.is_empty() {
        return Ok(Vec::new());
    }
    let conds = jobs
        .iter()
        .map(|(p, _)| model.tokenize(p))
        .collect::<Result<Vec<_>, _>>()?;
    let cells = model.cells();
    let ch = model.config.latent_channels;
    let mut data = Vec::with_capacity(jobs.len() * cells * ch);
    for (_, seed) in jobs {
        data.extend(initial_noise(model, *seed).data);
    }
    let mut x = Matrix::from_vec(jobs.len() * cells, ch, data);
    let dt = 1.0 / n_steps as f64;
    for k in 0..n_steps {
        let ts = vec![k as f64 * dt; jobs.len()];
        let v = model.velocity_rows(&x, &ts, &conds);
        for (a, b) in x.data.iter_mut().zip(&v.data) {
            *a -= b * dt;
        }
    }
    let c = &model.config;
    (0..jobs.len())
        .map(|i| {
            let slice = x.data[i * cells * ch..(i + 1) * cells * ch].to_vec();
            decode_latent(&LatentGrid::new(c.latent_height, c.latent_width, ch, slice))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::VelocityModelConfig;
    use crate::synthworld::standard_world;

    fn model() -> VelocityModel {
        VelocityModel::new(VelocityModelConfig::new(standard_world().vocabulary(), 1))
    }

    #[test]
    fn single_step_is_one_euler_update() {
        let m = model();
        let states = ode_trajectory(&m, "a unripe apple", 1, 4).unwrap();
        let x0 = initial_noise(&m, 4);
        let v = m.velocity(&x0, 0.0, &m.tokenize("a unripe apple").unwrap());
        assert_eq!(states[1], x0.zip_map(&v, |a, b| a - b));
    }

    #[test]
    fn sampling_is_deterministic_and_batch_consistent() {
        let m = model();
        let a = ode_sample(&m, "a cork in a pond", 4, 9).unwrap();
        assert_eq!(a, ode_sample(&m, "a cork in a pond", 4, 9).unwrap());
        let batch = ode_sample_batch(&m, &[("a ball in orbit", 2), ("a cork in a pond", 9)], 4).unwrap();
        assert_eq!(batch[1], a);
        assert_eq!(batch[0], ode_sample(&m, "a ball in orbit", 4, 2).unwrap());
    }
}
