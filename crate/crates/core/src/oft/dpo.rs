use super::{FlowTrajectory, LatentMask, OftError, TrajectoryPair};
use crate::autograd::{Grads, Tape};
use crate::flow::{LatentGrid, VelocityModel};
use crate::sde::{mean_coefficients, PolicyStep};
use crate::tensor::Matrix;

/// Steps that enter the log-ratio sum: `σ > 0` and `t ≥ Δt`.
pub fn is_trainable_step(step: &PolicyStep) -> bool {
    step.sigma > 0.0 && step.t > 0.0
}

/// `Σ_{masked coords} [log N(a; μ_θ, σ²) − log N(a; μ_ref, σ²)]`.
pub fn masked_step_logratio(
    action: &LatentGrid,
    mean_theta: &LatentGrid,
    mean_ref: &LatentGrid,
    sigma: f64,
    mask: Option<&LatentMask>,
) -> Result<f64, OftError> {
    if !(sigma > 0.0) {
        return Err(crate::sde::SdeError::Degenerate.into());
    }
    if let Some(m) = mask {
        if m.cells.len() != action.cells() {
            return Err(OftError::Mask(format!("{} mask cells for {} latent cells", m.cells.len(), action.cells())));
        }
    }
    let c = action.channels;
    let inv = 0.5 / (sigma * sigma);
    let mut total = 0.0;
    for cell in 0..action.cells() {
        if mask.is_some_and(|m| !m.cells[cell]) {
            continue;
        }
        for k in cell * c..(cell + 1) * c {
            let a = action.data[k];
            let (dt, dr) = (a - mean_theta.data[k], a - mean_ref.data[k]);
            total += (dr * dr - dt * dt) * inv;
        }
    }
    Ok(total)
}

fn trainable(traj: &FlowTrajectory) -> Vec<&PolicyStep> {
    traj.steps.iter().filter(|s| is_trainable_step(s)).collect()
}

struct StepBatch {
    x: Matrix,
    ts: Vec<f64>,
    conds: Vec<Vec<u32>>,
}

fn stack_states(steps: &[&PolicyStep], cond: &[u32]) -> StepBatch {
    let (cells, ch) = (steps[0].state.cells(), steps[0].state.channels);
    let mut data = Vec::with_capacity(steps.len() * cells * ch);
    for s in steps {
        data.extend_from_slice(&s.state.data);
    }
    StepBatch {
        x: Matrix::from_vec(steps.len() * cells, ch, data),
        ts: steps.iter().map(|s| s.t).collect(),
        conds: vec![cond.to_vec(); steps.len()],
    }
}

fn means_from_velocity(steps: &[&PolicyStep], v: &Matrix) -> Result<Vec<LatentGrid>, OftError> {
    let n = steps[0].state.len();
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (c_v, c_x) = mean_coefficients(s.t, s.dt, s.sigma)?;
            let data = s.state.data.iter().zip(&v.data[i * n..(i + 1) * n]).map(|(x, v)| c_v * v + c_x * x).collect();
            Ok(LatentGrid::new(s.state.height, s.state.width, s.state.channels, data))
        })
        .collect()
}

/// Masked log-ratio of one trajectory summed over its trainable steps.
pub fn trajectory_logratio(
    model: &VelocityModel,
    reference: &VelocityModel,
    traj: &FlowTrajectory,
    mask: Option<&LatentMask>,
) -> Result<f64, OftError> {
    let steps = trainable(traj);
    if steps.is_empty() {
        return Ok(0.0);
    }
    let b = stack_states(&steps, &traj.cond);
    let mt = means_from_velocity(&steps, &model.velocity_rows(&b.x, &b.ts, &b.conds))?;
    let mr = means_from_velocity(&steps, &reference.velocity_rows(&b.x, &b.ts, &b.conds))?;
    let mut total = 0.0;
    for (i, s) in steps.iter().enumerate() {
        total += masked_step_logratio(&s.action, &mt[i], &mr[i], s.sigma, mask)?;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpoTerms {
    pub loss: f64,
    pub winner_logratio: f64,
    pub loser_logratio: f64,
    /// `β·(winner − loser)`, the logit inside `−log σ(·)`.
    pub margin: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn terms(beta: f64, w: f64, l: f64) -> DpoTerms {
    let margin = beta * (w - l);
    DpoTerms {
        loss: softplus(-margin),
        winner_logratio: w,
        loser_logratio: l,
        margin,
    }
}

/// `−log σ(β·[S_w − S_l])` with `S` the masked trajectory log-ratios; `None` masks mean unmasked.
pub fn dpo_loss(
    model: &VelocityModel,
    reference: &VelocityModel,
    pair: &TrajectoryPair,
    beta: f64,
    masks: Option<(&LatentMask, &LatentMask)>,
) -> Result<DpoTerms, OftError> {
    if !(beta > 0.0) {
        return Err(OftError::Config("beta must be > 0".into()));
    }
    let w = trajectory_logratio(model, reference, &pair.winner, masks.map(|m| m.0))?;
    let l = trajectory_logratio(model, reference, &pair.loser, masks.map(|m| m.1))?;
    let t = terms(beta, w, l);
    if !t.loss.is_finite() {
        return Err(OftError::NonFinite(0));
    }
    Ok(t)
}

/// [`dpo_loss`] plus its gradient with respect to the parameters of `model`.
pub fn dpo_loss_and_grads(
    model: &VelocityModel,
    reference: &VelocityModel,
    pair: &TrajectoryPair,
    beta: f64,
    masks: Option<(&LatentMask, &LatentMask)>,
) -> Result<(DpoTerms, Grads), OftError> {
    if !(beta > 0.0) {
        return Err(OftError::Config("beta must be > 0".into()));
    }
    let ws = trainable(&pair.winner);
    let ls = trainable(&pair.loser);
    let n_params = model.params.len();
    if ws.is_empty() && ls.is_empty() {
        return Ok((terms(beta, 0.0, 0.0), Grads::empty(n_params)));
    }
    // One batch: winner steps first, then loser steps.
    let all: Vec<&PolicyStep> = ws.iter().chain(&ls).copied().collect();
    let mut b = stack_states(&all, &pair.winner.cond);
    for c in b.conds.iter_mut().skip(ws.len()) {
        *c = pair.loser.cond.clone();
    }
    let mut tape = Tape::new();
    let xv = tape.constant(b.x.clone());
    let out = model.forward(&mut tape, xv, &b.ts, &b.conds);
    let v = tape.value(out).clone();
    let mt = means_from_velocity(&all, &v)?;
    let mr = means_from_velocity(&all, &reference.velocity_rows(&b.x, &b.ts, &b.conds))?;

    let (mut sw, mut sl) = (0.0, 0.0);
    for (i, s) in all.iter().enumerate() {
        let m = if i < ws.len() { masks.map(|m| m.0) } else { masks.map(|m| m.1) };
        let r = masked_step_logratio(&s.action, &mt[i], &mr[i], s.sigma, m)?;
        if i < ws.len() {
            sw += r;
        } else {
            sl += r;
        }
    }
    let t = terms(beta, sw, sl);
    if !t.loss.is_finite() {
        return Err(OftError::NonFinite(0));
    }
    // dL/dS_w = −β·σ(−margin), dL/dS_l = +β·σ(−margin).
    let g = beta * sigmoid(-t.margin);
    let per = all[0].state.len();
    let ch = all[0].state.channels;
    let mut seed = Matrix::zeros(v.rows, v.cols);
    for (i, s) in all.iter().enumerate() {
        let (winner, m) = if i < ws.len() { (true, masks.map(|m| m.0)) } else { (false, masks.map(|m| m.1)) };
        let d_s = if winner { -g } else { g };
        let (c_v, _) = mean_coefficients(s.t, s.dt, s.sigma)?;
        let scale = d_s * c_v / (s.sigma * s.sigma);
        for k in 0..per {
            if m.is_some_and(|m| !m.cells[k / ch]) {
                continue;
            }
            seed.data[i * per + k] = scale * (s.action.data[k] - mt[i].data[k]);
        }
    }
    let grads = tape.backward(&[(out, &seed)], n_params);
    Ok((t, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(v: &[f64]) -> LatentGrid {
        LatentGrid::new(1, 2, v.len() / 2, v.to_vec())
    }

    #[test]
    fn identical_policies_have_zero_ratio() {
        let a = grid(&[0.3, -0.1, 0.7, 0.2]);
        let m = grid(&[0.1, 0.1, 0.5, 0.0]);
        let mask = LatentMask::from_rect(1, 2, super::super::LatentRect { x1: 1, y1: 0, x2: 2, y2: 1 });
        assert_eq!(masked_step_logratio(&a, &m, &m, 0.3, Some(&mask)).unwrap(), 0.0);
        assert_eq!(masked_step_logratio(&a, &m, &m, 0.3, None).unwrap(), 0.0);
    }

    #[test]
    fn mask_on_agreeing_cell_gives_zero() {
        // Means agree on cell 1 and differ on cell 0.
        let a = grid(&[0.3, -0.1, 0.7, 0.2]);
        let mt = grid(&[0.0, 0.0, 0.5, 0.1]);
        let mr = grid(&[1.0, -1.0, 0.5, 0.1]);
        let only1 = LatentMask::from_rect(1, 2, super::super::LatentRect { x1: 1, y1: 0, x2: 2, y2: 1 });
        assert_eq!(masked_step_logratio(&a, &mt, &mr, 0.5, Some(&only1)).unwrap(), 0.0);
        let full = masked_step_logratio(&a, &mt, &mr, 0.5, None).unwrap();
        assert_ne!(full, 0.0);
        let ones = LatentMask::all_ones(1, 2);
        assert_eq!(masked_step_logratio(&a, &mt, &mr, 0.5, Some(&ones)).unwrap(), full);
        // Equals the difference of Gaussian log-densities.
        let lp = |m: &LatentGrid| crate::sde::policy_logprob(&a.data, &m.data, 0.5).unwrap();
        assert!((full - (lp(&mt) - lp(&mr))).abs() < 1e-12);
    }

    #[test]
    fn loss_is_monotone_and_swap_symmetric() {
        let mut prev = f64::INFINITY;
        for w in [-2.0, -1.0, -0.1, 0.0, 0.3, 1.0, 4.0] {
            let t = terms(10.0, w, 0.25);
            assert!(t.loss < prev);
            prev = t.loss;
            let swapped = terms(10.0, 0.25, w);
            assert!((swapped.loss - softplus(t.margin)).abs() < 1e-12);
        }
        assert!((terms(10.0, 0.0, 0.0).loss - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
