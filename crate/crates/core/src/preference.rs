//! Reward and preference losses, independent of any encoder.
//!
//! The reward of an (image, prompt) pair is the temperature-scaled cosine of
//! their embeddings. Two-way preferences are softmaxes over rewards, and each
//! loss is a KL divergence to a one-hot target, i.e. a negative log-probability.
//! Every loss comes with an analytic gradient with respect to the raw
//! embedding vectors and to `log T`.

use thiserror::Error;

/// Probabilities are clamped to `[CLAMP_EPS, 1 - CLAMP_EPS]` before taking logs.
pub const CLAMP_EPS: f64 = 1e-12;

/// Loss weight of the image-side terms used by default.
pub const DEFAULT_LAMBDA: f64 = 0.25;

/// Loss weights swept when studying the image-side terms.
pub const LAMBDA_SWEEP: [f64; 5] = [0.0, 0.1, 0.25, 0.5, 0.75];

#[derive(Debug, Error, PartialEq)]
pub enum PreferenceError {
    #[error("embedding has zero norm")]
    ZeroNorm,
    #[error("embedding dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("loss weight must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredPair {
    pub reward_a: f64,
    pub reward_b: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub ipa: f64,
    pub iee_pos: f64,
    pub iee_neg: f64,
    pub lambda_weight: f64,
    pub total: f64,
}

impl LossTerms {
    fn new(ipa: f64, iee_pos: f64, iee_neg: f64, lambda_weight: f64) -> Self {
        Self {
            ipa,
            iee_pos,
            iee_neg,
            lambda_weight,
            total: ipa + lambda_weight * (iee_pos + iee_neg),
        }
    }
}

/// Embeddings of one tuple: three prompts and two images.
#[derive(Clone, Copy, Debug)]
pub struct TupleEmbeddings<'a> {
    pub implicit_prompt: &'a [f64],
    pub explicit_prompt: &'a [f64],
    pub superficial_prompt: &'a [f64],
    pub explicit_image: &'a [f64],
    pub superficial_image: &'a [f64],
}

/// Gradient of a loss with respect to each embedding and to `log T`.
#[derive(Clone, Debug, PartialEq)]
pub struct TupleGrads {
    pub implicit_prompt: Vec<f64>,
    pub explicit_prompt: Vec<f64>,
    pub superficial_prompt: Vec<f64>,
    pub explicit_image: Vec<f64>,
    pub superficial_image: Vec<f64>,
    pub log_temperature: f64,
}

impl TupleGrads {
    fn zeros(d: usize) -> Self {
        Self {
            implicit_prompt: vec![0.0; d],
            explicit_prompt: vec![0.0; d],
            superficial_prompt: vec![0.0; d],
            explicit_image: vec![0.0; d],
            superficial_image: vec![0.0; d],
            log_temperature: 0.0,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_temperature(t: f64) -> Result<(), PreferenceError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(PreferenceError::BadTemperature(t))
    }
}

/// Cosine similarity and its gradients with respect to both arguments.
fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>), PreferenceError> {
    if a.len() != b.len() {
        return Err(PreferenceError::DimensionMismatch(a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(PreferenceError::ZeroNorm);
    }
    let c = dot(a, b) / (na * nb);
    let ga = a.iter().zip(b).map(|(x, y)| y / (na * nb) - c * x / (na * na)).collect();
    let gb = a.iter().zip(b).map(|(x, y)| x / (na * nb) - c * y / (nb * nb)).collect();
    Ok((c, ga, gb))
}

/// `T · cos(text_emb, img_emb)`.
pub fn reward(text_emb: &[f64], img_emb: &[f64], temperature: f64) -> Result<f64, PreferenceError> {
    check_temperature(temperature)?;
    if text_emb.len() != img_emb.len() {
        return Err(PreferenceError::DimensionMismatch(text_emb.len(), img_emb.len()));
    }
    let (nt, ni) = (norm(text_emb), norm(img_emb));
    if nt == 0.0 || ni == 0.0 {
        return Err(PreferenceError::ZeroNorm);
    }
    Ok(temperature * dot(text_emb, img_emb) / (nt * ni))
}

/// Logistic function, evaluated without overflow for any finite input.
fn logistic(d: f64) -> f64 {
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// Two-way softmax `exp(r_a) / (exp(r_a) + exp(r_b))`, stabilized by subtracting the max.
pub fn preference(pair: ScoredPair) -> f64 {
    logistic(pair.reward_a - pair.reward_b)
}

/// Bradley–Terry probability that the winner beats the loser. Identical to [`preference`].
pub fn bt_probability(r_w: f64, r_l: f64) -> f64 {
    preference(ScoredPair {
        reward_a: r_w,
        reward_b: r_l,
    })
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
}

/// KL divergence from a one-hot target to `predicted`, using `0 · log 0 = 0`.
pub fn kl_to_onehot(target_index: usize, predicted: [f64; 2]) -> f64 {
    assert!(target_index < 2, "target index must be 0 or 1");
    -clamp_prob(predicted[target_index]).ln()
}

/// `-log σ(d)` (clamped) and its derivative with respect to `d`.
fn nll_of_margin(d: f64) -> (f64, f64) {
    let p = logistic(d);
    let pc = clamp_prob(p);
    let grad = if p == pc { -(1.0 - p) } else { 0.0 };
    (-pc.ln(), grad)
}

/// Accumulates the gradient of `coef · T · cos(text, img)` into `gt`, `gi` and `glog_t`.
#[allow(clippy::too_many_arguments)]
fn push_reward_grad(
    text: &[f64],
    img: &[f64],
    t: f64,
    coef: f64,
    gt: &mut [f64],
    gi: &mut [f64],
    glog_t: &mut f64,
) -> Result<(), PreferenceError> {
    let (c, dc_dt, dc_di) = cosine_with_grad(text, img)?;
    for (g, d) in gt.iter_mut().zip(&dc_dt) {
        *g += coef * t * d;
    }
    for (g, d) in gi.iter_mut().zip(&dc_di) {
        *g += coef * t * d;
    }
    *glog_t += coef * t * c;
    Ok(())
}

/// `-log p̂(y_e ≻ y_s; x_i)`: the implicit prompt should score the explicit image higher.
pub fn ipa_loss(x_i: &[f64], y_e: &[f64], y_s: &[f64], temperature: f64) -> Result<f64, PreferenceError> {
    let d = reward(x_i, y_e, temperature)? - reward(x_i, y_s, temperature)?;
    Ok(kl_to_onehot(0, [logistic(d), 1.0 - logistic(d)]))
}

/// `(-log p̂(x_e ≻ x_s; y_e), -log p̂(x_s ≻ x_e; y_s))`: each image should prefer its own prompt.
pub fn iee_loss(
    x_e: &[f64],
    x_s: &[f64],
    y_e: &[f64],
    y_s: &[f64],
    temperature: f64,
) -> Result<(f64, f64), PreferenceError> {
    let d_pos = reward(x_e, y_e, temperature)? - reward(x_s, y_e, temperature)?;
    let d_neg = reward(x_s, y_s, temperature)? - reward(x_e, y_s, temperature)?;
    Ok((nll_of_margin(d_pos).0, nll_of_margin(d_neg).0))
}

/// `ipa + λ · (iee_pos + iee_neg)`.
pub fn total_loss(emb: &TupleEmbeddings, temperature: f64, lambda_weight: f64) -> Result<LossTerms, PreferenceError> {
    Ok(total_loss_with_grad(emb, temperature, lambda_weight)?.0)
}

/// [`total_loss`] together with its gradient.
pub fn total_loss_with_grad(
    emb: &TupleEmbeddings,
    temperature: f64,
    lambda_weight: f64,
) -> Result<(LossTerms, TupleGrads), PreferenceError> {
    if lambda_weight < 0.0 || !lambda_weight.is_finite() {
        return Err(PreferenceError::NegativeLambda(lambda_weight));
    }
    check_temperature(temperature)?;
    let d = emb.implicit_prompt.len();
    for v in [
        emb.explicit_prompt,
        emb.superficial_prompt,
        emb.explicit_image,
        emb.superficial_image,
    ] {
        if v.len() != d {
            return Err(PreferenceError::DimensionMismatch(d, v.len()));
        }
    }
    let t = temperature;
    let r = |a: &[f64], b: &[f64]| reward(a, b, t);

    let (ipa, g_ipa) = nll_of_margin(r(emb.implicit_prompt, emb.explicit_image)? - r(emb.implicit_prompt, emb.superficial_image)?);
    let (pos, g_pos) = nll_of_margin(r(emb.explicit_prompt, emb.explicit_image)? - r(emb.superficial_prompt, emb.explicit_image)?);
    let (neg, g_neg) = nll_of_margin(r(emb.superficial_prompt, emb.superficial_image)? - r(emb.explicit_prompt, emb.superficial_image)?);
    let terms = LossTerms::new(ipa, pos, neg, lambda_weight);
    if !terms.total.is_finite() {
        return Err(PreferenceError::NonFinite("total loss"));
    }

    let mut g = TupleGrads::zeros(d);
    let mut glt = 0.0;
    let l = lambda_weight;
    push_reward_grad(emb.implicit_prompt, emb.explicit_image, t, g_ipa, &mut g.implicit_prompt, &mut g.explicit_image, &mut glt)?;
    push_reward_grad(emb.implicit_prompt, emb.superficial_image, t, -g_ipa, &mut g.implicit_prompt, &mut g.superficial_image, &mut glt)?;
    if l > 0.0 {
        push_reward_grad(emb.explicit_prompt, emb.explicit_image, t, l * g_pos, &mut g.explicit_prompt, &mut g.explicit_image, &mut glt)?;
        push_reward_grad(emb.superficial_prompt, emb.explicit_image, t, -l * g_pos, &mut g.superficial_prompt, &mut g.explicit_image, &mut glt)?;
        push_reward_grad(emb.superficial_prompt, emb.superficial_image, t, l * g_neg, &mut g.superficial_prompt, &mut g.superficial_image, &mut glt)?;
        push_reward_grad(emb.explicit_prompt, emb.superficial_image, t, -l * g_neg, &mut g.explicit_prompt, &mut g.superficial_image, &mut glt)?;
    }
    g.log_temperature = glt;
    Ok((terms, g))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn reward_examples() {
        assert_eq!(reward(&[1.0, 0.0], &[1.0, 0.0], 1.0).unwrap(), 1.0);
        assert_eq!(reward(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap(), 0.0);
        let sixty = std::f64::consts::FRAC_PI_3;
        let r = reward(&[1.0, 0.0], &[sixty.cos(), sixty.sin()], 2.0).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        assert_eq!(reward(&[0.0, 0.0], &[1.0, 0.0], 1.0), Err(PreferenceError::ZeroNorm));
        assert!(matches!(reward(&[1.0], &[1.0], 0.0), Err(PreferenceError::BadTemperature(_))));
    }

    #[test]
    fn preference_examples() {
        assert_eq!(preference(ScoredPair { reward_a: 3.0, reward_b: 3.0 }), 0.5);
        let p = preference(ScoredPair { reward_a: 1.0, reward_b: 0.0 });
        assert!((p - 0.731_058_578_630_004_9).abs() < 1e-15);
        // Huge rewards would overflow a naive softmax.
        let p = preference(ScoredPair { reward_a: 1000.0, reward_b: 999.0 });
        assert!((p - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert_eq!(preference(ScoredPair { reward_a: -800.0, reward_b: 800.0 }), 0.0);
    }

    #[test]
    fn kl_examples() {
        assert!((kl_to_onehot(0, [0.5, 0.5]) - LN2).abs() < 1e-15);
        assert!(kl_to_onehot(0, [1.0 - 1e-15, 1e-15]) < 1e-11);
        assert!((kl_to_onehot(1, [1.0, 0.0]) + CLAMP_EPS.ln()).abs() < 1e-9);
    }

    #[test]
    fn equal_rewards_give_ln2_everywhere() {
        let v = [0.3, -0.4, 0.5];
        let emb = TupleEmbeddings {
            implicit_prompt: &v,
            explicit_prompt: &v,
            superficial_prompt: &v,
            explicit_image: &v,
            superficial_image: &v,
        };
        let terms = total_loss(&emb, 5.0, 0.25).unwrap();
        assert!((terms.ipa - LN2).abs() < 1e-15);
        assert!((terms.iee_pos - LN2).abs() < 1e-15);
        assert!((terms.iee_neg - LN2).abs() < 1e-15);
        assert!((terms.total - 1.5 * LN2).abs() < 1e-15);
        assert_eq!(total_loss(&emb, 5.0, 0.0).unwrap().total, terms.ipa);
        assert!(matches!(total_loss(&emb, 5.0, -0.1), Err(PreferenceError::NegativeLambda(_))));
    }

    #[test]
    fn swapping_images_swaps_saturation() {
        let (xe, xs) = ([1.0, 0.0], [0.0, 1.0]);
        let (ye, ys) = ([1.0, 0.05], [0.05, 1.0]);
        let (pos, neg) = iee_loss(&xe, &xs, &ye, &ys, 20.0).unwrap();
        assert!(pos < 1e-6 && neg < 1e-6);
        let (pos2, neg2) = iee_loss(&xe, &xs, &ys, &ye, 20.0).unwrap();
        assert!(pos2 > 10.0 && neg2 > 10.0);
    }
}
