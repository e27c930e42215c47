//! Reference checks for the preference losses: finite differences, naive
//! softmax evaluation and algebraic identities on random inputs.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scialign::preference::{
    bt_probability, iee_loss, ipa_loss, kl_to_onehot, preference, total_loss, total_loss_with_grad, ScoredPair,
    TupleEmbeddings,
};

/// Two-class softmax written out with an explicit log-sum-exp.
fn softmax_first(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    let lse = m + ((a - m).exp() + (b - m).exp()).ln();
    (a - lse).exp()
}

fn random_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn bt_probability_matches_naive_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let (a, b) = (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
        assert!((bt_probability(a, b) - softmax_first(a, b)).abs() <= 1e-12);
        assert_eq!(bt_probability(a, b), preference(ScoredPair { reward_a: a, reward_b: b }));
    }
    assert!((bt_probability(1.0, 0.0) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
}

#[test]
fn kl_equals_negative_log_for_random_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let p: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
        // Full two-term KL with the 0·log 0 = 0 convention.
        let target = [1.0, 0.0];
        let pred = [p, 1.0 - p];
        let kl: f64 = (0..2)
            .filter(|&j| target[j] > 0.0)
            .map(|j| target[j] * (target[j] / pred[j]).ln())
            .sum();
        assert!((kl_to_onehot(0, pred) - kl).abs() < 1e-12);
        assert!((kl_to_onehot(0, pred) + p.ln()).abs() < 1e-12);
    }
}

#[test]
fn ipa_is_strictly_decreasing_in_the_margin() {
    let x = [1.0, 0.0];
    let mut prev = f64::INFINITY;
    for k in 0..=40 {
        let angle = std::f64::consts::PI * k as f64 / 40.0;
        // Explicit image rotates toward the prompt, superficial image fixed at 90°.
        let ye = [(std::f64::consts::PI - angle).cos(), (std::f64::consts::PI - angle).sin()];
        let ys = [0.0, 1.0];
        let l = ipa_loss(&x, &ye, &ys, 3.0).unwrap();
        assert!(l < prev, "step {k}: {l} !< {prev}");
        prev = l;
    }
    let big = ipa_loss(&[1.0, 0.0], &[1.0, 0.0], &[-1.0, 0.0], 30.0).unwrap();
    assert!(big <= 1.1e-12);
}

fn central_difference(f: &dyn Fn(&[Vec<f64>], f64) -> f64, vecs: &[Vec<f64>], log_t: f64) -> (Vec<Vec<f64>>, f64) {
    let h = 1e-5;
    let mut out = Vec::new();
    for (i, v) in vecs.iter().enumerate() {
        let mut g = vec![0.0; v.len()];
        for k in 0..v.len() {
            let mut plus = vecs.to_vec();
            let mut minus = vecs.to_vec();
            plus[i][k] += h;
            minus[i][k] -= h;
            g[k] = (f(&plus, log_t) - f(&minus, log_t)) / (2.0 * h);
        }
        out.push(g);
    }
    let gt = (f(vecs, log_t + h) - f(vecs, log_t - h)) / (2.0 * h);
    (out, gt)
}

fn emb(v: &[Vec<f64>]) -> TupleEmbeddings<'_> {
    TupleEmbeddings {
        implicit_prompt: &v[0],
        explicit_prompt: &v[1],
        superficial_prompt: &v[2],
        explicit_image: &v[3],
        superficial_image: &v[4],
    }
}

fn assert_close(a: f64, n: f64, what: &str) {
    let rel = (a - n).abs() / n.abs().max(1e-3);
    assert!(rel <= 1e-4, "{what}: analytic {a} numeric {n}");
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..20 {
        let vecs: Vec<Vec<f64>> = (0..5).map(|_| random_vec(&mut rng, 6)).collect();
        let log_t: f64 = rng.gen_range(0.0..2.5);
        for lambda in [0.0, 0.25, 0.75] {
            let f = |v: &[Vec<f64>], lt: f64| total_loss(&emb(v), lt.exp(), lambda).unwrap().total;
            let (_, g) = total_loss_with_grad(&emb(&vecs), log_t.exp(), lambda).unwrap();
            let (num, num_t) = central_difference(&f, &vecs, log_t);
            let analytic = [
                &g.implicit_prompt,
                &g.explicit_prompt,
                &g.superficial_prompt,
                &g.explicit_image,
                &g.superficial_image,
            ];
            for (i, (a, n)) in analytic.iter().zip(&num).enumerate() {
                for k in 0..a.len() {
                    assert_close(a[k], n[k], &format!("trial {trial} λ {lambda} vec {i}[{k}]"));
                }
            }
            assert_close(g.log_temperature, num_t, "log T");
        }
    }
}

#[test]
fn iee_terms_match_finite_differences_individually() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let vecs: Vec<Vec<f64>> = (0..5).map(|_| random_vec(&mut rng, 4)).collect();
    // λ-weighted part of the total isolates the image-side terms.
    let f = |v: &[Vec<f64>], lt: f64| {
        let (p, n) = iee_loss(&v[1], &v[2], &v[3], &v[4], lt.exp()).unwrap();
        p + n
    };
    let (_, g1) = total_loss_with_grad(&emb(&vecs), 2.0, 1.0).unwrap();
    let (_, g0) = total_loss_with_grad(&emb(&vecs), 2.0, 0.0).unwrap();
    let (num, _) = central_difference(&f, &vecs, 2f64.ln());
    let pairs = [
        (&g1.explicit_prompt, &g0.explicit_prompt, &num[1]),
        (&g1.superficial_prompt, &g0.superficial_prompt, &num[2]),
        (&g1.explicit_image, &g0.explicit_image, &num[3]),
        (&g1.superficial_image, &g0.superficial_image, &num[4]),
    ];
    for (with, without, n) in pairs {
        for k in 0..n.len() {
            assert_close(with[k] - without[k], n[k], "iee");
        }
    }
}

proptest! {
    #[test]
    fn preferences_are_complementary(a in -300.0f64..300.0, b in -300.0f64..300.0) {
        let p = preference(ScoredPair { reward_a: a, reward_b: b });
        let q = preference(ScoredPair { reward_a: b, reward_b: a });
        prop_assert!((p + q - 1.0).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn preference_is_shift_invariant(a in -50.0f64..50.0, b in -50.0f64..50.0, c in -500.0f64..500.0) {
        let p = preference(ScoredPair { reward_a: a, reward_b: b });
        let q = preference(ScoredPair { reward_a: a + c, reward_b: b + c });
        prop_assert!((p - q).abs() <= 1e-9);
    }

    #[test]
    fn zero_lambda_total_is_ipa(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vecs: Vec<Vec<f64>> = (0..5).map(|_| random_vec(&mut rng, 5)).collect();
        let terms = total_loss(&emb(&vecs), 4.0, 0.0).unwrap();
        prop_assert_eq!(terms.total, terms.ipa);
        prop_assert_eq!(terms.ipa, ipa_loss(&vecs[0], &vecs[3], &vecs[4], 4.0).unwrap());
        let weighted = total_loss(&emb(&vecs), 4.0, 0.5).unwrap();
        prop_assert!((weighted.total - (weighted.ipa + 0.5 * (weighted.iee_pos + weighted.iee_neg))).abs() < 1e-15);
        prop_assert!(weighted.ipa >= 0.0 && weighted.iee_pos >= 0.0 && weighted.iee_neg >= 0.0);
    }
}
