mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rico_core::ssm::{loss_and_param_gradients, loss_and_state_gradient, sequence_loss, ModelParams};

const STEP: f64 = 1e-5;

#[test]
fn loss_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let p = random_params(&mut rng);
        let len = rng.gen_range(2..=12);
        let toks = random_tokens(&mut rng, p.config.vocab_size, len);
        let init = random_state(&mut rng, &p, 0.3);
        let start = rng.gen_range(1..len);
        let got = sequence_loss(&p, &toks, Some(&init), start..len).unwrap().total;
        let want = oracle_loss(&p, &toks, Some(&init), start..len);
        assert!((got - want).abs() < 1e-10 * want.abs().max(1.0));
    }
}

#[test]
fn state_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..15 {
        let p = random_params(&mut rng);
        let len = rng.gen_range(2..=10);
        let toks = random_tokens(&mut rng, p.config.vocab_size, len);
        let init = random_state(&mut rng, &p, 0.3);
        let span = 1..len;
        let (_, g) = loss_and_state_gradient(&p, &toks, Some(&init), span.clone()).unwrap();
        let mut fd = Vec::new();
        for l in 0..init.num_layers() {
            for idx in 0..init.layer_slice(l).len() {
                let mut plus = init.clone();
                plus.layer_slice_mut(l)[idx] += STEP;
                let mut minus = init.clone();
                minus.layer_slice_mut(l)[idx] -= STEP;
                let lp = sequence_loss(&p, &toks, Some(&plus), span.clone()).unwrap().total;
                let lm = sequence_loss(&p, &toks, Some(&minus), span.clone()).unwrap().total;
                fd.push((lp - lm) / (2.0 * STEP));
            }
        }
        assert!(relative_error(&g.flatten(), &fd, 1e-8) <= 1e-5);
    }
}

#[test]
fn param_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..10 {
        let p = random_params(&mut rng);
        let len = rng.gen_range(2..=8);
        let toks = random_tokens(&mut rng, p.config.vocab_size, len);
        let init = random_state(&mut rng, &p, 0.3);
        let span = 1..len;
        let (_, g) = loss_and_param_gradients(&p, &toks, Some(&init), span.clone()).unwrap();
        let flat = p.tensors.to_flat();
        let eval = |v: &[f64]| {
            let mut t = p.tensors.clone();
            t.assign_flat(v).unwrap();
            let q = ModelParams::from_tensors(p.config.clone(), t).unwrap();
            sequence_loss(&q, &toks, Some(&init), span.clone()).unwrap().total
        };
        let fd: Vec<f64> = (0..flat.len())
            .map(|i| {
                let mut a = flat.clone();
                a[i] += STEP;
                let mut b = flat.clone();
                b[i] -= STEP;
                (eval(&a) - eval(&b)) / (2.0 * STEP)
            })
            .collect();
        assert!(relative_error(&g.to_flat(), &fd, 1e-8) <= 1e-5);
    }
}
