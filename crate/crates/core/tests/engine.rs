mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rico_core::engine::{
    grad_score, grad_score_with, loo_with, mixture_state, optimize_weights, optimize_with, prop1_margin,
    prop1_margin_with, InitMode, MixtureWeights, ObjectiveKind, OptimizerConfig, SquaredErrorSurrogate, StateObjective,
};
use rico_core::ssm::{state_gradient, StateStack};
use rico_core::store::{precompute_states, DocumentRecord};
use rico_core::RankedList;

fn uniform_state(index: &rico_core::store::StateIndex) -> StateStack<f64> {
    let n = index.len() as f64;
    let mut acc = StateStack::zeros(index.num_layers(), index.state_dim(), index.embed_dim());
    for r in index.records() {
        acc.add_scaled(1.0 / n, &r.states.cast::<f64>()).unwrap();
    }
    acc
}

#[test]
fn one_step_gd_and_grad_score_rank_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..25 {
        let p = random_params(&mut rng);
        let count = rng.gen_range(3..10);
        let (index, _) = random_index(&mut rng, &p, count, 2);
        let qlen = rng.gen_range(2..8);
        let q = random_tokens(&mut rng, p.config.vocab_size, qlen);
        let scored = grad_score(&p, &index, &q, None, ObjectiveKind::Question, &InitMode::Uniform).unwrap();

        let g = state_gradient(&p, &q, Some(&uniform_state(&index)), 1..q.len()).unwrap();
        let eta = rng.gen_range(0.01..1.0);
        let n = index.len() as f64;
        let alpha = index.records().iter().map(|r| {
            let d = r.states.cast::<f64>().dot(&g).unwrap();
            (r.doc_id.clone(), 1.0 / n - eta * d)
        });
        let gd = RankedList::from_scores(alpha).unwrap();
        assert_eq!(scored.ranking.doc_ids(), gd.doc_ids());
        let ties = |r: &RankedList| -> Vec<bool> { r.entries().windows(2).map(|w| w[0].score == w[1].score).collect() };
        assert_eq!(ties(&scored.ranking), ties(&gd));
    }
}

#[test]
fn call_budgets() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let p = random_params(&mut rng);
    let (index, docs) = random_index(&mut rng, &p, 6, 0);
    let q = random_tokens(&mut rng, p.config.vocab_size, 5);
    let s = grad_score(&p, &index, &q, None, ObjectiveKind::Question, &InitMode::Zero).unwrap();
    assert_eq!((s.calls.forward, s.calls.backward), (1, 1));
    let ids: Vec<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect();
    let init = MixtureWeights::uniform(&ids).unwrap();
    for steps in [0, 1, 10] {
        let cfg = OptimizerConfig {
            steps,
            ..Default::default()
        };
        let (_, trace) = optimize_weights(&p, &index, &q, None, &init, &cfg).unwrap();
        assert_eq!(
            (trace.calls.forward, trace.calls.backward),
            (steps as u64, steps as u64)
        );
    }
}

#[test]
fn weights_stay_in_the_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..10 {
        let p = random_params(&mut rng);
        let (index, docs) = random_index(&mut rng, &p, 5, 0);
        let q = random_tokens(&mut rng, p.config.vocab_size, 6);
        let ids: Vec<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect();
        let cfg = OptimizerConfig {
            steps: 15,
            learning_rate: 5.0,
            ..Default::default()
        };
        let (w, trace) = optimize_weights(&p, &index, &q, None, &MixtureWeights::uniform(&ids).unwrap(), &cfg).unwrap();
        for step in &trace.steps {
            assert!(step.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
        }
        assert!(w.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
    }
}

#[test]
fn oracle_objective_scores_the_answer() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let p = random_params(&mut rng);
    let (index, _) = random_index(&mut rng, &p, 4, 0);
    let q = random_tokens(&mut rng, p.config.vocab_size, 4);
    let a = random_tokens(&mut rng, p.config.vocab_size, 2);
    let s = grad_score(&p, &index, &q, Some(&a), ObjectiveKind::Oracle, &InitMode::Uniform).unwrap();
    let mut full = q.clone();
    full.extend(&a);
    let want = oracle_loss(&p, &full, Some(&uniform_state(&index)), 4..6);
    assert!((s.loss - want).abs() < 1e-9);
    assert!(grad_score(&p, &index, &q, None, ObjectiveKind::Oracle, &InitMode::Uniform).is_err());
}

#[test]
fn permuting_the_index_permutes_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let p = random_params(&mut rng);
    let (index, mut docs) = random_index(&mut rng, &p, 7, 0);
    docs.reverse();
    let reversed = precompute_states(&p, &docs).unwrap();
    let q = random_tokens(&mut rng, p.config.vocab_size, 5);
    for init in [InitMode::Zero, InitMode::Uniform] {
        let a = grad_score(&p, &index, &q, None, ObjectiveKind::Question, &init).unwrap();
        let b = grad_score(&p, &reversed, &q, None, ObjectiveKind::Question, &init).unwrap();
        for e in a.ranking.entries() {
            let other = b.ranking.score_of(&e.doc_id).unwrap();
            assert!((e.score - other).abs() <= 1e-12 * e.score.abs().max(1.0));
        }
    }
}

#[test]
fn zero_state_document_has_no_effect() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let mut p = random_params(&mut rng);
    p.tensors.embedding.row_mut(0).fill(0.0);
    let docs = vec![
        DocumentRecord::new("blank", vec![0, 0, 0]),
        DocumentRecord::new("x", vec![1, 2, 3]),
        DocumentRecord::new("y", vec![2, 3]),
        DocumentRecord::new("y2", vec![2, 3]),
    ];
    let index = precompute_states(&p, &docs).unwrap();
    assert!(index.get("blank").unwrap().states.flatten().iter().all(|&v| v == 0.0));
    let q = [1u32, 2, 1, 3];
    let ids = ["blank", "x", "y", "y2"];
    let rows = prop1_margin(&p, &index, &q, None, ObjectiveKind::Question, &ids).unwrap();
    assert_eq!((rows[0].loo, rows[0].bound, rows[0].slack), (0.0, 0.0, 0.0));
    assert_eq!(rows[2].loo, rows[3].loo);
    assert_eq!(rows[2].bound, rows[3].bound);
    assert!(prop1_margin(&p, &index, &q, None, ObjectiveKind::Question, &ids[..1]).is_err());
}

#[test]
fn two_document_surrogate_by_hand() {
    // one layer, n = m = 1, so vec(h) is a scalar and L(h) = ½(a h − b)²
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut cfg = random_config(&mut rng);
    cfg.num_layers = 1;
    cfg.state_dim = 1;
    cfg.embed_dim = 1;
    let p = rico_core::ssm::ModelParams::<f64>::init(&cfg).unwrap();
    let docs = vec![DocumentRecord::new("a", vec![1, 2]), DocumentRecord::new("b", vec![3])];
    let index = precompute_states(&p, &docs).unwrap();
    let (a, b) = (1.7, -0.4);
    let sur = SquaredErrorSurrogate::new((1, 1, 1), vec![(0, ndarray::arr2(&[[a]]), ndarray::arr1(&[b]))]).unwrap();
    let h1 = index.get("a").unwrap().states.flatten()[0] as f64;
    let h2 = index.get("b").unwrap().states.flatten()[0] as f64;
    let l = |h: f64| 0.5 * (a * h - b) * (a * h - b);
    let base = l((h1 + h2) / 2.0);
    let loo = loo_with(&sur, &index, &["a", "b"]).unwrap();
    assert!((loo[0] - (base - l(h2 / 2.0))).abs() < 1e-12);
    assert!((loo[1] - (base - l(h1 / 2.0))).abs() < 1e-12);

    let rows = prop1_margin_with(&sur, &index, &["a", "b"]).unwrap();
    let g = a * (a * (h1 + h2) / 2.0 - b);
    assert!((rows[0].bound - h1 * g).abs() < 1e-12);
    assert!((rows[1].bound - h2 * g).abs() < 1e-12);
}

#[test]
fn tangent_bound_holds_on_convex_surrogate() {
    // convexity guarantees loo ≤ ⟨h_i, g⟩ / N
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    for _ in 0..30 {
        let p = random_params(&mut rng);
        let count = rng.gen_range(2..8);
        let (index, docs) = random_index(&mut rng, &p, count, 1);
        let sur = random_surrogate(&mut rng, &p, 5);
        let ids: Vec<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect();
        for r in prop1_margin_with(&sur, &index, &ids).unwrap() {
            assert!(r.scaled_bound - r.loo >= -1e-12, "{r:?}");
        }
    }
}

#[test]
fn unscaled_bound_can_fail_when_alignment_is_negative() {
    // two identical unit states, L(h) = ½(h − 5)²: ⟨h_i, g⟩ = −4 but loo = −2.125
    let mut cfg = rico_core::ssm::ModelConfig::new(3, 1, 1, 1);
    cfg.rng_seed = 0;
    let p = rico_core::ssm::ModelParams::<f64>::init(&cfg).unwrap();
    let docs = vec![DocumentRecord::new("a", vec![1]), DocumentRecord::new("b", vec![1])];
    let index = precompute_states(&p, &docs).unwrap();
    let h = index.get("a").unwrap().states.flatten()[0] as f64;
    assert!(h != 0.0);
    // scale so that A·h = 1
    let sur =
        SquaredErrorSurrogate::new((1, 1, 1), vec![(0, ndarray::arr2(&[[1.0 / h]]), ndarray::arr1(&[5.0]))]).unwrap();
    let rows = prop1_margin_with(&sur, &index, &["a", "b"]).unwrap();
    assert!((rows[0].bound + 4.0).abs() < 1e-9);
    assert!((rows[0].loo + 2.125).abs() < 1e-9);
    assert!(rows[0].slack < 0.0);
    assert!(rows[0].scaled_bound - rows[0].loo >= 0.0);
}

fn alpha_lipschitz(sur: &SquaredErrorSurrogate<f64>, index: &rico_core::store::StateIndex, ids: &[&str]) -> f64 {
    // power iteration on the α-Hessian, probed through the objective's gradient
    let k = ids.len();
    let grad_at = |alpha: &[f64]| -> Vec<f64> {
        let w = MixtureWeights {
            doc_ids: ids.iter().map(|s| s.to_string()).collect(),
            alpha: alpha.to_vec(),
        };
        let h = mixture_state::<f64>(index, &w).unwrap();
        let (_, g) = sur.loss_and_gradient(&h).unwrap();
        rico_core::engine::alpha_gradient(index, &w, &g).unwrap()
    };
    let g0 = grad_at(&vec![0.0; k]);
    let mut v = vec![1.0 / (k as f64).sqrt(); k];
    let mut lam = 0.0;
    for _ in 0..200 {
        let hv: Vec<f64> = grad_at(&v).iter().zip(&g0).map(|(a, b)| a - b).collect();
        lam = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if lam == 0.0 {
            break;
        }
        v = hv.iter().map(|x| x / lam).collect();
    }
    lam
}

#[test]
fn small_adamw_steps_reduce_the_convex_surrogate() {
    let mut rng = ChaCha8Rng::seed_from_u64(39);
    for _ in 0..20 {
        let p = random_params(&mut rng);
        let count = rng.gen_range(2..6);
        let (index, docs) = random_index(&mut rng, &p, count, 0);
        let sur = random_surrogate(&mut rng, &p, 4);
        let ids: Vec<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect();
        let lip = alpha_lipschitz(&sur, &index, &ids);
        let cfg = OptimizerConfig {
            steps: 10,
            learning_rate: 1.0 / (lip * ids.len() as f64).max(1e-12),
            ..Default::default()
        };
        let (_, trace) = optimize_with(&sur, &index, &MixtureWeights::uniform(&ids).unwrap(), &cfg).unwrap();
        // momentum can overshoot near the minimum, so only the net effect
        // and the first (sign-like) step are checked
        let losses = trace.losses();
        assert!(losses[1] <= losses[0] + 1e-12, "{losses:?}");
        assert!(losses[9] <= losses[0] + 1e-12, "{losses:?}");
    }
}

#[test]
fn custom_init_matches_explicit_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let p = random_params(&mut rng);
    let (index, docs) = random_index(&mut rng, &p, 4, 0);
    let sur = random_surrogate(&mut rng, &p, 3);
    let w = MixtureWeights::new(
        docs.iter().map(|d| d.doc_id.clone()).collect(),
        vec![0.2, 0.9, 0.0, 0.5],
    )
    .unwrap();
    let s = grad_score_with(&sur, &index, &InitMode::Custom(w.clone())).unwrap();
    let (_, g) = sur.loss_and_gradient(&mixture_state(&index, &w).unwrap()).unwrap();
    for r in index.records() {
        let want = -r.states.cast::<f64>().dot(&g).unwrap();
        assert!((s.ranking.score_of(&r.doc_id).unwrap() - want).abs() < 1e-12);
    }
}

/// Minimizer of `½αᵀGα − cᵀα` over `[0, 1]²` by enumerating the interior
/// stationary point, the four edges and the corners.
fn box_qp_2d(g: [[f64; 2]; 2], c: [f64; 2]) -> [f64; 2] {
    let f = |a: [f64; 2]| {
        0.5 * (g[0][0] * a[0] * a[0] + 2.0 * g[0][1] * a[0] * a[1] + g[1][1] * a[1] * a[1]) - c[0] * a[0] - c[1] * a[1]
    };
    let mut cands = vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]];
    let det = g[0][0] * g[1][1] - g[0][1] * g[0][1];
    if det.abs() > 1e-15 {
        cands.push([
            (c[0] * g[1][1] - c[1] * g[0][1]) / det,
            (c[1] * g[0][0] - c[0] * g[0][1]) / det,
        ]);
    }
    for fixed in [0.0, 1.0] {
        if g[1][1] > 0.0 {
            cands.push([fixed, ((c[1] - g[0][1] * fixed) / g[1][1]).clamp(0.0, 1.0)]);
        }
        if g[0][0] > 0.0 {
            cands.push([((c[0] - g[0][1] * fixed) / g[0][0]).clamp(0.0, 1.0), fixed]);
        }
    }
    cands
        .into_iter()
        .filter(|a| a.iter().all(|x| (0.0..=1.0).contains(x)))
        .min_by(|a, b| f(*a).total_cmp(&f(*b)))
        .unwrap()
}

#[test]
fn adamw_reaches_the_clamped_minimizer_for_two_documents() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut checked = 0;
    while checked < 20 {
        let p = random_params(&mut rng);
        let (index, docs) = random_index(&mut rng, &p, 2, 0);
        let sur = random_surrogate(&mut rng, &p, 4);
        let ids: Vec<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect();
        let loss = |a: [f64; 2]| {
            let w = MixtureWeights::new(ids.iter().map(|s| s.to_string()).collect(), a.to_vec()).unwrap();
            sur.loss(&mixture_state::<f64>(&index, &w).unwrap()).unwrap()
        };
        // exact quadratic coefficients from four evaluations
        let (l0, l1, l2, l12) = (loss([0.0, 0.0]), loss([1.0, 0.0]), loss([0.0, 1.0]), loss([1.0, 1.0]));
        let cross = l12 - l1 - l2 + l0;
        let scale = 4.0 * (l1 - 2.0 * loss([0.5, 0.0]) + l0);
        let scale2 = 4.0 * (l2 - 2.0 * loss([0.0, 0.5]) + l0);
        let g = [[scale, cross], [cross, scale2]];
        let c = [-(l1 - l0 - scale / 2.0), -(l2 - l0 - scale2 / 2.0)];
        let det = g[0][0] * g[1][1] - g[0][1] * g[0][1];
        let tr = g[0][0] + g[1][1];
        if tr <= 0.0 || det < 1e-2 * tr * tr {
            continue;
        }
        let target = box_qp_2d(g, c);
        let cfg = OptimizerConfig {
            steps: 4000,
            learning_rate: 0.01,
            ..Default::default()
        };
        let (w, _) = optimize_with(&sur, &index, &MixtureWeights::uniform(&ids).unwrap(), &cfg).unwrap();
        for (a, t) in w.alpha.iter().zip(target) {
            assert!((a - t).abs() <= 1e-3, "{:?} vs {target:?}", w.alpha);
        }
        checked += 1;
    }
}
