mod common;

use alnp3::align::{
    attention_pool, cosine, info_nce, p1a_loss, p2a_loss, p3a_loss, route, ActiveLosses,
    TextEmbedder,
};
use alnp3::autodiff::finite_diff_grad;
use alnp3::autodiff::gradcheck::relative_error;
use alnp3::nn::mlp;
use alnp3::objective::{scene_objective, Item, LossWeights};
use alnp3::world::Category;
use alnp3::{Graph, Session, Tensor};
use common::{model, model_without_align, orthogonal_matched_pair, planning_pair, scene_data};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn text_embedding_contract() {
    let e = TextEmbedder::new(60, 16);
    let a = e.embed(&[3, 9, 9, 40]).unwrap();
    assert_eq!(a.shape(), [1, 16]);
    assert!((norm(a.data()) - 1.0).abs() < 1e-12);

    let single = e.embed(&[7]).unwrap();
    let row = e.table().row(7);
    for (x, y) in single.data().iter().zip(row) {
        assert!((x - y / norm(row)).abs() < 1e-15);
    }

    let b = e.embed(&[40, 9, 3, 9]).unwrap();
    assert!(common::max_abs_diff(&a, &b) < 1e-15);

    assert!(e.embed(&[]).is_err());
    assert!(e.embed(&[60]).is_err());
    assert_eq!(TextEmbedder::new(60, 16), e);
}

fn pool(bank: Tensor, proj: Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let b = g.constant(bank);
    let p = g.constant(proj);
    let out = attention_pool(&mut g, b, p).unwrap();
    (g.value(out.output).clone(), g.value(out.weights).clone())
}

#[test]
fn pooling_examples() {
    let (out, _) = pool(
        Tensor::identity(2),
        Tensor::from_rows(&[vec![3f64.ln(), 0.0]]).unwrap(),
    );
    assert!((out.data()[0] - 0.75).abs() < 1e-15);
    assert!((out.data()[1] - 0.25).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w1 = Tensor::randn(&[1, 5], 1.0, &mut rng);
    let (out, _) = pool(w1.clone(), Tensor::randn(&[3, 5], 4.0, &mut rng));
    for r in 0..3 {
        assert_eq!(out.row(r), w1.row(0));
    }

    let bank = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let (out, _) = pool(bank.clone(), Tensor::zeros(&[1, 3]));
    for c in 0..3 {
        let mean = (0..4).map(|r| bank.at(r, c)).sum::<f64>() / 4.0;
        assert!((out.at(0, c) - mean).abs() < 1e-15);
    }

    let mut g = Graph::new();
    let b = g.constant(Tensor::zeros(&[4, 3]));
    let p = g.constant(Tensor::zeros(&[1, 2]));
    assert!(attention_pool(&mut g, b, p).is_err());
}

proptest! {
    #[test]
    fn pooled_rows_are_convex_combinations(seed in any::<u64>(), n in 1usize..10, d in 1usize..8, rows in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = Tensor::randn(&[n, d], 1.0, &mut rng);
        let proj = Tensor::randn(&[rows, d], 3.0, &mut rng);
        let (out, w) = pool(bank.clone(), proj);
        for r in 0..rows {
            let a = w.row(r);
            prop_assert!(a.iter().all(|&x| x >= 0.0));
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for c in 0..d {
                let rec: f64 = (0..n).map(|i| a[i] * bank.at(i, c)).sum();
                prop_assert!((rec - out.at(r, c)).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn p1a_is_element_mean_squared_error() {
    let m = model(3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = Tensor::randn(&[3, 32], 1.0, &mut rng);

    let mut s = Session::new(&m.params);
    let qv = s.constant(q.clone());
    let out = mlp(&mut s, qv, "align.phi_p1").unwrap();
    let pred = s.value(out).clone();

    let exact = p1a_loss(&mut s, qv, &pred).unwrap();
    assert_eq!(s.value(exact).item(), 0.0);
    let shifted = pred.map(|v| v + 1.0);
    let one = p1a_loss(&mut s, qv, &shifted).unwrap();
    assert!((s.value(one).item() - 1.0).abs() < 1e-12);
    assert!(p1a_loss(&mut s, qv, &Tensor::zeros(&[2, 32])).is_err());
}

#[test]
fn p1a_gradient_wrt_instance_tokens() {
    let m = model(2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = Tensor::randn(&[2, 32], 1.0, &mut rng);
    let targets = Tensor::randn(&[2, 32], 0.2, &mut rng);

    let mut s = Session::new(&m.params);
    let qv = s.g.param(q.clone());
    let l = p1a_loss(&mut s, qv, &targets).unwrap();
    let analytic = s.g.backward(l).unwrap().grad(qv);
    let numeric = finite_diff_grad(
        |x| {
            let mut s = Session::inference(&m.params);
            let qv = s.constant(x.clone());
            let l = p1a_loss(&mut s, qv, &targets)?;
            Ok(s.value(l).item())
        },
        &q,
        1e-5,
    )
    .unwrap();
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        assert!(relative_error(*a, *n) <= 1e-5);
    }
}

fn nce(za: Tensor, zb: Tensor, tau: f64) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(za);
    let b = g.constant(zb);
    let l = info_nce(&mut g, a, b, tau).unwrap();
    g.value(l).item()
}

/// Symmetric InfoNCE computed with plain loops.
fn nce_oracle(za: &Tensor, zb: &Tensor, tau: f64) -> f64 {
    let n = za.rows();
    let unit = |v: &[f64]| {
        let k = norm(v) + 1e-12;
        v.iter().map(|x| x / k).collect::<Vec<_>>()
    };
    let a: Vec<Vec<f64>> = (0..n).map(|i| unit(za.row(i))).collect();
    let b: Vec<Vec<f64>> = (0..n).map(|i| unit(zb.row(i))).collect();
    let s = |i: usize, j: usize| a[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| s(i, j).exp()).sum();
        let col: f64 = (0..n).map(|j| s(j, i).exp()).sum();
        total += (row.ln() - s(i, i)) + (col.ln() - s(i, i));
    }
    total / (2 * n) as f64
}

proptest! {
    #[test]
    fn info_nce_matches_loop_oracle(seed in any::<u64>(), n in 1usize..6, tau in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let za = Tensor::randn(&[n, 4], 1.0, &mut rng);
        let zb = Tensor::randn(&[n, 4], 1.0, &mut rng);
        let got = nce(za.clone(), zb.clone(), tau);
        prop_assert!((got - nce_oracle(&za, &zb, tau)).abs() < 1e-9);
        prop_assert!(got >= 0.0);
    }
}

fn p2a_value(m: &alnp3::Model, v_agents: &Tensor, logits: &[Tensor], tau: f64) -> f64 {
    let mut s = Session::new(&m.params);
    let v = s.constant(v_agents.clone());
    let l: Vec<_> = logits.iter().map(|t| s.constant(t.clone())).collect();
    let loss = p2a_loss(&mut s, &m.cfg, v, &l, tau).unwrap();
    s.value(loss).item()
}

#[test]
fn p2a_orthogonal_matched_pair() {
    let (m, v, logits) = orthogonal_matched_pair();
    let want = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
    assert!((p2a_value(&m, &v, &logits, 1.0) - want).abs() < 1e-9);
}

#[test]
fn p2a_single_agent_is_zero() {
    let m = model(1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let v = Tensor::randn(&[1, 6, 2], 5.0, &mut rng);
        let l = vec![Tensor::randn(&[4, m.cfg.vocab], 1.0, &mut rng)];
        assert_eq!(p2a_value(&m, &v, &l, 0.07), 0.0);
    }
}

#[test]
fn p2a_joint_permutation_invariance() {
    let m = model(4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = Tensor::randn(&[4, 6, 2], 5.0, &mut rng);
    let logits: Vec<Tensor> = (0..4)
        .map(|i| Tensor::randn(&[3 + i, m.cfg.vocab], 2.0, &mut rng))
        .collect();
    let perm = [2, 0, 3, 1];
    let mut pv = Vec::new();
    for &p in &perm {
        pv.extend_from_slice(&v.data()[p * 12..(p + 1) * 12]);
    }
    let pv = Tensor::new(vec![4, 6, 2], pv).unwrap();
    let pl: Vec<Tensor> = perm.iter().map(|&p| logits[p].clone()).collect();
    let a = p2a_value(&m, &v, &logits, 0.07);
    let b = p2a_value(&m, &pv, &pl, 0.07);
    assert!((a - b).abs() <= 1e-12);
}

#[test]
fn p2a_contract_errors() {
    let m = model(2, 0);
    let mut s = Session::new(&m.params);
    let v = s.constant(Tensor::zeros(&[2, 6, 2]));
    let l = s.constant(Tensor::zeros(&[3, m.cfg.vocab]));
    assert!(p2a_loss(&mut s, &m.cfg, v, &[l], 0.07).is_err());
    assert!(p2a_loss(&mut s, &m.cfg, v, &[l, l], 0.0).is_err());
}

fn p3a_value(m: &alnp3::Model) -> f64 {
    let mut s = Session::new(&m.params);
    let v = s.constant(Tensor::zeros(&[6, 2]));
    let l = s.constant(Tensor::zeros(&[4, m.cfg.vocab]));
    let loss = p3a_loss(&mut s, &m.cfg, v, l).unwrap();
    s.value(loss).item()
}

#[test]
fn p3a_colinear_orthogonal_antiparallel() {
    assert!((p3a_value(&planning_pair([1.0, 0.0], [1.0, 0.0])) + 1.0).abs() < 1e-9);
    assert!(p3a_value(&planning_pair([1.0, 0.0], [0.0, 1.0])).abs() < 1e-9);
    assert!((p3a_value(&planning_pair([1.0, 0.0], [-1.0, 0.0])) - 1.0).abs() < 1e-9);
}

#[test]
fn cosine_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let a = Tensor::randn(&[1, 16], 1.0, &mut rng);
        let b = Tensor::randn(&[1, 16], 1.0, &mut rng);
        let cos = |a: &Tensor, b: &Tensor| {
            let mut g = Graph::new();
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            let c = cosine(&mut g, x, y).unwrap();
            g.value(c).item()
        };
        let base = cos(&a, &b);
        assert!((-1.0..=1.0).contains(&base));
        for c in [0.5, 2.0, 10.0] {
            assert!((cos(&a.map(|v| v * c), &b) - base).abs() <= 1e-9);
            assert!((cos(&a, &b.map(|v| v * c)) - base).abs() <= 1e-9);
        }
    }
}

#[test]
fn route_table() {
    let only = |p1a, p2a, p3a| ActiveLosses { p1a, p2a, p3a };
    assert_eq!(route(Category::Perception), only(true, false, false));
    assert_eq!(route(Category::Prediction), only(false, true, false));
    assert_eq!(route(Category::Planning), only(false, false, true));
    assert!(Category::from_index(3).is_err());
}

fn nonzero(g: &std::collections::BTreeMap<String, Tensor>, prefix: &str) -> bool {
    g.iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .any(|(_, t)| t.data().iter().any(|&v| v != 0.0))
}

/// Gradient of the routed scene objective on each alignment module.
fn alignment_gradients(item: Item) -> (bool, bool, bool, alnp3::objective::LossValues) {
    let m = model(4, 21);
    let d = scene_data(&m, 33);
    let mut s = Session::new(&m.params);
    let obj = scene_objective(&mut s, &m, &d, item, &LossWeights::default(), 0.07).unwrap();
    let g = s.gradients(obj.total).unwrap();
    (
        nonzero(&g, "align.phi_p1"),
        nonzero(&g, "align.p2") || nonzero(&g, "align.phi_pred") || nonzero(&g, "align.phi_llm2"),
        nonzero(&g, "align.p3") || nonzero(&g, "align.phi_plan") || nonzero(&g, "align.phi_llm3"),
        obj.values(&s),
    )
}

#[test]
fn routing_perception_trains_only_p1a() {
    let (p1, p2, p3, v) = alignment_gradients(Item::Perception(1));
    assert!(p1 && !p2 && !p3);
    assert!(v.p1a > 0.0 && v.p2a == 0.0 && v.p3a == 0.0);
}

#[test]
fn routing_prediction_trains_only_p2a() {
    let (p1, p2, p3, v) = alignment_gradients(Item::Prediction);
    assert!(!p1 && p2 && !p3);
    assert!(v.p1a == 0.0 && v.p2a > 0.0 && v.p3a == 0.0);
}

#[test]
fn routing_planning_trains_only_p3a() {
    let (p1, p2, p3, v) = alignment_gradients(Item::Planning);
    assert!(!p1 && !p2 && p3);
    assert!(v.p1a == 0.0 && v.p2a == 0.0 && v.p3a != 0.0);
}

#[test]
fn routing_qa_trains_no_alignment() {
    let (p1, p2, p3, v) = alignment_gradients(Item::Qa(0));
    assert!(!p1 && !p2 && !p3);
    assert!(v.p1a == 0.0 && v.p2a == 0.0 && v.p3a == 0.0);
}

#[test]
fn objective_without_alignment_has_no_alignment_terms() {
    let m = model_without_align(2, 4);
    let d = scene_data(&m, 8);
    for item in [
        Item::Perception(0),
        Item::Prediction,
        Item::Planning,
        Item::Qa(1),
    ] {
        let mut s = Session::new(&m.params);
        let obj = scene_objective(&mut s, &m, &d, item, &LossWeights::default(), 0.07).unwrap();
        assert!(obj.p1a.is_none() && obj.p2a.is_none() && obj.p3a.is_none());
        let total = s.value(obj.total).item();
        let v = obj.values(&s);
        assert!((total - v.task - v.lm).abs() < 1e-12);
    }
}

#[test]
fn objective_total_recomposes_with_weights() {
    let m = model(2, 9);
    let d = scene_data(&m, 19);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for item in [
        Item::Perception(1),
        Item::Prediction,
        Item::Planning,
        Item::Qa(0),
    ] {
        let w = LossWeights {
            task: rng.random_range(0.1..2.0),
            lm: rng.random_range(0.1..2.0),
            p1a: rng.random_range(0.1..2.0),
            p2a: rng.random_range(0.1..2.0),
            p3a: rng.random_range(0.1..2.0),
        };
        let mut s = Session::new(&m.params);
        let obj = scene_objective(&mut s, &m, &d, item, &w, 0.07).unwrap();
        let total = s.value(obj.total).item();
        assert!((total - obj.values(&s).total(&w)).abs() < 1e-9);
    }
}
