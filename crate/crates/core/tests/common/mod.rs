#![allow(dead_code)]

use alnp3::model::{Model, ModelConfig, SceneData};
use alnp3::world::{generate_scene, make_dataset, Corpus, Point, Scene, Split, WorldConfig};
use alnp3::Tensor;

pub fn model(n_agents: usize, seed: u64) -> Model {
    Model::new(ModelConfig {
        n_agents,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

pub fn model_without_align(n_agents: usize, seed: u64) -> Model {
    Model::new(ModelConfig {
        n_agents,
        seed,
        align: false,
        ..ModelConfig::default()
    })
    .unwrap()
}

pub fn scene_data(m: &Model, seed: u64) -> SceneData {
    let scene = generate_scene(seed, m.cfg.n_agents, &m.cfg.world).unwrap();
    SceneData::new(&scene, m).unwrap()
}

pub fn corpus(seeds: std::ops::Range<u64>, n_agents: usize, split: Split) -> Corpus {
    make_dataset(seeds, n_agents, split, &WorldConfig::default()).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Model whose `p2` and `p3` banks are both `bank`.
pub fn model_with_bank(n_agents: usize, bank: &Tensor) -> Model {
    let mut m = Model::new(ModelConfig {
        n_agents,
        bank_tokens: bank.rows(),
        bank_dim: bank.cols(),
        ..ModelConfig::default()
    })
    .unwrap();
    *m.params.get_mut("align.p2").unwrap() = bank.clone();
    *m.params.get_mut("align.p3").unwrap() = bank.clone();
    m
}

/// Overwrites a two-layer head: `l1.w` gets `pick` ones at `(row, 0)`,
/// `l2.w` row 0 becomes `out_row`, `l2.b` becomes `out_bias`; everything
/// else in the head is zeroed.
pub fn set_head(m: &mut Model, prefix: &str, pick: &[usize], out_row: &[f64], out_bias: &[f64]) {
    for suffix in ["l1.w", "l1.b", "l2.w", "l2.b"] {
        let t = m.params.get_mut(&format!("{prefix}.{suffix}")).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let l1 = m.params.get_mut(&format!("{prefix}.l1.w")).unwrap();
    let h = l1.cols();
    for &r in pick {
        l1.data_mut()[r * h] = 1.0;
    }
    let l2 = m.params.get_mut(&format!("{prefix}.l2.w")).unwrap();
    l2.data_mut()[..out_row.len()].copy_from_slice(out_row);
    m.params
        .get_mut(&format!("{prefix}.l2.b"))
        .unwrap()
        .data_mut()
        .copy_from_slice(out_bias);
}

/// Two agents whose prediction and answer embeddings pool to `e1` and `e2`
/// on both sides. Returns the model, `v_agents` `[2, 6, 2]` and the two
/// answer-logit tensors.
pub fn orthogonal_matched_pair() -> (Model, Tensor, Vec<Tensor>) {
    let mut m = model_with_bank(2, &Tensor::identity(2));
    let xs: Vec<usize> = (0..12).step_by(2).collect();
    set_head(
        &mut m,
        "align.phi_pred",
        &xs,
        &[1000.0, -1000.0],
        &[0.0, 0.0],
    );
    set_head(
        &mut m,
        "align.phi_llm2",
        &[3],
        &[1000.0, -1000.0],
        &[0.0, 0.0],
    );
    let mut v = vec![0.0; 24];
    for k in 0..6 {
        v[2 * k] = 5.0;
        v[12 + 2 * k] = -5.0;
    }
    let v_agents = Tensor::new(vec![2, 6, 2], v).unwrap();
    let vocab = m.cfg.vocab;
    let logits = [5.0, -5.0]
        .iter()
        .map(|&c| {
            let mut t = Tensor::zeros(&[3, vocab]);
            for r in 0..3 {
                t.data_mut()[r * vocab + 3] = c;
            }
            t
        })
        .collect();
    (m, v_agents, logits)
}

/// Bank rows `e1`, `e2`, `-e1`; plan and answer heads emit the constant
/// projections `plan` and `llm` (scaled so pooling saturates on one row).
pub fn planning_pair(plan: [f64; 2], llm: [f64; 2]) -> Model {
    let bank = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
    let mut m = model_with_bank(1, &bank);
    let s = 1000.0;
    set_head(
        &mut m,
        "align.phi_plan",
        &[],
        &[0.0, 0.0],
        &[s * plan[0], s * plan[1]],
    );
    set_head(
        &mut m,
        "align.phi_llm3",
        &[],
        &[0.0, 0.0],
        &[s * llm[0], s * llm[1]],
    );
    m
}

/// Brute force over every (horizon, scene, step, agent) quadruple.
pub fn collision_oracle(plans: &[Vec<Point>], scenes: &[Scene], w: &WorldConfig) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (h, steps) in [2usize, 4, 6].into_iter().enumerate() {
        let mut hit = 0;
        for (plan, scene) in plans.iter().zip(scenes) {
            let mut any = false;
            for (k, p) in plan.iter().enumerate().take(steps) {
                for a in &scene.agents {
                    let dx = p[0] - a.future_gt[k][0];
                    let dy = p[1] - a.future_gt[k][1];
                    let r = w.ego_radius + w.radius[a.class.index()];
                    if dx * dx + dy * dy <= r * r {
                        any = true;
                    }
                }
            }
            hit += any as usize;
        }
        out[h] = hit as f64 / scenes.len() as f64;
    }
    out
}
