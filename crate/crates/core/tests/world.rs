use alnp3::world::{
    caption_agent, corpus::ensure_disjoint, generate_scene, make_dataset, pooled_patches,
    render_bev, vocab_size, Agent, AgentClass, Category, Corpus, Hop, Scenario, Scene, Split,
    Status, Vocab, WorldConfig, EOS,
};
use alnp3::Error;
use proptest::prelude::*;

fn cfg() -> WorldConfig {
    WorldConfig::default()
}

fn still(class: AgentClass, pos: [f64; 2]) -> Agent {
    let c = cfg();
    Agent {
        id: 0,
        class,
        status: Status::Stopped,
        past: vec![pos; c.past_steps],
        future_gt: vec![pos; c.future_steps],
    }
}

fn bare_scene(agents: Vec<Agent>) -> Scene {
    let c = cfg();
    Scene {
        seed: 0,
        scenario: Scenario::GoStraight,
        agents,
        ego_past: vec![[0.0, 0.0]; c.past_steps],
        ego_future_gt: vec![[0.0, 0.0]; c.future_steps],
        lane: vec![],
    }
}

#[test]
fn same_seed_same_scene() {
    let a = generate_scene(7, 3, &cfg()).unwrap();
    let b = generate_scene(7, 3, &cfg()).unwrap();
    assert_eq!(
        serde_json::to_vec(&a).unwrap(),
        serde_json::to_vec(&b).unwrap()
    );
}

#[test]
fn different_seeds_differ() {
    let a = generate_scene(7, 3, &cfg()).unwrap();
    let b = generate_scene(8, 3, &cfg()).unwrap();
    let pos = |s: &Scene| s.agents.iter().map(|a| a.position()).collect::<Vec<_>>();
    assert_ne!(pos(&a), pos(&b));
}

#[test]
fn all_scenarios_occur() {
    let seen: Vec<Scenario> = (0..30)
        .map(|s| generate_scene(s, 2, &cfg()).unwrap().scenario)
        .collect();
    for sc in Scenario::ALL {
        assert!(seen.contains(&sc), "{sc:?} never generated");
    }
}

#[test]
fn yield_scene_has_crossing_pedestrian_ahead_of_stop() {
    let s = (0..50)
        .map(|k| generate_scene(k, 3, &cfg()).unwrap())
        .find(|s| s.scenario == Scenario::YieldPedestrian)
        .unwrap();
    let ped = &s.agents[0];
    assert_eq!(ped.class, AgentClass::Pedestrian);
    assert_eq!(ped.status, Status::Moving);
    assert!(ped.position()[0] > s.ego_future_gt.last().unwrap()[0]);
}

#[test]
fn empty_scene_renders_empty_occupancy() {
    let bev = render_bev(&bare_scene(vec![]), &cfg());
    assert_eq!(bev.shape(), &[32, 32, 4]);
    assert!(bev.data().iter().all(|&v| v == 0.0));
}

#[test]
fn stopped_agent_has_zero_velocity_cells() {
    let bev = render_bev(
        &bare_scene(vec![still(AgentClass::Truck, [5.3, -7.1])]),
        &cfg(),
    );
    let mut occupied = 0;
    for cell in bev.data().chunks(4) {
        if cell[0] == 1.0 {
            occupied += 1;
            assert_eq!((cell[2], cell[3]), (0.0, 0.0));
        }
    }
    assert!(occupied > 0);
}

#[test]
fn car_at_center_marks_exactly_its_footprint() {
    let c = cfg();
    // center of cell (16, 16): x,y in [0, 2)
    let pos = [1.0, 1.0];
    let mut car = still(AgentClass::Car, pos);
    car.status = Status::Moving;
    car.past = (0..c.past_steps)
        .map(|k| [pos[0] - 1.5 * (c.past_steps - 1 - k) as f64, pos[1]])
        .collect();
    let bev = render_bev(&bare_scene(vec![car]), &c);

    // independent oracle: a cell is covered when its square meets the open
    // square (pos - r, pos + r) on both axes
    let r = 1.0;
    for ix in 0..32 {
        for iy in 0..32 {
            let x0 = -32.0 + 2.0 * ix as f64;
            let y0 = -32.0 + 2.0 * iy as f64;
            let hit = x0 < pos[0] + r
                && x0 + 2.0 > pos[0] - r
                && y0 < pos[1] + r
                && y0 + 2.0 > pos[1] - r;
            let cell = &bev.data()[(ix * 32 + iy) * 4..(ix * 32 + iy) * 4 + 4];
            if hit {
                assert_eq!(cell[0], 1.0);
                assert!(cell[2] > 0.0, "vx should be positive");
                assert_eq!(cell[3], 0.0);
            } else {
                assert!(cell.iter().all(|&v| v == 0.0), "stray cell ({ix},{iy})");
            }
        }
    }
    let hits = bev.data().chunks(4).filter(|c| c[0] == 1.0).count();
    assert_eq!(hits, 1);
}

#[test]
fn agents_off_grid_are_clipped() {
    let bev = render_bev(
        &bare_scene(vec![still(AgentClass::Car, [100.0, 0.0])]),
        &cfg(),
    );
    assert!(bev.data().iter().all(|&v| v == 0.0));
    let bev = render_bev(
        &bare_scene(vec![still(AgentClass::Truck, [31.5, 31.5])]),
        &cfg(),
    );
    assert_eq!(bev.data().chunks(4).filter(|c| c[0] == 1.0).count(), 1);
}

#[test]
fn pooling_averages_sixteen_cells() {
    let bev = render_bev(
        &bare_scene(vec![still(AgentClass::Car, [1.0, 1.0])]),
        &cfg(),
    );
    let p = pooled_patches(&bev, &cfg());
    assert_eq!(p.shape(), &[64, 4]);
    // cell (16,16) lies in patch (4,4)
    assert_eq!(p.at(4 * 8 + 4, 0), 1.0 / 16.0);
    assert_eq!(p.data().iter().filter(|&&v| v != 0.0).count(), 2);
}

#[test]
fn caption_of_stopped_barrier_back_left() {
    let d = 12.0 / 2f64.sqrt();
    let toks = caption_agent(&still(AgentClass::Barrier, [-d, d]));
    assert_eq!(
        Vocab::get().decode(&toks).unwrap(),
        "barrier about 12 meters back left is not moving"
    );
    assert_eq!(toks, caption_agent(&still(AgentClass::Barrier, [-d, d])));
}

#[test]
fn caption_of_moving_car_in_front() {
    let mut car = still(AgentClass::Car, [20.0, 0.0]);
    car.status = Status::Moving;
    let expected: Vec<u32> = ["car", "about", "20", "meters", "front", "is", "moving"]
        .iter()
        .map(|w| Vocab::get().id(w).unwrap())
        .collect();
    assert_eq!(caption_agent(&car), expected);
}

#[test]
fn dataset_counts() {
    let c = make_dataset(0..10, 4, Split::Train, &cfg()).unwrap();
    let count = |cat| c.language.iter().filter(|s| s.category == cat).count();
    assert_eq!(count(Category::Perception), 40);
    assert_eq!(count(Category::Prediction), 40);
    assert_eq!(count(Category::Planning), 10);
    for s in &c.scenes {
        let hops: Vec<Hop> = c.qa_for(s.seed).map(|q| q.hop).collect();
        assert!(hops.iter().filter(|&&h| h == Hop::H0).count() >= 2);
        assert!(hops.iter().filter(|&&h| h == Hop::H1).count() >= 2);
    }
}

#[test]
fn samples_are_well_formed() {
    let c = make_dataset(20..30, 3, Split::Val, &cfg()).unwrap();
    let v = vocab_size() as u32;
    for s in &c.language {
        assert_eq!(*s.target_tokens.last().unwrap(), EOS);
        assert!(s
            .prompt_tokens
            .iter()
            .chain(&s.target_tokens)
            .all(|&t| t < v));
        let scene = &c.scenes[c.scene_index(s.scene_seed).unwrap()];
        match s.category {
            Category::Planning => assert!(s.agent_id.is_none()),
            _ => {
                let id = s.agent_id.unwrap();
                assert!(scene.agents.iter().any(|a| a.id == id));
            }
        }
    }
    for q in &c.qa {
        assert_eq!(*q.answer_tokens.last().unwrap(), EOS);
    }
}

#[test]
fn overlapping_splits_are_rejected() {
    let train = make_dataset(0..10, 2, Split::Train, &cfg()).unwrap();
    let val = make_dataset(5..12, 2, Split::Val, &cfg()).unwrap();
    let test = make_dataset(10..12, 2, Split::Test, &cfg()).unwrap();
    assert!(matches!(
        ensure_disjoint(&train.meta, &val.meta),
        Err(Error::Contract(_))
    ));
    ensure_disjoint(&train.meta, &test.meta).unwrap();
}

#[test]
fn corpus_round_trips_through_file() {
    let c = make_dataset(3..9, 4, Split::Train, &cfg()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.aln3");
    c.save(&path).unwrap();
    let back = Corpus::load(&path).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.hash().unwrap(), c.hash().unwrap());

    let jl = dir.path().join("c.jsonl");
    c.write_jsonl(&jl).unwrap();
    let text = std::fs::read_to_string(jl).unwrap();
    assert_eq!(
        text.lines().count(),
        1 + c.scenes.len() + c.language.len() + c.qa.len()
    );
    for line in text.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
}

#[test]
fn corrupt_corpus_is_rejected() {
    let bytes = make_dataset(0..2, 2, Split::Train, &cfg())
        .unwrap()
        .to_bytes()
        .unwrap();
    assert!(Corpus::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Corpus::from_bytes(&bad).is_err());
}

#[test]
fn corpus_bytes_are_seed_deterministic() {
    let a = make_dataset(40..46, 3, Split::Train, &cfg())
        .unwrap()
        .to_bytes()
        .unwrap();
    let b = make_dataset(40..46, 3, Split::Train, &cfg())
        .unwrap()
        .to_bytes()
        .unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trajectories_respect_speed_limits(seed in any::<u64>(), n in 1usize..=16) {
        let c = cfg();
        let s = generate_scene(seed, n, &c).unwrap();
        prop_assert_eq!(s.agents.len(), n);
        for a in &s.agents {
            let lim = c.v_max_of(a.class) * c.dt + 1e-9;
            let track: Vec<_> = a.past.iter().chain(&a.future_gt).collect();
            for w in track.windows(2) {
                prop_assert!(alnp3::world::dist(*w[0], *w[1]) <= lim);
            }
            if a.status == Status::Stopped {
                prop_assert!(a.future_gt.iter().all(|p| *p == a.position()));
            }
        }
        let ego_lim = c.v_max_of(AgentClass::Car) * c.dt + 1e-9;
        let ego: Vec<_> = s.ego_past.iter().chain(&s.ego_future_gt).collect();
        for w in ego.windows(2) {
            prop_assert!(alnp3::world::dist(*w[0], *w[1]) <= ego_lim);
        }
    }

    #[test]
    fn agents_start_without_overlap(seed in any::<u64>(), n in 2usize..=16) {
        let c = cfg();
        let s = generate_scene(seed, n, &c).unwrap();
        for (i, a) in s.agents.iter().enumerate() {
            for b in &s.agents[i + 1..] {
                let gap = c.radius_of(a.class) + c.radius_of(b.class);
                prop_assert!(alnp3::world::dist(a.position(), b.position()) >= gap);
            }
        }
    }

    #[test]
    fn stop_scenarios_end_with_zero_displacement(seed in any::<u64>()) {
        let s = generate_scene(seed, 2, &cfg()).unwrap();
        if s.scenario.is_stop() {
            let f = &s.ego_future_gt;
            prop_assert_eq!(f[f.len() - 1], f[f.len() - 2]);
        }
    }
}
