//! Template text for captions, prediction narration, planning explanations
//! and compositional questions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, EOS};
use super::{dist, Agent, AgentClass, Point, Scenario, Scene, Status};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Perception,
    Prediction,
    Planning,
}

impl Category {
    pub const ALL: [Category; 3] = [Self::Perception, Self::Prediction, Self::Planning];

    pub fn from_index(i: u8) -> Result<Self> {
        Self::ALL
            .get(i as usize)
            .copied()
            .ok_or_else(|| Error::contract(format!("unknown category {i}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSample {
    pub scene_seed: u64,
    pub category: Category,
    pub prompt_tokens: Vec<u32>,
    pub target_tokens: Vec<u32>,
    pub agent_id: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Hop {
    H0,
    H1,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QASample {
    pub scene_seed: u64,
    pub question_tokens: Vec<u32>,
    pub answer_tokens: Vec<u32>,
    pub hop: Hop,
}

const OCTANTS: [&str; 8] = [
    "front",
    "front left",
    "left",
    "back left",
    "back",
    "back right",
    "right",
    "front right",
];

/// Octant name of a vector in the ego frame (`x` forward, `y` left).
pub fn direction_word(v: Point) -> &'static str {
    let sector = (v[1].atan2(v[0]) / std::f64::consts::FRAC_PI_4).round() as i64;
    OCTANTS[sector.rem_euclid(8) as usize]
}

fn meters(d: f64) -> u32 {
    d.round().max(0.0) as u32
}

fn with_eos(mut t: Vec<u32>) -> Vec<u32> {
    t.push(EOS);
    t
}

/// `"<class> about <d> meters <direction> is moving|not moving"`, measured
/// from the ego at the origin.
pub fn caption_agent(agent: &Agent) -> Vec<u32> {
    let p = agent.position();
    let status = match agent.status {
        Status::Moving => "moving",
        Status::Stopped => "not moving",
    };
    let text = format!(
        "{} about {} meters {} is {status}",
        agent.class.word(),
        meters(dist(p, [0.0, 0.0])),
        direction_word(p),
    );
    Vocab::get()
        .encode(&text)
        .expect("caption template words are in the vocabulary")
}

/// `"<class> will move <direction> about <d> meters"` or
/// `"<class> will stay still"`.
pub fn narrate_prediction(agent: &Agent) -> Vec<u32> {
    let end = *agent.future_gt.last().expect("nonempty future");
    let p = agent.position();
    let disp = [end[0] - p[0], end[1] - p[1]];
    let d = disp[0].hypot(disp[1]);
    let text = if agent.status == Status::Stopped || d < 0.5 {
        format!("{} will stay still", agent.class.word())
    } else {
        format!(
            "{} will move {} about {} meters",
            agent.class.word(),
            direction_word(disp),
            meters(d)
        )
    };
    Vocab::get()
        .encode(&text)
        .expect("narration template words are in the vocabulary")
}

pub fn plan_explanation(scene: &Scene) -> Vec<u32> {
    let end = *scene.ego_future_gt.last().expect("nonempty future");
    let d = meters(dist(end, scene.ego_position()));
    let text = match scene.scenario {
        Scenario::GoStraight => {
            format!("keep going straight about {d} meters because the road is clear")
        }
        Scenario::StopRedLight => format!("stop after {d} meters because the light is red"),
        Scenario::YieldPedestrian => format!("stop after {d} meters to yield to the pedestrian"),
    };
    Vocab::get()
        .encode(&text)
        .expect("planning template words are in the vocabulary")
}

pub fn prompt_for(category: Category, agent_id: Option<u32>) -> Result<Vec<u32>> {
    let v = Vocab::get();
    let text = match (category, agent_id) {
        (Category::Perception, Some(id)) => format!("describe object {id}"),
        (Category::Prediction, Some(id)) => format!("predict object {id}"),
        (Category::Planning, None) => "what should the ego do".to_string(),
        _ => {
            return Err(Error::contract(
                "agent id must be present exactly for perception and prediction prompts",
            ))
        }
    };
    v.encode(&text)
}

/// One caption and one narration per agent, then one planning explanation.
pub fn language_samples(scene: &Scene) -> Vec<LanguageSample> {
    let mut out = Vec::with_capacity(2 * scene.agents.len() + 1);
    for (category, text) in [
        (
            Category::Perception,
            caption_agent as fn(&Agent) -> Vec<u32>,
        ),
        (Category::Prediction, narrate_prediction),
    ] {
        for a in &scene.agents {
            out.push(LanguageSample {
                scene_seed: scene.seed,
                category,
                prompt_tokens: prompt_for(category, Some(a.id)).expect("valid prompt"),
                target_tokens: with_eos(text(a)),
                agent_id: Some(a.id),
            });
        }
    }
    out.push(LanguageSample {
        scene_seed: scene.seed,
        category: Category::Planning,
        prompt_tokens: prompt_for(Category::Planning, None).expect("valid prompt"),
        target_tokens: with_eos(plan_explanation(scene)),
        agent_id: None,
    });
    out
}

fn nearest(scene: &Scene) -> &Agent {
    let ego = scene.ego_position();
    scene
        .agents
        .iter()
        .min_by(|a, b| dist(a.position(), ego).total_cmp(&dist(b.position(), ego)))
        .expect("scene has agents")
}

/// Two zero-hop and two one-hop questions per scene.
pub fn qa_samples(scene: &Scene) -> Vec<QASample> {
    let v = Vocab::get();
    let enc = |s: &str| {
        v.encode(s)
            .expect("question template words are in the vocabulary")
    };
    let yes_no = |b: bool| if b { "yes" } else { "no" };

    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    rng.set_stream(7);
    let pick = |rng: &mut ChaCha8Rng| AgentClass::ALL[rng.random_range(0..4)];
    let count = |c: AgentClass| scene.agents.iter().filter(|a| a.class == c).count();

    let mut out = Vec::with_capacity(4);
    let mut push = |q: String, a: String, hop: Hop| {
        out.push(QASample {
            scene_seed: scene.seed,
            question_tokens: enc(&q),
            answer_tokens: with_eos(enc(&a)),
            hop,
        })
    };
    let c = pick(&mut rng);
    push(
        format!("is there a {}", c.word()),
        yes_no(count(c) > 0).into(),
        Hop::H0,
    );
    let c = pick(&mut rng);
    push(
        format!("how many {} are there", c.word()),
        count(c).to_string(),
        Hop::H0,
    );
    let near = nearest(scene);
    push(
        "what is the nearest object to the ego".into(),
        near.class.word().into(),
        Hop::H1,
    );
    push(
        "is the nearest object to the ego moving".into(),
        yes_no(near.status == Status::Moving).into(),
        Hop::H1,
    );
    out
}
