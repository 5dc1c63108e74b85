//! Deterministic kinematic driving scenes and their templated language.
//!
//! Coordinates are ego-centric at the current time step: the ego sits at the
//! origin, `x` points forward and `y` points left. All positions are meters.

mod bev;
pub mod corpus;
mod language;
pub mod vocab;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bev::{
    cell_centers, class_code, patch_centers, pool_matrix, pooled_patches, render_bev, BEV_CHANNELS,
    PATCH,
};
pub use corpus::{ensure_disjoint, make_dataset, Corpus, CorpusMeta, Split};
pub use language::{
    caption_agent, direction_word, language_samples, narrate_prediction, plan_explanation,
    prompt_for, qa_samples, Category, Hop, LanguageSample, QASample,
};
pub use vocab::{vocab_size, Vocab, BOS, EOS, PAD};

pub type Point = [f64; 2];

pub const MAX_AGENTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentClass {
    Car,
    Truck,
    Pedestrian,
    Barrier,
}

impl AgentClass {
    pub const ALL: [AgentClass; 4] = [Self::Car, Self::Truck, Self::Pedestrian, Self::Barrier];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Result<Self> {
        Self::ALL
            .get(i as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("agent class {i}")))
    }

    pub fn word(self) -> &'static str {
        match self {
            Self::Car => "car",
            Self::Truck => "truck",
            Self::Pedestrian => "pedestrian",
            Self::Barrier => "barrier",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Moving,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    GoStraight,
    StopRedLight,
    YieldPedestrian,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Self::GoStraight, Self::StopRedLight, Self::YieldPedestrian];

    pub fn from_index(i: u8) -> Result<Self> {
        Self::ALL
            .get(i as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("scenario {i}")))
    }

    pub fn is_stop(self) -> bool {
        !matches!(self, Self::GoStraight)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: u32,
    pub class: AgentClass,
    pub status: Status,
    pub past: Vec<Point>,
    pub future_gt: Vec<Point>,
}

impl Agent {
    pub fn position(&self) -> Point {
        *self.past.last().expect("agent has a past")
    }

    /// Velocity over the last observed step, m/s.
    pub fn velocity(&self, dt: f64) -> Point {
        last_velocity(&self.past, dt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub scenario: Scenario,
    pub agents: Vec<Agent>,
    pub ego_past: Vec<Point>,
    pub ego_future_gt: Vec<Point>,
    pub lane: Vec<Point>,
}

impl Scene {
    pub fn ego_position(&self) -> Point {
        *self.ego_past.last().expect("ego has a past")
    }

    /// `[vx, vy, prev_vx, prev_vy]` from the last two observed steps.
    pub fn ego_status(&self, dt: f64) -> [f64; 4] {
        let v = last_velocity(&self.ego_past, dt);
        let n = self.ego_past.len();
        let p = if n >= 3 {
            last_velocity(&self.ego_past[..n - 1], dt)
        } else {
            v
        };
        [v[0], v[1], p[0], p[1]]
    }
}

fn last_velocity(track: &[Point], dt: f64) -> Point {
    let n = track.len();
    if n < 2 {
        return [0.0, 0.0];
    }
    let (a, b) = (track[n - 2], track[n - 1]);
    [(b[0] - a[0]) / dt, (b[1] - a[1]) / dt]
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// BEV cells per side.
    pub grid: usize,
    /// Cell edge, meters.
    pub cell_size: f64,
    pub past_steps: usize,
    pub future_steps: usize,
    /// Seconds per step.
    pub dt: f64,
    /// Per-class speed limit, m/s, indexed by [`AgentClass::index`].
    pub v_max: [f64; 4],
    /// Per-class disc radius, meters.
    pub radius: [f64; 4],
    pub ego_radius: f64,
    /// Extra gap kept between agents and the ground-truth ego plan.
    pub plan_clearance: f64,
    /// Mixed into every scene seed; 0 leaves seeds untouched.
    pub salt: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            grid: 32,
            cell_size: 2.0,
            past_steps: 4,
            future_steps: 6,
            dt: 0.5,
            v_max: [10.0, 8.0, 2.0, 0.0],
            radius: [1.0, 1.5, 0.3, 0.5],
            ego_radius: 1.0,
            plan_clearance: 3.0,
            salt: 0,
        }
    }
}

impl WorldConfig {
    /// Half the grid width, meters.
    pub fn extent(&self) -> f64 {
        self.grid as f64 * self.cell_size / 2.0
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn radius_of(&self, class: AgentClass) -> f64 {
        self.radius[class.index()]
    }

    pub fn v_max_of(&self, class: AgentClass) -> f64 {
        self.v_max[class.index()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || !self.grid.is_multiple_of(4) {
            return Err(Error::Config {
                key: "grid".into(),
                detail: "must be a positive multiple of 4".into(),
            });
        }
        if self.past_steps < 2 || self.future_steps == 0 {
            return Err(Error::Config {
                key: "past_steps".into(),
                detail: "need at least two past and one future step".into(),
            });
        }
        if !(self.dt > 0.0 && self.cell_size > 0.0) {
            return Err(Error::Config {
                key: "dt".into(),
                detail: "dt and cell_size must be positive".into(),
            });
        }
        Ok(())
    }
}

fn scene_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Constant-velocity track through `pos` at the current step.
fn linear_track(pos: Point, vel: Point, cfg: &WorldConfig) -> (Vec<Point>, Vec<Point>) {
    let at = |k: f64| [pos[0] + vel[0] * k * cfg.dt, pos[1] + vel[1] * k * cfg.dt];
    let past = (0..cfg.past_steps)
        .map(|k| at(k as f64 - (cfg.past_steps - 1) as f64))
        .collect();
    let future = (1..=cfg.future_steps).map(|k| at(k as f64)).collect();
    (past, future)
}

/// Ego past and future for a scenario.
fn ego_tracks(
    scenario: Scenario,
    rng: &mut ChaCha8Rng,
    cfg: &WorldConfig,
) -> (Vec<Point>, Vec<Point>) {
    match scenario {
        Scenario::GoStraight => {
            let v = rng.random_range(4.0..6.0);
            linear_track([0.0, 0.0], [v, 0.0], cfg)
        }
        Scenario::StopRedLight | Scenario::YieldPedestrian => {
            // constant deceleration reaching zero before the horizon ends
            let decel = 2.5;
            let v0 = rng.random_range(2.5..4.0);
            let mut future = Vec::with_capacity(cfg.future_steps);
            let mut x = 0.0;
            for k in 1..=cfg.future_steps {
                x += (v0 - decel * k as f64 * cfg.dt).max(0.0) * cfg.dt;
                future.push([x, 0.0]);
            }
            let mut past = vec![[0.0, 0.0]; cfg.past_steps];
            for j in (0..cfg.past_steps - 1).rev() {
                let back = cfg.past_steps - 2 - j;
                let step = (v0 + decel * back as f64 * cfg.dt) * cfg.dt;
                past[j] = [past[j + 1][0] - step, 0.0];
            }
            (past, future)
        }
    }
}

fn clear_of_plan(
    agent: &Agent,
    r: f64,
    ego_now: Point,
    ego_future: &[Point],
    cfg: &WorldConfig,
) -> bool {
    let gap = r + cfg.ego_radius + cfg.plan_clearance;
    dist(agent.position(), ego_now) >= gap
        && agent
            .future_gt
            .iter()
            .zip(ego_future)
            .all(|(&a, &e)| dist(a, e) >= gap)
}

fn random_agent(id: u32, rng: &mut ChaCha8Rng, cfg: &WorldConfig) -> Agent {
    let class = match rng.random_range(0..10) {
        0..=3 => AgentClass::Car,
        4..=5 => AgentClass::Truck,
        6..=7 => AgentClass::Pedestrian,
        _ => AgentClass::Barrier,
    };
    let lim = cfg.extent() - 4.0;
    let pos = [rng.random_range(-lim..lim), rng.random_range(-lim..lim)];
    let moving = class != AgentClass::Barrier && rng.random_bool(0.7);
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let speed = if moving {
        let vmax = cfg.v_max_of(class);
        rng.random_range(0.3 * vmax..0.8 * vmax)
    } else {
        0.0
    };
    let vel = [speed * heading.cos(), speed * heading.sin()];
    let (past, future_gt) = if moving {
        linear_track(pos, vel, cfg)
    } else {
        (vec![pos; cfg.past_steps], vec![pos; cfg.future_steps])
    };
    Agent {
        id,
        class,
        status: if moving {
            Status::Moving
        } else {
            Status::Stopped
        },
        past,
        future_gt,
    }
}

/// Builds the scene for `seed`. Identical arguments give bitwise-identical
/// scenes.
pub fn generate_scene(seed: u64, n_agents: usize, cfg: &WorldConfig) -> Result<Scene> {
    if !(1..=MAX_AGENTS).contains(&n_agents) {
        return Err(Error::contract(format!(
            "n_agents must be in 1..={MAX_AGENTS}, got {n_agents}"
        )));
    }
    cfg.validate()?;
    let mut rng = scene_rng(seed, cfg.salt);
    let scenario = Scenario::ALL[rng.random_range(0..3)];
    let (ego_past, ego_future_gt) = ego_tracks(scenario, &mut rng, cfg);
    let ego_now = *ego_past.last().expect("past_steps >= 2");

    let mut agents: Vec<Agent> = Vec::with_capacity(n_agents);
    if scenario == Scenario::YieldPedestrian {
        let stop_x = ego_future_gt.last().expect("future_steps >= 1")[0];
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let pos = [
            stop_x + rng.random_range(4.0..8.0),
            side * rng.random_range(2.5..5.0),
        ];
        let speed = rng.random_range(1.0..1.5);
        let (past, future_gt) = linear_track(pos, [0.0, -side * speed], cfg);
        agents.push(Agent {
            id: 0,
            class: AgentClass::Pedestrian,
            status: Status::Moving,
            past,
            future_gt,
        });
    }

    while agents.len() < n_agents {
        let id = agents.len() as u32;
        let mut placed = None;
        for _ in 0..10_000 {
            let cand = random_agent(id, &mut rng, cfg);
            let r = cfg.radius_of(cand.class);
            let apart = agents
                .iter()
                .all(|o| dist(o.position(), cand.position()) >= r + cfg.radius_of(o.class) + 0.5);
            if apart && clear_of_plan(&cand, r, ego_now, &ego_future_gt, cfg) {
                placed = Some(cand);
                break;
            }
        }
        agents.push(placed.ok_or_else(|| {
            Error::contract(format!("could not place agent {id} in scene {seed}"))
        })?);
    }

    let lane = (-2..=3).map(|k| [10.0 * k as f64, 0.0]).collect();
    Ok(Scene {
        seed,
        scenario,
        agents,
        ego_past,
        ego_future_gt,
        lane,
    })
}
