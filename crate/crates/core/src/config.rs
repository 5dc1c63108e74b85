//! Flat `key = value` run configuration and the run manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use crate::world::{AgentClass, WorldConfig};

/// Which scene seeds make up the training and held-out corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusPlan {
    pub train_scenes: u64,
    pub heldout_scenes: u64,
    pub train_seed_start: u64,
    pub heldout_seed_start: u64,
}

impl Default for CorpusPlan {
    fn default() -> Self {
        Self {
            train_scenes: 64,
            heldout_scenes: 16,
            train_seed_start: 0,
            heldout_seed_start: 10_000,
        }
    }
}

impl CorpusPlan {
    pub fn train_seeds(&self) -> Range<u64> {
        self.train_seed_start..self.train_seed_start + self.train_scenes
    }

    pub fn heldout_seeds(&self) -> Range<u64> {
        self.heldout_seed_start..self.heldout_seed_start + self.heldout_scenes
    }
}

/// Everything a run depends on. `model.align` and `model.seed` are taken
/// from `train` when the model is built.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub corpus: CorpusPlan,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        key: key.into(),
        detail: format!("cannot parse `{value}`"),
    })
}

fn class_suffix(key: &str, prefix: &str) -> Option<usize> {
    let rest = key.strip_prefix(prefix)?;
    AgentClass::ALL
        .iter()
        .find(|c| c.word() == rest)
        .map(|c| c.index())
}

impl RunConfig {
    /// Assigns one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let m = &mut self.model;
        let c = &mut self.corpus;
        match key {
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "batch_scenes" => t.batch_scenes = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "align_enabled" => t.align_enabled = parse(key, value)?,
            "tau" => t.tau = parse(key, value)?,
            "grad_clip" => t.grad_clip = parse(key, value)?,
            "loss_weights.task" => t.loss_weights.task = parse(key, value)?,
            "loss_weights.lm" => t.loss_weights.lm = parse(key, value)?,
            "loss_weights.p1a" => t.loss_weights.p1a = parse(key, value)?,
            "loss_weights.p2a" => t.loss_weights.p2a = parse(key, value)?,
            "loss_weights.p3a" => t.loss_weights.p3a = parse(key, value)?,

            "n_agents" => m.n_agents = parse(key, value)?,
            "d_q" => m.d_q = parse(key, value)?,
            "d_l" => m.d_l = parse(key, value)?,
            "hidden" => m.hidden = parse(key, value)?,
            "pe_freqs" => m.pe_freqs = parse(key, value)?,
            "locality" => m.locality = parse(key, value)?,
            "offset_scale" => m.offset_scale = parse(key, value)?,
            "max_seq" => m.max_seq = parse(key, value)?,
            "dec_layers" => m.dec_layers = parse(key, value)?,
            "bank_tokens" => m.bank_tokens = parse(key, value)?,
            "bank_dim" => m.bank_dim = parse(key, value)?,
            "text_dim" => m.text_dim = parse(key, value)?,

            "grid" => m.world.grid = parse(key, value)?,
            "cell_size" => m.world.cell_size = parse(key, value)?,
            "past_steps" => m.world.past_steps = parse(key, value)?,
            "future_steps" => m.world.future_steps = parse(key, value)?,
            "dt" => m.world.dt = parse(key, value)?,
            "ego_radius" => m.world.ego_radius = parse(key, value)?,
            "plan_clearance" => m.world.plan_clearance = parse(key, value)?,
            "salt" => m.world.salt = parse(key, value)?,

            "train_scenes" => c.train_scenes = parse(key, value)?,
            "heldout_scenes" => c.heldout_scenes = parse(key, value)?,
            "train_seed_start" => c.train_seed_start = parse(key, value)?,
            "heldout_seed_start" => c.heldout_seed_start = parse(key, value)?,

            _ => {
                if let Some(i) = class_suffix(key, "v_max.") {
                    m.world.v_max[i] = parse(key, value)?;
                } else if let Some(i) = class_suffix(key, "radius.") {
                    m.world.radius[i] = parse(key, value)?;
                } else {
                    return Err(Error::Config {
                        key: key.into(),
                        detail: "unknown key".into(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let m = &self.model;
        let w = &m.world;
        let c = &self.corpus;
        let mut out: Vec<(String, String)> = vec![
            ("learning_rate".into(), t.learning_rate.to_string()),
            ("steps".into(), t.steps.to_string()),
            ("batch_scenes".into(), t.batch_scenes.to_string()),
            ("seed".into(), t.seed.to_string()),
            ("align_enabled".into(), t.align_enabled.to_string()),
            ("tau".into(), t.tau.to_string()),
            ("grad_clip".into(), t.grad_clip.to_string()),
            ("loss_weights.task".into(), t.loss_weights.task.to_string()),
            ("loss_weights.lm".into(), t.loss_weights.lm.to_string()),
            ("loss_weights.p1a".into(), t.loss_weights.p1a.to_string()),
            ("loss_weights.p2a".into(), t.loss_weights.p2a.to_string()),
            ("loss_weights.p3a".into(), t.loss_weights.p3a.to_string()),
            ("n_agents".into(), m.n_agents.to_string()),
            ("d_q".into(), m.d_q.to_string()),
            ("d_l".into(), m.d_l.to_string()),
            ("hidden".into(), m.hidden.to_string()),
            ("pe_freqs".into(), m.pe_freqs.to_string()),
            ("locality".into(), m.locality.to_string()),
            ("offset_scale".into(), m.offset_scale.to_string()),
            ("max_seq".into(), m.max_seq.to_string()),
            ("dec_layers".into(), m.dec_layers.to_string()),
            ("bank_tokens".into(), m.bank_tokens.to_string()),
            ("bank_dim".into(), m.bank_dim.to_string()),
            ("text_dim".into(), m.text_dim.to_string()),
            ("grid".into(), w.grid.to_string()),
            ("cell_size".into(), w.cell_size.to_string()),
            ("past_steps".into(), w.past_steps.to_string()),
            ("future_steps".into(), w.future_steps.to_string()),
            ("dt".into(), w.dt.to_string()),
        ];
        for class in AgentClass::ALL {
            out.push((
                format!("v_max.{}", class.word()),
                w.v_max_of(class).to_string(),
            ));
        }
        for class in AgentClass::ALL {
            out.push((
                format!("radius.{}", class.word()),
                w.radius_of(class).to_string(),
            ));
        }
        out.extend([
            ("ego_radius".into(), w.ego_radius.to_string()),
            ("plan_clearance".into(), w.plan_clearance.to_string()),
            ("salt".into(), w.salt.to_string()),
            ("train_scenes".into(), c.train_scenes.to_string()),
            ("heldout_scenes".into(), c.heldout_scenes.to_string()),
            ("train_seed_start".into(), c.train_seed_start.to_string()),
            (
                "heldout_seed_start".into(),
                c.heldout_seed_start.to_string(),
            ),
        ]);
        out
    }

    pub fn keys() -> Vec<String> {
        Self::default()
            .pairs()
            .into_iter()
            .map(|(k, _)| k)
            .collect()
    }

    /// Parses config text over the defaults. `#` starts a comment; blank
    /// lines are skipped; a key may appear once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.into(),
                detail: format!("line {} is not `key = value`", n + 1),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config {
                    key: k.into(),
                    detail: "given more than once".into(),
                });
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        if self.corpus.train_scenes == 0 || self.corpus.heldout_scenes == 0 {
            return Err(Error::Config {
                key: "train_scenes".into(),
                detail: "both corpora need at least one scene".into(),
            });
        }
        let (a, b) = (self.corpus.train_seeds(), self.corpus.heldout_seeds());
        if a.start < b.end && b.start < a.end {
            return Err(Error::Config {
                key: "heldout_seed_start".into(),
                detail: "held-out seeds overlap training seeds".into(),
            });
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            writeln!(s, "{k} = {v}").expect("writing to a string");
        }
        s
    }

    pub fn world(&self) -> &WorldConfig {
        &self.model.world
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance of a run directory. Hash maps are keyed by file name relative
/// to the directory holding the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config: RunConfig,
    pub corpus_hashes: BTreeMap<String, String>,
    pub checkpoint_hashes: BTreeMap<String, String>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: RunConfig) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            corpus_hashes: BTreeMap::new(),
            checkpoint_hashes: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn add_corpus(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.corpus_hashes
            .insert(name.into(), sha256_file(&dir.join(name))?);
        Ok(())
    }

    pub fn add_checkpoint(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.checkpoint_hashes
            .insert(name.into(), sha256_file(&dir.join(name))?);
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), s)?;
        Ok(())
    }

    /// Loads `dir/manifest.json` and checks every recorded hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        m.verify(dir)?;
        Ok(m)
    }

    pub fn verify(&self, dir: &Path) -> Result<()> {
        for (name, want) in self.corpus_hashes.iter().chain(&self.checkpoint_hashes) {
            let got = sha256_file(&dir.join(name))?;
            if &got != want {
                return Err(Error::Format(format!(
                    "{name}: hash {got} does not match manifest {want}"
                )));
            }
        }
        Ok(())
    }
}
