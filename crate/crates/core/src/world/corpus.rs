//! Scene corpora and their on-disk form.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! magic    b"ALN3"
//! version  u16
//! meta     u32 length + UTF-8 JSON (CorpusMeta)
//! scenes   u32 count, then count x (u32 length + scene record)
//! language u32 count, then count x (u32 length + sample record)
//! qa       u32 count, then count x (u32 length + qa record)
//! ```

use std::io::{BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::language::{language_samples, qa_samples, Category, Hop, LanguageSample, QASample};
use super::{generate_scene, Agent, AgentClass, Point, Scenario, Scene, Status, WorldConfig};
use crate::error::{Error, Result};

pub const CORPUS_MAGIC: &[u8; 4] = b"ALN3";
pub const CORPUS_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::contract(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub split: Split,
    /// Half-open scene seed range.
    pub seeds: Range<u64>,
    pub n_agents: usize,
    pub world: WorldConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub scenes: Vec<Scene>,
    pub language: Vec<LanguageSample>,
    pub qa: Vec<QASample>,
}

/// Generates every scene in `seeds` with its language and QA samples.
pub fn make_dataset(
    seeds: Range<u64>,
    n_agents: usize,
    split: Split,
    world: &WorldConfig,
) -> Result<Corpus> {
    if seeds.is_empty() {
        return Err(Error::contract("empty seed range"));
    }
    let mut scenes = Vec::with_capacity((seeds.end - seeds.start) as usize);
    let mut language = Vec::new();
    let mut qa = Vec::new();
    for seed in seeds.clone() {
        let scene = generate_scene(seed, n_agents, world)?;
        language.extend(language_samples(&scene));
        qa.extend(qa_samples(&scene));
        scenes.push(scene);
    }
    Ok(Corpus {
        meta: CorpusMeta {
            split,
            seeds,
            n_agents,
            world: world.clone(),
        },
        scenes,
        language,
        qa,
    })
}

/// Rejects corpora whose seed ranges intersect.
pub fn ensure_disjoint(a: &CorpusMeta, b: &CorpusMeta) -> Result<()> {
    if a.seeds.start < b.seeds.end && b.seeds.start < a.seeds.end {
        return Err(Error::contract(format!(
            "{:?} seeds {:?} overlap {:?} seeds {:?}",
            a.split, a.seeds, b.split, b.seeds
        )));
    }
    Ok(())
}

impl Corpus {
    pub fn scene_index(&self, seed: u64) -> Option<usize> {
        self.scenes.iter().position(|s| s.seed == seed)
    }

    pub fn samples_for(&self, seed: u64) -> impl Iterator<Item = &LanguageSample> {
        self.language.iter().filter(move |s| s.scene_seed == seed)
    }

    pub fn qa_for(&self, seed: u64) -> impl Iterator<Item = &QASample> {
        self.qa.iter().filter(move |s| s.scene_seed == seed)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.write_all(CORPUS_MAGIC)?;
        out.write_u16::<LittleEndian>(CORPUS_VERSION)?;
        let meta = serde_json::to_string(&self.meta)?;
        write_bytes(&mut out, meta.as_bytes())?;

        let mut rec = Vec::new();
        out.write_u32::<LittleEndian>(self.scenes.len() as u32)?;
        for s in &self.scenes {
            rec.clear();
            write_scene(&mut rec, s)?;
            write_bytes(&mut out, &rec)?;
        }
        out.write_u32::<LittleEndian>(self.language.len() as u32)?;
        for s in &self.language {
            rec.clear();
            rec.write_u64::<LittleEndian>(s.scene_seed)?;
            rec.write_u8(s.category as u8)?;
            rec.write_i64::<LittleEndian>(s.agent_id.map_or(-1, i64::from))?;
            write_tokens(&mut rec, &s.prompt_tokens)?;
            write_tokens(&mut rec, &s.target_tokens)?;
            write_bytes(&mut out, &rec)?;
        }
        out.write_u32::<LittleEndian>(self.qa.len() as u32)?;
        for s in &self.qa {
            rec.clear();
            rec.write_u64::<LittleEndian>(s.scene_seed)?;
            rec.write_u8(s.hop as u8)?;
            write_tokens(&mut rec, &s.question_tokens)?;
            write_tokens(&mut rec, &s.answer_tokens)?;
            write_bytes(&mut out, &rec)?;
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CORPUS_MAGIC {
            return Err(Error::Format("bad corpus magic".into()));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != CORPUS_VERSION {
            return Err(Error::Format(format!(
                "unsupported corpus version {version}"
            )));
        }
        let meta: CorpusMeta = serde_json::from_slice(&read_bytes(r)?)?;

        let mut scenes = Vec::new();
        for _ in 0..r.read_u32::<LittleEndian>()? {
            let rec = read_bytes(r)?;
            let mut c = rec.as_slice();
            scenes.push(read_scene(&mut c, &meta.world)?);
            finished(c)?;
        }
        let mut language = Vec::new();
        for _ in 0..r.read_u32::<LittleEndian>()? {
            let rec = read_bytes(r)?;
            let mut c = rec.as_slice();
            let scene_seed = c.read_u64::<LittleEndian>()?;
            let category = Category::from_index(c.read_u8()?)?;
            let agent = c.read_i64::<LittleEndian>()?;
            let agent_id = if agent < 0 { None } else { Some(agent as u32) };
            let prompt_tokens = read_tokens(&mut c)?;
            let target_tokens = read_tokens(&mut c)?;
            finished(c)?;
            language.push(LanguageSample {
                scene_seed,
                category,
                prompt_tokens,
                target_tokens,
                agent_id,
            });
        }
        let mut qa = Vec::new();
        for _ in 0..r.read_u32::<LittleEndian>()? {
            let rec = read_bytes(r)?;
            let mut c = rec.as_slice();
            let scene_seed = c.read_u64::<LittleEndian>()?;
            let hop = match c.read_u8()? {
                0 => Hop::H0,
                1 => Hop::H1,
                h => return Err(Error::Format(format!("hop {h}"))),
            };
            let question_tokens = read_tokens(&mut c)?;
            let answer_tokens = read_tokens(&mut c)?;
            finished(c)?;
            qa.push(QASample {
                scene_seed,
                question_tokens,
                answer_tokens,
                hop,
            });
        }
        finished(r)?;
        Ok(Self {
            meta,
            scenes,
            language,
            qa,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the binary encoding, hex.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    /// One JSON object per line: the metadata, then scenes, language and QA
    /// records, each tagged with `"kind"`.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        #[serde(tag = "kind", rename_all = "snake_case")]
        enum Line<'a> {
            Meta(&'a CorpusMeta),
            Scene(&'a Scene),
            Language(&'a LanguageSample),
            Qa(&'a QASample),
        }
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let lines = std::iter::once(Line::Meta(&self.meta))
            .chain(self.scenes.iter().map(Line::Scene))
            .chain(self.language.iter().map(Line::Language))
            .chain(self.qa.iter().map(Line::Qa));
        for line in lines {
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn finished(rest: &[u8]) -> Result<()> {
    if rest.is_empty() {
        Ok(())
    } else {
        Err(Error::Format(format!(
            "{} unread bytes in record",
            rest.len()
        )))
    }
}

fn write_bytes(w: &mut Vec<u8>, b: &[u8]) -> Result<()> {
    w.write_u32::<LittleEndian>(b.len() as u32)?;
    w.write_all(b)?;
    Ok(())
}

fn read_bytes(r: &mut &[u8]) -> Result<Vec<u8>> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    if n > r.len() {
        return Err(Error::Format("record truncated".into()));
    }
    let (head, tail) = r.split_at(n);
    let out = head.to_vec();
    *r = tail;
    Ok(out)
}

fn write_tokens(w: &mut Vec<u8>, t: &[u32]) -> Result<()> {
    w.write_u32::<LittleEndian>(t.len() as u32)?;
    for &x in t {
        w.write_u32::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_tokens(r: &mut &[u8]) -> Result<Vec<u32>> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    if n > r.len() / 4 {
        return Err(Error::Format("token list truncated".into()));
    }
    let mut t = vec![0u32; n];
    r.read_u32_into::<LittleEndian>(&mut t)?;
    Ok(t)
}

fn write_points(w: &mut Vec<u8>, pts: &[Point]) -> Result<()> {
    for p in pts {
        w.write_f64::<LittleEndian>(p[0])?;
        w.write_f64::<LittleEndian>(p[1])?;
    }
    Ok(())
}

fn read_points(r: &mut &[u8], n: usize) -> Result<Vec<Point>> {
    (0..n)
        .map(|_| Ok([r.read_f64::<LittleEndian>()?, r.read_f64::<LittleEndian>()?]))
        .collect()
}

fn write_scene(w: &mut Vec<u8>, s: &Scene) -> Result<()> {
    w.write_u64::<LittleEndian>(s.seed)?;
    w.write_u8(s.scenario as u8)?;
    w.write_u32::<LittleEndian>(s.agents.len() as u32)?;
    for a in &s.agents {
        w.write_u32::<LittleEndian>(a.id)?;
        w.write_u8(a.class as u8)?;
        w.write_u8(a.status as u8)?;
        write_points(w, &a.past)?;
        write_points(w, &a.future_gt)?;
    }
    write_points(w, &s.ego_past)?;
    write_points(w, &s.ego_future_gt)?;
    w.write_u32::<LittleEndian>(s.lane.len() as u32)?;
    write_points(w, &s.lane)
}

fn read_scene(r: &mut &[u8], world: &WorldConfig) -> Result<Scene> {
    let (hp, hf) = (world.past_steps, world.future_steps);
    let seed = r.read_u64::<LittleEndian>()?;
    let scenario = Scenario::from_index(r.read_u8()?)?;
    let n = r.read_u32::<LittleEndian>()? as usize;
    if n > super::MAX_AGENTS {
        return Err(Error::Format(format!("{n} agents in scene {seed}")));
    }
    let mut agents = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r.read_u32::<LittleEndian>()?;
        let class = AgentClass::from_index(r.read_u8()?)?;
        let status = match r.read_u8()? {
            0 => Status::Moving,
            1 => Status::Stopped,
            s => return Err(Error::Format(format!("status {s}"))),
        };
        agents.push(Agent {
            id,
            class,
            status,
            past: read_points(r, hp)?,
            future_gt: read_points(r, hf)?,
        });
    }
    let ego_past = read_points(r, hp)?;
    let ego_future_gt = read_points(r, hf)?;
    let lane_n = r.read_u32::<LittleEndian>()? as usize;
    if lane_n > r.len() / 16 {
        return Err(Error::Format("lane truncated".into()));
    }
    let lane = read_points(r, lane_n)?;
    Ok(Scene {
        seed,
        scenario,
        agents,
        ego_past,
        ego_future_gt,
        lane,
    })
}
