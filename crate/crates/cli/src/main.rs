use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use alnp3::config::{sha256_file, RunConfig, RunManifest};
use alnp3::eval::{evaluate, EvalReport};
use alnp3::gradsuite::{run_suite, LossKind, SuiteConfig};
use alnp3::report::render_markdown;
use alnp3::train::{ablate, train, AblationSummary, StepReport};
use alnp3::world::{make_dataset, Corpus, Split};
use alnp3::{Checkpoint, Model};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

const TRAIN_CORPUS: &str = "train.aln3";
const HELDOUT_CORPUS: &str = "heldout.aln3";
const CONFIG_FILE: &str = "config.txt";

#[derive(Parser)]
#[command(
    name = "alnp3",
    version,
    about = "Co-distillation of a toy driving stack and a language head"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and held-out corpora.
    Gen {
        #[command(flatten)]
        run: RunArgs,
        /// Training scene seeds, `A..B`.
        #[arg(long, value_parser = parse_seeds)]
        seeds: Option<Range<u64>>,
        /// Held-out scene seeds, `A..B`.
        #[arg(long, value_parser = parse_seeds)]
        heldout_seeds: Option<Range<u64>>,
        /// Agents per scene.
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write its checkpoint and step reports.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Directory written by `gen`; generated in memory when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Train without the alignment modules.
        #[arg(long)]
        no_align: bool,
    },
    /// Evaluate a checkpoint on a corpus file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Report file, e.g. `report.json`.
        #[arg(long)]
        out: PathBuf,
        /// Accepted for uniformity; evaluation uses no randomness.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train with and without alignment from the same seed and compare.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every loss gradient against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = SuiteConfig::default().cases_per_loss)]
        cases: usize,
        #[arg(long, default_value_t = SuiteConfig::default().coords_per_case)]
        coords: usize,
        /// Also write the full suite report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render evaluation and ablation JSON to markdown.
    Report {
        /// `report.json` files written by `eval`.
        #[arg(long = "eval")]
        evals: Vec<PathBuf>,
        /// `ablation.json` written by `ablate`.
        #[arg(long)]
        ablation: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Accepted for uniformity; rendering uses no randomness.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Print a step line every N steps (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{kv}`");
            };
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_seeds(s: &str) -> std::result::Result<Range<u64>, String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected A..B, got `{s}`"))?;
    let a: u64 = a
        .trim()
        .parse()
        .map_err(|_| format!("bad start in `{s}`"))?;
    let b: u64 = b.trim().parse().map_err(|_| format!("bad end in `{s}`"))?;
    if b <= a {
        return Err(format!("empty seed range `{s}`"));
    }
    Ok(a..b)
}

fn command_line() -> String {
    std::env::args().skip(1).collect::<Vec<_>>().join(" ")
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

/// Records an input file that lives outside the run directory under its
/// absolute path.
fn hash_input(manifest: &mut RunManifest, path: &Path) -> Result<()> {
    let abs = fs::canonicalize(path).with_context(|| format!("resolving {}", path.display()))?;
    manifest
        .corpus_hashes
        .insert(abs.display().to_string(), sha256_file(&abs)?);
    Ok(())
}

fn corpora(
    cfg: &RunConfig,
    dir: Option<&Path>,
    manifest: &mut RunManifest,
) -> Result<(Corpus, Corpus)> {
    match dir {
        Some(d) => {
            let (t, h) = (d.join(TRAIN_CORPUS), d.join(HELDOUT_CORPUS));
            let train = Corpus::load(&t).with_context(|| format!("loading {}", t.display()))?;
            let heldout = Corpus::load(&h).with_context(|| format!("loading {}", h.display()))?;
            hash_input(manifest, &t)?;
            hash_input(manifest, &h)?;
            Ok((train, heldout))
        }
        None => generate(cfg),
    }
}

fn generate(cfg: &RunConfig) -> Result<(Corpus, Corpus)> {
    let n = cfg.model.n_agents;
    let train = make_dataset(cfg.corpus.train_seeds(), n, Split::Train, cfg.world())?;
    let heldout = make_dataset(cfg.corpus.heldout_seeds(), n, Split::Test, cfg.world())?;
    Ok((train, heldout))
}

struct StepLog {
    out: BufWriter<fs::File>,
    every: usize,
    label: &'static str,
}

impl StepLog {
    fn create(path: &Path, every: usize, label: &'static str) -> Result<Self> {
        let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            out: BufWriter::new(f),
            every,
            label,
        })
    }

    fn record(&mut self, r: &StepReport) -> alnp3::Result<()> {
        serde_json::to_writer(&mut self.out, r)?;
        self.out.write_all(b"\n")?;
        if self.every > 0 && r.step.is_multiple_of(self.every) {
            eprintln!(
                "{}step {:>5}  total {:.4}  task {:.4}  lm {:.4}  p1a {:.4}  p2a {:.4}  p3a {:.4}  |g| {:.3}",
                self.label, r.step, r.total, r.task, r.lm, r.p1a, r.p2a, r.p3a, r.grad_norm
            );
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

fn save_checkpoint(
    model: &Model,
    dir: &Path,
    name: &str,
    manifest: &mut RunManifest,
) -> Result<()> {
    model.checkpoint()?.save(&dir.join(name))?;
    manifest.add_checkpoint(dir, name)?;
    Ok(())
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    Ok(())
}

fn cmd_gen(
    run: &RunArgs,
    seeds: Option<Range<u64>>,
    heldout_seeds: Option<Range<u64>>,
    agents: Option<usize>,
    out: &Path,
) -> Result<()> {
    let mut cfg = run.config()?;
    if let Some(r) = seeds {
        cfg.corpus.train_seed_start = r.start;
        cfg.corpus.train_scenes = r.end - r.start;
    }
    if let Some(r) = heldout_seeds {
        cfg.corpus.heldout_seed_start = r.start;
        cfg.corpus.heldout_scenes = r.end - r.start;
    }
    if let Some(n) = agents {
        cfg.model.n_agents = n;
    }
    cfg.validate()?;
    prepare_dir(out)?;
    let mut manifest = RunManifest::new(&command_line(), cfg.clone());
    let t0 = Instant::now();
    let (train, heldout) = generate(&cfg)?;
    manifest
        .timings
        .insert("generate".into(), t0.elapsed().as_secs_f64());
    train.save(&out.join(TRAIN_CORPUS))?;
    heldout.save(&out.join(HELDOUT_CORPUS))?;
    manifest.add_corpus(out, TRAIN_CORPUS)?;
    manifest.add_corpus(out, HELDOUT_CORPUS)?;
    train.write_jsonl(&out.join("train.jsonl"))?;
    heldout.write_jsonl(&out.join("heldout.jsonl"))?;
    write_config(&cfg, out)?;
    manifest.save(out)?;
    println!(
        "wrote {} training and {} held-out scenes to {}",
        train.scenes.len(),
        heldout.scenes.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(run: &RunArgs, corpus: Option<&Path>, out: &Path, no_align: bool) -> Result<()> {
    let mut cfg = run.config()?;
    if no_align {
        cfg.train.align_enabled = false;
    }
    prepare_dir(out)?;
    let mut manifest = RunManifest::new(&command_line(), cfg.clone());
    let (train_c, _) = corpora(&cfg, corpus, &mut manifest)?;

    let mut log = StepLog::create(&out.join("steps.jsonl"), run.log_every, "")?;
    let t0 = Instant::now();
    let model = train(&train_c, &cfg.model, &cfg.train, |r| log.record(r))?;
    manifest
        .timings
        .insert("train".into(), t0.elapsed().as_secs_f64());
    log.finish()?;

    save_checkpoint(&model, out, "model.ckpt", &mut manifest)?;
    write_config(&cfg, out)?;
    manifest.save(out)?;
    println!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, corpus: &Path, out: &Path) -> Result<()> {
    let model = Model::from_checkpoint(
        Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?,
    )?;
    let c = Corpus::load(corpus).with_context(|| format!("loading {}", corpus.display()))?;
    let report = evaluate(&model, &c)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_dir(parent)?;
    }
    write_json(out, &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_ablate(run: &RunArgs, corpus: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = run.config()?;
    prepare_dir(out)?;
    let mut manifest = RunManifest::new(&command_line(), cfg.clone());
    let (train_c, heldout) = corpora(&cfg, corpus, &mut manifest)?;

    let mut on_log = StepLog::create(&out.join("steps_align.jsonl"), run.log_every, "[align] ")?;
    let mut off_log = StepLog::create(
        &out.join("steps_no_align.jsonl"),
        run.log_every,
        "[no align] ",
    )?;
    let t0 = Instant::now();
    let (on, off) = ablate(&train_c, &heldout, &cfg.model, &cfg.train, |align, r| {
        if align {
            on_log.record(r)
        } else {
            off_log.record(r)
        }
    })?;
    manifest
        .timings
        .insert("ablate".into(), t0.elapsed().as_secs_f64());
    on_log.finish()?;
    off_log.finish()?;

    save_checkpoint(&on.model, out, "align.ckpt", &mut manifest)?;
    save_checkpoint(&off.model, out, "no_align.ckpt", &mut manifest)?;
    let summary = AblationSummary {
        config: cfg.train.clone(),
        align: on.summary(),
        no_align: off.summary(),
    };
    write_json(&out.join("ablation.json"), &summary)?;
    write_config(&cfg, out)?;
    manifest.save(out)?;
    print!("{}", render_markdown(&[], Some(&summary)));
    Ok(())
}

fn cmd_gradcheck(seed: u64, cases: usize, coords: usize, out: Option<&Path>) -> Result<bool> {
    let cfg = SuiteConfig {
        seed,
        cases_per_loss: cases,
        coords_per_case: coords,
        ..SuiteConfig::default()
    };
    let report = run_suite(&cfg)?;
    for loss in LossKind::ALL {
        let n = report.cases.iter().filter(|c| c.loss == loss).count();
        println!(
            "{:<16} {n:>3} cases  max rel err {:.3e}",
            loss.name(),
            report.max_rel_error(loss)
        );
    }
    for f in report.failures() {
        println!(
            "FAIL {} case {} (n_agents {}, scene {}): {} [{}] analytic {:.6e} numeric {:.6e} rel {:.3e}",
            f.loss.name(),
            f.case,
            f.n_agents,
            f.scene_seed,
            f.worst_param,
            f.worst_coord,
            f.analytic,
            f.numeric,
            f.max_rel_error
        );
    }
    println!(
        "{} cases in {:.2}s, tolerance {:e}: {}",
        report.cases.len(),
        report.seconds,
        cfg.tolerance,
        if report.passed() { "ok" } else { "FAILED" }
    );
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    Ok(report.passed())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_report(evals: &[PathBuf], ablation: Option<&Path>, out: &Path) -> Result<()> {
    if evals.is_empty() && ablation.is_none() {
        bail!("nothing to report: pass --eval and/or --ablation");
    }
    let mut labelled = Vec::new();
    for p in evals {
        let r: EvalReport = read_json(p)?;
        labelled.push((p.display().to_string(), r));
    }
    let summary: Option<AblationSummary> = ablation.map(read_json).transpose()?;
    let md = render_markdown(&labelled, summary.as_ref());
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_dir(parent)?;
    }
    fs::write(out, &md).with_context(|| format!("writing {}", out.display()))?;
    print!("{md}");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen {
            run,
            seeds,
            heldout_seeds,
            agents,
            out,
        } => cmd_gen(&run, seeds, heldout_seeds, agents, &out)?,
        Command::Train {
            run,
            corpus,
            out,
            no_align,
        } => cmd_train(&run, corpus.as_deref(), &out, no_align)?,
        Command::Eval {
            ckpt,
            corpus,
            out,
            seed: _,
        } => cmd_eval(&ckpt, &corpus, &out)?,
        Command::Ablate { run, corpus, out } => cmd_ablate(&run, corpus.as_deref(), &out)?,
        Command::Gradcheck {
            seed,
            cases,
            coords,
            out,
        } => return cmd_gradcheck(seed, cases, coords, out.as_deref()),
        Command::Report {
            evals,
            ablation,
            out,
            seed: _,
        } => cmd_report(&evals, ablation.as_deref(), &out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
