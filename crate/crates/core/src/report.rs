//! Markdown rendering of evaluation and ablation results.

use std::fmt::Write as _;

use crate::eval::EvalReport;
use crate::train::{AblationSummary, StepReport};

const METRIC_HEADER: &str =
    "| run | coll 1s | coll 2s | coll 3s | coll avg | BLEU-4 | QA H0 | QA H1 | QA All | consistency |\n\
     |---|---|---|---|---|---|---|---|---|---|\n";

fn metric_row(out: &mut String, label: &str, r: &EvalReport) {
    let c = &r.collision_rate;
    let q = &r.qa_acc;
    writeln!(
        out,
        "| {label} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
        c.s1, c.s2, c.s3, c.avg, r.bleu4, q.h0, q.h1, q.all, r.consistency
    )
    .expect("writing to a string");
}

fn loss_row(out: &mut String, label: &str, r: &StepReport) {
    writeln!(
        out,
        "| {label} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
        r.step, r.task, r.lm, r.p1a, r.p2a, r.p3a, r.total
    )
    .expect("writing to a string");
}

/// Renders labelled evaluation reports and an optional ablation pair.
pub fn render_markdown(
    evals: &[(String, EvalReport)],
    ablation: Option<&AblationSummary>,
) -> String {
    let mut out = String::from("# ALN-P3 report\n");
    if !evals.is_empty() {
        out.push_str("\n## Evaluation\n\n");
        out.push_str(METRIC_HEADER);
        for (label, r) in evals {
            metric_row(&mut out, label, r);
        }
    }
    if let Some(a) = ablation {
        out.push_str("\n## Alignment ablation\n\n");
        writeln!(
            out,
            "{} steps, lr {}, batch {}, seed {}.\n",
            a.config.steps, a.config.learning_rate, a.config.batch_scenes, a.config.seed
        )
        .expect("writing to a string");
        out.push_str(METRIC_HEADER);
        metric_row(&mut out, "untrained", &a.align.untrained);
        metric_row(&mut out, "align", &a.align.trained);
        metric_row(&mut out, "no align", &a.no_align.trained);

        let d = |on: f64, off: f64| on - off;
        let (on, off) = (&a.align.trained, &a.no_align.trained);
        out.push_str("\n| metric | align - no align |\n|---|---|\n");
        for (name, v) in [
            ("coll avg", d(on.collision_rate.avg, off.collision_rate.avg)),
            ("BLEU-4", d(on.bleu4, off.bleu4)),
            ("QA All", d(on.qa_acc.all, off.qa_acc.all)),
            ("consistency", d(on.consistency, off.consistency)),
        ] {
            writeln!(out, "| {name} | {v:+.4} |").expect("writing to a string");
        }

        out.push_str("\n| arm | step | task | lm | p1a | p2a | p3a | total |\n|---|---|---|---|---|---|---|---|\n");
        for (label, arm) in [("align", &a.align), ("no align", &a.no_align)] {
            for r in arm.first.iter().chain(&arm.last) {
                loss_row(&mut out, label, r);
            }
        }
    }
    out
}
