//! JSON artifacts written by the CLI and their markdown rendering.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flipflop::{FlipFlopComparison, FlipFlopReport};
use crate::metrics::ConfidenceInterval;
use crate::pipeline::{EvalReport, ExperimentResult, PruneTrace};
use crate::stability::StabilityReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Artifact {
    Experiment(ExperimentResult),
    Trace(PruneTrace),
    Eval(EvalReport),
    Stability(StabilityReport),
    FlipFlop(FlipFlopReport),
    FlipFlopComparison(FlipFlopComparison),
}

impl Artifact {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("artifact serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Artifact(format!("unrecognized artifact: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_markdown(&self) -> String {
        match self {
            Artifact::Experiment(e) => experiment_markdown(e),
            Artifact::Trace(t) => trace_markdown(t),
            Artifact::Eval(e) => eval_markdown(e),
            Artifact::Stability(s) => stability_markdown(s),
            Artifact::FlipFlop(f) => flip_flop_markdown(f),
            Artifact::FlipFlopComparison(c) => comparison_markdown(c),
        }
    }
}

fn ci(c: &ConfidenceInterval) -> String {
    format!("{:.4} [{:.4}, {:.4}]", c.point, c.lo, c.hi)
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{:.1}%", 100.0 * v))
}

pub fn experiment_markdown(e: &ExperimentResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "## Model comparison (test: {} entities, {} rows)\n", e.test_entities, e.test_rows);
    s.push_str("| Model | Training snapshots | Features | PR-AUC (95% CI) | Mean entity CV (95% CI) |\n");
    s.push_str("|---|---|---|---|---|\n");
    for r in &e.rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} |",
            r.name,
            r.training_snapshots,
            r.active_features,
            ci(&r.pr_auc),
            ci(&r.mean_entity_cv)
        );
    }
    let _ = writeln!(
        s,
        "\nPruning mode: {}. Pruned: {}.",
        e.mode,
        if e.pruned_features.is_empty() {
            "none".to_string()
        } else {
            e.pruned_features.join(", ")
        }
    );
    let _ = writeln!(
        s,
        "PR-AUC lift over multi-snapshot: {:+.4} ({:+.2}%). Mean entity CV change: {:+.2}%.\n",
        e.fortress_pr_auc_lift, e.fortress_pr_auc_lift_pct, e.fortress_cv_change_pct
    );
    s.push_str(&comparison_markdown(&e.flip_flop));
    s
}

pub fn trace_markdown(t: &PruneTrace) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "## Pruning trace ({}, epsilon {})\n\nInitial validation PR-AUC {:.4}, mean CV {:.4}.\n",
        t.mode, t.epsilon, t.initial_validation_pr_auc, t.initial_validation_cv
    );
    s.push_str("| Step | Candidate | Feature CV | Delta PR-AUC (95% CI) | Candidate CV | Decision | Active | CV after |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for it in &t.iterations {
        let _ = writeln!(
            s,
            "| {} | {} | {:.4} | {} | {:.4} | {} | {} | {:.4} |",
            it.step,
            it.candidate_feature,
            it.candidate_cv,
            ci(&it.delta_pr_auc),
            it.candidate_validation_cv,
            if it.accepted { "accept" } else { "reject" },
            it.feature_set_after.active_count(),
            it.validation_cv_after
        );
    }
    let _ = writeln!(
        s,
        "\nFinal validation PR-AUC {:.4} ({:+.4}), mean CV {:.4}. Kept {} of {} features.",
        t.final_validation_pr_auc,
        t.cumulative_delta_pr_auc,
        t.final_validation_cv,
        t.final_mask.active_count(),
        t.schema.len()
    );
    s
}

pub fn eval_markdown(e: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "## Evaluation\n\n{} rows, {} entities ({} with several snapshots), {} active features.\n",
        e.rows,
        e.entities,
        e.multi_snapshot_entities,
        e.active_features.len()
    );
    s.push_str("| Metric | Value (95% CI) |\n|---|---|\n");
    let _ = writeln!(s, "| PR-AUC | {} |", ci(&e.pr_auc));
    let _ = writeln!(s, "| Mean entity CV | {} |", ci(&e.mean_entity_cv));
    s
}

pub fn stability_markdown(r: &StabilityReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "## Stability\n\n{} entities scored, mean CV {:.4}. CV threshold at p{}: {:.4}, {} high-CV entities.\n",
        r.per_entity_cv.len(),
        r.mean_entity_cv(),
        r.percentile,
        r.cv_threshold,
        r.high_cv_entities.len()
    );
    s.push_str("| Rank | Feature | Aggregated CV | Contributors |\n|---|---|---|---|\n");
    for (i, f) in r.feature_cv_ranking.iter().enumerate() {
        let _ = writeln!(s, "| {} | {} | {:.4} | {} |", i + 1, f.feature, f.aggregated_cv, f.contributors);
    }
    s
}

pub fn flip_flop_markdown(f: &FlipFlopReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "## Flip-flop rate (tau {})\n", f.tau);
    s.push_str("| Region | Entities | Flip-flops | Rate |\n|---|---|---|---|\n");
    for (region, r) in &f.per_region {
        let _ = writeln!(s, "| {} | {} | {} | {} |", region, r.entities, r.flip_flops, pct(Some(r.rate)));
    }
    let _ = writeln!(
        s,
        "| all | {} | {} | {} |",
        f.global.entities,
        f.global.flip_flops,
        pct(Some(f.global.rate))
    );
    s
}

pub fn comparison_markdown(c: &FlipFlopComparison) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "## Flip-flop comparison (tau {})\n", c.base.tau);
    s.push_str("| Region | Base rate | Improved rate | Relative reduction |\n|---|---|---|---|\n");
    for (region, base) in &c.base.per_region {
        let improved = c.improved.per_region.get(region).map(|r| r.rate);
        let red = c.relative_reduction.per_region.get(region).copied().flatten();
        let _ = writeln!(s, "| {} | {} | {} | {} |", region, pct(Some(base.rate)), pct(improved), pct(red));
    }
    let _ = writeln!(
        s,
        "| all | {} | {} | {} |",
        pct(Some(c.base.global.rate)),
        pct(Some(c.improved.global.rate)),
        pct(c.relative_reduction.global)
    );
    let _ = writeln!(
        s,
        "\nRegions with lower flip-flop rate: {} of {}.",
        c.relative_reduction.regions_improved(),
        c.base.per_region.len()
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flipflop::RegionRate;
    use std::collections::BTreeMap;

    fn ff(rate: f64) -> FlipFlopReport {
        let r = RegionRate {
            entities: 10,
            flip_flops: (rate * 10.0) as usize,
            rate,
        };
        FlipFlopReport {
            tau: 0.5,
            dataset_fingerprint: "x".into(),
            per_region: BTreeMap::from([("r1".to_string(), r.clone())]),
            global: r,
        }
    }

    #[test]
    fn artifacts_round_trip_with_kind_tag() {
        let a = Artifact::FlipFlopComparison(FlipFlopComparison::new(ff(0.4), ff(0.2)).unwrap());
        let json = a.to_json();
        assert!(json.contains("\"kind\": \"flip_flop_comparison\""));
        assert_eq!(Artifact::from_json(&json).unwrap(), a);
        let md = a.to_markdown();
        assert!(md.contains("| r1 | 40.0% | 20.0% | 50.0% |"), "{md}");
        assert!(Artifact::from_json("{\"kind\": \"nope\"}").is_err());
    }
}
