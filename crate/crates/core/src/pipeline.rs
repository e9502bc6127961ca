//! Grouping → conflict → subspace → decomposition plan, and the report
//! that records every input needed to reproduce it.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conflict::{conflict_report, ConflictConfig, ConflictError, ConflictReport, RatioThresholds};
use crate::decomposer::{DecomposeError, DecompositionPlan, PlanOptions};
use crate::gradbundle::{to_hex, BundleError, GradientBundle};
use crate::grouping::{consensus_group, ConsensusOutcome, GroupingError};
use crate::subspace::{group_energy, subspace_report, SubspaceConfig, SubspaceError, SubspaceReport};

pub const TOOL_NAME: &str = "gdps";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("plan: at least 2 tasks required, bundle has {0}")]
    TooFewTasks(usize),
    #[error("plan: {0}")]
    Invalid(String),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Grouping(#[from] GroupingError),
    #[error(transparent)]
    Conflict(#[from] ConflictError),
    #[error(transparent)]
    Subspace(#[from] SubspaceError),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
}

impl PipelineError {
    /// True for malformed inputs, false for failures inside the analysis.
    pub fn is_input_error(&self) -> bool {
        match self {
            PipelineError::TooFewTasks(_) | PipelineError::Invalid(_) | PipelineError::Bundle(_) => true,
            PipelineError::Grouping(e) => matches!(e, GroupingError::Bundle(_) | GroupingError::InvalidK { .. }),
            PipelineError::Conflict(e) => matches!(
                e,
                ConflictError::Bundle(_)
                    | ConflictError::TooFewTasks(_)
                    | ConflictError::TooFewSamples { .. }
                    | ConflictError::EmptyCandidates
                    | ConflictError::UnknownCandidate(_)
                    | ConflictError::Thresholds(_)
            ),
            PipelineError::Subspace(e) => matches!(e, SubspaceError::Bundle(_) | SubspaceError::InvalidK { .. }),
            PipelineError::Decompose(e) => matches!(e, DecomposeError::Plan(_) | DecomposeError::Bundle(_)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub k_groups: usize,
    pub thresholds: RatioThresholds,
    /// Layer used for grouping and subspace analysis. `None` picks the
    /// highest-conflict candidate.
    pub layer: Option<String>,
    /// Layers whose conflict is averaged into delta. Empty means all.
    pub candidates: Vec<String>,
    pub subspace: SubspaceConfig,
    pub conflict: ConflictConfig,
    pub seed: u64,
    pub d_model: usize,
    pub d_ff: usize,
    pub options: PlanOptions,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            k_groups: 2,
            thresholds: RatioThresholds::default(),
            layer: None,
            candidates: Vec::new(),
            subspace: SubspaceConfig::default(),
            conflict: ConflictConfig::default(),
            seed: crate::DEFAULT_SEED,
            d_model: 16,
            d_ff: 32,
            options: PlanOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub layer: String,
    pub grouping: ConsensusOutcome,
    pub conflict: ConflictReport,
    pub subspace: SubspaceReport,
    pub p_g: Vec<f64>,
    pub plan: DecompositionPlan,
    pub warnings: Vec<String>,
}

/// Runs grouping, conflict and subspace analysis and derives a plan.
pub fn run_plan(bundle: &GradientBundle, cfg: &PlanConfig) -> Result<PlanOutcome, PipelineError> {
    let n = bundle.tasks().len();
    if n < 2 {
        return Err(PipelineError::TooFewTasks(n));
    }
    let candidates = if cfg.candidates.is_empty() {
        bundle.layer_names()
    } else {
        for c in &cfg.candidates {
            if !bundle.has_layer(c) {
                return Err(PipelineError::Invalid(format!("candidate layer `{c}` is not in the bundle")));
            }
        }
        cfg.candidates.clone()
    };
    let conflict_cfg = ConflictConfig {
        seed: cfg.seed,
        ..cfg.conflict
    };
    let conflict = conflict_report(bundle, &candidates, &cfg.thresholds, &conflict_cfg)?;
    let layer = match &cfg.layer {
        Some(l) if bundle.has_layer(l) => l.clone(),
        Some(l) => return Err(PipelineError::Invalid(format!("layer `{l}` is not in the bundle"))),
        None => conflict.ranking[0].clone(),
    };
    let grouping = consensus_group(bundle, &layer, cfg.k_groups, cfg.seed)?;
    let subspace = subspace_report(bundle, &layer, &cfg.subspace)?;
    let p_g = group_energy(&subspace.proportions, &subspace.tasks, &grouping.plan)?;
    let opts = PlanOptions {
        seed: cfg.seed,
        ..cfg.options
    };
    let plan = DecompositionPlan::new(
        grouping.plan.clone(),
        conflict.shared_ratio,
        p_g.clone(),
        cfg.d_model,
        cfg.d_ff,
        opts,
    )?;
    let mut warnings = Vec::new();
    warnings.extend(grouping.warnings.iter().map(|w| format!("grouping: {w}")));
    warnings.extend(conflict.warnings.iter().map(|w| format!("conflict: {w}")));
    warnings.extend(subspace.warnings.iter().map(|w| format!("subspace: {w}")));
    Ok(PlanOutcome {
        layer,
        grouping,
        conflict,
        subspace,
        p_g,
        plan,
        warnings,
    })
}

/// Where a configuration value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Value stated in the published method.
    Published,
    /// Default chosen by this tool.
    ToolDefault,
    /// Set explicitly by the user.
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub name: String,
    pub value: serde_json::Value,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub tool: String,
    pub tool_version: String,
    /// Wall-clock creation time. The only field excluded from
    /// [`PipelineReport::content_hash`].
    pub generated_at: Option<String>,
    pub bundle_fingerprint: String,
    /// Flags exactly as passed, for re-running.
    pub flags: Vec<String>,
    pub settings: Vec<Setting>,
    pub outcome: PlanOutcome,
    pub warnings: Vec<String>,
}

impl PipelineReport {
    pub fn new(bundle: &GradientBundle, flags: Vec<String>, settings: Vec<Setting>, outcome: PlanOutcome) -> Self {
        Self {
            tool: TOOL_NAME.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            generated_at: None,
            bundle_fingerprint: bundle.fingerprint(),
            flags,
            settings,
            warnings: outcome.warnings.clone(),
            outcome,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// SHA-256 of the JSON form with `generated_at` cleared.
    pub fn content_hash(&self) -> String {
        let mut r = self.clone();
        r.generated_at = None;
        let mut h = Sha256::new();
        h.update(r.to_json().as_bytes());
        to_hex(&h.finalize())
    }

    pub fn to_markdown(&self) -> String {
        let o = &self.outcome;
        let c = &o.conflict;
        let mut s = String::new();
        s.push_str(&format!("# {} plan report\n\n", self.tool));
        s.push_str(&format!("- tool version: {}\n", self.tool_version));
        if let Some(t) = &self.generated_at {
            s.push_str(&format!("- generated at: {t}\n"));
        }
        s.push_str(&format!("- bundle fingerprint: `{}`\n", self.bundle_fingerprint));
        s.push_str(&format!("- analysis layer: `{}`\n\n", o.layer));

        s.push_str("## Grouping\n\n");
        s.push_str(&format!(
            "method: {:?}, k-means and single linkage {}\n\n",
            o.grouping.plan.method,
            if o.grouping.agree { "agree" } else { "disagree" }
        ));
        for (g, members) in o.grouping.plan.groups.iter().enumerate() {
            s.push_str(&format!("- group {g}: {}\n", members.join(", ")));
        }
        s.push_str("\nMerges:\n\n| step | left | right | distance |\n|---|---|---|---|\n");
        for (i, m) in o.grouping.linkage.merges.iter().enumerate() {
            s.push_str(&format!(
                "| {} | {} | {} | {:.6} |\n",
                i + 1,
                m.left.join(" "),
                m.right.join(" "),
                m.distance
            ));
        }

        s.push_str("\n## Conflict\n\n| layer | S_self | S_cross | delta | purity |\n|---|---|---|---|---|\n");
        for l in &c.layers {
            s.push_str(&format!(
                "| {} | {:.6} | {:.6} | {:.6} | {:.4} |\n",
                l.layer, l.s_self, l.s_cross, l.delta, l.purity
            ));
        }
        s.push_str(&format!(
            "\ndelta = {:.6} over {}; branch: {}; shared ratio = {:.2}\n\n",
            c.delta,
            c.candidate_layers.join(", "),
            c.branch_rule,
            c.shared_ratio
        ));
        s.push_str(&format!("Purity: {}\n\n", c.purity_definition));

        let sub = &o.subspace;
        s.push_str("## Subspace\n\n");
        s.push_str(&format!(
            "k = {}, top-1 share = {:.4}, gini = {:.4}, lambda = {}\n\n| task | energy share |\n|---|---|\n",
            sub.k, sub.top1_share, sub.gini, sub.lambda
        ));
        for (t, p) in sub.tasks.iter().zip(&sub.proportions) {
            s.push_str(&format!("| {t} | {p:.6} |\n"));
        }

        let p = &o.plan;
        s.push_str("\n## Plan\n\n");
        s.push_str(&format!(
            "d_model = {}, d_ff = {}, d_s = {}, d_p = {} x {}, shared rank = {}, private rank = {}\n\n",
            p.d_model,
            p.d_ff,
            p.d_s,
            p.d_p,
            p.n_groups(),
            p.r,
            p.private_rank
        ));
        for (g, e) in p.p_g.iter().enumerate() {
            s.push_str(&format!("- p_g[{g}] = {e:.6}\n"));
        }

        s.push_str("\n## Settings\n\n| name | value | source |\n|---|---|---|\n");
        for st in &self.settings {
            let src = match st.provenance {
                Provenance::Published => "published",
                Provenance::ToolDefault => "tool default",
                Provenance::User => "user",
            };
            s.push_str(&format!("| {} | {} | {src} |\n", st.name, st.value));
        }
        if !self.warnings.is_empty() {
            s.push_str("\n## Warnings\n\n");
            for w in &self.warnings {
                s.push_str(&format!("- {w}\n"));
            }
        }
        s
    }
}
