use serde::{Deserialize, Serialize};

use super::model::ToyModel;
use super::suite::{make_suite, Dims, SuiteSpec};
use super::train::{pretrain, similarity_delta, train, ModeKind, TrainConfig, TrainLog, TrainMode};
use super::{plan_for_suite, SynthError, DEFAULT_GRADIENT_SAMPLES};
use crate::decomposer::{Activation, DecompositionPlan};
use crate::pipeline::PlanConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSelect {
    Unified,
    Specialized,
    Both,
}

impl ModeSelect {
    pub fn includes(self, m: ModeKind) -> bool {
        matches!(
            (self, m),
            (ModeSelect::Both, _)
                | (ModeSelect::Unified, ModeKind::Unified)
                | (ModeSelect::Specialized, ModeKind::Specialized)
        )
    }
}

/// One simulation experiment: a suite shape and angle run over several
/// seeds. Each seed draws its own suite, model, plan and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub group_sizes: Vec<usize>,
    pub theta_deg: f64,
    pub spread_deg: f64,
    pub noise: f64,
    pub dims: Dims,
    pub activation: Activation,
    pub seeds: Vec<u64>,
    pub modes: ModeSelect,
    /// Unified steps on the task mixture before analysis; both modes then
    /// start from the same weights.
    pub pretrain_steps: usize,
    pub gradient_samples: usize,
    pub train: TrainConfig,
    pub plan: PlanConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        let spec = SuiteSpec::new(vec![1, 3], 80.0, 0);
        Self {
            group_sizes: spec.group_sizes,
            theta_deg: spec.theta_deg,
            spread_deg: spec.spread_deg,
            noise: spec.noise,
            dims: spec.dims,
            activation: Activation::Identity,
            seeds: (0..5).collect(),
            modes: ModeSelect::Both,
            pretrain_steps: 0,
            gradient_samples: DEFAULT_GRADIENT_SAMPLES,
            train: TrainConfig::default(),
            plan: PlanConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn suite_spec(&self, seed: u64) -> SuiteSpec {
        SuiteSpec {
            group_sizes: self.group_sizes.clone(),
            theta_deg: self.theta_deg,
            spread_deg: self.spread_deg,
            dims: self.dims,
            noise: self.noise,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub plan: Option<DecompositionPlan>,
    pub unified: Option<TrainLog>,
    pub specialized: Option<TrainLog>,
    /// Per-task similarity change, specialized minus unified.
    pub similarity_delta: Option<Vec<f64>>,
    /// Failures of this seed (divergence, analysis errors); other seeds
    /// still run.
    pub errors: Vec<String>,
}

impl SeedRun {
    pub fn mean_similarity_delta(&self) -> Option<f64> {
        self.similarity_delta
            .as_ref()
            .map(|d| d.iter().sum::<f64>() / d.len().max(1) as f64)
    }
}

pub fn run_seed(cfg: &SimConfig, seed: u64) -> Result<SeedRun, SynthError> {
    let suite = make_suite(cfg.suite_spec(seed))?;
    let model = ToyModel::new(cfg.dims, cfg.activation, seed)?;
    let tcfg = TrainConfig { seed, ..cfg.train };
    let mut out = SeedRun {
        seed,
        plan: None,
        unified: None,
        specialized: None,
        similarity_delta: None,
        errors: Vec::new(),
    };
    let model = if cfg.pretrain_steps > 0 {
        match pretrain(
            &model,
            &suite,
            &TrainConfig {
                steps: cfg.pretrain_steps,
                ..tcfg
            },
        ) {
            Ok(m) => m,
            Err(e) => {
                out.errors.push(format!("pretrain: {e}"));
                return Ok(out);
            }
        }
    } else {
        model
    };
    if cfg.modes.includes(ModeKind::Unified) {
        match train(&model, &suite, &TrainMode::Unified, &tcfg) {
            Ok(l) => out.unified = Some(l),
            Err(e) => out.errors.push(format!("unified: {e}")),
        }
    }
    if cfg.modes.includes(ModeKind::Specialized) {
        let pcfg = PlanConfig {
            seed,
            ..cfg.plan.clone()
        };
        match plan_for_suite(&model, &suite, cfg.gradient_samples, &pcfg) {
            Ok(o) => {
                match train(&model, &suite, &TrainMode::Specialized(o.plan.clone()), &tcfg) {
                    Ok(l) => out.specialized = Some(l),
                    Err(e) => out.errors.push(format!("specialized: {e}")),
                }
                out.plan = Some(o.plan);
            }
            Err(e) => out.errors.push(format!("plan: {e}")),
        }
    }
    if let (Some(u), Some(s)) = (&out.unified, &out.specialized) {
        out.similarity_delta = Some(similarity_delta(u, s)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub config: SimConfig,
    pub runs: Vec<SeedRun>,
    pub unified_mean_loss: Option<f64>,
    pub specialized_mean_loss: Option<f64>,
    /// Seeds where specialized ended strictly below unified.
    pub specialized_wins: usize,
    /// Seeds with both modes finished.
    pub paired_seeds: usize,
    pub mean_similarity_delta: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs every seed in order. Per-seed failures are recorded, not raised.
pub fn simulate(cfg: &SimConfig) -> Result<SimSummary, SynthError> {
    if cfg.seeds.is_empty() {
        return Err(SynthError::Invalid("at least one seed required".into()));
    }
    // Validate the suite shape once up front so bad parameters fail fast.
    make_suite(cfg.suite_spec(cfg.seeds[0]))?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &s in &cfg.seeds {
        runs.push(run_seed(cfg, s)?);
    }
    let u: Vec<f64> = runs.iter().filter_map(|r| r.unified.as_ref().map(|l| l.final_mean_loss)).collect();
    let sp: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.specialized.as_ref().map(|l| l.final_mean_loss))
        .collect();
    let paired: Vec<(f64, f64)> = runs
        .iter()
        .filter_map(|r| match (&r.unified, &r.specialized) {
            (Some(a), Some(b)) => Some((a.final_mean_loss, b.final_mean_loss)),
            _ => None,
        })
        .collect();
    let deltas: Vec<f64> = runs.iter().filter_map(|r| r.mean_similarity_delta()).collect();
    Ok(SimSummary {
        config: cfg.clone(),
        unified_mean_loss: mean(&u),
        specialized_mean_loss: mean(&sp),
        specialized_wins: paired.iter().filter(|(a, b)| b < a).count(),
        paired_seeds: paired.len(),
        mean_similarity_delta: mean(&deltas),
        runs,
    })
}

impl SimSummary {
    /// Relative gap `|S − U| / U` of the mean final losses.
    pub fn relative_gap(&self) -> Option<f64> {
        match (self.unified_mean_loss, self.specialized_mean_loss) {
            (Some(u), Some(s)) if u > 0.0 => Some((s - u).abs() / u),
            _ => None,
        }
    }

    pub fn to_markdown(&self) -> String {
        let c = &self.config;
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        let mut s = format!(
            "# Simulation\n\ntheta = {}°, groups = {:?}, steps = {}, lr = {}\n\n| seed | unified | specialized | similarity delta | errors |\n|---|---|---|---|---|\n",
            c.theta_deg, c.group_sizes, c.train.steps, c.train.lr
        );
        for r in &self.runs {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                r.seed,
                fmt(r.unified.as_ref().map(|l| l.final_mean_loss)),
                fmt(r.specialized.as_ref().map(|l| l.final_mean_loss)),
                fmt(r.mean_similarity_delta()),
                r.errors.join("; ")
            ));
        }
        s.push_str(&format!(
            "| mean | {} | {} | {} | |\n\nspecialized below unified in {}/{} seeds\n",
            fmt(self.unified_mean_loss),
            fmt(self.specialized_mean_loss),
            fmt(self.mean_similarity_delta),
            self.specialized_wins,
            self.paired_seeds
        ));
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,unified_final,specialized_final,similarity_delta\n");
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.17e}"));
        for r in &self.runs {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.seed,
                f(r.unified.as_ref().map(|l| l.final_mean_loss)),
                f(r.specialized.as_ref().map(|l| l.final_mean_loss)),
                f(r.mean_similarity_delta())
            ));
        }
        s
    }
}
