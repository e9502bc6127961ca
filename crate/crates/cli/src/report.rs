use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use nalgebra::DMatrix;

use gdps_core::pipeline::PipelineReport;
use gdps_core::synthbench::SimSummary;

use super::{input, write, CliResult, Format};

enum Loaded {
    Plan(Box<PipelineReport>),
    Sim(Box<SimSummary>),
}

pub(crate) fn heatmap_csv(tasks: &[String], s: &DMatrix<f64>) -> String {
    let mut out = format!("task,{}\n", tasks.join(","));
    for (i, t) in tasks.iter().enumerate() {
        let row: Vec<String> = (0..s.ncols()).map(|j| s[(i, j)].to_string()).collect();
        out.push_str(&format!("{t},{}\n", row.join(",")));
    }
    out
}

fn dendrogram_csv(r: &PipelineReport) -> String {
    let mut out = String::from("step,left,right,distance\n");
    for (i, m) in r.outcome.grouping.linkage.merges.iter().enumerate() {
        out.push_str(&format!("{},{},{},{}\n", i + 1, m.left.join(" "), m.right.join(" "), m.distance));
    }
    out
}

fn ratio_trace(r: &PipelineReport) -> String {
    let c = &r.outcome.conflict;
    let mut s = String::from("## Ratio trace\n\n| layer | S_self | S_cross | delta |\n|---|---|---|---|\n");
    for l in &c.layers {
        s.push_str(&format!("| {} | {:.6} | {:.6} | {:.6} |\n", l.layer, l.s_self, l.s_cross, l.delta));
    }
    s.push_str(&format!(
        "\ncandidates: {}\n\ndelta = {:.6}, thresholds = ({}, {}), branch: {}, shared ratio = {:.2}\n",
        c.candidate_layers.join(", "),
        c.delta,
        c.thresholds.low,
        c.thresholds.high,
        c.branch_rule,
        c.shared_ratio
    ));
    s
}

fn load(path: &Path) -> CliResult<Loaded> {
    let file: PathBuf = if path.is_dir() {
        let plan = path.join("report.json");
        let sim = path.join("summary.json");
        if plan.is_file() {
            plan
        } else if sim.is_file() {
            sim
        } else {
            return Err(input(anyhow!(
                "{}: no report.json or summary.json in directory",
                path.display()
            )));
        }
    } else {
        path.to_path_buf()
    };
    let bytes = fs::read(&file)
        .with_context(|| format!("reading {}", file.display()))
        .map_err(input)?;
    if let Ok(r) = serde_json::from_slice::<PipelineReport>(&bytes) {
        return Ok(Loaded::Plan(Box::new(r)));
    }
    serde_json::from_slice::<SimSummary>(&bytes)
        .map(|s| Loaded::Sim(Box::new(s)))
        .map_err(|e| input(anyhow!("{}: not a plan report or simulation summary: {e}", file.display())))
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.6}"))
}

fn sim_table(sims: &[(String, &SimSummary)]) -> (String, String) {
    let mut md = String::from("## Simulations\n\n| metric |");
    let mut csv = String::from("metric");
    for (name, _) in sims {
        md.push_str(&format!(" {name} |"));
        csv.push_str(&format!(",{name}"));
    }
    md.push_str(&format!("\n|---|{}\n", "---|".repeat(sims.len())));
    csv.push('\n');
    type Row = fn(&SimSummary) -> String;
    let rows: [(&str, Row); 8] = [
        ("theta", |s| s.config.theta_deg.to_string()),
        ("groups", |s| format!("{:?}", s.config.group_sizes)),
        ("steps", |s| s.config.train.steps.to_string()),
        ("unified mean loss", |s| fmt(s.unified_mean_loss)),
        ("specialized mean loss", |s| fmt(s.specialized_mean_loss)),
        ("relative gap", |s| fmt(s.relative_gap())),
        ("specialized wins", |s| format!("{}/{}", s.specialized_wins, s.paired_seeds)),
        ("mean similarity delta", |s| fmt(s.mean_similarity_delta)),
    ];
    for (label, f) in rows {
        md.push_str(&format!("| {label} |"));
        csv.push_str(label);
        for (_, s) in sims {
            let v = f(s);
            md.push_str(&format!(" {v} |"));
            csv.push_str(&format!(",{}", v.replace(',', " ")));
        }
        md.push('\n');
        csv.push('\n');
    }
    (md, csv)
}

pub(crate) fn cmd_report(inputs: &[PathBuf], format: Format, out: Option<&Path>) -> CliResult<()> {
    let loaded: Vec<(String, Loaded)> = inputs
        .iter()
        .map(|p| load(p).map(|l| (p.display().to_string(), l)))
        .collect::<Result<_, _>>()?;

    let mut md = String::from("# Report\n\n");
    let mut csv = String::new();
    let mut js = Vec::new();
    let mut sims = Vec::new();
    for (i, (name, l)) in loaded.iter().enumerate() {
        match l {
            Loaded::Plan(r) => {
                md.push_str(&format!("## Plan `{name}`\n\n"));
                md.push_str(&r.to_markdown());
                md.push('\n');
                md.push_str(&ratio_trace(r));
                md.push('\n');
                let sim = &r.outcome.grouping.similarity;
                let heat = heatmap_csv(&sim.tasks, &sim.s);
                if csv.is_empty() {
                    csv = heat.clone();
                }
                if let Some(dir) = out {
                    let d = if loaded.len() > 1 { dir.join(format!("input{i}")) } else { dir.to_path_buf() };
                    write(&d.join("similarity_heatmap.csv"), &heat)?;
                    write(&d.join("spectrum.csv"), &r.outcome.subspace.spectrum_csv())?;
                    write(&d.join("dendrogram.csv"), &dendrogram_csv(r))?;
                    write(&d.join("ratio_trace.md"), &ratio_trace(r))?;
                }
                js.push(serde_json::json!({"input": name, "kind": "plan", "report": r}));
            }
            Loaded::Sim(s) => {
                sims.push((name.clone(), s.as_ref()));
                js.push(serde_json::json!({"input": name, "kind": "simulate", "summary": s}));
            }
        }
    }
    if !sims.is_empty() {
        let (t, c) = sim_table(&sims);
        md.push_str(&t);
        if let Some(dir) = out {
            write(&dir.join("simulations.csv"), &c)?;
        }
        if csv.is_empty() {
            csv = c;
        }
    }
    let json = serde_json::to_string_pretty(&js).expect("serializable") + "\n";
    if let Some(dir) = out {
        write(&dir.join("report.md"), &md)?;
        write(&dir.join("report.json"), &json)?;
    }
    print!(
        "{}",
        match format {
            Format::Json => json,
            Format::Md => md,
            Format::Csv => csv,
        }
    );
    Ok(())
}
