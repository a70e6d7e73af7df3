//! Batch commands. Each reads its inputs from the run directory and writes
//! its outputs next to them.

use std::path::Path;

use safeflow::config::{Artifacts, RunConfig};
use safeflow::eval::{DIVERSITY_HEADER, LATENCY_HEADER, QUINTILE_HEADER, STAGE1_HEADER, TABLE_HEADER};
use safeflow::flow::FieldRole;
use safeflow::pipeline::GateMode;
use safeflow::runs::{bench_run, default_prompts, eval_run, gate_eval_run, RATE_HEADER};
use safeflow::workflow::{
    calibrate_step, distill_step, gen_data as gen_data_step, load_dataset, load_field, load_vae, make_generator, save_dataset, save_field,
    save_gates, save_vae, train_flow_step, train_vae_step, write_json, Bundle, DeployOptions, Variant,
};

use crate::CliError;

fn artifacts(cfg: &RunConfig) -> Artifacts {
    Artifacts::new(&cfg.run.out_dir)
}

/// Writes a CSV table, refusing non-finite numbers.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<(), CliError> {
    for row in rows {
        if row.split(',').any(|c| matches!(c, "NaN" | "inf" | "-inf")) {
            return Err(CliError::Other(format!("{}: non-finite value in row {row:?}", path.display())));
        }
    }
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn wrote(path: &Path) {
    eprintln!("wrote {}", path.display());
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let art = artifacts(cfg);
    let data = gen_data_step(cfg)?;
    save_dataset(&art, &data)?;
    wrote(&art.dataset());
    println!("train windows {}, validation windows {}", data.train.len(), data.val.len());
    Ok(())
}

pub fn train_vae(cfg: &RunConfig) -> Result<(), CliError> {
    let art = artifacts(cfg);
    let data = load_dataset(&art)?;
    let (vae, report) = train_vae_step(cfg, &data)?;
    save_vae(&art, &vae)?;
    write_json(&art.file("vae_report.json"), &report)?;
    wrote(&art.vae());
    println!(
        "validation mse {:.6} rad^2 (future variance {:.6}), median joint error {:.4} rad",
        report.val_mse, report.future_variance, report.median_joint_error
    );
    Ok(())
}

pub fn train_flow(cfg: &RunConfig) -> Result<(), CliError> {
    let art = artifacts(cfg);
    let data = load_dataset(&art)?;
    let vae = load_vae(&art)?;
    let (field, report) = train_flow_step(cfg, &data, &vae)?;
    save_field(&art, &field)?;
    write_json(&art.file("flow_report.json"), &report)?;
    wrote(&art.flow(FieldRole::Base));
    if report.non_monotone_warning {
        eprintln!("warning: smoothed training loss rose by more than 10% at some point");
    }
    println!(
        "final loss {:.6}, validation loss {}",
        report.loss_curve.last().copied().unwrap_or(f64::NAN),
        report.val_loss.map_or("n/a".into(), |v| format!("{v:.6}"))
    );
    Ok(())
}

pub fn distill(cfg: &RunConfig) -> Result<(), CliError> {
    let art = artifacts(cfg);
    let data = load_dataset(&art)?;
    let vae = load_vae(&art)?;
    let base = load_field(&art, FieldRole::Base)?;
    let (student, losses) = distill_step(cfg, &data, &vae, &base)?;
    save_field(&art, &student)?;
    write_json(&art.file("reflow_loss.json"), &losses)?;
    wrote(&art.flow(FieldRole::Student));
    println!("final distillation loss {:.6}", losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

pub fn calibrate(cfg: &RunConfig) -> Result<(), CliError> {
    let art = artifacts(cfg);
    let data = load_dataset(&art)?;
    let vae = load_vae(&art)?;
    let student = load_field(&art, FieldRole::Student)?;
    let generator = make_generator(cfg, &vae, &student, Variant::Student);
    let (gates, scores) = calibrate_step(cfg, &data, &generator)?;
    save_gates(&art, &gates, &scores)?;
    wrote(&art.gates());
    println!(
        "stage 1 tau {:.4} (p{}), stage 2 tau_stab {:.6} (p{} of {} windows)",
        gates.semantic.tau,
        cfg.gates.percentile,
        gates.tau_stab,
        gates.tau_stab_percentile,
        scores.len()
    );
    Ok(())
}

fn read_prompts(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let prompts: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect();
    if prompts.is_empty() {
        return Err(CliError::Other(format!("{}: no prompts", path.display())));
    }
    Ok(prompts)
}

pub fn eval(cfg: &RunConfig, prompts: Option<&Path>, no_gates: bool) -> Result<(), CliError> {
    let art = artifacts(cfg);
    let bundle = Bundle::load(cfg, &art)?;
    let prompts = match prompts {
        Some(p) => read_prompts(p)?,
        None => default_prompts(&bundle, cfg.eval.episodes),
    };
    let mode = if no_gates { GateMode::Off } else { GateMode::Enforce };
    let out = eval_run(&bundle, &prompts, mode)?;
    write_csv(&art.file("eval_table.csv"), TABLE_HEADER, &out.table.iter().map(|r| r.csv()).collect::<Vec<_>>())?;
    write_csv(&art.file("eval_rates.csv"), RATE_HEADER, &out.rates.iter().map(|r| r.csv()).collect::<Vec<_>>())?;
    write_csv(&art.file("diversity.csv"), DIVERSITY_HEADER, &out.diversity.iter().map(|r| r.csv()).collect::<Vec<_>>())?;
    write_json(&art.file("eval.json"), &out)?;
    println!("{TABLE_HEADER}");
    for row in &out.table {
        println!("{}", row.csv());
    }
    println!("{RATE_HEADER}");
    for row in &out.rates {
        println!("{}", row.csv());
    }
    match safeflow::eval::diversity_ratio(&out.diversity) {
        Some(r) => println!("multimodality guided / unguided: {r:.3}"),
        None => println!("multimodality: no prompt succeeded under both variants"),
    }
    Ok(())
}

pub fn gate_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let art = artifacts(cfg);
    let bundle = Bundle::load(cfg, &art)?;
    let out = gate_eval_run(&bundle, Variant::Student)?;
    write_csv(&art.file("stage1.csv"), STAGE1_HEADER, &out.stage1.csv_rows())?;
    write_csv(&art.file("quintiles.csv"), QUINTILE_HEADER, &out.quintiles.iter().map(|r| r.csv()).collect::<Vec<_>>())?;
    write_json(&art.file("gate_eval.json"), &out)?;
    println!("{STAGE1_HEADER}");
    for row in out.stage1.csv_rows() {
        println!("{row}");
    }
    println!("{QUINTILE_HEADER}");
    for row in &out.quintiles {
        println!("{}", row.csv());
    }
    Ok(())
}

pub fn bench(cfg: &RunConfig, opts: DeployOptions) -> Result<(), CliError> {
    let art = artifacts(cfg);
    let bundle = Bundle::load(cfg, &art)?;
    let out = bench_run(&bundle, opts)?;
    let mut rows: Vec<String> = out.pipeline.rows.iter().map(|r| r.csv()).collect();
    rows.push(format!("teacher_generate,{:.4},", out.teacher_ms));
    rows.push(format!("student_generate,{:.4},", out.student_ms));
    write_csv(&art.file("latency.csv"), LATENCY_HEADER, &rows)?;
    write_json(&art.file("latency.json"), &out)?;
    println!("{LATENCY_HEADER}");
    for row in &rows {
        println!("{row}");
    }
    if out.student_ms > 0.0 {
        println!("student speedup over teacher: {:.1}x", out.teacher_ms / out.student_ms);
    }
    Ok(())
}
