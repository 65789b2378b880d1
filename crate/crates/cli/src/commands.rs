use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use vsdm::checkpoint::Checkpoint;
use vsdm::config::{RunConfig, PRESETS};
use vsdm::io::{self, fmt_f64};
use vsdm::kernel::Symmetrization;
use vsdm::kernel_check::{run_checks, CheckOptions};
use vsdm::metrics::{permutation_test, straightness, OuterBand};
use vsdm::par::Exec;
use vsdm::pipeline::{generate, Event, Trainer};
use vsdm::sampler::SampleMode;
use vsdm::{Result, VsdmError};

use crate::ConfigArgs;

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

pub fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut c = match (&args.config, &args.preset) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => return Err(VsdmError::Config("pass --config <path> or --preset <name>".into())),
    };
    if let Some(s) = args.seed {
        c.seed = s;
        c.train.seed = s;
        c.data.seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| VsdmError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn stage_header(dim: usize) -> Vec<String> {
    let mut h = strings(&["stage", "rounds_done", "mean_loss", "last_loss", "sa_update"]);
    h.extend((0..dim).map(|i| format!("d_scale_{i}")));
    h.extend((0..dim).map(|i| format!("raw_d_scale_{i}")));
    h.push("min_eigenvalue".into());
    h
}

pub fn train(args: &ConfigArgs, out: &Path, resume: Option<&Path>, stop: Option<u64>, sequential: bool) -> Result<ExitCode> {
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if args.config.is_some() || args.preset.is_some() {
                let c = load_config(args)?;
                if c != ck.config {
                    return Err(VsdmError::Config(format!(
                        "config {} differs from the one stored in {}",
                        c.hash_hex(),
                        p.display()
                    )));
                }
            }
            Trainer::resume(ck, exec(sequential))?
        }
        None => Trainer::new(load_config(args)?, exec(sequential))?,
    };
    let config = trainer.config().clone();
    let hash = config.hash_hex();
    let dim = config.data.dim();
    mkdir(out)?;
    std::fs::write(out.join("config.toml"), config.to_toml()).map_err(|e| VsdmError::Io {
        path: out.join("config.toml"),
        source: e,
    })?;
    let (stages, sa, timing) = (out.join("stages.csv"), out.join("sa.csv"), out.join("timing.csv"));
    if resume.is_none() {
        for p in [&stages, &sa, &timing] {
            if p.exists() {
                std::fs::remove_file(p).map_err(|e| VsdmError::Io { path: p.clone(), source: e })?;
            }
        }
    }
    let sa_header = strings(&["sa_step", "stage", "change_norm"]);
    let timing_header = strings(&["stage", "wall_ms"]);
    let mut clock = Instant::now();
    let done = trainer.run(stop, &mut |ev| match ev {
        Event::Stage(r) => {
            let mut row = vec![
                r.stage.to_string(),
                r.rounds_done.to_string(),
                fmt_f64(r.mean_loss),
                fmt_f64(r.last_loss),
                (r.sa_updated as u8).to_string(),
            ];
            row.extend(r.d_scale.iter().map(|v| fmt_f64(*v)));
            row.extend(r.raw_d_scale.iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(r.min_eigenvalue));
            io::append_table(&stages, &hash, &stage_header(dim), &[row])?;
            let ms = clock.elapsed().as_millis();
            clock = Instant::now();
            io::append_table(&timing, &hash, &timing_header, &[vec![r.stage.to_string(), ms.to_string()]])?;
            eprintln!(
                "stage {:>3}  loss {:.4}  D scale {:?}",
                r.stage,
                r.mean_loss,
                r.d_scale.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>()
            );
            Ok(())
        }
        Event::Sa(r) => io::append_table(
            &sa,
            &hash,
            &sa_header,
            &[vec![r.sa_step.to_string(), r.stage.to_string(), fmt_f64(r.change_norm)]],
        ),
    })?;
    let ck = trainer.checkpoint();
    ck.save(&out.join("checkpoint.vsdm"))?;
    let grid = trainer.variational().effective_drift_grid();
    let bmax = config.schedule.beta_max;
    let mut header = strings(&["cell", "t"]);
    header.extend((0..dim).map(|i| format!("d_scale_{i}")));
    let rows: Vec<Vec<String>> = grid
        .diagonal_scales(bmax)
        .iter()
        .enumerate()
        .map(|(c, s)| {
            let mut r = vec![c.to_string(), fmt_f64(config.schedule.node_time(c))];
            r.extend(s.iter().map(|v| fmt_f64(*v)));
            r
        })
        .collect();
    io::write_table(&out.join("drift.csv"), &hash, &header, &rows)?;
    if done {
        eprintln!("training complete; checkpoint in {}", out.join("checkpoint.vsdm").display());
    } else {
        eprintln!(
            "stopped at stage {} round {}; resume with --resume {}",
            ck.progress.stage,
            ck.progress.round_in_stage,
            out.join("checkpoint.vsdm").display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
pub fn sample(
    ckpt: &Path,
    mode: Option<&str>,
    count: Option<usize>,
    nfe: Option<usize>,
    seed: u64,
    out: &Path,
    trajectories: bool,
    sequential: bool,
) -> Result<ExitCode> {
    let ck = Checkpoint::load(ckpt)?;
    let config = &ck.config;
    let mode: SampleMode = match mode {
        Some(m) => m.parse()?,
        None => config.sampler.mode,
    };
    let count = count.unwrap_or(config.sampler.count);
    let nfe = nfe.unwrap_or(config.sampler.nfe);
    let grid = ck.variational.effective_drift_grid();
    let (batch, schedule) = generate(config, &ck.model, &grid, mode, count, nfe, seed, trajectories, exec(sequential))?;
    mkdir(out)?;
    let hash = config.hash_hex();
    io::write_samples(&out.join("samples.csv"), &hash, &batch, &schedule, false)?;
    if trajectories {
        io::write_samples(&out.join("trajectories.csv"), &hash, &batch, &schedule, true)?;
    }
    println!("{:016x}", batch.checksum());
    Ok(ExitCode::SUCCESS)
}

pub fn eval(
    args: &ConfigArgs,
    samples: &Path,
    trajectories: Option<&Path>,
    out: &Path,
    run_id: Option<String>,
    permutations: usize,
    data_count: usize,
) -> Result<ExitCode> {
    let config = load_config(args)?;
    let dim = config.data.dim();
    let run_id = run_id.unwrap_or_else(|| config.name.clone());
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut push = |metric: &str, axis: String, value: f64| {
        rows.push(vec![run_id.clone(), metric.to_string(), axis, fmt_f64(value)]);
    };

    let s = io::read_samples(samples)?;
    if s.dim != dim {
        return Err(VsdmError::domain(format!(
            "{} has dimension {} but the data config has {dim}",
            samples.display(),
            s.dim
        )));
    }
    let x = s.terminal();
    let m = data_count.min(x.nrows()).max(1);
    let data = config.data.generate_seeded(m, 1);
    let test = permutation_test(x.view(), data.view(), permutations, 0.95, config.seed, Exec::Parallel)?;
    push("energy_distance", "all".into(), test.statistic);
    push("energy_threshold_95", "all".into(), test.threshold);
    push("energy_p_value", "all".into(), test.p_value);
    let reference = config.data.generate_seeded(100_000, 2);
    for axis in 0..dim {
        let band = OuterBand::from_data(reference.view(), axis, 0.001, 0.1)?;
        push("outer_coverage", axis.to_string(), band.coverage(x.view()));
        push("data_outer_coverage", axis.to_string(), band.coverage(reference.view()));
    }
    if let Some(tp) = trajectories {
        let t = io::read_samples(tp)?;
        if t.dim != dim {
            return Err(VsdmError::domain(format!("{} has dimension {} but the data config has {dim}", tp.display(), t.dim)));
        }
        let h = if t.times.len() >= 2 { (t.times[0] - t.times[1]).abs() } else { 0.0 };
        for (axis, v) in straightness(&t.states, h)?.into_iter().enumerate() {
            push("straightness", axis.to_string(), v);
        }
    }
    for r in &rows {
        println!("{}", r.join(","));
    }
    mkdir(out)?;
    io::append_table(
        &out.join("results.csv"),
        &config.hash_hex(),
        &strings(&["run_id", "metric", "axis", "value"]),
        &rows,
    )?;
    Ok(ExitCode::SUCCESS)
}

pub fn kernel_check(args: &ConfigArgs, instances: usize, corrupt: bool) -> Result<ExitCode> {
    let schedule = if args.config.is_none() && args.preset.is_none() {
        vsdm::schedule::BetaSchedule::default()
    } else {
        load_config(args)?.schedule
    };
    let opts = CheckOptions {
        instances,
        seed: args.seed.unwrap_or(0),
        symmetrization: if corrupt { Symmetrization::Corrupt } else { Symmetrization::Average },
        ..CheckOptions::default()
    };
    let report = run_checks(&schedule, &opts)?;
    for c in &report.checks {
        println!(
            "{:<24} max error {:.3e}  tolerance {:.1e}  {}",
            c.name,
            c.max_error,
            c.tolerance,
            if c.passed() { "ok" } else { "FAILED" }
        );
    }
    println!("max kernel error {:.3e}", report.max_kernel_error());
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

pub fn preset(name: Option<&str>, list: bool) -> Result<ExitCode> {
    if list || name.is_none() {
        for p in PRESETS {
            println!("{p}");
        }
        return Ok(ExitCode::SUCCESS);
    }
    print!("{}", RunConfig::preset(name.unwrap_or_default())?.to_toml());
    Ok(ExitCode::SUCCESS)
}
