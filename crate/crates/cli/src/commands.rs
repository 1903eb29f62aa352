//! Resolution of run configs and the command implementations.

use std::fmt::Write as _;
use std::path::Path as FsPath;

use serde_json::{json, Value};

use sde_fim::datagen::{add_relative_noise, generate_dataset, CorruptionConfig, GridPreset};
use sde_fim::eval::{
    canonical_system, field_estimate, mmd_protocol, mse_on_grid, CatalogEntry, EvalGrid, EvaluationReport, InitialCondition,
    ObservationPlan, ProtocolConfig, SweepRow, CATALOG, CONTEXT_SWEEP,
};
use sde_fim::model::{infer, Checkpoint, ModelField};
use sde_fim::sde::simulate_on_times;
use sde_fim::training::{validation_draws, mean_l1, finetune, FinetuneConfig, FinetuneMode, Trainer};
use sde_fim::{ModelParams, ObservationSet, PathBundle, SeedTree, VectorField};

use crate::config::*;
use crate::error::{CliError, CliResult};
use crate::io::*;

fn embedded(rc: &RunConfig) -> Value {
    serde_json::to_value(rc).expect("run config serializes")
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// A run config from a JSON file, or the one embedded in a dataset,
/// checkpoint or JSON report.
pub fn load_run_config(path: &FsPath) -> CliResult<RunConfig> {
    let value = match sniff(path)? {
        FileKind::Dataset => load_dataset(path)?.header.run_config,
        FileKind::Checkpoint => load_checkpoint(path)?.extra.get("run_config").cloned().unwrap_or(Value::Null),
        FileKind::Other => {
            let v: Value = serde_json::from_slice(&read_file(path)?)?;
            v.get("run_config").cloned().unwrap_or(v)
        }
    };
    if value.is_null() {
        return Err(config_err(format!("{} carries no run config", path.display())));
    }
    serde_json::from_value(value).map_err(|e| config_err(format!("run config: {e}")))
}

/// Fills every preset-dependent default so the config is self-contained.
pub fn resolve(rc: &mut RunConfig) -> CliResult<()> {
    let (seed, preset) = (rc.seed, rc.preset);
    match &mut rc.command {
        CommandConfig::Generate(a) => {
            let dims = a.dims.clone().unwrap_or_else(|| preset.dims());
            let mut prior = a.prior.clone().unwrap_or_else(|| {
                let mut p = preset.prior();
                if a.full_grids {
                    p.presets = GridPreset::full_table();
                }
                p
            });
            if dims.is_empty() || dims.iter().any(|&d| d == 0 || d > prior.d_max) {
                return Err(config_err(format!("dims must lie in 1..={}", prior.d_max)));
            }
            if a.prior.is_none() {
                let base = prior.dim_ratio.clone();
                prior.dim_ratio = base.iter().enumerate().map(|(i, &w)| if dims.contains(&(i + 1)) { w } else { 0 }).collect();
            }
            prior.validate()?;
            let corruption = a.corruption.clone().unwrap_or(if a.clean { CorruptionConfig::none() } else { CorruptionConfig::default() });
            corruption.validate()?;
            a.count = Some(a.count.unwrap_or_else(|| preset.count()));
            a.dims = Some(dims);
            a.prior = Some(prior);
            a.corruption = Some(corruption);
        }
        CommandConfig::Train(a) => {
            if a.train.is_none() {
                let (mut cfg, model) = match &a.resume {
                    Some(path) => {
                        let ck = load_checkpoint(path)?;
                        let prev: RunConfig = ck
                            .extra
                            .get("run_config")
                            .cloned()
                            .and_then(|v| serde_json::from_value(v).ok())
                            .ok_or_else(|| config_err("checkpoint carries no training config to resume from"))?;
                        match prev.command {
                            CommandConfig::Train(TrainArgs { train: Some(t), .. }) => (t, ck.params.config.clone()),
                            _ => return Err(config_err("checkpoint was not written by `train`")),
                        }
                    }
                    None => {
                        let mut m = a.model.clone().unwrap_or_else(|| preset.model());
                        if let Some(h) = a.hidden {
                            m.hidden = h;
                        }
                        (preset.train(seed), m)
                    }
                };
                if a.resume.is_none() {
                    cfg.lr = a.lr.unwrap_or(cfg.lr);
                    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
                    cfg.context_min = a.context_min.unwrap_or(cfg.context_min);
                    cfg.context_max = a.context_max.unwrap_or(cfg.context_max);
                    cfg.locations = a.locations.unwrap_or(cfg.locations);
                    cfg.grad_clip = a.grad_clip.or(cfg.grad_clip);
                }
                cfg.steps = a.steps.unwrap_or(cfg.steps);
                a.train = Some(cfg);
                a.model = Some(model);
            }
            a.train.as_ref().expect("set above").validate()?;
            a.model.as_ref().expect("set above").validate()?;
        }
        CommandConfig::Finetune(a) => {
            if a.finetune.is_none() {
                let d = FinetuneConfig { seed, ..FinetuneConfig::default() };
                a.finetune = Some(FinetuneConfig {
                    iters: a.iters.unwrap_or(d.iters),
                    lr: a.lr.unwrap_or(d.lr),
                    batch: a.batch.unwrap_or(d.batch),
                    context_max: a.context_max.unwrap_or(d.context_max),
                    substeps: a.substeps.unwrap_or(d.substeps),
                    ..d
                });
            }
            if a.context.context.is_none() {
                return Err(config_err("finetune needs --context"));
            }
        }
        CommandConfig::Infer(a) => {
            if a.context.context.is_none() {
                return Err(config_err("infer needs --context"));
            }
        }
        CommandConfig::Simulate(a) => {
            if a.system.is_none() && a.checkpoint.is_none() {
                return Err(config_err("simulate needs --system or --checkpoint"));
            }
            if a.checkpoint.is_some() && a.context.context.is_none() {
                return Err(config_err("simulating a model needs --context"));
            }
        }
        CommandConfig::Evaluate(a) => {
            canonical_system(&a.system)?;
            if !a.truth && a.checkpoint.is_none() {
                return Err(config_err("evaluate needs --checkpoint or --truth"));
            }
            a.mmd_config().validate()?;
        }
        CommandConfig::Catalog(_) => {}
    }
    Ok(())
}

fn need_out(out: Option<&FsPath>) -> CliResult<&FsPath> {
    out.ok_or_else(|| config_err("--out is required"))
}

pub fn execute(rc: &RunConfig, out: Option<&FsPath>) -> CliResult<String> {
    match &rc.command {
        CommandConfig::Generate(a) => cmd_generate(rc, a, need_out(out)?),
        CommandConfig::Train(a) => cmd_train(rc, a, need_out(out)?),
        CommandConfig::Infer(a) => cmd_infer(rc, a, need_out(out)?),
        CommandConfig::Finetune(a) => cmd_finetune(rc, a, need_out(out)?),
        CommandConfig::Simulate(a) => cmd_simulate(rc, a, need_out(out)?),
        CommandConfig::Evaluate(a) => cmd_evaluate(rc, a, need_out(out)?),
        CommandConfig::Catalog(a) => cmd_catalog(a, out),
    }
}

fn json_bytes(v: &Value) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("json serializes");
    b.push(b'\n');
    b
}

pub fn cmd_generate(rc: &RunConfig, a: &GenerateArgs, out: &FsPath) -> CliResult<String> {
    let prior = a.prior.as_ref().expect("resolved");
    let corruption = a.corruption.as_ref().expect("resolved");
    let count = a.count.expect("resolved");
    let mut ds = generate_dataset(prior, corruption, count, rc.seed)?;
    ds.header.run_config = embedded(rc);
    let stats: Vec<Value> = ds
        .header
        .stats
        .iter()
        .filter(|s| s.attempts() > 0)
        .map(|s| {
            json!({
                "dim": s.dim,
                "accepted": s.accepted,
                "rejected_non_finite": s.rejected_non_finite,
                "rejected_threshold": s.rejected_threshold,
                "rejection_rate": s.rejection_rate(),
            })
        })
        .collect();
    let manifest = json!({ "dataset": out.file_name().map(|f| f.to_string_lossy()), "count": count, "seed": rc.seed, "per_dim": stats, "run_config": embedded(rc) });
    write_atomic(out, &ds.to_bytes())?;
    write_atomic(&sibling(out, ".manifest.json"), &json_bytes(&manifest))?;
    let mut s = format!("wrote {count} equations to {}", out.display());
    for st in ds.header.stats.iter().filter(|s| s.attempts() > 0) {
        let _ = write!(s, "\n  {}D: {} accepted, rejection rate {:.1}%", st.dim, st.accepted, 100.0 * st.rejection_rate());
    }
    Ok(s)
}

fn log_header() -> &'static str {
    "step,l1,weighted,mean_u,grad_norm,skipped,val_l1\n"
}

pub fn cmd_train(rc: &RunConfig, a: &TrainArgs, out: &FsPath) -> CliResult<String> {
    let cfg = a.train.clone().expect("resolved");
    let model = a.model.clone().expect("resolved");
    let ds = load_dataset(&a.data)?;
    let val = match &a.val_data {
        Some(p) => Some(validation_draws(&load_dataset(p)?.records, &cfg, cfg.seed)?),
        None => None,
    };
    let mut trainer = match &a.resume {
        Some(path) => {
            let _lock = lock_checkpoint(path)?;
            let ck = load_checkpoint(path)?;
            let opt = ck.optimizer.ok_or_else(|| CliError::Data("checkpoint has no optimizer state".into()))?;
            if ck.seed != cfg.seed {
                return Err(config_err("resume seed differs from the checkpoint seed"));
            }
            Trainer::resume(ck.params, opt, ck.step, cfg.clone(), &ds.records)?
        }
        None => {
            let params = ModelParams::init(&model, SeedTree::new(cfg.seed).named("init"))?;
            Trainer::new(params, cfg.clone(), &ds.records)?
        }
    };
    let checkpoint = |t: &Trainer| Checkpoint {
        params: t.params.clone(),
        step: t.step,
        seed: cfg.seed,
        extra: json!({ "run_config": embedded(rc) }),
        optimizer: Some(t.opt.state.clone()),
    };
    let mut log = String::from(log_header());
    let mut last_val = None;
    while trainer.step < cfg.steps {
        let row = trainer.step_once()?;
        let v = match &val {
            Some(draws) if a.val_every > 0 && (row.step % a.val_every == 0 || row.step == cfg.steps) => {
                let v = mean_l1(&trainer.params, draws)?;
                last_val = Some(v);
                Some(v)
            }
            _ => None,
        };
        let _ = writeln!(
            log,
            "{},{},{},{},{},{},{}",
            row.step,
            row.l1,
            row.weighted,
            row.mean_u,
            row.grad_norm,
            row.skipped,
            v.map(|x| x.to_string()).unwrap_or_default()
        );
        if a.checkpoint_every > 0 && row.step % a.checkpoint_every == 0 && row.step < cfg.steps {
            write_atomic(&sibling(out, &format!(".step{}", row.step)), &checkpoint(&trainer).to_bytes())?;
        }
    }
    let _lock = lock_checkpoint(out)?;
    write_atomic(out, &checkpoint(&trainer).to_bytes())?;
    write_atomic(&sibling(out, ".log.csv"), log.as_bytes())?;
    let mut s = format!("trained to step {} ({} parameters), checkpoint {}", trainer.step, trainer.params.count(), out.display());
    if let Some(v) = last_val {
        let _ = write!(s, "\n  validation l1 {v:.6}");
    }
    Ok(s)
}

fn context_set(c: &ContextArgs) -> CliResult<(PathBundle, ObservationSet)> {
    let path = c.context.as_ref().ok_or_else(|| config_err("--context is required"))?;
    let bundle = load_context(path, c.record)?;
    let (set, _) = ObservationSet::from_bundle(&bundle)?;
    if set.is_empty() {
        return Err(CliError::Data("context has no transitions".into()));
    }
    Ok((bundle, set))
}

fn bounds_of(bundle: &PathBundle) -> Vec<(f64, f64)> {
    let d = bundle.dim;
    let mut b = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
    for p in &bundle.paths {
        for x in p.states.chunks_exact(d) {
            for i in 0..d {
                b[i].0 = b[i].0.min(x[i]);
                b[i].1 = b[i].1.max(x[i]);
            }
        }
    }
    b.into_iter().map(|(lo, hi)| if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) }).collect()
}

fn plot_csv(est: &sde_fim::VectorFieldEstimate) -> CliResult<Vec<u8>> {
    let d = est.dim;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    header.extend((1..=d).map(|i| format!("drift{i}")));
    header.extend((1..=d).map(|i| format!("amplitude{i}")));
    header.push("uncertainty".into());
    w.write_record(&header)?;
    for r in 0..est.len() {
        let rows = r * d..(r + 1) * d;
        let mut row: Vec<String> = est.locations[rows.clone()].iter().map(f64::to_string).collect();
        row.extend(est.drift[rows.clone()].iter().map(f64::to_string));
        row.extend(est.amplitude[rows].iter().map(f64::to_string));
        row.push(est.uncertainty[r].to_string());
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

pub fn cmd_infer(rc: &RunConfig, a: &InferArgs, out: &FsPath) -> CliResult<String> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (bundle, set) = context_set(&a.context)?;
    let (locations, grid) = match &a.locations {
        Some(p) => (read_locations_csv(std::fs::File::open(p).map_err(|e| CliError::Io(e.to_string()))?)?, None),
        None => {
            let bounds = match (&a.grid.bounds, &a.grid.system) {
                (Some(b), _) => b.clone(),
                (None, Some(name)) => canonical_system(name)?.bounds,
                (None, None) => bounds_of(&bundle),
            };
            let g = EvalGrid::new(bounds, a.grid.grid)?;
            (g.points(), Some(g))
        }
    };
    let est = infer(&ck.params, &set, &locations)?;
    let doc = json!({ "run_config": embedded(rc), "transitions": set.len(), "grid": grid, "estimate": est });
    if let Some(p) = &a.plot {
        write_atomic(p, &plot_csv(&est)?)?;
    }
    write_atomic(out, &json_bytes(&doc))?;
    Ok(format!("estimated fields at {} locations from {} transitions", est.len(), set.len()))
}

pub fn cmd_finetune(rc: &RunConfig, a: &FinetuneArgs, out: &FsPath) -> CliResult<String> {
    let cfg = a.finetune.clone().expect("resolved");
    let ck = {
        let _lock = lock_checkpoint(&a.checkpoint)?;
        load_checkpoint(&a.checkpoint)?
    };
    let (bundle, _) = context_set(&a.context)?;
    let mut params = ck.params.clone();
    let mode = match a.mode {
        Mode::Dense => FinetuneMode::Dense,
        Mode::Sparse => FinetuneMode::Sparse,
    };
    let report = finetune(&mut params, &bundle, &cfg, mode)?;
    if report.trace.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numeric("finetuning objective became non-finite".into()));
    }
    let next = Checkpoint {
        params,
        step: ck.step,
        seed: ck.seed,
        extra: json!({ "run_config": embedded(rc), "parent": ck.extra }),
        optimizer: None,
    };
    let mut trace = String::from("iter,objective\n");
    for (i, v) in report.trace.iter().enumerate() {
        let _ = writeln!(trace, "{i},{v}");
    }
    {
        let _lock = lock_checkpoint(out)?;
        write_atomic(out, &next.to_bytes())?;
    }
    write_atomic(&sibling(out, ".trace.csv"), trace.as_bytes())?;
    Ok(match (report.trace.first(), report.trace.last()) {
        (Some(f), Some(l)) => format!("finetuned {} iterations, objective {f:.6} -> {l:.6}", report.trace.len()),
        _ => "no iterations; checkpoint unchanged".to_string(),
    })
}

pub fn cmd_simulate(rc: &RunConfig, a: &SimulateArgs, out: &FsPath) -> CliResult<String> {
    let entry = a.system.as_deref().map(canonical_system).transpose()?;
    let seed = SeedTree::new(rc.seed);
    let ck = a.checkpoint.as_ref().map(|p| load_checkpoint(p)).transpose()?;
    let ctx = if ck.is_some() { Some(context_set(&a.context)?) } else { None };
    let plan = entry.as_ref().map(|e| e.reference);
    let paths = a.paths.or(plan.map(|p| p.paths)).unwrap_or(1);
    let observations = a.observations.or(plan.map(|p| p.observations)).unwrap_or(500);
    let obs_gap = a.obs_gap.or(plan.map(|p| p.obs_gap)).unwrap_or(0.01);
    let substeps = a
        .substeps
        .or(entry.as_ref().map(|e| (obs_gap / e.dt).round().max(1.0) as usize))
        .unwrap_or(1);
    if paths == 0 || observations < 2 || !(obs_gap > 0.0) {
        return Err(config_err("need ≥1 path, ≥2 observations and a positive gap"));
    }
    let initial = match (&a.init, &entry, &ctx) {
        (Some(x), _, _) => InitialCondition::Point(x.clone()),
        (None, Some(e), _) => e.initial.clone(),
        (None, None, Some((b, _))) => InitialCondition::Point(b.paths[0].state(0, b.dim).to_vec()),
        (None, None, None) => unreachable!("resolve requires a system or a checkpoint"),
    };
    let times: Vec<f64> = (0..observations).map(|l| l as f64 * obs_gap).collect();
    let run = |field: &dyn VectorField| -> CliResult<PathBundle> {
        let init = initial.sample(field.dim(), paths, seed.named("init"));
        Ok(simulate_on_times(field, &init, &times, substeps, seed.named("paths"))?)
    };
    let mut bundle = match (&ck, &ctx, &entry) {
        (Some(ck), Some((_, set)), _) => run(&ModelField::new(&ck.params, set)?)?,
        (_, _, Some(e)) => run(&e.system)?,
        _ => unreachable!("resolve requires a system or a checkpoint"),
    };
    if a.noise > 0.0 {
        bundle = add_relative_noise(&bundle, a.noise, &mut seed.named("noise").rng());
    }
    let diverged = bundle.paths.iter().filter(|p| p.diverged).count();
    write_atomic(out, &series_csv(&bundle)?)?;
    write_atomic(&sibling(out, ".config.json"), &json_bytes(&json!({ "run_config": embedded(rc) })))?;
    Ok(format!("simulated {paths} paths × {observations} observations ({diverged} diverged)"))
}

fn sweep(entry: &CatalogEntry, params: &ModelParams, sizes: &[usize], grid: &EvalGrid, seed: SeedTree) -> CliResult<Vec<SweepRow>> {
    let longest = sizes.iter().copied().max().unwrap_or(0);
    let plan = ObservationPlan { paths: 1, observations: longest + 1, obs_gap: entry.context.obs_gap };
    let bundle = entry.simulate_plan(&plan, &entry.initial, seed.named("sweep"))?;
    let (full, _) = ObservationSet::from_bundle(&bundle)?;
    let points = grid.points();
    sizes
        .iter()
        .map(|&k| {
            let set = full.select(&(0..k.min(full.len())).collect::<Vec<_>>());
            let est = infer(params, &set, &points)?;
            let m = mse_on_grid(&est, &entry.system, grid)?;
            Ok(SweepRow { context: k, drift_mse: m.drift, diffusion_mse: m.diffusion, discarded: m.discarded })
        })
        .collect()
}

pub fn cmd_evaluate(rc: &RunConfig, a: &EvaluateArgs, out: &FsPath) -> CliResult<String> {
    let entry = canonical_system(&a.system)?;
    let seed = SeedTree::new(rc.seed);
    let grid = entry.eval_grid(a.grid)?;
    let ck = a.checkpoint.as_ref().map(|p| load_checkpoint(p)).transpose()?;
    let context = match (&ck, &a.context.context) {
        (Some(_), Some(_)) => Some(context_set(&a.context)?.1),
        (Some(_), None) => Some(ObservationSet::from_bundle(&entry.simulate_context(seed.named("context"))?)?.0),
        _ => None,
    };
    let use_truth = a.truth || ck.is_none();
    let mut report = EvaluationReport { system: entry.name.clone(), seed: rc.seed, ..EvaluationReport::default() };
    let mut summary = String::new();
    if matches!(a.metric, Metric::Mse | Metric::All) {
        let est = match (&ck, &context) {
            (Some(ck), Some(set)) if !use_truth => infer(&ck.params, set, &grid.points())?,
            _ => field_estimate(&entry.system, &grid.points())?,
        };
        let m = mse_on_grid(&est, &entry.system, &grid)?;
        let _ = writeln!(summary, "drift mse {:.6}, diffusion mse {:.6} ({} discarded)", m.drift, m.diffusion, m.discarded);
        report.mse = Some(m);
        report.grid = Some(grid.clone());
    }
    if matches!(a.metric, Metric::Mmd | Metric::All) {
        let reference = match &a.reference {
            Some(p) => load_context(p, 0)?,
            None => {
                let plan = ObservationPlan {
                    paths: a.reference_paths.unwrap_or(entry.reference.paths),
                    observations: a.reference_observations.unwrap_or(entry.reference.observations),
                    ..entry.reference
                };
                entry.simulate_plan(&plan, &entry.initial, seed.named("reference"))?
            }
        };
        let pc = ProtocolConfig { mmd: a.mmd_config(), substeps: a.substeps };
        let r = match (&ck, &context) {
            (Some(ck), Some(set)) if !use_truth => mmd_protocol(&ModelField::new(&ck.params, set)?, &reference, &pc, seed.named("candidate"))?,
            _ => mmd_protocol(&entry.system, &reference, &pc, seed.named("candidate"))?,
        };
        let _ = writeln!(
            summary,
            "mmd² {:.6} (level {}, bandwidth {}, {} diverged)",
            r.mmd2,
            r.config.level,
            r.config.bandwidth().map(|b| format!("{b:.4}")).unwrap_or_else(|| "n/a".into()),
            r.diverged
        );
        report.mmd = Some(r);
    }
    if a.context_sweep {
        let ck = ck.as_ref().ok_or_else(|| config_err("--context-sweep needs --checkpoint"))?;
        let sizes = a.sweep_sizes.clone().unwrap_or_else(|| CONTEXT_SWEEP.to_vec());
        report.sweep = sweep(&entry, &ck.params, &sizes, &grid, seed)?;
        for row in &report.sweep {
            let _ = writeln!(summary, "context {:>6}: drift mse {:.6}, diffusion mse {:.6}", row.context, row.drift_mse, row.diffusion_mse);
        }
    }
    write_atomic(out, &json_bytes(&json!({ "run_config": embedded(rc), "report": report })))?;
    Ok(summary.trim_end().to_string())
}

pub fn cmd_catalog(a: &CatalogArgs, out: Option<&FsPath>) -> CliResult<String> {
    let text = match &a.system {
        Some(name) => String::from_utf8(json_bytes(&serde_json::to_value(canonical_system(name)?)?)).expect("utf8"),
        None => {
            let mut s = String::new();
            for name in CATALOG {
                let e = canonical_system(name)?;
                let bounds: Vec<String> = e.bounds.iter().map(|(lo, hi)| format!("[{lo}, {hi}]")).collect();
                let _ = writeln!(s, "{name:<14} dim {}  grid {}", e.dim(), bounds.join(" × "));
            }
            s
        }
    };
    match out {
        Some(p) => {
            write_atomic(p, text.as_bytes())?;
            Ok(format!("wrote {}", p.display()))
        }
        None => Ok(text.trim_end().to_string()),
    }
}
