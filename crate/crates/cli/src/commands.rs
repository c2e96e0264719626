use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dynroute_core::cost::{static_cost_report, Convention};
use dynroute_core::network::Gating;
use dynroute_core::presets::preset_mask;
use dynroute_core::routes::{extract_common, route_histogram, RouteLog};
use dynroute_core::space::{ArchMask, RoutingSpace};
use dynroute_core::trainer::{log_routes, Checkpoint, MetricsRecord, Trainer};
use dynroute_core::verify::{run_suites, Level, VerifyOptions};
use dynroute_core::{data, seed, Error, Result, Shape};

use crate::config::{FileConfig, DEFAULT_CHECKPOINT_EVERY, DEFAULT_ROUTE_SAMPLES};
use crate::{CostArgs, ExtractArgs, OutArgs, SpaceArgs, TrainArgs, VerifyArgs};

pub const OUT_ENV: &str = "DYNROUTE_OUT";
pub const DEFAULT_OUT: &str = "dynroute-out";

/// Flag, then environment, then config file, then the default.
fn out_dir(args: &OutArgs, from_config: Option<&Path>) -> PathBuf {
    args.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .or_else(|| from_config.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Write via a temporary file so readers never see a partial file.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn emit(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text)?;
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn parse_input(s: &str) -> Result<Shape> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Argument(format!("input must look like 3x1024x2048, got {s:?}")))?;
    match dims[..] {
        [c, h, w] => Ok(Shape::new(1, c, h, w)),
        _ => Err(Error::Argument(format!("input must have three dimensions, got {s:?}"))),
    }
}

/// A preset name, or else a mask file path.
fn load_mask(source: &str, base: &Path) -> Result<ArchMask> {
    match preset_mask(source) {
        Ok(m) => Ok(m),
        Err(_) if source.contains('/') || source.contains('.') => ArchMask::parse(&read(&base.join(source))?),
        Err(e) => Err(e),
    }
}

pub fn space(a: &SpaceArgs) -> Result<()> {
    let dir = out_dir(&a.out, None);
    if let Some(name) = &a.preset {
        let mask = preset_mask(name)?;
        return emit(&dir.join(format!("{name}.mask")), &mask.to_text());
    }
    let space = RoutingSpace::new(a.layers, a.base_channels)?;
    let mut s = format!("layers = {}\nbase_channels = {}\nnodes = {}\n", space.layers(), space.base_channels(), space.num_nodes());
    let paths: usize = space.nodes().iter().map(|&n| space.legal_paths(n).iter().filter(|&&l| l).count()).sum();
    s.push_str(&format!("legal_paths = {paths}\n"));
    for scale in 0..dynroute_core::space::NUM_SCALES {
        s.push_str(&format!("channels {scale} = {}\n", space.channels(scale)));
    }
    emit(&dir.join("space.txt"), &s)
}

pub fn cost(a: &CostArgs) -> Result<()> {
    let mask = match (&a.preset, &a.mask) {
        (Some(p), _) => preset_mask(p)?,
        (None, Some(path)) => ArchMask::parse(&read(path)?)?,
        (None, None) => return Err(Error::Argument("give --preset or --mask".into())),
    };
    let layers = a.layers.or(mask.layers).unwrap_or(16);
    let space = RoutingSpace::new(layers, a.base_channels)?;
    let input = parse_input(&a.input)?;
    let convention: Convention = a.convention.parse()?;
    let name = mask.name.clone().unwrap_or_else(|| "mask".into());
    let dir = out_dir(&a.out, None);
    if a.params_only {
        let without = static_cost_report(&space, &mask, input, a.classes, convention, false)?;
        let with = static_cost_report(&space, &mask, input, a.classes, convention, true)?;
        let s = format!("params_without_gates = {}\nparams_with_gates = {}\n", without.total.params, with.total.params);
        return emit(&dir.join(format!("params_{name}.txt")), &s);
    }
    let report = static_cost_report(&space, &mask, input, a.classes, convention, a.gates)?;
    emit(&dir.join(format!("cost_{name}.txt")), &report.to_text())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let fc = FileConfig::parse(&read(&a.config)?)?;
    let cfg = fc.train_config(a.seed)?;
    let config_dir = a.config.parent().unwrap_or(Path::new("."));
    let gating = match &fc.space.mask {
        Some(src) => Gating::Frozen(load_mask(src, config_dir)?),
        None => Gating::Learned,
    };
    let every = fc.run.checkpoint_every.unwrap_or(DEFAULT_CHECKPOINT_EVERY);
    if every == 0 {
        return Err(Error::Validation("run.checkpoint_every must be positive".into()));
    }
    let dir = out_dir(&a.out, fc.run.out_dir.as_deref());
    fs::create_dir_all(&dir)?;
    let metrics_path = dir.join("metrics.jsonl");
    let ckpt_path = dir.join("checkpoint.json");

    let mut trainer = match &a.resume {
        Some(path) => {
            let ck: Checkpoint = serde_json::from_str(&read(path)?)?;
            if ck.config != cfg {
                return Err(Error::Validation("checkpoint was written with a different configuration".into()));
            }
            let t = Trainer::from_checkpoint(ck)?;
            if *t.gating() != gating {
                return Err(Error::Validation("checkpoint was written with a different frozen mask".into()));
            }
            t
        }
        None => Trainer::with_gating(cfg, gating)?,
    };

    // Earlier records up to the checkpoint are kept; anything after it is redone.
    let mut kept = String::new();
    if trainer.iter() > 0 && metrics_path.exists() {
        for line in read(&metrics_path)?.lines() {
            let r: MetricsRecord = serde_json::from_str(line)?;
            if r.iter < trainer.iter() {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    fs::write(&metrics_path, kept)?;
    let mut metrics = fs::OpenOptions::new().append(true).open(&metrics_path)?;

    while !trainer.is_done() {
        let record = match trainer.step() {
            Ok(r) => r,
            Err(e @ Error::Divergence { .. }) => {
                if let Error::Divergence { msg, .. } = &e {
                    write_atomic(&dir.join("divergence.txt"), &format!("{msg}\n"))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(metrics, "{}", record.to_json())?;
        if trainer.iter() % every == 0 || trainer.is_done() {
            metrics.flush()?;
            write_atomic(&ckpt_path, &serde_json::to_string(&trainer.checkpoint())?)?;
        }
    }
    metrics.flush()?;

    let cfg = trainer.config().clone();
    let n = fc.run.route_samples.unwrap_or(DEFAULT_ROUTE_SAMPLES);
    let samples = data::synth_dataset(seed::derive(cfg.seed, "routes"), n, cfg.image_size, cfg.classes)?;
    let log = log_routes(trainer.network(), trainer.gating(), &samples, cfg.batch, 0)?;
    write_atomic(&dir.join("routes.jsonl"), &log.to_jsonl())?;
    println!("trained {} iterations; artifacts in {}", trainer.iter(), dir.display());
    Ok(())
}

pub fn extract(a: &ExtractArgs) -> Result<()> {
    let log = RouteLog::parse_jsonl(&read(&a.log)?)?;
    if log.records.is_empty() {
        return Err(Error::Validation(format!("{} contains no routes", a.log.display())));
    }
    let mask = extract_common(&log, a.threshold, a.name.as_deref())?;
    let hist = route_histogram(&log, a.bins)?;
    let dir = out_dir(&a.out, None);
    let name = mask.name.clone().unwrap_or_else(|| "common".into());
    write_atomic(&dir.join("histogram.txt"), &hist.to_text())?;
    emit(&dir.join(format!("{name}.mask")), &mask.to_text())
}

pub fn verify(a: &VerifyArgs) -> Result<()> {
    let level = if a.full { Level::Full } else { Level::Fast };
    let results = run_suites(level, &VerifyOptions { corrupt_gradient: a.corrupt_gradient });
    let mut failed = Vec::new();
    for r in &results {
        println!("{} {}: {} ({:.1}s)", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail, r.seconds);
        if !r.passed {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!("failed invariants: {}", failed.join(", "))))
    }
}
