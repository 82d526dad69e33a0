//! Subcommand implementations.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use stylebridge::engine::{train_source, AdaptConfig, Parts, StVariant, TrainConfig, TrainReport};
use stylebridge::knowledge::KnowledgeBase;
use stylebridge::stream::{make_stream, shuffle_mixed, DomainSpec};

use crate::config::{prepare_out_dir, under_root, write_json, RunConfig};
use crate::data::save_stream;
use crate::error::{CliError, CliResult};
use crate::run::{build_kb, build_stream, execute, load_source};

pub fn gen_kb(classes: usize, per_class: usize, seed: u64, out: &Path, force: bool) -> CliResult<()> {
    if per_class == 0 || classes == 0 {
        return Err(CliError::usage("--classes and --per-class must be at least 1"));
    }
    let kb = KnowledgeBase::build_procedural(classes, per_class, seed)?;
    prepare_out_dir(out, force)?;
    kb.save(out)?;
    log::info!("wrote {} exemplars to {}", kb.len(), out.display());
    Ok(())
}

pub struct DataArgs {
    pub domains: Vec<DomainSpec>,
    pub batches_per_domain: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mixed: bool,
}

pub fn gen_data(args: &DataArgs, out: &Path, force: bool) -> CliResult<()> {
    let mut stream = make_stream(&args.domains, args.batches_per_domain, args.batch_size, args.seed)?;
    if args.mixed {
        stream = shuffle_mixed(stream, stylebridge::engine::derive_seed(args.seed, 1))?;
    }
    prepare_out_dir(out, force)?;
    save_stream(&stream, out)?;
    log::info!("wrote {} batches to {}", stream.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: &'a TrainConfig,
    report: &'a TrainReport,
    wall_time_secs: f64,
}

pub fn train(cfg: &TrainConfig, out: &Path, force: bool) -> CliResult<()> {
    prepare_out_dir(out, force)?;
    let start = Instant::now();
    let (params, report) = train_source(cfg)?;
    params.save(out)?;
    write_json(
        &out.join("train_report.json"),
        &TrainSummary {
            config: cfg,
            report: &report,
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    )?;
    log::info!(
        "held-out clean accuracy {:.2}%, checkpoint in {}",
        100.0 * report.heldout_accuracy,
        out.display()
    );
    Ok(())
}

pub fn adapt(cfg: &RunConfig, force: bool) -> CliResult<()> {
    let cfg = cfg.resolved()?;
    let source = load_source(&cfg.source)?;
    let (stream, shuffled) = build_stream(&cfg)?;
    let kb = build_kb(&cfg)?;
    prepare_out_dir(&cfg.out, force)?;
    let summary = execute(&cfg, &source, &stream, shuffled, &kb, &cfg.out)?;
    println!("mean error {:.2}%", 100.0 * summary.mean_error);
    Ok(())
}

/// Progressive component grid: self-training alone, then the knowledge
/// loss, then each restyling level, then everything.
pub const ABLATION_GRID: [(&str, Parts); 7] = [
    ("ex1", Parts::ST_ONLY),
    ("ex2", parts(true, false, false, false)),
    ("ex3", parts(true, true, false, false)),
    ("ex4", parts(true, false, true, false)),
    ("ex5", parts(true, false, false, true)),
    ("ex6", parts(true, true, true, false)),
    ("ex7", Parts::FULL),
];

const fn parts(pce: bool, input_inject: bool, stat_bridge: bool, scl: bool) -> Parts {
    Parts {
        pce,
        input_inject,
        stat_bridge,
        scl,
        st: true,
    }
}

#[derive(Serialize)]
struct AblationLine {
    kb_size: usize,
    experiment: &'static str,
    pce: bool,
    input_inject: bool,
    stat_bridge: bool,
    scl: bool,
    seeds: usize,
    mean_error: f64,
    per_seed: String,
    stream_fingerprints: String,
}

pub fn ablate(
    base: &RunConfig,
    seeds: &[u64],
    kb_sizes: &[usize],
    force: bool,
) -> CliResult<PathBuf> {
    if seeds.is_empty() || kb_sizes.is_empty() || kb_sizes.contains(&0) {
        return Err(CliError::usage("need at least one seed and positive knowledge-base sizes"));
    }
    if base.kb.path.is_some() && kb_sizes.len() > 1 {
        return Err(CliError::usage("--kb-size sweeps need a procedural knowledge base"));
    }
    let root = under_root(&base.out);
    base.resolved()?;
    let source = load_source(&under_root(&base.source))?;
    prepare_out_dir(&root, force)?;

    let mut lines = Vec::new();
    for &m in kb_sizes {
        let mut cells: Vec<Vec<(f64, String)>> = vec![Vec::new(); ABLATION_GRID.len()];
        for &seed in seeds {
            let seeded = RunConfig {
                adapt: AdaptConfig {
                    seed,
                    ..base.adapt.clone()
                },
                ..base.clone()
            };
            let mut cfg = seeded.resolved()?;
            cfg.kb.per_class = m;
            // Every grid row sees the same stream and knowledge base.
            let (stream, shuffled) = build_stream(&cfg)?;
            let kb = build_kb(&cfg)?;
            for (row, (name, parts)) in ABLATION_GRID.iter().enumerate() {
                let mut cell = cfg.clone();
                cell.adapt.parts = *parts;
                cell.out = root.join(format!("m{m}")).join(name).join(format!("seed{seed}"));
                std::fs::create_dir_all(&cell.out).map_err(|e| CliError::io(&cell.out, e))?;
                let s = execute(&cell, &source, &stream, shuffled, &kb, &cell.out)?;
                log::info!("M={m} {name} seed {seed}: mean error {:.2}%", 100.0 * s.mean_error);
                cells[row].push((s.mean_error, s.stream.fingerprint));
            }
        }
        for ((name, p), runs) in ABLATION_GRID.iter().zip(cells) {
            let errs: Vec<f64> = runs.iter().map(|r| r.0).collect();
            lines.push(AblationLine {
                kb_size: m,
                experiment: name,
                pce: p.pce,
                input_inject: p.input_inject,
                stat_bridge: p.stat_bridge,
                scl: p.scl,
                seeds: errs.len(),
                mean_error: errs.iter().sum::<f64>() / errs.len() as f64,
                per_seed: errs.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>().join(";"),
                stream_fingerprints: runs.iter().map(|r| &r.1[..16]).collect::<Vec<_>>().join(";"),
            });
        }
    }
    let table = root.join("ablation.csv");
    let file = File::create(&table).map_err(|e| CliError::io(&table, e))?;
    let mut w = csv::Writer::from_writer(file);
    for line in &lines {
        w.serialize(line)
            .map_err(|e| CliError::data(format!("{}: {e}", table.display())))?;
    }
    w.flush().map_err(|e| CliError::io(&table, e))?;
    for line in &lines {
        println!(
            "M={} {} mean error {:.2}%",
            line.kb_size,
            line.experiment,
            100.0 * line.mean_error
        );
    }
    Ok(table)
}

pub fn st_variant_from(s: &str) -> Result<StVariant, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown self-training variant {s:?} (teacher_student, entropy_min)"))
}
