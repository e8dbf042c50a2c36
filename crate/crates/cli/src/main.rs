use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use hyperlora::corpus::{load_jsonl, FieldMap, PerspectivistCorpus};
use hyperlora::encoder::EncoderConfig;
use hyperlora::io::write_atomic;
use hyperlora::metrics::accountant::{count_trainable, separate_lora_per_annotator, AdapterShape};
use hyperlora::report::{render_comparison, render_grid};
use hyperlora::synthgen::{generate, SynthConfig};
use hyperlora::system::SystemKind;
use hyperlora::training::{grid_search, multi_seed, Aggregate, RunConfig, GRID_DROPOUTS, GRID_LEARNING_RATES};
use hyperlora::{Error, Result};

#[derive(Parser)]
#[command(name = "hyperlora", version, about = "Per-annotator adapters generated by a hypernetwork")]
struct Cli {
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its persona sidecar.
    Synth {
        /// TOML synth config; absent keys keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output JSONL; personas go to `<out>.personas.jsonl`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one system over several seeds and aggregate.
    Run {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_parser = parse_system)]
        system: SystemKind,
        #[arg(long)]
        config: Option<PathBuf>,
        /// `a..b` (inclusive) or a comma list. Defaults to the config's seeds.
        #[arg(long, value_parser = parse_seeds)]
        seeds: Option<Seeds>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// JSON column mapping for corpora with other key names.
        #[arg(long)]
        field_map: Option<PathBuf>,
    },
    /// Sweep dropout and learning rate on one seed.
    Grid {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_parser = parse_system)]
        system: SystemKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        field_map: Option<PathBuf>,
    },
    /// Print the trainable-parameter breakdown of a system.
    CountParams {
        #[arg(long, value_parser = parse_system)]
        system: SystemKind,
        #[arg(long, value_enum, default_value_t = Geometry::Roberta)]
        geometry: Geometry,
        #[arg(long)]
        annotators: usize,
        #[arg(long, default_value_t = 2)]
        rank: usize,
        #[arg(long, default_value_t = 2)]
        num_classes: usize,
        /// Leave the hypernet classifier head frozen.
        #[arg(long)]
        frozen_head: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Geometry {
    Desk,
    Roberta,
}

fn parse_system(s: &str) -> std::result::Result<SystemKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Clone)]
struct Seeds(Vec<u64>);

fn parse_seeds(s: &str) -> std::result::Result<Seeds, String> {
    let num = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("bad seed `{t}`: {e}"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b)?);
        if a > b {
            return Err(format!("empty seed range {s}"));
        }
        return Ok(Seeds((a..=b).collect()));
    }
    s.split(',').map(num).collect::<std::result::Result<_, _>>().map(Seeds)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_corpus(path: &Path, field_map: Option<&Path>) -> Result<PerspectivistCorpus> {
    let schema = match field_map {
        Some(p) => FieldMap::from_file(p)?,
        None => FieldMap::default(),
    };
    load_jsonl(path, &schema)
}

fn load_run_config(path: Option<&Path>, system: SystemKind) -> Result<RunConfig> {
    let text = match path {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    RunConfig::from_toml_for(&text, Some(system))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("plain data");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn personas_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".personas.jsonl");
    out.with_file_name(name)
}

/// Every `<dir>/<system>/aggregate.json` under `out`.
fn collect_aggregates(out: &Path) -> Result<Vec<Aggregate>> {
    let mut found = Vec::new();
    for kind in SystemKind::ALL {
        let path = out.join(kind.name()).join("aggregate.json");
        if path.exists() {
            let agg = serde_json::from_str(&read_text(&path)?)
                .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
            found.push(agg);
        }
    }
    Ok(found)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, out } => {
            let cfg = match config {
                Some(p) => SynthConfig::from_toml(&read_text(&p)?)?,
                None => SynthConfig::default(),
            };
            let (corpus, truth) = generate(&cfg)?;
            corpus.write_jsonl(&out)?;
            let sidecar = personas_path(&out);
            truth.write_personas(&sidecar)?;
            info!("wrote {} records to {} and personas to {}", corpus.records().len(), out.display(), sidecar.display());
        }
        Command::Run { corpus, system, config, seeds, out, jobs, field_map } => {
            let cfg = load_run_config(config.as_deref(), system)?;
            let seeds = seeds.map_or_else(|| cfg.seeds.clone(), |s| s.0);
            let data = load_corpus(&corpus, field_map.as_deref())?;
            info!("{system}: {} seeds, config {}", seeds.len(), cfg.fingerprint());
            let (results, agg) = multi_seed(&data, &cfg, &seeds, jobs)?;
            let dir = out.join(system.name());
            write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
            for r in &results {
                write_json(&dir.join(format!("seed_{}.json", r.seed)), r)?;
            }
            write_json(&dir.join("aggregate.json"), &agg)?;
            let table = render_comparison(&collect_aggregates(&out)?);
            write_atomic(&out.join("comparison.txt"), table.as_bytes())?;
            print!("{table}");
        }
        Command::Grid { corpus, system, config, seed, out, jobs, field_map } => {
            let cfg = load_run_config(config.as_deref(), system)?;
            let data = load_corpus(&corpus, field_map.as_deref())?;
            let report = grid_search(&data, &cfg, seed, &GRID_DROPOUTS, &GRID_LEARNING_RATES, jobs)?;
            write_json(&out.join("grid.json"), &report)?;
            let table = render_grid(&report);
            write_atomic(&out.join("grid.txt"), table.as_bytes())?;
            print!("{table}");
        }
        Command::CountParams { system, geometry, annotators, rank, num_classes, frozen_head } => {
            let g = match geometry {
                Geometry::Desk => EncoderConfig::desk(num_classes, 0),
                Geometry::Roberta => EncoderConfig::roberta(num_classes),
            };
            let shape = AdapterShape { rank, train_classifier_head: !frozen_head };
            let breakdown = count_trainable(system, &g, annotators, shape);
            println!("system {system}, d={}, layers={}, annotators={annotators}", g.hidden_dim, g.num_layers);
            for (name, n) in &breakdown.components {
                println!("{name:<24}{n:>14}");
            }
            println!("{:<24}{:>14}", "total", breakdown.total());
            if system == SystemKind::SeparateLora {
                println!("{:<24}{:>14}", "per_annotator", separate_lora_per_annotator(&g, rank));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
