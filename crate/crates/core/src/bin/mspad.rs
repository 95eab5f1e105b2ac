use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use mspad::backend::BackendDescriptor;
use mspad::dataset::{compute_stats, load_dataset, ClassRegistry, DatasetIndex, LayoutConfig};
use mspad::evaluation::{evaluate, EvalConfig, Interpolation};
use mspad::geometry::ScoredBox;
use mspad::pipeline::{run_dataset, to_document, ClassRouting, FailurePolicy, Mode, PipelineConfig};
use mspad::splits::{run_monte_carlo, CvSpec, ModeBackends};
use mspad::tiling::{make_grid, project_annotations, GridSpec, TileProjectionPolicy};
use mspad::wire::{DetectionDocument, FORMAT_VERSION};

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (document format 1)");

#[derive(Parser, Debug)]
#[command(name = "mspad", version = VERSION, about = "Multi-size detection pipeline for high-resolution imagery")]
struct Cli {
    /// Dataset root holding the VOC XML annotation files.
    #[arg(long, global = true, env = "MSPAD_DATASET_ROOT")]
    dataset_root: Option<PathBuf>,
    /// Class list, one label per line (default: tower, insulator, spacer, plate, damper).
    #[arg(long, global = true)]
    registry: Option<PathBuf>,
    /// Sub-directory of the dataset root that holds the annotation files.
    #[arg(long, global = true)]
    annotation_dir: Option<String>,
    /// Descend into sub-directories when looking for annotation files.
    #[arg(long, global = true)]
    recursive: bool,
    #[arg(short, long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Master seed for randomized steps.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Per-class instance counts, density and box-area statistics.
    Stats {
        /// Dataset root (overrides --dataset-root).
        root: Option<PathBuf>,
    },
    /// Write per-image tile manifests with tile-local annotations.
    Slice {
        #[arg(long, default_value = "4x4")]
        grid: GridSpec,
        #[arg(long, default_value_t = 0)]
        overlap: u32,
        #[arg(long, default_value_t = 0.25)]
        min_visible: f64,
        /// Comma-separated labels to project (default: all classes).
        #[arg(long)]
        classes: Option<String>,
    },
    /// Run the detection pipeline over the dataset.
    Detect {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Detector for the resized full frame.
        #[arg(long, default_value = "oracle")]
        branch_a: BackendDescriptor,
        /// Detector for the grid tiles.
        #[arg(long, default_value = "oracle")]
        branch_b: BackendDescriptor,
        #[arg(long, default_value = "mspad")]
        mode: Mode,
        /// Keep going when an image fails.
        #[arg(long)]
        continue_on_error: bool,
    },
    /// Evaluate detection documents against the dataset's annotations.
    Eval {
        /// Ground-truth dataset root (overrides --dataset-root).
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Directory of per-image detection documents.
        #[arg(long)]
        detections: PathBuf,
        /// Split manifest; only its test images are evaluated.
        #[arg(long)]
        split: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Monte Carlo cross-validation of resize-only versus MS-PAD.
    Cv {
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0.8)]
        train_frac: f64,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Detector for the resize-only arm (default: same as --branch-a).
        #[arg(long)]
        original_backend: Option<BackendDescriptor>,
        #[arg(long, default_value = "oracle")]
        branch_a: BackendDescriptor,
        #[arg(long, default_value = "oracle")]
        branch_b: BackendDescriptor,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Re-run a configuration logged by an earlier invocation.
    Rerun { config: PathBuf },
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long, default_value = "4x4")]
    grid: GridSpec,
    /// Comma-separated labels routed to the tiled branch.
    #[arg(long, default_value = "damper")]
    tiled_classes: String,
    #[arg(long, default_value_t = 0.5)]
    fusion_iou: f64,
    #[arg(long, default_value = "512x512", value_parser = parse_size)]
    resized_input: (u32, u32),
    #[arg(long, default_value = "512x512", value_parser = parse_size)]
    tiled_input: (u32, u32),
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long, default_value = "all-points")]
    interp: Interpolation,
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w: u32 = w.parse().map_err(|_| "bad width")?;
    let h: u32 = h.parse().map_err(|_| "bad height")?;
    if w == 0 || h == 0 {
        return Err("size must be positive".into());
    }
    Ok((w, h))
}

/// Everything needed to reproduce a run; written as `config.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunConfig {
    version: u32,
    dataset_root: Option<PathBuf>,
    registry: ClassRegistry,
    layout: LayoutConfig,
    output_dir: Option<PathBuf>,
    command: CommandConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
enum CommandConfig {
    Stats,
    Slice {
        grid: GridSpec,
        policy: TileProjectionPolicy,
        classes: Vec<String>,
    },
    Detect {
        pipeline: PipelineConfig,
        branch_a: BackendDescriptor,
        branch_b: BackendDescriptor,
        failure: FailurePolicy,
    },
    Eval {
        detections: PathBuf,
        split: Option<PathBuf>,
        eval: EvalConfig,
    },
    Cv {
        cv: CvSpec,
        original: PipelineConfig,
        mspad: PipelineConfig,
        original_backend: BackendDescriptor,
        branch_a: BackendDescriptor,
        branch_b: BackendDescriptor,
        eval: EvalConfig,
    },
}

fn usage_error(msg: impl std::fmt::Display) -> ! {
    Cli::command().error(ErrorKind::MissingRequiredArgument, msg).exit()
}

fn pipeline_config(registry: &ClassRegistry, args: &PipelineArgs, mode: Mode) -> Result<PipelineConfig> {
    let config = PipelineConfig {
        mode,
        routing: ClassRouting::from_labels(registry, &args.tiled_classes)?,
        grid: args.grid,
        resized_input: args.resized_input,
        tiled_input: args.tiled_input,
        fusion_nms_iou: args.fusion_iou,
    };
    config.validate(registry)?;
    Ok(config)
}

fn resolve(cli: Cli) -> Result<RunConfig> {
    let registry = match &cli.registry {
        Some(p) => ClassRegistry::from_text(
            &fs::read_to_string(p).with_context(|| format!("reading registry {}", p.display()))?,
        )?,
        None => ClassRegistry::plad(),
    };
    let layout = LayoutConfig {
        annotation_dir: cli.annotation_dir.clone(),
        recursive: cli.recursive,
        ..LayoutConfig::default()
    };
    let mut dataset_root = cli.dataset_root.clone();
    let needs_output = matches!(cli.command, Cmd::Slice { .. } | Cmd::Detect { .. } | Cmd::Cv { .. });
    if needs_output && cli.output_dir.is_none() {
        usage_error("this subcommand requires --output-dir");
    }
    let command = match cli.command {
        Cmd::Stats { root } => {
            dataset_root = root.or(dataset_root);
            CommandConfig::Stats
        }
        Cmd::Slice {
            grid,
            overlap,
            min_visible,
            classes,
        } => CommandConfig::Slice {
            grid: GridSpec::with_overlap(grid.rows, grid.cols, overlap)?,
            policy: TileProjectionPolicy::new(min_visible)?,
            classes: match classes {
                Some(list) => registry
                    .parse_set(&list)?
                    .labels(&registry)
                    .into_iter()
                    .map(String::from)
                    .collect(),
                None => registry.labels().to_vec(),
            },
        },
        Cmd::Detect {
            pipeline,
            branch_a,
            branch_b,
            mode,
            continue_on_error,
        } => CommandConfig::Detect {
            pipeline: pipeline_config(&registry, &pipeline, mode)?,
            branch_a,
            branch_b,
            failure: if continue_on_error {
                FailurePolicy::Continue
            } else {
                FailurePolicy::FailFast
            },
        },
        Cmd::Eval {
            gt,
            detections,
            split,
            eval,
        } => {
            dataset_root = gt.or(dataset_root);
            CommandConfig::Eval {
                detections,
                split,
                eval: EvalConfig::new(eval.iou, eval.interp)?,
            }
        }
        Cmd::Cv {
            k,
            train_frac,
            pipeline,
            original_backend,
            branch_a,
            branch_b,
            eval,
        } => CommandConfig::Cv {
            cv: CvSpec::new(k, train_frac, cli.seed)?,
            original: pipeline_config(&registry, &pipeline, Mode::ResizeOnly)?,
            mspad: pipeline_config(&registry, &pipeline, Mode::Mspad)?,
            original_backend: original_backend.unwrap_or_else(|| branch_a.clone()),
            branch_a,
            branch_b,
            eval: EvalConfig::new(eval.iou, eval.interp)?,
        },
        Cmd::Rerun { .. } => unreachable!("handled before resolve"),
    };
    if dataset_root.is_none() {
        usage_error("no dataset root: pass it as an argument, with --dataset-root, or via MSPAD_DATASET_ROOT");
    }
    Ok(RunConfig {
        version: FORMAT_VERSION,
        dataset_root,
        registry,
        layout,
        output_dir: cli.output_dir,
        command,
    })
}

/// Writes via a temporary file in the same directory and renames it into place.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn load(config: &RunConfig) -> Result<DatasetIndex> {
    let root = config.dataset_root.as_deref().expect("resolved");
    let loaded = load_dataset(root, &config.registry, &config.layout)
        .with_context(|| format!("loading dataset from {}", root.display()))?;
    for (file, w) in &loaded.warnings {
        warn!("{file}: {w}");
    }
    info!(
        "loaded {} images, {} annotations",
        loaded.index.len(),
        loaded.index.annotation_count()
    );
    Ok(loaded.index)
}

#[derive(Serialize)]
struct Versioned<'a, T: Serialize> {
    version: u32,
    #[serde(flatten)]
    body: &'a T,
}

fn versioned<T: Serialize>(body: &T) -> Versioned<'_, T> {
    Versioned {
        version: FORMAT_VERSION,
        body,
    }
}

#[derive(Serialize)]
struct TileManifest<'a> {
    version: u32,
    image_id: &'a str,
    width: u32,
    height: u32,
    grid: GridSpec,
    policy: TileProjectionPolicy,
    tiles: Vec<TileEntry>,
}

#[derive(Serialize)]
struct TileEntry {
    tile: [u32; 2],
    region: [f64; 4],
    annotations: Vec<TileAnnotation>,
}

#[derive(Serialize)]
struct TileAnnotation {
    label: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct SplitManifest {
    test: Vec<String>,
}

fn execute(config: &RunConfig) -> Result<()> {
    let out = config.output_dir.as_deref();
    if let Some(dir) = out {
        write_json(&dir.join("config.json"), config)?;
    } else {
        info!("resolved configuration: {}", serde_json::to_string(config)?);
    }
    let index = load(config)?;
    let registry = &index.registry;

    match &config.command {
        CommandConfig::Stats => {
            let stats = compute_stats(&index)?;
            let table = stats.render_table();
            print!("{table}");
            if let Some(dir) = out {
                write_atomic(&dir.join("stats.txt"), table.as_bytes())?;
                write_json(&dir.join("stats.json"), &versioned(&stats))?;
            }
        }
        CommandConfig::Slice { grid, policy, classes } => {
            let dir = out.expect("checked").join("tiles");
            let set = registry.parse_set(&classes.join(","))?;
            for rec in index.images() {
                let tiles = make_grid(rec.width, rec.height, *grid)
                    .with_context(|| format!("image {}", rec.image_id))?;
                let projected = project_annotations(rec, &tiles, *policy, &set);
                let manifest = TileManifest {
                    version: FORMAT_VERSION,
                    image_id: &rec.image_id,
                    width: rec.width,
                    height: rec.height,
                    grid: *grid,
                    policy: *policy,
                    tiles: projected
                        .iter()
                        .map(|t| TileEntry {
                            tile: [t.tile.id.row, t.tile.id.col],
                            region: t.tile.region.to_array(),
                            annotations: t
                                .annotations
                                .iter()
                                .map(|a| TileAnnotation {
                                    label: registry.label(a.class_id).unwrap_or_default().to_string(),
                                    bbox: a.bbox.to_array(),
                                })
                                .collect(),
                        })
                        .collect(),
                };
                write_json(&dir.join(format!("{}.json", rec.image_id)), &manifest)?;
            }
            println!("wrote {} tile manifests to {}", index.len(), dir.display());
        }
        CommandConfig::Detect {
            pipeline,
            branch_a,
            branch_b,
            failure,
        } => {
            let a = branch_a.build(registry)?;
            let b = branch_b.build(registry)?;
            let run = run_dataset(&index, pipeline, a.as_ref(), b.as_ref(), *failure)?;
            let dir = out.expect("checked").join("detections");
            for (id, dets) in &run.detections {
                let rec = index.get(id).expect("ids come from the index");
                write_json(&dir.join(format!("{id}.json")), &to_document(rec, dets, registry))?;
            }
            for e in &run.failures {
                eprintln!("warning: {e}");
            }
            println!(
                "wrote {} detection documents to {} ({} failed)",
                run.detections.len(),
                dir.display(),
                run.failures.len()
            );
        }
        CommandConfig::Eval {
            detections,
            split,
            eval,
        } => {
            let gt = match split {
                Some(p) => {
                    let m: SplitManifest = serde_json::from_str(
                        &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                    )?;
                    index.subset(m.test.iter().map(String::as_str))
                }
                None => index.clone(),
            };
            let mut dets = read_detections(detections, registry)?;
            if split.is_some() {
                // documents for images outside the test set are not scored
                dets.retain(|id, _| gt.get(id).is_some() || index.get(id).is_none());
            }
            let report = evaluate(&gt, &dets, eval)?;
            let table = report.render_table();
            print!("{table}");
            if let Some(dir) = out {
                write_atomic(&dir.join("eval_report.txt"), table.as_bytes())?;
                write_json(&dir.join("eval_report.json"), &versioned(&report))?;
            }
        }
        CommandConfig::Cv {
            cv,
            original,
            mspad,
            original_backend,
            branch_a,
            branch_b,
            eval,
        } => {
            let orig = original_backend.build(registry)?;
            let a = branch_a.build(registry)?;
            let b = branch_b.build(registry)?;
            let report = run_monte_carlo(
                &index,
                cv,
                original,
                mspad,
                &ModeBackends {
                    resized: orig.as_ref(),
                    tiled: orig.as_ref(),
                },
                &ModeBackends {
                    resized: a.as_ref(),
                    tiled: b.as_ref(),
                },
                eval,
            )?;
            let dir = out.expect("checked");
            for r in &report.runs {
                write_json(
                    &dir.join("splits").join(format!("run_{:02}.json", r.split.run + 1)),
                    &versioned(&r.split),
                )?;
            }
            let table = report.render_table();
            print!("{table}");
            write_atomic(&dir.join("cv_report.txt"), table.as_bytes())?;
            write_json(&dir.join("cv_report.json"), &report)?;
        }
    }
    Ok(())
}

fn read_detections(dir: &Path, registry: &ClassRegistry) -> Result<BTreeMap<String, Vec<ScoredBox>>> {
    let mut out = BTreeMap::new();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    for p in paths {
        let doc: DetectionDocument = serde_json::from_str(&fs::read_to_string(&p)?)
            .with_context(|| format!("parsing {}", p.display()))?;
        let dets = doc
            .global_detections(registry)
            .with_context(|| format!("{}", p.display()))?;
        if out.insert(doc.image_id.clone(), dets).is_some() {
            bail!("image {} appears in more than one detection document", doc.image_id);
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    env_logger::Builder::new()
        .filter_level(match cli.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        })
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }

    let result = match &cli.command {
        Cmd::Rerun { config } => {
            let config_path = config.clone();
            let output_override = cli.output_dir.clone();
            fs::read_to_string(&config_path)
                .with_context(|| format!("reading {}", config_path.display()))
                .and_then(|t| Ok(serde_json::from_str::<RunConfig>(&t)?))
                .and_then(|mut c| {
                    if output_override.is_some() {
                        c.output_dir = output_override;
                    }
                    execute(&c)
                })
        }
        _ => resolve(cli).and_then(|c| execute(&c)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
