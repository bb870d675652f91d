use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sweepforge::dataset::{self, GenerationConfig, SERIES_META_FILE};
use sweepforge::metrics;
use sweepforge::phantom::{generate_phantom, PhantomSpec};
use sweepforge::sweep::{
    frame_geometry, load_reference_sweep, place_sweep, slice_series, synth_reference_sweep, PlacementOptions,
    ReferenceSweep, SweepParams, DEFAULT_LAMBDA,
};
use sweepforge::synthesis::{ModalityCombo, SynthesisParams, SynthesizerSpec};
use sweepforge::volume::{load_case, save_case, CaseLoadOptions};
use sweepforge::Error;

#[derive(Parser)]
#[command(name = "sweepforge", version, about = "Synthetic ultrasound sweep datasets from labelled MR cases")]
struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// More log output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write an ellipsoidal phantom case as NIfTI files.
    Phantom {
        /// Phantom description (JSON); defaults to the built-in phantom.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Place one sweep on a case and print the placement.
    Place {
        #[command(flatten)]
        case: CaseArgs,
        #[command(flatten)]
        placement: PlaceArgs,
    },
    /// Generate a full training set.
    Generate {
        #[command(flatten)]
        case: CaseArgs,
        /// Generation config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; defaults to the number of logical cores.
        #[arg(long)]
        jobs: Option<usize>,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// `procedural` or `exec:<path>`; overrides the config.
        #[arg(long)]
        synth: Option<SynthesizerSpec>,
        /// Case identifier used in seeding; defaults to the case directory name.
        #[arg(long)]
        case_id: Option<String>,
    },
    /// Place, slice and synthesize a single series.
    Synthesize {
        #[command(flatten)]
        case: CaseArgs,
        #[command(flatten)]
        placement: PlaceArgs,
        /// Channels joined by `-`, e.g. `ceT1-FLAIR`.
        #[arg(long)]
        combo: ModalityCombo,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "procedural")]
        synth: SynthesizerSpec,
        /// External synthesizer timeout in seconds.
        #[arg(long, default_value_t = 300)]
        timeout: u64,
    },
    /// Dice and ASSD between same-named prediction and ground-truth masks.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Pixel spacing in mm.
        #[arg(long, default_value_t = 0.5)]
        spacing: f64,
        /// Where metrics.csv and summary.json go; defaults to the prediction directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a generated dataset against its manifest.
    Validate { dir: PathBuf },
    /// Summarize a dataset manifest.
    Info { dir: PathBuf },
}

#[derive(Args)]
struct CaseArgs {
    /// Case directory with ceT1/T2/FLAIR, tumor and brain_mask NIfTI files.
    #[arg(long)]
    case: PathBuf,
    /// Isotropic resampling target in mm.
    #[arg(long, default_value_t = 0.5)]
    resample_mm: f64,
    /// Keep the native grid.
    #[arg(long, conflicts_with = "resample_mm")]
    no_resample: bool,
}

#[derive(Args)]
struct PlaceArgs {
    /// `default` or a reference sweep JSON file.
    #[arg(long, default_value = "default")]
    sweep: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Contact-point length scale in mm².
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
}

impl CaseArgs {
    fn load(&self) -> Result<sweepforge::volume::CaseData, Error> {
        let opts = CaseLoadOptions {
            resample_mm: (!self.no_resample).then_some(self.resample_mm),
            ..Default::default()
        };
        log::info!("loading case {}", self.case.display());
        load_case(&self.case, &opts)
    }

    fn id(&self) -> String {
        self.case
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "case".into())
    }
}

impl PlaceArgs {
    fn sweep(&self) -> Result<ReferenceSweep, Error> {
        if self.sweep == "default" {
            synth_reference_sweep(&SweepParams::default())
        } else {
            load_reference_sweep(Path::new(&self.sweep))
        }
    }

    fn options(&self) -> PlacementOptions {
        PlacementOptions {
            lambda: self.lambda,
            beta: self.beta,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn print_json(value: &impl serde::Serialize) {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn run(cli: &Cli) -> Result<ExitCode, Error> {
    match &cli.command {
        Command::Phantom { spec, out, seed } => {
            let spec = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
                    serde_json::from_str::<PhantomSpec>(&text)
                        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?
                }
                None => PhantomSpec::default(),
            };
            let case = generate_phantom(&spec, *seed)?;
            save_case(&case, out)?;
            if cli.json {
                print_json(&json!({"out": out, "dims": spec.dims, "spacing_mm": spec.spacing_mm}));
            } else {
                println!("wrote phantom case to {}", out.display());
            }
        }
        Command::Place { case, placement } => {
            let data = case.load()?;
            let sweep = placement.sweep()?;
            let mut rng = ChaCha8Rng::seed_from_u64(placement.seed);
            let p = place_sweep(&data, &sweep, &placement.options(), &mut rng)?;
            print_json(&p);
        }
        Command::Generate {
            case,
            config,
            out,
            jobs,
            seed,
            synth,
            case_id,
        } => {
            let mut cfg = match config {
                Some(path) => GenerationConfig::load(path)?,
                None => GenerationConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.master_seed = *seed;
            }
            if let Some(synth) = synth {
                cfg.synthesizer = synth.clone();
            }
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let data = case.load()?;
            let id = case_id.clone().unwrap_or_else(|| case.id());
            let start = std::time::Instant::now();
            let manifest = dataset::generate_dataset(&data, &id, &cfg, out, jobs)?;
            log::info!("generated {} series in {:.1} s", manifest.series.len(), start.elapsed().as_secs_f64());
            if cli.json {
                print_json(&json!({"out": out, "series": manifest.series.len(), "case_id": id}));
            } else {
                println!("wrote {} series to {}", manifest.series.len(), out.display());
            }
        }
        Command::Synthesize {
            case,
            placement,
            combo,
            tau,
            out,
            synth,
            timeout,
        } => {
            let data = case.load()?;
            let sweep = placement.sweep()?;
            let mut rng = ChaCha8Rng::seed_from_u64(placement.seed);
            let p = place_sweep(&data, &sweep, &placement.options(), &mut rng)?;
            let series = slice_series(&data, &p, &sweep, &combo.channels())?;
            let synthesizer = synth.build(&SynthesisParams::default(), Duration::from_secs(*timeout))?;
            let images = synthesizer.synthesize(&series, *tau, placement.seed)?;
            std::fs::create_dir_all(out).map_err(|e| Error::InvalidArgument(format!("{}: {e}", out.display())))?;
            dataset::write_series(out, &images, &series.labels)?;
            let meta = json!({
                "combo": combo,
                "tau": tau,
                "seed": placement.seed,
                "synthesizer": synthesizer.describe(),
                "reference_sweep": sweep.to_file_repr(),
                "placement": p,
                "pixel_mm": series.pixel_mm,
                "geometry": frame_geometry(&sweep, &p.transform),
            });
            let meta_path = out.join(SERIES_META_FILE);
            std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("serializable"))
                .map_err(|e| Error::InvalidArgument(format!("{}: {e}", meta_path.display())))?;
            if cli.json {
                print_json(&json!({"out": out, "frames": images.len()}));
            } else {
                println!("wrote {} frames to {}", images.len(), out.display());
            }
        }
        Command::Evaluate { pred, gt, spacing, out } => {
            let eval = metrics::evaluate_dirs(pred, gt, *spacing)?;
            metrics::write_evaluation(&eval, out.as_deref().unwrap_or(pred))?;
            if cli.json {
                print_json(&eval.summary);
            } else {
                let s = &eval.summary;
                println!("slices: {}", s.slices);
                if let Some(d) = &s.dice {
                    println!("dice: median {:.4} (IQR {:.4})", d.median, d.iqr);
                }
                if let Some(a) = &s.assd_mm {
                    println!("assd: median {:.4} mm (IQR {:.4})", a.median, a.iqr);
                }
                println!("assd undefined: {}", s.assd_undefined);
            }
        }
        Command::Validate { dir } => {
            let report = dataset::validate_dataset(dir)?;
            if cli.json {
                print_json(&report);
            } else {
                println!(
                    "checked {} series, {} files: {} violations",
                    report.series_checked,
                    report.files_checked,
                    report.violations.len()
                );
                for v in &report.violations {
                    println!("  {}: {}", v.file, v.reason);
                }
            }
            if !report.is_valid() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Info { dir } => {
            let m = dataset::load_manifest(&dir.join(dataset::MANIFEST_FILE))?;
            let combos: Vec<String> = m.combos.iter().map(ModalityCombo::label).collect();
            let frames: usize = m.series.iter().map(|s| s.frame_count).sum();
            if cli.json {
                print_json(&json!({
                    "case_id": m.case_id,
                    "format_version": m.format_version,
                    "tool_version": m.tool_version,
                    "combos": combos,
                    "k": m.k,
                    "temperatures": m.temperatures,
                    "label_set": m.label_set,
                    "frame_shape": m.frame_shape,
                    "synthesizer": m.synthesizer,
                    "series": m.series.len(),
                    "frames": frames,
                }));
            } else {
                println!("case: {}", m.case_id);
                println!("format: {} (tool {})", m.format_version, m.tool_version);
                println!("combos: {}", combos.join(", "));
                println!("K: {}", m.k);
                println!("temperatures: {:?}", m.temperatures);
                println!("labels: {:?}", m.label_set);
                println!("frame shape: {}x{}", m.frame_shape[0], m.frame_shape[1]);
                println!("synthesizer: {}", m.synthesizer);
                println!("series: {} ({} frames)", m.series.len(), frames);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
