use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use tailor_core::gradsuite::{run_suite, TOLERANCE};
use tailor_core::pattern::io::{parse_pattern, pattern_to_svg, probs_to_pgm, read_xyz, serialize_pattern};
use tailor_core::prompt::{PanelVocabulary, SketchFile};
use tailor_core::traingen::eval::{evaluate_personalized, evaluate_standard, TransferCase};
use tailor_core::traingen::train::write_curve_csv;
use tailor_core::traingen::{generate_dataset, parse_families, read_dataset, train, write_dataset, TrainConfig};
use tailor_core::{Instruction, PatternModel, Prediction, PromptMode};

type Result<T> = std::result::Result<T, Box<dyn Error>>;

#[derive(Parser, Debug)]
#[command(name = "tailor", version, about = "Sewing patterns from garment point clouds")]
struct Cli {
    /// Seed for sampling, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-sample evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Text,
    Sketch,
}

impl From<Mode> for PromptMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Text => PromptMode::Text,
            Mode::Sketch => PromptMode::Sketch,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalMode {
    Standard,
    Personalized,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset directory.
    GenData {
        /// Comma-separated families, or `seen`, `unseen`, `all`.
        #[arg(long, default_value = "seen")]
        families: String,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 512)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// key = value run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: PathBuf,
        /// Loss curve as CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Predict a pattern with every slot active.
    Infer {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Text)]
        mode: Mode,
        #[arg(long)]
        out_pattern: PathBuf,
        #[arg(long)]
        out_svg: Option<PathBuf>,
        /// Directory for per-slot mask images (PGM).
        #[arg(long)]
        mask_dir: Option<PathBuf>,
    },
    /// Predict only the listed panel classes.
    Personalize {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated panel class names.
        #[arg(long)]
        activate: String,
        /// Sketch file; listed classes with a sketch use it, the rest use text.
        #[arg(long)]
        sketch: Option<PathBuf>,
        #[arg(long)]
        out_pattern: PathBuf,
        #[arg(long)]
        out_svg: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalMode::Standard)]
        mode: EvalMode,
        /// Transfer cases, one `source,target` pair per line.
        #[arg(long, required_if_eq("mode", "personalized"))]
        cases: Option<PathBuf>,
        /// Instruction kind; personalized mode runs both when omitted.
        #[arg(long, value_enum)]
        prompt: Option<Mode>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw a pattern file as SVG.
    Render {
        #[arg(long)]
        pattern: PathBuf,
        #[arg(long)]
        out_svg: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::GenData {
            families,
            count,
            points,
            out,
        } => {
            let families = parse_families(&families)?;
            let data = generate_dataset(&families, count, points, seed);
            write_dataset(&out, &data)?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Train {
            data,
            config,
            out_checkpoint,
            curve,
        } => {
            let mut cfg = match config {
                Some(path) => TrainConfig::parse(&read_text(&path)?)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let data = read_dataset(&data)?;
            let mut model = PatternModel::new(cfg.model.clone(), cfg.seed)?;
            let start = Instant::now();
            let report = train(&mut model, &data, &cfg, |e| {
                if e.epoch % 10 == 0 {
                    eprintln!(
                        "epoch {:5}  {:8.1}s  total {:.5}  mask {:.5}",
                        e.epoch,
                        start.elapsed().as_secs_f64(),
                        e.parts.total,
                        e.parts.mask
                    );
                }
            })?;
            model.save(&out_checkpoint)?;
            if let Some(path) = curve {
                let mut buf = Vec::new();
                write_curve_csv(&mut buf, &report.curve)?;
                write_file(&path, &buf)?;
            }
            if let Some(last) = report.curve.last() {
                println!(
                    "trained {} epochs, final total {:.6}, mask {:.6}",
                    report.curve.len(),
                    last.parts.total,
                    last.parts.mask
                );
            }
        }
        Command::Infer {
            cloud,
            checkpoint,
            mode,
            out_pattern,
            out_svg,
            mask_dir,
        } => {
            let model = PatternModel::load(&checkpoint)?;
            let points = read_xyz(&cloud).map_err(|e| at(&cloud, e))?;
            let instr = model.standard_instruction(mode.into())?;
            let pred = model.predict(&points, &instr, seed)?;
            write_prediction(&pred, &out_pattern, out_svg.as_deref())?;
            if let Some(dir) = mask_dir {
                fs::create_dir_all(&dir)?;
                let side = model.config.mask_size;
                for slot in &pred.slots {
                    let name = PanelVocabulary.name(slot.slot).unwrap_or("slot");
                    write_file(&dir.join(format!("{:02}_{name}.pgm", slot.slot)), &probs_to_pgm(side, side, &slot.mask_probs))?;
                }
            }
            println!("{} panels, {} stitches", pred.pattern.panels.len(), pred.pattern.stitches.len());
        }
        Command::Personalize {
            cloud,
            checkpoint,
            activate,
            sketch,
            out_pattern,
            out_svg,
        } => {
            let model = PatternModel::load(&checkpoint)?;
            let points = read_xyz(&cloud).map_err(|e| at(&cloud, e))?;
            let classes = PanelVocabulary.parse_list(&activate)?;
            if classes.is_empty() {
                return Err("--activate lists no classes".into());
            }
            let mut instr = Instruction::text(&classes)?;
            if let Some(path) = sketch {
                let file = SketchFile::read(&path).map_err(|e| at(&path, e))?;
                let mut sketches = Vec::new();
                for (name, s) in &file.sketches {
                    let c = PanelVocabulary.index(name)?;
                    if !classes.contains(&c) {
                        return Err(format!("sketch for `{name}`, which --activate does not list").into());
                    }
                    sketches.push((c, s.clone()));
                }
                let drawn = Instruction::sketch(&sketches, model.config.sketch_points)?;
                for (c, _) in &sketches {
                    instr.slots[*c] = drawn.slots[*c].clone();
                }
            }
            let pred = model.personalize(&points, &instr, seed)?;
            write_prediction(&pred, &out_pattern, out_svg.as_deref())?;
            println!("{} panels, {} stitches", pred.pattern.panels.len(), pred.pattern.stitches.len());
        }
        Command::Eval {
            data,
            checkpoint,
            mode,
            cases,
            prompt,
            out,
        } => {
            let model = PatternModel::load(&checkpoint)?;
            let data = read_dataset(&data)?;
            let report = match mode {
                EvalMode::Standard => {
                    let r = evaluate_standard(&model, &data, prompt.unwrap_or(Mode::Text).into(), cli.jobs)?;
                    serde_json::to_string_pretty(&r)?
                }
                EvalMode::Personalized => {
                    let path = cases.ok_or("--cases is required in personalized mode")?;
                    let cases = TransferCase::parse_list(&read_text(&path)?)?;
                    let modes = match prompt {
                        Some(m) => vec![m],
                        None => vec![Mode::Text, Mode::Sketch],
                    };
                    let mut results = Vec::new();
                    for m in modes {
                        results.extend(evaluate_personalized(&model, &data, &cases, m.into(), cli.jobs)?);
                    }
                    serde_json::to_string_pretty(&results)?
                }
            };
            println!("{report}");
            if let Some(path) = out {
                write_file(&path, report.as_bytes())?;
            }
        }
        Command::Render { pattern, out_svg } => {
            let pattern = parse_pattern(&pattern).map_err(|e| at(&pattern, e))?;
            write_file(&out_svg, pattern_to_svg(&pattern).as_bytes())?;
        }
        Command::Gradcheck => {
            let start = Instant::now();
            let entries = run_suite(seed)?;
            let mut worst: f64 = 0.0;
            let mut ok = true;
            for e in &entries {
                let pass = e.passes();
                ok &= pass;
                worst = worst.max(e.report.max_rel_error);
                println!(
                    "{:<18} {}  max rel error {:.3e}  checked {:5}  kinks {:3}  worst {}",
                    e.name,
                    if pass { "ok  " } else { "FAIL" },
                    e.report.max_rel_error,
                    e.report.checked,
                    e.report.straddled,
                    e.report.worst
                );
            }
            println!(
                "max relative error {worst:.3e} (tolerance {TOLERANCE:.0e}) in {:.1}s",
                start.elapsed().as_secs_f64()
            );
            if !ok {
                eprintln!("error: gradient check failed");
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn at(path: &Path, e: impl std::fmt::Display) -> Box<dyn Error> {
    format!("{}: {e}", path.display()).into()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| at(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| at(path, e))
}

fn write_prediction(pred: &Prediction, pattern: &Path, svg: Option<&Path>) -> Result<()> {
    serialize_pattern(&pred.pattern, pattern).map_err(|e| at(pattern, e))?;
    if let Some(svg) = svg {
        write_file(svg, pattern_to_svg(&pred.pattern).as_bytes())?;
    }
    Ok(())
}
