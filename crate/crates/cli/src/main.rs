//! `dopnet`: dataset generation, training, inference, evaluation, gradient
//! checks and overlay rendering.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use dopnet_core::layout::{layout_from_prediction, Layout, Prediction};
use dopnet_core::metrics::MetricReport;
use dopnet_core::model::DopNet;
use dopnet_core::render::render_overlay;
use dopnet_core::scene::{self, SceneSpec};
use dopnet_core::sphere::EquirectGrid;
use dopnet_core::suite::{self, GRAD_TOL};
use dopnet_core::train::{self, RunConfig, Sample};
use dopnet_core::Error;

#[derive(Parser)]
#[command(name = "dopnet", version, about = "Panoramic room-layout estimation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic Manhattan rooms with ray-cast ground truth.
    Gen {
        #[arg(long)]
        rooms: usize,
        /// Corner count (even, 4..=12).
        #[arg(long, default_value_t = 4)]
        corners: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Panorama size as HxW.
        #[arg(long, default_value = "256x512", value_parser = parse_size)]
        size: EquirectGrid,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overfit a fresh network on a generated dataset. Prints one JSON line
    /// of losses per step.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict horizon depth and room height for one panorama.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth. Files pair up in sorted order
    /// and may hold either a layout or a prediction.
    Eval {
        #[arg(long)]
        pred: String,
        #[arg(long)]
        gt: String,
        /// Grid used for corner and pixel error, as HxW.
        #[arg(long, default_value = "512x1024", value_parser = parse_size)]
        size: EquirectGrid,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every hand-written backward pass against finite differences.
    Gradcheck {
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = suite::DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw ground-truth (blue) and predicted (green) boundaries and the
    /// floor plan.
    Render {
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long, default_value = "256x512", value_parser = parse_size)]
        size: EquirectGrid,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_size(s: &str) -> Result<EquirectGrid, String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let h: usize = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    let w: usize = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    EquirectGrid::new(h, w).map_err(|e| e.to_string())
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numerical() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::from(Error::io(path, e)))
}

/// Reads a layout, or a prediction converted to one at its own width.
fn load_layout_like(path: &Path) -> Result<Layout, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let with_path = |e: Error| invalid(format!("{}: {e}", path.display()));
    if value.get("floor_polygon").is_some() {
        Layout::from_json(&text).map_err(with_path)
    } else {
        let pred = Prediction::from_json(&text).map_err(with_path)?;
        let n = pred.horizon_depth.len();
        let grid = EquirectGrid::new((n / 2).max(1), n).map_err(with_path)?;
        layout_from_prediction(&pred, grid).map_err(with_path)
    }
}

fn expand_glob(pattern: &str) -> Result<Vec<PathBuf>, Failure> {
    let paths = glob::glob(pattern).map_err(|e| invalid(format!("bad pattern {pattern:?}: {e}")))?;
    let mut out = paths
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| invalid(e.to_string()))?;
    out.sort();
    if out.is_empty() {
        return Err(invalid(format!("no files match {pattern:?}")));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen {
            rooms,
            corners,
            seed,
            size,
            out,
        } => {
            let spec = SceneSpec::new(seed, rooms, corners, size);
            let layouts = scene::gen(&spec, &out)?;
            eprintln!("wrote {} rooms to {}", layouts.len(), out.display());
        }
        Command::Train {
            data,
            steps,
            lr,
            channels,
            heads,
            seed,
            out,
        } => {
            let config = RunConfig {
                steps,
                lr,
                channels,
                heads,
                seed,
            };
            config.validate()?;
            let rooms = scene::load_dataset(&data)?;
            let height = rooms[0].image.dim(1);
            let model_config = config.model_config(height);
            model_config.validate()?;
            let samples = rooms
                .iter()
                .map(|r| Sample::from_room(r, &model_config))
                .collect::<dopnet_core::Result<Vec<_>>>()?;
            let stdout = std::io::stdout();
            let mut lines = stdout.lock();
            let mut write_err = None;
            let outcome = train::train(&config, &samples, |entry| {
                let line = serde_json::to_string(entry).expect("trace entries serialize");
                if let Err(e) = writeln!(lines, "{line}") {
                    write_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = write_err {
                return Err(invalid(format!("writing trace: {e}")));
            }
            outcome.net.params.save(&out)?;
            let first = outcome.trace.first().map(|e| e.loss.total).unwrap_or(f64::NAN);
            let last = outcome.trace.last().map(|e| e.loss.total).unwrap_or(f64::NAN);
            eprintln!("loss {first:.4} -> {last:.4}; weights saved to {}", out.display());
        }
        Command::Infer { weights, image, out } => {
            let net = DopNet::load(&weights)?;
            let img = scene::load_image(&image)?;
            let want = net.config.image_height;
            if img.dim(1) != want || img.dim(2) != 2 * want {
                return Err(invalid(format!(
                    "{}: image is {}x{}, weights expect {}x{}",
                    image.display(),
                    img.dim(1),
                    img.dim(2),
                    want,
                    2 * want
                )));
            }
            let pred = net.predict(&img)?.to_prediction();
            write_file(&out, &pred.to_json())?;
        }
        Command::Eval { pred, gt, size, out } => {
            let preds = expand_glob(&pred)?;
            let gts = expand_glob(&gt)?;
            if preds.len() != gts.len() {
                return Err(invalid(format!(
                    "{} prediction files but {} ground-truth files",
                    preds.len(),
                    gts.len()
                )));
            }
            let mut rows = Vec::new();
            let mut reports = Vec::new();
            for (p, g) in preds.iter().zip(&gts) {
                let report = MetricReport::evaluate(&load_layout_like(p)?, &load_layout_like(g)?, size)?;
                rows.push(json!({
                    "pred": p.display().to_string(),
                    "gt": g.display().to_string(),
                    "metrics": report,
                }));
                reports.push(report);
            }
            let mean = MetricReport::mean(&reports).expect("at least one pair");
            let doc = json!({ "pairs": rows, "mean": mean });
            write_file(&out, &serde_json::to_string_pretty(&doc).expect("json value"))?;
            println!("{}", serde_json::to_string(&mean).expect("json value"));
        }
        Command::Gradcheck { op, eps, seed } => {
            let reports = suite::run_suite(eps, seed, op.as_deref())?;
            let mut failed = Vec::new();
            for r in &reports {
                let pass = r.passed(GRAD_TOL);
                println!("{}", json!({ "report": r, "pass": pass }));
                if !pass {
                    failed.push(r.op_name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(Failure {
                    code: 2,
                    message: format!("gradient check failed for {}", failed.join(", ")),
                });
            }
        }
        Command::Render {
            layout,
            pred,
            size,
            out,
        } => {
            let gt = load_layout_like(&layout)?;
            let p = pred.as_deref().map(load_layout_like).transpose()?;
            let img = render_overlay(&gt, p.as_ref(), size)?;
            scene::save_png(&img, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
