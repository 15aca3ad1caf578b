//! `joda`: compile, inspect, simulate, and refine joint-dynamics fields.
//!
//! Every subcommand reads and writes the file formats owned by the library
//! crates; outputs are deterministic given their inputs (`propose` against a
//! live backend being the only exception). Failures print a single JSON
//! line to stderr and exit with 1 for validation errors, 2 for I/O, 3 for
//! network errors, and 4 for numerical divergence.

use clap::{Parser, Subcommand};
use joda_core::compiler::{compile, compile_raw, reference_magnitudes, JointContext};
use joda_core::diag::{
    analysis_json, equilibria, profile_grid, render_svg, stick_regions, RenderAnnotations,
};
use joda_core::field::{Channel, ComposedField, FieldError};
use joda_core::refine::{optimize, report_json, AdamConfig, ParamMask, ParamSet, RefineError};
use joda_core::schema::{
    parse_composed, parse_context, parse_proposal, parse_raw_proposal, serialize_composed,
    SchemaError,
};
use joda_core::sim::{
    make_baseline, parse_scenario, BaselineSpec, ForceSource, SimConfig, SimError, SimState,
    Simulator, Trajectory,
};
use joda_vlm::prompt::{ImageInput, PromptMode};
use joda_vlm::session::{iterate, IterationPolicy, SessionConfig};
use joda_vlm::transport::{Backend, HttpTransport};
use joda_vlm::VlmError;
use std::path::{Path, PathBuf};

/// Resolution of profile grids rendered or analyzed by the CLI.
const GRID_POINTS: usize = 201;

#[derive(Parser)]
#[command(
    name = "joda",
    version,
    about = "Compile, inspect, simulate, and refine joint-level dynamics fields"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a structured effect proposal against the schema and vocabulary.
    Validate {
        /// Proposal JSON file.
        proposal: PathBuf,
    },
    /// Compile a proposal against a joint context into a composed field.
    Compile {
        /// Joint context JSON file.
        #[arg(long)]
        context: PathBuf,
        /// Proposal JSON file (structured, or control points with --raw).
        #[arg(long)]
        proposal: PathBuf,
        /// Output composed-field JSON path.
        #[arg(short, long)]
        output: PathBuf,
        /// Treat the proposal as explicit per-channel control points.
        #[arg(long)]
        raw: bool,
    },
    /// Render a composed field's quasi-static profile as SVG.
    Plot {
        /// Composed-field JSON file.
        field: PathBuf,
        /// Output SVG path.
        #[arg(short, long)]
        output: PathBuf,
        /// Also write the profile grid as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Mark equilibria and shade stick regions.
        #[arg(long)]
        annotate_equilibria: bool,
    },
    /// Summarize equilibria, stick regions, and opening force as JSON.
    Analyze {
        /// Composed-field JSON file.
        field: PathBuf,
        /// Output JSON path.
        #[arg(short, long)]
        output: PathBuf,
        /// Report the force opposing motion toward low `s` instead.
        #[arg(long)]
        flip_open: bool,
    },
    /// Roll a scenario file out through a composed field.
    Simulate {
        /// Composed-field JSON file.
        field: PathBuf,
        /// Scenario JSON file (initial state, force source, step count).
        #[arg(long)]
        scenario: PathBuf,
        /// Output trajectory CSV path.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Replay a recorded trajectory's applied forces through a field.
    Interact {
        /// Composed-field JSON file.
        field: PathBuf,
        /// Recorded trajectory CSV; its forces and initial state are replayed.
        #[arg(long)]
        targets: PathBuf,
        /// Output trajectory CSV path.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Emit a reference baseline field for a joint context.
    Baseline {
        /// Baseline family.
        #[arg(long, value_parser = ["constant", "spring"])]
        kind: String,
        /// Joint context JSON file.
        #[arg(long)]
        context: PathBuf,
        /// Output composed-field JSON path.
        #[arg(short, long)]
        output: PathBuf,
        /// Friction cap in multiples of the context's friction reference
        /// (constant kind).
        #[arg(long, default_value_t = 0.3)]
        friction: f64,
        /// Damping coefficient in multiples of the damping reference
        /// (constant kind).
        #[arg(long, default_value_t = 0.1)]
        damping: f64,
        /// Peak restoring force in multiples of the force reference
        /// (spring kind).
        #[arg(long, default_value_t = 1.0)]
        peak: f64,
        /// Make the spring pull toward the high end of the range.
        #[arg(long)]
        toward_high_end: bool,
    },
    /// Fit field parameters to recorded trajectories by gradient descent.
    Optimize {
        /// Composed-field JSON file holding the initial parameters.
        field: PathBuf,
        /// Recorded trajectory CSV files to fit (all with one step size).
        #[arg(long, num_args = 1.., required = true)]
        targets: Vec<PathBuf>,
        /// Output report JSON path.
        #[arg(short, long)]
        output: PathBuf,
        /// Number of optimization iterations.
        #[arg(long, default_value_t = 50)]
        iters: usize,
        /// Learning rate in normalized parameter units.
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        /// Comma-separated parameter groups: cons_knots, damp_knots,
        /// cons_scale, fric_scale, damp_scale, anchors, limit_damping, all.
        #[arg(long, default_value = "all")]
        params: String,
        /// Also write the refined composed field here.
        #[arg(long)]
        write_field: Option<PathBuf>,
    },
    /// Run the model-in-the-loop proposal session against a live backend.
    Propose {
        /// Joint context JSON file.
        #[arg(long)]
        context: PathBuf,
        /// Directory of rendered joint states (sorted by file name).
        #[arg(long, conflicts_with = "no_images")]
        images: Option<PathBuf>,
        /// Proceed without any rendered images.
        #[arg(long)]
        no_images: bool,
        /// Chat backend style.
        #[arg(long, value_parser = ["openai", "gemini"])]
        backend: String,
        /// Model name (defaults to the backend's standard model).
        #[arg(long)]
        model: Option<String>,
        /// Endpoint base URL override (for proxies).
        #[arg(long)]
        base_url: Option<String>,
        /// Maximum proposal rounds.
        #[arg(long, default_value_t = 4)]
        rounds: usize,
        /// Ask for explicit control points instead of templates.
        #[arg(long)]
        raw: bool,
        /// Transcript root; artifacts land in `<output>/<joint>/round<k>/`.
        #[arg(short, long)]
        output: PathBuf,
        /// External `svg-to-png <in> <out>` converter for feedback images.
        #[arg(long)]
        svg_to_png: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ErrorKind {
    Validation,
    Io,
    Network,
    Divergence,
}

impl ErrorKind {
    fn code(self) -> i32 {
        match self {
            ErrorKind::Validation => 1,
            ErrorKind::Io => 2,
            ErrorKind::Network => 3,
            ErrorKind::Divergence => 4,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Validation => "validation",
            ErrorKind::Io => "io",
            ErrorKind::Network => "network",
            ErrorKind::Divergence => "divergence",
        }
    }
}

#[derive(Debug)]
struct CliError {
    kind: ErrorKind,
    message: String,
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Validation,
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Io,
            message: message.into(),
        }
    }

    fn json_line(&self) -> String {
        serde_json::json!({
            "error": self.message,
            "kind": self.kind.as_str(),
        })
        .to_string()
    }
}

impl From<SchemaError> for CliError {
    fn from(e: SchemaError) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<FieldError> for CliError {
    fn from(e: FieldError) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<RefineError> for CliError {
    fn from(e: RefineError) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let kind = match e {
            SimError::Diverged { .. } => ErrorKind::Divergence,
            _ => ErrorKind::Validation,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<VlmError> for CliError {
    fn from(e: VlmError) -> Self {
        let kind = match &e {
            VlmError::Http { .. }
            | VlmError::Network(_)
            | VlmError::MalformedResponse(_)
            | VlmError::Unparseable { .. } => ErrorKind::Network,
            VlmError::Io { .. } => ErrorKind::Io,
            VlmError::Field(_) => ErrorKind::Validation,
            VlmError::MissingKey
            | VlmError::UnknownBackend(_)
            | VlmError::NoImages
            | VlmError::TooLarge { .. }
            | VlmError::Policy(_) => ErrorKind::Validation,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn load_field(path: &Path) -> Result<ComposedField, CliError> {
    Ok(parse_composed(&read_file(path)?)?)
}

fn pretty(value: &serde_json::Value) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("report values are finite");
    text.push('\n');
    text
}

fn main() {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("{}", e.json_line());
            std::process::exit(e.kind.code());
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Validate { proposal } => {
            let doc = parse_proposal(&read_file(&proposal)?)?;
            println!(
                "ok: {} effect proposal(s) for {}",
                doc.effect_proposals.len(),
                doc.joint_summary.joint_name
            );
            Ok(())
        }
        Command::Compile {
            context,
            proposal,
            output,
            raw,
        } => {
            let ctx = parse_context(&read_file(&context)?)?;
            let text = read_file(&proposal)?;
            let field = if raw {
                compile_raw(&ctx, &parse_raw_proposal(&text)?)?
            } else {
                compile(&ctx, &parse_proposal(&text)?)?
            };
            write_file(&output, &serialize_composed(&field))
        }
        Command::Plot {
            field,
            output,
            csv,
            annotate_equilibria,
        } => {
            let field = load_field(&field)?;
            let grid = profile_grid(&field, GRID_POINTS);
            let annotations = if annotate_equilibria {
                RenderAnnotations {
                    title: Some(plot_title(&field.joint)),
                    equilibria: equilibria(&grid, &field),
                    stick_regions: stick_regions(&grid),
                    shade_stick_regions: true,
                }
            } else {
                RenderAnnotations {
                    title: Some(plot_title(&field.joint)),
                    equilibria: Vec::new(),
                    stick_regions: Vec::new(),
                    shade_stick_regions: false,
                }
            };
            write_file(&output, &render_svg(&grid, &annotations))?;
            if let Some(csv_path) = csv {
                write_file(&csv_path, &grid.to_csv())?;
            }
            Ok(())
        }
        Command::Analyze {
            field,
            output,
            flip_open,
        } => {
            let field = load_field(&field)?;
            let grid = profile_grid(&field, GRID_POINTS);
            write_file(&output, &pretty(&analysis_json(&grid, &field, flip_open)))
        }
        Command::Simulate {
            field,
            scenario,
            output,
        } => {
            let field = load_field(&field)?;
            let mut scenario = parse_scenario(&read_file(&scenario)?, &field)?;
            let sim = Simulator::new(&field, &scenario.config);
            let trajectory =
                sim.rollout(scenario.initial, &mut scenario.source, scenario.n_steps)?;
            write_file(&output, &trajectory.to_csv())
        }
        Command::Interact {
            field,
            targets,
            output,
        } => {
            let field = load_field(&field)?;
            let recorded = Trajectory::from_csv(&read_file(&targets)?)?;
            let first = &recorded.samples[0];
            let initial = SimState {
                t: first.t,
                q: first.q,
                v: first.v,
            };
            // Replay the recorded applied force (external plus hand) at each
            // step through this field.
            let forces: Vec<f64> = recorded
                .samples
                .iter()
                .take(recorded.samples.len() - 1)
                .map(|s| s.f_ext + s.f_hand)
                .collect();
            let n_steps = forces.len();
            let config = SimConfig {
                dt: recorded.dt,
                ..SimConfig::default()
            };
            let sim = Simulator::new(&field, &config);
            let trajectory = sim.rollout(initial, &mut ForceSource::Samples(forces), n_steps)?;
            write_file(&output, &trajectory.to_csv())
        }
        Command::Baseline {
            kind,
            context,
            output,
            friction,
            damping,
            peak,
            toward_high_end,
        } => {
            let ctx = parse_context(&read_file(&context)?)?;
            let refs = reference_magnitudes(&ctx);
            let spec = match kind.as_str() {
                "constant" => BaselineSpec::ConstantDrag {
                    friction: friction * refs.reference_for(Channel::FrictionMax),
                    damping: damping * refs.reference_for(Channel::Damping),
                },
                _ => BaselineSpec::LinearSpring {
                    a: 0.0,
                    b: 1.0,
                    peak: peak * refs.reference_for(Channel::Conservative),
                    toward_high_end,
                },
            };
            let field = make_baseline(&ctx, &spec)?;
            write_file(&output, &serialize_composed(&field))
        }
        Command::Optimize {
            field,
            targets,
            output,
            iters,
            lr,
            params,
            write_field,
        } => {
            let field = load_field(&field)?;
            let mask = ParamMask::parse_list(&params)?;
            let set = ParamSet::new(&field, &mask)?;
            let trajectories = targets
                .iter()
                .map(|p| Ok(Trajectory::from_csv(&read_file(p)?)?))
                .collect::<Result<Vec<_>, CliError>>()?;
            let config = SimConfig {
                dt: trajectories[0].dt,
                ..SimConfig::default()
            };
            let adam = AdamConfig {
                lr,
                ..AdamConfig::default()
            };
            let result = optimize(&set, &trajectories, &config, &adam, iters)?;
            write_file(&output, &pretty(&report_json(&set, &result)))?;
            if let Some(path) = write_field {
                let refined = set.realize(&result.theta_best)?;
                write_file(&path, &serialize_composed(&refined))?;
            }
            Ok(())
        }
        Command::Propose {
            context,
            images,
            no_images,
            backend,
            model,
            base_url,
            rounds,
            raw,
            output,
            svg_to_png,
        } => {
            let ctx = parse_context(&read_file(&context)?)?;
            let backend = Backend::parse(&backend)
                .ok_or_else(|| CliError::from(VlmError::UnknownBackend(backend.clone())))?;
            let image_input = match (images, no_images) {
                (Some(dir), _) => ImageInput::Files(list_images(&dir)?),
                (None, true) => ImageInput::NoImages,
                (None, false) => {
                    return Err(CliError::validation("pass --images <dir> or --no-images"))
                }
            };
            let transport = HttpTransport::from_env(backend, model, base_url)?;
            let config = SessionConfig {
                mode: if raw {
                    PromptMode::Raw
                } else {
                    PromptMode::Template
                },
                policy: IterationPolicy {
                    max_rounds: rounds,
                    ..IterationPolicy::default()
                },
                grid_points: GRID_POINTS,
                svg_to_png,
            };
            let outcome = iterate(&ctx, &image_input, &transport, &config, &output)?;
            let final_path = outcome.run_dir.join("final_composed.json");
            write_file(&final_path, &serialize_composed(&outcome.field))?;
            println!(
                "{}",
                serde_json::json!({
                    "completed": outcome.completed,
                    "final_field": final_path.display().to_string(),
                    "rounds": outcome.rounds.len(),
                })
            );
            Ok(())
        }
    }
}

fn plot_title(joint: &JointContext) -> String {
    format!("{} / {}", joint.asset_name, joint.joint_name)
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "webp", "gif"];

/// Image files in `dir`, sorted by file name (joint-coordinate order by
/// naming convention).
fn list_images(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::validation(format!(
            "no images found in {}",
            dir.display()
        )));
    }
    Ok(paths)
}
