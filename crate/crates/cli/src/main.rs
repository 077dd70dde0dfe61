use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nc_core::dataselect::{select_training_distribution, MixtureGrid, MixtureTrajectories};
use nc_core::harness::presets;
use nc_core::harness::run_scenario;
use nc_core::io::{write_moment_rows, MomentRow, NcadContainer, ResolvedRun};
use nc_core::{
    aggregated_moments_fast, select_two_sided, select_unweighted, select_weighted, ActivationMatrix, Aggregation, Domain,
    FlattenMode, Moment, Trajectory,
};

#[derive(Parser)]
#[command(name = "nc", version, about = "Checkpoint and data selection from activation-trajectory coherence")]
struct Cli {
    /// Base seed for every random choice (synthetic benchmarks).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Weighted,
    Unweighted,
    TwoSided,
}

#[derive(Clone, Copy, ValueEnum)]
enum Agg {
    Mean,
    PositiveFraction,
}

impl From<Agg> for Aggregation {
    fn from(a: Agg) -> Self {
        match a {
            Agg::Mean => Aggregation::Mean,
            Agg::PositiveFraction => Aggregation::PositiveFraction,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    A,
    B,
}

#[derive(Clone, Copy, ValueEnum)]
enum Flatten {
    Full,
    SpatialMean,
}

#[derive(Subcommand)]
enum Command {
    /// Aggregated moments of every tensor in an NCAD container.
    Moments {
        ncad: PathBuf,
        /// Write the moment table here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        flatten: Flatten,
    },
    /// Pick a checkpoint from a run manifest with source and target domains.
    SelectCheckpoint {
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "weighted")]
        mode: Mode,
        /// Source-validation optimum, required by two-sided mode.
        #[arg(long)]
        valid_index: Option<usize>,
        #[arg(long, value_enum, default_value = "mean")]
        agg: Agg,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Choose between two pre-training candidates along a mixture grid.
    SelectData {
        /// Manifest holding candidate A's batch and the target batch.
        manifest_a: PathBuf,
        /// Manifest holding candidate B's batch and the target batch, same grid.
        manifest_b: PathBuf,
        #[arg(long, value_enum, default_value = "mean")]
        agg: Agg,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Synthetic Scenario A/B benchmark on the reference task.
    SynthBench {
        #[arg(long, value_enum, default_value = "a")]
        scenario: Scenario,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 5)]
        n: usize,
        /// Full JSON report; the summary CSV goes to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Per-(layer, moment) trajectory curves as SVG.
    Plot {
        manifest: PathBuf,
        /// Min-max scale each curve to [0, 1] (display only).
        #[arg(long)]
        normalize: bool,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

enum Failure {
    /// Bad input: exit 1.
    Invalid(String),
    /// Anything else: exit 2.
    Internal(String),
}

impl From<nc_core::Error> for Failure {
    fn from(e: nc_core::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn write_out(path: Option<&Path>, text: &str) -> Outcome {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Internal(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::Internal(e.to_string()))
}

/// Splits `ckpt{i}/{layer}/{domain}`.
fn parse_name(name: &str) -> Option<(usize, &str, &str)> {
    let rest = name.strip_prefix("ckpt")?;
    let (idx, rest) = rest.split_once('/')?;
    let (layer, domain) = rest.rsplit_once('/')?;
    Some((idx.parse().ok()?, layer, domain))
}

fn moments(ncad: &Path, csv: Option<&Path>, flatten: Flatten) -> Outcome {
    let c = NcadContainer::read(ncad).map_err(|e| Failure::Invalid(format!("{}: {e}", ncad.display())))?;
    let mode = match flatten {
        Flatten::Full => FlattenMode::Full,
        Flatten::SpatialMean => FlattenMode::SpatialMean,
    };
    let mut rows = Vec::with_capacity(c.tensors.len());
    for t in &c.tensors {
        let (index, layer, tag) = parse_name(&t.name)
            .ok_or_else(|| Failure::Invalid(format!("tensor `{}` is not named ckpt{{i}}/{{layer}}/{{domain}}", t.name)))?;
        let domain = Domain::parse(tag)?;
        let dims: Vec<usize> = t.dims.iter().map(|&d| d as usize).collect();
        let m = ActivationMatrix::from_tensor(layer, domain.clone(), &dims, t.data.iter().map(|&v| f64::from(v)).collect(), mode)?;
        rows.push(MomentRow {
            index,
            omega: index as f64,
            domain,
            layer: layer.to_string(),
            moments: aggregated_moments_fast(&m)?,
        });
    }
    // grouped by domain, then checkpoint; layers keep container order
    rows.sort_by(|a, b| a.domain.tag().cmp(&b.domain.tag()).then(a.index.cmp(&b.index)));
    write_out(csv, &write_moment_rows(&rows)?)
}

fn source_target(run: &ResolvedRun) -> Result<(Trajectory, Trajectory), Failure> {
    Ok((run.trajectory(&Domain::Source)?, run.trajectory(&Domain::Target)?))
}

fn select_checkpoint(manifest: &Path, mode: Mode, valid_index: Option<usize>, agg: Agg, report: Option<&Path>) -> Outcome {
    let run = ResolvedRun::load(manifest)?;
    let (src, tgt) = source_target(&run)?;
    let result = match mode {
        Mode::Weighted => select_weighted(&src, &tgt)?,
        Mode::Unweighted => select_unweighted(&src, &tgt)?,
        Mode::TwoSided => {
            let k = valid_index.ok_or_else(|| Failure::Invalid("two-sided mode needs --valid-index".into()))?;
            select_two_sided(&src, &tgt, k, agg.into())?
        }
    };
    println!(
        "chosen_index {} omega {} no_divergence {}",
        result.chosen_index, result.chosen_omega, result.no_divergence
    );
    if let Some(p) = report {
        write_out(Some(p), &to_json(&result)?)?;
    }
    Ok(())
}

fn candidate_of(run: &ResolvedRun, path: &Path) -> Result<(String, Trajectory, Trajectory), Failure> {
    let domains = run.domains()?;
    let names: Vec<&String> = domains
        .iter()
        .filter_map(|d| match d {
            Domain::Candidate(n) => Some(n),
            _ => None,
        })
        .collect();
    let [name] = names.as_slice() else {
        return Err(Failure::Invalid(format!("{} must hold exactly one candidate domain", path.display())));
    };
    let cand = run.trajectory(&Domain::Candidate((*name).clone()))?;
    let target = run.trajectory(&Domain::Target)?;
    Ok(((*name).clone(), cand, target))
}

fn select_data(a: &Path, b: &Path, agg: Agg, report: Option<&Path>) -> Outcome {
    let (ra, rb) = (ResolvedRun::load(a)?, ResolvedRun::load(b)?);
    if ra.manifest.probe_hash != rb.manifest.probe_hash {
        return Err(Failure::Invalid("the two manifests were built from different target batches".into()));
    }
    if ra.manifest.omegas != rb.manifest.omegas {
        return Err(Failure::Invalid("the two manifests use different mixture grids".into()));
    }
    let (name_a, ta, target) = candidate_of(&ra, a)?;
    let (name_b, tb, _) = candidate_of(&rb, b)?;
    let grid = MixtureGrid::from_trajectories(name_a, name_b, MixtureTrajectories { a: ta, b: tb, target })?;
    let result = select_training_distribution(&grid, agg.into())?;
    println!("winner {} nc_ab {} nc_ba {}", result.winner, result.nc_ab, result.nc_ba);
    if let Some(p) = report {
        write_out(Some(p), &to_json(&result)?)?;
    }
    Ok(())
}

fn synth_bench(scenario: Scenario, seeds: usize, n: usize, seed: u64, report: Option<&Path>) -> Outcome {
    let cfg = match scenario {
        Scenario::A => presets::scenario_a(),
        Scenario::B => presets::scenario_b(),
    };
    let rep = run_scenario(&cfg, n, seeds, seed).map_err(|e| match e {
        nc_core::Error::Invalid(_) => Failure::Invalid(e.to_string()),
        other => Failure::Internal(other.to_string()),
    })?;
    print!("{}", rep.summary_csv()?);
    if let Some(p) = report {
        write_out(Some(p), &rep.to_json()?)?;
    }
    Ok(())
}

const PANEL_W: f64 = 220.0;
const PANEL_H: f64 = 140.0;
const PAD: f64 = 30.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn min_max(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

fn plot_svg(trajs: &[Trajectory], normalize: bool) -> String {
    let first = &trajs[0];
    let (n_layers, tau) = (first.n_layers(), first.tau().max(1));
    let width = PAD + 4.0 * (PANEL_W + PAD);
    let height = PAD + n_layers as f64 * (PANEL_H + PAD) + 20.0 * trajs.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    for (l, layer) in first.layers().iter().enumerate() {
        for (k, moment) in Moment::ALL.iter().enumerate() {
            let x0 = PAD + k as f64 * (PANEL_W + PAD);
            let y0 = PAD + l as f64 * (PANEL_H + PAD);
            let _ = writeln!(s, r##"<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#999"/>"##);
            let _ = writeln!(s, r#"<text x="{x0}" y="{}">{layer} {moment:?}</text>"#, y0 - 4.0);
            let series: Vec<Vec<f64>> = trajs.iter().map(|t| t.series(l, *moment)).collect();
            let shared = min_max(&series.concat());
            for (d, ys) in series.iter().enumerate() {
                let (lo, hi) = if normalize { min_max(ys) } else { shared };
                let pts: Vec<String> = ys
                    .iter()
                    .enumerate()
                    .map(|(i, y)| {
                        let px = x0 + PANEL_W * i as f64 / tau as f64;
                        let py = y0 + PANEL_H * (1.0 - (y - lo) / (hi - lo));
                        format!("{px:.2},{py:.2}")
                    })
                    .collect();
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
                    COLORS[d % COLORS.len()],
                    pts.join(" ")
                );
            }
        }
    }
    let legend_y = PAD + n_layers as f64 * (PANEL_H + PAD);
    for (d, t) in trajs.iter().enumerate() {
        let y = legend_y + 20.0 * d as f64;
        let _ = writeln!(
            s,
            r#"<text x="{PAD}" y="{y}" fill="{}">{}</text>"#,
            COLORS[d % COLORS.len()],
            t.domain()
        );
    }
    s.push_str("</svg>\n");
    s
}

fn plot(manifest: &Path, normalize: bool, svg: Option<&Path>) -> Outcome {
    let run = ResolvedRun::load(manifest)?;
    let trajs = run
        .domains()?
        .iter()
        .map(|d| run.trajectory(d))
        .collect::<nc_core::Result<Vec<_>>>()?;
    if trajs.is_empty() {
        return Err(Failure::Invalid("manifest lists no domains".into()));
    }
    write_out(svg, &plot_svg(&trajs, normalize))
}

fn configure_threads() -> Outcome {
    if let Ok(v) = std::env::var("NC_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Invalid(format!("NC_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Internal(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    configure_threads()?;
    match cli.command {
        Command::Moments { ncad, csv, flatten } => moments(&ncad, csv.as_deref(), flatten),
        Command::SelectCheckpoint { manifest, mode, valid_index, agg, report } => {
            select_checkpoint(&manifest, mode, valid_index, agg, report.as_deref())
        }
        Command::SelectData { manifest_a, manifest_b, agg, report } => {
            select_data(&manifest_a, &manifest_b, agg, report.as_deref())
        }
        Command::SynthBench { scenario, seeds, n, report } => synth_bench(scenario, seeds, n, cli.seed, report.as_deref()),
        Command::Plot { manifest, normalize, svg } => plot(&manifest, normalize, svg.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}
