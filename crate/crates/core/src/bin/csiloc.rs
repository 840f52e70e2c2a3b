use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use csiloc::config::PipelineConfig;
use csiloc::csi::ChannelLayout;
use csiloc::eval::{
    cdf, location_sequences, null_count, reference_maps, score, survey_null_observations, sweep, test_field, test_walk,
    EvalReport, SweepAxes,
};
use csiloc::fingerprint::build_map_sequence;
use csiloc::hypothesis::generate;
use csiloc::io::{self, BeliefRecord, DataLayout};
use csiloc::nn::BeliefVector;
use csiloc::pipeline::{
    belief_ticks, common_depth, denoise_by_cell, null_sequences, predict_beliefs, refined_inputs, single_inputs, InputKind,
    Localization, PassOutput,
};
use csiloc::sim::CsiField;
use csiloc::walk::{select_trajectory, track_all};
use csiloc::{Error, Result};

#[derive(Parser)]
#[command(name = "csiloc", version, about = "CSI fingerprint-map localization")]
struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the survey, null-class spots and test walks.
    Simulate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Remove the affine phase component of a raw observation file.
    Sanitize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Drop outlying survey observations per grid cell.
    Denoise {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Where to log the rejected observations.
        #[arg(long)]
        rejected: Option<PathBuf>,
    },
    /// Stack denoised survey observations into fingerprint maps.
    BuildMap {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Maps to build; the shallowest cell's depth when omitted.
        #[arg(long)]
        m: Option<usize>,
    },
    /// Train the configured model on fingerprint maps.
    Train {
        #[arg(long)]
        maps: PathBuf,
        /// Survey observations outside the grid, for the null class.
        #[arg(long)]
        null: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Belief vectors for a test walk.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// A selected trajectory to place observations on the grid and
        /// query larger windows with.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Sample trajectory hypotheses from beliefs.
    Hypothesize {
        #[arg(long)]
        beliefs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track every hypothesis and select one trajectory.
    Track {
        #[arg(long)]
        hypotheses: PathBuf,
        /// Directory for trajectories.csv, rejections.csv and selected.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score localized walks against ground truth.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory with one walk_NNN subdirectory per walk holding
        /// beliefs.jsonl, hypotheses.csv and selected.csv.
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate over cell sizes, window sizes and speeds.
    Sweep {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            if let Error::Config { field, .. } = &e {
                line["field"] = field.as_str().into();
            }
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = PipelineConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate { out } => simulate(&cfg, &out.unwrap_or_else(|| cfg.paths.data_dir.clone())),
        Command::Sanitize { input, output } => {
            let file = io::read_observations(&input)?;
            let layout = file.layout;
            let clean = file.into_sanitized(&cfg.sanitize)?;
            io::write_observations(&output, layout, false, &clean)
        }
        Command::Denoise { input, output, rejected } => {
            let (layout, obs) = sanitized(&input)?;
            let summary = denoise_by_cell(&obs, &cfg.field.grid, &cfg.denoise)?;
            log::info!("kept {} of {} observations", summary.retained.len(), obs.len());
            if let Some(path) = rejected {
                io::write_rejected_observations(&path, &summary.rejected)?;
            }
            io::write_observations(&output, layout, false, &summary.retained)
        }
        Command::BuildMap { input, out, m } => {
            let (_, obs) = sanitized(&input)?;
            let grid = cfg.field.grid;
            let m = m.unwrap_or_else(|| common_depth(&obs, &grid));
            io::write_maps(&out, &build_map_sequence(&obs, &grid, m)?)
        }
        Command::Train { maps, null, model } => {
            let maps = io::read_maps(&maps)?;
            let mut samples = location_sequences(&maps, &cfg)?;
            if let Some(path) = null {
                let file = io::read_observations(&path)?;
                let obs = file.into_sanitized(&cfg.sanitize)?;
                samples.extend(null_sequences(&obs, &cfg.field.grid, cfg.model.sequence_length, cfg.input_warp()));
            }
            let (trained, report) = csiloc::eval::fit(&samples, &cfg)?;
            log::info!(
                "{} sequences, {} epochs, train accuracy {:.3}",
                samples.len(),
                report.epoch_losses.len(),
                report.train_accuracy
            );
            io::write_model(&model.unwrap_or_else(|| cfg.paths.model.clone()), &trained)
        }
        Command::Predict { model, input, out, trajectory } => {
            let model = io::read_model(&model.unwrap_or_else(|| cfg.paths.model.clone()))?;
            let (_, obs) = sanitized(&input)?;
            let ticks = belief_ticks(&obs, model.config().sequence_length, cfg.localize.belief_interval_ms);
            let selected = match &trajectory {
                Some(path) => io::read_selected(path)?,
                None => None,
            };
            let (inputs, sizes) = match selected {
                Some(sel) => {
                    if InputKind::of(&model) != InputKind::Proposal {
                        return Err(Error::InvalidInput("windowed refinement needs a proposal model".into()));
                    }
                    refined_inputs(&obs, &sel, &cfg.field.grid, &cfg.proposals, &cfg.query)?
                }
                None => {
                    if trajectory.is_some() {
                        log::warn!("no trajectory was selected; predicting from single observations");
                    }
                    (single_inputs(&model, &obs, &cfg.proposals), vec![1; obs.len()])
                }
            };
            let stream = predict_beliefs(&model, &inputs, &sizes, &obs, &ticks)?;
            let records: Vec<BeliefRecord> = stream
                .beliefs
                .into_iter()
                .zip(stream.times.iter().zip(&stream.native_sizes))
                .map(|(b, (&t_ms, &native_size))| BeliefRecord { t: b.t, t_ms, native_size, probs: b.probs })
                .collect();
            io::write_beliefs(&out, &records)
        }
        Command::Hypothesize { beliefs, out } => {
            let records = io::read_beliefs(&beliefs)?;
            let (beliefs, times) = split_beliefs(&records);
            let hypotheses = generate(&beliefs, &times, &cfg.field.grid, &cfg.hypothesis)?;
            io::write_hypotheses(&out, &hypotheses)
        }
        Command::Track { hypotheses, out } => {
            let hypotheses = io::read_hypotheses(&hypotheses, &cfg.field.grid)?;
            let results = track_all(&hypotheses, &cfg.filter)?;
            io::write_tracks(&out.join("trajectories.csv"), &out.join("rejections.csv"), &results)?;
            let selected = match select_trajectory(&results, &cfg.field.grid) {
                Ok(sel) => Some(sel),
                Err(e @ Error::AllRejected) => {
                    log::warn!("{e}");
                    None
                }
                Err(e) => return Err(e),
            };
            io::write_selected(&out.join("selected.csv"), selected.as_ref())
        }
        Command::Eval { data, runs, out } => {
            let data = DataLayout { dir: data.unwrap_or_else(|| cfg.paths.data_dir.clone()) };
            let grid = cfg.field.grid;
            let mut walks = Vec::new();
            for i in 0..cfg.experiment.walks {
                let run = runs.join(format!("walk_{i:03}"));
                let records = io::read_beliefs(&run.join("beliefs.jsonl"))?;
                let (beliefs, belief_times) = split_beliefs(&records);
                let hypotheses_path = run.join("hypotheses.csv");
                let hypotheses =
                    if hypotheses_path.exists() { io::read_hypotheses(&hypotheses_path, &grid)? } else { Vec::new() };
                let pass = PassOutput {
                    belief_times,
                    beliefs,
                    native_sizes: records.iter().map(|r| r.native_size).collect(),
                    hypotheses,
                    tracks: Vec::new(),
                    selected: io::read_selected(&run.join("selected.csv"))?,
                    failure: None,
                };
                let truth = io::read_truth(&data.truth(i))?;
                let gait = io::read_gait(&data.gait(i))?;
                walks.push(score(&Localization { passes: vec![pass] }, &truth, Some(&gait), &grid)?);
            }
            let report = EvalReport::from_walks(&walks);
            let out = out.unwrap_or_else(|| cfg.paths.output_dir.clone());
            let all = |f: fn(&csiloc::eval::WalkErrors) -> &Vec<f64>| walks.iter().flat_map(|w| f(w).clone()).collect::<Vec<_>>();
            io::write_report(&out.join("report.csv"), &report)?;
            io::write_cdf(&out.join("cdf.csv"), &cdf(&all(|w| &w.before)), &cdf(&all(|w| &w.after)))
        }
        Command::Sweep { out } => io::write_sweep(&out, &sweep(&cfg, &SweepAxes::default())?),
    }
}

fn sanitized(path: &Path) -> Result<(ChannelLayout, Vec<csiloc::csi::CsiObservation>)> {
    let file = io::read_observations(path)?;
    if file.raw {
        return Err(Error::InvalidInput(format!("{} holds raw phases; run sanitize first", path.display())));
    }
    Ok((file.layout, file.observations))
}

fn split_beliefs(records: &[BeliefRecord]) -> (Vec<BeliefVector>, Vec<i64>) {
    (records.iter().map(BeliefRecord::belief).collect(), records.iter().map(|r| r.t_ms).collect())
}

fn simulate(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let field = CsiField::generate(&cfg.field)?;
    let layout = cfg.field.layout;
    let data = DataLayout { dir: dir.to_path_buf() };
    let reference = field.reference_dataset(0.0, 0);
    io::write_observations(&data.reference(), layout, true, &reference)?;

    let (maps, _) = reference_maps(&field, cfg)?;
    let spots = null_count(location_sequences(&maps, cfg)?.len(), cfg);
    io::write_observations(&data.null(), layout, true, &survey_null_observations(&field, cfg, spots))?;

    let test = test_field(&field, cfg)?;
    for i in 0..cfg.experiment.walks {
        let w = test_walk(&test, cfg, i)?;
        io::write_observations(&data.walk(i), layout, true, &w.raw)?;
        io::write_truth(&data.truth(i), &w.truth)?;
        io::write_gait(&data.gait(i), &w.gait)?;
    }
    Ok(())
}
