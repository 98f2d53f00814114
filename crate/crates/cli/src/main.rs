mod error;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use poseflow::data::{
    default_joint_names, generate_synthetic, import_csv, load_checkpoint, load_dataset, save_checkpoint, save_dataset,
    Checkpoint, SyntheticGeneratorSpec,
};
use poseflow::eval::{ablation_run, density_comparison, marginal_export, write_histogram_csv, write_marginals_csv};
use poseflow::flow::FlowModel;
use poseflow::rng::{stream_rng, Stream};
use poseflow::rotation::orthonormalize_flat_pose;
use poseflow::training::{train_with_progress, TrainConfig, TrainError};
use serde::Serialize;

use crate::error::CliError;

const LAYOUT_NOTE: &str = "Poses are 126-vectors in the transposed layout: for each of the 21 joints \
the first rotation-matrix column b1 occupies [3j, 3j+3) and the second column b2 occupies \
[63+3j, 63+3j+3). All log-densities are natural-log densities (nats).";

#[derive(Parser)]
#[command(name = "poseflow", version, about = "Normalizing-flow pose prior over 6D joint rotations", after_help = LAYOUT_NOTE)]
struct Cli {
    /// Cap on worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the built-in 21-joint synthetic generator spec (rotation vectors in radians).
    #[command(after_help = LAYOUT_NOTE)]
    GenSpec(GenSpecArgs),
    /// Draw a synthetic pose dataset from a per-joint rotation-vector mixture spec.
    #[command(after_help = LAYOUT_NOTE)]
    GenData(GenDataArgs),
    /// Convert a CSV of poses (one 126-value row per pose) into a dataset file.
    #[command(after_help = LAYOUT_NOTE)]
    ImportCsv(ImportCsvArgs),
    /// Train a flow on a dataset; writes the best-validation checkpoint and a JSON report.
    #[command(after_help = LAYOUT_NOTE)]
    Train(TrainArgs),
    /// Sample poses from a checkpoint. CSV columns: log_prob,x0,...,x125 (log_prob in nats).
    #[command(after_help = LAYOUT_NOTE)]
    Sample(SampleArgs),
    /// Log-density of poses. Input: bare rows of 126 values, or a sample CSV with a
    /// log_prob,x0,... header. Output columns: log_prob,ortho_log_prob (nats); ortho_log_prob is
    /// empty for rows with a degenerate joint.
    #[command(after_help = LAYOUT_NOTE)]
    Logprob(LogprobArgs),
    /// KS statistics between model-sample densities and data densities (raw and
    /// orthonormalized samples). Writes JSON; optionally a histogram CSV
    /// bin_left,bin_right,model_raw,model_ortho,data.
    #[command(after_help = LAYOUT_NOTE)]
    EvalKs(EvalKsArgs),
    /// Per-joint marginals in rotation-vector space (radians). CSV columns: source,x,y,z
    /// with n model rows followed by n data rows.
    #[command(after_help = LAYOUT_NOTE)]
    EvalMarginals(EvalMarginalsArgs),
    /// Train with and without inverse Gram-Schmidt augmentation and compare raw vs
    /// orthonormalized sample densities. Writes ablation.csv
    /// (model,raw_logprob,ortho_logprob,above_diagonal; nats) and summary.json.
    #[command(after_help = LAYOUT_NOTE)]
    Ablation(AblationArgs),
}

#[derive(Args)]
struct GenSpecArgs {
    /// Seed for the mixture parameters; also stored as the sampling seed.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    /// Generator spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Number of poses.
    #[arg(long)]
    n: usize,
    /// Output dataset (.pose6d).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the spec.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ImportCsvArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training configuration (JSON); unknown keys are rejected.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint (.ckpt).
    #[arg(long)]
    out: PathBuf,
    /// Output training report (JSON).
    #[arg(long)]
    report: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LogprobArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalKsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = poseflow::eval::DEFAULT_EVAL_SAMPLES)]
    n: usize,
    #[arg(long)]
    seed: u64,
    /// Output JSON with both KS statistics.
    #[arg(long)]
    out: PathBuf,
    /// Optional density histogram CSV (Freedman-Diaconis bins).
    #[arg(long)]
    histogram: Option<PathBuf>,
}

#[derive(Args)]
struct EvalMarginalsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Joint index in [0, 21).
    #[arg(long)]
    joint: usize,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblationArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Samples per model.
    #[arg(long, default_value_t = poseflow::eval::DEFAULT_EVAL_SAMPLES)]
    n: usize,
    /// Seed for sampling both models.
    #[arg(long)]
    seed: u64,
    /// Directory for ablation.csv and summary.json.
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenSpec(a) => write_json(&a.out, &SyntheticGeneratorSpec::default_body(a.seed)),
        Command::GenData(a) => gen_data(a),
        Command::ImportCsv(a) => {
            let ds = import_csv(&a.input, default_joint_names()).map_err(|e| CliError::data(&a.input, e))?;
            save_dataset(&ds, &a.out).map_err(|e| CliError::data(&a.out, e))
        }
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Logprob(a) => logprob(a),
        Command::EvalKs(a) => eval_ks(a),
        Command::EvalMarginals(a) => eval_marginals(a),
        Command::Ablation(a) => ablation(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn load_model(path: &Path) -> Result<(Checkpoint, FlowModel), CliError> {
    let ckpt = load_checkpoint(path).map_err(|e| CliError::data(path, e))?;
    let model = ckpt.to_model().map_err(|e| CliError::data(path, e))?;
    Ok((ckpt, model))
}

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let mut spec: SyntheticGeneratorSpec = read_json(&a.spec)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let ds = generate_synthetic(&spec, a.n).map_err(|e| CliError::data(&a.spec, e))?;
    save_dataset(&ds, &a.out).map_err(|e| CliError::data(&a.out, e))
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg: TrainConfig = read_json(&a.config)?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.optimizer.lr = v;
    }
    cfg.checkpoint_path = Some(a.out.clone());
    let ds = load_dataset(&a.data).map_err(|e| CliError::data(&a.data, e))?;
    let result = train_with_progress(&ds, &cfg, |r, _| {
        eprintln!("epoch {} train_nll {} val_nll {}", r.epoch, r.train_loss, r.validation_loss);
    });
    match result {
        Ok((ckpt, report)) => {
            save_checkpoint(&ckpt, &a.out).map_err(|e| CliError::data(&a.out, e))?;
            write_json(&a.report, &report)
        }
        Err(TrainError::Diverged { checkpoint, report }) => {
            save_checkpoint(&checkpoint, &a.out).map_err(|e| CliError::data(&a.out, e))?;
            write_json(&a.report, &report)?;
            Err(CliError::Diverged(format!(
                "training diverged after {} epochs; best checkpoint kept at {}",
                report.epochs.len(),
                a.out.display()
            )))
        }
        Err(e) => Err(CliError::train(e)),
    }
}

fn sample(a: SampleArgs) -> Result<(), CliError> {
    let (_, model) = load_model(&a.checkpoint)?;
    let s = model
        .sample(a.n, &mut stream_rng(a.seed, Stream::Sample))
        .map_err(CliError::flow)?;
    let mut w = csv::Writer::from_path(&a.out).map_err(|e| CliError::csv(&a.out, e))?;
    let header = std::iter::once("log_prob".to_string()).chain((0..model.dim()).map(|i| format!("x{i}")));
    w.write_record(header).map_err(|e| CliError::csv(&a.out, e))?;
    for (lp, row) in s.log_prob.iter().zip(s.x.rows()) {
        let rec = std::iter::once(lp.to_string()).chain(row.iter().map(|v| v.to_string()));
        w.write_record(rec).map_err(|e| CliError::csv(&a.out, e))?;
    }
    w.flush().map_err(|e| CliError::io(&a.out, e))
}

/// Reads pose rows, dropping a leading `log_prob` column when the file has a
/// sample header.
fn read_pose_rows(path: &Path, dim: usize) -> Result<Array2<f64>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::csv(path, e))?;
    let mut values = Vec::new();
    let mut rows = 0;
    let mut skip = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::csv(path, e))?;
        if i == 0 && rec.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            skip = usize::from(rec.get(0) == Some("log_prob"));
            continue;
        }
        if rec.len() != dim + skip {
            return Err(CliError::Dimension(format!(
                "{}: record {rows} has {} values, expected {}",
                path.display(),
                rec.len() - skip.min(rec.len()),
                dim
            )));
        }
        for f in rec.iter().skip(skip) {
            let v = f
                .parse::<f64>()
                .map_err(|e| CliError::Schema(format!("{}: record {rows}: {f:?}: {e}", path.display())))?;
            values.push(v);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, dim), values).map_err(|e| CliError::Other(e.to_string()))
}

fn logprob(a: LogprobArgs) -> Result<(), CliError> {
    let (_, model) = load_model(&a.checkpoint)?;
    let x = read_pose_rows(&a.input, model.dim())?;
    let raw = model.log_prob_batch(&x.view()).map_err(CliError::flow)?.log_prob;
    // degenerate joints have no orthonormalization; their field is left empty
    let mut ortho_x = x.clone();
    let mut valid = vec![true; x.nrows()];
    if model.dim() % 6 == 0 {
        for (mut row, ok) in ortho_x.rows_mut().into_iter().zip(&mut valid) {
            *ok = orthonormalize_flat_pose(row.as_slice_mut().expect("standard layout")).is_ok();
        }
    }
    let ortho = model.log_prob_batch(&ortho_x.view()).map_err(CliError::flow)?.log_prob;
    let sink: Box<dyn std::io::Write> = match &a.out {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| CliError::io(p, e))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let fail = |e: csv::Error| CliError::Other(e.to_string());
    w.write_record(["log_prob", "ortho_log_prob"]).map_err(fail)?;
    for ((r, o), ok) in raw.iter().zip(&ortho).zip(&valid) {
        let o = if *ok { o.to_string() } else { String::new() };
        w.write_record([r.to_string(), o]).map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::Other(e.to_string()))
}

#[derive(Serialize)]
struct KsSummary {
    n: usize,
    seed: u64,
    raw: poseflow::KsResult,
    ortho: poseflow::KsResult,
}

fn eval_ks(a: EvalKsArgs) -> Result<(), CliError> {
    let (_, model) = load_model(&a.checkpoint)?;
    let ds = load_dataset(&a.data).map_err(|e| CliError::data(&a.data, e))?;
    check_dims(&model, ds.dim())?;
    let cmp = density_comparison(&model, &ds, a.n, a.seed).map_err(CliError::eval)?;
    if let Some(h) = &a.histogram {
        write_histogram_csv(&cmp, h).map_err(CliError::eval)?;
    }
    write_json(
        &a.out,
        &KsSummary {
            n: a.n,
            seed: a.seed,
            raw: cmp.raw,
            ortho: cmp.ortho,
        },
    )
}

fn eval_marginals(a: EvalMarginalsArgs) -> Result<(), CliError> {
    let (_, model) = load_model(&a.checkpoint)?;
    let ds = load_dataset(&a.data).map_err(|e| CliError::data(&a.data, e))?;
    check_dims(&model, ds.dim())?;
    let rows = marginal_export(&model, &ds, a.joint, a.n, a.seed).map_err(CliError::eval)?;
    write_marginals_csv(&rows, &a.out).map_err(CliError::eval)
}

fn ablation(a: AblationArgs) -> Result<(), CliError> {
    let mut cfg: TrainConfig = read_json(&a.config)?;
    cfg.checkpoint_path = None;
    let ds = load_dataset(&a.data).map_err(|e| CliError::data(&a.data, e))?;
    let result = ablation_run(&ds, &cfg, a.n, a.seed).map_err(CliError::eval)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(&a.out_dir, e))?;
    result.write_csv(a.out_dir.join("ablation.csv")).map_err(CliError::eval)?;
    write_json(&a.out_dir.join("summary.json"), &result.summary())
}

fn check_dims(model: &FlowModel, data_dim: usize) -> Result<(), CliError> {
    if model.dim() != data_dim {
        return Err(CliError::Dimension(format!(
            "checkpoint expects {} values per pose, dataset has {data_dim}",
            model.dim()
        )));
    }
    Ok(())
}
