//! `fracfilt`: dataset extraction, training, filter collapse and the
//! switchable motion-compensation harness from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fracfilt::container::{read_bank, read_dataset, read_filters, write_bank, write_dataset, write_filters};
use fracfilt::harness::build_dataset;
use fracfilt::interpret::export_heatmap;
use fracfilt::stdfilt::aligned_taps;
use fracfilt::synth::{planted_sequence, shift_frame_std, texture};
use fracfilt::yuv::write_yuv420;
use fracfilt::{
    bd_rate, collapse, simulate, train, FilterSet, HarnessConfig, MotionVector, Plane, RdPoint, TrainConfig,
    YuvSequence,
};
use log::info;

#[derive(Parser)]
#[command(name = "fracfilt", version, about = "Learned quarter-pel interpolation filters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract training records from a raw 8-bit 4:2:0 clip.
    Dataset(DatasetArgs),
    /// Train one model per (fractional position, QP) partition of a dataset.
    Train(TrainArgs),
    /// Collapse every model of a bank into a quantized 13x13 filter.
    Collapse(CollapseArgs),
    /// Export a filter set as CSV tables and PGM heatmaps.
    Export(ExportArgs),
    /// Print standard interpolation taps or a filter set summary.
    Filters(FiltersArgs),
    /// Run the switchable motion-compensation harness and write a JSON report.
    Simulate(SimulateArgs),
    /// Bjontegaard delta-rate between two rate,psnr CSV files.
    Bdrate(BdrateArgs),
    /// Write a synthetic clip with planted quarter-pel motion.
    Synth(SynthArgs),
}

#[derive(Args)]
struct VideoArgs {
    /// Raw 8-bit 4:2:0 input file.
    #[arg(long)]
    yuv: PathBuf,
    /// Luma frame size as WxH.
    #[arg(long, value_parser = parse_size)]
    size: (usize, usize),
    /// Use only the first N frames.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args)]
struct BlockArgs {
    /// Block size as WxH (at most 32x32); repeat to cycle sizes by tile row.
    #[arg(long = "blocks", value_parser = parse_size, default_value = "16x16")]
    blocks: Vec<(usize, usize)>,
    /// Integer motion search range in samples.
    #[arg(long, default_value_t = 8)]
    window: i32,
}

#[derive(Args)]
struct DatasetArgs {
    #[command(flatten)]
    video: VideoArgs,
    /// Quantization parameters (comma separated) of the compressed references.
    #[arg(long, value_delimiter = ',', required = true)]
    qp: Vec<u8>,
    #[command(flatten)]
    block: BlockArgs,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Input dataset file.
    #[arg(long)]
    dataset: PathBuf,
    /// QPs to train (comma separated); defaults to every QP in the dataset.
    #[arg(long, value_delimiter = ',')]
    qp: Vec<u8>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Final learning rate of a cosine decay; constant rate when omitted.
    #[arg(long)]
    lr_final: Option<f64>,
    /// Mini-batch size.
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Output model bank file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CollapseArgs {
    /// Input model bank file.
    #[arg(long)]
    model: PathBuf,
    /// Fixed-point shift of the quantized coefficients (4..=14).
    #[arg(long, default_value_t = 6)]
    shift: u8,
    /// Output filter set file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// Input filter set file.
    #[arg(long)]
    filters: PathBuf,
    /// Directory receiving one CSV and one PGM per filter.
    #[arg(long)]
    heatmaps: PathBuf,
    /// Pixel magnification of the heatmaps.
    #[arg(long, default_value_t = 16)]
    scale: usize,
}

#[derive(Args)]
struct FiltersArgs {
    /// Print the standard 8-tap luma filters.
    #[arg(long)]
    std: bool,
    /// Print a summary of a filter set file.
    #[arg(long)]
    set: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    video: VideoArgs,
    /// Filter set file.
    #[arg(long)]
    filters: PathBuf,
    /// QPs to simulate (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "22,27,32,37")]
    qp: Vec<u8>,
    #[command(flatten)]
    block: BlockArgs,
    /// Rate weight of the one-bit filter flag.
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Output JSON report.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct BdrateArgs {
    /// Anchor curve CSV with columns rate,psnr.
    #[arg(long)]
    anchor: PathBuf,
    /// Test curve CSV with columns rate,psnr.
    #[arg(long)]
    test: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Output raw 8-bit 4:2:0 file.
    #[arg(long)]
    out: PathBuf,
    /// Luma frame size as WxH (even).
    #[arg(long, value_parser = parse_size, default_value = "64x48")]
    size: (usize, usize),
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses `WxH` into `(height, width)`.
fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad size {s:?}: {e}"));
    Ok((parse(h)?, parse(w)?))
}

fn load_frames(video: &VideoArgs) -> Result<Vec<Plane<u16>>> {
    let (h, w) = video.size;
    let seq = YuvSequence::open(&video.yuv, w, h).with_context(|| format!("opening {}", video.yuv.display()))?;
    let count = video.frames.map_or(seq.frame_count(), |n| n.min(seq.frame_count()));
    (0..count).map(|i| seq.read_luma(i).map_err(Into::into)).collect()
}

fn harness_config(block: &BlockArgs, qps: Vec<u8>, lambda: f64) -> HarnessConfig {
    HarnessConfig { qps, blocks: block.blocks.clone(), window: block.window, lambda }
}

fn run_dataset(args: &DatasetArgs) -> Result<()> {
    let frames = load_frames(&args.video)?;
    let config = harness_config(&args.block, args.qp.clone(), 0.0);
    let mut records = Vec::new();
    for &qp in &args.qp {
        let outcome = build_dataset(&frames, qp, &config)?;
        info!("qp {qp}: {} records, {} blocks skipped at the border", outcome.records.len(), outcome.skipped);
        records.extend(outcome.records);
    }
    write_dataset(&args.out, &records)?;
    println!("wrote {} records to {}", records.len(), args.out.display());
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let dataset = read_dataset(&args.dataset)?;
    let config = TrainConfig {
        lr: args.lr,
        lr_final: args.lr_final,
        batch_size: args.batch,
        epochs: args.epochs,
        qps: (!args.qp.is_empty()).then(|| args.qp.clone()),
        ..TrainConfig::default()
    };
    let outcome = train(&config, &dataset, args.seed)?;
    write_bank(&args.out, &outcome.bank)?;
    println!("wrote {} models to {}", outcome.bank.len(), args.out.display());
    Ok(())
}

fn run_collapse(args: &CollapseArgs) -> Result<()> {
    let bank = read_bank(&args.model)?;
    let set = bank.iter().map(|m| collapse(m).quantize(args.shift)).collect::<fracfilt::Result<FilterSet>>()?;
    write_filters(&args.out, &set)?;
    println!("wrote {} filters to {}", set.len(), args.out.display());
    Ok(())
}

fn run_export(args: &ExportArgs) -> Result<()> {
    let set = read_filters(&args.filters)?;
    fs::create_dir_all(&args.heatmaps).with_context(|| format!("creating {}", args.heatmaps.display()))?;
    for f in set.iter() {
        let stem = format!("filter_dx{}_dy{}_qp{}", f.frac.dx, f.frac.dy, f.qp);
        let files = export_heatmap(f, &args.heatmaps, &stem, args.scale)?;
        println!("{} {}", files.csv.display(), files.pgm.display());
    }
    Ok(())
}

fn run_filters(args: &FiltersArgs) -> Result<()> {
    if !args.std && args.set.is_none() {
        bail!("nothing to print: pass --std or --set <file>");
    }
    if args.std {
        for phase in 1..=3u8 {
            let taps = aligned_taps(phase);
            let text: Vec<String> = taps.iter().map(i32::to_string).collect();
            println!("phase {phase}/4: {} sum {}", text.join(" "), taps.iter().sum::<i32>());
        }
    }
    if let Some(path) = &args.set {
        let set = read_filters(path)?;
        for f in set.iter() {
            let fixed = f.fixed.as_ref().map_or("float".to_string(), |q| format!("shift {}", q.shift));
            println!("{} qp {} dc gain {:.6} {fixed}", f.frac, f.qp, f.dc_gain());
        }
    }
    Ok(())
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let frames = load_frames(&args.video)?;
    let filters = read_filters(&args.filters)?;
    let config = harness_config(&args.block, args.qp.clone(), args.lambda);
    let report = simulate(&frames, &filters, &config)?;
    fs::write(&args.report, report.to_json()?).with_context(|| format!("writing {}", args.report.display()))?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |p| format!("{p:.3}"));
    for q in &report.per_qp {
        println!(
            "qp {} fractional blocks {} hit ratio {} psnr std {} learned {} switchable {}",
            q.qp,
            q.fractional_blocks,
            fmt(q.hit_ratio),
            fmt(q.psnr_std_only),
            fmt(q.psnr_nn_only),
            fmt(q.psnr_switchable)
        );
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct CsvPoint {
    rate: f64,
    psnr: f64,
}

fn read_curve(path: &Path) -> Result<Vec<RdPoint>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    reader
        .deserialize()
        .map(|row| {
            let p: CsvPoint = row.with_context(|| format!("parsing {}", path.display()))?;
            Ok(RdPoint::new(p.rate, p.psnr)?)
        })
        .collect()
}

fn run_bdrate(args: &BdrateArgs) -> Result<()> {
    let value = bd_rate(&read_curve(&args.anchor)?, &read_curve(&args.test)?)?;
    println!("BD-rate: {value:.2}%");
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let (h, w) = args.size;
    let motion = |k: usize| MotionVector::from_quarter([5, -6, 3, 2][k % 4], [-2, 7, 6, -3][k % 4]);
    let frames = planted_sequence(texture(w, h, args.seed), args.frames, motion, shift_frame_std)?;
    write_yuv420(&args.out, &frames)?;
    println!("wrote {} frames of {w}x{h} to {}", frames.len(), args.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Dataset(a) => run_dataset(a),
        Command::Train(a) => run_train(a),
        Command::Collapse(a) => run_collapse(a),
        Command::Export(a) => run_export(a),
        Command::Filters(a) => run_filters(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Bdrate(a) => run_bdrate(a),
        Command::Synth(a) => run_synth(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
