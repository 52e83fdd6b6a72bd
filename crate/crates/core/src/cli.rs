//! Command-line workflows over the codec: dataset synthesis, training,
//! compression, decompression, evaluation, rate comparison, rate-region
//! analysis and latent inspection.
//!
//! Exit codes follow one contract everywhere: 0 success, 1 usage or
//! configuration error, 3 incompatibility between otherwise valid artifacts
//! (checkpoint vs. bitstream vs. request), 2 any other data error. Every
//! failure prints a single machine-parseable `error[category]: reason` line
//! to stderr; unknown flags and subcommands are rejected rather than
//! ignored.

use std::ffi::{OsStr, OsString};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Array3};

use crate::data::{
    load_checkpoint, save_image_png, write_synthetic_dataset, DatasetIndex, SyntheticSpec,
};
use crate::dsc::{sw_corner, JointPmf};
use crate::entropy::{compress_group, decompress_group, latent_residuals, BitstreamContainer};
use crate::error::{io_err, Error, Result};
use crate::metrics::{self, bd_rate, ms_ssim, psnr, read_rd_csv, RdCurve, MS_SSIM_MIN_SIDE, RD_CSV_HEADER};
use crate::model::{Model, ModelConfig, Variant};
use crate::train::{build_variant, train as run_training, Metric, TrainConfig};
use crate::{Real, Scalar};

/// Environment variable bounding the global worker thread pool.
pub const THREADS_ENV: &str = "LDMIC_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "ldmic",
    version,
    about = "Distributed multi-view image codec: independent encoders, joint decoder",
    disable_help_subcommand = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic correlated multi-view dataset plus manifest.
    Synth(SynthArgs),
    /// Train a model variant on a manifest of image groups.
    Train(TrainArgs),
    /// Encode a manifest group (or all groups) to bitstream files.
    Compress(CompressArgs),
    /// Decode bitstream files back to PNG reconstructions.
    Decompress(DecompressArgs),
    /// Measure rate and quality over a manifest; append rows to an RD CSV.
    Eval(EvalArgs),
    /// Average rate difference between two RD curves with a shared metric.
    Bdrate(BdrateArgs),
    /// Lossless rate region of a two-source joint PMF file.
    RateRegion(RateRegionArgs),
    /// Write per-view magnitude maps of the coded latent residuals.
    DumpLatents(DumpLatentsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub groups: usize,
    /// Views per group.
    #[arg(long, default_value_t = 2)]
    pub views: usize,
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    #[arg(long, default_value_t = 96)]
    pub width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest (TOML listing image groups).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint output path; rewritten after every epoch.
    #[arg(long)]
    pub out: PathBuf,
    /// Rate-distortion tradeoff weight.
    #[arg(long, default_value_t = 2048.0)]
    pub lambda: f64,
    /// Model variant: ldmic, ldmic_fast, sep_enc_dec, joint_enc_dec,
    /// frozen_encoder or concat_fusion.
    #[arg(long, default_value = "ldmic")]
    pub variant: Variant,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    /// Distortion metric: psnr (mean squared error) or msssim.
    #[arg(long, default_value = "psnr")]
    pub metric: Metric,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Training patch side (multiple of the transform stride).
    #[arg(long, default_value_t = 256)]
    pub crop: usize,
    /// Override the default learning rate for the chosen metric.
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long, default_value_t = 192)]
    pub latent_channels: usize,
    #[arg(long, default_value_t = 128)]
    pub hyper_channels: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Source checkpoint: required for frozen_encoder (a trained
    /// sep_enc_dec model); resumes training for any other variant.
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Step-metrics CSV path (default: checkpoint path with .csv).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Group id to encode; omit to encode every group in the manifest.
    #[arg(long)]
    pub group: Option<String>,
    /// Output bitstream file (single group) or directory (all groups).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecompressArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Bitstream file, or a directory of .ldmb files.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for reconstructed PNGs.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// RD CSV to append to (created with a header if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Curve label for the appended rows (default: checkpoint stem and
    /// its training lambda).
    #[arg(long)]
    pub label: Option<String>,
    /// Evaluate only the first N groups.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BdrateArgs {
    /// Reference RD CSV.
    #[arg(long)]
    pub anchor: PathBuf,
    /// Candidate RD CSV.
    #[arg(long)]
    pub test: PathBuf,
    /// Which metric's curves to compare: psnr or msssim.
    #[arg(long, default_value = "psnr")]
    pub metric: Metric,
    /// Curve label to select when a CSV holds several curves.
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Args)]
pub struct RateRegionArgs {
    /// Joint PMF file: `n1 n2` then n1*n2 row-major probabilities;
    /// whitespace-separated, `#` starts a comment.
    #[arg(long)]
    pub pmf: PathBuf,
    /// Rate for source 1 (bits); with --rate2, prints an admissibility
    /// verdict.
    #[arg(long, requires = "rate2")]
    pub rate1: Option<f64>,
    /// Rate for source 2 (bits).
    #[arg(long, requires = "rate1")]
    pub rate2: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DumpLatentsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Group id to inspect.
    #[arg(long)]
    pub group: String,
    /// Output directory for grayscale magnitude maps.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse argv, dispatch, and map every outcome to the exit-code contract.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => return report_usage(e),
    };
    let outcome = init_thread_pool(std::env::var_os(THREADS_ENV).as_deref())
        .and_then(|()| dispatch(cli.command));
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            let category = e.category();
            let rendered = e.to_string();
            let message = rendered
                .strip_prefix(category)
                .and_then(|r| r.strip_prefix(": "))
                .unwrap_or(&rendered);
            eprintln!("error[{category}]: {message}");
            e.exit_code()
        }
    }
}

fn report_usage(e: clap::Error) -> i32 {
    use clap::error::ErrorKind;
    if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
        print!("{e}");
        return 0;
    }
    let rendered = e.to_string();
    let mut lines = rendered.lines();
    let first = lines.next().unwrap_or("invalid arguments");
    eprintln!("error[usage]: {}", first.strip_prefix("error: ").unwrap_or(first));
    for line in lines {
        eprintln!("{line}");
    }
    1
}

fn init_thread_pool(raw: Option<&OsStr>) -> Result<()> {
    if let Some(n) = thread_pool_size(raw)? {
        // A pool may already exist when `run` is called twice in-process;
        // the first configuration then stays in effect.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn thread_pool_size(raw: Option<&OsStr>) -> Result<Option<usize>> {
    let Some(raw) = raw else {
        return Ok(None);
    };
    let s = raw
        .to_str()
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} is not valid UTF-8")))?;
    let n: usize = s
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{THREADS_ENV}='{s}' is not a positive integer")))?;
    if n == 0 {
        return Err(Error::Config(format!("{THREADS_ENV} must be at least 1")));
    }
    Ok(Some(n))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Compress(a) => cmd_compress(&a),
        Command::Decompress(a) => cmd_decompress(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Bdrate(a) => cmd_bdrate(&a),
        Command::RateRegion(a) => cmd_rate_region(&a),
        Command::DumpLatents(a) => cmd_dump_latents(&a),
    }
}

// ---- subcommands -------------------------------------------------------

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        groups: args.groups,
        views: args.views,
        height: args.height,
        width: args.width,
        seed: args.seed,
    };
    let manifest = write_synthetic_dataset(&args.out, &spec)?;
    println!("manifest = {}", manifest.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let model_cfg = ModelConfig {
        variant: args.variant,
        latent_channels: args.latent_channels,
        hyper_channels: args.hyper_channels,
        heads: args.heads,
    };
    model_cfg.validate()?;
    let index = DatasetIndex::load(&args.manifest)?;
    let mut model: Model<Real> = match (args.variant, &args.from) {
        (Variant::FrozenEncoder, Some(src)) => {
            let (source, _) = load_checkpoint::<Real>(src)?;
            build_variant(&model_cfg, args.seed, Some(&source))?
        }
        (Variant::FrozenEncoder, None) => {
            return Err(Error::Config(
                "frozen_encoder needs --from <trained sep_enc_dec checkpoint>".into(),
            ))
        }
        (_, Some(src)) => {
            let (resumed, _) = load_checkpoint::<Real>(src)?;
            if resumed.cfg.variant != model_cfg.variant
                || resumed.cfg.latent_channels != model_cfg.latent_channels
                || resumed.cfg.hyper_channels != model_cfg.hyper_channels
                || resumed.cfg.heads != model_cfg.heads
            {
                return Err(Error::Incompatible(format!(
                    "checkpoint {} is {} M={} N={} heads={}, requested {} M={} N={} heads={}",
                    src.display(),
                    resumed.cfg.variant,
                    resumed.cfg.latent_channels,
                    resumed.cfg.hyper_channels,
                    resumed.cfg.heads,
                    model_cfg.variant,
                    model_cfg.latent_channels,
                    model_cfg.hyper_channels,
                    model_cfg.heads,
                )));
            }
            resumed
        }
        (_, None) => build_variant(&model_cfg, args.seed, None)?,
    };
    let base_lr = args.base_lr.unwrap_or(match args.metric {
        Metric::Mse => crate::train::BASE_LR,
        Metric::MsSsim => crate::train::MS_SSIM_FINE_TUNE_LR,
    });
    let train_cfg = TrainConfig {
        lambda: args.lambda,
        epochs: args.epochs,
        batch_size: args.batch_size,
        crop: args.crop,
        base_lr,
        grad_clip: crate::train::GRAD_CLIP_NORM,
        metric: args.metric,
        seed: args.seed,
    };
    let log = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("csv"));
    let records = run_training(&mut model, &train_cfg, &index, Some(&log), Some(&args.out))?;
    if let Some(last) = records.last() {
        println!(
            "final: epoch={} step={} loss={:.6} distortion={:.6} bpp={:.4}",
            last.epoch, last.step, last.loss, last.distortion, last.rate_bpp
        );
    }
    println!("checkpoint = {}", args.out.display());
    println!("log = {}", log.display());
    Ok(())
}

fn find_group(index: &DatasetIndex, id: &str) -> Result<usize> {
    index
        .groups
        .iter()
        .position(|g| g.id == id)
        .ok_or_else(|| Error::Schema(format!("group '{id}' is not in the manifest")))
}

fn compress_one(model: &Model<Real>, xs: &[Array3<Real>], out: &Path) -> Result<()> {
    let (container, info) = compress_group(model, xs)?;
    let bytes = container.serialize();
    fs::write(out, &bytes).map_err(io_err(out))?;
    let pixels =
        (container.views.len() * container.height as usize * container.width as usize) as f64;
    let estimated: f64 = info.view_bits.iter().map(|v| v.total()).sum::<f64>() / pixels;
    println!(
        "{}: {} views {}x{}, {} bytes, bpp {:.4} (coded-bit estimate {:.4})",
        out.display(),
        container.views.len(),
        container.width,
        container.height,
        bytes.len(),
        metrics::bpp(&container),
        estimated,
    );
    Ok(())
}

fn cmd_compress(args: &CompressArgs) -> Result<()> {
    let (model, _) = load_checkpoint::<Real>(&args.checkpoint)?;
    let index = DatasetIndex::load(&args.manifest)?;
    match &args.group {
        Some(id) => {
            let gi = find_group(&index, id)?;
            let xs = index.load_group::<Real>(gi)?;
            compress_one(&model, &xs, &args.out)
        }
        None => {
            fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
            for gi in 0..index.groups.len() {
                let xs = index.load_group::<Real>(gi)?;
                let out = args.out.join(format!("{}.ldmb", index.groups[gi].id));
                compress_one(&model, &xs, &out)?;
            }
            Ok(())
        }
    }
}

fn cmd_decompress(args: &DecompressArgs) -> Result<()> {
    let (model, _) = load_checkpoint::<Real>(&args.checkpoint)?;
    let inputs: Vec<PathBuf> = if args.input.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(&args.input)
            .map_err(io_err(&args.input))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ldmb"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Schema(format!(
                "no .ldmb files in {}",
                args.input.display()
            )));
        }
        files
    } else {
        vec![args.input.clone()]
    };
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    for input in inputs {
        let data = fs::read(&input).map_err(io_err(&input))?;
        let container = BitstreamContainer::parse(&data)?;
        let recons = decompress_group(&model, &container)?;
        let stem = input
            .file_stem()
            .and_then(OsStr::to_str)
            .unwrap_or("group");
        for (k, r) in recons.iter().enumerate() {
            let path = args.out.join(format!("{stem}.view{k}.png"));
            save_image_png(&path, r.view())?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (model, lambda) = load_checkpoint::<Real>(&args.checkpoint)?;
    let index = DatasetIndex::load(&args.manifest)?;
    let limit = args
        .limit
        .unwrap_or(index.groups.len())
        .min(index.groups.len());
    if limit == 0 {
        return Err(Error::Schema("no groups to evaluate".into()));
    }
    let mut sum_bpp = 0.0;
    let mut sum_psnr = 0.0;
    let mut sum_msssim = 0.0;
    let mut msssim_groups = 0usize;
    for gi in 0..limit {
        let xs = index.load_group::<Real>(gi)?;
        let (container, _) = compress_group(&model, &xs)?;
        let recons = decompress_group(&model, &container)?;
        sum_bpp += metrics::bpp(&container);
        let mut group_psnr = 0.0;
        for (x, r) in xs.iter().zip(&recons) {
            group_psnr += psnr(x.view(), r.view())?;
        }
        sum_psnr += group_psnr / xs.len() as f64;
        let (_, h, w) = xs[0].dim();
        if h.min(w) >= MS_SSIM_MIN_SIDE {
            let mut group_ms = 0.0;
            for (x, r) in xs.iter().zip(&recons) {
                group_ms += ms_ssim(x.view(), r.view())?;
            }
            sum_msssim += group_ms / xs.len() as f64;
            msssim_groups += 1;
        }
    }
    let mean_bpp = sum_bpp / limit as f64;
    let mean_psnr = sum_psnr / limit as f64;
    let label = match &args.label {
        Some(l) => l.clone(),
        None => {
            let stem = args
                .checkpoint
                .file_stem()
                .and_then(OsStr::to_str)
                .unwrap_or("model");
            format!("{stem}-l{lambda}")
        }
    };
    if label.contains(',') || label.contains('\n') {
        return Err(Error::Config(format!(
            "label '{label}' must not contain commas or newlines"
        )));
    }
    let mut rows = vec![("psnr", mean_bpp, mean_psnr)];
    if msssim_groups == limit {
        rows.push(("msssim", mean_bpp, sum_msssim / limit as f64));
    } else {
        log::warn!(
            "msssim skipped: {} of {limit} groups are smaller than {MS_SSIM_MIN_SIDE} on a side",
            limit - msssim_groups
        );
    }
    append_rd_rows(&args.out, &label, &rows)?;
    print!("label={label} groups={limit} bpp={mean_bpp:.4} psnr={mean_psnr:.2}");
    if msssim_groups == limit {
        println!(" msssim={:.5}", sum_msssim / limit as f64);
    } else {
        println!(" msssim=skipped");
    }
    println!("csv = {}", args.out.display());
    Ok(())
}

fn append_rd_rows(path: &Path, label: &str, rows: &[(&str, f64, f64)]) -> Result<()> {
    let fresh = !path.exists() || fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    if fresh {
        writeln!(f, "{RD_CSV_HEADER}").map_err(io_err(path))?;
    }
    for (metric, bpp, quality) in rows {
        writeln!(f, "{label},{metric},{bpp},{quality}").map_err(io_err(path))?;
    }
    Ok(())
}

fn metric_csv_name(metric: Metric) -> &'static str {
    match metric {
        Metric::Mse => "psnr",
        Metric::MsSsim => "msssim",
    }
}

fn select_curve<'a>(
    curves: &'a [RdCurve],
    metric: &str,
    label: Option<&str>,
    file: &Path,
) -> Result<&'a RdCurve> {
    let matching: Vec<&RdCurve> = curves
        .iter()
        .filter(|c| c.metric == metric)
        .filter(|c| label.is_none_or(|l| c.label == l))
        .collect();
    match matching.len() {
        0 => Err(Error::Schema(format!(
            "no '{metric}' curve{} in {}",
            label.map(|l| format!(" labeled '{l}'")).unwrap_or_default(),
            file.display()
        ))),
        1 => Ok(matching[0]),
        n => Err(Error::Schema(format!(
            "{n} '{metric}' curves in {}; disambiguate with --label",
            file.display()
        ))),
    }
}

fn cmd_bdrate(args: &BdrateArgs) -> Result<()> {
    let metric = metric_csv_name(args.metric);
    let anchors = read_rd_csv(&args.anchor)?;
    let tests = read_rd_csv(&args.test)?;
    let anchor = select_curve(&anchors, metric, args.label.as_deref(), &args.anchor)?;
    let test = select_curve(&tests, metric, args.label.as_deref(), &args.test)?;
    let delta = bd_rate(anchor, test)?;
    println!(
        "BD-rate ({metric}, {} -> {}): {delta:.2}%",
        anchor.label, test.label
    );
    Ok(())
}

/// Parse a joint PMF text file: first two integers are the alphabet sizes,
/// followed by that many row-major probabilities. `#` starts a comment;
/// all whitespace (including newlines) separates tokens equally.
fn parse_pmf_file(path: &Path) -> Result<JointPmf> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut tokens = text
        .lines()
        .flat_map(|line| line.split('#').next().unwrap_or("").split_whitespace());
    let mut dim = |what: &str| -> Result<usize> {
        let tok = tokens
            .next()
            .ok_or_else(|| Error::Parse(format!("pmf: missing {what}")))?;
        tok.parse()
            .map_err(|_| Error::Parse(format!("pmf: {what} '{tok}' is not a positive integer")))
    };
    let n1 = dim("first alphabet size")?;
    let n2 = dim("second alphabet size")?;
    let values: Vec<f64> = tokens
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::Parse(format!("pmf: '{tok}' is not a number")))
        })
        .collect::<Result<_>>()?;
    if values.len() != n1 * n2 {
        return Err(Error::Parse(format!(
            "pmf: expected {} probabilities for a {n1}x{n2} table, found {}",
            n1 * n2,
            values.len()
        )));
    }
    let table = Array2::from_shape_vec((n1, n2), values)
        .map_err(|e| Error::Parse(format!("pmf: {e}")))?;
    JointPmf::new(table)
}

fn cmd_rate_region(args: &RateRegionArgs) -> Result<()> {
    let pmf = parse_pmf_file(&args.pmf)?;
    let corner = sw_corner(&pmf);
    // Marginal entropies via the chain rule on exactly computed terms.
    let h1 = corner.h_joint - corner.h_x2_given_x1;
    let h2 = corner.h_joint - corner.h_x1_given_x2;
    println!("alphabets = {}x{}", pmf.n1(), pmf.n2());
    println!("H(X1) = {h1:.6} bits");
    println!("H(X2) = {h2:.6} bits");
    println!("H(X1|X2) = {:.6} bits", corner.h_x1_given_x2);
    println!("H(X2|X1) = {:.6} bits", corner.h_x2_given_x1);
    println!("H(X1,X2) = {:.6} bits", corner.h_joint);
    if let (Some(r1), Some(r2)) = (args.rate1, args.rate2) {
        println!("rates = ({r1}, {r2})");
        println!("admissible = {}", corner.admits(r1, r2));
    }
    Ok(())
}

fn cmd_dump_latents(args: &DumpLatentsArgs) -> Result<()> {
    let (model, _) = load_checkpoint::<Real>(&args.checkpoint)?;
    let index = DatasetIndex::load(&args.manifest)?;
    let gi = find_group(&index, &args.group)?;
    let xs = index.load_group::<Real>(gi)?;
    let residuals = latent_residuals(&model, &xs)?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    for (k, r) in residuals.iter().enumerate() {
        let (m, lh, lw) = r.dim();
        // Root-mean-square over channels, normalized to the view's peak.
        let mut mag = Array2::<f64>::zeros((lh, lw));
        for ((_, i, j), &v) in r.indexed_iter() {
            let v = Scalar::to_f64(v);
            mag[[i, j]] += v * v;
        }
        mag.mapv_inplace(|v| (v / m as f64).sqrt());
        let peak = mag.iter().copied().fold(0.0, f64::max);
        if peak > 0.0 {
            mag.mapv_inplace(|v| v / peak);
        }
        let gray =
            Array3::<Real>::from_shape_fn((3, lh, lw), |(_, i, j)| mag[[i, j]] as Real);
        let path = args.out.join(format!("{}.view{k}.png", args.group));
        save_image_png(&path, gray.view())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{write_rd_csv, RdPoint};
    use tempfile::tempdir;

    #[test]
    fn thread_pool_size_parses_and_rejects() {
        assert_eq!(thread_pool_size(None).unwrap(), None);
        assert_eq!(
            thread_pool_size(Some(OsStr::new("4"))).unwrap(),
            Some(4)
        );
        assert_eq!(
            thread_pool_size(Some(OsStr::new(" 2 "))).unwrap(),
            Some(2)
        );
        assert!(thread_pool_size(Some(OsStr::new("0"))).is_err());
        assert!(thread_pool_size(Some(OsStr::new("many"))).is_err());
    }

    #[test]
    fn pmf_files_parse_with_comments_and_fail_loudly() {
        let dir = tempdir().unwrap();
        let good = dir.path().join("dsbs.pmf");
        fs::write(
            &good,
            "# doubly symmetric binary source, crossover 0.1\n2 2\n0.45 0.05  # first row\n0.05 0.45\n",
        )
        .unwrap();
        let pmf = parse_pmf_file(&good).unwrap();
        let corner = sw_corner(&pmf);
        assert!((corner.h_joint - 1.46900).abs() < 1e-5);

        let truncated = dir.path().join("short.pmf");
        fs::write(&truncated, "2 2\n0.45 0.05 0.05\n").unwrap();
        assert!(matches!(parse_pmf_file(&truncated), Err(Error::Parse(_))));

        let bad_token = dir.path().join("token.pmf");
        fs::write(&bad_token, "2 2\n0.45 x 0.05 0.45\n").unwrap();
        assert!(matches!(parse_pmf_file(&bad_token), Err(Error::Parse(_))));

        let bad_dim = dir.path().join("dim.pmf");
        fs::write(&bad_dim, "two 2\n").unwrap();
        assert!(matches!(parse_pmf_file(&bad_dim), Err(Error::Parse(_))));

        let not_normalized = dir.path().join("sum.pmf");
        fs::write(&not_normalized, "2 2\n0.5 0.5 0.5 0.5\n").unwrap();
        assert!(matches!(parse_pmf_file(&not_normalized), Err(Error::Schema(_))));
    }

    #[test]
    fn exit_codes_follow_the_contract() {
        // Usage errors (unknown flags / subcommands) exit 1.
        assert_eq!(run(["ldmic", "no-such-command"]), 1);
        assert_eq!(run(["ldmic", "synth", "--bogus", "x"]), 1);
        assert_eq!(run(["ldmic", "--help"]), 0);
        // Data errors exit 2.
        assert_eq!(run(["ldmic", "rate-region", "--pmf", "/nonexistent.pmf"]), 2);
    }

    #[test]
    fn rate_region_and_identity_bdrate_succeed() {
        let dir = tempdir().unwrap();
        let pmf = dir.path().join("p.pmf");
        fs::write(&pmf, "2 2\n0.45 0.05 0.05 0.45\n").unwrap();
        let pmf_s = pmf.to_str().unwrap();
        assert_eq!(run(["ldmic", "rate-region", "--pmf", pmf_s]), 0);
        assert_eq!(
            run([
                "ldmic",
                "rate-region",
                "--pmf",
                pmf_s,
                "--rate1",
                "0.8",
                "--rate2",
                "0.8"
            ]),
            0
        );
        // --rate1 without --rate2 is a usage error.
        assert_eq!(
            run(["ldmic", "rate-region", "--pmf", pmf_s, "--rate1", "0.8"]),
            1
        );

        let mut curve = RdCurve::new("base", "psnr");
        curve.points = vec![
            RdPoint { bpp: 0.25, quality: 30.0 },
            RdPoint { bpp: 0.5, quality: 33.0 },
            RdPoint { bpp: 1.0, quality: 36.0 },
            RdPoint { bpp: 2.0, quality: 39.0 },
        ];
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        write_rd_csv(&a, std::slice::from_ref(&curve)).unwrap();
        write_rd_csv(&b, std::slice::from_ref(&curve)).unwrap();
        let (a_s, b_s) = (a.to_str().unwrap(), b.to_str().unwrap());
        assert_eq!(run(["ldmic", "bdrate", "--anchor", a_s, "--test", b_s]), 0);
        // Requesting a metric the CSV does not carry is a data error.
        assert_eq!(
            run([
                "ldmic", "bdrate", "--anchor", a_s, "--test", b_s, "--metric", "msssim"
            ]),
            2
        );
    }

    #[test]
    fn synth_writes_a_loadable_manifest() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("data");
        let code = run([
            "ldmic",
            "synth",
            "--out",
            out.to_str().unwrap(),
            "--groups",
            "2",
            "--views",
            "3",
            "--height",
            "48",
            "--width",
            "40",
        ]);
        assert_eq!(code, 0);
        let index = DatasetIndex::load(&out.join("manifest.toml")).unwrap();
        assert_eq!(index.groups.len(), 2);
        assert_eq!(index.groups[0].paths.len(), 3);
        let views = index.load_group::<f32>(1).unwrap();
        assert_eq!(views[0].dim(), (3, 48, 40));
    }
}
