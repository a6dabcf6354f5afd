use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use topopack::attention::{dense_oracle_attention, sparse_attention_counted};
use topopack::checkpoint::Checkpoint;
use topopack::grid::{read_fgrid, write_fgrid, FeatureGrid, PackLayout};
use topopack::numerics::Matrix;
use topopack::roi::propose_regions;
use topopack::synth::{synth_corpus, synth_grid, SynthConfig};
use topopack::topomask::{allowed_count, flop_estimate, mask_entry, MaskStats, TopoMaskDescriptor};
use topopack::train::{condense_grid, encoder_config_from_meta, run_stage, Stage, TrainConfig};
use topopack::Error;

use crate::output::emit;
use crate::{LayoutArgs, OutputArgs};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidArgument(msg.into()).into()
}

pub fn load_grid(path: &Path) -> anyhow::Result<FeatureGrid> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_fgrid(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn save_grid(grid: &FeatureGrid, path: &Path) -> anyhow::Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_fgrid(grid, &mut out)?;
    out.flush()?;
    Ok(())
}

/// Every `.fgrid` file under the given paths, directories expanded in name order.
pub fn load_corpus(paths: &[PathBuf]) -> anyhow::Result<Vec<FeatureGrid>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "fgrid"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(usage("no .fgrid files in the corpus"));
    }
    files.iter().map(|f| load_grid(f)).collect()
}

#[allow(clippy::too_many_arguments)]
pub fn synth(
    seed: u64,
    layout: &LayoutArgs,
    dim: usize,
    clusters: usize,
    noise: f64,
    count: usize,
    out: &Path,
    output: &OutputArgs,
) -> anyhow::Result<bool> {
    if count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let cfg = SynthConfig { height: layout.height, width: layout.width, dim, clusters, noise, seed };
    let mut written = Vec::new();
    if count == 1 {
        save_grid(&synth_grid(&cfg)?.grid, out)?;
        written.push(out.display().to_string());
    } else {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        for (n, g) in synth_corpus(&cfg, count)?.iter().enumerate() {
            let path = out.join(format!("grid_{n:04}.fgrid"));
            save_grid(&g.grid, &path)?;
            written.push(path.display().to_string());
        }
    }
    emit(
        json!({
            "command": "synth",
            "seed": seed,
            "H": layout.height,
            "W": layout.width,
            "D": dim,
            "clusters": clusters,
            "noise": noise,
            "files": written,
        }),
        output,
    )?;
    Ok(true)
}

fn padded_layout(args: &LayoutArgs) -> anyhow::Result<PackLayout> {
    if args.k == 0 || args.height == 0 || args.width == 0 {
        return Err(usage("H, W and k must be at least 1"));
    }
    let k = args.k;
    Ok(PackLayout::new(args.height.div_ceil(k) * k, args.width.div_ceil(k) * k, k)?)
}

pub fn layout(args: &LayoutArgs, output: &OutputArgs) -> anyhow::Result<bool> {
    let l = padded_layout(args)?;
    let padded_cells = l.height() * l.width() - args.height * args.width;
    emit(
        json!({
            "command": "layout",
            "H": args.height,
            "W": args.width,
            "k": args.k,
            "padded_H": l.height(),
            "padded_W": l.width(),
            "padded_cells": padded_cells,
            "pack_rows": l.pack_rows(),
            "pack_cols": l.pack_cols(),
            "M": l.pack_count(),
            "tokens_per_pack": l.tokens_per_pack(),
            "N": l.seq_len(),
            "global_index": l.global_token_index(),
            "first_summary_index": l.summary_token_index(0)?,
        }),
        output,
    )?;
    Ok(true)
}

/// Upper bound on N for `--enumerate`, which visits all N² entries.
const ENUMERATE_LIMIT: u64 = 20_000;

pub fn mask(args: &LayoutArgs, packs: Option<u64>, enumerate: bool, output: &OutputArgs) -> anyhow::Result<bool> {
    let packs = match packs {
        Some(m) => m,
        None => padded_layout(args)?.pack_count() as u64,
    };
    if packs == 0 || args.k == 0 {
        return Err(usage("M and k must be at least 1"));
    }
    let stats = MaskStats::new(packs, args.k as u64);
    let mut report = serde_json::to_value(stats)?;
    let mut pass = true;
    if enumerate {
        if stats.seq_len > ENUMERATE_LIMIT {
            return Err(usage(format!("--enumerate supports N up to {ENUMERATE_LIMIT}, got {}", stats.seq_len)));
        }
        let l = PackLayout::strip(packs as usize, args.k)?;
        let n = l.seq_len();
        let counted: u64 = (0..n).map(|i| (0..n).filter(|&j| mask_entry(&l, i, j)).count() as u64).sum();
        pass = counted == stats.allowed;
        report["enumerated"] = json!(counted);
        report["match"] = json!(pass);
    }
    emit(report, output)?;
    Ok(pass)
}

pub fn bench(seed: u64, args: &LayoutArgs, dim: usize, skip_dense: bool, output: &OutputArgs) -> anyhow::Result<bool> {
    if dim == 0 {
        return Err(usage("--D must be at least 1"));
    }
    let l = padded_layout(args)?;
    let n = l.seq_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = Matrix::randn(n, dim, 1.0, &mut rng);
    let k = Matrix::randn(n, dim, 1.0, &mut rng);
    let v = Matrix::randn(n, dim, 1.0, &mut rng);
    let desc = TopoMaskDescriptor::unpadded(&l);

    let t0 = Instant::now();
    let (sparse, evaluated) = sparse_attention_counted(&q, &k, &v, &desc)?;
    let sparse_ms = t0.elapsed().as_secs_f64() * 1e3;
    let (m, kk) = (l.pack_count() as u64, l.k() as u64);
    let allowed = allowed_count(m, kk);
    let stats = MaskStats::new(m, kk);
    let flops = flop_estimate(&l, dim as u64);
    let measured_ratio = evaluated as f64 / (n as f64 * n as f64);
    let mut report = json!({
        "command": "bench",
        "seed": seed,
        "M": m,
        "k": kk,
        "N": n,
        "d": dim,
        "allowed": allowed,
        "evaluated": evaluated,
        "ratio": stats.ratio,
        "measured_ratio": measured_ratio,
        "flops": flops,
    });
    let mut pass = evaluated == allowed && (measured_ratio - stats.ratio).abs() <= 1e-12;
    if !skip_dense {
        let t1 = Instant::now();
        let dense = dense_oracle_attention(&q, &k, &v, |i, j| mask_entry(&l, i, j))?;
        let dense_ms = t1.elapsed().as_secs_f64() * 1e3;
        let deviation = sparse.max_abs_diff(&dense);
        pass &= deviation < 1e-10;
        report["max_deviation"] = json!(deviation);
        if !output.no_timestamp {
            report["dense_ms"] = json!(dense_ms);
        }
    }
    if !output.no_timestamp {
        report["sparse_ms"] = json!(sparse_ms);
    }
    report["pass"] = json!(pass);
    emit(report, output)?;
    Ok(pass)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// One of mae1, mae2, moco, connector.
    #[arg(long)]
    stage: Stage,
    /// FGRID files or directories holding them.
    #[arg(long, value_name = "PATH", required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    /// Checkpoint of the previous stage.
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,
    /// Where to write this stage's checkpoint.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// Learning rate; defaults depend on the stage.
    #[arg(long)]
    lr: Option<f64>,
    /// Heavy-ball momentum of gradient descent.
    #[arg(long, default_value_t = 0.0)]
    sgd_momentum: f64,
    /// MAE masking ratio.
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
    /// InfoNCE temperature.
    #[arg(long, default_value_t = 0.07)]
    tau: f64,
    /// EMA coefficient of the key encoder.
    #[arg(long, default_value_t = 0.99)]
    momentum: f64,
    /// Noise scale of the positive view.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Negative queue capacity.
    #[arg(long, default_value_t = 1024)]
    queue: usize,
    /// Connector query count.
    #[arg(long, default_value_t = 32)]
    queries: usize,
    /// Feed only summaries to the connector, without the global token.
    #[arg(long)]
    no_global: bool,
    #[command(flatten)]
    output: OutputArgs,
}

pub fn train(args: &TrainArgs) -> anyhow::Result<bool> {
    let corpus = load_corpus(&args.corpus)?;
    let dim = corpus[0].dim();
    let resume = match &args.resume {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let mut cfg = TrainConfig::new(args.stage, dim, args.k, args.seed);
    if let Some(ck) = &resume {
        let enc = encoder_config_from_meta(ck)?;
        if enc.dim != dim || enc.k != args.k {
            return Err(usage(format!(
                "checkpoint encoder has D={} k={}, corpus has D={dim} and --k {}",
                enc.dim, enc.k, args.k
            )));
        }
        cfg.encoder = enc;
    }
    cfg.steps = args.steps;
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    cfg.sgd_momentum = args.sgd_momentum;
    cfg.ratio = args.ratio;
    cfg.temperature = args.tau;
    cfg.ema = args.momentum;
    cfg.noise = args.sigma;
    cfg.queue = args.queue;
    cfg.queries = args.queries;
    cfg.include_global = !args.no_global;

    let outcome = run_stage(&corpus, &cfg, resume.as_ref())?;
    outcome.checkpoint.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    emit(
        json!({
            "command": "train",
            "stage": args.stage.name(),
            "seed": args.seed,
            "grids": corpus.len(),
            "steps": cfg.steps,
            "lr": cfg.lr,
            "initial_loss": outcome.initial_loss,
            "final_loss": outcome.final_loss,
            "improved": outcome.improved(),
            "checkpoint": args.out.display().to_string(),
            "log": outcome.logs,
        }),
        &args.output,
    )?;
    Ok(true)
}

pub fn roi(grid: &Path, output: &OutputArgs) -> anyhow::Result<bool> {
    let g = load_grid(grid)?;
    let report = propose_regions(&g, 3)?;
    emit(serde_json::to_value(report)?, output)?;
    Ok(true)
}

#[derive(Args, Debug)]
pub struct ResampleArgs {
    /// FGRID input.
    #[arg(long, value_name = "PATH")]
    grid: PathBuf,
    /// Trained checkpoint; without one, encoder and connector are freshly initialized from --seed.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Output token count.
    #[arg(long, default_value_t = 32)]
    queries: usize,
    /// Feed only summaries to the connector, without the global token.
    #[arg(long)]
    no_global: bool,
    #[command(flatten)]
    output: OutputArgs,
}

pub fn resample(args: &ResampleArgs) -> anyhow::Result<bool> {
    let grid = load_grid(&args.grid)?;
    let ckpt = match &args.checkpoint {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let (len, tokens) = condense_grid(&grid, ckpt.as_ref(), args.k, args.queries, !args.no_global, args.seed)?;
    let rows: Vec<Vec<f64>> = (0..tokens.rows()).map(|i| tokens.row(i).to_vec()).collect();
    emit(
        json!({
            "command": "resample",
            "L": len,
            "queries": tokens.rows(),
            "dim": tokens.cols(),
            "tokens": rows,
        }),
        &args.output,
    )?;
    Ok(true)
}
