use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hacpp::anchor::{
    generate, load_ply_with_extras, write_ply, AnchorError, AnchorSet, AttributeGroup,
    SyntheticConfig,
};
use hacpp::masking::MaskState;
use hacpp::pipeline::{
    bit_allocation_stats, decode, encode, evaluate, voxel_csv, ErrorKind, Evaluation, LossReport,
    PipelineError, Section, TrainConfig, TrainedState,
};

#[derive(Parser)]
#[command(
    name = "hacpp",
    version,
    about = "Learned entropy codec for anchor-based 3D Gaussian scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic correlated anchor cloud.
    Gen(GenArgs),
    /// Train the context model and masks on an anchor cloud.
    Fit(FitArgs),
    /// Compress an anchor cloud with a trained state.
    Encode(EncodeArgs),
    /// Reconstruct quantized anchors from a stream.
    Decode(DecodeArgs),
    /// Print the bit budget of a stream.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of anchors.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output PLY.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Input anchor PLY.
    input: PathBuf,
    /// Rate weight.
    #[arg(long, default_value_t = 1e-3)]
    lambda: f64,
    /// Total iterations; phase boundaries scale with it.
    #[arg(long, default_value_t = 30_000)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of anchors sampled per iteration.
    #[arg(long, default_value_t = 0.05)]
    sample_frac: f64,
    #[arg(long)]
    grid_3d_levels: Option<usize>,
    #[arg(long)]
    grid_2d_levels: Option<usize>,
    #[arg(long)]
    q0_feature: Option<f32>,
    #[arg(long)]
    q0_scaling: Option<f32>,
    #[arg(long)]
    q0_offset: Option<f32>,
    /// Disable the intra-anchor feature context.
    #[arg(long)]
    no_intra: bool,
    /// Learning rate of the mask logits.
    #[arg(long)]
    mask_lr: Option<f64>,
    /// Output directory for `model.state` and `metrics.json`.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    /// Input anchor PLY. Columns `mask_0..` override the trained masks.
    input: PathBuf,
    /// Trained state written by `fit`.
    #[arg(long)]
    state: PathBuf,
    /// Output stream.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    input: PathBuf,
    /// Output PLY with quantized attributes and mask columns.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    input: PathBuf,
    /// Voxel grid resolution for the per-voxel bit allocation CSV.
    #[arg(long)]
    stats_voxel_res: Option<u32>,
    /// Where to write the CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct GroupBits {
    feature: f64,
    scaling: f64,
    offset: f64,
}

#[derive(Serialize)]
struct Metrics<'a> {
    config: &'a TrainConfig,
    anchors: usize,
    seconds: f64,
    bits_per_param: GroupBits,
    anchor_ratio: f64,
    gaussian_ratio: f64,
    evaluation: &'a Evaluation,
    /// Per-phase window means of the total loss.
    smoothed_loss: Vec<SmoothedPoint>,
    loss_curve: &'a [LossReport],
}

#[derive(Serialize)]
struct SmoothedPoint {
    phase: u8,
    iteration: usize,
    total: f64,
}

fn smooth(history: &[LossReport], windows_per_phase: usize) -> Vec<SmoothedPoint> {
    let mut out = Vec::new();
    for phase in 1..=3u8 {
        let part: Vec<&LossReport> = history.iter().filter(|r| r.phase == phase).collect();
        if part.is_empty() {
            continue;
        }
        let w = part.len().div_ceil(windows_per_phase).max(1);
        for chunk in part.chunks(w) {
            out.push(SmoothedPoint {
                phase,
                iteration: chunk[0].iteration,
                total: chunk.iter().map(|r| r.total).sum::<f64>() / chunk.len() as f64,
            });
        }
    }
    out
}

fn load_ply(path: &Path) -> Result<(AnchorSet, Vec<(String, Vec<f32>)>)> {
    load_ply_with_extras(path).with_context(|| format!("reading {}", path.display()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn gen(a: GenArgs) -> Result<()> {
    let set = generate(&SyntheticConfig {
        n: a.n,
        seed: a.seed,
        ..SyntheticConfig::default()
    });
    let mut w = BufWriter::new(
        fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?,
    );
    write_ply(&set, &[], &mut w)?;
    println!("wrote {} anchors to {}", set.len(), a.out.display());
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    let (anchors, _) = load_ply(&a.input)?;
    let mut cfg = TrainConfig::default().with_iterations(a.iters);
    cfg.lambda = a.lambda;
    cfg.seed = a.seed;
    cfg.sample_fraction = a.sample_frac;
    if let Some(l) = a.grid_3d_levels {
        cfg.grid.levels_3d = l;
    }
    if let Some(l) = a.grid_2d_levels {
        cfg.grid.levels_2d = l;
    }
    for (g, v) in [
        (AttributeGroup::Feature, a.q0_feature),
        (AttributeGroup::Scaling, a.q0_scaling),
        (AttributeGroup::Offset, a.q0_offset),
    ] {
        if let Some(v) = v {
            cfg.quant.q0[g.index()] = v;
        }
    }
    if a.no_intra {
        cfg.context.use_intra = false;
    }
    if let Some(lr) = a.mask_lr {
        cfg.lr_mask = lr;
    }
    let start = std::time::Instant::now();
    let mut trainer = hacpp::CodecTrainer::new(&anchors, cfg.clone())?;
    trainer.run()?;
    let out = trainer.finish();
    let seconds = start.elapsed().as_secs_f64();
    let ev = evaluate(&out.model, &anchors, &out.masks, &cfg.distortion)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let state = TrainedState {
        model: out.model.to_record(),
        masks: out.masks.clone(),
        total_anchors: anchors.len(),
        config: cfg.clone(),
    };
    fs::write(a.out.join("model.state"), state.to_bytes()?)?;
    let metrics = Metrics {
        config: &cfg,
        anchors: anchors.len(),
        seconds,
        bits_per_param: GroupBits {
            feature: ev.rate.bits_per_param(AttributeGroup::Feature),
            scaling: ev.rate.bits_per_param(AttributeGroup::Scaling),
            offset: ev.rate.bits_per_param(AttributeGroup::Offset),
        },
        anchor_ratio: ev.anchor_ratio,
        gaussian_ratio: ev.gaussian_ratio,
        evaluation: &ev,
        smoothed_loss: smooth(&out.history, 10),
        loss_curve: &out.history,
    };
    fs::write(
        a.out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)?,
    )?;
    println!(
        "trained {} iterations in {seconds:.1}s: D {:.6}, bits/param f {:.3} l {:.3} o {:.3}, r(anchor) {:.3}, r(Gaussian) {:.3}",
        cfg.iterations,
        ev.d_surr,
        metrics.bits_per_param.feature,
        metrics.bits_per_param.scaling,
        metrics.bits_per_param.offset,
        ev.anchor_ratio,
        ev.gaussian_ratio
    );
    Ok(())
}

/// Masks from `mask_<k>` columns, if the file has all of them.
fn masks_from_columns(extras: &[(String, Vec<f32>)], n: usize, k: usize) -> Option<MaskState> {
    let cols: Vec<&Vec<f32>> = (0..k)
        .map(|j| {
            extras
                .iter()
                .find(|(name, _)| *name == format!("mask_{j}"))
                .map(|(_, c)| c)
        })
        .collect::<Option<_>>()?;
    let offset_masks = (0..n)
        .flat_map(|i| cols.iter().map(move |c| c[i] > 0.5))
        .collect();
    Some(MaskState {
        offsets_per_anchor: k,
        offset_masks,
    })
}

fn encode_cmd(a: EncodeArgs) -> Result<()> {
    let (anchors, extras) = load_ply(&a.input)?;
    let state = TrainedState::from_bytes(&read_file(&a.state)?)?;
    let model = state.model.build::<f32>()?;
    let k = anchors.layout.offsets_per_anchor;
    let masks = match masks_from_columns(&extras, anchors.len(), k) {
        Some(m) => m,
        None if state.masks.len() == anchors.len() => state.masks.clone(),
        None => bail!(PipelineError::Mismatch(format!(
            "{} anchors but the state holds masks for {} and the file has no mask columns",
            anchors.len(),
            state.masks.len()
        ))),
    };
    let enc = encode(&anchors, &model, &masks)?;
    fs::write(&a.out, &enc.bytes).with_context(|| format!("writing {}", a.out.display()))?;

    let r = &enc.report;
    let label = |s: Section| match s {
        Section::Locations => "x^a (locations)",
        Section::Features => "f^a (features)",
        Section::Scalings => "l (scalings)",
        Section::Offsets => "o (offsets)",
        Section::Grid => "H (hash grid)",
        Section::Masks => "m (masks)",
        Section::Weights => "MLP (weights)",
    };
    println!("{:<18} {:>12} {:>8}", "section", "bytes", "share");
    let order = [
        Section::Locations,
        Section::Features,
        Section::Scalings,
        Section::Offsets,
        Section::Grid,
        Section::Masks,
        Section::Weights,
    ];
    for s in order {
        let b = r.section(s).bytes;
        println!(
            "{:<18} {:>12} {:>7.2}%",
            label(s),
            b,
            100.0 * b as f64 / r.total_bytes as f64
        );
    }
    println!("{:<18} {:>12}", "framing", r.framing_bytes);
    println!("{:<18} {:>12}", "total", r.total_bytes);
    println!(
        "anchors {} of {} valid, written to {}",
        r.valid_anchors,
        r.total_anchors,
        a.out.display()
    );
    Ok(())
}

fn decode_cmd(a: DecodeArgs) -> Result<()> {
    let dec = decode(&read_file(&a.input)?)?;
    let set = dec.anchors();
    let masks = &dec.scene.masks;
    let k = masks.offsets_per_anchor;
    let mut extra: Vec<(String, Vec<f32>)> = vec![(
        "valid".into(),
        (0..set.len())
            .map(|i| masks.anchor_valid(i) as u8 as f32)
            .collect(),
    )];
    for j in 0..k {
        extra.push((
            format!("mask_{j}"),
            (0..set.len())
                .map(|i| masks.row(i)[j] as u8 as f32)
                .collect(),
        ));
    }
    let mut w = BufWriter::new(
        fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?,
    );
    write_ply(&set, &extra, &mut w)?;
    println!("decoded {} anchors to {}", set.len(), a.out.display());
    Ok(())
}

fn inspect_cmd(a: InspectArgs) -> Result<()> {
    let bytes = read_file(&a.input)?;
    let dec = decode(&bytes)?;
    let h = &dec.header;
    let masks = &dec.scene.masks;
    let valid = masks.len();
    let kept_offsets = masks.offset_masks.iter().filter(|&&m| m).count();
    let counts = [valid * h.layout.feature_dim, valid * 6, 3 * kept_offsets];
    println!(
        "stream {} bytes, {} anchors ({} valid)",
        bytes.len(),
        h.total_anchors,
        h.valid_anchors
    );
    println!(
        "{:<10} {:>10} {:>12} {:>10} {:>12}",
        "group", "params", "bits", "bits/param", "estimate"
    );
    for g in AttributeGroup::ALL {
        let sec = dec.header.sections[Section::of_group(g) as usize].length as f64 * 8.0;
        let n = counts[g.index()];
        let per = if n == 0 { 0.0 } else { sec / n as f64 };
        println!(
            "{:<10} {:>10} {:>12.0} {:>10.4} {:>12.4}",
            g.name(),
            n,
            sec,
            per,
            dec.coded.bits_per_param(g)
        );
    }
    let total = h.total_anchors.max(1) as f64;
    let gaussians = (h.total_anchors as usize * h.layout.offsets_per_anchor).max(1) as f64;
    println!("r(anchor) {:.4}", h.valid_anchors as f64 / total);
    println!("r(Gaussian) {:.4}", kept_offsets as f64 / gaussians);
    if let Some(res) = a.stats_voxel_res {
        let coords = dec.scene.locations.normalized();
        let stats = bit_allocation_stats(&coords, &dec.coded.per_anchor, res);
        let csv = voxel_csv(&stats);
        match a.out {
            Some(p) => fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
            None => print!("{csv}"),
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return match e.kind() {
                ErrorKind::Input => 2,
                ErrorKind::Stream => 3,
                ErrorKind::Divergence => 4,
            };
        }
        if cause.downcast_ref::<AnchorError>().is_some() {
            return 2;
        }
    }
    2
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("HACPP_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("HACPP_THREADS={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Fit(a) => fit(a),
        Command::Encode(a) => encode_cmd(a),
        Command::Decode(a) => decode_cmd(a),
        Command::Inspect(a) => inspect_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
