// SPDX-License-Identifier: Apache-2.0

//! `featfuse`: runs cooperative perception pipelines over synthetic scenes
//! and writes CSV reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use featfuse_core::encoder::{encode_cloud, spatial_features, EncoderWeights};
use featfuse_core::evalkit::scene::GridConfig;
use featfuse_core::evalkit::{calibrated_detector, drift_experiment, generate_scene, occlusion_scene, SceneConfig};
use featfuse_core::fusion::ChannelMask;
use featfuse_core::netsim::{LinkModel, Strategy};
use featfuse_core::pipeline::{run_pipeline, RunConfig};
use featfuse_core::wire::{compress, decompress, FeatureMessage, Payload};
use featfuse_core::{bundled, report, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "featfuse", version, about = "Feature-level cooperative perception toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run scene → encode → fuse → detect → evaluate → link simulation and
    /// write detections.csv, metrics.csv, sizes.csv and timeline.csv.
    Pipeline(PipelineArgs),
    /// Measure how sender pose drift changes per-target scores.
    Drift(DriftArgs),
    /// Encode one vehicle's features (or an unpacked message) into a
    /// compressed message file.
    Pack(PackArgs),
    /// Verify and decompress a message file.
    Unpack(UnpackArgs),
    /// Aggregate pipeline CSVs below a directory into plot series.
    Report(ReportArgs),
    /// Print a scene configuration (bundled or generated).
    Scene(SceneArgs),
}

#[derive(Args, Debug)]
struct SceneSel {
    /// Scene config file, or a bundled scene name (occlusion, street).
    #[arg(long, default_value = bundled::DEFAULT)]
    scene: String,
    /// Run seed; falls back to the scene's own, then 0.
    #[arg(long, env = "FCOOPER_SEED")]
    seed: Option<u64>,
    /// Seed of the fixed encoder weights.
    #[arg(long, default_value_t = featfuse_core::pipeline::DEFAULT_WEIGHTS_SEED)]
    weights_seed: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Raw,
    Vff,
    Sff,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Raw => Strategy::Raw,
            StrategyArg::Vff => Strategy::Vff,
            StrategyArg::Sff => Strategy::Sff,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum LinkArg {
    Dsrc,
    DsrcLow,
    Mmwave,
}

impl LinkArg {
    fn name(self) -> &'static str {
        match self {
            Self::Dsrc => "dsrc",
            Self::DsrcLow => "dsrc-low",
            Self::Mmwave => "mmwave",
        }
    }
}

fn parse_mask(s: &str) -> std::result::Result<ChannelMask, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[command(flatten)]
    sel: SceneSel,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// full, key, min, or channel ranges such as 55-99 or 0-3,8.
    #[arg(long, value_parser = parse_mask)]
    mask: Option<ChannelMask>,
    #[arg(long, value_enum)]
    link: Option<LinkArg>,
    /// Simulated seconds (one exchange per second).
    #[arg(long)]
    duration: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DriftArgs {
    #[command(flatten)]
    sel: SceneSel,
    /// Sender position error, meters.
    #[arg(long, default_value_t = 0.1)]
    drift: f64,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    /// Channels the sender shares for spatial fusion.
    #[arg(long, value_parser = parse_mask, default_value = "full")]
    mask: ChannelMask,
    /// Output directory; drift.csv is written there.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PackArgs {
    #[command(flatten)]
    sel: SceneSel,
    /// Vehicle to encode, by name or index (default: the first sender).
    #[arg(long)]
    vehicle: Option<String>,
    /// vff packs voxel features, sff packs masked spatial features.
    #[arg(long, value_enum, default_value = "sff")]
    strategy: StrategyArg,
    #[arg(long, value_parser = parse_mask, default_value = "full")]
    mask: ChannelMask,
    /// Pack this uncompressed message instead of encoding a scene.
    #[arg(long, conflicts_with_all = ["vehicle", "strategy", "mask"])]
    message: Option<PathBuf>,
    /// Compressed message file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct UnpackArgs {
    /// Compressed message file.
    input: PathBuf,
    /// Write the uncompressed message here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the payload as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory searched recursively for metrics.csv and sizes.csv.
    dir: PathBuf,
    /// Where the series files go (default: DIR).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SceneArgs {
    /// Bundled scene to print.
    #[arg(long, default_value = bundled::DEFAULT, conflicts_with = "occlusion")]
    scene: String,
    /// Generate a random occlusion scene from this seed instead.
    #[arg(long)]
    occlusion: Option<u64>,
    /// Grid preset for generated scenes (reference, desk).
    #[arg(long, default_value = "desk")]
    grid: String,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// `println!` that ignores a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

fn load_scene(spec: &str) -> Result<SceneConfig> {
    let path = Path::new(spec);
    if path.is_file() {
        return SceneConfig::load(path);
    }
    bundled::scene(spec).unwrap_or_else(|| {
        let names: Vec<_> = bundled::ALL.iter().map(|s| s.0).collect();
        Err(Error::Config(format!(
            "scene {spec:?} is neither a file nor a bundled scene ({})",
            names.join(", ")
        )))
    })
}

fn seed_of(sel: &SceneSel, cfg: &SceneConfig) -> u64 {
    sel.seed.or(cfg.network.seed).unwrap_or(0)
}

fn cmd_pipeline(a: &PipelineArgs) -> Result<()> {
    let cfg = load_scene(&a.sel.scene)?;
    let mut run = RunConfig::for_scene(&cfg)?;
    run.seed = seed_of(&a.sel, &cfg);
    run.weights_seed = a.sel.weights_seed;
    if let Some(s) = a.strategy {
        run.strategy = s.into();
    }
    if let Some(m) = a.mask {
        run.mask = m;
    }
    if let Some(l) = a.link {
        run.link = LinkModel::profile(l.name())?;
        run.link_name = l.name().into();
    }
    if let Some(d) = a.duration {
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::Config(format!("duration must be positive, got {d}")));
        }
        run.duration = d;
    }
    let out = run_pipeline(&cfg, &run)?;
    out.write_csvs(&a.out)?;
    let all = |p: &featfuse_core::evalkit::PrecisionReport| {
        let tp = p.near.tp + p.far.tp;
        format!("{tp}/{}", tp + p.near.fp + p.far.fp)
    };
    say!(
        "{} {} seed {}: {} truths; single {} tp, fused {} tp; {} wire bytes; {:.1} ms per exchange",
        cfg.name,
        out.label,
        run.seed,
        out.truths.len(),
        all(&out.single_precision),
        all(&out.fused_precision),
        out.sizes.iter().map(|s| s.wire_bytes).sum::<u64>(),
        out.budget.total() * 1e3,
    );
    say!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_drift(a: &DriftArgs) -> Result<()> {
    let cfg = load_scene(&a.sel.scene)?;
    let seed = seed_of(&a.sel, &cfg);
    let scene = generate_scene(&cfg, seed)?;
    let weights = EncoderWeights::from_seed(a.sel.weights_seed);
    let detector = calibrated_detector(&weights, &scene.spec, &cfg.lidar)?;
    let report = drift_experiment(&scene, &weights, &detector, a.mask, a.drift, a.trials, seed)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("drift.csv");
    report.write_csv(fs::File::create(&path)?)?;
    for p in [featfuse_core::evalkit::Paradigm::Vff, featfuse_core::evalkit::Paradigm::Sff] {
        say!(
            "{p}: mean |score change| {:.4}, missed {}, gained {}",
            report.mean_abs_delta(p),
            report.missed(p),
            report.gained(p)
        );
    }
    say!("wrote {}", path.display());
    Ok(())
}

fn cmd_pack(a: &PackArgs) -> Result<()> {
    let wire = if let Some(path) = &a.message {
        let logical = fs::read(path)?;
        FeatureMessage::decode(&logical)?;
        compress(&logical)?
    } else {
        let cfg = load_scene(&a.sel.scene)?;
        let seed = seed_of(&a.sel, &cfg);
        let scene = generate_scene(&cfg, seed)?;
        let i = match &a.vehicle {
            None => 1,
            Some(v) => cfg
                .vehicles
                .iter()
                .position(|c| &c.name == v)
                .or_else(|| v.parse().ok().filter(|&i: &usize| i < cfg.vehicles.len()))
                .ok_or_else(|| Error::Config(format!("no vehicle {v:?} in scene {}", cfg.name)))?,
        };
        let weights = EncoderWeights::from_seed(a.sel.weights_seed);
        let store = encode_cloud(&scene.spec, &scene.clouds[i], &weights, seed ^ i as u64)?;
        let msg = match a.strategy {
            StrategyArg::Vff => FeatureMessage::voxel(scene.poses[i], store),
            StrategyArg::Sff => {
                FeatureMessage::spatial(scene.poses[i], scene.spec, &spatial_features(&store, &weights)?, a.mask)?
            }
            StrategyArg::Raw => return Err(Error::Config("raw clouds are not packed as feature messages".into())),
        };
        msg.to_wire()?
    };
    fs::write(&a.out, &wire)?;
    say!("wrote {} ({} bytes)", a.out.display(), wire.len());
    Ok(())
}

fn cmd_unpack(a: &UnpackArgs) -> Result<()> {
    let wire = fs::read(&a.input)?;
    let logical = decompress(&wire)?;
    let msg = FeatureMessage::decode(&logical)?;
    let (kind, entries) = match &msg.payload {
        Payload::Voxel(s) => ("voxel", s.len()),
        Payload::Spatial(m) => ("spatial", m.channels()),
        Payload::Detections(d) => ("detections", d.len()),
    };
    let p = msg.pose;
    say!(
        "{kind} message: {entries} entries, mask {}, pose ({:.3}, {:.3}, {:.3}, {:.4}), grid {}x{}x{}, {} bytes ({} on the wire)",
        msg.mask,
        p.x,
        p.y,
        p.z,
        p.yaw,
        msg.grid.width(),
        msg.grid.height(),
        msg.grid.depth(),
        logical.len(),
        wire.len()
    );
    if let Some(out) = &a.out {
        fs::write(out, &logical)?;
    }
    if let Some(path) = &a.csv {
        write_payload_csv(&msg.payload, path)?;
    }
    Ok(())
}

fn write_payload_csv(payload: &Payload, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    match payload {
        Payload::Voxel(s) => {
            let mut head = vec!["ix".to_string(), "iy".into(), "iz".into()];
            head.extend((0..featfuse_core::voxel::FEATURE_DIM).map(|i| format!("f{i}")));
            w.write_record(&head)?;
            for (k, f) in s.iter() {
                let mut row = vec![k.ix.to_string(), k.iy.to_string(), k.iz.to_string()];
                row.extend(f.iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        Payload::Spatial(m) => {
            w.write_record(["channel", "row", "col", "value"])?;
            for (i, &c) in m.channel_ids.iter().enumerate() {
                for (cell, &v) in m.plane(i).iter().enumerate() {
                    if v != 0.0 {
                        let (r, col) = (cell / m.width, cell % m.width);
                        w.write_record([c.to_string(), r.to_string(), col.to_string(), v.to_string()])?;
                    }
                }
            }
        }
        Payload::Detections(d) => {
            w.write_record(["cx", "cy", "cz", "l", "w", "h", "yaw", "score"])?;
            for d in d {
                let b = d.bbox;
                w.write_record([b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw, d.score].map(|v| v.to_string()))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let r = report::aggregate(&a.dir)?;
    let files = r.write(a.out.as_ref().unwrap_or(&a.dir))?;
    say!("aggregated {} runs into {} series files", r.runs, files.len());
    for f in files {
        say!("  {}", f.display());
    }
    Ok(())
}

fn cmd_scene(a: &SceneArgs) -> Result<()> {
    let text = match a.occlusion {
        Some(seed) => occlusion_scene(seed, GridConfig::preset(&a.grid))?.to_toml(),
        None => bundled::ALL
            .iter()
            .find(|s| s.0 == a.scene)
            .map(|s| s.1.to_string())
            .ok_or_else(|| Error::Config(format!("no bundled scene {:?}", a.scene)))?,
    };
    match &a.out {
        Some(p) => fs::write(p, text)?,
        None => {
            use std::io::Write as _;
            let _ = std::io::stdout().write_all(text.as_bytes());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Drift(a) => cmd_drift(a),
        Command::Pack(a) => cmd_pack(a),
        Command::Unpack(a) => cmd_unpack(a),
        Command::Report(a) => cmd_report(a),
        Command::Scene(a) => cmd_scene(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("featfuse: error: {e}");
            ExitCode::FAILURE
        }
    }
}
