//! The `geocloak` command-line tool.
//!
//! Exit codes: 0 success, 1 failure, 2 usage error, 3 optimizer hit a
//! non-finite loss.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::cloak::{cloak, CloakConfig, CloakMode, DEFAULT_ALPHA, DEFAULT_EPS, DEFAULT_STEPS};
use crate::encoder::{ReferenceEncoder, Reconstructor};
use crate::error::Error;
use crate::geometry::{chamfer, project, ViewDirection};
use crate::image::{Image, Mask};
use crate::io::{quantize_within_budget, read_mask, read_png, to_u8, write_mask, write_png};
use crate::metrics::{evaluate, Distortion};
use crate::patterns::{
    glyph_to_pattern, load_custom_pattern, load_pattern_file, write_xyz, Pattern, PatternKind, PatternPoints,
    PatternSource, DEFAULT_SAMPLE_COUNT,
};
use crate::render::{render_reconstruction, DEFAULT_PREVIEW_SIZE};
use crate::report::{manifest_path, write_json, CloakReport, PatternInfo, RunManifest, SCHEMA_VERSION};
use crate::scene::{bundled_scene, SCENE_ENCODER_SEED};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NON_FINITE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "geocloak", version, about = "Geometry cloaks for single-view 3-D reconstruction")]
pub struct Cli {
    /// Zero all wall-clock fields so reruns are byte-identical.
    #[arg(long, global = true, env = "GEOCLOAK_REPRODUCIBLE")]
    pub reproducible: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a target pattern.
    #[command(subcommand)]
    Pattern(PatternCommand),
    /// Optimize a cloak for an image.
    Cloak(CloakArgs),
    /// Reconstruct a point cloud and render previews.
    Recon(ReconArgs),
    /// Compare the reconstructions of a clean and a perturbed image.
    Eval(EvalArgs),
    /// Write the bundled synthetic scene.
    Scene(SceneArgs),
    /// Verify the 8-bit budget between two PNGs.
    Check(CheckArgs),
    /// Encoder weight bundles.
    #[command(subcommand)]
    Encoder(EncoderCommand),
}

#[derive(Subcommand, Debug)]
pub enum PatternCommand {
    /// Sample a 2-D pattern from an alphanumeric glyph.
    Glyph {
        #[arg(long = "char")]
        character: char,
        #[arg(long, default_value_t = DEFAULT_SAMPLE_COUNT)]
        points: usize,
        #[arg(long, env = "GEOCLOAK_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Turn an XYZ point cloud into a customized 3-D pattern.
    FromFile {
        cloud: PathBuf,
        /// Centre and scale into the canonical box.
        #[arg(long)]
        normalize: bool,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct CloakArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// 8-bit gray PNG; values above 127 are foreground.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value = "targeted")]
    pub mode: CloakMode,
    #[arg(long)]
    pub pattern: Option<PathBuf>,
    /// xy, xz, yz, angle:<deg>, front, side or top.
    #[arg(long)]
    pub view: Option<ViewDirection>,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, env = "GEOCLOAK_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Defaults to --seed.
    #[arg(long)]
    pub encoder_seed: Option<u64>,
    /// Load encoder weights instead of seeding them.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReconArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, env = "GEOCLOAK_SEED", default_value_t = SCENE_ENCODER_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Comma-separated views to preview.
    #[arg(long, value_delimiter = ',')]
    pub render: Vec<String>,
    #[arg(long, default_value = ".")]
    pub render_out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PREVIEW_SIZE)]
    pub size: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub clean: PathBuf,
    #[arg(long)]
    pub perturbed: PathBuf,
    #[arg(long, env = "GEOCLOAK_SEED", default_value_t = SCENE_ENCODER_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Also score each distortion of the perturbed image.
    #[arg(long)]
    pub distortions: bool,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct SceneArgs {
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    #[arg(long)]
    pub original: PathBuf,
    #[arg(long)]
    pub cloaked: PathBuf,
    #[arg(long)]
    pub eps: u8,
}

#[derive(Subcommand, Debug)]
pub enum EncoderCommand {
    /// Write the seeded encoder's weights.
    Export {
        #[arg(long, env = "GEOCLOAK_SEED", default_value_t = SCENE_ENCODER_SEED)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
}

/// Parses the process arguments, runs the command and maps errors to exit
/// codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let nan = err
                .chain()
                .any(|e| matches!(e.downcast_ref::<Error>(), Some(Error::NonFiniteLoss { .. })));
            ExitCode::from(if nan { EXIT_NON_FINITE } else { EXIT_FAILURE })
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let started = Instant::now();
    let reproducible = cli.reproducible;
    let (mut manifest, primary) = match cli.command {
        Command::Pattern(cmd) => cmd_pattern(cmd, reproducible)?,
        Command::Cloak(args) => cmd_cloak(args, reproducible)?,
        Command::Recon(args) => cmd_recon(args, reproducible)?,
        Command::Eval(args) => cmd_eval(args, reproducible)?,
        Command::Scene(args) => cmd_scene(args, reproducible)?,
        Command::Check(args) => return cmd_check(args),
        Command::Encoder(EncoderCommand::Export { seed, output }) => {
            ReferenceEncoder::<f64>::new(seed).save(&output)?;
            let mut m = RunManifest::new("encoder export", json!({ "seed": seed }), reproducible);
            m.seed("encoder", seed).output("weights", &output);
            (m, output)
        }
    };
    manifest.finish(started.elapsed(), reproducible);
    write_json(&manifest, &manifest_path(&primary))?;
    Ok(())
}

fn load_encoder(weights: Option<&Path>, seed: u64) -> anyhow::Result<ReferenceEncoder<f64>> {
    match weights {
        Some(p) => ReferenceEncoder::load(p).with_context(|| format!("loading weights {}", p.display())),
        None => Ok(ReferenceEncoder::new(seed)),
    }
}

fn load_image(path: &Path) -> anyhow::Result<Image<f64>> {
    read_png(path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_pattern(cmd: PatternCommand, reproducible: bool) -> anyhow::Result<(RunManifest, PathBuf)> {
    match cmd {
        PatternCommand::Glyph {
            character,
            points,
            seed,
            output,
        } => {
            let pattern = glyph_to_pattern::<f64>(character, points, seed)?;
            pattern.save(&output)?;
            let mut m = RunManifest::new(
                "pattern glyph",
                json!({ "char": character.to_string(), "points": points, "seed": seed }),
                reproducible,
            );
            m.seed("pattern", seed).output("pattern", &output);
            Ok((m, output))
        }
        PatternCommand::FromFile {
            cloud,
            normalize,
            output,
        } => {
            let pattern = load_custom_pattern::<f64>(&cloud, normalize)
                .with_context(|| format!("reading {}", cloud.display()))?;
            pattern.save(&output)?;
            let mut m = RunManifest::new(
                "pattern from-file",
                json!({ "normalize": normalize, "points": pattern.len() }),
                reproducible,
            );
            m.input("cloud", &cloud).output("pattern", &output);
            Ok((m, output))
        }
    }
}

fn pattern_info(p: &Pattern<f64>) -> PatternInfo {
    PatternInfo {
        kind: match p.kind {
            PatternKind::Predefined => "predefined".into(),
            PatternKind::Customized => "customized".into(),
        },
        source: match &p.source {
            PatternSource::Glyph(c) => format!("glyph:{c}"),
            PatternSource::File(f) => f.display().to_string(),
        },
        dimension: p.dimension(),
        points: p.len(),
        seed: p.seed,
    }
}

/// Pattern Chamfer distance of `image`'s reconstruction.
pub fn pattern_distance(
    encoder: &ReferenceEncoder<f64>,
    image: &Image<f64>,
    pattern: &Pattern<f64>,
    view: Option<ViewDirection>,
) -> crate::Result<f64> {
    let cloud = encoder.encode(image)?;
    match (&pattern.points, view) {
        (PatternPoints::Planar(p), Some(v)) => chamfer(&project(&cloud, v), p),
        (PatternPoints::Spatial(p), _) => chamfer(&cloud, p),
        (PatternPoints::Planar(_), None) => Err(Error::Config("a 2-D pattern requires a view direction".into())),
    }
}

fn cmd_cloak(args: CloakArgs, reproducible: bool) -> anyhow::Result<(RunManifest, PathBuf)> {
    let started = Instant::now();
    let image = load_image(&args.image)?;
    let mask = match &args.mask {
        Some(p) => Some(read_mask(p).with_context(|| format!("reading mask {}", p.display()))?),
        None => None,
    };
    let encoder_seed = args.encoder_seed.unwrap_or(args.seed);
    let encoder = load_encoder(args.weights.as_deref(), encoder_seed)?;
    encoder.check_image(&image)?;

    let pattern = match (&args.pattern, args.mode) {
        (Some(p), _) => Some(load_pattern_file::<f64>(p).with_context(|| format!("reading pattern {}", p.display()))?),
        (None, CloakMode::Targeted) => bail!("--mode targeted requires --pattern"),
        (None, _) => None,
    };
    let view = match (&pattern, args.view) {
        (Some(p), None) if p.dimension() == 2 && args.mode == CloakMode::Targeted => {
            bail!("a 2-D pattern requires --view")
        }
        (_, v) => v,
    };
    let config = CloakConfig {
        mode: args.mode,
        eps: args.eps,
        alpha: args.alpha,
        steps: args.steps,
        view,
        pattern: pattern.clone(),
        seed: args.seed,
    };
    let result = cloak(&image, mask.as_ref(), &encoder, &config)?;

    let shipped = quantize_within_budget(&result.image, &image, args.eps);
    write_png(&shipped, &args.output)?;

    let targeted = args.mode == CloakMode::Targeted;
    let pattern_ref = pattern.as_ref().filter(|_| targeted);
    let shipped_cd = match pattern_ref {
        Some(p) => Some(pattern_distance(&encoder, &shipped, p, view)?),
        None => None,
    };
    let linf_delta_8bit = shipped
        .data()
        .iter()
        .zip(image.data())
        .map(|(&a, &b)| to_u8(a).abs_diff(to_u8(b)))
        .max()
        .unwrap_or(0);
    let report = CloakReport {
        schema: SCHEMA_VERSION,
        mode: args.mode.to_string(),
        eps: args.eps,
        alpha: args.alpha,
        steps: args.steps,
        seed: args.seed,
        encoder_seed: encoder.seed(),
        view: view.map(|v| v.to_string()),
        pattern: pattern.as_ref().map(pattern_info),
        mask_pixels: mask.as_ref().map_or(image.height() * image.width(), Mask::count),
        initial_loss: result.initial_loss,
        loss_trace: result.loss_trace.clone(),
        best_index: result.best_index,
        best_loss: result.best_loss(),
        final_cd: pattern_ref.map(|_| result.best_loss()),
        shipped_cd,
        linf_delta: result.linf(),
        linf_delta_8bit,
        elapsed_ms: if reproducible { 0 } else { started.elapsed().as_millis() as u64 },
    };
    write_json(&report, &args.report)?;
    println!(
        "{}: best loss {:.6} at step {} (initial {:.6}), |delta|_inf = {}/255",
        args.mode,
        result.best_loss(),
        result.best_index + 1,
        result.initial_loss,
        linf_delta_8bit
    );

    let mut m = RunManifest::new(
        "cloak",
        json!({
            "mode": args.mode,
            "view": view,
            "eps": args.eps,
            "alpha": args.alpha,
            "steps": args.steps,
            "seed": args.seed,
            "encoder_seed": encoder.seed(),
        }),
        reproducible,
    );
    m.input("image", &args.image);
    if let Some(p) = &args.mask {
        m.input("mask", p);
    }
    if let Some(p) = &args.pattern {
        m.input("pattern", p);
    }
    if let Some(p) = &args.weights {
        m.input("weights", p);
    }
    m.seed("cloak", args.seed)
        .seed("encoder", encoder.seed())
        .output("image", &args.output)
        .output("report", &args.report);
    Ok((m, args.output))
}

fn view_file_stem(token: &str) -> String {
    token.trim().replace([':', '/', '\\'], "_")
}

fn cmd_recon(args: ReconArgs, reproducible: bool) -> anyhow::Result<(RunManifest, PathBuf)> {
    let image = load_image(&args.image)?;
    let encoder = load_encoder(args.weights.as_deref(), args.seed)?;
    let views = args
        .render
        .iter()
        .filter(|t| !t.trim().is_empty())
        .map(|t| Ok((view_file_stem(t), t.parse::<ViewDirection>()?)))
        .collect::<crate::Result<Vec<_>>>()?;
    let reconstructor = Reconstructor::new(encoder);
    let recon = reconstructor.reconstruct(&image)?;
    write_xyz(
        &args.output,
        &recon.cloud,
        &[format!("reconstruction points={} seed={}", recon.cloud.len(), args.seed).as_str()],
    )?;

    let mut m = RunManifest::new(
        "recon",
        json!({
            "seed": reconstructor.encoder.seed(),
            "render": views.iter().map(|(_, v)| v.to_string()).collect::<Vec<_>>(),
            "size": args.size,
        }),
        reproducible,
    );
    m.input("image", &args.image)
        .seed("encoder", reconstructor.encoder.seed())
        .output("cloud", &args.output);
    if !views.is_empty() {
        std::fs::create_dir_all(&args.render_out)?;
    }
    for (stem, view) in views {
        let path = args.render_out.join(format!("{stem}.png"));
        write_png(&render_reconstruction(&recon, view, args.size)?, &path)?;
        m.output(&format!("render_{stem}"), &path);
    }
    Ok((m, args.output))
}

fn cmd_eval(args: EvalArgs, reproducible: bool) -> anyhow::Result<(RunManifest, PathBuf)> {
    let clean = load_image(&args.clean)?;
    let perturbed = load_image(&args.perturbed)?;
    let reconstructor = Reconstructor::new(load_encoder(args.weights.as_deref(), args.seed)?);
    let distortions: &[Distortion] = if args.distortions { &Distortion::MENU } else { &[] };
    let report = evaluate(&clean, &perturbed, &reconstructor, distortions, args.seed)?;
    write_json(&report, &args.output)?;
    println!(
        "psnr {} dB, ssim {:.6}, cd {:.6e}",
        report.scores.psnr, report.scores.ssim, report.scores.cd
    );
    let mut m = RunManifest::new(
        "eval",
        json!({ "seed": args.seed, "distortions": args.distortions }),
        reproducible,
    );
    m.input("clean", &args.clean)
        .input("perturbed", &args.perturbed)
        .seed("encoder", reconstructor.encoder.seed())
        .output("report", &args.output);
    Ok((m, args.output))
}

fn cmd_scene(args: SceneArgs, reproducible: bool) -> anyhow::Result<(RunManifest, PathBuf)> {
    let (image, mask) = bundled_scene::<f64>();
    write_png(&image, &args.output)?;
    let mut m = RunManifest::new("scene", json!({ "size": image.height() }), reproducible);
    m.output("image", &args.output);
    if let Some(p) = &args.mask_out {
        write_mask(&mask, p)?;
        m.output("mask", p);
    }
    Ok((m, args.output))
}

fn cmd_check(args: CheckArgs) -> anyhow::Result<()> {
    let a = load_image(&args.original)?;
    let b = load_image(&args.cloaked)?;
    if !a.same_shape(&b) {
        bail!(
            "size mismatch: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        );
    }
    let max = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| to_u8(x).abs_diff(to_u8(y)))
        .max()
        .unwrap_or(0);
    println!("max 8-bit difference {max} (budget {})", args.eps);
    if max > args.eps {
        bail!("budget exceeded: {max} > {}", args.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn missing_output_is_a_usage_error() {
        let err = Cli::try_parse_from(["geocloak", "pattern", "glyph", "--char", "A"]).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE as i32);
    }

    #[test]
    fn views_and_modes_parse() {
        let cli = Cli::try_parse_from([
            "geocloak", "cloak", "--image", "a.png", "--mode", "adv-image", "--view", "angle:30", "-o", "b.png",
            "--report", "r.json",
        ])
        .unwrap();
        let Command::Cloak(args) = cli.command else { panic!() };
        assert_eq!(args.mode, CloakMode::AdvImage);
        assert_eq!(args.view, Some(ViewDirection::Yaw(30.0)));
        assert!(Cli::try_parse_from(["geocloak", "cloak", "--image", "a", "--view", "up", "-o", "b", "--report", "r"]).is_err());
        assert_eq!(view_file_stem("angle:45"), "angle_45");
    }
}
