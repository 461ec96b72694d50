//! `latent-compose`: object removal, copy-paste harmonization, semantic
//! composition and the low-density diagnostic from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};
use latent_compose::assets::{
    self, BackendSelector, ConditionKind, ConditionsSection, LossLog, RunConfig,
};
use latent_compose::backend::adapter::{AdapterRegistry, ADAPTER_ENV};
use latent_compose::backend::{
    AnalyticGaussianBackend, AnalyticGaussianConfig, DiffusionBackend, PromptRole, ToyAttentionBackend,
    ToyAttentionConfig,
};
use latent_compose::guidance::ToyPyramid;
use latent_compose::pipeline::{
    harmonize, low_density_map, paste_object, remove_object, run_pipeline, semantic_compose, CompositionRequest,
    Conditions, Phase, PipelineError, PlacementSpec,
};
use latent_compose::tensor::{ImageTensor, PixelMask};
use latent_compose::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const AFTER_HELP: &str = "\
Precedence: command-line flags override the config file, which overrides the built-in defaults.
Exit codes: 0 success, 1 usage or validation error, 2 runtime error.
Adapter backends read weights and credentials from the directory in $LATENT_COMPOSE_ADAPTER_HOME.";

#[derive(Debug, Parser)]
#[command(name = "latent-compose", version, about, after_help = AFTER_HELP)]
struct Cli {
    /// TOML run configuration; missing keys take the defaults
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed for every phase [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// analytic, toy-attention or adapter:<spec> [default: analytic]
    #[arg(long, global = true, value_name = "SELECTOR")]
    backend: Option<BackendSelector>,

    /// Square working resolution images are resized to [default: 512]
    #[arg(long, global = true, value_name = "PIXELS")]
    resolution: Option<usize>,

    /// Validate and print the resolved configuration without computing
    #[arg(long, global = true)]
    dry_run: bool,

    /// More log output (-v info, -vv debug, -vvv trace)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Erase the masked object from an image
    Remove(RemoveArgs),
    /// Copy a masked object into a background image
    Paste(PasteArgs),
    /// Harmonize a copy-paste composite
    Harmonize(HarmonizeArgs),
    /// Adapt an image to a text or feature condition
    Compose(ComposeArgs),
    /// Removal, paste, harmonization and optional composition in one run
    Pipeline(PipelineArgs),
    /// Heatmap of where the prior finds the image unlikely
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
struct RemoveArgs {
    #[arg(long)]
    image: PathBuf,
    /// White marks the object to remove
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Optimization steps [default: 150]
    #[arg(long)]
    steps: Option<usize>,
    /// Learning rate [default: 0.05]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Perceptual weight outside the mask [default: 0.3]
    #[arg(long)]
    lambda_per: Option<f64>,
    /// [default: "Something in some place."]
    #[arg(long)]
    source_prompt: Option<String>,
    /// [default: "Some place."]
    #[arg(long)]
    target_prompt: Option<String>,
}

#[derive(Debug, Args)]
struct PasteArgs {
    #[arg(long)]
    background: PathBuf,
    #[arg(long)]
    object: PathBuf,
    #[arg(long)]
    object_mask: PathBuf,
    /// Target region for bounding-box fitting; not needed with --offset
    #[arg(long)]
    region_mask: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the pasted footprint
    #[arg(long)]
    out_mask: PathBuf,
    /// Explicit top-left corner as `y,x` instead of fitting the region box
    #[arg(long, value_name = "Y,X", value_parser = parse_offset)]
    offset: Option<(usize, usize)>,
    /// Object scale for --offset [default: 1]
    #[arg(long, requires = "offset")]
    scale: Option<f64>,
}

#[derive(Debug, Args)]
struct HarmonizeArgs {
    #[arg(long)]
    image: PathBuf,
    /// White marks the pasted object
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Optimization steps [default: 200]
    #[arg(long)]
    steps: Option<usize>,
    /// Learning rate [default: 0.05]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Background perceptual weight [default: 0.3]
    #[arg(long)]
    lambda_bak: Option<f64>,
    /// Foreground perceptual weight [default: 0.1]
    #[arg(long)]
    lambda_for: Option<f64>,
    /// [default: "A harmonious scene."]
    #[arg(long)]
    target_prompt: Option<String>,
}

#[derive(Debug, Args)]
struct ComposeArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// text, sketch, canny or external [default: text]
    #[arg(long, value_parser = parse_kind)]
    kind: Option<ConditionKind>,
    /// Source condition: a prompt for text, an image path otherwise
    #[arg(long)]
    source: Option<String>,
    /// Target condition: a prompt for text, an image path otherwise
    #[arg(long)]
    target: Option<String>,
    /// Optimization steps [default: 500 for text, 200 for features]
    #[arg(long)]
    steps: Option<usize>,
    /// Final steps drawing from the late timestep range [default: 50]
    #[arg(long)]
    late_steps: Option<usize>,
    /// Replacement starts after this step [default: 400]
    #[arg(long)]
    gate_step: Option<usize>,
    /// Replacement applies above this layer [default: 10]
    #[arg(long)]
    gate_layer: Option<usize>,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[arg(long)]
    source_image: Option<PathBuf>,
    /// White marks the object to remove and the region receiving the new one
    #[arg(long)]
    source_mask: Option<PathBuf>,
    #[arg(long)]
    object_image: Option<PathBuf>,
    #[arg(long)]
    object_mask: Option<PathBuf>,
    /// Artifact directory [default: out]
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[arg(long)]
    image: PathBuf,
    /// Heatmap PNG, min-max normalized to [0, 1]
    #[arg(long)]
    out: PathBuf,
    /// Noise draws averaged per pixel
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Timesteps the draws are spread over
    #[arg(long, value_delimiter = ',', default_values_t = [100, 300, 500, 700, 900])]
    timesteps: Vec<i64>,
    #[arg(long, default_value = "")]
    prompt: String,
}

fn parse_offset(s: &str) -> Result<(usize, usize), String> {
    let (y, x) = s.split_once(',').ok_or("expected `y,x`")?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    Ok((num(y)?, num(x)?))
}

fn parse_kind(s: &str) -> Result<ConditionKind, String> {
    match s {
        "text" => Ok(ConditionKind::Text),
        "sketch" => Ok(ConditionKind::Sketch),
        "canny" => Ok(ConditionKind::Canny),
        "external" => Ok(ConditionKind::External),
        _ => Err(format!("expected text, sketch, canny or external, got `{s}`")),
    }
}

fn validation(key: &str, message: impl Into<String>) -> Error {
    Error::Validation {
        key: key.into(),
        message: message.into(),
    }
}

/// Config file (or defaults) with every flag applied on top.
fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::read(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(selector) = &cli.backend {
        cfg.backend.selector = selector.clone();
    }
    if let Some(res) = cli.resolution {
        cfg.io.resolution = res;
    }
    match &cli.command {
        Command::Remove(a) => {
            let r = &mut cfg.removal;
            override_with(&mut r.steps, a.steps);
            override_with(&mut r.learning_rate, a.learning_rate);
            override_with(&mut r.lambda_per, a.lambda_per);
            override_with(&mut r.source_prompt, a.source_prompt.clone());
            override_with(&mut r.target_prompt, a.target_prompt.clone());
        }
        Command::Harmonize(a) => {
            let h = &mut cfg.harmonization;
            override_with(&mut h.steps, a.steps);
            override_with(&mut h.learning_rate, a.learning_rate);
            override_with(&mut h.lambda_bak, a.lambda_bak);
            override_with(&mut h.lambda_for, a.lambda_for);
            override_with(&mut h.target_prompt, a.target_prompt.clone());
        }
        Command::Compose(a) => {
            let c = &mut cfg.composition;
            if a.kind.is_some() || a.source.is_some() || a.target.is_some() {
                let base = c.conditions.clone().unwrap_or(ConditionsSection {
                    kind: ConditionKind::Text,
                    source: String::new(),
                    target: String::new(),
                });
                c.conditions = Some(ConditionsSection {
                    kind: a.kind.unwrap_or(base.kind),
                    source: a.source.clone().unwrap_or(base.source),
                    target: a.target.clone().unwrap_or(base.target),
                });
            }
            if let Some(steps) = a.steps {
                match c.conditions.as_ref().map_or(ConditionKind::Text, |k| k.kind) {
                    ConditionKind::Text => c.text_steps = steps,
                    _ => c.feature_steps = steps,
                }
            }
            override_with(&mut c.late_steps, a.late_steps);
            override_with(&mut c.gate_step, a.gate_step);
            override_with(&mut c.gate_layer, a.gate_layer);
        }
        Command::Pipeline(a) => {
            let io = &mut cfg.io;
            io.source_image = a.source_image.clone().or(io.source_image.take());
            io.source_mask = a.source_mask.clone().or(io.source_mask.take());
            io.object_image = a.object_image.clone().or(io.object_image.take());
            io.object_mask = a.object_mask.clone().or(io.object_mask.take());
            override_with(&mut io.output_dir, a.out_dir.clone());
        }
        Command::Paste(a) => {
            if let Some(offset) = a.offset {
                cfg.io.placement = PlacementSpec::Explicit {
                    offset,
                    scale: a.scale.unwrap_or(1.0),
                };
            }
        }
        Command::Diagnose(_) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn override_with<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn make_backend(cfg: &RunConfig) -> Result<Arc<dyn DiffusionBackend>> {
    let b = &cfg.backend;
    let prior = AnalyticGaussianConfig::default().with_smoothness(b.smoothness);
    Ok(match &b.selector {
        BackendSelector::Analytic => Arc::new(AnalyticGaussianBackend::new(prior)?),
        BackendSelector::ToyAttention => Arc::new(ToyAttentionBackend::new(ToyAttentionConfig {
            seed: b.seed,
            layer_count: b.layer_count,
            dim: b.dim,
            prior,
            ..ToyAttentionConfig::default()
        })?),
        BackendSelector::Adapter(spec) => {
            log::info!("loading adapter `{spec}` ({ADAPTER_ENV}={:?})", std::env::var_os(ADAPTER_ENV));
            AdapterRegistry::new().load(spec)?
        }
    })
}

struct Inputs {
    res: (usize, usize),
}

impl Inputs {
    fn image(&self, path: &Path) -> Result<ImageTensor> {
        Ok(assets::read_image(path, Some(self.res))?)
    }

    fn mask(&self, path: &Path) -> Result<PixelMask> {
        Ok(assets::read_mask(path, Some(self.res))?)
    }
}

fn log_path(out: &Path, phase: Phase) -> PathBuf {
    out.with_file_name(assets::log_file(phase))
}

fn final_loss(log: &LossLog) -> String {
    log.last_total().map_or("n/a".into(), assets::sig6)
}

fn execute(cli: &Cli, cfg: &RunConfig) -> Result<String> {
    let inputs = Inputs {
        res: (cfg.io.resolution, cfg.io.resolution),
    };
    let extractor = ToyPyramid::default();
    match &cli.command {
        Command::Paste(a) => {
            let background = inputs.image(&a.background)?;
            let object = inputs.image(&a.object)?;
            let object_mask = inputs.mask(&a.object_mask)?;
            let region = match (&a.region_mask, cfg.io.placement) {
                (Some(p), _) => inputs.mask(p)?,
                (None, PlacementSpec::Explicit { .. }) => PixelMask::zeros(inputs.res.0, inputs.res.1),
                (None, PlacementSpec::BboxFit) => {
                    return Err(validation("paste.region_mask", "bounding-box placement needs --region-mask").into())
                }
            };
            let (img, mask) = paste_object(&background, &object, &object_mask, &region, cfg.io.placement)?;
            assets::write_image(&a.out, &img)?;
            assets::write_mask(&a.out_mask, &mask)?;
            Ok(format!("paste: wrote {} and {}", a.out.display(), a.out_mask.display()))
        }
        Command::Diagnose(a) => {
            let backend = make_backend(cfg)?;
            let image = inputs.image(&a.image)?;
            let emb = backend.embed_prompt(&a.prompt, PromptRole::Target);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.removal.seed);
            let map = low_density_map(&image, backend.as_ref(), &emb, a.samples, &a.timesteps, &mut rng)?;
            assets::write_heatmap(&a.out, &map.raw)?;
            let peak = map.raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok(format!(
                "diagnose: wrote {} (min-max normalized, raw peak {})",
                a.out.display(),
                assets::sig6(peak)
            ))
        }
        Command::Remove(a) => {
            let backend = make_backend(cfg)?;
            let image = inputs.image(&a.image)?;
            let mask = inputs.mask(&a.mask)?;
            let out = remove_object(backend.as_ref(), &extractor, &image, &mask, &cfg.removal_phase())?;
            assets::write_image(&a.out, &out.image)?;
            out.log.flush(log_path(&a.out, Phase::Removal))?;
            Ok(format!("remove: wrote {} (final loss {})", a.out.display(), final_loss(&out.log)))
        }
        Command::Harmonize(a) => {
            let backend = make_backend(cfg)?;
            let image = inputs.image(&a.image)?;
            let mask = inputs.mask(&a.mask)?;
            let out = harmonize(backend.as_ref(), &extractor, &image, &mask, &cfg.harmonization_phase())?;
            assets::write_image(&a.out, &out.image)?;
            out.log.flush(log_path(&a.out, Phase::Harmonization))?;
            Ok(format!("harmonize: wrote {} (final loss {})", a.out.display(), final_loss(&out.log)))
        }
        Command::Compose(a) => {
            let backend = make_backend(cfg)?;
            let image = inputs.image(&a.image)?;
            let conditions = conditions(cfg, &inputs)?
                .ok_or_else(|| validation("composition.conditions", "compose needs --source and --target"))?;
            let out = semantic_compose(backend.as_ref(), &image, &conditions, &cfg.composition_phase())?;
            assets::write_image(&a.out, &out.image)?;
            out.log.flush(log_path(&a.out, Phase::Composition))?;
            Ok(format!("compose: wrote {} (final loss {})", a.out.display(), final_loss(&out.log)))
        }
        Command::Pipeline(_) => {
            let io = &cfg.io;
            let need = |p: &Option<PathBuf>, key: &str| {
                p.clone().ok_or_else(|| validation(key, "required for a pipeline run"))
            };
            let request = CompositionRequest {
                source_image: inputs.image(&need(&io.source_image, "io.source_image")?)?,
                source_mask: inputs.mask(&need(&io.source_mask, "io.source_mask")?)?,
                object_image: inputs.image(&need(&io.object_image, "io.object_image")?)?,
                object_mask: inputs.mask(&need(&io.object_mask, "io.object_mask")?)?,
                conditions: conditions(cfg, &inputs)?,
                placement: io.placement,
            };
            let backend = make_backend(cfg)?;
            std::fs::create_dir_all(&io.output_dir)
                .with_context(|| format!("creating {}", io.output_dir.display()))?;
            let art = run_pipeline(&request, &cfg.pipeline(), backend.as_ref(), &extractor, Some(&io.output_dir))?;
            let losses: Vec<String> = art
                .logs
                .iter()
                .map(|(phase, log)| format!("{phase:?} {}", final_loss(log)).to_lowercase())
                .collect();
            Ok(format!(
                "pipeline: wrote artifacts to {} (final losses: {})",
                io.output_dir.display(),
                losses.join(", ")
            ))
        }
    }
}

fn conditions(cfg: &RunConfig, inputs: &Inputs) -> Result<Option<Conditions>> {
    let Some(section) = &cfg.composition.conditions else {
        return Ok(None);
    };
    Ok(Some(match section.kind.provenance() {
        None => Conditions::Text {
            source: section.source.clone(),
            target: section.target.clone(),
        },
        Some(provenance) => Conditions::Features {
            source: inputs.image(Path::new(&section.source))?,
            target: inputs.image(Path::new(&section.target))?,
            provenance,
        },
    }))
}

/// Exit code 1 for validation problems, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let core = err
        .downcast_ref::<Error>()
        .or_else(|| err.downcast_ref::<PipelineError>().map(|p| &p.error));
    match core {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let cfg = match resolve_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    println!("# resolved configuration\n{}", cfg.to_toml());
    if cli.dry_run {
        println!("dry run: configuration is valid, nothing computed");
        return ExitCode::SUCCESS;
    }
    let start = Instant::now();
    match execute(&cli, &cfg) {
        Ok(summary) => {
            println!("{summary} in {:.2} s", start.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
