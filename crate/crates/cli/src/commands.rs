use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use portrait_core::checkpoint::load_checkpoint;
use portrait_core::dataset::{load_image, load_manifest, read_manifest_records, save_png, synth_dataset, ToyDatasetSpec};
use portrait_core::embeddings::{train_embeddings, AttributeBagCorpus, EmbeddingTable, SkipGramConfig};
use portrait_core::metrics::{evaluate, EvalOptions};
use portrait_core::training::{denormalize, normalize, train, ModelState, TrainConfig};
use portrait_core::{AttributeSchema, AttributeSet, Error};

use crate::service::{self, AppState, Model};

#[derive(Debug, Parser)]
#[command(name = "portrait", version, about = "Attribute-conditioned photo-to-portrait generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedural toy dataset (images, manifests, schema).
    DatasetSynth(SynthArgs),
    /// Train skip-gram attribute embeddings on a manifest's attribute bags.
    EmbedTrain(EmbedArgs),
    /// Train the generator and discriminator.
    Train(TrainArgs),
    /// Score a checkpoint on a test manifest.
    Eval(EvalArgs),
    /// Generate one portrait.
    Generate(GenerateArgs),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    /// TOML dataset spec; flags below override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Schema TOML; defaults to schema.toml beside the manifest, then the
    /// built-in portrait schema.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// 40 epochs of batch 16.
    Desk,
    /// 600 epochs of batch 32.
    Full,
    /// Small networks for the 64×64 toy dataset.
    Toy,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// TOML training config; takes precedence over --preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Pretrained attribute embeddings.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub splits: usize,
}

fn attr_syntax(s: &str) -> Result<String, String> {
    match s.split_once('=') {
        Some((t, v)) if !t.trim().is_empty() && !v.trim().is_empty() => Ok(s.to_string()),
        _ => Err(format!("`{s}` must have the form type=value (underscores stand for spaces)")),
    }
}

#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub photo: PathBuf,
    /// Attribute as type=value; repeatable.
    #[arg(long = "attr", value_parser = attr_syntax)]
    pub attrs: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Success = 0,
    /// Bad flags or invalid input documents.
    Usage = 2,
    /// I/O or runtime failure.
    Failure = 3,
    /// Training produced a non-finite loss.
    Diverged = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NonFiniteLoss { .. } => ExitCode::Diverged,
            e if e.is_validation() => ExitCode::Usage,
            _ => ExitCode::Failure,
        };
        Self { code, message: e.to_string() }
    }
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: ExitCode::Usage, message: message.into() }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self { code: ExitCode::Failure, message: format!("{}: {e}", path.display()) }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn require_file(path: &Path, what: &str) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} {} does not exist", path.display())))
    }
}

/// Explicit `--schema`, else `schema.toml` beside the manifest, else the
/// built-in portrait schema.
pub fn resolve_schema(explicit: Option<&Path>, manifest: &Path) -> CliResult<AttributeSchema> {
    if let Some(p) = explicit {
        require_file(p, "schema")?;
        return Ok(AttributeSchema::load_file(p)?);
    }
    let sibling = manifest.parent().unwrap_or(Path::new(".")).join("schema.toml");
    if sibling.exists() {
        Ok(AttributeSchema::load_file(sibling)?)
    } else {
        Ok(AttributeSchema::portrait_default())
    }
}

/// Resolves `type=value` strings (underscores for spaces) against `schema`.
pub fn parse_attrs(raw: &[String], schema: &AttributeSchema) -> CliResult<AttributeSet> {
    let mut attrs = AttributeSet::new();
    for a in raw {
        attr_syntax(a).map_err(CliError::usage)?;
        let (t, v) = schema.parse_assignment(a)?;
        if attrs.get(&t).is_some() {
            return Err(CliError::usage(format!("attribute type `{t}` given twice")));
        }
        attrs.insert(t, v);
    }
    Ok(attrs)
}

fn synth(args: &SynthArgs) -> CliResult {
    let mut spec = match &args.spec {
        Some(p) => {
            require_file(p, "spec")?;
            ToyDatasetSpec::load_file(p)?
        }
        None => ToyDatasetSpec::new(2000, 0),
    };
    if let Some(c) = args.count {
        spec.count = c;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let records = synth_dataset(&spec, &args.out)?;
    println!("wrote {} samples to {}", records.len(), args.out.display());
    Ok(())
}

fn embed(args: &EmbedArgs) -> CliResult {
    require_file(&args.manifest, "manifest")?;
    let schema = resolve_schema(args.schema.as_deref(), &args.manifest)?;
    let bags: Vec<AttributeSet> = read_manifest_records(&args.manifest)?.into_iter().map(|r| r.attrs).collect();
    let corpus = AttributeBagCorpus::new(&schema, &bags)?;
    let config = SkipGramConfig { dim: args.dim, epochs: args.epochs, seed: args.seed, ..Default::default() };
    let table = train_embeddings(&corpus, &config)?;
    table.save(&args.out)?;
    println!("wrote {} embeddings of dim {} to {}", table.len(), table.dim(), args.out.display());
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> CliResult {
    require_file(&args.manifest, "manifest")?;
    let (mut config, mut state, schema) = match &args.resume {
        Some(dir) => {
            let ck = load_checkpoint(dir, None)?;
            (ck.manifest.train, Some(ck.state), ck.schema)
        }
        None => {
            let config = match (&args.config, args.preset) {
                (Some(p), _) => {
                    require_file(p, "config")?;
                    TrainConfig::load_file(p)?
                }
                (None, Some(Preset::Full)) => TrainConfig::full(),
                (None, Some(Preset::Toy)) => TrainConfig::toy(),
                (None, Some(Preset::Desk) | None) => TrainConfig::default(),
            };
            (config, None, resolve_schema(args.schema.as_deref(), &args.manifest)?)
        }
    };
    if let Some(s) = args.seed {
        if state.is_some() && s != config.seed {
            return Err(CliError::usage("--seed cannot change the seed of a resumed run"));
        }
        config.seed = s;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    config.validate()?;
    let table = match &args.embeddings {
        Some(p) => {
            require_file(p, "embeddings")?;
            Some(EmbeddingTable::load(p)?)
        }
        None => None,
    };
    let data = load_manifest(&args.manifest, &schema, config.model.image_size)?;
    let mut state = match state.take() {
        Some(s) => s,
        None => ModelState::init(&config, &schema, table.as_ref())?,
    };
    let steps_per_epoch = data.len().div_ceil(config.batch_size) as u64;
    train(&mut state, &data, &schema, &config, Some(&args.out), |r| {
        if (r.step + 1) % steps_per_epoch == 0 {
            eprintln!(
                "epoch {:>4} step {:>7}  G {:.4} (adv {:.4} cls {:.4} l1 {:.4})  D {:.4} (adv {:.4} cls {:.4})",
                r.epoch + 1,
                r.step + 1,
                r.losses.total_g,
                r.losses.adv_g,
                r.losses.cls_g,
                r.losses.l1,
                r.losses.total_d,
                r.losses.adv_d,
                r.losses.cls_d
            );
        }
    })?;
    println!("checkpoint written to {}", args.out.join("checkpoint").display());
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> CliResult {
    require_file(&args.checkpoint, "checkpoint")?;
    require_file(&args.manifest, "manifest")?;
    let ck = load_checkpoint(&args.checkpoint, None)?;
    let data = load_manifest(&args.manifest, &ck.schema, ck.manifest.generator.image_size)?;
    let options = EvalOptions { seed: args.seed, is_splits: args.splits, ..EvalOptions::for_schema(&ck.schema) };
    let report = evaluate(&ck.state.generator, &ck.state.discriminator, &data, &ck.schema, &options)?;
    print!("{}", report.summary());
    print!("{}", report.to_table());
    if let Some(path) = &args.report {
        fs::write(path, report.to_json()).map_err(|e| CliError::io(path, e))?;
    }
    Ok(())
}

fn generate_cmd(args: &GenerateArgs) -> CliResult {
    require_file(&args.checkpoint, "checkpoint")?;
    require_file(&args.photo, "photo")?;
    let model = Model::load(&args.checkpoint)?;
    let attrs = parse_attrs(&args.attrs, &model.schema)?;
    let photo = load_image(&args.photo, model.image_size())?;
    let out = model.generator.generate(&normalize(&photo), &attrs, &model.schema)?;
    save_png(&args.out, &denormalize(&out))?;
    let applied: serde_json::Map<String, serde_json::Value> =
        attrs.iter().map(|(t, v)| (t.to_string(), v.into())).collect();
    println!("{}", serde_json::json!({ "out": args.out, "applied_attributes": applied, "model_id": model.model_id }));
    Ok(())
}

fn serve_cmd(args: &ServeArgs) -> CliResult {
    require_file(&args.checkpoint, "checkpoint")?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError { code: ExitCode::Failure, message: e.to_string() })?;
    let state = AppState::empty();
    runtime.block_on(async {
        let loading = state.clone();
        let dir = args.checkpoint.clone();
        let loader = tokio::task::spawn_blocking(move || Model::load(dir).map(|m| loading.swap(m)));
        let server = service::serve(state, &args.host, args.port);
        tokio::pin!(server);
        tokio::select! {
            loaded = loader => {
                loaded.map_err(|e| CliError { code: ExitCode::Failure, message: e.to_string() })??;
                eprintln!("checkpoint loaded");
                server.await.map_err(|e| CliError { code: ExitCode::Failure, message: e.to_string() })
            }
            res = &mut server => res.map_err(|e| CliError { code: ExitCode::Failure, message: e.to_string() }),
        }
    })
}

pub fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::DatasetSynth(a) => synth(a),
        Command::EmbedTrain(a) => embed(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Serve(a) => serve_cmd(a),
    }
}
