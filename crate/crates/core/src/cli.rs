//! `symscene` command line.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use crate::codec::{self, EncodeMode, Inverter, PrivacyTier, SlotRecovery};
use crate::config::Config;
use crate::detection::{self, Vocabulary};
use crate::edge::{self, FrameSink, RecordingSink, Server, ServerPolicy};
use crate::embedding::EmbeddingTable;
use crate::metrics::{self, AttributeMode, EvalParams};

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// Environment variable naming a default configuration file.
pub const CONFIG_ENV: &str = "SYMSCENE_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "symscene", version, about = "Symbolic scene encodings for edge/cloud VQA")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// key=value configuration file (default: $SYMSCENE_CONFIG)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the effective configuration to stderr
    #[arg(long, short, global = true)]
    verbose: bool,
    #[arg(long, global = true)]
    num_classes: Option<usize>,
    #[arg(long, global = true)]
    num_attributes: Option<usize>,
    #[arg(long, global = true)]
    embedding_dim: Option<usize>,
    #[arg(long, global = true)]
    top_k: Option<usize>,
    #[arg(long, global = true)]
    score_threshold: Option<f64>,
    #[arg(long, global = true)]
    iou_threshold: Option<f64>,
    #[arg(long, global = true)]
    max_objects: Option<usize>,
    #[arg(long, global = true)]
    attr_threshold: Option<f64>,
    /// Weight attributes by raw top-k scores instead of normalized ones
    #[arg(long, global = true)]
    no_weight_norm: bool,
    /// Carry scene captions alongside the encoding
    #[arg(long, global = true)]
    include_captions: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Symbolic,
    Raw,
    Textual,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MinTier {
    AtRisk,
    Private,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Table,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Encode detector output scenes into .symv frames (or textual JSON lines)
    Encode {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        classes: PathBuf,
        #[arg(long)]
        attributes: PathBuf,
        /// Required for symbolic mode
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "symbolic")]
        mode: Mode,
        /// Output file; textual mode writes to stdout when omitted
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score predictions against ground truth
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        /// Predict the top-k attributes instead of thresholding scores
        #[arg(long)]
        attr_topk: Option<usize>,
        #[arg(long, default_value_t = 100)]
        max_dets: usize,
        #[arg(long, value_enum, default_value = "json")]
        format: ReportFormat,
        #[arg(long, default_value = "predictions")]
        name: String,
    },
    /// Run the policy-enforcing frame receiver
    Serve {
        #[arg(long)]
        bind: String,
        #[arg(long, value_enum, default_value = "private")]
        min_tier: MinTier,
        #[arg(long, default_value_t = 16 << 20)]
        max_frame_bytes: usize,
        /// Directory where accepted frames are written as .symv files
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Send .symv frames to a receiver
    Send {
        #[arg(long)]
        addr: String,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
    },
    /// Report what is recoverable from symbolic .symv frames
    Invert {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        classes: PathBuf,
        #[arg(long)]
        attributes: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        /// Attribute names listed per object
        #[arg(long, default_value_t = 5)]
        top_attributes: usize,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn effective_config(o: &Overrides) -> Result<Config, CliError> {
    let file = o
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut c = Config::default();
    if let Some(path) = file {
        let text =
            fs::read_to_string(&path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        c.apply_text(&text)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    macro_rules! apply {
        ($($field:ident),*) => { $( if let Some(v) = o.$field { c.$field = v; } )* };
    }
    apply!(
        num_classes,
        num_attributes,
        embedding_dim,
        top_k,
        score_threshold,
        iou_threshold,
        max_objects,
        attr_threshold
    );
    if o.no_weight_norm {
        c.weight_norm = false;
    }
    if o.include_captions {
        c.include_captions = true;
    }
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

fn require_files<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<(), CliError> {
    for p in paths {
        if !p.is_file() {
            return Err(usage(format!("no such file: {}", p.display())));
        }
    }
    Ok(())
}

fn load_vocab(classes: &Path, attributes: &Path, config: &Config) -> anyhow::Result<Vocabulary> {
    let vocab = Vocabulary::load(classes, attributes).context("loading vocabulary")?;
    if vocab.num_classes() != config.num_classes || vocab.num_attributes() != config.num_attributes {
        bail!(
            "vocabulary has {} classes / {} attributes, configuration expects {} / {}",
            vocab.num_classes(),
            vocab.num_attributes(),
            config.num_classes,
            config.num_attributes
        );
    }
    Ok(vocab)
}

fn load_table(path: &Path, config: &Config) -> anyhow::Result<EmbeddingTable> {
    let table = EmbeddingTable::load(path).with_context(|| format!("loading {}", path.display()))?;
    if table.dim() != config.embedding_dim {
        bail!(
            "{} has dimension {}, configuration expects embedding_dim={}",
            path.display(),
            table.dim(),
            config.embedding_dim
        );
    }
    Ok(table)
}

fn output_writer(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_symv(path: &Path) -> anyhow::Result<Vec<(codec::SceneEncoding, Vec<u8>)>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let frames = edge::split_frames(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    Ok(frames.into_iter().map(|(e, b)| (e, b.to_vec())).collect())
}

fn cmd_encode(
    config: &Config,
    scenes: &Path,
    classes: &Path,
    attributes: &Path,
    embeddings: Option<&Path>,
    mode: Mode,
    output: Option<&Path>,
) -> Result<(), CliError> {
    require_files([scenes, classes, attributes].into_iter().chain(embeddings))?;
    if matches!(mode, Mode::Symbolic) && embeddings.is_none() {
        return Err(usage("--embeddings is required for symbolic mode"));
    }
    if !matches!(mode, Mode::Textual) && output.is_none() {
        return Err(usage("--output is required for symbolic and raw modes"));
    }
    let encoder = config.encoder_config().map_err(|e| usage(e.to_string()))?;
    let vocab = load_vocab(classes, attributes, config)?;
    let table = embeddings.map(|p| load_table(p, config)).transpose()?;
    let mut scenes = detection::read_scenes(scenes, config.num_classes, config.num_attributes)
        .with_context(|| format!("reading {}", scenes.display()))?;
    for (i, s) in scenes.iter_mut().enumerate() {
        s.id.get_or_insert_with(|| format!("scene-{i}"));
    }

    let mut out = output_writer(output)?;
    for scene in &scenes {
        let id = scene.id.as_deref().unwrap_or_default();
        match mode {
            Mode::Textual => {
                let objects =
                    codec::encode_scene_textual(scene, &vocab, &encoder).with_context(|| format!("scene {id}"))?;
                for (object, t) in objects.iter().enumerate() {
                    let line = json!({
                        "scene_id": id,
                        "object": object,
                        "class_words": t.class_words,
                        "attribute_words": t.attribute_words,
                    });
                    writeln!(out, "{line}").context("writing output")?;
                }
            }
            Mode::Symbolic | Mode::Raw => {
                let m = if matches!(mode, Mode::Symbolic) {
                    EncodeMode::Symbolic
                } else {
                    EncodeMode::Raw
                };
                let enc = codec::encode_scene(scene, m, &vocab, table.as_ref(), &encoder)
                    .with_context(|| format!("scene {id}"))?;
                let frame = edge::encode_frame(&enc).with_context(|| format!("scene {id}"))?;
                out.write_all(&frame).context("writing output")?;
                info!("scene {id}: {} objects", enc.num_objects());
            }
        }
    }
    out.flush().context("writing output")?;
    Ok(())
}

fn cmd_eval(
    config: &Config,
    predictions: &Path,
    ground_truth: &Path,
    attr_topk: Option<usize>,
    max_dets: usize,
    format: ReportFormat,
    name: &str,
) -> Result<(), CliError> {
    require_files([predictions, ground_truth])?;
    if attr_topk == Some(0) || max_dets == 0 {
        return Err(usage("--attr-topk and --max-dets must be positive"));
    }
    let preds = detection::read_scenes(predictions, config.num_classes, config.num_attributes)
        .with_context(|| format!("reading {}", predictions.display()))?;
    let gts = metrics::read_ground_truth(ground_truth, config.num_classes, config.num_attributes)
        .with_context(|| format!("reading {}", ground_truth.display()))?;
    let images = metrics::join_dataset(preds, gts).context("joining predictions with ground truth")?;
    let params = EvalParams {
        iou_threshold: config.iou_threshold,
        max_dets,
        attribute_mode: match attr_topk {
            Some(k) => AttributeMode::TopK(k),
            None => AttributeMode::Threshold(config.attr_threshold),
        },
    };
    let report = metrics::evaluate(&images, &params).context("evaluating")?;
    match format {
        ReportFormat::Json => println!("{}", serde_json::to_string(&report).context("serializing report")?),
        ReportFormat::Table => print!("{}", report.to_table(name)),
    }
    Ok(())
}

struct LogSink;

impl FrameSink for LogSink {
    fn deliver(&self, frame: &[u8], encoding: &codec::SceneEncoding) -> io::Result<()> {
        info!(
            "accepted scene {:?}: {} objects, {} bytes",
            encoding.scene_id,
            encoding.num_objects(),
            frame.len()
        );
        Ok(())
    }
}

fn cmd_serve(
    config: &Config,
    bind: &str,
    min_tier: MinTier,
    max_frame_bytes: usize,
    record: Option<&Path>,
) -> Result<(), CliError> {
    let tier = match min_tier {
        MinTier::AtRisk => PrivacyTier::AtRisk,
        MinTier::Private => PrivacyTier::Private,
    };
    let policy = ServerPolicy::new(tier, config.max_objects, max_frame_bytes).map_err(|e| usage(e.to_string()))?;
    let sink: Arc<dyn FrameSink> = match record {
        Some(dir) => Arc::new(RecordingSink::new(dir).with_context(|| format!("creating {}", dir.display()))?),
        None => Arc::new(LogSink),
    };
    let server = Server::bind(bind, policy, sink).with_context(|| format!("binding {bind}"))?;
    let addr = server.local_addr().context("resolving bound address")?;
    println!("listening on {addr}");
    io::stdout().flush().ok();
    server.run().context("serving")?;
    Ok(())
}

fn cmd_send(addr: &str, inputs: &[PathBuf]) -> Result<(), CliError> {
    require_files(inputs.iter().map(PathBuf::as_path))?;
    let mut labels = Vec::new();
    let mut frames = Vec::new();
    for path in inputs {
        for (enc, bytes) in read_symv(path)? {
            labels.push((path.display().to_string(), enc.scene_id));
            frames.push(bytes);
        }
    }
    let replies = edge::send_frames(addr, &frames).context("sending frames")?;
    for ((file, scene), reply) in labels.iter().zip(replies) {
        let line = json!({
            "file": file,
            "scene_id": scene,
            "status": reply.status.to_string(),
            "code": reply.status as u8,
            "objects": reply.echoed_objects,
        });
        println!("{line}");
    }
    Ok(())
}

fn cmd_invert(
    config: &Config,
    inputs: &[PathBuf],
    classes: &Path,
    attributes: &Path,
    embeddings: &Path,
    top_attributes: usize,
) -> Result<(), CliError> {
    require_files(
        inputs
            .iter()
            .map(PathBuf::as_path)
            .chain([classes, attributes, embeddings]),
    )?;
    let layout = config.encoder_config().map_err(|e| usage(e.to_string()))?.symbolic;
    let vocab = load_vocab(classes, attributes, config)?;
    let table = load_table(embeddings, config)?;
    let inverter = Inverter::new(&vocab, &table, layout).context("building inverter")?;
    let mut out = BufWriter::new(io::stdout().lock());
    for path in inputs {
        for (enc, _) in read_symv(path)? {
            for (object, row) in enc.objects.iter().enumerate() {
                let inv = inverter
                    .invert_row(row, enc.tier)
                    .with_context(|| format!("{} scene {:?} object {object}", path.display(), enc.scene_id))?;
                let classes: Vec<String> = inv
                    .classes
                    .iter()
                    .map(|s| match s {
                        SlotRecovery::Recovered { name, .. } => name.clone(),
                        SlotRecovery::Unrecoverable => "unrecoverable".to_string(),
                    })
                    .collect();
                let similarities: Vec<Option<f64>> = inv
                    .classes
                    .iter()
                    .map(|s| match s {
                        SlotRecovery::Recovered { similarity, .. } => Some(*similarity),
                        SlotRecovery::Unrecoverable => None,
                    })
                    .collect();
                let attrs: Option<Vec<_>> = inv.attribute_ranking.as_ref().map(|r| {
                    r.iter()
                        .take(top_attributes)
                        .map(|&(i, s)| json!({"name": inverter.attribute_name(i), "similarity": s}))
                        .collect()
                });
                let line = json!({
                    "scene_id": enc.scene_id,
                    "object": object,
                    "classes": classes,
                    "class_similarity": similarities,
                    "attribute_ranking": attrs,
                    "global_box": inv.global_box.to_array(),
                    "relative_box": inv.relative_box.to_array(),
                });
                writeln!(out, "{line}").context("writing output")?;
            }
        }
    }
    out.flush().context("writing output")?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let config = effective_config(&cli.overrides)?;
    if cli.overrides.verbose {
        eprint!("{}", config.to_text());
    }
    match cli.command {
        Command::Encode {
            scenes,
            classes,
            attributes,
            embeddings,
            mode,
            output,
        } => cmd_encode(
            &config,
            &scenes,
            &classes,
            &attributes,
            embeddings.as_deref(),
            mode,
            output.as_deref(),
        ),
        Command::Eval {
            predictions,
            ground_truth,
            attr_topk,
            max_dets,
            format,
            name,
        } => cmd_eval(&config, &predictions, &ground_truth, attr_topk, max_dets, format, &name),
        Command::Serve {
            bind,
            min_tier,
            max_frame_bytes,
            record,
        } => cmd_serve(&config, &bind, min_tier, max_frame_bytes, record.as_deref()),
        Command::Send { addr, input } => cmd_send(&addr, &input),
        Command::Invert {
            input,
            classes,
            attributes,
            embeddings,
            top_attributes,
        } => cmd_invert(&config, &input, &classes, &attributes, &embeddings, top_attributes),
    }
}

/// Parse `argv` and run; exit status 0 on success, 2 on usage errors and 1
/// on runtime failures.
pub fn run<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
