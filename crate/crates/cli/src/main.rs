//! `gemr` — command-line driver for the group-emotion model: dataset
//! generation, training, evaluation, ensembling, face alignment, and
//! gradient verification.
//!
//! Conventions shared by every subcommand:
//! - Option resolution: command-line flags override values from the
//!   `--config` JSON file, which override built-in defaults. The fully
//!   resolved configuration is echoed to stdout as the first output line.
//! - Machine-readable output is line-delimited JSON, one record per line
//!   (the same shape datasets use); human-readable tables follow it.
//! - Exit codes: 0 success, 1 computation/validation failure, 2 usage or
//!   I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Map, Value};

use gemr_core::align::{
    estimate_similarity_to, warp_to_template, AlignConfig, Landmarks5, Similarity, TEMPLATE,
};
use gemr_core::attention::MechanismKind;
use gemr_core::checkpoint::{load_model, save_model, CheckpointError, CheckpointMeta};
use gemr_core::data::{
    generate_dataset, read_partition_file, write_partition_file, DataError, DatasetConfig,
    GroupSample,
};
use gemr_core::gradcheck::{check_model_gradients, GradCheckConfig};
use gemr_core::metrics::compute_metrics;
use gemr_core::model::{ensemble_predict, GroupEmotionModel, Label, ModelConfig};
use gemr_core::pnm::{read_pnm_file, write_pnm_file, PnmError};
use gemr_core::rng::CounterRng;
use gemr_core::train::{train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "gemr",
    about = "Group-emotion recognition: train and evaluate attention-pooled classifiers",
    version
)]
struct Cli {
    /// JSON config file; a single object whose keys mirror flag names.
    /// Flags override file values, file values override defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic planted-salience dataset (train/val/eval).
    GenData {
        /// Output directory for train.jsonl, val.jsonl, eval.jsonl and
        /// the metadata.json sidecar.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Generator seed; identical seeds yield byte-identical files.
        #[arg(long)]
        seed: Option<u64>,
        /// Training partition size [default: 4000].
        #[arg(long)]
        n_train: Option<usize>,
        /// Validation partition size [default: 1000].
        #[arg(long)]
        n_val: Option<usize>,
        /// Final-evaluation partition size [default: 1000].
        #[arg(long)]
        n_eval: Option<usize>,
        /// Minimum faces per sample [default: 1].
        #[arg(long)]
        faces_min: Option<usize>,
        /// Maximum faces per sample [default: 8].
        #[arg(long)]
        faces_max: Option<usize>,
        /// Dominant-face prototype strength a [default: 3].
        #[arg(long)]
        dominant_strength: Option<f64>,
        /// Distractor prototype strength b [default: 1.5].
        #[arg(long)]
        distractor_strength: Option<f64>,
        /// Mean of the dominant face's salience channel [default: 4.5].
        #[arg(long)]
        salience_mean: Option<f64>,
        /// Noise standard deviation on every coordinate [default: 1].
        #[arg(long)]
        noise_sigma: Option<f64>,
        /// Scene-block strength in the global context [default: 0.5].
        #[arg(long)]
        global_strength: Option<f64>,
        /// Dominant-prototype projection strength in the global context
        /// [default: 0.5].
        #[arg(long)]
        context_projection: Option<f64>,
    },
    /// Train one model and write a checkpoint.
    Train {
        /// Dataset directory containing train.jsonl (and optionally
        /// val.jsonl).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Pooling mechanism: average, a, b, or c.
        #[arg(long)]
        mechanism: Option<MechanismKind>,
        /// Checkpoint output path.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Seed for initialization, shuffling, and dropout [default: 0].
        #[arg(long)]
        seed: Option<u64>,
        /// Number of training epochs [default: 27].
        #[arg(long)]
        epochs: Option<usize>,
        /// Initial learning rate [default: 0.001].
        #[arg(long)]
        lr: Option<f64>,
        /// Divide the learning rate by this factor every decay period
        /// [default: 10].
        #[arg(long)]
        decay_factor: Option<f64>,
        /// Epochs between learning-rate decays [default: 9].
        #[arg(long)]
        decay_period: Option<usize>,
        /// Minibatch size [default: 32].
        #[arg(long)]
        batch_size: Option<usize>,
        /// Momentum coefficient [default: 0.9].
        #[arg(long)]
        momentum: Option<f64>,
        /// Dropout probability on the fused feature [default: 0.5].
        #[arg(long)]
        dropout: Option<f64>,
        /// Fold the validation partition into the training set (final
        /// submission regime; per-epoch validation is then unavailable).
        #[arg(long)]
        merge_val: bool,
    },
    /// Score a checkpoint on a dataset partition.
    Eval {
        /// Checkpoint path.
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        /// Partition file (.jsonl).
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        /// Also emit one JSON record per sample with its attention
        /// weights over faces.
        #[arg(long)]
        dump_attention: bool,
    },
    /// Score a probability-averaged ensemble of checkpoints.
    EnsembleEval {
        /// Comma-separated checkpoint paths.
        #[arg(long, value_name = "FILES", value_delimiter = ',', num_args = 1..)]
        models: Vec<PathBuf>,
        /// Partition file (.jsonl).
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
    },
    /// Align a face image to the canonical 96x112 template.
    Align {
        /// Input image (binary PGM or PPM).
        #[arg(long, value_name = "FILE")]
        image: Option<PathBuf>,
        /// Five landmarks "x1,y1;x2,y2;x3,y3;x4,y4;x5,y5" in the order
        /// left eye, right eye, nose tip, left mouth corner, right mouth
        /// corner.
        #[arg(long, value_name = "POINTS")]
        landmarks: Option<String>,
        /// Output image path (always 96x112).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// File holding replacement template landmarks in the same
        /// "x1,y1;...;x5,y5" format (destinations in the 96x112 frame).
        #[arg(long, value_name = "FILE")]
        template: Option<PathBuf>,
        /// Fit the transform to the two eye points only.
        #[arg(long)]
        eyes_only: bool,
    },
    /// Verify end-to-end gradients against central finite differences.
    Gradcheck {
        /// Base seed for the random configurations [default: 7].
        #[arg(long)]
        seed: Option<u64>,
        /// Configurations per mechanism; the total configuration count is
        /// four times this [default: 5].
        #[arg(long)]
        trials: Option<usize>,
    },
}

/// A failed run: usage/I/O problems exit 2, computation or validation
/// failures exit 1.
enum Failure {
    Usage(String),
    Compute(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Compute(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Compute(m) => m,
        }
    }
}

/// Core validation/computation errors map to exit 1.
impl From<gemr_core::tensor::TensorError> for Failure {
    fn from(e: gemr_core::tensor::TensorError) -> Self {
        Failure::Compute(e.to_string())
    }
}

/// File-content errors are validation failures (exit 1); operating-system
/// I/O errors are environment problems (exit 2).
impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(_) => Failure::Usage(e.to_string()),
            _ => Failure::Compute(e.to_string()),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) => Failure::Usage(e.to_string()),
            _ => Failure::Compute(e.to_string()),
        }
    }
}

impl From<PnmError> for Failure {
    fn from(e: PnmError) -> Self {
        match e {
            PnmError::Io(_) => Failure::Usage(e.to_string()),
            _ => Failure::Compute(e.to_string()),
        }
    }
}

/// The optional `--config` JSON object. Keys are consumed as commands
/// resolve their options; leftovers produce warnings, not errors, so one
/// file can serve several commands.
struct FileConfig {
    values: Map<String, Value>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(FileConfig { values: Map::new() });
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            Failure::Usage(format!("cannot read config file {}: {e}", path.display()))
        })?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("config file {}: {e}", path.display())))?;
        match value {
            Value::Object(values) => Ok(FileConfig { values }),
            _ => Err(Failure::Usage(format!(
                "config file {} must hold a single JSON object",
                path.display()
            ))),
        }
    }

    /// Removes and deserializes `key`, if present. Keys mirror flag names.
    fn take<T: DeserializeOwned>(&mut self, key: &str) -> Result<Option<T>, Failure> {
        match self.values.remove(key) {
            None => Ok(None),
            Some(v) => serde_json::from_value(v)
                .map(Some)
                .map_err(|e| Failure::Usage(format!("config key '{key}': {e}"))),
        }
    }

    fn warn_unused(&self) {
        for key in self.values.keys() {
            eprintln!("warning: ignoring unrecognized config key '{key}'");
        }
    }
}

/// Flag > config file > default.
fn resolve<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Flag > config file; no default exists, so absence is a usage error.
fn required<T>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T, Failure> {
    flag.or(file).ok_or_else(|| {
        Failure::Usage(format!("missing required option --{name} (set it as a flag or config key)"))
    })
}

/// Writes to stdout; when the downstream reader has closed the pipe
/// (e.g. `gemr ... | head`) the run ends quietly instead of panicking.
fn out_text<T: std::fmt::Display>(text: T) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if write!(out, "{text}").is_err() {
        std::process::exit(0);
    }
}

/// One line of machine-readable output.
fn outln<T: std::fmt::Display>(line: T) {
    out_text(format_args!("{line}\n"));
}

/// Every run's first stdout line: the command plus its fully resolved
/// options, as one JSON record.
fn echo_config(command: &str, fields: Value) {
    let mut record = Map::new();
    record.insert("command".to_string(), json!(command));
    if let Value::Object(rest) = fields {
        record.extend(rest);
    }
    outln(Value::Object(record));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData {
            out,
            seed,
            n_train,
            n_val,
            n_eval,
            faces_min,
            faces_max,
            dominant_strength,
            distractor_strength,
            salience_mean,
            noise_sigma,
            global_strength,
            context_projection,
        } => {
            let out = required(out, file.take("out")?, "out")?;
            let d = DatasetConfig::default();
            let cfg = DatasetConfig {
                n_train: resolve(n_train, file.take("n-train")?, d.n_train),
                n_val: resolve(n_val, file.take("n-val")?, d.n_val),
                n_eval: resolve(n_eval, file.take("n-eval")?, d.n_eval),
                face_count_min: resolve(faces_min, file.take("faces-min")?, d.face_count_min),
                face_count_max: resolve(faces_max, file.take("faces-max")?, d.face_count_max),
                dominant_strength: resolve(
                    dominant_strength,
                    file.take("dominant-strength")?,
                    d.dominant_strength,
                ),
                distractor_strength: resolve(
                    distractor_strength,
                    file.take("distractor-strength")?,
                    d.distractor_strength,
                ),
                salience_mean: resolve(
                    salience_mean,
                    file.take("salience-mean")?,
                    d.salience_mean,
                ),
                noise_sigma: resolve(noise_sigma, file.take("noise-sigma")?, d.noise_sigma),
                global_strength: resolve(
                    global_strength,
                    file.take("global-strength")?,
                    d.global_strength,
                ),
                context_projection: resolve(
                    context_projection,
                    file.take("context-projection")?,
                    d.context_projection,
                ),
                seed: resolve(seed, file.take("seed")?, d.seed),
            };
            file.warn_unused();
            cmd_gen_data(&out, &cfg)
        }
        Command::Train {
            data,
            mechanism,
            out,
            seed,
            epochs,
            lr,
            decay_factor,
            decay_period,
            batch_size,
            momentum,
            dropout,
            merge_val,
        } => {
            let data = required(data, file.take("data")?, "data")?;
            // The config key accepts the same spellings as the flag.
            let from_file = file
                .take::<String>("mechanism")?
                .map(|s| s.parse::<MechanismKind>().map_err(Failure::Usage))
                .transpose()?;
            let mechanism = required(mechanism, from_file, "mechanism")?;
            let out = required(out, file.take("out")?, "out")?;
            let d = TrainConfig::default();
            let cfg = TrainConfig {
                epochs: resolve(epochs, file.take("epochs")?, d.epochs),
                batch_size: resolve(batch_size, file.take("batch-size")?, d.batch_size),
                lr0: resolve(lr, file.take("lr")?, d.lr0),
                decay_factor: resolve(decay_factor, file.take("decay-factor")?, d.decay_factor),
                decay_period: resolve(decay_period, file.take("decay-period")?, d.decay_period),
                momentum: resolve(momentum, file.take("momentum")?, d.momentum),
                seed: resolve(seed, file.take("seed")?, d.seed),
                merge_val_into_train: merge_val
                    || file.take("merge-val")?.unwrap_or(false),
            };
            let dropout = resolve(dropout, file.take("dropout")?, 0.5);
            file.warn_unused();
            cmd_train(&data, mechanism, &out, &cfg, dropout)
        }
        Command::Eval { model, data, dump_attention } => {
            let model = required(model, file.take("model")?, "model")?;
            let data = required(data, file.take("data")?, "data")?;
            let dump = dump_attention || file.take("dump-attention")?.unwrap_or(false);
            file.warn_unused();
            cmd_eval(&model, &data, dump)
        }
        Command::EnsembleEval { models, data } => {
            let models = if models.is_empty() {
                file.take::<Vec<PathBuf>>("models")?.unwrap_or_default()
            } else {
                models
            };
            if models.is_empty() {
                return Err(Failure::Usage(
                    "missing required option --models (set it as a flag or config key)"
                        .to_string(),
                ));
            }
            let data = required(data, file.take("data")?, "data")?;
            file.warn_unused();
            cmd_ensemble_eval(&models, &data)
        }
        Command::Align { image, landmarks, out, template, eyes_only } => {
            let image = required(image, file.take("image")?, "image")?;
            let landmarks = required(landmarks, file.take("landmarks")?, "landmarks")?;
            let out = required(out, file.take("out")?, "out")?;
            let template = template.or(file.take("template")?);
            let eyes_only = eyes_only || file.take("eyes-only")?.unwrap_or(false);
            file.warn_unused();
            cmd_align(&image, &landmarks, &out, template.as_deref(), eyes_only)
        }
        Command::Gradcheck { seed, trials } => {
            let seed = resolve(seed, file.take("seed")?, GradCheckConfig::default().seed);
            let trials = resolve(trials, file.take("trials")?, 5);
            file.warn_unused();
            cmd_gradcheck(seed, trials)
        }
    }
}

fn cmd_gen_data(out: &Path, cfg: &DatasetConfig) -> Result<(), Failure> {
    echo_config(
        "gen-data",
        json!({
            "out": out.display().to_string(),
            "seed": cfg.seed,
            "n-train": cfg.n_train,
            "n-val": cfg.n_val,
            "n-eval": cfg.n_eval,
            "faces-min": cfg.face_count_min,
            "faces-max": cfg.face_count_max,
            "dominant-strength": cfg.dominant_strength,
            "distractor-strength": cfg.distractor_strength,
            "salience-mean": cfg.salience_mean,
            "noise-sigma": cfg.noise_sigma,
            "global-strength": cfg.global_strength,
            "context-projection": cfg.context_projection,
        }),
    );
    let dataset = generate_dataset(cfg)?;
    std::fs::create_dir_all(out)
        .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", out.display())))?;

    let partitions = [
        ("train", &dataset.train),
        ("val", &dataset.val),
        ("eval", &dataset.eval),
    ];
    let mut manifest = Vec::new();
    for (name, samples) in partitions {
        let file_name = format!("{name}.jsonl");
        write_partition_file(&out.join(&file_name), samples)?;
        manifest.push(json!({ "name": name, "path": file_name, "samples": samples.len() }));
        outln(json!({ "wrote": file_name, "samples": samples.len() }));
    }

    let sidecar = json!({ "seed": cfg.seed, "config": cfg, "partitions": manifest });
    std::fs::write(out.join("metadata.json"), format!("{sidecar}\n"))
        .map_err(|e| Failure::Usage(format!("cannot write metadata.json: {e}")))?;
    Ok(())
}

fn read_partition_logged(path: &Path) -> Result<Vec<GroupSample>, Failure> {
    let (samples, warnings) = read_partition_file(path)?;
    for w in warnings {
        eprintln!("warning: {}: {w}", path.display());
    }
    Ok(samples)
}

fn cmd_train(
    data: &Path,
    mechanism: MechanismKind,
    out: &Path,
    cfg: &TrainConfig,
    dropout: f64,
) -> Result<(), Failure> {
    echo_config(
        "train",
        json!({
            "data": data.display().to_string(),
            "mechanism": mechanism.name(),
            "out": out.display().to_string(),
            "seed": cfg.seed,
            "epochs": cfg.epochs,
            "lr": cfg.lr0,
            "decay-factor": cfg.decay_factor,
            "decay-period": cfg.decay_period,
            "batch-size": cfg.batch_size,
            "momentum": cfg.momentum,
            "dropout": dropout,
            "merge-val": cfg.merge_val_into_train,
        }),
    );
    let train_set = read_partition_logged(&data.join("train.jsonl"))?;
    let val_path = data.join("val.jsonl");
    let val_set = if val_path.exists() {
        read_partition_logged(&val_path)?
    } else {
        eprintln!("note: {} not found; training without validation", val_path.display());
        Vec::new()
    };
    let first = train_set
        .first()
        .ok_or_else(|| Failure::Compute("training partition is empty".to_string()))?;
    let first_face = first.faces.first().ok_or_else(|| {
        Failure::Compute(format!("sample '{}' has no faces; cannot size the model", first.id))
    })?;

    let mut config =
        ModelConfig::for_mechanism(mechanism, first.global_context.len(), first_face.len());
    config.dropout_p = dropout;

    // Initialization draws from its own stream so it never shares bits
    // with the trainer's shuffle (stream 0) and dropout (stream 1).
    let init_seed = CounterRng::new(cfg.seed).stream(2).next_u64();
    let model = GroupEmotionModel::init(config.clone(), init_seed)?;
    let outcome = train(model, cfg, &train_set, &val_set, |s| {
        outln(json!({
            "epoch": s.epoch,
            "lr": s.lr,
            "train-loss": s.train_loss,
            "val-accuracy": s.val_accuracy,
        }));
    })?;
    if outcome.dropped_singleton_batches > 0 {
        eprintln!(
            "note: dropped {} singleton batch(es); batch statistics need at least 2 rows",
            outcome.dropped_singleton_batches
        );
    }

    let meta = CheckpointMeta { seed: cfg.seed, epoch: cfg.epochs, mechanism, config };
    save_model(out, &outcome.model, &meta)?;
    outln(json!({
        "checkpoint": out.display().to_string(),
        "parameters": outcome.model.param_count(),
    }));
    Ok(())
}

/// One metrics record in Table order plus the human-readable report.
fn print_metrics(pairs: &[(Label, Label)]) -> Result<(), Failure> {
    let metrics = compute_metrics(pairs)?;
    outln(json!({
        "positive": metrics.per_class[Label::Positive.index()],
        "neutral": metrics.per_class[Label::Neutral.index()],
        "negative": metrics.per_class[Label::Negative.index()],
        "overall": metrics.overall,
        "samples": metrics.confusion.total(),
    }));
    out_text(metrics.report());
    Ok(())
}

fn cmd_eval(model_path: &Path, data: &Path, dump_attention: bool) -> Result<(), Failure> {
    echo_config(
        "eval",
        json!({
            "model": model_path.display().to_string(),
            "data": data.display().to_string(),
            "dump-attention": dump_attention,
        }),
    );
    let (model, meta) = load_model(model_path)?;
    outln(json!({ "mechanism": meta.mechanism.name(), "trained-epochs": meta.epoch }));
    let samples = read_partition_logged(data)?;

    let mut pairs = Vec::with_capacity(samples.len());
    for s in &samples {
        let (probs, weights) = model.forward(s)?;
        if dump_attention {
            outln(json!({
                "id": s.id,
                "weights": weights,
                "probs": probs.values.to_vec(),
                "predicted": probs.predict().name(),
            }));
        }
        pairs.push((s.label, probs.predict()));
    }
    print_metrics(&pairs)
}

fn cmd_ensemble_eval(model_paths: &[PathBuf], data: &Path) -> Result<(), Failure> {
    echo_config(
        "ensemble-eval",
        json!({
            "models": model_paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "data": data.display().to_string(),
        }),
    );
    let mut models = Vec::with_capacity(model_paths.len());
    for path in model_paths {
        let (model, _) = load_model(path)?;
        models.push(model);
    }
    let samples = read_partition_logged(data)?;
    let mut pairs = Vec::with_capacity(samples.len());
    for s in &samples {
        let probs = ensemble_predict(&models, s)?;
        pairs.push((s.label, probs.predict()));
    }
    print_metrics(&pairs)
}

/// Parses "x1,y1;x2,y2;x3,y3;x4,y4;x5,y5" into five landmark points.
fn parse_landmarks(text: &str) -> Result<Landmarks5, Failure> {
    let bad = |why: &str| {
        Failure::Usage(format!(
            "malformed landmarks '{text}': {why} (expected \"x1,y1;x2,y2;x3,y3;x4,y4;x5,y5\")"
        ))
    };
    let parts: Vec<&str> = text.split(';').collect();
    if parts.len() != 5 {
        return Err(bad(&format!("found {} point(s), need 5", parts.len())));
    }
    let mut points = [(0.0f64, 0.0f64); 5];
    for (slot, part) in points.iter_mut().zip(parts) {
        let coords: Vec<&str> = part.split(',').collect();
        if coords.len() != 2 {
            return Err(bad(&format!("point '{part}' is not \"x,y\"")));
        }
        let x: f64 = coords[0].trim().parse().map_err(|_| bad(&format!("bad number '{}'", coords[0])))?;
        let y: f64 = coords[1].trim().parse().map_err(|_| bad(&format!("bad number '{}'", coords[1])))?;
        if !x.is_finite() || !y.is_finite() {
            return Err(bad(&format!("non-finite point '{part}'")));
        }
        (slot.0, slot.1) = (x, y);
    }
    Ok(Landmarks5 { points })
}

fn cmd_align(
    image: &Path,
    landmarks: &str,
    out: &Path,
    template: Option<&Path>,
    eyes_only: bool,
) -> Result<(), Failure> {
    echo_config(
        "align",
        json!({
            "image": image.display().to_string(),
            "landmarks": landmarks,
            "out": out.display().to_string(),
            "template": template.map(|p| p.display().to_string()),
            "eyes-only": eyes_only,
        }),
    );
    let src = parse_landmarks(landmarks)?;
    let dst = match template {
        None => TEMPLATE,
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Failure::Usage(format!("cannot read template file {}: {e}", path.display()))
            })?;
            parse_landmarks(text.trim())?
        }
    };
    let img = read_pnm_file(image)?;
    let transform = estimate_similarity_to(&src, &dst, &AlignConfig { eyes_only })?;
    let aligned = warp_to_template(&img, &transform)?;
    write_pnm_file(out, &aligned)?;
    let Similarity { a, b, tx, ty } = transform;
    outln(json!({
        "scale": transform.scale(),
        "rotation-radians": b.atan2(a),
        "tx": tx,
        "ty": ty,
        "wrote": out.display().to_string(),
        "size": format!("{}x{}", aligned.width, aligned.height),
    }));
    Ok(())
}

fn cmd_gradcheck(seed: u64, trials: usize) -> Result<(), Failure> {
    if trials == 0 {
        return Err(Failure::Usage("--trials must be at least 1".to_string()));
    }
    let defaults = GradCheckConfig::default();
    // Each trial runs one configuration per mechanism.
    let cfg = GradCheckConfig {
        configs: trials * MechanismKind::ALL.len(),
        seed,
        ..defaults
    };
    echo_config(
        "gradcheck",
        json!({
            "seed": seed,
            "trials": trials,
            "configurations": cfg.configs,
            "tolerance": cfg.tolerance,
        }),
    );
    let report = check_model_gradients(&cfg)?;
    out_text(report.summary());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Compute(format!(
            "gradient check failed: relative error {:.3e} >= {:.0e} at {} '{}' (coordinate {})",
            report.worst.relative_error,
            report.tolerance,
            report.worst.mechanism,
            report.worst.param,
            report.worst.coordinate,
        )))
    }
}
