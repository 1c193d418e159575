//! Implementations of the four subcommands, plus flag/config/default
//! resolution and the exit-code policy: 0 success, 2 invalid arguments or
//! config values, 3 runtime failure (unreadable artifacts, dimension
//! mismatches, aborted training).
//!
//! Every command is a pure function of its resolved flags and input files;
//! re-running one reproduces its artifacts byte for byte, except for the
//! wall-clock timestamps in the training manifest.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::ValueEnum;
use grm_core::grm::{EstimatorKind, GrmConfig};
use grm_core::harness::{
    alignment_matrix, diagonal_mass, encode_all, gradient_survey, query_positives, recall_at_n,
    spectrum_report, train, DataConfig, LossKind, LrDecay, RetrievalDataset, TrainConfig,
    TrainOutcome,
};
use grm_core::io;
use grm_core::linalg::Matrix;
use grm_core::model::OptimizerKind;

use crate::args::{
    DiagnoseArgs, EstimatorArg, EvalArgs, GenDataArgs, LossArg, OptimizerArg, Switch, TrainArgs,
};

// ─────────────────────────── error plumbing ────────────────────────────

/// Command failure with its process exit code.
pub enum CliError {
    /// Bad flag or config value: exit 2.
    Usage(String),
    /// Everything after argument resolution: exit 3.
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<grm_core::Error> for CliError {
    fn from(e: grm_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn usage(e: impl Display) -> CliError {
    CliError::Usage(e.to_string())
}

// ─────────────────────── flag/file/default merging ─────────────────────

/// `key=value` entries from `--config`, if any. Later duplicates win.
struct FileConfig(Vec<(String, String)>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(FileConfig(Vec::new())),
            Some(p) => io::load_manifest(p)
                .map(FileConfig)
                .map_err(|e| usage(format!("config file {}: {e}", p.display()))),
        }
    }

    fn lookup(&self, key: &str) -> Option<&str> {
        self.0
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Flag, then file entry, then default.
    fn value<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.lookup(key) {
            Some(s) => s
                .parse()
                .map_err(|e| usage(format!("config key {key}={s:?}: {e}"))),
            None => Ok(default),
        }
    }

    /// Flag/file resolution without a default.
    fn optional<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.lookup(key) {
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|e| usage(format!("config key {key}={s:?}: {e}"))),
            None => Ok(None),
        }
    }

    /// Like [`FileConfig::value`] for clap value enums (`on`, `queue`, …).
    fn choice<T: ValueEnum>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.lookup(key) {
            Some(s) => T::from_str(s, false)
                .map_err(|e| usage(format!("config key {key}={s:?}: {e}"))),
            None => Ok(default),
        }
    }
}

fn enum_name<T: ValueEnum>(v: &T) -> String {
    v.to_possible_value()
        .expect("no skipped variants")
        .get_name()
        .to_string()
}

fn parse_usize_list(what: &str, s: &str) -> Result<Vec<usize>, CliError> {
    let items: Result<Vec<usize>, _> = s.split(',').map(|t| t.trim().parse()).collect();
    match items {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(usage(format!(
            "{what} must be a comma-separated list of positive integers, got {s:?}"
        ))),
    }
}

fn join_usize_list(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

// ───────────────────────────── gen-data ────────────────────────────────

pub fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let d = DataConfig::default();
    let cfg = DataConfig {
        num_places: file.value("places", args.places, d.num_places)?,
        samples_per_place: file.value("per-place", args.per_place, d.samples_per_place)?,
        dim: file.value("dim", args.dim, d.dim)?,
        anisotropy: file.value("anisotropy", args.anisotropy, d.anisotropy)?,
        noise_std: file.value("noise-std", args.noise_std, d.noise_std)?,
        query_noise_factor: file.value(
            "query-noise-factor",
            args.query_noise_factor,
            d.query_noise_factor,
        )?,
        seed: file.value("seed", args.seed, d.seed)?,
    };
    cfg.validate().map_err(usage)?;

    let data = RetrievalDataset::generate(&cfg)?;
    io::save_dataset(&args.out, &data)?;
    println!(
        "wrote {} samples ({} places × {}, dim {}, anisotropy {}, seed {}) to {}",
        data.len(),
        cfg.num_places,
        cfg.samples_per_place,
        cfg.dim,
        cfg.anisotropy,
        cfg.seed,
        args.out.display()
    );
    Ok(())
}

// ─────────────────────────────── train ─────────────────────────────────

/// Fully resolved training invocation, ready to echo into the manifest.
struct ResolvedTrain {
    config: TrainConfig,
    loss_arg: LossArg,
    grm_switch: Switch,
    estimator_arg: EstimatorArg,
    optimizer_arg: OptimizerArg,
    normalize: Switch,
}

fn resolve_train(args: &TrainArgs, data: &RetrievalDataset) -> Result<ResolvedTrain, CliError> {
    let file = FileConfig::load(args.config.as_deref())?;

    let loss_arg = file.choice("loss", args.loss, LossArg::Contrastive)?;
    let preset = match loss_arg {
        LossArg::Prototype => TrainConfig::classification_default(data.dim()),
        _ => TrainConfig::retrieval_default(data.dim()),
    };
    let preset_grm = preset.grm.clone().unwrap_or_default();

    let margin = file.value("margin", args.margin, 1.0)?;
    let temperature = file.value("temperature", args.temperature, 1.0)?;
    let loss = match loss_arg {
        LossArg::Contrastive => LossKind::Contrastive { margin },
        LossArg::Triplet => LossKind::Triplet { margin },
        LossArg::Prototype => LossKind::Prototype { temperature },
    };

    let layers_spec = file.value(
        "layers",
        args.layers.clone(),
        join_usize_list(&preset.layer_sizes[1..]),
    )?;
    let mut layer_sizes = vec![data.dim()];
    layer_sizes.extend(parse_usize_list("--layers", &layers_spec)?);

    let grm_switch = file.choice("grm", args.grm, Switch::On)?;
    let estimator_arg = file.choice("estimator", args.estimator, EstimatorArg::Queue)?;
    let grm = match grm_switch {
        Switch::Off => None,
        Switch::On => Some(GrmConfig {
            rectification_rate: file.value("s", args.s, preset_grm.rectification_rate)?,
            jitter: file.value("jitter", args.jitter, preset_grm.jitter)?,
            queue_capacity: file.value("queue-size", args.queue_size, preset_grm.queue_capacity)?,
            estimator: match estimator_arg {
                EstimatorArg::Queue => EstimatorKind::Queue,
                EstimatorArg::Avg => EstimatorKind::RunningAverage,
            },
            refresh_period: file.value("refresh", args.refresh, preset_grm.refresh_period)?,
        }),
    };

    let optimizer_arg = file.choice("optimizer", args.optimizer, OptimizerArg::Adam)?;
    let optimizer = match optimizer_arg {
        OptimizerArg::Sgd => OptimizerKind::Sgd,
        OptimizerArg::Momentum => OptimizerKind::momentum_default(),
        OptimizerArg::Adam => OptimizerKind::adam_default(),
    };

    let decay_factor = file.optional("decay-factor", args.decay_factor)?;
    let decay_every = file.optional("decay-every", args.decay_every)?;
    let lr_decay = match (decay_factor, decay_every) {
        (None, None) => preset.lr_decay.clone(),
        (Some(factor), Some(every_epochs)) => Some(LrDecay {
            factor,
            every_epochs,
        }),
        _ => {
            return Err(usage(
                "--decay-factor and --decay-every must be given together",
            ))
        }
    };

    let normalize = file.choice("normalize", args.normalize, Switch::Off)?;
    let config = TrainConfig {
        layer_sizes,
        loss,
        grm,
        optimizer,
        learning_rate: file.value("lr", args.lr, preset.learning_rate)?,
        lr_decay,
        epochs: file.value("epochs", args.epochs, preset.epochs)?,
        queries_per_batch: file.value(
            "queries-per-batch",
            args.queries_per_batch,
            preset.queries_per_batch,
        )?,
        negatives_per_query: file.value(
            "negatives-per-query",
            args.negatives_per_query,
            preset.negatives_per_query,
        )?,
        batch_size: file.value("batch-size", args.batch_size, preset.batch_size)?,
        normalize_descriptors: normalize == Switch::On,
        seed: file.value("seed", args.seed, preset.seed)?,
    };
    config.validate(data).map_err(usage)?;
    Ok(ResolvedTrain {
        config,
        loss_arg,
        grm_switch,
        estimator_arg,
        optimizer_arg,
        normalize,
    })
}

/// Manifest lines: the full resolved config under the same keys `--config`
/// accepts, plus run metadata.
fn manifest_entries(
    resolved: &ResolvedTrain,
    args: &TrainArgs,
    started: u64,
    finished: Option<u64>,
    outcome: Option<&TrainOutcome>,
) -> Vec<(String, String)> {
    let cfg = &resolved.config;
    let mut e: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, v: String| e.push((k.to_string(), v));

    push("version", format!("grm-{}", env!("CARGO_PKG_VERSION")));
    push("command", "train".into());
    push("data", args.data.display().to_string());
    push("out-dir", args.out_dir.display().to_string());

    push("loss", enum_name(&resolved.loss_arg));
    match cfg.loss {
        LossKind::Contrastive { margin } | LossKind::Triplet { margin } => {
            push("margin", format!("{margin}"));
        }
        LossKind::Prototype { temperature } => {
            push("temperature", format!("{temperature}"));
        }
    }
    push("layers", join_usize_list(&cfg.layer_sizes[1..]));
    push("grm", enum_name(&resolved.grm_switch));
    if let Some(grm) = &cfg.grm {
        push("s", format!("{}", grm.rectification_rate));
        push("estimator", enum_name(&resolved.estimator_arg));
        push("queue-size", grm.queue_capacity.to_string());
        push("jitter", format!("{}", grm.jitter));
        push("refresh", grm.refresh_period.to_string());
    }
    push("optimizer", enum_name(&resolved.optimizer_arg));
    push("lr", format!("{}", cfg.learning_rate));
    if let Some(decay) = &cfg.lr_decay {
        push("decay-factor", format!("{}", decay.factor));
        push("decay-every", decay.every_epochs.to_string());
    }
    push("epochs", cfg.epochs.to_string());
    push("queries-per-batch", cfg.queries_per_batch.to_string());
    push("negatives-per-query", cfg.negatives_per_query.to_string());
    push("batch-size", cfg.batch_size.to_string());
    push("normalize", enum_name(&resolved.normalize));
    push("seed", cfg.seed.to_string());

    push("started-unix", started.to_string());
    match finished {
        None => push("status", "running".into()),
        Some(t) => {
            push("finished-unix", t.to_string());
            let outcome = outcome.expect("finished run has an outcome");
            push(
                "status",
                if outcome.completed {
                    "completed".into()
                } else {
                    "aborted".into()
                },
            );
            if let Some(reason) = &outcome.abort {
                push("abort", reason.replace('\n', " "));
            }
            push("checkpoint", "checkpoint.bin".into());
            push("epoch-log", "epoch_log.csv".into());
            if outcome.prototypes.is_some() {
                push("prototypes", "prototypes.csv".into());
            }
        }
    }
    e
}

fn snapshot_name(epoch: usize, stem: &str) -> String {
    format!("epoch_{epoch:04}_{stem}.csv")
}

pub fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let data = io::load_dataset(&args.data)?;
    let resolved = resolve_train(&args, &data)?;

    fs::create_dir_all(&args.out_dir)?;
    let manifest_path = args.out_dir.join("manifest.txt");
    let started = unix_now();
    io::save_manifest(
        &manifest_path,
        &manifest_entries(&resolved, &args, started, None, None),
    )?;

    let outcome = train(&resolved.config, &data)?;

    io::save_encoder(&args.out_dir.join("checkpoint.bin"), &outcome.encoder)?;
    io::save_epoch_log(&args.out_dir.join("epoch_log.csv"), &outcome.log)?;
    if let Some(protos) = &outcome.prototypes {
        io::save_matrix_csv(&args.out_dir.join("prototypes.csv"), protos)?;
    }
    if args.dump_spectra {
        for (epoch, snap) in outcome.snapshots.iter().enumerate() {
            let d = &snap.descriptor_spectrum;
            let g = &snap.gradient_spectrum;
            io::save_vector_csv(
                &args.out_dir.join(snapshot_name(epoch, "desc_spectrum")),
                &d.eigenvalues,
            )?;
            io::save_matrix_csv(&args.out_dir.join(snapshot_name(epoch, "desc_basis")), &d.basis)?;
            io::save_vector_csv(
                &args.out_dir.join(snapshot_name(epoch, "grad_spectrum")),
                &g.eigenvalues,
            )?;
            io::save_matrix_csv(&args.out_dir.join(snapshot_name(epoch, "grad_basis")), &g.basis)?;
        }
    }
    if args.dump_queue {
        match &outcome.queue_snapshot {
            Some(snapshot) => {
                io::save_descriptors(&args.out_dir.join("queue_snapshot.bin"), snapshot)?;
            }
            None => eprintln!(
                "note: no memory queue to dump (rectification off or running-average estimator)"
            ),
        }
    }
    io::save_manifest(
        &manifest_path,
        &manifest_entries(&resolved, &args, started, Some(unix_now()), Some(&outcome)),
    )?;

    for r in &outcome.log {
        println!(
            "epoch {:>3}  loss {:>10.4}  desc_cond {:>10.2}  grad_cond {:>10.2}  \
             r@1 {:.3}  r@5 {:.3}  r@10 {:.3}",
            r.epoch, r.loss, r.desc_cond, r.grad_cond, r.recall1, r.recall5, r.recall10
        );
    }
    if let Some(acc) = outcome.final_accuracy {
        println!("classification accuracy {:.4}", acc);
    }
    println!("artifacts in {}", args.out_dir.display());

    match &outcome.abort {
        None => Ok(()),
        Some(reason) => Err(CliError::Runtime(format!("training aborted: {reason}"))),
    }
}

// ─────────────────────────────── eval ──────────────────────────────────

pub fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let depths = parse_usize_list("--n", &args.n).map_err(|e| e)?;

    let encoder = io::load_encoder(&args.checkpoint)?;
    let data = io::load_dataset(&args.data)?;
    if encoder.input_dim() != data.dim() {
        return Err(CliError::Runtime(format!(
            "checkpoint expects input dim {}, dataset has {}",
            encoder.input_dim(),
            data.dim()
        )));
    }
    let db_rows = data.database_indices().len();
    for &n in &depths {
        if n == 0 || n > db_rows {
            return Err(usage(format!(
                "recall depth {n} out of range 1..={db_rows} for this dataset"
            )));
        }
    }

    let query_desc = encode_all(&encoder, &data.gather(data.query_indices()))?;
    let db_desc = encode_all(&encoder, &data.gather(data.database_indices()))?;
    let recalls = recall_at_n(&query_desc, &db_desc, &query_positives(&data), &depths)?;

    let mut csv = String::from("n,recall\n");
    for (n, r) in &recalls {
        csv.push_str(&format!("{n},{r}\n"));
        println!("recall@{n} {r:.4}");
    }
    fs::write(&args.out, csv)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

// ───────────────────────────── diagnose ────────────────────────────────

/// One side's spectrum (descending eigenvalues) and matching eigenbasis.
struct SpectrumFiles {
    eigenvalues: Vec<f64>,
    basis: Matrix,
}

fn emit_diagnostics(
    out_dir: &Path,
    desc_a: &SpectrumFiles,
    desc_b: &SpectrumFiles,
    grad: &SpectrumFiles,
) -> Result<(), CliError> {
    fs::create_dir_all(out_dir)?;
    io::save_vector_csv(&out_dir.join("descriptor_spectrum_a.csv"), &desc_a.eigenvalues)?;
    io::save_vector_csv(&out_dir.join("descriptor_spectrum_b.csv"), &desc_b.eigenvalues)?;
    io::save_vector_csv(&out_dir.join("gradient_spectrum.csv"), &grad.eigenvalues)?;

    let desc_desc = alignment_matrix(&desc_a.basis, &desc_b.basis)?;
    let desc_grad = alignment_matrix(&desc_b.basis, &grad.basis)?;
    io::save_matrix_csv(&out_dir.join("alignment_desc_desc.csv"), &desc_desc.values)?;
    io::save_matrix_csv(&out_dir.join("alignment_desc_grad.csv"), &desc_grad.values)?;

    let dim = desc_b.basis.cols();
    let top = dim.min(8);
    println!(
        "descriptor–descriptor top-{top} diagonal mass {:.4}",
        diagonal_mass(&desc_desc, top)
    );
    println!(
        "descriptor–gradient top-{top} diagonal mass {:.4}",
        diagonal_mass(&desc_grad, top)
    );
    println!("wrote 5 CSVs to {}", out_dir.display());
    Ok(())
}

fn load_snapshot(dir: &Path, epoch: usize, kind: &str) -> Result<SpectrumFiles, CliError> {
    let spectrum_path = dir.join(snapshot_name(epoch, &format!("{kind}_spectrum")));
    let basis_path = dir.join(snapshot_name(epoch, &format!("{kind}_basis")));
    let eigenvalues = io::load_vector_csv(&spectrum_path).map_err(|e| {
        CliError::Runtime(format!("missing snapshot {}: {e}", spectrum_path.display()))
    })?;
    let basis = io::load_matrix_csv(&basis_path).map_err(|e| {
        CliError::Runtime(format!("missing snapshot {}: {e}", basis_path.display()))
    })?;
    Ok(SpectrumFiles { eigenvalues, basis })
}

pub fn cmd_diagnose(args: DiagnoseArgs) -> Result<(), CliError> {
    let checkpoint_mode =
        args.checkpoint_a.is_some() || args.checkpoint_b.is_some() || args.data.is_some();
    let log_mode = args.log_dir.is_some();
    if checkpoint_mode == log_mode {
        return Err(usage(
            "use either --checkpoint-a/--checkpoint-b/--data or --log-dir, not both",
        ));
    }

    if let Some(log_dir) = &args.log_dir {
        let mut epochs: Vec<usize> = fs::read_dir(log_dir)?
            .filter_map(|entry| entry.ok())
            .filter_map(|entry| {
                entry
                    .file_name()
                    .to_str()?
                    .strip_prefix("epoch_")?
                    .strip_suffix("_desc_spectrum.csv")?
                    .parse()
                    .ok()
            })
            .collect();
        epochs.sort_unstable();
        let (first, last) = match (epochs.first(), epochs.last()) {
            (Some(&f), Some(&l)) => (f, l),
            _ => {
                return Err(CliError::Runtime(format!(
                    "no spectrum snapshots in {} (train with --dump-spectra)",
                    log_dir.display()
                )))
            }
        };
        let epoch_a = args.epoch_a.unwrap_or(first);
        let epoch_b = args.epoch_b.unwrap_or(last);
        let desc_a = load_snapshot(log_dir, epoch_a, "desc")?;
        let desc_b = load_snapshot(log_dir, epoch_b, "desc")?;
        let grad_b = load_snapshot(log_dir, epoch_b, "grad")?;
        println!("comparing epoch {epoch_a} against epoch {epoch_b}");
        return emit_diagnostics(&args.out_dir, &desc_a, &desc_b, &grad_b);
    }

    let (ckpt_a, ckpt_b, data_path) = match (&args.checkpoint_a, &args.checkpoint_b, &args.data) {
        (Some(a), Some(b), Some(d)) => (a, b, d),
        _ => {
            return Err(usage(
                "checkpoint mode needs --checkpoint-a, --checkpoint-b, and --data",
            ))
        }
    };
    let encoder_a = io::load_encoder(ckpt_a)?;
    let encoder_b = io::load_encoder(ckpt_b)?;
    let data = io::load_dataset(data_path)?;
    for (name, encoder) in [("--checkpoint-a", &encoder_a), ("--checkpoint-b", &encoder_b)] {
        if encoder.input_dim() != data.dim() {
            return Err(CliError::Runtime(format!(
                "{name} expects input dim {}, dataset has {}",
                encoder.input_dim(),
                data.dim()
            )));
        }
    }

    let db_inputs = data.gather(data.database_indices());
    let spectrum_a = spectrum_report(&encode_all(&encoder_a, &db_inputs)?)?;
    let spectrum_b = spectrum_report(&encode_all(&encoder_b, &db_inputs)?)?;

    let mut survey_cfg = TrainConfig::retrieval_default(data.dim());
    survey_cfg.layer_sizes = encoder_b.layer_sizes();
    survey_cfg.loss = LossKind::Contrastive {
        margin: args.margin,
    };
    survey_cfg.queries_per_batch = args.queries_per_batch;
    survey_cfg.negatives_per_query = args.negatives_per_query;
    survey_cfg.seed = args.seed;
    let (_, gradients) = gradient_survey(&encoder_b, &data, &survey_cfg)?;
    let grad_spectrum = spectrum_report(&gradients)?;

    let to_files = |s: grm_core::harness::SpectrumReport| SpectrumFiles {
        eigenvalues: s.eigenvalues,
        basis: s.basis,
    };
    emit_diagnostics(
        &args.out_dir,
        &to_files(spectrum_a),
        &to_files(spectrum_b),
        &to_files(grad_spectrum),
    )
}
