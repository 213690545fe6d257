mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use ugt_core::corpus::{write_synthetic_corpus, CorpusOptions};
use ugt_core::eval::evaluate;
use ugt_core::finetune::{finetune_spatial, pseudo_label, PseudoLabel};
use ugt_core::head::{classify_all, fit_spatial_coefficients};
use ugt_core::io::{
    convert_npy, load_bundle, load_manifest, read_json, save_bundle, validate_manifest, write_json,
    BundleStage, DatasetManifest, Domain, ModelBundle, Provenance,
};
use ugt_core::pipeline::{
    input_fingerprint, occlusion_model, run_pipeline, PipelineConfig, RunOptions,
};
use ugt_core::synth::DomainPairSpec;
use ugt_core::transition::adapt_dictionary;
use ugt_core::vmf::em_fit_dictionary;
use ugt_core::{
    AdaptReport, Error, FeatureSet, GenerativeModel, PseudoLabelSet, Result, VmfDictionary,
};

use crate::config::ConfigArgs;

#[derive(Parser)]
#[command(
    name = "ugt",
    version,
    about = "Generative vMF classifiers with unsupervised domain transition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a vMF dictionary to the features of one manifest domain.
    FitVmf(FitVmfArgs),
    /// Adapt a source dictionary to the target features of a manifest.
    Adapt(AdaptArgs),
    /// Learn spatial coefficients on labeled source maps for a dictionary.
    FitSpatial(FitSpatialArgs),
    /// Label target maps with a model, keeping confident predictions.
    PseudoLabel(PseudoLabelArgs),
    /// Finetune a model's spatial coefficients on pseudo-labeled maps.
    Finetune(FinetuneArgs),
    /// Classify every map of a manifest.
    Classify(ClassifyArgs),
    /// Accuracy by occlusion level and class on a labeled manifest.
    Evaluate(EvaluateArgs),
    /// Write a planted synthetic domain pair to disk.
    Synth(SynthArgs),
    /// Run every stage end to end with checkpoints.
    Pipeline(PipelineArgs),
    /// Convert a .npy array to the tensor format.
    Convert(ConvertArgs),
    /// Check a manifest against its tensor files.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Source,
    Transitional,
    Finetuned,
}

#[derive(Args)]
struct FitVmfArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "source")]
    domain: DomainArg,
    /// Output dictionary (JSON).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct AdaptArgs {
    /// Source dictionary (JSON).
    #[arg(long)]
    source_dict: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output transitional dictionary (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Where to write the adaptation report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct FitSpatialArgs {
    /// Dictionary (JSON).
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output model bundle.
    #[arg(long)]
    out: PathBuf,
    /// Stage recorded in the bundle.
    #[arg(long, value_enum, default_value = "source")]
    stage: StageArg,
    /// Adaptation report to store alongside the model.
    #[arg(long)]
    adapt_report: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct PseudoLabelArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output pseudo-labels (JSON).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Pseudo-labels written by `pseudo-label`.
    #[arg(long)]
    pseudo: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Use the occlusion-aware likelihood.
    #[arg(long)]
    occlusion: bool,
    /// Write predictions here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    occlusion: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Generator spec (JSON); flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    kernels: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    mixtures: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    shared_fraction: Option<f64>,
    /// Rotation of the non-shared kernels, radians.
    #[arg(long)]
    shift_angle: Option<f64>,
    #[arg(long)]
    source_per_class: Option<usize>,
    #[arg(long)]
    target_per_class: Option<usize>,
    #[arg(long)]
    class_specificity: Option<f64>,
    #[arg(long)]
    background_kernels: Option<usize>,
    /// Held-out maps per class and occlusion level.
    #[arg(long, default_value_t = 100)]
    eval_per_class: usize,
    #[arg(long, default_value_t = 2000)]
    background_samples: usize,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for checkpoints and the run report.
    #[arg(long)]
    out: PathBuf,
    /// Reuse matching checkpoints in the output directory.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    manifest: PathBuf,
}

const PSEUDO_SCHEMA: u32 = 1;

/// Pseudo-labels on disk; `id` indexes the manifest's target entries.
#[derive(Serialize, Deserialize)]
struct PseudoLabelFile {
    schema: u32,
    threshold: f64,
    entries: Vec<PseudoLabelRow>,
}

#[derive(Serialize, Deserialize)]
struct PseudoLabelRow {
    id: usize,
    path: PathBuf,
    label: u32,
    confidence: f64,
}

#[derive(Serialize)]
struct Prediction<'a> {
    path: &'a Path,
    label: u32,
    confidence: f64,
    scores: Vec<f64>,
    occluded_fraction: Option<f64>,
}

fn provenance(
    stage: BundleStage,
    cfg: &PipelineConfig,
    manifest: &DatasetManifest,
) -> Result<Provenance> {
    Ok(Provenance {
        stage,
        config_hash: cfg.hash()?,
        manifest_hash: input_fingerprint(manifest, cfg)?,
        seed: cfg.seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

fn checked_manifest(path: &Path) -> Result<DatasetManifest> {
    let m = load_manifest(path)?;
    validate_manifest(&m)?;
    Ok(m)
}

fn target_entries(manifest: &DatasetManifest) -> Vec<PathBuf> {
    manifest
        .entries_in(Domain::Target)
        .map(|e| e.path.clone())
        .collect()
}

fn fit_vmf(a: FitVmfArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let manifest = checked_manifest(&a.manifest)?;
    let (maps, _) = manifest.load_domain(a.domain.into())?;
    let features = FeatureSet::from_maps(&maps)?;
    let (dict, log) = em_fit_dictionary(&features, cfg.kernels, cfg.sigma, &cfg.em_config())?;
    write_json(&a.out, &dict)?;
    println!(
        "fitted {} kernels on {} features: {} iterations, log-likelihood {:.6}",
        dict.len(),
        features.len(),
        log.iterations,
        log.log_likelihood.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn adapt(a: AdaptArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let source: VmfDictionary = read_json(&a.source_dict)?;
    let manifest = checked_manifest(&a.manifest)?;
    let (maps, _) = manifest.load_domain(Domain::Target)?;
    if maps.is_empty() {
        return Err(Error::InvalidArgument(
            "manifest has no target entries".into(),
        ));
    }
    let features = FeatureSet::from_maps(&maps)?;
    let (dict, report) = adapt_dictionary(&source, &features, &cfg.adapt)?;
    write_json(&a.out, &dict)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    println!(
        "adapted {} kernels in {} iterations",
        dict.len(),
        report.iterations
    );
    Ok(())
}

fn fit_spatial(a: FitSpatialArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let dict: VmfDictionary = read_json(&a.dict)?;
    let manifest = checked_manifest(&a.manifest)?;
    let (maps, labels) = manifest.load_domain(Domain::Source)?;
    let labels: Vec<u32> = labels.into_iter().flatten().collect();
    let spatial = fit_spatial_coefficients(&maps, &labels, &dict, cfg.mixtures, cfg.seed)?;
    let model = GenerativeModel::new(dict, spatial, occlusion_model(&cfg)?)?;
    let report: Option<AdaptReport> = a.adapt_report.as_deref().map(read_json).transpose()?;
    let stage = match a.stage {
        StageArg::Source => BundleStage::Source,
        StageArg::Transitional => BundleStage::Transitional,
        StageArg::Finetuned => BundleStage::Finetuned,
    };
    let bundle = ModelBundle::new(model, report, provenance(stage, &cfg, &manifest)?);
    save_bundle(&a.out, &bundle)?;
    println!("wrote {} bundle {}", stage.name(), a.out.display());
    Ok(())
}

fn pseudo(a: PseudoLabelArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let bundle = load_bundle(&a.bundle)?;
    let manifest = checked_manifest(&a.manifest)?;
    let (maps, _) = manifest.load_domain(Domain::Target)?;
    let set = pseudo_label(&maps, &bundle.model, cfg.finetune.threshold)?;
    let paths = target_entries(&manifest);
    let file = PseudoLabelFile {
        schema: PSEUDO_SCHEMA,
        threshold: set.threshold,
        entries: set
            .entries
            .iter()
            .map(|e| PseudoLabelRow {
                id: e.id,
                path: paths[e.id].clone(),
                label: e.label,
                confidence: e.confidence,
            })
            .collect(),
    };
    write_json(&a.out, &file)?;
    println!(
        "kept {} of {} target maps at threshold {}",
        set.len(),
        maps.len(),
        set.threshold
    );
    Ok(())
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let bundle = load_bundle(&a.bundle)?;
    let manifest = checked_manifest(&a.manifest)?;
    let (maps, _) = manifest.load_domain(Domain::Target)?;
    let file: PseudoLabelFile = read_json(&a.pseudo)?;
    if file.schema != PSEUDO_SCHEMA {
        return Err(Error::Format(format!(
            "unsupported pseudo-label schema {}",
            file.schema
        )));
    }
    let paths = target_entries(&manifest);
    let mut entries = Vec::with_capacity(file.entries.len());
    for row in file.entries {
        if paths.get(row.id) != Some(&row.path) {
            return Err(Error::InvalidArgument(format!(
                "pseudo-label {} ({}) does not match the manifest's target entries",
                row.id,
                row.path.display()
            )));
        }
        entries.push(PseudoLabel {
            id: row.id,
            label: row.label,
            confidence: row.confidence,
        });
    }
    let set = PseudoLabelSet {
        threshold: file.threshold,
        entries,
    };
    let ft = cfg.finetune_config();
    let (model, log) = finetune_spatial(&bundle.model, &set, &maps, &ft)?;
    let out = ModelBundle::new(
        model,
        bundle.adapt_report,
        provenance(BundleStage::Finetuned, &cfg, &manifest)?,
    );
    save_bundle(&a.out, &out)?;
    match (log.loss_trace.first(), log.loss_trace.last()) {
        (Some(first), Some(last)) => println!(
            "finetuned on {} maps: loss {first:.6} -> {last:.6}",
            set.len()
        ),
        _ => println!(
            "refit {} classes from {} maps",
            log.refit_classes.len(),
            set.len()
        ),
    }
    Ok(())
}

fn classify(a: ClassifyArgs) -> Result<()> {
    let bundle = load_bundle(&a.bundle)?;
    let manifest = load_manifest(&a.manifest)?;
    let maps = manifest
        .entries
        .iter()
        .map(|e| manifest.load_map(e))
        .collect::<Result<Vec<_>>>()?;
    let results = classify_all(&maps, &bundle.model, a.occlusion)?;
    let rows: Vec<Prediction> = manifest
        .entries
        .iter()
        .zip(&results)
        .map(|(e, c)| {
            let ci = bundle
                .model
                .classes()
                .iter()
                .position(|&y| y == c.label)
                .unwrap_or(0);
            Prediction {
                path: &e.path,
                label: c.label,
                confidence: c.probabilities()[ci],
                scores: c.scores.clone(),
                occluded_fraction: c.mask.as_ref().map(|m| m.fraction()),
            }
        })
        .collect();
    match &a.out {
        Some(p) => write_json(p, &rows)?,
        None => {
            let text =
                serde_json::to_string_pretty(&rows).map_err(|e| Error::Format(e.to_string()))?;
            // A reader that closes the pipe early (e.g. `head`) is not an error.
            match writeln!(std::io::stdout().lock(), "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                    return Err(Error::io("<stdout>", e))
                }
                _ => {}
            }
        }
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let bundle = load_bundle(&a.bundle)?;
    let manifest = checked_manifest(&a.manifest)?;
    let report = evaluate(&manifest, &bundle.model, a.occlusion)?;
    print!("{}", report.to_table());
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec: DomainPairSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => DomainPairSpec::default(),
    };
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut spec.n_classes, a.classes);
    set(&mut spec.kernels, a.kernels);
    set(&mut spec.dim, a.dim);
    set(&mut spec.height, a.height);
    set(&mut spec.width, a.width);
    set(&mut spec.mixtures, a.mixtures);
    set(&mut spec.maps_per_class_source, a.source_per_class);
    set(&mut spec.maps_per_class_target, a.target_per_class);
    set(&mut spec.background_kernels, a.background_kernels);
    spec.seed = a.seed.unwrap_or(spec.seed);
    spec.sigma = a.sigma.unwrap_or(spec.sigma);
    spec.shared_kernel_fraction = a.shared_fraction.unwrap_or(spec.shared_kernel_fraction);
    spec.shift_angle = a.shift_angle.unwrap_or(spec.shift_angle);
    spec.class_specificity = a.class_specificity.unwrap_or(spec.class_specificity);
    let opts = CorpusOptions {
        eval_per_class: a.eval_per_class,
        background_samples: a.background_samples,
    };
    let (paths, truth) = write_synthetic_corpus(&a.out, &spec, &opts)?;
    for note in &truth.notes {
        println!("note: {note}");
    }
    println!("train manifest  {}", paths.train_manifest.display());
    println!("eval manifest   {}", paths.eval_manifest.display());
    println!("pipeline config {}", paths.config.display());
    Ok(())
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let manifest = load_manifest(&a.manifest)?;
    let outcome = run_pipeline(
        &manifest,
        &cfg,
        &RunOptions {
            out_dir: a.out.clone(),
            resume: a.resume,
        },
    )?;
    for s in &outcome.report.stages {
        let how = if s.resumed { "resumed" } else { "computed" };
        println!(
            "{:<13} {how:<8} {} {}",
            s.stage.name(),
            &s.bundle_hash[..16],
            s.checkpoint.display()
        );
    }
    if let Some(n) = &outcome.report.notice {
        println!("notice: {n}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitVmf(a) => fit_vmf(a),
        Command::Adapt(a) => adapt(a),
        Command::FitSpatial(a) => fit_spatial(a),
        Command::PseudoLabel(a) => pseudo(a),
        Command::Finetune(a) => finetune(a),
        Command::Classify(a) => classify(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Synth(a) => synth(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Convert(a) => {
            let t = convert_npy(&a.input, &a.output)?;
            println!("wrote tensor {:?} to {}", t.dims, a.output.display());
            Ok(())
        }
        Command::Validate(a) => {
            let m = checked_manifest(&a.manifest)?;
            println!(
                "ok: {} entries, {}x{}x{}",
                m.entries.len(),
                m.height,
                m.width,
                m.dim
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
