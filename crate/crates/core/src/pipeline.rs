//! The staged end-to-end run: source dictionary and head, transitional
//! dictionary and head, then pseudo-label finetuning. Every stage writes a
//! checkpoint bundle; a rerun with `resume` reuses checkpoints whose
//! configuration and input fingerprints still match.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::{finetune_spatial, pseudo_label, FinetuneConfig};
use crate::head::{
    fit_background_model, fit_spatial_coefficients, GenerativeModel, OcclusionModel,
    DEFAULT_MIXTURES, DEFAULT_TAU,
};
use crate::io::{
    file_hash, load_bundle, read_tensor, save_bundle, sha256_hex, validate_manifest, write_json,
    BundleStage, DatasetManifest, Domain, ModelBundle, Provenance,
};
use crate::transition::{adapt_dictionary, AdaptConfig, AdaptReport};
use crate::vmf::{em_fit_dictionary, EmConfig, EmLog, FeatureMap, FeatureSet, VmfDictionary};

pub const REPORT_SCHEMA: u32 = 1;
pub const DEFAULT_KERNELS: usize = 512;
pub const DEFAULT_SIGMA: f64 = 30.0;

/// Optional occlusion model attached to every stage's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcclusionConfig {
    /// Tensor of background feature vectors (N×D, or H×W×D maps).
    pub background: Option<PathBuf>,
    pub kernels: usize,
    pub tau: f64,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            background: None,
            kernels: 8,
            tau: DEFAULT_TAU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub kernels: usize,
    pub sigma: f64,
    pub mixtures: usize,
    /// Seeds every stage; overrides the seeds of the nested configs.
    pub seed: u64,
    pub em: EmConfig,
    pub adapt: AdaptConfig,
    pub finetune: FinetuneConfig,
    pub occlusion: OcclusionConfig,
    /// Directory that a relative background path resolves against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            kernels: DEFAULT_KERNELS,
            sigma: DEFAULT_SIGMA,
            mixtures: DEFAULT_MIXTURES,
            seed: 0,
            em: EmConfig::default(),
            adapt: AdaptConfig::default(),
            finetune: FinetuneConfig::default(),
            occlusion: OcclusionConfig::default(),
            base_dir: PathBuf::new(),
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON config; missing fields take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = crate::io::read_json(path)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels == 0 || self.mixtures == 0 {
            return Err(Error::InvalidArgument(
                "kernels and mixtures must be positive".into(),
            ));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        self.em.validate()?;
        self.adapt.validate(self.kernels)?;
        self.finetune.validate()?;
        if self.occlusion.background.is_some() && self.occlusion.kernels == 0 {
            return Err(Error::InvalidArgument(
                "background kernels must be positive".into(),
            ));
        }
        if !(self.occlusion.tau > 0.0 && self.occlusion.tau < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tau must lie in (0, 1), got {}",
                self.occlusion.tau
            )));
        }
        Ok(())
    }

    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            seed: self.seed,
            ..self.em.clone()
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            seed: self.seed,
            ..self.finetune.clone()
        }
    }

    pub fn background_path(&self) -> Option<PathBuf> {
        self.occlusion.background.as_ref().map(|p| {
            if p.is_absolute() {
                p.clone()
            } else {
                self.base_dir.join(p)
            }
        })
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let json =
            serde_json::to_vec(self).map_err(|e| Error::Format(format!("config encoding: {e}")))?;
        Ok(sha256_hex(&json))
    }
}

/// Reads background features from an N×D tensor or an H×W×D map.
pub fn load_background(path: &Path) -> Result<FeatureSet> {
    let t = read_tensor(path)?;
    match t.dims.len() {
        2 => FeatureSet::from_rows(t.dims[1], &t.rows()?),
        3 => FeatureSet::from_maps([&t.to_feature_map()?]),
        _ => Err(Error::DimMismatch(format!(
            "background tensor must be N×D or H×W×D, got {:?}",
            t.dims
        ))),
    }
}

/// Fits Q from the configured background tensor, if any.
pub fn occlusion_model(cfg: &PipelineConfig) -> Result<Option<OcclusionModel>> {
    let Some(path) = cfg.background_path() else {
        return Ok(None);
    };
    let features = load_background(&path)?;
    let em = EmConfig {
        seed: cfg.seed ^ 0xB4C4_D00D,
        ..cfg.em.clone()
    };
    let q = fit_background_model(&features, cfg.occlusion.kernels, cfg.sigma, &em)?;
    Ok(Some(OcclusionModel::new(q, cfg.occlusion.tau)?))
}

/// Fingerprint of the manifest and every file it (or the config) references.
pub fn input_fingerprint(manifest: &DatasetManifest, cfg: &PipelineConfig) -> Result<String> {
    let mut buf = serde_json::to_vec(manifest)
        .map_err(|e| Error::Format(format!("manifest encoding: {e}")))?;
    for e in &manifest.entries {
        buf.extend_from_slice(file_hash(&manifest.resolve(e))?.as_bytes());
    }
    if let Some(p) = cfg.background_path() {
        buf.extend_from_slice(file_hash(&p)?.as_bytes());
    }
    Ok(sha256_hex(&buf))
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Reuse matching checkpoints found in `out_dir`.
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: BundleStage,
    pub checkpoint: PathBuf,
    pub bundle_hash: String,
    pub resumed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoRound {
    pub labeled: usize,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema: u32,
    pub config_hash: String,
    pub manifest_hash: String,
    pub source_maps: usize,
    pub target_maps: usize,
    pub stages: Vec<StageRecord>,
    /// Source EM trace, absent when the source stage was resumed.
    pub source_em: Option<EmLog>,
    pub pseudo_rounds: Vec<PseudoRound>,
    /// Set when the run ended early or skipped work.
    pub notice: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    /// Bundle of the last stage that ran.
    pub bundle: ModelBundle,
    pub report: PipelineReport,
}

pub fn checkpoint_path(out_dir: &Path, stage: BundleStage) -> PathBuf {
    out_dir.join(format!("{}.ugtb", stage.name()))
}

fn in_stage<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage,
        source: Box::new(e),
    })
}

struct Run<'a> {
    opts: &'a RunOptions,
    cfg: &'a PipelineConfig,
    config_hash: String,
    manifest_hash: String,
    report: PipelineReport,
}

impl Run<'_> {
    fn provenance(&self, stage: BundleStage) -> Provenance {
        Provenance {
            stage,
            config_hash: self.config_hash.clone(),
            manifest_hash: self.manifest_hash.clone(),
            seed: self.cfg.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    fn reusable(&self, stage: BundleStage) -> Option<ModelBundle> {
        if !self.opts.resume {
            return None;
        }
        let b = load_bundle(&checkpoint_path(&self.opts.out_dir, stage)).ok()?;
        let p = &b.provenance;
        (p.stage == stage
            && p.config_hash == self.config_hash
            && p.manifest_hash == self.manifest_hash)
            .then_some(b)
    }

    fn record(&mut self, stage: BundleStage, bundle: &ModelBundle, resumed: bool) -> Result<()> {
        let path = checkpoint_path(&self.opts.out_dir, stage);
        if !resumed {
            save_bundle(&path, bundle)?;
        }
        self.report.stages.push(StageRecord {
            stage,
            checkpoint: path,
            bundle_hash: bundle.hash()?,
            resumed,
        });
        Ok(())
    }
}

/// Runs every stage in order, writing `{source,transitional,finetuned}.ugtb`
/// and `report.json` into `opts.out_dir`. A manifest without target entries
/// stops after the source stage with a notice in the report.
pub fn run_pipeline(
    manifest: &DatasetManifest,
    cfg: &PipelineConfig,
    opts: &RunOptions,
) -> Result<PipelineOutcome> {
    in_stage("config", cfg.validate())?;
    in_stage("manifest", validate_manifest(manifest))?;
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let config_hash = cfg.hash()?;
    let manifest_hash = in_stage("manifest", input_fingerprint(manifest, cfg))?;

    let (source_maps, source_labels) = in_stage("manifest", manifest.load_domain(Domain::Source))?;
    let source_labels: Vec<u32> = source_labels.into_iter().flatten().collect();
    let (target_maps, _) = in_stage("manifest", manifest.load_domain(Domain::Target))?;
    if source_maps.is_empty() {
        return Err(Error::Stage {
            stage: "manifest",
            source: Box::new(Error::InvalidArgument(
                "manifest has no source entries".into(),
            )),
        });
    }

    let mut run = Run {
        opts,
        cfg,
        report: PipelineReport {
            schema: REPORT_SCHEMA,
            config_hash: config_hash.clone(),
            manifest_hash: manifest_hash.clone(),
            source_maps: source_maps.len(),
            target_maps: target_maps.len(),
            stages: Vec::new(),
            source_em: None,
            pseudo_rounds: Vec::new(),
            notice: None,
        },
        config_hash,
        manifest_hash,
    };

    let occlusion = match run.reusable(BundleStage::Source) {
        Some(b) => b.model.occlusion.clone(),
        None => in_stage("occlusion", occlusion_model(cfg))?,
    };

    let source = match run.reusable(BundleStage::Source) {
        Some(b) => {
            run.record(BundleStage::Source, &b, true)?;
            b
        }
        None => {
            let (model, log) = in_stage(
                "source",
                source_stage(&source_maps, &source_labels, cfg, occlusion.clone()),
            )?;
            run.report.source_em = Some(log);
            let b = ModelBundle::new(model, None, run.provenance(BundleStage::Source));
            run.record(BundleStage::Source, &b, false)?;
            b
        }
    };

    if target_maps.is_empty() {
        run.report.notice =
            Some("manifest has no target entries; stopped after the source stage".into());
        return finish(run, source);
    }

    let transitional = match run.reusable(BundleStage::Transitional) {
        Some(b) => {
            run.record(BundleStage::Transitional, &b, true)?;
            b
        }
        None => {
            let (model, report) = in_stage(
                "transitional",
                transitional_stage(
                    &source.model.dictionary,
                    &source_maps,
                    &source_labels,
                    &target_maps,
                    cfg,
                    occlusion.clone(),
                ),
            )?;
            let b = ModelBundle::new(
                model,
                Some(report),
                run.provenance(BundleStage::Transitional),
            );
            run.record(BundleStage::Transitional, &b, false)?;
            b
        }
    };

    let finetuned = match run.reusable(BundleStage::Finetuned) {
        Some(b) => {
            run.record(BundleStage::Finetuned, &b, true)?;
            b
        }
        None => {
            let (model, rounds, notice) = in_stage(
                "finetune",
                finetune_stage(&transitional.model, &target_maps, cfg),
            )?;
            run.report.pseudo_rounds = rounds;
            run.report.notice = notice;
            let b = ModelBundle::new(
                model,
                transitional.adapt_report.clone(),
                run.provenance(BundleStage::Finetuned),
            );
            run.record(BundleStage::Finetuned, &b, false)?;
            b
        }
    };
    finish(run, finetuned)
}

fn finish(run: Run<'_>, bundle: ModelBundle) -> Result<PipelineOutcome> {
    write_json(&run.opts.out_dir.join("report.json"), &run.report)?;
    Ok(PipelineOutcome {
        bundle,
        report: run.report,
    })
}

/// Source dictionary by EM, then spatial coefficients on the labeled maps.
pub fn source_stage(
    maps: &[FeatureMap],
    labels: &[u32],
    cfg: &PipelineConfig,
    occlusion: Option<OcclusionModel>,
) -> Result<(GenerativeModel, EmLog)> {
    let features = FeatureSet::from_maps(maps)?;
    let (dict, log) = em_fit_dictionary(&features, cfg.kernels, cfg.sigma, &cfg.em_config())?;
    let spatial = fit_spatial_coefficients(maps, labels, &dict, cfg.mixtures, cfg.seed)?;
    Ok((GenerativeModel::new(dict, spatial, occlusion)?, log))
}

/// Adapts the source dictionary to the target features, then learns the
/// spatial coefficients on the labeled source maps under the adapted kernels.
pub fn transitional_stage(
    source_dict: &VmfDictionary,
    source_maps: &[FeatureMap],
    source_labels: &[u32],
    target_maps: &[FeatureMap],
    cfg: &PipelineConfig,
    occlusion: Option<OcclusionModel>,
) -> Result<(GenerativeModel, AdaptReport)> {
    let target = FeatureSet::from_maps(target_maps)?;
    let (dict, report) = adapt_dictionary(source_dict, &target, &cfg.adapt)?;
    let spatial =
        fit_spatial_coefficients(source_maps, source_labels, &dict, cfg.mixtures, cfg.seed)?;
    Ok((GenerativeModel::new(dict, spatial, occlusion)?, report))
}

/// Pseudo-label then finetune, `rounds` times. Stops early with a notice
/// when no target map clears the confidence threshold.
pub fn finetune_stage(
    model: &GenerativeModel,
    target_maps: &[FeatureMap],
    cfg: &PipelineConfig,
) -> Result<(GenerativeModel, Vec<PseudoRound>, Option<String>)> {
    let ft = cfg.finetune_config();
    let mut current = model.clone();
    let mut rounds = Vec::new();
    for round in 0..ft.rounds.max(1) {
        let pseudo = pseudo_label(target_maps, &current, ft.threshold)?;
        if pseudo.is_empty() {
            let notice = format!(
                "round {round}: no target map reached confidence {}; spatial coefficients left unchanged",
                ft.threshold
            );
            return Ok((current, rounds, Some(notice)));
        }
        let (next, log) = finetune_spatial(&current, &pseudo, target_maps, &ft)?;
        rounds.push(PseudoRound {
            labeled: pseudo.len(),
            loss_trace: log.loss_trace,
        });
        current = next;
    }
    Ok((current, rounds, None))
}
