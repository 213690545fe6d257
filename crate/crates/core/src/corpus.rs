//! Writes a planted domain pair to disk as tensors, manifests and a ready
//! pipeline config.
//!
//! Layout under the output directory:
//!
//! ```text
//! maps/source_NNNNN.ugtf   labeled source maps
//! maps/target_NNNNN.ugtf   unlabeled target maps
//! eval/LX_NNNNN.ugtf       held-out labeled target maps, one set per level
//! background.ugtf          N×D background features
//! train.json               manifest: source + target training maps
//! eval.json                manifest: held-out maps with occlusion levels
//! pipeline.json            pipeline config matching the generator
//! truth.json               planted models and shared-kernel indices
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{
    save_manifest, write_json, write_tensor, DatasetManifest, Domain, ManifestEntry, Tensor,
};
use crate::pipeline::{OcclusionConfig, PipelineConfig};
use crate::synth::{
    make_domain_pair, occlude_maps, sample_heldout, sample_mixture, DomainPairSpec, GroundTruth,
    Occlusion, OcclusionLevel,
};
use crate::vmf::FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusOptions {
    /// Held-out maps per class at every occlusion level.
    pub eval_per_class: usize,
    pub background_samples: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            eval_per_class: 100,
            background_samples: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPaths {
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
    pub config: PathBuf,
    pub background: PathBuf,
    pub truth: PathBuf,
}

fn write_maps(
    dir: &Path,
    rel_dir: &str,
    prefix: &str,
    maps: &[FeatureMap],
    mut entry: impl FnMut(usize, PathBuf) -> ManifestEntry,
) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir.join(rel_dir)).map_err(|e| Error::io(dir.join(rel_dir), e))?;
    maps.iter()
        .enumerate()
        .map(|(i, fm)| {
            let rel = PathBuf::from(rel_dir).join(format!("{prefix}_{i:05}.ugtf"));
            write_tensor(&dir.join(&rel), &Tensor::from_feature_map(fm))?;
            Ok(entry(i, rel))
        })
        .collect()
}

pub fn write_synthetic_corpus(
    dir: &Path,
    spec: &DomainPairSpec,
    opts: &CorpusOptions,
) -> Result<(CorpusPaths, GroundTruth)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (source, target, truth) = make_domain_pair(spec)?;

    let mut train = write_maps(dir, "maps", "source", &source.maps, |i, path| {
        ManifestEntry {
            path,
            label: Some(source.labels[i]),
            domain: Domain::Source,
            occlusion: None,
        }
    })?;
    train.extend(write_maps(
        dir,
        "maps",
        "target",
        &target.maps,
        |_, path| ManifestEntry {
            path,
            label: None,
            domain: Domain::Target,
            occlusion: None,
        },
    )?);
    let train_manifest = dir.join("train.json");
    save_manifest(
        &train_manifest,
        &DatasetManifest::new(spec.dim, spec.height, spec.width, train),
    )?;

    let q = &truth
        .target
        .occlusion
        .as_ref()
        .ok_or_else(|| Error::Invariant("planted target model has no occlusion model".into()))?
        .background;
    let heldout = sample_heldout(&truth, opts.eval_per_class, spec.seed)?;
    let mut eval = Vec::new();
    for (li, level) in OcclusionLevel::ALL.into_iter().enumerate() {
        let seed = spec.seed.wrapping_add(0x0CC1_0000 + li as u64);
        let maps: Vec<FeatureMap> = occlude_maps(&heldout.maps, Occlusion::Level(level), q, seed)?
            .into_iter()
            .map(|(fm, _)| fm)
            .collect();
        eval.extend(write_maps(dir, "eval", level.name(), &maps, |i, path| {
            ManifestEntry {
                path,
                label: Some(heldout.labels[i]),
                domain: Domain::Target,
                occlusion: Some(level),
            }
        })?);
    }
    let eval_manifest = dir.join("eval.json");
    save_manifest(
        &eval_manifest,
        &DatasetManifest::new(spec.dim, spec.height, spec.width, eval),
    )?;

    let background = dir.join("background.ugtf");
    let rows = sample_mixture(q, opts.background_samples, spec.seed);
    let data: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
    write_tensor(&background, &Tensor::new(vec![rows.len(), spec.dim], data)?)?;

    let config = dir.join("pipeline.json");
    let cfg = PipelineConfig {
        kernels: spec.kernels,
        sigma: spec.sigma,
        mixtures: spec.mixtures,
        seed: spec.seed,
        occlusion: OcclusionConfig {
            background: Some(PathBuf::from("background.ugtf")),
            kernels: spec.background_kernels,
            ..OcclusionConfig::default()
        },
        ..PipelineConfig::default()
    };
    write_json(&config, &cfg)?;

    let truth_path = dir.join("truth.json");
    write_json(&truth_path, &truth)?;
    Ok((
        CorpusPaths {
            train_manifest,
            eval_manifest,
            config,
            background,
            truth: truth_path,
        },
        truth,
    ))
}
