//! Accuracy reports by occlusion level and class.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationKind};
use crate::head::{classify_all, GenerativeModel};
use crate::io::DatasetManifest;
use crate::synth::OcclusionLevel;
use crate::vmf::FeatureMap;

pub const EVAL_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Accuracy {
    fn add(&mut self, hit: bool) {
        self.total += 1;
        self.correct += usize::from(hit);
        self.accuracy = self.correct as f64 / self.total as f64;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: OcclusionLevel,
    pub overall: Accuracy,
    pub per_class: BTreeMap<u32, Accuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: u32,
    pub use_occlusion: bool,
    pub overall: Accuracy,
    pub per_class: BTreeMap<u32, Accuracy>,
    /// Present levels in L0..L3 order.
    pub levels: Vec<LevelReport>,
}

/// Classifies every map and tallies hits. Maps without an occlusion level
/// count as L0.
pub fn evaluate_maps(
    maps: &[FeatureMap],
    labels: &[u32],
    levels: &[Option<OcclusionLevel>],
    model: &GenerativeModel,
    use_occlusion: bool,
) -> Result<EvalReport> {
    if maps.len() != labels.len() || maps.len() != levels.len() {
        return Err(Error::DimMismatch(
            "maps, labels and levels differ in length".into(),
        ));
    }
    let predictions = classify_all(maps, model, use_occlusion)?;
    let mut overall = Accuracy::default();
    let mut per_class: BTreeMap<u32, Accuracy> = BTreeMap::new();
    let mut by_level: BTreeMap<OcclusionLevel, (Accuracy, BTreeMap<u32, Accuracy>)> =
        BTreeMap::new();
    for ((p, &y), level) in predictions.iter().zip(labels).zip(levels) {
        let hit = p.label == y;
        overall.add(hit);
        per_class.entry(y).or_default().add(hit);
        let slot = by_level
            .entry(level.unwrap_or(OcclusionLevel::L0))
            .or_default();
        slot.0.add(hit);
        slot.1.entry(y).or_default().add(hit);
    }
    Ok(EvalReport {
        schema: EVAL_SCHEMA,
        use_occlusion,
        overall,
        per_class,
        levels: by_level
            .into_iter()
            .map(|(level, (overall, per_class))| LevelReport {
                level,
                overall,
                per_class,
            })
            .collect(),
    })
}

/// Evaluates every manifest entry. All entries must be labeled.
pub fn evaluate(
    manifest: &DatasetManifest,
    model: &GenerativeModel,
    use_occlusion: bool,
) -> Result<EvalReport> {
    let mut maps = Vec::with_capacity(manifest.entries.len());
    let mut labels = Vec::with_capacity(manifest.entries.len());
    let mut levels = Vec::with_capacity(manifest.entries.len());
    for (i, e) in manifest.entries.iter().enumerate() {
        let y = e.label.ok_or_else(|| {
            Error::validation(
                ValidationKind::MissingLabel,
                format!(
                    "entry {i} ({}) has no label to evaluate against",
                    e.path.display()
                ),
            )
        })?;
        maps.push(manifest.load_map(e)?);
        labels.push(y);
        levels.push(e.occlusion);
    }
    evaluate_maps(&maps, &labels, &levels, model, use_occlusion)
}

impl EvalReport {
    pub fn level(&self, level: OcclusionLevel) -> Option<&LevelReport> {
        self.levels.iter().find(|l| l.level == level)
    }

    /// Aligned text table: one row per level plus a total row, one column
    /// per class.
    pub fn to_table(&self) -> String {
        let classes: Vec<u32> = self.per_class.keys().copied().collect();
        let mut out = String::new();
        let _ = write!(out, "{:<6} {:>6} {:>8}", "level", "n", "overall");
        for c in &classes {
            let _ = write!(out, " {:>8}", format!("class {c}"));
        }
        out.push('\n');
        let row = |out: &mut String,
                   name: &str,
                   overall: &Accuracy,
                   per_class: &BTreeMap<u32, Accuracy>| {
            let _ = write!(
                out,
                "{:<6} {:>6} {:>8.4}",
                name, overall.total, overall.accuracy
            );
            for c in &classes {
                match per_class.get(c) {
                    Some(a) => {
                        let _ = write!(out, " {:>8.4}", a.accuracy);
                    }
                    None => {
                        let _ = write!(out, " {:>8}", "-");
                    }
                }
            }
            out.push('\n');
        };
        for l in &self.levels {
            row(&mut out, l.level.name(), &l.overall, &l.per_class);
        }
        row(&mut out, "all", &self.overall, &self.per_class);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::SpatialCoefficients;
    use crate::vmf::VmfDictionary;

    fn constant_model() -> GenerativeModel {
        let dict = VmfDictionary::uniform(2, 30.0, vec![1.0, 0.0]).unwrap();
        let spatial = SpatialCoefficients::new(vec![0, 1, 2], 1, 1, 1, 1, vec![1.0; 3]).unwrap();
        GenerativeModel::new(dict, spatial, None).unwrap()
    }

    #[test]
    fn constant_prediction_on_balanced_set() {
        let model = constant_model();
        let maps: Vec<FeatureMap> = (0..6)
            .map(|_| FeatureMap::new(1, 1, 2, vec![0.0, 1.0]).unwrap())
            .collect();
        let labels = [0, 1, 2, 0, 1, 2];
        let r = evaluate_maps(&maps, &labels, &[None; 6], &model, false).unwrap();
        assert!((r.overall.accuracy - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_class[&0].accuracy, 1.0);
        assert_eq!(r.per_class[&1].accuracy, 0.0);
        assert_eq!(r.levels.len(), 1);
        assert_eq!(r.levels[0].level, OcclusionLevel::L0);
    }

    #[test]
    fn levels_are_split_and_tabulated() {
        let model = constant_model();
        let maps: Vec<FeatureMap> = (0..4)
            .map(|_| FeatureMap::new(1, 1, 2, vec![1.0, 0.0]).unwrap())
            .collect();
        let levels = [
            Some(OcclusionLevel::L2),
            None,
            Some(OcclusionLevel::L0),
            Some(OcclusionLevel::L2),
        ];
        let r = evaluate_maps(&maps, &[0, 0, 1, 1], &levels, &model, false).unwrap();
        assert_eq!(r.level(OcclusionLevel::L0).unwrap().overall.total, 2);
        assert_eq!(r.level(OcclusionLevel::L2).unwrap().overall.accuracy, 0.5);
        let table = r.to_table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("level"));
        assert!(lines[3].starts_with("all"));
        let widths: Vec<usize> = lines.iter().map(|l| l.len()).collect();
        assert!(widths.iter().all(|&w| w == widths[0]));
    }
}
