//! Compositional generative classifier over feature maps.
//!
//! For class y with M spatial mixtures:
//!
//! ```text
//! log P(F | y) = log Σ_m (1/M) Π_a Σ_k α_{a,k}^{y,m} exp(σ μ_kᵀ f_a)
//! ```
//!
//! With an occlusion model each position may instead be explained by a
//! background vMF mixture Q with prior τ; the per-position choice is a max
//! (or optionally a sum) over the latent occlusion indicator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{argmax, log_add_exp, log_sum_exp};
use crate::vmf::{
    em_fit_dictionary, kmeans_clustering, likelihood_map, EmConfig, FeatureMap, FeatureSet,
    LikelihoodMap, VmfDictionary,
};

/// Default number of spatial mixtures per class.
pub const DEFAULT_MIXTURES: usize = 4;
/// Floor applied to learned α before renormalising.
pub const ALPHA_FLOOR: f64 = 1e-4;
/// Default occlusion prior τ = P(z_a = 1).
pub const DEFAULT_TAU: f64 = 0.55;

/// α_{a,k}^{y,m} for every class y, mixture m and position a.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialCoefficients {
    classes: Vec<u32>,
    mixtures: usize,
    height: usize,
    width: usize,
    kernels: usize,
    /// Flattened as [class][mixture][position][kernel].
    alpha: Vec<f64>,
}

impl SpatialCoefficients {
    pub fn new(
        classes: Vec<u32>,
        mixtures: usize,
        height: usize,
        width: usize,
        kernels: usize,
        alpha: Vec<f64>,
    ) -> Result<Self> {
        let s = Self {
            classes,
            mixtures,
            height,
            width,
            kernels,
            alpha,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty()
            || self.mixtures == 0
            || self.kernels == 0
            || self.height == 0
            || self.width == 0
        {
            return Err(Error::InvalidArgument(
                "spatial coefficients need non-empty shape".into(),
            ));
        }
        let mut sorted = self.classes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.classes.len() {
            return Err(Error::InvalidArgument("duplicate class ids".into()));
        }
        let expected = self.classes.len() * self.mixtures * self.height * self.width * self.kernels;
        if self.alpha.len() != expected {
            return Err(Error::DimMismatch(format!(
                "alpha has {} values, shape needs {expected}",
                self.alpha.len()
            )));
        }
        for row in self.alpha.chunks_exact(self.kernels) {
            if row.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
                return Err(Error::Invariant(
                    "alpha entries must be finite and non-negative".into(),
                ));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Invariant(format!("alpha row sums to {s}")));
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn mixtures(&self) -> usize {
        self.mixtures
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn kernels(&self) -> usize {
        self.kernels
    }

    pub fn class_index(&self, y: u32) -> Option<usize> {
        self.classes.iter().position(|&c| c == y)
    }

    fn offset(&self, ci: usize, m: usize, a: usize) -> usize {
        ((ci * self.mixtures + m) * self.positions() + a) * self.kernels
    }

    /// Kernel distribution at position `a` for class index `ci`, mixture `m`.
    pub fn alpha(&self, ci: usize, m: usize, a: usize) -> &[f64] {
        let o = self.offset(ci, m, a);
        &self.alpha[o..o + self.kernels]
    }

    /// All α of one class, [mixture][position][kernel].
    pub fn class_block(&self, ci: usize) -> &[f64] {
        let len = self.mixtures * self.positions() * self.kernels;
        &self.alpha[ci * len..(ci + 1) * len]
    }

    pub(crate) fn class_block_mut(&mut self, ci: usize) -> &mut [f64] {
        let len = self.mixtures * self.positions() * self.kernels;
        &mut self.alpha[ci * len..(ci + 1) * len]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.alpha
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.alpha
    }
}

/// Which way the per-position occlusion indicator is marginalised.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionRule {
    #[default]
    Max,
    Sum,
}

/// Background density Q and occlusion prior τ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionModel {
    pub background: VmfDictionary,
    pub tau: f64,
    #[serde(default)]
    pub rule: OcclusionRule,
}

impl OcclusionModel {
    pub fn new(background: VmfDictionary, tau: f64) -> Result<Self> {
        let m = Self {
            background,
            tau,
            rule: OcclusionRule::Max,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tau must lie in (0, 1), got {}",
                self.tau
            )));
        }
        self.background.validate()
    }
}

/// Dictionary + spatial coefficients (+ optional occlusion model). The
/// mixture prior is uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeModel {
    pub dictionary: VmfDictionary,
    pub spatial: SpatialCoefficients,
    pub occlusion: Option<OcclusionModel>,
}

impl GenerativeModel {
    pub fn new(
        dictionary: VmfDictionary,
        spatial: SpatialCoefficients,
        occlusion: Option<OcclusionModel>,
    ) -> Result<Self> {
        let m = Self {
            dictionary,
            spatial,
            occlusion,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.dictionary.validate()?;
        self.spatial.validate()?;
        if self.dictionary.len() != self.spatial.kernels() {
            return Err(Error::DimMismatch(format!(
                "dictionary has {} kernels, spatial coefficients {}",
                self.dictionary.len(),
                self.spatial.kernels()
            )));
        }
        if let Some(occ) = &self.occlusion {
            occ.validate()?;
            if occ.background.dim() != self.dictionary.dim() {
                return Err(Error::DimMismatch(
                    "background dim differs from model dim".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> &[u32] {
        self.spatial.classes()
    }

    pub(crate) fn check_map(&self, fm: &FeatureMap) -> Result<()> {
        if fm.dim() != self.dictionary.dim()
            || fm.height() != self.spatial.height()
            || fm.width() != self.spatial.width()
        {
            return Err(Error::DimMismatch(format!(
                "map {}x{}x{} vs model {}x{}x{}",
                fm.height(),
                fm.width(),
                fm.dim(),
                self.spatial.height(),
                self.spatial.width(),
                self.dictionary.dim()
            )));
        }
        Ok(())
    }

    fn class_idx(&self, y: u32) -> Result<usize> {
        self.spatial
            .class_index(y)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown class id {y}")))
    }
}

/// Per-position occlusion indicators (true = occluded).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionMask {
    pub height: usize,
    pub width: usize,
    pub occluded: Vec<bool>,
}

impl OcclusionMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            occluded: vec![false; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.occluded.iter().filter(|&&z| z).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.occluded.len() as f64
    }

    /// Intersection over union; two empty masks have IoU 1.
    pub fn iou(&self, other: &OcclusionMask) -> f64 {
        let inter = self
            .occluded
            .iter()
            .zip(&other.occluded)
            .filter(|(a, b)| **a && **b)
            .count();
        let union = self
            .occluded
            .iter()
            .zip(&other.occluded)
            .filter(|(a, b)| **a || **b)
            .count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// `σ μ_kᵀ f_a` for every position and kernel, position-major.
pub(crate) fn kernel_scores(fm: &FeatureMap, dict: &VmfDictionary) -> Vec<f64> {
    let k = dict.len();
    let mut out = vec![0.0; fm.positions() * k];
    for (row, f) in out.chunks_exact_mut(k).zip(fm.vectors()) {
        dict.scores_into(f, row);
    }
    out
}

/// `log Σ_k α_k exp(s_k)`.
#[inline]
pub(crate) fn position_log_likelihood(alpha: &[f64], scores: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (a, s) in alpha.iter().zip(scores) {
        if *a > 0.0 {
            max = max.max(a.ln() + s);
        }
    }
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = alpha
        .iter()
        .zip(scores)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, s)| (a.ln() + s - max).exp())
        .sum();
    max + sum.ln()
}

/// Σ_a log P_a(f_a | y, m) for every mixture of class index `ci`.
pub(crate) fn mixture_log_likelihoods(
    model: &GenerativeModel,
    scores: &[f64],
    ci: usize,
) -> Vec<f64> {
    let sp = &model.spatial;
    let k = sp.kernels();
    (0..sp.mixtures())
        .map(|m| {
            (0..sp.positions())
                .map(|a| position_log_likelihood(sp.alpha(ci, m, a), &scores[a * k..(a + 1) * k]))
                .sum()
        })
        .collect()
}

fn class_score_from(model: &GenerativeModel, scores: &[f64], ci: usize) -> f64 {
    let per_mix = mixture_log_likelihoods(model, scores, ci);
    log_sum_exp(&per_mix) - (model.spatial.mixtures() as f64).ln()
}

/// `log P(F | y)` with a uniform mixture prior.
pub fn class_log_likelihood(fm: &FeatureMap, model: &GenerativeModel, y: u32) -> Result<f64> {
    model.check_map(fm)?;
    let ci = model.class_idx(y)?;
    let scores = kernel_scores(fm, &model.dictionary);
    Ok(class_score_from(model, &scores, ci))
}

fn background_scores(fm: &FeatureMap, occ: &OcclusionModel) -> Vec<f64> {
    fm.vectors()
        .map(|f| occ.background.log_mixture_density(f))
        .collect()
}

fn occluded_from(
    model: &GenerativeModel,
    occ: &OcclusionModel,
    scores: &[f64],
    background: &[f64],
    ci: usize,
) -> (f64, OcclusionMask) {
    let sp = &model.spatial;
    let k = sp.kernels();
    let log_obj = (1.0 - occ.tau).ln();
    let log_occ = occ.tau.ln();
    let mut per_mix = Vec::with_capacity(sp.mixtures());
    let mut masks = Vec::with_capacity(sp.mixtures());
    for m in 0..sp.mixtures() {
        let mut total = 0.0;
        let mut mask = vec![false; sp.positions()];
        for a in 0..sp.positions() {
            let fg =
                log_obj + position_log_likelihood(sp.alpha(ci, m, a), &scores[a * k..(a + 1) * k]);
            let bg = log_occ + background[a];
            mask[a] = bg > fg;
            total += match occ.rule {
                OcclusionRule::Max => fg.max(bg),
                OcclusionRule::Sum => log_add_exp(fg, bg),
            };
        }
        per_mix.push(total);
        masks.push(mask);
    }
    let best = argmax(&per_mix);
    let ll = log_sum_exp(&per_mix) - (sp.mixtures() as f64).ln();
    let mask = OcclusionMask {
        height: sp.height(),
        width: sp.width(),
        occluded: masks.swap_remove(best),
    };
    (ll, mask)
}

/// Occlusion-aware `log P(F | y)` and the occlusion mask of the best mixture.
/// Ties between object and background resolve to unoccluded.
pub fn occluded_log_likelihood(
    fm: &FeatureMap,
    model: &GenerativeModel,
    y: u32,
) -> Result<(f64, OcclusionMask)> {
    model.check_map(fm)?;
    let occ = model
        .occlusion
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("model has no occlusion model".into()))?;
    let ci = model.class_idx(y)?;
    let scores = kernel_scores(fm, &model.dictionary);
    let background = background_scores(fm, occ);
    Ok(occluded_from(model, occ, &scores, &background, ci))
}

/// Outcome of classifying one map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: u32,
    /// Log scores aligned with `GenerativeModel::classes()`.
    pub scores: Vec<f64>,
    /// Occlusion mask under the predicted class, when occlusion-aware.
    pub mask: Option<OcclusionMask>,
}

impl Classification {
    /// Softmax of the class scores.
    pub fn probabilities(&self) -> Vec<f64> {
        let mut p = self.scores.clone();
        crate::math::softmax_in_place(&mut p);
        p
    }
}

/// `argmax_y log P(F | y)`; ties go to the lowest class id.
pub fn classify(
    fm: &FeatureMap,
    model: &GenerativeModel,
    use_occlusion: bool,
) -> Result<Classification> {
    model.check_map(fm)?;
    let scores = kernel_scores(fm, &model.dictionary);
    let classes = model.classes();
    let (class_scores, masks): (Vec<f64>, Vec<Option<OcclusionMask>>) = if use_occlusion {
        let occ = model
            .occlusion
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model has no occlusion model".into()))?;
        let background = background_scores(fm, occ);
        (0..classes.len())
            .map(|ci| {
                let (s, m) = occluded_from(model, occ, &scores, &background, ci);
                (s, Some(m))
            })
            .unzip()
    } else {
        (
            (0..classes.len())
                .map(|ci| class_score_from(model, &scores, ci))
                .collect(),
            vec![None; classes.len()],
        )
    };
    if class_scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("class score".into()));
    }
    let mut best = 0;
    for ci in 1..classes.len() {
        let better = class_scores[ci] > class_scores[best]
            || (class_scores[ci] == class_scores[best] && classes[ci] < classes[best]);
        if better {
            best = ci;
        }
    }
    let mut masks = masks;
    Ok(Classification {
        label: classes[best],
        scores: class_scores,
        mask: masks.swap_remove(best),
    })
}

/// Classifies many maps in parallel; output order follows input order.
pub fn classify_all(
    maps: &[FeatureMap],
    model: &GenerativeModel,
    use_occlusion: bool,
) -> Result<Vec<Classification>> {
    maps.par_iter()
        .map(|fm| classify(fm, model, use_occlusion))
        .collect()
}

/// Groups one class's likelihood maps into `m` spatial mixtures with
/// spherical k-means on their vectorised, L2-normalised per-position
/// posteriors.
pub fn assign_mixtures(maps: &[LikelihoodMap], m: usize, seed: u64) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one mixture".into()));
    }
    if maps.len() < m {
        return Err(Error::InvalidArgument(format!(
            "{} maps cannot fill {m} mixtures",
            maps.len()
        )));
    }
    let first = &maps[0];
    if maps.iter().any(|l| {
        l.height() != first.height()
            || l.width() != first.width()
            || l.channels() != first.channels()
    }) {
        return Err(Error::DimMismatch("likelihood maps differ in shape".into()));
    }
    if m == 1 {
        return Ok(vec![0; maps.len()]);
    }
    let dim = first.log_values().len();
    let mut data = Vec::with_capacity(maps.len() * dim);
    for l in maps {
        let mut v = l.posteriors();
        if !crate::math::normalize(&mut v) {
            return Err(Error::NonFinite("likelihood map has no mass".into()));
        }
        data.extend_from_slice(&v);
    }
    let vectors = FeatureSet::new(dim, data)?;
    Ok(kmeans_clustering(&vectors, m, seed, 3)?.assignments)
}

pub(crate) fn class_seed(seed: u64, class: u32) -> u64 {
    seed ^ (u64::from(class) + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Learns α for one class: group its maps into mixtures, then take the mean
/// kernel posterior per position, floored at [`ALPHA_FLOOR`] and
/// renormalised. `out` is laid out [mixture][position][kernel].
pub(crate) fn fit_class_block(
    maps: &[&FeatureMap],
    dict: &VmfDictionary,
    mixtures: usize,
    seed: u64,
    out: &mut [f64],
) -> Result<()> {
    let lmaps: Vec<LikelihoodMap> = maps
        .par_iter()
        .map(|fm| likelihood_map(fm, dict))
        .collect::<Result<_>>()?;
    let assignment = assign_mixtures(&lmaps, mixtures, seed)?;
    let posteriors: Vec<Vec<f64>> = lmaps.iter().map(LikelihoodMap::posteriors).collect();
    let k = dict.len();
    let len = posteriors[0].len();
    out.iter_mut().for_each(|x| *x = 0.0);
    let mut counts = vec![0usize; mixtures];
    for (p, &m) in posteriors.iter().zip(&assignment) {
        counts[m] += 1;
        for (o, v) in out[m * len..(m + 1) * len].iter_mut().zip(p) {
            *o += v;
        }
    }
    for m in 0..mixtures {
        let c = counts[m].max(1) as f64;
        out[m * len..(m + 1) * len].iter_mut().for_each(|x| *x /= c);
    }
    for row in out.chunks_exact_mut(k) {
        for x in row.iter_mut() {
            *x = x.max(ALPHA_FLOOR);
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    Ok(())
}

/// Learns spatial coefficients from labeled maps: per class, group maps into
/// mixtures, then set α to the mean kernel posterior at each position.
pub fn fit_spatial_coefficients(
    maps: &[FeatureMap],
    labels: &[u32],
    dict: &VmfDictionary,
    mixtures: usize,
    seed: u64,
) -> Result<SpatialCoefficients> {
    if maps.is_empty() {
        return Err(Error::InvalidArgument("no feature maps".into()));
    }
    if maps.len() != labels.len() {
        return Err(Error::DimMismatch(format!(
            "{} maps but {} labels",
            maps.len(),
            labels.len()
        )));
    }
    let first = &maps[0];
    if first.dim() != dict.dim() || maps.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::DimMismatch(
            "feature maps must share one shape matching the dictionary".into(),
        ));
    }
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();

    let k = dict.len();
    let block = mixtures * first.positions() * k;
    let mut alpha = vec![0.0; classes.len() * block];
    for (ci, &y) in classes.iter().enumerate() {
        let members: Vec<&FeatureMap> = maps
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == y)
            .map(|(m, _)| m)
            .collect();
        if members.len() < mixtures {
            return Err(Error::InvalidArgument(format!(
                "class {y} has {} maps, fewer than {mixtures} mixtures",
                members.len()
            )));
        }
        fit_class_block(
            &members,
            dict,
            mixtures,
            class_seed(seed, y),
            &mut alpha[ci * block..(ci + 1) * block],
        )?;
    }
    SpatialCoefficients::new(classes, mixtures, first.height(), first.width(), k, alpha)
}

/// Background density Q fitted by EM on non-object features.
pub fn fit_background_model(
    background: &FeatureSet,
    k: usize,
    sigma: f64,
    cfg: &EmConfig,
) -> Result<VmfDictionary> {
    Ok(em_fit_dictionary(background, k, sigma, cfg)?.0)
}
