//! Planted source/target domain pairs with known kernels, spatial templates
//! and per-position kernel identities, plus feature-level occlusion and an
//! enumeration-based likelihood used as an independent oracle.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{
    GenerativeModel, OcclusionMask, OcclusionModel, OcclusionRule, SpatialCoefficients, DEFAULT_TAU,
};
use crate::math::{dot, normalize};
use crate::vmf::{FeatureMap, VmfDictionary};

/// Kernels drawn for a planted pair keep pairwise cosine at or below this,
/// so every planted cluster is identifiable.
pub const MAX_PLANTED_COSINE: f64 = 0.5;
const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainPairSpec {
    pub n_classes: usize,
    pub kernels: usize,
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub mixtures: usize,
    pub sigma: f64,
    pub shared_kernel_fraction: f64,
    /// Rotation (radians) applied to the non-shared kernels in the target.
    pub shift_angle: f64,
    pub maps_per_class_source: usize,
    pub maps_per_class_target: usize,
    pub seed: u64,
    /// Kernels of the background density used for occlusion.
    pub background_kernels: usize,
    /// Symmetric Dirichlet concentration of the spatial templates.
    pub template_concentration: f64,
    /// Weight of the class-specific draw in every template; the remainder
    /// comes from a base template shared by all classes (per mixture and
    /// position). 1 makes classes independent.
    pub class_specificity: f64,
}

impl Default for DomainPairSpec {
    fn default() -> Self {
        Self {
            n_classes: 3,
            kernels: 24,
            dim: 16,
            height: 7,
            width: 7,
            mixtures: 2,
            sigma: 30.0,
            shared_kernel_fraction: 0.5,
            shift_angle: PI / 3.0,
            maps_per_class_source: 200,
            maps_per_class_target: 200,
            seed: 0,
            background_kernels: 8,
            template_concentration: 0.3,
            class_specificity: 1.0,
        }
    }
}

impl DomainPairSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_classes", self.n_classes),
            ("kernels", self.kernels),
            ("dim", self.dim),
            ("height", self.height),
            ("width", self.width),
            ("mixtures", self.mixtures),
            ("background_kernels", self.background_kernels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.shared_kernel_fraction) {
            return Err(Error::InvalidArgument(format!(
                "shared_kernel_fraction must lie in [0, 1], got {}",
                self.shared_kernel_fraction
            )));
        }
        if !(0.0..=PI).contains(&self.shift_angle) {
            return Err(Error::InvalidArgument(format!(
                "shift_angle must lie in [0, pi], got {}",
                self.shift_angle
            )));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidArgument(
                "sigma must be positive and finite".into(),
            ));
        }
        if !(self.class_specificity > 0.0 && self.class_specificity <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "class_specificity must lie in (0, 1], got {}",
                self.class_specificity
            )));
        }
        if !(self.template_concentration > 0.0) {
            return Err(Error::InvalidArgument(
                "template_concentration must be positive".into(),
            ));
        }
        if self.dim < 2 && self.shared_count() < self.kernels {
            return Err(Error::InvalidArgument(
                "rotating kernels needs dim >= 2".into(),
            ));
        }
        Ok(())
    }

    /// `⌊K · shared_kernel_fraction⌋`.
    pub fn shared_count(&self) -> usize {
        (self.kernels as f64 * self.shared_kernel_fraction + 1e-9).floor() as usize
    }
}

/// Where a sampled map came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub class: u32,
    pub mixture: usize,
    /// Kernel drawn at each position.
    pub kernels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub maps: Vec<FeatureMap>,
    /// True class of every map (withheld from training for the target).
    pub labels: Vec<u32>,
    pub records: Vec<GenerationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub source: GenerativeModel,
    pub target: GenerativeModel,
    /// Kernel indices identical in both domains, ascending.
    pub shared: Vec<usize>,
    /// Remarks such as rounding of the shared-kernel count.
    pub notes: Vec<String>,
}

impl GroundTruth {
    /// Kernel indices rotated in the target domain, ascending.
    pub fn shifted(&self) -> Vec<usize> {
        (0..self.source.dictionary.len())
            .filter(|k| !self.shared.contains(k))
            .collect()
    }
}

fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if normalize(&mut v) {
            return v;
        }
    }
}

fn separated(v: &[f64], others: &[Vec<f64>]) -> bool {
    others.iter().all(|o| dot(v, o) <= MAX_PLANTED_COSINE)
}

fn draw_separated(dim: usize, taken: &[Vec<f64>], rng: &mut impl Rng) -> Vec<f64> {
    let mut v = random_unit(dim, rng);
    for _ in 0..MAX_REJECTIONS {
        if separated(&v, taken) {
            return v;
        }
        v = random_unit(dim, rng);
    }
    v
}

/// Unit vector orthogonal to `mu`, uniform on that great sphere.
fn random_orthogonal(mu: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..mu.len()).map(|_| rng.sample(StandardNormal)).collect();
        let c = dot(&v, mu);
        v.iter_mut().zip(mu).for_each(|(x, m)| *x -= c * m);
        if normalize(&mut v) {
            return v;
        }
    }
}

/// `cos θ · μ + sin θ · v` for a random unit `v ⟂ μ`, redrawn (bounded
/// attempts) until it is separated from `taken`.
fn rotate_separated(mu: &[f64], angle: f64, taken: &[Vec<f64>], rng: &mut impl Rng) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    let mut best = None;
    for _ in 0..MAX_REJECTIONS {
        let v = random_orthogonal(mu, rng);
        let mut r: Vec<f64> = mu.iter().zip(&v).map(|(m, x)| c * m + s * x).collect();
        normalize(&mut r);
        if separated(&r, taken) {
            return r;
        }
        best.get_or_insert(r);
    }
    best.expect("at least one attempt")
}

fn dirichlet(k: usize, concentration: f64, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    loop {
        let mut g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let s: f64 = g.iter().sum();
        if s > 0.0 && s.is_finite() {
            g.iter_mut().for_each(|x| *x /= s);
            return g;
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_MODEL: u64 = 0;
const STREAM_SOURCE: u64 = 1 << 40;
const STREAM_TARGET: u64 = 2 << 40;
const STREAM_HELDOUT: u64 = 3 << 40;
const STREAM_BACKGROUND: u64 = 4 << 40;

/// Builds a planted source/target pair and samples both datasets.
pub fn make_domain_pair(
    spec: &DomainPairSpec,
) -> Result<(SyntheticDataset, SyntheticDataset, GroundTruth)> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, STREAM_MODEL);
    let (k, d) = (spec.kernels, spec.dim);

    let mut source_kernels: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let v = draw_separated(d, &source_kernels, &mut rng);
        source_kernels.push(v);
    }

    let n_shared = spec.shared_count();
    let mut notes = Vec::new();
    let exact = k as f64 * spec.shared_kernel_fraction;
    if (exact - n_shared as f64).abs() > 1e-9 {
        notes.push(format!(
            "K * shared_kernel_fraction = {exact} rounded down to {n_shared}"
        ));
    }
    let mut order: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut shared: Vec<usize> = order[..n_shared].to_vec();
    shared.sort_unstable();

    // Rotated kernels stay separated from the rest of the target set only;
    // they may land near a source kernel they do not descend from.
    let mut target_kernels = source_kernels.clone();
    let mut taken: Vec<Vec<f64>> = shared.iter().map(|&i| source_kernels[i].clone()).collect();
    for kk in 0..k {
        if shared.binary_search(&kk).is_ok() || spec.shift_angle == 0.0 {
            continue;
        }
        let r = rotate_separated(&source_kernels[kk], spec.shift_angle, &taken, &mut rng);
        target_kernels[kk] = r.clone();
        taken.push(r);
    }
    if spec.shift_angle == 0.0 {
        taken = source_kernels.clone();
    }

    let mut background = Vec::with_capacity(spec.background_kernels);
    for _ in 0..spec.background_kernels {
        let mut all = source_kernels.clone();
        all.extend(taken.iter().cloned());
        all.extend(background.iter().cloned());
        background.push(draw_separated(d, &all, &mut rng));
    }

    let n_pos = spec.height * spec.width;
    let base: Vec<Vec<f64>> = (0..spec.mixtures * n_pos)
        .map(|_| dirichlet(k, spec.template_concentration, &mut rng))
        .collect();
    let lambda = spec.class_specificity;
    let mut alpha = Vec::with_capacity(spec.n_classes * spec.mixtures * n_pos * k);
    for _ in 0..spec.n_classes {
        for shared_row in &base {
            let own = dirichlet(k, spec.template_concentration, &mut rng);
            alpha.extend(
                own.iter()
                    .zip(shared_row)
                    .map(|(o, b)| lambda * o + (1.0 - lambda) * b),
            );
        }
    }
    let classes: Vec<u32> = (0..spec.n_classes as u32).collect();
    let spatial =
        SpatialCoefficients::new(classes, spec.mixtures, spec.height, spec.width, k, alpha)?;

    let q = VmfDictionary::uniform(d, spec.sigma, background.concat())?;
    let occlusion = OcclusionModel {
        background: q,
        tau: DEFAULT_TAU,
        rule: OcclusionRule::Max,
    };
    let source = GenerativeModel::new(
        VmfDictionary::uniform(d, spec.sigma, source_kernels.concat())?,
        spatial.clone(),
        Some(occlusion.clone()),
    )?;
    let target = GenerativeModel::new(
        VmfDictionary::uniform(d, spec.sigma, target_kernels.concat())?,
        spatial,
        Some(occlusion),
    )?;

    let source_data = sample_dataset(
        &source,
        spec.maps_per_class_source,
        spec.seed,
        STREAM_SOURCE,
    )?;
    let target_data = sample_dataset(
        &target,
        spec.maps_per_class_target,
        spec.seed,
        STREAM_TARGET,
    )?;
    let truth = GroundTruth {
        source,
        target,
        shared,
        notes,
    };
    Ok((source_data, target_data, truth))
}

/// Samples `per_class` maps per class, mixtures drawn uniformly. Map `i`
/// uses its own rng stream so the result does not depend on scheduling.
pub fn sample_dataset(
    model: &GenerativeModel,
    per_class: usize,
    seed: u64,
    stream: u64,
) -> Result<SyntheticDataset> {
    let classes = model.classes().to_vec();
    let mixtures = model.spatial.mixtures();
    let n = classes.len() * per_class;
    let sampled: Vec<(FeatureMap, GenerationRecord)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, stream + i as u64);
            let y = classes[i / per_class];
            let m = rng.random_range(0..mixtures);
            sample_feature_map(model, y, m, &mut rng)
        })
        .collect::<Result<_>>()?;
    let labels = sampled.iter().map(|(_, r)| r.class).collect();
    let (maps, records) = sampled.into_iter().unzip();
    Ok(SyntheticDataset {
        maps,
        labels,
        records,
    })
}

/// Fresh labeled target maps, independent of the training draws of
/// [`make_domain_pair`] with the same seed.
pub fn sample_heldout(
    truth: &GroundTruth,
    per_class: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    sample_dataset(&truth.target, per_class, seed, STREAM_HELDOUT)
}

/// `n` independent draws from a vMF mixture.
pub fn sample_mixture(q: &VmfDictionary, n: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, STREAM_BACKGROUND + i as u64);
            let k = categorical(q.weights(), &mut rng);
            sample_vmf(q.kernel(k), q.concentration(), &mut rng)
        })
        .collect()
}

/// Draws one direction from vMF(μ, κ) on the unit sphere (Wood's rejection
/// scheme; the two-point case D = 1 is handled directly).
pub fn sample_vmf(mu: &[f64], kappa: f64, rng: &mut impl Rng) -> Vec<f64> {
    let d = mu.len();
    if d == 1 {
        // P(+μ) = e^κ / (e^κ + e^−κ)
        let p_plus = 1.0 / (1.0 + (-2.0 * kappa).exp());
        let s = if rng.random::<f64>() < p_plus {
            1.0
        } else {
            -1.0
        };
        return vec![s * mu[0]];
    }
    if kappa == 0.0 {
        return random_unit(d, rng);
    }
    let dm1 = (d - 1) as f64;
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("positive shape");
    let w = loop {
        let z: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rng.random();
        if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
            break w;
        }
    };
    let v = random_orthogonal(mu, rng);
    let s = (1.0 - w * w).max(0.0).sqrt();
    let mut f: Vec<f64> = mu.iter().zip(&v).map(|(m, x)| w * m + s * x).collect();
    normalize(&mut f);
    f
}

fn categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = p.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in p.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    p.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Samples a map from class `y`, mixture `m`: at each position a kernel is
/// drawn from α and the feature from that kernel's vMF.
pub fn sample_feature_map(
    model: &GenerativeModel,
    y: u32,
    m: usize,
    rng: &mut impl Rng,
) -> Result<(FeatureMap, GenerationRecord)> {
    model.validate()?;
    let sp = &model.spatial;
    let ci = sp
        .class_index(y)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown class id {y}")))?;
    if m >= sp.mixtures() {
        return Err(Error::InvalidArgument(format!("mixture {m} out of range")));
    }
    let dict = &model.dictionary;
    let mut data = Vec::with_capacity(sp.positions() * dict.dim());
    let mut kernels = Vec::with_capacity(sp.positions());
    for a in 0..sp.positions() {
        let k = categorical(sp.alpha(ci, m, a), rng);
        data.extend(sample_vmf(dict.kernel(k), dict.concentration(), rng));
        kernels.push(k);
    }
    let fm = FeatureMap::new(sp.height(), sp.width(), dict.dim(), data)?;
    Ok((
        fm,
        GenerationRecord {
            class: y,
            mixture: m,
            kernels,
        },
    ))
}

/// Occlusion levels by fraction of positions covered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OcclusionLevel {
    L0,
    L1,
    L2,
    L3,
}

impl OcclusionLevel {
    pub const ALL: [OcclusionLevel; 4] = [Self::L0, Self::L1, Self::L2, Self::L3];

    /// Range of covered fractions.
    pub fn range(self) -> (f64, f64) {
        match self {
            Self::L0 => (0.0, 0.0),
            Self::L1 => (0.2, 0.4),
            Self::L2 => (0.4, 0.6),
            Self::L3 => (0.6, 0.8),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::L0 => "L0",
            Self::L1 => "L1",
            Self::L2 => "L2",
            Self::L3 => "L3",
        }
    }
}

impl std::fmt::Display for OcclusionLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OcclusionLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown occlusion level {s:?}")))
    }
}

/// How much of a map to occlude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Occlusion {
    Level(OcclusionLevel),
    Fraction(f64),
}

/// Rectangle shapes (h, w) whose area is closest to `target` positions.
fn closest_rectangles(height: usize, width: usize, target: f64) -> Vec<(usize, usize)> {
    let mut best = f64::INFINITY;
    let mut shapes = Vec::new();
    for h in 1..=height {
        for w in 1..=width {
            let gap = ((h * w) as f64 - target).abs();
            if gap < best - 1e-12 {
                best = gap;
                shapes.clear();
            }
            if (gap - best).abs() <= 1e-12 {
                shapes.push((h, w));
            }
        }
    }
    shapes
}

/// Replaces a contiguous rectangle of positions, sized as close as possible
/// to the requested fraction, with samples from the background density `q`.
pub fn inject_occlusion(
    fm: &FeatureMap,
    occlusion: Occlusion,
    q: &VmfDictionary,
    rng: &mut impl Rng,
) -> Result<(FeatureMap, OcclusionMask)> {
    if q.dim() != fm.dim() {
        return Err(Error::DimMismatch(
            "background dim differs from the map".into(),
        ));
    }
    let fraction = match occlusion {
        Occlusion::Level(OcclusionLevel::L0) => 0.0,
        Occlusion::Level(level) => {
            let (lo, hi) = level.range();
            rng.random_range(lo..hi)
        }
        Occlusion::Fraction(f) => {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::InvalidArgument(format!(
                    "occlusion fraction must lie in [0, 1), got {f}"
                )));
            }
            f
        }
    };
    let (h, w) = (fm.height(), fm.width());
    let mut mask = OcclusionMask::empty(h, w);
    if fraction == 0.0 {
        return Ok((fm.clone(), mask));
    }
    let shapes = closest_rectangles(h, w, fraction * (h * w) as f64);
    let (rh, rw) = shapes[rng.random_range(0..shapes.len())];
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    let mut out = fm.clone();
    for r in top..top + rh {
        for c in left..left + rw {
            let a = r * w + c;
            let k = categorical(q.weights(), rng);
            out.set_vector(a, &sample_vmf(q.kernel(k), q.concentration(), rng))?;
            mask.occluded[a] = true;
        }
    }
    Ok((out, mask))
}

/// Occludes every map with its own rng stream.
pub fn occlude_maps(
    maps: &[FeatureMap],
    occlusion: Occlusion,
    q: &VmfDictionary,
    seed: u64,
) -> Result<Vec<(FeatureMap, OcclusionMask)>> {
    maps.par_iter()
        .enumerate()
        .map(|(i, fm)| inject_occlusion(fm, occlusion, q, &mut stream_rng(seed, i as u64)))
        .collect()
}

/// Largest map (in positions) accepted by [`brute_force_class_likelihood`].
pub const BRUTE_FORCE_MAX_POSITIONS: usize = 9;

/// `log P(F | y)` by explicit enumeration in probability space: products
/// over positions of Σ_k α·exp(σ μᵀf), averaged over mixtures. With
/// `use_occlusion` every one of the 2^(H·W) masks is enumerated per mixture
/// and combined by the model's occlusion rule.
pub fn brute_force_class_likelihood(
    fm: &FeatureMap,
    model: &GenerativeModel,
    y: u32,
    use_occlusion: bool,
) -> Result<f64> {
    let sp = &model.spatial;
    let n = fm.height() * fm.width();
    if n > BRUTE_FORCE_MAX_POSITIONS {
        return Err(Error::InvalidArgument(format!(
            "{n} positions exceed the enumeration limit of {BRUTE_FORCE_MAX_POSITIONS}"
        )));
    }
    if fm.dim() != model.dictionary.dim() || fm.height() != sp.height() || fm.width() != sp.width()
    {
        return Err(Error::DimMismatch("map does not match the model".into()));
    }
    let ci = sp
        .class_index(y)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown class id {y}")))?;
    let dict = &model.dictionary;
    let sigma = dict.concentration();

    let object = |m: usize, a: usize| -> f64 {
        let f = fm.vector(a);
        let alpha = sp.alpha(ci, m, a);
        let mut p = 0.0;
        for k in 0..dict.len() {
            let mut cos = 0.0;
            for (x, u) in f.iter().zip(dict.kernel(k)) {
                cos += x * u;
            }
            p += alpha[k] * (sigma * cos).exp();
        }
        p
    };

    let occ = if use_occlusion {
        Some(
            model
                .occlusion
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("model has no occlusion model".into()))?,
        )
    } else {
        None
    };

    let mut total = 0.0;
    for m in 0..sp.mixtures() {
        let p_m = match occ {
            None => (0..n).map(|a| object(m, a)).product::<f64>(),
            Some(occ) => {
                let q = &occ.background;
                let background = |a: usize| -> f64 {
                    let f = fm.vector(a);
                    let mut p = 0.0;
                    for j in 0..q.len() {
                        let mut cos = 0.0;
                        for (x, u) in f.iter().zip(q.kernel(j)) {
                            cos += x * u;
                        }
                        p += q.weights()[j] * (q.concentration() * cos).exp();
                    }
                    p
                };
                let mut acc: f64 = 0.0;
                for bits in 0u32..(1 << n) {
                    let mut p = 1.0;
                    for a in 0..n {
                        p *= if bits >> a & 1 == 1 {
                            occ.tau * background(a)
                        } else {
                            (1.0 - occ.tau) * object(m, a)
                        };
                    }
                    acc = match occ.rule {
                        OcclusionRule::Max => acc.max(p),
                        OcclusionRule::Sum => acc + p,
                    };
                }
                acc
            }
        };
        total += p_m;
    }
    Ok((total / sp.mixtures() as f64).ln())
}

/// Maximum-weight perfect assignment of rows to columns (rows ≤ columns).
/// Returns the column assigned to each row.
pub fn hungarian_max(weights: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = weights.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = weights[0].len();
    if weights.iter().any(|r| r.len() != m) || n > m {
        return Err(Error::DimMismatch(
            "assignment needs a rectangular matrix with rows <= columns".into(),
        ));
    }
    if weights.iter().flatten().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("assignment weight".into()));
    }
    // Shortest augmenting paths with potentials on the cost −w, 1-based.
    let cost = |i: usize, j: usize| -weights[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

/// Matches every planted kernel to a distinct estimated kernel maximising
/// total cosine. Returns `(estimated index, cosine)` per planted kernel.
pub fn match_kernels(
    planted: &VmfDictionary,
    estimated: &VmfDictionary,
) -> Result<Vec<(usize, f64)>> {
    if planted.dim() != estimated.dim() {
        return Err(Error::DimMismatch("dictionaries differ in dim".into()));
    }
    let cos: Vec<Vec<f64>> = (0..planted.len())
        .map(|i| {
            (0..estimated.len())
                .map(|j| dot(planted.kernel(i), estimated.kernel(j)))
                .collect()
        })
        .collect();
    let assignment = hungarian_max(&cos)?;
    Ok(assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| (j, cos[i][j]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hungarian_finds_the_optimal_permutation() {
        let w = vec![
            vec![1.0, 5.0, 2.0],
            vec![4.0, 6.0, 1.0],
            vec![3.0, 2.0, 9.0],
        ];
        // greedy on row 1 would take column 1; the optimum is (1, 0, 2) with total 18
        assert_eq!(hungarian_max(&w).unwrap(), vec![1, 0, 2]);
    }

    #[test]
    fn hungarian_handles_rectangular_input() {
        let w = vec![vec![0.0, 0.0, 1.0], vec![0.0, 2.0, 0.0]];
        assert_eq!(hungarian_max(&w).unwrap(), vec![2, 1]);
        assert!(hungarian_max(&[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn closest_rectangle_areas_on_seven_by_seven() {
        for (h, w) in closest_rectangles(7, 7, 9.8) {
            assert_eq!(h * w, 10);
        }
        for (h, w) in closest_rectangles(7, 7, 19.6) {
            assert_eq!(h * w, 20);
        }
    }

    #[test]
    fn vmf_sampler_one_dimensional_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plus = (0..2000)
            .filter(|_| sample_vmf(&[1.0], 0.5, &mut rng)[0] > 0.0)
            .count() as f64
            / 2000.0;
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((plus - expected).abs() < 0.04, "{plus} vs {expected}");
    }

    fn small_spec() -> DomainPairSpec {
        DomainPairSpec {
            kernels: 8,
            dim: 6,
            height: 3,
            width: 3,
            maps_per_class_source: 4,
            maps_per_class_target: 4,
            ..DomainPairSpec::default()
        }
    }

    #[test]
    fn zero_shift_gives_identical_domains() {
        let spec = DomainPairSpec {
            shift_angle: 0.0,
            ..small_spec()
        };
        let (_, _, truth) = make_domain_pair(&spec).unwrap();
        assert_eq!(truth.source, truth.target);
    }

    #[test]
    fn fully_shared_dictionary_is_unchanged() {
        let spec = DomainPairSpec {
            shared_kernel_fraction: 1.0,
            ..small_spec()
        };
        let (_, _, truth) = make_domain_pair(&spec).unwrap();
        let report = crate::transition::kernel_similarity_report(
            &truth.source.dictionary,
            &truth.target.dictionary,
        )
        .unwrap();
        assert!(report.cosine.iter().all(|&c| (c - 1.0).abs() < 1e-12));
        assert!(truth.shifted().is_empty());
    }

    #[test]
    fn shifted_kernels_rotate_by_the_shift_angle() {
        let spec = DomainPairSpec::default();
        let (source, _, truth) = make_domain_pair(&DomainPairSpec {
            maps_per_class_source: 1,
            maps_per_class_target: 1,
            ..spec.clone()
        })
        .unwrap();
        assert_eq!(truth.shared.len(), 12);
        assert_eq!(source.maps.len(), 3);
        for k in truth.shifted() {
            let c = dot(
                truth.source.dictionary.kernel(k),
                truth.target.dictionary.kernel(k),
            );
            assert!((c - 0.5).abs() < 1e-12, "kernel {k}: {c}");
        }
        for &k in &truth.shared {
            assert_eq!(
                truth.source.dictionary.kernel(k),
                truth.target.dictionary.kernel(k)
            );
        }
    }

    #[test]
    fn fixed_seed_reproduces_maps() {
        let (a, b, _) = make_domain_pair(&small_spec()).unwrap();
        let (c, d, _) = make_domain_pair(&small_spec()).unwrap();
        assert_eq!(a, c);
        assert_eq!(b, d);
        let (e, _, _) = make_domain_pair(&DomainPairSpec {
            seed: 1,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a.maps, e.maps);
    }

    #[test]
    fn huge_concentration_samples_the_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mu = random_unit(16, &mut rng);
        for _ in 0..100 {
            assert!(dot(&sample_vmf(&mu, 1e6, &mut rng), &mu) >= 0.999);
        }
    }

    #[test]
    fn occlusion_rectangle_sizes() {
        let spec = DomainPairSpec {
            height: 7,
            width: 7,
            ..small_spec()
        };
        let (source, _, truth) = make_domain_pair(&spec).unwrap();
        let q = &truth.source.occlusion.as_ref().unwrap().background;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fm = &source.maps[0];
        for _ in 0..200 {
            let (out, mask) =
                inject_occlusion(fm, Occlusion::Level(OcclusionLevel::L1), q, &mut rng).unwrap();
            assert!((9..=20).contains(&mask.count()), "{}", mask.count());
            for a in 0..49 {
                assert_eq!(out.vector(a) == fm.vector(a), !mask.occluded[a]);
            }
        }
        let (same, mask) = inject_occlusion(fm, Occlusion::Fraction(0.0), q, &mut rng).unwrap();
        assert_eq!(&same, fm);
        assert_eq!(mask.count(), 0);
        assert!(inject_occlusion(fm, Occlusion::Fraction(1.0), q, &mut rng).is_err());
    }

    #[test]
    fn brute_force_single_position() {
        let dict = VmfDictionary::uniform(2, 30.0, vec![1.0, 0.0]).unwrap();
        let spatial = SpatialCoefficients::new(vec![0], 1, 1, 1, 1, vec![1.0]).unwrap();
        let model = GenerativeModel::new(dict, spatial, None).unwrap();
        let fm = FeatureMap::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        assert!(
            (brute_force_class_likelihood(&fm, &model, 0, false).unwrap() - 30.0).abs() < 1e-12
        );
        assert!(brute_force_class_likelihood(&fm, &model, 0, true).is_err());
        assert!(brute_force_class_likelihood(&fm, &model, 1, false).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            DomainPairSpec {
                kernels: 0,
                ..small_spec()
            },
            DomainPairSpec {
                shared_kernel_fraction: 1.5,
                ..small_spec()
            },
            DomainPairSpec {
                shift_angle: 4.0,
                ..small_spec()
            },
            DomainPairSpec {
                class_specificity: 0.0,
                ..small_spec()
            },
        ] {
            assert!(make_domain_pair(&spec).is_err());
        }
    }

    #[test]
    fn level_names_round_trip() {
        for l in OcclusionLevel::ALL {
            assert_eq!(l.name().parse::<OcclusionLevel>().unwrap(), l);
        }
    }
}
