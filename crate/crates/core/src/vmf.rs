//! von Mises-Fisher primitives and mixture fitting on the unit hypersphere.
//!
//! All log-densities use the unnormalised convention `log p(f | μ) = σ μᵀf`:
//! the concentration σ is shared by every kernel, so `log Z(σ)` is a constant
//! that is dropped uniformly wherever densities are compared.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{argmax, dot, is_unit, log_sum_exp, normalize};

/// Default shared concentration.
pub const DEFAULT_SIGMA: f64 = 30.0;

/// Responsibility mass below which a component counts as degenerate.
pub const DEGENERATE_MASS: f64 = 1e-12;

/// Features per parallel E-step chunk. Fixed so reductions are ordered the
/// same way regardless of thread count.
const CHUNK: usize = 512;

fn check_unit_rows(data: &[f64], dim: usize, what: &str) -> Result<()> {
    for (i, row) in data.chunks_exact(dim).enumerate() {
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{what} {i} has a non-finite entry"
            )));
        }
        if !is_unit(row) {
            return Err(Error::Invariant(format!(
                "{what} {i} has norm {} (expected 1)",
                crate::math::norm(row)
            )));
        }
    }
    Ok(())
}

/// An H×W lattice of unit-norm D-dimensional feature vectors, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature map dims must be positive, got {height}x{width}x{dim}"
            )));
        }
        if data.len() != height * width * dim {
            return Err(Error::DimMismatch(format!(
                "feature map {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                data.len()
            )));
        }
        check_unit_rows(&data, dim, "feature vector")?;
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    /// Builds a map from single-precision values, accepting vectors whose norm
    /// is within `tol` of one and renormalising them in double precision.
    pub fn from_f32(
        height: usize,
        width: usize,
        dim: usize,
        values: &[f32],
        tol: f64,
    ) -> Result<Self> {
        if values.len() != height * width * dim || dim == 0 {
            return Err(Error::DimMismatch(format!(
                "feature map {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                values.len()
            )));
        }
        let mut data: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
        for (i, row) in data.chunks_exact_mut(dim).enumerate() {
            let n = crate::math::norm(row);
            if !n.is_finite() {
                return Err(Error::NonFinite(format!(
                    "feature vector {i} is not finite"
                )));
            }
            if (n - 1.0).abs() > tol {
                return Err(Error::Invariant(format!(
                    "feature vector {i} has norm {n}, outside 1 ± {tol}"
                )));
            }
            normalize(row);
        }
        Self::new(height, width, dim, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of spatial positions, H·W.
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    /// Feature at flat position `a = row * width + col`.
    pub fn vector(&self, a: usize) -> &[f64] {
        &self.data[a * self.dim..(a + 1) * self.dim]
    }

    pub fn vectors(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Replaces the vector at position `a`; the new vector must be unit norm.
    pub fn set_vector(&mut self, a: usize, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimMismatch(format!(
                "vector of length {} written into dim {} map",
                v.len(),
                self.dim
            )));
        }
        check_unit_rows(v, self.dim, "feature vector")?;
        self.data[a * self.dim..(a + 1) * self.dim].copy_from_slice(v);
        Ok(())
    }

    pub(crate) fn same_shape(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width && self.dim == other.dim
    }
}

/// A flat list of unit-norm feature vectors (the data EM runs over).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "feature dim must be positive".into(),
            ));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::DimMismatch(format!(
                "{} values is not a multiple of dim {dim}",
                data.len()
            )));
        }
        check_unit_rows(&data, dim, "feature vector")?;
        Ok(Self { dim, data })
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimMismatch(format!(
                    "row of length {} in a dim {dim} feature set",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    /// All positions of all maps, in map order then row-major position order.
    pub fn from_maps<'a, I>(maps: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a FeatureMap>,
    {
        let mut dim = None;
        let mut data = Vec::new();
        for m in maps {
            match dim {
                None => dim = Some(m.dim),
                Some(d) if d != m.dim => {
                    return Err(Error::DimMismatch(format!(
                        "feature maps with dims {d} and {}",
                        m.dim
                    )))
                }
                _ => {}
            }
            data.extend_from_slice(&m.data);
        }
        let dim = dim.ok_or_else(|| Error::InvalidArgument("no feature maps".into()))?;
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// K unit mean directions with a shared concentration and mixing weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfDictionary {
    dim: usize,
    concentration: f64,
    kernels: Vec<f64>,
    weights: Vec<f64>,
}

impl VmfDictionary {
    /// `kernels` is K×D row-major.
    pub fn new(
        dim: usize,
        concentration: f64,
        kernels: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let d = Self {
            dim,
            concentration,
            kernels,
            weights,
        };
        d.validate()?;
        Ok(d)
    }

    /// Dictionary with uniform mixing weights.
    pub fn uniform(dim: usize, concentration: f64, kernels: Vec<f64>) -> Result<Self> {
        if dim == 0 || !kernels.len().is_multiple_of(dim) {
            return Err(Error::DimMismatch(
                "kernel matrix does not match dim".into(),
            ));
        }
        let k = kernels.len() / dim;
        Self::new(dim, concentration, kernels, vec![1.0 / k as f64; k])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidArgument(
                "dictionary dim must be positive".into(),
            ));
        }
        if self.kernels.is_empty() || !self.kernels.len().is_multiple_of(self.dim) {
            return Err(Error::DimMismatch(format!(
                "{} kernel values do not form rows of dim {}",
                self.kernels.len(),
                self.dim
            )));
        }
        let k = self.kernels.len() / self.dim;
        if self.weights.len() != k {
            return Err(Error::DimMismatch(format!(
                "{} mixing weights for {k} kernels",
                self.weights.len()
            )));
        }
        if !(self.concentration.is_finite() && self.concentration >= 0.0) {
            return Err(Error::Invariant(format!(
                "concentration must be finite and non-negative, got {}",
                self.concentration
            )));
        }
        check_unit_rows(&self.kernels, self.dim, "kernel")?;
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Invariant(
                "mixing weights must be non-negative".into(),
            ));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invariant(format!("mixing weights sum to {total}")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of kernels K.
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn concentration(&self) -> f64 {
        self.concentration
    }

    pub fn kernel(&self, k: usize) -> &[f64] {
        &self.kernels[k * self.dim..(k + 1) * self.dim]
    }

    pub fn kernels(&self) -> &[f64] {
        &self.kernels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.ln()).collect()
    }

    /// Same kernels and weights under a different concentration.
    pub fn with_concentration(&self, concentration: f64) -> Result<Self> {
        Self::new(
            self.dim,
            concentration,
            self.kernels.clone(),
            self.weights.clone(),
        )
    }

    /// Writes `σ μ_kᵀ f` for every kernel into `out`.
    pub fn scores_into(&self, f: &[f64], out: &mut [f64]) {
        for (o, mu) in out.iter_mut().zip(self.kernels.chunks_exact(self.dim)) {
            *o = self.concentration * dot(mu, f);
        }
    }

    /// `log Σ_k π_k exp(σ μ_kᵀ f)`.
    pub fn log_mixture_density(&self, f: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.len()];
        self.scores_into(f, &mut buf);
        for (b, w) in buf.iter_mut().zip(&self.weights) {
            *b += w.ln();
        }
        log_sum_exp(&buf)
    }

    pub(crate) fn kernels_mut(&mut self) -> &mut [f64] {
        &mut self.kernels
    }

    pub(crate) fn set_weights(&mut self, w: Vec<f64>) {
        self.weights = w;
    }

    pub(crate) fn same_shape(&self, other: &VmfDictionary) -> bool {
        self.dim == other.dim && self.len() == other.len()
    }
}

/// EM controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Relative log-likelihood change below which EM stops.
    pub ll_tol: f64,
    pub seed: u64,
    pub kmeans_restarts: usize,
    /// Escape local optima by split-merge moves after EM.
    pub split_merge: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            ll_tol: 1e-6,
            seed: 0,
            kmeans_restarts: 3,
            split_merge: true,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument(
                "max_iters must be at least 1".into(),
            ));
        }
        if !(self.ll_tol > 0.0) {
            return Err(Error::InvalidArgument("ll_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Per-iteration record of an EM run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmLog {
    /// Log-likelihood at the initial parameters and after every M-step.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `(iteration, kernel)` pairs re-seeded after collapsing.
    pub rescued: Vec<(usize, usize)>,
    /// Split-merge moves accepted before the final EM run.
    #[serde(default)]
    pub split_merge_moves: usize,
}

/// Per-position, per-kernel responses `π_k exp(σ μ_kᵀ f_a)`, stored as logs
/// so large concentrations stay finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodMap {
    height: usize,
    width: usize,
    channels: usize,
    log_values: Vec<f64>,
}

impl LikelihoodMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `π_k exp(σ μ_kᵀ f_a)`.
    pub fn value(&self, a: usize, k: usize) -> f64 {
        self.log_value(a, k).exp()
    }

    pub fn log_value(&self, a: usize, k: usize) -> f64 {
        self.log_values[a * self.channels + k]
    }

    pub fn log_values(&self) -> &[f64] {
        &self.log_values
    }

    /// Responses normalised over kernels at each position (the posterior
    /// `P(k | f_a)`), flattened position-major.
    pub fn posteriors(&self) -> Vec<f64> {
        let mut out = self.log_values.clone();
        for row in out.chunks_exact_mut(self.channels) {
            crate::math::softmax_in_place(row);
        }
        out
    }
}

/// Unnormalised vMF log-density `σ μᵀf`.
pub fn vmf_log_density(f: &[f64], mu: &[f64], sigma: f64) -> Result<f64> {
    if f.len() != mu.len() {
        return Err(Error::DimMismatch(format!(
            "feature dim {} vs kernel dim {}",
            f.len(),
            mu.len()
        )));
    }
    if !is_unit(f) || !is_unit(mu) {
        return Err(Error::Invariant(
            "vmf_log_density needs unit vectors".into(),
        ));
    }
    Ok(sigma * dot(mu, f))
}

/// Sufficient statistics from one E-step pass.
#[derive(Debug, Clone)]
pub(crate) struct EStep {
    pub log_likelihood: f64,
    /// Σ_i r_ik
    pub mass: Vec<f64>,
    /// Σ_i r_ik f_i, K×D
    pub moment: Vec<f64>,
    /// Σ_i r_ik (log π_k + σ μ_kᵀ f_i)
    pub component: Vec<f64>,
}

impl EStep {
    fn zeros(k: usize, d: usize) -> Self {
        Self {
            log_likelihood: 0.0,
            mass: vec![0.0; k],
            moment: vec![0.0; k * d],
            component: vec![0.0; k],
        }
    }

    fn absorb(&mut self, other: &EStep) {
        self.log_likelihood += other.log_likelihood;
        for (a, b) in self.mass.iter_mut().zip(&other.mass) {
            *a += b;
        }
        for (a, b) in self.moment.iter_mut().zip(&other.moment) {
            *a += b;
        }
        for (a, b) in self.component.iter_mut().zip(&other.component) {
            *a += b;
        }
    }
}

pub(crate) fn e_step(features: &FeatureSet, dict: &VmfDictionary) -> EStep {
    let k = dict.len();
    let d = dict.dim();
    let log_pi = dict.log_weights();
    let partials: Vec<EStep> = features
        .as_slice()
        .par_chunks(CHUNK * d)
        .map(|chunk| {
            let mut st = EStep::zeros(k, d);
            let mut buf = vec![0.0; k];
            for f in chunk.chunks_exact(d) {
                dict.scores_into(f, &mut buf);
                for (b, lp) in buf.iter_mut().zip(&log_pi) {
                    *b += lp;
                }
                let lse = log_sum_exp(&buf);
                st.log_likelihood += lse;
                for j in 0..k {
                    let r = (buf[j] - lse).exp();
                    if r == 0.0 {
                        continue;
                    }
                    st.mass[j] += r;
                    st.component[j] += r * buf[j];
                    for (m, x) in st.moment[j * d..(j + 1) * d].iter_mut().zip(f) {
                        *m += r * x;
                    }
                }
            }
            st
        })
        .collect();
    let mut total = EStep::zeros(k, d);
    for p in &partials {
        total.absorb(p);
    }
    total
}

fn check_dims(features: &FeatureSet, dict: &VmfDictionary) -> Result<()> {
    if features.dim() != dict.dim() {
        return Err(Error::DimMismatch(format!(
            "features have dim {}, dictionary has dim {}",
            features.dim(),
            dict.dim()
        )));
    }
    Ok(())
}

/// `Σ_i log Σ_k π_k exp(σ μ_kᵀ f_i)`; zero for an empty set.
pub fn mixture_log_likelihood(features: &FeatureSet, dict: &VmfDictionary) -> Result<f64> {
    check_dims(features, dict)?;
    if features.is_empty() {
        return Ok(0.0);
    }
    let ll = e_step(features, dict).log_likelihood;
    if !ll.is_finite() {
        return Err(Error::NonFinite("mixture log-likelihood".into()));
    }
    Ok(ll)
}

/// Posterior `P(k | f_i, Λ)` for every feature, computed in the log domain.
/// Row `i` holds the K responsibilities of feature `i`.
pub fn posterior_responsibilities(
    features: &FeatureSet,
    dict: &VmfDictionary,
) -> Result<Vec<Vec<f64>>> {
    check_dims(features, dict)?;
    let log_pi = dict.log_weights();
    let rows: Vec<Vec<f64>> = features
        .as_slice()
        .par_chunks(features.dim())
        .map(|f| {
            let mut row = vec![0.0; dict.len()];
            dict.scores_into(f, &mut row);
            for (r, lp) in row.iter_mut().zip(&log_pi) {
                *r += lp;
            }
            crate::math::softmax_in_place(&mut row);
            row
        })
        .collect();
    if rows.iter().flatten().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("posterior responsibilities".into()));
    }
    Ok(rows)
}

/// Per-position kernel responses of a feature map against a dictionary.
pub fn likelihood_map(fm: &FeatureMap, dict: &VmfDictionary) -> Result<LikelihoodMap> {
    if fm.dim() != dict.dim() {
        return Err(Error::DimMismatch(format!(
            "feature map dim {} vs dictionary dim {}",
            fm.dim(),
            dict.dim()
        )));
    }
    let k = dict.len();
    let log_pi = dict.log_weights();
    let mut log_values = vec![0.0; fm.positions() * k];
    for (row, f) in log_values.chunks_exact_mut(k).zip(fm.vectors()) {
        dict.scores_into(f, row);
        for (r, lp) in row.iter_mut().zip(&log_pi) {
            *r += lp;
        }
    }
    if log_values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("likelihood map".into()));
    }
    Ok(LikelihoodMap {
        height: fm.height(),
        width: fm.width(),
        channels: k,
        log_values,
    })
}

/// Result of spherical k-means.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub dim: usize,
    /// K×D unit centroids.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Total cosine similarity of points to their centroids.
    pub objective: f64,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn distinct_count(features: &FeatureSet, cap: usize) -> usize {
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    for f in features.iter() {
        seen.insert(f.iter().map(|x| x.to_bits()).collect());
        if seen.len() >= cap {
            break;
        }
    }
    seen.len()
}

const KMEANS_MAX_ITERS: usize = 100;

fn nearest(centroids: &[f64], dim: usize, f: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let s = dot(c, f);
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

fn kmeans_single(features: &FeatureSet, k: usize, rng: &mut ChaCha8Rng) -> Clustering {
    let d = features.dim();
    let n = features.len();

    // Greedy k-means++ seeding: at each step draw a few candidates with
    // probability proportional to their squared chord distance 2(1 - cos)
    // to the nearest chosen centre and keep the one leaving the smallest
    // total distance.
    let trials = 2 + (k as f64).ln().floor() as usize;
    let first = rng.random_range(0..n);
    let mut centroids = Vec::with_capacity(k * d);
    centroids.extend_from_slice(features.get(first));
    let mut closest: Vec<f64> = features
        .iter()
        .map(|f| dot(f, features.get(first)))
        .collect();
    for _ in 1..k {
        let total: f64 = closest.iter().map(|c| (1.0 - c).max(0.0)).sum();
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut best_pick = 0;
        for _ in 0..trials {
            let pick = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (i, c) in closest.iter().enumerate() {
                    let w = (1.0 - c).max(0.0);
                    if u < w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            let cand = features.get(pick);
            let updated: Vec<f64> = features
                .as_slice()
                .par_chunks(d)
                .zip(closest.par_iter())
                .map(|(f, &c)| c.max(dot(f, cand)))
                .collect();
            let potential: f64 = updated.iter().map(|c| 1.0 - c).sum();
            if best.as_ref().is_none_or(|(p, _)| potential < *p) {
                best = Some((potential, updated));
                best_pick = pick;
            }
        }
        closest = best.expect("at least one trial").1;
        centroids.extend_from_slice(features.get(best_pick));
    }

    let mut assignments = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let next: Vec<(usize, f64)> = features
            .as_slice()
            .par_chunks(d)
            .map(|f| nearest(&centroids, d, f))
            .collect();
        let changed = next.iter().zip(&assignments).any(|((j, _), a)| j != a);
        for (a, (j, _)) in assignments.iter_mut().zip(&next) {
            *a = *j;
        }

        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (f, &a) in features.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a * d..(a + 1) * d].iter_mut().zip(f) {
                *s += x;
            }
        }
        // Empty clusters take the point worst served by its own centroid.
        let mut taken = HashSet::new();
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let mut worst = None;
            let mut worst_sim = f64::INFINITY;
            for (i, (_, s)) in next.iter().enumerate() {
                if counts[assignments[i]] > 1 && !taken.contains(&i) && *s < worst_sim {
                    worst_sim = *s;
                    worst = Some(i);
                }
            }
            if let Some(i) = worst {
                taken.insert(i);
                counts[assignments[i]] -= 1;
                assignments[i] = j;
                counts[j] = 1;
                sums[j * d..(j + 1) * d].copy_from_slice(features.get(i));
            }
        }
        for j in 0..k {
            let row = &mut sums[j * d..(j + 1) * d];
            if counts[j] > 0 && normalize(row) {
                centroids[j * d..(j + 1) * d].copy_from_slice(row);
            }
        }
        if !changed && taken.is_empty() {
            break;
        }
    }

    let objective = features
        .iter()
        .zip(&assignments)
        .map(|(f, &a)| dot(f, &centroids[a * d..(a + 1) * d]))
        .sum();
    Clustering {
        dim: d,
        centroids,
        assignments,
        objective,
    }
}

/// Spherical k-means with k-means++ seeding; best objective of `restarts`
/// runs drawn from one seeded stream.
pub fn kmeans_clustering(
    features: &FeatureSet,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<Clustering> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let distinct = distinct_count(features, k);
    if distinct < k {
        return Err(Error::DegenerateClustering(format!(
            "{k} clusters requested but only {distinct} distinct vectors"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..restarts.max(1) {
        let c = kmeans_single(features, k, &mut rng);
        if best.as_ref().is_none_or(|b| c.objective > b.objective) {
            best = Some(c);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Spherical k-means returned as a dictionary: centroids become kernels and
/// cluster fractions become mixing weights.
pub fn spherical_kmeans(
    features: &FeatureSet,
    k: usize,
    sigma: f64,
    seed: u64,
    restarts: usize,
) -> Result<VmfDictionary> {
    let c = kmeans_clustering(features, k, seed, restarts)?;
    let n = features.len() as f64;
    let weights = c.cluster_sizes().iter().map(|&s| s as f64 / n).collect();
    VmfDictionary::new(features.dim(), sigma, c.centroids, weights)
}

/// Maximum-likelihood vMF mixture: EM from `kmeans_restarts` independent
/// k-means initialisations, keeping the fit with the highest likelihood.
pub fn em_fit_dictionary(
    features: &FeatureSet,
    k: usize,
    sigma: f64,
    cfg: &EmConfig,
) -> Result<(VmfDictionary, EmLog)> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(Error::InvalidArgument("no features to fit".into()));
    }
    let ll = |f: &(VmfDictionary, EmLog)| {
        f.1.log_likelihood
            .last()
            .copied()
            .unwrap_or(f64::NEG_INFINITY)
    };
    let mut best: Option<(VmfDictionary, EmLog)> = None;
    for r in 0..cfg.kmeans_restarts.max(1) {
        let seed = cfg
            .seed
            .wrapping_add((r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let init = spherical_kmeans(features, k, sigma, seed, 1)?;
        let fit = em_fit_from(features, init, cfg)?;
        if best.as_ref().is_none_or(|b| ll(&fit) > ll(b)) {
            best = Some(fit);
        }
    }
    let mut best = best.expect("at least one restart");
    let mut moves = 0;
    if cfg.split_merge && k >= 3 {
        while moves < k {
            match split_merge_step(features, &best.0, cfg)? {
                Some(next) if ll(&next) > ll(&best) + 1e-9 * ll(&best).abs() => {
                    best = next;
                    moves += 1;
                }
                _ => break,
            }
        }
    }
    best.1.split_merge_moves = moves;
    Ok(best)
}

const SPLIT_MERGE_CANDIDATES: usize = 3;

/// One split-merge attempt: merge one of the most similar kernel pairs,
/// reuse the freed slot to split one of the most spread-out kernels with a
/// 2-means on its members, and rerun EM. Returns the best candidate fit.
fn split_merge_step(
    features: &FeatureSet,
    dict: &VmfDictionary,
    cfg: &EmConfig,
) -> Result<Option<(VmfDictionary, EmLog)>> {
    let k = dict.len();
    let d = dict.dim();
    let assignments: Vec<usize> = features
        .as_slice()
        .par_chunks(d)
        .map(|f| nearest(dict.kernels(), d, f).0)
        .collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &a) in assignments.iter().enumerate() {
        members[a].push(i);
    }
    let resultant: Vec<f64> = members
        .iter()
        .map(|idx| {
            if idx.is_empty() {
                return f64::INFINITY;
            }
            let mut sum = vec![0.0; d];
            for &i in idx {
                sum.iter_mut()
                    .zip(features.get(i))
                    .for_each(|(s, x)| *s += x);
            }
            crate::math::norm(&sum) / idx.len() as f64
        })
        .collect();

    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            pairs.push((dot(dict.kernel(i), dict.kernel(j)), i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut spread: Vec<usize> = (0..k).collect();
    spread.sort_by(|&a, &b| resultant[a].total_cmp(&resultant[b]).then(a.cmp(&b)));

    let mut best: Option<(VmfDictionary, EmLog)> = None;
    for &(_, i, j) in pairs.iter().take(SPLIT_MERGE_CANDIDATES) {
        for &s in spread
            .iter()
            .filter(|&&s| s != i && s != j)
            .take(SPLIT_MERGE_CANDIDATES)
        {
            if members[s].len() < 2 {
                continue;
            }
            let rows: Vec<f64> = members[s]
                .iter()
                .flat_map(|&m| features.get(m).iter().copied())
                .collect();
            let subset = FeatureSet::new(d, rows)?;
            let halves = match kmeans_clustering(&subset, 2, cfg.seed, 1) {
                Ok(c) => c,
                Err(Error::DegenerateClustering(_)) => continue,
                Err(e) => return Err(e),
            };
            let mut kernels = dict.kernels().to_vec();
            let mut weights = dict.weights().to_vec();
            let mut merged: Vec<f64> = dict
                .kernel(i)
                .iter()
                .zip(dict.kernel(j))
                .map(|(a, b)| weights[i] * a + weights[j] * b)
                .collect();
            if !normalize(&mut merged) {
                continue;
            }
            kernels[i * d..(i + 1) * d].copy_from_slice(&merged);
            kernels[s * d..(s + 1) * d].copy_from_slice(&halves.centroids[..d]);
            kernels[j * d..(j + 1) * d].copy_from_slice(&halves.centroids[d..]);
            weights[i] += weights[j];
            weights[j] = weights[s] / 2.0;
            weights[s] /= 2.0;
            let init = VmfDictionary::new(d, dict.concentration(), kernels, weights)?;
            let fit = em_fit_from(features, init, cfg)?;
            let better = best
                .as_ref()
                .is_none_or(|b| fit.1.log_likelihood.last() > b.1.log_likelihood.last());
            if better {
                best = Some(fit);
            }
        }
    }
    Ok(best)
}

/// EM from a given starting dictionary. The concentration is held fixed.
pub fn em_fit_from(
    features: &FeatureSet,
    init: VmfDictionary,
    cfg: &EmConfig,
) -> Result<(VmfDictionary, EmLog)> {
    cfg.validate()?;
    check_dims(features, &init)?;
    if features.is_empty() {
        return Err(Error::InvalidArgument("no features to fit".into()));
    }
    let n = features.len() as f64;
    let k = init.len();
    let d = init.dim();
    let mut dict = init;
    let mut log = EmLog::default();
    let mut stats = e_step(features, &dict);
    log.log_likelihood.push(stats.log_likelihood);

    for it in 1..=cfg.max_iters {
        let mut degenerate = Vec::new();
        for j in 0..k {
            if stats.mass[j] < DEGENERATE_MASS {
                degenerate.push(j);
                continue;
            }
            let row = &mut stats.moment[j * d..(j + 1) * d];
            if normalize(row) {
                dict.kernels_mut()[j * d..(j + 1) * d].copy_from_slice(row);
            }
        }
        let mut weights: Vec<f64> = stats.mass.iter().map(|m| m / n).collect();
        if !degenerate.is_empty() {
            rescue_components(features, &mut dict, &mut weights, &degenerate);
            log.rescued.extend(degenerate.iter().map(|&j| (it, j)));
        }
        dict.set_weights(weights);

        let prev = stats.log_likelihood;
        stats = e_step(features, &dict);
        if !stats.log_likelihood.is_finite() {
            return Err(Error::NonFinite(format!(
                "log-likelihood at EM iteration {it}"
            )));
        }
        log.log_likelihood.push(stats.log_likelihood);
        log.iterations = it;
        let rel = (stats.log_likelihood - prev).abs() / prev.abs().max(1e-300);
        if rel < cfg.ll_tol {
            log.converged = true;
            break;
        }
    }
    Ok((dict, log))
}

/// Re-seeds collapsed components at the worst-explained features and gives
/// them weight 1/K before renormalising.
fn rescue_components(
    features: &FeatureSet,
    dict: &mut VmfDictionary,
    weights: &mut [f64],
    dead: &[usize],
) {
    let d = dict.dim();
    let k = dict.len();
    let mut buf = vec![0.0; k];
    let mut fit: Vec<(f64, usize)> = features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            dict.scores_into(f, &mut buf);
            (buf[argmax(&buf)], i)
        })
        .collect();
    fit.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (slot, &j) in dead.iter().enumerate() {
        let (_, i) = fit[slot.min(fit.len() - 1)];
        let f = features.get(i).to_vec();
        dict.kernels_mut()[j * d..(j + 1) * d].copy_from_slice(&f);
        weights[j] = 1.0 / k as f64;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
}
