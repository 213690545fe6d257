//! Adapting a source dictionary to unlabeled target features.
//!
//! The adapted ("transitional") dictionary starts at the source kernels and
//! runs EM on target features, with each kernel's M-step pulled back toward
//! its source direction. The pull for kernel k is set by an adaptation
//! coefficient `ψ_k ∈ [0, 1]`:
//!
//! ```text
//! μ̂_k = normalize(ψ_k E_k + (1 − ψ_k) μ_k^S)
//! ```
//!
//! with `E_k` the responsibility-weighted mean direction of kernel k. `ψ_k = 0`
//! keeps the source kernel and `ψ_k = 1` is the plain MLE update. The update
//! is computed as the exact maximiser of the EM surrogate of
//!
//! ```text
//! l(Λ) = Σ_i log Σ_k π_k exp(σ μ_kᵀ f_i) − n Σ_k λ_k (1 − μ_kᵀ μ_k^S)
//! λ_k  = σ ρ_k (1 − ψ_k) / ψ_k
//! ```
//!
//! where `ρ_k = ‖Σ_i P(k | f_i) f_i‖ / n` is measured once, at the source
//! dictionary. At that scale the maximiser is exactly the interpolation
//! above, and because λ is fixed for fixed ψ the penalised objective never
//! decreases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot, norm, normalize};
use crate::vmf::{e_step, mixture_log_likelihood, FeatureSet, VmfDictionary};

pub use crate::vmf::posterior_responsibilities;

/// Width of the cosine-similarity histogram bins over [-1, 1].
pub const HISTOGRAM_BIN_WIDTH: f64 = 0.05;

/// How the adaptation coefficients evolve across EM iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiMode {
    /// ψ_k = psi_init throughout.
    Fixed,
    /// ψ_k starts at psi_init and is multiplied by `psi_growth` every
    /// iteration, capped at 1.
    MonotoneSchedule,
    /// ψ_k = r̄_k / (r̄_k + ω_k), r̄_k the mean target responsibility.
    DataDependent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    /// Per-kernel adaptation emphasis ω_k. A single value applies to every kernel.
    pub omega: Vec<f64>,
    pub psi_init: f64,
    pub psi_mode: PsiMode,
    pub psi_growth: f64,
    /// A kernel freezes once its likelihood component changes by less than this.
    pub stabilize_tol: f64,
    pub max_iters: usize,
    pub adapt_pi: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            omega: vec![1e-4],
            psi_init: 0.5,
            psi_mode: PsiMode::MonotoneSchedule,
            psi_growth: 1.1,
            stabilize_tol: 1e-5,
            max_iters: 50,
            adapt_pi: false,
        }
    }
}

impl AdaptConfig {
    /// Fixed ψ for every kernel.
    pub fn fixed(psi: f64) -> Self {
        Self {
            psi_init: psi,
            psi_mode: PsiMode::Fixed,
            ..Self::default()
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.psi_init) {
            return Err(Error::InvalidArgument(format!(
                "psi_init must lie in [0, 1], got {}",
                self.psi_init
            )));
        }
        if !(self.stabilize_tol > 0.0) {
            return Err(Error::InvalidArgument(
                "stabilize_tol must be positive".into(),
            ));
        }
        if !(self.psi_growth >= 1.0) {
            return Err(Error::InvalidArgument(
                "psi_growth must be at least 1".into(),
            ));
        }
        if self.omega.len() != 1 && self.omega.len() != k {
            return Err(Error::InvalidArgument(format!(
                "omega has {} entries for {k} kernels",
                self.omega.len()
            )));
        }
        if self.omega.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("omega must be non-negative".into()));
        }
        Ok(())
    }

    fn omega_of(&self, k: usize) -> f64 {
        if self.omega.len() == 1 {
            self.omega[0]
        } else {
            self.omega[k]
        }
    }
}

/// Summary of an adaptation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub psi: Vec<f64>,
    /// cos(μ_k^S, μ_k^R) per kernel.
    pub cosine: Vec<f64>,
    /// Counts of `cosine` in bins of width 0.05 over [-1, 1].
    pub histogram: Vec<usize>,
    /// Penalised log-likelihood after initialisation and after every
    /// iteration, each under that iteration's coefficients.
    pub objective_trace: Vec<f64>,
    /// Iteration at which each kernel froze, if it did.
    pub stabilized_at: Vec<Option<usize>>,
    pub iterations: usize,
    /// Distance used in the source penalty.
    pub penalty_metric: String,
    /// Resultant scale ρ_k fixing each kernel's penalty weight.
    pub penalty_scale: Vec<f64>,
}

/// Per-kernel cosine similarities and their histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub cosine: Vec<f64>,
    pub histogram: Vec<usize>,
}

/// Penalty weight `λ = σ ρ (1 − ψ) / ψ` implied by an adaptation coefficient
/// and the kernel's resultant scale ρ. Infinite (kernel pinned at the
/// source) for ψ = 0 or for a kernel without target mass.
pub fn penalty_weight(psi: f64, sigma: f64, scale: f64) -> f64 {
    if psi >= 1.0 {
        0.0
    } else if psi <= 0.0 || scale <= 0.0 {
        f64::INFINITY
    } else {
        sigma * scale * (1.0 - psi) / psi
    }
}

fn check_pair(dict: &VmfDictionary, source: &VmfDictionary) -> Result<()> {
    if !dict.same_shape(source) {
        return Err(Error::DimMismatch(format!(
            "dictionary {}x{} vs source {}x{}",
            dict.len(),
            dict.dim(),
            source.len(),
            source.dim()
        )));
    }
    if dict.concentration() != source.concentration() {
        return Err(Error::InvalidArgument(
            "dictionary and source concentrations differ".into(),
        ));
    }
    Ok(())
}

fn penalty_term(dict: &VmfDictionary, source: &VmfDictionary, penalty: &[f64]) -> f64 {
    (0..dict.len())
        .map(|k| {
            let dist = 1.0 - dot(dict.kernel(k), source.kernel(k));
            // An infinite weight only applies to kernels pinned at the source.
            if penalty[k] == 0.0 || (penalty[k].is_infinite() && dict.kernel(k) == source.kernel(k))
            {
                0.0
            } else {
                penalty[k] * dist
            }
        })
        .sum()
}

/// `Σ_i log Σ_k π_k exp(σ μ_kᵀ f_i) − n Σ_k penalty_k (1 − μ_kᵀ μ_k^S)`.
pub fn penalized_log_likelihood(
    features: &FeatureSet,
    dict: &VmfDictionary,
    source: &VmfDictionary,
    penalty: &[f64],
) -> Result<f64> {
    check_pair(dict, source)?;
    if penalty.len() != dict.len() {
        return Err(Error::DimMismatch(format!(
            "{} penalty weights for {} kernels",
            penalty.len(),
            dict.len()
        )));
    }
    let ll = mixture_log_likelihood(features, dict)?;
    Ok(ll - features.len() as f64 * penalty_term(dict, source, penalty))
}

/// Cosine similarity of index-aligned kernels plus a histogram.
pub fn kernel_similarity_report(
    source: &VmfDictionary,
    transitional: &VmfDictionary,
) -> Result<SimilarityReport> {
    if !source.same_shape(transitional) {
        return Err(Error::DimMismatch("dictionaries differ in shape".into()));
    }
    let cosine: Vec<f64> = (0..source.len())
        .map(|k| dot(source.kernel(k), transitional.kernel(k)).clamp(-1.0, 1.0))
        .collect();
    let histogram = cosine_histogram(&cosine);
    Ok(SimilarityReport { cosine, histogram })
}

pub fn cosine_histogram(cosine: &[f64]) -> Vec<usize> {
    let bins = (2.0 / HISTOGRAM_BIN_WIDTH).round() as usize;
    let mut h = vec![0; bins];
    for &c in cosine {
        let b = (((c + 1.0) / HISTOGRAM_BIN_WIDTH).floor() as isize).clamp(0, bins as isize - 1);
        h[b as usize] += 1;
    }
    h
}

/// Adapts `source` to `target` features.
pub fn adapt_dictionary(
    source: &VmfDictionary,
    target: &FeatureSet,
    cfg: &AdaptConfig,
) -> Result<(VmfDictionary, AdaptReport)> {
    let k = source.len();
    let d = source.dim();
    cfg.validate(k)?;
    if target.is_empty() {
        return Err(Error::InvalidArgument(
            "no target features to adapt on".into(),
        ));
    }
    if target.dim() != d {
        return Err(Error::DimMismatch(format!(
            "target dim {} vs source dim {d}",
            target.dim()
        )));
    }
    let n = target.len() as f64;
    let sigma = source.concentration();

    let mut dict = source.clone();
    let mut stats = e_step(target, &dict);
    let mut psi = match cfg.psi_mode {
        PsiMode::DataDependent => data_dependent_psi(&stats.mass, n, cfg),
        _ => vec![cfg.psi_init; k],
    };
    let scale: Vec<f64> = stats.moment.chunks_exact(d).map(|m| norm(m) / n).collect();
    let mut frozen: Vec<Option<usize>> = vec![None; k];
    let mut trace = vec![objective(&stats, &dict, source, &psi, &scale, n, sigma)];
    let mut iterations = 0;

    for it in 1..=cfg.max_iters {
        if cfg.psi_mode == PsiMode::DataDependent {
            let fresh = data_dependent_psi(&stats.mass, n, cfg);
            for j in 0..k {
                if frozen[j].is_none() {
                    psi[j] = fresh[j];
                }
            }
        }

        for j in 0..k {
            if frozen[j].is_some() {
                continue;
            }
            let row = &mut dict.kernels_mut()[j * d..(j + 1) * d];
            let lambda = penalty_weight(psi[j], sigma, scale[j]);
            if lambda.is_infinite() {
                row.copy_from_slice(source.kernel(j));
                continue;
            }
            let moment = &stats.moment[j * d..(j + 1) * d];
            let mut mixed: Vec<f64> = if lambda == 0.0 {
                moment.to_vec()
            } else {
                moment
                    .iter()
                    .zip(source.kernel(j))
                    .map(|(m, s)| sigma * m + n * lambda * s)
                    .collect()
            };
            if normalize(&mut mixed) {
                row.copy_from_slice(&mixed);
            }
        }

        if cfg.adapt_pi {
            dict.set_weights(adapted_weights(
                &dict,
                source,
                &stats.mass,
                n,
                &psi,
                &frozen,
            ));
        }

        let prev_component = stats.component.clone();
        stats = e_step(target, &dict);
        if !stats.log_likelihood.is_finite() {
            return Err(Error::NonFinite(format!(
                "target log-likelihood at adaptation iteration {it}"
            )));
        }
        trace.push(objective(&stats, &dict, source, &psi, &scale, n, sigma));
        iterations = it;

        for j in 0..k {
            if frozen[j].is_none()
                && it >= 2
                && (stats.component[j] - prev_component[j]).abs() / n < cfg.stabilize_tol
            {
                frozen[j] = Some(it);
            }
        }
        if cfg.psi_mode == PsiMode::MonotoneSchedule {
            for j in 0..k {
                if frozen[j].is_none() {
                    psi[j] = (psi[j] * cfg.psi_growth).min(1.0);
                }
            }
        }
        if frozen.iter().all(Option::is_some) {
            break;
        }
    }

    let sim = kernel_similarity_report(source, &dict)?;
    let report = AdaptReport {
        psi,
        cosine: sim.cosine,
        histogram: sim.histogram,
        objective_trace: trace,
        stabilized_at: frozen,
        iterations,
        penalty_metric: "cosine".into(),
        penalty_scale: scale,
    };
    Ok((dict, report))
}

fn data_dependent_psi(mass: &[f64], n: f64, cfg: &AdaptConfig) -> Vec<f64> {
    mass.iter()
        .enumerate()
        .map(|(j, m)| {
            let r = m / n;
            let w = cfg.omega_of(j);
            if r <= 0.0 {
                0.0
            } else {
                r / (r + w)
            }
        })
        .collect()
}

/// `π̂_k = ν [ψ_k r̄_k + (1 − ψ_k) π_k^S]`, with frozen kernels keeping
/// their weight and ν spreading the remaining mass over the others.
fn adapted_weights(
    dict: &VmfDictionary,
    source: &VmfDictionary,
    mass: &[f64],
    n: f64,
    psi: &[f64],
    frozen: &[Option<usize>],
) -> Vec<f64> {
    let k = dict.len();
    let mut w = dict.weights().to_vec();
    let frozen_mass: f64 = (0..k).filter(|&j| frozen[j].is_some()).map(|j| w[j]).sum();
    let mut raw = 0.0;
    for j in 0..k {
        if frozen[j].is_none() {
            w[j] = psi[j] * mass[j] / n + (1.0 - psi[j]) * source.weights()[j];
            raw += w[j];
        }
    }
    if raw > 0.0 {
        let nu = (1.0 - frozen_mass) / raw;
        for j in 0..k {
            if frozen[j].is_none() {
                w[j] *= nu;
            }
        }
    }
    w
}

fn objective(
    stats: &crate::vmf::EStep,
    dict: &VmfDictionary,
    source: &VmfDictionary,
    psi: &[f64],
    scale: &[f64],
    n: f64,
    sigma: f64,
) -> f64 {
    let penalty: Vec<f64> = psi
        .iter()
        .zip(scale)
        .map(|(&p, &r)| penalty_weight(p, sigma, r))
        .collect();
    stats.log_likelihood - n * penalty_term(dict, source, &penalty)
}
