//! Pseudo-labeling of target maps and finetuning of the generative head.
//!
//! The training loss for a pseudo-labeled map F with label ŷ is
//!
//! ```text
//! L = (1 − p_ŷ^q)/q                                       generalised cross-entropy
//!   + ζ_v · (−Σ_a max_k σ μ_kᵀ f_a)                        hard-assignment kernel fit
//!   + ζ_α · (−Σ_a (1 − z_a) log Σ_k α_{a,k}^{ŷ,m*} exp(σ μ_kᵀ f_a))
//! ```
//!
//! where `p = softmax_y log P(F | y)`, `m*` is the best mixture of ŷ and `z`
//! the occlusion mask of that mixture (all zeros without an occlusion model).
//! α is optimised through per-position logits so every row stays on the
//! simplex; kernels (optionally) take steps in the sphere's tangent space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{
    class_seed, classify_all, fit_class_block, kernel_scores, mixture_log_likelihoods,
    position_log_likelihood, GenerativeModel, OcclusionMask,
};
use crate::math::{argmax, dot, log_sum_exp, normalize, softmax_in_place};
use crate::vmf::{FeatureMap, VmfDictionary};

/// One retained pseudo-label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    /// Index of the map in the target list.
    pub id: usize,
    pub label: u32,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub threshold: f64,
    pub entries: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Re-estimate α from pseudo-labeled maps.
    Refit,
    /// Gradient descent on the composite loss.
    Gradient,
    RefitThenGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    /// GCE exponent.
    pub q: f64,
    pub zeta_v: f64,
    pub zeta_alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub finetune_kernels: bool,
    /// Minimum softmax confidence for a pseudo-label.
    pub threshold: f64,
    pub seed: u64,
    pub mode: FinetuneMode,
    /// Pseudo-label / finetune rounds.
    pub rounds: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            q: 0.8,
            zeta_v: 3.0,
            zeta_alpha: 3.0,
            learning_rate: 1.0,
            epochs: 10,
            finetune_kernels: false,
            threshold: 0.8,
            seed: 0,
            mode: FinetuneMode::Gradient,
            rounds: 1,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "q must lie in (0, 1], got {}",
                self.q
            )));
        }
        check_threshold(self.threshold)?;
        if !(self.zeta_v >= 0.0 && self.zeta_alpha >= 0.0) {
            return Err(Error::InvalidArgument(
                "zeta weights must be non-negative".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {t}"
        )));
    }
    Ok(())
}

/// Labels each map with the model's argmax class and keeps those whose
/// softmax confidence reaches `threshold`.
pub fn pseudo_label(
    maps: &[FeatureMap],
    model: &GenerativeModel,
    threshold: f64,
) -> Result<PseudoLabelSet> {
    check_threshold(threshold)?;
    let results = classify_all(maps, model, false)?;
    let entries = results
        .iter()
        .enumerate()
        .filter_map(|(id, c)| {
            let p = c.probabilities();
            let confidence = p.iter().copied().fold(0.0, f64::max);
            (confidence >= threshold).then_some(PseudoLabel {
                id,
                label: c.label,
                confidence,
            })
        })
        .collect();
    Ok(PseudoLabelSet { threshold, entries })
}

/// Generalised cross-entropy `(1 − p_label^q) / q`.
pub fn gce_loss(probabilities: &[f64], label: usize, q: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "q must lie in (0, 1], got {q}"
        )));
    }
    let total: f64 = probabilities.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "probabilities sum to {total}"
        )));
    }
    let p = *probabilities
        .get(label)
        .ok_or_else(|| Error::InvalidArgument(format!("label {label} out of range")))?;
    Ok((1.0 - p.powf(q)) / q)
}

/// `−Σ_a max_k σ μ_kᵀ f_a`.
pub fn vmf_reg_loss(fm: &FeatureMap, dict: &VmfDictionary) -> Result<f64> {
    if fm.dim() != dict.dim() {
        return Err(Error::DimMismatch(
            "feature map and dictionary dims differ".into(),
        ));
    }
    let k = dict.len();
    let scores = kernel_scores(fm, dict);
    Ok(-scores
        .chunks_exact(k)
        .map(|row| row[argmax(row)])
        .sum::<f64>())
}

/// `−Σ_a (1 − z_a) log Σ_k α_{a,k}^{y,m} exp(σ μ_kᵀ f_a)`.
pub fn spatial_reg_loss(
    fm: &FeatureMap,
    model: &GenerativeModel,
    y: u32,
    m: usize,
    mask: &OcclusionMask,
) -> Result<f64> {
    model.check_map(fm)?;
    let ci = model
        .spatial
        .class_index(y)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown class id {y}")))?;
    if m >= model.spatial.mixtures() {
        return Err(Error::InvalidArgument(format!("mixture {m} out of range")));
    }
    if mask.occluded.len() != fm.positions() {
        return Err(Error::DimMismatch("mask does not match the map".into()));
    }
    let k = model.dictionary.len();
    let scores = kernel_scores(fm, &model.dictionary);
    Ok(-(0..fm.positions())
        .filter(|&a| !mask.occluded[a])
        .map(|a| {
            position_log_likelihood(model.spatial.alpha(ci, m, a), &scores[a * k..(a + 1) * k])
        })
        .sum::<f64>())
}

/// Loss components, averaged over the batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub gce: f64,
    pub vmf_reg: f64,
    pub spatial_reg: f64,
}

/// Gradients of the batch-mean loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// d/dθ for the α logits, laid out like the spatial coefficients.
    pub alpha_logits: Vec<f64>,
    /// Euclidean d/dμ (K×D), before tangent projection.
    pub kernels: Option<Vec<f64>>,
}

struct Accum {
    loss: LossBreakdown,
    alpha: Vec<f64>,
    kernels: Vec<f64>,
}

impl Accum {
    fn zeros(alpha: usize, kernels: usize) -> Self {
        Self {
            loss: LossBreakdown::default(),
            alpha: vec![0.0; alpha],
            kernels: vec![0.0; kernels],
        }
    }

    fn absorb(&mut self, o: &Accum) {
        self.loss.total += o.loss.total;
        self.loss.gce += o.loss.gce;
        self.loss.vmf_reg += o.loss.vmf_reg;
        self.loss.spatial_reg += o.loss.spatial_reg;
        for (a, b) in self.alpha.iter_mut().zip(&o.alpha) {
            *a += b;
        }
        for (a, b) in self.kernels.iter_mut().zip(&o.kernels) {
            *a += b;
        }
    }
}

const BATCH_CHUNK: usize = 16;

fn check_batch(batch: &PseudoLabelSet, maps: &[FeatureMap], model: &GenerativeModel) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty pseudo-label batch".into()));
    }
    for e in &batch.entries {
        let fm = maps.get(e.id).ok_or_else(|| {
            Error::InvalidArgument(format!("pseudo-label refers to missing map {}", e.id))
        })?;
        model.check_map(fm)?;
        if model.spatial.class_index(e.label).is_none() {
            return Err(Error::InvalidArgument(format!(
                "unknown pseudo-label class {}",
                e.label
            )));
        }
    }
    Ok(())
}

fn entry_terms(
    fm: &FeatureMap,
    label: u32,
    model: &GenerativeModel,
    cfg: &FinetuneConfig,
    with_grad: bool,
    acc: &mut Accum,
) {
    let sp = &model.spatial;
    let dict = &model.dictionary;
    let k = dict.len();
    let d = dict.dim();
    let sigma = dict.concentration();
    let n_pos = sp.positions();
    let n_mix = sp.mixtures();
    let classes = sp.classes().len();
    let target = sp.class_index(label).expect("checked");
    let scores = kernel_scores(fm, dict);

    let per_class: Vec<Vec<f64>> = (0..classes)
        .map(|ci| mixture_log_likelihoods(model, &scores, ci))
        .collect();
    let mut p: Vec<f64> = per_class
        .iter()
        .map(|s| log_sum_exp(s) - (n_mix as f64).ln())
        .collect();
    softmax_in_place(&mut p);
    let p_y = p[target];
    let gce = (1.0 - p_y.powf(cfg.q)) / cfg.q;

    let best_mix = argmax(&per_class[target]);
    let occluded: Vec<bool> = match &model.occlusion {
        Some(occ) => {
            let log_obj = (1.0 - occ.tau).ln();
            let log_occ = occ.tau.ln();
            (0..n_pos)
                .map(|a| {
                    let fg = log_obj
                        + position_log_likelihood(
                            sp.alpha(target, best_mix, a),
                            &scores[a * k..(a + 1) * k],
                        );
                    let bg = log_occ + occ.background.log_mixture_density(fm.vector(a));
                    bg > fg
                })
                .collect()
        }
        None => vec![false; n_pos],
    };

    let mut vmf_reg = 0.0;
    let mut spatial_reg = 0.0;
    for a in 0..n_pos {
        let row = &scores[a * k..(a + 1) * k];
        let kb = argmax(row);
        vmf_reg -= row[kb];
        if with_grad && cfg.zeta_v != 0.0 {
            for (g, x) in acc.kernels[kb * d..(kb + 1) * d]
                .iter_mut()
                .zip(fm.vector(a))
            {
                *g -= cfg.zeta_v * sigma * x;
            }
        }
        if !occluded[a] {
            spatial_reg -= position_log_likelihood(sp.alpha(target, best_mix, a), row);
        }
    }

    acc.loss.gce += gce;
    acc.loss.vmf_reg += vmf_reg;
    acc.loss.spatial_reg += spatial_reg;
    acc.loss.total += gce + cfg.zeta_v * vmf_reg + cfg.zeta_alpha * spatial_reg;
    if !with_grad {
        return;
    }

    // dL_gce/ds_c = −p_y^q (δ_{c,y} − p_c)
    let pq = p_y.powf(cfg.q);
    let mut rho = vec![0.0; k];
    for ci in 0..classes {
        let d_score = -pq * (if ci == target { 1.0 } else { 0.0 } - p[ci]);
        let mut w = per_class[ci].clone();
        softmax_in_place(&mut w);
        for m in 0..n_mix {
            let base = d_score * w[m];
            let spatial_here = ci == target && m == best_mix && cfg.zeta_alpha != 0.0;
            if base == 0.0 && !spatial_here {
                continue;
            }
            for a in 0..n_pos {
                let mut gamma = base;
                if spatial_here && !occluded[a] {
                    gamma -= cfg.zeta_alpha;
                }
                if gamma == 0.0 {
                    continue;
                }
                let alpha = sp.alpha(ci, m, a);
                let row = &scores[a * k..(a + 1) * k];
                for j in 0..k {
                    rho[j] = if alpha[j] > 0.0 {
                        alpha[j].ln() + row[j]
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                softmax_in_place(&mut rho);
                let off = ((ci * n_mix + m) * n_pos + a) * k;
                for j in 0..k {
                    acc.alpha[off + j] += gamma * (rho[j] - alpha[j]);
                    if cfg.finetune_kernels && rho[j] != 0.0 {
                        let c = gamma * rho[j] * sigma;
                        for (g, x) in acc.kernels[j * d..(j + 1) * d].iter_mut().zip(fm.vector(a)) {
                            *g += c * x;
                        }
                    }
                }
            }
        }
    }
}

fn evaluate(
    batch: &PseudoLabelSet,
    maps: &[FeatureMap],
    model: &GenerativeModel,
    cfg: &FinetuneConfig,
    with_grad: bool,
) -> Accum {
    let alpha_len = model.spatial.as_slice().len();
    let kern_len = model.dictionary.kernels().len();
    let partials: Vec<Accum> = batch
        .entries
        .par_chunks(BATCH_CHUNK)
        .map(|chunk| {
            let mut acc = Accum::zeros(
                if with_grad { alpha_len } else { 0 },
                if with_grad { kern_len } else { 0 },
            );
            for e in chunk {
                entry_terms(&maps[e.id], e.label, model, cfg, with_grad, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = Accum::zeros(
        if with_grad { alpha_len } else { 0 },
        if with_grad { kern_len } else { 0 },
    );
    for p in &partials {
        total.absorb(p);
    }
    let b = batch.len() as f64;
    total.loss.total /= b;
    total.loss.gce /= b;
    total.loss.vmf_reg /= b;
    total.loss.spatial_reg /= b;
    total.alpha.iter_mut().for_each(|g| *g /= b);
    total.kernels.iter_mut().for_each(|g| *g /= b);
    total
}

/// Batch-mean composite loss.
pub fn total_loss(
    batch: &PseudoLabelSet,
    maps: &[FeatureMap],
    model: &GenerativeModel,
    cfg: &FinetuneConfig,
) -> Result<LossBreakdown> {
    check_batch(batch, maps, model)?;
    Ok(evaluate(batch, maps, model, cfg, false).loss)
}

/// Batch-mean composite loss with analytic gradients. Kernel gradients are
/// present only when `cfg.finetune_kernels` is set (they then also include
/// the ζ_v term).
pub fn total_loss_and_gradients(
    batch: &PseudoLabelSet,
    maps: &[FeatureMap],
    model: &GenerativeModel,
    cfg: &FinetuneConfig,
) -> Result<(LossBreakdown, Gradients)> {
    check_batch(batch, maps, model)?;
    let acc = evaluate(batch, maps, model, cfg, true);
    if !acc.loss.total.is_finite() {
        return Err(Error::NonFinite("finetune loss".into()));
    }
    let grads = Gradients {
        alpha_logits: acc.alpha,
        kernels: cfg.finetune_kernels.then_some(acc.kernels),
    };
    Ok((acc.loss, grads))
}

/// Applies one descent step of size `lr`: α through its logits, kernels in
/// the tangent space followed by renormalisation.
pub fn apply_step(model: &GenerativeModel, grads: &Gradients, lr: f64) -> Result<GenerativeModel> {
    let mut next = model.clone();
    let k = next.spatial.kernels();
    for (row, g) in next
        .spatial
        .as_mut_slice()
        .chunks_exact_mut(k)
        .zip(grads.alpha_logits.chunks_exact(k))
    {
        for (a, gj) in row.iter_mut().zip(g) {
            *a = if *a > 0.0 {
                a.ln() - lr * gj
            } else {
                f64::NEG_INFINITY
            };
        }
        softmax_in_place(row);
    }
    if let Some(gk) = &grads.kernels {
        let d = next.dictionary.dim();
        let kernels = next.dictionary.kernels_mut();
        for (mu, g) in kernels.chunks_exact_mut(d).zip(gk.chunks_exact(d)) {
            let radial = dot(g, mu);
            let mut moved: Vec<f64> = mu
                .iter()
                .zip(g)
                .map(|(m, gj)| m - lr * (gj - radial * m))
                .collect();
            if normalize(&mut moved) {
                mu.copy_from_slice(&moved);
            }
        }
    }
    next.validate()?;
    Ok(next)
}

/// Record of a finetuning run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    /// Classes whose α were re-estimated from pseudo-labels.
    pub refit_classes: Vec<u32>,
    /// Training loss before the first and after every gradient epoch.
    pub loss_trace: Vec<f64>,
    pub epochs: usize,
}

const MAX_BACKTRACKS: usize = 30;

/// Updates the spatial coefficients (and optionally kernels) from
/// pseudo-labeled target maps.
pub fn finetune_spatial(
    model: &GenerativeModel,
    pseudo: &PseudoLabelSet,
    maps: &[FeatureMap],
    cfg: &FinetuneConfig,
) -> Result<(GenerativeModel, FinetuneLog)> {
    cfg.validate()?;
    if pseudo.is_empty() {
        return Err(Error::InvalidArgument("no pseudo-labeled maps".into()));
    }
    check_batch(pseudo, maps, model)?;
    let mut current = model.clone();
    let mut log = FinetuneLog::default();

    if matches!(
        cfg.mode,
        FinetuneMode::Refit | FinetuneMode::RefitThenGradient
    ) {
        refit(&mut current, pseudo, maps, cfg.seed, &mut log)?;
    }
    if matches!(
        cfg.mode,
        FinetuneMode::Gradient | FinetuneMode::RefitThenGradient
    ) {
        gradient_descent(&mut current, pseudo, maps, cfg, &mut log)?;
    }
    Ok((current, log))
}

fn refit(
    model: &mut GenerativeModel,
    pseudo: &PseudoLabelSet,
    maps: &[FeatureMap],
    seed: u64,
    log: &mut FinetuneLog,
) -> Result<()> {
    let mixtures = model.spatial.mixtures();
    let classes = model.classes().to_vec();
    for (ci, &y) in classes.iter().enumerate() {
        let members: Vec<&FeatureMap> = pseudo
            .entries
            .iter()
            .filter(|e| e.label == y)
            .map(|e| &maps[e.id])
            .collect();
        if members.len() < mixtures {
            continue;
        }
        let dict = model.dictionary.clone();
        fit_class_block(
            &members,
            &dict,
            mixtures,
            class_seed(seed, y),
            model.spatial.class_block_mut(ci),
        )?;
        log.refit_classes.push(y);
    }
    model.spatial.validate()
}

fn gradient_descent(
    model: &mut GenerativeModel,
    pseudo: &PseudoLabelSet,
    maps: &[FeatureMap],
    cfg: &FinetuneConfig,
    log: &mut FinetuneLog,
) -> Result<()> {
    let (mut loss, mut grads) = total_loss_and_gradients(pseudo, maps, model, cfg)?;
    log.loss_trace.push(loss.total);
    for _ in 0..cfg.epochs {
        let mut lr = cfg.learning_rate;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let candidate = apply_step(model, &grads, lr)?;
            let l = total_loss(pseudo, maps, &candidate, cfg)?;
            if l.total.is_finite() && l.total <= loss.total {
                accepted = Some(candidate);
                break;
            }
            lr *= 0.5;
        }
        log.epochs += 1;
        if let Some(next) = accepted {
            *model = next;
            let (l, g) = total_loss_and_gradients(pseudo, maps, model, cfg)?;
            loss = l;
            grads = g;
        }
        log.loss_trace.push(loss.total);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{fit_spatial_coefficients, SpatialCoefficients};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn unit(v: &[f64]) -> Vec<f64> {
        let mut v = v.to_vec();
        assert!(normalize(&mut v));
        v
    }

    fn random_unit(d: usize, rng: &mut impl Rng) -> Vec<f64> {
        unit(
            &(0..d)
                .map(|_| rng.sample(StandardNormal))
                .collect::<Vec<f64>>(),
        )
    }

    fn random_map(h: usize, w: usize, d: usize, rng: &mut impl Rng) -> FeatureMap {
        FeatureMap::new(
            h,
            w,
            d,
            (0..h * w).flat_map(|_| random_unit(d, rng)).collect(),
        )
        .unwrap()
    }

    fn random_model(
        classes: usize,
        k: usize,
        m: usize,
        h: usize,
        w: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> GenerativeModel {
        let dict =
            VmfDictionary::uniform(d, 10.0, (0..k).flat_map(|_| random_unit(d, rng)).collect())
                .unwrap();
        let alpha: Vec<f64> = (0..classes * m * h * w)
            .flat_map(|_| {
                let mut row: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
                softmax_in_place(&mut row);
                row
            })
            .collect();
        let spatial =
            SpatialCoefficients::new((0..classes as u32).collect(), m, h, w, k, alpha).unwrap();
        GenerativeModel::new(dict, spatial, None).unwrap()
    }

    fn batch(labels: &[u32]) -> PseudoLabelSet {
        PseudoLabelSet {
            threshold: 0.5,
            entries: labels
                .iter()
                .enumerate()
                .map(|(id, &label)| PseudoLabel {
                    id,
                    label,
                    confidence: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn gce_examples() {
        assert_eq!(gce_loss(&[0.0, 1.0], 1, 0.8).unwrap(), 0.0);
        assert!((gce_loss(&[0.3, 0.7], 1, 1.0).unwrap() - 0.3).abs() < 1e-15);
        let expected = (1.0 - 0.5f64.powf(0.8)) / 0.8;
        assert!((gce_loss(&[0.5, 0.5], 0, 0.8).unwrap() - expected).abs() < 1e-15);
        assert!(gce_loss(&[0.5, 0.5], 0, 0.0).is_err());
        assert!(gce_loss(&[0.5, 0.6], 0, 0.8).is_err());
        assert!(gce_loss(&[0.5, 0.5], 2, 0.8).is_err());
    }

    #[test]
    fn vmf_reg_examples() {
        let dict = VmfDictionary::uniform(2, 30.0, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let fm = FeatureMap::new(2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((vmf_reg_loss(&fm, &dict).unwrap() + 120.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mu = random_unit(4, &mut rng);
        let single = VmfDictionary::uniform(4, 7.0, mu.clone()).unwrap();
        let fm = random_map(3, 3, 4, &mut rng);
        let expected: f64 = -fm.vectors().map(|f| 7.0 * dot(&mu, f)).sum::<f64>();
        assert!((vmf_reg_loss(&fm, &single).unwrap() - expected).abs() < 1e-12);

        let many = VmfDictionary::uniform(
            4,
            7.0,
            (0..3).flat_map(|_| random_unit(4, &mut rng)).collect(),
        )
        .unwrap();
        let oracle: f64 = -fm
            .vectors()
            .map(|f| {
                (0..3)
                    .map(|k| 7.0 * dot(many.kernel(k), f))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum::<f64>();
        assert!((vmf_reg_loss(&fm, &many).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn spatial_reg_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_model(2, 3, 2, 3, 3, 4, &mut rng);
        let fm = random_map(3, 3, 4, &mut rng);
        let all = OcclusionMask {
            height: 3,
            width: 3,
            occluded: vec![true; 9],
        };
        assert_eq!(spatial_reg_loss(&fm, &model, 1, 0, &all).unwrap(), 0.0);

        let none = OcclusionMask::empty(3, 3);
        let oracle: f64 = -(0..9)
            .map(|a| {
                let alpha = model.spatial.alpha(1, 1, a);
                (0..3)
                    .map(|k| {
                        alpha[k] * (10.0 * dot(model.dictionary.kernel(k), fm.vector(a))).exp()
                    })
                    .sum::<f64>()
                    .ln()
            })
            .sum::<f64>();
        assert!((spatial_reg_loss(&fm, &model, 1, 1, &none).unwrap() - oracle).abs() < 1e-10);

        let mu = random_unit(4, &mut rng);
        let dict = VmfDictionary::uniform(4, 10.0, mu).unwrap();
        let spatial = SpatialCoefficients::new(vec![0], 1, 3, 3, 1, vec![1.0; 9]).unwrap();
        let single = GenerativeModel::new(dict.clone(), spatial, None).unwrap();
        let a = spatial_reg_loss(&fm, &single, 0, 0, &none).unwrap();
        assert!((a - vmf_reg_loss(&fm, &dict).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn no_learning_signal_gives_zero_loss_and_gradient() {
        // Class 0 always emits kernel 0, class 1 kernel 1: at this
        // concentration a map of kernel 0 gets p_0 = 1 in double precision.
        let dict = VmfDictionary::uniform(2, 1000.0, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let alpha = vec![1.0, 0.0, 0.0, 1.0];
        let spatial = SpatialCoefficients::new(vec![0, 1], 1, 1, 1, 2, alpha).unwrap();
        let model = GenerativeModel::new(dict, spatial, None).unwrap();
        let maps = vec![FeatureMap::new(1, 1, 2, vec![1.0, 0.0]).unwrap()];
        let cfg = FinetuneConfig {
            zeta_v: 0.0,
            zeta_alpha: 0.0,
            finetune_kernels: true,
            ..FinetuneConfig::default()
        };
        let (loss, grads) = total_loss_and_gradients(&batch(&[0]), &maps, &model, &cfg).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(grads.alpha_logits.iter().all(|g| *g == 0.0));
        assert!(grads.kernels.unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn small_step_decreases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = random_model(2, 4, 1, 3, 3, 5, &mut rng);
        let maps: Vec<FeatureMap> = (0..8).map(|_| random_map(3, 3, 5, &mut rng)).collect();
        let b = batch(&[0, 1, 0, 1, 1, 0, 0, 1]);
        let cfg = FinetuneConfig {
            finetune_kernels: true,
            ..FinetuneConfig::default()
        };
        let (before, grads) = total_loss_and_gradients(&b, &maps, &model, &cfg).unwrap();
        let after =
            total_loss(&b, &maps, &apply_step(&model, &grads, 1e-4).unwrap(), &cfg).unwrap();
        assert!(after.total < before.total);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = random_model(2, 4, 2, 3, 3, 5, &mut rng);
        let maps: Vec<FeatureMap> = (0..5).map(|_| random_map(3, 3, 5, &mut rng)).collect();
        let b = batch(&[1, 0, 0, 1, 1]);
        let cfg = FinetuneConfig::default();
        let (_, grads) = total_loss_and_gradients(&b, &maps, &model, &cfg).unwrap();
        let h = 1e-5;
        let k = 4;
        let logits: Vec<f64> = model.spatial.as_slice().iter().map(|a| a.ln()).collect();
        let loss_at = |theta: &[f64]| {
            let mut m = model.clone();
            for (row, t) in m
                .spatial
                .as_mut_slice()
                .chunks_exact_mut(k)
                .zip(theta.chunks_exact(k))
            {
                row.copy_from_slice(t);
                softmax_in_place(row);
            }
            total_loss(&b, &maps, &m, &cfg).unwrap().total
        };
        let mut diff = 0.0;
        let mut scale = 0.0;
        for i in 0..logits.len() {
            let (mut p, mut q) = (logits.clone(), logits.clone());
            p[i] += h;
            q[i] -= h;
            let fd = (loss_at(&p) - loss_at(&q)) / (2.0 * h);
            diff += (fd - grads.alpha_logits[i]).powi(2);
            scale += fd * fd;
        }
        assert!(
            (diff / scale).sqrt() <= 1e-4,
            "relative error {}",
            (diff / scale).sqrt()
        );
    }

    #[test]
    fn refit_with_true_labels_matches_fit_spatial() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = random_model(2, 3, 2, 2, 2, 3, &mut rng);
        let maps: Vec<FeatureMap> = (0..12).map(|_| random_map(2, 2, 3, &mut rng)).collect();
        let labels: Vec<u32> = (0..12).map(|i| (i % 2) as u32).collect();
        let cfg = FinetuneConfig {
            mode: FinetuneMode::Refit,
            seed: 11,
            ..FinetuneConfig::default()
        };
        let (refit, log) = finetune_spatial(&model, &batch(&labels), &maps, &cfg).unwrap();
        let direct = fit_spatial_coefficients(&maps, &labels, &model.dictionary, 2, 11).unwrap();
        assert_eq!(refit.spatial, direct);
        assert_eq!(log.refit_classes, vec![0, 1]);
    }

    #[test]
    fn gradient_mode_loss_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = random_model(3, 4, 2, 3, 3, 5, &mut rng);
        let maps: Vec<FeatureMap> = (0..9).map(|_| random_map(3, 3, 5, &mut rng)).collect();
        let labels: Vec<u32> = (0..9).map(|i| (i % 3) as u32).collect();
        let cfg = FinetuneConfig {
            epochs: 10,
            finetune_kernels: true,
            ..FinetuneConfig::default()
        };
        let (_, log) = finetune_spatial(&model, &batch(&labels), &maps, &cfg).unwrap();
        assert_eq!(log.loss_trace.len(), 11);
        assert!(log.loss_trace.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        assert!(log.loss_trace[10] < log.loss_trace[0]);
    }

    #[test]
    fn pseudo_label_thresholds() {
        let dict = VmfDictionary::uniform(2, 30.0, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let spatial = SpatialCoefficients::new(vec![0, 1, 2], 1, 1, 1, 2, vec![0.5; 6]).unwrap();
        let model = GenerativeModel::new(dict, spatial, None).unwrap();
        let maps = vec![FeatureMap::new(1, 1, 2, vec![1.0, 0.0]).unwrap()];
        assert!(pseudo_label(&maps, &model, 1.0 / 3.0 + 1e-6)
            .unwrap()
            .is_empty());
        assert!(pseudo_label(&maps, &model, 0.0).is_err());
        assert!(pseudo_label(&maps, &model, 1.0).is_err());
        let kept = pseudo_label(&maps, &model, 0.3).unwrap();
        assert_eq!(kept.entries[0].label, 0);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = random_model(2, 2, 1, 1, 1, 2, &mut rng);
        let maps = vec![random_map(1, 1, 2, &mut rng)];
        assert!(finetune_spatial(&model, &batch(&[]), &maps, &FinetuneConfig::default()).is_err());
        assert!(total_loss(&batch(&[5]), &maps, &model, &FinetuneConfig::default()).is_err());
    }
}
