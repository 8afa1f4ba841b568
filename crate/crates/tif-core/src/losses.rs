//! Loss terms used by the two training stages.
//!
//! * `bce_with_logits` — numerically stable binary cross-entropy,
//!   `softplus(z) - y*z` averaged over the batch.
//! * `proxy_alignment` — mean entropy of the soft assignment of each sample
//!   to its class's proxies (similarities scaled by a temperature). Lower
//!   entropy means samples commit to their nearest proxies.
//! * `intra_diversity` — negative mean pairwise distance between proxies of
//!   a class; minimizing spreads proxies apart.
//! * `inter_separation` — hinge on the distance between class proxy centers,
//!   enforcing a margin.
//! * `multi_proxy` — the weighted sum of the three terms above.
//! * `grad_alignment_penalty` — per-environment squared risk gradient with
//!   respect to a multiplicative dummy scalar on the logit, averaged over
//!   environments. The gradient has a closed form, so the parameter-level
//!   backward pass is a single modified backprop (no nested
//!   differentiation).
//!
//! Every `*_backward` variant returns the value together with exact
//! analytic gradients with respect to its direct arguments; the trainer
//! backpropagates those through the model.

use ndarray::{Array1, Array2};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::model::{InputBatch, ModelState};

/// Stable sigmoid.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Stable `ln(1 + e^z)`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Hyperparameters of the composite objective.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Weight of the multi-proxy term in both stages.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Weight of the gradient-alignment penalty in stage 2.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_lambda")]
    pub lambda_intra: f64,
    #[serde(default = "default_lambda")]
    pub lambda_inter: f64,
    /// Softmax temperature for proxy assignment.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Minimum margin between class proxy centers.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Proxies per class (K).
    #[serde(default = "default_k")]
    pub proxies_per_class: usize,
}

fn default_alpha() -> f64 {
    1.0
}
fn default_beta() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    0.1
}
fn default_tau() -> f64 {
    0.1
}
fn default_margin() -> f64 {
    1.0
}
fn default_k() -> usize {
    4
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: default_alpha(),
            beta: default_beta(),
            lambda_intra: default_lambda(),
            lambda_inter: default_lambda(),
            tau: default_tau(),
            margin: default_margin(),
            proxies_per_class: default_k(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_intra", self.lambda_intra),
            ("lambda_inter", self.lambda_inter),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::spec(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::spec(format!("tau must be positive, got {}", self.tau)));
        }
        if self.margin.is_nan() || self.margin <= 0.0 {
            return Err(Error::spec(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if self.proxies_per_class == 0 {
            return Err(Error::spec("proxies_per_class must be at least 1"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// classification loss
// ---------------------------------------------------------------------------

/// Mean `softplus(z) - y*z` — binary cross-entropy with logits.
pub fn bce_with_logits(logits: &[f64], labels: &[Label]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::spec(format!(
            "classification loss needs equal, non-empty logits/labels (got {}/{})",
            logits.len(),
            labels.len()
        )));
    }
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| softplus(z) - y.as_f64() * z)
        .sum();
    Ok(sum / logits.len() as f64)
}

/// Value plus `scale * d(mean)/d(logits)`.
pub fn bce_backward(logits: &[f64], labels: &[Label], scale: f64) -> Result<(f64, Array1<f64>)> {
    let value = bce_with_logits(logits, labels)?;
    let n = logits.len() as f64;
    let d = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| scale * (sigmoid(z) - y.as_f64()) / n)
        .collect();
    Ok((value, d))
}

// ---------------------------------------------------------------------------
// multi-proxy contrastive terms
// ---------------------------------------------------------------------------

/// Per-class softmax-entropy of sample-to-proxy similarities, averaged over
/// the classes present in the batch. `embs[c]` holds the (unit-norm)
/// embeddings of class `c`; `None` or an empty matrix marks an absent class.
pub fn proxy_alignment(
    embs: &[Option<&Array2<f64>>],
    proxies: &[Array2<f64>],
    tau: f64,
) -> Result<f64> {
    Ok(proxy_alignment_backward_impl(embs, proxies, tau, false)?.0)
}

/// Value plus gradients w.r.t. embeddings (per class) and proxies.
#[allow(clippy::type_complexity)]
pub fn proxy_alignment_backward(
    embs: &[Option<&Array2<f64>>],
    proxies: &[Array2<f64>],
    tau: f64,
) -> Result<(f64, Vec<Option<Array2<f64>>>, Vec<Array2<f64>>)> {
    let (value, grads) = proxy_alignment_backward_impl(embs, proxies, tau, true)?;
    let (d_embs, d_proxies) = grads.expect("gradients requested");
    Ok((value, d_embs, d_proxies))
}

#[allow(clippy::type_complexity)]
fn proxy_alignment_backward_impl(
    embs: &[Option<&Array2<f64>>],
    proxies: &[Array2<f64>],
    tau: f64,
    want_grads: bool,
) -> Result<(f64, Option<(Vec<Option<Array2<f64>>>, Vec<Array2<f64>>)>)> {
    if embs.len() != proxies.len() {
        return Err(Error::spec("one embedding set per class expected"));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::spec(format!("tau must be positive, got {tau}")));
    }
    let present: Vec<usize> = (0..embs.len())
        .filter(|&c| embs[c].map(|m| m.nrows() > 0).unwrap_or(false))
        .collect();
    if present.is_empty() {
        return Err(Error::spec(
            "proxy alignment needs at least one class with samples",
        ));
    }

    let mut d_embs: Vec<Option<Array2<f64>>> = vec![None; embs.len()];
    let mut d_proxies: Vec<Array2<f64>> = proxies.iter().map(|p| Array2::zeros(p.dim())).collect();
    let class_weight = 1.0 / present.len() as f64;
    let mut total = 0.0;

    for &c in &present {
        let x = embs[c].expect("present class");
        let p_mat = &proxies[c];
        if x.ncols() != p_mat.ncols() {
            return Err(Error::spec(format!(
                "class {c}: embedding dim {} vs proxy dim {}",
                x.ncols(),
                p_mat.ncols()
            )));
        }
        let n = x.nrows() as f64;
        let k = p_mat.nrows();
        // similarities scaled by temperature
        let s = x.dot(&p_mat.t()) / tau;
        let mut d_s = want_grads.then(|| Array2::zeros(s.dim()));

        let mut class_sum = 0.0;
        for (i, row) in s.rows().into_iter().enumerate() {
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for e in &mut exps {
                *e /= z;
            }
            let entropy: f64 = exps
                .iter()
                .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
                .sum();
            class_sum += entropy;
            if let Some(ds) = d_s.as_mut() {
                // d entropy / d s_j = -p_j (ln p_j + H)
                for j in 0..k {
                    let p = exps[j];
                    let g = if p > 0.0 { -p * (p.ln() + entropy) } else { 0.0 };
                    ds[(i, j)] = class_weight * g / n;
                }
            }
        }
        total += class_weight * class_sum / n;

        if let Some(ds) = d_s {
            // s = x p^T / tau
            d_embs[c] = Some(ds.dot(p_mat) / tau);
            d_proxies[c] += &(ds.t().dot(x) / tau);
        }
    }

    Ok((total, want_grads.then_some((d_embs, d_proxies))))
}

/// Negative mean pairwise proxy distance, averaged over classes. Zero when
/// `K = 1` (no pairs) or when proxies coincide.
pub fn intra_diversity(proxies: &[Array2<f64>]) -> f64 {
    intra_diversity_backward_impl(proxies, false).0
}

pub fn intra_diversity_backward(proxies: &[Array2<f64>]) -> (f64, Vec<Array2<f64>>) {
    let (v, g) = intra_diversity_backward_impl(proxies, true);
    (v, g.expect("gradients requested"))
}

fn intra_diversity_backward_impl(
    proxies: &[Array2<f64>],
    want_grads: bool,
) -> (f64, Option<Vec<Array2<f64>>>) {
    let n_classes = proxies.len();
    let mut grads = want_grads
        .then(|| proxies.iter().map(|p| Array2::zeros(p.dim())).collect::<Vec<_>>());
    let mut total = 0.0;
    for (c, p) in proxies.iter().enumerate() {
        let k = p.nrows();
        if k < 2 {
            continue;
        }
        let pairs = (k * (k - 1) / 2) as f64;
        let scale = -1.0 / (n_classes as f64 * pairs);
        for i in 0..k {
            for j in (i + 1)..k {
                let diff = &p.row(i) - &p.row(j);
                let dist = diff.dot(&diff).sqrt();
                total += scale * dist;
                if dist > 0.0 {
                    if let Some(g) = grads.as_mut() {
                        let d_unit = diff.mapv(|v| scale * v / dist);
                        let mut gi = g[c].row_mut(i);
                        gi += &d_unit;
                        let mut gj = g[c].row_mut(j);
                        gj -= &d_unit;
                    }
                }
            }
        }
    }
    (total, grads)
}

/// Hinge over ordered pairs of class proxy centers: positive when two
/// centers are closer than the margin. Zero with fewer than two classes.
pub fn inter_separation(proxies: &[Array2<f64>], margin: f64) -> f64 {
    inter_separation_backward_impl(proxies, margin, false).0
}

pub fn inter_separation_backward(
    proxies: &[Array2<f64>],
    margin: f64,
) -> (f64, Vec<Array2<f64>>) {
    let (v, g) = inter_separation_backward_impl(proxies, margin, true);
    (v, g.expect("gradients requested"))
}

fn inter_separation_backward_impl(
    proxies: &[Array2<f64>],
    margin: f64,
    want_grads: bool,
) -> (f64, Option<Vec<Array2<f64>>>) {
    let c = proxies.len();
    let mut grads = want_grads
        .then(|| proxies.iter().map(|p| Array2::zeros(p.dim())).collect::<Vec<_>>());
    if c < 2 {
        return (0.0, grads);
    }
    let centers: Vec<Array1<f64>> = proxies
        .iter()
        .map(|p| p.mean_axis(ndarray::Axis(0)).expect("K >= 1"))
        .collect();
    let pair_weight = 1.0 / (c * (c - 1)) as f64;
    let mut total = 0.0;
    for c1 in 0..c {
        for c2 in 0..c {
            if c1 == c2 {
                continue;
            }
            let diff = &centers[c1] - &centers[c2];
            let dist = diff.dot(&diff).sqrt();
            if dist < margin {
                total += pair_weight * (margin - dist);
                if dist > 0.0 {
                    if let Some(g) = grads.as_mut() {
                        // d/d center_{c1} of (m - dist) is -diff/dist; rows of a
                        // class share it through the mean (1/K each).
                        let k1 = proxies[c1].nrows() as f64;
                        let k2 = proxies[c2].nrows() as f64;
                        for gi in 0..proxies[c1].nrows() {
                            let mut row = g[c1].row_mut(gi);
                            row.zip_mut_with(&diff, |r, &d| {
                                *r -= pair_weight * d / (dist * k1);
                            });
                        }
                        for gi in 0..proxies[c2].nrows() {
                            let mut row = g[c2].row_mut(gi);
                            row.zip_mut_with(&diff, |r, &d| {
                                *r += pair_weight * d / (dist * k2);
                            });
                        }
                    }
                }
            }
        }
    }
    (total, grads)
}

/// The combined multi-proxy loss:
/// alignment + lambda_intra * intra + lambda_inter * inter.
pub fn multi_proxy(
    embs: &[Option<&Array2<f64>>],
    proxies: &[Array2<f64>],
    w: &LossWeights,
) -> Result<f64> {
    Ok(proxy_alignment(embs, proxies, w.tau)?
        + w.lambda_intra * intra_diversity(proxies)
        + w.lambda_inter * inter_separation(proxies, w.margin))
}

// ---------------------------------------------------------------------------
// invariant gradient alignment
// ---------------------------------------------------------------------------

/// Logits and labels of one environment's batch.
pub struct EnvLogits<'a> {
    pub logits: &'a [f64],
    pub labels: &'a [Label],
}

/// For each environment, the risk is perturbed by a multiplicative dummy
/// scalar `s` on the logit; the penalty is the squared risk gradient at
/// `s = 1`, averaged over environments:
///
/// `g_e = mean_i (sigmoid(z_i) - y_i) * z_i`, penalty `= mean_e g_e^2`.
pub fn grad_alignment_penalty(envs: &[EnvLogits]) -> Result<f64> {
    Ok(grad_alignment_backward_impl(envs, false)?.0)
}

/// Value plus `d(penalty)/d(logits)` per environment. Because `g_e` depends
/// on parameters only through the logits, this single upstream gradient makes
/// the parameter-level gradient exact:
/// `d g_e/d z_i = (sigmoid'(z_i) * z_i + sigmoid(z_i) - y_i) / n_e`.
pub fn grad_alignment_backward(envs: &[EnvLogits]) -> Result<(f64, Vec<Array1<f64>>)> {
    let (v, g) = grad_alignment_backward_impl(envs, true)?;
    Ok((v, g.expect("gradients requested")))
}

fn grad_alignment_backward_impl(
    envs: &[EnvLogits],
    want_grads: bool,
) -> Result<(f64, Option<Vec<Array1<f64>>>)> {
    if envs.len() < 2 {
        return Err(Error::spec(format!(
            "gradient alignment needs at least 2 environments, got {}",
            envs.len()
        )));
    }
    for (e, env) in envs.iter().enumerate() {
        if env.logits.is_empty() || env.logits.len() != env.labels.len() {
            return Err(Error::spec(format!(
                "environment {e} has an empty or mismatched batch"
            )));
        }
    }
    let n_envs = envs.len() as f64;
    let mut total = 0.0;
    let mut grads = want_grads.then(Vec::new);
    for env in envs {
        let n = env.logits.len() as f64;
        let g_e: f64 = env
            .logits
            .iter()
            .zip(env.labels)
            .map(|(&z, &y)| (sigmoid(z) - y.as_f64()) * z)
            .sum::<f64>()
            / n;
        total += g_e * g_e / n_envs;
        if let Some(gs) = grads.as_mut() {
            let upstream = 2.0 * g_e / (n_envs * n);
            let d: Array1<f64> = env
                .logits
                .iter()
                .zip(env.labels)
                .map(|(&z, &y)| {
                    let s = sigmoid(z);
                    upstream * (s * (1.0 - s) * z + s - y.as_f64())
                })
                .collect();
            gs.push(d);
        }
    }
    Ok((total, grads))
}

/// Mini-batches grouped by environment (the unit the stage-2 penalty
/// consumes).
pub struct BatchByEnv {
    pub envs: Vec<EnvBatch>,
}

pub struct EnvBatch {
    pub features: Vec<Vec<u32>>,
    pub labels: Vec<Label>,
}

/// Convenience wrapper: run the model on each environment's batch and apply
/// [`grad_alignment_penalty`].
pub fn iga_penalty(state: &ModelState, batches: &BatchByEnv) -> Result<f64> {
    let mut logit_store = Vec::with_capacity(batches.envs.len());
    for env in &batches.envs {
        let batch = InputBatch {
            rows: env.features.iter().map(|f| (f.as_slice(), 1.0)).collect(),
        };
        logit_store.push(state.logits_batch(&batch).to_vec());
    }
    let envs: Vec<EnvLogits> = logit_store
        .iter()
        .zip(&batches.envs)
        .map(|(logits, env)| EnvLogits {
            logits,
            labels: &env.labels,
        })
        .collect();
    grad_alignment_penalty(&envs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn rand_unit_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        let mut m = rand_mat(rng, r, c);
        crate::model::unit_normalize_rows(&mut m);
        m
    }

    // ---- classification -------------------------------------------------

    #[test]
    fn bce_fixed_points() {
        assert!((bce_with_logits(&[0.0], &[Label::Malware]).unwrap() - LN2).abs() < 1e-12);
        let saturated = bce_with_logits(&[20.0], &[Label::Malware]).unwrap();
        assert!(saturated < 1e-8 && saturated > 0.0);
        assert!((saturated - 2.061e-9).abs() < 1e-10);
    }

    #[test]
    fn bce_matches_naive_formula_away_from_saturation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let z = rng.random::<f64>() * 16.0 - 8.0;
            let y = if rng.random::<bool>() { Label::Malware } else { Label::Benign };
            let stable = bce_with_logits(&[z], &[y]).unwrap();
            let p = sigmoid(z);
            let naive = -(y.as_f64() * p.ln() + (1.0 - y.as_f64()) * (1.0 - p).ln());
            assert!((stable - naive).abs() < 1e-9, "z={z}");
        }
    }

    #[test]
    fn bce_empty_batch_errors() {
        assert!(bce_with_logits(&[], &[]).is_err());
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut logits: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let labels: Vec<Label> = (0..6)
            .map(|i| if i % 2 == 0 { Label::Malware } else { Label::Benign })
            .collect();
        let (_, grad) = bce_backward(&logits, &labels, 1.0).unwrap();
        let eps = 1e-6;
        for i in 0..logits.len() {
            let orig = logits[i];
            logits[i] = orig + eps;
            let up = bce_with_logits(&logits, &labels).unwrap();
            logits[i] = orig - eps;
            let down = bce_with_logits(&logits, &labels).unwrap();
            logits[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - grad[i]).abs() < 1e-7);
        }
    }

    // ---- proxy alignment -------------------------------------------------

    #[test]
    fn equal_similarities_give_ln_k() {
        // two identical proxies make every similarity equal
        let p = Array2::from_shape_fn((2, 4), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        let x = {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            rand_unit_rows(&mut rng, 5, 4)
        };
        let v = proxy_alignment(&[Some(&x)], &[p], 0.1).unwrap();
        assert!((v - LN2).abs() < 1e-12);
    }

    #[test]
    fn single_proxy_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = rand_unit_rows(&mut rng, 1, 4);
        let x = rand_unit_rows(&mut rng, 3, 4);
        let v = proxy_alignment(&[Some(&x)], &[p], 0.1).unwrap();
        assert!(v.abs() < 1e-12);
    }

    /// Independent scalar-loop oracle for the assignment entropy.
    fn alignment_oracle(embs: &[Option<&Array2<f64>>], proxies: &[Array2<f64>], tau: f64) -> f64 {
        let mut class_values = Vec::new();
        for (c, x) in embs.iter().enumerate() {
            let Some(x) = x else { continue };
            if x.nrows() == 0 {
                continue;
            }
            let p = &proxies[c];
            let mut acc = 0.0;
            for i in 0..x.nrows() {
                let sims: Vec<f64> = (0..p.nrows())
                    .map(|j| {
                        let mut s = 0.0;
                        for d in 0..x.ncols() {
                            s += x[(i, d)] * p[(j, d)];
                        }
                        s / tau
                    })
                    .collect();
                let mx = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = sims.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for e in &exps {
                    let pij = e / z;
                    if pij > 0.0 {
                        acc -= pij * pij.ln();
                    }
                }
            }
            class_values.push(acc / x.nrows() as f64);
        }
        class_values.iter().sum::<f64>() / class_values.len() as f64
    }

    #[test]
    fn alignment_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let h = rng.random_range(2..6);
            let k = rng.random_range(1..5);
            let nb = rng.random_range(1..6);
            let nm = rng.random_range(1..6);
            let xb = rand_unit_rows(&mut rng, nb, h);
            let xm = rand_unit_rows(&mut rng, nm, h);
            let pb = rand_unit_rows(&mut rng, k, h);
            let pm = rand_unit_rows(&mut rng, k, h);
            let tau = 0.05 + rng.random::<f64>();
            let embs = [Some(&xb), Some(&xm)];
            let proxies = [pb, pm];
            let got = proxy_alignment(&embs, &proxies, tau).unwrap();
            let want = alignment_oracle(&embs, &proxies, tau);
            assert!((got - want).abs() < 1e-8);
            assert!(got >= -1e-12 && got <= (k as f64).ln() + 1e-9);
        }
    }

    #[test]
    fn alignment_three_random_embeddings_k3() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_unit_rows(&mut rng, 3, 5);
        let p = rand_unit_rows(&mut rng, 3, 5);
        let got = proxy_alignment(&[Some(&x)], std::slice::from_ref(&p), 0.1).unwrap();
        let want = alignment_oracle(&[Some(&x)], std::slice::from_ref(&p), 0.1);
        assert!((got - want).abs() < 1e-8);
    }

    #[test]
    fn absent_class_skipped_and_all_absent_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_unit_rows(&mut rng, 4, 3);
        let pb = rand_unit_rows(&mut rng, 2, 3);
        let pm = rand_unit_rows(&mut rng, 2, 3);
        let proxies = [pb, pm];
        let only_benign = proxy_alignment(&[Some(&x), None], &proxies, 0.2).unwrap();
        let solo = proxy_alignment(&[Some(&x)], &proxies[..1], 0.2).unwrap();
        assert!((only_benign - solo).abs() < 1e-12);
        assert!(proxy_alignment(&[None, None], &proxies, 0.2).is_err());
    }

    #[test]
    fn temperature_scaling_identity() {
        // pal(X, P, tau*t) equals pal computed from similarities divided by t
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_unit_rows(&mut rng, 6, 4);
        let p = rand_unit_rows(&mut rng, 3, 4);
        let t = 2.5;
        let lhs = proxy_alignment(&[Some(&x)], std::slice::from_ref(&p), 0.1 * t).unwrap();
        let scaled_x = x.mapv(|v| v / t);
        let rhs = proxy_alignment(&[Some(&scaled_x)], std::slice::from_ref(&p), 0.1).unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn alignment_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_unit_rows(&mut rng, 4, 3);
        let p = rand_unit_rows(&mut rng, 2, 3);
        let tau = 0.3;
        let (_, d_embs, d_proxies) =
            proxy_alignment_backward(&[Some(&x)], std::slice::from_ref(&p), tau).unwrap();
        let dx = d_embs[0].as_ref().unwrap();
        let eps = 1e-6;

        let mut x2 = x.clone();
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let orig = x2[(i, j)];
                x2[(i, j)] = orig + eps;
                let up = proxy_alignment(&[Some(&x2)], std::slice::from_ref(&p), tau).unwrap();
                x2[(i, j)] = orig - eps;
                let down = proxy_alignment(&[Some(&x2)], std::slice::from_ref(&p), tau).unwrap();
                x2[(i, j)] = orig;
                let fd = (up - down) / (2.0 * eps);
                assert!(
                    (fd - dx[(i, j)]).abs() <= 1e-6 * fd.abs().max(1.0),
                    "emb ({i},{j})"
                );
            }
        }
        let mut p2 = p.clone();
        for i in 0..p.nrows() {
            for j in 0..p.ncols() {
                let orig = p2[(i, j)];
                p2[(i, j)] = orig + eps;
                let up = proxy_alignment(&[Some(&x)], std::slice::from_ref(&p2), tau).unwrap();
                p2[(i, j)] = orig - eps;
                let down = proxy_alignment(&[Some(&x)], std::slice::from_ref(&p2), tau).unwrap();
                p2[(i, j)] = orig;
                let fd = (up - down) / (2.0 * eps);
                assert!(
                    (fd - d_proxies[0][(i, j)]).abs() <= 1e-6 * fd.abs().max(1.0),
                    "proxy ({i},{j})"
                );
            }
        }
    }

    // ---- intra diversity ---------------------------------------------------

    #[test]
    fn intra_fixed_points() {
        // one class, two proxies at unit distance -> -1
        let p = Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((intra_diversity(&[p]) + 1.0).abs() < 1e-12);
        // identical proxies -> 0
        let p = Array2::from_shape_vec((3, 2), vec![0.3, 0.4, 0.3, 0.4, 0.3, 0.4]).unwrap();
        assert_eq!(intra_diversity(&[p]), 0.0);
        // K = 1 -> 0 (empty pair set)
        let p = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        assert_eq!(intra_diversity(&[p]), 0.0);
    }

    #[test]
    fn intra_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..30 {
            let k = rng.random_range(2..6);
            let h = rng.random_range(2..6);
            let pb = rand_mat(&mut rng, k, h);
            let pm = rand_mat(&mut rng, k, h);
            let got = intra_diversity(&[pb.clone(), pm.clone()]);
            let mut want = 0.0;
            for p in [&pb, &pm] {
                let pairs = (k * (k - 1) / 2) as f64;
                let mut acc = 0.0;
                for i in 0..k {
                    for j in (i + 1)..k {
                        let mut d2 = 0.0;
                        for c in 0..h {
                            d2 += (p[(i, c)] - p[(j, c)]).powi(2);
                        }
                        acc += d2.sqrt();
                    }
                }
                want -= acc / (2.0 * pairs);
            }
            assert!((got - want).abs() < 1e-10);
            assert!(got <= 1e-12);
        }
    }

    #[test]
    fn intra_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = rand_mat(&mut rng, 4, 3);
        let (_, grads) = intra_diversity_backward(std::slice::from_ref(&p));
        let eps = 1e-6;
        let mut p2 = p.clone();
        for i in 0..4 {
            for j in 0..3 {
                let orig = p2[(i, j)];
                p2[(i, j)] = orig + eps;
                let up = intra_diversity(std::slice::from_ref(&p2));
                p2[(i, j)] = orig - eps;
                let down = intra_diversity(std::slice::from_ref(&p2));
                p2[(i, j)] = orig;
                let fd = (up - down) / (2.0 * eps);
                assert!((fd - grads[0][(i, j)]).abs() < 1e-6);
            }
        }
    }

    // ---- inter separation ---------------------------------------------------

    #[test]
    fn inter_fixed_points() {
        // centers at distance >= margin -> 0
        let pb = Array2::from_shape_vec((1, 2), vec![0.0, 0.0]).unwrap();
        let pm = Array2::from_shape_vec((1, 2), vec![2.0, 0.0]).unwrap();
        assert_eq!(inter_separation(&[pb, pm], 1.0), 0.0);
        // distance 0.4, margin 1 -> both ordered pairs contribute 0.6 -> mean 0.6
        let pb = Array2::from_shape_vec((1, 2), vec![0.0, 0.0]).unwrap();
        let pm = Array2::from_shape_vec((1, 2), vec![0.4, 0.0]).unwrap();
        assert!((inter_separation(&[pb, pm], 1.0) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn inter_matches_loop_oracle_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..30 {
            let k = rng.random_range(1..4);
            let h = rng.random_range(2..5);
            let pb = rand_mat(&mut rng, k, h).mapv(|v| v * 0.3);
            let pm = rand_mat(&mut rng, k, h).mapv(|v| v * 0.3);
            let m = 1.0;
            let got = inter_separation(&[pb.clone(), pm.clone()], m);
            // loop oracle over ordered pairs
            let center = |p: &Array2<f64>| -> Vec<f64> {
                (0..p.ncols())
                    .map(|c| (0..p.nrows()).map(|r| p[(r, c)]).sum::<f64>() / p.nrows() as f64)
                    .collect()
            };
            let cb = center(&pb);
            let cm = center(&pm);
            let dist = cb
                .iter()
                .zip(&cm)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let want = if dist < m { m - dist } else { 0.0 };
            assert!((got - want).abs() < 1e-10, "trial {trial}");

            let (_, grads) = inter_separation_backward(&[pb.clone(), pm.clone()], m);
            if dist > 1e-9 && (dist - m).abs() > 1e-6 {
                let eps = 1e-6;
                let mut pb2 = pb.clone();
                let orig = pb2[(0, 0)];
                pb2[(0, 0)] = orig + eps;
                let up = inter_separation(&[pb2.clone(), pm.clone()], m);
                pb2[(0, 0)] = orig - eps;
                let down = inter_separation(&[pb2.clone(), pm.clone()], m);
                let fd = (up - down) / (2.0 * eps);
                assert!((fd - grads[0][(0, 0)]).abs() < 1e-6, "trial {trial}");
            }
        }
    }

    // ---- multi-proxy composition ---------------------------------------------

    #[test]
    fn multi_proxy_composes_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let xb = rand_unit_rows(&mut rng, 5, 4);
        let xm = rand_unit_rows(&mut rng, 3, 4);
        let pb = rand_unit_rows(&mut rng, 3, 4);
        let pm = rand_unit_rows(&mut rng, 3, 4);
        let proxies = [pb, pm];
        let embs = [Some(&xb), Some(&xm)];
        let w = LossWeights {
            lambda_intra: 0.25,
            lambda_inter: 0.75,
            tau: 0.2,
            margin: 1.3,
            ..LossWeights::default()
        };
        let total = multi_proxy(&embs, &proxies, &w).unwrap();
        let want = proxy_alignment(&embs, &proxies, 0.2).unwrap()
            + 0.25 * intra_diversity(&proxies)
            + 0.75 * inter_separation(&proxies, 1.3);
        assert!((total - want).abs() < 1e-10);

        let zero = LossWeights {
            lambda_intra: 0.0,
            lambda_inter: 0.0,
            tau: 0.2,
            ..LossWeights::default()
        };
        let only_pal = multi_proxy(&embs, &proxies, &zero).unwrap();
        assert!((only_pal - proxy_alignment(&embs, &proxies, 0.2).unwrap()).abs() < 1e-12);
    }

    // ---- gradient alignment ---------------------------------------------------

    #[test]
    fn iga_fixed_points() {
        let zeros = vec![0.0; 4];
        let labels = vec![Label::Malware, Label::Benign, Label::Malware, Label::Benign];
        let envs = vec![
            EnvLogits { logits: &zeros, labels: &labels },
            EnvLogits { logits: &zeros, labels: &labels },
        ];
        assert_eq!(grad_alignment_penalty(&envs).unwrap(), 0.0);

        // calibrated saturation: sigmoid(z) -> 1 with y = 1
        let sat = vec![40.0];
        let sat_labels = vec![Label::Malware];
        let envs = vec![
            EnvLogits { logits: &sat, labels: &sat_labels },
            EnvLogits { logits: &sat, labels: &sat_labels },
        ];
        assert!(grad_alignment_penalty(&envs).unwrap() < 1e-12);
    }

    #[test]
    fn iga_matches_scalar_oracle_and_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let z1: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let z2: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let y1 = vec![Label::Malware, Label::Benign, Label::Benign, Label::Malware];
        let y2 = vec![Label::Benign, Label::Benign, Label::Malware, Label::Malware];

        let value = grad_alignment_penalty(&[
            EnvLogits { logits: &z1, labels: &y1 },
            EnvLogits { logits: &z2, labels: &y2 },
        ])
        .unwrap();

        let g = |z: &[f64], y: &[Label]| -> f64 {
            let mut acc = 0.0;
            for (zi, yi) in z.iter().zip(y) {
                acc += (sigmoid(*zi) - yi.as_f64()) * zi;
            }
            acc / z.len() as f64
        };
        let want = (g(&z1, &y1).powi(2) + g(&z2, &y2).powi(2)) / 2.0;
        assert!((value - want).abs() < 1e-12);
        assert!(value >= 0.0);

        // permute samples within an environment
        let z1p = vec![z1[2], z1[0], z1[3], z1[1]];
        let y1p = vec![y1[2], y1[0], y1[3], y1[1]];
        let permuted = grad_alignment_penalty(&[
            EnvLogits { logits: &z1p, labels: &y1p },
            EnvLogits { logits: &z2, labels: &y2 },
        ])
        .unwrap();
        assert!((value - permuted).abs() < 1e-12);

        // permute environment order
        let swapped = grad_alignment_penalty(&[
            EnvLogits { logits: &z2, labels: &y2 },
            EnvLogits { logits: &z1, labels: &y1 },
        ])
        .unwrap();
        assert!((value - swapped).abs() < 1e-12);
    }

    #[test]
    fn iga_logit_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut z1: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let z2: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let y1 = vec![Label::Malware, Label::Benign, Label::Benign, Label::Malware];
        let y2 = vec![Label::Benign, Label::Malware, Label::Malware, Label::Benign];

        let (_, grads) = grad_alignment_backward(&[
            EnvLogits { logits: &z1, labels: &y1 },
            EnvLogits { logits: &z2, labels: &y2 },
        ])
        .unwrap();

        let eps = 1e-6;
        for i in 0..4 {
            let orig = z1[i];
            z1[i] = orig + eps;
            let up = grad_alignment_penalty(&[
                EnvLogits { logits: &z1, labels: &y1 },
                EnvLogits { logits: &z2, labels: &y2 },
            ])
            .unwrap();
            z1[i] = orig - eps;
            let down = grad_alignment_penalty(&[
                EnvLogits { logits: &z1, labels: &y1 },
                EnvLogits { logits: &z2, labels: &y2 },
            ])
            .unwrap();
            z1[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - grads[0][i]).abs() < 1e-7, "logit {i}");
        }
    }

    #[test]
    fn iga_error_paths() {
        let z = vec![0.1];
        let y = vec![Label::Malware];
        assert!(grad_alignment_penalty(&[EnvLogits { logits: &z, labels: &y }]).is_err());
        let empty: Vec<f64> = vec![];
        let no_labels: Vec<Label> = vec![];
        assert!(grad_alignment_penalty(&[
            EnvLogits { logits: &z, labels: &y },
            EnvLogits { logits: &empty, labels: &no_labels },
        ])
        .is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights { tau: 0.0, ..LossWeights::default() };
        assert!(bad.validate().is_err());
        let bad = LossWeights { alpha: -1.0, ..LossWeights::default() };
        assert!(bad.validate().is_err());
        let bad = LossWeights { margin: 0.0, ..LossWeights::default() };
        assert!(bad.validate().is_err());
    }
}
