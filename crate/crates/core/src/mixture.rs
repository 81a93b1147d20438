//! Per-pixel mixture-of-experts mathematics.
//!
//! A gating field turns K logit channels into mixture weights through a
//! temperature-scaled softmax; expert depth maps are fused as the weighted
//! combination of the expert predictions. Training minimizes the mixture
//! negative log-likelihood under per-expert Gaussians with a shared global
//! standard deviation, plus an entropy regularizer that drives the gate
//! toward confident (nearly one-hot) assignments. All gradients here are
//! exact analytic derivatives, including the softmax Jacobian back to the
//! logits; they are checked against central finite differences in the tests.
//!
//! Losses use mean reduction over valid pixels so their magnitude is
//! resolution-independent. Valid means: not excluded by the optional mask,
//! and (for the likelihood) a finite ground-truth value.

use crate::error::{ensure, Result};
use crate::grid::{Grid, GridStack, MaskGrid};

const LN_2PI: f64 = 1.8378770664093453; // ln(2*pi)

/// Gate logits, the softmax temperature, and the resulting mixture weights.
///
/// Per pixel the weights are nonnegative, sum to 1 within 1e-12, and are the
/// temperature-scaled softmax of the logits.
#[derive(Debug, Clone)]
pub struct GateField {
    logits: GridStack,
    temperature: f64,
    weights: GridStack,
}

impl GateField {
    /// Temperature-scaled softmax of the logits:
    /// `w_k = exp((G_k - max_j G_j)/tau) / sum_k' exp((G_k' - max_j G_j)/tau)`.
    pub fn softmax(logits: &GridStack, temperature: f64) -> Result<GateField> {
        ensure(temperature > 0.0, || {
            format!("softmax temperature must be positive, got {temperature}")
        })?;
        ensure(logits.iter().all(Grid::all_finite), || {
            "gate logits must be finite".into()
        })?;
        let k = logits.channels();
        let (h, w) = (logits.height(), logits.width());
        let mut weights = GridStack::zeros(k, h, w);
        let mut scaled = vec![0.0; k];
        for i in 0..h * w {
            let mut max = f64::NEG_INFINITY;
            for c in 0..k {
                max = max.max(logits.channel(c).data()[i]);
            }
            let mut sum = 0.0;
            for c in 0..k {
                let e = ((logits.channel(c).data()[i] - max) / temperature).exp();
                scaled[c] = e;
                sum += e;
            }
            for c in 0..k {
                weights.channel_mut(c).data_mut()[i] = scaled[c] / sum;
            }
        }
        Ok(GateField {
            logits: logits.clone(),
            temperature,
            weights,
        })
    }

    /// Builds a gate directly from mixture weights (used for hard one-hot
    /// gates). Stored logits are `ln w`, under which the unit-temperature
    /// softmax reproduces the weights; zero weights map to `-inf` logits and
    /// reproduce exact zeros.
    pub fn from_weights(weights: GridStack) -> Result<GateField> {
        for i in 0..weights.height() * weights.width() {
            let mut sum = 0.0;
            for c in 0..weights.channels() {
                let v = weights.channel(c).data()[i];
                ensure((0.0..=1.0 + 1e-9).contains(&v), || {
                    format!("gate weight out of range at pixel {i}: {v}")
                })?;
                sum += v;
            }
            ensure((sum - 1.0).abs() <= 1e-9, || {
                format!("gate weights must sum to 1, got {sum} at pixel {i}")
            })?;
        }
        let logits = GridStack::new(
            weights
                .iter()
                .map(|g| {
                    Grid::new(g.height(), g.width(), g.data().iter().map(|&v| v.ln()).collect())
                })
                .collect::<Result<_>>()?,
        )?;
        Ok(GateField {
            logits,
            temperature: 1.0,
            weights,
        })
    }

    #[inline]
    pub fn weights(&self) -> &GridStack {
        &self.weights
    }

    #[inline]
    pub fn logits(&self) -> &GridStack {
        &self.logits
    }

    #[inline]
    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.weights.channels()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.weights.height()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.weights.width()
    }

    /// Index of the maximal weight per pixel; ties break toward the lowest
    /// expert index, which keeps the result deterministic and
    /// order-independent.
    pub fn argmax(&self) -> Grid {
        let (h, w) = (self.height(), self.width());
        Grid::from_fn(h, w, |y, x| {
            let i = y * w + x;
            let mut best = 0;
            for c in 1..self.channels() {
                if self.weights.channel(c).data()[i] > self.weights.channel(best).data()[i] {
                    best = c;
                }
            }
            best as f64
        })
    }

    /// Maximum gate weight per pixel — the head's per-pixel certainty
    /// signal, used as the confidence proxy for masking.
    pub fn max_weight(&self) -> Grid {
        let (h, w) = (self.height(), self.width());
        Grid::from_fn(h, w, |y, x| {
            let i = y * w + x;
            (0..self.channels())
                .map(|c| self.weights.channel(c).data()[i])
                .fold(f64::NEG_INFINITY, f64::max)
        })
    }

    /// True when every pixel's weights are one-hot within `tol`.
    pub fn is_one_hot(&self, tol: f64) -> bool {
        let n = self.height() * self.width();
        for i in 0..n {
            for c in 0..self.channels() {
                let v = self.weights.channel(c).data()[i];
                if v.min(1.0 - v).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

/// Fuses expert depths under a gate. Soft mode returns the weighted
/// combination `sum_k w_k(p) * D_k(p)`; hard mode returns the argmax
/// expert's prediction.
pub fn combine(expert_depths: &GridStack, gate: &GateField, hard: bool) -> Result<Grid> {
    ensure(expert_depths.same_shape(gate.weights()), || {
        format!(
            "expert depths {}x{}x{} do not match gate {}x{}x{}",
            expert_depths.channels(),
            expert_depths.height(),
            expert_depths.width(),
            gate.channels(),
            gate.height(),
            gate.width()
        )
    })?;
    let (h, w) = (expert_depths.height(), expert_depths.width());
    if hard {
        let idx = gate.argmax();
        Ok(Grid::from_fn(h, w, |y, x| {
            expert_depths.channel(idx.at(y, x) as usize).at(y, x)
        }))
    } else {
        let mut out = Grid::zeros(h, w);
        for c in 0..expert_depths.channels() {
            let wk = gate.weights().channel(c).data();
            let dk = expert_depths.channel(c).data();
            for (o, (&wv, &dv)) in out.data_mut().iter_mut().zip(wk.iter().zip(dk)) {
                *o += wv * dv;
            }
        }
        Ok(out)
    }
}

/// Per-pixel gate, expert depth maps, and their soft fusion.
#[derive(Debug, Clone)]
pub struct MixtureOutput {
    expert_depths: GridStack,
    gate: GateField,
    fused_depth: Grid,
}

impl MixtureOutput {
    pub fn new(expert_depths: GridStack, gate: GateField) -> Result<Self> {
        let fused_depth = combine(&expert_depths, &gate, false)?;
        Ok(Self {
            expert_depths,
            gate,
            fused_depth,
        })
    }

    #[inline]
    pub fn expert_depths(&self) -> &GridStack {
        &self.expert_depths
    }

    #[inline]
    pub fn gate(&self) -> &GateField {
        &self.gate
    }

    #[inline]
    pub fn fused_depth(&self) -> &Grid {
        &self.fused_depth
    }

    pub fn channels(&self) -> usize {
        self.expert_depths.channels()
    }
}

/// Loss weights: `sigma` is the shared Gaussian standard deviation,
/// `lambda_d` scales the likelihood term, `lambda_e` the entropy
/// regularizer. The optional mask excludes pixels from both terms.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub sigma: f64,
    pub lambda_d: f64,
    pub lambda_e: f64,
    pub valid_mask: Option<MaskGrid>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            lambda_d: 1.0,
            lambda_e: 1e-4,
            valid_mask: None,
        }
    }
}

/// Gradients of a loss with respect to the expert depth maps and the gate
/// logits.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub expert_means: GridStack,
    pub logits: GridStack,
}

impl LossGrads {
    fn zeros(k: usize, h: usize, w: usize) -> Self {
        Self {
            expert_means: GridStack::zeros(k, h, w),
            logits: GridStack::zeros(k, h, w),
        }
    }

    fn scaled_add(&mut self, other: &LossGrads, factor: f64) {
        for c in 0..self.expert_means.channels() {
            for (a, &b) in self.expert_means.channel_mut(c).data_mut().iter_mut()
                .zip(other.expert_means.channel(c).data())
            {
                *a += factor * b;
            }
            for (a, &b) in self.logits.channel_mut(c).data_mut().iter_mut()
                .zip(other.logits.channel(c).data())
            {
                *a += factor * b;
            }
        }
    }
}

fn valid_at(mask: Option<&MaskGrid>, i: usize) -> bool {
    mask.is_none_or(|m| m.data()[i])
}

/// Mixture negative log-likelihood with mean reduction over valid pixels.
///
/// `loss = -mean_p log sum_k w_k(p) N(d*_p; mu_k(p), sigma^2)` with the full
/// Gaussian normalization `1/(sigma sqrt(2 pi))`. Pixels with non-finite
/// ground truth (or excluded by the mask) are skipped. The per-pixel
/// log-sum is evaluated by factoring out the largest component density, so
/// it stays finite even when every residual is tens of sigmas wide.
///
/// Returned gradients are exact: with responsibilities
/// `r_k = w_k N_k / sum_j w_j N_j`,
///
/// - `d loss/d mu_k   = -r_k (d* - mu_k) / sigma^2 / |valid|`
/// - `d loss/d G_k    =  (w_k - r_k) / (tau |valid|)`
pub fn mixture_nll(
    output: &MixtureOutput,
    gt_depth: &Grid,
    cfg: &LossConfig,
) -> Result<(f64, LossGrads)> {
    ensure(cfg.sigma > 0.0, || format!("sigma must be positive, got {}", cfg.sigma))?;
    ensure(gt_depth.same_shape(output.fused_depth()), || {
        "ground-truth dimensions do not match the mixture output".into()
    })?;
    if let Some(m) = &cfg.valid_mask {
        ensure(m.height() == gt_depth.height() && m.width() == gt_depth.width(), || {
            "valid mask dimensions do not match".into()
        })?;
    }
    let k = output.channels();
    let (h, w) = (gt_depth.height(), gt_depth.width());
    let gate = output.gate();
    let tau = gate.temperature();
    let inv_var = 1.0 / (cfg.sigma * cfg.sigma);
    let log_norm = -(cfg.sigma.ln() + 0.5 * LN_2PI);

    let mut grads = LossGrads::zeros(k, h, w);
    let mut loss_sum = 0.0;
    let mut valid = 0usize;
    let mut exps = vec![0.0; k];

    for i in 0..h * w {
        let d_star = gt_depth.data()[i];
        if !d_star.is_finite() || !valid_at(cfg.valid_mask.as_ref(), i) {
            continue;
        }
        valid += 1;
        // Log-density exponents e_k = -(d*-mu_k)^2 / (2 sigma^2), shifted by
        // the max over experts with nonzero weight before exponentiating.
        let mut max_e = f64::NEG_INFINITY;
        for c in 0..k {
            if gate.weights().channel(c).data()[i] > 0.0 {
                let r = d_star - output.expert_depths().channel(c).data()[i];
                max_e = max_e.max(-0.5 * r * r * inv_var);
            }
        }
        let mut total = 0.0;
        for c in 0..k {
            let wk = gate.weights().channel(c).data()[i];
            if wk > 0.0 {
                let r = d_star - output.expert_depths().channel(c).data()[i];
                let e = (-0.5 * r * r * inv_var - max_e).exp();
                exps[c] = e;
                total += wk * e;
            } else {
                exps[c] = 0.0;
            }
        }
        loss_sum -= log_norm + max_e + total.ln();
        for c in 0..k {
            let wk = gate.weights().channel(c).data()[i];
            let resp = wk * exps[c] / total;
            let r = d_star - output.expert_depths().channel(c).data()[i];
            grads.expert_means.channel_mut(c).data_mut()[i] = -resp * r * inv_var;
            grads.logits.channel_mut(c).data_mut()[i] = (wk - resp) / tau;
        }
    }
    ensure(valid > 0, || "mixture NLL needs at least one valid pixel".into())?;
    let scale = 1.0 / valid as f64;
    for c in 0..k {
        for v in grads.expert_means.channel_mut(c).data_mut() {
            *v *= scale;
        }
        for v in grads.logits.channel_mut(c).data_mut() {
            *v *= scale;
        }
    }
    Ok((loss_sum * scale, grads))
}

/// Mean per-pixel Shannon entropy of the gate distribution, with the
/// convention `0 log 0 = 0`, and its gradient through the softmax:
/// `d H_p / d G_k = w_k (-ln w_k - H_p) / tau`, averaged over valid pixels.
pub fn gating_entropy(gate: &GateField, valid_mask: Option<&MaskGrid>) -> Result<(f64, GridStack)> {
    if let Some(m) = valid_mask {
        ensure(m.height() == gate.height() && m.width() == gate.width(), || {
            "valid mask dimensions do not match the gate".into()
        })?;
    }
    let k = gate.channels();
    let (h, w) = (gate.height(), gate.width());
    let tau = gate.temperature();
    let mut grad = GridStack::zeros(k, h, w);
    let mut sum = 0.0;
    let mut valid = 0usize;
    for i in 0..h * w {
        if !valid_at(valid_mask, i) {
            continue;
        }
        valid += 1;
        let mut entropy = 0.0;
        for c in 0..k {
            let wk = gate.weights().channel(c).data()[i];
            if wk > 0.0 {
                entropy -= wk * wk.ln();
            }
        }
        sum += entropy;
        for c in 0..k {
            let wk = gate.weights().channel(c).data()[i];
            grad.channel_mut(c).data_mut()[i] = if wk > 0.0 {
                wk * (-wk.ln() - entropy) / tau
            } else {
                0.0
            };
        }
    }
    ensure(valid > 0, || "gating entropy needs at least one valid pixel".into())?;
    let scale = 1.0 / valid as f64;
    for c in 0..k {
        for v in grad.channel_mut(c).data_mut() {
            *v *= scale;
        }
    }
    Ok((sum * scale, grad))
}

/// Loss components: `total = lambda_d * nll + lambda_e * entropy`.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub nll: f64,
    /// Raw mean gate entropy (unweighted by `lambda_e`).
    pub entropy: f64,
}

/// Combined training loss and its gradients, the weighted sum of the
/// likelihood and entropy components.
pub fn total_loss(
    output: &MixtureOutput,
    gt_depth: &Grid,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, LossGrads)> {
    let (nll, nll_grads) = mixture_nll(output, gt_depth, cfg)?;
    let (entropy, entropy_grad_logits) = gating_entropy(output.gate(), cfg.valid_mask.as_ref())?;
    let mut grads = LossGrads::zeros(output.channels(), gt_depth.height(), gt_depth.width());
    grads.scaled_add(&nll_grads, cfg.lambda_d);
    let entropy_grads = LossGrads {
        expert_means: GridStack::zeros(output.channels(), gt_depth.height(), gt_depth.width()),
        logits: entropy_grad_logits,
    };
    grads.scaled_add(&entropy_grads, cfg.lambda_e);
    Ok((
        LossBreakdown {
            total: cfg.lambda_d * nll + cfg.lambda_e * entropy,
            nll,
            entropy,
        },
        grads,
    ))
}

/// Hard-assignment consistency check: with a one-hot gate the mixture NLL
/// must equal the scaled squared error of the selected expert,
/// `MSE/(2 sigma^2) + log(2 pi sigma^2)/2`, to within 1e-9.
///
/// Returns `(nll, scaled_sq_err)`.
pub fn hard_limit_check(output: &MixtureOutput, gt_depth: &Grid, sigma: f64) -> Result<(f64, f64)> {
    ensure(output.gate().is_one_hot(1e-12), || {
        "hard-limit check requires one-hot gate weights".into()
    })?;
    let cfg = LossConfig {
        sigma,
        ..LossConfig::default()
    };
    let (nll, _) = mixture_nll(output, gt_depth, &cfg)?;
    let idx = output.gate().argmax();
    let mut sq_sum = 0.0;
    let mut valid = 0usize;
    for y in 0..gt_depth.height() {
        for x in 0..gt_depth.width() {
            let d_star = gt_depth.at(y, x);
            if !d_star.is_finite() {
                continue;
            }
            let sel = output.expert_depths().channel(idx.at(y, x) as usize).at(y, x);
            sq_sum += (d_star - sel) * (d_star - sel);
            valid += 1;
        }
    }
    ensure(valid > 0, || "hard-limit check needs at least one valid pixel".into())?;
    let mse = sq_sum / valid as f64;
    let scaled = mse / (2.0 * sigma * sigma) + 0.5 * (LN_2PI + 2.0 * sigma.ln());
    Ok((nll, scaled))
}
