//! Attention-driven adversarial attacks.
//!
//! Losses are scalar tape roots built from heat maps and logits; the shared
//! loop perturbs pixels along the mean-abs-normalized gradient,
//!
//! `x <- clip(x - alpha * g / (||g||_1 / N))`,
//!
//! clipped to an l-inf box around the original image, until the RMSE budget
//! `eta` or the iteration cap is hit. Transferability enhancements plug into
//! the same loop: momentum on the normalized gradient, random resize/pad
//! input copies, scaled input copies, and translation-invariant smoothing of
//! the gradient itself.

use crate::error::{AttackError, TapeError, TensorError};
use crate::network::{tape_cross_entropy, Model, TapedForward};
use crate::relevance::{heatmap, heatmap_on_tape, sign_fold, RelevanceConfig};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::{clip_box, normalize_avg_l1, rmse, Real, Tensor};
use serde::{Deserialize, Serialize};

/// Keeps `ln` defined when a heat map's mass reaches exactly zero.
pub const LOG_DELTA: Real = 1e-12;

/// The scalar objective the attack minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    /// `||h_ori||_1`: starve the predicted class of attention.
    Suppress,
    /// `-|| h/max(h) - h_ref/max(h_ref) ||_1`: drag attention away from
    /// where it was on the clean image.
    Distract,
    /// `||h_ori||_1 - ||h_sec||_1`: shift attention mass from the predicted
    /// class to the runner-up.
    Boundary,
    /// `ln(||h_ori||_1 + d) - ln(||h_sec||_1 + d)`: the boundary loss on a
    /// log scale, so both terms matter regardless of their magnitudes.
    LogBoundary,
    /// Log-boundary plus `lambda` times cross-entropy, the combined
    /// attention-and-classification objective.
    Aoa { lambda: Real },
    /// `-CE`: plain projected-gradient cross-entropy ascent.
    PgdCe,
    /// `max(z_ori - max_other, -kappa)`: margin hinge on logits.
    CwHinge { kappa: Real },
}

/// Transferability enhancements. The defaults disable all of them, and any
/// disabled enhancement leaves the attack bit-identical to the plain loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Enhancements {
    /// Decay `mu` for momentum over normalized gradients; 0 disables.
    pub momentum: Real,
    /// Probability that an input copy is randomly resized and padded.
    pub diversity_prob: Real,
    /// Independently transformed copies averaged when diversity is on.
    pub diversity_copies: usize,
    /// Gaussian half-width for gradient smoothing; 0 disables.
    pub translation_halfwidth: usize,
    /// Scaled copies `x / 2^i`, `i = 0..n`; 1 disables.
    pub scale_copies: usize,
}

impl Default for Enhancements {
    fn default() -> Self {
        Enhancements {
            momentum: 0.0,
            diversity_prob: 0.0,
            diversity_copies: 4,
            translation_halfwidth: 0,
            scale_copies: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub loss: LossKind,
    pub relevance: RelevanceConfig,
    /// Step size along the normalized gradient, in pixel units.
    pub alpha: Real,
    /// l-inf budget around the original image, in pixel units.
    pub epsilon: Real,
    /// RMSE at which the attack stops.
    pub eta: Real,
    pub max_iters: usize,
    pub enhance: Enhancements,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            loss: LossKind::Aoa { lambda: 1000.0 },
            relevance: RelevanceConfig::default(),
            alpha: 2.0,
            epsilon: 25.5,
            eta: 7.0,
            max_iters: 50,
            enhance: Enhancements::default(),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn pgd() -> Self {
        AttackConfig {
            loss: LossKind::PgdCe,
            ..AttackConfig::default()
        }
    }

    pub fn cw() -> Self {
        AttackConfig {
            loss: LossKind::CwHinge { kappa: 0.0 },
            ..AttackConfig::default()
        }
    }

    pub fn si_aoa() -> Self {
        AttackConfig {
            enhance: Enhancements {
                scale_copies: 5,
                ..Enhancements::default()
            },
            ..AttackConfig::default()
        }
    }

    /// Named configurations for CLIs and experiment plans.
    pub fn preset(name: &str) -> Option<Self> {
        let base = AttackConfig::default;
        Some(match name {
            "aoa" => base(),
            "pgd" => Self::pgd(),
            "cw" => Self::cw(),
            "si-aoa" => Self::si_aoa(),
            "suppress" => AttackConfig { loss: LossKind::Suppress, ..base() },
            "distract" => AttackConfig { loss: LossKind::Distract, ..base() },
            "boundary" => AttackConfig { loss: LossKind::Boundary, ..base() },
            "log-boundary" => AttackConfig { loss: LossKind::LogBoundary, ..base() },
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |msg: String| Err(AttackError::InvalidConfig(msg));
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad(format!("alpha {} must be positive and finite", self.alpha));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return bad(format!("epsilon {} must be nonnegative", self.epsilon));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return bad(format!("eta {} must be nonnegative", self.eta));
        }
        let e = &self.enhance;
        if !(e.momentum.is_finite() && e.momentum >= 0.0) {
            return bad(format!("momentum {} must be nonnegative", e.momentum));
        }
        if !(0.0..=1.0).contains(&e.diversity_prob) {
            return bad(format!("diversity_prob {} outside [0, 1]", e.diversity_prob));
        }
        if e.diversity_copies == 0 {
            return bad("diversity_copies must be at least 1".into());
        }
        if e.scale_copies == 0 {
            return bad("scale_copies must be at least 1".into());
        }
        match self.loss {
            LossKind::Aoa { lambda } if !lambda.is_finite() => {
                bad(format!("lambda {lambda} must be finite"))
            }
            LossKind::CwHinge { kappa } if !(kappa.is_finite() && kappa >= 0.0) => {
                bad(format!("kappa {kappa} must be nonnegative"))
            }
            _ => Ok(()),
        }
    }
}

/// Most probable class other than `exclude`.
pub fn second_class(model: &Model, x: &Tensor, exclude: usize) -> Result<usize, AttackError> {
    if model.class_count < 2 {
        return Err(AttackError::NoSecondClass);
    }
    let top = model.predict_topk(x, 2)?;
    Ok(if top[0].0 != exclude { top[0].0 } else { top[1].0 })
}

/// Per-attack constants derived from the original image: the label under
/// attack, the runner-up class, and (for the distract loss) the normalized
/// reference heat map.
#[derive(Clone, Debug)]
pub struct LossContext {
    pub y_ori: usize,
    pub y_sec: usize,
    h_ref: Option<Tensor>,
}

impl LossContext {
    pub fn prepare(
        model: &Model,
        x_ori: &Tensor,
        y_ori: usize,
        cfg: &AttackConfig,
    ) -> Result<Self, AttackError> {
        if y_ori >= model.class_count {
            return Err(AttackError::InvalidConfig(format!(
                "label {y_ori} out of range for {} classes",
                model.class_count
            )));
        }
        if model.class_count < 2 {
            return Err(AttackError::NoSecondClass);
        }
        let y_sec = second_class(model, x_ori, y_ori)?;
        let h_ref = if cfg.loss == LossKind::Distract {
            let h = heatmap(model, x_ori, y_ori, &cfg.relevance)?;
            let (_, mx) = h.max_element()?;
            if mx == 0.0 {
                return Err(TensorError::DivisionByZero.into());
            }
            // Plain division, matching the on-tape `div` bit for bit, so the
            // distract loss is exactly zero at the original image.
            Some(h.map(|v| v / mx))
        } else {
            None
        };
        Ok(LossContext { y_ori, y_sec, h_ref })
    }
}

/// A loss node plus the nodes whose sign/argmax patterns locate every kink
/// the loss adds beyond the model's own.
struct LossTrace {
    loss: NodeId,
    sign_nodes: Vec<NodeId>,
    /// `(node, skipped_index)`: the active branch is the argmax of the
    /// node's value, ignoring `skipped_index` if present.
    argmax_nodes: Vec<(NodeId, Option<usize>)>,
}

fn l1_on_tape(
    tape: &mut Tape,
    x: NodeId,
    signs: &mut Vec<NodeId>,
) -> Result<NodeId, TapeError> {
    signs.push(x);
    let a = tape.abs(x)?;
    tape.sum_all(a)
}

fn heat_on_tape(
    tape: &mut Tape,
    model: &Model,
    fwd: &TapedForward,
    class: usize,
    rel: &RelevanceConfig,
    signs: &mut Vec<NodeId>,
) -> Result<NodeId, AttackError> {
    let th = heatmap_on_tape(tape, model, fwd, class, rel)?;
    signs.extend(th.denominators);
    Ok(th.node)
}

fn log_mass(
    tape: &mut Tape,
    h: NodeId,
    signs: &mut Vec<NodeId>,
) -> Result<NodeId, AttackError> {
    let mass = l1_on_tape(tape, h, signs)?;
    let shifted = tape.add_scalar(mass, LOG_DELTA)?;
    Ok(tape.ln(shifted)?)
}

fn loss_on_tape(
    tape: &mut Tape,
    model: &Model,
    input: NodeId,
    ctx: &LossContext,
    loss: &LossKind,
    rel: &RelevanceConfig,
) -> Result<LossTrace, AttackError> {
    let fwd = model.forward_taped(tape, input)?;
    let mut signs = Vec::new();
    let mut argmaxes = Vec::new();
    let node = match *loss {
        LossKind::Suppress => {
            let h = heat_on_tape(tape, model, &fwd, ctx.y_ori, rel, &mut signs)?;
            l1_on_tape(tape, h, &mut signs)?
        }
        LossKind::Distract => {
            let h = heat_on_tape(tape, model, &fwd, ctx.y_ori, rel, &mut signs)?;
            argmaxes.push((h, None));
            let mx = tape.max_all(h)?;
            let hn = tape.div(h, mx)?;
            let r = ctx.h_ref.clone().expect("prepared for distract");
            let href = tape.leaf(r);
            let d = tape.sub(hn, href)?;
            let l = l1_on_tape(tape, d, &mut signs)?;
            tape.scale(l, -1.0)?
        }
        LossKind::Boundary => {
            let ho = heat_on_tape(tape, model, &fwd, ctx.y_ori, rel, &mut signs)?;
            let hs = heat_on_tape(tape, model, &fwd, ctx.y_sec, rel, &mut signs)?;
            let mo = l1_on_tape(tape, ho, &mut signs)?;
            let ms = l1_on_tape(tape, hs, &mut signs)?;
            tape.sub(mo, ms)?
        }
        LossKind::LogBoundary => {
            let ho = heat_on_tape(tape, model, &fwd, ctx.y_ori, rel, &mut signs)?;
            let hs = heat_on_tape(tape, model, &fwd, ctx.y_sec, rel, &mut signs)?;
            let lo = log_mass(tape, ho, &mut signs)?;
            let ls = log_mass(tape, hs, &mut signs)?;
            tape.sub(lo, ls)?
        }
        LossKind::Aoa { lambda } => {
            let ho = heat_on_tape(tape, model, &fwd, ctx.y_ori, rel, &mut signs)?;
            let hs = heat_on_tape(tape, model, &fwd, ctx.y_sec, rel, &mut signs)?;
            let lo = log_mass(tape, ho, &mut signs)?;
            let ls = log_mass(tape, hs, &mut signs)?;
            let lb = tape.sub(lo, ls)?;
            let ce = tape_cross_entropy(tape, fwd.logits, ctx.y_ori)?;
            let ce = tape.scale(ce, lambda)?;
            tape.sub(lb, ce)?
        }
        LossKind::PgdCe => {
            let ce = tape_cross_entropy(tape, fwd.logits, ctx.y_ori)?;
            tape.scale(ce, -1.0)?
        }
        LossKind::CwHinge { kappa } => {
            argmaxes.push((fwd.logits, Some(ctx.y_ori)));
            let zy = tape.select(fwd.logits, ctx.y_ori)?;
            let zo = tape.max_all_except(fwd.logits, ctx.y_ori)?;
            let u = tape.sub(zy, zo)?;
            let shifted = tape.add_scalar(u, kappa)?;
            signs.push(shifted);
            let hinge = tape.relu(shifted)?;
            tape.add_scalar(hinge, -kappa)?
        }
    };
    Ok(LossTrace {
        loss: node,
        sign_nodes: signs,
        argmax_nodes: argmaxes,
    })
}

/// Loss value at `x`, with no enhancement copies.
pub fn loss_value(
    model: &Model,
    x: &Tensor,
    ctx: &LossContext,
    cfg: &AttackConfig,
) -> Result<Real, AttackError> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let trace = loss_on_tape(&mut tape, model, leaf, ctx, &cfg.loss, &cfg.relevance)?;
    Ok(tape.value(trace.loss).item())
}

/// Input gradient of the plain loss at `x`, with no enhancement copies.
pub fn loss_gradient(
    model: &Model,
    x: &Tensor,
    ctx: &LossContext,
    cfg: &AttackConfig,
) -> Result<Tensor, AttackError> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let trace = loss_on_tape(&mut tape, model, leaf, ctx, &cfg.loss, &cfg.relevance)?;
    Ok(tape.gradient(trace.loss, leaf)?.grad)
}

/// Fingerprint of every piecewise branch the loss takes at `x`: the model's
/// relu/pooling pattern, heat-map denominator signs, absolute-value signs,
/// and max-selection winners. Finite differences are valid only where this
/// is stable.
pub fn loss_kink_signature(
    model: &Model,
    x: &Tensor,
    ctx: &LossContext,
    cfg: &AttackConfig,
) -> Result<u64, AttackError> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let trace = loss_on_tape(&mut tape, model, leaf, ctx, &cfg.loss, &cfg.relevance)?;
    let mut sig = model.kink_signature(x)?;
    for n in &trace.sign_nodes {
        sig = sign_fold(sig, tape.value(*n));
    }
    for (n, skip) in &trace.argmax_nodes {
        let data = tape.value(*n).data();
        let winner = data
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != *skip)
            .max_by(|(_, a), (_, b)| a.total_cmp(b))
            .map(|(i, _)| i)
            .unwrap_or(0);
        sig = (sig ^ winner as u64).wrapping_mul(0x100_0000_01b3);
    }
    Ok(sig)
}

/// The pieces of the combined objective at `x`, for diagnosing how the
/// attention term and the `lambda`-scaled cross-entropy trade off.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossTerms {
    pub attention: Real,
    pub cross_entropy: Real,
    pub lambda: Real,
    pub combined: Real,
}

pub fn loss_terms(
    model: &Model,
    x: &Tensor,
    ctx: &LossContext,
    cfg: &AttackConfig,
) -> Result<LossTerms, AttackError> {
    let logits = model.forward(x)?.logits;
    let ce = plain_cross_entropy(&logits, ctx.y_ori);
    Ok(match cfg.loss {
        LossKind::Aoa { lambda } => {
            let attention = loss_value(
                model,
                x,
                ctx,
                &AttackConfig {
                    loss: LossKind::LogBoundary,
                    ..cfg.clone()
                },
            )?;
            LossTerms {
                attention,
                cross_entropy: ce,
                lambda,
                combined: attention - lambda * ce,
            }
        }
        _ => {
            let v = loss_value(model, x, ctx, cfg)?;
            LossTerms {
                attention: v,
                cross_entropy: ce,
                lambda: 0.0,
                combined: v,
            }
        }
    })
}

/// `-ln p_y` from logits via the shifted log-sum-exp, never infinite for
/// finite logits.
fn plain_cross_entropy(logits: &Tensor, y: usize) -> Real {
    let m = logits.data().iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let lse = m + logits.data().iter().map(|&z| (z - m).exp()).sum::<Real>().ln();
    lse - logits.data()[y]
}

/// Random resize-and-pad applied to one input copy with probability `p`.
/// Draw order per copy: gate, height, width, top, left.
fn diversity_transform(
    tape: &mut Tape,
    node: NodeId,
    p: Real,
    rng: &mut Rng,
) -> Result<NodeId, TapeError> {
    let shape = tape.value(node).shape();
    let (h, w) = (shape[1], shape[2]);
    if !rng.bernoulli(p) {
        return Ok(node);
    }
    // Shrink to no less than 7/8 of each side, as a reduced-resolution view
    // rather than a different image.
    let min_h = (h * 7).div_ceil(8).max(1);
    let min_w = (w * 7).div_ceil(8).max(1);
    if min_h >= h || min_w >= w {
        return Ok(node);
    }
    let rh = min_h + rng.below(h - min_h);
    let rw = min_w + rng.below(w - min_w);
    let top = rng.below(h - rh + 1);
    let left = rng.below(w - rw + 1);
    let resized = tape.bilinear_resize(node, (rh, rw))?;
    tape.pad2d(resized, (h, w), (top, left))
}

/// Gaussian-smooths a gradient per channel (zero padding at the borders).
/// Kernel side is `2 * halfwidth + 1` with `sigma = side / 5`, normalized to
/// unit mass.
fn translation_smooth(g: &Tensor, halfwidth: usize) -> Result<Tensor, TensorError> {
    let [c, h, w] = g.shape() else {
        return Err(TensorError::Rank {
            op: "translation_smooth",
            expected: "[C, H, W]",
            found: g.shape().to_vec(),
        });
    };
    let (c, h, w) = (*c, *h, *w);
    let side = 2 * halfwidth + 1;
    let sigma = side as Real / 5.0;
    let mut kernel = vec![0.0; side * side];
    let mut total = 0.0;
    for i in 0..side {
        for j in 0..side {
            let (di, dj) = (i as isize - halfwidth as isize, j as isize - halfwidth as isize);
            let v = (-((di * di + dj * dj) as Real) / (2.0 * sigma * sigma)).exp();
            kernel[i * side + j] = v;
            total += v;
        }
    }
    for v in &mut kernel {
        *v /= total;
    }

    let mut out = vec![0.0; c * h * w];
    let data = g.data();
    for ch in 0..c {
        let plane = ch * h * w;
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for ki in 0..side {
                    let si = i as isize + ki as isize - halfwidth as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for kj in 0..side {
                        let sj = j as isize + kj as isize - halfwidth as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        acc += kernel[ki * side + kj]
                            * data[plane + si as usize * w + sj as usize];
                    }
                }
                out[plane + i * w + j] = acc;
            }
        }
    }
    Tensor::new(vec![c, h, w], out).map_err(Into::into)
}

/// Mean loss and input gradient across all enhancement copies at `x`.
/// Disabled enhancements take explicit shortcuts so they cannot perturb the
/// arithmetic of the plain attack.
fn attack_gradient(
    model: &Model,
    x: &Tensor,
    ctx: &LossContext,
    cfg: &AttackConfig,
    rng: &mut Rng,
) -> Result<(Tensor, Real), AttackError> {
    let scales = cfg.enhance.scale_copies.max(1);
    let di_on = cfg.enhance.diversity_prob > 0.0;
    let di_copies = if di_on { cfg.enhance.diversity_copies } else { 1 };
    let total = (scales * di_copies) as Real;

    let mut grad_acc: Option<Tensor> = None;
    let mut loss_acc = 0.0;
    for s in 0..scales {
        let factor = (0.5 as Real).powi(s as i32);
        for _ in 0..di_copies {
            let mut tape = Tape::new();
            let leaf = tape.leaf(x.clone());
            let mut node = leaf;
            if factor != 1.0 {
                node = tape.scale(node, factor)?;
            }
            if di_on {
                node = diversity_transform(&mut tape, node, cfg.enhance.diversity_prob, rng)?;
            }
            let trace = loss_on_tape(&mut tape, model, node, ctx, &cfg.loss, &cfg.relevance)?;
            loss_acc += tape.value(trace.loss).item();
            let g = tape.gradient(trace.loss, leaf)?.grad;
            grad_acc = Some(match grad_acc {
                None => g,
                Some(acc) => acc.zip_map(&g, |a, b| a + b)?,
            });
        }
    }
    let summed = grad_acc.expect("at least one copy");
    let g = if total == 1.0 {
        summed
    } else {
        summed.map(|v| v / total)
    };
    let g = if cfg.enhance.translation_halfwidth > 0 {
        translation_smooth(&g, cfg.enhance.translation_halfwidth)?
    } else {
        g
    };
    Ok((g, loss_acc / total))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Perturbation reached the RMSE budget `eta`.
    RmseReached,
    /// Iteration cap hit first.
    MaxIters,
    /// The loss gradient vanished; no direction to move in.
    VanishingGradient,
}

/// Loss and distance at the top of each iteration, before that iteration's
/// update.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub loss: Real,
    pub rmse: Real,
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    pub x_adv: Tensor,
    /// Update steps actually applied.
    pub iterations: usize,
    pub stop: StopReason,
    /// Final RMSE between `x_adv` and the original.
    pub rmse: Real,
    /// The surrogate's prediction on `x_adv`.
    pub prediction: usize,
    pub trace: Vec<IterationRecord>,
}

/// Runs the full attack loop against `model` (the surrogate).
///
/// `x_ori` must hold pixels in `[0, 255]`; `y_ori` is the label under
/// attack. The result is deterministic in `cfg.seed` regardless of thread
/// count.
pub fn run_attack(
    model: &Model,
    x_ori: &Tensor,
    y_ori: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    for &v in x_ori.data() {
        if !(0.0..=255.0).contains(&v) {
            return Err(AttackError::PixelRange {
                value: v,
                lo: 0.0,
                hi: 255.0,
            });
        }
    }
    let ctx = LossContext::prepare(model, x_ori, y_ori, cfg)?;
    let mut rng = Rng::seed(cfg.seed);
    let mut x = x_ori.clone();
    let mut momentum: Option<Tensor> = None;
    let mut trace = Vec::new();
    let mut stop = StopReason::MaxIters;
    let mut iterations = 0;

    for i in 0..cfg.max_iters {
        let dist = rmse(&x, x_ori)?;
        if dist >= cfg.eta {
            stop = StopReason::RmseReached;
            break;
        }
        let (g, loss) = attack_gradient(model, &x, &ctx, cfg, &mut rng)?;
        if !loss.is_finite() || g.data().iter().any(|v| !v.is_finite()) {
            return Err(AttackError::NonFinite {
                what: "loss gradient",
                iteration: i,
            });
        }
        trace.push(IterationRecord { loss, rmse: dist });
        let direction = match normalized_direction(&g, &mut momentum, cfg.enhance.momentum) {
            Ok(d) => d,
            Err(TensorError::ZeroNorm) => {
                stop = StopReason::VanishingGradient;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let stepped = x.zip_map(&direction, |xv, dv| xv - cfg.alpha * dv)?;
        x = clip_box(&stepped, x_ori, cfg.epsilon, 0.0, 255.0)?;
        iterations = i + 1;
    }

    let final_rmse = rmse(&x, x_ori)?;
    if stop == StopReason::MaxIters && final_rmse >= cfg.eta {
        stop = StopReason::RmseReached;
    }
    let prediction = model.predict(&x)?;
    Ok(AttackResult {
        x_adv: x,
        iterations,
        stop,
        rmse: final_rmse,
        prediction,
        trace,
    })
}

/// Mean-abs-normalized step direction, optionally accumulated through
/// momentum. `mu = 0` bypasses the momentum buffer entirely.
fn normalized_direction(
    g: &Tensor,
    momentum: &mut Option<Tensor>,
    mu: Real,
) -> Result<Tensor, TensorError> {
    let gn = normalize_avg_l1(g)?;
    if mu == 0.0 {
        return Ok(gn);
    }
    let m = match momentum.take() {
        None => gn,
        Some(prev) => prev.zip_map(&gn, |mv, gv| mu * mv + gv)?,
    };
    let direction = normalize_avg_l1(&m)?;
    *momentum = Some(m);
    Ok(direction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;
    use crate::network::{Layer, LayerSpec, Preprocess};
    use crate::relevance::heatmap;
    use crate::tensor::l1_norm;

    fn tiny_model(seed: u64) -> Model {
        let specs = vec![
            LayerSpec::Conv2d { channels: 3, kernel: 3, stride: 1, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 10 },
            LayerSpec::Relu,
            LayerSpec::Dense { units: 4 },
            LayerSpec::Softmax,
        ];
        Model::from_specs("tiny", &[1, 12, 12], 4, Preprocess::centered(1), &specs, seed).unwrap()
    }

    fn random_image(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = Rng::seed(seed);
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.uniform(0.0, 255.0)).collect(),
        )
        .unwrap()
    }

    /// Composes each loss from public pieces (heat maps, probabilities) and
    /// checks the tape-built value against it.
    #[test]
    fn loss_values_match_their_definitions() {
        let model = tiny_model(31);
        let x = random_image(1, &[1, 12, 12]);
        let y = model.predict(&x).unwrap();
        let rel = RelevanceConfig::default();
        let base = AttackConfig::default();

        let with_loss = |loss: LossKind| AttackConfig { loss, ..base.clone() };
        let ctx = |cfg: &AttackConfig| LossContext::prepare(&model, &x, y, cfg).unwrap();

        let h_ori = heatmap(&model, &x, y, &rel).unwrap();
        let y_sec = second_class(&model, &x, y).unwrap();
        let h_sec = heatmap(&model, &x, y_sec, &rel).unwrap();
        let logits = model.forward(&x).unwrap().logits;
        let ce = plain_cross_entropy(&logits, y);

        let cfg = with_loss(LossKind::Suppress);
        let got = loss_value(&model, &x, &ctx(&cfg), &cfg).unwrap();
        assert!((got - l1_norm(&h_ori)).abs() < 1e-12);

        let cfg = with_loss(LossKind::Boundary);
        let got = loss_value(&model, &x, &ctx(&cfg), &cfg).unwrap();
        assert!((got - (l1_norm(&h_ori) - l1_norm(&h_sec))).abs() < 1e-12);

        let log_boundary =
            (l1_norm(&h_ori) + LOG_DELTA).ln() - (l1_norm(&h_sec) + LOG_DELTA).ln();
        let cfg = with_loss(LossKind::LogBoundary);
        let got = loss_value(&model, &x, &ctx(&cfg), &cfg).unwrap();
        assert!((got - log_boundary).abs() < 1e-12);

        let cfg = with_loss(LossKind::Aoa { lambda: 1000.0 });
        let got = loss_value(&model, &x, &ctx(&cfg), &cfg).unwrap();
        assert!(
            (got - (log_boundary - 1000.0 * ce)).abs() < 1e-9,
            "aoa {got} vs {}",
            log_boundary - 1000.0 * ce
        );

        let cfg = with_loss(LossKind::PgdCe);
        let got = loss_value(&model, &x, &ctx(&cfg), &cfg).unwrap();
        assert!((got + ce).abs() < 1e-12);

        let zy = logits.data()[y];
        let zo = logits
            .data()
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != y)
            .map(|(_, &v)| v)
            .fold(Real::NEG_INFINITY, Real::max);
        let cfg = with_loss(LossKind::CwHinge { kappa: 0.0 });
        let got = loss_value(&model, &x, &ctx(&cfg), &cfg).unwrap();
        assert!((got - (zy - zo).max(0.0)).abs() < 1e-12);

        // Distract loss is exactly zero at the original image.
        let cfg = with_loss(LossKind::Distract);
        let got = loss_value(&model, &x, &ctx(&cfg), &cfg).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn loss_gradients_pass_finite_difference_checks() {
        let model = tiny_model(32);
        let x = random_image(2, &[1, 12, 12]);
        let y = model.predict(&x).unwrap();
        // Evaluate a step away from the original so the distract loss is off
        // the kink that sits exactly at its reference image.
        let mut rng = Rng::seed(77);
        let x_eval = Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .map(|&v| (v + rng.uniform(-3.0, 3.0)).clamp(0.0, 255.0))
                .collect(),
        )
        .unwrap();
        let kinds = [
            LossKind::Suppress,
            LossKind::Distract,
            LossKind::Boundary,
            LossKind::LogBoundary,
            LossKind::Aoa { lambda: 1000.0 },
            LossKind::PgdCe,
            LossKind::CwHinge { kappa: 0.0 },
        ];
        for loss in kinds {
            let cfg = AttackConfig { loss, ..AttackConfig::default() };
            let ctx = LossContext::prepare(&model, &x, y, &cfg).unwrap();
            let analytic = loss_gradient(&model, &x_eval, &ctx, &cfg).unwrap();
            let check = GradCheck {
                max_coords: 48,
                ..GradCheck::default()
            };
            let f = |x: &Tensor| loss_value(&model, x, &ctx, &cfg).unwrap();
            let mut sig = |x: &Tensor| loss_kink_signature(&model, x, &ctx, &cfg).unwrap();
            let report = check.run(&x_eval, &analytic, f, Some(&mut sig));
            assert!(
                report.pass_fraction() >= 0.95,
                "{loss:?}: {}/{} passed, max rel err {:.2e}",
                report.passed,
                report.checked,
                report.max_rel_err
            );
        }
    }

    /// Two classes with opposite uniform logit rows make the normalized
    /// gradient exactly +-1 per pixel, so every step moves every pixel by
    /// alpha and the RMSE after t steps is exactly alpha * t.
    #[test]
    fn hand_traced_linear_attack_stops_on_schedule() {
        let w = Tensor::new(vec![2, 2], vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let model = Model::assemble(
            "linear",
            &[1, 1, 2],
            2,
            Preprocess::unit(1),
            vec![
                Layer::Flatten,
                Layer::Dense { w, b },
                Layer::Softmax,
            ],
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1, 2], vec![128.0, 128.0]).unwrap();
        let cfg = AttackConfig::pgd();
        let result = run_attack(&model, &x, 0, &cfg).unwrap();
        // alpha = 2, eta = 7: RMSE hits 8 >= 7 after 4 steps. The values are
        // exact up to the one rounding of the gradient normalization.
        assert_eq!(result.iterations, 4);
        assert_eq!(result.stop, StopReason::RmseReached);
        assert!((result.rmse - 8.0).abs() < 1e-9, "rmse {}", result.rmse);
        for &v in result.x_adv.data() {
            assert!((v - 120.0).abs() < 1e-9, "pixel {v}");
        }
        // The logits depend only on the pixel sum, which stays positive
        // inside the box, so the surrogate still predicts the original class.
        assert_eq!(result.prediction, 0);
        assert_eq!(result.trace.len(), 4);
        assert_eq!(result.trace[0].rmse, 0.0);
        assert!((result.trace[3].rmse - 6.0).abs() < 1e-9);
    }

    #[test]
    fn disabled_enhancements_are_bit_identical_to_plain_attack() {
        let model = tiny_model(33);
        let x = random_image(3, &[1, 12, 12]);
        let y = model.predict(&x).unwrap();
        let plain = AttackConfig::default();
        let degenerate = AttackConfig {
            enhance: Enhancements {
                momentum: 0.0,
                diversity_prob: 0.0,
                diversity_copies: 7,
                translation_halfwidth: 0,
                scale_copies: 1,
            },
            ..AttackConfig::default()
        };
        let a = run_attack(&model, &x, y, &plain).unwrap();
        let b = run_attack(&model, &x, y, &degenerate).unwrap();
        assert_eq!(a.x_adv, b.x_adv);
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.rmse, b.rmse);
    }

    #[test]
    fn attack_respects_pixel_box_constraints() {
        let model = tiny_model(34);
        let x = random_image(4, &[1, 12, 12]);
        let y = model.predict(&x).unwrap();
        let cfg = AttackConfig {
            epsilon: 4.0,
            eta: 100.0,
            max_iters: 12,
            ..AttackConfig::default()
        };
        let result = run_attack(&model, &x, y, &cfg).unwrap();
        for (adv, ori) in result.x_adv.data().iter().zip(x.data()) {
            assert!((adv - ori).abs() <= 4.0 + 1e-9);
            assert!((0.0..=255.0).contains(adv));
        }
        assert!(result.rmse <= 4.0 + 1e-9);
    }

    #[test]
    fn randomized_enhancements_are_seed_deterministic() {
        let model = tiny_model(35);
        let x = random_image(5, &[1, 12, 12]);
        let y = model.predict(&x).unwrap();
        let cfg = AttackConfig {
            max_iters: 3,
            eta: 100.0,
            enhance: Enhancements {
                momentum: 1.0,
                diversity_prob: 0.5,
                diversity_copies: 3,
                translation_halfwidth: 1,
                scale_copies: 2,
            },
            alpha: 0.5,
            seed: 42,
            ..AttackConfig::default()
        };
        let a = run_attack(&model, &x, y, &cfg).unwrap();
        let b = run_attack(&model, &x, y, &cfg).unwrap();
        assert_eq!(a.x_adv, b.x_adv);

        let other = AttackConfig { seed: 43, ..cfg };
        let c = run_attack(&model, &x, y, &other).unwrap();
        assert_ne!(a.x_adv, c.x_adv);
    }

    #[test]
    fn zero_eta_returns_the_original_image() {
        let model = tiny_model(36);
        let x = random_image(6, &[1, 12, 12]);
        let y = model.predict(&x).unwrap();
        let cfg = AttackConfig {
            eta: 0.0,
            ..AttackConfig::default()
        };
        let result = run_attack(&model, &x, y, &cfg).unwrap();
        assert_eq!(result.iterations, 0);
        assert_eq!(result.stop, StopReason::RmseReached);
        assert_eq!(result.x_adv, x);
    }

    #[test]
    fn zero_iteration_budget_stops_at_max_iters() {
        let model = tiny_model(36);
        let x = random_image(6, &[1, 12, 12]);
        let y = model.predict(&x).unwrap();
        let cfg = AttackConfig {
            max_iters: 0,
            ..AttackConfig::default()
        };
        let result = run_attack(&model, &x, y, &cfg).unwrap();
        assert_eq!(result.iterations, 0);
        assert_eq!(result.stop, StopReason::MaxIters);
        assert_eq!(result.x_adv, x);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let bad = [
            AttackConfig { alpha: 0.0, ..AttackConfig::default() },
            AttackConfig { alpha: Real::NAN, ..AttackConfig::default() },
            AttackConfig { epsilon: -1.0, ..AttackConfig::default() },
            AttackConfig { eta: Real::INFINITY, ..AttackConfig::default() },
            AttackConfig {
                enhance: Enhancements { diversity_prob: 1.5, ..Enhancements::default() },
                ..AttackConfig::default()
            },
            AttackConfig {
                enhance: Enhancements { scale_copies: 0, ..Enhancements::default() },
                ..AttackConfig::default()
            },
            AttackConfig { loss: LossKind::Aoa { lambda: Real::NAN }, ..AttackConfig::default() },
            AttackConfig {
                loss: LossKind::CwHinge { kappa: -1.0 },
                ..AttackConfig::default()
            },
        ];
        for cfg in bad {
            assert!(
                matches!(cfg.validate(), Err(AttackError::InvalidConfig(_))),
                "{cfg:?} should be rejected"
            );
        }
        assert!(AttackConfig::si_aoa().validate().is_ok());
    }

    #[test]
    fn out_of_range_pixels_are_rejected() {
        let model = tiny_model(37);
        let mut data = vec![10.0; 144];
        data[7] = 300.0;
        let x = Tensor::new(vec![1, 12, 12], data).unwrap();
        match run_attack(&model, &x, 0, &AttackConfig::default()) {
            Err(AttackError::PixelRange { value, .. }) => assert_eq!(value, 300.0),
            other => panic!("expected pixel range error, got {other:?}"),
        }
    }

    #[test]
    fn second_class_skips_the_excluded_label() {
        let model = tiny_model(38);
        let x = random_image(8, &[1, 12, 12]);
        let top = model.predict_topk(&x, 2).unwrap();
        assert_eq!(second_class(&model, &x, top[0].0).unwrap(), top[1].0);
        assert_eq!(second_class(&model, &x, top[1].0).unwrap(), top[0].0);
    }

    #[test]
    fn one_class_model_has_no_second_class() {
        let w = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let model = Model::assemble(
            "mono",
            &[1, 1, 2],
            1,
            Preprocess::unit(1),
            vec![Layer::Flatten, Layer::Dense { w, b }, Layer::Softmax],
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            run_attack(&model, &x, 0, &AttackConfig::pgd()),
            Err(AttackError::NoSecondClass)
        ));
    }

    #[test]
    fn translation_smoothing_has_unit_mass() {
        let g = Tensor::filled(&[1, 5, 5], 3.0);
        let s = translation_smooth(&g, 1).unwrap();
        // Interior of a constant field is preserved by a unit-mass kernel.
        assert!((s.data()[12] - 3.0).abs() < 1e-12);
        // Corners lose the mass that fell outside the border.
        assert!(s.data()[0] < 3.0);
    }

    #[test]
    fn presets_cover_the_reported_attacks() {
        for name in ["aoa", "pgd", "cw", "si-aoa", "suppress", "distract", "boundary", "log-boundary"] {
            let cfg = AttackConfig::preset(name).unwrap();
            cfg.validate().unwrap();
        }
        assert!(AttackConfig::preset("unknown").is_none());
        assert_eq!(
            AttackConfig::preset("si-aoa").unwrap().enhance.scale_copies,
            5
        );
    }

    #[test]
    fn loss_terms_decompose_the_combined_objective() {
        let model = tiny_model(39);
        let x = random_image(9, &[1, 12, 12]);
        let y = model.predict(&x).unwrap();
        let cfg = AttackConfig::default();
        let ctx = LossContext::prepare(&model, &x, y, &cfg).unwrap();
        let terms = loss_terms(&model, &x, &ctx, &cfg).unwrap();
        assert_eq!(terms.lambda, 1000.0);
        let combined = loss_value(&model, &x, &ctx, &cfg).unwrap();
        assert!((terms.combined - combined).abs() < 1e-9);
        assert!(
            (terms.combined - (terms.attention - terms.lambda * terms.cross_entropy)).abs()
                < 1e-9
        );
    }
}
