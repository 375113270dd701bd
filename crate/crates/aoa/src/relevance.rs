//! Differentiable attention heat maps via layer-wise relevance propagation.
//!
//! Relevance starts at the classifier head and is redistributed backwards
//! through the layers onto the input pixels. The whole propagation is built
//! as tape operations, so a heat map is itself a differentiable function of
//! the input and can sit inside an attack loss.
//!
//! The default initialization is the softmax-gradient form
//! `R_j = p_t * (delta_tj - p_j)`, which weights relevance by how the target
//! probability reacts to each logit. Its total is exactly zero, so heat maps
//! carry signed evidence for and against the target class. Linear layers use
//! the epsilon rule with bias-free denominators, which conserves relevance
//! exactly when the stabilizer is zero.

use crate::data::write_png_u8;
use crate::error::{RelevanceError, TapeError, TensorError};
use crate::network::{Layer, Model, TapedForward};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// How relevance is seeded at the classifier head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RelevanceInit {
    /// `R_j = p_t * (delta_tj - p_j)`; signed, sums to zero.
    SoftmaxGradient,
    /// `R_j = delta_tj`; the classic unit seed, sums to one.
    OneHot,
}

/// How relevance is redistributed through a linear (dense/conv) layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RelevanceRule {
    /// `R_i = a_i * sum_j w_ji R_j / (z_j + eps * sign(z_j))` with bias-free
    /// `z_j`. Conservation is exact at `eps_s = 0`, but any vanishing
    /// denominator is then an error.
    Epsilon { eps_s: Real },
    /// Same shape but only positive weights contribute. Denominators are
    /// nonnegative, so the stabilizer only guards exact zeros.
    ZPlus { eps_s: Real },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelevanceConfig {
    pub init: RelevanceInit,
    pub rule: RelevanceRule,
    /// Treat denominators as constants during differentiation. The heat map
    /// values are unchanged; only its gradient loses the denominator terms.
    pub detach_denominator: bool,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        RelevanceConfig {
            init: RelevanceInit::SoftmaxGradient,
            rule: RelevanceRule::Epsilon { eps_s: 1e-6 },
            detach_denominator: false,
        }
    }
}

/// A heat map built on a tape: the relevance node plus the denominator nodes
/// of every linear layer. The denominators' signs locate the only
/// discontinuities the propagation adds, which finite-difference checks need
/// to know about.
pub struct TapedHeatmap {
    pub node: NodeId,
    pub denominators: Vec<NodeId>,
    /// Relevance at every propagation stage: the output seed first, then the
    /// relevance entering each earlier layer, ending at the input (= `node`).
    /// Under the epsilon rule with `eps_s = 0` every stage has the same sum.
    pub stages: Vec<NodeId>,
}

/// Relevance vector at the logits, seeded from the softmax output.
pub fn output_relevance(
    tape: &mut Tape,
    probs: NodeId,
    class: usize,
    init: RelevanceInit,
) -> Result<NodeId, RelevanceError> {
    let n = tape.value(probs).len();
    if class >= n {
        return Err(RelevanceError::ClassOutOfRange {
            class,
            class_count: n,
        });
    }
    let mut onehot = vec![0.0; n];
    onehot[class] = 1.0;
    let onehot = tape.leaf(Tensor::new(vec![n], onehot)?);
    Ok(match init {
        RelevanceInit::SoftmaxGradient => {
            let pt = tape.select(probs, class)?;
            let diff = tape.sub(onehot, probs)?;
            tape.mul(pt, diff)?
        }
        RelevanceInit::OneHot => onehot,
    })
}

/// Propagates relevance from the head of a taped forward pass down to the
/// input node. The returned node has the input's shape.
pub fn heatmap_on_tape(
    tape: &mut Tape,
    model: &Model,
    fwd: &TapedForward,
    class: usize,
    cfg: &RelevanceConfig,
) -> Result<TapedHeatmap, RelevanceError> {
    if class >= model.class_count {
        return Err(RelevanceError::ClassOutOfRange {
            class,
            class_count: model.class_count,
        });
    }
    let (eps_s, positive_only) = match cfg.rule {
        RelevanceRule::Epsilon { eps_s } => (eps_s, false),
        RelevanceRule::ZPlus { eps_s } => (eps_s, true),
    };

    let mut r = output_relevance(tape, fwd.probs, class, cfg.init)?;
    let mut denominators = Vec::new();
    let mut stages = vec![r];
    for (i, layer) in model.layers().iter().enumerate().rev() {
        let (l_in, l_out) = fwd.layer_io[i];
        match layer {
            // The head is absorbed into the initialization.
            Layer::Softmax => {}
            // Relevance follows the active paths, which relu leaves as-is.
            Layer::Relu => {}
            Layer::Flatten => {
                let shape = tape.value(l_in).shape().to_vec();
                r = tape.reshape(r, shape)?;
            }
            Layer::MaxPool { .. } => {
                r = tape.max_unpool(r, l_out)?;
            }
            Layer::AvgPool { size, stride } => {
                let s = tape.value(l_in).shape();
                let hw = (s[1], s[2]);
                r = tape.avg_spread(r, *size, *stride, hw)?;
            }
            Layer::Dense { .. } => {
                let (w, _) = fwd.params[i].expect("dense layer has params");
                let w = if positive_only { tape.relu(w)? } else { w };
                let z = tape.matmul(w, l_in)?;
                let den = stabilized(tape, z, eps_s, cfg.detach_denominator)?;
                denominators.push(den);
                let s = checked_div(tape, r, den, i)?;
                let wt = tape.transpose(w)?;
                let c = tape.matmul(wt, s)?;
                r = tape.mul(l_in, c)?;
            }
            Layer::Conv2d { stride, pad, .. } => {
                let (k, _) = fwd.params[i].expect("conv layer has params");
                let k = if positive_only { tape.relu(k)? } else { k };
                let z = tape.conv2d(l_in, k, *stride, *pad)?;
                let den = stabilized(tape, z, eps_s, cfg.detach_denominator)?;
                denominators.push(den);
                let s = checked_div(tape, r, den, i)?;
                let shape = tape.value(l_in).shape();
                let hw = (shape[1], shape[2]);
                let c = tape.conv2d_transpose(s, k, *stride, *pad, hw)?;
                r = tape.mul(l_in, c)?;
            }
        }
        stages.push(r);
    }
    // Input normalization is elementwise per pixel, so relevance at the
    // normalized input is relevance at the raw pixels.
    Ok(TapedHeatmap {
        node: r,
        denominators,
        stages,
    })
}

fn stabilized(
    tape: &mut Tape,
    z: NodeId,
    eps_s: Real,
    detach: bool,
) -> Result<NodeId, TapeError> {
    let z = if detach { tape.detach(z)? } else { z };
    if eps_s == 0.0 {
        Ok(z)
    } else {
        tape.stabilize_sign(z, eps_s)
    }
}

fn checked_div(
    tape: &mut Tape,
    r: NodeId,
    den: NodeId,
    layer: usize,
) -> Result<NodeId, RelevanceError> {
    tape.div(r, den).map_err(|e| match e {
        TapeError::Tensor(TensorError::DivisionByZero) => {
            RelevanceError::StabilizerRequired { layer }
        }
        other => other.into(),
    })
}

/// Heat map of `x` for `class` as a plain tensor.
pub fn heatmap(
    model: &Model,
    x: &Tensor,
    class: usize,
    cfg: &RelevanceConfig,
) -> Result<Tensor, RelevanceError> {
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let fwd = model.forward_taped(&mut tape, input)?;
    let h = heatmap_on_tape(&mut tape, model, &fwd, class, cfg)?;
    Ok(tape.value(h.node).clone())
}

/// Kink signature of the full heat-map computation at `x`: the model's own
/// relu/pooling pattern plus the sign pattern of every propagation
/// denominator. Finite differences are only trusted where this fingerprint
/// is stable.
pub fn heatmap_kink_signature(
    model: &Model,
    x: &Tensor,
    class: usize,
    cfg: &RelevanceConfig,
) -> Result<u64, RelevanceError> {
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let fwd = model.forward_taped(&mut tape, input)?;
    let h = heatmap_on_tape(&mut tape, model, &fwd, class, cfg)?;
    let mut sig = model.kink_signature(x)?;
    for den in &h.denominators {
        for &v in tape.value(*den).data() {
            sig = fnv_fold(sig, v >= 0.0);
        }
    }
    Ok(sig)
}

/// Extends a signature with the sign pattern of a node's value, for losses
/// that take absolute values of heat maps.
pub fn sign_fold(sig: u64, t: &Tensor) -> u64 {
    let mut sig = sig;
    for &v in t.data() {
        sig = fnv_fold(sig, v >= 0.0);
    }
    sig
}

fn fnv_fold(sig: u64, bit: bool) -> u64 {
    (sig ^ (bit as u64 + 1)).wrapping_mul(0x100_0000_01b3)
}

/// Spearman rank correlation between two heat maps of the same shape.
/// Ties get average ranks. Errors if either map is constant.
pub fn heatmap_similarity(a: &Tensor, b: &Tensor) -> Result<Real, RelevanceError> {
    if a.shape() != b.shape() {
        return Err(RelevanceError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let ra = ranks(a.data()).ok_or(RelevanceError::ZeroVariance)?;
    let rb = ranks(b.data()).ok_or(RelevanceError::ZeroVariance)?;
    Ok(pearson(&ra, &rb))
}

/// Average-tie ranks (1-based). `None` when all values are equal.
fn ranks(values: &[Real]) -> Option<Vec<Real>> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    if values[idx[0]] == values[idx[n - 1]] {
        return None;
    }
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        // Average of the 1-based ranks start+1 ..= end.
        let rank = (start + 1 + end) as Real / 2.0;
        for &i in &idx[start..end] {
            out[i] = rank;
        }
        start = end;
    }
    Some(out)
}

fn pearson(a: &[Real], b: &[Real]) -> Real {
    let n = a.len() as Real;
    let ma = a.iter().sum::<Real>() / n;
    let mb = b.iter().sum::<Real>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Writes a heat map as an 8-bit grayscale PNG (channels summed, then
/// min/max normalized) plus a JSON sidecar holding the exact values.
pub fn write_heatmap(h: &Tensor, png_path: &Path) -> Result<(), RelevanceError> {
    let (height, width, flat) = match h.shape() {
        [c, hh, ww] => {
            let mut flat = vec![0.0; hh * ww];
            for ch in 0..*c {
                for (i, slot) in flat.iter_mut().enumerate() {
                    *slot += h.data()[ch * hh * ww + i];
                }
            }
            (*hh, *ww, flat)
        }
        [hh, ww] => (*hh, *ww, h.data().to_vec()),
        other => {
            return Err(TensorError::Rank {
                op: "write_heatmap",
                expected: "[C, H, W] or [H, W]",
                found: other.to_vec(),
            }
            .into())
        }
    };
    let lo = flat.iter().cloned().fold(Real::INFINITY, Real::min);
    let hi = flat.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let scaled: Vec<Real> = if hi > lo {
        flat.iter().map(|v| (v - lo) / (hi - lo) * 255.0).collect()
    } else {
        vec![128.0; flat.len()]
    };
    write_png_u8(png_path, &Tensor::new(vec![1, height, width], scaled)?)?;

    let sidecar = png_path.with_extension("json");
    let file = std::fs::File::create(&sidecar).map_err(|e| {
        RelevanceError::Data(crate::error::DataError::Io {
            path: sidecar.display().to_string(),
            source: e,
        })
    })?;
    serde_json::to_writer(file, h).map_err(|e| {
        RelevanceError::Data(crate::error::DataError::Malformed {
            path: sidecar.display().to_string(),
            reason: e.to_string(),
        })
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;
    use crate::network::{LayerSpec, Preprocess};
    use crate::rng::Rng;

    /// One dense layer `W = [[1, 3]]`, relevance `[4]` at the output. The
    /// epsilon rule at `eps_s = 0` gives `z = a1 + 3 a2`; with `a = [1, 1]`,
    /// `R = [4 * 1/4, 4 * 3/4] = [1, 3]`.
    #[test]
    fn epsilon_rule_matches_hand_computation() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let w = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
        let z = tape.matmul(w, a).unwrap();
        let r_out = tape.leaf(Tensor::new(vec![1], vec![4.0]).unwrap());
        let s = tape.div(r_out, z).unwrap();
        let wt = tape.transpose(w).unwrap();
        let c = tape.matmul(wt, s).unwrap();
        let r_in = tape.mul(a, c).unwrap();
        assert_eq!(tape.value(r_in).data(), &[1.0, 3.0]);
    }

    fn tiny_model(seed: u64) -> Model {
        let specs = vec![
            LayerSpec::Conv2d { channels: 3, kernel: 3, stride: 1, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2, stride: 2 },
            LayerSpec::Conv2d { channels: 4, kernel: 3, stride: 1, pad: 0 },
            LayerSpec::Relu,
            LayerSpec::AvgPool { size: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 8 },
            LayerSpec::Relu,
            LayerSpec::Dense { units: 4 },
            LayerSpec::Softmax,
        ];
        Model::from_specs("tiny", &[1, 12, 12], 4, Preprocess::centered(1), &specs, seed).unwrap()
    }

    fn random_input(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.uniform(0.0, 255.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn one_hot_seed_conserves_total_relevance() {
        let model = tiny_model(21);
        let mut rng = Rng::seed(3);
        let cfg = RelevanceConfig {
            init: RelevanceInit::OneHot,
            rule: RelevanceRule::Epsilon { eps_s: 0.0 },
            detach_denominator: false,
        };
        for class in 0..4 {
            let x = random_input(&mut rng, &[1, 12, 12]);
            let h = heatmap(&model, &x, class, &cfg).unwrap();
            let total: Real = h.data().iter().sum();
            assert!(
                (total - 1.0).abs() < 1e-9,
                "class {class}: total {total} drifted from 1"
            );
        }
    }

    #[test]
    fn softmax_gradient_seed_sums_to_zero() {
        let model = tiny_model(22);
        let mut rng = Rng::seed(4);
        let cfg = RelevanceConfig {
            rule: RelevanceRule::Epsilon { eps_s: 0.0 },
            ..RelevanceConfig::default()
        };
        let x = random_input(&mut rng, &[1, 12, 12]);
        let h = heatmap(&model, &x, 1, &cfg).unwrap();
        let total: Real = h.data().iter().sum();
        assert!(total.abs() < 1e-12, "total {total} not zero");
        // The map itself is not trivial.
        assert!(h.data().iter().any(|&v| v.abs() > 1e-12));
    }

    #[test]
    fn zplus_matches_epsilon_on_positive_weights() {
        // With all-positive weights and inputs, clamping weights changes
        // nothing, so both rules agree.
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![3], vec![0.5, 1.0, 2.0]).unwrap());
        let w = tape.leaf(Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let r = tape.leaf(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let apply = |tape: &mut Tape, clamp: bool, w: NodeId| {
            let w = if clamp { tape.relu(w).unwrap() } else { w };
            let z = tape.matmul(w, a).unwrap();
            let s = tape.div(r, z).unwrap();
            let wt = tape.transpose(w).unwrap();
            let c = tape.matmul(wt, s).unwrap();
            tape.mul(a, c).unwrap()
        };
        let plain = apply(&mut tape, false, w);
        let clamped = apply(&mut tape, true, w);
        assert_eq!(tape.value(plain), tape.value(clamped));
    }

    #[test]
    fn heatmap_is_differentiable_wrt_input() {
        let model = tiny_model(23);
        let mut rng = Rng::seed(5);
        let x = random_input(&mut rng, &[1, 12, 12]);
        let cfg = RelevanceConfig::default();
        let class = 2;

        // Analytic gradient of sum(h) wrt x.
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone());
        let fwd = model.forward_taped(&mut tape, input).unwrap();
        let h = heatmap_on_tape(&mut tape, &model, &fwd, class, &cfg).unwrap();
        let root = tape.sum_all(h.node).unwrap();
        let analytic = tape.gradient(root, input).unwrap().grad;

        let check = GradCheck::default();
        let f = |x: &Tensor| -> Real {
            heatmap(&model, x, class, &cfg).unwrap().data().iter().sum()
        };
        let mut sig =
            |x: &Tensor| -> u64 { heatmap_kink_signature(&model, x, class, &cfg).unwrap() };
        let report = check.run(&x, &analytic, f, Some(&mut sig));
        assert!(
            report.pass_fraction() >= 0.95,
            "only {}/{} coords passed (max rel err {:.2e})",
            report.passed,
            report.checked,
            report.max_rel_err
        );
    }

    #[test]
    fn detached_denominators_change_gradient_not_value() {
        let model = tiny_model(24);
        let mut rng = Rng::seed(6);
        let x = random_input(&mut rng, &[1, 12, 12]);
        let attached = RelevanceConfig::default();
        let detached = RelevanceConfig {
            detach_denominator: true,
            ..attached
        };
        let ha = heatmap(&model, &x, 0, &attached).unwrap();
        let hd = heatmap(&model, &x, 0, &detached).unwrap();
        assert_eq!(ha, hd);

        let grad = |cfg: &RelevanceConfig| {
            let mut tape = Tape::new();
            let input = tape.leaf(x.clone());
            let fwd = model.forward_taped(&mut tape, input).unwrap();
            let h = heatmap_on_tape(&mut tape, &model, &fwd, 0, cfg).unwrap();
            let root = tape.sum_all(h.node).unwrap();
            tape.gradient(root, input).unwrap().grad
        };
        assert_ne!(grad(&attached), grad(&detached));
    }

    #[test]
    fn class_out_of_range_is_rejected() {
        let model = tiny_model(25);
        let x = Tensor::zeros(&[1, 12, 12]);
        match heatmap(&model, &x, 7, &RelevanceConfig::default()) {
            Err(RelevanceError::ClassOutOfRange { class: 7, class_count: 4 }) => {}
            other => panic!("expected class range error, got {other:?}"),
        }
    }

    #[test]
    fn zero_stabilizer_with_zero_input_requires_stabilizer() {
        // Unit preprocessing maps a zero image to a zero activation, which
        // zeroes every bias-free conv denominator.
        let specs = vec![
            LayerSpec::Conv2d { channels: 2, kernel: 3, stride: 1, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 4 },
            LayerSpec::Softmax,
        ];
        let model =
            Model::from_specs("z", &[1, 12, 12], 4, Preprocess::unit(1), &specs, 26).unwrap();
        let x = Tensor::zeros(&[1, 12, 12]);
        let cfg = RelevanceConfig {
            rule: RelevanceRule::Epsilon { eps_s: 0.0 },
            ..RelevanceConfig::default()
        };
        match heatmap(&model, &x, 0, &cfg) {
            Err(RelevanceError::StabilizerRequired { .. }) => {}
            other => panic!("expected stabilizer error, got {other:?}"),
        }
    }

    #[test]
    fn similarity_ranks_with_average_ties() {
        // a = [1, 2, 2, 3] -> ranks [1, 2.5, 2.5, 4]
        // b = [10, 30, 20, 40] -> ranks [1, 3, 2, 4]
        let a = Tensor::new(vec![4], vec![1.0, 2.0, 2.0, 3.0]).unwrap();
        let b = Tensor::new(vec![4], vec![10.0, 30.0, 20.0, 40.0]).unwrap();
        let got = heatmap_similarity(&a, &b).unwrap();
        // Pearson of [1, 2.5, 2.5, 4] and [1, 3, 2, 4] = 4.5 / sqrt(4.5 * 5).
        let expect = 4.5 / (4.5 as Real * 5.0).sqrt();
        assert!((got - expect).abs() < 1e-12, "got {got}, expect {expect}");

        let perfect = heatmap_similarity(&a, &a).unwrap();
        assert!((perfect - 1.0).abs() < 1e-12);

        let rev = Tensor::new(vec![4], vec![4.0, 3.0, 2.0, 1.0]).unwrap();
        let anti = heatmap_similarity(
            &Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            &rev,
        )
        .unwrap();
        assert!((anti + 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_rejects_constants_and_shape_mismatch() {
        let a = Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            heatmap_similarity(&a, &b),
            Err(RelevanceError::ZeroVariance)
        ));
        let c = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(matches!(
            heatmap_similarity(&b, &c),
            Err(RelevanceError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn heatmap_export_writes_png_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("h.png");
        let h = Tensor::new(vec![1, 2, 2], vec![-1.0, 0.0, 0.5, 1.0]).unwrap();
        write_heatmap(&h, &png).unwrap();
        let back = crate::data::read_png(&png).unwrap();
        // Min/max normalization: -1 -> 0, 1 -> 255.
        assert_eq!(back.data()[0], 0.0);
        assert_eq!(back.data()[3], 255.0);
        let sidecar: Tensor =
            serde_json::from_slice(&std::fs::read(dir.path().join("h.json")).unwrap()).unwrap();
        assert_eq!(sidecar, h);
    }
}
