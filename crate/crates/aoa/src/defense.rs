//! Preprocessing defenses applied between a (possibly adversarial) image and
//! a classifier: JPEG re-encoding, pixel deflection, total-variation
//! minimization, and randomized-smoothing voting. All of them are
//! deterministic in their seed.

use crate::error::{DefenseError, TensorError};
use crate::network::Model;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseConfig {
    /// Pass-through.
    None,
    /// DCT quantization round trip at the given quality, 1..=100.
    Jpeg { quality: u8 },
    /// Replaces `count` random pixels with a random neighbor within
    /// `radius`; `denoise` follows up with a 3x3 median filter.
    Deflect { count: usize, radius: usize, denoise: bool },
    /// Drops pixels (keeping each with `keep_prob`) and reconstructs by
    /// `iters` gradient steps on `||mask (z - x)||^2 + tv_weight * TV(z)`.
    Tvm { keep_prob: Real, tv_weight: Real, iters: usize },
    /// Majority vote over `samples` Gaussian-noised copies (`sigma` in pixel
    /// units). A decision-level defense; it has no preprocessed image.
    Smooth { samples: usize, sigma: Real },
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<(), DefenseError> {
        let bad = |msg: String| Err(DefenseError::InvalidParam(msg));
        match *self {
            DefenseConfig::None => Ok(()),
            DefenseConfig::Jpeg { quality } => {
                if !(1..=100).contains(&quality) {
                    return bad(format!("jpeg quality {quality} outside 1..=100"));
                }
                Ok(())
            }
            DefenseConfig::Deflect { .. } => Ok(()),
            DefenseConfig::Tvm { keep_prob, tv_weight, .. } => {
                if !(0.0..=1.0).contains(&keep_prob) {
                    return bad(format!("tvm keep_prob {keep_prob} outside [0, 1]"));
                }
                if !(tv_weight.is_finite() && tv_weight >= 0.0) {
                    return bad(format!("tvm tv_weight {tv_weight} must be nonnegative"));
                }
                Ok(())
            }
            DefenseConfig::Smooth { samples, sigma } => {
                if samples == 0 {
                    return bad("smooth needs at least 1 sample".into());
                }
                if !(sigma.is_finite() && sigma >= 0.0) {
                    return bad(format!("smooth sigma {sigma} must be nonnegative"));
                }
                Ok(())
            }
        }
    }

    /// Reporting label, stable across runs.
    pub fn label(&self) -> String {
        match self {
            DefenseConfig::None => "none".into(),
            DefenseConfig::Jpeg { quality } => format!("jpeg-q{quality}"),
            DefenseConfig::Deflect { count, .. } => format!("deflect-{count}"),
            DefenseConfig::Tvm { keep_prob, .. } => format!("tvm-p{keep_prob}"),
            DefenseConfig::Smooth { samples, sigma } => format!("smooth-{samples}x{sigma}"),
        }
    }
}

/// Runs the defense's image transform. `Smooth` has none (its randomness
/// lives in the vote), so it returns the input unchanged.
pub fn apply_preprocess(
    cfg: &DefenseConfig,
    x: &Tensor,
    seed: u64,
) -> Result<Tensor, DefenseError> {
    cfg.validate()?;
    match *cfg {
        DefenseConfig::None | DefenseConfig::Smooth { .. } => Ok(x.clone()),
        DefenseConfig::Jpeg { quality } => jpeg_round_trip(x, quality),
        DefenseConfig::Deflect { count, radius, denoise } => {
            let deflected = deflect(x, count, radius, &mut Rng::seed(seed))?;
            Ok(if denoise { median3(&deflected)? } else { deflected })
        }
        DefenseConfig::Tvm { keep_prob, tv_weight, iters } => {
            tvm(x, keep_prob, tv_weight, iters, &mut Rng::seed(seed))
        }
    }
}

/// Classifies through the defense. `Smooth` takes a majority vote with ties
/// broken toward the smallest class index; everything else preprocesses and
/// predicts once.
pub fn defended_predict(
    model: &Model,
    x: &Tensor,
    cfg: &DefenseConfig,
    seed: u64,
) -> Result<usize, DefenseError> {
    cfg.validate()?;
    if let DefenseConfig::Smooth { samples, sigma } = *cfg {
        let mut rng = Rng::seed(seed);
        let mut votes = vec![0usize; model.class_count];
        for _ in 0..samples {
            let noisy = if sigma == 0.0 {
                x.clone()
            } else {
                let mut data = Vec::with_capacity(x.len());
                for &v in x.data() {
                    data.push((v + rng.normal(0.0, sigma)).clamp(0.0, 255.0));
                }
                Tensor::new(x.shape().to_vec(), data)?
            };
            votes[model.predict(&noisy)?] += 1;
        }
        let winner = votes
            .iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| a.cmp(b).then(j.cmp(i)))
            .map(|(i, _)| i)
            .expect("at least one class");
        return Ok(winner);
    }
    let cleaned = apply_preprocess(cfg, x, seed)?;
    Ok(model.predict(&cleaned)?)
}

/// The IJG baseline luminance quantization table.
const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Orthonormal 8-point DCT-II basis, `C[u][x] = c(u) cos((2x+1) u pi / 16)`.
fn dct_basis() -> [[Real; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let scale = if u == 0 {
            (1.0 as Real / 8.0).sqrt()
        } else {
            (2.0 as Real / 8.0).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = scale
                * ((2 * x + 1) as Real * u as Real * std::f64::consts::PI as Real / 16.0).cos();
        }
    }
    c
}

/// Quality-scaled quantization table, the IJG mapping: q < 50 scales up by
/// 5000/q, otherwise down by 200 - 2q, clamped to [1, 255].
fn scaled_quant(quality: u8) -> [Real; 64] {
    let scale = if quality < 50 {
        5000.0 / quality as Real
    } else {
        200.0 - 2.0 * quality as Real
    };
    let mut out = [0.0; 64];
    for (o, &q) in out.iter_mut().zip(&LUMA_QUANT) {
        *o = ((q as Real * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    out
}

/// Per-channel 8x8 DCT quantization round trip. Pixels are shifted by -128
/// first; partial border blocks are padded with zeros in the shifted domain
/// (mid-gray).
fn jpeg_round_trip(x: &Tensor, quality: u8) -> Result<Tensor, DefenseError> {
    let [c, h, w] = dims3(x)?;
    let basis = dct_basis();
    let quant = scaled_quant(quality);
    let data = x.data();
    let mut out = vec![0.0; data.len()];
    for ch in 0..c {
        let plane = ch * h * w;
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                // Gather the shifted block.
                let mut f = [[0.0; 8]; 8];
                for (i, row) in f.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        if by + i < h && bx + j < w {
                            *v = data[plane + (by + i) * w + bx + j] - 128.0;
                        }
                    }
                }
                // F = C f C^T, quantize, f' = C^T F C.
                let coeffs = mat8(&basis, &matt8(&f, &basis));
                let mut dequant = [[0.0; 8]; 8];
                for i in 0..8 {
                    for j in 0..8 {
                        let q = quant[i * 8 + j];
                        dequant[i][j] = (coeffs[i][j] / q).round() * q;
                    }
                }
                let restored = mat8(&mat8t(&basis, &dequant), &basis);
                for (i, row) in restored.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        if by + i < h && bx + j < w {
                            out[plane + (by + i) * w + bx + j] = (v + 128.0).clamp(0.0, 255.0);
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

/// `a * b`.
fn mat8(a: &[[Real; 8]; 8], b: &[[Real; 8]; 8]) -> [[Real; 8]; 8] {
    let mut out = [[0.0; 8]; 8];
    for i in 0..8 {
        for k in 0..8 {
            let aik = a[i][k];
            for j in 0..8 {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

/// `a * b^T`.
fn matt8(a: &[[Real; 8]; 8], b: &[[Real; 8]; 8]) -> [[Real; 8]; 8] {
    let mut out = [[0.0; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += a[i][k] * b[j][k];
            }
            out[i][j] = acc;
        }
    }
    out
}

/// `a^T * b`.
fn mat8t(a: &[[Real; 8]; 8], b: &[[Real; 8]; 8]) -> [[Real; 8]; 8] {
    let mut out = [[0.0; 8]; 8];
    for i in 0..8 {
        for k in 0..8 {
            let aki = a[k][i];
            for j in 0..8 {
                out[i][j] += aki * b[k][j];
            }
        }
    }
    out
}

/// Replaces `count` random target pixels with a random in-bounds neighbor,
/// the same source offset across channels. Draw order per deflection:
/// y, x, dy, dx.
fn deflect(x: &Tensor, count: usize, radius: usize, rng: &mut Rng) -> Result<Tensor, DefenseError> {
    let [c, h, w] = dims3(x)?;
    let mut out = x.data().to_vec();
    let r = radius as isize;
    for _ in 0..count {
        let ty = rng.below(h);
        let tx = rng.below(w);
        let (sy, sx) = if radius == 0 {
            (ty, tx)
        } else {
            let dy = rng.below(2 * radius + 1) as isize - r;
            let dx = rng.below(2 * radius + 1) as isize - r;
            (
                (ty as isize + dy).clamp(0, h as isize - 1) as usize,
                (tx as isize + dx).clamp(0, w as isize - 1) as usize,
            )
        };
        for ch in 0..c {
            let plane = ch * h * w;
            out[plane + ty * w + tx] = out[plane + sy * w + sx];
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

/// 3x3 median filter with replicate padding, the denoising pass after
/// deflection. Border windows duplicate the clamped samples, so every
/// window holds exactly nine values.
fn median3(x: &Tensor) -> Result<Tensor, DefenseError> {
    let [c, h, w] = dims3(x)?;
    let data = x.data();
    let mut out = vec![0.0; data.len()];
    let mut window = [0.0 as Real; 9];
    for ch in 0..c {
        let plane = ch * h * w;
        for i in 0..h {
            for j in 0..w {
                let mut k = 0;
                for di in -1i64..=1 {
                    let si = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                    for dj in -1i64..=1 {
                        let sj = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                        window[k] = data[plane + si * w + sj];
                        k += 1;
                    }
                }
                window.sort_unstable_by(Real::total_cmp);
                out[plane + i * w + j] = window[4];
            }
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

/// Smoothing constant inside the TV absolute values, `|d| ~ sqrt(d^2 + TV_EPS)`.
const TV_EPS: Real = 1e-8;
/// Gradient-descent step for the TVM reconstruction.
const TVM_STEP: Real = 0.1;

/// Masked reconstruction: keep each pixel with `keep_prob`, then descend
/// `||mask (z - x)||^2 + tv_weight * TV(z)` from `z = x`, where TV sums the
/// smoothed absolute horizontal and vertical neighbor differences.
fn tvm(
    x: &Tensor,
    keep_prob: Real,
    tv_weight: Real,
    iters: usize,
    rng: &mut Rng,
) -> Result<Tensor, DefenseError> {
    let [c, h, w] = dims3(x)?;
    let mask: Vec<bool> = (0..x.len()).map(|_| rng.bernoulli(keep_prob)).collect();
    let data = x.data();
    let mut z = data.to_vec();
    let mut grad = vec![0.0; z.len()];
    for _ in 0..iters {
        for g in &mut grad {
            *g = 0.0;
        }
        for (i, g) in grad.iter_mut().enumerate() {
            if mask[i] {
                *g = 2.0 * (z[i] - data[i]);
            }
        }
        if tv_weight > 0.0 {
            for ch in 0..c {
                let plane = ch * h * w;
                for i in 0..h {
                    for j in 0..w {
                        let at = plane + i * w + j;
                        if i + 1 < h {
                            let d = z[at + w] - z[at];
                            let s = d / (d * d + TV_EPS).sqrt();
                            grad[at] -= tv_weight * s;
                            grad[at + w] += tv_weight * s;
                        }
                        if j + 1 < w {
                            let d = z[at + 1] - z[at];
                            let s = d / (d * d + TV_EPS).sqrt();
                            grad[at] -= tv_weight * s;
                            grad[at + 1] += tv_weight * s;
                        }
                    }
                }
            }
        }
        for (zi, gi) in z.iter_mut().zip(&grad) {
            *zi -= TVM_STEP * gi;
        }
    }
    for zi in &mut z {
        *zi = zi.clamp(0.0, 255.0);
    }
    Ok(Tensor::new(x.shape().to_vec(), z)?)
}

fn dims3(x: &Tensor) -> Result<[usize; 3], TensorError> {
    match x.shape() {
        [c, h, w] => Ok([*c, *h, *w]),
        other => Err(TensorError::Rank {
            op: "defense",
            expected: "[C, H, W]",
            found: other.to_vec(),
        }),
    }
}

/// TVM objective value, exposed for tests.
#[cfg(test)]
fn tvm_objective(z: &[Real], x: &[Real], mask: &[bool], tv_weight: Real, c: usize, h: usize, w: usize) -> Real {
    let mut data_term = 0.0;
    for i in 0..z.len() {
        if mask[i] {
            data_term += (z[i] - x[i]) * (z[i] - x[i]);
        }
    }
    let mut tv = 0.0;
    for ch in 0..c {
        let plane = ch * h * w;
        for i in 0..h {
            for j in 0..w {
                let at = plane + i * w + j;
                if i + 1 < h {
                    let d = z[at + w] - z[at];
                    tv += (d * d + TV_EPS).sqrt();
                }
                if j + 1 < w {
                    let d = z[at + 1] - z[at];
                    tv += (d * d + TV_EPS).sqrt();
                }
            }
        }
    }
    data_term + tv_weight * tv
}
