//! Interactive browser demo, compiled to WebAssembly.
//!
//! A [`Demo`] session wraps one classifier. The page drives three
//! operations: generate a corpus sample, attack it with a chosen preset,
//! and render attention heat maps of either image for any class. All
//! methods also work natively, so the crate's tests run on the host.
//!
//! Images cross the boundary as RGBA byte buffers sized for direct
//! `putImageData`; everything else crosses as JSON strings.

use aoa::attack::{run_attack, AttackConfig};
use aoa::data::{synthetic_image, SYNTHETIC_CLASSES, SYNTHETIC_SIDE};
use aoa::network::{decode_model, Model};
use aoa::relevance::{heatmap, RelevanceConfig};
use aoa::tensor::{Real, Tensor};
use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;

/// What the model says about one image.
#[derive(Serialize)]
struct Verdict {
    label: usize,
    prediction: usize,
    probabilities: Vec<Real>,
}

/// Outcome of one attack run, plus the verdict on the adversarial image.
#[derive(Serialize)]
struct AttackSummary {
    preset: String,
    iterations: usize,
    stop: String,
    rmse: Real,
    flipped: bool,
    verdict: Verdict,
}

fn err(context: &str, e: impl std::fmt::Display) -> String {
    format!("{context}: {e}")
}

/// One demo session: a fixed classifier, the current sample, and the last
/// adversarial image produced from it.
#[wasm_bindgen]
pub struct Demo {
    model: Model,
    label: usize,
    clean: Tensor,
    adv: Option<Tensor>,
}

#[wasm_bindgen]
impl Demo {
    /// Builds a session around a serialized model (the page fetches the
    /// model file and passes its bytes). Starts with a generated sample.
    #[wasm_bindgen(constructor)]
    pub fn new(model_bytes: &[u8]) -> Result<Demo, String> {
        let model = decode_model(model_bytes, "fetched model").map_err(|e| err("load", e))?;
        if model.input_shape != [1, SYNTHETIC_SIDE, SYNTHETIC_SIDE] {
            return Err(format!(
                "demo expects a {SYNTHETIC_SIDE}x{SYNTHETIC_SIDE} grayscale model, got {:?}",
                model.input_shape
            ));
        }
        Ok(Demo {
            model,
            label: 0,
            clean: synthetic_image(0, 0),
            adv: None,
        })
    }

    pub fn side(&self) -> usize {
        SYNTHETIC_SIDE
    }

    pub fn class_count(&self) -> usize {
        SYNTHETIC_CLASSES
    }

    pub fn model_label(&self) -> String {
        self.model.label.clone()
    }

    /// Replaces the working sample and returns the model's verdict on it.
    pub fn generate(&mut self, seed: u32, label: usize) -> Result<String, String> {
        if label >= SYNTHETIC_CLASSES {
            return Err(format!("label {label} out of range 0..{SYNTHETIC_CLASSES}"));
        }
        self.label = label;
        self.clean = synthetic_image(seed as u64, label);
        self.adv = None;
        let verdict = self.verdict(&self.clean)?;
        serde_json::to_string(&verdict).map_err(|e| err("encode", e))
    }

    /// Attacks the working sample with a named preset (`aoa`, `si-aoa`,
    /// `pgd`, `cw`, ...) and returns a JSON summary.
    pub fn attack(&mut self, preset: &str) -> Result<String, String> {
        let cfg = AttackConfig::preset(preset)
            .ok_or_else(|| format!("unknown attack preset {preset:?}"))?;
        let out =
            run_attack(&self.model, &self.clean, self.label, &cfg).map_err(|e| err("attack", e))?;
        let verdict = self.verdict(&out.x_adv)?;
        let summary = AttackSummary {
            preset: preset.to_string(),
            iterations: out.iterations,
            stop: format!("{:?}", out.stop),
            rmse: out.rmse,
            flipped: out.prediction != self.label,
            verdict,
        };
        self.adv = Some(out.x_adv);
        serde_json::to_string(&summary).map_err(|e| err("encode", e))
    }

    /// RGBA rendering of the working sample.
    pub fn clean_rgba(&self) -> Vec<u8> {
        gray_rgba(&self.clean)
    }

    /// RGBA rendering of the last adversarial image.
    pub fn adv_rgba(&self) -> Result<Vec<u8>, String> {
        Ok(gray_rgba(self.adv()?))
    }

    /// The perturbation, amplified and centered on gray so structure at a
    /// few gray levels is visible.
    pub fn diff_rgba(&self, amplify: Real) -> Result<Vec<u8>, String> {
        let adv = self.adv()?;
        let diff: Vec<Real> = adv
            .data()
            .iter()
            .zip(self.clean.data())
            .map(|(a, c)| 127.5 + amplify * (a - c))
            .collect();
        let t = Tensor::new(self.clean.shape().to_vec(), diff).map_err(|e| err("diff", e))?;
        Ok(gray_rgba(&t))
    }

    /// Attention heat map of the clean (or adversarial) image for `class`,
    /// rendered through a blue-white-red diverging palette.
    pub fn heatmap_rgba(&self, class: usize, adversarial: bool) -> Result<Vec<u8>, String> {
        if class >= SYNTHETIC_CLASSES {
            return Err(format!("class {class} out of range 0..{SYNTHETIC_CLASSES}"));
        }
        let x = if adversarial { self.adv()? } else { &self.clean };
        let map = heatmap(&self.model, x, class, &RelevanceConfig::default())
            .map_err(|e| err("heatmap", e))?;
        Ok(diverging_rgba(&map))
    }

    fn adv(&self) -> Result<&Tensor, String> {
        self.adv.as_ref().ok_or_else(|| "no attack has run on this sample yet".to_string())
    }

    fn verdict(&self, x: &Tensor) -> Result<Verdict, String> {
        let probs = self
            .model
            .forward(x)
            .map_err(|e| err("forward", e))?
            .probs;
        let prediction = self.model.predict(x).map_err(|e| err("predict", e))?;
        Ok(Verdict {
            label: self.label,
            prediction,
            probabilities: probs.data().to_vec(),
        })
    }
}

/// Grayscale `[1, H, W]` tensor in `[0, 255]` to RGBA bytes.
fn gray_rgba(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.data().len() * 4);
    for &v in t.data() {
        let g = v.round().clamp(0.0, 255.0) as u8;
        out.extend_from_slice(&[g, g, g, 255]);
    }
    out
}

/// Relevance tensor to RGBA through a symmetric diverging palette: negative
/// relevance in blue, positive in red, white at zero. Normalized by the
/// largest magnitude so the palette always spans the map's own range.
fn diverging_rgba(map: &Tensor) -> Vec<u8> {
    let peak = map
        .data()
        .iter()
        .fold(0.0 as Real, |m, &v| m.max(v.abs()))
        .max(1e-12);
    let mut out = Vec::with_capacity(map.data().len() * 4);
    for &v in map.data() {
        let s = (v / peak).clamp(-1.0, 1.0);
        let fade = (255.0 * (1.0 - s.abs())) as u8;
        let (r, g, b) = if s >= 0.0 {
            (255, fade, fade)
        } else {
            (fade, fade, 255)
        };
        out.extend_from_slice(&[r, g, b, 255]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use aoa::data::{synthetic_corpus, SyntheticConfig};
    use aoa::network::{encode_model, zoo_architectures, TrainConfig, Trainer};

    /// A small but competent classifier in serialized form, trained once.
    fn model_bytes() -> &'static [u8] {
        use std::sync::OnceLock;
        static BYTES: OnceLock<Vec<u8>> = OnceLock::new();
        BYTES.get_or_init(|| {
            let corpus = synthetic_corpus(&SyntheticConfig {
                train_count: 600,
                test_count: 100,
                seed: 7,
            })
            .unwrap();
            let arch = zoo_architectures(1, SYNTHETIC_CLASSES)
                .into_iter()
                .find(|a| a.label == "cnn-max")
                .unwrap();
            let model = Model::from_specs(
                "demo",
                &[1, SYNTHETIC_SIDE, SYNTHETIC_SIDE],
                SYNTHETIC_CLASSES,
                arch.preprocess,
                &arch.specs,
                3,
            )
            .unwrap();
            let mut trainer = Trainer::new(
                model,
                TrainConfig {
                    epochs: 4,
                    ..TrainConfig::default()
                },
            );
            let b = trainer.batches_per_epoch(corpus.train.len());
            for _ in 0..4 * b {
                trainer.step_batch(&corpus.train).unwrap();
            }
            encode_model(trainer.model()).unwrap()
        })
    }

    #[test]
    fn session_generates_attacks_and_renders() {
        let mut demo = Demo::new(model_bytes()).unwrap();
        assert_eq!(demo.side(), SYNTHETIC_SIDE);
        assert_eq!(demo.class_count(), SYNTHETIC_CLASSES);

        let verdict = demo.generate(11, 2).unwrap();
        let v: serde_json::Value = serde_json::from_str(&verdict).unwrap();
        assert_eq!(v["label"], 2);
        assert_eq!(v["probabilities"].as_array().unwrap().len(), SYNTHETIC_CLASSES);

        let px = demo.clean_rgba();
        assert_eq!(px.len(), SYNTHETIC_SIDE * SYNTHETIC_SIDE * 4);
        assert!(px.chunks(4).all(|c| c[0] == c[1] && c[1] == c[2] && c[3] == 255));

        // No adversarial image before an attack.
        assert!(demo.adv_rgba().is_err());

        let summary = demo.attack("aoa").unwrap();
        let s: serde_json::Value = serde_json::from_str(&summary).unwrap();
        assert!(s["iterations"].as_u64().unwrap() >= 1);
        assert!(s["rmse"].as_f64().unwrap() > 0.0);
        assert_eq!(demo.adv_rgba().unwrap().len(), SYNTHETIC_SIDE * SYNTHETIC_SIDE * 4);
        assert_eq!(demo.diff_rgba(8.0).unwrap().len(), SYNTHETIC_SIDE * SYNTHETIC_SIDE * 4);

        let map = demo.heatmap_rgba(2, false).unwrap();
        assert_eq!(map.len(), SYNTHETIC_SIDE * SYNTHETIC_SIDE * 4);
        let adv_map = demo.heatmap_rgba(2, true).unwrap();
        assert_eq!(adv_map.len(), SYNTHETIC_SIDE * SYNTHETIC_SIDE * 4);
        assert_ne!(map, adv_map, "attack should move the heat map");
    }

    #[test]
    fn rejects_garbage_and_out_of_range_requests() {
        assert!(Demo::new(b"not a model").is_err());
        let mut demo = Demo::new(model_bytes()).unwrap();
        assert!(demo.generate(1, SYNTHETIC_CLASSES).is_err());
        assert!(demo.attack("no-such-preset").is_err());
        assert!(demo.heatmap_rgba(SYNTHETIC_CLASSES, false).is_err());
    }

    #[test]
    fn attack_presets_exposed_to_the_page_all_run() {
        let mut demo = Demo::new(model_bytes()).unwrap();
        for preset in ["aoa", "si-aoa", "pgd", "cw"] {
            demo.generate(3, 1).unwrap();
            let out = demo.attack(preset).unwrap();
            let s: serde_json::Value = serde_json::from_str(&out).unwrap();
            assert_eq!(s["preset"], preset);
        }
    }
}
