//! Transfer evaluation: attack a surrogate, measure top-1 error on victim
//! models (optionally behind preprocessing defenses), and export the
//! adversarial images as reloadable 16-bit PNG corpora.
//!
//! Error rates follow a skip-misclassified protocol: each repeat draws fresh
//! test samples the surrogate classifies correctly, so the white-box error
//! is exactly the attack success rate. Victims may still err on the clean
//! originals, so each cell carries the clean error and the error restricted
//! to clean-correct samples alongside the raw adversarial error.

use crate::attack::{loss_terms, run_attack, AttackConfig, LossContext, StopReason};
use crate::data::{read_png, write_png_u16, Dataset, LabelManifest, LABELS_FILE};
use crate::defense::{defended_predict, DefenseConfig};
use crate::error::EvalError;
use crate::network::Model;
use crate::rng::{derive_seed, Rng};
use crate::tensor::{rmse, Real, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

pub const REPORT_FILE: &str = "report.json";
pub const CSV_FILE: &str = "transfer.csv";
pub const GENERATION_FILE: &str = "generation.json";

/// One transfer experiment: a single attack configuration run from one
/// surrogate against a set of victims behind a set of defenses.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    /// Label of the zoo model the attack is computed on.
    pub surrogate: String,
    /// Labels of the models evaluated on the adversarial samples. Empty
    /// means every model in the zoo, surrogate included.
    pub victims: Vec<String>,
    /// Preprocessing defenses evaluated per victim; `None` is the plain,
    /// undefended prediction.
    pub defenses: Vec<DefenseConfig>,
    pub attack: AttackConfig,
    /// Correctly classified samples drawn per repeat.
    pub samples_per_repeat: usize,
    /// Independent sample draws; reported values are mean and spread over
    /// these.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            surrogate: "cnn-max".into(),
            victims: Vec::new(),
            defenses: vec![DefenseConfig::None],
            attack: AttackConfig::default(),
            samples_per_repeat: 200,
            repeats: 5,
            seed: 23,
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.samples_per_repeat == 0 {
            return Err(EvalError::InvalidPlan(
                "samples_per_repeat must be at least 1".into(),
            ));
        }
        if self.repeats == 0 {
            return Err(EvalError::InvalidPlan("repeats must be at least 1".into()));
        }
        if self.defenses.is_empty() {
            return Err(EvalError::InvalidPlan(
                "defenses must not be empty; use the none defense".into(),
            ));
        }
        self.attack.validate()?;
        for defense in &self.defenses {
            defense.validate()?;
        }
        let defense_labels: Vec<String> = self.defenses.iter().map(|d| d.label()).collect();
        check_unique(&defense_labels, "defense")?;
        check_unique(&self.victims, "victim")?;
        Ok(())
    }
}

/// Mean and population spread of one metric over the repeats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Real,
    pub std: Real,
    pub per_repeat: Vec<Real>,
}

impl Summary {
    pub fn from_repeats(values: &[Real]) -> Summary {
        let (mean, std) = mean_std(values);
        Summary {
            mean,
            std,
            per_repeat: values.to_vec(),
        }
    }
}

/// Error rates (percent) for one victim behind one defense.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferCell {
    pub victim: String,
    pub defense: String,
    /// Top-1 error on the adversarial samples.
    pub error: Summary,
    /// Top-1 error on the clean originals of the same samples.
    pub clean_error: Summary,
    /// Error on adversarial samples among those whose clean original the
    /// defended victim gets right; 0 when it gets every clean sample wrong.
    pub error_given_clean_correct: Summary,
}

/// Mean and spread of the two objective terms over clean samples, for
/// judging whether `lambda` actually balances them.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBalance {
    pub attention_mean: Real,
    pub attention_std: Real,
    pub cross_entropy_mean: Real,
    pub cross_entropy_std: Real,
    pub lambda: Real,
    pub samples: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferReport {
    /// The executed plan, with an empty victim list resolved to zoo labels.
    pub plan: ExperimentPlan,
    /// Surrogate error on its own adversarial samples (percent); the clean
    /// surrogate error is zero by the selection protocol.
    pub white_box: Summary,
    /// RMSE between adversarial and original images.
    pub rmse: Summary,
    /// Attack iterations actually applied.
    pub iterations: Summary,
    /// Stop reason counts over every attacked sample.
    pub stops: BTreeMap<String, usize>,
    /// Cells keyed `"{victim}/{defense}"`.
    pub cells: BTreeMap<String, TransferCell>,
    /// Objective term scales over the first repeat's clean samples.
    pub loss_balance: LossBalance,
}

/// Draws a shuffled scan of the dataset and keeps the first `count` indices
/// the model classifies correctly.
pub fn select_samples(
    model: &Model,
    data: &Dataset,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>, EvalError> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    let mut picked = Vec::with_capacity(count);
    for &i in &order {
        if picked.len() == count {
            break;
        }
        if model.predict(&data.images[i])? == data.labels[i] {
            picked.push(i);
        }
    }
    if picked.len() < count {
        return Err(EvalError::Shortfall {
            requested: count,
            available: picked.len(),
        });
    }
    Ok(picked)
}

/// Objective term statistics at the given clean samples. Empty `indices`
/// gives all zeros.
pub fn loss_balance(
    model: &Model,
    data: &Dataset,
    indices: &[usize],
    cfg: &AttackConfig,
) -> Result<LossBalance, EvalError> {
    let mut attention = Vec::with_capacity(indices.len());
    let mut cross_entropy = Vec::with_capacity(indices.len());
    let mut lambda = 0.0;
    for &idx in indices {
        let x = &data.images[idx];
        let ctx = LossContext::prepare(model, x, data.labels[idx], cfg)?;
        let terms = loss_terms(model, x, &ctx, cfg)?;
        attention.push(terms.attention);
        cross_entropy.push(terms.cross_entropy);
        lambda = terms.lambda;
    }
    let (attention_mean, attention_std) = mean_std(&attention);
    let (cross_entropy_mean, cross_entropy_std) = mean_std(&cross_entropy);
    Ok(LossBalance {
        attention_mean,
        attention_std,
        cross_entropy_mean,
        cross_entropy_std,
        lambda,
        samples: indices.len(),
    })
}

/// Runs the full plan. Deterministic in `plan.seed` regardless of thread
/// count: per-sample attack and defense seeds are pure functions of the
/// repeat, sample slot, victim, and defense.
pub fn run_experiment(
    zoo: &[Model],
    test: &Dataset,
    plan: &ExperimentPlan,
) -> Result<TransferReport, EvalError> {
    plan.validate()?;
    let surrogate = find_model(zoo, &plan.surrogate)?;
    let victim_labels: Vec<String> = if plan.victims.is_empty() {
        zoo.iter().map(|m| m.label.clone()).collect()
    } else {
        plan.victims.clone()
    };
    check_unique(&victim_labels, "victim")?;
    let victims: Vec<&Model> = victim_labels
        .iter()
        .map(|label| find_model(zoo, label))
        .collect::<Result<_, _>>()?;
    for model in victims.iter().copied().chain([surrogate]) {
        if model.class_count != test.class_count {
            return Err(EvalError::InvalidPlan(format!(
                "model '{}' has {} classes, dataset has {}",
                model.label, model.class_count, test.class_count
            )));
        }
    }

    let n = plan.samples_per_repeat;
    let d_count = plan.defenses.len();
    let mut selections = Vec::with_capacity(plan.repeats);
    for r in 0..plan.repeats {
        let mut rng = Rng::seed(derive_seed(plan.seed, 0x5E1, r as u64));
        selections.push(select_samples(surrogate, test, n, &mut rng)?);
    }
    let balance = loss_balance(
        surrogate,
        test,
        &selections[0][..n.min(32)],
        &plan.attack,
    )?;

    struct Verdict {
        adv_wrong: bool,
        clean_wrong: bool,
    }
    struct SampleEval {
        white_wrong: bool,
        rmse: Real,
        iterations: usize,
        stop: StopReason,
        verdicts: Vec<Verdict>,
    }

    let mut white = Vec::with_capacity(plan.repeats);
    let mut rmse_means = Vec::with_capacity(plan.repeats);
    let mut iter_means = Vec::with_capacity(plan.repeats);
    let mut stops: BTreeMap<String, usize> = BTreeMap::new();
    let mut err = vec![vec![Vec::new(); d_count]; victims.len()];
    let mut clean = vec![vec![Vec::new(); d_count]; victims.len()];
    let mut cond = vec![vec![Vec::new(); d_count]; victims.len()];

    for (r, indices) in selections.iter().enumerate() {
        let evals: Vec<SampleEval> = indices
            .par_iter()
            .enumerate()
            .map(|(slot, &idx)| -> Result<SampleEval, EvalError> {
                let x = &test.images[idx];
                let y = test.labels[idx];
                let cfg = AttackConfig {
                    seed: derive_seed(plan.seed, 0xA77A, (r * n + slot) as u64),
                    ..plan.attack.clone()
                };
                let out = run_attack(surrogate, x, y, &cfg)?;
                let mut verdicts = Vec::with_capacity(victims.len() * d_count);
                for (vi, victim) in victims.iter().enumerate() {
                    for (di, defense) in plan.defenses.iter().enumerate() {
                        let base = derive_seed(
                            plan.seed,
                            0xDEF0 + (vi * d_count + di) as u64,
                            (r * n + slot) as u64,
                        );
                        let adv =
                            defended_predict(victim, &out.x_adv, defense, derive_seed(base, 0, 0))?;
                        let cln =
                            defended_predict(victim, x, defense, derive_seed(base, 1, 0))?;
                        verdicts.push(Verdict {
                            adv_wrong: adv != y,
                            clean_wrong: cln != y,
                        });
                    }
                }
                Ok(SampleEval {
                    white_wrong: out.prediction != y,
                    rmse: out.rmse,
                    iterations: out.iterations,
                    stop: out.stop,
                    verdicts,
                })
            })
            .collect::<Result<_, _>>()?;

        let nf = n as Real;
        white.push(100.0 * evals.iter().filter(|e| e.white_wrong).count() as Real / nf);
        rmse_means.push(evals.iter().map(|e| e.rmse).sum::<Real>() / nf);
        iter_means.push(evals.iter().map(|e| e.iterations as Real).sum::<Real>() / nf);
        for e in &evals {
            *stops.entry(stop_key(e.stop).to_string()).or_insert(0) += 1;
        }
        for vi in 0..victims.len() {
            for di in 0..d_count {
                let k = vi * d_count + di;
                let wrong = evals.iter().filter(|e| e.verdicts[k].adv_wrong).count();
                let clean_wrong = evals.iter().filter(|e| e.verdicts[k].clean_wrong).count();
                let flipped = evals
                    .iter()
                    .filter(|e| e.verdicts[k].adv_wrong && !e.verdicts[k].clean_wrong)
                    .count();
                let clean_right = n - clean_wrong;
                err[vi][di].push(100.0 * wrong as Real / nf);
                clean[vi][di].push(100.0 * clean_wrong as Real / nf);
                cond[vi][di].push(if clean_right == 0 {
                    0.0
                } else {
                    100.0 * flipped as Real / clean_right as Real
                });
            }
        }
    }

    let mut cells = BTreeMap::new();
    for (vi, label) in victim_labels.iter().enumerate() {
        for (di, defense) in plan.defenses.iter().enumerate() {
            cells.insert(
                format!("{label}/{}", defense.label()),
                TransferCell {
                    victim: label.clone(),
                    defense: defense.label(),
                    error: Summary::from_repeats(&err[vi][di]),
                    clean_error: Summary::from_repeats(&clean[vi][di]),
                    error_given_clean_correct: Summary::from_repeats(&cond[vi][di]),
                },
            );
        }
    }
    Ok(TransferReport {
        plan: ExperimentPlan {
            victims: victim_labels,
            ..plan.clone()
        },
        white_box: Summary::from_repeats(&white),
        rmse: Summary::from_repeats(&rmse_means),
        iterations: Summary::from_repeats(&iter_means),
        stops,
        cells,
        loss_balance: balance,
    })
}

/// Writes `report.json` plus `transfer.csv` with one row per cell, in plan
/// order, percentages formatted `NN.N±N.NN%`.
pub fn write_report(report: &TransferReport, dir: &Path) -> Result<(), EvalError> {
    create_dir(dir)?;
    write_json(&dir.join(REPORT_FILE), report)?;
    let mut csv = String::from("victim,defense,error,clean_error,error_given_clean_correct\n");
    for victim in &report.plan.victims {
        for defense in &report.plan.defenses {
            let key = format!("{victim}/{}", defense.label());
            let cell = report.cells.get(&key).ok_or_else(|| {
                EvalError::InvalidPlan(format!("report has no cell '{key}'"))
            })?;
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                cell.victim,
                cell.defense,
                pct(&cell.error),
                pct(&cell.clean_error),
                pct(&cell.error_given_clean_correct)
            ));
        }
    }
    let path = dir.join(CSV_FILE);
    std::fs::write(&path, csv).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Provenance record written next to a generated adversarial corpus.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub attack: AttackConfig,
    pub seed: u64,
    pub source: String,
    pub sample_count: usize,
    /// The integer l-inf radius enforced on file values, `floor(eps * 257)`.
    pub epsilon_u16: i64,
    pub mean_rmse: Real,
    /// Stop reason counts for freshly attacked samples only.
    pub stops: BTreeMap<String, usize>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub written: usize,
    /// Files that already existed and were kept after bound verification.
    pub reused: usize,
    pub mean_rmse: Real,
}

/// Attacks the given samples and writes `adv_{index:06}.png` files plus a
/// `labels.json` manifest, producing a directory that loads as a PNG corpus.
///
/// Existing files are kept, so an interrupted run resumes where it stopped.
/// Every file, fresh or reused, is read back and checked against the
/// integer-domain perturbation bound; pixels are written on the 16-bit grid
/// `round(v * 257)` and clamped into the bound, so fresh files always pass.
pub fn generate_adversarial_dataset(
    model: &Model,
    data: &Dataset,
    indices: &[usize],
    attack: &AttackConfig,
    dir: &Path,
    seed: u64,
) -> Result<GenerationSummary, EvalError> {
    attack.validate()?;
    if indices.is_empty() {
        return Err(EvalError::InvalidPlan("no samples requested".into()));
    }
    if indices.iter().collect::<BTreeSet<_>>().len() != indices.len() {
        return Err(EvalError::InvalidPlan("duplicate sample indices".into()));
    }
    for &idx in indices {
        if idx >= data.len() {
            return Err(EvalError::InvalidPlan(format!(
                "sample index {idx} out of range for {} images",
                data.len()
            )));
        }
    }
    create_dir(dir)?;
    let eps_q = (attack.epsilon * 257.0).floor() as i64;

    struct Entry {
        name: String,
        label: usize,
        rmse: Real,
        stop: Option<StopReason>,
    }

    let entries: Vec<Entry> = indices
        .par_iter()
        .map(|&idx| -> Result<Entry, EvalError> {
            let x = &data.images[idx];
            let name = format!("adv_{idx:06}.png");
            let path = dir.join(&name);
            let mut stop = None;
            if !path.exists() {
                let cfg = AttackConfig {
                    seed: derive_seed(seed, 0xA77A, idx as u64),
                    ..attack.clone()
                };
                let out = run_attack(model, x, data.labels[idx], &cfg)?;
                write_png_u16(&path, &quantize_into_box(&out.x_adv, x, eps_q)?)?;
                stop = Some(out.stop);
            }
            let loaded = read_png(&path)?;
            if loaded.shape() != x.shape() {
                return Err(EvalError::Image {
                    path: path.display().to_string(),
                    reason: format!(
                        "shape {:?} does not match source {:?}",
                        loaded.shape(),
                        x.shape()
                    ),
                });
            }
            verify_bound(&loaded, x, eps_q, &path)?;
            Ok(Entry {
                name,
                label: data.labels[idx],
                rmse: rmse(&loaded, x)?,
                stop,
            })
        })
        .collect::<Result<_, _>>()?;

    let labels: BTreeMap<String, usize> = entries
        .iter()
        .map(|e| (e.name.clone(), e.label))
        .collect();
    write_json(
        &dir.join(LABELS_FILE),
        &LabelManifest {
            classes: data.class_count,
            labels,
        },
    )?;
    let mut stops = BTreeMap::new();
    for entry in &entries {
        if let Some(stop) = entry.stop {
            *stops.entry(stop_key(stop).to_string()).or_insert(0) += 1;
        }
    }
    let written = entries.iter().filter(|e| e.stop.is_some()).count();
    let mean_rmse = entries.iter().map(|e| e.rmse).sum::<Real>() / entries.len() as Real;
    write_json(
        &dir.join(GENERATION_FILE),
        &GenerationManifest {
            attack: attack.clone(),
            seed,
            source: data.provenance.clone(),
            sample_count: entries.len(),
            epsilon_u16: eps_q,
            mean_rmse,
            stops,
        },
    )?;
    Ok(GenerationSummary {
        written,
        reused: entries.len() - written,
        mean_rmse,
    })
}

/// Quantizes to the 16-bit grid and clamps each value into the integer box
/// `round(x_ori * 257) +- eps_q`. The returned values are `q / 257`, which
/// the 16-bit writer maps back to exactly `q`.
fn quantize_into_box(x_adv: &Tensor, x_ori: &Tensor, eps_q: i64) -> Result<Tensor, EvalError> {
    let data = x_adv
        .data()
        .iter()
        .zip(x_ori.data())
        .map(|(&a, &o)| {
            let qo = ((o * 257.0).round() as i64).clamp(0, 65535);
            let qa = ((a * 257.0).round() as i64)
                .clamp((qo - eps_q).max(0), (qo + eps_q).min(65535));
            qa as Real / 257.0
        })
        .collect();
    Ok(Tensor::new(x_adv.shape().to_vec(), data)?)
}

/// Checks the file-level l-inf bound in the 16-bit integer domain, where
/// both sides are exact.
fn verify_bound(
    loaded: &Tensor,
    x_ori: &Tensor,
    eps_q: i64,
    path: &Path,
) -> Result<(), EvalError> {
    let mut excess = 0i64;
    for (&l, &o) in loaded.data().iter().zip(x_ori.data()) {
        let ql = (l * 257.0).round() as i64;
        let qo = ((o * 257.0).round() as i64).clamp(0, 65535);
        excess = excess.max((ql - qo).abs() - eps_q);
    }
    if excess > 0 {
        return Err(EvalError::BoundViolation {
            path: path.display().to_string(),
            excess,
        });
    }
    Ok(())
}

fn find_model<'a>(zoo: &'a [Model], label: &str) -> Result<&'a Model, EvalError> {
    zoo.iter()
        .find(|m| m.label == label)
        .ok_or_else(|| EvalError::UnknownModel(label.to_string()))
}

fn check_unique(labels: &[String], what: &str) -> Result<(), EvalError> {
    for (i, label) in labels.iter().enumerate() {
        if labels[..i].contains(label) {
            return Err(EvalError::InvalidPlan(format!("duplicate {what} '{label}'")));
        }
    }
    Ok(())
}

fn stop_key(stop: StopReason) -> &'static str {
    match stop {
        StopReason::RmseReached => "rmse_reached",
        StopReason::MaxIters => "max_iters",
        StopReason::VanishingGradient => "vanishing_gradient",
    }
}

fn mean_std(values: &[Real]) -> (Real, Real) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as Real;
    let mean = values.iter().sum::<Real>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
    (mean, var.sqrt())
}

/// `"NN.N±N.NN%"`, the mean with its spread over repeats.
fn pct(s: &Summary) -> String {
    format!("{:.1}±{:.2}%", s.mean, s.std)
}

fn create_dir(dir: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir).map_err(|source| EvalError::Io {
        path: dir.display().to_string(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EvalError> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|source| EvalError::Json {
        path: path.display().to_string(),
        source,
    })?;
    std::fs::write(path, bytes).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}
