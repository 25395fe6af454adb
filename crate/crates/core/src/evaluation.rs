//! Angular-error evaluation, yaw-range slicing, rotation sweeps, corruption
//! tests, and ablation comparison tables.

use std::fmt::Write as _;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Label, Sample};
use crate::error::{Error, Result};
use crate::geometry::{angular_error_angles, rotate2d, GazeAngles};
use crate::image::{rotate_point, Border};
use crate::networks::{batch_tensor, EncoderInput};
use crate::nn::Mode;
use crate::pmn::{LabelScale, ModelBundle};

/// Yaw half-ranges (degrees) of the default report slices, widest first.
pub const DEFAULT_RANGES: [f64; 3] = [180.0, 90.0, 20.0];

/// Rotation angles (degrees) of the default equivariance sweep.
pub const DEFAULT_THETAS: [f64; 7] = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0];

/// Anything that maps samples to gaze angles.
pub trait Predictor {
    fn predict(&self, samples: &[Sample]) -> Result<Vec<GazeAngles>>;
}

/// Stacks the network inputs of `samples`.
pub fn encoder_input(samples: &[&Sample], dtype: candle_core::DType) -> Result<EncoderInput> {
    let faces: Vec<_> = samples.iter().map(|s| &s.face).collect();
    let lefts: Vec<_> = samples.iter().map(|s| &s.left_patch).collect();
    let rights: Vec<_> = samples.iter().map(|s| &s.right_patch).collect();
    Ok(EncoderInput {
        face: batch_tensor(&faces, dtype)?,
        left: batch_tensor(&lefts, dtype)?,
        right: batch_tensor(&rights, dtype)?,
    })
}

/// Eval-mode network outputs in batches, as rows of f64.
pub fn model_outputs(bundle: &ModelBundle, samples: &[Sample], batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let x = encoder_input(&refs, bundle.params.dtype())?;
        let y: Tensor = bundle.model.forward(&x, Mode::Eval, &mut rng)?;
        let y = y.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
        out.extend(y);
    }
    Ok(out)
}

/// A trained gaze model viewed as a predictor.
pub struct ModelPredictor<'a> {
    pub bundle: &'a ModelBundle,
    pub scale: LabelScale,
    pub batch: usize,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, samples: &[Sample]) -> Result<Vec<GazeAngles>> {
        Ok(model_outputs(self.bundle, samples, self.batch)?
            .into_iter()
            .map(|r| self.scale.denormalize([r[0], r[1]]))
            .collect())
    }
}

/// Echoes the label: the zero-error reference.
pub struct LabelOracle;

impl Predictor for LabelOracle {
    fn predict(&self, samples: &[Sample]) -> Result<Vec<GazeAngles>> {
        samples
            .iter()
            .map(|s| s.label.gaze().ok_or_else(|| Error::contract("oracle needs gaze labels")))
            .collect()
    }
}

/// Always predicts the same angles.
pub struct ConstantPredictor(pub GazeAngles);

impl Predictor for ConstantPredictor {
    fn predict(&self, samples: &[Sample]) -> Result<Vec<GazeAngles>> {
        Ok(vec![self.0; samples.len()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub file: String,
    pub subject: String,
    pub label_pitch_deg: f64,
    pub label_yaw_deg: f64,
    pub pred_pitch_deg: f64,
    pub pred_yaw_deg: f64,
    pub error_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub name: String,
    pub max_abs_yaw_deg: f64,
    pub count: usize,
    /// Undefined (None) for an empty slice.
    pub mean_error_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub count: usize,
    pub mean_error_deg: f64,
    pub slices: Vec<SliceReport>,
    pub samples: Vec<SampleError>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Scores `samples` with angular error, overall and per yaw slice.
pub fn evaluate(predictor: &dyn Predictor, samples: &[Sample], ranges: &[f64], config_hash: &str) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation needs at least one sample"));
    }
    let preds = predictor.predict(samples)?;
    if preds.len() != samples.len() {
        return Err(Error::contract(format!("{} predictions for {} samples", preds.len(), samples.len())));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(&preds) {
        let l = s.label.gaze().ok_or_else(|| Error::contract(format!("{} has no gaze label", s.file)))?;
        rows.push(SampleError {
            file: s.file.clone(),
            subject: s.subject.clone(),
            label_pitch_deg: l.pitch.to_degrees(),
            label_yaw_deg: l.yaw.to_degrees(),
            pred_pitch_deg: p.pitch.to_degrees(),
            pred_yaw_deg: p.yaw.to_degrees(),
            error_deg: angular_error_angles(l, *p),
        });
    }
    let slices = ranges
        .iter()
        .map(|&r| {
            let inside = || rows.iter().filter(move |e| e.label_yaw_deg.abs() <= r + 1e-9);
            SliceReport {
                name: format!("±{r}°"),
                max_abs_yaw_deg: r,
                count: inside().count(),
                mean_error_deg: mean(inside().map(|e| e.error_deg)),
            }
        })
        .collect();
    Ok(EvalReport {
        config_hash: config_hash.to_string(),
        count: rows.len(),
        mean_error_deg: mean(rows.iter().map(|e| e.error_deg)).unwrap(),
        slices,
        samples: rows,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config {}  samples {}", self.config_hash, self.count);
        let _ = writeln!(s, "{:<10} {:>7} {:>12}", "slice", "count", "error (deg)");
        for sl in &self.slices {
            let e = sl.mean_error_deg.map_or("n/a".to_string(), |e| format!("{e:.3}"));
            let _ = writeln!(s, "{:<10} {:>7} {:>12}", sl.name, sl.count, e);
        }
        let _ = writeln!(s, "{:<10} {:>7} {:>12.3}", "all", self.count, self.mean_error_deg);
        s
    }
}

/// Classification accuracy for expression models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub config_hash: String,
    pub count: usize,
    pub accuracy: f64,
    /// (correct, total) per class.
    pub per_class: Vec<(usize, usize)>,
}

pub fn evaluate_classes(bundle: &ModelBundle, samples: &[Sample], classes: usize, config_hash: &str) -> Result<ClassReport> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation needs at least one sample"));
    }
    let logits = model_outputs(bundle, samples, 64)?;
    let mut per_class = vec![(0usize, 0usize); classes];
    let mut correct = 0;
    for (s, row) in samples.iter().zip(&logits) {
        let label = s.label.class().ok_or_else(|| Error::contract(format!("{} has no class label", s.file)))?;
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        per_class[label].1 += 1;
        if pred == label {
            per_class[label].0 += 1;
            correct += 1;
        }
    }
    Ok(ClassReport {
        config_hash: config_hash.to_string(),
        count: samples.len(),
        accuracy: correct as f64 / samples.len() as f64,
        per_class,
    })
}

// ---------------------------------------------------------------------------
// Rotation sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivariancePoint {
    pub theta_deg: f64,
    pub count: usize,
    pub excluded: usize,
    pub mean_error_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceCurve {
    pub config_hash: String,
    pub points: Vec<EquivariancePoint>,
}

/// Rotates a sample's source image, landmarks and label by θ (radians) and
/// rebuilds its network inputs.
pub fn rotate_record(
    manifest: &DatasetManifest,
    index: usize,
    theta: f64,
    face_size: usize,
    margin: f64,
) -> Result<Sample> {
    let r = &manifest.records[index];
    let label = match r.label {
        Label::Gaze(a) => Label::Gaze(GazeAngles::from_plane_vector(rotate2d(a.as_plane_vector(), theta)?)?),
        other => other,
    };
    if theta == 0.0 {
        return Sample::from_parts(&r.file, &r.image, r.landmarks.as_ref(), label, &r.subject, face_size, margin);
    }
    let image = r.image.rotate(theta, Border::Reflect);
    let center = r.image.center();
    let landmarks = r.landmarks.map(|l| l.map(|p| rotate_point(p, center, theta)));
    Sample::from_parts(&r.file, &image, landmarks.as_ref(), label, &r.subject, face_size, margin)
}

/// For each θ: rotate images, patches and labels together, then evaluate.
pub fn equivariance_sweep(
    predictor: &dyn Predictor,
    manifest: &DatasetManifest,
    indices: &[usize],
    thetas_deg: &[f64],
    face_size: usize,
    margin: f64,
    config_hash: &str,
) -> Result<EquivarianceCurve> {
    if thetas_deg.iter().any(|t| !t.is_finite()) {
        return Err(Error::Domain("rotation angles must be finite".into()));
    }
    let mut thetas = thetas_deg.to_vec();
    thetas.sort_by(f64::total_cmp);
    let mut points = Vec::with_capacity(thetas.len());
    for theta in thetas {
        let mut samples = Vec::with_capacity(indices.len());
        let mut excluded = 0;
        for &i in indices {
            match rotate_record(manifest, i, theta.to_radians(), face_size, margin) {
                Ok(s) => samples.push(s),
                Err(Error::Extraction(_)) => excluded += 1,
                Err(e) => return Err(e),
            }
        }
        let mean_error_deg = if samples.is_empty() {
            None
        } else {
            Some(evaluate(predictor, &samples, &[], config_hash)?.mean_error_deg)
        };
        points.push(EquivariancePoint { theta_deg: theta, count: samples.len(), excluded, mean_error_deg });
    }
    Ok(EquivarianceCurve { config_hash: config_hash.to_string(), points })
}

// ---------------------------------------------------------------------------
// Appearance corruption

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Corruption {
    /// x ↦ x^γ; γ > 1 darkens.
    Darken { gamma: f64 },
    Blur { sigma: f64 },
}

impl Corruption {
    pub fn apply(&self, s: &Sample) -> Sample {
        let f = |img: &crate::image::Image| match *self {
            Corruption::Darken { gamma } => img.gamma(gamma),
            Corruption::Blur { sigma } => img.gaussian_blur(sigma),
        };
        Sample {
            face: f(&s.face),
            left_patch: f(&s.left_patch),
            right_patch: f(&s.right_patch),
            ..s.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionReport {
    pub corruption: Corruption,
    pub clean: EvalReport,
    pub corrupted: EvalReport,
    /// Clean evaluation restricted to samples below the illumination threshold.
    pub low_light: Option<EvalReport>,
    pub low_light_threshold: Option<f64>,
}

pub fn corruption_eval(
    predictor: &dyn Predictor,
    samples: &[Sample],
    corruption: Corruption,
    low_light_threshold: Option<f64>,
    config_hash: &str,
) -> Result<CorruptionReport> {
    match corruption {
        Corruption::Darken { gamma } if !(gamma > 0.0) => {
            return Err(Error::Domain(format!("darkening gamma must be positive, got {gamma}")))
        }
        Corruption::Blur { sigma } if !(sigma >= 0.0) => {
            return Err(Error::Domain(format!("blur sigma must be non-negative, got {sigma}")))
        }
        _ => {}
    }
    let clean = evaluate(predictor, samples, &DEFAULT_RANGES, config_hash)?;
    let corrupted_samples: Vec<Sample> = samples.iter().map(|s| corruption.apply(s)).collect();
    let corrupted = evaluate(predictor, &corrupted_samples, &DEFAULT_RANGES, config_hash)?;
    let low_light = match low_light_threshold {
        Some(t) => {
            let dark: Vec<Sample> = samples.iter().filter(|s| s.illumination < t).cloned().collect();
            if dark.is_empty() {
                None
            } else {
                Some(evaluate(predictor, &dark, &DEFAULT_RANGES, config_hash)?)
            }
        }
        None => None,
    };
    Ok(CorruptionReport { corruption, clean, corrupted, low_light, low_light_threshold })
}

// ---------------------------------------------------------------------------
// Ablation comparison

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub errors: Vec<Option<f64>>,
    /// Mean over columns of 100·(L_variant − L_ref)/L_ref.
    pub mean_increase_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub reference: String,
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

/// Mean over columns of the percentage increase; columns where either side
/// is undefined are skipped.
pub fn mean_percentage_increase(reference: &[Option<f64>], variant: &[Option<f64>]) -> Option<f64> {
    mean(
        reference
            .iter()
            .zip(variant)
            .filter_map(|(r, v)| match (r, v) {
                (Some(r), Some(v)) if *r > 0.0 => Some(100.0 * (v - r) / r),
                _ => None,
            }),
    )
}

fn columns(r: &EvalReport) -> (Vec<String>, Vec<Option<f64>>) {
    if r.slices.is_empty() {
        (vec!["all".into()], vec![Some(r.mean_error_deg)])
    } else {
        (
            r.slices.iter().map(|s| s.name.clone()).collect(),
            r.slices.iter().map(|s| s.mean_error_deg).collect(),
        )
    }
}

/// One row per variant, reference first.
pub fn ablation_report(reference: (&str, &EvalReport), variants: &[(&str, &EvalReport)]) -> Result<AblationTable> {
    let (cols, ref_err) = columns(reference.1);
    let mut rows = vec![AblationRow {
        variant: reference.0.to_string(),
        errors: ref_err.clone(),
        mean_increase_pct: Some(0.0),
    }];
    for (name, rep) in variants {
        let (c, e) = columns(rep);
        if c != cols {
            return Err(Error::Report(format!(
                "variant {name} has slices {c:?}, reference has {cols:?}"
            )));
        }
        rows.push(AblationRow {
            variant: name.to_string(),
            mean_increase_pct: mean_percentage_increase(&ref_err, &e),
            errors: e,
        });
    }
    Ok(AblationTable { reference: reference.0.to_string(), columns: cols, rows })
}

impl AblationTable {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<14}", "variant");
        for c in &self.columns {
            let _ = write!(s, " {c:>10}");
        }
        let _ = writeln!(s, " {:>10}", "Δ% vs ref");
        for r in &self.rows {
            let _ = write!(s, "{:<14}", r.variant);
            for e in &r.errors {
                let cell = e.map_or("n/a".to_string(), |v| format!("{v:.3}"));
                let _ = write!(s, " {cell:>10}");
            }
            let d = r.mean_increase_pct.map_or("n/a".to_string(), |v| format!("{v:+.2}"));
            let _ = writeln!(s, " {d:>10}");
        }
        s
    }
}

/// `<kind>-<hash12>-<unix seconds>.json`
pub fn report_file_name(kind: &str, config_hash: &str) -> String {
    let ts = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("{kind}-{}-{ts}.json", &config_hash[..config_hash.len().min(12)])
}
