//! Samples, the on-disk dataset layout, eye-patch extraction, the synthetic
//! face renderer, and split schemes.
//!
//! Directory layout:
//!
//! ```text
//! root/images/<file>.png
//! root/labels.csv      file,subject,pitch,yaw,unit   (unit: deg | rad)
//!                      file,subject,class            (expression variant)
//! root/landmarks.csv   file,left_x1,left_y1,left_x2,left_y2,right_x1,right_y1,right_x2,right_y2   (optional)
//! ```
//!
//! Landmarks are eye-corner pixel coordinates. "Left" is the eye with the
//! smaller x in the image frame.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Task, EYE_PATCH_SIZE};
use crate::error::{Error, Result};
use crate::geometry::{angles_to_vector, GazeAngles};
use crate::image::{Border, Image, Rect};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Gaze(GazeAngles),
    Class(usize),
}

impl Label {
    pub fn gaze(&self) -> Option<GazeAngles> {
        match self {
            Label::Gaze(a) => Some(*a),
            Label::Class(_) => None,
        }
    }

    pub fn class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Gaze(_) => None,
        }
    }
}

/// Two corner points per eye, (x, y) in source pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EyeLandmarks {
    pub left: [(f64, f64); 2],
    pub right: [(f64, f64); 2],
}

impl EyeLandmarks {
    pub fn map(&self, f: impl Fn((f64, f64)) -> (f64, f64)) -> Self {
        Self {
            left: [f(self.left[0]), f(self.left[1])],
            right: [f(self.right[0]), f(self.right[1])],
        }
    }

    /// Reassigns left/right so that left has the smaller mean x.
    pub fn ordered(self) -> Self {
        let mean_x = |p: [(f64, f64); 2]| (p[0].0 + p[1].0) / 2.0;
        if mean_x(self.left) <= mean_x(self.right) {
            self
        } else {
            Self { left: self.right, right: self.left }
        }
    }
}

/// One manifest entry: a decoded source image plus annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub file: String,
    pub subject: String,
    pub image: Image,
    pub label: Label,
    pub landmarks: Option<EyeLandmarks>,
    /// Ground-truth pupil boxes (left, right); synthetic data only.
    pub pupils: Option<[Rect; 2]>,
    /// Rendered deliberately dark; synthetic data only.
    pub planted_dark: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngleUnit {
    Deg,
    Rad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: Option<PathBuf>,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_landmarks(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.landmarks.is_some())
    }

    /// Sorted distinct subject ids.
    pub fn subjects(&self) -> Vec<String> {
        self.records.iter().map(|r| r.subject.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        DatasetManifest {
            root: self.root.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}

/// Crops both eyes from `image` and resizes each to 36×60.
pub fn extract_eye_patches(image: &Image, landmarks: &EyeLandmarks, margin: f64) -> Result<(Image, Image)> {
    let lm = landmarks.ordered();
    let (w, h) = (image.width() as f64, image.height() as f64);
    let mut crops = Vec::with_capacity(2);
    for (side, corners) in [("left", lm.left), ("right", lm.right)] {
        for &(x, y) in &corners {
            if !(x.is_finite() && y.is_finite()) || x < 0.0 || y < 0.0 || x > w - 1.0 || y > h - 1.0 {
                return Err(Error::Extraction(format!(
                    "{side} eye corner ({x:.1}, {y:.1}) outside the {}x{} image",
                    image.width(),
                    image.height()
                )));
            }
        }
        crops.push(eye_rect(corners, margin).ok_or_else(|| {
            Error::Extraction(format!("{side} eye corners coincide; the crop would be empty"))
        })?);
    }
    let (ph, pw) = EYE_PATCH_SIZE;
    Ok((
        image.crop_resize(crops[0], ph, pw, Border::Clamp),
        image.crop_resize(crops[1], ph, pw, Border::Clamp),
    ))
}

/// Crop box for one eye: the corner span padded by `margin` per side, at the patch aspect ratio.
pub fn eye_rect(corners: [(f64, f64); 2], margin: f64) -> Option<Rect> {
    let (dx, dy) = (corners[1].0 - corners[0].0, corners[1].1 - corners[0].1);
    let span = (dx * dx + dy * dy).sqrt();
    if span < 1e-6 {
        return None;
    }
    let width = span * (1.0 + 2.0 * margin);
    let height = width * EYE_PATCH_SIZE.0 as f64 / EYE_PATCH_SIZE.1 as f64;
    let cx = (corners[0].0 + corners[1].0) / 2.0;
    let cy = (corners[0].1 + corners[1].1) / 2.0;
    Some(Rect { x: cx - width / 2.0, y: cy - height / 2.0, w: width, h: height })
}

// ---------------------------------------------------------------------------
// Synthetic faces

#[derive(Debug, Clone, Copy)]
struct Subject {
    skin: [f32; 3],
    background: [f32; 3],
    iris: [f32; 3],
    head_rx: f64,
    head_ry: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_rx: f64,
    eye_ry: f64,
    iris_r: f64,
    brow_gap: f64,
}

impl Subject {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let tone: f32 = rng.gen_range(0.35..0.9);
        let skin = [tone, tone * rng.gen_range(0.7..0.85), tone * rng.gen_range(0.55..0.75)];
        let bg = [rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.8)];
        let iris = [rng.gen_range(0.1..0.45), rng.gen_range(0.15..0.5), rng.gen_range(0.1..0.55)];
        Subject {
            skin,
            background: bg,
            iris,
            head_rx: rng.gen_range(0.33..0.40),
            head_ry: rng.gen_range(0.42..0.47),
            eye_dx: rng.gen_range(0.16..0.19),
            eye_y: rng.gen_range(0.40..0.45),
            eye_rx: rng.gen_range(0.085..0.10),
            eye_ry: rng.gen_range(0.045..0.055),
            iris_r: rng.gen_range(0.036..0.042),
            brow_gap: rng.gen_range(0.06..0.08),
        }
    }
}

/// Parameters of one rendered face, in pixels.
#[derive(Debug, Clone, Copy)]
struct Scene {
    subject: Subject,
    center: (f64, f64),
    gaze: GazeAngles,
    illumination: f64,
    light_slope: f64,
    /// Mouth curvature in [−1, 1] and openness in [0, 1].
    mouth: (f64, f64),
    brow_tilt: f64,
}

struct Eye {
    center: (f64, f64),
    rx: f64,
    ry: f64,
    iris: (f64, f64),
    iris_r: f64,
}

impl Scene {
    fn eyes(&self, size: f64) -> [Eye; 2] {
        let s = &self.subject;
        let v = angles_to_vector(self.gaze);
        let (rx, ry, r) = (s.eye_rx * size, s.eye_ry * size, s.iris_r * size);
        // +yaw moves the iris toward the image right, +pitch moves it up.
        let travel_x = rx - 0.6 * r;
        let travel_y = ry;
        let eye = |sign: f64| {
            let c = (self.center.0 + sign * s.eye_dx * size, self.center.1 + (s.eye_y - 0.5) * size);
            Eye {
                center: c,
                rx,
                ry,
                iris: (c.0 + v.x() * travel_x, c.1 - v.y() * travel_y),
                iris_r: r,
            }
        };
        [eye(-1.0), eye(1.0)]
    }

    fn shade(&self, px: f64, py: f64, size: f64, eyes: &[Eye; 2]) -> [f32; 3] {
        let s = &self.subject;
        let (cx, cy) = self.center;
        let inside = |x: f64, y: f64, ox: f64, oy: f64, rx: f64, ry: f64| {
            let (u, v) = ((x - ox) / rx, (y - oy) / ry);
            u * u + v * v <= 1.0
        };
        if !inside(px, py, cx, cy, s.head_rx * size, s.head_ry * size) {
            return s.background;
        }
        for (i, e) in eyes.iter().enumerate() {
            // brow: a thick slanted bar above each eye
            let sign = if i == 0 { -1.0 } else { 1.0 };
            let by = e.center.1 - s.brow_gap * size - sign * self.brow_tilt * (px - e.center.0) * 0.3;
            if (px - e.center.0).abs() <= e.rx * 1.1 && (py - by).abs() <= 0.012 * size {
                return [0.12, 0.09, 0.07];
            }
            if inside(px, py, e.center.0, e.center.1, e.rx, e.ry) {
                let (dx, dy) = (px - e.iris.0, py - e.iris.1);
                let d2 = dx * dx + dy * dy;
                if d2 <= (0.45 * e.iris_r).powi(2) {
                    return [0.03, 0.03, 0.03];
                }
                if d2 <= e.iris_r * e.iris_r {
                    return s.iris;
                }
                return [0.93, 0.92, 0.9];
            }
        }
        // mouth: a parabola band whose curvature and thickness encode the expression
        let (curve, open) = self.mouth;
        let my = cy + 0.22 * size;
        let half = 0.14 * size;
        let t = (px - cx) / half;
        if t.abs() <= 1.0 {
            let centre_line = my - curve * 0.05 * size * (1.0 - t * t);
            let thickness = 0.012 * size + open * 0.04 * size * (1.0 - t * t);
            if (py - centre_line).abs() <= thickness {
                return [0.45, 0.12, 0.14];
            }
        }
        s.skin
    }

    fn render(&self, size: usize, rng: &mut ChaCha8Rng) -> Image {
        let eyes = self.eyes(size as f64);
        let mut img = Image::new(3, size, size);
        const SS: [f64; 2] = [0.25, 0.75];
        for y in 0..size {
            for x in 0..size {
                let mut acc = [0.0f32; 3];
                for oy in SS {
                    for ox in SS {
                        let c = self.shade(x as f64 + ox, y as f64 + oy, size as f64, &eyes);
                        for k in 0..3 {
                            acc[k] += c[k] / 4.0;
                        }
                    }
                }
                let light = (self.illumination * (1.0 + self.light_slope * (x as f64 / size as f64 - 0.5))) as f32;
                for (k, a) in acc.iter().enumerate() {
                    let noise: f32 = rng.gen_range(-0.01..0.01);
                    let v = (a * light + noise).clamp(0.0, 1.0);
                    img.set(k, y, x, (v * 255.0).round() / 255.0);
                }
            }
        }
        img
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub samples: usize,
    pub subjects: usize,
    pub size: usize,
    pub max_pitch_deg: f64,
    pub max_yaw_deg: f64,
    pub dark_fraction: f64,
    /// Expression classes instead of gaze labels when set.
    pub classes: Option<usize>,
}

impl SynthConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        let d = &cfg.data;
        Self {
            samples: d.synthetic_samples,
            subjects: d.synthetic_subjects,
            size: d.source_size,
            max_pitch_deg: d.max_pitch_deg,
            max_yaw_deg: d.max_yaw_deg,
            dark_fraction: d.dark_fraction,
            classes: match cfg.architecture.task {
                Task::Gaze => None,
                Task::Fer { classes } => Some(classes),
            },
        }
    }
}

/// Renders `cfg.samples` faces; identical `(cfg, seed)` give identical output.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<DatasetManifest> {
    if cfg.samples == 0 {
        return Err(Error::Config(vec!["synthetic sample count must be at least 1".into()]));
    }
    if cfg.subjects == 0 || cfg.size < 32 {
        return Err(Error::Config(vec!["synthetic data needs at least one subject and a size of 32 or more".into()]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects: Vec<Subject> = (0..cfg.subjects).map(|_| Subject::sample(&mut rng)).collect();
    let size = cfg.size as f64;
    let width = (cfg.subjects - 1).to_string().len().max(2);
    let mut records = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
        let sid = r.gen_range(0..cfg.subjects);
        let subject = subjects[sid];
        let gaze = GazeAngles::from_degrees(
            r.gen_range(-cfg.max_pitch_deg..=cfg.max_pitch_deg),
            r.gen_range(-cfg.max_yaw_deg..=cfg.max_yaw_deg),
        )?;
        let planted_dark = r.gen::<f64>() < cfg.dark_fraction;
        let illumination = if planted_dark { r.gen_range(0.05..0.12) } else { r.gen_range(0.75..1.15) };
        let class = cfg.classes.map(|c| r.gen_range(0..c));
        let (mouth, brow_tilt) = match (class, cfg.classes) {
            (Some(k), Some(c)) => {
                let t = k as f64 / (c - 1).max(1) as f64;
                ((2.0 * t - 1.0, if k % 2 == 1 { 0.8 } else { 0.1 }), (t - 0.5) * 0.6)
            }
            _ => ((r.gen_range(-0.3..0.6), r.gen_range(0.0..0.2)), r.gen_range(-0.1..0.1)),
        };
        let scene = Scene {
            subject,
            center: (
                size / 2.0 + r.gen_range(-0.03..0.03) * size,
                size / 2.0 + r.gen_range(-0.03..0.03) * size,
            ),
            gaze,
            illumination,
            light_slope: r.gen_range(-0.3..0.3),
            mouth,
            brow_tilt,
        };
        let image = scene.render(cfg.size, &mut r);
        let eyes = scene.eyes(size);
        let corners = |e: &Eye| [(e.center.0 - e.rx, e.center.1), (e.center.0 + e.rx, e.center.1)];
        let pupil = |e: &Eye| Rect {
            x: e.iris.0 - e.iris_r,
            y: e.iris.1 - e.iris_r,
            w: 2.0 * e.iris_r,
            h: 2.0 * e.iris_r,
        };
        records.push(Record {
            file: format!("{i:06}.png"),
            subject: format!("s{sid:0width$}"),
            image,
            label: match class {
                Some(c) => Label::Class(c),
                None => Label::Gaze(gaze),
            },
            landmarks: Some(EyeLandmarks { left: corners(&eyes[0]), right: corners(&eyes[1]) }),
            pupils: Some([pupil(&eyes[0]), pupil(&eyes[1])]),
            planted_dark,
        });
    }
    Ok(DatasetManifest { root: None, records })
}

// ---------------------------------------------------------------------------
// Disk format

#[derive(Debug, Serialize, Deserialize)]
struct GazeRow {
    file: String,
    subject: String,
    pitch: f64,
    yaw: f64,
    unit: AngleUnit,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassRow {
    file: String,
    subject: String,
    class: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct LandmarkRow {
    file: String,
    left_x1: f64,
    left_y1: f64,
    left_x2: f64,
    left_y2: f64,
    right_x1: f64,
    right_y1: f64,
    right_x2: f64,
    right_y2: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Report(format!("{}: {other:?}", path.display())),
    }
}

/// Writes the manifest in the documented layout. Labels are stored in radians.
pub fn write_dataset(manifest: &DatasetManifest, root: &Path) -> Result<()> {
    let images = root.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let labels_path = root.join("labels.csv");
    let mut labels = csv::Writer::from_path(&labels_path).map_err(|e| csv_err(&labels_path, e))?;
    let lm_path = root.join("landmarks.csv");
    let mut lms = if manifest.has_landmarks() {
        Some(csv::Writer::from_path(&lm_path).map_err(|e| csv_err(&lm_path, e))?)
    } else {
        None
    };
    for r in &manifest.records {
        r.image.save_png(&images.join(&r.file))?;
        let res = match r.label {
            Label::Gaze(a) => labels.serialize(GazeRow {
                file: r.file.clone(),
                subject: r.subject.clone(),
                pitch: a.pitch,
                yaw: a.yaw,
                unit: AngleUnit::Rad,
            }),
            Label::Class(c) => labels.serialize(ClassRow { file: r.file.clone(), subject: r.subject.clone(), class: c }),
        };
        res.map_err(|e| csv_err(&labels_path, e))?;
        if let (Some(w), Some(l)) = (lms.as_mut(), r.landmarks) {
            w.serialize(LandmarkRow {
                file: r.file.clone(),
                left_x1: l.left[0].0,
                left_y1: l.left[0].1,
                left_x2: l.left[1].0,
                left_y2: l.left[1].1,
                right_x1: l.right[0].0,
                right_y1: l.right[0].1,
                right_x2: l.right[1].0,
                right_y2: l.right[1].1,
            })
            .map_err(|e| csv_err(&lm_path, e))?;
        }
    }
    labels.flush().map_err(|e| Error::io(&labels_path, e))?;
    if let Some(mut w) = lms {
        w.flush().map_err(|e| Error::io(&lm_path, e))?;
    }
    Ok(())
}

/// Reads and validates a dataset directory. All problems are reported together.
pub fn load_dataset(root: &Path) -> Result<DatasetManifest> {
    let labels_path = root.join("labels.csv");
    let mut problems = Vec::new();
    let mut reader = csv::Reader::from_path(&labels_path)
        .map_err(|e| Error::Load(vec![format!("{}: {e}", labels_path.display())]))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Load(vec![format!("{}: {e}", labels_path.display())]))?
        .clone();
    let is_class = headers.iter().any(|h| h == "class");
    let mut entries: Vec<(String, String, Label)> = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("labels.csv line {line}: {e}"));
                continue;
            }
        };
        if is_class {
            match row.deserialize::<ClassRow>(Some(&headers)) {
                Ok(r) => entries.push((r.file, r.subject, Label::Class(r.class))),
                Err(e) => problems.push(format!("labels.csv line {line}: {e}")),
            }
            continue;
        }
        let r: GazeRow = match row.deserialize(Some(&headers)) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("labels.csv line {line}: {e}"));
                continue;
            }
        };
        if !r.pitch.is_finite() || !r.yaw.is_finite() {
            problems.push(format!("labels.csv line {line} ({}): pitch/yaw not finite", r.file));
            continue;
        }
        let (pitch, yaw) = match r.unit {
            AngleUnit::Deg => (r.pitch.to_radians(), r.yaw.to_radians()),
            AngleUnit::Rad => (r.pitch, r.yaw),
        };
        let a = GazeAngles { pitch, yaw };
        if !a.in_canonical_range() {
            problems.push(format!(
                "labels.csv line {line} ({}): angles ({}, {}) {:?} outside pitch (-90, 90), yaw (-180, 180]",
                r.file, r.pitch, r.yaw, r.unit
            ));
            continue;
        }
        entries.push((r.file, r.subject, Label::Gaze(a)));
    }

    let mut landmarks: BTreeMap<String, EyeLandmarks> = BTreeMap::new();
    let lm_path = root.join("landmarks.csv");
    if lm_path.exists() {
        match csv::Reader::from_path(&lm_path) {
            Ok(mut rd) => {
                for (i, row) in rd.deserialize::<LandmarkRow>().enumerate() {
                    match row {
                        Ok(l) => {
                            let vals = [
                                l.left_x1, l.left_y1, l.left_x2, l.left_y2, l.right_x1, l.right_y1, l.right_x2,
                                l.right_y2,
                            ];
                            if vals.iter().any(|v| !v.is_finite()) {
                                problems.push(format!("landmarks.csv line {}: non-finite coordinate", i + 2));
                                continue;
                            }
                            landmarks.insert(
                                l.file,
                                EyeLandmarks {
                                    left: [(l.left_x1, l.left_y1), (l.left_x2, l.left_y2)],
                                    right: [(l.right_x1, l.right_y1), (l.right_x2, l.right_y2)],
                                },
                            );
                        }
                        Err(e) => problems.push(format!("landmarks.csv line {}: {e}", i + 2)),
                    }
                }
            }
            Err(e) => problems.push(format!("{}: {e}", lm_path.display())),
        }
    }

    let mut records = Vec::with_capacity(entries.len());
    for (file, subject, label) in entries {
        let path = root.join("images").join(&file);
        if !path.exists() {
            problems.push(format!("{file}: image missing at {}", path.display()));
            continue;
        }
        match Image::load(&path) {
            Ok(image) => records.push(Record {
                landmarks: landmarks.get(&file).copied(),
                file,
                subject,
                image,
                label,
                pupils: None,
                planted_dark: false,
            }),
            Err(e) => problems.push(format!("{file}: cannot decode ({e})")),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Load(problems));
    }
    Ok(DatasetManifest { root: Some(root.to_path_buf()), records })
}

// ---------------------------------------------------------------------------
// Materialized samples

/// A record ready for the networks: face at model resolution and both eye patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub file: String,
    pub face: Image,
    pub left_patch: Image,
    pub right_patch: Image,
    pub label: Label,
    pub subject: String,
    pub landmarks: Option<EyeLandmarks>,
    /// Mean luma of the source image.
    pub illumination: f64,
}

impl Sample {
    /// Builds the network inputs from a (possibly transformed) source image.
    pub fn from_parts(
        file: &str,
        source: &Image,
        landmarks: Option<&EyeLandmarks>,
        label: Label,
        subject: &str,
        face_size: usize,
        margin: f64,
    ) -> Result<Sample> {
        let (left_patch, right_patch) = match landmarks {
            Some(lm) => extract_eye_patches(source, lm, margin)?,
            None => {
                let (h, w) = EYE_PATCH_SIZE;
                (Image::new(3, h, w), Image::new(3, h, w))
            }
        };
        Ok(Sample {
            file: file.to_string(),
            face: source.resize(face_size, face_size),
            left_patch,
            right_patch,
            label,
            subject: subject.to_string(),
            landmarks: landmarks.copied(),
            illumination: source.mean_luma(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub file: String,
    pub reason: String,
}

/// Materialized samples, each paired with the index of its manifest record.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub record_index: Vec<usize>,
    pub excluded: Vec<Exclusion>,
}

impl Dataset {
    /// Samples whose eye patches cannot be extracted are excluded with a reason.
    pub fn materialize(manifest: &DatasetManifest, face_size: usize, margin: f64) -> Dataset {
        let mut samples = Vec::with_capacity(manifest.len());
        let mut record_index = Vec::with_capacity(manifest.len());
        let mut excluded = Vec::new();
        for (i, r) in manifest.records.iter().enumerate() {
            match Sample::from_parts(&r.file, &r.image, r.landmarks.as_ref(), r.label, &r.subject, face_size, margin) {
                Ok(s) => {
                    samples.push(s);
                    record_index.push(i);
                }
                Err(e) => excluded.push(Exclusion { file: r.file.clone(), reason: e.to_string() }),
            }
        }
        Dataset { samples, record_index, excluded }
    }

    pub fn from_config(manifest: &DatasetManifest, cfg: &RunConfig) -> Dataset {
        Self::materialize(manifest, cfg.architecture.face_size, cfg.data.eye_margin)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// "kept N of M (P%)" style summary.
    pub fn exclusion_summary(&self) -> String {
        let total = self.samples.len() + self.excluded.len();
        format!(
            "kept {} of {} samples ({:.1}%), excluded {}",
            self.samples.len(),
            total,
            100.0 * self.samples.len() as f64 / total.max(1) as f64,
            self.excluded.len()
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            record_index: indices.iter().map(|&i| self.record_index[i]).collect(),
            excluded: Vec::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// Splits

/// Fraction of the training pool held out (from its tail) for validation in LOSO folds.
pub const LOSO_VALIDATION_TAIL: f64 = 3000.0 / 42000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SplitScheme {
    Random { val: f64, test: f64, seed: u64 },
    LeaveOneSubjectOut { subject: String, val_tail: f64 },
}

/// Disjoint, covering index sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits items given their subject ids.
pub fn split(subjects: &[String], scheme: &SplitScheme) -> Result<SplitManifest> {
    let n = subjects.len();
    match scheme {
        SplitScheme::Random { val, test, seed } => {
            if *val < 0.0 || *test < 0.0 || val + test >= 1.0 {
                return Err(Error::Config(vec![format!("split fractions val={val} test={test} invalid")]));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            let n_test = (n as f64 * test).round() as usize;
            let n_val = (n as f64 * val).round() as usize;
            let mut t = idx[..n_test].to_vec();
            let mut v = idx[n_test..n_test + n_val].to_vec();
            let mut tr = idx[n_test + n_val..].to_vec();
            t.sort_unstable();
            v.sort_unstable();
            tr.sort_unstable();
            Ok(SplitManifest { train: tr, val: v, test: t })
        }
        SplitScheme::LeaveOneSubjectOut { subject, val_tail } => {
            if !subjects.iter().any(|s| s == subject) {
                return Err(Error::Config(vec![format!("unknown subject {subject:?}")]));
            }
            if !(0.0..1.0).contains(val_tail) {
                return Err(Error::Config(vec![format!("validation tail {val_tail} outside [0, 1)")]));
            }
            let test: Vec<usize> = (0..n).filter(|&i| subjects[i] == *subject).collect();
            let pool: Vec<usize> = (0..n).filter(|&i| subjects[i] != *subject).collect();
            let n_val = (pool.len() as f64 * val_tail).round() as usize;
            let cut = pool.len() - n_val;
            Ok(SplitManifest { train: pool[..cut].to_vec(), val: pool[cut..].to_vec(), test })
        }
    }
}

/// Ids of records whose illumination score falls below `threshold`.
pub fn low_illumination(samples: &[Sample], threshold: f64) -> Vec<usize> {
    samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.illumination < threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Label units for loaded data default to radians; degree labels are converted at load time.
pub fn canonical_yaw(yaw: f64) -> f64 {
    let mut y = yaw.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}
