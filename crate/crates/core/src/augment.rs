//! Stochastic view generation for self-supervised pretraining.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{rotation_inverse, Border, Image, Rect};

/// One transform and its parameters. The serialized `name` tag selects the kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    HorizontalFlip,
    GaussianBlur { sigma_min: f64, sigma_max: f64 },
    RandomAffine { degrees: f64, translate: f64, scale_min: f64, scale_max: f64, shear_degrees: f64 },
    RandomRotation { degrees: f64 },
    RandomCrop { scale_min: f64, scale_max: f64 },
    /// Keeps the central `fraction` of each side.
    CenterCrop { fraction: f64 },
    RandomGrayscale,
    ColorJitter { brightness: f64, contrast: f64, saturation: f64, hue: f64 },
    RandomInvert,
    GaussianNoise { sigma: f64 },
    Cutout { size: usize },
}

/// Canonical application order. Pipelines must list transforms as a subsequence of it.
pub const CANONICAL_ORDER: [&str; 11] = [
    "horizontal_flip",
    "gaussian_blur",
    "random_affine",
    "random_rotation",
    "random_crop",
    "center_crop",
    "random_grayscale",
    "color_jitter",
    "random_invert",
    "gaussian_noise",
    "cutout",
];

impl Transform {
    pub fn name(&self) -> &'static str {
        match self {
            Transform::HorizontalFlip => "horizontal_flip",
            Transform::GaussianBlur { .. } => "gaussian_blur",
            Transform::RandomAffine { .. } => "random_affine",
            Transform::RandomRotation { .. } => "random_rotation",
            Transform::RandomCrop { .. } => "random_crop",
            Transform::CenterCrop { .. } => "center_crop",
            Transform::RandomGrayscale => "random_grayscale",
            Transform::ColorJitter { .. } => "color_jitter",
            Transform::RandomInvert => "random_invert",
            Transform::GaussianNoise { .. } => "gaussian_noise",
            Transform::Cutout { .. } => "cutout",
        }
    }

    fn rank(&self) -> usize {
        CANONICAL_ORDER.iter().position(|n| *n == self.name()).unwrap()
    }

    /// Colour/intensity transforms that leave pixel geometry alone.
    pub fn is_photometric(&self) -> bool {
        matches!(
            self,
            Transform::GaussianBlur { .. }
                | Transform::RandomGrayscale
                | Transform::ColorJitter { .. }
                | Transform::RandomInvert
                | Transform::GaussianNoise { .. }
        )
    }

    fn check(&self, out: &mut Vec<String>) {
        let mut need = |ok: bool, what: &str| {
            if !ok {
                out.push(format!("augmentation.{}: {what}", self.name()));
            }
        };
        match *self {
            Transform::GaussianBlur { sigma_min, sigma_max } => {
                need(sigma_min >= 0.0 && sigma_min <= sigma_max, "need 0 <= sigma_min <= sigma_max")
            }
            Transform::RandomAffine { degrees, translate, scale_min, scale_max, shear_degrees } => {
                need(degrees >= 0.0 && shear_degrees >= 0.0, "angles must be non-negative");
                need((0.0..1.0).contains(&translate), "translate must lie in [0, 1)");
                need(scale_min > 0.0 && scale_min <= scale_max, "need 0 < scale_min <= scale_max");
            }
            Transform::RandomRotation { degrees } => need(degrees >= 0.0, "degrees must be non-negative"),
            Transform::RandomCrop { scale_min, scale_max } => need(
                scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0,
                "need 0 < scale_min <= scale_max <= 1",
            ),
            Transform::CenterCrop { fraction } => need(fraction > 0.0 && fraction <= 1.0, "fraction must lie in (0, 1]"),
            Transform::ColorJitter { brightness, contrast, saturation, hue } => {
                need(brightness >= 0.0 && contrast >= 0.0 && saturation >= 0.0, "factors must be non-negative");
                need((0.0..=0.5).contains(&hue), "hue must lie in [0, 0.5]");
            }
            Transform::GaussianNoise { sigma } => need(sigma >= 0.0, "sigma must be non-negative"),
            Transform::Cutout { size } => need(size > 0, "size must be positive"),
            Transform::HorizontalFlip | Transform::RandomGrayscale | Transform::RandomInvert => {}
        }
    }

    fn apply(&self, img: &Image, rng: &mut ChaCha8Rng) -> Image {
        let (_, h, w) = img.shape();
        match *self {
            Transform::HorizontalFlip => img.flip_horizontal(),
            Transform::GaussianBlur { sigma_min, sigma_max } => img.gaussian_blur(uniform(rng, sigma_min, sigma_max)),
            Transform::RandomAffine { degrees, translate, scale_min, scale_max, shear_degrees } => {
                let theta = uniform(rng, -degrees, degrees).to_radians();
                let tx = uniform(rng, -translate, translate) * w as f64;
                let ty = uniform(rng, -translate, translate) * h as f64;
                let s = uniform(rng, scale_min, scale_max);
                let shear = uniform(rng, -shear_degrees, shear_degrees).to_radians().tan();
                img.warp_affine(rotation_inverse(theta, img.center(), s, (tx, ty), shear), Border::Constant(0.0))
            }
            Transform::RandomRotation { degrees } => {
                img.rotate(uniform(rng, -degrees, degrees).to_radians(), Border::Constant(0.0))
            }
            Transform::RandomCrop { scale_min, scale_max } => {
                let area = uniform(rng, scale_min, scale_max);
                let log_ratio = uniform(rng, (3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
                let ratio = log_ratio.exp();
                let cw = ((area * ratio).sqrt() * w as f64).min(w as f64);
                let ch = ((area / ratio).sqrt() * h as f64).min(h as f64);
                let x = uniform(rng, 0.0, w as f64 - cw);
                let y = uniform(rng, 0.0, h as f64 - ch);
                img.crop_resize(Rect { x, y, w: cw, h: ch }, h, w, Border::Clamp)
            }
            Transform::CenterCrop { fraction } => {
                if fraction >= 1.0 {
                    return img.clone();
                }
                let (cw, ch) = (w as f64 * fraction, h as f64 * fraction);
                let r = Rect { x: (w as f64 - cw) / 2.0, y: (h as f64 - ch) / 2.0, w: cw, h: ch };
                img.crop_resize(r, h, w, Border::Clamp)
            }
            Transform::RandomGrayscale => img.grayscale(),
            Transform::ColorJitter { brightness, contrast, saturation, hue } => {
                let b = uniform(rng, (1.0 - brightness).max(0.0), 1.0 + brightness) as f32;
                let c = uniform(rng, (1.0 - contrast).max(0.0), 1.0 + contrast) as f32;
                let s = uniform(rng, (1.0 - saturation).max(0.0), 1.0 + saturation) as f32;
                let hshift = uniform(rng, -hue, hue) as f32;
                img.adjust_brightness(b).adjust_contrast(c).adjust_saturation(s).adjust_hue(hshift)
            }
            Transform::RandomInvert => img.invert(),
            Transform::GaussianNoise { sigma } => img.add_gaussian_noise(sigma, rng),
            Transform::Cutout { size } => {
                let mut out = img.clone();
                let cx = rng.gen_range(0..w);
                let cy = rng.gen_range(0..h);
                let x0 = cx.saturating_sub(size / 2);
                let y0 = cy.saturating_sub(size / 2);
                out.fill_rect(x0, y0, size, size, 0.0);
                out
            }
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransformSpec {
    pub p: f64,
    #[serde(flatten)]
    pub transform: Transform,
}

// Hand-written so that unknown keys are still rejected by the strict
// `Transform` enum; serde's flatten would otherwise swallow them.
impl<'de> Deserialize<'de> for TransformSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let mut map = serde_json::Map::deserialize(d)?;
        let p = map
            .remove("p")
            .ok_or_else(|| D::Error::missing_field("p"))?
            .as_f64()
            .ok_or_else(|| D::Error::custom("`p` must be a number"))?;
        let transform = Transform::deserialize(serde_json::Value::Object(map)).map_err(D::Error::custom)?;
        Ok(Self { p, transform })
    }
}

impl TransformSpec {
    pub fn new(p: f64, transform: Transform) -> Self {
        Self { p, transform }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    pub transforms: Vec<TransformSpec>,
    /// Output (height, width) of face views.
    pub output_size: (usize, usize),
}

impl AugmentationConfig {
    /// The extended augmentation stack used by the modified BYOL pretraining.
    pub fn extended(output_size: (usize, usize)) -> Self {
        use Transform::*;
        let transforms = vec![
            TransformSpec::new(0.5, HorizontalFlip),
            TransformSpec::new(0.2, GaussianBlur { sigma_min: 0.1, sigma_max: 2.0 }),
            TransformSpec::new(
                0.3,
                RandomAffine { degrees: 10.0, translate: 0.1, scale_min: 0.9, scale_max: 1.1, shear_degrees: 10.0 },
            ),
            TransformSpec::new(0.3, RandomRotation { degrees: 30.0 }),
            TransformSpec::new(0.5, RandomCrop { scale_min: 0.6, scale_max: 1.0 }),
            TransformSpec::new(1.0, CenterCrop { fraction: 1.0 }),
            TransformSpec::new(0.2, RandomGrayscale),
            TransformSpec::new(0.4, ColorJitter { brightness: 0.4, contrast: 0.4, saturation: 0.4, hue: 0.1 }),
            TransformSpec::new(0.1, RandomInvert),
            TransformSpec::new(0.2, GaussianNoise { sigma: 0.02 }),
            TransformSpec::new(0.3, Cutout { size: 16 }),
        ];
        Self { transforms, output_size }
    }

    /// The smaller stack of plain BYOL (flip, crop, jitter, grayscale, blur).
    pub fn byol_baseline(output_size: (usize, usize)) -> Self {
        use Transform::*;
        let transforms = vec![
            TransformSpec::new(0.5, HorizontalFlip),
            TransformSpec::new(0.5, GaussianBlur { sigma_min: 0.1, sigma_max: 2.0 }),
            TransformSpec::new(1.0, RandomCrop { scale_min: 0.6, scale_max: 1.0 }),
            TransformSpec::new(0.2, RandomGrayscale),
            TransformSpec::new(0.8, ColorJitter { brightness: 0.4, contrast: 0.4, saturation: 0.2, hue: 0.1 }),
        ];
        Self { transforms, output_size }
    }

    pub fn identity(output_size: (usize, usize)) -> Self {
        Self { transforms: Vec::new(), output_size }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            out.push("augmentation.output_size must be positive".into());
        }
        let mut last: Option<usize> = None;
        for spec in &self.transforms {
            if !(0.0..=1.0).contains(&spec.p) {
                out.push(format!("augmentation.{}: probability {} outside [0, 1]", spec.transform.name(), spec.p));
            }
            spec.transform.check(&mut out);
            let r = spec.transform.rank();
            if let Some(prev) = last {
                if r <= prev {
                    out.push(format!(
                        "augmentation.{}: out of order or repeated (order is {})",
                        spec.transform.name(),
                        CANONICAL_ORDER.join(", ")
                    ));
                }
            }
            last = Some(r);
        }
        out
    }
}

/// An immutable, validated augmentation sampler.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: AugmentationConfig,
}

pub fn build_pipeline(cfg: &AugmentationConfig) -> Result<Pipeline> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    Ok(Pipeline { cfg: cfg.clone() })
}

/// Which transforms fired in one application, in pipeline order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Applied(pub Vec<(&'static str, bool)>);

impl Applied {
    pub fn fired(&self, name: &str) -> bool {
        self.0.iter().any(|(n, f)| *n == name && *f)
    }
}

impl Pipeline {
    pub fn config(&self) -> &AugmentationConfig {
        &self.cfg
    }

    /// The photometric subset at the given output size, used for eye patches.
    pub fn photometric(&self, output_size: (usize, usize)) -> Pipeline {
        let transforms = self
            .cfg
            .transforms
            .iter()
            .filter(|s| s.transform.is_photometric())
            .cloned()
            .collect();
        Pipeline { cfg: AugmentationConfig { transforms, output_size } }
    }

    /// One stochastic sample. The final resize to `output_size` is always applied.
    pub fn apply(&self, img: &Image, rng: &mut ChaCha8Rng) -> Result<(Image, Applied)> {
        if img.channels() != 3 {
            return Err(Error::contract(format!("augmentation expects 3 channels, got {}", img.channels())));
        }
        let mut cur = img.clone();
        let mut applied = Vec::with_capacity(self.cfg.transforms.len());
        for spec in &self.cfg.transforms {
            let fire = rng.gen::<f64>() < spec.p;
            if fire {
                cur = spec.transform.apply(&cur, rng);
                cur.clamp01();
            }
            applied.push((spec.transform.name(), fire));
        }
        let (h, w) = self.cfg.output_size;
        Ok((cur.resize(h, w), Applied(applied)))
    }

    pub fn sample(&self, img: &Image, seed: u64) -> Result<Image> {
        Ok(self.apply(img, &mut ChaCha8Rng::seed_from_u64(seed))?.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub v: Image,
    pub v_prime: Image,
}

/// Two independent samples; each view gets its own sub-seed drawn from `seed`.
pub fn generate_views(img: &Image, pipeline: &Pipeline, seed: u64) -> Result<ViewPair> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let (s1, s2) = (master.gen::<u64>(), master.gen::<u64>());
    Ok(ViewPair {
        v: pipeline.sample(img, s1)?,
        v_prime: pipeline.sample(img, s2)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(h: usize, w: usize) -> Image {
        let mut img = Image::new(3, h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    img.set(c, y, x, ((x * 7 + y * 3 + c * 5) % 23) as f32 / 22.0);
                }
            }
        }
        img
    }

    fn only(p: f64, t: Transform) -> Pipeline {
        build_pipeline(&AugmentationConfig { transforms: vec![TransformSpec::new(p, t)], output_size: (16, 20) })
            .unwrap()
    }

    #[test]
    fn zero_probabilities_give_resize_only() {
        let mut cfg = AugmentationConfig::extended((16, 20));
        cfg.transforms.iter_mut().for_each(|s| s.p = 0.0);
        let pipe = build_pipeline(&cfg).unwrap();
        let img = test_image(32, 40);
        let views = generate_views(&img, &pipe, 7).unwrap();
        assert_eq!(views.v, img.resize(16, 20));
        assert_eq!(views.v, views.v_prime);
    }

    #[test]
    fn certain_flip_mirrors() {
        let img = test_image(16, 20);
        let out = only(1.0, Transform::HorizontalFlip).sample(&img, 3).unwrap();
        assert_eq!(out, img.flip_horizontal());
    }

    #[test]
    fn default_pipeline_is_seed_deterministic() {
        let pipe = build_pipeline(&AugmentationConfig::extended((24, 24))).unwrap();
        let img = test_image(30, 30);
        let a = generate_views(&img, &pipe, 99).unwrap();
        let b = generate_views(&img, &pipe, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.v.shape(), a.v_prime.shape());
    }

    #[test]
    fn rotation_views_differ() {
        let pipe = only(1.0, Transform::RandomRotation { degrees: 30.0 });
        let img = test_image(16, 20);
        let views = generate_views(&img, &pipe, 1).unwrap();
        assert_ne!(views.v, views.v_prime);
    }

    #[test]
    fn rejects_bad_configs_with_every_violation() {
        let yaml = r#"{"transforms":[{"name":"sharpen","p":0.5}],"output_size":[8,8]}"#;
        assert!(serde_json::from_str::<AugmentationConfig>(yaml).is_err());
        let cfg = AugmentationConfig {
            transforms: vec![
                TransformSpec::new(1.5, Transform::Cutout { size: 0 }),
                TransformSpec::new(0.5, Transform::HorizontalFlip),
            ],
            output_size: (8, 8),
        };
        match build_pipeline(&cfg) {
            Err(Error::Config(v)) => assert_eq!(v.len(), 3, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_channel_count_is_contract_error() {
        let pipe = build_pipeline(&AugmentationConfig::identity((4, 4))).unwrap();
        assert!(matches!(pipe.sample(&Image::new(1, 4, 4), 0), Err(Error::Contract(_))));
    }

    #[test]
    fn config_round_trips_through_toml() {
        #[derive(Serialize, Deserialize)]
        struct Wrap {
            augmentation: AugmentationConfig,
        }
        let w = Wrap { augmentation: AugmentationConfig::extended((112, 112)) };
        let text = toml::to_string(&w).unwrap();
        let back: Wrap = toml::from_str(&text).unwrap();
        assert_eq!(back.augmentation, w.augmentation);
    }

    #[test]
    fn photometric_subset_keeps_geometry() {
        let pipe = build_pipeline(&AugmentationConfig::extended((24, 24))).unwrap();
        let eyes = pipe.photometric((36, 60));
        assert!(eyes.config().transforms.iter().all(|s| s.transform.is_photometric()));
        assert_eq!(eyes.config().transforms.len(), 5);
        assert_eq!(eyes.sample(&test_image(36, 60), 4).unwrap().shape(), (3, 36, 60));
    }

    #[test]
    fn every_transform_stays_in_unit_range() {
        let pipe = build_pipeline(&AugmentationConfig::extended((20, 20))).unwrap();
        let img = test_image(20, 20);
        for seed in 0..50 {
            let out = pipe.sample(&img, seed).unwrap();
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
