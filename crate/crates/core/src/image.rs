//! Planar float images and the pixel operations the pipeline needs.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-major (C, H, W) image with values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Axis-aligned box in pixel coordinates (x, y is the top-left corner).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersection(&self, o: &Rect) -> f64 {
        let w = (self.x + self.w).min(o.x + o.w) - self.x.max(o.x);
        let h = (self.y + self.h).min(o.y + o.h) - self.y.max(o.y);
        w.max(0.0) * h.max(0.0)
    }

    pub fn iou(&self, o: &Rect) -> f64 {
        let i = self.intersection(o);
        let u = self.area() + o.area() - i;
        if u > 0.0 {
            i / u
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Border {
    /// Mirror about the edge pixel (no edge duplication).
    Reflect,
    Constant(f32),
    Clamp,
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::contract(format!(
                "image buffer of {} values does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// (C, H, W) as a shape tuple.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    fn fetch(&self, c: usize, y: isize, x: isize, border: Border) -> f32 {
        let inside = y >= 0 && x >= 0 && (y as usize) < self.height && (x as usize) < self.width;
        if inside {
            return self.get(c, y as usize, x as usize);
        }
        match border {
            Border::Constant(v) => v,
            Border::Reflect => self.get(c, reflect(y, self.height), reflect(x, self.width)),
            Border::Clamp => self.get(
                c,
                y.clamp(0, self.height as isize - 1) as usize,
                x.clamp(0, self.width as isize - 1) as usize,
            ),
        }
    }

    /// Bilinear sample at continuous pixel-center coordinates.
    pub fn sample(&self, c: usize, y: f64, x: f64, border: Border) -> f32 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let v00 = self.fetch(c, y0, x0, border);
        let v01 = self.fetch(c, y0, x0 + 1, border);
        let v10 = self.fetch(c, y0 + 1, x0, border);
        let v11 = self.fetch(c, y0 + 1, x0 + 1, border);
        let top = v00 + (v01 - v00) * fx;
        let bottom = v10 + (v11 - v10) * fx;
        top + (bottom - top) * fy
    }

    /// Resamples `region` of this image onto an `out_h × out_w` grid.
    pub fn crop_resize(&self, region: Rect, out_h: usize, out_w: usize, border: Border) -> Image {
        let mut out = Image::new(self.channels, out_h, out_w);
        let sy = region.h / out_h as f64;
        let sx = region.w / out_w as f64;
        for c in 0..self.channels {
            for oy in 0..out_h {
                let y = region.y + (oy as f64 + 0.5) * sy - 0.5;
                for ox in 0..out_w {
                    let x = region.x + (ox as f64 + 0.5) * sx - 0.5;
                    out.set(c, oy, ox, self.sample(c, y, x, border));
                }
            }
        }
        out
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        if (out_h, out_w) == (self.height, self.width) {
            return self.clone();
        }
        let full = Rect {
            x: 0.0,
            y: 0.0,
            w: self.width as f64,
            h: self.height as f64,
        };
        self.crop_resize(full, out_h, out_w, Border::Clamp)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// Inverse-mapped affine warp. `inv` maps output (x, y) to source (x, y):
    /// `src = inv[0..2]·(x, y) + inv[2]` row-wise.
    pub fn warp_affine(&self, inv: [[f64; 3]; 2], border: Border) -> Image {
        let mut out = Image::new(self.channels, self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let (xf, yf) = (x as f64, y as f64);
                let sx = inv[0][0] * xf + inv[0][1] * yf + inv[0][2];
                let sy = inv[1][0] * xf + inv[1][1] * yf + inv[1][2];
                for c in 0..self.channels {
                    out.set(c, y, x, self.sample(c, sy, sx, border));
                }
            }
        }
        out
    }

    /// Rotates the content counter-clockwise (as displayed) by `theta`
    /// radians about the image center.
    pub fn rotate(&self, theta: f64, border: Border) -> Image {
        if theta == 0.0 {
            return self.clone();
        }
        self.warp_affine(rotation_inverse(theta, self.center(), 1.0, (0.0, 0.0), 0.0), border)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }

    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f32> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
            .collect();
        let s: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= s);
        let mut tmp = Image::new(self.channels, self.height, self.width);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    let mut acc = 0.0;
                    for (j, k) in kernel.iter().enumerate() {
                        acc += k * self.fetch(c, y as isize, x as isize + j as isize - radius, Border::Reflect);
                    }
                    tmp.set(c, y, x, acc);
                }
            }
        }
        let mut out = Image::new(self.channels, self.height, self.width);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    let mut acc = 0.0;
                    for (j, k) in kernel.iter().enumerate() {
                        acc += k * tmp.fetch(c, y as isize + j as isize - radius, x as isize, Border::Reflect);
                    }
                    out.set(c, y, x, acc);
                }
            }
        }
        out
    }

    /// Rec. 601 luma of each pixel.
    pub fn luma(&self) -> Vec<f32> {
        let n = self.height * self.width;
        if self.channels < 3 {
            return self.data[..n].to_vec();
        }
        (0..n)
            .map(|i| 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i])
            .collect()
    }

    pub fn mean_luma(&self) -> f64 {
        let l = self.luma();
        l.iter().map(|&v| v as f64).sum::<f64>() / l.len().max(1) as f64
    }

    pub fn grayscale(&self) -> Image {
        let l = self.luma();
        let mut out = self.clone();
        for c in 0..self.channels {
            out.data[c * l.len()..(c + 1) * l.len()].copy_from_slice(&l);
        }
        out
    }

    fn blend(&self, other: &Image, factor: f32) -> Image {
        let mut out = self.clone();
        for (o, (a, b)) in out.data.iter_mut().zip(self.data.iter().zip(&other.data)) {
            *o = b + factor * (a - b);
        }
        out.clamp01();
        out
    }

    pub fn adjust_brightness(&self, factor: f32) -> Image {
        self.blend(&Image::new(self.channels, self.height, self.width), factor)
    }

    pub fn adjust_contrast(&self, factor: f32) -> Image {
        let m = self.mean_luma() as f32;
        self.blend(&Image::filled(self.channels, self.height, self.width, m), factor)
    }

    pub fn adjust_saturation(&self, factor: f32) -> Image {
        self.blend(&self.grayscale(), factor)
    }

    /// Rotates hue by `shift` turns (in [-0.5, 0.5]).
    pub fn adjust_hue(&self, shift: f32) -> Image {
        if self.channels < 3 || shift == 0.0 {
            return self.clone();
        }
        let n = self.height * self.width;
        let mut out = self.clone();
        for i in 0..n {
            let (h, s, v) = rgb_to_hsv(self.data[i], self.data[n + i], self.data[2 * n + i]);
            let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
            out.data[i] = r;
            out.data[n + i] = g;
            out.data[2 * n + i] = b;
        }
        out
    }

    pub fn invert(&self) -> Image {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = 1.0 - *v);
        out
    }

    /// Raises every value to `gamma`; gamma > 1 darkens.
    pub fn gamma(&self, gamma: f64) -> Image {
        if gamma == 1.0 {
            return self.clone();
        }
        let mut out = self.clone();
        out.data
            .iter_mut()
            .for_each(|v| *v = (v.max(0.0) as f64).powf(gamma) as f32);
        out
    }

    pub fn scale(&self, factor: f32) -> Image {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        out.clamp01();
        out
    }

    pub fn add_gaussian_noise<R: Rng>(&self, sigma: f64, rng: &mut R) -> Image {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += (sigma * z) as f32;
        }
        out.clamp01();
        out
    }

    pub fn fill_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, value: f32) {
        for c in 0..self.channels {
            for y in y0..(y0 + h).min(self.height) {
                for x in x0..(x0 + w).min(self.width) {
                    self.set(c, y, x, value);
                }
            }
        }
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn to_rgb8(&self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(Error::contract(format!(
                "only 3-channel images can be encoded, got {}",
                self.channels
            )));
        }
        let n = self.height * self.width;
        Ok(ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([q(self.data[i]), q(self.data[n + i]), q(self.data[2 * n + i])])
        }))
    }

    pub fn from_rgb8(img: &RgbImage) -> Image {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let n = w * h;
        let mut data = vec![0.0f32; 3 * n];
        for (x, y, p) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                data[c * n + i] = p[c] as f32 / 255.0;
            }
        }
        Image {
            channels: 3,
            height: h,
            width: w,
            data,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()?.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        Ok(Image::from_rgb8(&img))
    }
}

/// Inverse map for "rotate by theta (counter-clockwise on screen), scale,
/// translate, shear" about `center`, in the form `warp_affine` expects.
pub fn rotation_inverse(
    theta: f64,
    center: (f64, f64),
    scale: f64,
    translate: (f64, f64),
    shear: f64,
) -> [[f64; 3]; 2] {
    // Screen y points down, so a visually counter-clockwise rotation is
    // clockwise in pixel coordinates. Forward: p' = c + t + A (p − c) with
    // A = s · R(−θ) · Shear.
    let (s, c) = (-theta).sin_cos();
    let a = [[scale * c, scale * (c * shear - s)], [scale * s, scale * (s * shear + c)]];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let (cx, cy) = center;
    let (tx, ty) = translate;
    // src = c + inv (p − c − t)
    let ox = cx - inv[0][0] * (cx + tx) - inv[0][1] * (cy + ty);
    let oy = cy - inv[1][0] * (cx + tx) - inv[1][1] * (cy + ty);
    [[inv[0][0], inv[0][1], ox], [inv[1][0], inv[1][1], oy]]
}

/// Where a source point lands after `Image::rotate(theta)`.
pub fn rotate_point(p: (f64, f64), center: (f64, f64), theta: f64) -> (f64, f64) {
    let (s, c) = (-theta).sin_cos();
    let (dx, dy) = (p.0 - center.0, p.1 - center.1);
    (center.0 + c * dx - s * dy, center.1 + s * dx + c * dy)
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}
