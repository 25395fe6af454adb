//! Gaze-arrow overlays and the equivariance line chart, rendered straight
//! into `Image` buffers. Output bytes depend only on the inputs.

use std::path::{Path, PathBuf};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::evaluation::EquivarianceCurve;
use crate::geometry::{angles_to_vector, angular_error_angles, GazeAngles};
use crate::image::Image;

pub type Rgb = [f32; 3];

pub const TRUTH_COLOR: Rgb = [0.9, 0.1, 0.1];
pub const PRED_COLOR: Rgb = [0.1, 0.3, 0.95];
const INK: Rgb = [0.0, 0.0, 0.0];

/// Side of the rendered overlay; faces are upscaled to it.
pub const OVERLAY_SIZE: usize = 160;
const CAPTION_HEIGHT: usize = 16;

pub fn put(img: &mut Image, x: i64, y: i64, color: Rgb) {
    if x < 0 || y < 0 || x >= img.width() as i64 || y >= img.height() as i64 {
        return;
    }
    for (c, v) in color.iter().enumerate().take(img.channels()) {
        img.set(c, y as usize, x as usize, *v);
    }
}

/// Line of square brush `thickness`, sampled at sub-pixel steps.
pub fn draw_line(img: &mut Image, from: (f64, f64), to: (f64, f64), color: Rgb, thickness: usize) {
    let (dx, dy) = (to.0 - from.0, to.1 - from.1);
    let steps = (dx.abs().max(dy.abs()) * 2.0).ceil().max(1.0) as usize;
    let r = thickness as i64 / 2;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = ((from.0 + t * dx).round() as i64, (from.1 + t * dy).round() as i64);
        for oy in -r..=r {
            for ox in -r..=r {
                put(img, x + ox, y + oy, color);
            }
        }
    }
}

pub fn draw_arrow(img: &mut Image, from: (f64, f64), to: (f64, f64), color: Rgb) {
    draw_line(img, from, to, color, 3);
    let (dx, dy) = (to.0 - from.0, to.1 - from.1);
    let len = (dx * dx + dy * dy).sqrt();
    if len < 1e-9 {
        return;
    }
    let head = (len * 0.3).min(10.0);
    let (ux, uy) = (dx / len, dy / len);
    for s in [1.0, -1.0] {
        let (c, sn) = (0.5f64.cos(), s * 0.5f64.sin());
        let (hx, hy) = (-(ux * c - uy * sn), -(ux * sn + uy * c));
        draw_line(img, to, (to.0 + head * hx, to.1 + head * hy), color, 3);
    }
}

/// Tip of a gaze arrow anchored at `center`: the (x, y) components of the 3D
/// gaze vector scaled by `length` pixels, with screen y pointing down.
pub fn arrow_tip(center: (f64, f64), gaze: GazeAngles, length: f64) -> (f64, f64) {
    let v = angles_to_vector(gaze);
    (center.0 + length * v.x(), center.1 - length * v.y())
}

// 3×5 glyphs, one row per u8 with the three low bits left to right.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        '°' => [7, 5, 7, 0, 0],
        'e' => [0, 7, 7, 4, 7],
        'r' => [0, 6, 5, 4, 4],
        ' ' => [0, 0, 0, 0, 0],
        _ => return None,
    })
}

/// Draws `text` with 3×5 glyphs at integer `scale`; unknown characters are skipped.
pub fn draw_text(img: &mut Image, x: i64, y: i64, text: &str, scale: i64, color: Rgb) {
    let mut cx = x;
    for ch in text.chars() {
        let Some(rows) = glyph(ch) else { continue };
        for (ry, bits) in rows.iter().enumerate() {
            for rx in 0..3 {
                if bits & (4 >> rx) != 0 {
                    for sy in 0..scale {
                        for sx in 0..scale {
                            put(img, cx + rx * scale + sx, y + ry as i64 * scale + sy, color);
                        }
                    }
                }
            }
        }
        cx += 4 * scale;
    }
}

/// Face with ground-truth and predicted arrows plus an error caption below.
pub fn overlay(face: &Image, truth: GazeAngles, pred: GazeAngles) -> Image {
    let s = OVERLAY_SIZE;
    let base = face.resize(s, s);
    let mut img = Image::filled(3, s + CAPTION_HEIGHT, s, 1.0);
    for c in 0..3 {
        let src = c.min(base.channels() - 1);
        for y in 0..s {
            for x in 0..s {
                img.set(c, y, x, base.get(src, y, x));
            }
        }
    }
    let center = ((s as f64 - 1.0) / 2.0, (s as f64 - 1.0) / 2.0);
    let len = s as f64 * 0.4;
    draw_arrow(&mut img, center, arrow_tip(center, truth, len), TRUTH_COLOR);
    draw_arrow(&mut img, center, arrow_tip(center, pred, len), PRED_COLOR);
    let caption = format!("err {:.2}°", angular_error_angles(truth, pred));
    draw_text(&mut img, 4, s as i64 + 3, &caption, 2, INK);
    img
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// One overlay PNG per sample; returns the written paths in sample order.
pub fn plot_predictions(samples: &[Sample], preds: &[GazeAngles], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if samples.len() != preds.len() {
        return Err(Error::contract(format!("{} predictions for {} samples", preds.len(), samples.len())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(samples.len());
    for (i, (s, p)) in samples.iter().zip(preds).enumerate() {
        let truth = s.label.gaze().ok_or_else(|| Error::contract(format!("{} has no gaze label", s.file)))?;
        let stem = Path::new(&s.file).file_stem().and_then(|x| x.to_str()).unwrap_or(&s.file);
        let path = out_dir.join(format!("gaze-{i:04}-{}.png", sanitize(stem)));
        overlay(&s.face, truth, *p).save_png(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Error-versus-θ line chart with labelled axis ends.
pub fn equivariance_chart(curve: &EquivarianceCurve, width: usize, height: usize) -> Result<Image> {
    let pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .filter_map(|p| p.mean_error_deg.map(|e| (p.theta_deg, e)))
        .collect();
    if pts.is_empty() {
        return Err(Error::Report("equivariance curve has no defined points".into()));
    }
    if width < 80 || height < 60 {
        return Err(Error::contract(format!("chart {width}×{height} too small")));
    }
    let mut img = Image::filled(3, height, width, 1.0);
    let (left, right, top, bottom) = (34.0, width as f64 - 10.0, 10.0, height as f64 - 22.0);
    let (t_min, t_max) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let e_max = pts.iter().map(|p| p.1).fold(0.0, f64::max).max(1e-9) * 1.1;
    let t_span = (t_max - t_min).max(1e-9);
    let to_px = |(t, e): (f64, f64)| (left + (t - t_min) / t_span * (right - left), bottom - e / e_max * (bottom - top));
    draw_line(&mut img, (left, bottom), (right, bottom), INK, 1);
    draw_line(&mut img, (left, top), (left, bottom), INK, 1);
    for w in pts.windows(2) {
        draw_line(&mut img, to_px(w[0]), to_px(w[1]), PRED_COLOR, 2);
    }
    for &p in &pts {
        let (x, y) = to_px(p);
        for oy in -2..=2 {
            for ox in -2..=2 {
                put(&mut img, x.round() as i64 + ox, y.round() as i64 + oy, TRUTH_COLOR);
            }
        }
    }
    let b = bottom as i64;
    draw_text(&mut img, left as i64, b + 6, &format!("{t_min:.0}°"), 2, INK);
    let hi = format!("{t_max:.0}°");
    draw_text(&mut img, right as i64 - 8 * hi.chars().count() as i64, b + 6, &hi, 2, INK);
    draw_text(&mut img, 2, top as i64, &format!("{e_max:.0}"), 1, INK);
    draw_text(&mut img, 2, b - 5, "0", 1, INK);
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn face() -> Image {
        Image::filled(3, 32, 32, 0.5)
    }

    fn colored(img: &Image, color: Rgb) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..img.height() {
            for x in 0..img.width() {
                if (0..3).all(|c| (img.get(c, y, x) - color[c]).abs() < 1e-6) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    #[test]
    fn perfect_prediction_hides_the_truth_arrow() {
        let g = GazeAngles::new(0.2, -0.4).unwrap();
        let img = overlay(&face(), g, g);
        assert!(colored(&img, TRUTH_COLOR).is_empty());
        assert!(!colored(&img, PRED_COLOR).is_empty());
        let off = overlay(&face(), g, GazeAngles::new(-0.3, 0.5).unwrap());
        assert!(!colored(&off, TRUTH_COLOR).is_empty());
    }

    #[test]
    fn positive_yaw_points_right_positive_pitch_points_up() {
        let c = (80.0, 80.0);
        let (x, y) = arrow_tip(c, GazeAngles::new(0.0, 0.5).unwrap(), 50.0);
        assert!(x > c.0 && (y - c.1).abs() < 1e-9);
        let (_, y) = arrow_tip(c, GazeAngles::new(0.5, 0.0).unwrap(), 50.0);
        assert!(y < c.1);
        let img = overlay(&face(), GazeAngles::new(0.0, 0.6).unwrap(), GazeAngles::new(0.0, 0.6).unwrap());
        let px = colored(&img, PRED_COLOR);
        let right = px.iter().filter(|p| p.0 > OVERLAY_SIZE / 2 + 2).count();
        let left = px.iter().filter(|p| p.0 < OVERLAY_SIZE / 2 - 2).count();
        assert!(right > 10 * (left + 1));
    }

    #[test]
    fn rendering_is_deterministic() {
        let g = GazeAngles::new(0.1, 0.2).unwrap();
        let p = GazeAngles::new(0.0, 0.3).unwrap();
        assert_eq!(overlay(&face(), g, p), overlay(&face(), g, p));
    }

    #[test]
    fn chart_rejects_empty_curve() {
        let empty = EquivarianceCurve { config_hash: String::new(), points: vec![] };
        assert!(equivariance_chart(&empty, 200, 120).is_err());
    }
}
