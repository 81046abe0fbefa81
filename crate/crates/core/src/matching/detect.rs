//! Multi-scale Harris corners with raw-patch descriptors.

use rayon::prelude::*;

use super::{Keypoint, KeypointSet, DESCRIPTOR_LEN, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::imaging::{downsample, ScalarImage};

pub const MIN_DETECT_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Keep at most this many keypoints (highest response first).
    pub max_keypoints: usize,
    /// Pyramid levels, each half the resolution of the previous one.
    pub levels: usize,
    /// Non-maximum suppression radius in pixels of the level image.
    pub nms_radius: usize,
    pub harris_k: f64,
    /// Responses below `relative_threshold * max response` of a level are ignored.
    pub relative_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            max_keypoints: 4096,
            levels: 3,
            nms_radius: 4,
            harris_k: 0.04,
            relative_threshold: 1e-3,
        }
    }
}

const HALF_PATCH: isize = (PATCH_SIZE / 2) as isize;
// patch offsets run -8..=7 around a sub-pixel centre that may move by 0.5
const BORDER: usize = PATCH_SIZE / 2 + 1;

/// Detects keypoints over an image pyramid and describes each by a
/// normalized intensity patch. Coordinates are reported at full resolution.
pub fn detect_keypoints(img: &ScalarImage, cfg: &DetectorConfig) -> Result<KeypointSet> {
    let (w, h) = img.dims();
    if w < MIN_DETECT_SIZE || h < MIN_DETECT_SIZE {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            min: MIN_DETECT_SIZE,
        });
    }
    let mut level_img = img.clone();
    let mut all = Vec::new();
    for level in 0..cfg.levels.max(1) {
        if level > 0 {
            level_img = downsample(&level_img, 2)?;
        }
        if level_img.width() < 2 * BORDER + 1 || level_img.height() < 2 * BORDER + 1 {
            break;
        }
        all.extend(detect_level(&level_img, level as u8, cfg));
    }
    all.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.level.cmp(&b.level))
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
    all.truncate(cfg.max_keypoints);
    if all.len() < 4 {
        return Err(Error::DegenerateContent(format!(
            "only {} keypoints found",
            all.len()
        )));
    }
    Ok(KeypointSet {
        dims: (w, h),
        keypoints: all,
    })
}

fn harris_response(img: &ScalarImage, k: f64) -> Vec<f64> {
    let (w, h) = img.dims();
    let at = |x: isize, y: isize| -> f64 {
        img.get(
            x.clamp(0, w as isize - 1) as usize,
            y.clamp(0, h as isize - 1) as usize,
        )
    };
    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = 0.5 * (at(x + 1, y) - at(x - 1, y));
            let gy = 0.5 * (at(x, y + 1) - at(x, y - 1));
            let i = y as usize * w + x as usize;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let sxx = binomial_smooth(&ixx, w, h);
    let syy = binomial_smooth(&iyy, w, h);
    let sxy = binomial_smooth(&ixy, w, h);
    (0..w * h)
        .map(|i| {
            let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
            let tr = sxx[i] + syy[i];
            det - k * tr * tr
        })
        .collect()
}

// separable [1 4 6 4 1] / 16 with clamped borders
fn binomial_smooth(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (t, kv) in K.iter().enumerate() {
                let xx = (x as isize + t as isize - 2).clamp(0, w as isize - 1) as usize;
                s += kv * src[y * w + xx];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (t, kv) in K.iter().enumerate() {
                let yy = (y as isize + t as isize - 2).clamp(0, h as isize - 1) as usize;
                s += kv * tmp[yy * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn detect_level(img: &ScalarImage, level: u8, cfg: &DetectorConfig) -> Vec<Keypoint> {
    let (w, h) = img.dims();
    let resp = harris_response(img, cfg.harris_k);
    let max_r = resp.iter().cloned().fold(0.0f64, f64::max);
    if !(max_r > 1e-12) {
        return Vec::new();
    }
    let threshold = (cfg.relative_threshold * max_r).max(1e-12);
    let rad = cfg.nms_radius as isize;
    let rad2 = rad * rad;
    let scale = f64::from(1u32 << level);

    (BORDER..h - BORDER)
        .into_par_iter()
        .flat_map_iter(|y| {
            let resp = &resp;
            (BORDER..w - BORDER).filter_map(move |x| {
                let i = y * w + x;
                let r = resp[i];
                if r <= threshold {
                    return None;
                }
                for dy in -rad..=rad {
                    for dx in -rad..=rad {
                        if (dx == 0 && dy == 0) || dx * dx + dy * dy > rad2 {
                            continue;
                        }
                        let (xx, yy) = (x as isize + dx, y as isize + dy);
                        if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                            continue;
                        }
                        let j = yy as usize * w + xx as usize;
                        // ties go to the earlier raster index
                        if resp[j] > r || (resp[j] == r && j < i) {
                            return None;
                        }
                    }
                }
                let ox = parabolic_offset(resp[i - 1], r, resp[i + 1]);
                let oy = parabolic_offset(resp[i - w], r, resp[i + w]);
                let (lx, ly) = (x as f64 + ox, y as f64 + oy);
                let descriptor = describe(img, lx, ly)?;
                Some(Keypoint {
                    x: (lx + 0.5) * scale - 0.5,
                    y: (ly + 0.5) * scale - 0.5,
                    response: r,
                    level,
                    descriptor,
                })
            })
        })
        .collect()
}

fn parabolic_offset(left: f64, centre: f64, right: f64) -> f64 {
    let denom = left - 2.0 * centre + right;
    if denom >= 0.0 {
        return 0.0;
    }
    (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
}

/// Mean-subtracted, unit-norm 16x16 patch; `None` for flat patches.
fn describe(img: &ScalarImage, cx: f64, cy: f64) -> Option<Vec<f32>> {
    let mut patch = Vec::with_capacity(DESCRIPTOR_LEN);
    for j in 0..PATCH_SIZE as isize {
        for i in 0..PATCH_SIZE as isize {
            patch.push(img.sample_bilinear(
                cx + (i - HALF_PATCH) as f64,
                cy + (j - HALF_PATCH) as f64,
                0.0,
            ));
        }
    }
    let mean = patch.iter().sum::<f64>() / patch.len() as f64;
    let norm = patch.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
    if !(norm > 1e-8) {
        return None;
    }
    Some(patch.iter().map(|v| ((v - mean) / norm) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> ScalarImage {
        ScalarImage::from_fn(64, 64, |x, y| {
            if (16..48).contains(&x) && (16..48).contains(&y) {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn constant_image_is_degenerate() {
        let img = ScalarImage::constant(64, 64, 0.4);
        assert!(matches!(
            detect_keypoints(&img, &DetectorConfig::default()),
            Err(Error::DegenerateContent(_))
        ));
    }

    #[test]
    fn too_small_image_is_rejected() {
        let img = ScalarImage::constant(31, 64, 0.4);
        assert!(matches!(
            detect_keypoints(&img, &DetectorConfig::default()),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn square_corners_are_found() {
        let kps = detect_keypoints(&square(), &DetectorConfig::default()).unwrap();
        // the square occupies pixels 16..=47, so its corners sit at the pixel edges
        for (cx, cy) in [(15.5, 15.5), (47.5, 15.5), (15.5, 47.5), (47.5, 47.5)] {
            let d = kps
                .keypoints
                .iter()
                .map(|k| (k.x - cx).hypot(k.y - cy))
                .fold(f64::INFINITY, f64::min);
            assert!(d <= 2.0, "corner ({cx}, {cy}) nearest detection {d}");
        }
    }

    #[test]
    fn descriptors_are_unit_norm_and_deterministic() {
        let img = square();
        let a = detect_keypoints(&img, &DetectorConfig::default()).unwrap();
        let b = detect_keypoints(&img, &DetectorConfig::default()).unwrap();
        assert_eq!(a, b);
        for k in &a.keypoints {
            assert_eq!(k.descriptor.len(), DESCRIPTOR_LEN);
            let n: f64 = k.descriptor.iter().map(|&v| (v as f64).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
            assert!(k.x >= 0.0 && k.y >= 0.0 && k.x < 64.0 && k.y < 64.0);
        }
    }
}
