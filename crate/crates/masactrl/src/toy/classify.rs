//! Scene classifier: the measurement oracle that turns rendered or
//! synthesized images back into attribute estimates.
//!
//! Color histogram + connected-component analysis recover the foreground
//! and background colors and the position (centroid third); the shape is
//! matched by nearest Hu-moment template. Confidence is the weakest of the
//! individual evidence scores; a missing dominant component sets the
//! low-confidence flag.

use std::sync::OnceLock;

use ndarray::{Array2, Array3};

use crate::real::Real;

use super::scene::{
    render_scene, BgColor, FgColor, Position, SceneSpec, Shape, BG_COLORS, FG_COLORS,
};

#[derive(Debug, Clone)]
pub struct Classification {
    pub shape: Option<Shape>,
    pub fg_color: Option<FgColor>,
    pub position: Option<Position>,
    pub bg_color: BgColor,
    pub confidence: f64,
    pub low_confidence: bool,
    pub fg_mask: Array2<bool>,
    pub centroid: Option<(f64, f64)>,
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn pixel<F: Real>(img: &Array3<F>, y: usize, x: usize) -> [f64; 3] {
    [
        img[(0, y, x)].to_f64c(),
        img[(1, y, x)].to_f64c(),
        img[(2, y, x)].to_f64c(),
    ]
}

/// Seven Hu moment invariants of a binary mask, in signed-log space.
fn hu_moments(mask: &Array2<bool>) -> [f64; 7] {
    let (h, w) = mask.dim();
    let mut m00 = 0.0f64;
    let mut m10 = 0.0f64;
    let mut m01 = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] {
                m00 += 1.0;
                m10 += x as f64;
                m01 += y as f64;
            }
        }
    }
    if m00 == 0.0 {
        return [0.0; 7];
    }
    let (cx, cy) = (m10 / m00, m01 / m00);
    let mut mu = [[0.0f64; 4]; 4];
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                for p in 0..4 {
                    for q in 0..4 {
                        if p + q <= 3 {
                            mu[p][q] += dx.powi(p as i32) * dy.powi(q as i32);
                        }
                    }
                }
            }
        }
    }
    let eta = |p: usize, q: usize| mu[p][q] / m00.powf(1.0 + (p + q) as f64 / 2.0);
    let (n20, n02, n11) = (eta(2, 0), eta(0, 2), eta(1, 1));
    let (n30, n03, n21, n12) = (eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2));
    let h1 = n20 + n02;
    let h2 = (n20 - n02).powi(2) + 4.0 * n11 * n11;
    let h3 = (n30 - 3.0 * n12).powi(2) + (3.0 * n21 - n03).powi(2);
    let h4 = (n30 + n12).powi(2) + (n21 + n03).powi(2);
    let h5 = (n30 - 3.0 * n12) * (n30 + n12) * ((n30 + n12).powi(2) - 3.0 * (n21 + n03).powi(2))
        + (3.0 * n21 - n03) * (n21 + n03) * (3.0 * (n30 + n12).powi(2) - (n21 + n03).powi(2));
    let h6 = (n20 - n02) * ((n30 + n12).powi(2) - (n21 + n03).powi(2))
        + 4.0 * n11 * (n30 + n12) * (n21 + n03);
    let h7 = (3.0 * n21 - n03) * (n30 + n12) * ((n30 + n12).powi(2) - 3.0 * (n21 + n03).powi(2))
        - (n30 - 3.0 * n12) * (n21 + n03) * (3.0 * (n30 + n12).powi(2) - (n21 + n03).powi(2));
    [h1, h2, h3, h4, h5, h6, h7]
}

/// Fraction of the component's bounding box it fills. Strongly separates
/// the three shapes (disk ≈ π/4, square ≈ 1, triangle ≈ ½) where the
/// low-order Hu invariants are nearly degenerate at 32×32.
fn bbox_extent(mask: &Array2<bool>) -> f64 {
    let (h, w) = mask.dim();
    let (mut x0, mut x1, mut y0, mut y1) = (w, 0usize, h, 0usize);
    let mut area = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] {
                area += 1;
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    if area == 0 {
        return 0.0;
    }
    area as f64 / ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64
}

/// Template-matching descriptor over Hu invariants plus bounding-box
/// extent. h1 carries compactness, the cube root of h3 carries the
/// third-order asymmetry that singles out the triangle at a stable scale,
/// and the extent term separates disk (≈π/4) from square (≈1) from
/// triangle (≈½). Weights balance the three ranges.
fn shape_descriptor(mask: &Array2<bool>) -> [f64; 3] {
    let hu = hu_moments(mask);
    let signed_cbrt = |v: f64| v.signum() * v.abs().cbrt();
    [10.0 * hu[0], 10.0 * signed_cbrt(hu[2]), 5.0 * bbox_extent(mask)]
}

fn shape_templates() -> &'static [(Shape, [f64; 3]); 3] {
    static TEMPLATES: OnceLock<[(Shape, [f64; 3]); 3]> = OnceLock::new();
    TEMPLATES.get_or_init(|| {
        let render = |shape: Shape| {
            let (_, raster) = render_scene::<f64>(
                &SceneSpec {
                    shape,
                    fg_color: FgColor::Red,
                    position: Position::Center,
                    bg_color: BgColor::White,
                    jitter_seed: 0,
                },
                64,
            );
            shape_descriptor(&raster)
        };
        [
            (Shape::Circle, render(Shape::Circle)),
            (Shape::Square, render(Shape::Square)),
            (Shape::Triangle, render(Shape::Triangle)),
        ]
    })
}

/// Largest 4-connected component of a binary mask; returns the component
/// mask and its size.
fn largest_component(mask: &Array2<bool>) -> (Array2<bool>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::from_elem((h, w), 0usize);
    let mut next = 1usize;
    let mut best = (0usize, 0usize); // (label, size)
    let mut stack = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if !mask[(sy, sx)] || labels[(sy, sx)] != 0 {
                continue;
            }
            let label = next;
            next += 1;
            let mut size = 0usize;
            stack.push((sy, sx));
            labels[(sy, sx)] = label;
            while let Some((y, x)) = stack.pop() {
                size += 1;
                let mut push = |ny: usize, nx: usize, labels: &mut Array2<usize>| {
                    if mask[(ny, nx)] && labels[(ny, nx)] == 0 {
                        labels[(ny, nx)] = label;
                        stack.push((ny, nx));
                    }
                };
                if y > 0 {
                    push(y - 1, x, &mut labels);
                }
                if y + 1 < h {
                    push(y + 1, x, &mut labels);
                }
                if x > 0 {
                    push(y, x - 1, &mut labels);
                }
                if x + 1 < w {
                    push(y, x + 1, &mut labels);
                }
            }
            if size > best.1 {
                best = (label, size);
            }
        }
    }
    let comp = Array2::from_shape_fn((h, w), |(y, x)| labels[(y, x)] == best.0 && best.0 != 0);
    (comp, best.1)
}

/// Classify an image in [0, 1]. Never fails; inspect `low_confidence`.
pub fn scene_classify<F: Real>(image: &Array3<F>) -> Classification {
    let (_, h, w) = image.dim();

    // Background: majority vote of border pixels against the bg palette.
    let mut votes = [0usize; 3];
    for y in 0..h {
        for x in 0..w {
            if y > 1 && y < h - 2 && x > 1 && x < w - 2 {
                continue;
            }
            let px = pixel(image, y, x);
            let best = BG_COLORS
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    dist2(px, a.rgb()).partial_cmp(&dist2(px, b.rgb())).unwrap()
                })
                .unwrap()
                .0;
            votes[best] += 1;
        }
    }
    let bg = BG_COLORS[votes
        .iter()
        .enumerate()
        .max_by_key(|(_, &v)| v)
        .unwrap()
        .0];
    let bg_rgb = bg.rgb();

    // Foreground: pixels far from the background color.
    let fg_raw = Array2::from_shape_fn((h, w), |(y, x)| dist2(pixel(image, y, x), bg_rgb) > 0.06);
    let (comp, size) = largest_component(&fg_raw);
    let min_size = (0.01 * (h * w) as f64) as usize;
    if size < min_size.max(8) {
        return Classification {
            shape: None,
            fg_color: None,
            position: None,
            bg_color: bg,
            confidence: 0.0,
            low_confidence: true,
            fg_mask: comp,
            centroid: None,
        };
    }

    // Foreground color from the eroded interior (edge pixels blend).
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let interior = comp[(y, x)]
                && comp[(y - 1, x)]
                && comp[(y + 1, x)]
                && comp[(y, x - 1)]
                && comp[(y, x + 1)];
            if interior {
                let px = pixel(image, y, x);
                for c in 0..3 {
                    sum[c] += px[c];
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        count = 1; // fall back to whatever is in sum (zeros)
    }
    let mean = [
        sum[0] / count as f64,
        sum[1] / count as f64,
        sum[2] / count as f64,
    ];
    let (fg_idx, fg_dist) = FG_COLORS
        .iter()
        .enumerate()
        .map(|(i, c)| (i, dist2(mean, c.rgb()).sqrt()))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap();
    let fg = FG_COLORS[fg_idx];

    // Position from the centroid third.
    let mut cx = 0.0f64;
    let mut cy = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if comp[(y, x)] {
                cx += x as f64;
                cy += y as f64;
            }
        }
    }
    cx /= size as f64;
    cy /= size as f64;
    let position = Position::from_centroid_x(cx + 0.5, w);

    // Shape via nearest template in Hu-descriptor space.
    let desc = shape_descriptor(&comp);
    let mut dists: Vec<(Shape, f64)> = shape_templates()
        .iter()
        .map(|(s, t)| {
            let d: f64 = desc
                .iter()
                .zip(t.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            (*s, d)
        })
        .collect();
    dists.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let shape = dists[0].0;

    // Evidence scores in [0, 1]; overall confidence is the weakest one.
    let size_score = (size as f64 / (3.0 * min_size.max(8) as f64)).min(1.0);
    let color_score = (1.0 - fg_dist / 0.5).clamp(0.0, 1.0);
    let margin = if dists[1].1 + dists[0].1 > 0.0 {
        (dists[1].1 - dists[0].1) / (dists[1].1 + dists[0].1)
    } else {
        0.0
    };
    let shape_score = (margin / 0.10).clamp(0.0, 1.0);
    let confidence = size_score.min(color_score).min(shape_score);

    Classification {
        shape: Some(shape),
        fg_color: Some(fg),
        position: Some(position),
        bg_color: bg,
        confidence,
        low_confidence: false,
        fg_mask: comp,
        centroid: Some((cx, cy)),
    }
}

/// Joint RGB histogram over the masked pixels, `bins³` cells, normalized.
pub fn fg_histogram<F: Real>(image: &Array3<F>, mask: &Array2<bool>, bins: usize) -> Vec<f64> {
    let (_, h, w) = image.dim();
    let mut hist = vec![0.0f64; bins * bins * bins];
    let mut total = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] {
                let px = pixel(image, y, x);
                let q = |v: f64| ((v * bins as f64) as usize).min(bins - 1);
                hist[(q(px[0]) * bins + q(px[1])) * bins + q(px[2])] += 1.0;
                total += 1.0;
            }
        }
    }
    if total > 0.0 {
        for v in &mut hist {
            *v /= total;
        }
    }
    hist
}

/// Symmetric χ² distance between two normalized histograms.
pub fn chi2_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let s = x + y;
        if s > 0.0 {
            acc += (x - y) * (x - y) / s;
        }
    }
    0.5 * acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::scene::{POSITIONS, SHAPES};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_loop_on_two_hundred_rendered_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut checked = 0;
        for i in 0..200 {
            let spec = SceneSpec {
                shape: SHAPES[i % 3],
                fg_color: FG_COLORS[(i / 3) % 4],
                position: POSITIONS[(i / 12) % 3],
                bg_color: BG_COLORS[(i / 36) % 3],
                jitter_seed: rng.random(),
            };
            let (img, _) = render_scene::<f64>(&spec, 32);
            let c = scene_classify(&img);
            assert!(!c.low_confidence, "scene {i}: low confidence");
            assert_eq!(c.shape, Some(spec.shape), "scene {i} ({spec:?})");
            assert_eq!(c.fg_color, Some(spec.fg_color), "scene {i}");
            assert_eq!(c.position, Some(spec.position), "scene {i}");
            assert_eq!(c.bg_color, spec.bg_color, "scene {i}");
            assert!(
                c.confidence > 0.9,
                "scene {i}: confidence {} too low ({spec:?})",
                c.confidence
            );
            checked += 1;
        }
        assert_eq!(checked, 200);
    }

    #[test]
    fn blank_image_is_low_confidence() {
        let img = Array3::from_elem((3, 32, 32), 0.95f64);
        let c = scene_classify(&img);
        assert!(c.low_confidence);
        assert_eq!(c.confidence, 0.0);
        assert!(c.shape.is_none());
    }

    #[test]
    fn classifier_tracks_color_swap() {
        let base = SceneSpec {
            shape: Shape::Square,
            fg_color: FgColor::Red,
            position: Position::Center,
            bg_color: BgColor::White,
            jitter_seed: 5,
        };
        let (img, _) = render_scene::<f64>(&base, 32);
        assert_eq!(scene_classify(&img).fg_color, Some(FgColor::Red));
        let swapped = SceneSpec {
            fg_color: FgColor::Blue,
            ..base
        };
        let (img2, _) = render_scene::<f64>(&swapped, 32);
        assert_eq!(scene_classify(&img2).fg_color, Some(FgColor::Blue));
    }

    #[test]
    fn histogram_chi2_separates_colors() {
        let (img_r, raster) = render_scene::<f64>(
            &SceneSpec {
                shape: Shape::Circle,
                fg_color: FgColor::Red,
                position: Position::Center,
                bg_color: BgColor::White,
                jitter_seed: 1,
            },
            32,
        );
        let (img_b, raster_b) = render_scene::<f64>(
            &SceneSpec {
                shape: Shape::Circle,
                fg_color: FgColor::Blue,
                position: Position::Center,
                bg_color: BgColor::White,
                jitter_seed: 1,
            },
            32,
        );
        let h_r = fg_histogram(&img_r, &raster, 8);
        let h_r2 = fg_histogram(&img_r, &raster, 8);
        let h_b = fg_histogram(&img_b, &raster_b, 8);
        assert!(chi2_distance(&h_r, &h_r2) < 1e-12);
        assert!(chi2_distance(&h_r, &h_b) > 0.5);
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let ranks = |vals: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        let mut r = vec![0.0; vals.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && vals[idx[j + 1]] == vals[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let rx = ranks(xs);
    let ry = ranks(ys);
    let mx = rx.iter().sum::<f64>() / n as f64;
    let my = ry.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx <= 0.0 || vy <= 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[cfg(test)]
mod spearman_tests {
    use super::spearman_rho;

    #[test]
    fn monotone_sequences() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let up: Vec<f64> = xs.iter().map(|v| v * 2.0 + 1.0).collect();
        let down: Vec<f64> = xs.iter().map(|v| -v).collect();
        assert!((spearman_rho(&xs, &up) - 1.0).abs() < 1e-12);
        assert!((spearman_rho(&xs, &down) + 1.0).abs() < 1e-12);
        let flat = vec![3.0; 10];
        assert_eq!(spearman_rho(&xs, &flat), 0.0);
    }

    #[test]
    fn ties_get_average_ranks() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [1.0, 1.0, 2.0, 2.0];
        let rho = spearman_rho(&xs, &ys);
        assert!(rho > 0.85 && rho <= 1.0, "rho {rho}");
    }
}
