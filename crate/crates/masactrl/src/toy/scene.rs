//! Procedural scene rendering with ground-truth semantics.
//!
//! A scene is a flat-colored shape on a flat background, described by four
//! categorical attributes plus a jitter seed. Rendering is anti-aliased
//! (supersampled coverage) and fully deterministic; alongside the image it
//! returns the exact foreground raster, which downstream oracles treat as
//! ground truth.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::PromptTokens;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FgColor {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Left,
    Center,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BgColor {
    White,
    Gray,
    Navy,
}

pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
pub const FG_COLORS: [FgColor; 4] = [FgColor::Red, FgColor::Green, FgColor::Blue, FgColor::Yellow];
pub const POSITIONS: [Position; 3] = [Position::Left, Position::Center, Position::Right];
pub const BG_COLORS: [BgColor; 3] = [BgColor::White, BgColor::Gray, BgColor::Navy];

impl FgColor {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            FgColor::Red => [0.85, 0.10, 0.10],
            FgColor::Green => [0.10, 0.75, 0.15],
            FgColor::Blue => [0.15, 0.20, 0.85],
            FgColor::Yellow => [0.90, 0.85, 0.10],
        }
    }
}

impl BgColor {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            BgColor::White => [0.95, 0.95, 0.95],
            BgColor::Gray => [0.50, 0.50, 0.50],
            BgColor::Navy => [0.08, 0.10, 0.35],
        }
    }
}

/// Full description of one scene; rendering is a pure function of this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub fg_color: FgColor,
    pub position: Position,
    pub bg_color: BgColor,
    pub jitter_seed: u64,
}

impl Position {
    fn center_x(self, size: usize) -> f64 {
        let s = size as f64;
        match self {
            Position::Left => 0.25 * s,
            Position::Center => 0.50 * s,
            Position::Right => 0.75 * s,
        }
    }

    /// Third of the image the attribute occupies, for centroid checks.
    pub fn from_centroid_x(cx: f64, size: usize) -> Position {
        let t = cx / size as f64;
        if t < 1.0 / 3.0 {
            Position::Left
        } else if t < 2.0 / 3.0 {
            Position::Center
        } else {
            Position::Right
        }
    }
}

fn inside(shape: Shape, cx: f64, cy: f64, r: f64, x: f64, y: f64) -> bool {
    match shape {
        Shape::Circle => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        Shape::Square => {
            let h = r * 0.886; // matches the circle's area
            (x - cx).abs() <= h && (y - cy).abs() <= h
        }
        Shape::Triangle => {
            // equilateral, apex up, circumradius scaled up for similar area
            let rr = r * 1.25;
            let (x0, y0) = (cx, cy - rr);
            let (x1, y1) = (cx - rr * 0.866, cy + rr * 0.5);
            let (x2, y2) = (cx + rr * 0.866, cy + rr * 0.5);
            let sign = |ax: f64, ay: f64, bx: f64, by: f64| (x - bx) * (ay - by) - (ax - bx) * (y - by);
            let d0 = sign(x0, y0, x1, y1);
            let d1 = sign(x1, y1, x2, y2);
            let d2 = sign(x2, y2, x0, y0);
            let has_neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
            let has_pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
            !(has_neg && has_pos)
        }
    }
}

/// Anti-aliased render plus the exact foreground raster (coverage ≥ ½).
pub fn render_scene<F: Real>(spec: &SceneSpec, size: usize) -> (Array3<F>, Array2<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.jitter_seed);
    // Jitter is independent of position, so left/right renders of the same
    // seed are exact horizontal translates.
    let dx: f64 = rng.random_range(-1.0..1.0);
    let dy: f64 = rng.random_range(-1.0..1.0);
    let scale: f64 = rng.random_range(0.9..1.1);
    let r = 0.155 * size as f64 * scale;
    let cx = spec.position.center_x(size) + dx;
    let cy = 0.5 * size as f64 + dy;

    let fg = spec.fg_color.rgb();
    let bg = spec.bg_color.rgb();
    let mut img = Array3::zeros((3, size, size));
    let mut raster = Array2::from_elem((size, size), false);
    const SS: usize = 3; // 3×3 subsamples per pixel
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0usize;
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = px as f64 + (sx as f64 + 0.5) / SS as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / SS as f64;
                    if inside(spec.shape, cx, cy, r, x, y) {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f64 / (SS * SS) as f64;
            raster[(py, px)] = cov >= 0.5;
            for c in 0..3 {
                img[(c, py, px)] = F::c(bg[c] + cov * (fg[c] - bg[c]));
            }
        }
    }
    (img, raster)
}

/// Downsample a full-resolution raster to a coarse grid by majority
/// coverage. Used to compare extracted 16×16 masks against ground truth.
pub fn downsample_raster(raster: &Array2<bool>, target: usize) -> Array2<bool> {
    let (h, w) = raster.dim();
    let (fy, fx) = (h / target, w / target);
    Array2::from_shape_fn((target, target), |(i, j)| {
        let mut on = 0usize;
        for y in i * fy..(i + 1) * fy {
            for x in j * fx..(j + 1) * fx {
                if raster[(y, x)] {
                    on += 1;
                }
            }
        }
        2 * on >= fy * fx
    })
}

/// Intersection-over-union of two binary grids.
pub fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.iter().zip(b.iter()) {
        if *x && *y {
            inter += 1;
        }
        if *x || *y {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Position-indexed token layout: `[fg_color][shape][position][bg_color]`
/// plus padding. The mapping between attribute values and tokens is a
/// bijection, so every token sequence decodes back to a (jitter-free)
/// scene.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenGrammar;

/// Slot carrying the shape token, the default mask-extraction target.
pub const SHAPE_TOKEN_SLOT: usize = 1;

impl TokenGrammar {
    pub const PAD: u32 = 0;

    pub fn vocab_size(&self) -> usize {
        14 // PAD + 4 fg colors + 3 shapes + 3 positions + 3 bg colors
    }

    pub fn max_tokens(&self) -> usize {
        8
    }

    fn fg_token(c: FgColor) -> u32 {
        match c {
            FgColor::Red => 1,
            FgColor::Green => 2,
            FgColor::Blue => 3,
            FgColor::Yellow => 4,
        }
    }

    fn shape_token(s: Shape) -> u32 {
        match s {
            Shape::Circle => 5,
            Shape::Square => 6,
            Shape::Triangle => 7,
        }
    }

    fn pos_token(p: Position) -> u32 {
        match p {
            Position::Left => 8,
            Position::Center => 9,
            Position::Right => 10,
        }
    }

    fn bg_token(b: BgColor) -> u32 {
        match b {
            BgColor::White => 11,
            BgColor::Gray => 12,
            BgColor::Navy => 13,
        }
    }

    pub fn tokens_for(&self, spec: &SceneSpec) -> PromptTokens {
        let mut ids = vec![Self::PAD; self.max_tokens()];
        ids[0] = Self::fg_token(spec.fg_color);
        ids[SHAPE_TOKEN_SLOT] = Self::shape_token(spec.shape);
        ids[2] = Self::pos_token(spec.position);
        ids[3] = Self::bg_token(spec.bg_color);
        PromptTokens::new(ids)
    }

    /// Decode a token sequence back to attributes (jitter is not encoded).
    pub fn decode(&self, tokens: &PromptTokens) -> Result<(FgColor, Shape, Position, BgColor)> {
        if tokens.ids.len() != self.max_tokens() {
            return Err(Error::contract(format!(
                "expected {} tokens, got {}",
                self.max_tokens(),
                tokens.ids.len()
            )));
        }
        let fg = match tokens.ids[0] {
            1 => FgColor::Red,
            2 => FgColor::Green,
            3 => FgColor::Blue,
            4 => FgColor::Yellow,
            other => return Err(Error::contract(format!("token {other} is not a color"))),
        };
        let shape = match tokens.ids[1] {
            5 => Shape::Circle,
            6 => Shape::Square,
            7 => Shape::Triangle,
            other => return Err(Error::contract(format!("token {other} is not a shape"))),
        };
        let pos = match tokens.ids[2] {
            8 => Position::Left,
            9 => Position::Center,
            10 => Position::Right,
            other => return Err(Error::contract(format!("token {other} is not a position"))),
        };
        let bg = match tokens.ids[3] {
            11 => BgColor::White,
            12 => BgColor::Gray,
            13 => BgColor::Navy,
            other => return Err(Error::contract(format!("token {other} is not a background"))),
        };
        Ok((fg, shape, pos, bg))
    }

    /// Parse a grammar phrase such as `"red circle left"` or
    /// `"green square center on navy"`; the background defaults to white.
    pub fn parse_phrase(&self, phrase: &str) -> Result<PromptTokens> {
        let words: Vec<&str> = phrase.split_whitespace().collect();
        let usage = "expected \"<color> <shape> <position> [on <background>]\"";
        if words.len() != 3 && words.len() != 5 {
            return Err(Error::contract(format!(
                "cannot parse prompt {phrase:?}: {usage}"
            )));
        }
        let fg = match words[0] {
            "red" => FgColor::Red,
            "green" => FgColor::Green,
            "blue" => FgColor::Blue,
            "yellow" => FgColor::Yellow,
            w => return Err(Error::contract(format!("unknown color {w:?}: {usage}"))),
        };
        let shape = match words[1] {
            "circle" => Shape::Circle,
            "square" => Shape::Square,
            "triangle" => Shape::Triangle,
            w => return Err(Error::contract(format!("unknown shape {w:?}: {usage}"))),
        };
        let pos = match words[2] {
            "left" => Position::Left,
            "center" => Position::Center,
            "right" => Position::Right,
            w => return Err(Error::contract(format!("unknown position {w:?}: {usage}"))),
        };
        let bg = if words.len() == 5 {
            if words[3] != "on" {
                return Err(Error::contract(format!(
                    "expected \"on\" before background, got {:?}",
                    words[3]
                )));
            }
            match words[4] {
                "white" => BgColor::White,
                "gray" => BgColor::Gray,
                "navy" => BgColor::Navy,
                w => return Err(Error::contract(format!("unknown background {w:?}: {usage}"))),
            }
        } else {
            BgColor::White
        };
        Ok(self.tokens_for(&SceneSpec {
            shape,
            fg_color: fg,
            position: pos,
            bg_color: bg,
            jitter_seed: 0,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(position: Position, seed: u64) -> SceneSpec {
        SceneSpec {
            shape: Shape::Circle,
            fg_color: FgColor::Red,
            position,
            bg_color: BgColor::White,
            jitter_seed: seed,
        }
    }

    #[test]
    fn left_and_right_are_exact_translates() {
        let (l, lr) = render_scene::<f64>(&spec(Position::Left, 7), 32);
        let (r, rr) = render_scene::<f64>(&spec(Position::Right, 7), 32);
        // 0.25·32 = 8 → 0.75·32 = 24: shift by 16 columns.
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..16 {
                    assert_eq!(l[(c, y, x)], r[(c, y, x + 16)]);
                }
            }
        }
        for y in 0..32 {
            for x in 0..16 {
                assert_eq!(lr[(y, x)], rr[(y, x + 16)]);
            }
        }
        // Raster sums equal under translation.
        let suml = lr.iter().filter(|&&b| b).count();
        let sumr = rr.iter().filter(|&&b| b).count();
        assert_eq!(suml, sumr);
        assert!(suml > 30, "foreground too small: {suml}");
    }

    #[test]
    fn raster_sums_stable_across_positions_and_shapes() {
        for shape in SHAPES {
            let mut sums = Vec::new();
            for pos in POSITIONS {
                let (_, raster) = render_scene::<f64>(
                    &SceneSpec {
                        shape,
                        fg_color: FgColor::Blue,
                        position: pos,
                        bg_color: BgColor::Gray,
                        jitter_seed: 3,
                    },
                    32,
                );
                sums.push(raster.iter().filter(|&&b| b).count() as f64);
            }
            let max = sums.iter().cloned().fold(0.0, f64::max);
            let min = sums.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(max <= 1.1 * min, "{shape:?}: {sums:?}");
        }
    }

    #[test]
    fn raster_downsample_identity_iou() {
        let (_, raster) = render_scene::<f64>(&spec(Position::Center, 1), 32);
        let d = downsample_raster(&raster, 16);
        assert_eq!(mask_iou(&d, &d), 1.0);
        assert!(d.iter().any(|&b| b));
    }

    #[test]
    fn rendering_is_deterministic() {
        let (a, _) = render_scene::<f32>(&spec(Position::Center, 5), 32);
        let (b, _) = render_scene::<f32>(&spec(Position::Center, 5), 32);
        assert_eq!(a, b);
        let (c, _) = render_scene::<f32>(&spec(Position::Center, 6), 32);
        assert_ne!(a, c);
    }

    #[test]
    fn grammar_is_a_bijection_on_attributes() {
        let g = TokenGrammar;
        for shape in SHAPES {
            for fg in FG_COLORS {
                for pos in POSITIONS {
                    for bg in BG_COLORS {
                        let s = SceneSpec {
                            shape,
                            fg_color: fg,
                            position: pos,
                            bg_color: bg,
                            jitter_seed: 0,
                        };
                        let toks = g.tokens_for(&s);
                        assert!(toks.ids.iter().all(|&t| (t as usize) < g.vocab_size()));
                        let (fg2, sh2, pos2, bg2) = g.decode(&toks).unwrap();
                        assert_eq!((fg2, sh2, pos2, bg2), (fg, shape, pos, bg));
                    }
                }
            }
        }
    }

    #[test]
    fn phrase_parsing() {
        let g = TokenGrammar;
        let t = g.parse_phrase("red circle left").unwrap();
        assert_eq!(t.ids[0], 1);
        assert_eq!(t.ids[SHAPE_TOKEN_SLOT], 5);
        assert_eq!(t.ids[2], 8);
        assert_eq!(t.ids[3], 11); // default white
        let t = g.parse_phrase("green square center on navy").unwrap();
        assert_eq!(t.ids[3], 13);
        assert!(g.parse_phrase("red circle").is_err());
        assert!(g.parse_phrase("red banana left").is_err());
        assert!(g.parse_phrase("red circle left by navy").is_err());
    }
}
