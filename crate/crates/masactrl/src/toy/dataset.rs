//! Dataset generation: round-robin coverage of the attribute grid with
//! seeded jitter, plus the on-disk manifest format.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::PromptTokens;
use crate::error::Result;
use crate::imgio;
use crate::real::Real;

use super::scene::{
    render_scene, SceneSpec, TokenGrammar, BG_COLORS, FG_COLORS, POSITIONS, SHAPES,
};

#[derive(Debug, Clone)]
pub struct SceneItem<F> {
    pub spec: SceneSpec,
    pub tokens: PromptTokens,
    /// `[3, size, size]` in [0, 1].
    pub image: Array3<F>,
    /// Ground-truth foreground raster at full resolution.
    pub raster: Array2<bool>,
}

#[derive(Debug, Clone)]
pub struct Dataset<F> {
    pub items: Vec<SceneItem<F>>,
    pub image_size: usize,
}

/// Every attribute combination in a fixed enumeration order.
pub fn all_combinations() -> Vec<SceneSpec> {
    let mut out = Vec::new();
    for shape in SHAPES {
        for fg in FG_COLORS {
            for pos in POSITIONS {
                for bg in BG_COLORS {
                    out.push(SceneSpec {
                        shape,
                        fg_color: fg,
                        position: pos,
                        bg_color: bg,
                        jitter_seed: 0,
                    });
                }
            }
        }
    }
    out
}

/// `n` scenes with round-robin attribute coverage and seeded jitter.
pub fn make_dataset<F: Real>(n: usize, seed: u64, grammar: &TokenGrammar, size: usize) -> Dataset<F> {
    let combos = all_combinations();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let mut spec = combos[i % combos.len()];
        spec.jitter_seed = rng.random::<u64>();
        let (image, raster) = render_scene(&spec, size);
        items.push(SceneItem {
            tokens: grammar.tokens_for(&spec),
            spec,
            image,
            raster,
        });
    }
    Dataset {
        items,
        image_size: size,
    }
}

/// One line of the dataset manifest (JSON lines).
#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    pub spec: SceneSpec,
    pub tokens: Vec<u32>,
    pub image: String,
    pub raster: String,
}

/// Materialize the dataset: `manifest.jsonl`, 8-bit RGB images, and 1-bit
/// foreground rasters.
pub fn write_dataset<F: Real>(ds: &Dataset<F>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("rasters"))?;
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.jsonl"))?);
    for (i, item) in ds.items.iter().enumerate() {
        let image = format!("images/{i:05}.png");
        let raster = format!("rasters/{i:05}.png");
        imgio::save_rgb(&item.image, &dir.join(&image))?;
        imgio::save_bitmask(&item.raster, &dir.join(&raster))?;
        let rec = ManifestRecord {
            index: i,
            spec: item.spec,
            tokens: item.tokens.ids.clone(),
            image,
            raster,
        };
        writeln!(manifest, "{}", serde_json::to_string(&rec)?)?;
    }
    manifest.flush()?;
    Ok(())
}
