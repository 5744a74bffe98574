//! Attention artifact dumps: per-token cross-attention heatmaps and a
//! 3-component PCA projection of the recorded self-attention queries,
//! written as grayscale/RGB PNGs under `attn/{step}/{layer}/` with a
//! manifest listing every tensor shape.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::attention::control::{AttentionRecord, Pass};
use crate::attention::mask::CrossMapStore;
use crate::denoiser::LayerInfo;
use crate::error::{Error, Result};
use crate::imgio;
use crate::real::Real;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpManifest {
    pub steps: Vec<StepDump>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepDump {
    pub step: usize,
    pub layers: Vec<LayerDump>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDump {
    pub layer: usize,
    pub resolution: usize,
    /// `[heads, n_q, N]` of the dumped cross map, when present.
    pub cross_map_shape: Option<(usize, usize, usize)>,
    pub token_heatmaps: Vec<String>,
    /// `[heads, n, d]` of the recorded queries, when present.
    pub query_shape: Option<(usize, usize, usize)>,
    pub query_pca: Option<String>,
}

/// First three principal components of row vectors, via deterministic power
/// iteration with deflation. Returns `[n, 3]` (zero-padded when the data
/// has fewer dimensions).
fn pca3(data: &Array2<f64>) -> Array2<f64> {
    let (n, d) = data.dim();
    let mut centered = data.clone();
    for c in 0..d {
        let mean: f64 = centered.column(c).sum() / n as f64;
        centered.column_mut(c).mapv_inplace(|v| v - mean);
    }
    let mut cov = centered.t().dot(&centered);
    cov.mapv_inplace(|v| v / n as f64);
    let mut out = Array2::zeros((n, 3));
    for comp in 0..3.min(d) {
        let mut v = ndarray::Array1::from_elem(d, 1.0 / (d as f64).sqrt());
        for _ in 0..200 {
            let w = cov.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm < 1e-12 {
                break;
            }
            v = w / norm;
        }
        let lambda = v.dot(&cov.dot(&v));
        let proj = centered.dot(&v);
        out.column_mut(comp).assign(&proj);
        // deflate
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] -= lambda * v[i] * v[j];
            }
        }
    }
    out
}

fn minmax_norm(mut m: Array2<f64>) -> Array2<f64> {
    let lo = m.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        m.mapv_inplace(|v| (v - lo) / (hi - lo));
    } else {
        m.fill(0.0);
    }
    m
}

/// Write the artifact tree for the requested steps. Raw cross-map rows are
/// re-checked for stochasticity before export.
pub fn dump_attention_artifacts<F: Real>(
    dir: &Path,
    steps: &[usize],
    record: &AttentionRecord<F>,
    store: &CrossMapStore<F>,
    registry: &[LayerInfo],
) -> Result<DumpManifest> {
    let root = dir.join("attn");
    let mut manifest = DumpManifest { steps: Vec::new() };
    for &step in steps {
        let mut layers = Vec::new();
        for (layer_index, resolution) in store.layers_at(step) {
            let map = store
                .map_at(step, layer_index)
                .expect("listed layers have maps");
            let (heads, n_q, n_tok) = map.dim();
            for row in map.rows() {
                let s: f64 = row.iter().map(|v| v.to_f64c()).sum();
                if (s - 1.0).abs() > 1e-5 {
                    return Err(Error::contract(format!(
                        "cross map row at (step {step}, layer {layer_index}) sums to {s}"
                    )));
                }
            }
            let layer_dir = root.join(format!("{step}/{layer_index}"));
            std::fs::create_dir_all(&layer_dir)?;
            let mut paths = Vec::new();
            for tok in 0..n_tok {
                // head-averaged spatial heatmap for this token
                let mut grid = Array2::zeros((resolution, resolution));
                for h in 0..heads {
                    for qi in 0..n_q {
                        grid[(qi / resolution, qi % resolution)] +=
                            map[(h, qi, tok)].to_f64c() / heads as f64;
                    }
                }
                let grid = minmax_norm(grid);
                let path = layer_dir.join(format!("token_{tok}.png"));
                imgio::save_gray(&grid, &path)?;
                paths.push(
                    path.strip_prefix(dir)
                        .unwrap_or(&path)
                        .to_string_lossy()
                        .into_owned(),
                );
            }
            layers.push(LayerDump {
                layer: layer_index,
                resolution,
                cross_map_shape: Some((heads, n_q, n_tok)),
                token_heatmaps: paths,
                query_shape: None,
                query_pca: None,
            });
        }
        // query PCA for recorded self-attention layers
        for info in registry {
            if let Some(q) = record.query(step, info.index, Pass::Cond) {
                let (heads, n, d) = q.dim();
                let side = info.resolution;
                debug_assert_eq!(n, side * side);
                let mut flat = Array2::zeros((n, heads * d));
                for h in 0..heads {
                    for i in 0..n {
                        for c in 0..d {
                            flat[(i, h * d + c)] = q[(h, i, c)].to_f64c();
                        }
                    }
                }
                let proj = pca3(&flat);
                let mut rgb = Array3::zeros((3, side, side));
                for comp in 0..3 {
                    let chan = minmax_norm(Array2::from_shape_fn((side, side), |(i, j)| {
                        proj[(i * side + j, comp)]
                    }));
                    for i in 0..side {
                        for j in 0..side {
                            rgb[(comp, i, j)] = chan[(i, j)];
                        }
                    }
                }
                let layer_dir = root.join(format!("{step}/{}", info.index));
                std::fs::create_dir_all(&layer_dir)?;
                let path = layer_dir.join("q_pca.png");
                imgio::save_rgb(&rgb, &path)?;
                let rel = path
                    .strip_prefix(dir)
                    .unwrap_or(&path)
                    .to_string_lossy()
                    .into_owned();
                if let Some(ld) = layers.iter_mut().find(|l| l.layer == info.index) {
                    ld.query_shape = Some((heads, n, d));
                    ld.query_pca = Some(rel);
                } else {
                    layers.push(LayerDump {
                        layer: info.index,
                        resolution: side,
                        cross_map_shape: None,
                        token_heatmaps: Vec::new(),
                        query_shape: Some((heads, n, d)),
                        query_pca: Some(rel),
                    });
                }
            }
        }
        layers.sort_by_key(|l| l.layer);
        manifest.steps.push(StepDump { step, layers });
    }
    std::fs::create_dir_all(&root)?;
    let manifest_path = root.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("json: {e}"))
    }
}
