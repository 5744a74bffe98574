//! Scaled dot-product attention and its masked variant.
//!
//! Tensors are per-sample: `Q [heads, n_q, d]`, `K/V [heads, n_k, d]`.

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::real::Real;

/// Additive bias that drives masked-out scores to effectively −∞.
const MASK_BIAS: f64 = -1e9;

fn check_finite<F: Real>(name: &str, t: &Array3<F>) -> Result<()> {
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract(format!("{name} contains NaN/Inf")));
    }
    Ok(())
}

fn check_shapes<F: Real>(q: &Array3<F>, k: &Array3<F>, v: &Array3<F>) -> Result<()> {
    let (hq, _, dq) = q.dim();
    let (hk, nk, dk) = k.dim();
    let (hv, nv, dv) = v.dim();
    if dq == 0 {
        return Err(Error::contract("attention head dim must be positive"));
    }
    if hq != hk || hq != hv || dq != dk || dq != dv || nk != nv {
        return Err(Error::contract(format!(
            "attention shape mismatch: q {:?}, k {:?}, v {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    Ok(())
}

/// Row softmax with max subtraction, in place.
fn softmax_rows<F: Real>(scores: &mut Array2<F>) {
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let mut mx = F::neg_infinity();
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        let inv = F::one() / sum;
        row.mapv_inplace(|v| v * inv);
    }
}

/// Softmax attention per head: `A = softmax(QKᵀ/√d)`, `out = A·V`.
///
/// Returns both the aggregated output and the attention map; cross-attention
/// maps feed mask extraction downstream.
pub fn attention<F: Real>(
    q: &Array3<F>,
    k: &Array3<F>,
    v: &Array3<F>,
) -> Result<(Array3<F>, Array3<F>)> {
    attention_biased(q, k, v, None)
}

fn attention_biased<F: Real>(
    q: &Array3<F>,
    k: &Array3<F>,
    v: &Array3<F>,
    key_mask: Option<&[bool]>,
) -> Result<(Array3<F>, Array3<F>)> {
    check_shapes(q, k, v)?;
    check_finite("Q", q)?;
    check_finite("K", k)?;
    check_finite("V", v)?;
    let (h, n_q, d) = q.dim();
    let n_k = k.dim().1;
    if let Some(m) = key_mask {
        debug_assert_eq!(m.len(), n_k);
    }
    let scale = F::c(1.0 / (d as f64).sqrt());
    let bias = F::c(MASK_BIAS);
    let mut out = Array3::zeros((h, n_q, d));
    let mut maps = Array3::zeros((h, n_q, n_k));
    for hi in 0..h {
        let qh = q.index_axis(Axis(0), hi);
        let kh = k.index_axis(Axis(0), hi);
        let vh = v.index_axis(Axis(0), hi);
        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|s| s * scale);
        if let Some(m) = key_mask {
            for mut row in scores.axis_iter_mut(Axis(0)) {
                for (j, keep) in m.iter().enumerate() {
                    if !keep {
                        row[j] += bias;
                    }
                }
            }
        }
        softmax_rows(&mut scores);
        out.index_axis_mut(Axis(0), hi).assign(&scores.dot(&vh));
        maps.index_axis_mut(Axis(0), hi).assign(&scores);
    }
    Ok((out, maps))
}

/// Result of [`masked_attention`]: `fell_back` reports the all-zero-mask
/// degenerate case where plain attention was used instead.
#[derive(Debug)]
pub struct MaskedAttention<F> {
    pub out: Array3<F>,
    pub fell_back: bool,
}

/// Attention restricted to keys where `key_mask` is true, via a large
/// negative score bias. An all-false mask falls back to unmasked attention
/// (an empty softmax would be NaN).
pub fn masked_attention<F: Real>(
    q: &Array3<F>,
    k: &Array3<F>,
    v: &Array3<F>,
    key_mask: &[bool],
) -> Result<MaskedAttention<F>> {
    if key_mask.len() != k.dim().1 {
        return Err(Error::contract(format!(
            "key mask length {} does not match key count {}",
            key_mask.len(),
            k.dim().1
        )));
    }
    if key_mask.iter().all(|&m| !m) {
        let (out, _) = attention(q, k, v)?;
        return Ok(MaskedAttention {
            out,
            fell_back: true,
        });
    }
    // No bias rows are touched when every key is kept, so an all-true mask
    // is bit-identical to plain attention.
    let (out, _) = attention_biased(q, k, v, Some(key_mask))?;
    Ok(MaskedAttention {
        out,
        fell_back: false,
    })
}

/// Backward of [`attention`] given the output cotangent; recomputes the
/// attention map internally. Returns `(dq, dk, dv)`.
pub fn attention_bwd<F: Real>(
    q: &Array3<F>,
    k: &Array3<F>,
    v: &Array3<F>,
    d_out: &Array3<F>,
) -> (Array3<F>, Array3<F>, Array3<F>) {
    let (h, n_q, d) = q.dim();
    let n_k = k.dim().1;
    let scale = F::c(1.0 / (d as f64).sqrt());
    let mut dq = Array3::zeros((h, n_q, d));
    let mut dk = Array3::zeros((h, n_k, d));
    let mut dv = Array3::zeros((h, n_k, d));
    for hi in 0..h {
        let qh = q.index_axis(Axis(0), hi);
        let kh = k.index_axis(Axis(0), hi);
        let vh = v.index_axis(Axis(0), hi);
        let dyh = d_out.index_axis(Axis(0), hi);
        let mut a = qh.dot(&kh.t());
        a.mapv_inplace(|s| s * scale);
        softmax_rows(&mut a);
        // dV = Aᵀ·dy, dA = dy·Vᵀ
        dv.index_axis_mut(Axis(0), hi).assign(&a.t().dot(&dyh));
        let da = dyh.dot(&vh.t());
        // softmax backward per row: ds = a ∘ (da − ⟨da, a⟩)
        let mut ds = da;
        for (mut ds_row, a_row) in ds.axis_iter_mut(Axis(0)).zip(a.axis_iter(Axis(0))) {
            let dot = ds_row
                .iter()
                .zip(a_row.iter())
                .fold(F::zero(), |acc, (&x, &y)| acc + x * y);
            for (dsv, &av) in ds_row.iter_mut().zip(a_row.iter()) {
                *dsv = av * (*dsv - dot);
            }
        }
        ds.mapv_inplace(|s| s * scale);
        dq.index_axis_mut(Axis(0), hi).assign(&ds.dot(&kh));
        dk.index_axis_mut(Axis(0), hi).assign(&ds.t().dot(&qh));
    }
    (dq, dk, dv)
}
