//! Browser bindings. Each exported function returns a JSON string; the Rust
//! functions underneath are plain and tested natively.

use prefixprop::attention::{
    build_mask, kernel_decomposed_attention, lambda_weights, prefix_propagation_attention, Alpha, AttentionConfig,
    AttentionMask, LayerWeights, Window,
};
use prefixprop::calibration::{ece, PredictionRecord};
use prefixprop::rng::SplitMix64;
use prefixprop::{Result, Tensor};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
pub struct MaskView {
    pub size: usize,
    pub prefix_len: usize,
    /// Row-major allow matrix for propagation (`size x size`).
    pub allow: Vec<u8>,
    /// Allowed keys per query row.
    pub row_counts: Vec<usize>,
}

/// Sliding-window mask over `prefix_len` prefixes plus `seq_len` tokens,
/// with `[CLS]` (token 0) global. `window == 0` means full attention.
pub fn mask_view(prefix_len: usize, seq_len: usize, window: usize) -> Result<MaskView> {
    let cfg = AttentionConfig {
        d_model: 4,
        n_heads: 1,
        prefix_len,
        window: if window == 0 { Window::Full } else { Window::Size(window) },
        global_positions: vec![0],
    };
    let mask = build_mask(&cfg, seq_len)?;
    let size = prefix_len + seq_len;
    Ok(MaskView {
        size,
        prefix_len,
        allow: mask.as_slice().iter().map(|&a| u8::from(a)).collect(),
        row_counts: (0..size).map(|i| (0..size).filter(|&j| mask.allowed(i, j)).count()).collect(),
    })
}

#[derive(Serialize)]
pub struct KernelView {
    pub n_rows: usize,
    pub n_heads: usize,
    /// Prefix weight per head and query row under the chosen alpha, row-major.
    pub lambda: Vec<f64>,
    /// Max elementwise difference between the kernel route and dense attention.
    pub max_error: f64,
}

/// Random layer, prefixes and tokens from `seed`; decomposes attention over
/// `cat(P, C)`. `alpha <= 0` selects the exact weighting.
pub fn kernel_view(seed: u64, prefix_len: usize, seq_len: usize, d_model: usize, n_heads: usize, alpha: f64) -> Result<KernelView> {
    let cfg = AttentionConfig {
        d_model,
        n_heads,
        prefix_len,
        window: Window::Full,
        global_positions: vec![0],
    };
    let mut rng = SplitMix64::new(seed);
    let w = LayerWeights::random(d_model, 2 * d_model, &mut rng);
    let mut draw = |rows: usize| {
        Tensor::matrix(rows, d_model, (0..rows * d_model).map(|_| rng.normal()).collect())
    };
    let p = draw(prefix_len)?;
    let c = draw(seq_len)?;
    let d = Tensor::concat_rows(&[&p, &c])?;
    let n = prefix_len + seq_len;
    let a = if alpha > 0.0 { Alpha::Scale(alpha) } else { Alpha::Exact };
    let kern = kernel_decomposed_attention(&d, &p, &c, &w, &cfg, a)?;
    let dense = prefix_propagation_attention(&d, &w, &AttentionMask::full(n, n), &cfg)?;
    let weights = lambda_weights(&d, &p, &c, &w, &cfg)?;
    let scale = if alpha > 0.0 { alpha } else { 1.0 };
    let lambda = weights
        .lambda
        .data()
        .iter()
        .map(|&l| scale * l / (scale * l + (1.0 - l)))
        .collect();
    Ok(KernelView {
        n_rows: n,
        n_heads,
        lambda,
        max_error: kern.max_abs_diff(&dense),
    })
}

/// Synthetic predictions whose true accuracy is `skill` times the stated
/// confidence (skill 1 is perfectly calibrated), summarised into bins.
pub fn calibration_view(seed: u64, n: usize, skill: f64, n_bins: usize) -> Result<prefixprop::calibration::CalibrationReport> {
    let mut rng = SplitMix64::new(seed);
    let records: Vec<PredictionRecord> = (0..n)
        .map(|_| {
            let confidence = 0.25 + 0.75 * rng.uniform();
            let correct = rng.uniform() < (skill * confidence).clamp(0.0, 1.0);
            PredictionRecord {
                confidence,
                predicted: 0,
                label: usize::from(!correct),
            }
        })
        .collect();
    ece(&records, n_bins)
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
        .and_then(|v| serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string())))
}

#[wasm_bindgen(js_name = maskGrid)]
pub fn mask_grid(prefix_len: usize, seq_len: usize, window: usize) -> std::result::Result<String, JsValue> {
    to_js(mask_view(prefix_len, seq_len, window))
}

#[wasm_bindgen(js_name = kernelDecomposition)]
pub fn kernel_decomposition(
    seed: u32,
    prefix_len: usize,
    seq_len: usize,
    d_model: usize,
    n_heads: usize,
    alpha: f64,
) -> std::result::Result<String, JsValue> {
    to_js(kernel_view(u64::from(seed), prefix_len, seq_len, d_model, n_heads, alpha))
}

#[wasm_bindgen(js_name = reliability)]
pub fn reliability(seed: u32, n: usize, skill: f64, n_bins: usize) -> std::result::Result<String, JsValue> {
    to_js(calibration_view(u64::from(seed), n, skill, n_bins))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_rows_match_window() {
        let v = mask_view(2, 8, 1).unwrap();
        assert_eq!(v.size, 10);
        assert_eq!(v.allow.len(), 100);
        // Prefixes and CLS see everything.
        assert_eq!(&v.row_counts[..3], &[10, 10, 10]);
        // A middle token sees prefixes, CLS and its neighbours.
        assert_eq!(v.row_counts[6], 2 + 1 + 3);
        assert_eq!(mask_view(2, 8, 0).unwrap().row_counts, vec![10; 10]);
    }

    #[test]
    fn exact_kernel_matches_dense() {
        let v = kernel_view(3, 2, 6, 8, 2, 0.0).unwrap();
        assert!(v.max_error < 1e-10);
        assert_eq!(v.lambda.len(), 2 * 8);
        assert!(v.lambda.iter().all(|&l| l > 0.0 && l < 1.0));
        let scaled = kernel_view(3, 2, 6, 8, 2, 4.0).unwrap();
        assert!(scaled.max_error > 1e-6);
        assert!(scaled.lambda.iter().zip(&v.lambda).all(|(s, e)| s > e));
    }

    #[test]
    fn calibration_skill_moves_ece() {
        let good = calibration_view(1, 4000, 1.0, 10).unwrap();
        let bad = calibration_view(1, 4000, 0.6, 10).unwrap();
        assert!(good.ece < 0.05, "{}", good.ece);
        assert!(bad.ece > 0.2, "{}", bad.ece);
        assert!(mask_grid(1, 4, 1).unwrap().contains("\"size\":5"));
    }
}
