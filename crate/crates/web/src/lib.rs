//! wasm-bindgen bindings for the browser demo in `www/`.
//!
//! Each exported function is a thin wrapper over a plain Rust function of
//! the same name (suffix `_impl`) so the logic is testable natively.

use wasm_bindgen::prelude::*;
use xforge::attribution::{AttributionMap, PatchPartition};
use xforge::data::{generate_shapes, ShapesConfig};
use xforge::fusion::weights_from_metrics;
use xforge::metrics::{complexity, kruskal_wallis};
use xforge::report::{render_heatmap, HeatmapRender};
use xforge::Tensor;

type Res<T> = Result<T, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// One procedural shape image as (3, size, size) floats in [0, 1].
pub fn shape_pixels(class: u32, size: u32, seed: u64) -> Res<Tensor> {
    let cfg = ShapesConfig {
        image_size: size as usize,
        classes: 3,
        per_class: 1,
        noise: 0.05,
        seed,
    };
    let split = generate_shapes(&cfg).map_err(err)?;
    split
        .train
        .iter()
        .chain(&split.validation)
        .chain(&split.test)
        .find(|r| r.label == class as usize)
        .map(|r| r.pixels.clone())
        .ok_or_else(|| format!("class {class} must be 0 (square), 1 (disc) or 2 (triangle)"))
}

pub fn shape_rgba_impl(class: u32, size: u32, seed: u64) -> Res<Vec<u8>> {
    let px = shape_pixels(class, size, seed)?;
    let n = (size * size) as usize;
    let d = px.data();
    let mut out = Vec::with_capacity(4 * n);
    for i in 0..n {
        for c in 0..3 {
            out.push((d[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    Ok(out)
}

/// Luminance of a shape image, used as a stand-in attribution map.
fn luminance(class: u32, size: u32, seed: u64) -> Res<AttributionMap> {
    let px = shape_pixels(class, size, seed)?;
    let n = (size * size) as usize;
    let lum: Vec<f32> = (0..n)
        .map(|i| (0..3).map(|c| px.data()[c * n + i]).sum::<f32>() / 3.0)
        .collect();
    let t = Tensor::new([size as usize, size as usize], lum).map_err(err)?;
    AttributionMap::publish("luminance", class as usize, t).map_err(err)
}

/// PNG heatmap of the shape's luminance with the top-fraction mask, and
/// the map's complexity on a `grid`×`grid` partition.
pub fn shape_heatmap_impl(class: u32, size: u32, seed: u64, top_fraction: f64, grid: u32) -> Res<(Vec<u8>, f64)> {
    let map = luminance(class, size, seed)?;
    let part = PatchPartition::new(grid as usize, grid as usize, size as usize, size as usize).map_err(err)?;
    let render = HeatmapRender {
        top_fraction,
        scale: 8,
        ..Default::default()
    };
    let png = render_heatmap(&map, &render, &part, None).map_err(err)?;
    let c = complexity(&map.scores, &part).map_err(err)?;
    Ok((png.png, c))
}

pub fn fusion_weights_impl(faithfulness: &[f64], complexity: &[f64], l1: f64, l2: f64) -> Res<Vec<f64>> {
    let names = (0..faithfulness.len()).map(|i| format!("m{i}")).collect();
    let w = weights_from_metrics(names, faithfulness.to_vec(), complexity.to_vec(), l1, l2).map_err(err)?;
    Ok(w.weights)
}

/// `[H, df, p]` for observations split into consecutive groups.
pub fn kruskal_wallis_impl(values: &[f64], group_sizes: &[u32]) -> Res<Vec<f64>> {
    if group_sizes.iter().map(|&g| g as usize).sum::<usize>() != values.len() {
        return Err("group sizes must add up to the number of values".into());
    }
    let mut groups = Vec::new();
    let mut at = 0;
    for (i, &g) in group_sizes.iter().enumerate() {
        groups.push((format!("g{i}"), values[at..at + g as usize].to_vec()));
        at += g as usize;
    }
    let r = kruskal_wallis(&groups).map_err(err)?;
    Ok(vec![r.statistic, r.degrees_of_freedom as f64, r.p_value])
}

/// RGBA pixels of a procedural shape.
#[wasm_bindgen]
pub fn shape_rgba(class: u32, size: u32, seed: u64) -> Result<Vec<u8>, JsError> {
    shape_rgba_impl(class, size, seed).map_err(|e| JsError::new(&e))
}

/// Heatmap PNG bytes of the shape's luminance.
#[wasm_bindgen]
pub fn shape_heatmap_png(class: u32, size: u32, seed: u64, top_fraction: f64, grid: u32) -> Result<Vec<u8>, JsError> {
    shape_heatmap_impl(class, size, seed, top_fraction, grid)
        .map(|r| r.0)
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn shape_complexity(class: u32, size: u32, seed: u64, grid: u32) -> Result<f64, JsError> {
    shape_heatmap_impl(class, size, seed, 1.0, grid)
        .map(|r| r.1)
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn fusion_weights(faithfulness: &[f64], complexity: &[f64], l1: f64, l2: f64) -> Result<Vec<f64>, JsError> {
    fusion_weights_impl(faithfulness, complexity, l1, l2).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn kruskal_wallis_test(values: &[f64], group_sizes: &[u32]) -> Result<Vec<f64>, JsError> {
    kruskal_wallis_impl(values, group_sizes).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_is_rgba_and_deterministic() {
        let a = shape_rgba_impl(1, 32, 5).unwrap();
        assert_eq!(a.len(), 32 * 32 * 4);
        assert_eq!(a, shape_rgba_impl(1, 32, 5).unwrap());
        assert!(shape_rgba_impl(3, 32, 5).is_err());
    }

    #[test]
    fn heatmap_png_and_complexity() {
        let (png, c) = shape_heatmap_impl(0, 32, 1, 0.1, 8).unwrap();
        assert_eq!(&png[1..4], b"PNG");
        assert!(c > 0.0 && c <= 64f64.ln() + 1e-9);
        assert!(shape_heatmap_impl(0, 32, 1, 0.0, 8).is_err());
    }

    #[test]
    fn weights_and_test() {
        let w = fusion_weights_impl(&[0.1, 0.9], &[3.0, 1.0], 0.6, 0.4).unwrap();
        assert_eq!(w, vec![0.0, 1.0]);
        let r = kruskal_wallis_impl(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 3]).unwrap();
        assert!((r[0] - 27.0 / 7.0).abs() < 1e-12);
        assert!(kruskal_wallis_impl(&[1.0], &[2]).is_err());
    }
}
