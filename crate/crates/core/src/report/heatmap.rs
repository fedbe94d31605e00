//! Heatmap rendering to PNG with optional top-fraction masks.

use crate::attribution::{AttributionMap, PatchPartition};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapRender {
    /// Fraction of features kept by the mask; 1 disables masking.
    pub top_fraction: f64,
    /// Mask individual pixels instead of partition features.
    pub pixel_mask: bool,
    /// Blend the colormap with a grayscale copy of the input image.
    pub overlay: bool,
    /// Integer upscaling factor of the output image.
    pub scale: usize,
}

impl Default for HeatmapRender {
    fn default() -> Self {
        HeatmapRender {
            top_fraction: 1.0,
            pixel_mask: false,
            overlay: false,
            scale: 4,
        }
    }
}

impl HeatmapRender {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::invalid(format!("top fraction {} must lie in (0, 1]", self.top_fraction)));
        }
        if self.scale == 0 || self.scale > 64 {
            return Err(Error::invalid(format!("scale {} must lie in 1..=64", self.scale)));
        }
        Ok(())
    }
}

/// Rendered PNG plus whether the map was constant.
#[derive(Clone, Debug)]
pub struct RenderedHeatmap {
    pub png: Vec<u8>,
    pub width: usize,
    pub height: usize,
    pub uniform: bool,
}

/// Blue (t = 0) to red (t = 1) through white.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 {
        let s = 2.0 * t;
        (s, s, 1.0)
    } else {
        let s = 2.0 * (1.0 - t);
        (1.0, s, s)
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Indices of the `ceil(q·n)` largest values; ties go to the lower index.
pub fn top_indices(values: &[f64], q: f64) -> Vec<usize> {
    let keep = ((q * values.len() as f64).ceil() as usize).min(values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    order
}

/// Per-pixel keep mask for the render settings.
pub fn top_mask(map: &Tensor, partition: &PatchPartition, render: &HeatmapRender) -> Result<Vec<bool>> {
    if render.top_fraction >= 1.0 {
        return Ok(vec![true; map.len()]);
    }
    if render.pixel_mask {
        let v: Vec<f64> = map.data().iter().map(|&x| x as f64).collect();
        let mut keep = vec![false; v.len()];
        for i in top_indices(&v, render.top_fraction) {
            keep[i] = true;
        }
        return Ok(keep);
    }
    let agg = partition.aggregate(map)?;
    let mut features = vec![false; agg.len()];
    for i in top_indices(&agg, render.top_fraction) {
        features[i] = true;
    }
    Ok(partition.assignment().iter().map(|&f| features[f]).collect())
}

/// Min-max normalizes and colormaps `map`; masked pixels are drawn black.
/// `input` is a (c, h, w) image used for overlays.
pub fn render_heatmap(
    map: &AttributionMap,
    render: &HeatmapRender,
    partition: &PatchPartition,
    input: Option<&Tensor>,
) -> Result<RenderedHeatmap> {
    render.validate()?;
    let scores = &map.scores;
    if !scores.all_finite() {
        return Err(Error::NonFinite("heatmap input".into()));
    }
    let (h, w) = (map.height(), map.width());
    if partition.image_size() != (h, w) {
        return Err(Error::shape(
            "render_heatmap",
            format!("partition covers {:?}, map is {h}x{w}", partition.image_size()),
        ));
    }
    let (lo, hi) = (scores.min() as f64, scores.max() as f64);
    let uniform = !(hi > lo);
    if uniform {
        log::warn!("{} map is constant; rendering a uniform mid-color image", map.method);
    }
    let keep = if uniform {
        vec![true; scores.len()]
    } else {
        top_mask(scores, partition, render)?
    };
    let gray = match (render.overlay, input) {
        (true, Some(img)) => Some(grayscale(img, h, w)?),
        (true, None) => return Err(Error::invalid("overlay requested without an input image")),
        _ => None,
    };
    let s = render.scale;
    let (ow, oh) = (w * s, h * s);
    let mut rgb = vec![0u8; ow * oh * 3];
    for y in 0..oh {
        for x in 0..ow {
            let i = (y / s) * w + x / s;
            let mut c = if !keep[i] {
                [0, 0, 0]
            } else if uniform {
                colormap(0.5)
            } else {
                colormap((scores.data()[i] as f64 - lo) / (hi - lo))
            };
            if let Some(g) = &gray {
                let v = g[i];
                for ch in &mut c {
                    *ch = ((*ch as f64 + v * 255.0) / 2.0).round() as u8;
                }
            }
            rgb[(y * ow + x) * 3..(y * ow + x) * 3 + 3].copy_from_slice(&c);
        }
    }
    Ok(RenderedHeatmap {
        png: encode_png(&rgb, ow, oh)?,
        width: ow,
        height: oh,
        uniform,
    })
}

fn grayscale(img: &Tensor, h: usize, w: usize) -> Result<Vec<f64>> {
    let s = img.shape();
    if s.len() != 3 || s[1] != h || s[2] != w {
        return Err(Error::shape("render_heatmap", format!("input {s:?} vs map {h}x{w}")));
    }
    let mut g = vec![0.0; h * w];
    for c in 0..s[0] {
        for (a, &v) in g.iter_mut().zip(&img.data()[c * h * w..(c + 1) * h * w]) {
            *a += v as f64 / s[0] as f64;
        }
    }
    Ok(crate::metrics::min_max_normalize(&g))
}

fn encode_png(rgb: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let png_err = |e: png::EncodingError| Error::format("PNG", e.to_string());
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(rgb).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(out)
}
