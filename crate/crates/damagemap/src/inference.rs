//! Applying a trained model to arbitrary pre/post image pairs.
//!
//! Tiles at the training resolution are classified directly; larger scenes
//! are covered by a sliding [`TilingPlan`] whose overlapping window logits
//! are fused by per-pixel mean before the final argmax. Class masks can be
//! rendered over the post image as a color overlay for visual inspection.
//!
//! Scene-level fusion uses logit means rather than mask voting: means give a
//! well-defined tie-break and smoother window seams. At argmax, ties resolve
//! to the lowest class index, which biases exact ties toward background — the
//! conservative choice for damage alerts.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::model::{Model, Phase, Session};
use crate::schema::DamageClass;
use crate::tensor::Scalar;

/// Default overlay colors for damage classes 1–4, chosen from the Okabe–Ito
/// colorblind-safe set. Hex: `#E69F00`, `#56B4E9`, `#D55E00`, `#CC79A7`.
pub const PALETTE: [[u8; 3]; 4] = [
    [0xE6, 0x9F, 0x00], // 1 partial_roof_damage: orange
    [0x56, 0xB4, 0xE9], // 2 total_roof_damage: sky blue
    [0xD5, 0x5E, 0x00], // 3 partial_structural_collapse: vermillion
    [0xCC, 0x79, 0xA7], // 4 total_structural_collapse: reddish purple
];

/// Default blend weight of the palette color over the post image.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Default sliding-window stride for scene-sized inputs.
pub const DEFAULT_STRIDE: usize = 256;

/// How damage classes are colored when rendering an overlay.
///
/// Background stays transparent (the post image shows through unchanged);
/// each damage class blends its palette color over the post pixel with
/// weight `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlaySpec {
    /// RGB color per damage class (classes 1–4; background has none).
    pub palette: BTreeMap<DamageClass, [u8; 3]>,
    /// Blend weight of the palette color, in `(0, 1]`.
    pub alpha: f64,
}

impl Default for OverlaySpec {
    fn default() -> Self {
        let palette = DamageClass::DAMAGE
            .iter()
            .zip(PALETTE.iter())
            .map(|(&class, &rgb)| (class, rgb))
            .collect();
        OverlaySpec { palette, alpha: DEFAULT_ALPHA }
    }
}

impl OverlaySpec {
    /// Checks that every damage class has a color, that the four colors are
    /// pairwise distinct, and that `alpha` lies in `(0, 1]`.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "overlay alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        for class in DamageClass::DAMAGE {
            if !self.palette.contains_key(&class) {
                return Err(Error::Config(format!("overlay palette missing {class}")));
            }
        }
        let colors: Vec<[u8; 3]> = self.palette.values().copied().collect();
        for i in 0..colors.len() {
            for j in i + 1..colors.len() {
                if colors[i] == colors[j] {
                    return Err(Error::Config(format!(
                        "overlay palette colors must be distinct, {:?} appears twice",
                        colors[i]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Sliding-window positions covering a scene.
///
/// Rows and columns start at 0 and advance by `stride`; the final position
/// on each axis is clamped to `extent − window` so the scene edge is always
/// covered. Every pixel therefore falls inside at least one window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilingPlan {
    pub scene_h: usize,
    pub scene_w: usize,
    pub window: usize,
    pub stride: usize,
    /// `(row, col)` of each window's top-left corner, row-major.
    pub positions: Vec<(usize, usize)>,
}

fn axis_positions(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = extent - window;
    let mut out = Vec::new();
    let mut p = 0;
    while p < last {
        out.push(p);
        p += stride;
    }
    out.push(last);
    out
}

impl TilingPlan {
    pub fn new(scene_h: usize, scene_w: usize, window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 {
            return Err(Error::InvalidInput(
                "window and stride must be positive".into(),
            ));
        }
        if stride > window {
            return Err(Error::InvalidInput(format!(
                "stride {stride} exceeds window {window}; gaps between windows would \
                 leave pixels unpredicted"
            )));
        }
        if scene_h < window || scene_w < window {
            return Err(Error::InvalidInput(format!(
                "scene {scene_h}x{scene_w} is smaller than the {window}-pixel window; \
                 pad the scene to at least window size before predicting"
            )));
        }
        let rows = axis_positions(scene_h, window, stride);
        let cols = axis_positions(scene_w, window, stride);
        let mut positions = Vec::with_capacity(rows.len() * cols.len());
        for &r in &rows {
            for &c in &cols {
                positions.push((r, c));
            }
        }
        Ok(TilingPlan { scene_h, scene_w, window, stride, positions })
    }
}

/// Per-pixel argmax over the class axis of a `(B, C, H, W)` logit array.
///
/// Ties resolve to the lowest class index.
pub fn argmax_classes<S: Scalar>(logits: &ArrayD<S>) -> Result<Array3<u8>> {
    let shape = logits.shape();
    if shape.len() != 4 {
        return Err(Error::InvalidInput(format!(
            "expected (B, C, H, W) logits, got shape {shape:?}"
        )));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if c == 0 || c > u8::MAX as usize + 1 {
        return Err(Error::InvalidInput(format!(
            "class axis of length {c} cannot index a u8 mask"
        )));
    }
    let logits = logits.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let mut mask = Array3::<u8>::zeros((b, h, w));
    for bi in 0..b {
        for r in 0..h {
            for col in 0..w {
                let mut best = 0usize;
                let mut best_v = logits[(bi, 0, r, col)];
                for ch in 1..c {
                    let v = logits[(bi, ch, r, col)];
                    if v > best_v {
                        best_v = v;
                        best = ch;
                    }
                }
                mask[(bi, r, col)] = best as u8;
            }
        }
    }
    Ok(mask)
}

fn check_tile_shape(model: &Model<f32>, name: &str, image: &ArrayView3<f32>) -> Result<()> {
    let cfg = model.config();
    let want = (cfg.in_channels, cfg.input_side, cfg.input_side);
    if image.dim() != want {
        return Err(Error::Config(format!(
            "{name} image shape {:?} does not match the checkpoint's expected {:?}",
            image.dim(),
            want
        )));
    }
    Ok(())
}

/// Runs one normalized pre/post tile through the model and returns the raw
/// `(num_classes, S, S)` logits.
pub fn tile_logits(
    model: &Model<f32>,
    pre: ArrayView3<f32>,
    post: ArrayView3<f32>,
) -> Result<Array3<f32>> {
    check_tile_shape(model, "pre", &pre)?;
    check_tile_shape(model, "post", &post)?;
    let mut session = Session::new(model, Phase::Eval, false);
    let pre = pre.to_owned().insert_axis(Axis(0)).into_dyn();
    let post = post.to_owned().insert_axis(Axis(0)).into_dyn();
    let pass = session.forward(pre, post)?;
    let logits = session.tape.value(pass.logits);
    Ok(logits
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
        .index_axis(Axis(0), 0)
        .to_owned())
}

/// Classifies one normalized tile at the model's native resolution.
pub fn predict_tile(
    model: &Model<f32>,
    pre: ArrayView3<f32>,
    post: ArrayView3<f32>,
) -> Result<Array2<u8>> {
    let logits = tile_logits(model, pre, post)?;
    let mask = argmax_classes(&logits.insert_axis(Axis(0)).into_dyn())?;
    Ok(mask.index_axis(Axis(0), 0).to_owned())
}

/// Classifies a scene at least as large as the model's input tile.
///
/// Each plan window is predicted independently; logits are summed per pixel,
/// divided by the pixel's coverage count, and the mean logits are argmaxed.
/// Overlapping windows therefore vote with their full confidence rather than
/// a hard label.
pub fn predict_scene(
    model: &Model<f32>,
    pre_scene: ArrayView3<f32>,
    post_scene: ArrayView3<f32>,
    plan: &TilingPlan,
) -> Result<Array2<u8>> {
    let cfg = model.config();
    if plan.window != cfg.input_side {
        return Err(Error::Config(format!(
            "plan window {} does not match the checkpoint's tile size {}",
            plan.window, cfg.input_side
        )));
    }
    let want = (cfg.in_channels, plan.scene_h, plan.scene_w);
    if pre_scene.dim() != want || post_scene.dim() != want {
        return Err(Error::InvalidInput(format!(
            "scene shapes {:?}/{:?} do not match the plan's {:?}",
            pre_scene.dim(),
            post_scene.dim(),
            want
        )));
    }
    let mut sum = Array3::<f64>::zeros((cfg.num_classes, plan.scene_h, plan.scene_w));
    let mut count = Array2::<f64>::zeros((plan.scene_h, plan.scene_w));
    let s = plan.window;
    for &(r, c) in &plan.positions {
        let pre = pre_scene.slice(ndarray::s![.., r..r + s, c..c + s]);
        let post = post_scene.slice(ndarray::s![.., r..r + s, c..c + s]);
        let logits = tile_logits(model, pre, post)?;
        for ch in 0..cfg.num_classes {
            for wr in 0..s {
                for wc in 0..s {
                    sum[(ch, r + wr, c + wc)] += f64::from(logits[(ch, wr, wc)]);
                }
            }
        }
        for wr in 0..s {
            for wc in 0..s {
                count[(r + wr, c + wc)] += 1.0;
            }
        }
    }
    let mut mean = sum;
    for ch in 0..cfg.num_classes {
        for r in 0..plan.scene_h {
            for c in 0..plan.scene_w {
                mean[(ch, r, c)] /= count[(r, c)];
            }
        }
    }
    let mask = argmax_classes(&mean.insert_axis(Axis(0)).into_dyn())?;
    Ok(mask.index_axis(Axis(0), 0).to_owned())
}

/// Blends the palette over damage pixels of the post image.
///
/// The post image is first converted to 8-bit; damage pixels then become
/// `round(alpha·color + (1−alpha)·base)` per channel (round half up), and
/// background pixels keep their exact post bytes.
pub fn render_overlay(
    post: ArrayView3<f32>,
    mask: ArrayView2<u8>,
    spec: &OverlaySpec,
) -> Result<Array3<u8>> {
    spec.validate()?;
    let (ch, h, w) = post.dim();
    if ch != 3 {
        return Err(Error::InvalidInput(format!(
            "overlay expects a 3-channel post image, got {ch}"
        )));
    }
    if mask.dim() != (h, w) {
        return Err(Error::InvalidInput(format!(
            "mask {:?} does not match image {h}x{w}",
            mask.dim()
        )));
    }
    let mut out = Array3::<u8>::zeros((3, h, w));
    for r in 0..h {
        for c in 0..w {
            let class = DamageClass::from_id(mask[(r, c)]).map_err(|_| {
                Error::InvalidInput(format!(
                    "mask value {} at ({r}, {c}) is not a known class id",
                    mask[(r, c)]
                ))
            })?;
            let color = spec.palette.get(&class);
            for k in 0..3 {
                let base = crate::schema::to_u8(post[(k, r, c)]);
                out[(k, r, c)] = match color {
                    // Background: the post pixel shows through untouched.
                    None => base,
                    Some(rgb) => {
                        let blended = spec.alpha * f64::from(rgb[k])
                            + (1.0 - spec.alpha) * f64::from(base);
                        blended.round() as u8
                    }
                };
            }
        }
    }
    Ok(out)
}

/// Writes a `(3, H, W)` 8-bit image as a PNG.
pub fn write_rgb8_png(path: &Path, image: &Array3<u8>) -> Result<()> {
    let (ch, h, w) = image.dim();
    if ch != 3 || h == 0 || w == 0 {
        return Err(Error::InvalidInput(format!(
            "expected a non-empty (3, H, W) image, got {:?}",
            image.dim()
        )));
    }
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            out.put_pixel(
                c as u32,
                r as u32,
                image::Rgb([image[(0, r, c)], image[(1, r, c)], image[(2, r, c)]]),
            );
        }
    }
    out.save(path).map_err(|e| {
        Error::format(path, format!("png encode failed: {e}"))
    })
}

/// Pixel count per class over a mask (all five classes always present).
pub fn class_counts(mask: ArrayView2<u8>) -> Result<BTreeMap<DamageClass, u64>> {
    let mut counts: BTreeMap<DamageClass, u64> =
        DamageClass::ALL.iter().map(|&c| (c, 0)).collect();
    for &v in mask.iter() {
        let class = DamageClass::from_id(v)?;
        *counts.get_mut(&class).unwrap() += 1;
    }
    Ok(counts)
}

/// Renders the per-class pixel counts as the plain-text sidecar written next
/// to prediction outputs: one CSV-style line per class with its share of the
/// scene area.
pub fn format_class_counts(mask: ArrayView2<u8>) -> Result<String> {
    let counts = class_counts(mask)?;
    let total: u64 = counts.values().sum();
    let mut out = String::from("class,name,pixels,percent\n");
    for (class, n) in &counts {
        let pct = if total == 0 {
            0.0
        } else {
            100.0 * *n as f64 / total as f64
        };
        out.push_str(&format!("{},{},{},{:.2}\n", class.id(), class, n, pct));
    }
    Ok(out)
}
