//! Damage-class taxonomy, triplet data model, and class-weight derivation.
//!
//! Everything else in the crate speaks in terms of these types: the five-class
//! label space (background + four damage typologies), the aligned
//! pre/post/mask triplet, and the frequency-derived loss weights.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};

/// Number of output classes: background plus the four damage typologies.
pub const NUM_CLASSES: usize = 5;

/// One of the five per-pixel classes.
///
/// Ids are stable: 0 is always background, 1-4 are the damage typologies in
/// fixed order (least to most severe structural failure mode).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DamageClass {
    Background,
    PartialRoofDamage,
    TotalRoofDamage,
    PartialStructuralCollapse,
    TotalStructuralCollapse,
}

impl DamageClass {
    /// All five classes in id order.
    pub const ALL: [DamageClass; NUM_CLASSES] = [
        DamageClass::Background,
        DamageClass::PartialRoofDamage,
        DamageClass::TotalRoofDamage,
        DamageClass::PartialStructuralCollapse,
        DamageClass::TotalStructuralCollapse,
    ];

    /// The four damage typologies (ids 1-4), excluding background.
    pub const DAMAGE: [DamageClass; 4] = [
        DamageClass::PartialRoofDamage,
        DamageClass::TotalRoofDamage,
        DamageClass::PartialStructuralCollapse,
        DamageClass::TotalStructuralCollapse,
    ];

    pub fn id(self) -> u8 {
        match self {
            DamageClass::Background => 0,
            DamageClass::PartialRoofDamage => 1,
            DamageClass::TotalRoofDamage => 2,
            DamageClass::PartialStructuralCollapse => 3,
            DamageClass::TotalStructuralCollapse => 4,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("class id {id} out of range 0..{NUM_CLASSES}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            DamageClass::Background => "background",
            DamageClass::PartialRoofDamage => "partial_roof_damage",
            DamageClass::TotalRoofDamage => "total_roof_damage",
            DamageClass::PartialStructuralCollapse => "partial_structural_collapse",
            DamageClass::TotalStructuralCollapse => "total_structural_collapse",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown class name {name:?}")))
    }
}

impl fmt::Display for DamageClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An aligned (pre-disaster image, post-disaster image, damage mask) tile.
///
/// Images are channel-first `(3, H, W)` with values in `[0, 1]` (raw, not yet
/// normalized); the mask holds class ids. All three grids share H and W.
#[derive(Debug, Clone)]
pub struct ImageTriplet {
    pub id: String,
    pub pre: Array3<f32>,
    pub post: Array3<f32>,
    pub mask: Array2<u8>,
    /// Ground sampling distance in meters per pixel, when known.
    pub pixel_size_m: Option<f32>,
}

impl ImageTriplet {
    /// Checks the triplet invariants: matching shapes and in-range mask values.
    pub fn validate(&self) -> Result<()> {
        let (cp, hp, wp) = self.pre.dim();
        let (cq, hq, wq) = self.post.dim();
        let (hm, wm) = self.mask.dim();
        if cp != 3 || cq != 3 {
            return Err(Error::InvalidInput(format!(
                "triplet {}: images must have 3 channels (got {cp} and {cq})",
                self.id
            )));
        }
        if (hp, wp) != (hq, wq) || (hp, wp) != (hm, wm) {
            return Err(Error::InvalidInput(format!(
                "triplet {}: pre {hp}x{wp}, post {hq}x{wq}, mask {hm}x{wm} differ",
                self.id
            )));
        }
        let violations = validate_mask(self.mask.view(), NUM_CLASSES);
        if let Some((r, c, v)) = violations.first() {
            return Err(Error::InvalidInput(format!(
                "triplet {}: mask value {v} at ({r}, {c}) outside 0..{NUM_CLASSES} ({} violations total)",
                self.id,
                violations.len()
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.mask.dim().0
    }

    pub fn width(&self) -> usize {
        self.mask.dim().1
    }

    /// Set of damage classes with at least one labeled pixel.
    pub fn present_classes(&self) -> Vec<DamageClass> {
        let mut seen = [false; NUM_CLASSES];
        for &v in self.mask.iter() {
            if (v as usize) < NUM_CLASSES {
                seen[v as usize] = true;
            }
        }
        DamageClass::DAMAGE
            .iter()
            .copied()
            .filter(|c| seen[c.id() as usize])
            .collect()
    }
}

/// Per-class pixel/instance counts, frequency shares, and loss weights.
///
/// Weights follow the square-root inverse-frequency rule over the four damage
/// classes: `w_n = sqrt(1 / share_n)`. Background does not participate in the
/// frequency statistics; it carries a fixed conventional weight (1.0 unless
/// overridden) so the composite loss still penalizes false positives there.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassWeightTable {
    pub counts: BTreeMap<DamageClass, u64>,
    pub shares: BTreeMap<DamageClass, f64>,
    pub weights: BTreeMap<DamageClass, f64>,
    /// Weight applied to the background class in the composite loss.
    pub background_weight: f64,
}

impl ClassWeightTable {
    /// Loss weight for any of the five classes.
    pub fn weight_of(&self, class: DamageClass) -> f64 {
        if class == DamageClass::Background {
            self.background_weight
        } else {
            self.weights.get(&class).copied().unwrap_or(0.0)
        }
    }

    /// Equal-frequency table (every damage class weight = 2.0), useful as a
    /// neutral default when no dataset statistics are available.
    pub fn uniform() -> Self {
        let counts: BTreeMap<_, _> = DamageClass::DAMAGE.iter().map(|&c| (c, 1u64)).collect();
        compute_class_weights(&counts).expect("uniform counts are valid")
    }
}

/// Derives frequency shares and `sqrt(1/f)` weights from raw class counts.
///
/// Requires at least two classes with strictly positive counts. Shares are
/// computed from the raw counts (not from pre-rounded percentages) so rounding
/// error does not compound into the weights.
pub fn compute_class_weights(counts: &BTreeMap<DamageClass, u64>) -> Result<ClassWeightTable> {
    if counts.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need counts for at least two classes, got {}",
            counts.len()
        )));
    }
    for (&class, &count) in counts {
        if class == DamageClass::Background {
            return Err(Error::InvalidInput(
                "background is not frequency-weighted; provide damage-class counts only".into(),
            ));
        }
        if count == 0 {
            return Err(Error::InvalidInput(format!(
                "class {class} has zero count; weights are undefined"
            )));
        }
    }
    let total: u64 = counts.values().sum();
    let mut shares = BTreeMap::new();
    let mut weights = BTreeMap::new();
    for (&class, &count) in counts {
        let share = count as f64 / total as f64;
        shares.insert(class, share);
        weights.insert(class, (1.0 / share).sqrt());
    }
    Ok(ClassWeightTable {
        counts: counts.clone(),
        shares,
        weights,
        background_weight: 1.0,
    })
}

/// Scans a mask grid and reports every out-of-range value as
/// `(row, col, value)`. An empty result means the mask is valid.
pub fn validate_mask(mask: ArrayView2<'_, u8>, num_classes: usize) -> Vec<(usize, usize, u8)> {
    let mut violations = Vec::new();
    for ((r, c), &v) in mask.indexed_iter() {
        if v as usize >= num_classes {
            violations.push((r, c, v));
        }
    }
    violations
}

/// Writes a mask as a single-channel 8-bit PNG, pixel value = class id.
pub fn write_mask_png(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for ((r, c), &v) in mask.indexed_iter() {
        img.put_pixel(c as u32, r as u32, image::Luma([v]));
    }
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a single-channel 8-bit PNG mask. Values are returned as-is; call
/// [`validate_mask`] to check the class range.
pub fn read_mask_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::format(
                path,
                format!("expected 8-bit grayscale mask, got {:?}", other.color()),
            ))
        }
    };
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        gray.get_pixel(c as u32, r as u32).0[0]
    }))
}

/// Writes a `(3, H, W)` image with values in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_rgb_png(path: &Path, img: &Array3<f32>) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::InvalidInput(format!("expected 3 channels, got {c}")));
    }
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for cc in 0..w {
            let px = [
                to_u8(img[[0, r, cc]]),
                to_u8(img[[1, r, cc]]),
                to_u8(img[[2, r, cc]]),
            ];
            out.put_pixel(cc as u32, r as u32, image::Rgb(px));
        }
    }
    out.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads an 8-bit RGB PNG into a `(3, H, W)` grid scaled to `[0, 1]`.
pub fn read_rgb_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[ch, y as usize, x as usize]] = px.0[ch] as f32 / 255.0;
        }
    }
    Ok(out)
}

pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
