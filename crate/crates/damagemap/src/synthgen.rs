//! Deterministic synthetic triplet generator.
//!
//! Scenes are textured ground with non-overlapping rectangular "buildings";
//! the post image starts as an exact copy of the pre image and then applies
//! one class-keyed damage rendering per damaged building:
//!
//! - partial roof damage: dark patches over at most half of the roof,
//! - total roof damage: the roof tone replaced by a dark interior tone,
//! - partial structural collapse: one corner replaced by debris texture,
//! - total structural collapse: the whole footprint replaced by debris.
//!
//! The mask labels exactly the rewritten pixels, so background pixels are
//! bit-identical between pre and post and every labeled pixel differs by a
//! margin far above the texture noise. These are deliberate caricatures for
//! pipeline validation, not attempts at photorealism.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datapipe::{DatasetIndex, MANIFEST_FILE, MASK_DIR, POST_DIR, PRE_DIR};
use crate::error::{Error, Result};
use crate::schema::{write_mask_png, write_rgb_png, DamageClass, ImageTriplet};

/// Name of the reproducibility sidecar written next to generated datasets.
pub const PROVENANCE_FILE: &str = "provenance.json";

/// Parameters of one synthetic scene.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub side: usize,
    /// Number of buildings to place; 0 is the documented all-background
    /// surrogate (pre == post, empty mask).
    pub n_buildings: usize,
    /// Damage-class probabilities for each placed building; must sum to 1.
    pub class_mix: BTreeMap<DamageClass, f64>,
    /// Amplitude of the uniform per-pixel texture noise.
    pub texture_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            side: 128,
            n_buildings: 6,
            class_mix: DamageClass::DAMAGE.iter().map(|&c| (c, 0.25)).collect(),
            texture_noise: 0.02,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 16 {
            return Err(Error::Config(format!("side must be >= 16, got {}", self.side)));
        }
        if !(0.0..=0.05).contains(&self.texture_noise) {
            return Err(Error::Config(format!(
                "texture_noise must be in [0, 0.05], got {}",
                self.texture_noise
            )));
        }
        if self.class_mix.contains_key(&DamageClass::Background) {
            return Err(Error::Config("class_mix must not include background".into()));
        }
        let total: f64 = self.class_mix.values().sum();
        if self.class_mix.values().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "class_mix probabilities must be non-negative and sum to 1, got sum {total}"
            )));
        }
        Ok(())
    }
}

/// One placed building, as recorded in the generator's log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacedBuilding {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub class: DamageClass,
}

/// The generator's internal placement log; the mask can only contain
/// classes drawn here.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SceneLog {
    pub buildings: Vec<PlacedBuilding>,
}

fn overlaps(a: &PlacedBuilding, top: usize, left: usize, h: usize, w: usize) -> bool {
    // One-pixel separation margin so footprints never touch.
    let (at0, al0) = (a.top.saturating_sub(1), a.left.saturating_sub(1));
    let (at1, al1) = (a.top + a.height + 1, a.left + a.width + 1);
    top < at1 && top + h > at0 && left < al1 && left + w > al0
}

fn draw_class(mix: &BTreeMap<DamageClass, f64>, rng: &mut ChaCha8Rng) -> DamageClass {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (&class, &p) in mix {
        acc += p;
        if u < acc {
            return class;
        }
    }
    *mix.keys().next_back().expect("validated non-empty mix")
}

/// Fills `(3, H, W)` pixels of `region` with `tone + U(−noise, noise)`.
fn paint(
    image: &mut Array3<f32>,
    region: (usize, usize, usize, usize),
    tone: [f32; 3],
    noise: f64,
    rng: &mut ChaCha8Rng,
) {
    let (top, left, h, w) = region;
    for r in top..top + h {
        for c in left..left + w {
            for ch in 0..3 {
                let n = if noise > 0.0 { rng.gen_range(-noise..=noise) as f32 } else { 0.0 };
                image[[ch, r, c]] = tone[ch] + n;
            }
        }
    }
}

/// Gray debris value pushed to the opposite brightness band of the pre
/// pixel, so damaged pixels always differ from the pre image by ≥ 0.2.
fn debris_pixel(pre: &Array3<f32>, r: usize, c: usize, rng: &mut ChaCha8Rng) -> f32 {
    let mean = (pre[[0, r, c]] + pre[[1, r, c]] + pre[[2, r, c]]) / 3.0;
    let base = if mean > 0.5 { 0.12 } else { 0.72 };
    base + rng.gen_range(0.0..0.15f32)
}

/// Generates one triplet plus the placement log.
pub fn generate_logged(spec: &SceneSpec) -> Result<(ImageTriplet, SceneLog)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let side = spec.side;
    let noise = spec.texture_noise;

    // Textured ground.
    let mut pre = Array3::zeros((3, side, side));
    let ground = [0.18, 0.26, 0.14];
    paint(&mut pre, (0, 0, side, side), ground, noise, &mut rng);

    // Non-overlapping buildings with bright, per-channel roof tones.
    let mut log = SceneLog::default();
    let (min_dim, max_dim) = ((side / 8).max(4), (side / 4).max(6));
    for i in 0..spec.n_buildings {
        let mut placed = false;
        for _attempt in 0..200 {
            let h = rng.gen_range(min_dim..=max_dim);
            let w = rng.gen_range(min_dim..=max_dim);
            if h + 2 >= side || w + 2 >= side {
                continue;
            }
            let top = rng.gen_range(1..side - h - 1);
            let left = rng.gen_range(1..side - w - 1);
            if log.buildings.iter().any(|b| overlaps(b, top, left, h, w)) {
                continue;
            }
            let class = draw_class(&spec.class_mix, &mut rng);
            let tone = [
                rng.gen_range(0.5..0.9f32),
                rng.gen_range(0.5..0.9f32),
                rng.gen_range(0.5..0.9f32),
            ];
            paint(&mut pre, (top, left, h, w), tone, noise, &mut rng);
            log.buildings.push(PlacedBuilding { top, left, height: h, width: w, class });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place building {} of {} in a {side}x{side} scene without overlap; \
                 use fewer or smaller buildings",
                i + 1,
                spec.n_buildings
            )));
        }
    }

    // Post starts as an exact copy; damage renderings rewrite pixels and the
    // mask records exactly those pixels.
    let mut post = pre.clone();
    let mut mask = Array2::<u8>::zeros((side, side));
    for b in &log.buildings {
        let class_id = b.class.id();
        match b.class {
            DamageClass::Background => unreachable!("class_mix excludes background"),
            DamageClass::PartialRoofDamage => {
                // Dark patches over at most half of the roof, in 2x2 cells.
                let budget = b.height * b.width / 2;
                let mut spent = 0usize;
                let mut any = false;
                for pr in (0..b.height).step_by(2) {
                    for pc in (0..b.width).step_by(2) {
                        let cell_h = 2.min(b.height - pr);
                        let cell_w = 2.min(b.width - pc);
                        let cell = cell_h * cell_w;
                        let take = rng.gen_bool(0.4);
                        if (take || !any) && spent + cell <= budget {
                            for r in b.top + pr..b.top + pr + cell_h {
                                for c in b.left + pc..b.left + pc + cell_w {
                                    for ch in 0..3 {
                                        post[[ch, r, c]] = pre[[ch, r, c]] * 0.2;
                                    }
                                    mask[[r, c]] = class_id;
                                }
                            }
                            spent += cell;
                            any = true;
                        }
                    }
                }
            }
            DamageClass::TotalRoofDamage => {
                let interior = [0.30, 0.27, 0.24];
                let region = (b.top, b.left, b.height, b.width);
                paint(&mut post, region, interior, noise, &mut rng);
                for r in b.top..b.top + b.height {
                    for c in b.left..b.left + b.width {
                        mask[[r, c]] = class_id;
                    }
                }
            }
            DamageClass::PartialStructuralCollapse => {
                // One quadrant becomes debris.
                let (qh, qw) = ((b.height + 1) / 2, (b.width + 1) / 2);
                let corner = rng.gen_range(0..4u8);
                let (top, left) = match corner {
                    0 => (b.top, b.left),
                    1 => (b.top, b.left + b.width - qw),
                    2 => (b.top + b.height - qh, b.left),
                    _ => (b.top + b.height - qh, b.left + b.width - qw),
                };
                for r in top..top + qh {
                    for c in left..left + qw {
                        let g = debris_pixel(&pre, r, c, &mut rng);
                        for ch in 0..3 {
                            post[[ch, r, c]] = g;
                        }
                        mask[[r, c]] = class_id;
                    }
                }
            }
            DamageClass::TotalStructuralCollapse => {
                for r in b.top..b.top + b.height {
                    for c in b.left..b.left + b.width {
                        let g = debris_pixel(&pre, r, c, &mut rng);
                        for ch in 0..3 {
                            post[[ch, r, c]] = g;
                        }
                        mask[[r, c]] = class_id;
                    }
                }
            }
        }
    }

    let triplet = ImageTriplet {
        id: format!("synth{:016x}", spec.seed),
        pre,
        post,
        mask,
        pixel_size_m: None,
    };
    triplet.validate()?;
    Ok((triplet, log))
}

/// Generates one triplet; see [`generate_logged`] for the placement log.
pub fn generate(spec: &SceneSpec) -> Result<ImageTriplet> {
    Ok(generate_logged(spec)?.0)
}

/// Provenance sidecar recording how a generated dataset can be rebuilt.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    pub n: usize,
    pub base_seed: u64,
    pub template: SceneSpec,
}

/// Writes `n` triplets (ids `00000`, `00001`, …) in the datapipe layout,
/// plus a manifest and a provenance file. Scene `i` uses seed
/// `base_seed + i`, so any prefix of a dataset is reproducible on its own.
pub fn generate_dataset(
    n: usize,
    base_seed: u64,
    template: &SceneSpec,
    out_dir: &Path,
) -> Result<DatasetIndex> {
    if n == 0 {
        return Err(Error::InvalidInput("dataset size must be at least 1".into()));
    }
    template.validate()?;
    for sub in [PRE_DIR, POST_DIR, MASK_DIR] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let mut manifest = String::new();
    for i in 0..n {
        let spec = SceneSpec { seed: base_seed.wrapping_add(i as u64), ..template.clone() };
        let triplet = generate(&spec)?;
        let id = format!("{i:05}");
        write_rgb_png(&out_dir.join(PRE_DIR).join(format!("{id}.png")), &triplet.pre)?;
        write_rgb_png(&out_dir.join(POST_DIR).join(format!("{id}.png")), &triplet.post)?;
        write_mask_png(&out_dir.join(MASK_DIR).join(format!("{id}.png")), &triplet.mask)?;
        manifest.push_str(&id);
        manifest.push('\n');
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;

    let provenance = Provenance { n, base_seed, template: template.clone() };
    let prov_path = out_dir.join(PROVENANCE_FILE);
    let json = serde_json::to_string_pretty(&provenance)
        .map_err(|e| Error::format(&prov_path, e.to_string()))?;
    std::fs::write(&prov_path, json).map_err(|e| Error::io(&prov_path, e))?;

    DatasetIndex::scan(out_dir)
}
