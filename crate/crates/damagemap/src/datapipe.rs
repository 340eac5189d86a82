//! Dataset discovery, tiling, normalization, splits, minority upsampling,
//! and paired augmentation.
//!
//! Directory layout: `root/pre/<id>.png`, `root/post/<id>.png`,
//! `root/mask/<id>.png`. An optional `manifest.txt` (one id per line) pins
//! the triplet order; without one, ids sort lexicographically.
//!
//! All randomness is drawn from caller-provided ChaCha states, so every
//! shuffle, crop, and augmentation draw is reproducible from the recorded
//! seeds alone.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::schema::{read_mask_png, read_rgb_png, DamageClass, ImageTriplet};

pub const PRE_DIR: &str = "pre";
pub const POST_DIR: &str = "post";
pub const MASK_DIR: &str = "mask";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Channel means used for training and inference alike.
pub const DEFAULT_MEAN: [f32; 3] = [0.5, 0.5, 0.5];
/// Channel standard deviations; with the means above, [0,1] maps to [−1,1].
pub const DEFAULT_STD: [f32; 3] = [0.5, 0.5, 0.5];

/// File paths of one triplet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletPaths {
    pub id: String,
    pub pre: PathBuf,
    pub post: PathBuf,
    pub mask: PathBuf,
}

/// An ordered view of a dataset directory plus the per-id class inventory
/// (needed by the minority upsampling rule).
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub triplets: Vec<TripletPaths>,
    pub present_classes: BTreeMap<String, BTreeSet<DamageClass>>,
}

impl DatasetIndex {
    /// Scans `root` and reads every mask once to record its present classes.
    pub fn scan(root: &Path) -> Result<Self> {
        let ids = match read_manifest(&root.join(MANIFEST_FILE))? {
            Some(ids) => ids,
            None => list_ids(&root.join(PRE_DIR))?,
        };
        if ids.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no triplets found under {}",
                root.display()
            )));
        }

        let mut triplets = Vec::with_capacity(ids.len());
        let mut present_classes = BTreeMap::new();
        for id in ids {
            let paths = TripletPaths {
                pre: root.join(PRE_DIR).join(format!("{id}.png")),
                post: root.join(POST_DIR).join(format!("{id}.png")),
                mask: root.join(MASK_DIR).join(format!("{id}.png")),
                id: id.clone(),
            };
            for p in [&paths.pre, &paths.post, &paths.mask] {
                if !p.is_file() {
                    return Err(Error::format(p, format!("triplet {id} is missing this file")));
                }
            }
            let mask = read_mask_png(&paths.mask)?;
            let mut classes = BTreeSet::new();
            for &v in mask.iter() {
                classes.insert(DamageClass::from_id(v).map_err(|_| {
                    Error::format(&paths.mask, format!("mask value {v} out of range"))
                })?);
            }
            present_classes.insert(id, classes);
            triplets.push(paths);
        }
        Ok(DatasetIndex { root: root.to_path_buf(), triplets, present_classes })
    }

    pub fn ids(&self) -> Vec<String> {
        self.triplets.iter().map(|t| t.id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Decodes one triplet; images come back as `(3, H, W)` in `[0, 1]`.
    pub fn load_triplet(&self, id: &str) -> Result<ImageTriplet> {
        let paths = self
            .triplets
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown triplet id {id:?}")))?;
        let triplet = ImageTriplet {
            id: id.to_string(),
            pre: read_rgb_png(&paths.pre)?,
            post: read_rgb_png(&paths.post)?,
            mask: read_mask_png(&paths.mask)?,
            pixel_size_m: None,
        };
        triplet.validate()?;
        Ok(triplet)
    }

    pub fn make_split(&self, seed: u64) -> Result<SplitPlan> {
        make_split(&self.ids(), seed)
    }
}

fn read_manifest(path: &Path) -> Result<Option<Vec<String>>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen = BTreeSet::new();
    let mut ids = Vec::new();
    for line in text.lines() {
        let id = line.trim();
        if id.is_empty() {
            continue;
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::format(path, format!("duplicate id {id:?} in manifest")));
        }
        ids.push(id.to_string());
    }
    Ok(Some(ids))
}

fn list_ids(pre_dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(pre_dir).map_err(|e| Error::io(pre_dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(pre_dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Cuts three aligned rasters into non-overlapping `side`×`side` tiles in
/// row-major order; edge remainders smaller than `side` are discarded.
pub fn tile_scene(
    pre: &Array3<f32>,
    post: &Array3<f32>,
    mask: &Array2<u8>,
    side: usize,
    id_prefix: &str,
) -> Result<Vec<ImageTriplet>> {
    let (_, h, w) = pre.dim();
    if post.dim() != pre.dim() || mask.dim() != (h, w) {
        return Err(Error::InvalidInput(format!(
            "scene shapes disagree: pre {:?}, post {:?}, mask {:?}",
            pre.dim(),
            post.dim(),
            mask.dim()
        )));
    }
    if side == 0 {
        return Err(Error::InvalidInput("tile side must be positive".into()));
    }

    let mut tiles = Vec::new();
    for tr in 0..h / side {
        for tc in 0..w / side {
            let (r0, c0) = (tr * side, tc * side);
            let triplet = ImageTriplet {
                id: format!("{id_prefix}_r{tr:03}c{tc:03}"),
                pre: pre.slice(ndarray::s![.., r0..r0 + side, c0..c0 + side]).to_owned(),
                post: post.slice(ndarray::s![.., r0..r0 + side, c0..c0 + side]).to_owned(),
                mask: mask.slice(ndarray::s![r0..r0 + side, c0..c0 + side]).to_owned(),
                pixel_size_m: None,
            };
            tiles.push(triplet);
        }
    }
    Ok(tiles)
}

/// Per-channel `(value − mean)/std`; the defaults map `[0,1]` to `[−1,1]`.
pub fn normalize(image: &Array3<f32>, mean: [f32; 3], std: [f32; 3]) -> Result<Array3<f32>> {
    if std.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidInput(format!("std must be positive, got {std:?}")));
    }
    if image.dim().0 != 3 {
        return Err(Error::InvalidInput(format!("expected 3 channels, got {}", image.dim().0)));
    }
    let mut out = image.clone();
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        plane.mapv_inplace(|v| (v - mean[c]) / std[c]);
    }
    Ok(out)
}

/// Seeded three-way id partition.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub test_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub train_ids: Vec<String>,
}

/// Shuffles ids with the seed, takes `floor(0.10·N)` as test, then
/// `round(0.10·M)` of the `M` remaining as validation, rest train.
pub fn make_split(ids: &[String], seed: u64) -> Result<SplitPlan> {
    let n = ids.len();
    if n < 10 {
        return Err(Error::InvalidInput(format!(
            "need at least 10 triplets to split, got {n}"
        )));
    }
    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    let n_test = n / 10; // floor(0.10·N)
    let m = n - n_test;
    let n_val = (0.10 * m as f64).round() as usize;

    let test_ids = shuffled[..n_test].to_vec();
    let val_ids = shuffled[n_test..n_test + n_val].to_vec();
    let train_ids = shuffled[n_test + n_val..].to_vec();
    Ok(SplitPlan { seed, test_ids, val_ids, train_ids })
}

/// Multiplicity of one training sample under the minority upsampling rule:
/// 1, plus 1 if the tile contains any of classes {2, 3, 4}, plus 1 more if
/// it contains class 2 or 3. The clauses are per-sample, not per-class.
pub fn upsample_multiplicity(present: &BTreeSet<DamageClass>) -> usize {
    let has = |c: DamageClass| present.contains(&c);
    let rare = has(DamageClass::TotalRoofDamage)
        || has(DamageClass::PartialStructuralCollapse)
        || has(DamageClass::TotalStructuralCollapse);
    let extra = has(DamageClass::TotalRoofDamage) || has(DamageClass::PartialStructuralCollapse);
    1 + usize::from(rare) + usize::from(extra)
}

/// Expands the train list: each id appears `upsample_multiplicity` times,
/// duplicates adjacent, original order preserved.
pub fn upsample_minority(
    train_ids: &[String],
    present_classes: &BTreeMap<String, BTreeSet<DamageClass>>,
) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(train_ids.len() * 2);
    for id in train_ids {
        let present = present_classes.get(id).ok_or_else(|| {
            Error::InvalidInput(format!("no class inventory for train id {id:?}"))
        })?;
        for _ in 0..upsample_multiplicity(present) {
            out.push(id.clone());
        }
    }
    Ok(out)
}

/// Augmentation knobs; `seed` is the root from which pipelines derive
/// per-epoch draw states.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub blur_prob: f64,
    pub blur_radius_range: [f64; 2],
    pub crop_side: usize,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            blur_prob: 0.3,
            blur_radius_range: [0.5, 2.0],
            crop_side: 512,
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    /// Identity policy: no flips, no blur, crop equal to `side`.
    pub fn identity(side: usize) -> Self {
        AugmentationPolicy {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            blur_prob: 0.0,
            crop_side: side,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in
            [("hflip_prob", self.hflip_prob), ("vflip_prob", self.vflip_prob), ("blur_prob", self.blur_prob)]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        let [lo, hi] = self.blur_radius_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!(
                "blur_radius_range must be positive and ordered, got [{lo}, {hi}]"
            )));
        }
        if self.crop_side == 0 {
            return Err(Error::Config("crop_side must be positive".into()));
        }
        Ok(())
    }
}

fn flip2<T: Copy>(a: &Array2<T>, axis: Axis) -> Array2<T> {
    let mut out = a.clone();
    out.invert_axis(axis);
    out.as_standard_layout().to_owned()
}

/// One counter-clockwise quarter turn; for square grids this is the rule
/// `out[r][c] = in[c][H−1−r]`.
pub(crate) fn rot90_2d<T: Copy + Default>(a: &Array2<T>) -> Array2<T> {
    let (h, w) = a.dim();
    let mut out = Array2::default((w, h));
    for r in 0..w {
        for c in 0..h {
            out[[r, c]] = a[[c, w - 1 - r]];
        }
    }
    out
}

fn map_planes<F: Fn(&Array2<f32>) -> Array2<f32>>(image: &Array3<f32>, f: F) -> Array3<f32> {
    let planes: Vec<Array2<f32>> =
        image.axis_iter(Axis(0)).map(|p| f(&p.to_owned())).collect();
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal plane shapes")
}

/// Separable Gaussian blur with σ = `radius` and clamp-to-edge padding.
fn gaussian_blur_plane(plane: &Array2<f32>, radius: f64) -> Array2<f32> {
    let sigma = radius.max(1e-6);
    let half = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel = Vec::with_capacity(2 * half as usize + 1);
    for i in -half..=half {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| (k / total) as f32).collect();

    let (h, w) = plane.dim();
    let clamp = |v: isize, max: usize| v.clamp(0, max as isize - 1) as usize;
    let mut horiz = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, &k) in kernel.iter().enumerate() {
                acc += k * plane[[r, clamp(c as isize + i as isize - half, w)]];
            }
            horiz[[r, c]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, &k) in kernel.iter().enumerate() {
                acc += k * horiz[[clamp(r as isize + i as isize - half, h), c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Applies flips, a quarter-turn rotation, and (images only) Gaussian blur.
///
/// Draw order is fixed: hflip, vflip, rotation count, blur decision, blur
/// radius (only when blurring). Geometric transforms hit pre, post, and
/// mask identically; the mask is moved by pure index permutation, never
/// interpolated, so its values stay in {0..4}.
pub fn augment(
    triplet: &ImageTriplet,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<ImageTriplet> {
    policy.validate()?;
    let mut pre = triplet.pre.clone();
    let mut post = triplet.post.clone();
    let mut mask = triplet.mask.clone();

    if rng.gen_bool(policy.hflip_prob) {
        pre = map_planes(&pre, |p| flip2(p, Axis(1)));
        post = map_planes(&post, |p| flip2(p, Axis(1)));
        mask = flip2(&mask, Axis(1));
    }
    if rng.gen_bool(policy.vflip_prob) {
        pre = map_planes(&pre, |p| flip2(p, Axis(0)));
        post = map_planes(&post, |p| flip2(p, Axis(0)));
        mask = flip2(&mask, Axis(0));
    }
    let quarter_turns = rng.gen_range(0..4u8);
    for _ in 0..quarter_turns {
        pre = map_planes(&pre, rot90_2d);
        post = map_planes(&post, rot90_2d);
        mask = rot90_2d(&mask);
    }
    if rng.gen_bool(policy.blur_prob) {
        let radius = rng.gen_range(policy.blur_radius_range[0]..=policy.blur_radius_range[1]);
        pre = map_planes(&pre, |p| gaussian_blur_plane(p, radius));
        post = map_planes(&post, |p| gaussian_blur_plane(p, radius));
        // The mask is never blurred.
    }

    Ok(ImageTriplet {
        id: triplet.id.clone(),
        pre,
        post,
        mask,
        pixel_size_m: triplet.pixel_size_m,
    })
}

/// Crop sampling mode: random offsets for training, a fixed grid for
/// validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Val,
}

fn crop(triplet: &ImageTriplet, top: usize, left: usize, side: usize, rename: bool) -> ImageTriplet {
    let id = if rename {
        format!("{}+y{top}x{left}", triplet.id)
    } else {
        triplet.id.clone()
    };
    ImageTriplet {
        id,
        pre: triplet.pre.slice(ndarray::s![.., top..top + side, left..left + side]).to_owned(),
        post: triplet.post.slice(ndarray::s![.., top..top + side, left..left + side]).to_owned(),
        mask: triplet.mask.slice(ndarray::s![top..top + side, left..left + side]).to_owned(),
        pixel_size_m: triplet.pixel_size_m,
    }
}

/// Extracts `crop_side` patches: train mode draws one random offset; val
/// mode uses the identity crop when the sides match, otherwise the four
/// corners plus the center.
pub fn sample_patches(
    triplet: &ImageTriplet,
    mode: SampleMode,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ImageTriplet>> {
    policy.validate()?;
    let (h, w) = (triplet.height(), triplet.width());
    let side = policy.crop_side;
    if side > h || side > w {
        return Err(Error::InvalidInput(format!(
            "crop_side {side} exceeds tile {h}x{w}"
        )));
    }
    match mode {
        SampleMode::Train => {
            let top = rng.gen_range(0..=h - side);
            let left = rng.gen_range(0..=w - side);
            Ok(vec![crop(triplet, top, left, side, side != h || side != w)])
        }
        SampleMode::Val => {
            if side == h && side == w {
                return Ok(vec![crop(triplet, 0, 0, side, false)]);
            }
            let positions = [
                (0, 0),
                (0, w - side),
                (h - side, 0),
                (h - side, w - side),
                ((h - side) / 2, (w - side) / 2),
            ];
            let mut seen = BTreeSet::new();
            Ok(positions
                .into_iter()
                .filter(|p| seen.insert(*p))
                .map(|(top, left)| crop(triplet, top, left, side, true))
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{write_mask_png, write_rgb_png};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_triplet(seed: u64, h: usize, w: usize) -> ImageTriplet {
        let mut r = rng(seed);
        ImageTriplet {
            id: format!("t{seed}"),
            pre: Array3::from_shape_simple_fn((3, h, w), || r.gen_range(0.0..1.0f32)),
            post: Array3::from_shape_simple_fn((3, h, w), || r.gen_range(0.0..1.0f32)),
            mask: Array2::from_shape_simple_fn((h, w), || r.gen_range(0..5u8)),
            pixel_size_m: None,
        }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{i:05}")).collect()
    }

    // --- tiling ---

    #[test]
    fn tiling_counts_and_row_major_order() {
        let (h, w, side) = (1024, 1536, 512);
        let mut pre = Array3::zeros((3, h, w));
        for tr in 0..2 {
            for tc in 0..3 {
                pre[[0, tr * side, tc * side]] = (tr * 10 + tc) as f32;
            }
        }
        let post = pre.clone();
        let mask = Array2::zeros((h, w));
        let tiles = tile_scene(&pre, &post, &mask, side, "scene").unwrap();
        assert_eq!(tiles.len(), 6);
        let expected = [0.0, 1.0, 2.0, 10.0, 11.0, 12.0];
        for (tile, want) in tiles.iter().zip(expected) {
            assert_eq!(tile.pre[[0, 0, 0]], want, "row-major order violated");
            assert_eq!(tile.height(), side);
        }
        assert_eq!(tiles[0].id, "scene_r000c000");
        assert_eq!(tiles[5].id, "scene_r001c002");
    }

    #[test]
    fn exact_side_scene_is_a_single_identity_tile() {
        let t = random_triplet(1, 64, 64);
        let tiles = tile_scene(&t.pre, &t.post, &t.mask, 64, "x").unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].pre, t.pre);
        assert_eq!(tiles[0].post, t.post);
        assert_eq!(tiles[0].mask, t.mask);
    }

    #[test]
    fn undersized_scene_yields_no_tiles() {
        let t = random_triplet(2, 50, 50);
        let tiles = tile_scene(&t.pre, &t.post, &t.mask, 64, "x").unwrap();
        assert!(tiles.is_empty());
    }

    #[test]
    fn tiling_rejects_mismatched_rasters() {
        let t = random_triplet(3, 64, 64);
        let bad_mask = Array2::zeros((64, 65));
        assert!(tile_scene(&t.pre, &t.post, &bad_mask, 64, "x").is_err());
    }

    // --- normalization ---

    #[test]
    fn normalize_maps_unit_interval_to_symmetric_range() {
        let mut image = Array3::zeros((3, 1, 4));
        image[[0, 0, 0]] = 0.5;
        image[[0, 0, 1]] = 1.0;
        image[[0, 0, 2]] = 0.0;
        image[[0, 0, 3]] = 0.75;
        let out = normalize(&image, DEFAULT_MEAN, DEFAULT_STD).unwrap();
        assert_abs_diff_eq!(out[[0, 0, 0]], 0.0);
        assert_abs_diff_eq!(out[[0, 0, 1]], 1.0);
        assert_abs_diff_eq!(out[[0, 0, 2]], -1.0);
        assert_abs_diff_eq!(out[[0, 0, 3]], 0.5);
    }

    #[test]
    fn normalize_rejects_zero_std() {
        let image = Array3::zeros((3, 2, 2));
        assert!(normalize(&image, DEFAULT_MEAN, [0.5, 0.0, 0.5]).is_err());
    }

    // --- splits ---

    #[test]
    fn full_scale_split_sizes_match_the_documented_arithmetic() {
        let plan = make_split(&ids(2135), 0).unwrap();
        assert_eq!(plan.test_ids.len(), 213);
        assert_eq!(plan.val_ids.len(), 192);
        assert_eq!(plan.train_ids.len(), 1730);
    }

    #[test]
    fn minimal_split_sizes() {
        let plan = make_split(&ids(10), 0).unwrap();
        assert_eq!(
            (plan.test_ids.len(), plan.val_ids.len(), plan.train_ids.len()),
            (1, 1, 8)
        );
        assert!(make_split(&ids(9), 0).is_err());
    }

    #[test]
    fn split_is_deterministic_per_seed_and_varies_across_seeds() {
        let all = ids(100);
        let a = make_split(&all, 7).unwrap();
        let b = make_split(&all, 7).unwrap();
        assert_eq!(a, b);
        let c = make_split(&all, 8).unwrap();
        assert_ne!(a.test_ids, c.test_ids);
    }

    proptest! {
        #[test]
        fn split_partitions_ids_for_any_n(n in 10usize..2000, seed in 0u64..32) {
            let all = ids(n);
            let plan = make_split(&all, seed).unwrap();
            prop_assert_eq!(plan.test_ids.len(), n / 10);
            let m = n - n / 10;
            prop_assert_eq!(plan.val_ids.len(), (0.10 * m as f64).round() as usize);
            let mut union: Vec<String> = plan
                .test_ids.iter()
                .chain(&plan.val_ids)
                .chain(&plan.train_ids)
                .cloned()
                .collect();
            prop_assert_eq!(union.len(), n);
            union.sort();
            union.dedup();
            prop_assert_eq!(union.len(), n, "overlapping splits");
        }
    }

    // --- upsampling ---

    #[test]
    fn multiplicity_follows_the_rule_on_all_sixteen_subsets() {
        for bits in 0..16u8 {
            let mut present = BTreeSet::from([DamageClass::Background]);
            for (bit, class) in DamageClass::DAMAGE.iter().enumerate() {
                if bits & (1 << bit) != 0 {
                    present.insert(*class);
                }
            }
            let has = |id: u8| present.contains(&DamageClass::from_id(id).unwrap());
            let expected = 1
                + usize::from(has(2) || has(3) || has(4))
                + usize::from(has(2) || has(3));
            assert_eq!(
                upsample_multiplicity(&present),
                expected,
                "subset bits {bits:04b}"
            );
            assert!((1..=3).contains(&upsample_multiplicity(&present)));
        }
    }

    #[test]
    fn upsampling_keeps_order_with_adjacent_duplicates() {
        let train: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let mut present = BTreeMap::new();
        present.insert("a".to_string(), BTreeSet::from([DamageClass::PartialRoofDamage]));
        present.insert("b".to_string(), BTreeSet::from([DamageClass::TotalStructuralCollapse]));
        present.insert(
            "c".to_string(),
            BTreeSet::from([DamageClass::TotalRoofDamage, DamageClass::PartialStructuralCollapse]),
        );
        let out = upsample_minority(&train, &present).unwrap();
        assert_eq!(out, vec!["a", "b", "b", "c", "c", "c"]);
    }

    #[test]
    fn upsampling_requires_class_inventory() {
        let train = vec!["missing".to_string()];
        assert!(upsample_minority(&train, &BTreeMap::new()).is_err());
    }

    // --- augmentation ---

    #[test]
    fn identity_policy_returns_the_input() {
        let t = random_triplet(4, 16, 16);
        let out = augment(&t, &AugmentationPolicy::identity(16), &mut rng(0)).unwrap();
        // Identity still draws a rotation count; force 0 turns by checking
        // across seeds until one yields 0 — instead verify against a policy
        // that cannot rotate by construction: compare under quarter-turn 0.
        // The draw order is fixed, so find a seed with rotation 0.
        let mut found = false;
        for seed in 0..64 {
            let mut r = rng(seed);
            let out = augment(&t, &AugmentationPolicy::identity(16), &mut r).unwrap();
            if out.pre == t.pre {
                assert_eq!(out.post, t.post);
                assert_eq!(out.mask, t.mask);
                found = true;
                break;
            }
        }
        assert!(found, "no identity draw among 64 seeds");
        // And rotations are the only remaining source of change.
        assert_eq!(out.mask.dim(), t.mask.dim());
    }

    #[test]
    fn rotation_rule_matches_the_documented_indexing() {
        let t = random_triplet(5, 8, 8);
        let rotated = rot90_2d(&t.mask);
        let h = 8;
        for r in 0..h {
            for c in 0..h {
                assert_eq!(rotated[[r, c]], t.mask[[c, h - 1 - r]]);
            }
        }
    }

    #[test]
    fn four_quarter_turns_are_the_identity() {
        let t = random_triplet(6, 12, 12);
        let mut m = t.mask.clone();
        for _ in 0..4 {
            m = rot90_2d(&m);
        }
        assert_eq!(m, t.mask);
    }

    #[test]
    fn geometry_moves_mask_and_images_in_lockstep() {
        // Encode the mask into an image channel; geometric-only augmentation
        // must keep them identical.
        for seed in 0..25 {
            let mut t = random_triplet(100 + seed, 16, 16);
            for r in 0..16 {
                for c in 0..16 {
                    t.pre[[0, r, c]] = t.mask[[r, c]] as f32;
                    t.post[[1, r, c]] = t.mask[[r, c]] as f32;
                }
            }
            let policy = AugmentationPolicy {
                hflip_prob: 0.5,
                vflip_prob: 0.5,
                blur_prob: 0.0,
                crop_side: 16,
                ..AugmentationPolicy::default()
            };
            let out = augment(&t, &policy, &mut rng(seed)).unwrap();
            for r in 0..16 {
                for c in 0..16 {
                    assert_eq!(out.pre[[0, r, c]], out.mask[[r, c]] as f32);
                    assert_eq!(out.post[[1, r, c]], out.mask[[r, c]] as f32);
                    assert!(out.mask[[r, c]] <= 4);
                }
            }
        }
    }

    #[test]
    fn blur_touches_images_but_never_the_mask() {
        let t = random_triplet(7, 16, 16);
        let policy = AugmentationPolicy {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            blur_prob: 1.0,
            crop_side: 16,
            ..AugmentationPolicy::default()
        };
        // Find a seed whose rotation draw is 0 so only blur acts.
        for seed in 0..64 {
            let out = augment(&t, &policy, &mut rng(seed)).unwrap();
            if out.mask == t.mask && out.pre.dim() == t.pre.dim() {
                if out.pre != t.pre {
                    // Blur changed the images; the mask stayed byte-exact.
                    return;
                }
            }
        }
        panic!("no rotation-free blur draw among 64 seeds");
    }

    #[test]
    fn blur_preserves_constant_images() {
        let plane = Array2::from_elem((9, 9), 0.25f32);
        let out = gaussian_blur_plane(&plane, 1.5);
        for &v in out.iter() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-6);
        }
    }

    #[test]
    fn augmentation_is_reproducible_from_the_draw_state() {
        let t = random_triplet(8, 16, 16);
        let policy = AugmentationPolicy { crop_side: 16, ..AugmentationPolicy::default() };
        let a = augment(&t, &policy, &mut rng(11)).unwrap();
        let b = augment(&t, &policy, &mut rng(11)).unwrap();
        assert_eq!(a.pre, b.pre);
        assert_eq!(a.post, b.post);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn augment_validates_the_policy() {
        let t = random_triplet(9, 8, 8);
        let bad = AugmentationPolicy { hflip_prob: 1.5, ..AugmentationPolicy::default() };
        assert!(augment(&t, &bad, &mut rng(0)).is_err());
    }

    // --- patch sampling ---

    #[test]
    fn val_identity_crop_when_sides_match() {
        let t = random_triplet(10, 32, 32);
        let policy = AugmentationPolicy { crop_side: 32, ..AugmentationPolicy::default() };
        let crops = sample_patches(&t, SampleMode::Val, &policy, &mut rng(0)).unwrap();
        assert_eq!(crops.len(), 1);
        assert_eq!(crops[0].id, t.id);
        assert_eq!(crops[0].pre, t.pre);
    }

    #[test]
    fn val_grid_is_corners_plus_center() {
        let t = random_triplet(11, 32, 32);
        let policy = AugmentationPolicy { crop_side: 16, ..AugmentationPolicy::default() };
        let crops = sample_patches(&t, SampleMode::Val, &policy, &mut rng(0)).unwrap();
        assert_eq!(crops.len(), 5);
        let offsets = [(0, 0), (0, 16), (16, 0), (16, 16), (8, 8)];
        for (c, (top, left)) in crops.iter().zip(offsets) {
            assert_eq!(c.mask, t.mask.slice(ndarray::s![top..top + 16, left..left + 16]).to_owned());
        }
    }

    #[test]
    fn train_crop_is_random_but_seeded() {
        let t = random_triplet(12, 32, 32);
        let policy = AugmentationPolicy { crop_side: 16, ..AugmentationPolicy::default() };
        let a = sample_patches(&t, SampleMode::Train, &policy, &mut rng(3)).unwrap();
        let b = sample_patches(&t, SampleMode::Train, &policy, &mut rng(3)).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].pre, b[0].pre);
        assert_eq!(a[0].id, b[0].id);
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let t = random_triplet(13, 16, 16);
        let policy = AugmentationPolicy { crop_side: 32, ..AugmentationPolicy::default() };
        assert!(sample_patches(&t, SampleMode::Val, &policy, &mut rng(0)).is_err());
    }

    // --- directory scanning ---

    fn write_dataset(dir: &Path, ids: &[&str], side: usize) {
        for sub in [PRE_DIR, POST_DIR, MASK_DIR] {
            std::fs::create_dir_all(dir.join(sub)).unwrap();
        }
        for (i, id) in ids.iter().enumerate() {
            let t = random_triplet(1000 + i as u64, side, side);
            let mut mask = t.mask.clone();
            mask.mapv_inplace(|v| v.min(4));
            // Give each triplet a distinct class inventory.
            mask[[0, 0]] = (i % 5) as u8;
            write_rgb_png(&dir.join(PRE_DIR).join(format!("{id}.png")), &t.pre).unwrap();
            write_rgb_png(&dir.join(POST_DIR).join(format!("{id}.png")), &t.post).unwrap();
            write_mask_png(&dir.join(MASK_DIR).join(format!("{id}.png")), &mask).unwrap();
        }
    }

    #[test]
    fn scan_sorts_ids_lexicographically_without_a_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &["b", "a", "c"], 8);
        let index = DatasetIndex::scan(dir.path()).unwrap();
        assert_eq!(index.ids(), vec!["a", "b", "c"]);
        assert_eq!(index.len(), 3);
        for id in index.ids() {
            assert!(index.present_classes.contains_key(&id));
        }
    }

    #[test]
    fn manifest_pins_the_order() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &["b", "a", "c"], 8);
        std::fs::write(dir.path().join(MANIFEST_FILE), "c\nb\na\n").unwrap();
        let index = DatasetIndex::scan(dir.path()).unwrap();
        assert_eq!(index.ids(), vec!["c", "b", "a"]);
    }

    #[test]
    fn scan_reports_the_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &["a"], 8);
        std::fs::remove_file(dir.path().join(POST_DIR).join("a.png")).unwrap();
        let err = DatasetIndex::scan(dir.path()).unwrap_err();
        assert!(err.to_string().contains("post"), "{err}");
    }

    #[test]
    fn loaded_triplets_round_trip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &["a"], 8);
        let index = DatasetIndex::scan(dir.path()).unwrap();
        let t = index.load_triplet("a").unwrap();
        assert_eq!(t.pre.dim(), (3, 8, 8));
        assert_eq!(t.mask.dim(), (8, 8));
        assert!(index.load_triplet("nope").is_err());
        // present_classes agrees with the decoded mask.
        let classes: BTreeSet<DamageClass> =
            t.mask.iter().map(|&v| DamageClass::from_id(v).unwrap()).collect();
        assert_eq!(index.present_classes["a"], classes);
    }
}
