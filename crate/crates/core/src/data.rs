//! Dual-phase dataset ingestion, tiling, augmentation and a synthetic pair generator.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, FtnError, Result};

/// `[H, W, 3]` RGB values in `[0, 1]`.
pub type Raster = Array3<f32>;
/// `[H, W]` with values in `{0, 1}`.
pub type LabelMask = Array2<u8>;

pub const DEFAULT_TILE: usize = 256;
/// Per-channel difference above which a synthetic pixel counts as changed.
pub const SYNTH_CHANGE_FLOOR: f32 = 0.05;
pub const SYNTH_NOISE_SIGMA: f32 = 0.02;
const SYNTH_MIN_FRACTION: f64 = 0.01;
const SYNTH_MAX_FRACTION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub image_a: Raster,
    pub image_b: Raster,
    pub mask: LabelMask,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, image_a: Raster, image_b: Raster, mask: LabelMask) -> Result<Self> {
        let pair = SamplePair {
            id: id.into(),
            image_a,
            image_b,
            mask,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.mask.dim();
        if self.image_a.dim() != (h, w, 3) || self.image_b.dim() != (h, w, 3) {
            return Err(FtnError::Ingestion {
                id: self.id.clone(),
                reason: format!(
                    "misaligned rasters: A {:?}, B {:?}, label {:?}",
                    self.image_a.dim(),
                    self.image_b.dim(),
                    self.mask.dim()
                ),
            });
        }
        if self.mask.iter().any(|&v| v > 1) {
            return Err(FtnError::Ingestion {
                id: self.id.clone(),
                reason: "mask is not binary".into(),
            });
        }
        Ok(())
    }

    pub fn change_pixels(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = FtnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(invalid(format!("unknown split '{other}' (expected train|val|test)"))),
        }
    }
}

/// Paths of one `A`/`B`/`label` triple.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Locator {
    pub id: String,
    pub image_a: PathBuf,
    pub image_b: PathBuf,
    pub label: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<Locator>,
    pub tile_size: Option<usize>,
    /// Seed of the shuffle that produced this split, when it was randomly split.
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_all(&self) -> Result<Vec<SamplePair>> {
        self.entries.iter().map(load_pair).collect()
    }

    /// Loads every pair and cuts it into tiles when a tile size is set.
    pub fn load_tiles(&self) -> Result<Vec<SamplePair>> {
        let pairs = self.load_all()?;
        match self.tile_size {
            None => Ok(pairs),
            Some(size) => Ok(pairs
                .iter()
                .map(|p| tile(p, size))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect()),
        }
    }
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Matches `<root>/<split>/{A,B,label}/<name>.png` triples, sorted by name.
pub fn load_manifest(root: impl AsRef<Path>, split: Split) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let base = root.join(split.name());
    let dirs = ["A", "B", "label"].map(|d| base.join(d));
    let stems = dirs.iter().map(|d| png_stems(d)).collect::<Result<Vec<_>>>()?;
    let all: BTreeSet<&String> = stems.iter().flatten().collect();
    let mut entries = Vec::with_capacity(all.len());
    for id in all {
        for (dir, set) in dirs.iter().zip(&stems) {
            if !set.contains(id) {
                return Err(FtnError::Ingestion {
                    id: id.clone(),
                    reason: format!("missing {}", dir.join(format!("{id}.png")).display()),
                });
            }
        }
        let file = format!("{id}.png");
        entries.push(Locator {
            id: id.clone(),
            image_a: dirs[0].join(&file),
            image_b: dirs[1].join(&file),
            label: dirs[2].join(&file),
        });
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split,
        entries,
        tile_size: None,
        seed: None,
    })
}

/// Seeded shuffle of a manifest into consecutive train/val/test parts of the given sizes.
pub fn random_split(manifest: &DatasetManifest, counts: [usize; 3], seed: u64) -> Result<[DatasetManifest; 3]> {
    if counts.iter().sum::<usize>() > manifest.len() {
        return Err(invalid(format!(
            "split sizes {counts:?} exceed {} entries",
            manifest.len()
        )));
    }
    let mut entries = manifest.entries.clone();
    entries.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rest = entries.into_iter();
    let mut part = |split: Split, n: usize| DatasetManifest {
        root: manifest.root.clone(),
        split,
        entries: rest.by_ref().take(n).collect(),
        tile_size: manifest.tile_size,
        seed: Some(seed),
    };
    Ok([
        part(Split::Train, counts[0]),
        part(Split::Val, counts[1]),
        part(Split::Test, counts[2]),
    ])
}

pub fn read_rgb(path: &Path) -> Result<Raster> {
    let img = image::open(path)
        .map_err(|source| FtnError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

/// Reads a 0/255 label image as a 0/1 mask.
pub fn read_label(path: &Path, id: &str) -> Result<LabelMask> {
    let img = image::open(path)
        .map_err(|source| FtnError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut mask = Array2::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        mask[[y as usize, x as usize]] = match px[0] {
            0 => 0,
            255 => 1,
            v => {
                return Err(FtnError::Ingestion {
                    id: id.to_string(),
                    reason: format!("label value {v} at ({x}, {y}) is neither 0 nor 255"),
                })
            }
        };
    }
    Ok(mask)
}

pub fn load_pair(loc: &Locator) -> Result<SamplePair> {
    let pair = SamplePair {
        id: loc.id.clone(),
        image_a: read_rgb(&loc.image_a)?,
        image_b: read_rgb(&loc.image_b)?,
        mask: read_label(&loc.label, &loc.id)?,
    };
    pair.validate()?;
    Ok(pair)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn raster_to_image(r: ArrayView3<f32>) -> RgbImage {
    let (h, w, _) = r.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([to_u8(r[[y, x, 0]]), to_u8(r[[y, x, 1]]), to_u8(r[[y, x, 2]])])
    })
}

pub fn mask_to_image(m: ArrayView2<u8>) -> GrayImage {
    let (h, w) = m.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if m[[y as usize, x as usize]] != 0 { 255 } else { 0 }])
    })
}

/// Writes pairs in the `<root>/<split>/{A,B,label}/<id>.png` layout.
pub fn write_split(root: impl AsRef<Path>, split: Split, pairs: &[SamplePair]) -> Result<()> {
    let base = root.as_ref().join(split.name());
    for p in pairs {
        let file = format!("{}.png", p.id);
        write_png(&base.join("A").join(&file), &raster_to_image(p.image_a.view()))?;
        write_png(&base.join("B").join(&file), &raster_to_image(p.image_b.view()))?;
        write_png(&base.join("label").join(&file), &mask_to_image(p.mask.view()))?;
    }
    Ok(())
}

pub(crate) fn write_png<P>(path: &Path, img: &ImageBuffer<P, Vec<P::Subpixel>>) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
{
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    img.save(path).map_err(|source| FtnError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Non-overlapping `size × size` tiles in row-major order; remainders are dropped.
pub fn tile(pair: &SamplePair, size: usize) -> Result<Vec<SamplePair>> {
    let (h, w) = pair.dims();
    if size == 0 || size > h || size > w {
        return Err(invalid(format!("tile size {size} does not fit a {h}x{w} image")));
    }
    let mut out = Vec::with_capacity((h / size) * (w / size));
    for ty in 0..h / size {
        for tx in 0..w / size {
            let (y, x) = (ty * size, tx * size);
            out.push(SamplePair {
                id: format!("{}_{}_{}", pair.id, y, x),
                image_a: pair.image_a.slice(s![y..y + size, x..x + size, ..]).to_owned(),
                image_b: pair.image_b.slice(s![y..y + size, x..x + size, ..]).to_owned(),
                mask: pair.mask.slice(s![y..y + size, x..x + size]).to_owned(),
            });
        }
    }
    Ok(out)
}

/// One of the eight square symmetries: `rot90^k`, optionally preceded by a horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transform {
    pub quarter_turns: u8,
    pub flip: bool,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        quarter_turns: 0,
        flip: false,
    };

    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Transform {
            quarter_turns: rng.random_range(0..4),
            flip: rng.random_bool(0.5),
        }
    }

    fn apply<A: Clone, D: ndarray::RemoveAxis>(&self, a: &ndarray::Array<A, D>) -> ndarray::Array<A, D> {
        let mut v = a.view();
        if self.flip {
            v.invert_axis(Axis(1));
        }
        // counter-clockwise quarter turn: transpose, then flip rows
        for _ in 0..self.quarter_turns {
            v.swap_axes(0, 1);
            v.invert_axis(Axis(0));
        }
        v.as_standard_layout().into_owned()
    }

    pub fn apply_pair(&self, pair: &SamplePair) -> SamplePair {
        SamplePair {
            id: pair.id.clone(),
            image_a: self.apply(&pair.image_a),
            image_b: self.apply(&pair.image_b),
            mask: self.apply(&pair.mask),
        }
    }
}

/// Applies a seeded random symmetry identically to both images and the mask.
pub fn augment(pair: &SamplePair, seed: u64) -> SamplePair {
    Transform::from_seed(seed).apply_pair(pair)
}

/// Order-independent per-sample seed.
pub fn sample_seed(seed: u64, id: &str, epoch: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes().chain(epoch.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.rotate_left(17)
}

fn sample_bilinear(img: ArrayView3<f32>, fy: f64, fx: f64, c: usize) -> f32 {
    let (h, w, _) = img.dim();
    let y = fy.clamp(0.0, (h - 1) as f64);
    let x = fx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (dy, dx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = img[[y0, x0, c]] * (1.0 - dx) + img[[y0, x1, c]] * dx;
    let bottom = img[[y1, x0, c]] * (1.0 - dx) + img[[y1, x1, c]] * dx;
    top * (1.0 - dy) + bottom * dy
}

pub fn resize_raster(img: ArrayView3<f32>, th: usize, tw: usize) -> Raster {
    let (h, w, c) = img.dim();
    let (sy, sx) = (h as f64 / th as f64, w as f64 / tw as f64);
    Array3::from_shape_fn((th, tw, c), |(y, x, ch)| {
        sample_bilinear(img, (y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5, ch)
    })
}

pub fn resize_mask(mask: ArrayView2<u8>, th: usize, tw: usize) -> LabelMask {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((th, tw), |(y, x)| {
        let sy = ((y * h) / th).min(h - 1);
        let sx = ((x * w) / tw).min(w - 1);
        mask[[sy, sx]]
    })
}

/// Bilinear for images, nearest for the mask, to a `target × target` square.
pub fn resize(pair: &SamplePair, target: usize) -> Result<SamplePair> {
    if target < 32 {
        return Err(invalid(format!("resize target {target} is below 32")));
    }
    Ok(SamplePair {
        id: pair.id.clone(),
        image_a: resize_raster(pair.image_a.view(), target, target),
        image_b: resize_raster(pair.image_b.view(), target, target),
        mask: resize_mask(pair.mask.view(), target, target),
    })
}

fn smooth_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize, amplitude: f32) -> Array2<f32> {
    let grid = Array3::from_shape_fn((cells + 1, cells + 1, 1), |_| rng.random_range(-amplitude..amplitude));
    let up = resize_raster(grid.view(), size, size);
    up.index_axis_move(Axis(2), 0)
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Raster {
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.65));
    let (gy, gx): (f32, f32) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let texture: Vec<Array2<f32>> = (0..3).map(|_| smooth_noise(rng, size, 8, 0.08)).collect();
    let n = size as f32;
    Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        let ramp = gy * (y as f32 / n - 0.5) + gx * (x as f32 / n - 0.5);
        (base[c] + ramp + texture[c][[y, x]]).clamp(0.0, 1.0)
    })
}

fn draw_shape(rng: &mut ChaCha8Rng, img: &mut Raster) {
    let size = img.dim().0;
    let lo = (size / 8).max(2);
    let hi = (size / 3).max(lo + 1);
    let (sh, sw) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
    let y0 = rng.random_range(0..=size - sh);
    let x0 = rng.random_range(0..=size - sw);
    let ellipse = rng.random_bool(0.5);
    // saturated colours keep shapes well clear of the background range
    let color: [f32; 3] = std::array::from_fn(|_| if rng.random_bool(0.5) { rng.random_range(0.0..0.15) } else { rng.random_range(0.85..1.0) });
    let (cy, cx) = (y0 as f32 + sh as f32 / 2.0, x0 as f32 + sw as f32 / 2.0);
    let (ry, rx) = (sh as f32 / 2.0, sw as f32 / 2.0);
    for y in y0..y0 + sh {
        for x in x0..x0 + sw {
            if ellipse {
                let dy = (y as f32 + 0.5 - cy) / ry;
                let dx = (x as f32 + 0.5 - cx) / rx;
                if dy * dy + dx * dx > 1.0 {
                    continue;
                }
            }
            for (c, &v) in color.iter().enumerate() {
                img[[y, x, c]] = v;
            }
        }
    }
}

/// Pixels where any channel of the two clean images differs by more than the floor.
pub fn difference_mask(a: ArrayView3<f32>, b: ArrayView3<f32>, floor: f32) -> LabelMask {
    let (h, w, _) = a.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        u8::from((0..3).any(|c| (a[[y, x, c]] - b[[y, x, c]]).abs() > floor))
    })
}

fn synth_one(rng: &mut ChaCha8Rng, id: String, size: usize, sigma: f32) -> SamplePair {
    let noise = Normal::new(0.0f32, sigma).unwrap();
    let total = (size * size) as f64;
    loop {
        let a = background(rng, size);
        let mut b = a.clone();
        let mut a_mod = a.clone();
        for _ in 0..rng.random_range(1..=5) {
            // inserted objects appear in B, removed ones existed only in A
            if rng.random_bool(0.5) {
                draw_shape(rng, &mut b);
            } else {
                draw_shape(rng, &mut a_mod);
            }
        }
        let mask = difference_mask(a_mod.view(), b.view(), SYNTH_CHANGE_FLOOR);
        let fraction = mask.iter().filter(|&&v| v == 1).count() as f64 / total;
        if !(SYNTH_MIN_FRACTION..=SYNTH_MAX_FRACTION).contains(&fraction) {
            continue;
        }
        let mut perturb = |img: Raster| img.mapv(|v| (v + noise.sample(rng)).clamp(0.0, 1.0));
        let image_a = perturb(a_mod);
        let image_b = perturb(b);
        return SamplePair {
            id,
            image_a,
            image_b,
            mask,
        };
    }
}

/// `n` seeded synthetic change pairs of `size × size` pixels.
pub fn synth_generate(seed: u64, n: usize, size: usize) -> Result<Vec<SamplePair>> {
    synth_generate_with_noise(seed, n, size, SYNTH_NOISE_SIGMA)
}

/// [`synth_generate`] with a chosen noise level. The noise draws happen at
/// any `sigma`, so every level yields the same shapes and masks for a seed.
pub fn synth_generate_with_noise(seed: u64, n: usize, size: usize, sigma: f32) -> Result<Vec<SamplePair>> {
    if !(sigma >= 0.0) {
        return Err(invalid("noise sigma must be non-negative"));
    }
    if n == 0 {
        return Err(invalid("synthetic sample count must be at least 1"));
    }
    if size < 32 {
        return Err(invalid(format!("synthetic size {size} is below 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|i| synth_one(&mut rng, format!("synth_{i:05}"), size, sigma)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pair_from_mask(mask: LabelMask) -> SamplePair {
        let (h, w) = mask.dim();
        let img = Array3::from_shape_fn((h, w, 3), |(y, x, c)| (y * 7 + x * 3 + c) as f32 / 100.0);
        SamplePair::new("p", img.clone(), img, mask).unwrap()
    }

    #[test]
    fn transforms_are_the_eight_symmetries() {
        let m = array![[1u8, 0], [0, 0]];
        let pair = pair_from_mask(m);
        let mut seen = BTreeSet::new();
        for k in 0..4 {
            for flip in [false, true] {
                let t = Transform { quarter_turns: k, flip };
                let out = t.apply_pair(&pair);
                seen.insert(out.mask.iter().copied().collect::<Vec<_>>());
            }
        }
        assert_eq!(seen.len(), 4);
        assert_eq!(Transform::IDENTITY.apply_pair(&pair), pair);
    }

    #[test]
    fn quarter_turn_is_counter_clockwise_on_rectangles() {
        let m = array![[1u8, 0, 0], [0, 0, 0]];
        let out = Transform {
            quarter_turns: 1,
            flip: false,
        }
        .apply(&m);
        assert_eq!(out, array![[0u8, 0], [0, 0], [1, 0]]);
    }

    #[test]
    fn tile_remainders_are_dropped() {
        let pair = pair_from_mask(Array2::zeros((300, 300)));
        let tiles = tile(&pair, 256).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].image_a, pair.image_a.slice(s![..256, ..256, ..]));
        assert!(tile(&pair, 301).is_err());
    }

    #[test]
    fn resize_identity_and_binary_mask() {
        let mut m = Array2::zeros((40, 40));
        m.slice_mut(s![5..20, 10..30]).fill(1u8);
        let pair = pair_from_mask(m);
        assert_eq!(resize(&pair, 40).unwrap(), pair);
        let up = resize(&pair, 60).unwrap();
        assert_eq!(up.image_a.dim(), (60, 60, 3));
        assert!(up.mask.iter().all(|&v| v <= 1));
        assert!(resize(&pair, 16).is_err());
    }

    #[test]
    fn split_parse() {
        assert_eq!("val".parse::<Split>().unwrap(), Split::Val);
        assert!("dev".parse::<Split>().is_err());
    }
}
