//! Dataset ingestion and preprocessing: index of a photo/caricature corpus,
//! eye-leveling alignment and square crop, train/test split handling, and
//! the pair sampling + augmentation used during training.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{ImageBuffer, LandmarkSet, NUM_LANDMARKS};

/// Canonical 17-point landmark scheme:
/// 0-6 face contour (left to right), 7-8 left eye corners (outer, inner),
/// 9-10 right eye corners (inner, outer), 11-12 nose, 13-14 mouth corners,
/// 15-16 upper/lower lip.
pub const FACE_CONTOUR: std::ops::Range<usize> = 0..7;
pub const LEFT_EYE_CORNERS: [usize; 2] = [7, 8];
pub const RIGHT_EYE_CORNERS: [usize; 2] = [9, 10];

/// Landmark reindexing under a horizontal flip: mirrored left/right labels
/// swap so semantics are preserved. An involution.
pub const FLIP_PERM: [usize; NUM_LANDMARKS] =
    [6, 5, 4, 3, 2, 1, 0, 10, 9, 8, 7, 11, 12, 14, 13, 15, 16];

/// Side length of preprocessed images.
pub const CANONICAL_SIZE: usize = 256;

/// 2D affine map `p -> M p + t`.
#[derive(Debug, Clone, Copy)]
pub struct Affine2 {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine2 {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0], [0.0, 1.0]],
            t: [0.0, 0.0],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0], [0.0, 1.0]],
            t: [tx, ty],
        }
    }

    pub fn scaling(s: f64) -> Self {
        Self {
            m: [[s, 0.0], [0.0, s]],
            t: [0.0, 0.0],
        }
    }

    /// Rotation by `angle` radians (counter-clockwise in image coordinates
    /// with y downward, i.e. the usual screen convention) about `(cx, cy)`.
    pub fn rotation_about(cx: f64, cy: f64, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let m = [[c, -s], [s, c]];
        Self {
            m,
            t: [
                cx - (m[0][0] * cx + m[0][1] * cy),
                cy - (m[1][0] * cx + m[1][1] * cy),
            ],
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.m[0][0] * p[0] + self.m[0][1] * p[1] + self.t[0],
            self.m[1][0] * p[0] + self.m[1][1] * p[1] + self.t[1],
        ]
    }

    /// `other ∘ self`: apply `self` first, then `other`.
    pub fn then(&self, other: &Affine2) -> Self {
        let mut m = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] = other.m[i][0] * self.m[0][j] + other.m[i][1] * self.m[1][j];
            }
        }
        Self {
            m,
            t: other.apply(self.t),
        }
    }

    pub fn invert(&self) -> Result<Self> {
        let det = self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0];
        if det.abs() < 1e-12 {
            return Err(Error::InvalidArgument("Affine2: singular transform".into()));
        }
        let m = [
            [self.m[1][1] / det, -self.m[0][1] / det],
            [-self.m[1][0] / det, self.m[0][0] / det],
        ];
        let t = [
            -(m[0][0] * self.t[0] + m[0][1] * self.t[1]),
            -(m[1][0] * self.t[0] + m[1][1] * self.t[1]),
        ];
        Ok(Self { m, t })
    }
}

/// Resamples `img` through the inverse of the forward map `fwd`, producing an
/// `ow x oh` output. Out-of-range source coordinates clamp to the border.
pub fn warp_affine(img: &ImageBuffer, fwd: &Affine2, ow: usize, oh: usize) -> Result<ImageBuffer> {
    let inv = fwd.invert()?;
    let mut out = ImageBuffer::constant(ow, oh, 0.0);
    for y in 0..oh {
        for x in 0..ow {
            let src = inv.apply([x as f64, y as f64]);
            out.set_pixel(x, y, img.sample_bilinear(src[0], src[1]));
        }
    }
    Ok(out)
}

/// Levels the eyes, crops a square face box, and resizes to the canonical
/// resolution.
///
/// The rotation about the image center removes the angle of the line through
/// the two eye centers (each the mean of its two corners). The bounding box
/// of the face contour is made square at `1.3 x max(w, h)` about its center,
/// then mapped to `256 x 256`. Pixels and landmarks go through one composed
/// affine. Landmarks falling outside the crop are clamped with a warning.
pub fn align_and_crop(img: &ImageBuffer, lm: &LandmarkSet) -> Result<(ImageBuffer, LandmarkSet)> {
    let left = eye_center(lm, &LEFT_EYE_CORNERS);
    let right = eye_center(lm, &RIGHT_EYE_CORNERS);
    let angle = (right[1] - left[1]).atan2(right[0] - left[0]);
    let cx = (img.width() as f64 - 1.0) / 2.0;
    let cy = (img.height() as f64 - 1.0) / 2.0;
    let rot = Affine2::rotation_about(cx, cy, -angle);

    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for i in FACE_CONTOUR {
        let p = rot.apply(lm.point(i));
        for c in 0..2 {
            min[c] = min[c].min(p[c]);
            max[c] = max[c].max(p[c]);
        }
    }
    let side = 1.3 * (max[0] - min[0]).max(max[1] - min[1]);
    if !(side > 0.0) {
        return Err(Error::Dataset("align_and_crop: zero-area face box".into()));
    }
    let bc = [(min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0];
    let origin = [bc[0] - side / 2.0, bc[1] - side / 2.0];

    let fwd = rot
        .then(&Affine2::translation(-origin[0], -origin[1]))
        .then(&Affine2::scaling(CANONICAL_SIZE as f64 / side));
    let out = warp_affine(img, &fwd, CANONICAL_SIZE, CANONICAL_SIZE)?;
    let mut out_lm =
        lm.map_resized(CANONICAL_SIZE as u32, CANONICAL_SIZE as u32, |p| fwd.apply(p))?;
    let moved = out_lm.clamp_to_image();
    if moved > 0 {
        eprintln!("warning: align_and_crop clamped {moved} landmark(s) into the crop");
    }
    Ok((out, out_lm))
}

fn eye_center(lm: &LandmarkSet, idx: &[usize; 2]) -> [f64; 2] {
    let a = lm.point(idx[0]);
    let b = lm.point(idx[1]);
    [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]
}

/// Corner-aligned scalar bilinear resize.
pub fn resize_image(img: &ImageBuffer, ow: usize, oh: usize) -> Result<ImageBuffer> {
    if ow == 0 || oh == 0 {
        return Err(Error::InvalidArgument("resize_image: zero output size".into()));
    }
    let sx = if ow > 1 {
        (img.width() as f64 - 1.0) / (ow as f64 - 1.0)
    } else {
        0.0
    };
    let sy = if oh > 1 {
        (img.height() as f64 - 1.0) / (oh as f64 - 1.0)
    } else {
        0.0
    };
    let mut out = ImageBuffer::constant(ow, oh, 0.0);
    for y in 0..oh {
        for x in 0..ow {
            out.set_pixel(x, y, img.sample_bilinear(x as f64 * sx, y as f64 * sy));
        }
    }
    Ok(out)
}

fn crop_image(img: &ImageBuffer, x0: usize, y0: usize, w: usize, h: usize) -> ImageBuffer {
    let mut out = ImageBuffer::constant(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(x, y, img.pixel(x0 + x, y0 + y));
        }
    }
    out
}

fn flip_image(img: &ImageBuffer) -> ImageBuffer {
    let (w, h) = (img.width(), img.height());
    let mut out = ImageBuffer::constant(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(w - 1 - x, y, img.pixel(x, y));
        }
    }
    out
}

/// One training sample: an aligned photo and caricature with landmarks.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub photo: ImageBuffer,
    pub caricature: ImageBuffer,
    pub photo_landmarks: LandmarkSet,
    pub cari_landmarks: LandmarkSet,
    pub same_identity: bool,
}

fn flip_one(img: &ImageBuffer, lm: &LandmarkSet) -> Result<(ImageBuffer, LandmarkSet)> {
    let w = img.width() as f64;
    let lm = lm.map(|p| [w - 1.0 - p[0], p[1]])?.permuted(&FLIP_PERM)?;
    Ok((flip_image(img), lm))
}

fn resize_crop_one(
    img: &ImageBuffer,
    lm: &LandmarkSet,
    big: usize,
    off: (usize, usize),
) -> Result<(ImageBuffer, LandmarkSet)> {
    let (w, h) = (img.width(), img.height());
    let up = resize_image(img, big, big)?;
    let (sx, sy) = (
        (big as f64 - 1.0) / (w as f64 - 1.0),
        (big as f64 - 1.0) / (h as f64 - 1.0),
    );
    let out = crop_image(&up, off.0, off.1, w, h);
    let mut lm = lm.map(|p| [p[0] * sx - off.0 as f64, p[1] * sy - off.1 as f64])?;
    lm.clamp_to_image();
    Ok((out, lm))
}

/// Training-time augmentation: with probability 0.5 a horizontal flip, and
/// with probability 0.5 an upscale to 9/8 size followed by a random crop back
/// (256 -> 288 -> 256 at the canonical resolution). Each draw applies to both
/// images of the pair so they stay comparable.
pub fn augment(pair: &SamplePair, rng: &mut ChaCha8Rng) -> Result<SamplePair> {
    let mut pair = pair.clone();
    if rng.random_range(0.0f64..1.0) < 0.5 {
        let (pi, pl) = flip_one(&pair.photo, &pair.photo_landmarks)?;
        let (ci, cl) = flip_one(&pair.caricature, &pair.cari_landmarks)?;
        pair = SamplePair {
            photo: pi,
            caricature: ci,
            photo_landmarks: pl,
            cari_landmarks: cl,
            ..pair
        };
    }
    if rng.random_range(0.0f64..1.0) < 0.5 {
        let w = pair.photo.width();
        let big = w * 9 / 8;
        let margin = big - w;
        let off = (rng.random_range(0..=margin), rng.random_range(0..=margin));
        let (pi, pl) = resize_crop_one(&pair.photo, &pair.photo_landmarks, big, off)?;
        let (ci, cl) = resize_crop_one(&pair.caricature, &pair.cari_landmarks, big, off)?;
        pair = SamplePair {
            photo: pi,
            caricature: ci,
            photo_landmarks: pl,
            cari_landmarks: cl,
            ..pair
        };
    }
    Ok(pair)
}

/// One image with its landmark file.
#[derive(Debug, Clone)]
pub struct Entry {
    pub image: PathBuf,
    pub landmarks: PathBuf,
}

#[derive(Debug, Clone)]
pub struct IdentityRecord {
    pub name: String,
    pub photos: Vec<Entry>,
    pub caricatures: Vec<Entry>,
}

/// Index over a corpus laid out as `<root>/<Photo|Caricature>/<Identity>/...`
/// with landmark files mirrored under `<root>/landmarks/`.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub identities: Vec<IdentityRecord>,
}

const IMAGE_EXTS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(e.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

impl DatasetIndex {
    /// Scans the root layout. Every image must have a parsable 17-point
    /// landmark file; identities are ordered by name for determinism.
    pub fn build(root: &Path) -> Result<Self> {
        let mut names = BTreeSet::new();
        for domain in ["Photo", "Caricature"] {
            let dir = root.join(domain);
            if !dir.is_dir() {
                continue;
            }
            for p in sorted_entries(&dir)? {
                if p.is_dir() {
                    names.insert(p.file_name().unwrap().to_string_lossy().into_owned());
                }
            }
        }
        if names.is_empty() {
            return Err(Error::Dataset(format!(
                "no identities found under {}",
                root.display()
            )));
        }
        let collect = |domain: &str, name: &str| -> Result<Vec<Entry>> {
            let dir = root.join(domain).join(name);
            if !dir.is_dir() {
                return Ok(Vec::new());
            }
            let mut entries = Vec::new();
            for img in sorted_entries(&dir)? {
                let ext = img
                    .extension()
                    .map(|e| e.to_string_lossy().to_lowercase())
                    .unwrap_or_default();
                if !IMAGE_EXTS.contains(&ext.as_str()) {
                    continue;
                }
                let stem = img.file_stem().unwrap().to_string_lossy().into_owned();
                let lm = root
                    .join("landmarks")
                    .join(domain)
                    .join(name)
                    .join(format!("{stem}.txt"));
                if !lm.is_file() {
                    return Err(Error::Dataset(format!(
                        "missing landmark file {}",
                        lm.display()
                    )));
                }
                // validates the 17-point format up front; the real image size
                // is substituted at load time
                LandmarkSet::read(&lm, Some((1, 1)))?;
                entries.push(Entry {
                    image: img,
                    landmarks: lm,
                });
            }
            Ok(entries)
        };
        let identities = names
            .into_iter()
            .map(|name| {
                Ok(IdentityRecord {
                    photos: collect("Photo", &name)?,
                    caricatures: collect("Caricature", &name)?,
                    name,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            root: root.to_path_buf(),
            identities,
        })
    }

    /// `(photos, caricatures, identities)`.
    pub fn counts(&self) -> (usize, usize, usize) {
        let p = self.identities.iter().map(|i| i.photos.len()).sum();
        let c = self.identities.iter().map(|i| i.caricatures.len()).sum();
        (p, c, self.identities.len())
    }

    /// Restricts the index to the named identities.
    pub fn filter(&self, names: &[String]) -> Self {
        let keep: BTreeSet<&String> = names.iter().collect();
        Self {
            root: self.root.clone(),
            identities: self
                .identities
                .iter()
                .filter(|i| keep.contains(&i.name))
                .cloned()
                .collect(),
        }
    }
}

/// A persisted train/test identity partition.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    /// Draws a reproducible half/half identity split.
    pub fn draw(index: &DatasetIndex, seed: u64) -> Self {
        let mut names: Vec<String> = index.identities.iter().map(|i| i.name.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        names.shuffle(&mut rng);
        let test = names.split_off(names.len() / 2);
        Self { train: names, test }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::from("train:\n");
        for n in &self.train {
            text.push_str(n);
            text.push('\n');
        }
        text.push_str("test:\n");
        for n in &self.test {
            text.push_str(n);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut current: Option<&mut Vec<String>> = None;
        for line in text.lines() {
            let line = line.trim();
            match line {
                "" => {}
                "train:" => current = Some(&mut train),
                "test:" => current = Some(&mut test),
                name => match current {
                    Some(ref mut v) => v.push(name.to_string()),
                    None => {
                        return Err(Error::Dataset(format!(
                            "split file {}: identity before train:/test: header",
                            path.display()
                        )));
                    }
                },
            }
        }
        let overlap: Vec<&String> = train.iter().filter(|n| test.contains(n)).collect();
        if !overlap.is_empty() {
            return Err(Error::Dataset(format!(
                "split file {}: identities in both train and test: {overlap:?}",
                path.display()
            )));
        }
        Ok(Self { train, test })
    }
}

/// Pairing policy for drawing a photo/caricature sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairPolicy {
    /// Photo and caricature from the same identity (warper training).
    SameIdentity,
    /// Independent identity draws for each side (styler training).
    Random,
}

/// Picks the entry paths of one pair without touching the image files.
pub fn choose_pair_entries<'a>(
    index: &'a DatasetIndex,
    policy: PairPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<(&'a Entry, &'a Entry, bool)> {
    match policy {
        PairPolicy::SameIdentity => {
            let eligible: Vec<&IdentityRecord> = index
                .identities
                .iter()
                .filter(|i| !i.photos.is_empty() && !i.caricatures.is_empty())
                .collect();
            if eligible.is_empty() {
                return Err(Error::Dataset(
                    "same-identity pairing needs an identity with both a photo and a caricature"
                        .into(),
                ));
            }
            let id = eligible[rng.random_range(0..eligible.len())];
            let p = &id.photos[rng.random_range(0..id.photos.len())];
            let c = &id.caricatures[rng.random_range(0..id.caricatures.len())];
            Ok((p, c, true))
        }
        PairPolicy::Random => {
            let with_photos: Vec<&IdentityRecord> = index
                .identities
                .iter()
                .filter(|i| !i.photos.is_empty())
                .collect();
            let with_caris: Vec<&IdentityRecord> = index
                .identities
                .iter()
                .filter(|i| !i.caricatures.is_empty())
                .collect();
            if with_photos.is_empty() || with_caris.is_empty() {
                return Err(Error::Dataset(
                    "random pairing needs at least one photo and one caricature".into(),
                ));
            }
            let pi = with_photos[rng.random_range(0..with_photos.len())];
            let ci = with_caris[rng.random_range(0..with_caris.len())];
            let p = &pi.photos[rng.random_range(0..pi.photos.len())];
            let c = &ci.caricatures[rng.random_range(0..ci.caricatures.len())];
            Ok((p, c, pi.name == ci.name))
        }
    }
}

/// Loads an entry's image and its landmark file (untagged files take the
/// image's dimensions).
pub fn load_entry(entry: &Entry) -> Result<(ImageBuffer, LandmarkSet)> {
    let img = ImageBuffer::load(&entry.image)?;
    let lm = LandmarkSet::read(
        &entry.landmarks,
        Some((img.width() as u32, img.height() as u32)),
    )?;
    Ok((img, lm))
}

/// Draws one photo/caricature pair from a preprocessed index.
pub fn sample_pair(
    index: &DatasetIndex,
    policy: PairPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<SamplePair> {
    let (pe, ce, same_identity) = choose_pair_entries(index, policy, rng)?;
    let (photo, photo_landmarks) = load_entry(pe)?;
    let (caricature, cari_landmarks) = load_entry(ce)?;
    Ok(SamplePair {
        photo,
        caricature,
        photo_landmarks,
        cari_landmarks,
        same_identity,
    })
}

/// Aligns and crops every image of `in_root` into a mirrored layout under
/// `out_root`. Returns the number of images written.
pub fn preprocess(in_root: &Path, out_root: &Path) -> Result<usize> {
    let index = DatasetIndex::build(in_root)?;
    let mut written = 0;
    for id in &index.identities {
        for (domain, entries) in [("Photo", &id.photos), ("Caricature", &id.caricatures)] {
            if entries.is_empty() {
                continue;
            }
            let img_dir = out_root.join(domain).join(&id.name);
            let lm_dir = out_root.join("landmarks").join(domain).join(&id.name);
            std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
            std::fs::create_dir_all(&lm_dir).map_err(|e| Error::io(&lm_dir, e))?;
            for entry in entries {
                let (img, lm) = load_entry(entry)?;
                let (img, lm) = align_and_crop(&img, &lm)?;
                let stem = entry.image.file_stem().unwrap().to_string_lossy();
                img.save_png(&img_dir.join(format!("{stem}.png")))?;
                lm.write(&lm_dir.join(format!("{stem}.txt")))?;
                written += 1;
            }
        }
    }
    Ok(written)
}
