use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Number of facial landmarks per image (WebCaricature convention).
pub const NUM_LANDMARKS: usize = 17;

/// Ordered facial landmarks in pixel coordinates (x rightward, y downward).
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
    width: u32,
    height: u32,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>, width: u32, height: u32) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::Shape(format!(
                "expected {NUM_LANDMARKS} landmarks, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite landmark coordinate".into()));
        }
        Ok(Self {
            points,
            width,
            height,
        })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        self.points[i]
    }

    pub fn image_size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    /// Applies `f` to every point, keeping the declared image size.
    pub fn map(&self, mut f: impl FnMut([f64; 2]) -> [f64; 2]) -> Result<Self> {
        Self::new(self.points.iter().map(|&p| f(p)).collect(), self.width, self.height)
    }

    /// Same transform but with a new declared image size.
    pub fn map_resized(
        &self,
        width: u32,
        height: u32,
        mut f: impl FnMut([f64; 2]) -> [f64; 2],
    ) -> Result<Self> {
        Self::new(self.points.iter().map(|&p| f(p)).collect(), width, height)
    }

    /// Clamps every point into `[0, W-1] x [0, H-1]`. Returns how many points
    /// were moved.
    pub fn clamp_to_image(&mut self) -> usize {
        let (w, h) = (self.width as f64, self.height as f64);
        let mut moved = 0;
        for p in &mut self.points {
            let c = [p[0].clamp(0.0, w - 1.0), p[1].clamp(0.0, h - 1.0)];
            if c != *p {
                moved += 1;
            }
            *p = c;
        }
        moved
    }

    /// Reorders points under a horizontal flip so that left/right labelled
    /// landmarks keep their semantics after mirroring.
    pub fn permuted(&self, perm: &[usize; NUM_LANDMARKS]) -> Result<Self> {
        let points = perm.iter().map(|&i| self.points[i]).collect();
        Self::new(points, self.width, self.height)
    }

    /// Reads a landmark file: 17 lines of `x y`, optionally preceded by a
    /// `# size W H` tag. Untagged files take the size from `fallback_size`.
    pub fn read(path: &Path, fallback_size: Option<(u32, u32)>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut size = fallback_size;
        let mut points = Vec::with_capacity(NUM_LANDMARKS);
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let toks: Vec<&str> = rest.split_whitespace().collect();
                if toks.len() == 3 && toks[0] == "size" {
                    let w = toks[1].parse().map_err(|_| bad(path, "bad size tag"))?;
                    let h = toks[2].parse().map_err(|_| bad(path, "bad size tag"))?;
                    size = Some((w, h));
                }
                continue;
            }
            let mut it = line.split_whitespace();
            let x: f64 = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad(path, "expected `x y` pair"))?;
            let y: f64 = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad(path, "expected `x y` pair"))?;
            points.push([x, y]);
        }
        let (w, h) = size.ok_or_else(|| bad(path, "no image size available"))?;
        if points.len() != NUM_LANDMARKS {
            return Err(bad(path, &format!("expected 17 points, found {}", points.len())));
        }
        Self::new(points, w, h)
    }

    /// Writes the plain 17-line `x y` format.
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.format(false)).map_err(|e| Error::io(path, e))
    }

    /// Writes the format with a `# size W H` tag (used for the persisted
    /// mean landmarks, where no companion image exists).
    pub fn write_tagged(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.format(true)).map_err(|e| Error::io(path, e))
    }

    fn format(&self, tagged: bool) -> String {
        let mut out = String::new();
        if tagged {
            let _ = writeln!(out, "# size {} {}", self.width, self.height);
        }
        for p in &self.points {
            let _ = writeln!(out, "{} {}", p[0], p[1]);
        }
        out
    }
}

fn bad(path: &Path, reason: &str) -> Error {
    Error::Landmark {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Pointwise arithmetic mean of landmark sets sharing a canonical image size.
///
/// Summation is compensated (Kahan) so the result is insensitive to input
/// ordering.
pub fn mean_landmarks(sets: &[LandmarkSet]) -> Result<LandmarkSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean_landmarks: empty list".into()))?;
    let size = first.image_size();
    for s in sets {
        if s.image_size() != size {
            return Err(Error::InvalidArgument(format!(
                "mean_landmarks: mixed image sizes {:?} vs {:?}",
                size,
                s.image_size()
            )));
        }
    }
    let n = sets.len() as f64;
    let mut points = Vec::with_capacity(NUM_LANDMARKS);
    for i in 0..NUM_LANDMARKS {
        let mut mean = [0.0; 2];
        for c in 0..2 {
            let mut sum = 0.0f64;
            let mut comp = 0.0f64;
            for s in sets {
                let y = s.point(i)[c] - comp;
                let t = sum + y;
                comp = (t - sum) - y;
                sum = t;
            }
            mean[c] = sum / n;
        }
        points.push(mean);
    }
    LandmarkSet::new(points, size.0, size.1)
}
