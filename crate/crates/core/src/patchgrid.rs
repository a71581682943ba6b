//! Key-patch enumeration, windowed block matching and overlap-averaged
//! aggregation of patch estimates.

use thiserror::Error;

use crate::imgio::{Image, ImageError};
use crate::lowrank::Mat;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("image {width}x{height} is smaller than a {d}x{d} patch")]
    ImageTooSmall { width: usize, height: usize, d: usize },
    #[error("search window holds {available} candidate patches, {needed} required")]
    InsufficientCandidates { available: usize, needed: usize },
    #[error("invalid patch spec: {0}")]
    InvalidSpec(String),
    #[error("patch at ({row}, {col}) leaves the image")]
    OutOfBounds { row: usize, col: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Patch geometry shared by matching and aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    /// Patch side length.
    pub d: usize,
    /// Step between key patches.
    pub stride: usize,
    /// Number of similar patches stacked per group (key included).
    pub m: usize,
    /// Side of the square search region, in pixels, centered on the key patch.
    pub window: usize,
}

impl PatchSpec {
    pub fn validate(&self) -> Result<(), PatchError> {
        let bad = |msg: String| Err(PatchError::InvalidSpec(msg));
        if self.d < 2 {
            return bad(format!("patch side {} < 2", self.d));
        }
        if self.stride == 0 || self.stride > self.d {
            return bad(format!("stride {} outside 1..={}", self.stride, self.d));
        }
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if self.window < self.d {
            return bad(format!("window {} < patch side {}", self.window, self.d));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.d * self.d
    }

    fn check_fits(&self, img: &Image) -> Result<(), PatchError> {
        if img.width() < self.d || img.height() < self.d {
            return Err(PatchError::ImageTooSmall {
                width: img.width(),
                height: img.height(),
                d: self.d,
            });
        }
        Ok(())
    }
}

/// Top-left corner of a `d × d` patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PatchRef {
    pub row: usize,
    pub col: usize,
}

impl PatchRef {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Group of similar patches, one vectorized patch (row-major) per column.
#[derive(Debug, Clone)]
pub struct PatchMatrix {
    pub data: Mat,
    /// Source of each column; `refs[0] == key`.
    pub refs: Vec<PatchRef>,
    pub key: PatchRef,
}

impl PatchMatrix {
    pub fn m(&self) -> usize {
        self.refs.len()
    }
}

/// Copies the patch at `at` into `out` (row-major).
pub fn extract_patch(img: &Image, at: PatchRef, d: usize, out: &mut [f64]) {
    let w = img.width();
    let px = img.pixels();
    for r in 0..d {
        let start = (at.row + r) * w + at.col;
        out[r * d..(r + 1) * d].copy_from_slice(&px[start..start + d]);
    }
}

fn grid_axis(extent: usize, d: usize, stride: usize) -> Vec<usize> {
    let last = extent - d;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().expect("non-empty axis") != last {
        starts.push(last);
    }
    starts
}

/// Key patches on a `stride` grid, row-major, with the last valid row and
/// column always included so every pixel is covered.
pub fn key_patch_grid(img: &Image, spec: &PatchSpec) -> Result<Vec<PatchRef>, PatchError> {
    spec.validate()?;
    spec.check_fits(img)?;
    let rows = grid_axis(img.height(), spec.d, spec.stride);
    let cols = grid_axis(img.width(), spec.d, spec.stride);
    Ok(rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| PatchRef::new(r, c)))
        .collect())
}

/// Candidate top-left range along one axis for a window centered on `key`.
fn window_axis(key: usize, extent: usize, spec: &PatchSpec) -> (usize, usize) {
    let span = spec.window - spec.d;
    let before = span / 2;
    let after = span - before;
    let lo = key.saturating_sub(before);
    let hi = (key + after).min(extent - spec.d);
    (lo, hi)
}

/// Number of candidate positions in the clipped window around `key`.
pub fn candidate_count(img: &Image, key: PatchRef, spec: &PatchSpec) -> usize {
    let (r0, r1) = window_axis(key.row, img.height(), spec);
    let (c0, c1) = window_axis(key.col, img.width(), spec);
    (r1 - r0 + 1) * (c1 - c0 + 1)
}

fn ssd(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Finds the `m` patches inside the search window closest to `key` in sum of
/// squared differences. Column 0 is the key itself; the rest follow in
/// nondecreasing SSD order with ties broken by row-major position.
pub fn block_match(img: &Image, key: PatchRef, spec: &PatchSpec) -> Result<PatchMatrix, PatchError> {
    let (_, refs) = match_refs(img, key, spec)?;
    Ok(stack_patches(img, key, refs, spec.d))
}

/// Matched refs together with their SSD to the key, in column order.
pub fn match_refs(
    img: &Image,
    key: PatchRef,
    spec: &PatchSpec,
) -> Result<(Vec<f64>, Vec<PatchRef>), PatchError> {
    spec.validate()?;
    spec.check_fits(img)?;
    let d = spec.d;
    if key.row + d > img.height() || key.col + d > img.width() {
        return Err(PatchError::OutOfBounds {
            row: key.row,
            col: key.col,
        });
    }
    let available = candidate_count(img, key, spec);
    if available < spec.m {
        return Err(PatchError::InsufficientCandidates {
            available,
            needed: spec.m,
        });
    }
    let (r0, r1) = window_axis(key.row, img.height(), spec);
    let (c0, c1) = window_axis(key.col, img.width(), spec);

    let mut key_patch = vec![0.0; d * d];
    extract_patch(img, key, d, &mut key_patch);
    let w = img.width();
    let px = img.pixels();

    // (ssd, row-major rank) of every non-key candidate
    let mut scored: Vec<(f64, usize, PatchRef)> = Vec::with_capacity(available - 1);
    let mut rank = 0;
    for r in r0..=r1 {
        for c in c0..=c1 {
            let here = PatchRef::new(r, c);
            if here != key {
                let mut total = 0.0;
                for pr in 0..d {
                    let start = (r + pr) * w + c;
                    total += ssd(&key_patch[pr * d..(pr + 1) * d], &px[start..start + d]);
                }
                scored.push((total, rank, here));
            }
            rank += 1;
        }
    }
    let order = |a: &(f64, usize, PatchRef), b: &(f64, usize, PatchRef)| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
    };
    let keep = spec.m - 1;
    if keep > 0 && keep < scored.len() {
        scored.select_nth_unstable_by(keep - 1, order);
    }
    scored.truncate(keep);
    scored.sort_by(order);

    let mut dists = Vec::with_capacity(spec.m);
    let mut refs = Vec::with_capacity(spec.m);
    dists.push(0.0);
    refs.push(key);
    for (s, _, r) in scored {
        dists.push(s);
        refs.push(r);
    }
    Ok((dists, refs))
}

/// Stacks the listed patches of `img` as the columns of a group matrix.
pub fn stack_patches(img: &Image, key: PatchRef, refs: Vec<PatchRef>, d: usize) -> PatchMatrix {
    let dim = d * d;
    let mut data = vec![0.0; dim * refs.len()];
    for (col, &r) in data.chunks_exact_mut(dim).zip(&refs) {
        extract_patch(img, r, d, col);
    }
    PatchMatrix {
        data: Mat::from_col_major(dim, refs.len(), data),
        refs,
        key,
    }
}

/// One patch-shaped estimate to be blended into an image.
#[derive(Debug, Clone)]
pub struct PatchEstimate {
    pub at: PatchRef,
    /// Row-major `d × d` values.
    pub values: Vec<f64>,
    pub weight: f64,
}

/// Running weighted sums for overlap averaging.
///
/// Estimates are accumulated in call order, so feeding the same sequence
/// always yields bit-identical output.
#[derive(Debug, Clone)]
pub struct Aggregator {
    width: usize,
    height: usize,
    d: usize,
    numer: Vec<f64>,
    denom: Vec<f64>,
}

impl Aggregator {
    pub fn new(width: usize, height: usize, d: usize) -> Self {
        Self {
            width,
            height,
            d,
            numer: vec![0.0; width * height],
            denom: vec![0.0; width * height],
        }
    }

    pub fn add(&mut self, at: PatchRef, values: &[f64], weight: f64) -> Result<(), PatchError> {
        let d = self.d;
        if at.row + d > self.height || at.col + d > self.width {
            return Err(PatchError::OutOfBounds {
                row: at.row,
                col: at.col,
            });
        }
        debug_assert_eq!(values.len(), d * d);
        for r in 0..d {
            let base = (at.row + r) * self.width + at.col;
            let src = &values[r * d..(r + 1) * d];
            for ((n, w), v) in self.numer[base..base + d]
                .iter_mut()
                .zip(&mut self.denom[base..base + d])
                .zip(src)
            {
                *n += weight * v;
                *w += weight;
            }
        }
        Ok(())
    }

    /// Weighted means; uncovered pixels copy `fallback`.
    pub fn finish(&self, fallback: &Image) -> Result<Image, PatchError> {
        if fallback.width() != self.width || fallback.height() != self.height {
            return Err(ImageError::DimensionMismatch(
                self.width,
                self.height,
                fallback.width(),
                fallback.height(),
            )
            .into());
        }
        let pixels = self
            .numer
            .iter()
            .zip(&self.denom)
            .zip(fallback.pixels())
            .map(|((n, w), f)| if *w > 0.0 { n / w } else { *f })
            .collect();
        Ok(Image::new(self.width, self.height, pixels)?)
    }
}

/// Overlap-averages patch estimates into a `width × height` image.
pub fn aggregate(
    estimates: &[PatchEstimate],
    width: usize,
    height: usize,
    fallback: &Image,
) -> Result<Image, PatchError> {
    let Some(first) = estimates.first() else {
        if fallback.width() != width || fallback.height() != height {
            return Err(ImageError::DimensionMismatch(width, height, fallback.width(), fallback.height()).into());
        }
        return Ok(fallback.clone());
    };
    let d = (first.values.len() as f64).sqrt().round() as usize;
    let mut acc = Aggregator::new(width, height, d);
    for e in estimates {
        if e.values.len() != d * d {
            return Err(PatchError::InvalidSpec(format!(
                "estimate with {} values, expected {}",
                e.values.len(),
                d * d
            )));
        }
        if e.weight.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(PatchError::InvalidSpec(format!("weight {} not positive", e.weight)));
        }
        acc.add(e.at, &e.values, e.weight)?;
    }
    acc.finish(fallback)
}
