//! Segmentation evaluation: binary Dice, 95% Hausdorff distance, paired
//! Student's t-test, Bland-Altman data rows, and the morphological
//! post-processing pipeline for muscle masks.

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Integer class id per pixel with pixel spacing in distance units.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub classes: usize,
    pub labels: Vec<usize>,
    /// Spacing per axis, (row, column).
    pub spacing: (f64, f64),
}

impl LabelMap {
    pub fn new(h: usize, w: usize, classes: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::shape("label count must equal h * w"));
        }
        if labels.iter().any(|&l| l >= classes) {
            return Err(Error::Domain("label id out of class range".into()));
        }
        Ok(LabelMap {
            h,
            w,
            classes,
            labels,
            spacing: (1.0, 1.0),
        })
    }

    pub fn with_spacing(mut self, row: f64, col: f64) -> Result<Self> {
        if row <= 0.0 || col <= 0.0 {
            return Err(Error::Domain("spacing must be positive".into()));
        }
        self.spacing = (row, col);
        Ok(self)
    }

    /// Binary mask of one class.
    pub fn class_mask(&self, c: usize) -> BinaryMask {
        BinaryMask {
            h: self.h,
            w: self.w,
            data: self.labels.iter().map(|&l| l == c).collect(),
        }
    }

    fn check_same_grid(&self, other: &LabelMap) -> Result<()> {
        if self.h != other.h || self.w != other.w {
            return Err(Error::shape(format!(
                "label maps differ in shape: {}x{} vs {}x{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(())
    }
}

/// Per-pixel argmax over the class axis of a probability map
/// ([c, h, w], [1, c, h, w] or [n, c, h, w] with n = 1).
pub fn argmax_labels<E: Elem>(probs: &Tensor<E>) -> Result<LabelMap> {
    let shape = probs.shape();
    let (c, h, w) = match shape.len() {
        3 => (shape[0], shape[1], shape[2]),
        4 if shape[0] == 1 => (shape[1], shape[2], shape[3]),
        _ => {
            return Err(Error::shape(format!(
                "expected [c, h, w] or [1, c, h, w] probabilities, got {shape:?}"
            )))
        }
    };
    let mut labels = vec![0usize; h * w];
    for i in 0..h * w {
        let mut best = probs.data()[i].to_f64();
        for cc in 1..c {
            let v = probs.data()[cc * h * w + i].to_f64();
            if v > best {
                best = v;
                labels[i] = cc;
            }
        }
    }
    LabelMap::new(h, w, c, labels)
}

/// `2|A intersect B| / (|A| + |B|)` for class `c`. Both masks empty is
/// scored 1; exactly one empty is scored 0.
pub fn dice_score(pred: &LabelMap, reference: &LabelMap, c: usize) -> Result<f64> {
    pred.check_same_grid(reference)?;
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &r) in pred.labels.iter().zip(&reference.labels) {
        let (pa, rb) = (p == c, r == c);
        a += pa as usize;
        b += rb as usize;
        inter += (pa && rb) as usize;
    }
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    })
}

/// Result of `hausdorff95`: either a distance or the empty-mask sentinel
/// (the spacing-scaled image diagonal).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hd95 {
    pub value: f64,
    pub sentinel: bool,
}

/// Directionality choice for the 95th-percentile Hausdorff distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HdMode {
    /// 95th percentile of both directed distance sets pooled together.
    Pooled,
    /// Maximum of the two directed 95th percentiles.
    MaxDirected,
}

/// 95% Hausdorff distance between the class-`c` boundaries, spacing
/// scaled. Boundary pixels are foreground pixels with a 4-neighbor
/// background (or out-of-bounds) pixel. Percentiles use linear
/// interpolation on the sorted distances.
pub fn hausdorff95(pred: &LabelMap, reference: &LabelMap, c: usize, mode: HdMode) -> Result<Hd95> {
    pred.check_same_grid(reference)?;
    let spacing = pred.spacing;
    let ba = boundary_points(&pred.class_mask(c));
    let bb = boundary_points(&reference.class_mask(c));
    if ba.is_empty() || bb.is_empty() {
        let diag = ((pred.h as f64 * spacing.0).powi(2) + (pred.w as f64 * spacing.1).powi(2)).sqrt();
        return Ok(Hd95 {
            value: diag,
            sentinel: true,
        });
    }
    let d_ab = directed_distances(&ba, &bb, spacing);
    let d_ba = directed_distances(&bb, &ba, spacing);
    let value = match mode {
        HdMode::Pooled => {
            let mut pooled = d_ab;
            pooled.extend(d_ba);
            percentile(&mut pooled, 0.95)
        }
        HdMode::MaxDirected => {
            let (mut a, mut b) = (d_ab, d_ba);
            percentile(&mut a, 0.95).max(percentile(&mut b, 0.95))
        }
    };
    Ok(Hd95 {
        value,
        sentinel: false,
    })
}

fn boundary_points(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..mask.h {
        for x in 0..mask.w {
            if !mask.get(y, x) {
                continue;
            }
            let edge = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                ny < 0
                    || nx < 0
                    || ny >= mask.h as i64
                    || nx >= mask.w as i64
                    || !mask.get(ny as usize, nx as usize)
            });
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

fn directed_distances(from: &[(usize, usize)], to: &[(usize, usize)], spacing: (f64, f64)) -> Vec<f64> {
    from.iter()
        .map(|&(ay, ax)| {
            to.iter()
                .map(|&(by, bx)| {
                    let dy = (ay as f64 - by as f64) * spacing.0;
                    let dx = (ax as f64 - bx as f64) * spacing.1;
                    (dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Linearly interpolated percentile of an unsorted sample, `q` in [0, 1].
fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] + frac * (values[hi] - values[lo])
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TTestResult {
    pub t: f64,
    pub p: f64,
    /// Zero difference variance: the t statistic is 0/0 (all diffs
    /// equal, p := 1 when the mean is 0) or infinite (p := 0).
    pub degenerate: bool,
}

/// Two-sided paired Student's t-test on `n - 1` degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::shape("paired test needs equal lengths"));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Domain("paired test needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTestResult {
                t: 0.0,
                p: 1.0,
                degenerate: true,
            }
        } else {
            TTestResult {
                t: if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY },
                p: 0.0,
                degenerate: true,
            }
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Domain(format!("t distribution: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTestResult {
        t,
        p,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BlandAltman {
    pub diffs: Vec<f64>,
    pub mean_diff: f64,
    pub sd_diff: f64,
    /// `mean_diff +- 1.96 * sd_diff`.
    pub limits: (f64, f64),
    /// Fraction of pairs where `a > b`.
    pub fraction_improved: f64,
}

/// Paired-difference summary (`a - b`) for agreement plots; data only,
/// no rendering. The standard deviation uses the `n - 1` denominator.
pub fn bland_altman(a: &[f64], b: &[f64]) -> Result<BlandAltman> {
    if a.len() != b.len() {
        return Err(Error::shape("bland_altman needs equal lengths"));
    }
    if a.is_empty() {
        return Err(Error::Domain("bland_altman needs at least one pair".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let improved = diffs.iter().filter(|&&d| d > 0.0).count() as f64 / n as f64;
    Ok(BlandAltman {
        mean_diff: mean,
        sd_diff: sd,
        limits: (mean - 1.96 * sd, mean + 1.96 * sd),
        fraction_improved: improved,
        diffs,
    })
}

/// A binary image on a rectangular grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(h, w);
        for y in 0..h {
            for x in 0..w {
                m.set(y, x, f(y, x));
            }
        }
        m
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.count() == 0
    }

    pub fn to_label_map(&self) -> LabelMap {
        LabelMap {
            h: self.h,
            w: self.w,
            classes: 2,
            labels: self.data.iter().map(|&b| b as usize).collect(),
            spacing: (1.0, 1.0),
        }
    }
}

/// Offsets of a disk structuring element of radius `r` (pixels with
/// squared distance <= r^2 from the center).
pub fn disk(r: usize) -> Vec<(i64, i64)> {
    let r = r as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Erosion: a pixel survives if the whole structuring element fits in
/// the foreground (out-of-bounds counts as background).
pub fn erode(mask: &BinaryMask, element: &[(i64, i64)]) -> BinaryMask {
    BinaryMask::from_fn(mask.h, mask.w, |y, x| {
        element.iter().all(|&(dy, dx)| {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            ny >= 0
                && nx >= 0
                && ny < mask.h as i64
                && nx < mask.w as i64
                && mask.get(ny as usize, nx as usize)
        })
    })
}

/// Dilation: a pixel turns on if any element offset hits the foreground.
pub fn dilate(mask: &BinaryMask, element: &[(i64, i64)]) -> BinaryMask {
    BinaryMask::from_fn(mask.h, mask.w, |y, x| {
        element.iter().any(|&(dy, dx)| {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            ny >= 0
                && nx >= 0
                && ny < mask.h as i64
                && nx < mask.w as i64
                && mask.get(ny as usize, nx as usize)
        })
    })
}

/// Morphological opening: erosion followed by dilation.
pub fn open(mask: &BinaryMask, element: &[(i64, i64)]) -> BinaryMask {
    dilate(&erode(mask, element), element)
}

/// Fill holes: background regions not connected (4-connectivity) to the
/// image border become foreground.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.h, mask.w);
    let mut outside = vec![false; h * w];
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if (y == 0 || x == 0 || y == h - 1 || x == w - 1) && !mask.get(y, x) {
                stack.push((y, x));
                outside[y * w + x] = true;
            }
        }
    }
    while let Some((y, x)) = stack.pop() {
        for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                let i = ny as usize * w + nx as usize;
                if !outside[i] && !mask.get(ny as usize, nx as usize) {
                    outside[i] = true;
                    stack.push((ny as usize, nx as usize));
                }
            }
        }
    }
    BinaryMask {
        h,
        w,
        data: (0..h * w).map(|i| mask.data[i] || !outside[i]).collect(),
    }
}

/// Connected components under 8-connectivity, returned as pixel lists.
pub fn components(mask: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (mask.h, mask.w);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if !mask.get(sy, sx) || seen[sy * w + sx] {
                continue;
            }
            let mut comp = Vec::new();
            let mut stack = vec![(sy, sx)];
            seen[sy * w + sx] = true;
            while let Some((y, x)) = stack.pop() {
                comp.push((y, x));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                            let i = ny as usize * w + nx as usize;
                            if mask.get(ny as usize, nx as usize) && !seen[i] {
                                seen[i] = true;
                                stack.push((ny as usize, nx as usize));
                            }
                        }
                    }
                }
            }
            out.push(comp);
        }
    }
    out
}

/// Muscle-mask post-processing: fill holes, erode (disk 3), dilate
/// (disk 5), open (disk 10), keep the largest component — unless the
/// second largest is at least 75% of it, in which case keep the more
/// superficial (smaller minimum row) of the two — then fill holes again.
pub fn postprocess_muscle(mask: &BinaryMask) -> BinaryMask {
    let m = fill_holes(mask);
    let m = erode(&m, &disk(3));
    let m = dilate(&m, &disk(5));
    let m = open(&m, &disk(10));

    let mut comps = components(&m);
    comps.sort_by_key(|c| std::cmp::Reverse(c.len()));
    let keep: Option<&Vec<(usize, usize)>> = match comps.len() {
        0 => None,
        1 => Some(&comps[0]),
        _ => {
            if comps[1].len() as f64 >= 0.75 * comps[0].len() as f64 {
                let top = |c: &Vec<(usize, usize)>| c.iter().map(|&(y, _)| y).min().unwrap();
                if top(&comps[1]) < top(&comps[0]) {
                    Some(&comps[1])
                } else {
                    Some(&comps[0])
                }
            } else {
                Some(&comps[0])
            }
        }
    };
    let mut out = BinaryMask::new(m.h, m.w);
    if let Some(comp) = keep {
        for &(y, x) in comp {
            out.set(y, x, true);
        }
    }
    fill_holes(&out)
}
