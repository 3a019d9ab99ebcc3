//! Evaluation criteria: Dice overlap, 95th-percentile Hausdorff distance,
//! image MSE, percentage of folding pixels, parameter count and inference
//! timing. Distances are in pixels with unit spacing.

use std::time::Instant;

use crate::grid::{jacobian_determinant, labels, DisplacementField, Grid2, LabelMask};
use crate::network::RegistrationModel;
use crate::{Error, Result};

fn check_masks(op: &'static str, a: &LabelMask, b: &LabelMask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)`; 1.0 when the label is absent from both.
pub fn dice(a: &LabelMask, b: &LabelMask, label: u8) -> Result<f64> {
    check_masks("dice", a, b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Pixels of `label` with at least one 4-neighbour that is not `label`;
/// positions outside the image count as other labels.
pub fn boundary(mask: &LabelMask, label: u8) -> Vec<(usize, usize)> {
    let (h, w) = mask.shape();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) != label {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || mask.get(x - 1, y) != label
                || mask.get(x + 1, y) != label
                || mask.get(x, y - 1) != label
                || mask.get(x, y + 1) != label;
            if edge {
                out.push((x, y));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance from every pixel to the nearest seed,
/// via two passes of the 1-D lower-envelope transform.
pub fn squared_distance_transform(h: usize, w: usize, seeds: &[(usize, usize)]) -> Vec<f64> {
    let inf = ((h * h + w * w) as f64) * 4.0 + 1.0;
    let mut grid = vec![inf; h * w];
    for &(x, y) in seeds {
        grid[y * w + x] = 0.0;
    }
    let mut f = vec![0.0; h.max(w)];
    let mut d = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut d[..h]);
        for y in 0..h {
            grid[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut d[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    grid
}

/// `d[q] = min_p (q - p)² + f[p]`.
fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates from -inf
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

/// Lower-rank percentile: element `floor(p · (n − 1))` of the sorted values.
fn percentile_lower(mut values: Vec<f64>, p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let idx = (p * (values.len() - 1) as f64).floor() as usize;
    values[idx]
}

fn directed_distances(from: &[(usize, usize)], to_dt: &[f64], w: usize) -> Vec<f64> {
    from.iter().map(|&(x, y)| to_dt[y * w + x].sqrt()).collect()
}

fn hausdorff_percentile(a: &LabelMask, b: &LabelMask, label: u8, p: f64, op: &'static str) -> Result<f64> {
    check_masks(op, a, b)?;
    let (h, w) = a.shape();
    let ba = boundary(a, label);
    let bb = boundary(b, label);
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::UndefinedDistance(format!(
            "label {label} is empty in {} mask",
            if ba.is_empty() { "the first" } else { "the second" }
        )));
    }
    let dt_a = squared_distance_transform(h, w, &ba);
    let dt_b = squared_distance_transform(h, w, &bb);
    let ab = percentile_lower(directed_distances(&ba, &dt_b, w), p);
    let ba_ = percentile_lower(directed_distances(&bb, &dt_a, w), p);
    Ok(ab.max(ba_))
}

/// `max(P95(d(∂A→∂B)), P95(d(∂B→∂A)))` over 4-connected boundaries.
pub fn hd95(a: &LabelMask, b: &LabelMask, label: u8) -> Result<f64> {
    hausdorff_percentile(a, b, label, 0.95, "hd95")
}

/// Full (100th percentile) symmetric Hausdorff distance between boundaries.
pub fn hausdorff(a: &LabelMask, b: &LabelMask, label: u8) -> Result<f64> {
    hausdorff_percentile(a, b, label, 1.0, "hausdorff")
}

pub fn image_mse(a: &Grid2, b: &Grid2) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("image_mse", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Percentage of pixels with a strictly negative Jacobian determinant.
pub fn njd_percent(field: &DisplacementField) -> Result<f64> {
    let det = jacobian_determinant(field)?;
    let neg = det.data().iter().filter(|&&d| d < 0.0).count();
    Ok(100.0 * neg as f64 / det.len() as f64)
}

pub fn param_count(model: &RegistrationModel) -> usize {
    model.param_count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub samples: usize,
}

pub const TIMING_WARMUP: usize = 3;

/// Wall-clock milliseconds per registration. Three warm-up registrations
/// run first and are discarded; then every pair is registered
/// `repetitions` times. The std is the sample std (0 for one sample).
pub fn timing(model: &RegistrationModel, pairs: &[(&Grid2, &Grid2)], repetitions: usize) -> Result<Timing> {
    if pairs.is_empty() || repetitions == 0 {
        return Err(Error::Invalid("timing needs at least one pair and one repetition".into()));
    }
    for i in 0..TIMING_WARMUP {
        let (f, m) = pairs[i % pairs.len()];
        model.predict(f, m)?;
    }
    let mut ms = Vec::with_capacity(repetitions * pairs.len());
    for _ in 0..repetitions {
        for &(f, m) in pairs {
            let start = Instant::now();
            let field = model.predict(f, m)?;
            std::hint::black_box(&field);
            ms.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    let n = ms.len() as f64;
    let mean = ms.iter().sum::<f64>() / n;
    let std = if ms.len() > 1 {
        (ms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(Timing {
        mean_ms: mean,
        std_ms: std,
        samples: ms.len(),
    })
}

/// Metrics of one registered test case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseMetrics {
    /// Dice for LV, Myo, RV.
    pub dice: [f64; 3],
    /// HD95 for LV, Myo, RV; `None` when a label vanished.
    pub hd95: [Option<f64>; 3],
    pub mse: f64,
    pub njd_percent: f64,
}

impl CaseMetrics {
    pub fn dice_mean(&self) -> f64 {
        self.dice.iter().sum::<f64>() / 3.0
    }

    pub fn hd95_mean(&self) -> Option<f64> {
        let defined: Vec<f64> = self.hd95.iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Scores a registration: `warped_mask`/`warped_image` are the moving mask
/// and image resampled by `field`.
pub fn evaluate_case(
    warped_mask: &LabelMask,
    fixed_mask: &LabelMask,
    warped_image: &Grid2,
    fixed_image: &Grid2,
    field: &DisplacementField,
) -> Result<CaseMetrics> {
    let mut dice_v = [0.0; 3];
    let mut hd = [None; 3];
    for (i, &l) in labels::FOREGROUND.iter().enumerate() {
        dice_v[i] = dice(warped_mask, fixed_mask, l)?;
        hd[i] = match hd95(warped_mask, fixed_mask, l) {
            Ok(v) => Some(v),
            Err(Error::UndefinedDistance(_)) => None,
            Err(e) => return Err(e),
        };
    }
    Ok(CaseMetrics {
        dice: dice_v,
        hd95: hd,
        mse: image_mse(warped_image, fixed_image)?,
        njd_percent: njd_percent(field)?,
    })
}

/// Averages over cases (HD95 over the cases where it is defined).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dice: [f64; 3],
    pub hd95: [Option<f64>; 3],
    pub mse: f64,
    pub njd_percent: f64,
    pub param_count: usize,
    pub timing: Option<Timing>,
    pub cases: usize,
}

impl EvalReport {
    pub fn from_cases(cases: &[CaseMetrics], param_count: usize, timing: Option<Timing>) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::Invalid("no cases to summarise".into()));
        }
        let n = cases.len() as f64;
        let mut dice_v = [0.0; 3];
        let mut hd = [None; 3];
        for i in 0..3 {
            dice_v[i] = cases.iter().map(|c| c.dice[i]).sum::<f64>() / n;
            let defined: Vec<f64> = cases.iter().filter_map(|c| c.hd95[i]).collect();
            hd[i] = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        }
        Ok(EvalReport {
            dice: dice_v,
            hd95: hd,
            mse: cases.iter().map(|c| c.mse).sum::<f64>() / n,
            njd_percent: cases.iter().map(|c| c.njd_percent).sum::<f64>() / n,
            param_count,
            timing,
            cases: cases.len(),
        })
    }

    pub fn dice_mean(&self) -> f64 {
        self.dice.iter().sum::<f64>() / 3.0
    }

    pub fn hd95_mean(&self) -> Option<f64> {
        let defined: Vec<f64> = self.hd95.iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}
