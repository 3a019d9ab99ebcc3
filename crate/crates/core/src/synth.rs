//! Synthetic cardiac-like benchmark: analytic short-axis phantoms (body,
//! left ventricle, myocardium, right ventricle) and smooth fold-free
//! ground-truth deformations built from Gaussian bumps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::grid::{jacobian_determinant, labels, normalize_intensity, DisplacementField, Grid2, LabelMask};
use crate::{io, Error, Result};

/// Anatomy geometry in fractions of the image side, so one spec renders at
/// any resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub size: usize,
    pub lv_center: (f64, f64),
    pub lv_radius: f64,
    pub myo_outer: f64,
    /// RV disk center offset from the LV center and its radius; the part
    /// not covered by the myocardium forms the crescent.
    pub rv_offset: (f64, f64),
    pub rv_radius: f64,
    pub body_axes: (f64, f64),
    pub intensity_body: f64,
    pub intensity_lv: f64,
    pub intensity_myo: f64,
    pub intensity_rv: f64,
    /// Edge width of the soft intensity transitions, pixels.
    pub edge: f64,
    pub noise_std: f64,
    /// Per-case random variation of positions and radii (fraction of side).
    pub jitter: f64,
}

impl PhantomSpec {
    pub fn with_size(size: usize) -> Self {
        PhantomSpec {
            size,
            lv_center: (0.54, 0.5),
            lv_radius: 0.125,
            myo_outer: 0.19,
            rv_offset: (-0.2, 0.02),
            rv_radius: 0.17,
            body_axes: (0.42, 0.34),
            intensity_body: 0.2,
            intensity_lv: 0.9,
            intensity_myo: 0.35,
            intensity_rv: 0.75,
            edge: 0.6,
            noise_std: 0.02,
            jitter: 0.02,
        }
    }

    pub fn desk() -> Self {
        Self::with_size(64)
    }

    pub fn paper_size() -> Self {
        Self::with_size(128)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("phantom: {m}")));
        if self.size < 8 {
            return bad("size must be at least 8");
        }
        if !(self.lv_radius > 0.0 && self.myo_outer > self.lv_radius && self.rv_radius > 0.0) {
            return bad("radii must be positive with the LV inside the myocardium");
        }
        let levels = [self.intensity_body, self.intensity_lv, self.intensity_myo, self.intensity_rv];
        if levels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("intensities must lie in [0, 1]");
        }
        if !(self.edge > 0.0) || !(self.noise_std >= 0.0) || !(self.jitter >= 0.0) {
            return bad("edge must be positive, noise and jitter non-negative");
        }
        Ok(())
    }
}

/// Gaussian-bump deformation parameters, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformSpec {
    pub bumps: usize,
    pub amplitude: (f64, f64),
    pub sigma: (f64, f64),
    /// Largest rigid translation added to the bumps.
    pub translation: f64,
}

/// Upper bound enforced on `max ‖∇u‖` (operator norm).
pub const GRADIENT_BOUND: f64 = 0.9;

impl DeformSpec {
    pub fn desk() -> Self {
        DeformSpec {
            bumps: 4,
            amplitude: (2.0, 6.0),
            sigma: (6.0, 12.0),
            translation: 3.0,
        }
    }

    /// Desk parameters scaled to another image side.
    pub fn for_size(size: usize) -> Self {
        let s = size as f64 / 64.0;
        let d = Self::desk();
        DeformSpec {
            amplitude: (d.amplitude.0 * s, d.amplitude.1 * s),
            sigma: (d.sigma.0 * s, d.sigma.1 * s),
            translation: d.translation * s,
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a0, a1) = self.amplitude;
        let (s0, s1) = self.sigma;
        if !(a0 >= 0.0 && a1 >= a0 && s0 > 0.0 && s1 >= s0 && self.translation >= 0.0) {
            return Err(Error::Invalid(format!(
                "deformation ranges must be ordered and non-negative: amplitude {:?}, sigma {:?}",
                self.amplitude, self.sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Bump {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    sigma: f64,
}

impl Bump {
    fn at(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let g = (-(dx * dx + dy * dy) / (2.0 * self.sigma * self.sigma)).exp();
        (self.ax * g, self.ay * g)
    }

    /// `max ‖∇u‖_op = |a| · e^{-1/2} / σ` for a single bump.
    fn gradient_bound(&self) -> f64 {
        self.ax.hypot(self.ay) * (-0.5f64).exp() / self.sigma
    }
}

fn field_of(shift: (f64, f64), bumps: &[Bump], size: usize) -> DisplacementField {
    DisplacementField::from_fn(size, size, |x, y| {
        bumps.iter().fold(shift, |(ux, uy), b| {
            let (bx, by) = b.at(x, y);
            (ux + bx, uy + by)
        })
    })
}

/// Per-case anatomy in pixel units.
#[derive(Debug, Clone, Copy)]
struct Anatomy {
    lv: (f64, f64),
    lv_r: f64,
    myo_r: f64,
    rv: (f64, f64),
    rv_r: f64,
    body: (f64, f64),
    body_axes: (f64, f64),
}

impl Anatomy {
    fn sample(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Self {
        let n = spec.size as f64;
        let mut j = |scale: f64| {
            if spec.jitter > 0.0 {
                rng.random_range(-spec.jitter..spec.jitter) * scale
            } else {
                0.0
            }
        };
        let c = (n - 1.0) / 2.0;
        let lv = (
            c + (spec.lv_center.0 - 0.5 + j(1.0)) * n,
            c + (spec.lv_center.1 - 0.5 + j(1.0)) * n,
        );
        let radius_scale = 1.0 + j(2.0);
        let lv_r = spec.lv_radius * n * radius_scale;
        let myo_r = spec.myo_outer * n * radius_scale;
        let rv = (
            lv.0 + (spec.rv_offset.0 + j(1.0)) * n,
            lv.1 + (spec.rv_offset.1 + j(1.0)) * n,
        );
        Anatomy {
            lv,
            lv_r,
            myo_r,
            rv,
            rv_r: spec.rv_radius * n * (1.0 + j(2.0)),
            body: (c, c),
            body_axes: (spec.body_axes.0 * n, spec.body_axes.1 * n),
        }
    }

    /// Signed distances (positive inside) to body, RV disk, myocardium outer
    /// disk and LV disk. The body uses a scaled radial distance.
    fn distances(&self, x: f64, y: f64) -> [f64; 4] {
        let disk = |c: (f64, f64), r: f64| r - (x - c.0).hypot(y - c.1);
        let (ex, ey) = ((x - self.body.0) / self.body_axes.0, (y - self.body.1) / self.body_axes.1);
        let body = (1.0 - ex.hypot(ey)) * self.body_axes.0.min(self.body_axes.1);
        [body, disk(self.rv, self.rv_r), disk(self.lv, self.myo_r), disk(self.lv, self.lv_r)]
    }

    fn intensity(&self, spec: &PhantomSpec, x: f64, y: f64) -> f64 {
        let d = self.distances(x, y);
        let levels = [spec.intensity_body, spec.intensity_rv, spec.intensity_myo, spec.intensity_lv];
        let mut v = 0.0;
        for (di, level) in d.iter().zip(levels) {
            let a = 0.5 * (1.0 + (di / spec.edge).tanh());
            v += a * (level - v);
        }
        v
    }

    fn label(&self, x: f64, y: f64) -> u8 {
        let [_, rv, myo, lv] = self.distances(x, y);
        if lv > 0.0 {
            labels::LV
        } else if myo > 0.0 {
            labels::MYO
        } else if rv > 0.0 {
            labels::RV
        } else {
            labels::BACKGROUND
        }
    }
}

/// One synthetic registration problem. `warp_image(moving, gt_field)`
/// reproduces `fixed` up to interpolation and noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub moving: Grid2,
    pub fixed: Grid2,
    pub moving_mask: LabelMask,
    pub fixed_mask: LabelMask,
    pub gt_field: DisplacementField,
}

fn sample_bumps(dspec: &DeformSpec, size: usize, rng: &mut ChaCha8Rng) -> Vec<Bump> {
    let n = size as f64;
    let mut range = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let mut bumps: Vec<Bump> = (0..dspec.bumps)
        .map(|_| {
            let cx = range(0.25 * n, 0.75 * n);
            let cy = range(0.25 * n, 0.75 * n);
            let amp = range(dspec.amplitude.0, dspec.amplitude.1);
            let angle = range(0.0, std::f64::consts::TAU);
            let sigma = range(dspec.sigma.0, dspec.sigma.1);
            Bump {
                cx,
                cy,
                ax: amp * angle.cos(),
                ay: amp * angle.sin(),
                sigma,
            }
        })
        .collect();
    let bound: f64 = bumps.iter().map(Bump::gradient_bound).sum();
    if bound >= GRADIENT_BOUND {
        let s = GRADIENT_BOUND / bound * 0.999;
        for b in &mut bumps {
            b.ax *= s;
            b.ay *= s;
        }
    }
    bumps
}

/// Renders a moving/fixed pair. All randomness derives from `seed`.
pub fn make_pair(pspec: &PhantomSpec, dspec: &DeformSpec, seed: u64) -> Result<Case> {
    pspec.validate()?;
    dspec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anatomy = Anatomy::sample(pspec, &mut rng);
    let mut bumps = sample_bumps(dspec, pspec.size, &mut rng);
    let shift = if dspec.translation > 0.0 {
        let r = dspec.translation * rng.random::<f64>().sqrt();
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        (r * angle.cos(), r * angle.sin())
    } else {
        (0.0, 0.0)
    };
    let n = pspec.size;

    // the analytic bound guarantees positivity of the continuous Jacobian;
    // shrink further if the discrete stencil ever disagrees
    let mut gt_field = field_of(shift, &bumps, n);
    while jacobian_determinant(&gt_field)?.data().iter().any(|&d| d < 0.0) {
        for b in &mut bumps {
            b.ax *= 0.9;
            b.ay *= 0.9;
        }
        gt_field = field_of(shift, &bumps, n);
    }

    let noise: Vec<f64> = if pspec.noise_std > 0.0 {
        let normal = Normal::new(0.0, pspec.noise_std).map_err(|e| Error::Invalid(e.to_string()))?;
        (0..n * n).map(|_| normal.sample(&mut rng)).collect()
    } else {
        vec![0.0; n * n]
    };

    let moving_raw = Grid2::from_fn(n, n, |x, y| anatomy.intensity(pspec, x as f64, y as f64) + noise[y * n + x]);
    let fixed_raw = Grid2::from_fn(n, n, |x, y| {
        let (px, py) = (x as f64 + gt_field.ux().get(x, y), y as f64 + gt_field.uy().get(x, y));
        anatomy.intensity(pspec, px, py) + noise[y * n + x]
    });
    let moving_mask = LabelMask::from_fn(n, n, |x, y| anatomy.label(x as f64, y as f64));
    let fixed_mask = LabelMask::from_fn(n, n, |x, y| {
        anatomy.label(x as f64 + gt_field.ux().get(x, y), y as f64 + gt_field.uy().get(x, y))
    });
    Ok(Case {
        moving: normalize_intensity(&moving_raw),
        fixed: normalize_intensity(&fixed_raw),
        moving_mask,
        fixed_mask,
        gt_field,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

pub const MIN_CASES: usize = 20;

/// `(train, val, test)` counts: floor of 75% and 5%, the rest to test.
pub fn split_counts(n: usize) -> Result<(usize, usize, usize)> {
    if n < MIN_CASES {
        return Err(Error::Invalid(format!("dataset needs at least {MIN_CASES} cases, got {n}")));
    }
    let train = n * 75 / 100;
    let val = n * 5 / 100;
    Ok((train, val, n - train - val))
}

/// Split of the case with index `i` (cases are assigned in index order).
pub fn split_of(i: usize, n: usize) -> Result<Split> {
    let (train, val, _) = split_counts(n)?;
    Ok(if i < train {
        Split::Train
    } else if i < train + val {
        Split::Val
    } else {
        Split::Test
    })
}

/// One manifest line: the case's index, seed, split and file names
/// relative to the dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub moving: PathBuf,
    pub fixed: PathBuf,
    pub moving_mask: PathBuf,
    pub fixed_mask: PathBuf,
    pub gt_field: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# index seed split moving fixed moving_mask fixed_mask gt_field";

impl ManifestEntry {
    fn for_case(index: usize, seed: u64, split: Split) -> Self {
        let stem = format!("case{index:04}");
        ManifestEntry {
            index,
            seed,
            split,
            moving: format!("{stem}_moving.pgm").into(),
            fixed: format!("{stem}_fixed.pgm").into(),
            moving_mask: format!("{stem}_moving_mask.gsmf").into(),
            fixed_mask: format!("{stem}_fixed_mask.gsmf").into(),
            gt_field: format!("{stem}_field.gsmf").into(),
        }
    }

    fn line(&self) -> String {
        format!(
            "{} {} {} {} {} {} {} {}",
            self.index,
            self.seed,
            self.split.name(),
            self.moving.display(),
            self.fixed.display(),
            self.moving_mask.display(),
            self.fixed_mask.display(),
            self.gt_field.display()
        )
    }
}

/// Case manifests for `n` cases with seeds `base_seed + i`.
pub fn make_dataset(n: usize, base_seed: u64) -> Result<Vec<ManifestEntry>> {
    (0..n)
        .map(|i| Ok(ManifestEntry::for_case(i, base_seed.wrapping_add(i as u64), split_of(i, n)?)))
        .collect()
}

/// Generates and writes every case plus the manifest into `dir`.
pub fn write_dataset(
    dir: &Path,
    n: usize,
    pspec: &PhantomSpec,
    dspec: &DeformSpec,
    base_seed: u64,
) -> Result<Vec<ManifestEntry>> {
    let entries = make_dataset(n, base_seed)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for e in &entries {
        let case = make_pair(pspec, dspec, e.seed)?;
        io::write_pgm(&dir.join(&e.moving), &case.moving)?;
        io::write_pgm(&dir.join(&e.fixed), &case.fixed)?;
        io::write_mask(&dir.join(&e.moving_mask), &case.moving_mask)?;
        io::write_mask(&dir.join(&e.fixed_mask), &case.fixed_mask)?;
        io::write_field(&dir.join(&e.gt_field), &case.gt_field)?;
        let _ = writeln!(manifest, "{}", e.line());
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let here = offset;
        offset += line.len() as u64 + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |msg: &str| Error::Format {
            path: path.clone(),
            offset: here,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(fail("expected 8 fields"));
        }
        out.push(ManifestEntry {
            index: f[0].parse().map_err(|_| fail("bad index"))?,
            seed: f[1].parse().map_err(|_| fail("bad seed"))?,
            split: Split::parse(f[2]).ok_or_else(|| fail("bad split"))?,
            moving: f[3].into(),
            fixed: f[4].into(),
            moving_mask: f[5].into(),
            fixed_mask: f[6].into(),
            gt_field: f[7].into(),
        });
    }
    Ok(out)
}

/// Loads one case written by [`write_dataset`].
pub fn load_case(dir: &Path, e: &ManifestEntry) -> Result<Case> {
    Ok(Case {
        moving: io::read_pgm(&dir.join(&e.moving))?,
        fixed: io::read_pgm(&dir.join(&e.fixed))?,
        moving_mask: io::read_mask(&dir.join(&e.moving_mask))?,
        fixed_mask: io::read_mask(&dir.join(&e.fixed_mask))?,
        gt_field: io::read_field(&dir.join(&e.gt_field))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::warp_image;
    use crate::metrics::{dice, njd_percent};

    #[test]
    fn zero_amplitude_gives_identical_images() {
        let d = DeformSpec {
            amplitude: (0.0, 0.0),
            translation: 0.0,
            ..DeformSpec::desk()
        };
        let c = make_pair(&PhantomSpec::desk(), &d, 5).unwrap();
        assert_eq!(c.moving, c.fixed);
        assert_eq!(c.moving_mask, c.fixed_mask);
        assert!(c.gt_field.ux().data().iter().chain(c.gt_field.uy().data()).all(|&v| v == 0.0));
    }

    #[test]
    fn ground_truth_is_fold_free_and_moves_anatomy() {
        for seed in 0..40 {
            let c = make_pair(&PhantomSpec::desk(), &DeformSpec::desk(), seed).unwrap();
            assert_eq!(njd_percent(&c.gt_field).unwrap(), 0.0, "seed {seed}");
            for l in labels::FOREGROUND {
                assert!(c.moving_mask.count(l) > 0, "seed {seed} label {l}");
                assert!(dice(&c.moving_mask, &c.fixed_mask, l).unwrap() < 1.0, "seed {seed} label {l}");
            }
            assert_eq!(c.moving.min(), 0.0);
            assert_eq!(c.moving.max(), 1.0);
        }
    }

    #[test]
    fn deterministic() {
        let a = make_pair(&PhantomSpec::desk(), &DeformSpec::desk(), 77).unwrap();
        let b = make_pair(&PhantomSpec::desk(), &DeformSpec::desk(), 77).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_pair(&PhantomSpec::desk(), &DeformSpec::desk(), 78).unwrap());
    }

    #[test]
    fn ground_truth_warp_reproduces_fixed() {
        let p = PhantomSpec {
            noise_std: 0.0,
            ..PhantomSpec::desk()
        };
        let c = make_pair(&p, &DeformSpec::desk(), 3).unwrap();
        let warped = warp_image(&c.moving, &c.gt_field).unwrap();
        let err = crate::metrics::image_mse(&warped, &c.fixed).unwrap();
        let before = crate::metrics::image_mse(&c.moving, &c.fixed).unwrap();
        assert!(err < 0.1 * before, "{err} vs {before}");
    }

    #[test]
    fn split_rule() {
        assert_eq!(split_counts(100).unwrap(), (75, 5, 20));
        assert_eq!(split_counts(20).unwrap(), (15, 1, 4));
        assert_eq!(split_counts(200).unwrap(), (150, 10, 40));
        assert!(split_counts(19).is_err());
        let m = make_dataset(20, 1000).unwrap();
        assert_eq!(m.iter().filter(|e| e.split == Split::Val).count(), 1);
        assert_eq!(m[19].seed, 1019);
        let mut idx: Vec<usize> = m.iter().map(|e| e.index).collect();
        idx.dedup();
        assert_eq!(idx.len(), 20);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut p = PhantomSpec::desk();
        p.myo_outer = p.lv_radius * 0.5;
        assert!(make_pair(&p, &DeformSpec::desk(), 0).is_err());
        let mut d = DeformSpec::desk();
        d.sigma = (0.0, 1.0);
        assert!(make_pair(&PhantomSpec::desk(), &d, 0).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let written = write_dataset(dir.path(), 20, &PhantomSpec::with_size(16), &DeformSpec::for_size(16), 9).unwrap();
        let read = read_manifest(dir.path()).unwrap();
        assert_eq!(written, read);
        let c = load_case(dir.path(), &read[2]).unwrap();
        let fresh = make_pair(&PhantomSpec::with_size(16), &DeformSpec::for_size(16), 11).unwrap();
        assert_eq!(c.moving_mask, fresh.moving_mask);
        for (a, b) in c.moving.data().iter().zip(fresh.moving.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }
}
