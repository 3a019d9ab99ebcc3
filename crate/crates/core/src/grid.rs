//! Dense 2-D grids, label masks, displacement fields and the operations on
//! them: intensity normalisation, bilinear warping (the spatial transformer),
//! nearest-neighbour label warping and finite-difference operators.
//!
//! Conventions used throughout the crate:
//! * pixel centres sit at integer coordinates, `x` indexes columns and `y` rows;
//! * displacements are in pixels and the deformation is `φ(x) = x + u(x)`;
//! * sampling outside the image replicates the border (coordinates are clamped).

use crate::{Error, Result};

/// Row-major dense scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid2 {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        Grid2 {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid(format!("empty grid {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::shape(
                "Grid2::from_vec",
                format!("{} values for a {height}x{width} grid", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value at index {i}")));
        }
        Ok(Grid2 {
            height,
            width,
            data,
        })
    }

    /// Builds a grid by evaluating `f(x, y)` at every pixel centre.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut g = Grid2::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                g.data[y * width + x] = f(x, y);
            }
        }
        g
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid2 {
        Grid2 {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Segmentation labels used by the benchmark.
pub mod labels {
    pub const BACKGROUND: u8 = 0;
    pub const LV: u8 = 1;
    pub const MYO: u8 = 2;
    pub const RV: u8 = 3;
    pub const FOREGROUND: [u8; 3] = [LV, MYO, RV];
    pub const MAX: u8 = RV;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        LabelMask {
            height,
            width,
            labels: vec![labels::BACKGROUND; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid(format!("empty mask {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::shape(
                "LabelMask::from_vec",
                format!("{} labels for a {height}x{width} mask", values.len()),
            ));
        }
        if let Some(&bad) = values.iter().find(|&&l| l > labels::MAX) {
            return Err(Error::Invalid(format!("label {bad} outside {{0,1,2,3}}")));
        }
        Ok(LabelMask {
            height,
            width,
            labels: values,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut m = LabelMask::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                let l = f(x, y);
                debug_assert!(l <= labels::MAX);
                m.labels[y * width + x] = l;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        assert!(label <= labels::MAX, "label {label} outside {{0,1,2,3}}");
        self.labels[y * self.width + x] = label;
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Per-pixel displacement `u = (u_x, u_y)` in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    ux: Grid2,
    uy: Grid2,
}

impl DisplacementField {
    pub fn new(ux: Grid2, uy: Grid2) -> Result<Self> {
        if ux.shape() != uy.shape() {
            return Err(Error::shape(
                "DisplacementField::new",
                format!("u_x is {:?}, u_y is {:?}", ux.shape(), uy.shape()),
            ));
        }
        Ok(DisplacementField { ux, uy })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        DisplacementField {
            ux: Grid2::zeros(height, width),
            uy: Grid2::zeros(height, width),
        }
    }

    /// Field from an analytic displacement `f(x, y) -> (u_x, u_y)`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let ux = Grid2::from_fn(height, width, |x, y| f(x as f64, y as f64).0);
        let uy = Grid2::from_fn(height, width, |x, y| f(x as f64, y as f64).1);
        DisplacementField { ux, uy }
    }

    pub fn ux(&self) -> &Grid2 {
        &self.ux
    }

    pub fn uy(&self) -> &Grid2 {
        &self.uy
    }

    pub fn shape(&self) -> (usize, usize) {
        self.ux.shape()
    }

    pub fn height(&self) -> usize {
        self.ux.height()
    }

    pub fn width(&self) -> usize {
        self.ux.width()
    }

    pub fn into_parts(self) -> (Grid2, Grid2) {
        (self.ux, self.uy)
    }

    /// Adds a constant translation to every displacement.
    pub fn translated(&self, tx: f64, ty: f64) -> DisplacementField {
        DisplacementField {
            ux: self.ux.map(|v| v + tx),
            uy: self.uy.map(|v| v + ty),
        }
    }

    pub fn negated(&self) -> DisplacementField {
        DisplacementField {
            ux: self.ux.map(|v| -v),
            uy: self.uy.map(|v| -v),
        }
    }
}

/// Linear rescale to `[0, 1]`; a constant image maps to all zeros.
pub fn normalize_intensity(img: &Grid2) -> Grid2 {
    let lo = img.min();
    let hi = img.max();
    let range = hi - lo;
    if range <= 0.0 || !range.is_finite() {
        return Grid2::zeros(img.height(), img.width());
    }
    img.map(|v| (v - lo) / range)
}

/// The four neighbours and weights of a bilinear lookup, after clamping the
/// query point into the image. `dx_active`/`dy_active` are false when the
/// coordinate was clamped, i.e. the sample does not move with it.
#[derive(Debug, Clone, Copy)]
pub struct BilinearStencil {
    pub i00: usize,
    pub i01: usize,
    pub i10: usize,
    pub i11: usize,
    pub fx: f64,
    pub fy: f64,
    pub dx_active: bool,
    pub dy_active: bool,
}

impl BilinearStencil {
    #[inline]
    pub fn new(height: usize, width: usize, x: f64, y: f64) -> Self {
        let xmax = (width - 1) as f64;
        let ymax = (height - 1) as f64;
        let dx_active = x > 0.0 && x < xmax;
        let dy_active = y > 0.0 && y < ymax;
        let xc = x.clamp(0.0, xmax);
        let yc = y.clamp(0.0, ymax);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(width - 1);
        let y1 = (y0 + 1).min(height - 1);
        BilinearStencil {
            i00: y0 * width + x0,
            i01: y0 * width + x1,
            i10: y1 * width + x0,
            i11: y1 * width + x1,
            fx: xc - x0 as f64,
            fy: yc - y0 as f64,
            dx_active,
            dy_active,
        }
    }

    #[inline]
    pub fn sample(&self, data: &[f64]) -> f64 {
        let top = (1.0 - self.fx) * data[self.i00] + self.fx * data[self.i01];
        let bottom = (1.0 - self.fx) * data[self.i10] + self.fx * data[self.i11];
        (1.0 - self.fy) * top + self.fy * bottom
    }

    /// Partial derivatives of the sampled value with respect to the query
    /// coordinates (zero along a clamped axis).
    #[inline]
    pub fn coord_grad(&self, data: &[f64]) -> (f64, f64) {
        let (v00, v01, v10, v11) = (data[self.i00], data[self.i01], data[self.i10], data[self.i11]);
        let gx = if self.dx_active {
            (1.0 - self.fy) * (v01 - v00) + self.fy * (v11 - v10)
        } else {
            0.0
        };
        let gy = if self.dy_active {
            (1.0 - self.fx) * (v10 - v00) + self.fx * (v11 - v01)
        } else {
            0.0
        };
        (gx, gy)
    }

    /// Scatters `weight` back onto the four neighbours (adjoint of `sample`).
    #[inline]
    pub fn scatter(&self, weight: f64, out: &mut [f64]) {
        out[self.i00] += weight * (1.0 - self.fx) * (1.0 - self.fy);
        out[self.i01] += weight * self.fx * (1.0 - self.fy);
        out[self.i10] += weight * (1.0 - self.fx) * self.fy;
        out[self.i11] += weight * self.fx * self.fy;
    }
}

pub fn bilinear_sample(img: &Grid2, x: f64, y: f64) -> f64 {
    BilinearStencil::new(img.height(), img.width(), x, y).sample(img.data())
}

fn check_field_shape(op: &'static str, shape: (usize, usize), field: &DisplacementField) -> Result<()> {
    if shape != field.shape() {
        return Err(Error::shape(
            op,
            format!("image is {:?}, field is {:?}", shape, field.shape()),
        ));
    }
    Ok(())
}

/// `out(x) = img(x + u(x))` with bilinear interpolation.
pub fn warp_image(img: &Grid2, field: &DisplacementField) -> Result<Grid2> {
    check_field_shape("warp_image", img.shape(), field)?;
    let (h, w) = img.shape();
    let (ux, uy) = (field.ux().data(), field.uy().data());
    let mut out = Grid2::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let s = BilinearStencil::new(h, w, x as f64 + ux[i], y as f64 + uy[i]);
            out.data[i] = s.sample(img.data());
        }
    }
    Ok(out)
}

/// Nearest-neighbour label warp; sample coordinates are clamped and rounded
/// half away from zero.
pub fn warp_labels(mask: &LabelMask, field: &DisplacementField) -> Result<LabelMask> {
    check_field_shape("warp_labels", mask.shape(), field)?;
    let (h, w) = mask.shape();
    let (ux, uy) = (field.ux().data(), field.uy().data());
    let mut out = LabelMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = (x as f64 + ux[i]).clamp(0.0, (w - 1) as f64).round() as usize;
            let sy = (y as f64 + uy[i]).clamp(0.0, (h - 1) as f64).round() as usize;
            out.labels[i] = mask.get(sx, sy);
        }
    }
    Ok(out)
}

/// Derivative along x: central in the interior, one-sided on the first and
/// last column.
fn central_dx(g: &Grid2, x: usize, y: usize) -> f64 {
    let w = g.width();
    if x == 0 {
        g.get(1, y) - g.get(0, y)
    } else if x == w - 1 {
        g.get(w - 1, y) - g.get(w - 2, y)
    } else {
        0.5 * (g.get(x + 1, y) - g.get(x - 1, y))
    }
}

fn central_dy(g: &Grid2, x: usize, y: usize) -> f64 {
    let h = g.height();
    if y == 0 {
        g.get(x, 1) - g.get(x, 0)
    } else if y == h - 1 {
        g.get(x, h - 1) - g.get(x, h - 2)
    } else {
        0.5 * (g.get(x, y + 1) - g.get(x, y - 1))
    }
}

/// Per-pixel `det(I + ∇u)`.
pub fn jacobian_determinant(field: &DisplacementField) -> Result<Grid2> {
    let (h, w) = field.shape();
    if h < 3 || w < 3 {
        return Err(Error::Invalid(format!(
            "jacobian_determinant needs at least 3x3, got {h}x{w}"
        )));
    }
    let (ux, uy) = (field.ux(), field.uy());
    Ok(Grid2::from_fn(h, w, |x, y| {
        let dux_dx = central_dx(ux, x, y);
        let dux_dy = central_dy(ux, x, y);
        let duy_dx = central_dx(uy, x, y);
        let duy_dy = central_dy(uy, x, y);
        (1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx
    }))
}

/// Forward differences `(g[y][x+1] - g[y][x], g[y+1][x] - g[y][x])`; the last
/// column (resp. row) is defined as zero.
pub fn spatial_gradient(g: &Grid2) -> Result<(Grid2, Grid2)> {
    let (h, w) = g.shape();
    if h < 2 || w < 2 {
        return Err(Error::Invalid(format!(
            "spatial_gradient needs at least 2x2, got {h}x{w}"
        )));
    }
    let gx = Grid2::from_fn(h, w, |x, y| if x + 1 < w { g.get(x + 1, y) - g.get(x, y) } else { 0.0 });
    let gy = Grid2::from_fn(h, w, |x, y| if y + 1 < h { g.get(x, y + 1) - g.get(x, y) } else { 0.0 });
    Ok((gx, gy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_x(h: usize, w: usize) -> Grid2 {
        Grid2::from_fn(h, w, |x, _| x as f64)
    }

    #[test]
    fn normalize_examples() {
        let g = Grid2::from_vec(1, 3, vec![2.0, 4.0, 6.0]).unwrap();
        assert_eq!(normalize_intensity(&g).data(), &[0.0, 0.5, 1.0]);

        let r = Grid2::from_vec(1, 5, vec![0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
        assert_eq!(normalize_intensity(&r), r);

        let c = Grid2::filled(4, 4, 5.0);
        assert!(normalize_intensity(&c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_examples() {
        let img = Grid2::from_fn(6, 5, |x, y| (x * 10 + y) as f64 * 0.37);
        assert_eq!(bilinear_sample(&img, 2.0, 3.0), img.get(2, 3));

        let two = Grid2::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(bilinear_sample(&two, 0.5, 0.0), 0.5);

        // x clamps to column 0, y still interpolates between rows.
        let v = bilinear_sample(&img, -5.0, 2.5);
        let expect = 0.5 * (img.get(0, 2) + img.get(0, 3));
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn warp_zero_field_is_identity() {
        let img = Grid2::from_fn(7, 9, |x, y| ((x * 31 + y * 17) % 11) as f64 / 11.0);
        let out = warp_image(&img, &DisplacementField::zeros(7, 9)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn warp_constant_shift_on_ramp() {
        let (h, w) = (5, 8);
        let img = ramp_x(h, w);
        let field = DisplacementField::from_fn(h, w, |_, _| (1.0, 0.0));
        let out = warp_image(&img, &field).unwrap();
        for y in 0..h {
            for x in 0..w {
                let expect = ((x + 1).min(w - 1)) as f64;
                assert_eq!(out.get(x, y), expect, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn warp_there_and_back_on_smooth_image() {
        let (h, w) = (32, 32);
        let img = Grid2::from_fn(h, w, |x, y| {
            0.5 + 0.25 * (x as f64 / 6.0).sin() * (y as f64 / 7.0).cos()
        });
        let field = DisplacementField::from_fn(h, w, |x, y| {
            (0.7 * (y as f64 / 9.0).sin(), 0.5 * (x as f64 / 11.0).cos())
        });
        let once = warp_image(&img, &field).unwrap();
        let back = warp_image(&once, &field.negated()).unwrap();
        for y in 4..h - 4 {
            for x in 4..w - 4 {
                assert!((back.get(x, y) - img.get(x, y)).abs() < 1e-2, "({x},{y})");
            }
        }
    }

    #[test]
    fn warp_shape_mismatch() {
        let img = Grid2::zeros(4, 4);
        assert!(matches!(
            warp_image(&img, &DisplacementField::zeros(4, 5)),
            Err(Error::Shape { .. })
        ));
        let m = LabelMask::zeros(4, 4);
        assert!(warp_labels(&m, &DisplacementField::zeros(3, 4)).is_err());
    }

    #[test]
    fn warp_labels_examples() {
        let mut m = LabelMask::zeros(10, 10);
        m.set(5, 5, labels::LV);
        assert_eq!(warp_labels(&m, &DisplacementField::zeros(10, 10)).unwrap(), m);

        let field = DisplacementField::from_fn(10, 10, |_, _| (1.0, 0.0));
        let out = warp_labels(&m, &field).unwrap();
        // Brute force: each output pixel takes the label at round(clamp(x + 1)).
        for y in 0..10 {
            for x in 0..10 {
                let sx = ((x + 1) as f64).clamp(0.0, 9.0).round() as usize;
                assert_eq!(out.get(x, y), m.get(sx, y));
            }
        }
        assert_eq!(out.get(4, 5), labels::LV);
        assert_eq!(out.count(labels::LV), 1);
    }

    #[test]
    fn jacobian_examples() {
        let ones = jacobian_determinant(&DisplacementField::zeros(6, 7)).unwrap();
        assert!(ones.data().iter().all(|&d| d == 1.0));

        let affine = DisplacementField::from_fn(8, 9, |x, y| (0.1 * x, 0.2 * y));
        let det = jacobian_determinant(&affine).unwrap();
        for y in 1..7 {
            for x in 1..8 {
                assert!((det.get(x, y) - 1.32).abs() < 1e-12);
            }
        }

        let fold = DisplacementField::from_fn(8, 8, |x, _| (-2.0 * x, 0.0));
        let det = jacobian_determinant(&fold).unwrap();
        assert!(det.data().iter().all(|&d| (d + 1.0).abs() < 1e-12));

        assert!(jacobian_determinant(&DisplacementField::zeros(2, 5)).is_err());
    }

    #[test]
    fn spatial_gradient_examples() {
        let (gx, gy) = spatial_gradient(&Grid2::filled(4, 5, 3.0)).unwrap();
        assert!(gx.data().iter().chain(gy.data()).all(|&v| v == 0.0));

        let (gx, gy) = spatial_gradient(&ramp_x(4, 5)).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(gx.get(x, y), if x == 4 { 0.0 } else { 1.0 });
                assert_eq!(gy.get(x, y), 0.0);
            }
        }

        let g = Grid2::from_fn(6, 6, |x, y| x as f64 + 2.0 * y as f64);
        let (gx, gy) = spatial_gradient(&g).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(gx.get(x, y), 1.0);
                assert_eq!(gy.get(x, y), 2.0);
            }
        }

        assert!(spatial_gradient(&Grid2::zeros(1, 1)).is_err());
    }

    fn arb_grid() -> impl Strategy<Value = Grid2> {
        (2usize..8, 2usize..8).prop_flat_map(|(h, w)| {
            prop::collection::vec(-10.0f64..10.0, h * w)
                .prop_map(move |d| Grid2::from_vec(h, w, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn zero_field_identity_exact(img in arb_grid()) {
            let f = DisplacementField::zeros(img.height(), img.width());
            prop_assert_eq!(warp_image(&img, &f).unwrap(), img);
        }

        #[test]
        fn bilinear_is_convex(img in arb_grid(), fx in 0.0f64..1.0, fy in 0.0f64..1.0, cx in 0usize..7, cy in 0usize..7) {
            let x0 = cx.min(img.width() - 2);
            let y0 = cy.min(img.height() - 2);
            let v = bilinear_sample(&img, x0 as f64 + fx, y0 as f64 + fy);
            let n = [img.get(x0, y0), img.get(x0 + 1, y0), img.get(x0, y0 + 1), img.get(x0 + 1, y0 + 1)];
            let lo = n.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = n.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        #[test]
        fn translation_has_unit_jacobian(h in 3usize..10, w in 3usize..10, tx in -5.0f64..5.0, ty in -5.0f64..5.0) {
            let f = DisplacementField::from_fn(h, w, |_, _| (tx, ty));
            let det = jacobian_determinant(&f).unwrap();
            prop_assert!(det.data().iter().all(|&d| d == 1.0));
        }

        #[test]
        fn affine_jacobian_matches_analytic(a in -0.9f64..0.9, b in -0.9f64..0.9, c in -0.9f64..0.9, d in -0.9f64..0.9) {
            let f = DisplacementField::from_fn(7, 7, |x, y| (a * x + b * y, c * x + d * y));
            let det = jacobian_determinant(&f).unwrap();
            let analytic = (1.0 + a) * (1.0 + d) - b * c;
            for y in 1..6 {
                for x in 1..6 {
                    prop_assert!((det.get(x, y) - analytic).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn warp_labels_closed(seed in any::<u64>(), amp in 0.0f64..6.0) {
            let (h, w) = (9, 11);
            let mask = LabelMask::from_fn(h, w, |x, y| (((x * 7 + y * 3) as u64 ^ seed) % 3) as u8 * (1 + (x % 2) as u8) / 2);
            let field = DisplacementField::from_fn(h, w, |x, y| (amp * (y / 3.0).sin(), -amp * (x / 2.0).cos()));
            let out = warp_labels(&mask, &field).unwrap();
            for &l in out.labels() {
                prop_assert!(mask.labels().contains(&l));
            }
        }
    }
}
