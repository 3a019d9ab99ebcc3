//! The two competing training losses as tape scalars: image similarity
//! between the warped moving image and the fixed image, and the diffusion
//! smoothness penalty on the predicted displacement.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::{Error, Result};

pub const DEFAULT_LNCC_WINDOW: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub node: NodeId,
    pub value: f64,
}

impl LossValue {
    fn on(tape: &Tape, node: NodeId) -> Result<Self> {
        let value = tape.value(node).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {value}")));
        }
        Ok(LossValue { node, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    Mse,
    Lncc { window: usize },
}

impl Similarity {
    pub fn name(&self) -> &'static str {
        match self {
            Similarity::Mse => "mse",
            Similarity::Lncc { .. } => "lncc",
        }
    }

    pub fn loss(&self, tape: &mut Tape, warped: NodeId, fixed: &Tensor) -> Result<LossValue> {
        match *self {
            Similarity::Mse => mse_loss(tape, warped, fixed),
            Similarity::Lncc { window } => lncc_loss(tape, warped, fixed, window),
        }
    }
}

/// Mean over all pixels of `(warped - fixed)²`.
pub fn mse_loss(tape: &mut Tape, warped: NodeId, fixed: &Tensor) -> Result<LossValue> {
    let node = tape.mse(warped, fixed)?;
    LossValue::on(tape, node)
}

/// Negative mean squared local correlation over odd `window`s; ≈ −1 for
/// perfectly (affinely) correlated images.
pub fn lncc_loss(tape: &mut Tape, warped: NodeId, fixed: &Tensor, window: usize) -> Result<LossValue> {
    let node = tape.lncc(warped, fixed, window)?;
    LossValue::on(tape, node)
}

/// Mean over pixels and components of `|∇u_c|²` using forward differences.
pub fn smoothness_loss(tape: &mut Tape, field: NodeId) -> Result<LossValue> {
    let node = tape.smoothness(field)?;
    LossValue::on(tape, node)
}


#[cfg(test)]
mod properties {
    use super::*;
    use crate::grid::{warp_image, DisplacementField, Grid2};
    use crate::network::image_tensor;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn smoothness_ignores_constant_shift(
            vals in prop::collection::vec(-3.0f64..3.0, 36),
            // dyadic shifts keep every difference exact
            sx in -64i32..64, sy in -64i32..64,
        ) {
            let field = DisplacementField::new(
                Grid2::from_vec(6, 6, vals.iter().map(|v| (v * 1024.0).round() / 1024.0).collect()).unwrap(),
                Grid2::from_vec(6, 6, vals.iter().rev().map(|v| (v * 1024.0).round() / 1024.0).collect()).unwrap(),
            ).unwrap();
            let moved = field.translated(sx as f64 / 8.0, sy as f64 / 8.0);
            let value = |f: &DisplacementField| {
                let mut tape = Tape::new();
                let data = [f.ux().data(), f.uy().data()].concat();
                let n = tape.input(Tensor::new([1, 2, 6, 6], data).unwrap());
                smoothness_loss(&mut tape, n).unwrap().value
            };
            prop_assert_eq!(value(&field), value(&moved));
        }

        #[test]
        fn mse_through_zero_warp_is_plain_mse(
            a in prop::collection::vec(0.0f64..1.0, 25),
            b in prop::collection::vec(0.0f64..1.0, 25),
        ) {
            let m = Grid2::from_vec(5, 5, a).unwrap();
            let f = Grid2::from_vec(5, 5, b).unwrap();
            let warped = warp_image(&m, &DisplacementField::zeros(5, 5)).unwrap();
            let value = |img: &Grid2| {
                let mut tape = Tape::new();
                let n = tape.input(image_tensor(&[img]).unwrap());
                mse_loss(&mut tape, n, &image_tensor(&[&f]).unwrap()).unwrap().value
            };
            prop_assert_eq!(value(&warped), value(&m));
        }
    }
}
