//! Central finite-difference checks of the tape's analytic gradients.
//! Shared by the unit tests, `gsreg selftest` and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, NormMode, Tape, Tensor};
use crate::grid::Grid2;
use crate::network::{image_tensor, RegistrationModel, UNetConfig};
use crate::objective::Similarity;
use crate::Result;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-10)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-10)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_error < GRAD_TOL
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Compares adjoints of every leaf in `inputs` with central differences of
/// the scalar built by `build`.
pub fn check_graph(
    name: &str,
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> Result<CheckResult> {
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|t| tape.variable(t.clone())).collect();
        let root = build(&mut tape, &ids)?;
        Ok(tape.value(root).item())
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let root = build(&mut tape, &ids)?;
    let adj = tape.backward_full(root)?;
    let mut analytic = Vec::new();
    for (id, t) in ids.iter().zip(inputs) {
        match adj.get(*id) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut values = inputs.to_vec();
    for ti in 0..values.len() {
        for k in 0..values[ti].numel() {
            let orig = values[ti].data()[k];
            values[ti].data_mut()[k] = orig + FD_STEP;
            let up = eval(&values)?;
            values[ti].data_mut()[k] = orig - FD_STEP;
            let down = eval(&values)?;
            values[ti].data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        rel_error: relative_error(&analytic, &numeric),
    })
}

/// Every tape primitive on random `2×4×6×6` inputs, reduced to a scalar
/// through an MSE against a random target.
pub fn primitive_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, [2, 4, 6, 6], -1.0, 1.0);
    let x2 = random_tensor(&mut rng, [2, 3, 6, 6], -1.0, 1.0);
    let w = random_tensor(&mut rng, [3, 4, 3, 3], -0.5, 0.5);
    let b = random_tensor(&mut rng, [3, 1, 1, 1], -0.5, 0.5);
    let gamma = random_tensor(&mut rng, [4, 1, 1, 1], 0.5, 1.5);
    let beta = random_tensor(&mut rng, [4, 1, 1, 1], -0.5, 0.5);
    let running_mean: Vec<f64> = (0..4).map(|_| rng.random_range(-0.2..0.2)).collect();
    let running_var: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..1.5)).collect();
    let img = random_tensor(&mut rng, [2, 1, 6, 6], 0.0, 1.0);
    let field = random_tensor(&mut rng, [2, 2, 6, 6], -1.7, 1.7);

    let t_same = random_tensor(&mut rng, [2, 3, 6, 6], -1.0, 1.0);
    let t_stride = random_tensor(&mut rng, [2, 3, 3, 3], -1.0, 1.0);
    let t_x = random_tensor(&mut rng, [2, 4, 6, 6], -1.0, 1.0);
    let t_pool = random_tensor(&mut rng, [2, 4, 3, 3], -1.0, 1.0);
    let t_up = random_tensor(&mut rng, [2, 4, 12, 12], -1.0, 1.0);
    let t_cat = random_tensor(&mut rng, [2, 7, 6, 6], -1.0, 1.0);
    let t_img = random_tensor(&mut rng, [2, 1, 6, 6], 0.0, 1.0);

    let mut out = Vec::new();
    out.push(check_graph("conv2d", &[x.clone(), w.clone(), b.clone()], |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 1)?;
        t.mse(y, &t_same)
    })?);
    out.push(check_graph("conv2d_stride2", &[x.clone(), w, b], |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 2)?;
        t.mse(y, &t_stride)
    })?);
    out.push(check_graph("batch_norm_train", &[x.clone(), gamma.clone(), beta.clone()], |t, v| {
        let y = t.batch_norm(v[0], v[1], v[2], NormMode::Train, None)?;
        t.mse(y, &t_x)
    })?);
    out.push(check_graph("batch_norm_eval", &[x.clone(), gamma, beta], |t, v| {
        let y = t.batch_norm(v[0], v[1], v[2], NormMode::Eval, Some((&running_mean, &running_var)))?;
        t.mse(y, &t_x)
    })?);
    out.push(check_graph("leaky_relu", &[x.clone()], |t, v| {
        let y = t.leaky_relu(v[0], 0.2);
        t.mse(y, &t_x)
    })?);
    out.push(check_graph("maxpool2", &[x.clone()], |t, v| {
        let y = t.maxpool2(v[0])?;
        t.mse(y, &t_pool)
    })?);
    out.push(check_graph("upsample_nearest2", &[x.clone()], |t, v| {
        let y = t.upsample_nearest2(v[0]);
        t.mse(y, &t_up)
    })?);
    out.push(check_graph("concat_channels", &[x.clone(), x2], |t, v| {
        let y = t.concat_channels(v[0], v[1])?;
        t.mse(y, &t_cat)
    })?);
    out.push(check_graph("warp", &[img, field], |t, v| {
        let y = t.warp(v[0], v[1])?;
        t.mse(y, &t_img)
    })?);
    out.push(check_graph("add_scale_sum", &[x.clone(), t_x.clone()], |t, v| {
        let s = t.add(v[0], v[1])?;
        let s = t.scale(s, -0.7);
        let y = t.mse(s, &t_x)?;
        let z = t.sum(v[0]);
        let z = t.scale(z, 0.01);
        t.add(y, z)
    })?);
    Ok(out)
}

/// The three losses, differentiated through the warp with respect to a
/// directly parameterised displacement (and the moving image).
pub fn loss_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let moving = smooth_batch(&mut rng, 2, 10);
    let fixed = smooth_batch(&mut rng, 2, 10);
    let field = random_tensor(&mut rng, [2, 2, 10, 10], -1.5, 1.5);
    let fixed_t = image_tensor(&fixed.iter().collect::<Vec<_>>())?;
    let moving_t = image_tensor(&moving.iter().collect::<Vec<_>>())?;

    let mut out = Vec::new();
    out.push(check_graph("loss_mse", &[moving_t.clone(), field.clone()], |t, v| {
        let y = t.warp(v[0], v[1])?;
        t.mse(y, &fixed_t)
    })?);
    out.push(check_graph("loss_lncc", &[moving_t, field.clone()], |t, v| {
        let y = t.warp(v[0], v[1])?;
        t.lncc(y, &fixed_t, 5)
    })?);
    out.push(check_graph("loss_smoothness", &[field], |t, v| t.smoothness(v[0]))?);
    Ok(out)
}

fn smooth_batch(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<Grid2> {
    (0..n)
        .map(|_| {
            let (a, b, c) = (rng.random_range(0.3..0.9), rng.random_range(0.3..0.9), rng.random_range(0.0..3.0));
            Grid2::from_fn(size, size, |x, y| 0.5 + 0.25 * (a * x as f64 + c).sin() * (b * y as f64).cos())
        })
        .collect()
}

/// End-to-end check on a two-level U-Net (widths 2, 4) in train mode for
/// each loss. The zero head is randomised first so every layer receives
/// a gradient.
pub fn unet_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = RegistrationModel::unet(UNetConfig::custom(&[2, 4]), seed)?;
    let groups = model.groups_mut();
    for g in groups.iter_mut() {
        for t in g.tensors.iter_mut().skip(1) {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let head = groups.last_mut().expect("head group");
    for v in head.tensors[0].data_mut() {
        *v = rng.random_range(-0.3..0.3);
    }
    let fixed = smooth_batch(&mut rng, 2, 8);
    let moving = smooth_batch(&mut rng, 2, 8);
    let fr: Vec<&Grid2> = fixed.iter().collect();
    let mr: Vec<&Grid2> = moving.iter().collect();

    #[derive(Clone, Copy)]
    enum Which {
        Sim(Similarity),
        Reg,
    }
    let loss = |m: &RegistrationModel, which: Which| -> Result<(Tape, NodeId)> {
        let mut tape = Tape::new();
        let fwd = m.forward(&mut tape, &fr, &mr)?;
        let root = match which {
            Which::Sim(s) => {
                let mv = tape.input(image_tensor(&mr)?);
                let warped = tape.warp(mv, fwd.field)?;
                s.loss(&mut tape, warped, &image_tensor(&fr)?)?.node
            }
            Which::Reg => tape.smoothness(fwd.field)?,
        };
        Ok((tape, root))
    };

    let cases = [
        ("unet_mse", Which::Sim(Similarity::Mse)),
        ("unet_lncc", Which::Sim(Similarity::Lncc { window: 3 })),
        ("unet_smoothness", Which::Reg),
    ];
    let mut out = Vec::new();
    for (name, which) in cases {
        let (tape, root) = loss(&model, which)?;
        let grads = tape.backward(root)?;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let mut probe = model.clone();
        for gi in 0..probe.groups().len() {
            analytic.extend_from_slice(grads.get(&probe.groups()[gi].layer_id).expect("trainable group"));
            for ti in 0..probe.groups()[gi].tensors.len() {
                for k in 0..probe.groups()[gi].tensors[ti].numel() {
                    let orig = probe.groups()[gi].tensors[ti].data()[k];
                    probe.groups_mut()[gi].tensors[ti].data_mut()[k] = orig + FD_STEP;
                    let (t, r) = loss(&probe, which)?;
                    let up = t.value(r).item();
                    probe.groups_mut()[gi].tensors[ti].data_mut()[k] = orig - FD_STEP;
                    let (t, r) = loss(&probe, which)?;
                    let down = t.value(r).item();
                    probe.groups_mut()[gi].tensors[ti].data_mut()[k] = orig;
                    numeric.push((up - down) / (2.0 * FD_STEP));
                }
            }
        }
        out.push(CheckResult {
            name: name.to_string(),
            rel_error: relative_error(&analytic, &numeric),
        });
    }
    Ok(out)
}

pub fn all_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = primitive_checks(seed)?;
    out.extend(loss_checks(seed.wrapping_add(1))?);
    out.extend(unet_checks(seed.wrapping_add(2))?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 1.0]) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn every_check_passes() {
        for r in all_checks(7).unwrap() {
            assert!(r.passed(), "{}: {:e}", r.name, r.rel_error);
        }
    }
}
