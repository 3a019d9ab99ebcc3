//! Registration models: the U-Net that maps a (fixed, moving) pair to a
//! displacement field, and a direct-field model whose only parameters are
//! the displacement pixels themselves.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BatchStats, NodeId, NormMode, ParamGroup, Tape, Tensor, BN_MOMENTUM};
use crate::grid::{DisplacementField, Grid2};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    /// Feature widths from the top encoder level down to the bottleneck.
    pub encoder_widths: Vec<usize>,
    pub leaky_slope: f64,
    pub preset: String,
}

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

impl UNetConfig {
    pub fn paper() -> Self {
        UNetConfig {
            encoder_widths: vec![16, 32, 64, 128, 256],
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            preset: "paper".into(),
        }
    }

    pub fn desk() -> Self {
        UNetConfig {
            encoder_widths: vec![8, 16, 32],
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            preset: "desk".into(),
        }
    }

    pub fn custom(widths: &[usize]) -> Self {
        UNetConfig {
            encoder_widths: widths.to_vec(),
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            preset: "custom".into(),
        }
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }

    pub fn levels(&self) -> usize {
        self.encoder_widths.len()
    }

    /// Input height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    fn validate(&self) -> Result<()> {
        if self.levels() < 2 {
            return Err(Error::Invalid(format!(
                "U-Net needs at least 2 levels, got widths {:?}",
                self.encoder_widths
            )));
        }
        if self.encoder_widths.contains(&0) {
            return Err(Error::Invalid("U-Net widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    UNet(UNetConfig),
    DirectField { height: usize, width: usize },
}

/// Running batch-norm statistics of one normalised layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    fn absorb(&mut self, batch: &BatchStats) {
        let unbias = if batch.count > 1 {
            batch.count as f64 / (batch.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - BN_MOMENTUM) * self.mean[c] + BN_MOMENTUM * batch.mean[c];
            self.var[c] = (1.0 - BN_MOMENTUM) * self.var[c] + BN_MOMENTUM * batch.var[c] * unbias;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationModel {
    kind: ModelKind,
    groups: Vec<ParamGroup>,
    /// Indexed like `groups`; `None` for layers without normalisation.
    running: Vec<Option<RunningStats>>,
    mode: NormMode,
}

/// Result of a forward pass recorded on a tape.
pub struct Forward {
    /// `[N, 2, H, W]` displacement `(u_x, u_y)` per sample.
    pub field: NodeId,
    /// Train-mode batch-norm nodes, paired with the group they belong to.
    norm_nodes: Vec<(usize, NodeId)>,
}

fn he_conv(rng: &mut ChaCha8Rng, cout: usize, cin: usize, slope: f64) -> Tensor {
    let fan_in = (cin * 9) as f64;
    let std = (2.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..cout * cin * 9).map(|_| normal.sample(rng)).collect();
    Tensor::new([cout, cin, 3, 3], data).expect("sized")
}

fn norm_conv_group(id: String, rng: &mut ChaCha8Rng, cin: usize, cout: usize, slope: f64) -> ParamGroup {
    let ones = Tensor::new([cout, 1, 1, 1], vec![1.0; cout]).expect("sized");
    ParamGroup::new(
        id,
        vec![
            he_conv(rng, cout, cin, slope),
            Tensor::zeros([cout, 1, 1, 1]),
            ones,
            Tensor::zeros([cout, 1, 1, 1]),
        ],
    )
}

/// Stacks `fixed` and `moving` into a `[N, 2, H, W]` tensor, fixed first.
pub fn pair_tensor(fixed: &[&Grid2], moving: &[&Grid2]) -> Result<Tensor> {
    if fixed.is_empty() || fixed.len() != moving.len() {
        return Err(Error::shape(
            "pair_tensor",
            format!("{} fixed vs {} moving images", fixed.len(), moving.len()),
        ));
    }
    let (h, w) = fixed[0].shape();
    let mut data = Vec::with_capacity(fixed.len() * 2 * h * w);
    for (f, m) in fixed.iter().zip(moving) {
        if f.shape() != (h, w) || m.shape() != (h, w) {
            return Err(Error::shape(
                "pair_tensor",
                format!("fixed {:?} / moving {:?}, batch shape {:?}", f.shape(), m.shape(), (h, w)),
            ));
        }
        data.extend_from_slice(f.data());
        data.extend_from_slice(m.data());
    }
    Tensor::new([fixed.len(), 2, h, w], data)
}

/// Stacks single-channel images into `[N, 1, H, W]`.
pub fn image_tensor(images: &[&Grid2]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Invalid("empty image batch".into()));
    };
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.shape() != (h, w) {
            return Err(Error::shape("image_tensor", format!("{:?} vs {:?}", img.shape(), (h, w))));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new([images.len(), 1, h, w], data)
}

/// Splits a `[N, 2, H, W]` tensor into per-sample fields.
pub fn fields_from_tensor(t: &Tensor) -> Result<Vec<DisplacementField>> {
    let [n, c, h, w] = t.shape();
    if c != 2 {
        return Err(Error::shape("fields_from_tensor", format!("expected 2 channels, got {:?}", t.shape())));
    }
    let plane = h * w;
    (0..n)
        .map(|s| {
            let ux = Grid2::from_vec(h, w, t.data()[(2 * s) * plane..(2 * s + 1) * plane].to_vec())?;
            let uy = Grid2::from_vec(h, w, t.data()[(2 * s + 1) * plane..(2 * s + 2) * plane].to_vec())?;
            DisplacementField::new(ux, uy)
        })
        .collect()
}

impl RegistrationModel {
    /// U-Net with He-initialised convolutions and a zero-initialised output
    /// head, so a fresh model predicts the identity deformation.
    pub fn unet(cfg: UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slope = cfg.leaky_slope;
        let widths = cfg.encoder_widths.clone();
        let levels = widths.len();
        let mut groups = Vec::new();
        let mut running = Vec::new();
        let mut push = |g: ParamGroup, channels: Option<usize>| {
            groups.push(g);
            running.push(channels.map(RunningStats::new));
        };

        let mut cin = 2;
        for (l, &w) in widths.iter().enumerate() {
            push(norm_conv_group(format!("enc{l}.conv0"), &mut rng, cin, w, slope), Some(w));
            push(norm_conv_group(format!("enc{l}.conv1"), &mut rng, w, w, slope), Some(w));
            cin = w;
        }
        for l in (0..levels - 1).rev() {
            let (below, w) = (widths[l + 1], widths[l]);
            push(norm_conv_group(format!("dec{l}.up"), &mut rng, below, w, slope), Some(w));
            push(norm_conv_group(format!("dec{l}.conv0"), &mut rng, 2 * w, w, slope), Some(w));
            push(norm_conv_group(format!("dec{l}.conv1"), &mut rng, w, w, slope), Some(w));
        }
        push(
            ParamGroup::new("head", vec![Tensor::zeros([2, widths[0], 3, 3]), Tensor::zeros([2, 1, 1, 1])]),
            None,
        );

        Ok(RegistrationModel {
            kind: ModelKind::UNet(cfg),
            groups,
            running,
            mode: NormMode::Train,
        })
    }

    /// A model whose single parameter group `field` is the `[1, 2, H, W]`
    /// displacement itself, initialised to zero.
    pub fn direct_field(height: usize, width: usize) -> Self {
        RegistrationModel {
            kind: ModelKind::DirectField { height, width },
            groups: vec![ParamGroup::new("field", vec![Tensor::zeros([1, 2, height, width])])],
            running: vec![None],
            mode: NormMode::Train,
        }
    }

    /// Reassembles a model from stored state (used by checkpoint loading).
    pub fn from_parts(
        kind: ModelKind,
        groups: Vec<ParamGroup>,
        running: Vec<Option<RunningStats>>,
        mode: NormMode,
    ) -> Result<Self> {
        let template = match &kind {
            ModelKind::UNet(cfg) => RegistrationModel::unet(cfg.clone(), 0)?,
            ModelKind::DirectField { height, width } => RegistrationModel::direct_field(*height, *width),
        };
        if groups.len() != template.groups.len() || running.len() != template.running.len() {
            return Err(Error::shape(
                "RegistrationModel::from_parts",
                format!("{} groups, expected {}", groups.len(), template.groups.len()),
            ));
        }
        for (g, t) in groups.iter().zip(&template.groups) {
            let shapes: Vec<_> = g.tensors.iter().map(Tensor::shape).collect();
            let expect: Vec<_> = t.tensors.iter().map(Tensor::shape).collect();
            if g.layer_id != t.layer_id || shapes != expect {
                return Err(Error::shape(
                    "RegistrationModel::from_parts",
                    format!("group {} {:?}, expected {} {:?}", g.layer_id, shapes, t.layer_id, expect),
                ));
            }
        }
        for (r, t) in running.iter().zip(&template.running) {
            let ok = match (r, t) {
                (None, None) => true,
                (Some(r), Some(t)) => r.mean.len() == t.mean.len() && r.var.len() == t.var.len(),
                _ => false,
            };
            if !ok {
                return Err(Error::shape("RegistrationModel::from_parts", "running statistics layout"));
            }
        }
        Ok(RegistrationModel {
            kind,
            groups,
            running,
            mode,
        })
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn running_stats(&self) -> &[Option<RunningStats>] {
        &self.running
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: NormMode) {
        self.mode = mode;
    }

    pub fn trainable_ids(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.trainable)
            .map(|g| g.layer_id.as_str())
            .collect()
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.groups.iter().filter(|g| g.trainable).map(ParamGroup::numel).sum()
    }

    /// Records the model on `tape` for a batch of pairs. Network input
    /// channels are `(fixed, moving)` in that order.
    pub fn forward(&self, tape: &mut Tape, fixed: &[&Grid2], moving: &[&Grid2]) -> Result<Forward> {
        let input = pair_tensor(fixed, moving)?;
        let [n, _, h, w] = input.shape();
        let params = tape.bind_groups(&self.groups);
        match &self.kind {
            ModelKind::DirectField { height, width } => {
                if (h, w) != (*height, *width) || n != 1 {
                    return Err(Error::shape(
                        "forward",
                        format!("direct field model is {height}x{width} for one pair, got {n} of {h}x{w}"),
                    ));
                }
                Ok(Forward {
                    field: params[0][0],
                    norm_nodes: Vec::new(),
                })
            }
            ModelKind::UNet(cfg) => {
                let d = cfg.divisor();
                if h % d != 0 || w % d != 0 {
                    return Err(Error::Invalid(format!(
                        "input {h}x{w} must be divisible by {d} for a {}-level U-Net",
                        cfg.levels()
                    )));
                }
                let x = tape.input(input);
                self.unet_forward(tape, cfg, &params, x)
            }
        }
    }

    fn unet_forward(&self, tape: &mut Tape, cfg: &UNetConfig, params: &[Vec<NodeId>], x: NodeId) -> Result<Forward> {
        let slope = cfg.leaky_slope;
        let levels = cfg.levels();
        let mut norm_nodes = Vec::new();
        let mut layer = 0usize;
        let mut conv_block = |tape: &mut Tape, x: NodeId, layer: &mut usize| -> Result<NodeId> {
            let p = &params[*layer];
            let y = tape.conv2d(x, p[0], p[1], 1)?;
            let running = self.running[*layer].as_ref().map(|r| (r.mean.as_slice(), r.var.as_slice()));
            let y = tape.batch_norm(y, p[2], p[3], self.mode, running)?;
            if self.mode == NormMode::Train {
                norm_nodes.push((*layer, y));
            }
            *layer += 1;
            Ok(tape.leaky_relu(y, slope))
        };

        let mut skips = Vec::with_capacity(levels);
        let mut h = x;
        for l in 0..levels {
            if l > 0 {
                h = tape.maxpool2(h)?;
            }
            h = conv_block(tape, h, &mut layer)?;
            h = conv_block(tape, h, &mut layer)?;
            skips.push(h);
        }
        for l in (0..levels - 1).rev() {
            let up = tape.upsample_nearest2(h);
            let up = conv_block(tape, up, &mut layer)?;
            let cat = tape.concat_channels(up, skips[l])?;
            h = conv_block(tape, cat, &mut layer)?;
            h = conv_block(tape, h, &mut layer)?;
        }
        let head = &params[layer];
        let field = tape.conv2d(h, head[0], head[1], 1)?;
        Ok(Forward { field, norm_nodes })
    }

    /// Folds the batch statistics of a train-mode forward into the running
    /// statistics.
    pub fn absorb_batch_stats(&mut self, tape: &Tape, fwd: &Forward) {
        for &(layer, node) in &fwd.norm_nodes {
            if let (Some(stats), Some(r)) = (tape.batch_stats(node), self.running[layer].as_mut()) {
                r.absorb(&stats);
            }
        }
    }

    /// Predicts the displacement for a single pair in the current mode.
    pub fn predict(&self, fixed: &Grid2, moving: &Grid2) -> Result<DisplacementField> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, &[fixed], &[moving])?;
        let mut fields = fields_from_tensor(tape.value(fwd.field))?;
        Ok(fields.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, k: f64) -> Grid2 {
        Grid2::from_fn(h, w, |x, y| ((x as f64 * k).sin() + (y as f64 * 0.3).cos()) * 0.25 + 0.5)
    }

    /// Independent count: each normalised 3x3 conv has cout*cin*9 weights,
    /// cout biases and 2*cout norm parameters; the head has no norm.
    fn hand_count(widths: &[usize]) -> usize {
        let conv = |cin: usize, cout: usize| cout * cin * 9 + 3 * cout;
        let mut total = 0;
        let mut cin = 2;
        for &w in widths {
            total += conv(cin, w) + conv(w, w);
            cin = w;
        }
        for l in (0..widths.len() - 1).rev() {
            total += conv(widths[l + 1], widths[l]) + conv(2 * widths[l], widths[l]) + conv(widths[l], widths[l]);
        }
        total + 2 * widths[0] * 9 + 2
    }

    #[test]
    fn desk_param_count() {
        let m = RegistrationModel::unet(UNetConfig::desk(), 0).unwrap();
        assert_eq!(m.param_count(), hand_count(&[8, 16, 32]));
        assert_eq!(m.param_count(), 33098);
        assert_eq!(m.groups().len(), 6 + 6 + 1);
    }

    #[test]
    fn direct_field_param_count() {
        assert_eq!(RegistrationModel::direct_field(64, 64).param_count(), 8192);
    }

    #[test]
    fn desk_shapes_and_zero_init() {
        let m = RegistrationModel::unet(UNetConfig::desk(), 7).unwrap();
        let (f, mv) = (img(64, 64, 0.2), img(64, 64, 0.31));
        let mut tape = Tape::new();
        let fwd = m.forward(&mut tape, &[&f], &[&mv]).unwrap();
        assert_eq!(tape.value(fwd.field).shape(), [1, 2, 64, 64]);
        assert!(tape.value(fwd.field).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paper_preset_shape() {
        let m = RegistrationModel::unet(UNetConfig::paper(), 1).unwrap();
        let (f, mv) = (img(32, 48, 0.2), img(32, 48, 0.31));
        let field = m.predict(&f, &mv).unwrap();
        assert_eq!(field.shape(), (32, 48));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let m = RegistrationModel::unet(UNetConfig::desk(), 0).unwrap();
        let (f, mv) = (img(30, 32, 0.2), img(30, 32, 0.2));
        let err = m.predict(&f, &mv).unwrap_err();
        assert!(err.to_string().contains("divisible by 4"), "{err}");
    }

    #[test]
    fn too_few_levels() {
        assert!(RegistrationModel::unet(UNetConfig::custom(&[4]), 0).is_err());
    }

    #[test]
    fn direct_field_returns_parameters() {
        let mut m = RegistrationModel::direct_field(4, 5);
        let vals: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        m.groups_mut()[0].assign_flat(&vals).unwrap();
        let g = Grid2::zeros(4, 5);
        let field = m.predict(&g, &g).unwrap();
        assert_eq!(field.ux().data(), &vals[..20]);
        assert_eq!(field.uy().data(), &vals[20..]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut a = RegistrationModel::unet(UNetConfig::custom(&[4, 8]), 3).unwrap();
        // make the head non-zero so the output depends on every layer
        let head = a.groups_mut().last_mut().unwrap();
        let n = head.numel();
        head.assign_flat(&(0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.01).collect::<Vec<_>>()).unwrap();
        let b = a.clone();
        let (f, mv) = (img(16, 16, 0.4), img(16, 16, 0.7));
        assert_eq!(a.predict(&f, &mv).unwrap(), b.predict(&f, &mv).unwrap());
        assert_eq!(a.predict(&f, &mv).unwrap(), a.predict(&f, &mv).unwrap());
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut m = RegistrationModel::unet(UNetConfig::custom(&[2, 4]), 5).unwrap();
        let head = m.groups_mut().last_mut().unwrap();
        let n = head.numel();
        head.assign_flat(&vec![0.05; n]).unwrap();
        let (f, mv) = (img(8, 8, 0.4), img(8, 8, 0.9));
        let mut tape = Tape::new();
        let fwd = m.forward(&mut tape, &[&f], &[&mv]).unwrap();
        let before = m.running_stats()[0].clone();
        m.absorb_batch_stats(&tape, &fwd);
        assert_ne!(m.running_stats()[0], before);
        let train = m.predict(&f, &mv).unwrap();
        m.set_mode(NormMode::Eval);
        let eval = m.predict(&f, &mv).unwrap();
        assert_ne!(train, eval);
        assert_eq!(m.param_count(), RegistrationModel::unet(UNetConfig::custom(&[2, 4]), 5).unwrap().param_count());
    }
}
