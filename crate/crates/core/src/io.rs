//! On-disk formats.
//!
//! * Images: binary PGM (`P5`), 16-bit big-endian samples, `round(v · 65535)`.
//! * Fields, masks: `GSMF` containers. Header is the magic `GSMF` followed by
//!   little-endian `u32` version, channels, height, width; the payload is
//!   `C·H·W` row-major samples, channels outermost. Version 1 stores `f32`,
//!   version 2 stores `f64` (used inside checkpoints so resumed training is
//!   bit-exact).
//! * Checkpoints: magic `GSCK`, `u32` version, a text metadata block and a
//!   list of named version-2 `GSMF` records.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::{NormMode, ParamGroup, Tensor};
use crate::grid::{DisplacementField, Grid2, LabelMask};
use crate::network::{ModelKind, RegistrationModel, RunningStats, UNetConfig};
use crate::surgery::AdamState;
use crate::{Error, Result};

pub const GSMF_MAGIC: &[u8; 4] = b"GSMF";
pub const GSMF_HEADER_LEN: usize = 20;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GSCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn version(self) -> u32 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }

    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// A multi-channel 2-D array as stored in a `GSMF` container.
#[derive(Debug, Clone, PartialEq)]
pub struct Gsmf {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Gsmf {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "gsmf",
                format!("{} values for {channels}x{height}x{width}", data.len()),
            ));
        }
        Ok(Gsmf {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn encode(&self, precision: Precision) -> Vec<u8> {
        let mut out = Vec::with_capacity(GSMF_HEADER_LEN + self.data.len() * precision.width());
        out.extend_from_slice(GSMF_MAGIC);
        for v in [precision.version(), self.channels as u32, self.height as u32, self.width as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match precision {
            Precision::F32 => self.data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            Precision::F64 => self.data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
        out
    }

    /// Decodes one container from the front of `bytes`, returning it and the
    /// number of bytes consumed. `base` offsets error positions, `path` names
    /// the source in errors.
    pub fn decode_prefix(bytes: &[u8], path: &Path, base: u64) -> Result<(Gsmf, usize)> {
        let fail = |offset: usize, msg: String| Error::Format {
            path: path.to_path_buf(),
            offset: base + offset as u64,
            msg,
        };
        if bytes.len() < 4 {
            return Err(fail(bytes.len(), "truncated magic".into()));
        }
        if &bytes[..4] != GSMF_MAGIC {
            return Err(fail(0, format!("bad magic {:?}", &bytes[..4])));
        }
        if bytes.len() < GSMF_HEADER_LEN {
            return Err(fail(bytes.len(), "truncated header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let precision = match u32_at(4) {
            1 => Precision::F32,
            2 => Precision::F64,
            v => return Err(fail(4, format!("unsupported version {v}"))),
        };
        let (c, h, w) = (u32_at(8), u32_at(12), u32_at(16));
        let n = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| fail(8, "dimensions overflow".into()))?;
        let need = n
            .checked_mul(precision.width())
            .and_then(|v| v.checked_add(GSMF_HEADER_LEN))
            .ok_or_else(|| fail(8, "dimensions overflow".into()))?;
        if bytes.len() < need {
            return Err(fail(bytes.len(), format!("truncated payload, expected {need} bytes")));
        }
        let payload = &bytes[GSMF_HEADER_LEN..need];
        let data = match precision {
            Precision::F32 => payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect(),
            Precision::F64 => payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
        };
        Ok((
            Gsmf {
                channels: c,
                height: h,
                width: w,
                data,
            },
            need,
        ))
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Gsmf> {
        let (g, used) = Gsmf::decode_prefix(bytes, path, 0)?;
        if used != bytes.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: used as u64,
                msg: format!("{} trailing bytes", bytes.len() - used),
            });
        }
        Ok(g)
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_gsmf(path: &Path, array: &Gsmf, precision: Precision) -> Result<()> {
    write_bytes(path, &array.encode(precision))
}

pub fn read_gsmf(path: &Path) -> Result<Gsmf> {
    Gsmf::decode(&read_bytes(path)?, path)
}

pub fn write_field(path: &Path, field: &DisplacementField) -> Result<()> {
    let (h, w) = field.shape();
    let mut data = field.ux().data().to_vec();
    data.extend_from_slice(field.uy().data());
    write_gsmf(path, &Gsmf::new(2, h, w, data)?, Precision::F32)
}

pub fn read_field(path: &Path) -> Result<DisplacementField> {
    let g = read_gsmf(path)?;
    if g.channels != 2 {
        return Err(Error::shape("read_field", format!("{} has {} channels, expected 2", path.display(), g.channels)));
    }
    let plane = g.height * g.width;
    let ux = Grid2::from_vec(g.height, g.width, g.data[..plane].to_vec())?;
    let uy = Grid2::from_vec(g.height, g.width, g.data[plane..].to_vec())?;
    DisplacementField::new(ux, uy)
}

/// Single-channel grid at `f32` precision.
pub fn write_grid(path: &Path, grid: &Grid2) -> Result<()> {
    write_gsmf(path, &Gsmf::new(1, grid.height(), grid.width(), grid.data().to_vec())?, Precision::F32)
}

pub fn read_grid(path: &Path) -> Result<Grid2> {
    let g = read_gsmf(path)?;
    if g.channels != 1 {
        return Err(Error::shape("read_grid", format!("{} has {} channels, expected 1", path.display(), g.channels)));
    }
    Grid2::from_vec(g.height, g.width, g.data)
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    let (h, w) = mask.shape();
    let data = mask.labels().iter().map(|&l| l as f64).collect();
    write_gsmf(path, &Gsmf::new(1, h, w, data)?, Precision::F32)
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let g = read_gsmf(path)?;
    if g.channels != 1 {
        return Err(Error::shape("read_mask", format!("{} has {} channels, expected 1", path.display(), g.channels)));
    }
    let mut labels = Vec::with_capacity(g.data.len());
    for (i, &v) in g.data.iter().enumerate() {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (GSMF_HEADER_LEN + 4 * i) as u64,
                msg: format!("label value {v} is not a small integer"),
            });
        }
        labels.push(v as u8);
    }
    LabelMask::from_vec(g.height, g.width, labels)
}

pub const PGM_MAX: u16 = 65535;

/// 16-bit binary PGM. Intensities are clamped to `[0, 1]` before quantising.
pub fn encode_pgm(img: &Grid2) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", img.width(), img.height(), PGM_MAX).into_bytes();
    for &v in img.data() {
        let s = (v.clamp(0.0, 1.0) * PGM_MAX as f64).round() as u16;
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Grid2> {
    let fail = |offset: usize, msg: &str| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(fail(0, "expected P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(fail(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(start, "expected a number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fail(pos, "expected whitespace after maxval"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(fail(pos, "bad dimensions or maxval"));
    }
    let bps = if maxval > 255 { 2 } else { 1 };
    let need = pos + w * h * bps;
    if bytes.len() < need {
        return Err(fail(bytes.len(), "truncated raster"));
    }
    let raster = &bytes[pos..need];
    let data = if bps == 2 {
        raster
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / maxval as f64)
            .collect()
    } else {
        raster.iter().map(|&b| b as f64 / maxval as f64).collect()
    };
    Grid2::from_vec(h, w, data)
}

pub fn write_pgm(path: &Path, img: &Grid2) -> Result<()> {
    write_bytes(path, &encode_pgm(img))
}

pub fn read_pgm(path: &Path) -> Result<Grid2> {
    decode_pgm(&read_bytes(path)?, path)
}

/// Everything needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: RegistrationModel,
    pub optimizer: AdamState,
    /// Completed optimisation steps and epochs.
    pub step: u64,
    pub epoch: u64,
    /// The run configuration as text, for provenance.
    pub config: String,
}

fn kind_meta(kind: &ModelKind) -> String {
    match kind {
        ModelKind::UNet(cfg) => {
            let widths: Vec<String> = cfg.encoder_widths.iter().map(usize::to_string).collect();
            format!(
                "kind=unet\nwidths={}\nslope={}\npreset={}\n",
                widths.join(","),
                f64_hex(cfg.leaky_slope),
                cfg.preset
            )
        }
        ModelKind::DirectField { height, width } => format!("kind=direct_field\nheight={height}\nwidth={width}\n"),
    }
}

fn f64_hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn parse_hex_f64(s: &str) -> Option<f64> {
    u64::from_str_radix(s, 16).ok().map(f64::from_bits)
}

fn flat(data: &[f64]) -> Gsmf {
    Gsmf {
        channels: 1,
        height: 1,
        width: data.len(),
        data: data.to_vec(),
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut meta = kind_meta(self.model.kind());
        let mode = match self.model.mode() {
            NormMode::Train => "train",
            NormMode::Eval => "eval",
        };
        meta.push_str(&format!(
            "mode={mode}\nstep={}\nepoch={}\nadam_step={}\n",
            self.step, self.epoch, self.optimizer.step
        ));

        let mut records: Vec<(String, Gsmf)> = Vec::new();
        for (gi, g) in self.model.groups().iter().enumerate() {
            for (ti, t) in g.tensors.iter().enumerate() {
                records.push((format!("param/{}/{ti}", g.layer_id), flat(t.data())));
            }
            if let Some(r) = &self.model.running_stats()[gi] {
                records.push((format!("running_mean/{}", g.layer_id), flat(&r.mean)));
                records.push((format!("running_var/{}", g.layer_id), flat(&r.var)));
            }
        }
        for (id, m) in &self.optimizer.first {
            records.push((format!("adam_m/{id}"), flat(m)));
        }
        for (id, v) in &self.optimizer.second {
            records.push((format!("adam_v/{id}"), flat(v)));
        }

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for text in [&meta, &self.config] {
            out.extend_from_slice(&(text.len() as u32).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, g) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&g.encode(Precision::F64));
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let fail = |offset: usize, msg: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            msg,
        };
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
            match end {
                Some(e) => {
                    let s = &bytes[*pos..e];
                    *pos = e;
                    Ok(s)
                }
                None => Err(fail(*pos, format!("truncated, needed {n} more bytes"))),
            }
        };
        let read_u32 = |pos: &mut usize| -> Result<usize> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().expect("4 bytes")) as usize)
        };
        if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
            return Err(fail(0, "bad checkpoint magic".into()));
        }
        let version = read_u32(&mut pos)?;
        if version as u32 != CHECKPOINT_VERSION {
            return Err(fail(4, format!("unsupported checkpoint version {version}")));
        }
        let mut texts = Vec::new();
        for _ in 0..2 {
            let start = pos;
            let n = read_u32(&mut pos)?;
            let s = std::str::from_utf8(take(&mut pos, n)?).map_err(|_| fail(start + 4, "metadata is not UTF-8".into()))?;
            texts.push(s.to_string());
        }
        let meta: BTreeMap<&str, &str> = texts[0].lines().filter_map(|l| l.split_once('=')).collect();
        let count = read_u32(&mut pos)?;
        let mut records: BTreeMap<String, Gsmf> = BTreeMap::new();
        for _ in 0..count {
            let n = read_u32(&mut pos)?;
            let name_at = pos;
            let name = std::str::from_utf8(take(&mut pos, n)?)
                .map_err(|_| fail(name_at, "record name is not UTF-8".into()))?
                .to_string();
            let (g, used) = Gsmf::decode_prefix(&bytes[pos..], path, pos as u64)?;
            pos += used;
            records.insert(name, g);
        }
        if pos != bytes.len() {
            return Err(fail(pos, "trailing bytes".into()));
        }

        let get = |k: &str| meta.get(k).copied().ok_or_else(|| fail(8, format!("metadata lacks {k}")));
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| fail(8, format!("bad {k}"))) };
        let kind = match get("kind")? {
            "unet" => {
                let widths: Vec<usize> = get("widths")?
                    .split(',')
                    .map(|s| s.parse().map_err(|_| fail(8, "bad widths".into())))
                    .collect::<Result<_>>()?;
                let mut cfg = UNetConfig::custom(&widths);
                cfg.leaky_slope = parse_hex_f64(get("slope")?).ok_or_else(|| fail(8, "bad slope".into()))?;
                cfg.preset = get("preset")?.to_string();
                ModelKind::UNet(cfg)
            }
            "direct_field" => ModelKind::DirectField {
                height: num("height")? as usize,
                width: num("width")? as usize,
            },
            other => return Err(fail(8, format!("unknown model kind {other}"))),
        };
        let mode = match get("mode")? {
            "train" => NormMode::Train,
            "eval" => NormMode::Eval,
            other => return Err(fail(8, format!("unknown mode {other}"))),
        };
        let template = match &kind {
            ModelKind::UNet(cfg) => RegistrationModel::unet(cfg.clone(), 0)?,
            ModelKind::DirectField { height, width } => RegistrationModel::direct_field(*height, *width),
        };

        let mut record = |name: String, len: usize| -> Result<Vec<f64>> {
            let g = records.remove(&name).ok_or_else(|| fail(pos, format!("missing record {name}")))?;
            if g.data.len() != len {
                return Err(fail(pos, format!("record {name} has {} values, expected {len}", g.data.len())));
            }
            Ok(g.data)
        };
        let mut groups = Vec::new();
        let mut running = Vec::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (gi, tg) in template.groups().iter().enumerate() {
            let mut tensors = Vec::new();
            for (ti, t) in tg.tensors.iter().enumerate() {
                let data = record(format!("param/{}/{ti}", tg.layer_id), t.numel())?;
                tensors.push(Tensor::new(t.shape(), data)?);
            }
            let mut g = ParamGroup::new(tg.layer_id.clone(), tensors);
            g.trainable = tg.trainable;
            running.push(match &template.running_stats()[gi] {
                Some(r) => Some(RunningStats {
                    mean: record(format!("running_mean/{}", tg.layer_id), r.mean.len())?,
                    var: record(format!("running_var/{}", tg.layer_id), r.var.len())?,
                }),
                None => None,
            });
            if g.trainable {
                first.insert(g.layer_id.clone(), record(format!("adam_m/{}", g.layer_id), g.numel())?);
                second.insert(g.layer_id.clone(), record(format!("adam_v/{}", g.layer_id), g.numel())?);
            }
            groups.push(g);
        }
        if let Some(extra) = records.keys().next() {
            return Err(fail(pos, format!("unexpected record {extra}")));
        }
        Ok(Checkpoint {
            model: RegistrationModel::from_parts(kind, groups, running, mode)?,
            optimizer: AdamState {
                first,
                second,
                step: num("adam_step")?,
            },
            step: num("step")?,
            epoch: num("epoch")?,
            config: texts[1].clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::decode(&read_bytes(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn zero_field_layout() {
        let bytes = Gsmf::new(1, 2, 2, vec![0.0; 4]).unwrap().encode(Precision::F32);
        assert_eq!(bytes.len(), 20 + 16);
        assert_eq!(&bytes[..4], b"GSMF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert!(bytes[20..].iter().all(|&b| b == 0));
    }

    #[test]
    fn gsmf_errors_report_offsets() {
        let good = Gsmf::new(1, 2, 3, vec![1.0; 6]).unwrap().encode(Precision::F32);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Gsmf::decode(&bad, p()), Err(Error::Format { offset: 0, .. })));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(Gsmf::decode(&bad, p()), Err(Error::Format { offset: 4, .. })));
        let cut = &good[..good.len() - 3];
        match Gsmf::decode(cut, p()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, cut.len() as u64),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Gsmf::decode(&good[..10], p()), Err(Error::Format { offset: 10, .. })));
    }

    #[test]
    fn pgm_constant_one_is_all_max() {
        let bytes = encode_pgm(&Grid2::filled(3, 5, 1.0));
        let header = b"P5\n5 3\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0xff));
        assert_eq!(bytes.len(), header.len() + 30);
    }

    #[test]
    fn pgm_reads_comments_and_8_bit() {
        let mut bytes = b"P5\n# note\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let g = decode_pgm(&bytes, p()).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
        assert!(decode_pgm(b"P2\n1 1\n255\n0", p()).is_err());
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\x01", p()), Err(Error::Format { offset: 12, .. })));
    }

    #[test]
    fn mask_rejects_fractional_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gsmf");
        write_gsmf(&path, &Gsmf::new(1, 1, 2, vec![1.0, 0.5]).unwrap(), Precision::F32).unwrap();
        assert!(read_mask(&path).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model = RegistrationModel::unet(UNetConfig::custom(&[2, 4]), 3).unwrap();
        model.groups_mut()[0].tensors[1].data_mut()[0] = std::f64::consts::PI;
        let mut optimizer = AdamState::new(model.groups());
        optimizer.step = 7;
        optimizer.first.values_mut().next().unwrap()[0] = 1e-300;
        let ck = Checkpoint {
            model,
            optimizer,
            step: 42,
            epoch: 3,
            config: "strategy = layerwise\n".into(),
        };
        let back = Checkpoint::decode(&ck.encode(), p()).unwrap();
        assert_eq!(back, ck);

        let bytes = ck.encode();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1], p()), Err(Error::Format { .. })));

        let direct = Checkpoint {
            model: RegistrationModel::direct_field(4, 6),
            optimizer: AdamState::new(RegistrationModel::direct_field(4, 6).groups()),
            step: 0,
            epoch: 0,
            config: String::new(),
        };
        assert_eq!(Checkpoint::decode(&direct.encode(), p()).unwrap(), direct);
    }

    proptest! {
        #[test]
        fn gsmf_round_trips(c in 1usize..3, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1e3f64..1e3)).collect();
            let g = Gsmf::new(c, h, w, data.clone()).unwrap();
            prop_assert_eq!(&Gsmf::decode(&g.encode(Precision::F64), p()).unwrap(), &g);
            let single = Gsmf::new(c, h, w, data.iter().map(|&v| v as f32 as f64).collect()).unwrap();
            prop_assert_eq!(&Gsmf::decode(&single.encode(Precision::F32), p()).unwrap(), &single);
        }
    }
}
