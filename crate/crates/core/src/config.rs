//! Run configuration: a flat `key = value` text file, `#` starts a comment.
//! Every key is validated before any work starts and unknown keys are
//! rejected. Defaults depend on the preset (`desk` or `paper`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::network::UNetConfig;
use crate::objective::{Similarity, DEFAULT_LNCC_WINDOW};
use crate::surgery::Strategy;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub strategy: Strategy,
    pub similarity: Similarity,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seed for network initialisation, batch order and strategy noise.
    pub seed: u64,
    /// Base seed of the synthetic dataset.
    pub data_seed: u64,
    pub cases: usize,
    pub image_size: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Repetitions over the timing pairs when measuring inference speed.
    pub timing_repetitions: usize,
    pub timing_pairs: usize,
    /// Regimes trained by `compare`, in row order.
    pub compare: Vec<Strategy>,
}

/// Keys accepted in config files, with a one-line description each.
pub const KEYS: &[(&str, &str)] = &[
    ("preset", "desk | paper; selects network widths and defaults"),
    ("strategy", "layerwise | global | agr | weighted | similarity-only"),
    ("lambda", "regularisation weight for the weighted strategy"),
    ("sigma", "noise std for agr (default: per-layer gradient std)"),
    ("similarity", "mse | lncc"),
    ("window", "odd LNCC window size"),
    ("lr", "Adam learning rate"),
    ("batch_size", "pairs per optimisation step"),
    ("epochs", "passes over the training split"),
    ("seed", "initialisation and training seed"),
    ("data_seed", "base seed of the synthetic dataset"),
    ("cases", "number of synthetic cases (split 75/5/20)"),
    ("image_size", "side of the square synthetic images"),
    ("data_dir", "dataset directory"),
    ("out_dir", "output directory"),
    ("timing_repetitions", "repetitions of the timing loop"),
    ("timing_pairs", "test pairs used for timing"),
    ("compare", "comma-separated regimes for compare, e.g. layerwise,weighted:0.1"),
];

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (batch_size, epochs, image_size) = match name {
            "desk" => (8, 100, 64),
            "paper" => (32, 500, 128),
            other => return Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        };
        Ok(RunConfig {
            preset: name.to_string(),
            strategy: Strategy::LayerwiseProject,
            similarity: Similarity::Mse,
            lr: 5e-3,
            batch_size,
            epochs,
            seed: 0,
            data_seed: 1000,
            cases: 200,
            image_size,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            timing_repetitions: 5,
            timing_pairs: 8,
            compare: Strategy::comparison_set(),
        })
    }

    pub fn network(&self) -> UNetConfig {
        UNetConfig::from_preset(&self.preset).expect("preset validated")
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_entries(&Self::entries(text)?)
    }

    /// The raw `key = value` pairs of a config text, unvalidated.
    pub fn entries(text: &str) -> Result<BTreeMap<String, String>> {
        let mut entries: BTreeMap<String, String> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
        }
        Ok(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Builds a config from key/value pairs on top of the preset defaults.
    pub fn from_entries(entries: &BTreeMap<String, String>) -> Result<Self> {
        for k in entries.keys() {
            if !KEYS.iter().any(|(name, _)| name == k) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
        }
        let mut cfg = RunConfig::preset(entries.get("preset").map_or("desk", String::as_str))?;
        let get = |k: &str| entries.get(k).map(String::as_str);

        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{k}: cannot parse {v:?}")))
        }

        let lambda = get("lambda").map(|v| num::<f64>("lambda", v)).transpose()?;
        let sigma = get("sigma").map(|v| num::<f64>("sigma", v)).transpose()?;
        if let Some(s) = get("strategy") {
            cfg.strategy = s.parse()?;
        }
        match &mut cfg.strategy {
            Strategy::WeightedSum { lambda: l } => {
                if let Some(v) = lambda {
                    *l = v;
                }
            }
            _ if lambda.is_some() => return Err(Error::Config("lambda is only valid with strategy = weighted".into())),
            _ => {}
        }
        match &mut cfg.strategy {
            Strategy::AgrRandom { sigma: s } => *s = sigma,
            _ if sigma.is_some() => return Err(Error::Config("sigma is only valid with strategy = agr".into())),
            _ => {}
        }
        cfg.strategy.validate().map_err(|e| Error::Config(e.to_string()))?;

        let window = get("window").map(|v| num::<usize>("window", v)).transpose()?;
        cfg.similarity = match get("similarity").unwrap_or("mse") {
            "mse" if window.is_some() => return Err(Error::Config("window is only valid with similarity = lncc".into())),
            "mse" => Similarity::Mse,
            "lncc" => Similarity::Lncc {
                window: window.unwrap_or(DEFAULT_LNCC_WINDOW),
            },
            other => return Err(Error::Config(format!("unknown similarity {other:?} (expected mse or lncc)"))),
        };
        if let Similarity::Lncc { window } = cfg.similarity {
            if window < 3 || window % 2 == 0 {
                return Err(Error::Config(format!("window must be odd and >= 3, got {window}")));
            }
        }

        if let Some(v) = get("lr") {
            cfg.lr = num("lr", v)?;
        }
        if let Some(v) = get("batch_size") {
            cfg.batch_size = num("batch_size", v)?;
        }
        if let Some(v) = get("epochs") {
            cfg.epochs = num("epochs", v)?;
        }
        if let Some(v) = get("seed") {
            cfg.seed = num("seed", v)?;
        }
        if let Some(v) = get("data_seed") {
            cfg.data_seed = num("data_seed", v)?;
        }
        if let Some(v) = get("cases") {
            cfg.cases = num("cases", v)?;
        }
        if let Some(v) = get("image_size") {
            cfg.image_size = num("image_size", v)?;
        }
        if let Some(v) = get("data_dir") {
            cfg.data_dir = PathBuf::from(v);
        }
        if let Some(v) = get("out_dir") {
            cfg.out_dir = PathBuf::from(v);
        }
        if let Some(v) = get("timing_repetitions") {
            cfg.timing_repetitions = num("timing_repetitions", v)?;
        }
        if let Some(v) = get("timing_pairs") {
            cfg.timing_pairs = num("timing_pairs", v)?;
        }
        if let Some(v) = get("compare") {
            cfg.compare = parse_strategy_list(v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if self.cases < crate::synth::MIN_CASES {
            return bad(format!("cases must be at least {}", crate::synth::MIN_CASES));
        }
        let d = self.network().divisor();
        if self.image_size < 8 || self.image_size % d != 0 {
            return bad(format!(
                "image_size {} must be at least 8 and divisible by {d} for preset {}",
                self.image_size, self.preset
            ));
        }
        if self.timing_repetitions == 0 || self.timing_pairs == 0 {
            return bad("timing_repetitions and timing_pairs must be positive".into());
        }
        if self.compare.is_empty() {
            return bad("compare needs at least one strategy".into());
        }
        self.strategy.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("preset", self.preset.clone());
        let (name, extra) = strategy_key(&self.strategy);
        kv("strategy", name.to_string());
        if let Some(e) = extra {
            kv(e.0, e.1);
        }
        match self.similarity {
            Similarity::Mse => kv("similarity", "mse".into()),
            Similarity::Lncc { window } => {
                kv("similarity", "lncc".into());
                kv("window", window.to_string());
            }
        }
        kv("lr", format!("{:?}", self.lr));
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("cases", self.cases.to_string());
        kv("image_size", self.image_size.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("timing_repetitions", self.timing_repetitions.to_string());
        kv("timing_pairs", self.timing_pairs.to_string());
        kv(
            "compare",
            self.compare.iter().map(strategy_token).collect::<Vec<_>>().join(","),
        );
        s
    }
}

fn strategy_key(s: &Strategy) -> (&'static str, Option<(&'static str, String)>) {
    match *s {
        Strategy::LayerwiseProject => ("layerwise", None),
        Strategy::GlobalProject => ("global", None),
        Strategy::AgrRandom { sigma } => ("agr", sigma.map(|v| ("sigma", format!("{v:?}")))),
        Strategy::WeightedSum { lambda } => ("weighted", Some(("lambda", format!("{lambda:?}")))),
        Strategy::SimilarityOnly => ("similarity-only", None),
    }
}

/// `name[:parameter]`, e.g. `weighted:0.1` or `agr:0.5`.
pub fn strategy_token(s: &Strategy) -> String {
    match strategy_key(s) {
        (name, Some((_, v))) => format!("{name}:{v}"),
        (name, None) => name.to_string(),
    }
}

pub fn parse_strategy_token(tok: &str) -> Result<Strategy> {
    let (name, param) = match tok.split_once(':') {
        Some((n, p)) => (n.trim(), Some(p.trim())),
        None => (tok.trim(), None),
    };
    let mut s: Strategy = name.parse()?;
    if let Some(p) = param {
        let v: f64 = p
            .parse()
            .map_err(|_| Error::Config(format!("bad parameter in strategy {tok:?}")))?;
        match &mut s {
            Strategy::WeightedSum { lambda } => *lambda = v,
            Strategy::AgrRandom { sigma } => *sigma = Some(v),
            _ => return Err(Error::Config(format!("strategy {name} takes no parameter"))),
        }
    }
    s.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(s)
}

pub fn parse_strategy_list(v: &str) -> Result<Vec<Strategy>> {
    v.split(',').filter(|t| !t.trim().is_empty()).map(parse_strategy_token).collect()
}
