//! The experiment protocol behind the `gsreg` commands: dataset generation,
//! training with step logs and checkpoints, registration of single pairs,
//! evaluation over the test split, the multi-strategy comparison and the
//! self test.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::NormMode;
use crate::config::RunConfig;
use crate::grid::{warp_image, warp_labels, DisplacementField, Grid2};
use crate::io::{self, Checkpoint};
use crate::metrics::{self, evaluate_case, CaseMetrics, EvalReport, Timing};
use crate::network::RegistrationModel;
use crate::surgery::{project_if_conflict, train_step, AdamState, Batch, StepReport, Strategy};
use crate::synth::{self, Case, DeformSpec, PhantomSpec, Split};
use crate::{gradcheck, Error, Result};

pub const STEPS_FILE: &str = "steps.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.gsck";
pub const EVAL_FILE: &str = "eval.csv";
pub const COMPARE_FILE: &str = "compare.csv";
pub const TIMING_FILE: &str = "timing.csv";

pub const STEPS_HEADER: &str = "step,epoch,l_sim,l_reg,conflicted,groups,sim_norm,reg_norm,applied_norm";
pub const EVAL_HEADER: &str =
    "case,dice_lv,dice_myo,dice_rv,dice_mean,hd95_lv,hd95_myo,hd95_rv,hd95_mean,mse,njd_percent";
pub const COMPARE_HEADER: &str = "method,dice_lv,dice_myo,dice_rv,dice_mean,hd95_mean,mse,njd_percent,params,speed_ms";
pub const TIMING_HEADER: &str = "method,speed_ms,speed_std_ms,samples";
/// Index of the timing column in compare rows; excluded from determinism.
pub const COMPARE_TIMING_COLUMN: usize = 9;

const SHUFFLE_DOMAIN: u64 = 0x5348_5546;
const STRATEGY_DOMAIN: u64 = 0x5354_5241;

/// Independent random stream `stream` under `seed` for purpose `domain`.
fn stream_rng(seed: u64, domain: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.rotate_left(17));
    rng.set_stream(stream);
    rng
}

/// Writes the synthetic dataset described by `cfg` into `cfg.data_dir`.
pub fn generate(cfg: &RunConfig) -> Result<Vec<synth::ManifestEntry>> {
    synth::write_dataset(
        &cfg.data_dir,
        cfg.cases,
        &PhantomSpec::with_size(cfg.image_size),
        &DeformSpec::for_size(cfg.image_size),
        cfg.data_seed,
    )
}

pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Case>> {
    synth::read_manifest(dir)?
        .iter()
        .filter(|e| e.split == split)
        .map(|e| synth::load_case(dir, e))
        .collect()
}

/// One logged optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub report: StepReport,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{:?},{:?},{},{},{:?},{:?},{:?}",
            self.step, self.epoch, r.l_sim, r.l_reg, r.conflicted, r.groups, r.sim_norm, r.reg_norm, r.applied_norm
        )
    }
}

/// Training state that survives a checkpoint round trip. Randomness for
/// batch order and strategy noise is derived from `(seed, epoch)` and
/// `(seed, step)`, so no generator state needs storing.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: RegistrationModel,
    pub optimizer: AdamState,
    pub step: u64,
    pub epoch: u64,
    pub config: RunConfig,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let model = RegistrationModel::unet(config.network(), config.seed)?;
        Ok(Self::with_model(config, model))
    }

    pub fn with_model(config: &RunConfig, model: RegistrationModel) -> Self {
        Trainer {
            optimizer: AdamState::new(model.groups()),
            model,
            step: 0,
            epoch: 0,
            config: config.clone(),
        }
    }

    pub fn from_checkpoint(config: &RunConfig, ck: Checkpoint) -> Self {
        let mut model = ck.model;
        model.set_mode(NormMode::Train);
        Trainer {
            model,
            optimizer: ck.optimizer,
            step: ck.step,
            epoch: ck.epoch,
            config: config.clone(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            epoch: self.epoch,
            config: self.config.to_text(),
        }
    }

    /// One pass over `train` in a shuffled order, in mini-batches of
    /// `batch_size` (the last batch may be smaller).
    pub fn run_epoch(&mut self, train: &[Case], mut log: impl FnMut(&StepRecord)) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Invalid("training split is empty".into()));
        }
        self.model.set_mode(NormMode::Train);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(self.config.seed, SHUFFLE_DOMAIN, self.epoch));
        for chunk in order.chunks(self.config.batch_size) {
            let fixed: Vec<&Grid2> = chunk.iter().map(|&i| &train[i].fixed).collect();
            let moving: Vec<&Grid2> = chunk.iter().map(|&i| &train[i].moving).collect();
            let mut rng = stream_rng(self.config.seed, STRATEGY_DOMAIN, self.step);
            let report = train_step(
                &mut self.model,
                Batch {
                    fixed: &fixed,
                    moving: &moving,
                },
                self.config.similarity,
                &self.config.strategy,
                &mut self.optimizer,
                self.config.lr,
                &mut rng,
            )?;
            let finite = self
                .model
                .groups()
                .iter()
                .all(|g| g.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite())));
            if !finite {
                return Err(Error::Numeric(format!("non-finite parameters after step {}", self.step)));
            }
            self.step += 1;
            log(&StepRecord {
                step: self.step,
                epoch: self.epoch,
                report,
            });
        }
        self.epoch += 1;
        Ok(())
    }

    /// Runs the remaining epochs up to `config.epochs`, returning the step
    /// log as CSV text (header included).
    pub fn run(&mut self, train: &[Case], mut progress: impl FnMut(u64, &StepRecord)) -> Result<String> {
        let mut csv = String::from(STEPS_HEADER);
        csv.push('\n');
        while self.epoch < self.config.epochs as u64 {
            let epoch = self.epoch;
            let mut last = None;
            self.run_epoch(train, |r| {
                let _ = writeln!(csv, "{}", r.csv_row());
                last = Some(r.clone());
            })?;
            if let Some(r) = last {
                progress(epoch, &r);
            }
        }
        Ok(csv)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `train`: trains on the training split of `cfg.data_dir`, writing
/// `steps.csv` and `checkpoint.gsck` into `out`.
pub fn train(cfg: &RunConfig, out: &Path, progress: impl FnMut(u64, &StepRecord)) -> Result<Trainer> {
    let cases = load_split(&cfg.data_dir, Split::Train)?;
    let mut trainer = Trainer::new(cfg)?;
    let csv = trainer.run(&cases, progress)?;
    write_text(&out.join(STEPS_FILE), &csv)?;
    trainer.checkpoint().save(&out.join(CHECKPOINT_FILE))?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    Ok(trainer)
}

/// Reads an image as PGM, or as a single-channel GSMF grid otherwise.
pub fn read_image(path: &Path) -> Result<Grid2> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => io::read_pgm(path),
        _ => io::read_grid(path),
    }
}

/// `register`: predicts the field for one pair and writes `warped.pgm` and
/// `field.gsmf` into `out`.
pub fn register(checkpoint: &Path, moving: &Path, fixed: &Path, out: &Path) -> Result<(Grid2, DisplacementField)> {
    let mut model = Checkpoint::load(checkpoint)?.model;
    model.set_mode(NormMode::Eval);
    let m = read_image(moving)?;
    let f = read_image(fixed)?;
    if m.shape() != f.shape() {
        return Err(Error::shape("register", format!("moving {:?} vs fixed {:?}", m.shape(), f.shape())));
    }
    let field = model.predict(&f, &m)?;
    let warped = warp_image(&m, &field)?;
    io::write_pgm(&out.join("warped.pgm"), &warped)?;
    io::write_field(&out.join("field.gsmf"), &field)?;
    Ok((warped, field))
}

/// Metrics of one registered case under `field`.
pub fn score(case: &Case, field: &DisplacementField) -> Result<CaseMetrics> {
    let warped = warp_image(&case.moving, field)?;
    let warped_mask = warp_labels(&case.moving_mask, field)?;
    evaluate_case(&warped_mask, &case.fixed_mask, &warped, &case.fixed, field)
}

/// Scores every test case with the model in eval mode.
pub fn evaluate_model(model: &RegistrationModel, cases: &[Case]) -> Result<Vec<CaseMetrics>> {
    let mut m = model.clone();
    m.set_mode(NormMode::Eval);
    cases.iter().map(|c| score(c, &m.predict(&c.fixed, &c.moving)?)).collect()
}

/// Scores the unregistered pairs (identity transform).
pub fn evaluate_initial(cases: &[Case]) -> Result<Vec<CaseMetrics>> {
    cases
        .iter()
        .map(|c| score(c, &DisplacementField::zeros(c.moving.height(), c.moving.width())))
        .collect()
}

pub fn measure_timing(model: &RegistrationModel, cases: &[Case], cfg: &RunConfig) -> Result<Timing> {
    let mut m = model.clone();
    m.set_mode(NormMode::Eval);
    let pairs: Vec<(&Grid2, &Grid2)> = cases.iter().take(cfg.timing_pairs).map(|c| (&c.fixed, &c.moving)).collect();
    metrics::timing(&m, &pairs, cfg.timing_repetitions)
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

pub fn eval_csv(cases: &[CaseMetrics], report: &EvalReport) -> String {
    let mut s = String::from(EVAL_HEADER);
    s.push('\n');
    let row = |s: &mut String, name: &str, dice: [f64; 3], hd: [Option<f64>; 3], hd_mean: Option<f64>, mse: f64, njd: f64| {
        let _ = writeln!(
            s,
            "{name},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{:.8},{:.6}",
            dice[0],
            dice[1],
            dice[2],
            dice.iter().sum::<f64>() / 3.0,
            opt(hd[0]),
            opt(hd[1]),
            opt(hd[2]),
            opt(hd_mean),
            mse,
            njd
        );
    };
    for (i, c) in cases.iter().enumerate() {
        row(&mut s, &i.to_string(), c.dice, c.hd95, c.hd95_mean(), c.mse, c.njd_percent);
    }
    row(&mut s, "mean", report.dice, report.hd95, report.hd95_mean(), report.mse, report.njd_percent);
    s
}

/// `eval`: scores a checkpoint on the test split, writing `eval.csv`.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<EvalReport> {
    let model = Checkpoint::load(checkpoint)?.model;
    let cases = load_split(&cfg.data_dir, Split::Test)?;
    let per_case = evaluate_model(&model, &cases)?;
    let timing = measure_timing(&model, &cases, cfg)?;
    let report = EvalReport::from_cases(&per_case, model.param_count(), Some(timing))?;
    write_text(&out.join(EVAL_FILE), &eval_csv(&per_case, &report))?;
    Ok(report)
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub method: String,
    pub report: EvalReport,
}

impl CompareRow {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{:.8},{:.6},{},{:.4}",
            self.method,
            r.dice[0],
            r.dice[1],
            r.dice[2],
            r.dice_mean(),
            opt(r.hd95_mean()),
            r.mse,
            r.njd_percent,
            r.param_count,
            r.timing.map_or(0.0, |t| t.mean_ms)
        )
    }
}

/// Directory name for a strategy's run inside the compare output.
pub fn run_dir_name(s: &Strategy) -> String {
    crate::config::strategy_token(s).replace(':', "_")
}

/// Result of `compare`: the Initial row followed by one row per strategy.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    pub models: Vec<RegistrationModel>,
}

impl Comparison {
    pub fn csv(&self) -> String {
        let mut s = String::from(COMPARE_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn row(&self, method: &str) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Number of concurrent training runs: `GSREG_THREADS` if set, else the
/// available parallelism.
pub fn worker_count() -> usize {
    std::env::var("GSREG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// `compare`: one training run per strategy in `cfg.compare` on the same
/// dataset and initialisation, then evaluation on the test split. Creates
/// the dataset in `cfg.data_dir` first when it has no manifest. Writes
/// `compare.csv`, `timing.csv` and per-run directories into `out`.
pub fn compare(cfg: &RunConfig, out: &Path, progress: impl Fn(&str, u64) + Sync) -> Result<Comparison> {
    if !cfg.data_dir.join(synth::MANIFEST_FILE).exists() {
        generate(cfg)?;
    }
    let train_cases = load_split(&cfg.data_dir, Split::Train)?;
    let test_cases = load_split(&cfg.data_dir, Split::Test)?;
    let strategies = cfg.compare.clone();

    let results: Mutex<Vec<Option<Result<Trainer>>>> = Mutex::new((0..strategies.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = worker_count().min(strategies.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= strategies.len() {
                    break;
                }
                let mut run_cfg = cfg.clone();
                run_cfg.strategy = strategies[i];
                let label = strategies[i].label();
                let dir = out.join(run_dir_name(&strategies[i]));
                let outcome = Trainer::new(&run_cfg).and_then(|mut t| {
                    let csv = t.run(&train_cases, |epoch, _| progress(&label, epoch))?;
                    write_text(&dir.join(STEPS_FILE), &csv)?;
                    t.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
                    Ok(t)
                });
                results.lock().expect("no poisoned runs")[i] = Some(outcome);
            });
        }
    });

    let mut rows = vec![CompareRow {
        method: "Initial".into(),
        report: EvalReport::from_cases(&evaluate_initial(&test_cases)?, 0, None)?,
    }];
    let mut models = Vec::new();
    let mut timing_csv = String::from(TIMING_HEADER);
    timing_csv.push('\n');
    for (s, outcome) in strategies.iter().zip(results.into_inner().expect("no poisoned runs")) {
        let trainer = outcome.expect("every run finished")?;
        let per_case = evaluate_model(&trainer.model, &test_cases)?;
        // timing runs sequentially so concurrent training cannot skew it
        let timing = measure_timing(&trainer.model, &test_cases, cfg)?;
        let report = EvalReport::from_cases(&per_case, trainer.model.param_count(), Some(timing))?;
        write_text(
            &out.join(run_dir_name(s)).join(EVAL_FILE),
            &eval_csv(&per_case, &report),
        )?;
        let _ = writeln!(
            timing_csv,
            "{},{:.4},{:.4},{}",
            s.label(),
            timing.mean_ms,
            timing.std_ms,
            timing.samples
        );
        rows.push(CompareRow {
            method: s.label(),
            report,
        });
        models.push(trainer.model);
    }
    let cmp = Comparison { rows, models };
    write_text(&out.join(COMPARE_FILE), &cmp.csv())?;
    write_text(&out.join(TIMING_FILE), &timing_csv)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    Ok(cmp)
}

/// Drops the timing column so two comparison tables can be compared
/// byte for byte.
pub fn strip_timing(csv: &str) -> String {
    csv.lines()
        .map(|l| {
            l.split(',')
                .enumerate()
                .filter(|(i, _)| *i != COMPARE_TIMING_COLUMN)
                .map(|(_, f)| f)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// One line of the self test.
#[derive(Debug, Clone, PartialEq)]
pub struct SelftestLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Projection properties on `trials` random vector pairs: orthogonality
/// after projection, no norm growth, no reversal of the similarity
/// direction, exact pass-through without conflict and invariance to the
/// scale of `g_reg`.
pub fn projection_suite(trials: usize, seed: u64) -> Result<Vec<SelftestLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let norm = |a: &[f64]| dot(a, a).sqrt();
    let (mut orth, mut shrink, mut forward, mut pass, mut scale) = (0usize, 0usize, 0usize, 0usize, 0usize);
    let mut worst_scale = 0.0f64;
    for _ in 0..trials {
        let dim = rng.random_range(1..=4096);
        let sa = 10f64.powf(rng.random_range(-6.0..6.0));
        let sb = 10f64.powf(rng.random_range(-6.0..6.0));
        let g_sim: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0) * sa).collect();
        let g_reg: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0) * sb).collect();
        let g = project_if_conflict(&g_sim, &g_reg)?;
        if dot(&g, &g_reg) < -1e-10 * norm(&g) * norm(&g_reg) {
            orth += 1;
        }
        if norm(&g) > norm(&g_sim) {
            shrink += 1;
        }
        if dot(&g, &g_sim) < 0.0 {
            forward += 1;
        }
        if dot(&g_sim, &g_reg) > 0.0 && g != g_sim {
            pass += 1;
        }
        for c in [1e-6, 1.0, 1e6] {
            let scaled: Vec<f64> = g_reg.iter().map(|v| v * c).collect();
            let gc = project_if_conflict(&g_sim, &scaled)?;
            let err = g.iter().zip(&gc).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / norm(&g_sim).max(1e-300);
            worst_scale = worst_scale.max(err);
            if err > 1e-12 {
                scale += 1;
            }
        }
    }
    let line = |name: &str, failures: usize, extra: String| SelftestLine {
        name: name.into(),
        passed: failures == 0,
        detail: format!("{failures} failures in {trials} trials{extra}"),
    };
    Ok(vec![
        line("projection_orthogonal", orth, String::new()),
        line("projection_norm_bound", shrink, String::new()),
        line("projection_no_reversal", forward, String::new()),
        line("projection_pass_through", pass, String::new()),
        line("projection_scale_equivariance", scale, format!(", worst relative error {worst_scale:e}")),
    ])
}

/// `selftest`: finite-difference gradient checks and the projection suite.
pub fn selftest(seed: u64) -> Result<Vec<SelftestLine>> {
    let mut lines: Vec<SelftestLine> = gradcheck::all_checks(seed)?
        .into_iter()
        .map(|r| SelftestLine {
            passed: r.passed(),
            detail: format!("relative error {:e}", r.rel_error),
            name: format!("grad_{}", r.name),
        })
        .collect();
    lines.extend(projection_suite(1000, seed)?);
    Ok(lines)
}

/// Default output directory for a command when `--out` is not given.
pub fn default_out(cfg: &RunConfig, command: &str) -> PathBuf {
    cfg.out_dir.join(command)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::parse("epochs = 2\nbatch_size = 4\ncases = 20\nimage_size = 16\ntiming_repetitions = 1\ntiming_pairs = 2").unwrap();
        cfg.data_dir = dir.join("data");
        cfg.out_dir = dir.join("runs");
        cfg
    }

    #[test]
    fn resume_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        generate(&cfg).unwrap();
        let cases = load_split(&cfg.data_dir, Split::Train).unwrap();

        let mut straight = Trainer::new(&cfg).unwrap();
        straight.run(&cases, |_, _| {}).unwrap();

        let mut first = Trainer::new(&cfg).unwrap();
        first.run_epoch(&cases, |_| {}).unwrap();
        let path = dir.path().join("ck.gsck");
        first.checkpoint().save(&path).unwrap();
        let mut resumed = Trainer::from_checkpoint(&cfg, Checkpoint::load(&path).unwrap());
        resumed.run_epoch(&cases, |_| {}).unwrap();

        assert_eq!(resumed.model, straight.model);
        assert_eq!(resumed.optimizer, straight.optimizer);
        assert_eq!(resumed.step, straight.step);
    }

    #[test]
    fn step_log_has_one_row_per_step() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        generate(&cfg).unwrap();
        let t = train(&cfg, &dir.path().join("out"), |_, _| {}).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("out").join(STEPS_FILE)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], STEPS_HEADER);
        // 15 training cases in batches of 4 -> 4 steps per epoch
        assert_eq!(lines.len() - 1, 8);
        assert_eq!(t.step, 8);
        for l in &lines[1..] {
            let f: Vec<&str> = l.split(',').collect();
            let conflicted: usize = f[4].parse().unwrap();
            let groups: usize = f[5].parse().unwrap();
            assert!(conflicted <= groups);
        }
    }

    #[test]
    fn zero_field_register_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let model = RegistrationModel::unet(crate::network::UNetConfig::desk(), 0).unwrap();
        let ck = Checkpoint {
            optimizer: AdamState::new(model.groups()),
            model,
            step: 0,
            epoch: 0,
            config: String::new(),
        };
        let ckp = dir.path().join("zero.gsck");
        ck.save(&ckp).unwrap();
        let case = synth::make_pair(&PhantomSpec::with_size(16), &DeformSpec::for_size(16), 4).unwrap();
        io::write_pgm(&dir.path().join("m.pgm"), &case.moving).unwrap();
        io::write_pgm(&dir.path().join("f.pgm"), &case.fixed).unwrap();
        register(&ckp, &dir.path().join("m.pgm"), &dir.path().join("f.pgm"), &dir.path().join("o")).unwrap();
        let a = std::fs::read(dir.path().join("m.pgm")).unwrap();
        let b = std::fs::read(dir.path().join("o").join("warped.pgm")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn strip_timing_drops_only_speed() {
        let s = "method,a,b,c,d,e,f,g,params,speed_ms\nx,1,2,3,4,5,6,7,8,9.5";
        assert_eq!(strip_timing(s), "method,a,b,c,d,e,f,g,params\nx,1,2,3,4,5,6,7,8");
    }

    #[test]
    fn projection_suite_passes() {
        for l in projection_suite(200, 3).unwrap() {
            assert!(l.passed, "{}: {}", l.name, l.detail);
        }
    }
}
