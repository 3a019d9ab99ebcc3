use std::path::Path;
use std::process::{Command, Output};

use gsreg::grid::Grid2;
use gsreg::io::{self, Checkpoint};
use gsreg::network::{RegistrationModel, UNetConfig};
use gsreg::surgery::AdamState;

fn gsreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsreg")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn fresh_checkpoint(path: &Path) {
    let model = RegistrationModel::unet(UNetConfig::desk(), 0).unwrap();
    Checkpoint {
        optimizer: AdamState::new(model.groups()),
        model,
        step: 0,
        epoch: 0,
        config: String::new(),
    }
    .save(path)
    .unwrap();
}

fn ramp(h: usize, w: usize) -> Grid2 {
    Grid2::from_fn(h, w, |y, x| ((y * w + x) as f64) / ((h * w) as f64))
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# tiny run\nepochs = 2\nbatch_size = 4\ncases = 20\nimage_size = 16\ntiming_repetitions = 1\ntiming_pairs = 2\n\
             compare = layerwise,weighted:0.1\ndata_dir = {}\n",
            dir.join("data").display()
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn help_documents_csv_columns_and_exit_codes() {
    let o = gsreg(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout.clone()).unwrap();
    assert!(text.contains("method, dice_lv, dice_myo, dice_rv, dice_mean, hd95_mean, mse,"));
    assert!(text.contains("step, epoch, l_sim, l_reg, conflicted"));
    assert!(text.contains("5 selftest failure"));
}

#[test]
fn selftest_passes() {
    let o = gsreg(&["selftest"]);
    let text = String::from_utf8(o.stdout.clone()).unwrap();
    assert_eq!(code(&o), 0, "{text}");
    assert!(!text.contains("FAIL"));
    assert!(text.contains("PASS grad_unet_lncc"));
}

#[test]
fn zero_field_checkpoint_returns_moving_image() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("zero.gsck");
    fresh_checkpoint(&ck);
    io::write_pgm(&dir.path().join("m.pgm"), &ramp(16, 16)).unwrap();
    io::write_pgm(&dir.path().join("f.pgm"), &Grid2::zeros(16, 16)).unwrap();
    let out = dir.path().join("out");
    let o = gsreg(&[
        "register",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--moving",
        dir.path().join("m.pgm").to_str().unwrap(),
        "--fixed",
        dir.path().join("f.pgm").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(out.join("warped.pgm")).unwrap(),
        std::fs::read(dir.path().join("m.pgm")).unwrap()
    );
    let field = io::read_field(&out.join("field.gsmf")).unwrap();
    assert!(field.ux().data().iter().chain(field.uy().data()).all(|&v| v == 0.0));
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();

    std::fs::write(p("bad.cfg"), "epochs = 3\nlearning_rate = 1\n").unwrap();
    let o = gsreg(&["gen", "--config", &p("bad.cfg")]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    assert_eq!(code(&gsreg(&["gen", "--config", &p("missing.cfg")])), 3);
    assert_eq!(code(&gsreg(&["train", "--strategy", "sideways"])), 2);

    std::fs::write(p("junk.gsck"), b"GSCKjunk").unwrap();
    io::write_pgm(Path::new(&p("a.pgm")), &ramp(16, 16)).unwrap();
    io::write_pgm(Path::new(&p("b.pgm")), &ramp(8, 8)).unwrap();
    let reg = |ck: &str| {
        gsreg(&["register", "--checkpoint", ck, "--moving", &p("a.pgm"), "--fixed", &p("b.pgm"), "--out", &p("o")])
    };
    let o = reg(&p("junk.gsck"));
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("at byte"));

    fresh_checkpoint(Path::new(&p("zero.gsck")));
    assert_eq!(code(&reg(&p("zero.gsck"))), 6);
}

#[test]
fn gen_train_resume_eval_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let d = |n: &str| dir.path().join(n);

    assert_eq!(code(&gsreg(&["gen", "--config", cfg])), 0);
    assert!(d("data").join("manifest.txt").exists());

    let o = gsreg(&["train", "--config", cfg, "--out", d("train").to_str().unwrap(), "--strategy", "global"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let steps = std::fs::read_to_string(d("train").join("steps.csv")).unwrap();
    assert!(steps.starts_with("step,epoch,l_sim,l_reg,conflicted"));
    assert_eq!(steps.lines().count(), 1 + 8);

    // resuming a finished run to a later epoch appends its steps
    let longer = d("longer.cfg");
    std::fs::write(&longer, std::fs::read_to_string(cfg).unwrap().replace("epochs = 2", "epochs = 3")).unwrap();
    let ck = d("train").join("checkpoint.gsck");
    let o = gsreg(&[
        "train",
        "--config",
        longer.to_str().unwrap(),
        "--out",
        d("train").to_str().unwrap(),
        "--strategy",
        "global",
        "--resume",
        ck.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let steps = std::fs::read_to_string(d("train").join("steps.csv")).unwrap();
    assert_eq!(steps.lines().count(), 1 + 12);
    assert!(steps.lines().last().unwrap().starts_with("12,2,"));

    let o = gsreg(&["eval", "--config", cfg, "--checkpoint", ck.to_str().unwrap(), "--out", d("eval").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let eval = std::fs::read_to_string(d("eval").join("eval.csv")).unwrap();
    assert!(eval.starts_with("case,dice_lv"));
    // 20 cases leave 4 for testing, plus the mean row
    assert_eq!(eval.lines().count(), 1 + 4 + 1);

    let o = gsreg(&["compare", "--config", cfg, "--out", d("cmp").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(d("cmp").join("compare.csv")).unwrap();
    let methods: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["Initial", "layerwise", "weighted(lambda=0.1)"]);
    assert!(d("cmp").join("layerwise").join("steps.csv").exists());
}
