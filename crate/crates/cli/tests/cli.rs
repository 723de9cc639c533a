//! End-to-end behaviour of the `mpn` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mpn::data::{read_bundle, write_bundle, Split};

const SMALL: &str = "\
# small geometry so every command finishes in well under a second
n_videos = 30
classes = 3
regions = 2
visual_dim = 8
audio_dim = 6
d_model = 8
n_heads = 2
d_k = 4
d_v = 4
ff_hidden = 8
n_mcm = 1
fbc_rank = 2
fbc_atoms = 8
agva_hidden = 6
classifier_hidden = 8
relevance_hidden = 4
batch_size = 8
";

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(f.path("small.cfg"), SMALL).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cfg(&self) -> String {
        self.path("small.cfg").display().to_string()
    }

    fn data(&self, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let (c, o) = (self.cfg(), out.display().to_string());
        let mut args = vec!["gen-data", "--spec", &c, "--out", &o];
        args.extend_from_slice(extra);
        let r = mpn(&args);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
        out
    }

    fn train(&self, data: &Path, out: &str, extra: &[&str]) -> Output {
        let (d, o, c) = (data.display().to_string(), self.path(out).display().to_string(), self.cfg());
        let mut args = vec!["train", "--data", &d, "--config", &c, "--out", &o];
        args.extend_from_slice(extra);
        mpn(&args)
    }
}

fn mpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpn"))
        .args(args)
        .env_remove("MPN_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The value column of the single result row of `eval`.
fn accuracy(o: &Output) -> f64 {
    let out = stdout(o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("split\tregime\tvideos\tsegments\taccuracy"));
    lines.next().unwrap().split('\t').nth(4).unwrap().parse().unwrap()
}

/// Epoch reports without their wall-clock field.
fn trajectory(o: &Output) -> Vec<(f64, f64)> {
    stdout(o)
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (v["train_loss"].as_f64().unwrap(), v["val_accuracy"].as_f64().unwrap())
        })
        .collect()
}

#[test]
fn gen_data_is_deterministic_and_summarised() {
    let f = Fixture::new();
    let a = f.data("a.mpnf", &["--seed", "7"]);
    let b = f.data("b.mpnf", &["--seed", "7"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = f.data("c.mpnf", &["--seed", "8"]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());

    let o = mpn(&["gen-data", "--spec", &f.cfg(), "--out", &f.path("d.mpnf").display().to_string()]);
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("class\tvideos"));
    let total: usize = lines.map(|l| l.split('\t').nth(1).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 30);
    assert!(f.path("d.mpnf.manifest").exists());
    assert!(std::fs::read_to_string(f.path("d.mpnf.config")).unwrap().contains("n_videos = 30"));
}

#[test]
fn invalid_spec_is_a_usage_error() {
    let f = Fixture::new();
    let out = f.path("x.mpnf").display().to_string();
    let o = mpn(&["gen-data", "--out", &out, "--set", "min_event_len=1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("min_event_len"));
    let o = mpn(&["gen-data", "--out", &out, "--set", "no_such_key=3"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&mpn(&["frobnicate"])), 1);
    assert_eq!(code(&mpn(&["--help"])), 0);
}

#[test]
fn noiseless_data_is_solved_by_the_oracle() {
    let f = Fixture::new();
    let data = f.data("clean.mpnf", &["--noise", "0"]);
    let d = data.display().to_string();
    for split in ["train", "val", "test"] {
        let o = mpn(&["eval", "--data", &d, "--oracle", "--split", split]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(accuracy(&o), 1.0);
    }
}

#[test]
fn train_then_eval_with_dump_recount() {
    let f = Fixture::new();
    let data = f.data("d.mpnf", &[]);
    let o = f.train(&data, "model.json", &["--epochs", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(trajectory(&o).len(), 3);
    for name in ["model.json", "model.best.json", "model.json.log"] {
        assert!(f.path(name).exists(), "{name}");
    }
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.path("model.json")).unwrap()).unwrap();
    let effective = saved["effective_config"].as_str().unwrap();
    assert!(effective.contains("loss_lambda = 0.6"));
    assert!(effective.contains("d_model = 8"));

    let dump = f.path("preds.tsv");
    let (d, m, p) = (data.display().to_string(), f.path("model.best.json").display().to_string(), dump.display().to_string());
    let o = mpn(&["eval", "--data", &d, "--model", &m, "--dump-preds", &p]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let reported = accuracy(&o);

    let text = std::fs::read_to_string(&dump).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("video\tsegment\ttrue_label\tpred_label\tp_r\tagva_w0\tagva_w1"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    let mut per_video = std::collections::BTreeMap::<&str, usize>::new();
    let mut correct = 0;
    for r in &rows {
        *per_video.entry(r[0]).or_default() += 1;
        if r[2] == r[3] {
            correct += 1;
        }
        let w: f64 = r[5..].iter().map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((w - 1.0).abs() < 1e-5);
        let p_r: f64 = r[4].parse().unwrap();
        assert_eq!(r[3] != "bg", p_r >= 0.5, "decode must follow the 0.5 threshold");
    }
    assert!(per_video.values().all(|&n| n == 10));
    let recount = correct as f64 / rows.len() as f64;
    assert!((recount - reported).abs() < 1e-6, "{recount} vs {reported}");
    assert!(std::fs::read_to_string(f.path("preds.tsv.config")).unwrap().contains("split = test"));
}

#[test]
fn missing_or_corrupt_inputs_are_data_errors() {
    let f = Fixture::new();
    let data = f.data("d.mpnf", &[]);
    let d = data.display().to_string();
    let o = mpn(&["eval", "--data", &d, "--model", &f.path("nope.json").display().to_string()]);
    assert_eq!(code(&o), 2);

    let mut bytes = std::fs::read(&data).unwrap();
    bytes[0] = b'X';
    let bad = f.path("bad.mpnf");
    std::fs::write(&bad, &bytes).unwrap();
    std::fs::copy(f.path("d.mpnf.manifest"), f.path("bad.mpnf.manifest")).unwrap();
    let o = mpn(&["eval", "--data", &bad.display().to_string(), "--oracle"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("magic"));

    // A config naming a different geometry than the bundle is rejected.
    let o = f.train(&data, "m.json", &["--epochs", "1", "--set", "classes=4"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn weak_training_never_sees_segment_labels() {
    let f = Fixture::new();
    let data = f.data("d.mpnf", &[]);
    let mut ds = read_bundle(&data).unwrap();
    let bg = ds.spec.classes;
    let train_ids = ds.manifest.ids(Split::Train).to_vec();
    for id in train_ids {
        let s = &mut ds.samples[id as usize];
        // Keep the video label; scramble which segments are events.
        for (t, l) in s.segment_labels.iter_mut().enumerate() {
            *l = if t % 3 == 0 { s.video_label } else { bg };
        }
    }
    let corrupted = f.path("corrupt.mpnf");
    write_bundle(&ds, &corrupted).unwrap();

    let a = f.train(&data, "a.json", &["--epochs", "2", "--regime", "weak"]);
    let b = f.train(&corrupted, "b.json", &["--epochs", "2", "--regime", "weak"]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(trajectory(&a), trajectory(&b));

    // The full regime does read them, so its trajectory moves.
    let a = f.train(&data, "c.json", &["--epochs", "2"]);
    let b = f.train(&corrupted, "d.json", &["--epochs", "2"]);
    assert_ne!(trajectory(&a), trajectory(&b));
}

#[test]
fn flags_override_file_which_overrides_defaults() {
    let f = Fixture::new();
    let data = f.data("d.mpnf", &[]);
    let cfg = f.path("two.cfg");
    std::fs::write(&cfg, format!("{SMALL}epochs = 2\nloss_lambda = 0.3\n")).unwrap();
    let (d, c) = (data.display().to_string(), cfg.display().to_string());
    let run = |extra: &[&str], out: &str| {
        let o = f.path(out).display().to_string();
        let mut args = vec!["train", "--data", &d, "--config", &c, "--out", &o];
        args.extend_from_slice(extra);
        let r = mpn(&args);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
        let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.path(out)).unwrap()).unwrap();
        (trajectory(&r).len(), saved["effective_config"].as_str().unwrap().to_string())
    };
    let (epochs, eff) = run(&[], "file.json");
    assert_eq!(epochs, 2);
    assert!(eff.contains("loss_lambda = 0.3"));
    let (epochs, eff) = run(&["--epochs", "1", "--lambda", "0.6"], "flag.json");
    assert_eq!(epochs, 1);
    assert!(eff.contains("loss_lambda = 0.6"));
}

#[test]
fn seed_environment_variable_is_a_fallback() {
    let f = Fixture::new();
    let out = |name: &str, seed: Option<&str>, flag: Option<&str>| {
        let p = f.path(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mpn"));
        cmd.args(["gen-data", "--spec", &f.cfg(), "--out", &p.display().to_string()]);
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        match seed {
            Some(s) => cmd.env("MPN_SEED", s),
            None => cmd.env_remove("MPN_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        std::fs::read(p).unwrap()
    };
    let env5 = out("e5", Some("5"), None);
    assert_eq!(env5, out("f5", None, Some("5")));
    assert_ne!(env5, out("d", None, None));
    assert_eq!(out("g", Some("5"), Some("9")), out("h", None, Some("9")));
}

#[test]
fn ablation_tables_have_one_row_per_variant() {
    let f = Fixture::new();
    let data = f.data("d.mpnf", &[]);
    let d = data.display().to_string();
    for (axis, rows) in [("mcm", 4), ("squeeze", 4), ("network", 3)] {
        let o = mpn(&[
            "ablate", "--data", &d, "--config", &f.cfg(), "--axis", axis, "--seeds", "1", "--epochs", "1",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let out = stdout(&o);
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines[0], "axis\tvariant\tfull_accuracy\tweak_accuracy\tseeds");
        assert_eq!(lines.len(), rows + 1, "{axis}");
        for l in &lines[1..] {
            let cols: Vec<&str> = l.split('\t').collect();
            assert_eq!(cols[0], axis);
            for c in &cols[2..4] {
                let acc: f64 = c.parse().unwrap();
                assert!((0.0..=1.0).contains(&acc));
            }
        }
        assert!(stderr(&o).contains("# d_model = 8"));
    }
    let o = mpn(&["ablate", "--data", &d, "--axis", "depth"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradient_suite_passes_and_catches_a_planted_bug() {
    let o = mpn(&["grad-check", "--scale", "tiny"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    for block in mpn::gradsuite::BLOCKS {
        let row = out
            .lines()
            .find(|l| l.split('\t').next() == Some(*block))
            .unwrap_or_else(|| panic!("{block} missing from report"));
        assert!(row.ends_with("pass"), "{row}");
    }
    let o = mpn(&["grad-check", "--inject-fault", "softmax"]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("FAIL"));
}
