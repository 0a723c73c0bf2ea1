use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use calf::backbone::{Backbone, BackboneConfig};
use calf::data::synthetic;
use calf::matching::PrincipalEmbeddings;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const CONFIG: &str = "\
# small random backbone
dataset = data.csv
output_dir = out
layers = 2
width = 32
heads = 4
max_positions = 16
vocab_size = 128
principal_dim = 16
input_len = 48
horizons = 24
epochs = 1
max_steps = 3
";

fn calf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calf"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "off")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    synthetic(1200, 2, 5).write_csv(dir.path().join("data.csv")).unwrap();
    fs::write(dir.path().join("run.cfg"), CONFIG).unwrap();
    dir
}

fn trained() -> TempDir {
    let dir = workspace();
    let o = calf(dir.path(), &["train", "--config", "run.cfg"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = workspace();
    fs::write(dir.path().join("bad.csv"), "date,a\n2020-01-01 00:00:00,1\n2020-01-01 01:00:00,x\n").unwrap();
    fs::write(dir.path().join("empty.csv"), "").unwrap();
    fs::write(dir.path().join("junk.calf"), b"CALX").unwrap();
    let cases: &[(&[&str], i32)] = &[
        (&["--help"], 0),
        (&["frobnicate"], 6),
        (&["train"], 6),
        (&["--device", "cuda", "train", "--config", "run.cfg"], 6),
        (&["train", "--config", "missing.cfg"], 2),
        (&["train", "--config", "run.cfg", "--set", "bogus=1"], 2),
        (&["train", "--config", "run.cfg", "--set", "lr=nan"], 2),
        (&["train", "--config", "run.cfg", "--set", "dataset=bad.csv"], 3),
        (&["train", "--config", "run.cfg", "--set", "input_len=2000"], 3),
        (&["train", "--config", "run.cfg", "--set", "dataset=empty.csv"], 4),
        (&["train", "--config", "run.cfg", "--set", "dataset=nowhere.csv"], 7),
        (&["eval", "--config", "run.cfg", "--checkpoint", "junk.calf"], 4),
        (&["eval", "--config", "run.cfg", "--checkpoint", "nowhere.calf"], 7),
    ];
    for (args, code) in cases {
        let o = calf(dir.path(), args);
        assert_eq!(o.status.code(), Some(*code), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn train_writes_artifacts_and_eval_reproduces_its_metrics() {
    let dir = trained();
    let out = dir.path().join("out");
    for f in ["config.resolved", "model_h24.calf", "train_h24.log", "metrics.csv", "metrics.txt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let log = fs::read_to_string(out.join("train_h24.log")).unwrap();
    assert!(log.contains("optimizer steps: 3"), "{log}");
    assert_eq!(log.lines().filter(|l| l.starts_with("step=")).count(), 3);

    let o = calf(dir.path(), &["eval", "--config", "run.cfg"]);
    assert!(o.status.success());
    assert_eq!(
        fs::read_to_string(out.join("eval.csv")).unwrap(),
        fs::read_to_string(out.join("metrics.csv")).unwrap()
    );
    assert!(stdout(&o).contains("avg"));

    // The resolved config replays the run.
    let o = calf(dir.path(), &["eval", "--config", "out/config.resolved"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn checkpoint_mismatch_names_the_offending_tensors() {
    let dir = trained();
    let o = calf(dir.path(), &["eval", "--config", "run.cfg", "--set", "width=64"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("backbone.token_embedding: expected [128, 64], found [128, 32]"), "{err}");

    let o = calf(dir.path(), &["eval", "--config", "run.cfg", "--set", "layers=1"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("backbone.block.1.ln_1.gain: unexpected"), "{err}");
    assert!(err.contains("proj.text.1.weight: unexpected"), "{err}");
}

#[test]
fn ablation_flags_zero_the_logged_columns() {
    let dir = workspace();
    let o = calf(dir.path(), &["train", "--config", "run.cfg", "--no-feature-loss", "--no-output-loss"]);
    assert!(o.status.success());
    let log = fs::read_to_string(dir.path().join("out/train_h24.log")).unwrap();
    let steps: Vec<&str> = log.lines().filter(|l| l.starts_with("step=")).collect();
    assert_eq!(steps.len(), 3);
    for line in steps {
        assert!(line.contains(" feature=0.000000 output=0.000000 "), "{line}");
    }
}

#[test]
fn export_attention_is_deterministic_and_normalised() {
    let dir = trained();
    let args = [
        "export-attention",
        "--config",
        "run.cfg",
        "--checkpoint",
        "out/model_h24.calf",
        "--words",
        "#3,#5,unknownword",
        "--out",
    ];
    let first = calf(dir.path(), &[&args[..], &["exp1"]].concat());
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(stdout(&first).contains("skipped words: unknownword"));
    let second = calf(dir.path(), &[&args[..], &["exp2"]].concat());
    assert!(second.status.success());

    for f in ["attention.csv", "word_relevance.csv", "features.csv"] {
        assert_eq!(
            fs::read(dir.path().join("exp1").join(f)).unwrap(),
            fs::read(dir.path().join("exp2").join(f)).unwrap(),
            "{f} differs between runs"
        );
    }
    let attention = fs::read_to_string(dir.path().join("exp1/attention.csv")).unwrap();
    let mut lines = attention.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 17);
    for (line, channel) in lines.zip(["ch0", "ch1"]) {
        let mut cells = line.split(',');
        assert_eq!(cells.next(), Some(channel));
        let total: f64 = cells.map(|c| c.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-5, "{line}");
    }
    let words = fs::read_to_string(dir.path().join("exp1/word_relevance.csv")).unwrap();
    assert!(words.starts_with("channel,#3,#5\n"), "{words}");
    let features = fs::read_to_string(dir.path().join("exp1/features.csv")).unwrap();
    assert_eq!(features.lines().count(), 1 + 2 * 2);
}

#[test]
fn pca_extract_clamps_dimension_and_saves_loadable_rows() {
    let dir = tempfile::tempdir().unwrap();
    let bb = BackboneConfig {
        layers: 1,
        width: 16,
        heads: 2,
        max_positions: 8,
        vocab_size: 40,
        causal: true,
    };
    let backbone = Backbone::<f32>::random(bb, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    backbone.save(dir.path().join("bb.calf")).unwrap();
    let o = calf(dir.path(), &["pca-extract", "--weights", "bb.calf", "--d", "500", "--out", "pc.calf"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("explained_variance_ratio = 1.000000"), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with(char::is_numeric)).count(), 16);
    let p = PrincipalEmbeddings::load(dir.path().join("pc.calf")).unwrap();
    assert_eq!((p.dim(), p.width()), (16, 16));
}
