//! End-to-end checks of the `dwff` binary and the command layer: exit
//! codes, overwrite protection, checkpoint semantics, and error paths.

use std::path::Path;
use std::process::Command;

use dwff::config::RunConfig;
use dwff::decoder::DecoderParams;
use dwff::optim;

fn dwff_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dwff"))
}

fn write_cfg(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = "seed = 9\ndata.scenes = 8\ntrain.epochs = 1\nbackbone.c_in = 8\nmodel.c_fus = 16\nmodel.groups = 4\nmodel.hidden = 16\ngrid.h = 8\ngrid.w = 8\n";

#[test]
fn cli_usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "definitely.unknown = 1\n");
    let out = dwff_bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.path().join("ds"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "unknown key: {out:?}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("definitely.unknown"), "stderr: {stderr}");

    // Bad flags are usage errors too.
    let out = dwff_bin().args(["train", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Config validation failures are reported before anything is written.
    let cfg = write_cfg(dir.path(), "model.groups = 7\n");
    let target = dir.path().join("never");
    let out = dwff_bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&target)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!target.exists());
}

#[test]
fn cli_runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SMALL);
    // Training without a dataset is a runtime failure.
    let out = dwff_bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--data"])
        .arg(dir.path().join("missing"))
        .args(["--out"])
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{out:?}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("manifest"), "stderr: {stderr}");
}

#[test]
fn cli_gen_data_respects_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SMALL);
    let ds = dir.path().join("ds");
    let run = |extra: &[&str]| {
        let mut cmd = dwff_bin();
        cmd.args(["gen-data", "--config"]).arg(&cfg).args(["--out"]).arg(&ds);
        cmd.args(extra);
        cmd.output().unwrap()
    };
    assert_eq!(run(&[]).status.code(), Some(0));
    let label_path = ds.join("train").join(
        std::fs::read_to_string(ds.join("train.txt")).unwrap().lines().next().unwrap(),
    );
    let before = std::fs::read(label_path.join("label.dwf")).unwrap();
    let second = run(&[]);
    assert_eq!(second.status.code(), Some(2), "collision must refuse: {second:?}");
    assert_eq!(run(&["--force"]).status.code(), Some(0));
    // Regeneration in a separate process reproduces the same bytes.
    let after = std::fs::read(label_path.join("label.dwf")).unwrap();
    assert_eq!(before, after);

    // Every written tensor re-reads successfully.
    for split in ["train", "val", "test"] {
        let manifest = std::fs::read_to_string(ds.join(format!("{split}.txt"))).unwrap();
        for id in manifest.lines() {
            let scene = ds.join(split).join(id);
            for layer in [1u32, 8, 16, 24] {
                dwff::io::read_tensor_file(&scene.join(format!("level_{layer}.dwf"))).unwrap();
            }
            dwff::io::read_label_file(&scene.join("label.dwf")).unwrap();
        }
    }
}

#[test]
fn cli_full_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SMALL);
    let ds = dir.path().join("ds");
    let run_dir = dir.path().join("run");
    let eval_dir = dir.path().join("eval");
    let entropy_dir = dir.path().join("entropy");

    let status = |out: std::process::Output, what: &str| {
        assert_eq!(out.status.code(), Some(0), "{what}: {}", String::from_utf8_lossy(&out.stderr));
    };
    status(
        dwff_bin().args(["gen-data", "--config"]).arg(&cfg).args(["--out"]).arg(&ds).output().unwrap(),
        "gen-data",
    );
    status(
        dwff_bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .args(["--data"])
            .arg(&ds)
            .args(["--out"])
            .arg(&run_dir)
            .output()
            .unwrap(),
        "train",
    );
    let ckpt = run_dir.join("checkpoint_final.dwfc");
    status(
        dwff_bin()
            .args(["eval", "--config"])
            .arg(&cfg)
            .args(["--data"])
            .arg(&ds)
            .args(["--checkpoint"])
            .arg(&ckpt)
            .args(["--out"])
            .arg(&eval_dir)
            .output()
            .unwrap(),
        "eval",
    );
    status(
        dwff_bin()
            .args(["entropy", "--config"])
            .arg(&cfg)
            .args(["--data"])
            .arg(&ds)
            .args(["--checkpoint"])
            .arg(&ckpt)
            .args(["--out"])
            .arg(&entropy_dir)
            .output()
            .unwrap(),
        "entropy",
    );

    assert!(run_dir.join("loss.csv").exists());
    assert!(eval_dir.join("metrics.csv").exists());
    assert!(eval_dir.join("metrics.txt").exists());
    for artifact in ["records.csv", "diversity.csv", "histogram.csv", "histogram.svg"] {
        assert!(entropy_dir.join(artifact).exists(), "{artifact} missing");
    }
    // One per-image chart per test-split record.
    let test_ids = std::fs::read_to_string(ds.join("test.txt")).unwrap();
    for id in test_ids.lines() {
        assert!(entropy_dir.join(format!("weights_{id}.svg")).exists());
    }
}

#[test]
fn cli_gradcheck_passes_on_micro_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "backbone.c_in = 6\nmodel.c_fus = 8\nmodel.groups = 2\nmodel.hidden = 8\ngrid.h = 6\ngrid.w = 6\ngradcheck.max_coords = 12\n",
    );
    let out = dwff_bin().args(["gradcheck", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"), "stdout: {stdout}");
}

#[test]
fn non_finite_loss_aborts_with_step_and_keeps_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    // An absurd learning rate overflows the parameters after one step, so
    // the second step's objective is non-finite.
    let cfg_text = format!("{SMALL}optim.lr_max = 1e300\ntrain.epochs = 3\n");
    let cfg_path = write_cfg(dir.path(), &cfg_text);
    let ds = dir.path().join("ds");
    let run = dir.path().join("run");
    let gen = dwff_bin()
        .args(["gen-data", "--config"])
        .arg(&cfg_path)
        .args(["--out"])
        .arg(&ds)
        .output()
        .unwrap();
    assert_eq!(gen.status.code(), Some(0));
    let out = dwff_bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .args(["--data"])
        .arg(&ds)
        .args(["--out"])
        .arg(&run)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{out:?}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("non-finite loss at optimizer step"), "stderr: {stderr}");
    // The last good checkpoint is still on disk and loads.
    let ckpt = run.join("checkpoint_final.dwfc");
    assert!(ckpt.exists());
    optim::load_checkpoint(&ckpt, None).unwrap();
}

#[test]
fn zero_epoch_training_checkpoints_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        scenes: 8,
        epochs: 0,
        c_in: 8,
        c_fus: 16,
        groups: 4,
        hidden: 16,
        grid_h: 8,
        grid_w: 8,
        ..RunConfig::default()
    };
    cfg.validate().unwrap();
    let ds = dir.path().join("ds");
    let run = dir.path().join("run");
    dwff::commands::cmd_gen_data(&cfg, &ds, false).unwrap();
    let summary = dwff::commands::cmd_train(&cfg, &ds, &run).unwrap();
    assert_eq!(summary.steps, 0);

    let ckpt = optim::load_checkpoint(&run.join("checkpoint_final.dwfc"), Some(&cfg.decoder_config()))
        .unwrap();
    let init = DecoderParams::init(&cfg.decoder_config(), cfg.seed);
    for name in init.all_names() {
        assert_eq!(ckpt.params.get(&name), init.get(&name), "{name} drifted");
    }
    // The loss log holds only its header.
    let log = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn checkpoint_shape_mismatch_names_both_sides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        scenes: 8,
        epochs: 0,
        c_in: 8,
        c_fus: 16,
        groups: 4,
        grid_h: 8,
        grid_w: 8,
        ..RunConfig::default()
    };
    cfg.validate().unwrap();
    let ds = dir.path().join("ds");
    let run = dir.path().join("run");
    dwff::commands::cmd_gen_data(&cfg, &ds, false).unwrap();
    dwff::commands::cmd_train(&cfg, &ds, &run).unwrap();

    let mut wrong = cfg.decoder_config();
    wrong.c_fus = 32;
    let err = optim::load_checkpoint(&run.join("checkpoint_final.dwfc"), Some(&wrong)).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("c_fus: 16") && msg.contains("c_fus: 32"), "message: {msg}");
}
