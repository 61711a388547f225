//! Drives the installed binary end to end at toy scale: artifact layout,
//! exit codes, and byte-level determinism of rerun artifacts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn slm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slm"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = slm().args(args).output().expect("spawn slm");
    assert!(
        out.status.success(),
        "slm {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_code(args: &[&str]) -> (i32, String) {
    let out = slm().args(args).output().expect("spawn slm");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write_config(dir: &Path, data_dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("tiny.cfg");
    let text = format!(
        "seed=7\n\
         precision=f32\n\
         speech_encoder.frame_dim=4\n\
         speech_encoder.width=8\n\
         speech_encoder.layers=1\n\
         speech_encoder.heads=2\n\
         text_lm.width=12\n\
         text_lm.layers=1\n\
         text_lm.heads=2\n\
         text_lm.max_len=48\n\
         adapter.num_layers=1\n\
         adapter.heads=2\n\
         adapter.subsample_rate=4\n\
         train.lr=0.003\n\
         train.batch_size=4\n\
         train.steps=6\n\
         train.checkpoint_every=0\n\
         train.eval_every=3\n\
         pretrain.lr=0.003\n\
         pretrain.speech_steps=5\n\
         pretrain.lm_steps=5\n\
         data.utterances=48\n\
         data.frames_per_token_min=2\n\
         data.frames_per_token_max=3\n\
         data.dir={}\n\
         {extra}",
        data_dir.display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn cfg_flag(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

/// One shared tiny pipeline; every section reuses its artifacts.
#[test]
fn pipeline_layout_exit_codes_and_determinism() {
    let root = tempfile::tempdir().unwrap();
    let corpus_dir = root.path().join("corpus");
    let run_dir = root.path().join("run");
    let cfg = write_config(root.path(), &corpus_dir, "");
    let cfg = cfg_flag(&cfg);
    let run = run_dir.to_str().unwrap();

    // gen-corpus twice into separate dirs: identical bytes
    run_ok(&["gen-corpus", "--config", &cfg, "--out", corpus_dir.to_str().unwrap()]);
    let corpus2 = root.path().join("corpus2");
    run_ok(&["gen-corpus", "--config", &cfg, "--out", corpus2.to_str().unwrap()]);
    for file in ["meta.json", "mix_train.jsonl", "bias_entities.txt", "qa_heldout.jsonl"] {
        let a = std::fs::read(corpus_dir.join(file)).unwrap();
        let b = std::fs::read(corpus2.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical gen-corpus runs");
    }

    // pretrain both backbones; rerunning the speech side is byte-identical
    run_ok(&["pretrain-speech", "--config", &cfg, "--out", run]);
    let speech_bytes = std::fs::read(run_dir.join("speech_backbone.slmc")).unwrap();
    let rerun = root.path().join("rerun");
    run_ok(&["pretrain-speech", "--config", &cfg, "--out", rerun.to_str().unwrap()]);
    assert_eq!(
        speech_bytes,
        std::fs::read(rerun.join("speech_backbone.slmc")).unwrap(),
        "pretraining is not deterministic"
    );
    run_ok(&["pretrain-lm", "--config", &cfg, "--out", run]);

    // train: run dir layout
    run_ok(&["train", "--config", &cfg, "--out", run]);
    assert!(run_dir.join("config.snapshot").is_file());
    assert!(run_dir.join("metrics.log").is_file());
    let ckpt = run_dir.join("checkpoints/step_6.slmc");
    assert!(ckpt.is_file(), "final checkpoint missing");
    let metrics = std::fs::read_to_string(run_dir.join("metrics.log")).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("step=1 loss=")));
    assert!(metrics.lines().any(|l| l.contains("heldout_loss=")));

    // train --steps 0 leaves an initial checkpoint and exits 0
    let zero = root.path().join("zero");
    run_ok(&[
        "train", "--config", &cfg, "--out", zero.to_str().unwrap(), "--steps", "0",
        "--speech-checkpoint", run_dir.join("speech_backbone.slmc").to_str().unwrap(),
        "--lm-checkpoint", run_dir.join("lm_backbone.slmc").to_str().unwrap(),
    ]);
    assert!(zero.join("checkpoints/step_0.slmc").is_file());

    // eval: four reports + stdout lines
    let ckpt_s = ckpt.to_str().unwrap();
    let out = run_ok(&["eval", "--config", &cfg, "--out", run, "--checkpoint", ckpt_s]);
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    for task in ["recognize", "translate", "instruct", "qa"] {
        assert!(stdout.contains(&format!("task={task}")), "missing {task} in: {stdout}");
        assert!(run_dir.join(format!("reports/eval_{task}.txt")).is_file());
    }

    // bias-eval: six reports, three summary lines
    let out = run_ok(&["bias-eval", "--config", &cfg, "--out", run, "--checkpoint", ckpt_s]);
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    for split in ["wo_prefix", "w_prefix", "anti"] {
        assert!(stdout.contains(&format!("split={split}")));
        assert!(run_dir.join(format!("reports/bias_{split}_asr.txt")).is_file());
        assert!(run_dir.join(format!("reports/bias_{split}_c_asr.txt")).is_file());
    }

    // cascade: both report files
    run_ok(&["cascade", "--config", &cfg, "--out", run, "--checkpoint", ckpt_s]);
    assert!(run_dir.join("reports/cascade.txt").is_file());
    assert!(run_dir.join("reports/cascade_corruption.txt").is_file());

    // ablate-depth: table rows match the depth list
    let out = run_ok(&[
        "ablate-depth", "--config", &cfg, "--out", run, "--steps", "2", "--depths", "1,2",
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(stdout.contains("depth=1") && stdout.contains("depth=2"));
    let table = std::fs::read_to_string(run_dir.join("reports/ablate_depth.txt")).unwrap();
    assert_eq!(table.lines().count(), 2);

    // generate: identical stdout across invocations, instruction-sensitive
    let gen = |instr: &str| -> String {
        let out = run_ok(&[
            "generate", "--config", &cfg, "--checkpoint", ckpt_s,
            "--instruction", instr, "--tokens", "ba da ka",
        ]);
        String::from_utf8_lossy(&out.stdout).into_owned()
    };
    assert_eq!(gen("recognize speech lang_a"), gen("recognize speech lang_a"));

    // corpus-line input form
    run_ok(&[
        "generate", "--config", &cfg, "--checkpoint", ckpt_s,
        "--instruction", "recognize",
        "--corpus-line", &format!("{}:1", corpus_dir.join("mix_train.jsonl").display()),
    ]);

    // exit codes: missing checkpoint is I/O (3)
    let (code, err) = run_code(&[
        "eval", "--config", &cfg, "--out", run,
        "--checkpoint", run_dir.join("checkpoints/no_such.slmc").to_str().unwrap(),
    ]);
    assert_eq!(code, 3, "stderr: {err}");
    assert!(err.contains("no_such"), "path missing from diagnostic: {err}");

    // exit codes: empty eval corpus is a usage problem (1)
    let broken = root.path().join("broken_corpus");
    copy_dir(&corpus_dir, &broken);
    std::fs::write(broken.join("mix_heldout_recognize.jsonl"), "").unwrap();
    let cfg_broken = write_config(&root.path().join("run"), &broken, "");
    let (code, err) = run_code(&[
        "eval", "--config", cfg_broken.to_str().unwrap(), "--out", run, "--checkpoint", ckpt_s,
    ]);
    assert_eq!(code, 1, "stderr: {err}");
    assert!(err.contains("empty"), "diagnostic should mention emptiness: {err}");

    // exit codes: unknown instruction word is a usage problem (1)
    let (code, _) = run_code(&[
        "generate", "--config", &cfg, "--checkpoint", ckpt_s,
        "--instruction", "zorble", "--tokens", "ba da",
    ]);
    assert_eq!(code, 1);
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        std::fs::copy(entry.path(), to.join(entry.file_name())).unwrap();
    }
}
