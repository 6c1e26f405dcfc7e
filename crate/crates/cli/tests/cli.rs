use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use amdm::audio::{read_wav, write_wav, Waveform};
use amdm::stft::StftParams;

fn amdm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amdm")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = amdm(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Fails with exactly one `error:` line on stderr.
fn fails(args: &[&str]) -> String {
    let out = amdm(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error")).collect();
    assert_eq!(lines.len(), 1, "{err}");
    lines[0].to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

fn simulate(out: &Path, seed: &str, mics: &str) {
    ok(&[
        "simulate",
        "--out",
        p(out),
        "--n-train",
        "4",
        "--n-val",
        "1",
        "--n-test",
        "2",
        "--seed",
        seed,
        "--mics",
        mics,
        "--duration",
        "0.25",
    ]);
}

const TINY: [&str; 14] = [
    "--channels",
    "2",
    "--base-width",
    "4",
    "--max-steps",
    "4",
    "--val-every",
    "2",
    "--batch-size",
    "2",
    "--val-subset",
    "1",
    "--seed",
    "3",
];

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", p(data), "--out", p(out)];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn simulate_is_reproducible_and_follows_the_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    simulate(&a, "7", "4");
    simulate(&b, "7", "4");
    assert_eq!(files(&a), files(&b));
    let manifest = std::fs::read_to_string(a.join("manifest")).unwrap();
    assert_eq!(manifest.lines().count(), 4 + 1 + 2);
    for line in manifest.lines() {
        let snr: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!((5.0..=15.0).contains(&snr));
    }
    assert_eq!(
        read_wav(a.join("train/train-00000/noisy.wav")).unwrap().num_channels(),
        4
    );
    let echo = std::fs::read_to_string(a.join("simulate.cfg")).unwrap();
    assert!(echo.contains("seed = 7  # flag"));
}

#[test]
fn simulate_errors_are_single_lines() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    fails(&[
        "simulate",
        "--out",
        p(&blocker.join("x")),
        "--n-train",
        "1",
        "--duration",
        "0.1",
    ]);
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "protocol = custom\nsnr_db = 15 5\n").unwrap();
    fails(&[
        "simulate",
        "--out",
        p(&dir.path().join("d")),
        "--config",
        p(&cfg),
        "--duration",
        "0.1",
    ]);
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let msg = fails(&["simulate", "--out", p(&dir.path().join("d")), "--config", p(&cfg)]);
    assert!(msg.contains("no_such_key"));
}

#[test]
fn training_writes_checkpoints_log_and_echo_with_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    simulate(&data, "1", "2");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "batch_size = 3\nlearning_rate = 0.002\n").unwrap();
    let run = dir.path().join("run");
    train(&data, &run, &["--config", p(&cfg)]);
    for f in ["best.ckpt", "last.ckpt", "train_log.csv", "train.cfg"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let echo = std::fs::read_to_string(run.join("train.cfg")).unwrap();
    assert!(echo.contains("batch_size = 2  # flag"));
    assert!(echo.contains("learning_rate = 0.002  # file"));
    assert!(echo.contains("weight_decay = 0.0001  # default"));
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "step,loss,val_sisdr");
    assert_eq!(log.lines().count(), 1 + 4 + 2);

    // the echoed config alone reproduces the run
    let again = dir.path().join("again");
    ok(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&again),
        "--config",
        p(&run.join("train.cfg")),
    ]);
    assert_eq!(
        std::fs::read(run.join("best.ckpt")).unwrap(),
        std::fs::read(again.join("best.ckpt")).unwrap()
    );
}

#[test]
fn training_rejects_more_channels_than_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    simulate(&data, "2", "2");
    let out = dir.path().join("run");
    let msg = fails(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--channels",
        "3",
        "--max-steps",
        "1",
    ]);
    assert!(msg.contains("3 channels"), "{msg}");
    assert!(!out.exists());
    fails(&["train", "--data", p(&dir.path().join("missing")), "--out", p(&out)]);
}

fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    simulate(&data, "4", "2");
    let run = dir.join("run");
    train(&data, &run, &[]);
    (data, run.join("best.ckpt"))
}

#[test]
fn enhancement_is_reproducible_mono_and_length_preserving() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let input = data.join("test/test-00000/noisy.wav");
    let (a, b) = (dir.path().join("a.wav"), dir.path().join("b.wav"));
    for out in [&a, &b] {
        ok(&[
            "enhance",
            "--ckpt",
            p(&ckpt),
            "--in",
            p(&input),
            "--out",
            p(out),
            "--steps",
            "4",
            "--seed",
            "9",
        ]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let y = read_wav(&a).unwrap();
    assert_eq!(y.num_channels(), 1);
    assert_eq!(y.sample_rate(), 16_000);
    assert_eq!(y.len(), read_wav(&input).unwrap().len());
    let c = dir.path().join("c.wav");
    ok(&[
        "enhance",
        "--ckpt",
        p(&ckpt),
        "--in",
        p(&input),
        "--out",
        p(&c),
        "--steps",
        "4",
        "--seed",
        "10",
    ]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());

    // a dataset split directory maps scene ids to output names
    let out = dir.path().join("enh");
    ok(&[
        "enhance",
        "--ckpt",
        p(&ckpt),
        "--in",
        p(&data.join("test")),
        "--out",
        p(&out),
        "--steps",
        "2",
    ]);
    assert!(out.join("test-00000.wav").is_file() && out.join("test-00001.wav").is_file());
    assert!(std::fs::read_to_string(out.join("enhance.cfg"))
        .unwrap()
        .contains("n_steps = 2  # flag"));
}

#[test]
fn enhancement_refuses_mismatched_inputs_and_settings() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let mono = dir.path().join("mono.wav");
    write_wav(&mono, &Waveform::mono(vec![0.01; 4000], 16_000)).unwrap();
    let out = p(&dir.path().join("o.wav")).to_string();
    let msg = fails(&["enhance", "--ckpt", p(&ckpt), "--in", p(&mono), "--out", &out]);
    assert!(msg.contains("1 channels") && msg.contains("expects 2"), "{msg}");
    let noisy = p(&data.join("test/test-00000/noisy.wav")).to_string();
    let msg = fails(&[
        "enhance",
        "--ckpt",
        p(&ckpt),
        "--in",
        &noisy,
        "--out",
        &out,
        "--attention",
        "off",
    ]);
    assert!(msg.contains("attention"), "{msg}");
    let msg = fails(&[
        "enhance",
        "--ckpt",
        p(&ckpt),
        "--in",
        &noisy,
        "--out",
        &out,
        "--channels",
        "4",
    ]);
    assert!(msg.contains("num_mics"), "{msg}");
    let corrupt = dir.path().join("corrupt.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 10] ^= 0xff;
    std::fs::write(&corrupt, bytes).unwrap();
    fails(&["enhance", "--ckpt", p(&corrupt), "--in", &noisy, "--out", &out]);

    // four-channel input runs on the two-channel model only when asked
    let four = dir.path().join("four.wav");
    let x = read_wav(&noisy).unwrap();
    let ch = x.channels().to_vec();
    write_wav(
        &four,
        &Waveform::new(vec![ch[0].clone(), ch[1].clone(), ch[0].clone(), ch[1].clone()], 16_000).unwrap(),
    )
    .unwrap();
    fails(&[
        "enhance",
        "--ckpt",
        p(&ckpt),
        "--in",
        p(&four),
        "--out",
        &out,
        "--steps",
        "2",
    ]);
    ok(&[
        "enhance",
        "--ckpt",
        p(&ckpt),
        "--in",
        p(&four),
        "--out",
        &out,
        "--steps",
        "2",
        "--first-channels",
    ]);
}

#[test]
fn evaluating_noisy_copies_reproduces_the_unprocessed_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    simulate(&data, "5", "2");
    let enh = dir.path().join("enh");
    std::fs::create_dir_all(&enh).unwrap();
    for id in ["test-00000", "test-00001"] {
        let x = read_wav(data.join(format!("test/{id}/noisy.wav"))).unwrap();
        write_wav(enh.join(format!("{id}.wav")), &x.take_channels(1).unwrap()).unwrap();
    }
    let report = dir.path().join("report.csv");
    let out = ok(&[
        "evaluate",
        "--enhanced",
        p(&enh),
        "--data",
        p(&data),
        "--report",
        p(&report),
        "--split",
        "test",
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("2 utterances"));
    let csv = std::fs::read_to_string(&report).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 + 1);
    assert_eq!(
        csv.lines().next().unwrap(),
        "utt_id,si_sdr_db,input_si_sdr_db,improvement_db,mse"
    );
    for row in &rows {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[1], f[2]);
        assert_eq!(f[3].parse::<f64>().unwrap(), 0.0);
    }

    std::fs::remove_file(enh.join("test-00001.wav")).unwrap();
    let msg = fails(&[
        "evaluate",
        "--enhanced",
        p(&enh),
        "--data",
        p(&data),
        "--report",
        p(&report),
        "--split",
        "test",
    ]);
    assert!(msg.contains("test-00001"));
    assert_eq!(std::fs::read_to_string(&report).unwrap().lines().count(), 1 + 1 + 1);
    fails(&[
        "evaluate",
        "--enhanced",
        p(&dir.path().join("nope")),
        "--data",
        p(&data),
        "--report",
        p(&report),
    ]);
}

fn tone(path: &Path, hz: f64, amp: f64, len: usize) {
    let x = (0..len)
        .map(|n| amp * (2.0 * std::f64::consts::PI * hz * n as f64 / 16_000.0).sin())
        .collect();
    write_wav(path, &Waveform::mono(x, 16_000)).unwrap();
}

fn read_png(path: &Path) -> (u32, u32, Vec<u8>) {
    let dec = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path).unwrap()));
    let mut reader = dec.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    (info.width, info.height, buf)
}

#[test]
fn tone_spectrogram_peaks_at_its_bin() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("tone.wav");
    let len = 8000;
    tone(&wav, 1000.0, 0.5, len);
    let expected_bin = (1000.0f64 * 512.0 / 16_000.0).round() as usize;
    let frames = StftParams::default().num_frames(len);

    let csv = dir.path().join("tone.csv");
    ok(&["spectrogram", "--in", p(&wav), "--out", p(&csv)]);
    let rows: Vec<Vec<f64>> = std::fs::read_to_string(&csv)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), frames);
    assert!(rows.iter().all(|r| r.len() == 257));
    let energy: Vec<f64> = (0..257).map(|k| rows.iter().map(|r| r[k]).sum()).collect();
    let brightest = (0..257).max_by(|&a, &b| energy[a].total_cmp(&energy[b])).unwrap();
    assert_eq!(brightest, expected_bin);

    for compressed in ["on", "off"] {
        let png_path = dir.path().join(format!("tone-{compressed}.png"));
        ok(&[
            "spectrogram",
            "--in",
            p(&wav),
            "--out",
            p(&png_path),
            "--compressed",
            compressed,
        ]);
        let (w, h, px) = read_png(&png_path);
        assert_eq!((w as usize, h), (frames, 257));
        let row_sum = |r: usize| {
            px[r * w as usize..(r + 1) * w as usize]
                .iter()
                .map(|&v| v as u64)
                .sum::<u64>()
        };
        let brightest_row = (0..h as usize).max_by_key(|&r| row_sum(r)).unwrap();
        // frequency ascends upward, so bin k sits on row h - 1 - k
        assert_eq!(brightest_row, 256 - expected_bin);
    }
}

#[test]
fn silence_renders_a_uniform_image() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("silence.wav");
    write_wav(&wav, &Waveform::mono(vec![0.0; 4000], 16_000)).unwrap();
    let out = dir.path().join("s.png");
    ok(&["spectrogram", "--in", p(&wav), "--out", p(&out)]);
    let (_, _, px) = read_png(&out);
    assert!(px.iter().all(|&v| v == px[0]));
    fails(&[
        "spectrogram",
        "--in",
        p(&dir.path().join("missing.wav")),
        "--out",
        p(&out),
    ]);
    fails(&["spectrogram", "--in", p(&wav), "--out", p(&dir.path().join("s.bmp"))]);
}

#[test]
fn thread_count_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("t.wav");
    tone(&wav, 500.0, 0.1, 2000);
    let out = p(&dir.path().join("t.csv")).to_string();
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_amdm"))
            .env("AMDM_THREADS", threads)
            .args(["spectrogram", "--in", p(&wav), "--out", &out])
            .output()
            .unwrap()
    };
    assert!(run("1").status.success());
    let bad = run("0");
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("AMDM_THREADS"));
}
