use std::path::Path;
use std::process::Command;

fn fac(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_fac"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "fac {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const CONFIG: &str = r#"
[split]
train = 6
dev = 2
test = 0
[toy.corpus]
pairs = 8
[toy.split]
train = 6
dev = 2
test = 0
[frame_vc.train]
steps = 20
[seq2seq.train]
steps = 10
[vocoder]
griffin_lim_iterations = 4
[asr]
parallelism = 2
"#;

#[test]
fn toy_workflow_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("fac.toml"), CONFIG).unwrap();
    fn with<'a>(args: &[&'a str]) -> Vec<&'a str> {
        [&["--config", "fac.toml", "--seed", "3"][..], args].concat()
    }

    fac(d, &with(&["toy", "--out", "toy"]));
    for f in [
        "toy/manifest.jsonl",
        "toy/corpus/transcripts.tsv",
        "toy/extractors/toy-ppg.json",
        "toy/extractors/toy-vq.json",
    ] {
        assert!(d.join(f).exists(), "{f} missing");
    }

    let out = fac(
        d,
        &with(&[
            "prepare",
            "--source-dir",
            "toy/corpus/toy_l2",
            "--reference-dir",
            "toy/corpus/toy_l1",
            "--transcripts",
            "toy/corpus/transcripts.tsv",
            "--out",
            "prepared/manifest.jsonl",
        ]),
    );
    assert!(out.contains("0 excluded"), "{out}");

    fac(
        d,
        &with(&[
            "extract",
            "--manifest",
            "toy/manifest.jsonl",
            "--extractor",
            "toy/extractors/toy-ppg.json",
            "--out",
            "latents",
            "--split",
            "dev",
        ]),
    );
    assert_eq!(std::fs::read_dir(d.join("latents")).unwrap().count(), 8);

    let ppg = [
        "--manifest",
        "toy/manifest.jsonl",
        "--extractor",
        "toy/extractors/toy-ppg.json",
    ];
    fac(
        d,
        &with(
            &[
                &["train", "--method", "frame-vc"],
                &ppg[..],
                &["--out", "fv.ckpt"],
            ]
            .concat(),
        ),
    );
    for m in ["cascade", "stg", "lsc"] {
        let bundle = format!("bundles/{m}");
        fac(
            d,
            &with(
                &[
                    &["train", "--method", m],
                    &ppg[..],
                    &["--frame-vc", "fv.ckpt", "--out", &bundle],
                ]
                .concat(),
            ),
        );
        assert!(d.join(&bundle).join("method.json").exists());
        assert_eq!(d.join(&bundle).join("frame_vc.ckpt").exists(), m != "stg");
    }

    let src = d.join("toy/corpus/toy_l2");
    let first = std::fs::read_dir(&src)
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let first = first.to_str().unwrap();
    let out = fac(
        d,
        &with(&[
            "convert",
            "--method",
            "lsc",
            "--bundle",
            "bundles/lsc",
            "--in",
            first,
            "--out",
            "converted/lsc",
            "--dump-intermediates",
        ]),
    );
    assert!(out.contains("stopped naturally"));
    let stem = Path::new(first).file_stem().unwrap().to_str().unwrap();
    assert!(d.join("converted/lsc").join(format!("{stem}.wav")).exists());
    assert!(d.join("converted/lsc/intermediates").exists());
    fac(
        d,
        &with(&[
            "convert",
            "--method",
            "stg",
            "--bundle",
            "bundles/stg",
            "--in",
            "toy/corpus/toy_l2",
            "--out",
            "systems/stg",
        ]),
    );
    let wrong = Command::new(env!("CARGO_BIN_EXE_fac"))
        .current_dir(d)
        .args(with(&[
            "convert",
            "--method",
            "cascade",
            "--bundle",
            "bundles/stg",
            "--in",
            first,
            "--out",
            "x",
        ]))
        .output()
        .unwrap();
    assert!(!wrong.status.success());

    for (sys, spk) in [("source", "toy_l2"), ("target", "toy_l1")] {
        std::fs::create_dir_all(d.join("systems").join(sys)).unwrap();
        for e in std::fs::read_dir(d.join("toy/corpus").join(spk)).unwrap() {
            let p = e.unwrap().path();
            std::fs::copy(&p, d.join("systems").join(sys).join(p.file_name().unwrap())).unwrap();
        }
    }
    let out = fac(
        d,
        &with(&[
            "eval",
            "--systems",
            "systems",
            "--transcripts",
            "toy/corpus/transcripts.tsv",
            "--asr-command",
            "printf 'aa iy'",
            "--reference-table",
            "--out",
            "report.json",
            "--per-utterance",
            "per_utt.jsonl",
        ]),
    );
    assert!(
        out.contains("reference table: accentedness vs CER r = 0.413"),
        "{out}"
    );
    assert!(out.contains("System"));
    assert_eq!(
        std::fs::read_to_string(d.join("per_utt.jsonl"))
            .unwrap()
            .lines()
            .count(),
        24
    );
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["systems"].as_array().unwrap().len(), 3);

    let out = fac(
        d,
        &with(&[
            "sessions",
            "--systems-dir",
            "systems",
            "--listeners",
            "4",
            "--per-listener",
            "3",
            "--axes",
            "naturalness,accentedness,similarity",
            "--out",
            "sessions.json",
        ]),
    );
    assert!(out.contains("4 sessions, 36 task slots"), "{out}");
    assert!(d.join("samples.json").exists());

    std::fs::write(d.join("ratings.jsonl"), "").unwrap();
    let csv = fac(d, &with(&["export", "--store", "ratings.jsonl"]));
    assert_eq!(
        csv,
        "listener_id,sample_id,system_id,axis,value,timestamp\n"
    );
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.toml"), "[vocoder]\nbogus = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fac"))
        .current_dir(tmp.path())
        .args(["--config", "bad.toml", "eval", "--reference-table"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
