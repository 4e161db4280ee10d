use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lrasr::manifest::read_manifest;

fn lrasr(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lrasr"));
    c.args(args).env_clear();
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = lrasr(args, &[]);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--encoder-layers",
    "8:10:5,16:8:8,16:8:8",
    "--model-dim",
    "16",
    "--ffn-dim",
    "32",
    "--num-heads",
    "2",
    "--num-transformer-layers",
    "1",
    "--quantizer-groups",
    "2",
    "--entries-per-group",
    "8",
    "--codevector-dim",
    "8",
    "--batch-budget",
    "40000",
    "--accumulation",
    "1",
    "--validate-every",
    "2",
    "--max-updates",
    "4",
];

fn tiny_fixture(dir: &Path) {
    ok(&[
        "synth-fixture",
        "--output-dir",
        s(dir),
        "--seed",
        "3",
        "--train-count",
        "6",
        "--valid-count",
        "3",
        "--test-count",
        "3",
        "--unlabeled-count",
        "4",
    ]);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_fixture_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    tiny_fixture(&a);
    tiny_fixture(&b);
    let (da, db) = (dir_bytes(&a), dir_bytes(&b));
    assert!(da.iter().any(|(n, _)| n == "train.jsonl"));
    assert_eq!(da, db);
    assert_eq!(read_manifest(&a.join("train.jsonl")).unwrap().len(), 6);
}

#[test]
fn small_pipeline_end_to_end() {
    let t = tempfile::tempdir().unwrap();
    let fx = t.path().join("fx");
    tiny_fixture(&fx);
    let vocab = t.path().join("vocab.txt");
    ok(&[
        "vocab",
        "--manifests",
        &format!("{},{}", s(&fx.join("train.jsonl")), s(&fx.join("valid.jsonl"))),
        "--output",
        s(&vocab),
    ]);
    let (unlabeled, train, valid) = (fx.join("unlabeled.jsonl"), fx.join("train.jsonl"), fx.join("valid.jsonl"));
    let pt = t.path().join("pt");
    let mut args = vec!["pretrain", "--train-manifest", s(&unlabeled), "--output-dir", s(&pt)];
    args.extend_from_slice(SMALL);
    ok(&args);
    assert!(pt.join("last.ckpt").exists());

    let ft = t.path().join("ft");
    let init = pt.join("last.ckpt");
    let mut args = vec![
        "finetune",
        "--train-manifest",
        s(&train),
        "--valid-manifest",
        s(&valid),
        "--vocab",
        s(&vocab),
        "--init",
        s(&init),
        "--output-dir",
        s(&ft),
    ];
    args.extend_from_slice(SMALL);
    ok(&args);
    for name in
        ["best.ckpt", "step-000002.ckpt", "step-000004.ckpt", "train_log.jsonl", "validation.jsonl", "config.txt"]
    {
        assert!(ft.join(name).exists(), "missing {name}");
    }

    let lm = t.path().join("lm.arpa");
    ok(&["lm-train", "--corpus", s(&fx.join("lm_corpus.txt")), "--order", "3", "--output", s(&lm)]);
    let hyps = t.path().join("hyps.jsonl");
    let test = fx.join("test.jsonl");
    ok(&[
        "decode",
        "--checkpoint",
        s(&ft.join("best.ckpt")),
        "--manifest",
        s(&test),
        "--lm",
        s(&lm),
        "--beam-width",
        "4",
        "--nbest",
        "2",
        "--output",
        s(&hyps),
    ]);
    let lines = fs::read_to_string(&hyps).unwrap();
    assert!(lines.lines().count() >= 3);
    let table = ok(&["score", "--refs", s(&test), "--hyps", s(&hyps)]);
    assert!(table.contains("utterances: 3"), "{table}");
}

#[test]
fn score_identical_files_and_thresholds() {
    let t = tempfile::tempdir().unwrap();
    let fx = t.path().join("fx");
    tiny_fixture(&fx);
    let test = fx.join("test.jsonl");
    let report = t.path().join("score.json");
    let out = lrasr(&["score", "--refs", s(&test), "--hyps", s(&test), "--max-cer", "0", "--output", s(&report)], &[]);
    assert_eq!(out.status.code(), Some(0));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["cer"].as_f64(), Some(0.0));

    let records = read_manifest(&test).unwrap();
    let wrong: String = records
        .iter()
        .map(|r| format!("{{\"utt_id\":{:?},\"rank\":1,\"score\":0.0,\"text\":\"zzz\"}}\n", r.audio_path))
        .collect();
    let hyps = t.path().join("wrong.jsonl");
    fs::write(&hyps, wrong).unwrap();
    let out = lrasr(&["score", "--refs", s(&test), "--hyps", s(&hyps), "--max-wer", "50"], &[]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn flag_beats_file_beats_env() {
    let t = tempfile::tempdir().unwrap();
    let corpus = t.path().join("c.txt");
    fs::write(&corpus, "a b c\nb c a\nc a b a\n").unwrap();
    let conf = t.path().join("run.conf");
    fs::write(&conf, "# lm\norder = 2\n").unwrap();
    let sections = |args: &[&str], env: &[(&str, &str)]| {
        let out_path = t.path().join("m.arpa");
        let mut full = vec!["lm-train", "--corpus", s(&corpus), "--output", s(&out_path)];
        full.extend_from_slice(args);
        let out = lrasr(&full, env);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (
            fs::read_to_string(&out_path).unwrap().matches("-grams:").count(),
            String::from_utf8_lossy(&out.stderr).into_owned(),
        )
    };
    let env = [("LRASR_ORDER", "3")];
    assert_eq!(sections(&[], &env).0, 3);
    let (n, echo) = sections(&["--config", s(&conf)], &env);
    assert_eq!(n, 2);
    assert!(echo.contains("# file\norder = 2"), "{echo}");
    assert_eq!(sections(&["--config", s(&conf), "--order", "1"], &env).0, 1);
    assert_eq!(sections(&[], &[]).0, 4);
}

#[test]
fn bad_input_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let conf = t.path().join("bad.conf");
    fs::write(&conf, "ordr = 2\n").unwrap();
    let corpus = t.path().join("c.txt");
    fs::write(&corpus, "a b\n").unwrap();
    let out = lrasr(&["lm-train", "--config", s(&conf), "--corpus", s(&corpus), "--output", "x.arpa"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ordr"));
    assert_eq!(lrasr(&["lm-train", "--bogus"], &[]).status.code(), Some(1));
    let missing = t.path().join("missing.txt");
    let out = lrasr(&["lm-train", "--corpus", s(&missing), "--output", s(&t.path().join("y.arpa"))], &[]);
    assert_eq!(out.status.code(), Some(2));
    let arpa = t.path().join("broken.arpa");
    fs::write(&arpa, "\\data\\\nngram 1=2\n\n\\1-grams:\n-1\ta\n\\end\\\n").unwrap();
    let out = lrasr(&["lm-ppl", "--lm", s(&arpa), "--corpus", s(&corpus)], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 6"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn single_symbol_corpus_has_unit_perplexity() {
    let t = tempfile::tempdir().unwrap();
    let corpus = t.path().join("one.txt");
    fs::write(&corpus, vec!["a"; 1000].join(" ") + "\n").unwrap();
    let lm = t.path().join("one.arpa");
    ok(&["lm-train", "--corpus", s(&corpus), "--order", "2", "--output", s(&lm)]);
    let json: serde_json::Value =
        serde_json::from_str(&ok(&["lm-ppl", "--lm", s(&lm), "--corpus", s(&corpus)])).unwrap();
    let ppl = json["ppl_including_oov"].as_f64().unwrap();
    assert!((ppl - 1.0).abs() < 0.01, "{ppl}");
}

#[test]
fn mix_replicates_by_factor() {
    let t = tempfile::tempdir().unwrap();
    let fx = t.path().join("fx");
    tiny_fixture(&fx);
    let out = t.path().join("mixed").join("train.jsonl");
    let sources = format!("{}:3,{}:1", s(&fx.join("valid.jsonl")), s(&fx.join("train.jsonl")));
    ok(&["mix", "--sources", &sources, "--seed", "5", "--output", s(&out)]);
    let mixed = read_manifest(&out).unwrap();
    assert_eq!(mixed.len(), 3 * 3 + 6);
    let sources = format!("{}:0.5,{}:1", s(&fx.join("valid.jsonl")), s(&fx.join("train.jsonl")));
    ok(&["mix", "--sources", &sources, "--output", s(&out)]);
    assert_eq!(read_manifest(&out).unwrap().len(), 12);
}

#[test]
fn prepare_splits_and_normalizes() {
    use lrasr_core::corpus::AudioClip;
    let t = tempfile::tempdir().unwrap();
    let input = t.path().join("in");
    fs::create_dir_all(&input).unwrap();
    let rate = 44_100u32;
    let tone =
        |secs: f64| (0..(secs * rate as f64) as usize).map(|i| 0.4 * (i as f32 * 0.05).sin()).collect::<Vec<f32>>();
    let mut long = tone(5.0);
    long.extend(vec![0.0; (0.8 * rate as f64) as usize]);
    long.extend(tone(6.0));
    lrasr::wav::write_wav(&input.join("long.wav"), &AudioClip::mono(long, rate).unwrap()).unwrap();
    lrasr::wav::write_wav(&input.join("said.wav"), &AudioClip::mono(tone(3.0), rate).unwrap()).unwrap();
    let transcripts = t.path().join("t.tsv");
    fs::write(&transcripts, "said\tSine, sine.. 'oyanruru [laughs] kotan\n").unwrap();
    let out = t.path().join("out");
    ok(&["prepare", "--input", s(&input), "--output-dir", s(&out), "--transcripts", s(&transcripts), "--lang", "ain"]);
    let records = read_manifest(&out.join("manifest.jsonl")).unwrap();
    assert_eq!(records.len(), 3);
    let labelled: Vec<_> = records.iter().filter(|r| !r.text.is_empty()).collect();
    assert_eq!(labelled.len(), 1);
    assert_eq!(labelled[0].text, "sine sine 'oyanruru kotan");
    assert!(records.iter().all(|r| r.lang == "ain" && (2.0..=15.0).contains(&r.duration_s)));
}
