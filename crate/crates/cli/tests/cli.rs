use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nsnmt::checkpoint::{Checkpoint, Model, Translator};
use nsnmt::corpus::frame;
use nsnmt::seq2seq::greedy_decode;
use tempfile::TempDir;

fn nsnmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsnmt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

/// 800-row corpus over `ar en es fr`.
fn desk_corpus(dir: &Path) {
    for lang in ["ar", "en", "es", "fr"] {
        write_lines(
            &dir.join(format!("train.{lang}")),
            (0..800).map(|i| format!("{lang}{i}  w{}", i % 7)),
        );
    }
}

fn synth(dir: &Path) {
    let o = nsnmt(&["synth", s(dir), "--train-rows", "120"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn toy_config(dir: &Path, data: &Path, out: &str, sources: &[&str], kind: &str) -> PathBuf {
    let quoted: Vec<String> = sources.iter().map(|l| format!("\"{l}\"")).collect();
    let text = format!(
        r#"data_dir = "{}"
out_dir = "{}"
sources = [{}]
target = "t"
model_kind = "{kind}"

[model]
gating_hidden = 8

[model.hyper]
hidden_dim = 6
embed_dim = 6

[train]
max_epochs = 2
batch_size = 8
learning_rate = 0.01
"#,
        s(data),
        s(&dir.join(out)),
        quoted.join(", ")
    );
    let path = dir.join(format!("{out}.toml"));
    fs::write(&path, text).unwrap();
    path
}

fn counts(out: &str) -> Vec<(String, usize)> {
    out.lines()
        .map(|l| {
            let (lang, n) = l.split_once('\t').unwrap();
            (lang.to_string(), n.parse().unwrap())
        })
        .collect()
}

#[test]
fn excise_block_plan_prints_counts() {
    let tmp = TempDir::new().unwrap();
    desk_corpus(tmp.path());
    let plan = tmp.path().join("plan");
    fs::write(&plan, "1 200 es\n201 400 ar\n401 600 fr\n").unwrap();
    let out = tmp.path().join("out");
    let o = nsnmt(&["excise", s(tmp.path()), s(&out), "--plan", s(&plan)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        counts(&stdout(&o)),
        [
            ("ar".into(), 600),
            ("en".into(), 800),
            ("es".into(), 600),
            ("fr".into(), 600)
        ]
    );
    let es = fs::read_to_string(out.join("train.es")).unwrap();
    let lines: Vec<&str> = es.lines().collect();
    assert_eq!(lines.len(), 800);
    assert!(lines[..200].iter().all(|l| l.is_empty()));
    assert_eq!(lines[200], "es200  w4");
}

#[test]
fn excise_with_empty_plan_copies_bytes() {
    let tmp = TempDir::new().unwrap();
    desk_corpus(tmp.path());
    let plan = tmp.path().join("plan");
    fs::write(&plan, "# nothing\n").unwrap();
    let out = tmp.path().join("out");
    let o = nsnmt(&["excise", s(tmp.path()), s(&out), "--plan", s(&plan)]);
    assert!(o.status.success());
    for lang in ["ar", "en", "es", "fr"] {
        let name = format!("train.{lang}");
        assert_eq!(
            fs::read(tmp.path().join(&name)).unwrap(),
            fs::read(out.join(&name)).unwrap()
        );
    }
}

#[test]
fn excise_bad_interval_exits_2_citing_line() {
    let tmp = TempDir::new().unwrap();
    desk_corpus(tmp.path());
    let plan = tmp.path().join("plan");
    fs::write(&plan, "1 200 es\n300 100 ar\n").unwrap();
    let o = nsnmt(&[
        "excise",
        s(tmp.path()),
        s(&tmp.path().join("out")),
        "--plan",
        s(&plan),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    fs::write(&plan, "700 900 es\n").unwrap();
    let o = nsnmt(&[
        "excise",
        s(tmp.path()),
        s(&tmp.path().join("out")),
        "--plan",
        s(&plan),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"));
}

#[test]
fn prepare_filters_lengths_and_writes_vocabularies() {
    let tmp = TempDir::new().unwrap();
    let raw = tmp.path().join("raw");
    fs::create_dir(&raw).unwrap();
    for split in ["train", "valid", "test"] {
        write_lines(
            &raw.join(format!("{split}.x")),
            ["a b".into(), "a b c d".into(), String::new()],
        );
        write_lines(
            &raw.join(format!("{split}.y")),
            ["p".into(), "p".into(), "q q q q q".into()],
        );
    }
    let out = tmp.path().join("prep");
    let o = nsnmt(&[
        "prepare",
        s(&raw),
        s(&out),
        "--languages",
        "x,y",
        "--max-len",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("train\t1 of 3 rows kept"));
    assert_eq!(fs::read_to_string(out.join("train.x")).unwrap(), "a b\n");
    let vocab = fs::read_to_string(out.join("vocab.x")).unwrap();
    assert_eq!(vocab.lines().skip(5).collect::<Vec<_>>(), ["a", "b"]);
}

#[test]
fn train_one2one_writes_checkpoint_and_history() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let cfg = toy_config(tmp.path(), &data, "run", &["a"], "one2one");
    let o = nsnmt(&["train", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("run");
    assert!(run.join("model.ckpt").exists());
    let history: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("history.json")).unwrap()).unwrap();
    assert!(!history[0]["history"].as_array().unwrap().is_empty());
    assert!(stdout(&o).contains("best_valid_log_ppl"));
}

#[test]
fn train_multienc_embeds_three_languages_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let first = toy_config(tmp.path(), &data, "one", &["a", "b", "c"], "multienc");
    let second = toy_config(tmp.path(), &data, "two", &["a", "b", "c"], "multienc");
    for cfg in [&first, &second] {
        let o = nsnmt(&["train", s(cfg), "--seed", "5"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ck = Checkpoint::load(&tmp.path().join("one/model.ckpt")).unwrap();
    assert_eq!(ck.source_languages, ["a", "b", "c"]);
    assert_eq!(
        fs::read(tmp.path().join("one/history.json")).unwrap(),
        fs::read(tmp.path().join("two/history.json")).unwrap()
    );
}

#[test]
fn train_config_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let cfg = toy_config(tmp.path(), &data, "run", &["a"], "multienc");
    let o = nsnmt(&["train", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "sources = 3\n").unwrap();
    assert_eq!(nsnmt(&["train", s(&bad)]).status.code(), Some(2));

    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("learning_rate = 0.01", "learning_rate = -1.0");
    fs::write(&cfg, text).unwrap();
    assert_eq!(
        nsnmt(&["train", s(&cfg), "--model", "one2one"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        nsnmt(&["train", s(&cfg), "--model", "nope"]).status.code(),
        Some(2)
    );
}

#[test]
fn translate_keeps_rows_and_warns_on_empty_rows() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let cfg = toy_config(tmp.path(), &data, "run", &["a", "b", "c"], "multienc");
    assert!(nsnmt(&["train", s(&cfg)]).status.success());
    let ckpt = tmp.path().join("run/model.ckpt");

    let inputs: Vec<PathBuf> = ["a", "b", "c"]
        .iter()
        .map(|l| tmp.path().join(format!("in.{l}")))
        .collect();
    write_lines(
        &inputs[0],
        ["a1 a2 a3".into(), String::new(), "a4 a5 a6".into()],
    );
    write_lines(&inputs[1], ["bk1 bl2".into(), String::new(), String::new()]);
    write_lines(&inputs[2], [String::new(), String::new(), String::new()]);
    let out = tmp.path().join("out.t");
    let o = nsnmt(&[
        "translate",
        "--checkpoint",
        s(&ckpt),
        s(&inputs[0]),
        s(&inputs[1]),
        s(&inputs[2]),
        "-o",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("row 2 has no source"));
    let lines: Vec<String> = fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].is_empty());
    assert!(!lines[2].is_empty(), "single-source row decoded to nothing");

    // width 1 is greedy decoding
    let t = Translator::load(&ckpt).unwrap();
    let Model::MultiEncoder(m) = &t.model else {
        panic!("not a multi-encoder")
    };
    let cells = [vec!["a4".to_string(), "a5".into(), "a6".into()]];
    let sources = vec![
        frame(Some(&cells[0]), &t.source_vocabs[0]),
        frame(None, &t.source_vocabs[1]),
        frame(None, &t.source_vocabs[2]),
    ];
    let ids = greedy_decode(&mut m.session(&sources).unwrap(), 80).unwrap();
    assert_eq!(t.target_vocab.decode(&ids).join(" "), lines[2]);

    let o = nsnmt(&[
        "translate",
        "--checkpoint",
        s(&ckpt),
        s(&inputs[0]),
        "-o",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluate_significance_and_report() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let refs = data.join("test.t");
    let o = nsnmt(&["evaluate", s(&refs), s(&refs)]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("BLEU = 100.00"), "{}", stdout(&o));

    let o = nsnmt(&["evaluate", s(&data.join("train.t")), s(&refs)]);
    assert_eq!(o.status.code(), Some(2));

    let o = nsnmt(&["significance", s(&refs), s(&refs), s(&refs)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("not significant"));

    // a degraded copy of the references as the baseline
    let degraded = tmp.path().join("degraded.t");
    let text = fs::read_to_string(&refs).unwrap();
    write_lines(
        &degraded,
        text.lines()
            .map(|l| l.split(' ').take(3).collect::<Vec<_>>().join(" ")),
    );
    let o = nsnmt(&["significance", s(&refs), s(&refs), s(&degraded)]);
    assert!(
        stdout(&o).contains("significantly better"),
        "{}",
        stdout(&o)
    );

    let json = tmp.path().join("report.json");
    let o = nsnmt(&[
        "report",
        s(&data),
        "--sources",
        "a,b,c",
        "--target",
        "t",
        "--baseline",
        &format!("short={}", s(&degraded)),
        "--multi",
        &format!("oracle={}", s(&refs)),
        "--multi",
        &format!("same={}", s(&degraded)),
        "--json",
        s(&json),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert_eq!(table.matches("(+").count(), 2, "{table}");
    assert!(table.contains("(+0.00)"));
    assert!(table.contains("complete (90)  incomplete (110)"));
    let parsed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(parsed["best_baseline"], "short");
}
