use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

const TINY: &str = "\
data.concept_count = 50
data.mono_lines = 20
data.parallel_lines = 20
model.d_model = 16
model.n_heads = 2
model.d_ff = 32
model.n_enc_layers = 1
model.n_dec_layers = 1
train.total_steps = 4
train.batch_size = 4
train.bt_start_step = 1
train.bt_probability = 0.5
eval.per_value = 2
eval.exemplars_per_value = 2
eval.translation_lines = 3
eval.within_lambdas = 0.5,1
eval.cross_lambdas = 0,1
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_unirewrite"));
    c.env_remove(unirewrite_cli::CONFIG_ENV);
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert_eq!(o.status.code(), Some(0), "{args:?}\n{}", stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    config: PathBuf,
    data: PathBuf,
    checkpoint: PathBuf,
    pivot_sentence: String,
}

/// Generated data and a 4-step model shared by all tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        let config = root.join("tiny.conf");
        std::fs::write(&config, TINY).unwrap();
        let data = root.join("data");
        let run_dir = root.join("run");
        ok(&["--config", s(&config), "gen-data", "--out", s(&data)]);
        ok(&["--config", s(&config), "train", "--data", s(&data), "--out", s(&run_dir)]);
        let mono = std::fs::read_to_string(data.join("mono/x1.jsonl")).unwrap();
        let first: serde_json::Value = serde_json::from_str(mono.lines().next().unwrap()).unwrap();
        let pivot_sentence = first["text"].as_str().unwrap().to_string();
        Fixture { config, data, checkpoint: run_dir.join("model.ckpt"), pivot_sentence }
    })
}

fn model_args<'a>(f: &'a Fixture) -> Vec<&'a str> {
    vec!["--config", s(&f.config)]
}

#[test]
fn help_documents_every_flag() {
    let mut root = unirewrite_cli::command();
    root.build();
    let mut commands = vec![root.clone()];
    commands.extend(root.get_subcommands().cloned());
    for mut cmd in commands {
        let name = cmd.get_name().to_string();
        let help = cmd.render_long_help().to_string();
        for arg in cmd.get_arguments() {
            if let Some(long) = arg.get_long() {
                assert!(help.contains(&format!("--{long}")), "{name}: --{long} missing from help");
                assert!(
                    arg.get_help().is_some() || arg.get_long_help().is_some(),
                    "{name}: --{long} has no description"
                );
            }
        }
    }
    let o = ok(&["--help"]);
    let text = stdout(&o);
    for sub in ["gen-data", "train", "rewrite", "translate", "eval-sweep", "benchmark", "serve"] {
        assert!(text.contains(sub), "{sub}");
    }
    assert!(text.contains("train.learning_rate"));
    ok(&["train", "--help"]);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["gen-data"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = run(&["--set", "train.warp_speed=9", "gen-data", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("warp_speed"));
    assert_eq!(run(&["--set", "seed", "gen-data", "--out", s(&out)]).status.code(), Some(1));
    let f = fixture();
    let o = run(&["train", "--data", s(&f.data), "--out", s(&out), "--preset", "-fast"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["train", "--data", s(&f.data), "--out", s(&out), "--preset", "-BT", "--resume", s(&f.checkpoint)]);
    assert_eq!(o.status.code(), Some(1), "conflicting flags");
    assert!(!out.exists());
}

#[test]
fn gen_data_is_deterministic_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("nested/a");
    let b = dir.path().join("b");
    let f = fixture();
    let o = ok(&["--config", s(&f.config), "gen-data", "--out", s(&a)]);
    assert!(stderr(&o).contains("# effective configuration"));
    assert!(stderr(&o).contains("data.mono_lines = 20"));
    ok(&["--config", s(&f.config), "gen-data", "--out", s(&b)]);
    for rel in ["data.json", "world.json", "vocab.txt", "mono/x1.jsonl", "mono/x4.jsonl", "parallel/x1-x2.jsonl"] {
        let x = std::fs::read(a.join(rel)).unwrap();
        assert_eq!(x, std::fs::read(b.join(rel)).unwrap(), "{rel}");
    }
    let c = dir.path().join("c");
    ok(&["--config", s(&f.config), "--set", "seed=99", "gen-data", "--out", s(&c)]);
    assert_ne!(std::fs::read(a.join("mono/x1.jsonl")).unwrap(), std::fs::read(c.join("mono/x1.jsonl")).unwrap());

    let o = run(&["--set", "data.supervised_seeds=", "--set", "data.unsupervised_seeds=", "gen-data", "--out", s(&c)]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["--set", "data.mono_lines=0", "gen-data", "--out", s(&c)]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn default_config_path_comes_from_environment() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .env(unirewrite_cli::CONFIG_ENV, &f.config)
        .args(["--set", "data.mono_lines=21", "gen-data", "--out", s(&dir.path().join("d"))])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("data.parallel_lines = 20"));
    assert!(stderr(&o).contains("data.mono_lines = 21"));
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "colour = red\n").unwrap();
    let o = bin().env(unirewrite_cli::CONFIG_ENV, &bad).args(["gen-data", "--out", "x"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn training_is_deterministic_and_resumable() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (a, b, r) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("r"));
    let base = model_args(f);
    let train = |out: &Path, extra: &[&str]| {
        let mut args = base.clone();
        args.extend(extra);
        args.extend(["train", "--data", s(&f.data), "--out", s(out)]);
        ok(&args)
    };
    let o = train(&a, &[]);
    assert!(stdout(&o).contains("step 4 "));
    train(&b, &[]);
    for name in ["model.ckpt", "metrics.csv", "config.txt"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    assert!(a.join("timing.csv").exists());
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some(unirewrite::trainer::METRICS_HEADER));
    assert_eq!(metrics.lines().count(), 5);

    train(&r, &["--set", "train.total_steps=2"]);
    let mut args = base.clone();
    args.extend(["train", "--data", s(&f.data), "--out", s(&r), "--resume"]);
    let ck = r.join("model.ckpt");
    args.push(s(&ck));
    let o = ok(&args);
    assert!(stdout(&o).contains("steps 2..4"));
    assert_eq!(std::fs::read(a.join("model.ckpt")).unwrap(), std::fs::read(r.join("model.ckpt")).unwrap());
    assert_eq!(metrics, std::fs::read_to_string(r.join("metrics.csv")).unwrap());
}

#[test]
fn presets_switch_objectives_off() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let full = std::fs::read_to_string(f.checkpoint.parent().unwrap().join("metrics.csv")).unwrap();
    assert!(full.contains(",backtranslate,"), "{full}");
    let out = dir.path().join("nobt");
    let mut args = model_args(f);
    args.extend(["train", "--data", s(&f.data), "--out", s(&out), "--preset", "-BT"]);
    ok(&args);
    let m = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(!m.contains(",backtranslate,"));
    assert!(std::fs::read_to_string(out.join("config.txt")).unwrap().contains("train.use_bt = false"));
    let out = dir.path().join("nopara");
    let mut args = model_args(f);
    args.extend(["train", "--data", s(&f.data), "--out", s(&out), "--preset=\u{2212}para"]);
    ok(&args);
    assert!(!std::fs::read_to_string(out.join("metrics.csv")).unwrap().contains(",parallel,"));
}

#[test]
fn rewrite_and_translate() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ea = dir.path().join("a.txt");
    let eb = dir.path().join("b.txt");
    std::fs::write(&ea, format!("{}\n\n{}\n", f.pivot_sentence, f.pivot_sentence)).unwrap();
    std::fs::write(&eb, format!("{}\n", f.pivot_sentence)).unwrap();
    let common = ["--data", s(&f.data), "--checkpoint", s(&f.checkpoint), "--input", &f.pivot_sentence];

    let translate = |extra: &[&str]| {
        let mut args = vec!["translate"];
        args.extend(common);
        args.extend(["--target-lang", "x2"]);
        args.extend(extra);
        ok(&args)
    };
    let t = stdout(&translate(&[]));
    let mut args = vec!["rewrite"];
    args.extend(common);
    args.extend(["--target-lang", "x2", "--lambda", "0", "--mode", "cross"]);
    assert_eq!(stdout(&ok(&args)), t);

    let mut args = vec!["rewrite"];
    args.extend(common);
    args.extend(["--target-lang", "x1", "--lambda", "1.5", "--mode", "within", "--exemplars-a", s(&ea)]);
    let missing = dir.path().join("missing.txt");
    let mut with_missing = args.clone();
    with_missing.extend(["--exemplars-b", s(&missing)]);
    let o = run(&with_missing);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.txt"));
    assert_eq!(run(&args).status.code(), Some(1), "λ > 0 without exemplars-b");
    args.extend(["--exemplars-b", s(&eb), "--strategy", "sample", "--temperature", "1.2", "--sample-seed", "3"]);
    assert_eq!(stdout(&ok(&args)), stdout(&ok(&args)));

    let sampled = translate(&["--strategy", "greedy", "--max-len", "5"]);
    assert!(stdout(&sampled).split_whitespace().count() <= 5);

    let o = run(&["translate", "--data", s(&f.data), "--checkpoint", s(&f.checkpoint), "--input", "", "--target-lang", "x2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["translate", "--data", s(&f.data), "--checkpoint", s(&f.checkpoint), "--input", "a", "--target-lang", "zz"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_and_benchmark_reports() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("reports");
    let mut args = model_args(f);
    args.extend(["eval-sweep", "--data", s(&f.data), "--checkpoint", s(&f.checkpoint), "--out", s(&out)]);
    ok(&args);
    let mut sweeps: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("sweep_"))
        .collect();
    sweeps.sort();
    assert_eq!(
        sweeps,
        ["sweep_cross-supervised.csv", "sweep_cross-unsupervised.csv", "sweep_cross-zero-shot.csv", "sweep_within.csv"]
    );
    let first = std::fs::read(out.join("sweep_within.csv")).unwrap();
    let one = dir.path().join("one");
    let mut args = model_args(f);
    args.extend(["eval-sweep", "--data", s(&f.data), "--checkpoint", s(&f.checkpoint), "--out", s(&one)]);
    args.extend(["--scenario", "within"]);
    ok(&args);
    assert_eq!(std::fs::read(one.join("sweep_within.csv")).unwrap(), first);
    assert_eq!(std::fs::read_dir(&one).unwrap().count(), 2);
    let mut bad = args.clone();
    *bad.last_mut().unwrap() = "sideways";
    assert_eq!(run(&bad).status.code(), Some(1));

    let table = dir.path().join("bench.csv");
    let mut args = model_args(f);
    args.extend(["benchmark", "--data", s(&f.data), "--checkpoint", s(&f.checkpoint), "--out", s(&table)]);
    let o = ok(&args);
    let text = std::fs::read_to_string(&table).unwrap();
    assert_eq!(stdout(&o), text);
    assert_eq!(text.lines().count(), 1 + 6);
    let mut args = model_args(f);
    args.extend(["--set", "eval.translation_lines=0", "benchmark", "--data", s(&f.data), "--checkpoint", s(&f.checkpoint)]);
    assert_eq!(run(&args).status.code(), Some(2));
}

fn http_get(addr: &str, path: &str) -> Option<String> {
    let mut stream = TcpStream::connect(addr).ok()?;
    stream.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    write!(stream, "GET {path} HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").ok()?;
    let mut resp = String::new();
    stream.read_to_string(&mut resp).ok()?;
    Some(resp)
}

#[test]
fn serve_answers_health_and_reports_failures() {
    let f = fixture();
    let mut child = bin()
        .args(["serve", "--data", s(&f.data), "--checkpoint", s(&f.checkpoint), "--bind", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let first = lines.next().unwrap().unwrap();
    let addr = first.strip_prefix("listening on http://").unwrap().to_string();
    let deadline = Instant::now() + Duration::from_secs(30);
    let mut healthy = false;
    while Instant::now() < deadline {
        if let Some(resp) = http_get(&addr, "/v1/health") {
            if resp.starts_with("HTTP/1.1 200") {
                healthy = resp.contains("\"vocab_hash\"");
                break;
            }
            assert!(resp.starts_with("HTTP/1.1 503"), "{resp}");
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    assert!(healthy);

    let busy = run(&["serve", "--data", s(&f.data), "--checkpoint", s(&f.checkpoint), "--bind", &addr]);
    assert_eq!(busy.status.code(), Some(2));
    assert!(stderr(&busy).contains("cannot bind"));
    child.kill().unwrap();
    child.wait().unwrap();

    let o = run(&["serve", "--data", s(&f.data), "--checkpoint", "/nonexistent/model.ckpt", "--bind", "127.0.0.1:0"]);
    assert_eq!(o.status.code(), Some(2));
}
