use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_pmech");

fn pmech(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn script() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scripts/pipeline.sh")
}

fn run_pipeline(out: &Path) -> Output {
    Command::new("bash")
        .arg(script())
        .env("PMECH", BIN)
        .env("OUT", out)
        .env("PROFILE", "smoke")
        .env("PROTOMECH_THREADS", "2")
        .output()
        .unwrap()
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn smoke_pipeline_is_complete_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let first = run_pipeline(&a);
    assert!(first.status.success(), "{}", stderr(&first));
    let second = run_pipeline(&b);
    assert!(second.status.success(), "{}", stderr(&second));

    let table = fs::read_to_string(a.join("steering_table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(
        lines[0],
        "method,n_latents,n_proposed,n_unique,n_scored,mean,std,max,top10,top20,true_fitness"
    );
    let methods: Vec<String> = lines[1..]
        .iter()
        .map(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            assert_eq!(cells.len(), 11, "{l}");
            for c in &cells[5..10] {
                assert!(c.parse::<f64>().unwrap().is_finite(), "{l}");
            }
            format!("{}/{}", cells[0], cells[1])
        })
        .collect();
    assert_eq!(
        methods,
        [
            "circuit/2",
            "random/2",
            "circuit/4",
            "random/4",
            "caa-extremes/",
            "caa-functional/"
        ]
    );

    let files_a = snapshot(&a);
    let files_b = snapshot(&b);
    for stage in [
        "gen-corpus",
        "pretrain-lm",
        "record-traces",
        "train-clt",
        "train-plt",
        "eval-replacement",
        "train-probe",
        "discover",
        "steer",
        "export-viz",
    ] {
        assert!(
            files_a.contains_key(&format!("{stage}.config")),
            "no echo for {stage}"
        );
    }
    for name in [
        "activation_indices.json",
        "seq.txt",
        "top_activations.json",
        "virtual_weights.json",
    ] {
        assert!(files_a.contains_key(&format!("viz/{name}")), "{name}");
    }
    assert_eq!(
        files_a.keys().collect::<Vec<_>>(),
        files_b.keys().collect::<Vec<_>>()
    );
    for (name, bytes) in &files_a {
        if name.ends_with(".config") {
            let norm = |bytes: &[u8], dir: &Path| {
                String::from_utf8_lossy(bytes).replace(&dir.display().to_string(), "OUT")
            };
            assert_eq!(norm(bytes, &a), norm(&files_b[name], &b), "{name}");
        } else {
            assert!(
                bytes == &files_b[name],
                "{name} differs between identical runs"
            );
        }
    }
}

#[test]
fn gen_corpus_twice_gives_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let o = pmech(&[
        "gen-corpus",
        "--seed",
        "7",
        "--n",
        "50",
        "--out-dir",
        &format!("{dir}/x"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = fs::read(tmp.path().join("x/corpus.fasta")).unwrap();
    let o = pmech(&[
        "gen-corpus",
        "--seed",
        "7",
        "--n",
        "50",
        "--out-dir",
        &format!("{dir}/x"),
    ]);
    assert!(o.status.success());
    assert_eq!(first, fs::read(tmp.path().join("x/corpus.fasta")).unwrap());
    let o = pmech(&[
        "gen-corpus",
        "--seed",
        "8",
        "--n",
        "50",
        "--out-dir",
        &format!("{dir}/x"),
    ]);
    assert!(o.status.success());
    assert_ne!(first, fs::read(tmp.path().join("x/corpus.fasta")).unwrap());
}

#[test]
fn discover_without_probe_names_the_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("empty");
    let o = pmech(&["discover", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(
        err.starts_with("error kind=missing_input artifact=\"probe checkpoint\""),
        "{err}"
    );
    assert!(
        err.contains(&out.join("family_probe.pmck").display().to_string()),
        "{err}"
    );

    let o = pmech(&[
        "discover",
        "--task",
        "fitness",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("artifact=\"fitness probe manifest\""));
}

#[test]
fn missing_inputs_name_their_path() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("nowhere/corpus.fasta");
    let o = pmech(&[
        "pretrain-lm",
        "--corpus",
        corpus.to_str().unwrap(),
        "--out-dir",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(&corpus.display().to_string()));
    let o = pmech(&["steer", "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("fitness_folds.json"));
}

#[test]
fn command_line_overrides_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.config");
    fs::write(&cfg, "# small corpus\nn = 30\nlen=12\nseed=3\n").unwrap();
    let out = tmp.path().join("out");
    let o = pmech(&[
        "gen-corpus",
        "--config",
        cfg.to_str().unwrap(),
        "--n",
        "20",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let fasta = fs::read_to_string(out.join("corpus.fasta")).unwrap();
    let records: Vec<&str> = fasta.lines().filter(|l| !l.starts_with('>')).collect();
    assert_eq!(records.len(), 20);
    assert!(records.iter().all(|r| r.len() == 12));

    let echo = fs::read_to_string(out.join("gen-corpus.config")).unwrap();
    for line in ["n=20", "len=12", "seed=3", "background_seed=0"] {
        assert!(
            echo.lines().any(|l| l == line),
            "{line} missing from\n{echo}"
        );
    }
    assert!(!echo.contains("config="));

    // the echo is itself a valid config file reproducing the run
    let again = tmp.path().join("again");
    let o = pmech(&[
        "gen-corpus",
        "--config",
        out.join("gen-corpus.config").to_str().unwrap(),
        "--out-dir",
        again.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fasta,
        fs::read_to_string(again.join("corpus.fasta")).unwrap()
    );
}

#[test]
fn configuration_errors_are_single_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.config");
    fs::write(&cfg, "colour=blue\n").unwrap();
    let dir = tmp.path().to_str().unwrap();
    let o = pmech(&[
        "gen-corpus",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir,
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(
        stderr(&o).trim(),
        "error kind=config message=\"unknown key `colour` in config file\""
    );

    fs::write(&cfg, "n=many\n").unwrap();
    let o = pmech(&[
        "gen-corpus",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir,
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = pmech(&["gen-corpus", "--motifs", "HRD", "--out-dir", dir]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("motif entry"));

    let o = pmech(&["gen-corpus", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=usage"));

    let o = Command::new(BIN)
        .args(["gen-corpus", "--n", "5", "--out-dir", dir])
        .env("PROTOMECH_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("PROTOMECH_THREADS"));
}
