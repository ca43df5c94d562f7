use std::collections::HashSet;
use std::path::Path;
use std::process::{Command, Output};

use ross::runner::metrics_without_wall_time;

fn ross(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ross"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ross")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn small_config(out: &Path, extra: &str) -> String {
    format!(
        "run_id = smoke\nout_dir = {}\ntopology.kind = ring\ntopology.n = 4\ndata.train_samples = 200\n\
         data.test_samples = 80\ndata.input_dim = 4\ntrain.rounds = 3\ntrain.batch = 16\ntrain.lr = 0.05\n{extra}",
        out.display()
    )
}

#[test]
fn run_writes_every_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "a.cfg", &small_config(&out, "output.shapley_dump = true\n"));
    let res = ross(&["run", &cfg]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(
        lines[0],
        "run_id,algo,round,avg_train_loss,grad_norm_sq,consensus_dist,test_acc,comm_bytes,wall_ms"
    );
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[1].starts_with("smoke,ross,0,"));

    let diag = std::fs::read_to_string(out.join("diagnostics.jsonl")).unwrap();
    assert_eq!(diag.lines().count(), 3);
    for line in diag.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: HashSet<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, HashSet::from(["round", "sbar_residual", "mean_resid_u", "mean_resid_x"]));
    }

    let shapley = std::fs::read_to_string(out.join("shapley.csv")).unwrap();
    assert_eq!(shapley.lines().next(), Some("round,agent,neighbor,phi,phi_hat,pi"));
    // 3 rounds x 4 agents x 3 members
    assert_eq!(shapley.lines().count(), 1 + 36);

    let effective = std::fs::read_to_string(out.join("config.effective")).unwrap();
    assert!(effective.lines().any(|l| l == "seed = 42"));
    assert!(effective.lines().any(|l| l == "train.momentum = 0.5"));
    assert_eq!(std::fs::read_to_string(out.join("topology.txt")).unwrap().lines().count(), 4);
    assert_eq!(std::fs::read_to_string(out.join("topology_edges.txt")).unwrap().lines().count(), 4 + 8);
    let theory: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("theory.json")).unwrap()).unwrap();
    assert!(theory["constants"]["m1"].is_number());
}

#[test]
fn rerun_is_byte_identical_apart_from_wall_time() {
    let tmp = tempfile::tempdir().unwrap();
    let read = |sub: &str| {
        let out = tmp.path().join(sub);
        let cfg = write_config(tmp.path(), &format!("{sub}.cfg"), &small_config(&out, "attack.kind = grad_poison\n"));
        assert!(ross(&["run", &cfg]).status.success());
        std::fs::read_to_string(out.join("metrics.csv")).unwrap()
    };
    let (a, b) = (read("a"), read("b"));
    assert_eq!(metrics_without_wall_time(&a), metrics_without_wall_time(&b));
}

#[test]
fn bad_config_exits_one_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.cfg", "attack.kind = frobnicate\n");
    let res = ross(&["run", &cfg]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("attack.kind") && err.contains("label_flip"), "{err}");

    let res = ross(&["run", tmp.path().join("missing.cfg").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    let res = ross(&["sweep", &cfg, "--topo", "torus"]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn missing_idx_files_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!(
        "out_dir = {}\ndata.source = mnist\ndata.mnist_dir = {}\ntrain.rounds = 1\n",
        tmp.path().join("out").display(),
        tmp.path().display()
    );
    let cfg = write_config(tmp.path(), "m.cfg", &body);
    assert_eq!(ross(&["run", &cfg]).status.code(), Some(2));
}

#[test]
fn divergence_exits_three_with_partial_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let body = small_config(&out, "").replace("train.lr = 0.05", "train.lr = 1e300").replace("train.rounds = 3", "train.rounds = 20");
    let cfg = write_config(tmp.path(), "nan.cfg", &body);
    let res = ross(&["run", &cfg]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stderr).contains("agent"));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows = metrics.lines().count();
    assert!((2..21).contains(&rows), "{rows} lines");
}

#[test]
fn sweep_manifest_is_a_bijection() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let cfg = write_config(tmp.path(), "s.cfg", &small_config(&out, "output.diagnostics = false\n"));
    let res = ross(&[
        "sweep", &cfg, "--algo", "ross,dpsgd", "--attack", "long_tail,label_flip", "--n", "4,5", "--reps", "2",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let manifest = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    let mut lines = manifest.lines();
    assert_eq!(lines.next(), Some("run_id,algo,topology,n,attack,partition_mu,seed,rep,status,metrics_path"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * 2 * 2 * 2);
    let ids: HashSet<&str> = rows.iter().map(|r| r[0]).collect();
    let params: HashSet<Vec<&str>> = rows.iter().map(|r| r[1..8].to_vec()).collect();
    assert_eq!(ids.len(), rows.len());
    assert_eq!(params.len(), rows.len());
    for r in &rows {
        assert_eq!(r[8], "ok");
        let csv = std::fs::read_to_string(out.join(r[9])).unwrap();
        assert!(csv.lines().nth(1).unwrap().starts_with(&format!("{},{},0,", r[0], r[1])));
    }
    assert!(rows.iter().any(|r| r[4] == "long_tail" && r[5] == "0.25"));
    assert_eq!(rows.iter().map(|r| r[6]).collect::<HashSet<_>>(), HashSet::from(["42", "43"]));
}

#[test]
fn check_prints_pass_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.cfg", &small_config(&tmp.path().join("o"), ""));
    let res = ross(&["check", &cfg]);
    assert_eq!(res.status.code(), Some(0));
    let table = String::from_utf8_lossy(&res.stdout);
    assert_eq!(table.lines().filter(|l| l.starts_with("[PASS]")).count(), 4, "{table}");
}

#[test]
fn shapley_bench_prints_one_row_per_r() {
    let res = ross(&["shapley-bench", "--players", "6", "--r", "10,100,1000"]);
    assert!(res.status.success());
    let out = String::from_utf8_lossy(&res.stdout);
    assert_eq!(out.lines().count(), 4);
    assert!(out.lines().nth(3).unwrap().starts_with("6,1000,"));
    assert_eq!(ross(&["shapley-bench", "--players", "40", "--r", "10"]).status.code(), Some(1));
}
