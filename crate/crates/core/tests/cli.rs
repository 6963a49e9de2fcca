use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scs::agent::{init_agent, AgentConfig};
use scs::rng;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn scs(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Run {
    let out: Output = Command::new(env!("CARGO_BIN_EXE_scs"))
        .args(args)
        .current_dir(dir)
        .env_clear()
        .envs(env.iter().copied())
        .output()
        .unwrap();
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let r = scs(dir, args, &[]);
    assert_eq!(r.code, 0, "scs {args:?}: {}", r.stderr);
    r.stdout
}

struct World {
    dir: tempfile::TempDir,
}

impl World {
    /// Synthetic data plus a config with `extra` appended.
    fn new(classes: &str, per_class: &str, dim: &str, extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        ok(
            dir.path(),
            &["gen-synth", "--classes", classes, "--per-class", per_class, "--dim", dim, "--noise", "0.05", "--seed", "3", "--out", "data"],
        );
        let config = format!(
            "[paths]\ntrain = data/train.scsf\nquery = data/train.scsf\n\n[oracle]\nmode = class-match\nlabels = data/labels.csv\n\n{extra}"
        );
        std::fs::write(dir.path().join("run.conf"), config).unwrap();
        Self { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn run(&self, cmd: &str, more: &[&str]) -> Run {
        let mut args = vec![cmd, "--config", "run.conf", "--seed", "21"];
        args.extend_from_slice(more);
        scs(self.path(), &args, &[])
    }

    fn ok(&self, cmd: &str, more: &[&str]) -> String {
        let r = self.run(cmd, more);
        assert_eq!(r.code, 0, "{cmd} {more:?}: {}", r.stderr);
        r.stdout
    }

    fn out(&self, name: &str) -> PathBuf {
        self.path().join("out").join(name)
    }

    fn read(&self, name: &str) -> String {
        std::fs::read_to_string(self.out(name)).unwrap()
    }
}

fn labels(world: &World) -> BTreeMap<String, String> {
    std::fs::read_to_string(world.path().join("data/labels.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.to_string(), b.to_string())
        })
        .collect()
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(scs(dir.path(), &[], &[]).code, 1);
    assert_eq!(scs(dir.path(), &["cluster", "--bogus"], &[]).code, 1);
    assert_eq!(scs(dir.path(), &["cluster", "--config", "missing.conf"], &[]).code, 1);
    assert_eq!(scs(dir.path(), &["cluster"], &[]).code, 1, "train path unset");
}

#[test]
fn cluster_reports_and_is_deterministic() {
    let w = World::new("3", "10", "6", "[kmeans]\nnum_clusters = 3\n");
    let stdout = w.ok("cluster", &[]);
    assert!(stdout.starts_with("3 clusters over 30 samples"), "{stdout}");
    let first = std::fs::read(w.out("kmeans.model")).unwrap();
    let sizes = w.read("cluster_sizes.csv");
    assert_eq!(sizes.lines().count(), 4);
    w.ok("cluster", &[]);
    assert_eq!(std::fs::read(w.out("kmeans.model")).unwrap(), first);
}

#[test]
fn too_many_clusters_names_the_constraint() {
    let w = World::new("2", "3", "4", "[kmeans]\nnum_clusters = 7\n");
    let r = w.run("cluster", &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("M must be <= N"), "{}", r.stderr);
}

#[test]
fn environment_overrides_config_and_flags_override_environment() {
    let w = World::new("3", "10", "6", "[kmeans]\nnum_clusters = 3\n");
    let r = scs(w.path(), &["cluster", "--config", "run.conf"], &[("SCS_KMEANS_NUM_CLUSTERS", "4")]);
    assert!(r.stdout.starts_with("4 clusters"), "{}", r.stdout);
    let r = scs(
        w.path(),
        &["cluster", "--config", "run.conf", "--out", "elsewhere"],
        &[("SCS_RUN_OUT", "envout")],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(w.path().join("elsewhere/kmeans.model").exists());
    assert!(!w.path().join("envout").exists());
    let r = scs(w.path(), &["cluster", "--config", "run.conf"], &[("SCS_NOPE_X", "1")]);
    assert_eq!(r.code, 1);
}

#[test]
fn build_pool_needs_a_model() {
    let w = World::new("2", "5", "4", "[kmeans]\nnum_clusters = 2\n");
    let r = w.run("build-pool", &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("run cluster first"));
}

#[test]
fn pool_manifest_counts_two_per_cluster() {
    let w = World::new("5", "8", "8", "[kmeans]\nnum_clusters = 5\ninit = kmeans++\n");
    w.ok("cluster", &[]);
    let stdout = w.ok("build-pool", &[]);
    assert!(stdout.starts_with("pool of 10 candidates from 5 clusters (0 singletons)"), "{stdout}");
    let manifest = w.read("manifest.csv");
    assert_eq!(manifest.lines().count(), 11);
    assert!(manifest.starts_with("id,cluster,rank,distance\n"));
    w.ok("build-pool", &[]);
    assert_eq!(w.read("manifest.csv"), manifest);
}

#[test]
fn singleton_cluster_gives_one_manifest_row() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "a,0,0\nb,0.1,0\nc,0,0.2\nd,0.2,0.1\nfar,100,100\n";
    std::fs::write(dir.path().join("pts.csv"), csv).unwrap();
    let config = "[paths]\ntrain = pts.csv\n[kmeans]\nnum_clusters = 2\ninit = kmeans++\n[run]\nnormalize = false\n";
    std::fs::write(dir.path().join("run.conf"), config).unwrap();
    ok(dir.path(), &["cluster", "--config", "run.conf"]);
    let stdout = ok(dir.path(), &["build-pool", "--config", "run.conf"]);
    assert!(stdout.contains("pool of 3 candidates"), "{stdout}");
    let manifest = std::fs::read_to_string(dir.path().join("out/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.starts_with("far,")).count(), 1);
    assert_eq!(manifest.lines().count(), 4);
}

#[test]
fn zero_epochs_keep_the_initialization() {
    let w = World::new("3", "6", "5", "[kmeans]\nnum_clusters = 3\n[agent]\nhidden_dims = 7\n[train]\nepochs = 0\n");
    w.ok("cluster", &[]);
    w.ok("build-pool", &[]);
    w.ok("train", &[]);
    let cfg = AgentConfig {
        feature_dim: 5,
        hidden_dims: vec![7],
        init_seed: rng::substream_seed(21, rng::INIT),
        ..AgentConfig::new(5)
    };
    let expected = init_agent(&cfg).unwrap().to_bytes();
    assert_eq!(std::fs::read(w.out("agent.scsa")).unwrap(), expected);
    assert_eq!(w.read("train_report.csv"), "epoch,lr,mean_loss,mean_top1_reward\n");
}

#[test]
fn training_fails_without_oracle_inputs() {
    let w = World::new("2", "5", "4", "[kmeans]\nnum_clusters = 2\n[agent]\nhidden_dims = 4\n");
    w.ok("cluster", &[]);
    w.ok("build-pool", &[]);
    std::fs::remove_file(w.path().join("data/labels.csv")).unwrap();
    let r = w.run("train", &[]);
    assert_eq!(r.code, 2, "{}", r.stderr);

    let remote = "[paths]\ntrain = data/train.scsf\nquery = data/train.scsf\n[oracle]\nmode = remote\nendpoint = http://127.0.0.1:9\nretries = 0\ntimeout_ms = 500\n[agent]\nhidden_dims = 4\n";
    std::fs::write(w.path().join("remote.conf"), remote).unwrap();
    let r = scs(w.path(), &["train", "--config", "remote.conf", "--seed", "21"], &[]);
    assert_eq!(r.code, 3, "{}", r.stderr);
    assert!(r.stderr.contains("oracle"), "{}", r.stderr);
}

#[test]
fn untrained_selection_is_uniform_and_lexicographic() {
    let w = World::new("3", "6", "5", "[kmeans]\nnum_clusters = 3\ninit = kmeans++\n");
    w.ok("cluster", &[]);
    w.ok("build-pool", &[]);
    let query = "c001_00002";
    w.ok("select", &["--untrained", "--query", query, "--n-shot", "6"]);
    let text = w.read("selections.csv");
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    let mut ids: Vec<&str> = rows.iter().map(|r| r[2]).collect();
    let listed = ids.clone();
    ids.sort();
    assert_eq!(listed, ids);
    for r in &rows {
        assert_eq!(r[0], query);
        assert!((r[3].parse::<f64>().unwrap() - 1.0 / 6.0).abs() < 1e-15);
    }

    let r = w.run("select", &["--untrained", "--query", "nobody"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("unknown query id"));
    let r = w.run("select", &["--untrained", "--n-shot", "7"]);
    assert_eq!(r.code, 1);
}

#[test]
fn trained_selection_matches_query_class() {
    let w = World::new("5", "40", "32", "[kmeans]\nnum_clusters = 5\ninit = kmeans++\n");
    w.ok("cluster", &[]);
    w.ok("build-pool", &[]);
    let stdout = w.ok("train", &[]);
    assert!(stdout.contains("mean top-1 reward"), "{stdout}");
    w.ok("select", &[]);
    let labels = labels(&w);
    let text = w.read("selections.csv");
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 200);
    let hits = rows.iter().filter(|r| labels[r[0]] == labels[r[2]]).count();
    assert!(hits as f64 >= 0.9 * rows.len() as f64, "{hits} of {} share the class", rows.len());
}

#[test]
fn analyze_protocols_write_reports() {
    let w = World::new("3", "4", "6", "");
    let stdout = w.ok("analyze", &["--protocol", "random", "--n-shot", "2"]);
    assert!(stdout.starts_with("random: 5 seeds"), "{stdout}");
    let seeds = w.read("analysis_random_seeds.csv");
    assert_eq!(seeds.lines().count(), 6);
    let rows = w.read("analysis_random.csv");
    w.ok("analyze", &["--protocol", "random", "--n-shot", "2"]);
    assert_eq!(w.read("analysis_random.csv"), rows);

    w.ok("analyze", &["--protocol", "similarity"]);
    let winners = w.read("analysis_winners.csv");
    assert!(winners.starts_with("p_nearest_wins,p_farthest_wins,p_ties\n"));
    assert!(w.out("analysis_similarity.txt").exists());
}

#[test]
fn diversity_on_two_candidates_coincides() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cands.csv"), "a,1,0\nb,0.2,1\n").unwrap();
    std::fs::write(dir.path().join("queries.csv"), "q1,1,0.1\nq2,0,1\n").unwrap();
    std::fs::write(dir.path().join("iou.csv"), "query,a,b\nq1,0.7,0.1\nq2,0.2,0.9\n").unwrap();
    let config = "[paths]\ntrain = cands.csv\nquery = queries.csv\n[oracle]\nmode = matrix\nmatrix = iou.csv\n";
    std::fs::write(dir.path().join("run.conf"), config).unwrap();
    ok(dir.path(), &["analyze", "--config", "run.conf", "--protocol", "diversity"]);
    let text = std::fs::read_to_string(dir.path().join("out/analysis_diversity.csv")).unwrap();
    let mut by_query: BTreeMap<&str, Vec<(Vec<&str>, &str)>> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let mut sel: Vec<&str> = f[2].split(';').collect();
        sel.sort();
        by_query.entry(f[1]).or_default().push((sel, f[3]));
    }
    assert_eq!(by_query.len(), 2);
    for rows in by_query.values() {
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r == &rows[0]));
    }
}
