use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use protodiag::corpus::{generate_synthetic, SynthSpec};
use protodiag::dqn::DqnParams;
use protodiag::experiments::{read_results, DqnPolicy, Fold};
use protodiag::nn::ModelConfig;
use protodiag::rl::run_episode;
use protodiag::simulator::{truthful_reply, SimConfig};
use protodiag::state::{state_dim, ActionSpace, SlotStatus, UserActionKind};
use protodiag_cli::chat::{nearest_names, run_chat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_protodiag"));
    c.env_remove("PROTODIAG_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json")
}

fn gen(dir: &Path) {
    let o = run(&["gen-data", "--diseases", "4", "--symptoms", "20", "--seed", "7", "--out", p(dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn write_config(dir: &Path, json: &str) -> PathBuf {
    let path = dir.join("cfg.json");
    fs::write(&path, json).unwrap();
    path
}

const FAST: &str = r#"{
  "model": {"hidden_dims": [16], "embed_dim": 8},
  "train": {"episodes": 60, "batch_size": 16,
            "eps": {"eps_start": 1.0, "eps_end": 0.1, "decay_steps": 30}},
  "fewshot": {"pretrain_episodes": 30, "adapt_episodes": 20}
}"#;

#[test]
fn help_exits_zero_for_every_subcommand() {
    for sub in ["gen-data", "convert-muzhi", "validate", "train", "eval", "fewshot", "chat"] {
        let o = run(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        let text = String::from_utf8(o.stdout).unwrap();
        assert!(text.contains("Usage"), "{sub}");
    }
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn gen_data_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    gen(&t.path().join("a"));
    gen(&t.path().join("b"));
    for f in ["vocab.json", "goals.jsonl"] {
        let a = fs::read(t.path().join("a").join(f)).unwrap();
        let b = fs::read(t.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let goals = fs::read_to_string(t.path().join("a/goals.jsonl")).unwrap();
    assert_eq!(goals.lines().count(), 160);
    let v = run(&["validate", "--corpus", p(&t.path().join("a"))]);
    assert!(v.status.success());
}

#[test]
fn gen_data_seed_comes_from_env() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    let o = bin()
        .args(["gen-data", "--out", p(&a)])
        .env("PROTODIAG_SEED", "7")
        .output()
        .unwrap();
    assert!(o.status.success());
    gen(&t.path().join("b"));
    assert_eq!(
        fs::read(a.join("goals.jsonl")).unwrap(),
        fs::read(t.path().join("b/goals.jsonl")).unwrap()
    );
}

#[test]
fn errors_have_prefixes_and_codes() {
    let t = tempfile::tempdir().unwrap();
    let cases: Vec<(Vec<String>, i32, &str)> = vec![
        (
            ["gen-data", "--signature-size", "30", "--symptoms", "20", "--out", p(&t.path().join("x"))]
                .map(String::from)
                .to_vec(),
            2,
            "error[usage]: infeasible synthetic spec",
        ),
        (
            ["train", "--agent", "dqn", "--corpus", "/no/such/dir", "--out", p(t.path())]
                .map(String::from)
                .to_vec(),
            3,
            "error[data]",
        ),
        (["train", "--agent", "cnn"].map(String::from).to_vec(), 2, "error[usage]"),
        (["frobnicate"].map(String::from).to_vec(), 2, "error[usage]"),
    ];
    for (args, code, prefix) in cases {
        let o = bin().args(&args).output().unwrap();
        assert_eq!(o.status.code(), Some(code), "{args:?}");
        let err = String::from_utf8(o.stderr).unwrap();
        assert!(err.starts_with(prefix), "{args:?}: {err}");
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    }
}

#[test]
fn config_unknown_keys_are_usage_errors() {
    let t = tempfile::tempdir().unwrap();
    gen(&t.path().join("d"));
    let cfg = write_config(t.path(), r#"{"train": {"episodez": 3}}"#);
    let o = run(&[
        "train", "--agent", "dqn", "--corpus", p(&t.path().join("d")), "--config", p(&cfg),
        "--out", p(&t.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("episodez"));
}

#[test]
fn train_eval_are_reproducible_and_checkpoints_are_checked() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data);
    let cfg = write_config(t.path(), FAST);
    for agent in ["dqn", "proto"] {
        let outs: Vec<PathBuf> = (0..2).map(|i| t.path().join(format!("{agent}{i}"))).collect();
        for o in &outs {
            let r = run(&[
                "train", "--agent", agent, "--corpus", p(&data), "--config", p(&cfg), "--noise",
                "0.1", "--seed", "42", "--out", p(o),
            ]);
            assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        }
        for f in ["train_log.jsonl", "checkpoint.json", "results.csv", "run.json"] {
            assert_eq!(
                fs::read(outs[0].join(f)).unwrap(),
                fs::read(outs[1].join(f)).unwrap(),
                "{agent} {f}"
            );
        }
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(outs[0].join("run.json")).unwrap()).unwrap();
        assert_eq!(meta["config"]["sim"]["noise"], 0.1);
        assert_eq!(meta["config"]["train"]["seed"], 42);
        assert_eq!(meta["config"]["train"]["gamma"], 0.9);

        let ck = outs[0].join("checkpoint.json");
        let evals: Vec<PathBuf> = (0..2).map(|i| t.path().join(format!("{agent}-eval{i}"))).collect();
        for e in &evals {
            let r = run(&["eval", "--checkpoint", p(&ck), "--corpus", p(&data), "--seed", "3", "--out", p(e)]);
            assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
            let text = String::from_utf8(r.stdout).unwrap();
            assert!(text.contains("success_rate=") && text.contains("mean_reward=") && text.contains("mean_turns="));
        }
        assert_eq!(
            fs::read(evals[0].join("results.csv")).unwrap(),
            fs::read(evals[1].join("results.csv")).unwrap()
        );

        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&ck).unwrap()).unwrap();
        let w = v["params"]["encoder"]["layers"][0]["weights"].as_array_mut().unwrap();
        w.pop();
        let bad = t.path().join(format!("{agent}-bad.json"));
        fs::write(&bad, v.to_string()).unwrap();
        let r = run(&["eval", "--checkpoint", p(&bad), "--corpus", p(&data)]);
        assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
    }
}

#[test]
fn trained_dqn_solves_disjoint_corpus() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data);
    let cfg = write_config(
        t.path(),
        r#"{
          "model": {"hidden_dims": [64], "embed_dim": 32},
          "train": {"episodes": 3000, "batch_size": 64, "updates_per_episode": 2,
                    "eps": {"eps_start": 1.0, "eps_end": 0.0, "decay_steps": 1500},
                    "opt": {"learning_rate": 0.002, "momentum": 0.5, "max_grad_norm": 10.0}}
        }"#,
    );
    let out = t.path().join("o");
    let r = run(&["train", "--agent", "dqn", "--corpus", p(&data), "--config", p(&cfg), "--out", p(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    let last: Vec<serde_json::Value> = log
        .lines()
        .rev()
        .take(100)
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let wins = last.iter().filter(|r| r["outcome"] == "success").count();
    assert!(wins >= 95, "final-100 success {wins}");
}

#[test]
fn fewshot_table_and_aggregates() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data);
    let cfg = write_config(t.path(), FAST);
    let o = run(&[
        "fewshot", "--agent", "dqn", "--shots", "0", "--corpus", p(&data), "--out", p(t.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let outs: Vec<PathBuf> = (0..2).map(|i| t.path().join(format!("fs{i}"))).collect();
    for (i, out) in outs.iter().enumerate() {
        let jobs = if i == 0 { "1" } else { "3" };
        let r = run(&[
            "fewshot", "--agent", "dqn,proto", "--corpus", p(&data), "--config", p(&cfg), "--shots", "5",
            "--noise-levels", "0,0.2", "--seed", "5", "--jobs", jobs, "--out", p(out),
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let csv = fs::read_to_string(outs[0].join("results.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(outs[1].join("results.csv")).unwrap());
    assert_eq!(
        csv.lines().next().unwrap(),
        "agent,protocol,noise,fold,episodes,success_rate,mean_reward,mean_turns"
    );
    let table = read_results(csv.as_bytes()).unwrap();
    // 2 agents x (4 folds x 2 noise levels + 2 aggregates)
    assert_eq!(table.rows.len(), 20);
    for avg in table.rows.iter().filter(|r| r.fold == Fold::Avg) {
        let folds: Vec<_> = table
            .rows
            .iter()
            .filter(|r| r.agent == avg.agent && r.noise == avg.noise && matches!(r.fold, Fold::Disease(_)))
            .collect();
        assert_eq!(folds.len(), 4);
        let mean = folds.iter().map(|r| r.success_rate).sum::<f64>() / 4.0;
        assert!((mean - avg.success_rate).abs() < 1e-9);
        assert_eq!(avg.episodes, 160);
    }
}

fn small_corpus() -> protodiag::corpus::Corpus {
    generate_synthetic(&SynthSpec::default()).unwrap()
}

#[test]
fn chat_follows_the_simulator_trajectory() {
    let corpus = small_corpus();
    let space = ActionSpace::from(&corpus.vocab);
    let sim = SimConfig::default();
    let model = ModelConfig {
        hidden_dims: vec![16],
        embed_dim: 8,
    };
    for seed in 0..5 {
        let policy = DqnPolicy {
            params: DqnParams::init(state_dim(space.n_symptoms, sim.max_turns), &model, space.len(), seed),
            space,
        };
        for goal in corpus.test_goals().take(8) {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let expected =
                run_episode(|s| protodiag::dqn::q_values(&policy.params, s), goal, space, &sim, 1, 0.0, &mut rng)
                    .unwrap();
            let mut script: Vec<String> = vec![goal
                .explicit
                .keys()
                .map(|&k| corpus.vocab.symptoms()[k].clone())
                .collect::<Vec<_>>()
                .join(", ")];
            for &a in &expected.actions {
                if a < space.n_symptoms {
                    script.push(
                        match truthful_reply(goal, a) {
                            UserActionKind::Confirm => "y",
                            UserActionKind::Deny => "n",
                            _ => "u",
                        }
                        .into(),
                    );
                }
            }
            let input = script.join("\n") + "\n";
            let mut out = Vec::new();
            let summary = run_chat(&policy, &corpus.vocab, sim.max_turns, &mut input.as_bytes(), &mut out).unwrap();
            assert_eq!(summary.actions, expected.actions);
            assert_eq!(summary.turns, expected.turns);
        }
    }
}

#[test]
fn chat_handles_empty_unknown_and_unsure_input() {
    let corpus = small_corpus();
    let space = ActionSpace::from(&corpus.vocab);
    let model = ModelConfig {
        hidden_dims: vec![8],
        embed_dim: 4,
    };
    // Scan seeds for a policy whose first move is a question, so `u` gets used.
    let policy = (0..200)
        .map(|seed| DqnPolicy {
            params: DqnParams::init(state_dim(space.n_symptoms, 44), &model, space.len(), seed),
            space,
        })
        .find(|pol| {
            let mut out = Vec::new();
            let input = "symptom_00\nu\nu\nu\nu\nu\nu\nu\nu\nu\nu\nu\nu\nu\nu\nu\nu\nu\nu\nu\nu\n";
            run_chat(pol, &corpus.vocab, 44, &mut input.as_bytes(), &mut out)
                .map(|s| s.actions[0] < space.n_symptoms)
                .unwrap_or(false)
        })
        .expect("some policy asks first");

    let mut input = String::from("\n   \nsymptm_00, symptom_01\nsymptom_00\n");
    input.push_str(&"u\n".repeat(44));
    let mut out = Vec::new();
    let summary = run_chat(&policy, &corpus.vocab, 44, &mut input.as_bytes(), &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.contains("Unknown symptom \"symptm_00\". Did you mean: symptom_00"));
    assert_eq!(text.matches("Which symptoms do you have?").count(), 4);
    let first = summary.actions[0];
    assert_eq!(summary.final_state.slots[first], SlotStatus::Unrelated);
    assert!(text.contains(&format!("{}: unrelated", corpus.vocab.symptoms()[first])));
    assert!(summary.turns <= 44);

    let names: Vec<String> = ["fever", "cough", "rash"].map(String::from).to_vec();
    assert_eq!(nearest_names("cogh", &names)[0], "cough");
}

#[test]
fn chat_rejects_closed_input() {
    let corpus = small_corpus();
    let space = ActionSpace::from(&corpus.vocab);
    let policy = DqnPolicy {
        params: DqnParams::init(state_dim(space.n_symptoms, 44), &ModelConfig::default(), space.len(), 0),
        space,
    };
    let mut out = Vec::new();
    assert!(run_chat(&policy, &corpus.vocab, 44, &mut "\n".as_bytes(), &mut out).is_err());
}

#[test]
fn shipped_config_parses() {
    let cfg = protodiag_cli::config::RunConfig::load(Some(&desk_config())).unwrap();
    assert_eq!(cfg.model.embed_dim, 32);
    cfg.experiment().validate().unwrap();
}
