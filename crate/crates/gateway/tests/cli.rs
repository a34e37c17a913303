use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use annoprop::classifier::TrainingMeta;
use annoprop::dataprep::DatasetConfig;
use annoprop::pipeline::{evaluate_store, train_from_store, EvaluationRun};
use annoprop::store::{JsonKind, Store};
use annoprop::synthgen::CorpusSummary;

const CONFIG: &str = r#"
seed = 1

[synth]
scenes = 6

[synth.template]
width = 480
height = 360
instances = [2, 3]
instance_size = [90, 150]
annotation_completeness = 1.0

[dataset]
min_instances = 1
augment_per_patch = 1

[train]
epochs = 8

[segment]
threshold = 0.5

[rank]
k = 3
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
        Env { dir }
    }

    fn store(&self) -> PathBuf {
        self.dir.path().join("store")
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("run.toml")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_annoprop"))
            .args(args)
            .arg("--store")
            .arg(self.store())
            .arg("--config")
            .arg(self.config())
            .env_remove("ANNOPROP_STORE")
            .env_remove("ANNOPROP_TOKENS")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn pipeline_output_matches_library_calls() {
    let env = Env::new();
    env.ok(&["synth", "--seed", "5"]);
    env.ok(&["synth", "--seed", "6", "--scenes", "4"]);
    let prep = env.ok(&["prep", "--corpus", "synth-5", "--seed", "7"]);
    assert!(prep.contains("datasets/split-7.json"), "{prep}");
    let train = env.ok(&["train", "--corpus", "synth-5", "--seed", "7"]);
    assert!(train.starts_with("train: model "), "{train}");
    let seg = env.ok(&["segment", "--corpus", "synth-6"]);
    assert!(seg.starts_with("segment: "), "{seg}");
    let eval = env.ok(&["evaluate", "--corpus", "synth-6"]);
    assert!(eval.contains("mAP") && eval.contains("reference"), "{eval}");
    let rank = env.ok(&["rank", "--class", "eggs", "--corpus", "synth-6"]);
    assert!(rank.starts_with("rank: "), "{rank}");

    let store = Store::open(env.store()).unwrap();
    let ids = |name: &str| -> Vec<String> {
        let s: CorpusSummary = store.get_json(JsonKind::Dataset, name).unwrap().unwrap();
        s.scenes.into_iter().map(|s| s.image_id).collect()
    };
    let dataset = DatasetConfig { min_instances: 1, augment_per_patch: 1, seed: 7, ..DatasetConfig::default() };
    let meta = TrainingMeta { seed: 7, epochs: 8, ..TrainingMeta::default() };
    let direct = train_from_store(&store, Some(&ids("synth-5")), &dataset, meta).unwrap();
    let (_, cli_model) = store.current_model().unwrap().unwrap();
    assert_eq!(cli_model.to_bytes(), direct.model.to_bytes());

    let expected = evaluate_store(&store, &direct.model, &ids("synth-6"), 0.5, "reference", direct.validation).unwrap();
    let reported: EvaluationRun = store.get_json(JsonKind::Report, "latest").unwrap().unwrap();
    assert_eq!(reported, expected);
    store.audit().unwrap();
}

#[test]
fn training_twice_with_one_seed_gives_identical_model_files() {
    let models: Vec<(String, Vec<u8>)> = (0..2)
        .map(|_| {
            let env = Env::new();
            env.ok(&["synth"]);
            env.ok(&["train", "--seed", "7"]);
            let store = Store::open(env.store()).unwrap();
            let version = store.current_model_version().unwrap().unwrap();
            (version.clone(), read(&store.model_path(&version)))
        })
        .collect();
    assert_eq!(models[0], models[1]);
}

#[test]
fn invalid_config_is_a_usage_error_before_any_write() {
    let env = Env::new();
    std::fs::write(env.config(), "[train]\nepochs = 0\n").unwrap();
    let out = env.run(&["synth"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("annoprop: usage:"), "{err}");
    assert!(!env.store().exists());

    std::fs::write(env.config(), "[trian]\nepochs = 3\n").unwrap();
    assert_eq!(env.run(&["train"]).status.code(), Some(2));
    assert!(!env.store().exists());
}

#[test]
fn runtime_errors_exit_nonzero_with_one_line() {
    let env = Env::new();
    let out = env.run(&["segment"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("no model"), "{err}");

    let out = env.run(&["evaluate", "--corpus", "synth-404"]);
    assert_eq!(out.status.code(), Some(1));
}
