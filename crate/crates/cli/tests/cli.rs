use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::Output;

use unmask::backbone::BackboneParams;
use unmask::decode::Trajectory;
use unmask::io::{file_digest, load_backbone, save_planner, Manifest};
use unmask::nn::Parameters;
use unmask::pipeline::{read_eval, Command};
use unmask::planner::{PlannerConfig, PlannerParams};
use unmask::rng::stream;
use unmask::tasks;

const BASE: &str = r#"
seed = 3
workers = 1

[task]
kind = "copy"
train = 200
test = 6

[backbone]
max_len = 22
embed_dim = 16
layers = 1
heads = 2
hidden_dim = 32

[train]
steps = 20
batch_size = 8
lr = 0.001
eval_instances = 2

[decode]
steps = 4
gen_len = 12
allocation = { kind = "linear" }
position = { kind = "top1_confidence" }
token = { kind = "greedy" }

[eval]
samples = 2
"#;

struct Env {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

impl Env {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        Env { _tmp: tmp, dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.join("run")
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn run(&self, cmd: &str, config: &Path) -> Output {
        std::process::Command::new(env!("CARGO_BIN_EXE_unmask"))
            .arg(cmd)
            .arg("--config")
            .arg(config)
            .arg("--out")
            .arg(self.out())
            .output()
            .unwrap()
    }

    fn ok(&self, cmd: &str, config: &Path) -> Output {
        let o = self.run(cmd, config);
        assert!(o.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&o.stderr));
        o
    }

    /// gen-tasks and train-backbone with the base config.
    fn trained(&self) -> PathBuf {
        let cfg = self.config("base.toml", BASE);
        self.ok("gen-tasks", &cfg);
        self.ok("train-backbone", &cfg);
        cfg
    }
}

fn code(o: &Output) -> Option<i32> {
    o.status.code()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn trajectory_files(out: &Path) -> Vec<(String, String)> {
    let dir = out.join("decode/trajectories");
    let mut v: Vec<(String, String)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read_to_string(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

fn backbone_of(out: &Path) -> BackboneParams {
    load_backbone(&out.join("backbone/backbone.ckpt")).unwrap()
}

fn write_planner(out: &Path, backbone_digest: &str) {
    let bb = backbone_of(out);
    let mut pc = PlannerConfig::new(bb.config.embed_dim, 3);
    pc.d_model = 16;
    pc.heads = 2;
    pc.ffn_dim = 32;
    pc.candidate_count = 4;
    let pl = PlannerParams::init(&pc, &mut stream(1, "test-planner", 0)).unwrap();
    std::fs::create_dir_all(out.join("planner")).unwrap();
    save_planner(&pl, backbone_digest, &out.join("planner/planner.ckpt")).unwrap();
}

#[test]
fn missing_field_exits_2_and_names_it() {
    let env = Env::new();
    let cfg = env.config("c.toml", &BASE.replace("max_len = 22\n", ""));
    let o = env.run("gen-tasks", &cfg);
    assert_eq!(code(&o), Some(2));
    let e = stderr(&o);
    assert!(e.contains("backbone") && e.contains("max_len"), "{e}");
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let env = Env::new();
    let cfg = env.config("c.toml", &BASE.replace("[eval]\n", "[eval]\nbogus = 1\n"));
    let o = env.run("gen-tasks", &cfg);
    assert_eq!(code(&o), Some(2));
    let e = stderr(&o);
    assert!(e.contains("eval") && e.contains("bogus"), "{e}");
}

#[test]
fn missing_upstream_artifact_exits_2() {
    let env = Env::new();
    let cfg = env.config("c.toml", BASE);
    let o = env.run("decode", &cfg);
    assert_eq!(code(&o), Some(2), "{}", stderr(&o));
}

#[test]
fn corrupted_checkpoint_exits_3() {
    let env = Env::new();
    let cfg = env.trained();
    let ck = env.out().join("backbone/backbone.ckpt");
    let mut bytes = std::fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&ck, bytes).unwrap();
    let o = env.run("decode", &cfg);
    assert_eq!(code(&o), Some(3), "{}", stderr(&o));
}

#[test]
fn planner_for_another_backbone_exits_3() {
    let env = Env::new();
    env.trained();
    write_planner(&env.out(), "0000");
    let cfg = env.config(
        "guided.toml",
        &BASE.replace(r#"position = { kind = "top1_confidence" }"#, r#"position = { kind = "planner_guided" }"#),
    );
    let o = env.run("decode", &cfg);
    assert_eq!(code(&o), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("backbone"), "{}", stderr(&o));
}

#[test]
fn zero_step_budget_writes_the_initial_checkpoint() {
    let env = Env::new();
    let cfg = env.config("c.toml", &BASE.replace("steps = 20\n", "steps = 0\n"));
    env.ok("gen-tasks", &cfg);
    env.ok("train-backbone", &cfg);
    let bb = backbone_of(&env.out());
    let init = BackboneParams::init(&bb.config, &mut stream(3, "backbone-init", 0)).unwrap();
    assert_eq!(bb.digest(), init.digest());
}

#[test]
fn same_config_and_seed_give_identical_checkpoints() {
    let (a, b, c) = (Env::new(), Env::new(), Env::new());
    a.trained();
    b.trained();
    let cfg = c.config("c.toml", BASE);
    let o = std::process::Command::new(env!("CARGO_BIN_EXE_unmask"))
        .args(["gen-tasks", "--seed", "4", "--out"])
        .arg(c.out())
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(o.status.success());
    let o = std::process::Command::new(env!("CARGO_BIN_EXE_unmask"))
        .args(["train-backbone", "--seed", "4", "--out"])
        .arg(c.out())
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(o.status.success());
    let read = |e: &Env| std::fs::read(e.out().join("backbone/backbone.ckpt")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn lambda_one_decodes_like_no_annealing() {
    let (a, b) = (Env::new(), Env::new());
    let cfg_a = a.trained();
    a.ok("decode", &cfg_a);
    for d in ["tasks", "backbone"] {
        std::fs::create_dir_all(b.out().join(d)).unwrap();
        for e in std::fs::read_dir(a.out().join(d)).unwrap() {
            let p = e.unwrap().path();
            std::fs::copy(&p, b.out().join(d).join(p.file_name().unwrap())).unwrap();
        }
    }
    let cfg_b = b.config(
        "b.toml",
        &BASE.replace("token = { kind = \"greedy\" }\n", "token = { kind = \"greedy\" }\neos_annealing = 1.0\n"),
    );
    b.ok("decode", &cfg_b);
    let (fa, fb) = (trajectory_files(&a.out()), trajectory_files(&b.out()));
    assert_eq!(fa.len(), 12);
    assert_eq!(fa.len(), fb.len());
    for ((na, ta), (nb, tb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        // the header echoes the config, which differs in the annealing field
        let body = |t: &str| t.lines().skip(1).map(String::from).collect::<Vec<_>>();
        assert_eq!(body(ta), body(tb), "{na}");
        assert_ne!(ta.lines().next(), tb.lines().next());
    }
}

#[test]
fn eval_accuracy_matches_rewards_recomputed_from_files() {
    let env = Env::new();
    let cfg = env.trained();
    env.ok("decode", &cfg);
    let o = env.ok("eval", &cfg);
    let summary = read_eval(&env.out()).unwrap();
    let test = tasks::from_jsonl(BufReader::new(
        std::fs::File::open(env.out().join("tasks/test.jsonl")).unwrap(),
    ))
    .unwrap();
    let mut total = 0.0;
    let mut n = 0;
    for (name, text) in trajectory_files(&env.out()) {
        let i: usize = name[1..5].parse().unwrap();
        let t = Trajectory::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(t.prompt, test[i].prompt);
        total += test[i].reward(t.generated());
        n += 1;
    }
    assert_eq!(n, summary.trajectories);
    assert!((summary.accuracy - total / n as f64).abs() < 1e-12);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("accuracy"));
}

#[test]
fn ablate_reads_one_planner_checkpoint() {
    let env = Env::new();
    env.trained();
    write_planner(&env.out(), &backbone_of(&env.out()).digest());
    let cfg = env.config(
        "ablate.toml",
        &format!("{BASE}\n[ablation]\naxis = \"candidates\"\nvalues = [2, 4, 8]\n"),
    );
    env.ok("ablate", &cfg);
    let m: Manifest =
        serde_json::from_slice(&std::fs::read(env.out().join("ablate/manifest.json")).unwrap()).unwrap();
    let planners: Vec<_> = m.inputs.iter().filter(|f| f.path.ends_with("planner.ckpt")).collect();
    assert_eq!(planners.len(), 1, "{:?}", m.inputs);
    let records = std::fs::read_to_string(env.out().join("ablate/records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 3);
}

#[test]
fn manifests_list_every_file_with_its_digest() {
    let env = Env::new();
    let cfg = env.trained();
    env.ok("decode", &cfg);
    env.ok("eval", &cfg);
    env.ok("analyze", &cfg);
    for cmd in [Command::GenTasks, Command::TrainBackbone, Command::Decode, Command::Eval, Command::Analyze] {
        let dir = env.out().join(cmd.dir());
        let m: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m.command, cmd.name());
        assert!(!m.outputs.is_empty());
        for f in m.inputs.iter().chain(&m.outputs) {
            let now = file_digest(&env.out(), &env.out().join(&f.path)).unwrap();
            assert_eq!(&now, f, "{}", cmd.name());
        }
        assert!(m.outputs.iter().any(|f| f.path.ends_with("config.toml")));
    }
}
