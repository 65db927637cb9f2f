use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn geodiff(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.toml");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_geodiff"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(dir: &Path, name: &str) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("out").join(name)).unwrap()).unwrap()
}

#[test]
fn default_potential_satisfies_a4() {
    let d = TempDir::new().unwrap();
    let o = geodiff(d.path(), "", &["melnikov"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let j = json(d.path(), "melnikov.json");
    assert_eq!(j["a4"]["status"], "holds");
    assert!(j["a4"]["margin"].as_f64().unwrap() > 0.0);
    assert_eq!(j["recurrence"]["status"], "observed");
    let grid = fs::read_to_string(d.path().join("out/gain_grid.csv")).unwrap();
    assert!(grid.starts_with("phi,theta0,theta1,g1_branch1,g1_branch2"));
    assert_eq!(grid.lines().count(), 64 * 16 * 16 + 1);
    assert!(d.path().join("out/config.toml").exists());
    assert!(d.path().join("out/homoclinic_2.csv").exists());
}

#[test]
fn symmetric_potential_exits_with_two() {
    let d = TempDir::new().unwrap();
    let o = geodiff(d.path(), "[model.potential]\nkind = \"symmetric\"\n", &["melnikov"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("indeterminate"));
    assert_eq!(json(d.path(), "melnikov.json")["a4"]["margin"], 0.0);
}

#[test]
fn malformed_configuration_exits_with_one() {
    let d = TempDir::new().unwrap();
    let o = geodiff(d.path(), "[model\nmetric = 3\n", &["melnikov"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("malformed configuration"), "{}", stderr(&o));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));

    let o = geodiff(d.path(), "[model]\nmetrik = \"torus\"\n", &["melnikov"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("metrik"));

    let o = geodiff(d.path(), "[flow]\ntheta0 = [0.0]\n", &["melnikov"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("invalid configuration"));

    let missing = Command::new(env!("CARGO_BIN_EXE_geodiff"))
        .args(["--config", "/nonexistent/run.toml", "melnikov"])
        .output()
        .unwrap();
    assert_eq!(code(&missing), 1);
}

#[test]
fn bad_arguments_exit_with_one_and_help_with_zero() {
    let bin = env!("CARGO_BIN_EXE_geodiff");
    assert_eq!(code(&Command::new(bin).arg("frobnicate").output().unwrap()), 1);
    assert_eq!(code(&Command::new(bin).args(["--jobs", "many", "melnikov"]).output().unwrap()), 1);
    let help = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for flag in ["--config", "--jobs", "--seed", "--out", "pipeline"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn three_epochs_grow_linearly_and_single_map_does_not() {
    let d = TempDir::new().unwrap();
    let o = geodiff(d.path(), "", &["diffuse"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let two = json(d.path(), "diffusion.json");
    let epochs = two["epochs"].as_array().unwrap();
    assert_eq!(epochs.len(), 3);
    let a_two = two["slope_a"].as_f64().unwrap();
    assert!(a_two > 0.0);
    for k in 0..3 {
        let csv = fs::read_to_string(d.path().join(format!("out/schedule_epoch{k}.csv"))).unwrap();
        assert!(csv.starts_with("block,branch,J,phi,theta0,theta1,H_eps,H_physical,t_physical"));
        assert_eq!(csv.lines().count() as u64, epochs[k]["blocks"].as_u64().unwrap() + 2);
    }

    let s = TempDir::new().unwrap();
    let o = geodiff(s.path(), "[schedule]\npolicy = \"single-map\"\n", &["diffuse"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let a_single = json(s.path(), "diffusion.json")["slope_a"].as_f64().unwrap();
    assert!(a_single.abs() < 0.2 * a_two, "{a_single} vs {a_two}");
}

#[test]
fn zero_potential_has_zero_slope() {
    let d = TempDir::new().unwrap();
    let cfg = "[model.potential]\nkind = \"zero\"\n[schedule]\npolicy = \"single-map\"\n";
    let o = geodiff(d.path(), cfg, &["diffuse"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let j = json(d.path(), "diffusion.json");
    assert!(j["slope_a"].as_f64().unwrap().abs() < 1e-12);
    assert_eq!(j["epochs"][0]["h_end"], j["epochs"][0]["h_start"]);

    let o = geodiff(d.path(), "[model.potential]\nkind = \"zero\"\n", &["diffuse"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn stalled_epoch_exits_with_three_and_names_it() {
    let d = TempDir::new().unwrap();
    let o = geodiff(d.path(), "[schedule]\nmax_blocks = 20000\n", &["diffuse"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch 1"), "{}", stderr(&o));
}

#[test]
fn certified_shadow_exits_with_zero() {
    let d = TempDir::new().unwrap();
    let o = geodiff(d.path(), "", &["shadow"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let chain = json(d.path(), "chain.json");
    let certs = chain["certificates"].as_array().unwrap();
    assert_eq!(certs.len(), 4);
    assert!(certs.iter().all(|c| c["verdict"] == "aligned"));
    let sh = json(d.path(), "shadow.json");
    assert_eq!(sh["visits"], 5);
    assert!(sh["min_margin"].as_f64().unwrap() > 0.0);
    let csv = fs::read_to_string(d.path().join("out/shadow.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn halved_twist_exits_with_three_naming_the_link() {
    let d = TempDir::new().unwrap();
    let probe = geodiff(d.path(), "", &["shadow"]);
    assert_eq!(code(&probe), 0);
    let k = json(d.path(), "chain.json")["constants"]["k"].as_u64().unwrap();
    let e = TempDir::new().unwrap();
    let o = geodiff(e.path(), &format!("[windows]\ntwist_steps = {}\n", k / 2), &["shadow"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("link 1"), "{}", stderr(&o));
    assert!(stderr(&o).contains("twist"), "{}", stderr(&o));
    assert!(e.path().join("out/chain.json").exists());
    assert!(!e.path().join("out/shadow.csv").exists());
}

#[test]
fn empty_schedule_gives_an_empty_chain() {
    let d = TempDir::new().unwrap();
    let o = geodiff(d.path(), "[windows]\nblocks = 0\n", &["shadow"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(json(d.path(), "chain.json")["windows"].as_array().unwrap().is_empty());
    assert_eq!(json(d.path(), "shadow.json")["visits"], 0);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn seeded_pipeline_runs_are_byte_identical() {
    let cfg = "seed = 11\n[melnikov]\njitter = 0.5\n[schedule]\nvalidate_blocks = 2\n";
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let oa = geodiff(a.path(), cfg, &["--jobs", "2", "pipeline"]);
    let ob = geodiff(b.path(), cfg, &["--jobs", "3", "pipeline"]);
    assert_eq!(code(&oa), 0, "{}", stderr(&oa));
    assert_eq!(code(&ob), 0, "{}", stderr(&ob));
    let (fa, fb) = (files(&a.path().join("out")), files(&b.path().join("out")));
    let names: Vec<&str> = fa.iter().map(|f| f.0.as_str()).collect();
    assert!(names.contains(&"shadow.csv") && names.contains(&"diffusion.json"));
    assert!(!names.iter().any(|n| n.ends_with(".tmp")));
    assert_eq!(fa, fb);

    let c = TempDir::new().unwrap();
    let oc = geodiff(c.path(), cfg, &["--seed", "12", "melnikov"]);
    assert_eq!(code(&oc), 0);
    let grid = |d: &TempDir| fs::read(d.path().join("out/gain_grid.csv")).unwrap();
    assert_ne!(grid(&a), grid(&c));
}
