use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dtnbgp"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn node_toml(dir: &Path, base: u16) -> PathBuf {
    let dump = dir.join("rib.json");
    let text = format!(
        r#"
[node]
asn = 64512
bgp_id = "10.0.0.1"
listen = "127.0.0.1:{bgp}"
rib_dump_path = "{dump}"

[[cla]]
name = "mtcp0"
safi = 0
host = "127.0.0.1"
port = {base}

[bp]
listen = "127.0.0.1:{bp}"

[timers]
hold = 3
"#,
        bgp = base + 2,
        bp = base + 1,
        dump = dump.display()
    );
    let path = dir.join("node.toml");
    std::fs::write(&path, text).unwrap();
    path
}

struct Running(Child);

impl Drop for Running {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
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

#[test]
fn node_lifecycle_through_cli() {
    let dir = tempfile::tempdir().unwrap();
    let config = node_toml(dir.path(), 24000);
    let config = config.to_str().unwrap();
    let _node = Running(
        bin()
            .args(["--log-level", "warn", "run", "--config", config])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let deadline = Instant::now() + Duration::from_secs(5);
    while !dir.path().join("rib.json").exists() {
        assert!(Instant::now() < deadline, "node did not start");
        std::thread::sleep(Duration::from_millis(50));
    }

    let out = run(&["rib", "--config", config]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out), "");

    let out = run(&["announce", "--config", config, "http://bad"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("scheme"), "{}", stderr(&out));

    let out = run(&["announce", "--config", config, "ipn:5.1"]);
    assert!(out.status.success(), "{}", stderr(&out));

    let deadline = Instant::now() + Duration::from_secs(3);
    loop {
        let out = run(&["rib", "--config", config]);
        if stdout(&out) == "ipn:5.1 | 127.0.0.1:24000 | 0 | - | local | 0\n" {
            break;
        }
        assert!(Instant::now() < deadline, "rib shows {:?}", stdout(&out));
        std::thread::sleep(Duration::from_millis(100));
    }
    let out = run(&["--json", "rib", "--config", config]);
    let rows: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rows[0]["eid"], "ipn:5.1");

    let out = run(&["fib", "--config", config]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out), "");

    let out = run(&["withdraw", "--config", config, "ipn:5.1"]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn two_node_scenario_exits_zero_with_labelled_steps() {
    let logs = tempfile::tempdir().unwrap();
    let out = run(&[
        "--log-level",
        "warn",
        "scenario",
        scenario("two_node.toml").to_str().unwrap(),
        "--log-dir",
        logs.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    for step in [
        "step 1",
        "step 2",
        "step 3",
        "step 4",
        "steps 5-6",
        "steps 7-8",
    ] {
        assert!(text.contains(step), "missing {step} in\n{text}");
    }
    let journal = std::fs::read_to_string(logs.path().join("scenario.log")).unwrap();
    assert!(journal.ends_with("PASS\n"));
    assert!(logs.path().join("A.log").exists() && logs.path().join("B.log").exists());
}

#[test]
fn failed_expectation_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("lonely.toml");
    std::fs::write(
        &file,
        r#"
[[nodes]]
name = "A"
[nodes.node]
asn = 64512
bgp_id = "10.0.0.1"
[[nodes.cla]]
name = "mtcp0"
safi = 0
host = "127.0.0.1"
port = 24100
[nodes.bp]
listen = "127.0.0.1:24101"

[[events]]
action = "expect_rib"
label = "never announced"
node = "A"
eid = "ipn:9.9"
timeout = 0.3
"#,
    )
    .unwrap();
    let out = run(&["--log-level", "warn", "scenario", file.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert_eq!(
        err.lines().filter(|l| l.starts_with("FAIL")).count(),
        1,
        "{err}"
    );
    assert!(err.contains("never announced"));
}
