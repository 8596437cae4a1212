use std::process::{Command, Output};

fn mvs(args: &[&str], workspace: Option<&std::path::Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mvs"));
    cmd.args(args).env_remove("MVS_WORKSPACE");
    if let Some(ws) = workspace {
        cmd.env("MVS_WORKSPACE", ws);
    }
    cmd.output().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    assert_eq!(mvs(&["run", "--tau", "1.5"], Some(&missing)).status.code(), Some(2));
    assert_eq!(mvs(&["run", "--variant", "refined", "--downsample", "0"], Some(&missing)).status.code(), Some(2));
    assert_eq!(mvs(&["run", "--no-such-flag"], Some(&missing)).status.code(), Some(2));
    let out = mvs(&["depth"], Some(&missing));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cameras.txt"));
}

#[test]
fn workspace_from_environment_and_flag() {
    let dir = tempfile::tempdir().unwrap();
    let from_env = dir.path().join("env");
    let out = mvs(&["synth", "--width", "32", "--height", "24"], Some(&from_env));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(from_env.join("images/view000.png").exists());

    // the flag wins over the environment
    let from_flag = dir.path().join("flag");
    let flag = from_flag.to_str().unwrap();
    let out = mvs(&["synth", "--width", "32", "--height", "24", "--workspace", flag], Some(&from_env));
    assert!(out.status.success());
    assert!(from_flag.join("cameras/cameras.txt").exists());

    // a corrupt camera file is a data error naming the line
    std::fs::write(from_flag.join("cameras/cameras.txt"), "1 PINHOLE 32 24 oops\n").unwrap();
    let out = mvs(&["counter", "--workspace", flag], None);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":1:"));
}
