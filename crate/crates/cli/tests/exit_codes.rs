use std::path::Path;
use std::process::Command;

const SMALL: &str = "epochs = 1\nbatch_size = 32\nembed_dim = 4\nmodel_dim = 8\nheads = 2\n\
                     ffn_hidden = 16\nmask_dim = 4\nexpert_dim = 8\ntower_hidden = 4\nmax_seq_len = 8\n";

fn htgnn(args: &[&str], paths: &[&Path]) -> Option<i32> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_htgnn"));
    cmd.args(args);
    for p in paths {
        cmd.arg(p);
    }
    cmd.output().unwrap().status.code()
}

fn train(dir: &Path, config: &str, data: &Path) -> Option<i32> {
    let cfg = dir.join("run.txt");
    std::fs::write(&cfg, config).unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_htgnn"));
    cmd.args(["train", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(data)
        .arg("--out")
        .arg(dir.join("out"));
    cmd.output().unwrap().status.code()
}

#[test]
fn exit_codes_follow_the_failure_kind() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("users.jsonl");
    assert_eq!(
        htgnn(&["gen", "--n", "200", "--segments", "4", "--out"], &[&data]),
        Some(0)
    );

    assert_eq!(train(dir.path(), SMALL, &data), Some(0));
    let ckpt = dir.path().join("out").join("best.ckpt");
    assert_eq!(
        htgnn(
            &["eval", "--checkpoint"],
            &[&ckpt, Path::new("--data"), &data]
        ),
        Some(0)
    );
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(
        htgnn(
            &["eval", "--checkpoint"],
            &[&missing, Path::new("--data"), &data]
        ),
        Some(1)
    );

    // non-finite loss
    assert_eq!(
        train(dir.path(), &format!("{SMALL}lr = 1e300\n"), &data),
        Some(3)
    );

    // unknown key
    assert_eq!(train(dir.path(), "no_such_key = 1\n", &data), Some(2));

    // malformed record
    let bad = dir.path().join("bad.jsonl");
    let mut text = std::fs::read_to_string(&data).unwrap();
    text.push_str("{not json\n");
    std::fs::write(&bad, text).unwrap();
    assert_eq!(train(dir.path(), SMALL, &bad), Some(2));
}
