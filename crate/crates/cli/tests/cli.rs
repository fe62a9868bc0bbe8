use std::path::Path;
use std::process::{Command, Output};

fn wlasso(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wlasso"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: [&str; 10] = [
    "--n",
    "30",
    "--p",
    "8",
    "--s0-size",
    "2",
    "--beta-min",
    "0.5",
    "--beta-max",
    "1",
];

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&wlasso(&[])), 1);
    assert_eq!(code(&wlasso(&["no-such-command"])), 1);
    assert_eq!(code(&wlasso(&["--help"])), 0);
    let o = wlasso(&["oracle-verify", "--n", "30", "--p", "8"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--seed"), "{}", stderr(&o));
    assert_eq!(
        code(&wlasso(&["fit", "--seed", "1"])),
        1,
        "n and p are required"
    );
    assert_eq!(
        code(&wlasso(&[
            "fit",
            "--n",
            "30",
            "--p",
            "8",
            "--penalty",
            "mcp:0.5"
        ])),
        1
    );
    assert_eq!(
        code(&wlasso(&[
            "fit", "--n", "30", "--p", "8", "--design", "banded"
        ])),
        1
    );
}

#[test]
fn ingestion_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "1,2,3\n4,oops,6\n").unwrap();
    let o = wlasso(&["fit", "--data", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("row 2, column 2"), "{}", stderr(&o));
    let missing = dir.path().join("missing.csv");
    assert_eq!(
        code(&wlasso(&["fit", "--data", missing.to_str().unwrap()])),
        2
    );
    let cfg = dir.path().join("missing.toml");
    assert_eq!(
        code(&wlasso(&["fit", "--config", cfg.to_str().unwrap()])),
        2
    );
}

#[test]
fn unsupported_calibration_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("counts.csv");
    std::fs::write(&data, "1,0.5,2\n0.2,1,0\n-1,0.3,1\n0.4,-0.7,3\n").unwrap();
    let o = wlasso(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--family",
        "poisson",
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = wlasso(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--family",
        "poisson",
        "--lambda",
        "0.5",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn fits_a_csv_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    std::fs::write(&data, "a,b,y\n1,0.5,2\n0.2,1,0\n-1,0.3,-1\n0.4,-0.7,1\n").unwrap();
    let out = dir.path().join("fit.csv");
    let o = wlasso(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--header",
        "--lambda",
        "0.1",
        "--format",
        "csv",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("index,coefficient,negative_gradient"));
    assert_eq!(lines.count(), 2);
    let o = wlasso(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--header",
        "--penalty",
        "mcp",
        "--lambda",
        "0.1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"experiment\": \"multistage\""));
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "experiment = \"path\"\nn = 30\np = 8\ns0_size = 2\nbeta_min = 0.5\nbeta_max = 1.0\nreplicates = 3\npath_length = 4\n",
    )
    .unwrap();
    let out = dir.path().join("path.json");
    let o = wlasso(&[
        "path",
        "--config",
        cfg.to_str().unwrap(),
        "--replicates",
        "2",
        "--seed",
        "4",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("\"replicates\": 2"), "override lost");
    assert!(text.contains("\"path_length\": 4"));
    assert!(text.contains("\"seed\": 4"));

    let o = wlasso(&["multistage", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("path"), "{}", stderr(&o));

    let typo = dir.path().join("typo.toml");
    std::fs::write(&typo, "n = 30\np = 8\nreplicate = 3\n").unwrap();
    assert_eq!(
        code(&wlasso(&["fit", "--config", typo.to_str().unwrap()])),
        1
    );
}

#[test]
fn every_subcommand_runs() {
    let dir = tempfile::tempdir().unwrap();
    for sub in [
        "fit",
        "path",
        "multistage",
        "oracle-verify",
        "selection-verify",
        "sparsity-verify",
        "diagnostics",
    ] {
        let out = dir.path().join(format!("{sub}.json"));
        let mut args = vec![
            sub,
            "--seed",
            "2",
            "--replicates",
            "2",
            "--output",
            out.to_str().unwrap(),
        ];
        args.extend(SMALL);
        let o = wlasso(&args);
        assert_eq!(code(&o), 0, "{sub}: {}", stderr(&o));
        assert!(Path::new(&out).exists());
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.contains("\"schema_version\""), "{sub}");
    }
}

#[test]
fn csv_output_goes_to_stdout() {
    let mut args = vec![
        "oracle-verify",
        "--seed",
        "3",
        "--replicates",
        "3",
        "--format",
        "csv",
    ];
    args.extend(SMALL);
    let o = wlasso(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let widths: Vec<usize> = text.lines().map(|l| l.split(',').count()).collect();
    assert_eq!(widths.len(), 4);
    assert!(widths.iter().all(|&w| w == widths[0]));
}
