use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn stabsde(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stabsde"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) {
    fs::write(dir.join(name), body).unwrap();
}

const QUARTIC: &str = "# quartic dcsgd\n\
objective.kind = quartic_sum\n\
objective.dim = 10\n\
noise.kind = gaussian\n\
noise.sigma1 = 0.1\n\
compressor.kind = random_sparsify\n\
compressor.p = 0.8\n\
clients = 3\n\
algorithm = dcsgd\n\
eta = 0.1\n\
steps = 20\n\
runs = 3\n\
record_stride = 5\n";

#[test]
fn run_echoes_config_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "quartic_dcsgd.cfg", QUARTIC);
    let a = stabsde(&["run", "--config", "quartic_dcsgd.cfg", "--output", "a.csv"], dir.path());
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert!(String::from_utf8_lossy(&a.stdout).starts_with("run: algorithm=dcsgd"));
    let b = stabsde(&["--threads", "2", "run", "--config", "quartic_dcsgd.cfg", "--output", "b.csv"], dir.path());
    assert!(b.status.success());
    let ca = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    let cb = fs::read_to_string(dir.path().join("b.csv")).unwrap();
    assert_eq!(ca, cb);

    let header: Vec<&str> = ca.lines().take_while(|l| l.starts_with('#')).collect();
    assert!(header.contains(&"# compressor.p = 0.8"));
    let hash = header.last().unwrap().strip_prefix("# config_sha1 = ").unwrap();
    assert_eq!(hash.len(), 40);
    let body: Vec<&str> = ca.lines().skip_while(|l| l.starts_with('#')).collect();
    assert_eq!(body[0], "run_id,step,time,loss,grad_norm_sq,lr_eff,g_hat,status");
    // steps 0, 5, 10, 15, 20 for each of three runs
    assert_eq!(body.len(), 1 + 3 * 5);
    assert!(body[5].starts_with("0,20,") && body[5].ends_with(",completed"));
    assert!(body[1].ends_with(",running"));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = stabsde(&["run", "--config", "nope.cfg"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
    write(dir.path(), "bad.cfg", "noise.sigma7 = 1\n");
    let bad = stabsde(&["run", "--config", "bad.cfg"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown key"));
    write(dir.path(), "sign.cfg", "algorithm = dcsgd\ncompressor.kind = sign\n");
    assert_eq!(stabsde(&["run", "--config", "sign.cfg"], dir.path()).status.code(), Some(2));
}

#[test]
fn sde_writes_trajectory_schema() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "sde.cfg",
        "objective.kind = quadratic\nsde.family = corrected_first\nsde.algorithm = sgd\neta = 1\nsde.T = 2\nsde.dt = 0.001\nx0 = 1\nrecord_stride = 1000\n",
    );
    let out = stabsde(&["sde", "--config", "sde.cfg"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "run_id,step,time,loss,grad_norm_sq,lr_eff,g_hat,status");
    let last: Vec<&str> = rows.last().unwrap().split(',').collect();
    assert_eq!(last[1], "2000");
    let loss: f64 = last[3].parse().unwrap();
    let want = 0.5 * (-2.0f64).exp();
    assert!((loss - want).abs() / want < 0.02);
}

#[test]
fn stability_scan_and_weak_order() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "scan.cfg",
        "objective.kind = quadratic\nalgorithm = dsgd\nsteps = 200\nanalysis.eta_grid = 1.9,2.1\nanalysis.x0_grid = 1\n",
    );
    let out = stabsde(&["stability-scan", "--config", "scan.cfg"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("eta,x0,status\n1.9,1,stable\n2.1,1,diverged\n"));

    write(
        dir.path(),
        "weak.cfg",
        "objective.kind = quadratic\nalgorithm = dsgd\nsde.family = classic_first\nanalysis.eta_grid = 0.1,0.2\nanalysis.samples = 2\nanalysis.test_fn = loss\nx0 = 1\n",
    );
    let out = stabsde(&["weak-order", "--config", "weak.cfg"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("eta,error,ci,slope\n0.1,"));
}

#[test]
fn bound_check_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let base = "objective.kind = quadratic\nnoise.kind = gaussian\nclients = 4\nscheduler.kind = power_law\nscheduler.a = 0.5\nanalysis.theorem = d2\nsde.dt = 0.01\n";
    write(
        dir.path(),
        "ok.cfg",
        &format!("{base}noise.sigma0 = 0.1\neta = 0.5\nanalysis.samples = 500\nanalysis.t_grid = 1,10\nx0 = 1\n"),
    );
    let ok = stabsde(&["bound-check", "--config", "ok.cfg", "--output", "ok.csv"], dir.path());
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let csv = fs::read_to_string(dir.path().join("ok.csv")).unwrap();
    assert!(csv.contains("t,rhs,empirical,ci,satisfied\n1,"));
    assert!(csv.trim_end().ends_with("true"));

    write(
        dir.path(),
        "violates.cfg",
        &format!("{base}noise.sigma0 = 0.1\neta = 1.5\nanalysis.samples = 10\nanalysis.t_grid = 1\nx0 = 1\n"),
    );
    assert_eq!(stabsde(&["bound-check", "--config", "violates.cfg"], dir.path()).status.code(), Some(2));

    // two samples of heavy noise cannot certify
    write(
        dir.path(),
        "fails.cfg",
        "objective.kind = quadratic\nnoise.kind = gaussian\nnoise.sigma0 = 3\nclients = 1\nscheduler.kind = power_law\nscheduler.a = 0.5\neta = 0.5\nanalysis.theorem = d2\nanalysis.samples = 2\nanalysis.t_grid = 1,5,10,20\nsde.dt = 0.01\nx0 = 0\nseed = 1\n",
    );
    assert_eq!(stabsde(&["bound-check", "--config", "fails.cfg"], dir.path()).status.code(), Some(3));
}

#[test]
fn repro_writes_paired_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = stabsde(&["repro", "fig1-right", "--runs", "20", "--steps", "100", "--out-dir", "out"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["quartic-dsign-const", "quartic-dsign-sqrt"] {
        let csv = fs::read_to_string(dir.path().join("out").join(format!("{name}.csv"))).unwrap();
        assert!(csv.starts_with(&format!("# protocol = {name}\n")));
        assert!(csv.contains("protocol,variant,step,mean_grad_norm_sq,mean_loss,diverged_runs\n"));
        assert!(csv.contains(",sigma=16,100,"));
    }
    let again = stabsde(&["repro", "quartic-dsign-const", "--runs", "20", "--steps", "100", "--out-dir", "again"], dir.path());
    assert!(again.status.success());
    assert_eq!(
        fs::read(dir.path().join("out/quartic-dsign-const.csv")).unwrap(),
        fs::read(dir.path().join("again/quartic-dsign-const.csv")).unwrap()
    );
    assert_eq!(stabsde(&["repro", "fig9"], dir.path()).status.code(), Some(2));
    let list = stabsde(&["repro", "list"], dir.path());
    assert_eq!(String::from_utf8(list.stdout).unwrap().lines().count(), 9);
}
