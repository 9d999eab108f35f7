use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nirom::metrics;
use nirom::node::DynamicsNet;
use nirom::snapshot::SnapshotFormat;
use nirom::{PodBasis, SnapshotSet};
use nirom_cli::{cmd_compare, cmd_decompose, cmd_fit, cmd_predict, cmd_run, CliError, Context, Method, PipelineConfig};
use tempfile::TempDir;

const WAVE: &str = r#"{
    "input": {"synthetic": {"kind": {"traveling_wave": {"speed": 1.0}}, "grid_points": 64, "dt": 0.01, "snapshots": 100}},
    "pod": {"energy": 1e-10},
    "rbf": {"shape_factor": 0.05},
    "dmd": {"rank": 2},
    "predict": {"start": 0.0, "end": 0.99, "step": 0.0025}
}"#;

fn nirom(dir: &Path, config: &str, args: &[&str]) -> Output {
    let path = dir.join("config.json");
    fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_nirom"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .env_remove("NIROM_OUT_DIR")
        .output()
        .unwrap()
}

fn out_arg(dir: &TempDir) -> String {
    dir.path().join("out").to_str().unwrap().to_string()
}

fn context(config: &str, dir: &TempDir) -> Context {
    Context::new(
        PipelineConfig::from_json(config).unwrap(),
        None,
        Some(&dir.path().join("out")),
    )
    .unwrap()
}

fn load(path: &Path) -> SnapshotSet {
    SnapshotSet::load(path, SnapshotFormat::Binary).unwrap()
}

#[test]
fn generate_writes_traveling_wave() {
    let dir = TempDir::new().unwrap();
    let out = out_arg(&dir);
    let run = nirom(
        dir.path(),
        &WAVE.replace("\"dt\": 0.01", "\"dt\": 0.05"),
        &["generate", "--out", &out],
    );
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let set = load(&Path::new(&out).join("snapshots.snp"));
    assert_eq!(set.data().shape(), (64, 100));
    assert_eq!(&fs::read(Path::new(&out).join("snapshots.snp")).unwrap()[..4], b"SNP1");
}

#[test]
fn missing_kind_is_config_error_with_path() {
    let dir = TempDir::new().unwrap();
    let config = WAVE.replace("\"kind\": {\"traveling_wave\": {\"speed\": 1.0}}, ", "");
    let run = nirom(dir.path(), &config, &["generate", "--out", &out_arg(&dir)]);
    assert_eq!(run.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&run.stderr);
    assert!(
        stderr.contains("input.synthetic") && stderr.contains("kind"),
        "{stderr}"
    );
}

#[test]
fn unknown_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let config = WAVE.replace("\"shape_factor\": 0.05", "\"shape_factor\": 0.05, \"shape\": 1");
    let run = nirom(dir.path(), &config, &["generate", "--out", &out_arg(&dir)]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("rbf"));
}

#[test]
fn harmonic_generate_is_byte_identical() {
    let config = r#"{
        "input": {"synthetic": {"kind": {"harmonic_latent": {"omega": 1.5}}, "grid_points": 40, "dt": 0.1, "snapshots": 30}},
        "seed": 17,
        "pod": {"rank": 2},
        "dmd": {"rank": 2},
        "predict": {"start": 0.0, "end": 2.9, "step": 0.1}
    }"#;
    let dir = TempDir::new().unwrap();
    let bytes = |sub: &str, extra: &[&str]| {
        let out = dir.path().join(sub);
        let mut args = vec!["generate", "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        assert!(nirom(dir.path(), config, &args).status.success());
        fs::read(out.join("snapshots.snp")).unwrap()
    };
    let a = bytes("a", &[]);
    assert_eq!(a, bytes("b", &[]));
    assert_ne!(a, bytes("c", &["--seed", "18"]));
}

#[test]
fn decompose_rank_and_spectrum() {
    let dir = TempDir::new().unwrap();
    let ctx = context(WAVE, &dir);
    let basis = cmd_decompose(&ctx).unwrap();
    assert_eq!(basis.rank(), 2);
    assert_eq!(PodBasis::load(ctx.path("basis.pod")).unwrap().rank(), 2);
    assert_eq!(load(&ctx.path("latent.snp")).data().shape(), (2, 100));

    let spectrum = fs::read_to_string(ctx.path("spectrum.csv")).unwrap();
    let last = spectrum.lines().last().unwrap();
    let cumulative: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(cumulative, 1.0);

    let ctx = context(&WAVE.replace("{\"energy\": 1e-10}", "{\"rank\": 1}"), &dir);
    assert_eq!(cmd_decompose(&ctx).unwrap().rank(), 1);
}

#[test]
fn node_preset_recorded_in_model() {
    let dir = TempDir::new().unwrap();
    let config = WAVE.replace(
        "\"dmd\": {\"rank\": 2},",
        "\"dmd\": {\"rank\": 2}, \"node\": {\"preset\": \"NODE1\", \"epochs\": 2},",
    );
    let ctx = context(&config, &dir);
    cmd_decompose(&ctx).unwrap();
    let path = cmd_fit(&ctx, Method::Node).unwrap();
    let net = DynamicsNet::load(&path).unwrap();
    assert_eq!(net.label(), "NODE1");
    assert_eq!(net.sizes()[1], 256);
    let history = fs::read_to_string(ctx.path("node_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
}

#[test]
fn rbf_shape_factor_accepted() {
    let dir = TempDir::new().unwrap();
    let ctx = context(WAVE, &dir);
    cmd_decompose(&ctx).unwrap();
    let path = cmd_fit(&ctx, Method::Rbf).unwrap();
    assert_eq!(nirom::rbf::RbfModel::load(path).unwrap().shape_factor(), 0.05);
}

#[test]
fn dmd_rank_too_large_is_argument_error() {
    let dir = TempDir::new().unwrap();
    let config = WAVE.replace("\"dmd\": {\"rank\": 2}", "\"dmd\": {\"rank\": 100}");
    let run = nirom(
        dir.path(),
        &config,
        &["fit", "--method", "dmd", "--out", &out_arg(&dir)],
    );
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("rank 100"));
}

#[test]
fn fit_before_decompose_is_io_error() {
    let dir = TempDir::new().unwrap();
    let run = nirom(dir.path(), WAVE, &["fit", "--method", "rbf", "--out", &out_arg(&dir)]);
    assert_eq!(run.status.code(), Some(4));
}

#[test]
fn missing_config_flag() {
    let run = Command::new(env!("CARGO_BIN_EXE_nirom"))
        .arg("generate")
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn dmd_replays_linear_training_data() {
    let config = r#"{
        "input": {"synthetic": {"kind": "linear_system", "grid_points": 6, "dt": 0.5, "snapshots": 20}},
        "seed": 4,
        "pod": {"rank": 2},
        "dmd": {"rank": 6},
        "predict": {"start": 0.0, "end": 9.5, "step": 0.5}
    }"#;
    let dir = TempDir::new().unwrap();
    let ctx = context(config, &dir);
    cmd_fit(&ctx, Method::Dmd).unwrap();
    let pred = load(&cmd_predict(&ctx, Some(Method::Dmd), None).unwrap());
    let train = ctx.training_set().unwrap();
    let err = (pred.data() - train.data()).amax();
    assert!(err < 1e-8 * train.data().amax().max(1.0), "{err:e}");
}

#[test]
fn finer_grid_column_count() {
    let dir = TempDir::new().unwrap();
    let ctx = context(WAVE, &dir);
    cmd_decompose(&ctx).unwrap();
    cmd_fit(&ctx, Method::Rbf).unwrap();
    let pred = load(&cmd_predict(&ctx, Some(Method::Rbf), None).unwrap());
    assert_eq!(pred.len(), 4 * 100 - 3);
    assert_eq!(pred.mesh_size(), 64);
}

#[test]
fn model_basis_mismatch_names_both_dims() {
    let dir = TempDir::new().unwrap();
    let ctx = context(WAVE, &dir);
    cmd_decompose(&ctx).unwrap();
    let model = cmd_fit(&ctx, Method::Rbf).unwrap();
    let ctx = context(&WAVE.replace("{\"energy\": 1e-10}", "{\"rank\": 1}"), &dir);
    cmd_decompose(&ctx).unwrap();
    match cmd_predict(&ctx, None, Some(&model)) {
        Err(CliError::Config(msg)) => assert!(msg.contains('2') && msg.contains('1'), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn predict_infers_method_from_model() {
    let dir = TempDir::new().unwrap();
    let ctx = context(WAVE, &dir);
    let model = cmd_fit(&ctx, Method::Dmd).unwrap();
    let out = cmd_predict(&ctx, None, Some(&model)).unwrap();
    assert!(out.ends_with("pred_dmd.snp"));
    assert!(cmd_predict(&ctx, Some(Method::Rbf), Some(&model)).is_err());
}

#[test]
fn identical_files_compare_to_zero() {
    let dir = TempDir::new().unwrap();
    let ctx = context(WAVE, &dir);
    let truth = ctx.path("reference.snp");
    let set = ctx
        .config
        .synthetic(ctx.seed)
        .unwrap()
        .generate_at(&ctx.config.predict.times().unwrap())
        .unwrap();
    set.save(&truth, SnapshotFormat::Binary).unwrap();
    let copy: PathBuf = ctx.path("pred_copy.snp");
    fs::copy(&truth, &copy).unwrap();
    let reports = cmd_compare(&ctx, Some(&truth), &[copy]).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].method, "copy");
    assert!(reports[0].rmse.iter().all(|&e| e == 0.0));
}

#[test]
fn end_to_end_wave_ordering_and_report() {
    let dir = TempDir::new().unwrap();
    let config = WAVE.replace(
        "\"dmd\": {\"rank\": 2},",
        r#""dmd": {"rank": 2},
           "node": {"architecture": {"hidden": [8], "activation": "tanh", "scaling": true},
                    "training": {"schedule": {"initial": 0.01, "decay": {"kind": "constant"}}, "epochs": 20}},"#,
    );
    let ctx = context(&config, &dir);
    let reports = cmd_run(&ctx).unwrap();
    assert_eq!(reports.len(), 3);

    let json = fs::read_to_string(ctx.path("metrics.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&json).unwrap();
    let methods = value["methods"].as_object().unwrap();
    assert_eq!(methods.len(), 3);
    assert!(methods
        .values()
        .all(|m| m["latent_dim"] == 2 && m["runtime_seconds"].is_number()));
    assert_eq!(metrics::from_json(&json).unwrap().len(), 3);

    let by = |name: &str| reports.iter().find(|r| r.method == name).unwrap().rmse.clone();
    let (rbf, dmd) = (by("rbf"), by("dmd"));
    // both start from the exact initial state; beyond it DMD stays exact
    assert!(rbf[0] < 1e-12 && dmd[0] < 1e-12);
    for k in 1..rbf.len() {
        assert!(
            dmd[k] < rbf[k] && rbf[k] < 1e-2,
            "t index {k}: dmd {:e} rbf {:e}",
            dmd[k],
            rbf[k]
        );
    }

    let csv = fs::read_to_string(ctx.path("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 397);

    let out = ctx.out.to_str().unwrap().to_string();
    let run = nirom(dir.path(), &config, &["report", "--out", &out]);
    assert!(run.status.success());
    let table = String::from_utf8_lossy(&run.stdout);
    assert!(table.contains("dmd") && table.contains("node") && table.contains("rbf"));
    assert_eq!(fs::read_to_string(ctx.path("summary.csv")).unwrap().lines().count(), 4);
}

#[test]
fn env_var_sets_default_out_dir() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("config.json");
    fs::write(&path, WAVE).unwrap();
    let target = dir.path().join("from_env");
    let run = Command::new(env!("CARGO_BIN_EXE_nirom"))
        .args(["generate", "--config"])
        .arg(&path)
        .env("NIROM_OUT_DIR", &target)
        .output()
        .unwrap();
    assert!(run.status.success());
    assert!(target.join("snapshots.snp").exists());
}

#[test]
fn stage_outputs_are_idempotent() {
    let dir = TempDir::new().unwrap();
    let config = WAVE.replace("\"pod\"", "\"seed\": 3, \"pod\"");
    let ctx = context(&config, &dir);
    let snapshot = |names: &[&str]| -> Vec<Vec<u8>> { names.iter().map(|n| fs::read(ctx.path(n)).unwrap()).collect() };
    let files = [
        "basis.pod",
        "latent.snp",
        "rbf.model",
        "dmd.model",
        "pred_rbf.snp",
        "pred_dmd.snp",
    ];
    cmd_run(&ctx).unwrap();
    let first = snapshot(&files);
    cmd_run(&ctx).unwrap();
    assert_eq!(first, snapshot(&files));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let cfg = PipelineConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            if let Some(node) = &cfg.node {
                node.build(2, 0).unwrap();
            }
            count += 1;
        }
    }
    assert!(count >= 3);
}
