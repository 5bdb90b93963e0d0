use std::path::Path;

use detfed::cli::{self, report, results, ExperimentSpec, ResultRow, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use detfed::federation::Strategy;
use detfed::metrics::mean_std;

fn small_spec(root: &Path) -> ExperimentSpec {
    ExperimentSpec {
        seed: 4,
        nodes: 3,
        train_per_node: 6,
        test_size: 6,
        data_dir: root.join("data"),
        out_dir: root.join("out"),
        rounds: vec![2],
        epochs: vec![1],
        strategies: vec![Strategy::Standalone, Strategy::BackboneOnly, Strategy::Joint],
        batch_size: 4,
        lr_head: 1e-3,
        lr_backbone: 1e-3,
        image_size: 32,
        backbone_widths: vec![4, 8],
        embed_dim: 8,
        num_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_dim: 16,
        num_queries: 3,
        aug_short: 32,
        aug_long_max: 80,
        ..Default::default()
    }
}

fn write_spec(spec: &ExperimentSpec, path: &Path) -> String {
    std::fs::write(path, spec.to_toml()).unwrap();
    path.to_str().unwrap().to_string()
}

fn exit(args: &[&str]) -> i32 {
    cli::main_with_args(std::iter::once("detfed").chain(args.iter().copied()))
}

#[test]
fn exit_codes() {
    assert_eq!(exit(&["--help"]), EXIT_OK);
    assert_eq!(exit(&["--version"]), EXIT_OK);
    assert_eq!(exit(&[]), EXIT_USAGE);
    assert_eq!(exit(&["train"]), EXIT_USAGE);
    assert_eq!(exit(&["run", "--workers", "many"]), EXIT_USAGE);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "lr_haed = 0.1\n").unwrap();
    assert_eq!(exit(&["run", "--config", bad.to_str().unwrap()]), EXIT_DATA);
    assert_eq!(exit(&["run", "--config", dir.path().join("missing.toml").to_str().unwrap()]), EXIT_DATA);

    // valid spec, but no datasets generated yet
    let cfg = write_spec(&small_spec(dir.path()), &dir.path().join("spec.toml"));
    assert_eq!(exit(&["run", "--config", &cfg]), EXIT_DATA);
    assert_eq!(exit(&["report", dir.path().join("none.csv").to_str().unwrap()]), EXIT_DATA);
}

#[test]
fn generated_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path());
    let cfg = write_spec(&spec, &dir.path().join("spec.toml"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(exit(&["generate-data", "--config", &cfg, "--out", a.to_str().unwrap()]), EXIT_OK);
    assert_eq!(exit(&["generate-data", "--config", &cfg, "--out", b.to_str().unwrap()]), EXIT_OK);
    let mut names: Vec<String> =
        std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["node_0.fkey", "node_1.fkey", "node_2.fkey", "test.fkey"]);
    for n in &names {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n}");
    }
    let loaded = cli::load_data(&ExperimentSpec { data_dir: a.clone(), ..spec.clone() }, &a).unwrap();
    assert!(loaded.nodes.iter().all(|n| n.len() == 6));
    assert_eq!(loaded.test.len(), 6);

    // a different seed gives different data
    let c = dir.path().join("c");
    assert_eq!(exit(&["generate-data", "--config", &cfg, "--seed", "5", "--out", c.to_str().unwrap()]), EXIT_OK);
    assert_ne!(std::fs::read(a.join("test.fkey")).unwrap(), std::fs::read(c.join("test.fkey")).unwrap());

    // frames of the wrong size are a config error
    let wrong = ExperimentSpec { image_size: 48, ..spec };
    assert!(cli::load_data(&wrong, &a).is_err());
}

fn run_once(spec: &ExperimentSpec, out: &Path, workers: usize) -> Vec<u8> {
    let csv = cli::cmd_run(spec, out, workers).unwrap();
    std::fs::read(csv).unwrap()
}

#[test]
fn run_is_deterministic_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path());
    cli::cmd_generate_data(&spec, &spec.data_dir).unwrap();

    let first = run_once(&spec, &dir.path().join("o1"), 1);
    assert_eq!(first, run_once(&spec, &dir.path().join("o2"), 1));
    assert_eq!(first, run_once(&spec, &dir.path().join("o3"), 3));

    let rows = results::read(&dir.path().join("o1/results.csv")).unwrap();
    // per cell: R evaluated rounds × (nodes + GLOBAL); Joint has a single node
    assert_eq!(rows.len(), 2 * 4 + 2 * 4 + 2 * 2);
    for r in &rows {
        match r.strategy.as_str() {
            "Standalone" | "Joint" => assert_eq!(r.comm_fraction, 0.0),
            _ => assert!(r.comm_fraction > 0.0 && r.comm_fraction < 0.5),
        }
        assert_eq!(r.seconds, 0.0);
        assert_eq!(r.acc_std.is_some(), r.is_global());
    }
    for g in rows.iter().filter(|r| r.is_global()) {
        let accs: Vec<f64> = rows
            .iter()
            .filter(|r| !r.is_global() && r.strategy == g.strategy && r.round_idx == g.round_idx)
            .map(|r| r.acc)
            .collect();
        let (mean, std) = mean_std(&accs);
        assert!((g.acc_std.unwrap() - std).abs() <= 1e-12, "{g:?}");
        assert!((g.acc - mean).abs() <= 1e-12);
    }
    let ckpt = dir.path().join("o1/checkpoints/BackboneOnly_r2_e1");
    for i in 0..3 {
        detfed::model::checkpoint::load(&ckpt.join(format!("node_{i}.ckpt"))).unwrap();
        let stats = detfed::model::checkpoint::load(&ckpt.join(format!("node_{i}.stats.ckpt"))).unwrap();
        detfed::model::NormStats::from_tree(&spec.model(), &stats).unwrap();
    }

    // appending a second run keeps one header
    let again = run_once(&spec, &dir.path().join("o1"), 1);
    assert_eq!(again.len(), 2 * first.len() - (results::HEADER.join(",").len() + 1));
}

#[test]
fn run_refuses_foreign_results_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec { strategies: vec![Strategy::Standalone], rounds: vec![1], ..small_spec(dir.path()) };
    cli::cmd_generate_data(&spec, &spec.data_dir).unwrap();
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("results.csv"), "strategy,acc\nFedBN,0.5\n").unwrap();
    assert!(cli::cmd_run(&spec, &out, 1).is_err());
    assert_eq!(std::fs::read_to_string(out.join("results.csv")).unwrap(), "strategy,acc\nFedBN,0.5\n");
}

/// Reads every numeric cell of a rendered table line.
fn numbers(line: &str) -> Vec<f64> {
    line.split('|')
        .skip(2)
        .filter(|c| !c.trim().is_empty())
        .flat_map(|c| c.split('±').map(|v| v.trim().parse::<f64>().unwrap()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn report_parses_back_to_csv_values() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path());
    cli::cmd_generate_data(&spec, &spec.data_dir).unwrap();
    let out = dir.path().join("out");
    let csv = cli::cmd_run(&spec, &out, 2).unwrap();
    let rows = results::read(&csv).unwrap();
    let md = cli::cmd_report(&csv).unwrap();
    assert_eq!(md, report::render(&rows).unwrap());
    assert_eq!(md.matches("### 2 rounds × 1 epochs").count(), 1);

    let round = |v: f64| 100.0 * v;
    for strategy in ["Standalone", "BackboneOnly", "Joint"] {
        let line = md.lines().find(|l| l.starts_with(&format!("| {strategy} |"))).unwrap();
        let got = numbers(line);
        let final_rows: Vec<&ResultRow> = rows.iter().filter(|r| r.strategy == strategy && r.round_idx == 2).collect();
        let g = final_rows.iter().find(|r| r.is_global()).unwrap();
        let nodes: Vec<&&ResultRow> = final_rows.iter().filter(|r| !r.is_global()).collect();
        let spread = |f: fn(&ResultRow) -> f64| mean_std(&nodes.iter().map(|r| f(r)).collect::<Vec<_>>()).1;
        let mut want = vec![round(g.ppv_low), round(g.ppv_high), round(g.tpr_low), round(g.tpr_high)];
        if nodes.len() > 1 {
            want.extend([
                round(g.iou_low),
                round(spread(|r| r.iou_low)),
                round(g.iou_high),
                round(spread(|r| r.iou_high)),
                round(g.acc),
                round(g.acc_std.unwrap()),
            ]);
        } else {
            want.extend([round(g.iou_low), round(g.iou_high), round(g.acc)]);
        }
        want.push(round(g.comm_fraction));
        assert_eq!(got.len(), want.len(), "{line}");
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 0.05 + 1e-9, "{strategy}: {got:?} vs {want:?}");
        }
    }
    assert_eq!(std::fs::read(&csv).unwrap(), std::fs::read(&csv).unwrap());
}

#[test]
fn recorded_time_is_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec {
        strategies: vec![Strategy::Standalone],
        rounds: vec![1],
        record_time: true,
        ..small_spec(dir.path())
    };
    cli::cmd_generate_data(&spec, &spec.data_dir).unwrap();
    let rows = results::read(&cli::cmd_run(&spec, &dir.path().join("out"), 1).unwrap()).unwrap();
    assert!(rows.iter().all(|r| r.seconds > 0.0));
}
