use std::fs;
use std::path::{Path, PathBuf};

use wdlab_harness::analyze::{analyze_to_file, find_runs};
use wdlab_harness::config::RunConfig;
use wdlab_harness::plot::{plot, PlotKind};
use wdlab_harness::sweep::{sweep, SweepItem};

fn config(id: &str, seed: u64, adam: bool) -> RunConfig {
    let optimizer = if adam {
        "kind = \"adam\"\nalpha = 0.01"
    } else {
        "kind = \"sgd\"\nalpha = 0.05"
    };
    RunConfig::from_toml(&format!(
        r#"
[run]
id = "{id}"
seed = {seed}
epochs = 3
batch_size = 16

[model]
hidden = [8]
batch_norm = true

[optimizer]
{optimizer}

[data]
source = "blobs"
classes = 3
dim = 3
per_class = 15
test_per_class = 15

[metrics]
every_steps = 2

[sharpness]
epochs = [3]
hessian_iters = 20
eval_examples = 30

[sharpness.perturbation]
samples = 8

[sharpness.keskar]
ascent_steps = 3
"#
    ))
    .unwrap()
}

/// Two SGD seeds and one Adam run under `root`.
fn make_runs(root: &Path) -> Vec<PathBuf> {
    let items: Vec<SweepItem> = [("sgd-s0", 0, false), ("sgd-s1", 1, false), ("adam-s0", 0, true)]
        .iter()
        .map(|&(id, s, a)| SweepItem::from_config(config(id, s, a)).unwrap())
        .collect();
    sweep(&items, 1, root)
        .unwrap()
        .into_iter()
        .map(|r| r.unwrap().dir)
        .collect()
}

#[test]
fn analyze_groups_seeds() {
    let dir = tempfile::tempdir().unwrap();
    make_runs(dir.path());
    let out = dir.path().join("report/out.json");
    let report = analyze_to_file(&format!("{}/*", dir.path().display()), &out).unwrap();
    assert_eq!(report.runs.len(), 3);
    assert_eq!(report.groups.len(), 2);
    let sgd = report.groups.iter().find(|g| g.label == "sgd").unwrap();
    assert_eq!(sgd.runs, ["sgd-s0", "sgd-s1"]);
    assert_eq!(sgd.final_test_acc.unwrap().n, 2);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(json["schema_version"], 1);
    assert_eq!(json["runs"].as_array().unwrap().len(), 3);
}

#[test]
fn globs_without_runs_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let err = find_runs(&format!("{}/*", dir.path().display())).unwrap_err();
    assert_eq!(err.kind(), "no_runs");
}

#[test]
fn every_plot_kind_renders_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let runs = make_runs(dir.path());
    let adam = vec![runs[2].clone()];
    for kind in PlotKind::ALL {
        let input = if kind == PlotKind::QuantileBand { &adam } else { &runs };
        let out = dir.path().join(format!("plots/{}.svg", kind.name()));
        let files = plot(input, kind, &out).unwrap();
        let svg = fs::read(&files.svg).unwrap();
        let csv = fs::read(&files.csv).unwrap();
        assert!(svg.starts_with(b"<svg"), "{kind:?}");
        assert!(String::from_utf8(csv.clone()).unwrap().starts_with("series,x,y\n"));
        let again = plot(input, kind, &out).unwrap();
        assert_eq!(fs::read(&again.svg).unwrap(), svg, "{kind:?}");
        assert_eq!(fs::read(&again.csv).unwrap(), csv, "{kind:?}");
    }
}

#[test]
fn single_run_norm_curve_has_one_series_and_axis_labels() {
    let dir = tempfile::tempdir().unwrap();
    let runs = make_runs(dir.path());
    let files = plot(&runs[..1], PlotKind::NormCurves, &dir.path().join("n.svg")).unwrap();
    let svg = fs::read_to_string(&files.svg).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    assert!(svg.contains(">epoch<") && svg.contains(">‖w‖<"));
    let csv = fs::read_to_string(&files.csv).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(csv.lines().skip(1).all(|l| l.starts_with("sgd-s0,")));
}

#[test]
fn empty_run_list_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = plot(&[], PlotKind::NormCurves, &dir.path().join("x.svg")).unwrap_err();
    assert_eq!(err.kind(), "no_runs");
}

#[test]
fn missing_columns_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let runs = make_runs(dir.path());
    // SGD runs log no buffer quantiles.
    let err = plot(&runs[..1], PlotKind::QuantileBand, &dir.path().join("q.svg")).unwrap_err();
    assert_eq!(err.kind(), "missing_column");

    let csv = runs[0].join("metrics.csv");
    let text = fs::read_to_string(&csv).unwrap().replacen("weight_norm,", "wn,", 1);
    fs::write(&csv, text).unwrap();
    let err = plot(&runs[..1], PlotKind::NormCurves, &dir.path().join("n.svg")).unwrap_err();
    assert_eq!(err.kind(), "missing_column");
    assert!(err.to_string().contains("weight_norm"), "{err}");
}
