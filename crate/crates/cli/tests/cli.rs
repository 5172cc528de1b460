use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use chrono::{Duration, TimeZone, Utc};
use deeplight::dataset::{Dataset, DatasetWriter, Split};
use deeplight::grid::{FeatureId, GridSpec};
use serde_json::Value;

fn deeplight(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deeplight"))
        .args(args)
        .env_remove("DEEPLIGHT_CACHE")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
    let value: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&value).unwrap()
}

fn assert_valid(validator: &jsonschema::Validator, doc: &Value) {
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

#[test]
fn help_and_usage_errors() {
    let out = deeplight(&["--help"]);
    assert_eq!(code(&out), 0);
    for sub in ["ingest", "synth", "train", "eval", "predict", "plot"] {
        assert!(stdout(&out).contains(sub));
    }
    assert_eq!(code(&deeplight(&["synth", "--help"])), 0);
    assert_eq!(code(&deeplight(&["synth", "--bogus"])), 1);
    assert_eq!(code(&deeplight(&["frobnicate"])), 1);
    assert_eq!(code(&deeplight(&["eval", "--data", "x"])), 1);
    assert_eq!(code(&deeplight(&["predict", "--ckpt", "a", "--data", "b", "--anchor", "soon", "--out", "c"])), 1);
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = deeplight(&["eval", "--data", s(&dir.path().join("none")), "--baseline", "persistence"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("error"));
}

#[test]
fn synth_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let args = ["synth", "--grid", "8", "--hours", "30", "--out", s(&data)];
    assert_eq!(code(&deeplight(&args)), 0);
    let before = fs::read(data.join("manifest.json")).unwrap();
    let again = deeplight(&args);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&deeplight(&forced)), 0);
    assert_eq!(fs::read(data.join("manifest.json")).unwrap(), before);
}

#[test]
fn persistence_eval_needs_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&deeplight(&["synth", "--grid", "12", "--hours", "80", "--out", s(&data)])), 0);
    let report = dir.path().join("persistence.json");
    let out = deeplight(&["eval", "--data", s(&data), "--baseline", "persistence", "--out", s(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let tsv = stdout(&out);
    assert!(tsv.starts_with("mode\thorizon_h\tPOD\tFAR\tETS\tMicroF1\tMacroF1"));
    assert_eq!(tsv.lines().count(), 7);
    let doc: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_valid(&schema("eval_report.schema.json"), &doc);
    assert_eq!(doc["forecaster"], "persistence");
    let out = deeplight(&["eval", "--data", s(&data), "--baseline", "persistence", "--out", s(&report)]);
    assert_eq!(code(&out), 2);
}

fn write_prediction(dir: &Path, grid: GridSpec, hours: usize, value: f32) {
    let t0 = Utc.with_ymd_and_hms(2023, 4, 1, 10, 0, 0).unwrap();
    let times = (0..hours).map(|k| t0 + Duration::hours(k as i64)).collect();
    let mut w = DatasetWriter::create(dir, grid, &[FeatureId::Probability], times, vec![Split::Test; hours], false).unwrap();
    for k in 0..hours {
        w.write(FeatureId::Probability, k, &vec![value; grid.cells()]).unwrap();
    }
    w.finish().unwrap();
}

#[test]
fn plot_of_all_zero_prediction_has_fixed_canvas() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&deeplight(&["synth", "--grid", "10", "--hours", "30", "--out", s(&data)])), 0);
    let pred = dir.path().join("pred");
    write_prediction(&pred, GridSpec::dallas_square(10), 3, 0.0);
    let figs = dir.path().join("figs");
    let out = deeplight(&["plot", "--pred", s(&pred), "--truth", s(&data), "--out", s(&figs)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for lead in 1..=3 {
        let img = image::open(figs.join(format!("lead_{lead:02}.png"))).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (520, 256));
        // Right panel is the forecast: all black for zero probability.
        assert!((264..520).all(|x| img.get_pixel(x, 100).0 == [0, 0, 0]));
    }
    assert_eq!(code(&deeplight(&["plot", "--pred", s(&pred), "--truth", s(&data), "--out", s(&figs)])), 2);
}

fn write_points(dir: &Path, hours: &[chrono::DateTime<Utc>]) {
    let grid = GridSpec::dallas_square(6);
    let corners = [
        (grid.lat_min, grid.lon_min),
        (grid.lat_min, grid.lon_max),
        (grid.lat_max, grid.lon_min),
        (grid.lat_max, grid.lon_max),
    ];
    for &hour in hours {
        let stamp = hour.format("%Y%m%d%H").to_string();
        for f in FeatureId::AUXILIARY {
            let d = dir.join(f.name());
            fs::create_dir_all(&d).unwrap();
            let mut text = String::from("lat,lon,value\n");
            for (i, (lat, lon)) in corners.iter().enumerate() {
                text.push_str(&format!("{lat},{lon},{}\n", 10.0 + i as f64));
            }
            fs::write(d.join(format!("{stamp}.csv")), text).unwrap();
        }
        let d = dir.join("flashes");
        fs::create_dir_all(&d).unwrap();
        let (lat, lon) = grid.cell_center(2, 3);
        fs::write(d.join(format!("{stamp}.csv")), format!("lat,lon,energy\n{lat},{lon},1.5\n{lat},{lon},2.0\n")).unwrap();
    }
}

#[test]
fn ingest_points_reads_the_cache_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let t0 = Utc.with_ymd_and_hms(2023, 4, 1, 0, 0, 0).unwrap();
    write_points(&cache, &[t0, t0 + Duration::hours(1)]);
    let out_dir = dir.path().join("ds");
    let out = Command::new(env!("CARGO_BIN_EXE_deeplight"))
        .args(["ingest", "--source", "points", "--start", "2023-04-01T00", "--end", "2023-04-01T03"])
        .args(["--grid", "6", "--out", s(&out_dir)])
        .env("DEEPLIGHT_CACHE", &cache)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ds = Dataset::open(&out_dir).unwrap();
    assert_eq!(ds.manifest().hours.len(), 3);
    let count = ds.load_frame(FeatureId::FlashCount, 0).unwrap();
    assert_eq!(count.values.iter().sum::<f32>(), 2.0);
    assert_eq!(count.values[2 * 6 + 3], 2.0);
    // The third hour has no files and is gap-marked.
    assert!(ds.manifest().is_gap(FeatureId::Reflectivity, 2));
}

#[test]
fn synth_train_eval_predict_plot_pipeline() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert_eq!(code(&deeplight(&["synth", "--out", s(&data)])), 0);

    let train = [
        "train", "--data", s(&data), "--out", s(&run), "--epochs", "2", "--stride", "8", "--c-branch", "2",
        "--c-stem", "4", "--c-hidden", "8", "--lr", "1e-3",
    ];
    let out = deeplight(&train);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(run.join("best.ckpt").exists() && run.join("last.ckpt").exists());
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let validator = schema("train_log.schema.json");
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        assert_valid(&validator, &serde_json::from_str(line).unwrap());
    }
    assert_eq!(code(&deeplight(&train)), 2);

    let ckpt = run.join("best.ckpt");
    let report = dir.path().join("eval.json");
    let out = deeplight(&["eval", "--data", s(&data), "--ckpt", s(&ckpt), "--stride", "4", "--out", s(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let doc: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_valid(&schema("eval_report.schema.json"), &doc);
    assert_eq!(doc["split"], "test");

    // Last hour of the record is 2023-04-17T15; anchor one hour past it.
    let pred = dir.path().join("pred");
    let out = deeplight(&[
        "predict", "--ckpt", s(&ckpt), "--data", s(&data), "--anchor", "2023-04-17T16:00:00Z", "--out", s(&pred),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let forecast = Dataset::open(&pred).unwrap();
    assert_eq!(forecast.manifest().hours.len(), 6);
    for k in 0..6 {
        let f = forecast.load_frame(FeatureId::Probability, k).unwrap();
        assert_eq!(f.values.len(), 32 * 32);
        assert!(f.values.iter().all(|&p| p > 0.0 && p < 1.0));
    }
    let late = deeplight(&[
        "predict", "--ckpt", s(&ckpt), "--data", s(&data), "--anchor", "2023-04-17T18", "--out", s(&dir.path().join("x")),
    ]);
    assert_eq!(code(&late), 2);

    let pred_in = dir.path().join("pred_in");
    let out = deeplight(&["predict", "--ckpt", s(&ckpt), "--data", s(&data), "--anchor", "2023-04-15T00", "--out", s(&pred_in)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let figs = dir.path().join("figs");
    let out = deeplight(&["plot", "--pred", s(&pred_in), "--truth", s(&data), "--out", s(&figs)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_dir(&figs).unwrap().count(), 6);

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 600.0, "pipeline took {secs:.0}s");
}
