mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::snapshot_dir;
use semnav::scenario::FloodScenario;
use serde_json::Value;

fn semnav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semnav")).args(args).output().unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = semnav(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn cell(v: (usize, usize)) -> String {
    format!("{},{}", v.0, v.1)
}

#[test]
fn gen_synthetic_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        ok_json(&["gen-synthetic", "--kind", "flood", "--seed", seed, "--out", p(out)]);
    }
    let (sa, sb, sc) = (snapshot_dir(&a), snapshot_dir(&b), snapshot_dir(&c));
    assert_eq!(sa, sb);
    assert_ne!(sa["image.ppm"], sc["image.ppm"]);
    assert_eq!(sa.len(), 8);

    let shapes = dir.path().join("shapes");
    let listed = ok_json(&["gen-synthetic", "--kind", "shapes", "--seed", "1", "--out", p(&shapes)]);
    assert_eq!(listed["files"].as_array().unwrap().len(), 41);
    let img = semnav_core::raster::load_image(&std::fs::read(shapes.join("images/19.ppm")).unwrap()).unwrap();
    assert_eq!(img.dims(), (128, 128));
}

#[test]
fn usage_errors_exit_2() {
    let out = semnav(&["gen-synthetic", "--kind", "volcano", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = semnav(&["plan", "--semantic", "s.pgm"]);
    assert_eq!(out.status.code(), Some(2));
    let out = semnav(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = semnav(&["plan", "--semantic", "s", "--palette", "p", "--start", "1", "--goal", "2,2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failures_print_one_parseable_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = semnav(&[
        "plan", "--semantic", "s.pgm", "--palette", p(&missing), "--start", "0,0", "--goal", "1,1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error: io: "), "{stderr}");
    assert!(stderr.contains("nope.json"));

    ok_json(&["gen-synthetic", "--kind", "flood", "--seed", "1", "--out", p(dir.path())]);
    let out = semnav(&[
        "plan", "--semantic", p(&dir.path().join("labels.pgm")), "--palette", p(&dir.path().join("palette.json")),
        "--start", "0,0", "--goal", "1,1",
    ]);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr.starts_with("error: corrupt: ") && stderr.contains("labels.pgm"), "{stderr}");
}

#[test]
fn lambda_zero_ignores_weights() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok_json(&["gen-synthetic", "--kind", "flood", "--seed", "3", "--out", p(d)]);
    let scenario: FloodScenario = serde_json::from_slice(&std::fs::read(d.join("scenario.json")).unwrap()).unwrap();
    // Truth map plus made-up weights for the four classes.
    let palette = semnav_core::synthetic::flood_base_palette()
        .with_class("flooded", scenario.new_class_color)
        .unwrap();
    std::fs::write(d.join("palette4.json"), palette.to_json()).unwrap();
    std::fs::write(
        d.join("w.json"),
        r#"{"features":["road","grass","building","flooded"],"weights":[-0.1,-0.7,-2.5,-6.0]}"#,
    )
    .unwrap();
    let (truth, palette4, weights) = (d.join("truth.pgm"), d.join("palette4.json"), d.join("w.json"));
    let (start, goal) = (cell(scenario.start), cell(scenario.goal));
    let base = [
        "--semantic", p(&truth), "--palette", p(&palette4), "--start", &start, "--goal", &goal, "--lambda", "0",
    ];
    let mut with = vec!["plan"];
    with.extend(base);
    with.extend(["--weights", p(&weights)]);
    let mut without = vec!["plan"];
    without.extend(base);
    assert_eq!(ok_json(&with), ok_json(&without));
}

#[test]
fn flood_scenario_runs_through_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    ok_json(&["gen-synthetic", "--kind", "flood", "--seed", "0", "--out", p(&data)]);
    let scenario: FloodScenario = serde_json::from_slice(&std::fs::read(data.join("scenario.json")).unwrap()).unwrap();
    let f = |name: &str| data.join(name);
    let o = |name: &str| d.join(name);

    std::fs::write(
        o("seg.json"),
        serde_json::to_string(&semnav::scenario::flood_seg_config()).unwrap(),
    )
    .unwrap();
    ok_json(&[
        "train-seg", "--image", p(&f("image.ppm")), "--labels", p(&f("labels.pgm")), "--palette",
        p(&f("palette.json")), "--config", p(&o("seg.json")), "--model-out", p(&o("model.json")), "--semantic-out",
        p(&o("semantic.pgm")),
    ]);
    ok_json(&["fewshot-train", "--head-out", p(&o("head.json"))]);
    let support = format!("{}:{}", p(&f("support.ppm")), p(&f("support_mask.pgm")));
    let color = format!(
        "{},{},{}",
        scenario.new_class_color[0], scenario.new_class_color[1], scenario.new_class_color[2]
    );
    let predicted = ok_json(&[
        "fewshot-predict", "--head", p(&o("head.json")), "--support", &support, "--query", p(&f("image.ppm")),
        "--mask-out", p(&o("flood.pgm")), "--semantic", p(&o("semantic.pgm")), "--palette", p(&f("palette.json")),
        "--name", &scenario.new_class, "--color", &color, "--semantic-out", p(&o("semantic4.pgm")), "--palette-out",
        p(&o("palette4.json")),
    ]);
    assert_eq!(predicted["weights"], serde_json::json!([1.0]));
    assert!(predicted["foreground"].as_u64().unwrap() > 0);

    std::fs::write(
        o("irl.json"),
        serde_json::to_string(&semnav::scenario::flood_irl_config()).unwrap(),
    )
    .unwrap();
    ok_json(&[
        "train-irl", "--semantic", p(&o("semantic4.pgm")), "--palette", p(&o("palette4.json")), "--demos",
        p(&f("demos.json")), "--config", p(&o("irl.json")), "--weights-out", p(&o("weights.json")),
    ]);
    let explained = ok_json(&[
        "explain", "--semantic", p(&o("semantic4.pgm")), "--palette", p(&o("palette4.json")), "--weights",
        p(&o("weights.json")), "--start", &cell(scenario.start), "--goal", &cell(scenario.goal), "--profile", "safe",
    ]);
    let e = &explained["explanation"];
    assert_eq!(e["top_class"], "flooded", "{e}");
    assert!(e["summary"].as_str().unwrap().starts_with("Route avoids "));
    let planned = ok_json(&[
        "plan", "--semantic", p(&o("semantic4.pgm")), "--palette", p(&o("palette4.json")), "--weights",
        p(&o("weights.json")), "--start", &cell(scenario.start), "--goal", &cell(scenario.goal),
    ]);
    assert_eq!(planned["plan"], e["chosen"]);
}

#[test]
fn dataset_directories_and_short_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let shapes = d.join("shapes");
    ok_json(&["gen-synthetic", "--kind", "shapes", "--seed", "2", "--out", p(&shapes)]);
    let palette = shapes.join("palette.json");
    let trained = ok_json(&[
        "train-seg", "--data", p(&shapes), "--palette", p(&palette), "--pixel-fraction", "0.04", "--epochs", "1",
        "--seed", "5", "--out", p(&d.join("model.json")),
    ]);
    assert_eq!(trained["images"], 20);
    assert_eq!(trained["labeled_fraction"], 1.0);

    // An image without labels is named.
    std::fs::remove_file(shapes.join("labels/07.pgm")).unwrap();
    let out = semnav(&["train-seg", "--data", p(&shapes), "--palette", p(&palette), "--out", p(&d.join("m.json"))]);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.starts_with("error: invalid: ") && stderr.contains("07.ppm"), "{stderr}");
    std::fs::remove_file(shapes.join("images/07.ppm")).unwrap();

    let cfg = d.join("head.json");
    std::fs::write(&cfg, common::quick_training().to_string()).unwrap();
    let names: Vec<String> = semnav_core::raster::LabelPalette::from_json(&std::fs::read_to_string(&palette).unwrap())
        .unwrap()
        .classes()
        .iter()
        .map(|c| c.name.clone())
        .collect();
    let train_classes = names[..4].join(",");
    ok_json(&[
        "fewshot-train", "--data", p(&shapes), "--train-classes", &train_classes, "--test-classes", &names[4], "--k",
        "2", "--config", p(&cfg), "--episodes", "10", "--out", p(&d.join("h.json")),
    ]);
    let out = semnav(&["fewshot-train", "--data", p(&shapes), "--test-classes", "lava", "--out", p(&d.join("x.json"))]);
    assert!(String::from_utf8(out.stderr).unwrap().contains("'lava'"));

    let img = |i: u8| shapes.join(format!("images/{i:02}.ppm"));
    let mask = d.join("mask.pgm");
    let truth = semnav_core::raster::SemanticRaster::load(
        &std::fs::read(shapes.join("labels/00.pgm")).unwrap(),
        &semnav_core::raster::LabelPalette::from_json(&std::fs::read_to_string(&palette).unwrap()).unwrap(),
    )
    .unwrap();
    std::fs::write(&mask, truth.mask_of(truth.data()[0]).save()).unwrap();
    let supports = format!("{}:{},{}:{}", p(&img(0)), p(&mask), p(&img(0)), p(&mask));
    let predicted = ok_json(&[
        "fewshot-predict", "--head", p(&d.join("h.json")), "--support", &supports, "--query", p(&img(1)), "--out",
        p(&d.join("q.pgm")),
    ]);
    assert_eq!(predicted["weights"].as_array().unwrap().len(), 2);

    let flood = d.join("flood");
    ok_json(&["gen-synthetic", "--kind", "flood", "--seed", "1", "--out", p(&flood)]);
    let base = semnav_core::synthetic::flood_base_palette()
        .with_class("flooded", semnav_core::synthetic::flood_color())
        .unwrap();
    std::fs::write(d.join("palette4.json"), base.to_json()).unwrap();
    let learned = ok_json(&[
        "train-irl", "--semantic", p(&flood.join("truth.pgm")), "--palette", p(&d.join("palette4.json")), "--demos",
        p(&flood.join("demos.json")), "--iters", "2", "--lr", "0.001", "--out", p(&d.join("w.json")),
    ]);
    assert_eq!(learned["weights"]["features"][3], "flooded");
    assert!(d.join("w.json").is_file());
}
