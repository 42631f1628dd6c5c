mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn roi_eval(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roi-eval"))
        .args(args)
        .env_remove("EMBEDDER_ENDPOINT")
        .env_remove("EXTRACTOR_ENDPOINT")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(fixture: &common::CorpusFixture) -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("gt.json"), &fixture.gt_json).unwrap();
        fs::write(dir.path().join("pred.json"), &fixture.pred_json).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn evaluate(&self, out: &str, extra: &[&str]) -> Output {
        let (gt, pred, out, summary) = (
            self.path("gt.json"),
            self.path("pred.json"),
            self.path(out),
            self.path(&format!("{out}.txt")),
        );
        let mut args = vec![
            "evaluate",
            "--gt",
            p(&gt),
            "--pred",
            p(&pred),
            "--out",
            p(&out),
            "--summary",
            p(&summary),
        ];
        args.extend_from_slice(extra);
        roi_eval(&args)
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_str(&fs::read_to_string(self.path(name)).unwrap()).unwrap()
    }
}

#[test]
fn missing_gt_exits_2_without_output() {
    let fx = Fixture::new(&common::identity_corpus(3, 1));
    let out = fx.path("report.json");
    let missing = fx.path("nope.json");
    let status = roi_eval(&[
        "evaluate",
        "--gt",
        p(&missing),
        "--pred",
        p(&fx.path("pred.json")),
        "--out",
        p(&out),
    ]);
    assert_eq!(status.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn identity_corpus_scores_perfectly() {
    let fx = Fixture::new(&common::identity_corpus(12, 2));
    let run = fx.evaluate("report.json", &[]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let report = fx.json("report.json");
    let corpus = &report["corpus"];
    assert_eq!(corpus["f1"], 1.0);
    assert_eq!(corpus["precision"], 1.0);
    assert_eq!(corpus["recall"], 1.0);
    assert!((corpus["mean_roiq"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(corpus["fp"], 0);
    assert_eq!(report["config"]["tau"], 0.7);
    assert_eq!(report["toolkit"]["name"], "roi-eval");
    assert_eq!(report["nlp"]["rouge1"], 100.0);
    let summary = fs::read_to_string(fx.path("report.json.txt")).unwrap();
    assert!(summary.contains("100.00"), "{summary}");
}

#[test]
fn reruns_are_byte_identical() {
    let fx = Fixture::new(&common::noisy_corpus(15, 3));
    assert_eq!(fx.evaluate("a.json", &[]).status.code(), Some(0));
    assert_eq!(fx.evaluate("b.json", &[]).status.code(), Some(0));
    assert_eq!(fs::read(fx.path("a.json")).unwrap(), fs::read(fx.path("b.json")).unwrap());
}

#[test]
fn parallel_run_matches_serial() {
    let fx = Fixture::new(&common::noisy_corpus(15, 4));
    assert_eq!(fx.evaluate("serial.json", &["--parallelism", "1"]).status.code(), Some(0));
    assert_eq!(fx.evaluate("par.json", &["--parallelism", "8"]).status.code(), Some(0));
    assert_eq!(
        fs::read(fx.path("serial.json")).unwrap(),
        fs::read(fx.path("par.json")).unwrap()
    );
}

#[test]
fn sweep_row_matches_independent_evaluate() {
    let fx = Fixture::new(&common::noisy_corpus(20, 5));
    let sweep_out = fx.path("sweep.json");
    let run = roi_eval(&[
        "sweep",
        "--gt",
        p(&fx.path("gt.json")),
        "--pred",
        p(&fx.path("pred.json")),
        "--out",
        p(&sweep_out),
    ]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let sweep = fx.json("sweep.json");
    let rows = sweep["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 10);
    let taus: Vec<f64> = rows.iter().map(|r| r["tau"].as_f64().unwrap()).collect();
    assert!(taus.windows(2).all(|w| w[0] < w[1]));
    let tps: Vec<u64> = rows.iter().map(|r| r["tp"].as_u64().unwrap()).collect();
    assert!(tps.windows(2).all(|w| w[0] >= w[1]), "{tps:?}");

    assert_eq!(fx.evaluate("eval.json", &["--tau", "0.70"]).status.code(), Some(0));
    let corpus = &fx.json("eval.json")["corpus"];
    let row = rows.iter().find(|r| r["tau"] == 0.7).expect("0.70 row");
    for key in ["tp", "fp", "fn", "precision", "recall", "f1", "mean_roiq", "matched_pair_count"] {
        assert_eq!(row[key], corpus[key], "{key}");
    }
    let table = String::from_utf8(run.stdout).unwrap();
    assert_eq!(table.lines().filter(|l| l.trim_start().starts_with("0.")).count(), 10, "{table}");
}

#[test]
fn invalid_grid_exits_4() {
    let fx = Fixture::new(&common::identity_corpus(2, 6));
    let out = fx.path("sweep.json");
    let run = roi_eval(&[
        "sweep",
        "--gt",
        p(&fx.path("gt.json")),
        "--pred",
        p(&fx.path("pred.json")),
        "--grid-min",
        "0.9",
        "--grid-max",
        "0.5",
        "--out",
        p(&out),
    ]);
    assert_eq!(run.status.code(), Some(4));
    assert!(!out.exists());
}

#[test]
fn out_of_range_tau_exits_4() {
    let fx = Fixture::new(&common::identity_corpus(2, 7));
    let run = fx.evaluate("r.json", &["--tau", "1.5"]);
    assert_eq!(run.status.code(), Some(4));
    assert!(!fx.path("r.json").exists());
}

#[test]
fn schema_violation_in_predictions_exits_4() {
    let fx = Fixture::new(&common::identity_corpus(2, 8));
    fs::write(
        fx.path("pred.json"),
        r#"[{"report_id": "R000", "rois": [{"extraction_text": "x", "anatomic_region": 3}]}]"#,
    )
    .unwrap();
    let run = fx.evaluate("r.json", &[]);
    assert_eq!(run.status.code(), Some(4));
    assert!(!fx.path("r.json").exists());
}

#[test]
fn unknown_prediction_id_exits_4() {
    let fx = Fixture::new(&common::identity_corpus(2, 9));
    fs::write(fx.path("pred.json"), r#"[{"report_id": "ghost", "rois": []}]"#).unwrap();
    assert_eq!(fx.evaluate("r.json", &[]).status.code(), Some(4));
}

#[test]
fn missing_predictions_count_as_empty() {
    let fx = Fixture::new(&common::identity_corpus(3, 10));
    let preds: Vec<Value> = serde_json::from_str(&fs::read_to_string(fx.path("pred.json")).unwrap()).unwrap();
    fs::write(fx.path("pred.json"), serde_json::to_string(&preds[..2]).unwrap()).unwrap();
    assert_eq!(fx.evaluate("r.json", &[]).status.code(), Some(0));
    let report = fx.json("r.json");
    assert_eq!(report["config"]["missing_predictions"], serde_json::json!(["R002"]));
    assert!(report["corpus"]["fn"].as_u64().unwrap() >= 1);
    assert!(report["corpus"]["recall"].as_f64().unwrap() < 1.0);
}

#[test]
fn raw_text_without_backend_exits_4() {
    let fx = Fixture::new(&common::identity_corpus(1, 11));
    fs::write(fx.path("pred.json"), r#"[{"report_id": "R000", "report_text": "Nodule in the spleen."}]"#).unwrap();
    assert_eq!(fx.evaluate("r.json", &[]).status.code(), Some(4));
}

#[test]
fn rules_extraction_feeds_evaluation() {
    let fx = Fixture::new(&common::identity_corpus(1, 12));
    let gt = r#"[{"report_id": "A", "physical_region": 2, "report_text": "",
        "rois": ["[Left upper lung lobe] - [Nodule] - [8 mm] - [3.1] - [Ground-glass] - [] - [Increased FDG uptake] - [] - [] - [2] - []"]}]"#;
    fs::write(fx.path("gt.json"), gt).unwrap();
    fs::write(
        fx.path("raw.json"),
        r#"[{"report_id": "A", "report_text": "Ground-glass nodule in the left upper lung lobe with increased FDG uptake. No other findings"}]"#,
    )
    .unwrap();
    fs::write(
        fx.path("lexicon.json"),
        r#"{"left upper lung lobe": "anatomic_region", "nodule": "lesion_type",
            "ground-glass": "density", "increased FDG uptake": "fdg_uptake"}"#,
    )
    .unwrap();
    let extracted = fx.path("pred.json");
    let run = roi_eval(&[
        "extract",
        "--backend",
        "rules",
        "--lexicon",
        p(&fx.path("lexicon.json")),
        "--in",
        p(&fx.path("raw.json")),
        "--out",
        p(&extracted),
    ]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let preds = fx.json("pred.json");
    let rois = preds[0]["rois"].as_array().unwrap();
    assert_eq!(rois.len(), 1);
    assert_eq!(rois[0]["lesion_type"], "nodule");

    let run = fx.evaluate("r.json", &[]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let corpus = &fx.json("r.json")["corpus"];
    assert_eq!(corpus["tp"], 1);

    // raw text plus a backend on evaluate extracts inline
    fs::copy(fx.path("raw.json"), fx.path("pred.json")).unwrap();
    let inline = fx.evaluate("inline.json", &["--backend", "rules", "--lexicon", p(&fx.path("lexicon.json"))]);
    assert_eq!(inline.status.code(), Some(0), "{}", String::from_utf8_lossy(&inline.stderr));
    let report = fx.json("inline.json");
    assert_eq!(report["config"]["prediction_source"], "extracted");
    assert_eq!(report["corpus"], *corpus);
}

#[test]
fn parse_gt_reports_line_field_and_byte() {
    let dir = TempDir::new().unwrap();
    let lines = format!(
        "{}\n[Cecum] - [Mass] - [Unclear]\n{}\n",
        common::CECUM,
        common::annotation_line(["Liver", "Mass", "", "", "Mild"], 3).replace("- [3] -", "- [7] -"),
    );
    let file = dir.path().join("rois.txt");
    fs::write(&file, lines).unwrap();
    let run = roi_eval(&["parse-gt", "--in", p(&file)]);
    assert_eq!(run.status.code(), Some(4));
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.contains("line 2: field"), "{stdout}");
    assert!(stdout.contains("line 3: field 10, byte"), "{stdout}");
    assert!(stdout.contains("1 valid, 2 invalid"), "{stdout}");

    let good = dir.path().join("good.txt");
    fs::write(&good, format!("{}\n", common::CECUM)).unwrap();
    assert_eq!(roi_eval(&["parse-gt", "--in", p(&good)]).status.code(), Some(0));

    let json = dir.path().join("corpus.json");
    fs::write(&json, common::identity_corpus(4, 13).gt_json).unwrap();
    let run = roi_eval(&["parse-gt", "--in", p(&json)]);
    assert_eq!(run.status.code(), Some(0));
    assert!(String::from_utf8(run.stdout).unwrap().starts_with("ok: 4 reports"));
}

#[test]
fn split_prints_ranges() {
    let run = roi_eval(&["split", "--slices", "313"]);
    assert_eq!(run.status.code(), Some(0));
    let split: Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(split["head_neck"]["start"], 0);
    assert_eq!(split["head_neck"]["end"], 78);
    assert_eq!(split["chest"]["start"], 63);
    assert_eq!(split["chest"]["end"], 187);
    assert_eq!(split["abdomen_pelvis"]["start"], 172);
    assert_eq!(split["abdomen_pelvis"]["end"], 313);
    assert_eq!(split["chest_end_fraction"], 0.6);

    assert_eq!(roi_eval(&["split", "--slices", "20"]).status.code(), Some(4));
}

#[test]
fn graph_command_uses_sidecar_features() {
    let dir = TempDir::new().unwrap();
    let nodes = dir.path().join("nodes.json");
    fs::write(
        &nodes,
        r#"[{"bbox": [0, 0, 0, 2, 2, 2], "ct": {"shape": [2, 2, 2], "values": [2, 2, 2, 2, 2, 2, 2, 2]}},
            {"bbox": [3, 4.5, 0.5, 5, 5.5, 1.5]},
            {"bbox": [90, 90, 90, 91, 91, 91]}]"#,
    )
    .unwrap();
    let sidecar = dir.path().join("features.bin");
    let file = fs::File::create(&sidecar).unwrap();
    roi_eval::roigraph::write_feature_sidecar(
        file,
        &[vec![1.0, 0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0, 1.0], vec![0.0, 0.0, 0.0, 1.0]],
    )
    .unwrap();
    let out = dir.path().join("graph.json");
    let run = roi_eval(&[
        "graph",
        "--nodes",
        p(&nodes),
        "--features",
        p(&sidecar),
        "--tau-d",
        "10",
        "--tau-s",
        "0.9",
        "--out",
        p(&out),
    ]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let graph: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let edges = graph["edges"].as_array().unwrap();
    assert_eq!(edges.len(), 2);
    assert_eq!(edges[0]["i"], 0);
    assert_eq!(edges[0]["j"], 1);
    assert_eq!(edges[0]["spatial_features"], serde_json::json!([5.0, 0.6, 0.8, 0.0, 4.0]));
    assert_eq!(edges[0]["morphological_features"], serde_json::json!([0.5, 2.0, 0.0, 0.0, 0.0]));
    assert_eq!(edges[0]["concat_input"].as_array().unwrap().len(), 4 + 4 + 5 + 5);
    assert_eq!(graph["config"]["tau_d"], 10.0);

    let bad = roi_eval(&[
        "graph", "--nodes", p(&nodes), "--tau-d", "0", "--tau-s", "0.5", "--out", p(&out),
    ]);
    assert_eq!(bad.status.code(), Some(4));
}

#[test]
fn usage_errors_exit_4() {
    assert_eq!(roi_eval(&["evaluate", "--gt", "x"]).status.code(), Some(4));
    assert_eq!(roi_eval(&["--help"]).status.code(), Some(0));
}
