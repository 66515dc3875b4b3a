use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn storyvid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_storyvid"))
        .args(args)
        .env_remove("PLANNER_ENDPOINT")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_MODEL: &str = r#"{"grid": {"t": 4, "h": 4, "w": 4},
  "model": {"d_model": 8, "n_blocks": 2, "n_heads": 2, "d_ff": 16, "d_latent": 2, "max_seg_len": 8, "hash_vocab": 64},
  "train": {"steps": 5, "learning_rate": 0.1}}"#;

#[test]
fn lint_frame_plan_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let out = storyvid(&["lint", s(&fixture("coral_reef_frame_plan.txt")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["kind"], "frame");
    assert_eq!(report["errors"].as_array().unwrap().len(), 0);
    assert!(stderr(&out).contains("config"));
}

#[test]
fn lint_story_plan_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path();
    let out = storyvid(&["lint", s(&fixture("mermaid_story_plan.txt")), "--out", s(o)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"story\""));

    let bad_box = std::fs::read_to_string(fixture("teddy_frame_plan.txt"))
        .unwrap()
        .replace("[0.0, 0.8, 0.2, 1.0]]\nFrame_2", "[0.0, 0.8, 1.4, 1.0]]\nFrame_2");
    let path = o.join("bad.txt");
    std::fs::write(&path, bad_box).unwrap();
    let out = storyvid(&["lint", s(&path), "--out", s(o)]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("bbox_bounds"));

    std::fs::write(&path, "not a plan").unwrap();
    assert_eq!(storyvid(&["lint", s(&path), "--out", s(o)]).status.code(), Some(2));
    assert_eq!(
        storyvid(&["lint", s(&o.join("missing.txt")), "--out", s(o)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn plan_without_topic_is_a_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    let replay = dir.path().join("replay");
    std::fs::create_dir(&replay).unwrap();
    std::fs::copy(fixture("mermaid_story_plan.txt"), replay.join("01.txt")).unwrap();
    let out = storyvid(&["plan", "--replay", s(&replay), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("slot {topic} not provided"), "{}", stderr(&out));
}

#[test]
fn plan_with_replay_backend() {
    let dir = tempfile::tempdir().unwrap();
    let replay = dir.path().join("replay");
    std::fs::create_dir(&replay).unwrap();
    std::fs::write(replay.join("01.txt"), "garbage").unwrap();
    std::fs::copy(fixture("coral_reef_frame_plan.txt"), replay.join("02.txt")).unwrap();
    let o = dir.path().join("o");
    let out = storyvid(&[
        "plan",
        "--template",
        "fine_grained",
        "--story",
        s(&fixture("mermaid_story_plan.txt")),
        "--scene",
        "1",
        "--replay",
        s(&replay),
        "--out",
        s(&o),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stderr(&out).contains("after 2 attempt"));
    let text = std::fs::read_to_string(o.join("plan.txt")).unwrap();
    let plan = storyvid::plan::parse_frame_plan(&text).unwrap();
    assert_eq!(plan.key_frames.len(), 6);

    let story_out = dir.path().join("story");
    let replay2 = dir.path().join("replay2");
    std::fs::create_dir(&replay2).unwrap();
    std::fs::copy(fixture("mermaid_story_plan.txt"), replay2.join("01.txt")).unwrap();
    let out = storyvid(&[
        "plan",
        "--topic",
        "Mermaid's Adventure",
        "--replay",
        s(&replay2),
        "--out",
        s(&story_out),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let story =
        storyvid::plan::parse_high_level_plan(&std::fs::read_to_string(story_out.join("plan.txt")).unwrap()).unwrap();
    assert_eq!(story.scenes.len(), 6);
}

#[test]
fn plan_without_backend_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = storyvid(&["plan", "--topic", "x", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("PLANNER_ENDPOINT"));
}

fn naive_two_region_pgm() -> Vec<u8> {
    // Text 0,1 -> condition 0, text 2,3 -> condition 1, visual 4,5 in 0, 6,7 in 1.
    let cond = |i: usize| if i < 2 || i == 4 || i == 5 { 0 } else { 1 };
    let text = |i: usize| i < 4;
    let mut out = b"P5\n8 8\n255\n".to_vec();
    for q in 0..8 {
        for k in 0..8 {
            let ok = match (text(q), text(k)) {
                (false, false) => true,
                _ => cond(q) == cond(k),
            };
            out.push(if ok { 255 } else { 0 });
        }
    }
    out
}

#[test]
fn mask_then_export_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path();
    let map = o.join("regions.json");
    std::fs::write(
        &map,
        r#"{"grid": {"t": 1, "h": 2, "w": 2}, "n_conditions": 2, "membership": [[0], [0], [1], [1]]}"#,
    )
    .unwrap();
    let out = storyvid(&["mask", s(&map), "--mode", "sr3a", "--segments", "2,2", "--out", s(o)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let out = storyvid(&["export-mask", s(&o.join("mask.bin")), "--format", "pgm", "--out", s(o)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(std::fs::read(o.join("mask.pgm")).unwrap(), naive_two_region_pgm());

    let out = storyvid(&[
        "export-mask",
        s(&o.join("mask.bin")),
        "--format",
        "bitset",
        "--out",
        s(o),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        std::fs::read(o.join("mask_export.bin")).unwrap(),
        std::fs::read(o.join("mask.bin")).unwrap()
    );

    let out = storyvid(&["mask", s(&map), "--segments", "2,2,2", "--out", s(o)]);
    assert_eq!(out.status.code(), Some(2));
}

fn pipeline(o: &Path) {
    let cfg = o.join("config.json");
    std::fs::write(&cfg, TINY_MODEL).unwrap();
    let c = s(&cfg);
    let run = |args: &[&str]| {
        let mut full = vec!["--config", c, "--seed", "11", "--out", s(o)];
        full.extend_from_slice(args);
        let out = storyvid(&full);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", stderr(&out));
        out
    };
    run(&["interp", s(&fixture("teddy_frame_plan.txt"))]);
    run(&["raster", s(&o.join("latent_plan.json"))]);
    run(&[
        "mask",
        s(&o.join("region_map.json")),
        "--plan",
        s(&o.join("latent_plan.json")),
    ]);
    run(&["export-mask", s(&o.join("mask.bin"))]);
    run(&["train-motion", "--synthetic", "2", "--steps", "3"]);
    run(&[
        "train-subject",
        "--caption",
        "a teddy bear",
        "--model",
        s(&o.join("model")),
        "--steps",
        "3",
    ]);
    run(&[
        "generate",
        s(&o.join("latent_plan.json")),
        "--model",
        s(&o.join("model")),
        "--motion",
        &format!("hiking={}", s(&o.join("motion_temporal.lora"))),
        "--subject",
        &format!("Teddy={}", s(&o.join("subject.lora"))),
    ]);
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "config.json" {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_pipeline_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let names: Vec<_> = ta.iter().map(|(p, _)| p.to_str().unwrap().to_string()).collect();
    for want in [
        "latent_plan.json",
        "region_map.json",
        "mask.bin",
        "mask.pgm",
        "motion_temporal.lora",
        "subject.lora",
        "sample.json",
    ] {
        assert!(names.iter().any(|n| n == want), "missing {want}: {names:?}");
    }
    assert_eq!(ta, tb);
}

#[test]
fn retrieve_writes_selected_clips() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path();
    let corpus = o.join("corpus.jsonl");
    let tracks = o.join("tracks.jsonl");
    std::fs::write(
        &corpus,
        concat!(
            r#"{"id":"a","caption":"a person is running in a park","duration_s":5.0,"n_frames":120,"width":640,"height":480}"#, "\n",
            r#"{"id":"b","caption":"a cat sleeping","duration_s":5.0,"n_frames":120,"width":640,"height":480}"#, "\n",
            r#"{"id":"c","caption":"person is running fast","duration_s":1.0,"n_frames":20,"width":640,"height":480}"#, "\n",
        ),
    )
    .unwrap();
    std::fs::write(
        &tracks,
        concat!(
            r#"{"record_id":"a","track_id":0,"frame_start":0,"frame_end":60}"#,
            "\n",
            r#"{"record_id":"c","track_id":0,"frame_start":0,"frame_end":19}"#,
            "\n",
        ),
    )
    .unwrap();
    let out = storyvid(&[
        "retrieve",
        "--corpus",
        s(&corpus),
        "--tracks",
        s(&tracks),
        "--motion",
        "running",
        "--out",
        s(o),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = std::fs::read_to_string(o.join("retrieved.jsonl")).unwrap();
    let ids: Vec<String> = text
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["clip"]["record_id"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(ids, vec!["a".to_string()]);
}

#[test]
fn usage_errors() {
    assert_eq!(storyvid(&[]).status.code(), Some(2));
    assert_eq!(storyvid(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(storyvid(&["--help"]).status.code(), Some(0));
}
