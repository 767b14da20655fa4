use std::fs;
use std::path::Path;

use vlnmp::alignment::CandidateSetRecord;
use vlnmp::instruction::{MultiModalInstruction, Setting, TextInstruction};
use vlnmp::io::{read_jsonl, DatasetError};
use vlnmp::pipeline::{
    FixtureDetector, MissReason, MissRecord, Pipeline, PipelineConfig, PipelineError,
};

const INSTRUCTIONS: &str = r#"{"id":"r1","tokens":["pass","the","chair","then","stop","at","the","table"],"phrases":[{"text":"the chair","start":2,"end":3},{"text":"the table","start":7,"end":8}],"path":["n0","n1","n2","n3","n4","n5"],"scan":"house1"}
{"id":"r0","tokens":["walk","ahead"],"phrases":[],"path":["m0","m1"]}
{"id":"r2","tokens":["find","the","lamp","and","the","rug"],"phrases":[{"text":"the lamp","start":2,"end":3},{"text":"the rug","start":5,"end":6}],"path":["k0","k1"]}
"#;

const CANDIDATES: &str = r#"{"instruction_id":"r1","phrase_index":0,"candidates":[{"score":0.9,"image_ref":"chair_late.jpg","bbox":[0,0,1,1],"image_width":100000,"image_height":100000,"path_position":5},{"score":0.6,"image_ref":"chair_early.jpg","bbox":[0,0,1,1],"image_width":100000,"image_height":100000,"path_position":1}]}
{"instruction_id":"r1","phrase_index":1,"candidates":[{"score":0.9,"image_ref":"table.jpg","bbox":[0,0,1,1],"image_width":100000,"image_height":100000,"path_position":2}]}
{"instruction_id":"r2","phrase_index":1,"candidates":[{"score":0.7,"image_ref":"rug.jpg","bbox":[10,10,40,30],"image_width":640,"image_height":480,"path_position":1}]}
"#;

fn load(dir: &Path) -> (Vec<TextInstruction>, FixtureDetector) {
    fs::write(dir.join("instructions.jsonl"), INSTRUCTIONS).unwrap();
    fs::write(dir.join("candidates.jsonl"), CANDIDATES).unwrap();
    let instrs = read_jsonl(dir.join("instructions.jsonl")).unwrap();
    let cands: Vec<CandidateSetRecord> = read_jsonl(dir.join("candidates.jsonl")).unwrap();
    (instrs, FixtureDetector::new(cands))
}

#[test]
fn writes_all_settings_sorted_by_id() {
    let tmp = tempfile::tempdir().unwrap();
    let (instrs, det) = load(tmp.path());
    let out_dir = tmp.path().join("out");
    let out = Pipeline::new(&det, PipelineConfig::default())
        .run(&instrs)
        .unwrap();
    out.write_to(
        &out_dir,
        &[Setting::Aligned, Setting::Related, Setting::Terminal],
    )
    .unwrap();

    let aligned: Vec<MultiModalInstruction> = read_jsonl(out_dir.join("aligned.jsonl")).unwrap();
    let related: Vec<MultiModalInstruction> = read_jsonl(out_dir.join("related.jsonl")).unwrap();
    let terminal: Vec<MultiModalInstruction> = read_jsonl(out_dir.join("terminal.jsonl")).unwrap();
    let misses: Vec<MissRecord> = read_jsonl(out_dir.join("misses.jsonl")).unwrap();
    assert_eq!(aligned, out.aligned);
    let order: Vec<_> = aligned.iter().map(|m| m.id()).collect();
    assert_eq!(order, ["r0", "r1", "r2"]);

    // r0 has no phrases, so it stays text-only everywhere
    assert_eq!(aligned[0].setting(), Setting::TextOnly);
    assert_eq!(terminal[0].setting(), Setting::TextOnly);

    let refs = |m: &MultiModalInstruction| {
        m.prompts()
            .iter()
            .map(|p| p.image_ref.clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(refs(&aligned[1]), ["chair_early.jpg", "table.jpg"]);
    assert_eq!(refs(&related[1]), ["chair_late.jpg", "table.jpg"]);
    assert_eq!(refs(&terminal[1]), ["table.jpg"]);
    assert!((aligned[1].scores().unwrap().s_all - 1.375).abs() < 1e-9);
    assert!((related[1].scores().unwrap().s_all + 0.55).abs() < 1e-9);

    // r2 only grounds its second phrase
    assert_eq!(aligned[2].prompts().len(), 1);
    assert_eq!(aligned[2].prompts()[0].phrase_index, 1);
    let reasons: Vec<_> = misses
        .iter()
        .map(|m| (m.instruction_id.as_str(), m.phrase_index, m.reason))
        .collect();
    assert_eq!(
        reasons,
        [
            ("r0", None, MissReason::NoPhrases),
            ("r2", Some(0), MissReason::NoCandidates)
        ]
    );

    // unknown input fields survive into the output
    let raw = fs::read_to_string(out_dir.join("aligned.jsonl")).unwrap();
    assert!(raw.lines().nth(1).unwrap().contains(r#""scan":"house1""#));
}

#[test]
fn only_requested_settings_are_written() {
    let tmp = tempfile::tempdir().unwrap();
    let (instrs, det) = load(tmp.path());
    let out_dir = tmp.path().join("out");
    let out = Pipeline::new(&det, PipelineConfig::default())
        .run(&instrs)
        .unwrap();
    out.write_to(&out_dir, &[Setting::Related]).unwrap();
    assert!(out_dir.join("related.jsonl").exists());
    assert!(out_dir.join("misses.jsonl").exists());
    assert!(!out_dir.join("aligned.jsonl").exists());
}

#[test]
fn malformed_candidate_file_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("candidates.jsonl");
    fs::write(
        &path,
        r#"{"instruction_id":"r1","phrase_index":0,"candidates":[{"score":0.9,"image_ref":"x","bbox":[90,0,20,10],"image_width":100,"image_height":100,"path_position":0}]}"#,
    )
    .unwrap();
    let err = read_jsonl::<CandidateSetRecord>(&path).unwrap_err();
    assert!(matches!(err, DatasetError::Parse { line: 1, .. }), "{err}");
}

#[test]
fn invalid_config_is_rejected_before_work() {
    let det = FixtureDetector::default();
    let cfg = PipelineConfig {
        gamma: 1.5,
        ..PipelineConfig::default()
    };
    assert!(matches!(
        Pipeline::new(&det, cfg).run(&[]),
        Err(PipelineError::InvalidConfig(_))
    ));
}
