use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use halluguard::{write_bundle, Generation, TrajectoryBundle};
use tempfile::TempDir;

fn hg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_halluguard"))
        .args(args)
        .output()
        .expect("spawn halluguard")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(tokens: &[u32], text: &str, embed: [f32; 3], states: bool) -> Generation {
    let t = tokens.len();
    Generation {
        tokens: tokens.to_vec(),
        logprob: vec![-0.25; t],
        step_entropy: vec![0.5; t],
        step_lse: vec![1.5; t],
        text: text.into(),
        sent_embed: embed.to_vec(),
        step_states: states.then(|| (0..t * 3).map(|i| (i as f32 * 0.37).sin()).collect()),
    }
}

fn bundle(id: &str, label: u8, spread: f32) -> TrajectoryBundle {
    TrajectoryBundle {
        prompt_id: id.into(),
        prompt_text: "1+2=".into(),
        references: vec!["3".into()],
        generations: vec![
            gen(&[3, 13], "3", [1.0, 0.0, 0.0], false),
            gen(&[4, 13], "4", [1.0, spread, 0.0], false),
            gen(&[3, 3, 13], "33", [0.5, 0.0, spread], false),
        ],
        label: Some(label),
        rouge_to_ref: Some(if label == 1 { 0.0 } else { 1.0 }),
        embed_dim: 3,
        meta: Default::default(),
    }
}

fn write(dir: &Path, b: &TrajectoryBundle) -> PathBuf {
    let path = dir.join(format!("{}.hgb", b.prompt_id));
    let mut f = std::fs::File::create(&path).unwrap();
    write_bundle(b, &mut f).unwrap();
    path
}

fn three_bundles() -> (TempDir, Vec<PathBuf>) {
    let dir = tempfile::tempdir().unwrap();
    let paths = vec![
        write(dir.path(), &bundle("b", 1, 0.9)),
        write(dir.path(), &bundle("a", 0, 0.1)),
        write(dir.path(), &bundle("c", 1, 0.5)),
    ];
    (dir, paths)
}

#[test]
fn score_emits_one_row_per_bundle_in_id_order() {
    let (dir, _) = three_bundles();
    let o = hg(&["score", p(dir.path()), "--detectors", "perplexity,halluguard", "--no-clip"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "# seed=0");
    assert_eq!(lines[1], "prompt_id,label,rouge_to_ref,halluguard,perplexity");
    assert_eq!(lines.len(), 5);
    let ids: Vec<&str> = lines[2..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["a", "b", "c"]);
    // no step states, so the proxy amplification is unavailable
    assert!(lines[2..].iter().all(|l| l.split(',').nth(3) == Some("NA")), "{out}");
    // mean NLL of constant -0.25 logprobs
    let ppl: f64 = lines[2].split(',').nth(4).unwrap().parse().unwrap();
    assert!((ppl - 0.25).abs() < 1e-6);
}

#[test]
fn scoring_is_byte_identical_across_runs() {
    let (dir, _) = three_bundles();
    let a = hg(&["score", p(dir.path())]);
    let b = hg(&["score", p(dir.path())]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn halluguard_is_scored_when_states_are_present() {
    let dir = tempfile::tempdir().unwrap();
    let mut b = bundle("s", 1, 0.4);
    for g in &mut b.generations {
        let t = g.len();
        g.step_states = Some((0..t * 3).map(|i| 1.0 + (i as f32 * 0.71).cos()).collect());
    }
    let path = write(dir.path(), &b);
    let mut b2 = b.clone();
    b2.prompt_id = "t".into();
    write(dir.path(), &b2);
    let o = hg(&["score", p(&path), p(&dir.path().join("t.hgb")), "--detectors", "halluguard"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let row = out.lines().nth(2).unwrap();
    let v: f64 = row.rsplit(',').next().unwrap().parse().expect(row);
    assert!(v.is_finite());
}

fn write_csv(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn eval_on_separated_scores_gives_unit_auroc() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_csv(
        dir.path(),
        "s.csv",
        "# seed=0\nprompt_id,label,rouge_to_ref,perplexity\na,0,1,1.1\nb,1,0,3.0\nc,0,1,1.2\nd,1,0,2.5\n",
    );
    let report = dir.path().join("r.csv");
    let o = hg(&["eval", "--scores", p(&csv), "--report", p(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let row = out.lines().find(|l| l.starts_with("perplexity")).expect(&out);
    let auroc: f64 = row.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert_eq!(auroc, 1.0);
    let rep = std::fs::read_to_string(&report).unwrap();
    assert!(rep.lines().any(|l| l.starts_with("perplexity,1,1,")), "{rep}");
}

#[test]
fn eval_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let no_label = write_csv(dir.path(), "n.csv", "prompt_id,perplexity\na,1.0\nb,2.0\n");
    let o = hg(&["eval", "--scores", p(&no_label)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("label"), "{}", stderr(&o));

    let one_class = write_csv(dir.path(), "o.csv", "prompt_id,label,perplexity\na,1,1.0\nb,1,2.0\n");
    let o = hg(&["eval", "--scores", p(&one_class)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let o = hg(&["eval", "--scores", p(&dir.path().join("missing.csv"))]);
    assert_eq!(o.status.code(), Some(2));
}

fn bound_rows(args: &[&str]) -> Vec<Vec<f64>> {
    let mut full = vec!["simulate-bound"];
    full.extend_from_slice(args);
    let o = hg(&full);
    assert!(o.status.success(), "{}", stderr(&o));
    stdout(&o)
        .lines()
        .skip(2)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect()
}

#[test]
fn simulate_bound_defaults_and_edge_cases() {
    let rows = bound_rows(&[]);
    assert_eq!(rows.len(), 21);
    let t3 = &rows[3];
    assert_eq!(t3[0], 3.0);
    assert!((t3[3] - 8.25).abs() < 1e-9);
    assert!(rows.iter().all(|r| r[4] <= r[3] + 1e-12));

    let dir = tempfile::tempdir().unwrap();
    let params = write_csv(dir.path(), "p.cfg", "beta=0\n");
    let rows = bound_rows(&["--params", p(&params), "--t-max", "5"]);
    assert!(rows.iter().all(|r| r[2] == 0.0));

    let rows = bound_rows(&["--noise", "0", "--t-max", "6"]);
    assert!(rows.iter().all(|r| r[4] == r[3]));

    let bad = write_csv(dir.path(), "b.cfg", "beta=-1\n");
    let o = hg(&["simulate-bound", "--params", p(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("beta"), "{}", stderr(&o));
}

#[test]
fn help_shows_defaults_and_unknown_flags_fail() {
    let o = hg(&["score", "--help"]);
    assert!(o.status.success());
    let h = stdout(&o);
    for d in ["[default: 1e-3]", "[default: 3000]", "[default: 0.002]", "[default: 0.5]"] {
        assert!(h.contains(d), "missing {d} in\n{h}");
    }
    let h = stdout(&hg(&["tinylm", "sample", "--help"]));
    for d in ["[default: 0.5]", "[default: 0.95]", "[default: 10]"] {
        assert!(h.contains(d), "missing {d} in\n{h}");
    }
    let o = hg(&["score", "--frobnicate", "x.hgb"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_supplies_defaults() {
    let (dir, _) = three_bundles();
    let cfg = write_csv(dir.path(), "run.cfg", "detectors=perplexity\nno_clip=true\n");
    let o = hg(&["score", "--config", p(&cfg), p(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("prompt_id,label,rouge_to_ref,perplexity\n"));

    let bad = write_csv(dir.path(), "bad.cfg", "no_such_flag=1\n");
    let o = hg(&["score", "--config", p(&bad), p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bundle_validate_and_inspect() {
    let (dir, paths) = three_bundles();
    let o = hg(&["bundle", "validate", p(dir.path())]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with(": ok")).count(), 3);

    // the library writer refuses invalid bundles, so encode this one by hand
    let bad_path = dir.path().join("bad.hgb");
    std::fs::write(&bad_path, hand_encoded("bad", 1, 0.5)).unwrap();
    let o = hg(&["bundle", "validate", p(&bad_path)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("logprob > 0 at (gen 0, t 0)"), "{}", stdout(&o));

    let junk = write_csv(dir.path(), "junk.hgb", "XXXXnot a bundle");
    let o = hg(&["bundle", "validate", p(&junk)]);
    assert_eq!(o.status.code(), Some(2));

    let o = hg(&["bundle", "inspect", p(&paths[0])]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("prompt_id: b") && out.contains("K: 3") && out.contains("valid: true"), "{out}");
}

// Bundles from an external writer: encode the container by hand, field by
// field, and check the binary accepts it exactly as its own writer's output.

fn put_u32(buf: &mut Vec<u8>, x: u32) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

/// Greedy-style export: K identical generations, per-step states on the
/// first one only.
fn hand_encoded(id: &str, label: u8, lp0: f32) -> Vec<u8> {
    let (k, d) = (3u32, 2u32);
    let mut b = Vec::new();
    b.extend_from_slice(b"HGB1");
    put_u32(&mut b, 1);
    put_u32(&mut b, k);
    put_u32(&mut b, d);
    put_u32(&mut b, 1);
    b.push(1);
    b.push(label);
    put_f32s(&mut b, &[if label == 1 { 0.0 } else { 1.0 }]);
    put_str(&mut b, id);
    put_str(&mut b, "What is 2+2?");
    put_str(&mut b, "four");
    put_u32(&mut b, 1);
    put_str(&mut b, "layer");
    put_str(&mut b, "mid/post-ln");
    for g in 0..k {
        let t = 2u32;
        put_u32(&mut b, t);
        b.push(u8::from(g == 0));
        put_u32(&mut b, 1734);
        put_u32(&mut b, 2);
        put_f32s(&mut b, &[lp0, -0.05 * (1 + label) as f32]);
        put_f32s(&mut b, &[0.7, 0.2]);
        put_f32s(&mut b, &[3.5, 2.25]);
        put_str(&mut b, "four");
        put_f32s(&mut b, &[0.6, 0.8]);
        if g == 0 {
            put_f32s(&mut b, &[1.0, 0.0, 0.5, 0.5]);
        }
    }
    b
}

#[test]
fn hand_encoded_external_bundles_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    for (id, label) in [("ext-0", 0u8), ("ext-1", 1)] {
        let bytes = hand_encoded(id, label, -0.1);
        let decoded = halluguard::bundle::from_bytes(&bytes).expect("decodes");
        assert_eq!(decoded.generations[0].step_states.as_ref().map(Vec::len), Some(4));
        assert!(decoded.generations[1].step_states.is_none());
        assert_eq!(decoded.meta.get("layer").map(String::as_str), Some("mid/post-ln"));
        assert_eq!(halluguard::bundle::to_bytes(&decoded).unwrap(), bytes, "bit-exact re-encode");
        std::fs::write(dir.path().join(format!("{id}.hgb")), &bytes).unwrap();
    }
    let o = hg(&["bundle", "validate", p(dir.path())]);
    assert!(o.status.success(), "{}", stdout(&o));

    let o = hg(&["score", p(dir.path()), "--detectors", "lexical_consistency,perplexity", "--no-clip"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for row in out.lines().skip(2) {
        assert_eq!(row.split(',').nth(4), Some("1"), "{out}");
    }

    let mut cut = hand_encoded("ext-2", 0, -0.1);
    cut.truncate(cut.len() - 10);
    let path = dir.path().join("ext-2.hgb");
    std::fs::write(&path, cut).unwrap();
    let o = hg(&["bundle", "validate", p(&path)]);
    assert_eq!(o.status.code(), Some(2));
}

/// A briefly trained model shared by the tiny LM tests.
fn model() -> &'static (TempDir, PathBuf) {
    static M: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    M.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let o = hg(&["tinylm", "train", "--steps", "40", "-o", p(&path)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).starts_with("# seed=0 steps=40 loss="));
        (dir, path)
    })
}

#[test]
fn tinylm_training_is_reproducible() {
    let (dir, first) = model();
    let again = dir.path().join("again.ckpt");
    let o = hg(&["tinylm", "train", "--steps", "40", "-o", p(&again)]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(first).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn tinylm_sampled_bundles_validate_and_score() {
    let (_, m) = model();
    let out = tempfile::tempdir().unwrap();
    let o = hg(&[
        "tinylm", "dataset", "--model", p(m), "--n", "4", "-k", "3", "--corruption", "state-noise:0.75",
        "--out-dir", p(out.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = hg(&["bundle", "validate", p(out.path())]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().count(), 4);

    let o = hg(&["score", p(out.path()), "--detectors", "halluguard"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.lines().skip(2).all(|l| !l.ends_with(",NA")), "{s}");

    let o = hg(&["score", p(out.path()), "--detectors", "halluguard", "--amp-mode", "exact", "--model", p(m)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = hg(&["score", p(out.path()), "--amp-mode", "exact"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn rerank_with_zero_weight_ignores_the_detector() {
    let (_, m) = model();
    let run = |det: &str| {
        let o = hg(&[
            "tinylm", "rerank", "--model", p(m), "--n", "5", "--beam", "3", "--weight", "0", "--detector", det,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        // drop the comment line naming the detector
        stdout(&o).lines().skip(1).collect::<Vec<_>>().join("\n")
    };
    let a = run("halluguard");
    assert_eq!(a.lines().count(), 6);
    assert_eq!(a, run("perplexity"));
}
