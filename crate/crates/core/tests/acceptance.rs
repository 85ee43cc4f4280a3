//! Acceptance suite. Every criterion runs against the mock backend and the
//! oracle verifier and prints one PASS or FAIL line.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{all_states, bfs, parse_state};
use see_core::eval::{Metric, UNEDITED as UNEDITED_LABEL};
use see_core::{
    attribute_edit_distance, normalize, render_leakage_prompt, spread, AttributeVocabulary, ConceptTree, Corpus,
    Dimension, Experiment, MetricSummary, RawGrid, RunOutput,
};

type Outcome = Result<(), String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rows<'a>(out: &'a RunOutput, label: &str, dimension: Dimension) -> Vec<&'a MetricSummary> {
    out.summaries
        .iter()
        .filter(|s| s.model_label == label && s.dimension == dimension && s.metric == Metric::Accuracy)
        .collect()
}

fn all_rows_equal(out: &RunOutput, label: &str, dimension: Dimension, group: &str, want: f64) -> Outcome {
    let rows: Vec<_> = rows(out, label, dimension).into_iter().filter(|s| s.group == group).collect();
    ensure(rows.len() == 4, || format!("{label} {dimension:?} {group}: {} verifier rows", rows.len()))?;
    for s in rows {
        ensure(s.mean == want && s.missing == 0, || {
            format!("{label} {dimension:?} {group} {}: {} (want {want})", s.verifier_id, s.mean)
        })?;
    }
    ensure(out.indeterminate.values().all(|&n| n == 0), || {
        format!("indeterminate verdicts: {:?}", out.indeterminate)
    })
}

fn corpus_exactness() -> Outcome {
    let start = Instant::now();
    let tree = ConceptTree::coco();
    let corpus = Corpus::build(&tree, &AttributeVocabulary::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(corpus.len() == 5056, || format!("{} records", corpus.len()))?;
    let mut per_object: BTreeMap<&str, [usize; 4]> = BTreeMap::new();
    for r in corpus.records() {
        per_object.entry(&r.object_id).or_default()[r.attributes.len()] += 1;
    }
    ensure(per_object.len() == 79, || format!("{} objects", per_object.len()))?;
    for (object, arity) in &per_object {
        ensure(*arity == [1, 9, 27, 27], || format!("{object}: arity counts {arity:?}"))?;
    }
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))
}

fn golden_erase_set() -> Outcome {
    let golden: Vec<&str> = include_str!("data/cup_erase_set.txt").lines().collect();
    let tree = ConceptTree::coco();
    let got: Vec<String> = tree
        .erase_list("cup")
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|n| n.name.clone())
        .collect();
    ensure(golden.len() == 64, || format!("golden file has {} lines", golden.len()))?;
    ensure(got == golden, || {
        let first = got.iter().zip(&golden).position(|(a, b)| a != b);
        format!("mismatch at {first:?}: got {} phrases", got.len())
    })?;
    let set = tree.erase_set("cup").map_err(|e| e.to_string())?;
    ensure(set.len() == 64, || format!("erase_set has {} ids", set.len()))
}

fn cup_variants() -> Result<Vec<see_core::PromptRecord>, String> {
    let corpus = Corpus::build(&ConceptTree::coco(), &AttributeVocabulary::default()).map_err(|e| e.to_string())?;
    Ok(corpus.records().iter().filter(|r| r.object_id.ends_with("/cup")).cloned().collect())
}

fn edit_distance_oracle() -> Outcome {
    let variants = cup_variants()?;
    ensure(variants.len() == 64, || format!("{} cup variants", variants.len()))?;
    let states: Vec<_> = variants.iter().map(|r| parse_state(&r.class_label, "cup")).collect();
    ensure(
        {
            let mut s = states.clone();
            s.sort();
            s.dedup();
            s.len() == 64 && all_states().iter().all(|x| states.contains(x))
        },
        || "cup variants do not cover every attribute state".into(),
    )?;
    for (a, sa) in variants.iter().zip(&states) {
        let reach = bfs(*sa);
        for (b, sb) in variants.iter().zip(&states) {
            let got = attribute_edit_distance(a, b).map_err(|e| e.to_string())?;
            ensure(got == reach[sb], || {
                format!("d({}, {}) = {got}, search says {}", a.class_label, b.class_label, reach[sb])
            })?;
        }
    }
    Ok(())
}

fn metric_axioms() -> Outcome {
    let variants = cup_variants()?;
    let n = variants.len();
    let mut d = vec![vec![0u32; n]; n];
    for i in 0..n {
        for j in 0..n {
            d[i][j] = attribute_edit_distance(&variants[i], &variants[j]).map_err(|e| e.to_string())?;
        }
    }
    for i in 0..n {
        for j in 0..n {
            ensure((d[i][j] == 0) == (i == j), || format!("identity fails at ({i}, {j})"))?;
            ensure(d[i][j] == d[j][i], || format!("symmetry fails at ({i}, {j})"))?;
            for k in 0..n {
                ensure(d[i][k] <= d[i][j] + d[j][k], || format!("triangle fails at ({i}, {j}, {k})"))?;
            }
        }
    }
    Ok(())
}

fn perfect_erasure() -> Outcome {
    let out = common::run(
        r#"
[cets.Perfect]
kind = "mock"
collateral_radius = 0

[erasure]
target = "cup"
expand = true
"#,
        Experiment::Neighbors,
    );
    all_rows_equal(&out, "Perfect", Dimension::NeighborErase, "all", 0.0)?;
    all_rows_equal(&out, "Perfect", Dimension::NeighborPreserve, "all", 100.0)?;
    all_rows_equal(&out, UNEDITED_LABEL, Dimension::NeighborErase, "all", 100.0)
}

fn collateral_localization() -> Outcome {
    let out = common::run(
        r#"
[cets.Collateral]
kind = "mock"
collateral_radius = 1
collateral_probability = 1.0
rng_seed = 11

[erasure]
target = "red car"

[corpus]
objects = ["bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat"]
"#,
        Experiment::Neighbors,
    );
    let target = parse_state("red car", "car");
    let reach = bfs(target);
    let preserve: Vec<_> = out
        .records
        .iter()
        .filter(|r| r.model_label == "Collateral" && r.dimension == Dimension::NeighborPreserve)
        .collect();
    ensure(preserve.len() == 8 * 64 - 1, || format!("{} preserve records", preserve.len()))?;
    for r in preserve {
        let suppressed = r.prompt_id.starts_with("vehicle/car") && reach[&parse_state(&r.concept, "car")] <= 1;
        for (v, verdicts) in &r.verdicts {
            ensure(verdicts.iter().all(|x| *x == Some(!suppressed)), || {
                format!("{} under {v}: {verdicts:?}, suppressed by search = {suppressed}", r.concept)
            })?;
        }
    }
    let mut saw_deficit = false;
    for s in rows(&out, "Collateral", Dimension::NeighborPreserve) {
        let Some(d) = s.group.strip_prefix("edit=") else { continue };
        let d: u32 = d.parse().map_err(|_| format!("bad group {}", s.group))?;
        if d >= 2 {
            ensure(s.mean == 100.0, || format!("{} {}: {}", s.group, s.verifier_id, s.mean))?;
        } else if s.mean < 100.0 {
            saw_deficit = true;
        }
    }
    ensure(saw_deficit, || "no deficit in the distance <= 1 bin".into())
}

fn evasion() -> Outcome {
    let base = r#"
[cets.Token]
kind = "mock"

[evasion]
superclasses = ["vehicle"]

[corpus]
objects = ["car", "truck", "bus", "cat", "dog"]
"#;
    let token_only = common::run(base, Experiment::Evasion);
    all_rows_equal(&token_only, "Token", Dimension::Evasion, "vehicle", 100.0)?;
    let full = common::run(&format!("{base}\n[erasure]\nexpand = true\n"), Experiment::Evasion);
    all_rows_equal(&full, "Token", Dimension::Evasion, "vehicle", 0.0)
}

fn leakage() -> Outcome {
    let vocab = AttributeVocabulary::default();
    let golden = include_str!("data/leakage_golden.tsv");
    let mut cases = 0;
    for line in golden.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let got = render_leakage_prompt(&vocab, f[0], f[1], f[2]).map_err(|e| e.to_string())?;
        ensure(got == f[3], || format!("rendered `{got}`, golden `{}`", f[3]))?;
        cases += 1;
    }
    ensure(cases == 20, || format!("{cases} golden cases"))?;

    let out = common::run(
        r#"
[cets.Transfer]
kind = "mock"
scope = "subtree"
transfer_attributes = true

[erasure]
target = "cup"
"#,
        Experiment::Leakage,
    );
    for r in &out.records {
        let expected = render_leakage_prompt(&vocab, &r.tags["attribute"], &r.target, &r.tags["preserve"])
            .map_err(|e| e.to_string())?;
        ensure(r.prompt == expected, || format!("prompt `{}` is not `{expected}`", r.prompt))?;
    }
    all_rows_equal(&out, "Transfer", Dimension::LeakagePreserve, "all", 100.0)?;
    all_rows_equal(&out, "Transfer", Dimension::LeakageTarget, "all", 0.0)?;
    all_rows_equal(&out, UNEDITED_LABEL, Dimension::LeakagePreserve, "all", 0.0)
}

fn spread_of(h: usize, w: usize, data: Vec<f64>) -> Result<f64, String> {
    let raw = RawGrid::new(h, w, data).map_err(|e| e.to_string())?;
    Ok(spread(&normalize("t", &raw).map_err(|e| e.to_string())?))
}

fn attention_spread() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    let uniform = spread_of(8, 8, vec![1.0; 64])?;
    ensure(close(uniform, 1.0), || format!("uniform: {uniform}"))?;
    let mut hot = vec![0.0; 64];
    hot[17] = 3.0;
    let one_hot = spread_of(8, 8, hot)?;
    ensure(close(one_hot, 0.0), || format!("one-hot: {one_hot}"))?;
    let half = spread_of(2, 2, vec![0.5, 0.5, 0.0, 0.0])?;
    ensure(close(half, 0.5), || format!("half mass: {half}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let (h, w) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let mut data: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        data[rng.gen_range(0..h * w)] += 0.1;
        let s = spread_of(h, w, data.clone())?;
        ensure((0.0..=1.0 + 1e-12).contains(&s), || format!("grid {case}: spread {s}"))?;
        let factor = rng.gen_range(1e-3..1e3);
        let scaled = spread_of(h, w, data.iter().map(|x| x * factor).collect())?;
        ensure(close(s, scaled), || format!("grid {case}: scaled {scaled} vs {s}"))?;
        data.shuffle(&mut rng);
        let permuted = spread_of(h, w, data)?;
        ensure(close(s, permuted), || format!("grid {case}: permuted {permuted} vs {s}"))?;
    }
    Ok(())
}

fn schedule() -> Outcome {
    let out = common::run(
        r#"
[cets.FirstOnly]
kind = "mock"
single_call_first_only = true

[erasure]
target = "cup"

[corpus]
objects = ["cup", "bowl", "fork"]
"#,
        Experiment::Schedule,
    );
    let mut curves: BTreeMap<(String, usize), BTreeMap<&str, f64>> = BTreeMap::new();
    for s in rows(&out, "FirstOnly", Dimension::ScheduleTarget) {
        let (arm, k) = s.group.split_once(":k=").ok_or_else(|| format!("bad group {}", s.group))?;
        let k: usize = k.parse().map_err(|_| format!("bad group {}", s.group))?;
        curves.entry((s.verifier_id.clone(), k)).or_default().insert(
            if arm == "progressive" { "progressive" } else { "all_at_once" },
            s.mean,
        );
    }
    ensure(curves.len() == 4 * 64, || format!("{} (verifier, k) points", curves.len()))?;
    let mut strict = 0;
    for ((v, k), arms) in &curves {
        let (p, a) = (arms["progressive"], arms["all_at_once"]);
        ensure(p <= a, || format!("{v} k={k}: progressive {p} > all-at-once {a}"))?;
        if p < a {
            strict += 1;
        }
    }
    ensure(strict > 0, || "curves never separate".into())
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    let mut files = Vec::new();
    for dir in &dirs {
        let toml = format!(
            r#"
[cets.Noisy]
kind = "mock"
collateral_radius = 2
collateral_probability = 0.4
rng_seed = 99

[erasure]
target = "red car"

[engine]
threads = 8

[output]
dir = "{}"
"#,
            dir.path().display()
        );
        let run = common::execute(&toml, Experiment::Neighbors);
        let read = |name: &str| std::fs::read(run.dir.join(name)).map_err(|e| e.to_string());
        files.push((read("records.jsonl")?, read("summary.csv")?));
    }
    ensure(!files[0].0.is_empty(), || "empty records.jsonl".into())?;
    ensure(files[0].0 == files[1].0, || "records.jsonl differs".into())?;
    ensure(files[0].1 == files[1].1, || "summary.csv differs".into())
}

fn scale_sanity() -> Outcome {
    let out = common::run(
        r#"
[cets.Perfect]
kind = "mock"

[corpus]
objects = ["cup", "bowl", "fork", "knife", "spoon", "car", "truck", "bus", "cat", "dog"]
"#,
        Experiment::Neighbors,
    );
    ensure(out.models.len() == 2, || format!("{} models", out.models.len()))?;
    for m in &out.models {
        let images = out.images.get(&m.handle.model_id).copied().unwrap_or(0);
        ensure(images == 640 * 4, || format!("{}: {images} images", m.label))?;
        let seeds: usize = out
            .records
            .iter()
            .filter(|r| r.model_id == m.handle.model_id)
            .map(|r| r.seeds.len())
            .sum();
        ensure(seeds == 2560, || format!("{}: {seeds} (prompt, seed) records", m.label))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("corpus exactness", corpus_exactness),
        ("golden erase set", golden_erase_set),
        ("edit-distance oracle equivalence", edit_distance_oracle),
        ("metric axioms", metric_axioms),
        ("perfect-erasure pipeline", perfect_erasure),
        ("collateral localization", collateral_localization),
        ("evasion property", evasion),
        ("leakage protocol", leakage),
        ("attention spread", attention_spread),
        ("schedule comparison", schedule),
        ("determinism", determinism),
        ("scale sanity", scale_sanity),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(()) => println!("PASS {name}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name}: {reason}");
            }
        }
    }
    println!("{} of 12 acceptance criteria passed", 12 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
