#![allow(dead_code)]

use std::collections::{HashMap, VecDeque};

use see_core::report::RunArtifacts;
use see_core::{build_harness, parse_config, Experiment, RunOutput};

pub const SIZES: [&str; 3] = ["small", "medium", "large"];
pub const COLORS: [&str; 3] = ["red", "green", "blue"];
pub const MATERIALS: [&str; 3] = ["wooden", "rubber", "metallic"];

/// Slot contents of a variant, indices into the lists above.
pub type State = [Option<usize>; 3];

fn slots() -> [&'static [&'static str; 3]; 3] {
    [&SIZES, &COLORS, &MATERIALS]
}

/// Reads the attribute words in front of `object` without consulting the
/// library's vocabulary.
pub fn parse_state(phrase: &str, object: &str) -> State {
    let prefix = phrase.strip_suffix(object).expect("phrase ends with its object").trim();
    let mut state = [None; 3];
    for word in prefix.split_whitespace() {
        let (slot, idx) = slots()
            .iter()
            .enumerate()
            .find_map(|(s, values)| values.iter().position(|v| *v == word).map(|i| (s, i)))
            .unwrap_or_else(|| panic!("`{word}` is not an attribute"));
        assert!(state[slot].is_none(), "slot filled twice in `{phrase}`");
        state[slot] = Some(idx);
    }
    state
}

pub fn all_states() -> Vec<State> {
    let opts: Vec<Option<usize>> = std::iter::once(None).chain((0..3).map(Some)).collect();
    let mut out = Vec::new();
    for &a in &opts {
        for &b in &opts {
            for &c in &opts {
                out.push([a, b, c]);
            }
        }
    }
    out
}

/// Single edits: add an attribute to an empty slot, delete one, or
/// substitute one value for another.
fn moves(s: State) -> Vec<State> {
    let mut out = Vec::new();
    for slot in 0..3 {
        let mut options: Vec<Option<usize>> = (0..3).map(Some).collect();
        options.push(None);
        for o in options {
            if o != s[slot] {
                let mut next = s;
                next[slot] = o;
                out.push(next);
            }
        }
    }
    out
}

/// Shortest edit sequence lengths from `from` to every reachable state.
pub fn bfs(from: State) -> HashMap<State, u32> {
    let mut dist = HashMap::from([(from, 0)]);
    let mut queue = VecDeque::from([from]);
    while let Some(s) = queue.pop_front() {
        let d = dist[&s];
        for n in moves(s) {
            dist.entry(n).or_insert_with(|| {
                queue.push_back(n);
                d + 1
            });
        }
    }
    dist
}

pub fn run(toml: &str, experiment: Experiment) -> RunOutput {
    let config = parse_config(toml).expect("config parses");
    build_harness(config, None).expect("harness builds").run(experiment).expect("run succeeds")
}

pub fn execute(toml: &str, experiment: Experiment) -> RunArtifacts {
    let config = parse_config(toml).expect("config parses");
    see_core::report::execute(config, experiment).expect("run succeeds")
}
