//! Seeded generator of small templated C patch pairs, one weakness pattern
//! per CWE. Every fix inserts a guard in front of the unsafe statement.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{compute_code_diff, get_vuln_type, TypeList, VulnPair};

struct Pattern {
    cwe: &'static str,
    description: &'static str,
    params: &'static str,
    sink: &'static str,
    guard: &'static str,
}

const PATTERNS: [Pattern; 4] = [
    Pattern {
        cwe: "CWE-369",
        description: "Divide by zero when the divisor is zero.",
        params: "int {a}, int {b}",
        sink: "{r} = {a} / {b};",
        guard: "if ({b} == 0) return -1;",
    },
    Pattern {
        cwe: "CWE-476",
        description: "NULL pointer dereference of the input record.",
        params: "struct item *{p}, int {a}",
        sink: "{r} = {p}->len + {a};",
        guard: "if ({p} == NULL) return -1;",
    },
    Pattern {
        cwe: "CWE-787",
        description: "Out-of-bounds write past the end of the buffer.",
        params: "int *{buf}, int {i}, int {n}",
        sink: "{buf}[{i}] = {r};",
        guard: "if ({i} >= {n}) return -1;",
    },
    Pattern {
        cwe: "CWE-190",
        description: "Integer overflow in the size computation.",
        params: "int {a}, int {b}",
        sink: "{r} = {a} * {b};",
        guard: "if ({a} > LIMIT / {b}) return -1;",
    },
];

const FUNC_VERBS: [&str; 6] = ["read", "parse", "load", "scale", "copy", "update"];
const FUNC_NOUNS: [&str; 6] = ["header", "frame", "block", "entry", "packet", "table"];
const SCALARS: [&str; 6] = ["len", "count", "width", "step", "total", "offset"];
const FILLERS: [&str; 5] = [
    "{r} = {r} + 1;",
    "trace_value({r});",
    "{t} = {r} * 2;",
    "{t} = {t} + {r};",
    "stats_add({t});",
];

/// Type list of the generated corpus: its four CWEs plus `other`.
pub fn mini_type_list() -> TypeList {
    let names: Vec<String> = PATTERNS.iter().map(|p| p.cwe.to_string()).collect();
    let map: Vec<(String, usize)> = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    TypeList::new(names, map).expect("mini type list is valid")
}

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    vars.iter().fold(template.to_string(), |s, (k, v)| s.replace(&format!("{{{k}}}"), v))
}

/// `count` pairs cycling through the patterns, identical for equal seeds.
pub fn generate_mini_corpus(count: usize, seed: u64) -> Vec<VulnPair> {
    let types = mini_type_list();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let pat = &PATTERNS[i % PATTERNS.len()];
            let mut names = SCALARS.to_vec();
            names.shuffle(&mut rng);
            let (a, b, r, t) = (names[0], names[1], names[2], names[3]);
            let fname = format!(
                "{}_{}_{i}",
                FUNC_VERBS[rng.gen_range(0..FUNC_VERBS.len())],
                FUNC_NOUNS[rng.gen_range(0..FUNC_NOUNS.len())]
            );
            let vars = [("a", a), ("b", b), ("r", r), ("t", t), ("p", "rec"), ("buf", "buf"), ("i", "idx"), ("n", "size")];
            let mut before: Vec<String> = Vec::new();
            let mut after: Vec<String> = Vec::new();
            for _ in 0..rng.gen_range(1..=2) {
                before.push(fill(FILLERS[rng.gen_range(0..FILLERS.len())], &vars));
            }
            for _ in 0..rng.gen_range(1..=2) {
                after.push(fill(FILLERS[rng.gen_range(0..FILLERS.len())], &vars));
            }
            let render = |guarded: bool| {
                let mut s = format!("int {fname}({}) {{\n  int {r} = 0;\n  int {t} = 0;\n", fill(pat.params, &vars));
                for l in &before {
                    s.push_str(&format!("  {l}\n"));
                }
                if guarded {
                    s.push_str(&format!("  {}\n", fill(pat.guard, &vars)));
                }
                s.push_str(&format!("  {}\n", fill(pat.sink, &vars)));
                for l in &after {
                    s.push_str(&format!("  {l}\n"));
                }
                s.push_str(&format!("  return {r};\n}}\n"));
                s
            };
            let (pre, post) = (render(false), render(true));
            let mut pair = VulnPair {
                id: format!("mini-{i:03}"),
                code_diff: compute_code_diff(&pre, &post),
                pre_code: pre,
                post_code: post,
                cve_id: None,
                cwe_id: Some(pat.cwe.to_string()),
                cve_description: Some(pat.description.to_string()),
                commit_message: Some(format!("Add missing check in {fname}")),
                type_index: 0,
            };
            pair.type_index = get_vuln_type(&pair, &types);
            pair
        })
        .collect()
}
