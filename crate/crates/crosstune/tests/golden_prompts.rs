//! Rendered prompts are frozen as files under tests/golden; any drift in
//! assembly or rendering shows up as a diff here.
//!
//! To refresh after an intentional template change:
//! `GOLDEN_REGEN=1 cargo test -p crosstune --test golden_prompts`
//! (the run fails on purpose so a regeneration never passes CI).

mod common;

use common::{golden_cases, golden_dir};

#[test]
fn rendered_prompts_match_golden_files() {
    let dir = golden_dir();
    let cases = golden_cases();

    if std::env::var_os("GOLDEN_REGEN").is_some() {
        std::fs::create_dir_all(&dir).unwrap();
        for (name, text) in &cases {
            std::fs::write(dir.join(name), text).unwrap();
        }
        panic!("regenerated {} golden files; rerun without GOLDEN_REGEN", cases.len());
    }

    let mut diffs = Vec::new();
    for (name, rendered) in &cases {
        let path = dir.join(name);
        match std::fs::read_to_string(&path) {
            Ok(frozen) if &frozen == rendered => {}
            Ok(frozen) => {
                let first_diff = frozen
                    .lines()
                    .zip(rendered.lines())
                    .position(|(a, b)| a != b)
                    .map(|i| format!("first differing line {}", i + 1))
                    .unwrap_or_else(|| "one is a prefix of the other".into());
                diffs.push(format!("{name}: differs from rendered output ({first_diff})"));
            }
            Err(e) => diffs.push(format!("{name}: {e}")),
        }
    }
    assert!(diffs.is_empty(), "golden diffs:\n{}", diffs.join("\n"));
}

#[test]
fn golden_set_covers_every_mapping_flavor() {
    let names: Vec<&str> = golden_cases().iter().map(|(n, _)| *n).collect();
    assert_eq!(
        names,
        [
            "eval_0shot.txt",
            "eval_2shot.txt",
            "train_2shot_target.txt",
            "symbol_2shot_target.txt",
            "rotated_2shot_target.txt",
        ]
    );
    // No stray files: everything in tests/golden is a case this suite checks.
    let mut on_disk: Vec<String> = std::fs::read_dir(golden_dir())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    on_disk.sort();
    let mut expected: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    expected.sort();
    assert_eq!(on_disk, expected);
}
