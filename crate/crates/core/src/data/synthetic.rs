//! A small, fully deterministic instruction corpus of string-manipulation
//! tasks. Short enough for a byte-level model with a 32-token context.

use rand::Rng;

use super::InstructionRecord;
use crate::rng::{self, Domain};

const TASKS: [&str; 6] = ["reverse", "upper", "double", "sort", "spell", "count"];

fn word(rng: &mut impl Rng) -> String {
    let len = rng.random_range(3..=5);
    (0..len).map(|_| char::from(b'a' + rng.random_range(0..26u8))).collect()
}

fn answer(task: &str, w: &str) -> String {
    match task {
        "reverse" => w.chars().rev().collect(),
        "upper" => w.to_uppercase(),
        "double" => format!("{w}{w}"),
        "sort" => {
            let mut c: Vec<char> = w.chars().collect();
            c.sort_unstable();
            c.into_iter().collect()
        }
        "spell" => w.chars().map(String::from).collect::<Vec<_>>().join(" "),
        "count" => w.chars().count().to_string(),
        _ => unreachable!("unknown task {task}"),
    }
}

/// `n` records cycling through the task list, with random words drawn from
/// `seed`.
pub fn corpus(n: usize, seed: u64) -> Vec<InstructionRecord> {
    let mut rng = rng::stream(seed, Domain::Synthetic, 0, 0);
    (0..n)
        .map(|i| {
            let task = TASKS[i % TASKS.len()];
            let w = word(&mut rng);
            InstructionRecord {
                instruction: format!("{task}: {w}"),
                input: None,
                output: answer(task, &w),
            }
        })
        .collect()
}

pub fn to_jsonl(records: &[InstructionRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}
