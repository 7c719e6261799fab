//! Synthetic inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sitqa_core::embedding::{Embedding, QueryDatabase};

/// `n` random unit vectors of dimension `dim`, stored under ids `q00000..`.
pub fn random_db(n: usize, dim: usize, seed: u64) -> QueryDatabase {
    let mut db = QueryDatabase::new();
    for (i, e) in random_embeddings(n, dim, seed).into_iter().enumerate() {
        let id = format!("q{i:05}");
        db.insert(id.clone(), id, e).expect("dimensions agree");
    }
    db
}

pub fn random_embeddings(n: usize, dim: usize, seed: u64) -> Vec<Embedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Embedding::normalized((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect()
}

/// A reply holding a fenced JSON array of `n` datapoints.
pub fn json_reply(n: usize) -> String {
    let items: Vec<String> = (1..=n)
        .map(|i| {
            format!(
                r#"{{"query": "Is the kitchen ready for breakfast number {i}?", "states": [["stove", "OFF"], ["fridge", "CLOSED"], ["coffeemaker", "ON"]], "relations": [["mug", "ON", "kitchentable"]]}}"#
            )
        })
        .collect();
    format!("Here you go:\n```json\n[{}]\n```\n", items.join(",\n"))
}

/// The same content as one `[Question, [states], [relations]]` line per datapoint.
pub fn bracketed_reply(n: usize) -> String {
    (1..=n)
        .map(|i| {
            format!(
                "{i}. [Is the kitchen ready for breakfast number {i}?, [stove: ['Off'], fridge: ['Closed'], coffeemaker: ['On']], [mug on kitchentable]]"
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}
