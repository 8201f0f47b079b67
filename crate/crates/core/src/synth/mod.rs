//! Procedural attribute-object world: scenes, renders, captions and
//! composed-retrieval benchmarks with exhaustive ground truth.

mod benchmark;
mod caption;
mod render;
mod scene;

pub use benchmark::{
    build_cir_benchmark, read_corpus, read_jsonl, targets_for, validate_records, write_corpus, write_jsonl,
    BenchmarkConfig, BenchmarkRecord, CirBenchmark, CorpusItem, GalleryEntry, Mutation,
};
pub use caption::{caption, fill, CAPTION_TEMPLATES, FILLER_LINES};
pub use render::render;
pub use scene::{Background, Color, Object, Scene, Size, SCENE_COUNT};

use crate::text::split_words;

/// Every word the generators can emit, in a stable order.
pub fn world_words() -> Vec<String> {
    let mut words = Vec::new();
    let mut push = |text: &str| {
        for w in split_words(text) {
            if !words.contains(&w) {
                words.push(w);
            }
        }
    };
    for t in CAPTION_TEMPLATES {
        push(t);
    }
    for w in Object::ALL.iter().map(|o| o.word()) {
        push(w);
    }
    for w in Color::ALL.iter().map(|c| c.word()) {
        push(w);
    }
    for w in Size::ALL.iter().map(|s| s.word()) {
        push(w);
    }
    for w in Background::ALL.iter().map(|b| b.word()) {
        push(w);
    }
    let s = Scene::from_index(0);
    for m in Mutation::all_for(&s) {
        push(&m.condition(&s));
    }
    for l in FILLER_LINES {
        push(l);
    }
    words.retain(|w| !w.contains(['{', '}']) && !["size", "color", "object"].contains(&w.as_str()));
    words
}
