use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::caption::{fill, CAPTION_TEMPLATES, FILLER_LINES};
use super::scene::{Background, Color, Object, Scene};
use crate::error::{Error, Result};

/// One composed-retrieval query with its full ground-truth set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub query_id: String,
    pub reference_id: String,
    pub condition: String,
    pub targets: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub item_id: String,
    pub scene: Scene,
}

/// A single attribute edit applied to a reference scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    Color(Color),
    Object(Object),
    Background(Background),
}

impl Mutation {
    pub fn apply(self, scene: &Scene) -> Scene {
        match self {
            Mutation::Color(c) => Scene { color: c, ..*scene },
            Mutation::Object(o) => Scene { object: o, ..*scene },
            Mutation::Background(b) => Scene {
                background: b,
                ..*scene
            },
        }
    }

    pub fn condition(self, reference: &Scene) -> String {
        match self {
            Mutation::Color(c) => format!("is {c} instead"),
            Mutation::Object(o) => format!("change the {} to a {o}", reference.object),
            Mutation::Background(b) => format!("on a {b} background"),
        }
    }

    /// Recovers the edit that produced `condition` from `reference`.
    pub fn parse(reference: &Scene, condition: &str) -> Result<Mutation> {
        Self::all_for(reference)
            .into_iter()
            .find(|m| m.condition(reference) == condition)
            .ok_or_else(|| Error::Bench(format!("condition {condition:?} is not an edit of {}", reference.id())))
    }

    /// Every mutation that changes `scene`.
    pub fn all_for(scene: &Scene) -> Vec<Mutation> {
        let colors = Color::ALL
            .iter()
            .filter(|&&c| c != scene.color)
            .map(|&c| Mutation::Color(c));
        let objects = Object::ALL
            .iter()
            .filter(|&&o| o != scene.object)
            .map(|&o| Mutation::Object(o));
        let bgs = Background::ALL
            .iter()
            .filter(|&&b| b != scene.background)
            .map(|&b| Mutation::Background(b));
        colors.chain(objects).chain(bgs).collect()
    }
}

/// A caption with the scene it describes, when there is one.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub caption: String,
    pub scene: Option<Scene>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub dev_queries: usize,
    pub test_queries: usize,
    /// Fraction of scenes whose captions form the training corpus.
    pub train_fraction: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dev_queries: 100,
            test_queries: 200,
            train_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CirBenchmark {
    pub gallery: Vec<GalleryEntry>,
    pub dev: Vec<BenchmarkRecord>,
    pub test: Vec<BenchmarkRecord>,
    pub corpus: Vec<CorpusItem>,
    pub train_scenes: Vec<Scene>,
}

/// Scenes matching `target` on everything except size.
pub fn targets_for(target: &Scene) -> Vec<Scene> {
    Scene::all()
        .into_iter()
        .filter(|s| s.object == target.object && s.color == target.color && s.background == target.background)
        .collect()
}

/// Builds the gallery, dev/test queries and a text corpus from disjoint
/// scene subsets.
///
/// Queries take their reference from the scenes held out of the corpus. The
/// mutated attribute is fixed and `size` is left free, so every query has
/// exactly two positives.
pub fn build_cir_benchmark(cfg: &BenchmarkConfig) -> Result<CirBenchmark> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scenes = Scene::all();
    scenes.shuffle(&mut rng);
    let n_train = ((scenes.len() as f64) * cfg.train_fraction).round() as usize;
    if n_train == 0 || n_train >= scenes.len() {
        return Err(Error::Bench(format!(
            "train fraction {} leaves an empty split",
            cfg.train_fraction
        )));
    }
    let (train, eval) = scenes.split_at(n_train);
    let mut train_scenes = train.to_vec();
    train_scenes.sort();
    let mut eval_scenes = eval.to_vec();
    eval_scenes.sort();

    let mut candidates: Vec<(Scene, Mutation)> = eval_scenes
        .iter()
        .flat_map(|s| Mutation::all_for(s).into_iter().map(move |m| (*s, m)))
        .collect();
    if cfg.dev_queries + cfg.test_queries > candidates.len() {
        return Err(Error::Bench(format!(
            "asked for {} queries but only {} distinct ones exist",
            cfg.dev_queries + cfg.test_queries,
            candidates.len()
        )));
    }
    candidates.shuffle(&mut rng);
    let make = |prefix: &str, picked: &[(Scene, Mutation)]| -> Vec<BenchmarkRecord> {
        picked
            .iter()
            .enumerate()
            .map(|(i, (reference, m))| {
                let target = m.apply(reference);
                BenchmarkRecord {
                    query_id: format!("{prefix}-{i:04}"),
                    reference_id: reference.id(),
                    condition: m.condition(reference),
                    targets: targets_for(&target).iter().map(Scene::id).collect(),
                }
            })
            .collect()
    };
    let dev = make("dev", &candidates[..cfg.dev_queries]);
    let test = make("test", &candidates[cfg.dev_queries..cfg.dev_queries + cfg.test_queries]);

    let mut corpus: Vec<CorpusItem> = train_scenes
        .iter()
        .flat_map(|s| {
            CAPTION_TEMPLATES.iter().map(move |t| CorpusItem {
                caption: fill(t, s),
                scene: Some(*s),
            })
        })
        .collect();
    corpus.extend(FILLER_LINES.iter().map(|l| CorpusItem {
        caption: (*l).to_string(),
        scene: None,
    }));

    Ok(CirBenchmark {
        gallery: Scene::all()
            .into_iter()
            .map(|scene| GalleryEntry {
                item_id: scene.id(),
                scene,
            })
            .collect(),
        dev,
        test,
        corpus,
        train_scenes,
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    Ok(rows)
}

pub fn write_corpus(path: &Path, captions: &[String]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for c in captions {
        writeln!(f, "{c}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::to_string)
        .filter(|l| !l.trim().is_empty())
        .collect())
}

/// Sanity checks a benchmark against its gallery.
pub fn validate_records(records: &[BenchmarkRecord], gallery: &[GalleryEntry]) -> Result<()> {
    let ids: BTreeSet<&str> = gallery.iter().map(|g| g.item_id.as_str()).collect();
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.query_id.as_str()) {
            return Err(Error::Bench(format!("duplicate query id {}", r.query_id)));
        }
        if r.targets.is_empty() {
            return Err(Error::Bench(format!("query {} has no targets", r.query_id)));
        }
        if r.targets.contains(&r.reference_id) {
            return Err(Error::Bench(format!(
                "query {} lists its reference as a target",
                r.query_id
            )));
        }
        for id in r.targets.iter().chain(std::iter::once(&r.reference_id)) {
            if !ids.contains(id.as_str()) {
                return Err(Error::Bench(format!(
                    "query {} references unknown item {id}",
                    r.query_id
                )));
            }
        }
    }
    Ok(())
}
