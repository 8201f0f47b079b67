use lincir_core::experiment::DeskRun;
use lincir_core::smp::CorpusLine;
use lincir_core::synth::{read_corpus, read_jsonl, validate_records, BenchmarkRecord, GalleryEntry};

use crate::{CliError, Settings};

/// Gallery, query splits and training corpus for one run.
pub struct Data {
    pub gallery: Vec<GalleryEntry>,
    pub dev: Vec<BenchmarkRecord>,
    pub test: Vec<BenchmarkRecord>,
    pub corpus: Vec<CorpusLine>,
}

impl Data {
    /// Reads `--benchmark` when given, otherwise generates the benchmark
    /// for `--seed`. `--corpus` replaces the corpus either way.
    pub fn load(s: &Settings, image_side: usize) -> Result<Data, CliError> {
        let mut data = match &s.benchmark {
            Some(dir) => {
                let gallery = read_jsonl(&dir.join("gallery.jsonl"))?;
                let dev = read_jsonl(&dir.join("dev.jsonl"))?;
                let test = read_jsonl(&dir.join("test.jsonl"))?;
                let corpus_file = dir.join("corpus.txt");
                let corpus = if corpus_file.exists() {
                    read_corpus(&corpus_file)?.into_iter().map(CorpusLine::text).collect()
                } else {
                    Vec::new()
                };
                Data {
                    gallery,
                    dev,
                    test,
                    corpus,
                }
            }
            None => {
                let run = DeskRun::new(s.seed)?;
                let corpus = run.corpus_lines(image_side);
                Data {
                    gallery: run.bench.gallery,
                    dev: run.bench.dev,
                    test: run.bench.test,
                    corpus,
                }
            }
        };
        validate_records(&data.dev, &data.gallery)?;
        validate_records(&data.test, &data.gallery)?;
        if let Some(path) = &s.corpus {
            data.corpus = read_corpus(path)?.into_iter().map(CorpusLine::text).collect();
        }
        Ok(data)
    }

    pub fn split(&self, split: crate::Split) -> &[BenchmarkRecord] {
        match split {
            crate::Split::Dev => &self.dev,
            crate::Split::Test => &self.test,
        }
    }
}
