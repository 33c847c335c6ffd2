use crate::data::InMemoryCorpus;
use crate::model::Model;

pub fn tiny_corpus(seed: u64, scenes: usize) -> InMemoryCorpus {
    crate::verify::tiny_corpus(seed, scenes).unwrap()
}

pub fn tiny_model(corpus: &InMemoryCorpus, seed: u64) -> Model<f64> {
    crate::verify::tiny_model(corpus, seed).unwrap()
}
