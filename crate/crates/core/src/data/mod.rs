//! Vocabulary, dataset files, masking and the synthetic disambiguation
//! corpus.

mod dataset;
mod generator;
mod masking;
mod vocab;

pub use dataset::{
    encoder_input, load_dataset, save_dataset, with_bos_eos, Choice, ContrastiveItem, Dataset,
    DatasetKind, FeatureDims, ImageFeatures, MultimodalExample,
};
pub use generator::{
    generate_synthetic_corpus, CorpusKey, CorpusSpec, ItemKey, LexemeKey, SyntheticCorpus,
    CORPUS_FILES,
};
pub use masking::{mask_tokens, mask_tokens_with, sample_objective, MaskedTokens, MaskingConfig, Objective};
pub use vocab::{
    detokenize, is_reserved, split_words, tokenize, Vocabulary, BOS, EOS, MASK, PAD,
    RESERVED_TOKENS, UNK,
};
