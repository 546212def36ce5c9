//! Corpus loading, tokenization, keyword statistics, masking and synthetic data.

pub mod keywords;
pub mod store;
pub mod synth;
pub mod text;

pub use keywords::{compute_keywords, default_stoplist, load_stoplist, KeywordList, DEFAULT_STOPLIST};
pub use store::{pairs, Corpus, PairRef, Sample, SplitName};
pub use synth::{generate_synthetic, CorruptedPair, Manifest, SynthConfig, CLASS_NOUNS};
pub use text::{
    keyword_ids, mask_keywords, normalize, tokenize, MaskedSequence, Vocabulary, DEFAULT_MAX_LEN,
    EOS, MASK, PAD, SOS, UNK,
};
