//! Synthetic cyclic-motion samples, tokenization, and JSONL interchange.

mod jsonl;
mod synth;
mod tokenizer;

pub use jsonl::{load_jsonl, read_jsonl, save_jsonl, write_jsonl, DatasetHeader, SCHEMA_NAME, SCHEMA_VERSION};
pub use synth::template_words;
pub use synth::{
    generate_cyclic, generate_dataset, key_frames, paired_video, CyclicParams, DatasetParams, Labels, MotionClass,
    MotionSample, QueryFamily,
};
pub use tokenizer::{build_vocabulary, normalize, words, Tokenizer};
