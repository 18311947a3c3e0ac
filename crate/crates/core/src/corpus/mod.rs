//! Synthetic knowledge corpus, external QA records and full-model training.

pub mod records;
pub mod train;
pub mod world;

pub use records::{load_qa_records, parse_qa_records, write_qa_records, Provenance, QueryRecord};
pub use train::{pretrain_toy_model, sft_finetune, train_lm, SftPair, TrainOptions, TrainTrace};
pub use world::{generate_fact_world, Fact, FactWorld, FactWorldSpec, TemplateSym, VocabLayout};
