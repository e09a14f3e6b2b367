//! Grounded-dialogue corpus construction: source adapters, set-of-mark
//! rendering, annotation-model dialogue synthesis with validation, JSONL
//! records, and a synthetic moving-shapes corpus.

pub mod dialogue;
pub mod pipeline;
pub mod record;
pub mod som;
pub mod sources;
pub mod synthetic;
pub mod validate;

pub use pipeline::{run_pipeline, PipelineConfig, PipelineOutput};
pub use record::{emit_jsonl, load_jsonl, CorpusLedger, GroundedDialogueRecord};
pub use synthetic::{generate_synthetic_corpus, SyntheticConfig};
pub use validate::{parse_and_validate, validate_record};
