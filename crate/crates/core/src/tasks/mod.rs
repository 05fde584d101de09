//! Synthetic corpora and verbalizer classification tasks over a toy vocabulary.

mod corpus;
mod dataset;
mod eval;
pub mod vocab;

pub use corpus::{
    generate_corpus, CorpusKind, CorpusSpec, MarkovGrammar, Template, WeightedTemplate,
};
pub use dataset::{
    generate_task, needle_input, parity_input, Example, Split, TaskDataset, TaskKind, TaskMeta,
    TaskSpec, TaskSplits, EVAL_FILE, META_FILE, TRAIN_FILE,
};
pub use eval::{mean_of, task_eval, verbalizer_logits, verbalizer_losses, PromptInput, TaskScore};
pub use vocab::Vocab;

#[cfg(test)]
mod tests;
