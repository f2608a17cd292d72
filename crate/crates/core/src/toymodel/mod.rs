//! A small differentiable conditional sequence model: log-linear next-token
//! prediction conditioned on the previous token and a pooled prompt bag.
//! Log-probabilities and gradients are exact.

mod checkpoint;
mod policy;
mod vocab;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta,
    CHECKPOINT_VERSION,
};
pub use policy::{log_softmax, ParamTable, PolicyError, PromptFeatures, ToyPolicy};
pub use vocab::{
    count_tokens, split_words, TokenId, Vocab, VocabError, BOS, BOS_ID, DEFAULT_VOCAB_SIZE, EOS, EOS_ID, UNK, UNK_ID,
};
