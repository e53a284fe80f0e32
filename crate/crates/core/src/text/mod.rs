//! MOFid parsing, tokenization and the token vocabulary.

mod mofid;
mod smiles;
mod vocab;

pub use mofid::{parse_mofid, MofId, FORMAT_MARKER};
pub use smiles::{tokenize_mofid, tokenize_smiles};
pub use vocab::{
    build_vocabulary, TokenSequence, Vocabulary, CLS, CLS_ID, PAD, PAD_ID, SECTION_SEP,
    SECTION_SEP_ID, SEP, SEP_ID, SEQ_LEN, UNK, UNK_ID,
};
