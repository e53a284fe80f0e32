use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use super::mofid::MofId;
use super::smiles::tokenize_mofid;
use crate::error::{Error, Result};

/// Fixed sequence length fed to the encoder.
pub const SEQ_LEN: usize = 512;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const SECTION_SEP: &str = "&&";

pub const CLS_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const PAD_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const SECTION_SEP_ID: usize = 4;

const SPECIALS: [&str; 5] = [CLS, SEP, PAD, UNK, SECTION_SEP];

/// Token ids of fixed length plus the padding mask (`true` where PAD).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub pad_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions that are not padding, in order.
    pub fn active_positions(&self) -> Vec<usize> {
        self.pad_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &masked)| (!masked).then_some(i))
            .collect()
    }
}

/// Bijective token <-> id map with the five reserved specials at ids 0..5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::VocabFormat(format!("duplicate token {tok:?}")));
            }
        }
        for (id, special) in SPECIALS.iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(*special) {
                return Err(Error::VocabFormat(format!(
                    "special token {special:?} must have id {id}"
                )));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Encode to the standard length of [`SEQ_LEN`].
    pub fn encode(&self, m: &MofId) -> Result<TokenSequence> {
        self.encode_to_len(m, SEQ_LEN)
    }

    pub fn encode_to_len(&self, m: &MofId, len: usize) -> Result<TokenSequence> {
        Ok(self.encode_tokens(&tokenize_mofid(m)?, len))
    }

    /// `[CLS] tokens [SEP]`, truncated to `len` (the trailing SEP goes first)
    /// or right-padded with PAD. Unknown tokens map to UNK.
    pub fn encode_tokens(&self, tokens: &[String], len: usize) -> TokenSequence {
        let mut ids = Vec::with_capacity(len.max(tokens.len() + 2));
        ids.push(CLS_ID);
        ids.extend(tokens.iter().map(|t| self.id(t).unwrap_or(UNK_ID)));
        ids.push(SEP_ID);
        ids.truncate(len);
        ids.resize(len, PAD_ID);
        let pad_mask = ids.iter().map(|&id| id == PAD_ID).collect();
        TokenSequence { ids, pad_mask }
    }

    /// Token strings of the non-PAD positions, specials included.
    pub fn decode(&self, seq: &TokenSequence) -> Vec<String> {
        seq.active_positions()
            .into_iter()
            .map(|p| self.token(seq.ids[p]).unwrap_or(UNK).to_string())
            .collect()
    }

    /// Content tokens only: CLS, SEP and PAD stripped.
    pub fn content_tokens(&self, seq: &TokenSequence) -> Vec<String> {
        seq.ids
            .iter()
            .filter(|&&id| !matches!(id, CLS_ID | SEP_ID | PAD_ID))
            .map(|&id| self.token(id).unwrap_or(UNK).to_string())
            .collect()
    }

    /// `token<TAB>id` lines in id order, specials first.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, tok) in self.tokens.iter().enumerate() {
            out.push_str(tok);
            out.push('\t');
            out.push_str(&id.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut by_id: BTreeMap<usize, String> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.split_once('\t').ok_or_else(|| {
                Error::VocabFormat(format!("line {}: expected token<TAB>id", lineno + 1))
            })?;
            let id: usize = id.trim().parse().map_err(|_| {
                Error::VocabFormat(format!("line {}: bad id {id:?}", lineno + 1))
            })?;
            if tok.is_empty() {
                return Err(Error::VocabFormat(format!("line {}: empty token", lineno + 1)));
            }
            if by_id.insert(id, tok.to_string()).is_some() {
                return Err(Error::VocabFormat(format!("duplicate id {id}")));
            }
        }
        if by_id.keys().enumerate().any(|(expect, &id)| expect != id) {
            return Err(Error::VocabFormat("ids are not contiguous from 0".into()));
        }
        Self::from_tokens(by_id.into_values().collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())
            .map_err(|e| Error::io(format!("writing vocabulary {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading vocabulary {}", path.display()), e))?;
        Self::from_tsv(&text)
    }
}

/// Specials first, then every observed token by descending frequency with
/// lexicographic tie-breaking.
pub fn build_vocabulary<'a, I>(corpus: I) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a MofId>,
{
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut seen_any = false;
    for m in corpus {
        seen_any = true;
        for tok in tokenize_mofid(m)? {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if !seen_any {
        return Err(Error::EmptyCorpus);
    }
    let mut observed: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(t, _)| !SPECIALS.contains(&t.as_str()))
        .collect();
    observed.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(observed.into_iter().map(|(t, _)| t))
        .collect();
    Vocabulary::from_tokens(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::parse_mofid;

    fn corpus(raws: &[&str]) -> Vec<MofId> {
        raws.iter().map(|r| parse_mofid(r).unwrap()).collect()
    }

    #[test]
    fn minimal_vocabulary() {
        let c = corpus(&["C MOFid-v1.pcu.cat0"]);
        let v = build_vocabulary(&c).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(v.id("&&"), Some(SECTION_SEP_ID));
        // all observed tokens occur once: lexicographic order
        assert_eq!(&v.tokens()[5..], &["C", "cat0", "pcu"]);
        assert_eq!(build_vocabulary(&c).unwrap(), v);
    }

    #[test]
    fn frequency_then_lexicographic() {
        let c = corpus(&["N.C.C MOFid-v1.pcu.cat0", "O MOFid-v1.dia.cat0"]);
        let v = build_vocabulary(&c).unwrap();
        // C x2, "." x2, cat0 x2, then singletons N, O, dia, pcu
        assert_eq!(
            &v.tokens()[5..],
            &[".", "C", "cat0", "N", "O", "dia", "pcu"]
        );
    }

    #[test]
    fn empty_corpus() {
        assert!(matches!(build_vocabulary(&Vec::new()), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn encode_pads_and_maps_unknowns() {
        let v = build_vocabulary(&corpus(&["C MOFid-v1.pcu.cat0"])).unwrap();
        let seq = v.encode(&parse_mofid("C MOFid-v1.pcu.cat0").unwrap()).unwrap();
        assert_eq!(seq.len(), SEQ_LEN);
        assert_eq!(
            &seq.ids[..7],
            &[CLS_ID, v.id("C").unwrap(), SECTION_SEP_ID, v.id("pcu").unwrap(), v.id("cat0").unwrap(), SEP_ID, PAD_ID]
        );
        assert!(seq.pad_mask[6..].iter().all(|&m| m));
        assert!(seq.pad_mask[..6].iter().all(|&m| !m));

        let seq = v.encode(&parse_mofid("N MOFid-v1.pcu.cat0").unwrap()).unwrap();
        assert_eq!(seq.ids[1], UNK_ID);
    }

    #[test]
    fn truncation_boundary() {
        let v = build_vocabulary(&corpus(&["C MOFid-v1.pcu.cat0"])).unwrap();
        let tok = |n: usize| vec!["C".to_string(); n];
        // 510 content tokens + CLS + SEP fill the sequence exactly
        let seq = v.encode_tokens(&tok(510), SEQ_LEN);
        assert_eq!(seq.ids[SEQ_LEN - 1], SEP_ID);
        assert!(!seq.pad_mask.contains(&true));
        // one more drops the SEP
        let seq = v.encode_tokens(&tok(511), SEQ_LEN);
        assert_eq!(seq.ids.len(), SEQ_LEN);
        assert!(!seq.ids.contains(&SEP_ID));
        assert!(!seq.pad_mask.contains(&true));
    }

    #[test]
    fn tsv_round_trip_and_validation() {
        let v = build_vocabulary(&corpus(&["[Zn].C1=CC=CC=C1Br MOFid-v1.pcu.cat0"])).unwrap();
        let text = v.to_tsv();
        assert!(text.starts_with("[CLS]\t0\n[SEP]\t1\n[PAD]\t2\n[UNK]\t3\n&&\t4\n"));
        assert_eq!(Vocabulary::from_tsv(&text).unwrap(), v);

        assert!(Vocabulary::from_tsv("[CLS]\t0\n[SEP]\t1\n").is_err());
        let dup = format!("{text}C\t{}\n", v.len());
        assert!(Vocabulary::from_tsv(&dup).is_err());
        let gap = format!("{text}Q\t{}\n", v.len() + 1);
        assert!(Vocabulary::from_tsv(&gap).is_err());
    }
}
