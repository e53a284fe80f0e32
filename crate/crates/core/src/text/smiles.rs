use std::sync::OnceLock;

use regex::Regex;

use super::mofid::MofId;
use super::vocab::SECTION_SEP;
use crate::error::{Error, Result};

// Reaction-SMILES tokenizer pattern (bracket atoms, Br/Cl, organic subset,
// aromatic atoms, bonds, branches, ring closures, %NN labels).
const SMILES_PATTERN: &str =
    r"(\[[^\]]+]|Br?|Cl?|N|O|S|P|F|I|b|c|n|o|s|p|\(|\)|\.|=|#|-|\+|\\|/|:|~|@|\?|>|\*|\$|%[0-9]{2}|[0-9])";

fn smiles_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(SMILES_PATTERN).expect("static SMILES pattern"))
}

/// Split a SMILES string into tokens. The tokens always concatenate back to
/// the input; any gap between regex matches is reported as an error.
pub fn tokenize_smiles(smiles: &str) -> Result<Vec<String>> {
    let untokenizable = |offset: usize| Error::UntokenizableCharacter {
        smiles: smiles.to_string(),
        ch: smiles[offset..].chars().next().unwrap_or('\0'),
        offset,
    };
    if smiles.is_empty() {
        return Err(Error::MalformedMofId {
            raw: String::new(),
            reason: "empty SMILES string".into(),
        });
    }
    let mut tokens = Vec::new();
    let mut cursor = 0;
    for m in smiles_regex().find_iter(smiles) {
        if m.start() != cursor {
            return Err(untokenizable(cursor));
        }
        tokens.push(m.as_str().to_string());
        cursor = m.end();
    }
    if cursor != smiles.len() {
        return Err(untokenizable(cursor));
    }
    Ok(tokens)
}

/// Building-block tokens joined by `"."`, then the section separator, the
/// topology code and the catenation token.
pub fn tokenize_mofid(m: &MofId) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    for (i, part) in m.smiles_parts.iter().enumerate() {
        if i > 0 {
            tokens.push(".".to_string());
        }
        tokens.extend(tokenize_smiles(part)?);
    }
    tokens.push(SECTION_SEP.to_string());
    tokens.push(m.topology.clone());
    tokens.push(format!("cat{}", m.catenation));
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn simple_atoms() {
        assert_eq!(tokenize_smiles("CCO").unwrap(), toks(&["C", "C", "O"]));
        assert_eq!(tokenize_smiles("[Zn]").unwrap(), toks(&["[Zn]"]));
    }

    #[test]
    fn ring_with_bromine() {
        assert_eq!(
            tokenize_smiles("C1=CC=CC=C1Br").unwrap(),
            toks(&["C", "1", "=", "C", "C", "=", "C", "C", "=", "C", "1", "Br"])
        );
    }

    #[test]
    fn ring_labels_and_charges() {
        assert_eq!(
            tokenize_smiles("C%12Cl.[O-]").unwrap(),
            toks(&["C", "%12", "Cl", ".", "[O-]"])
        );
    }

    #[test]
    fn rejects_unknown_characters() {
        match tokenize_smiles("CCZ") {
            Err(Error::UntokenizableCharacter { ch, offset, .. }) => {
                assert_eq!(ch, 'Z');
                assert_eq!(offset, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(tokenize_smiles("C&&C").is_err());
        assert!(tokenize_smiles("C%1").is_err());
    }

    #[test]
    fn mofid_composition() {
        let m = MofId::new(vec!["C".into()], "pcu", 0);
        assert_eq!(tokenize_mofid(&m).unwrap(), toks(&["C", "&&", "pcu", "cat0"]));
        let m = MofId::new(vec!["C".into(), "N".into()], "dia", 1);
        assert_eq!(
            tokenize_mofid(&m).unwrap(),
            toks(&["C", ".", "N", "&&", "dia", "cat1"])
        );
        let m = MofId::new(vec!["[Zn]".into(), "O=C(O)c1ccccc1".into()], "pcu", 0);
        assert_eq!(
            tokenize_mofid(&m).unwrap(),
            toks(&[
                "[Zn]", ".", "O", "=", "C", "(", "O", ")", "c", "1", "c", "c", "c", "c", "c", "1",
                "&&", "pcu", "cat0"
            ])
        );
    }

    proptest! {
        #[test]
        fn segmentation_is_lossless(s in "[A-Za-z0-9\\[\\]()=#%+\\-./\\\\@:~*$?>]{1,40}") {
            if let Ok(tokens) = tokenize_smiles(&s) {
                prop_assert_eq!(tokens.concat(), s);
            }
        }
    }
}
