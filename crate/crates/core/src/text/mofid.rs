use std::fmt;

use crate::error::{Error, Result};

/// Marker separating the SMILES section from the topology section.
pub const FORMAT_MARKER: &str = "MOFid-v1.";

/// A parsed MOFid: building-block SMILES, RCSR topology and catenation.
///
/// Layout: `SMILES MOFid-v1.<topology>.cat<N>[;name]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MofId {
    pub smiles_parts: Vec<String>,
    pub topology: String,
    pub catenation: u32,
    pub name: Option<String>,
}

impl MofId {
    pub fn new(smiles_parts: Vec<String>, topology: &str, catenation: u32) -> Self {
        MofId { smiles_parts, topology: topology.to_string(), catenation, name: None }
    }
}

impl fmt::Display for MofId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}{}.cat{}",
            self.smiles_parts.join("."),
            FORMAT_MARKER,
            self.topology,
            self.catenation
        )?;
        if let Some(name) = &self.name {
            write!(f, ";{name}")?;
        }
        Ok(())
    }
}

fn malformed(raw: &str, reason: impl Into<String>) -> Error {
    Error::MalformedMofId { raw: raw.to_string(), reason: reason.into() }
}

// Each comma-separated RCSR code: 2-6 lowercase alphanumerics or hyphens.
fn valid_topology(topo: &str) -> bool {
    !topo.is_empty()
        && topo.split(',').all(|code| {
            (2..=6).contains(&code.len())
                && code.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
                && code.bytes().any(|b| b != b'-')
        })
}

pub fn parse_mofid(raw: &str) -> Result<MofId> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(malformed(raw, "empty string"));
    }
    let (body, name) = match trimmed.split_once(';') {
        Some((body, name)) => {
            let name = name.trim();
            (body.trim_end(), (!name.is_empty()).then(|| name.to_string()))
        }
        None => (trimmed, None),
    };
    let marker_at = body
        .find(FORMAT_MARKER)
        .ok_or_else(|| malformed(raw, format!("missing {FORMAT_MARKER:?} marker")))?;
    let smiles = body[..marker_at].trim();
    if smiles.is_empty() {
        return Err(malformed(raw, "empty SMILES section"));
    }
    if smiles.chars().any(char::is_whitespace) {
        return Err(malformed(raw, "whitespace inside SMILES section"));
    }
    let rest = &body[marker_at + FORMAT_MARKER.len()..];
    let (topology, cat) = rest
        .rsplit_once('.')
        .ok_or_else(|| malformed(raw, "missing catenation field"))?;
    if !valid_topology(topology) {
        return Err(malformed(raw, format!("invalid topology code {topology:?}")));
    }
    let digits = cat
        .strip_prefix("cat")
        .ok_or_else(|| malformed(raw, format!("catenation field {cat:?} lacks 'cat' prefix")))?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(malformed(raw, format!("non-numeric catenation {cat:?}")));
    }
    let catenation = digits
        .parse::<u32>()
        .map_err(|e| malformed(raw, format!("catenation {digits:?}: {e}")))?;

    let smiles_parts: Vec<String> = smiles.split('.').map(str::to_string).collect();
    if smiles_parts.iter().any(String::is_empty) {
        return Err(malformed(raw, "empty building block between '.' separators"));
    }
    Ok(MofId { smiles_parts, topology: topology.to_string(), catenation, name })
}
