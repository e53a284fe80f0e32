//! Minimal CIF reader: cell parameters and the `_atom_site_` loop.
//!
//! Symmetry operations are not expanded, so inputs are expected to list
//! every atom of the cell (P1).

use std::collections::HashMap;

use super::elements::element_from_label;
use super::structure::{lattice_from_parameters, CrystalStructure};
use crate::error::{Error, Result};

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedCif(msg.into())
}

/// Split a line into CIF tokens, honouring single and double quotes.
fn split_tokens(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut chars = line.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '#' {
            break;
        } else if c == '\'' || c == '"' {
            chars.next();
            let mut tok = String::new();
            while let Some(ch) = chars.next() {
                // a quote only closes when followed by whitespace or end of line
                if ch == c && chars.peek().is_none_or(|n| n.is_whitespace()) {
                    break;
                }
                tok.push(ch);
            }
            out.push(tok);
        } else {
            let mut tok = String::new();
            while let Some(&ch) = chars.peek() {
                if ch.is_whitespace() {
                    break;
                }
                tok.push(ch);
                chars.next();
            }
            out.push(tok);
        }
    }
    out
}

/// Number with an optional standard uncertainty suffix, e.g. `10.154(2)`.
fn parse_number(raw: &str) -> Option<f64> {
    let core = raw.split('(').next()?;
    core.parse::<f64>().ok().filter(|v| v.is_finite())
}

struct Loop {
    tags: Vec<String>,
    values: Vec<String>,
}

#[derive(Default)]
struct CifData {
    items: HashMap<String, String>,
    loops: Vec<Loop>,
}

fn lex(text: &str) -> Result<CifData> {
    let mut data = CifData::default();
    let mut lines = text.lines().peekable();
    let mut current: Option<Loop> = None;
    let mut pending_tag: Option<String> = None;

    let flush = |data: &mut CifData, current: &mut Option<Loop>| {
        if let Some(l) = current.take() {
            data.loops.push(l);
        }
    };

    while let Some(line) = lines.next() {
        // semicolon-delimited text field: consume until the closing ';'
        if line.starts_with(';') {
            let mut field = line[1..].to_string();
            for next in lines.by_ref() {
                if next.starts_with(';') {
                    break;
                }
                field.push('\n');
                field.push_str(next);
            }
            if let Some(tag) = pending_tag.take() {
                data.items.insert(tag, field);
            } else if let Some(l) = current.as_mut() {
                l.values.push(field);
            }
            continue;
        }
        let tokens = split_tokens(line);
        let mut it = tokens.into_iter().peekable();
        while let Some(tok) = it.next() {
            let lower = tok.to_ascii_lowercase();
            if lower == "loop_" {
                flush(&mut data, &mut current);
                current = Some(Loop { tags: Vec::new(), values: Vec::new() });
            } else if lower.starts_with("data_") || lower.starts_with("save_") {
                flush(&mut data, &mut current);
            } else if tok.starts_with('_') {
                match current.as_mut() {
                    Some(l) if l.values.is_empty() => l.tags.push(lower),
                    _ => {
                        flush(&mut data, &mut current);
                        match it.next() {
                            Some(v) => {
                                data.items.insert(lower, v);
                            }
                            None => pending_tag = Some(lower),
                        }
                    }
                }
            } else if let Some(tag) = pending_tag.take() {
                data.items.insert(tag, tok);
            } else if let Some(l) = current.as_mut() {
                l.values.push(tok);
            } else {
                return Err(malformed(format!("unexpected token {tok:?}")));
            }
        }
    }
    flush(&mut data, &mut current);
    Ok(data)
}

pub fn parse_cif(text: &str) -> Result<CrystalStructure> {
    let data = lex(text)?;
    let cell = |key: &str| -> Result<f64> {
        let raw = data
            .items
            .get(key)
            .ok_or_else(|| malformed(format!("missing {key}")))?;
        parse_number(raw).ok_or_else(|| malformed(format!("{key}: bad number {raw:?}")))
    };
    let lattice = lattice_from_parameters(
        cell("_cell_length_a")?,
        cell("_cell_length_b")?,
        cell("_cell_length_c")?,
        cell("_cell_angle_alpha")?,
        cell("_cell_angle_beta")?,
        cell("_cell_angle_gamma")?,
    )?;

    let atoms = data
        .loops
        .iter()
        .find(|l| l.tags.iter().any(|t| t == "_atom_site_fract_x"))
        .ok_or_else(|| malformed("missing _atom_site loop with fractional coordinates"))?;
    let col = |tag: &str| atoms.tags.iter().position(|t| t == tag);
    let (fx, fy, fz) = match (
        col("_atom_site_fract_x"),
        col("_atom_site_fract_y"),
        col("_atom_site_fract_z"),
    ) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(malformed("atom_site loop lacks fract_x/y/z")),
    };
    let species = col("_atom_site_type_symbol")
        .or_else(|| col("_atom_site_label"))
        .ok_or_else(|| malformed("atom_site loop lacks type_symbol and label"))?;

    let width = atoms.tags.len();
    if atoms.values.is_empty() || atoms.values.len() % width != 0 {
        return Err(malformed(format!(
            "atom_site loop has {} values for {} columns",
            atoms.values.len(),
            width
        )));
    }
    let mut coords = Vec::new();
    let mut numbers = Vec::new();
    for row in atoms.values.chunks(width) {
        let label = &row[species];
        let z = element_from_label(label)
            .ok_or_else(|| malformed(format!("unknown element symbol {label:?}")))?;
        let num = |i: usize| {
            parse_number(&row[i]).ok_or_else(|| malformed(format!("bad coordinate {:?}", row[i])))
        };
        coords.push([num(fx)?, num(fy)?, num(fz)?]);
        numbers.push(z);
    }
    CrystalStructure::new(lattice, coords, numbers)
}

/// Render a structure as a P1 CIF that [`parse_cif`] reads back.
pub fn write_cif(s: &CrystalStructure, name: &str) -> String {
    use super::structure::norm;
    let l = &s.lattice;
    let (a, b, c) = (norm(&l[0]), norm(&l[1]), norm(&l[2]));
    let angle = |u: &[f64; 3], v: &[f64; 3], nu: f64, nv: f64| {
        ((u[0] * v[0] + u[1] * v[1] + u[2] * v[2]) / (nu * nv)).clamp(-1.0, 1.0).acos().to_degrees()
    };
    let mut out = format!("data_{name}\n");
    out += &format!("_cell_length_a {a}\n_cell_length_b {b}\n_cell_length_c {c}\n");
    out += &format!(
        "_cell_angle_alpha {}\n_cell_angle_beta {}\n_cell_angle_gamma {}\n",
        angle(&l[1], &l[2], b, c),
        angle(&l[0], &l[2], a, c),
        angle(&l[0], &l[1], a, b)
    );
    out += "_symmetry_space_group_name_H-M 'P 1'\nloop_\n_atom_site_label\n_atom_site_type_symbol\n";
    out += "_atom_site_fract_x\n_atom_site_fract_y\n_atom_site_fract_z\n";
    for (k, (f, &z)) in s.frac_coords.iter().zip(&s.atomic_numbers).enumerate() {
        let sym = super::elements::symbol(z).unwrap_or("X");
        out += &format!("{sym}{k} {sym} {} {} {}\n", f[0], f[1], f[2]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const POLONIUM: &str = "data_Po
_cell_length_a 4.0
_cell_length_b 4.0
_cell_length_c 4.0
_cell_angle_alpha 90
_cell_angle_beta 90
_cell_angle_gamma 90
loop_
_atom_site_label
_atom_site_type_symbol
_atom_site_fract_x
_atom_site_fract_y
_atom_site_fract_z
Po1 Po 0.0 0.0 0.0
";

    #[test]
    fn simple_cubic() {
        let s = parse_cif(POLONIUM).unwrap();
        assert_eq!(s.lattice, [[4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 4.0]]);
        assert_eq!(s.atomic_numbers, vec![84]);
    }

    #[test]
    fn wraps_and_reads_uncertainties() {
        let text = POLONIUM
            .replace("Po1 Po 0.0 0.0 0.0", "Po1 Po 1.25 0.5(3) -0.25")
            .replace("_cell_length_c 4.0", "_cell_length_c 4.0(1)");
        let s = parse_cif(&text).unwrap();
        assert_eq!(s.frac_coords[0], [0.25, 0.5, 0.75]);
    }

    #[test]
    fn missing_cell_length() {
        let text = POLONIUM.replace("_cell_length_a 4.0\n", "");
        assert!(matches!(parse_cif(&text), Err(Error::MalformedCif(_))));
    }

    #[test]
    fn unknown_element_and_missing_loop() {
        let text = POLONIUM.replace("Po1 Po", "Qq1 Qq");
        assert!(parse_cif(&text).is_err());
        let text = POLONIUM.split("loop_").next().unwrap().to_string();
        assert!(parse_cif(&text).is_err());
    }

    #[test]
    fn realistic_header_and_extra_loops() {
        let text = "data_test
_audit_creation_method 'hand written'
_symmetry_space_group_name_H-M    'P 1'
_cell_length_a   10.0
_cell_length_b   11.0
_cell_length_c   12.0
_cell_angle_alpha   90.0
_cell_angle_beta   100.0
_cell_angle_gamma   90.0
_chemical_name_common
;
multi-line
comment
;
loop_
_symmetry_equiv_pos_as_xyz
  'x, y, z'
loop_
_atom_site_type_symbol
_atom_site_label
_atom_site_occupancy
_atom_site_fract_x
_atom_site_fract_y
_atom_site_fract_z
Zn Zn1 1.0 0.1 0.2 0.3
O O1 1.0 0.4 0.5 0.6
C C1 1.0 0.7 0.8
  0.9
";
        let s = parse_cif(text).unwrap();
        assert_eq!(s.atomic_numbers, vec![30, 8, 6]);
        assert_eq!(s.frac_coords[2], [0.7, 0.8, 0.9]);
    }

    #[test]
    fn writer_round_trip() {
        let s = parse_cif(POLONIUM.replace("90\n_atom", "90\n_atom").as_str()).unwrap();
        let back = parse_cif(&write_cif(&s, "po")).unwrap();
        assert_eq!(back.atomic_numbers, s.atomic_numbers);
        for (a, b) in back.lattice.iter().flatten().zip(s.lattice.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
