//! ChiMol text format: an XYZ block followed by chirality annotations.
//!
//! ```text
//! 5
//! bromochlorofluoromethane
//! C 0 0 0
//! H 1 0 0
//! ...
//! CHIRAL center 0 1 2 3 4
//! CHIRAL axis 0-1 2 3 4 5 1 2 3 4
//! BLADE 1 4 5
//! ```
//!
//! Substituents are reordered by ascending priority. Center units without
//! explicit priorities use atomic numbers; axis units without priorities keep
//! the written order.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::elements::{atomic_number, element_symbol, featurize};
use crate::error::{Error, Result};
use crate::geometry::{order_substituents, ChiralUnit, Molecule, Stereocenter, Vec3};

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_index(tok: &str, n_atoms: usize, line: usize) -> Result<usize> {
    let i: usize = tok
        .parse()
        .map_err(|_| parse_err(line, format!("`{tok}` is not an atom index")))?;
    if i >= n_atoms {
        return Err(parse_err(
            line,
            format!("atom index {i} out of range for {n_atoms} atoms"),
        ));
    }
    Ok(i)
}

fn parse_coord(tok: &str, line: usize) -> Result<f64> {
    match tok.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(parse_err(line, format!("`{tok}` is not a finite coordinate"))),
    }
}

fn parse_chiral(
    tokens: &[&str],
    atomic_numbers: &[u8],
    line: usize,
) -> Result<ChiralUnit> {
    let n = atomic_numbers.len();
    if tokens.len() != 6 && tokens.len() != 10 {
        return Err(parse_err(
            line,
            "expected `CHIRAL <center|axis> <atom|a-b> r1 r2 r3 r4 [p1 p2 p3 p4]`",
        ));
    }
    let center = match tokens[0] {
        "center" => Stereocenter::Center(parse_index(tokens[1], n, line)?),
        "axis" => {
            let (a, b) = tokens[1]
                .split_once('-')
                .ok_or_else(|| parse_err(line, format!("axis `{}` is not `a-b`", tokens[1])))?;
            Stereocenter::Axis(parse_index(a, n, line)?, parse_index(b, n, line)?)
        }
        other => return Err(parse_err(line, format!("unknown chiral kind `{other}`"))),
    };
    let mut related = [0; 4];
    for (slot, tok) in related.iter_mut().zip(&tokens[2..6]) {
        *slot = parse_index(tok, n, line)?;
    }
    let priorities: Option<[f64; 4]> = if tokens.len() == 10 {
        let mut p = [0.0; 4];
        for (slot, tok) in p.iter_mut().zip(&tokens[6..10]) {
            *slot = parse_coord(tok, line)
                .map_err(|_| parse_err(line, format!("`{tok}` is not a priority")))?;
        }
        Some(p)
    } else if matches!(center, Stereocenter::Center(_)) {
        Some(related.map(|i| atomic_numbers[i] as f64))
    } else {
        None
    };
    if let Some(p) = priorities {
        let distinct: BTreeSet<u64> = p.iter().map(|v| v.to_bits()).collect();
        if distinct.len() != 4 {
            return Err(parse_err(
                line,
                format!("substituent priorities {p:?} contain a tie"),
            ));
        }
        related = order_substituents(related, p).map_err(|e| parse_err(line, e.to_string()))?;
    }
    let unit = ChiralUnit { center, related };
    unit.validate(n).map_err(|e| parse_err(line, e.to_string()))?;
    Ok(unit)
}

/// Parses ChiMol text. The comment line becomes the molecule id unless it is
/// blank, in which case `fallback_id` is used.
pub fn parse_chimol(text: &str, fallback_id: &str) -> Result<Molecule> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let n_atoms: usize = first
        .trim()
        .parse()
        .map_err(|_| parse_err(1, format!("`{}` is not an atom count", first.trim())))?;
    if n_atoms == 0 {
        return Err(parse_err(1, "atom count must be positive"));
    }
    let comment = lines.next().map(|(_, l)| l.trim()).unwrap_or("");
    let id = if comment.is_empty() { fallback_id } else { comment };

    let mut coords: Vec<Vec3> = Vec::with_capacity(n_atoms);
    let mut zs = Vec::with_capacity(n_atoms);
    for k in 0..n_atoms {
        let (line, l) = lines
            .next()
            .ok_or_else(|| parse_err(3 + k, format!("expected {n_atoms} atom lines, found {k}")))?;
        let t: Vec<&str> = l.split_whitespace().collect();
        if t.len() != 4 {
            return Err(parse_err(line, "expected `symbol x y z`"));
        }
        let z = atomic_number(t[0])
            .ok_or_else(|| parse_err(line, format!("unknown element `{}`", t[0])))?;
        zs.push(z);
        coords.push([
            parse_coord(t[1], line)?,
            parse_coord(t[2], line)?,
            parse_coord(t[3], line)?,
        ]);
    }

    let mut units: Vec<ChiralUnit> = Vec::new();
    let mut centers: BTreeSet<usize> = BTreeSet::new();
    let mut blade: Option<Vec<usize>> = None;
    for (line, l) in lines {
        let t: Vec<&str> = l.split_whitespace().collect();
        match t.first() {
            None => continue,
            Some(&"CHIRAL") => {
                let unit = parse_chiral(&t[1..], &zs, line)?;
                for a in unit.center.atoms() {
                    if !centers.insert(a) {
                        return Err(parse_err(line, format!("duplicate chiral center at atom {a}")));
                    }
                }
                units.push(unit);
            }
            Some(&"BLADE") => {
                if blade.is_some() {
                    return Err(parse_err(line, "more than one BLADE line"));
                }
                let atoms = t[1..]
                    .iter()
                    .map(|tok| parse_index(tok, n_atoms, line))
                    .collect::<Result<Vec<_>>>()?;
                if atoms.is_empty() {
                    return Err(parse_err(line, "BLADE lists no atoms"));
                }
                blade = Some(atoms);
            }
            Some(other) => return Err(parse_err(line, format!("unexpected record `{other}`"))),
        }
    }

    let features = featurize(&zs);
    let mol = Molecule::new(id, coords, zs, features, units)?;
    match blade {
        Some(b) => mol.with_blade(b),
        None => Ok(mol),
    }
}

pub fn read_chimol(path: &Path) -> Result<Molecule> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_chimol(&text, &stem)
}

/// Serializes with shortest round-trip float formatting and explicit
/// priorities `1 2 3 4`, so parsing restores the stored substituent order.
pub fn write_chimol(mol: &Molecule) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", mol.len());
    let _ = writeln!(s, "{}", mol.id());
    for (c, &z) in mol.coords().iter().zip(mol.atomic_numbers()) {
        let _ = writeln!(
            s,
            "{} {:?} {:?} {:?}",
            element_symbol(z).unwrap_or("X"),
            c[0],
            c[1],
            c[2]
        );
    }
    for u in mol.chiral_units() {
        let [r1, r2, r3, r4] = u.related;
        match u.center {
            Stereocenter::Center(i) => {
                let _ = writeln!(s, "CHIRAL center {i} {r1} {r2} {r3} {r4} 1 2 3 4");
            }
            Stereocenter::Axis(a, b) => {
                let _ = writeln!(s, "CHIRAL axis {a}-{b} {r1} {r2} {r3} {r4} 1 2 3 4");
            }
        }
    }
    if let Some(b) = mol.blade() {
        let list: Vec<String> = b.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(s, "BLADE {}", list.join(" "));
    }
    s
}

pub fn write_chimol_file(path: &Path, mol: &Molecule) -> Result<()> {
    fs::write(path, write_chimol(mol)).map_err(|e| Error::io(path, e))
}
