//! Line-oriented dataset format:
//!
//! ```text
//! # comment
//! id=m1; atoms=C,O; bonds=0-1:1; charges=0,0; coords3d=[(0,0,0),(1.2,0,0)]; energies=0.0; targets=homo:-0.25
//! ```
//!
//! `coords3d` may repeat, once per conformer. `energies` and `weights` list
//! one value per conformer in the same order.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use super::{atomic_number, symbol, Bond, BondOrder, Dataset, MolecularGraph, Molecule};
use crate::conformer::{Conformer, ConformerSet};
use crate::error::{Error, Result};

pub fn parse_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_str(&text)
}

/// Parses dataset text; records keep their file order.
pub fn parse_str(text: &str) -> Result<Dataset> {
    let mut molecules = Vec::new();
    let mut ids = HashSet::new();
    let mut first_targets: Option<(usize, Vec<String>)> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let m = parse_record(raw, line_no)?;
        if !ids.insert(m.graph.id.clone()) {
            return Err(Error::DuplicateId {
                line: line_no,
                id: m.graph.id.clone(),
            });
        }
        let names: Vec<String> = m.graph.targets.iter().map(|(n, _)| n.clone()).collect();
        match &first_targets {
            None => first_targets = Some((line_no, names)),
            Some((first_line, expected)) if *expected != names => {
                return Err(Error::Syntax {
                    line: line_no,
                    column: 1,
                    message: format!(
                        "target names {names:?} differ from {expected:?} declared on line {first_line}"
                    ),
                });
            }
            Some(_) => {}
        }
        molecules.push(m);
    }
    Dataset::new(molecules)
}

struct Field<'a> {
    key: &'a str,
    value: &'a str,
    /// 1-based column of the value's first character.
    column: usize,
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Syntax {
        line,
        column,
        message: message.into(),
    }
}

fn split_fields(line: &str, line_no: usize) -> Result<Vec<Field<'_>>> {
    let mut fields = Vec::new();
    let mut offset = 0;
    for chunk in line.split(';') {
        let start = offset;
        offset += chunk.len() + 1;
        if chunk.trim().is_empty() {
            continue;
        }
        let lead = chunk.len() - chunk.trim_start().len();
        let column = line[..start + lead].chars().count() + 1;
        let Some(eq) = chunk.find('=') else {
            return Err(syntax(line_no, column, format!("expected key=value, found '{}'", chunk.trim())));
        };
        let key = chunk[..eq].trim();
        let raw_value = &chunk[eq + 1..];
        let value_lead = raw_value.len() - raw_value.trim_start().len();
        fields.push(Field {
            key,
            value: raw_value.trim(),
            column: line[..start + eq + 1 + value_lead].chars().count() + 1,
        });
    }
    Ok(fields)
}

/// Comma-separated items with the column of each.
fn items(value: &str, column: usize) -> Vec<(&str, usize)> {
    let mut out = Vec::new();
    let mut offset = 0;
    for part in value.split(',') {
        let lead = part.len() - part.trim_start().len();
        out.push((part.trim(), column + value[..offset + lead].chars().count()));
        offset += part.len() + 1;
    }
    out
}

fn parse_f64(s: &str, line: usize, column: usize) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| syntax(line, column, format!("expected a number, found '{s}'")))?;
    if !v.is_finite() {
        return Err(syntax(line, column, format!("non-finite number '{s}'")));
    }
    Ok(v)
}

fn parse_floats(f: &Field<'_>, line: usize) -> Result<Vec<f64>> {
    items(f.value, f.column)
        .into_iter()
        .map(|(s, col)| parse_f64(s, line, col))
        .collect()
}

fn parse_coords(f: &Field<'_>, line: usize) -> Result<Vec<[f64; 3]>> {
    let v = f.value;
    if !v.starts_with('[') || !v.ends_with(']') {
        return Err(syntax(line, f.column, "coords3d must be a bracketed list of (x,y,z) triples"));
    }
    let inner = &v[1..v.len() - 1];
    let base = f.column + 1;
    let mut coords = Vec::new();
    let mut rest = inner;
    let mut consumed = 0;
    loop {
        let trimmed = rest.trim_start();
        consumed += rest.len() - trimmed.len();
        rest = trimmed;
        if rest.is_empty() {
            break;
        }
        let col = base + inner[..consumed].chars().count();
        if !rest.starts_with('(') {
            return Err(syntax(line, col, "expected '(' opening a coordinate triple"));
        }
        let close = rest
            .find(')')
            .ok_or_else(|| syntax(line, col, "unterminated coordinate triple"))?;
        let triple = &rest[1..close];
        let parts: Vec<(&str, usize)> = items(triple, col + 1);
        if parts.len() != 3 {
            return Err(syntax(line, col, format!("expected 3 coordinates, found {}", parts.len())));
        }
        let mut xyz = [0.0; 3];
        for (slot, (s, c)) in xyz.iter_mut().zip(parts) {
            *slot = parse_f64(s, line, c)?;
        }
        coords.push(xyz);
        consumed += close + 1;
        rest = &rest[close + 1..];
        let trimmed = rest.trim_start();
        consumed += rest.len() - trimmed.len();
        rest = trimmed;
        if let Some(after) = rest.strip_prefix(',') {
            consumed += 1;
            rest = after;
        } else if !rest.is_empty() {
            let col = base + inner[..consumed].chars().count();
            return Err(syntax(line, col, "expected ',' between coordinate triples"));
        }
    }
    if coords.is_empty() {
        return Err(syntax(line, f.column, "coords3d is empty"));
    }
    Ok(coords)
}

/// Parses one record. `line_no` is only used in error messages.
pub(crate) fn parse_record(line: &str, line_no: usize) -> Result<Molecule> {
    let fields = split_fields(line, line_no)?;
    let mut id: Option<&Field<'_>> = None;
    let mut atoms: Option<Vec<u8>> = None;
    let mut atoms_col = 1;
    let mut bonds_field: Option<&Field<'_>> = None;
    let mut charges: Option<(Vec<i8>, usize)> = None;
    let mut coords: Vec<(Vec<[f64; 3]>, usize)> = Vec::new();
    let mut energies: Option<(Vec<f64>, usize)> = None;
    let mut weights: Option<(Vec<f64>, usize)> = None;
    let mut targets: Option<Vec<(String, f64)>> = None;

    for f in &fields {
        let repeated = || syntax(line_no, f.column, format!("field '{}' given twice", f.key));
        match f.key {
            "id" => {
                if id.is_some() {
                    return Err(repeated());
                }
                if f.value.is_empty() || f.value.contains(char::is_whitespace) {
                    return Err(syntax(line_no, f.column, "id must be non-empty without whitespace"));
                }
                id = Some(f);
            }
            "atoms" => {
                if atoms.is_some() {
                    return Err(repeated());
                }
                let mut zs = Vec::new();
                for (s, col) in items(f.value, f.column) {
                    let z = atomic_number(s)
                        .ok_or_else(|| syntax(line_no, col, format!("unknown element '{s}'")))?;
                    zs.push(z);
                }
                atoms = Some(zs);
                atoms_col = f.column;
            }
            "bonds" => {
                if bonds_field.is_some() {
                    return Err(repeated());
                }
                bonds_field = Some(f);
            }
            "charges" => {
                if charges.is_some() {
                    return Err(repeated());
                }
                let mut qs = Vec::new();
                for (s, col) in items(f.value, f.column) {
                    let q: i8 = s
                        .parse()
                        .map_err(|_| syntax(line_no, col, format!("expected an integer charge, found '{s}'")))?;
                    qs.push(q);
                }
                charges = Some((qs, f.column));
            }
            "coords3d" => coords.push((parse_coords(f, line_no)?, f.column)),
            "energies" => {
                if energies.is_some() {
                    return Err(repeated());
                }
                energies = Some((parse_floats(f, line_no)?, f.column));
            }
            "weights" => {
                if weights.is_some() {
                    return Err(repeated());
                }
                weights = Some((parse_floats(f, line_no)?, f.column));
            }
            "targets" => {
                if targets.is_some() {
                    return Err(repeated());
                }
                let mut ts: Vec<(String, f64)> = Vec::new();
                for (s, col) in items(f.value, f.column) {
                    let (name, value) = s
                        .split_once(':')
                        .ok_or_else(|| syntax(line_no, col, format!("expected name:value, found '{s}'")))?;
                    let name = name.trim();
                    if name.is_empty() || ts.iter().any(|(n, _)| n == name) {
                        return Err(syntax(line_no, col, format!("empty or repeated target name '{name}'")));
                    }
                    let vcol = col + s.find(':').unwrap_or(0) + 1;
                    ts.push((name.to_string(), parse_f64(value.trim(), line_no, vcol)?));
                }
                targets = Some(ts);
            }
            other => {
                return Err(syntax(line_no, f.column, format!("unknown field '{other}'")));
            }
        }
    }

    let id = id.ok_or_else(|| syntax(line_no, 1, "missing field 'id'"))?;
    let zs = atoms.ok_or_else(|| syntax(line_no, 1, "missing field 'atoms'"))?;
    let n = zs.len();

    let mut bonds = Vec::new();
    let mut seen = HashSet::new();
    if let Some(f) = bonds_field {
        if !f.value.is_empty() {
            for (s, col) in items(f.value, f.column) {
                let bad = || syntax(line_no, col, format!("expected u-v:order, found '{s}'"));
                let (pair, order) = s.split_once(':').ok_or_else(bad)?;
                let (u, v) = pair.split_once('-').ok_or_else(bad)?;
                let u: usize = u.trim().parse().map_err(|_| bad())?;
                let v: usize = v.trim().parse().map_err(|_| bad())?;
                let order = BondOrder::from_token(order.trim())
                    .ok_or_else(|| syntax(line_no, col, format!("unknown bond order in '{s}'")))?;
                for index in [u, v] {
                    if index >= n {
                        return Err(Error::AtomIndexOutOfRange {
                            line: line_no,
                            index,
                            count: n,
                        });
                    }
                }
                if u == v {
                    return Err(syntax(line_no, col, format!("self-loop on atom {u}")));
                }
                if !seen.insert((u.min(v), u.max(v))) {
                    return Err(syntax(line_no, col, format!("bond {u}-{v} listed twice")));
                }
                bonds.push(Bond {
                    endpoints: (u, v),
                    order,
                });
            }
        }
    }

    let qs = match charges {
        Some((qs, col)) => {
            if qs.len() != n {
                return Err(syntax(line_no, col, format!("{} charges for {n} atoms", qs.len())));
            }
            qs
        }
        None => vec![0; n],
    };
    let pairs: Vec<(u8, i8)> = zs.into_iter().zip(qs).collect();
    let invalid_to_syntax = |e: Error, col: usize| match e {
        Error::InvalidMolecule { message, .. } => syntax(line_no, col, message),
        other => other,
    };
    let graph = MolecularGraph::new(id.value, &pairs, bonds)
        .map_err(|e| invalid_to_syntax(e, atoms_col))?
        .with_targets(targets.unwrap_or_default());

    let conformers = if coords.is_empty() {
        for (name, field) in [("energies", &energies), ("weights", &weights)] {
            if let Some((_, col)) = field {
                return Err(syntax(line_no, *col, format!("{name} given without coords3d")));
            }
        }
        None
    } else {
        for (c, col) in &coords {
            if c.len() != n {
                return Err(syntax(line_no, *col, format!("coords3d has {} points for {n} atoms", c.len())));
            }
        }
        let c = coords.len();
        for (name, field) in [("energies", &energies), ("weights", &weights)] {
            if let Some((vals, col)) = field {
                if vals.len() != c {
                    return Err(syntax(line_no, *col, format!("{} {name} for {c} conformers", vals.len())));
                }
            }
        }
        let first_col = coords[0].1;
        let confs: Vec<Conformer> = coords
            .into_iter()
            .enumerate()
            .map(|(j, (xyz, _))| Conformer {
                coords: xyz,
                energy: energies.as_ref().map(|(e, _)| e[j]),
                weight: weights.as_ref().map(|(w, _)| w[j]),
            })
            .collect();
        let set = ConformerSet::new(confs).map_err(|e| match e {
            Error::InvalidArgument(m) | Error::NonFinite(m) => syntax(line_no, first_col, m),
            other => other,
        })?;
        Some(set)
    };
    Molecule::new(graph, conformers)
}

fn join<T>(values: impl IntoIterator<Item = T>, f: impl Fn(T) -> String) -> String {
    values.into_iter().map(f).collect::<Vec<_>>().join(",")
}

/// Serializes one molecule as a record line (without newline). Floats use
/// the shortest representation that round-trips exactly.
pub fn format_record(m: &Molecule) -> String {
    let g = &m.graph;
    let mut s = format!("id={}", g.id);
    let _ = write!(
        s,
        "; atoms={}",
        join(g.atoms(), |a| symbol(a.atomic_number).unwrap_or("?").to_string())
    );
    let _ = write!(
        s,
        "; bonds={}",
        join(g.bonds(), |b| format!("{}-{}:{}", b.endpoints.0, b.endpoints.1, b.order.token()))
    );
    if g.atoms().iter().any(|a| a.formal_charge != 0) {
        let _ = write!(s, "; charges={}", join(g.atoms(), |a| a.formal_charge.to_string()));
    }
    if let Some(set) = &m.conformers {
        for c in set.conformers() {
            let _ = write!(
                s,
                "; coords3d=[{}]",
                join(&c.coords, |p| format!("({},{},{})", p[0], p[1], p[2]))
            );
        }
        if set.has_energies() {
            let _ = write!(s, "; energies={}", join(set.conformers(), |c| c.energy.unwrap_or(0.0).to_string()));
        }
        if set.has_weights() {
            let _ = write!(s, "; weights={}", join(set.conformers(), |c| c.weight.unwrap_or(0.0).to_string()));
        }
    }
    if !g.targets.is_empty() {
        let _ = write!(s, "; targets={}", join(&g.targets, |(n, v)| format!("{n}:{v}")));
    }
    s
}

/// Serializes a dataset; `parse_str(&write_dataset(d))` reproduces `d`'s
/// molecules and target names.
pub fn write_dataset(ds: &Dataset) -> String {
    let mut out = String::new();
    for m in &ds.molecules {
        out.push_str(&format_record(m));
        out.push('\n');
    }
    out
}
