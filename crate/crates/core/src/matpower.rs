//! Reader and writer for the subset of the MATPOWER case format needed for
//! DC modeling (`mpc.baseMVA`, `mpc.bus`, `mpc.gen`, `mpc.branch`,
//! `mpc.gencost`).
//!
//! Columns outside the DC subset are read and discarded. Out-of-service
//! generators and branches are dropped during validation, so a [`RawCase`]
//! only ever holds in-service equipment.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUS_COLS: usize = 13;
const GEN_COLS: usize = 10;
const BRANCH_COLS: usize = 13;
const GENCOST_MIN_COLS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaseError {
    #[error("missing table `mpc.{0}`")]
    MissingTable(&'static str),
    #[error("malformed row in `mpc.{table}` at line {line}: {reason}")]
    MalformedRow {
        table: &'static str,
        line: usize,
        reason: String,
    },
    #[error("unsupported cost model at line {line}: model {model} with {n_coeff} coefficients")]
    UnsupportedCostModel {
        line: usize,
        model: i64,
        n_coeff: usize,
    },
    #[error("invalid case: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusRow {
    pub bus_id: i64,
    pub bus_type: i64,
    /// Real power demand in MW.
    pub pd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRow {
    pub bus_id: i64,
    pub pmax: f64,
    pub pmin: f64,
    pub status: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRow {
    pub from_bus: i64,
    pub to_bus: i64,
    /// Series reactance in p.u.
    pub x: f64,
    /// Long-term rating in MW; 0 means unlimited.
    pub rate_a: f64,
    pub status: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenCostRow {
    pub model: i64,
    pub n_coeff: usize,
    /// Polynomial coefficients, highest degree first.
    pub coeffs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCase {
    pub base_mva: f64,
    pub bus_rows: Vec<BusRow>,
    pub gen_rows: Vec<GenRow>,
    pub branch_rows: Vec<BranchRow>,
    pub gencost_rows: Vec<GenCostRow>,
}

struct Row {
    line: usize,
    fields: Vec<f64>,
}

struct Tables {
    base_mva: Option<f64>,
    bus: Option<Vec<Row>>,
    gen: Option<Vec<Row>>,
    branch: Option<Vec<Row>>,
    gencost: Option<Vec<Row>>,
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn table_slot<'a>(tables: &'a mut Tables, name: &str) -> Option<&'a mut Option<Vec<Row>>> {
    match name {
        "bus" => Some(&mut tables.bus),
        "gen" => Some(&mut tables.gen),
        "branch" => Some(&mut tables.branch),
        "gencost" => Some(&mut tables.gencost),
        _ => None,
    }
}

fn static_name(name: &str) -> &'static str {
    match name {
        "bus" => "bus",
        "gen" => "gen",
        "branch" => "branch",
        "gencost" => "gencost",
        _ => "unknown",
    }
}

fn parse_number(tok: &str) -> Option<f64> {
    match tok {
        "Inf" | "inf" => Some(f64::INFINITY),
        "-Inf" | "-inf" => Some(f64::NEG_INFINITY),
        _ => tok.parse().ok(),
    }
}

/// Splits the text into `(line_no, cleaned_line)` pairs and walks the
/// matrix assignments.
fn scan(text: &str) -> Result<Tables, CaseError> {
    let mut tables = Tables {
        base_mva: None,
        bus: None,
        gen: None,
        branch: None,
        gencost: None,
    };

    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, strip_comment(l)))
        .collect();

    let mut idx = 0;
    while idx < lines.len() {
        let (line_no, line) = lines[idx];
        let trimmed = line.trim();
        idx += 1;

        let Some(rest) = trimmed.strip_prefix("mpc.") else {
            continue;
        };
        let Some(eq) = rest.find('=') else {
            continue;
        };
        let name = rest[..eq].trim();
        let rhs = rest[eq + 1..].trim();

        if name == "baseMVA" {
            let value = rhs.trim_end_matches(';').trim();
            let base = parse_number(value).ok_or_else(|| CaseError::MalformedRow {
                table: "baseMVA",
                line: line_no,
                reason: format!("cannot parse `{value}`"),
            })?;
            tables.base_mva = Some(base);
            continue;
        }

        let opener = match rhs.chars().next() {
            Some(c @ ('[' | '{')) => c,
            _ => continue,
        };
        let closer = if opener == '[' { ']' } else { '}' };

        // Gather the body of the matrix, possibly spanning many lines.
        let mut body: Vec<(usize, String)> = Vec::new();
        let mut first = rhs[1..].to_string();
        let mut closed = false;
        if let Some(end) = first.find(closer) {
            first.truncate(end);
            closed = true;
        }
        body.push((line_no, first));
        while !closed && idx < lines.len() {
            let (ln, l) = lines[idx];
            idx += 1;
            let mut s = l.to_string();
            if let Some(end) = s.find(closer) {
                s.truncate(end);
                closed = true;
            }
            body.push((ln, s));
        }

        let Some(slot) = table_slot(&mut tables, name) else {
            continue;
        };
        let table = static_name(name);
        if !closed {
            return Err(CaseError::MalformedRow {
                table,
                line: line_no,
                reason: "unterminated matrix".into(),
            });
        }

        let mut rows = Vec::new();
        for (ln, chunk) in body {
            for piece in chunk.split(';') {
                let toks: Vec<&str> = piece
                    .split(|c: char| c.is_whitespace() || c == ',')
                    .filter(|t| !t.is_empty())
                    .collect();
                if toks.is_empty() {
                    continue;
                }
                let mut fields = Vec::with_capacity(toks.len());
                for tok in toks {
                    let v = parse_number(tok).ok_or_else(|| CaseError::MalformedRow {
                        table,
                        line: ln,
                        reason: format!("cannot parse `{tok}`"),
                    })?;
                    fields.push(v);
                }
                rows.push(Row { line: ln, fields });
            }
        }
        *slot = Some(rows);
    }
    Ok(tables)
}

fn as_int(v: f64, table: &'static str, line: usize) -> Result<i64, CaseError> {
    if v.fract() != 0.0 || !v.is_finite() {
        return Err(CaseError::MalformedRow {
            table,
            line,
            reason: format!("expected an integer, found {v}"),
        });
    }
    Ok(v as i64)
}

fn require_cols(row: &Row, table: &'static str, min: usize) -> Result<(), CaseError> {
    if row.fields.len() < min {
        return Err(CaseError::MalformedRow {
            table,
            line: row.line,
            reason: format!("expected at least {min} columns, found {}", row.fields.len()),
        });
    }
    Ok(())
}

/// Parses MATPOWER case text into a validated [`RawCase`].
pub fn parse_case(text: &str) -> Result<RawCase, CaseError> {
    let tables = scan(text)?;

    let base_mva = tables.base_mva.ok_or(CaseError::MissingTable("baseMVA"))?;
    let bus = tables.bus.ok_or(CaseError::MissingTable("bus"))?;
    let gen = tables.gen.ok_or(CaseError::MissingTable("gen"))?;
    let branch = tables.branch.ok_or(CaseError::MissingTable("branch"))?;
    let gencost = tables.gencost.ok_or(CaseError::MissingTable("gencost"))?;

    if !(base_mva > 0.0) {
        return Err(CaseError::Invalid(format!("baseMVA must be positive, got {base_mva}")));
    }

    let mut bus_rows = Vec::with_capacity(bus.len());
    for row in &bus {
        require_cols(row, "bus", BUS_COLS)?;
        bus_rows.push(BusRow {
            bus_id: as_int(row.fields[0], "bus", row.line)?,
            bus_type: as_int(row.fields[1], "bus", row.line)?,
            pd: row.fields[2],
        });
    }
    let known = |id: i64| bus_rows.iter().any(|b| b.bus_id == id);
    for (i, a) in bus_rows.iter().enumerate() {
        if bus_rows[..i].iter().any(|b| b.bus_id == a.bus_id) {
            return Err(CaseError::Invalid(format!("duplicate bus id {}", a.bus_id)));
        }
    }

    let mut all_gens = Vec::with_capacity(gen.len());
    for row in &gen {
        require_cols(row, "gen", GEN_COLS)?;
        let g = GenRow {
            bus_id: as_int(row.fields[0], "gen", row.line)?,
            status: as_int(row.fields[7], "gen", row.line)?,
            pmax: row.fields[8],
            pmin: row.fields[9],
        };
        if !known(g.bus_id) {
            return Err(CaseError::Invalid(format!(
                "generator at line {} references unknown bus {}",
                row.line, g.bus_id
            )));
        }
        all_gens.push(g);
    }

    let mut branch_rows = Vec::new();
    for row in &branch {
        require_cols(row, "branch", BRANCH_COLS)?;
        let b = BranchRow {
            from_bus: as_int(row.fields[0], "branch", row.line)?,
            to_bus: as_int(row.fields[1], "branch", row.line)?,
            x: row.fields[3],
            rate_a: row.fields[5],
            status: as_int(row.fields[10], "branch", row.line)?,
        };
        if !known(b.from_bus) || !known(b.to_bus) {
            return Err(CaseError::Invalid(format!(
                "branch at line {} references an unknown bus",
                row.line
            )));
        }
        if b.status == 0 {
            continue;
        }
        if b.x == 0.0 {
            return Err(CaseError::Invalid(format!(
                "branch at line {} has zero reactance",
                row.line
            )));
        }
        branch_rows.push(b);
    }

    let mut costs = Vec::with_capacity(gencost.len());
    for row in &gencost {
        require_cols(row, "gencost", GENCOST_MIN_COLS)?;
        let model = as_int(row.fields[0], "gencost", row.line)?;
        let n = as_int(row.fields[3], "gencost", row.line)?;
        if model != 2 || !(2..=3).contains(&n) {
            return Err(CaseError::UnsupportedCostModel {
                line: row.line,
                model,
                n_coeff: n.max(0) as usize,
            });
        }
        let n = n as usize;
        require_cols(row, "gencost", GENCOST_MIN_COLS + n)?;
        costs.push(GenCostRow {
            model,
            n_coeff: n,
            coeffs: row.fields[4..4 + n].to_vec(),
        });
    }

    let in_service: Vec<bool> = all_gens.iter().map(|g| g.status > 0).collect();
    let n_active = in_service.iter().filter(|&&s| s).count();
    let gencost_rows = if costs.len() == all_gens.len() {
        costs
            .into_iter()
            .zip(&in_service)
            .filter(|(_, &on)| on)
            .map(|(c, _)| c)
            .collect()
    } else if costs.len() == n_active {
        costs
    } else {
        return Err(CaseError::Invalid(format!(
            "{} gencost rows for {} generators ({} in service)",
            costs.len(),
            all_gens.len(),
            n_active
        )));
    };
    let gen_rows: Vec<GenRow> = all_gens.into_iter().filter(|g| g.status > 0).collect();

    Ok(RawCase {
        base_mva,
        bus_rows,
        gen_rows,
        branch_rows,
        gencost_rows,
    })
}

/// Writes a [`RawCase`] back out as MATPOWER text. Discarded columns are
/// filled with neutral values; re-parsing reproduces the same `RawCase`.
pub fn write_case(case: &RawCase, name: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "function mpc = {name}");
    let _ = writeln!(out, "mpc.version = '2';");
    let _ = writeln!(out, "mpc.baseMVA = {:?};", case.base_mva);
    let _ = writeln!(out, "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin");
    let _ = writeln!(out, "mpc.bus = [");
    for b in &case.bus_rows {
        let _ = writeln!(
            out,
            "\t{}\t{}\t{:?}\t0\t0\t0\t1\t1\t0\t0\t1\t1.1\t0.9;",
            b.bus_id, b.bus_type, b.pd
        );
    }
    let _ = writeln!(out, "];");
    let _ = writeln!(out, "%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin");
    let _ = writeln!(out, "mpc.gen = [");
    for g in &case.gen_rows {
        let _ = writeln!(
            out,
            "\t{}\t0\t0\t0\t0\t1\t{:?}\t{}\t{:?}\t{:?};",
            g.bus_id, case.base_mva, g.status, g.pmax, g.pmin
        );
    }
    let _ = writeln!(out, "];");
    let _ = writeln!(
        out,
        "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\tangmin\tangmax"
    );
    let _ = writeln!(out, "mpc.branch = [");
    for br in &case.branch_rows {
        let _ = writeln!(
            out,
            "\t{}\t{}\t0\t{:?}\t0\t{:?}\t{:?}\t{:?}\t0\t0\t{}\t-360\t360;",
            br.from_bus, br.to_bus, br.x, br.rate_a, br.rate_a, br.rate_a, br.status
        );
    }
    let _ = writeln!(out, "];");
    let _ = writeln!(out, "mpc.gencost = [");
    for c in &case.gencost_rows {
        let coeffs: Vec<String> = c.coeffs.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "\t{}\t0\t0\t{}\t{};", c.model, c.n_coeff, coeffs.join("\t"));
    }
    let _ = writeln!(out, "];");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;

    #[test]
    fn parses_case2_counts() {
        let case = parse_case(cases::CASE2).unwrap();
        assert_eq!(case.bus_rows.len(), 2);
        assert_eq!(case.gen_rows.len(), 1);
        assert_eq!(case.branch_rows.len(), 1);
        assert_eq!(case.base_mva, 100.0);
        assert_eq!(case.branch_rows[0].x, 0.1);
        assert_eq!(case.branch_rows[0].rate_a, 150.0);
        assert_eq!(case.gencost_rows[0].coeffs, vec![10.0, 0.0]);
    }

    #[test]
    fn rejects_piecewise_linear_cost() {
        let text = cases::CASE2.replace("\t2\t0\t0\t2\t10\t0;", "\t1\t0\t0\t2\t0\t0\t100\t1000;");
        match parse_case(&text) {
            Err(CaseError::UnsupportedCostModel { model: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_branch_row_reports_line() {
        let text = cases::CASE2.replace(
            "\t1\t2\t0\t0.1\t0\t150\t150\t150\t0\t0\t1\t-360\t360;",
            "\t1\t2\t0\t0.1\t0;",
        );
        let expected_line = text
            .lines()
            .position(|l| l.trim() == "1\t2\t0\t0.1\t0;")
            .unwrap()
            + 1;
        match parse_case(&text) {
            Err(CaseError::MalformedRow { table, line, .. }) => {
                assert_eq!(table, "branch");
                assert_eq!(line, expected_line);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_table_is_named() {
        let text: String = cases::CASE2
            .lines()
            .filter(|l| !l.contains("gencost") && !l.starts_with("\t2\t0\t0\t2"))
            .collect::<Vec<_>>()
            .join("\n");
        assert_eq!(parse_case(&text), Err(CaseError::MissingTable("gencost")));
    }

    #[test]
    fn drops_out_of_service_equipment() {
        let text = r#"
mpc.baseMVA = 100;
mpc.bus = [
 1 3 0 0 0 0 1 1 0 230 1 1.1 0.9;
 2 1 50 0 0 0 1 1 0 230 1 1.1 0.9;
];
mpc.gen = [
 1 0 0 0 0 1 100 1 100 0;
 2 0 0 0 0 1 100 0 100 0;
];
mpc.branch = [
 1 2 0 0.1 0 0 0 0 0 0 1 -360 360;
 1 2 0 0.2 0 0 0 0 0 0 0 -360 360;
];
mpc.gencost = [
 2 0 0 2 10 0;
 2 0 0 2 99 0;
];
"#;
        let case = parse_case(text).unwrap();
        assert_eq!(case.gen_rows.len(), 1);
        assert_eq!(case.branch_rows.len(), 1);
        assert_eq!(case.gencost_rows.len(), 1);
        assert_eq!(case.gencost_rows[0].coeffs[0], 10.0);
    }

    #[test]
    fn tolerates_comments_commas_and_inline_rows() {
        let text = "% header\nmpc.baseMVA = 100 ;\n\
            mpc.bus = [1, 3, 0, 0, 0, 0, 1, 1, 0, 230, 1, 1.1, 0.9; 2 1 100 0 0 0 1 1 0 230 1 1.1 0.9];\n\
            mpc.gen = [ % trailing comment\n  1 0 0 0 0 1 100 1 200 0\n];\n\
            mpc.bus_name = {\n 'A';\n 'B';\n};\n\
            mpc.branch = [1 2 0 0.1 0 150 150 150 0 0 1 -360 360;];\n\n\n\
            mpc.gencost = [2 0 0 2 10 0];\n";
        let case = parse_case(text).unwrap();
        assert_eq!(case, parse_case(cases::CASE2).unwrap());
    }

    #[test]
    fn write_then_parse_is_identity_on_bundled_cases() {
        for (name, text) in cases::ALL {
            let case = parse_case(text).unwrap();
            let again = parse_case(&write_case(&case, name)).unwrap();
            assert_eq!(case, again, "{name}");
        }
    }
}
