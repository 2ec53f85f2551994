//! CSV import and export of nodal processes.
//!
//! Files are RFC 4180 with `.` decimals and LF line endings. Floats use the
//! shortest representation that parses back to the same value.

use std::io::{Read, Write};

use nalgebra::DVector;

use crate::adjoint::AdjointSolution;
use crate::error::{Error, Result};
use crate::forward::{check_control_shape, ControlProcess, StateTrajectory};
use crate::problem::ProblemSpec;
use crate::tree::{AdaptedProcess, ScenarioTree};

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

fn io_err(e: impl std::fmt::Display) -> Error {
    Error::Io(e.to_string())
}

fn write_row<W: Write>(w: &mut csv::Writer<W>, row: &[String]) -> Result<()> {
    w.write_record(row).map_err(io_err)
}

fn indexed(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (1..=count).map(move |i| format!("{prefix}_{i}"))
}

fn nums(v: &DVector<f64>) -> impl Iterator<Item = String> + '_ {
    v.iter().map(|x| x.to_string())
}

/// Columns `time, node_id, parent_id, prob, x_1..x_n, u_1..u_r`; `u` is empty
/// at terminal nodes and `parent_id` at the root.
pub fn write_trajectory<W: Write>(
    out: W,
    spec: &ProblemSpec,
    tree: &ScenarioTree,
    traj: &StateTrajectory,
    u: &ControlProcess,
) -> Result<()> {
    let mut w = writer(out);
    let header: Vec<String> = ["time", "node_id", "parent_id", "prob"]
        .into_iter()
        .map(String::from)
        .chain(indexed("x", spec.dims.n))
        .chain(indexed("u", spec.dims.r))
        .collect();
    write_row(&mut w, &header)?;
    for k in 0..=spec.grid.terminal() {
        for (i, node) in tree.level(k).iter().enumerate() {
            let mut row = vec![
                spec.grid.time(k).to_string(),
                node.id.to_string(),
                node.parent.map(|p| p.to_string()).unwrap_or_default(),
                node.prob.to_string(),
            ];
            row.extend(nums(traj.x.get(k, i)));
            if u.covers(k) {
                row.extend(nums(u.get(k, i)));
            } else {
                row.extend(std::iter::repeat_n(String::new(), spec.dims.r));
            }
            write_row(&mut w, &row)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Columns `time, node_id, p_1..p_n, q^1_1..q^d_n`; `q` is empty at terminal nodes.
pub fn write_adjoint<W: Write>(out: W, spec: &ProblemSpec, tree: &ScenarioTree, adj: &AdjointSolution) -> Result<()> {
    let (n, d) = (spec.dims.n, spec.dims.d);
    let mut w = writer(out);
    let mut header: Vec<String> = vec!["time".into(), "node_id".into()];
    header.extend(indexed("p", n));
    for j in 1..=d {
        header.extend((1..=n).map(|i| format!("q^{j}_{i}")));
    }
    write_row(&mut w, &header)?;
    for k in 0..=spec.grid.terminal() {
        for (i, node) in tree.level(k).iter().enumerate() {
            let mut row = vec![spec.grid.time(k).to_string(), node.id.to_string()];
            row.extend(nums(adj.p.get(k, i)));
            for qj in &adj.q {
                if qj.covers(k) {
                    row.extend(nums(qj.get(k, i)));
                } else {
                    row.extend(std::iter::repeat_n(String::new(), n));
                }
            }
            write_row(&mut w, &row)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Columns `time, node_id, u_1..u_r` over levels `0..=N`.
pub fn write_control<W: Write>(out: W, spec: &ProblemSpec, tree: &ScenarioTree, u: &ControlProcess) -> Result<()> {
    check_control_shape(spec, tree, u)?;
    let mut w = writer(out);
    let header: Vec<String> = ["time", "node_id"].into_iter().map(String::from).chain(indexed("u", spec.dims.r)).collect();
    write_row(&mut w, &header)?;
    for (k, vals) in u.levels() {
        for (i, v) in vals.iter().enumerate() {
            let mut row = vec![spec.grid.time(k).to_string(), tree.node(k, i).id.to_string()];
            row.extend(nums(v));
            write_row(&mut w, &row)?;
        }
    }
    w.flush().map_err(io_err)
}

fn parse_err(record: &csv::StringRecord, column: usize, msg: String) -> Error {
    let line = record.position().map_or(0, |p| p.line() as usize);
    Error::Parse { line, column: column + 1, msg }
}

/// Reads a control written by [`write_control`]. Rows may come in any order;
/// every control node must appear exactly once. Extra columns are ignored.
pub fn read_control<R: Read>(input: R, spec: &ProblemSpec, tree: &ScenarioTree) -> Result<ControlProcess> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = rd.headers().map_err(|e| Error::Parse { line: 1, column: 1, msg: e.to_string() })?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let id_col = col("node_id").ok_or_else(|| Error::Usage("control CSV has no node_id column".into()))?;
    let u_cols: Vec<usize> = indexed("u", spec.dims.r)
        .map(|name| col(&name).ok_or_else(|| Error::Usage(format!("control CSV has no {name} column"))))
        .collect::<Result<_>>()?;
    if let Some(extra) =
        headers.iter().find(|h| h.strip_prefix("u_").and_then(|s| s.parse::<usize>().ok()).is_some_and(|i| i == 0 || i > spec.dims.r))
    {
        return Err(Error::Usage(format!("control CSV has column {extra} but r = {}", spec.dims.r)));
    }

    let control_nodes: usize = (0..=spec.grid.steps).map(|k| tree.level_len(k)).sum();
    let mut slots: Vec<Option<DVector<f64>>> = vec![None; control_nodes];
    for rec in rd.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse { line, column: 1, msg: e.to_string() }
        })?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let id: usize = field(id_col).parse().map_err(|_| parse_err(&rec, id_col, format!("bad node_id {:?}", field(id_col))))?;
        if id >= control_nodes {
            return Err(Error::Usage(format!("node_id {id} is not a control node (tree has {control_nodes})")));
        }
        let v = u_cols
            .iter()
            .map(|&c| field(c).parse::<f64>().map_err(|_| parse_err(&rec, c, format!("bad number {:?}", field(c)))))
            .collect::<Result<Vec<f64>>>()?;
        if slots[id].replace(DVector::from_vec(v)).is_some() {
            return Err(Error::Usage(format!("node_id {id} appears twice in control CSV")));
        }
    }
    if let Some(missing) = slots.iter().position(Option::is_none) {
        return Err(Error::Usage(format!(
            "control CSV covers {} of {control_nodes} control nodes; node_id {missing} is missing",
            slots.iter().filter(|s| s.is_some()).count()
        )));
    }
    let mut values = slots.into_iter().map(Option::unwrap);
    let levels: Vec<Vec<DVector<f64>>> = (0..=spec.grid.steps).map(|k| values.by_ref().take(tree.level_len(k)).collect()).collect();
    AdaptedProcess::from_levels(tree, 0, levels)
}

/// Two-column `t, v` plot data.
pub fn write_plot_data<W: Write>(out: W, rows: &[(f64, f64)]) -> Result<()> {
    let mut w = writer(out);
    write_row(&mut w, &["t".into(), "v".into()])?;
    for (t, v) in rows {
        write_row(&mut w, &[t.to_string(), v.to_string()])?;
    }
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::simulate;
    use crate::problem::{AdmissibleSet, LqMeanField};

    fn e1() -> (ProblemSpec, ScenarioTree) {
        let spec = LqMeanField::e1_spec(AdmissibleSet::unbounded(1, 0)).unwrap();
        let tree = spec.build_tree().unwrap();
        (spec, tree)
    }

    #[test]
    fn control_round_trip_is_exact() {
        let (spec, tree) = e1();
        let u = AdaptedProcess::single_level(0, vec![DVector::from_element(1, 0.1 + 0.2)]);
        let mut buf = Vec::new();
        write_control(&mut buf, &spec, &tree, &u).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "time,node_id,u_1\n0,0,0.30000000000000004\n");
        assert_eq!(read_control(&buf[..], &spec, &tree).unwrap(), u);
    }

    #[test]
    fn shape_mismatch_is_usage() {
        let (spec, tree) = e1();
        let cases = ["node_id,u_1\n", "node_id,u_1\n0,1\n0,2\n", "node_id,u_1\n5,1\n", "node_id,u_1,u_2\n0,1,2\n", "node_id\n0\n"];
        for text in cases {
            assert!(matches!(read_control(text.as_bytes(), &spec, &tree), Err(Error::Usage(_))), "{text}");
        }
        let err = read_control("node_id,u_1\n0,abc\n".as_bytes(), &spec, &tree).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, column: 2, .. }), "{err}");
    }

    #[test]
    fn trajectory_layout() {
        let (spec, tree) = e1();
        let u = AdaptedProcess::single_level(0, vec![DVector::from_element(1, 0.0)]);
        let traj = simulate(&spec, &tree, &u).unwrap();
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &spec, &tree, &traj, &u).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "time,node_id,parent_id,prob,x_1,u_1\n0,0,,1,0,0\n1,1,0,0.5,1,\n1,2,0,0.5,-1,\n");
    }

    #[test]
    fn plot_data() {
        let mut buf = Vec::new();
        write_plot_data(&mut buf, &[(0.0, 1.5), (0.5, 2.0)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,v\n0,1.5\n0.5,2\n");
    }
}
