//! Pose graphs as text:
//!
//! ```text
//! NODE <id> <16 row-major entries>
//! EDGE <i> <j> <odometry|loop_closure> <16 row-major entries> <21 upper-triangle information entries>
//! ```
//!
//! Nodes must be listed in order starting from 0 and precede all edges. The
//! information matrix is stored row by row, upper triangle only.

use std::fmt::Write as _;
use std::path::Path;

use recon3d_core::math::Mat6;
use recon3d_core::posegraph::{EdgeKind, PoseEdge, PoseGraph};

use super::{content_lines, fmt_f64, parse_f64, parse_pose, read_text, write_file, FormatError};

pub fn graph_to_text(graph: &PoseGraph) -> String {
    let mut out = String::new();
    for (id, node) in graph.nodes().iter().enumerate() {
        write!(out, "NODE {id}").unwrap();
        for x in node.to_row_major() {
            write!(out, " {}", fmt_f64(x)).unwrap();
        }
        out.push('\n');
    }
    for e in graph.edges() {
        write!(out, "EDGE {} {} {}", e.i, e.j, e.kind.as_str()).unwrap();
        for x in e.measurement.to_row_major() {
            write!(out, " {}", fmt_f64(x)).unwrap();
        }
        for r in 0..6 {
            for c in r..6 {
                write!(out, " {}", fmt_f64(e.information[(r, c)])).unwrap();
            }
        }
        out.push('\n');
    }
    out
}

fn parse_index(token: Option<&str>, line: usize, what: &str) -> Result<usize, FormatError> {
    let token = token.ok_or_else(|| FormatError::at_line(line, format!("missing {what}")))?;
    token
        .parse()
        .map_err(|_| FormatError::at_line(line, format!("expected {what}, found `{token}`")))
}

pub fn parse_graph(text: &str) -> Result<PoseGraph, FormatError> {
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut last_line = 0;
    for (line, content) in content_lines(text) {
        last_line = line;
        let mut tokens = content.split_whitespace();
        match tokens.next() {
            Some("NODE") => {
                if !edges.is_empty() {
                    return Err(FormatError::at_line(line, "NODE after the first EDGE"));
                }
                let id = parse_index(tokens.next(), line, "node id")?;
                if id != nodes.len() {
                    return Err(FormatError::at_line(line, format!("expected node {}, found {id}", nodes.len())));
                }
                let values = tokens.map(|t| parse_f64(t, line)).collect::<Result<Vec<_>, _>>()?;
                nodes.push(parse_pose(&values, line)?);
            }
            Some("EDGE") => {
                let i = parse_index(tokens.next(), line, "edge source")?;
                let j = parse_index(tokens.next(), line, "edge target")?;
                let kind_token = tokens.next().unwrap_or("");
                let kind = EdgeKind::parse(kind_token)
                    .ok_or_else(|| FormatError::at_line(line, format!("unknown edge kind `{kind_token}`")))?;
                let values = tokens.map(|t| parse_f64(t, line)).collect::<Result<Vec<_>, _>>()?;
                if values.len() != 16 + 21 {
                    return Err(FormatError::at_line(line, format!("expected 37 numbers, found {}", values.len())));
                }
                let measurement = parse_pose(&values[..16], line)?;
                let mut information = Mat6::zeros();
                let mut upper = values[16..].iter();
                for r in 0..6 {
                    for c in r..6 {
                        let x = *upper.next().expect("length checked");
                        information[(r, c)] = x;
                        information[(c, r)] = x;
                    }
                }
                let edge = PoseEdge {
                    i,
                    j,
                    measurement,
                    information,
                    kind,
                };
                // validate this edge alone so the error can point at its line
                PoseGraph::new(nodes.clone(), vec![edge.clone()])
                    .map_err(|e| FormatError::at_line(line, e.to_string()))?;
                edges.push(edge);
            }
            Some(other) => return Err(FormatError::at_line(line, format!("unknown record `{other}`"))),
            None => unreachable!("content lines are non-empty"),
        }
    }
    if nodes.is_empty() {
        return Err(FormatError::at_line(last_line.max(1), "graph has no nodes"));
    }
    PoseGraph::new(nodes, edges).map_err(|e| FormatError::at_line(1, e.to_string()))
}

pub fn read_pose_graph(path: &Path) -> Result<PoseGraph, FormatError> {
    parse_graph(&read_text(path)?)
}

pub fn write_pose_graph(path: &Path, graph: &PoseGraph) -> Result<(), FormatError> {
    write_file(path, graph_to_text(graph).as_bytes())
}
