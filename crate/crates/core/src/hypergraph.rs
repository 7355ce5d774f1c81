//! Per-window hypergraph snapshots.
//!
//! Each community found in a window becomes one hyperedge. Hyperedges from
//! the correlation route (`COM`) and the attention route (`ATT`) are kept
//! side by side, duplicates included. Incidence is stored as a node list per
//! hyperedge; [`HypergraphSnapshot::incidence_dense`] materialises `H`.

use std::fmt;
use std::io::{BufRead, Write};

use ndarray::Array2;
use thiserror::Error;

use crate::community::Partition;

/// Weight given to hyperedges whose attention sum is (near) zero.
pub const WEIGHT_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum HypergraphError {
    #[error("hyperedge is empty")]
    EmptyEdge,
    #[error("node {node} out of range for {n_nodes} nodes")]
    NodeOutOfRange { node: usize, n_nodes: usize },
    #[error("node {0} appears twice in one hyperedge")]
    DuplicateNode(usize),
    #[error("no hyperedges")]
    NoEdges,
    #[error("node {0} is not covered by any hyperedge")]
    UncoveredNode(usize),
    #[error("attention matrix is {rows} × {cols}, expected {n} × {n}")]
    AttentionShape { rows: usize, cols: usize, n: usize },
    #[error("hyperedge weight {0} must be positive and finite")]
    BadWeight(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io: {0}")]
    Io(String),
}

/// Which mechanism produced a hyperedge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeSource {
    Com,
    Att,
}

impl EdgeSource {
    pub fn tag(self) -> &'static str {
        match self {
            EdgeSource::Com => "COM",
            EdgeSource::Att => "ATT",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "COM" => Some(EdgeSource::Com),
            "ATT" => Some(EdgeSource::Att),
            _ => None,
        }
    }
}

impl fmt::Display for EdgeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hyperedge {
    pub source: EdgeSource,
    /// Sorted, distinct node indices.
    pub nodes: Vec<usize>,
}

/// One community per hyperedge, in label order.
pub fn hyperedges_from_partition(partition: &Partition, source: EdgeSource) -> Vec<Hyperedge> {
    partition
        .communities()
        .into_iter()
        .map(|nodes| Hyperedge { source, nodes })
        .collect()
}

/// Sum of `|a(v_h, v_k)|` over ordered pairs of distinct members, floored at
/// [`WEIGHT_FLOOR`].
pub fn hyperedge_weight(nodes: &[usize], attention: &Array2<f64>) -> Result<f64, HypergraphError> {
    if nodes.is_empty() {
        return Err(HypergraphError::EmptyEdge);
    }
    let n = attention.nrows();
    if let Some(&node) = nodes.iter().find(|&&v| v >= n || v >= attention.ncols()) {
        return Err(HypergraphError::NodeOutOfRange { node, n_nodes: n });
    }
    let mut w = 0.0;
    for &h in nodes {
        for &k in nodes {
            if h != k {
                w += attention[[h, k]].abs();
            }
        }
    }
    Ok(if w < WEIGHT_FLOOR { WEIGHT_FLOOR } else { w })
}

/// A static hypergraph for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct HypergraphSnapshot {
    pub n_nodes: usize,
    pub hyperedges: Vec<Hyperedge>,
    /// Diagonal of `W`.
    pub weights: Vec<f64>,
    /// Diagonal of `D_v`: `Σ_e w(e) h(v, e)`.
    pub vertex_degrees: Vec<f64>,
    /// Diagonal of `D_e`: hyperedge cardinalities.
    pub edge_degrees: Vec<usize>,
    pub window_end: usize,
}

fn validate_edge(edge: &Hyperedge, n_nodes: usize) -> Result<(), HypergraphError> {
    if edge.nodes.is_empty() {
        return Err(HypergraphError::EmptyEdge);
    }
    for (i, &v) in edge.nodes.iter().enumerate() {
        if v >= n_nodes {
            return Err(HypergraphError::NodeOutOfRange { node: v, n_nodes });
        }
        if edge.nodes[..i].contains(&v) {
            return Err(HypergraphError::DuplicateNode(v));
        }
    }
    Ok(())
}

impl HypergraphSnapshot {
    /// Build from explicit hyperedges and weights, computing both degree
    /// vectors.
    pub fn from_parts(
        n_nodes: usize,
        hyperedges: Vec<Hyperedge>,
        weights: Vec<f64>,
        window_end: usize,
    ) -> Result<Self, HypergraphError> {
        if hyperedges.is_empty() {
            return Err(HypergraphError::NoEdges);
        }
        assert_eq!(hyperedges.len(), weights.len(), "one weight per hyperedge");
        let mut vertex_degrees = vec![0.0; n_nodes];
        let mut covered = vec![false; n_nodes];
        for (edge, &w) in hyperedges.iter().zip(&weights) {
            validate_edge(edge, n_nodes)?;
            if !(w > 0.0) || !w.is_finite() {
                return Err(HypergraphError::BadWeight(w));
            }
            for &v in &edge.nodes {
                vertex_degrees[v] += w;
                covered[v] = true;
            }
        }
        if let Some(v) = covered.iter().position(|c| !c) {
            return Err(HypergraphError::UncoveredNode(v));
        }
        let edge_degrees = hyperedges.iter().map(|e| e.nodes.len()).collect();
        Ok(Self {
            n_nodes,
            hyperedges,
            weights,
            vertex_degrees,
            edge_degrees,
            window_end,
        })
    }

    pub fn n_edges(&self) -> usize {
        self.hyperedges.len()
    }

    /// Node lists per hyperedge.
    pub fn members(&self) -> Vec<Vec<usize>> {
        self.hyperedges.iter().map(|e| e.nodes.clone()).collect()
    }

    /// Community label of each node among the hyperedges of one source,
    /// labels counted in edge order.
    pub fn assignment(&self, source: EdgeSource) -> Vec<usize> {
        let mut out = vec![0; self.n_nodes];
        for (label, e) in self.hyperedges.iter().filter(|e| e.source == source).enumerate() {
            for &v in &e.nodes {
                out[v] = label;
            }
        }
        out
    }

    /// Dense `N_V × N_e` incidence matrix.
    pub fn incidence_dense(&self) -> Array2<f64> {
        let mut h = Array2::zeros((self.n_nodes, self.n_edges()));
        for (j, e) in self.hyperedges.iter().enumerate() {
            for &v in &e.nodes {
                h[[v, j]] = 1.0;
            }
        }
        h
    }

    /// Same hyperedges, weights recomputed from a new attention matrix.
    pub fn reweighted(&self, attention: &Array2<f64>) -> Result<Self, HypergraphError> {
        let weights = self
            .hyperedges
            .iter()
            .map(|e| hyperedge_weight(&e.nodes, attention))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_parts(self.n_nodes, self.hyperedges.clone(), weights, self.window_end)
    }

    /// Write the line-oriented text record.
    pub fn write_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "SNAPSHOT window_end={} nodes={}", self.window_end, self.n_nodes)?;
        for (e, w) in self.hyperedges.iter().zip(&self.weights) {
            write!(out, "{} {w}", e.source)?;
            for v in &e.nodes {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("record is ASCII")
    }

    /// Parse exactly one snapshot record.
    pub fn deserialize(text: &str) -> Result<Self, HypergraphError> {
        let mut all = read_archive(text.as_bytes())?;
        match all.len() {
            1 => Ok(all.pop().unwrap()),
            0 => Err(HypergraphError::Parse {
                line: 1,
                message: "no SNAPSHOT header".into(),
            }),
            k => Err(HypergraphError::Parse {
                line: 1,
                message: format!("expected one snapshot, found {k}"),
            }),
        }
    }
}

/// Combine COM and ATT hyperedges (in that order) and weight each from `attention`.
pub fn assemble_snapshot(
    com_edges: Vec<Hyperedge>,
    att_edges: Vec<Hyperedge>,
    attention: &Array2<f64>,
    n_nodes: usize,
    window_end: usize,
) -> Result<HypergraphSnapshot, HypergraphError> {
    if attention.dim() != (n_nodes, n_nodes) {
        return Err(HypergraphError::AttentionShape {
            rows: attention.nrows(),
            cols: attention.ncols(),
            n: n_nodes,
        });
    }
    let mut edges = com_edges;
    edges.extend(att_edges);
    if edges.is_empty() {
        return Err(HypergraphError::NoEdges);
    }
    let weights = edges
        .iter()
        .map(|e| hyperedge_weight(&e.nodes, attention))
        .collect::<Result<Vec<_>, _>>()?;
    HypergraphSnapshot::from_parts(n_nodes, edges, weights, window_end)
}

/// Write a sequence of snapshots, one record after another.
pub fn write_archive<W: Write>(snapshots: &[HypergraphSnapshot], out: &mut W) -> std::io::Result<()> {
    for s in snapshots {
        s.write_to(out)?;
    }
    Ok(())
}

fn parse_err(line: usize, message: impl Into<String>) -> HypergraphError {
    HypergraphError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_header(line_no: usize, line: &str) -> Result<(usize, usize), HypergraphError> {
    let mut parts = line.split(' ');
    if parts.next() != Some("SNAPSHOT") {
        return Err(parse_err(line_no, "expected `SNAPSHOT` header"));
    }
    let mut field = |key: &str| -> Result<usize, HypergraphError> {
        let tok = parts
            .next()
            .ok_or_else(|| parse_err(line_no, format!("missing `{key}=`")))?;
        let value = tok
            .strip_prefix(key)
            .and_then(|t| t.strip_prefix('='))
            .ok_or_else(|| parse_err(line_no, format!("expected `{key}=<n>`, got `{tok}`")))?;
        value
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad {key} value `{value}`")))
    };
    let window_end = field("window_end")?;
    let nodes = field("nodes")?;
    if parts.next().is_some() {
        return Err(parse_err(line_no, "trailing fields in header"));
    }
    Ok((window_end, nodes))
}

/// Read every snapshot record from an archive.
pub fn read_archive<R: BufRead>(reader: R) -> Result<Vec<HypergraphSnapshot>, HypergraphError> {
    struct Pending {
        header_line: usize,
        window_end: usize,
        n_nodes: usize,
        edges: Vec<Hyperedge>,
        weights: Vec<f64>,
    }
    fn finish(p: Pending) -> Result<HypergraphSnapshot, HypergraphError> {
        HypergraphSnapshot::from_parts(p.n_nodes, p.edges, p.weights, p.window_end)
            .map_err(|e| parse_err(p.header_line, format!("invalid snapshot: {e}")))
    }

    let mut out = Vec::new();
    let mut pending: Option<Pending> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| HypergraphError::Io(e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        if line.starts_with("SNAPSHOT") {
            if let Some(p) = pending.take() {
                out.push(finish(p)?);
            }
            let (window_end, n_nodes) = parse_header(line_no, &line)?;
            pending = Some(Pending {
                header_line: line_no,
                window_end,
                n_nodes,
                edges: Vec::new(),
                weights: Vec::new(),
            });
            continue;
        }
        let p = pending
            .as_mut()
            .ok_or_else(|| parse_err(line_no, "hyperedge before any SNAPSHOT header"))?;
        let mut fields = line.split(' ');
        let tag = fields.next().unwrap_or_default();
        let source = EdgeSource::parse(tag)
            .ok_or_else(|| parse_err(line_no, format!("unknown tag `{tag}`")))?;
        let wtok = fields
            .next()
            .ok_or_else(|| parse_err(line_no, "missing weight"))?;
        let weight: f64 = wtok
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad weight `{wtok}`")))?;
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(parse_err(line_no, format!("weight {weight} must be positive")));
        }
        let nodes = fields
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| parse_err(line_no, format!("bad node index `{t}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let edge = Hyperedge { source, nodes };
        validate_edge(&edge, p.n_nodes).map_err(|e| parse_err(line_no, e.to_string()))?;
        p.edges.push(edge);
        p.weights.push(weight);
    }
    if let Some(p) = pending {
        out.push(finish(p)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::community::{build_modularity_filtered, Partition};
    use ndarray::array;

    fn edges(source: EdgeSource, sets: &[&[usize]]) -> Vec<Hyperedge> {
        sets.iter()
            .map(|s| Hyperedge {
                source,
                nodes: s.to_vec(),
            })
            .collect()
    }

    #[test]
    fn partition_to_edges() {
        let m = build_modularity_filtered(&Array2::zeros((3, 3)), 1.0).unwrap();
        let p = Partition::new(&[0, 0, 1], &m);
        let e = hyperedges_from_partition(&p, EdgeSource::Com);
        assert_eq!(e.iter().map(|e| e.nodes.clone()).collect::<Vec<_>>(), vec![vec![0, 1], vec![2]]);
        let p = Partition::new(&[0, 1, 2], &m);
        assert_eq!(hyperedges_from_partition(&p, EdgeSource::Att).len(), 3);
        let p = Partition::new(&[4, 4, 4], &m);
        assert_eq!(hyperedges_from_partition(&p, EdgeSource::Att)[0].nodes, vec![0, 1, 2]);
    }

    #[test]
    fn weights() {
        let a = array![[0.0, 0.3], [-0.1, 0.0]];
        assert!((hyperedge_weight(&[0, 1], &a).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(hyperedge_weight(&[1], &a).unwrap(), WEIGHT_FLOOR);
        let a = Array2::from_elem((3, 3), 0.1);
        assert!((hyperedge_weight(&[0, 1, 2], &a).unwrap() - 0.6).abs() < 1e-15);
        assert!(matches!(
            hyperedge_weight(&[0, 3], &a),
            Err(HypergraphError::NodeOutOfRange { node: 3, .. })
        ));
        assert_eq!(hyperedge_weight(&[0, 1], &Array2::zeros((2, 2))).unwrap(), WEIGHT_FLOOR);
    }

    #[test]
    fn assemble_incidence_and_degrees() {
        let a = Array2::from_elem((3, 3), 0.1);
        let s = assemble_snapshot(
            edges(EdgeSource::Com, &[&[0, 1], &[2]]),
            edges(EdgeSource::Att, &[&[0, 1, 2]]),
            &a,
            3,
            5,
        )
        .unwrap();
        assert_eq!(s.incidence_dense(), array![[1.0, 0.0, 1.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]]);
        assert_eq!(s.edge_degrees, vec![2, 1, 3]);

        let a = array![[0.0, 0.3], [-0.1, 0.0]];
        let s = assemble_snapshot(edges(EdgeSource::Com, &[&[0, 1]]), vec![], &a, 2, 0).unwrap();
        assert!((s.vertex_degrees[0] - 0.4).abs() < 1e-15);
        assert!((s.vertex_degrees[1] - 0.4).abs() < 1e-15);
        assert_eq!(s.edge_degrees, vec![2]);

        assert_eq!(
            assemble_snapshot(vec![], vec![], &a, 2, 0).unwrap_err(),
            HypergraphError::NoEdges
        );
        assert_eq!(
            assemble_snapshot(edges(EdgeSource::Com, &[&[0]]), vec![], &a, 2, 0).unwrap_err(),
            HypergraphError::UncoveredNode(1)
        );
    }

    #[test]
    fn duplicate_sets_are_kept() {
        let a = Array2::from_elem((3, 3), 0.2);
        let sets: &[&[usize]] = &[&[0, 2], &[1]];
        let s = assemble_snapshot(edges(EdgeSource::Com, sets), edges(EdgeSource::Att, sets), &a, 3, 0)
            .unwrap();
        assert_eq!(s.n_edges(), 4);
    }

    #[test]
    fn text_format() {
        let a = array![[0.0, 0.3, 0.0], [-0.1, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let s = assemble_snapshot(
            edges(EdgeSource::Com, &[&[0, 1], &[2]]),
            edges(EdgeSource::Att, &[&[0, 1, 2]]),
            &a,
            3,
            9,
        )
        .unwrap();
        let text = s.serialize();
        let w = 0.3f64 + 0.1;
        assert_eq!(
            text,
            format!("SNAPSHOT window_end=9 nodes=3\nCOM {w} 0 1\nCOM 0.000001 2\nATT {w} 0 1 2\n")
        );
        assert_eq!(HypergraphSnapshot::deserialize(&text).unwrap(), s);
    }

    #[test]
    fn parse_errors() {
        let bad = "SNAPSHOT window_end=1 nodes=2\nCOM 0.5\n";
        assert!(matches!(
            HypergraphSnapshot::deserialize(bad),
            Err(HypergraphError::Parse { line: 2, .. })
        ));
        let zero = "SNAPSHOT window_end=1 nodes=2\nCOM 0 0 1\n";
        assert!(matches!(
            HypergraphSnapshot::deserialize(zero),
            Err(HypergraphError::Parse { line: 2, .. })
        ));
        let tag = "SNAPSHOT window_end=1 nodes=2\nXYZ 1 0 1\n";
        assert!(HypergraphSnapshot::deserialize(tag).is_err());
        let range = "SNAPSHOT window_end=1 nodes=2\nCOM 1 0 2\n";
        assert!(HypergraphSnapshot::deserialize(range).is_err());
        let header = "SNAPSHOT nodes=2 window_end=1\nCOM 1 0 1\n";
        assert!(HypergraphSnapshot::deserialize(header).is_err());
        let orphan = "COM 1 0 1\n";
        assert!(HypergraphSnapshot::deserialize(orphan).is_err());
        let empty = "SNAPSHOT window_end=1 nodes=2\n";
        assert!(HypergraphSnapshot::deserialize(empty).is_err());
    }

    #[test]
    fn archive_round_trip() {
        let a = Array2::from_elem((2, 2), 0.25);
        let snaps: Vec<_> = (0..3)
            .map(|t| assemble_snapshot(edges(EdgeSource::Com, &[&[0, 1]]), edges(EdgeSource::Att, &[&[0], &[1]]), &a, 2, t).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_archive(&snaps, &mut buf).unwrap();
        assert_eq!(read_archive(buf.as_slice()).unwrap(), snaps);
    }
}
