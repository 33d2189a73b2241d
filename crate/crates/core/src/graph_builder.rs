//! Rule-based entity/anatomy report graphs and their node features.
//!
//! Observation nodes come from entity mentions (class from polarity), anatomy
//! nodes from maximal anatomy-token runs. Edges join every observation to every
//! anatomy node of the same sentence.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::report_nlp::{anatomy_runs, EntityId, Lexicon, Polarity, Report};
use crate::seed;

pub const PHRASE_DIM: usize = 768;
pub const CLASS_DIM: usize = 4;
pub const NODE_FEATURE_DIM: usize = PHRASE_DIM + CLASS_DIM;
/// Hashed coordinates touched by each trigram.
const TRIGRAM_FANOUT: u64 = 8;
const FEATURE_SEED: u64 = 0x6772_6170_6866_6561;
pub const SENTINEL_PHRASE: &str = "GLOBAL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeClass {
    #[serde(rename = "ANAT-DP")]
    AnatDp,
    #[serde(rename = "OBS-DP")]
    ObsDp,
    #[serde(rename = "OBS-DA")]
    ObsDa,
    #[serde(rename = "OBS-U")]
    ObsU,
}

impl NodeClass {
    pub const ALL: [NodeClass; CLASS_DIM] = [NodeClass::AnatDp, NodeClass::ObsDp, NodeClass::ObsDa, NodeClass::ObsU];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeClass::AnatDp => "ANAT-DP",
            NodeClass::ObsDp => "OBS-DP",
            NodeClass::ObsDa => "OBS-DA",
            NodeClass::ObsU => "OBS-U",
        }
    }

    fn from_polarity(p: Polarity) -> Self {
        match p {
            Polarity::Positive => NodeClass::ObsDp,
            Polarity::Negated => NodeClass::ObsDa,
            Polarity::Uncertain => NodeClass::ObsU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub phrase: String,
    pub class: NodeClass,
    /// Source sentence index, when extracted by rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence: Option<usize>,
    /// Entity of an observation node, when extracted by rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<EntityId>,
}

impl GraphNode {
    pub fn new(phrase: impl Into<String>, class: NodeClass) -> Self {
        Self { phrase: phrase.into(), class, sentence: None, entity: None }
    }

    pub fn key(&self) -> (&str, NodeClass) {
        (&self.phrase, self.class)
    }
}

/// Nodes, undirected edges (`i < j`, sorted, no self edges) and the n×772 features.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportGraph {
    nodes: Vec<GraphNode>,
    edges: Vec<(usize, usize)>,
    node_features: Matrix,
}

impl ReportGraph {
    pub fn new(nodes: Vec<GraphNode>, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::invalid("a graph needs at least one node"));
        }
        if let Some(n) = nodes.iter().find(|n| n.phrase.trim().is_empty()) {
            return Err(Error::invalid(format!("empty phrase for {} node", n.class.name())));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= nodes.len() || b >= nodes.len() {
                return Err(Error::invalid(format!("edge ({a},{b}) out of range for {} nodes", nodes.len())));
            }
            if a == b {
                return Err(Error::invalid(format!("self edge on node {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let node_features = featurize_nodes(&nodes);
        Ok(Self { nodes, edges: set.into_iter().collect(), node_features })
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_features(&self) -> &Matrix {
        &self.node_features
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_sentinel(&self) -> bool {
        self.nodes.len() == 1 && self.nodes[0].phrase == SENTINEL_PHRASE
    }

    /// Order-independent form: sorted node keys and sorted edges over those keys.
    pub fn canonical_form(&self) -> (Vec<(String, NodeClass)>, Vec<((String, NodeClass), (String, NodeClass))>) {
        let key = |i: usize| (self.nodes[i].phrase.clone(), self.nodes[i].class);
        let mut nodes: Vec<_> = (0..self.nodes.len()).map(key).collect();
        nodes.sort();
        let mut edges: Vec<_> = self
            .edges
            .iter()
            .map(|&(a, b)| {
                let (ka, kb) = (key(a), key(b));
                if ka <= kb { (ka, kb) } else { (kb, ka) }
            })
            .collect();
        edges.sort();
        (nodes, edges)
    }
}

/// Graph of a parsed report.
pub fn extract_graph(report: &Report, lexicon: &Lexicon) -> ReportGraph {
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for (si, sentence) in report.sentences.iter().enumerate() {
        let mut spans: Vec<(usize, GraphNode)> = Vec::new();
        for m in &sentence.mentions {
            let toks: Vec<&str> = sentence.tokens[m.start..m.end]
                .iter()
                .filter(|t| !lexicon.is_anatomy_token(t))
                .map(String::as_str)
                .collect();
            let phrase =
                if toks.is_empty() { sentence.tokens[m.start..m.end].join(" ") } else { toks.join(" ") };
            let node = GraphNode {
                phrase,
                class: NodeClass::from_polarity(m.polarity),
                sentence: Some(si),
                entity: Some(m.entity),
            };
            spans.push((m.start, node));
        }
        for (start, end) in anatomy_runs(sentence, lexicon) {
            let node = GraphNode {
                phrase: sentence.tokens[start..end].join(" "),
                class: NodeClass::AnatDp,
                sentence: Some(si),
                entity: None,
            };
            spans.push((start, node));
        }
        spans.sort_by_key(|(start, n)| (*start, n.class != NodeClass::AnatDp));
        let base = nodes.len();
        for (i, (_, a)) in spans.iter().enumerate() {
            for (j, (_, b)) in spans.iter().enumerate().skip(i + 1) {
                if (a.class == NodeClass::AnatDp) != (b.class == NodeClass::AnatDp) {
                    edges.push((base + i, base + j));
                }
            }
        }
        nodes.extend(spans.into_iter().map(|(_, n)| n));
    }
    if nodes.is_empty() {
        nodes.push(GraphNode::new(SENTINEL_PHRASE, NodeClass::AnatDp));
    }
    ReportGraph::new(nodes, edges).expect("rule graph is well formed")
}

/// 768-dim hashed character-trigram phrase feature, unit norm.
pub fn phrase_feature(phrase: &str) -> [f64; PHRASE_DIM] {
    let padded: Vec<char> = format!("  {} ", phrase.to_lowercase()).chars().collect();
    let mut v = [0.0; PHRASE_DIM];
    for w in padded.windows(3) {
        let tri: String = w.iter().collect();
        for k in 0..TRIGRAM_FANOUT {
            let h = seed::hash_with_seed(FEATURE_SEED ^ k, tri.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % PHRASE_DIM as u64) as usize] += sign;
        }
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        // All contributions cancelled; fall back to a single hashed coordinate.
        let h = seed::hash_with_seed(FEATURE_SEED, phrase.as_bytes());
        v[(h % PHRASE_DIM as u64) as usize] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// n×772 node inputs: phrase feature followed by the class one-hot.
pub fn featurize_nodes(nodes: &[GraphNode]) -> Matrix {
    let mut m = Matrix::zeros(nodes.len(), NODE_FEATURE_DIM);
    for (i, node) in nodes.iter().enumerate() {
        let row = m.row_mut(i);
        row[..PHRASE_DIM].copy_from_slice(&phrase_feature(&node.phrase));
        row[PHRASE_DIM + node.class.index()] = 1.0;
    }
    m
}

/// D^{-1/2}(A+I)D^{-1/2} with D the degree matrix of A+I.
pub fn normalized_adjacency(g: &ReportGraph) -> Matrix {
    let n = g.len();
    let mut deg = vec![1.0; n];
    for &(a, b) in g.edges() {
        deg[a] += 1.0;
        deg[b] += 1.0;
    }
    let inv: Vec<f64> = deg.iter().map(|d| 1.0 / f64::sqrt(*d)).collect();
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        m.set(i, i, inv[i] * inv[i]);
    }
    for &(a, b) in g.edges() {
        let v = inv[a] * inv[b];
        m.set(a, b, v);
        m.set(b, a, v);
    }
    m
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    id: String,
    nodes: Vec<GraphNode>,
    edges: Vec<(usize, usize)>,
}

/// Line-delimited graph records `{id, nodes:[{phrase, class}], edges:[[i,j]]}`.
pub fn write_graphs<W: Write>(mut out: W, graphs: &[(String, ReportGraph)]) -> Result<()> {
    for (id, g) in graphs {
        let rec = GraphRecord { id: id.clone(), nodes: g.nodes.clone(), edges: g.edges.clone() };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_graphs<R: BufRead>(input: R) -> Result<Vec<(String, ReportGraph)>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse { line: i + 1, msg };
        let rec: GraphRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let g = ReportGraph::new(rec.nodes, rec.edges).map_err(|e| parse(e.to_string()))?;
        out.push((rec.id, g));
    }
    Ok(out)
}

pub fn read_graphs_file(path: &Path) -> Result<Vec<(String, ReportGraph)>> {
    read_graphs(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(text: &str) -> ReportGraph {
        let lex = Lexicon::default_ref();
        extract_graph(&Report::parse_with("r", text, lex).unwrap(), lex)
    }

    fn keys(g: &ReportGraph) -> Vec<(String, NodeClass)> {
        g.nodes().iter().map(|n| (n.phrase.clone(), n.class)).collect()
    }

    #[test]
    fn right_pleural_effusion() {
        let g = graph("Right pleural effusion.");
        let mut k = keys(&g);
        k.sort();
        assert_eq!(
            k,
            vec![("effusion".into(), NodeClass::ObsDp), ("right pleural".into(), NodeClass::AnatDp)]
        );
        assert_eq!(g.edges().len(), 1);
    }

    #[test]
    fn negated_single_node_and_sentinel() {
        let g = graph("No pneumothorax.");
        assert_eq!(keys(&g), vec![("pneumothorax".into(), NodeClass::ObsDa)]);
        assert!(g.edges().is_empty());
        let g = graph("Comparison with prior study.");
        assert!(g.is_sentinel());
        assert_eq!(g.nodes()[0].class, NodeClass::AnatDp);
    }

    #[test]
    fn uncertain_class() {
        let g = graph("Possible pneumonia.");
        assert_eq!(keys(&g), vec![("pneumonia".into(), NodeClass::ObsU)]);
    }

    #[test]
    fn features_rows() {
        let nodes = vec![
            GraphNode::new("effusion", NodeClass::ObsDp),
            GraphNode::new("effusion", NodeClass::ObsDp),
            GraphNode::new("effusion", NodeClass::ObsDa),
        ];
        let x = featurize_nodes(&nodes);
        assert_eq!(x.shape(), (3, NODE_FEATURE_DIM));
        assert_eq!(x.row(0), x.row(1));
        assert_eq!(x.row(0)[..PHRASE_DIM], x.row(2)[..PHRASE_DIM]);
        assert_ne!(x.row(0)[PHRASE_DIM..], x.row(2)[PHRASE_DIM..]);
        for i in 0..3 {
            let n = x.row(i)[..PHRASE_DIM].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adjacency_small_cases() {
        let g = ReportGraph::new(vec![GraphNode::new("a", NodeClass::AnatDp)], []).unwrap();
        assert_eq!(normalized_adjacency(&g).data(), &[1.0]);
        let g = ReportGraph::new(
            vec![GraphNode::new("a", NodeClass::AnatDp), GraphNode::new("b", NodeClass::ObsDp)],
            [(1, 0)],
        )
        .unwrap();
        assert!(normalized_adjacency(&g).data().iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn rejects_malformed_graphs() {
        assert!(ReportGraph::new(vec![], []).is_err());
        let one = vec![GraphNode::new("a", NodeClass::AnatDp)];
        assert!(ReportGraph::new(one.clone(), [(0, 0)]).is_err());
        assert!(ReportGraph::new(one, [(0, 1)]).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_bad_class() {
        let g = graph("Right pleural effusion. No pneumothorax is seen.");
        let mut buf = Vec::new();
        write_graphs(&mut buf, &[("r1".into(), g.clone())]).unwrap();
        let back = read_graphs(&buf[..]).unwrap();
        assert_eq!(back, vec![("r1".to_string(), g)]);
        let bad = "{\"id\":\"x\",\"nodes\":[{\"phrase\":\"a\",\"class\":\"OBS-X\"}],\"edges\":[]}\n";
        assert!(matches!(read_graphs(bad.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }
}
