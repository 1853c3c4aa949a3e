//! DAG over compartment outputs with a metric sink.
//!
//! Every compartment node implicitly has the calibration input `x` as a
//! parent; the graph stores compartment-to-compartment edges and which
//! compartments feed the metric `g`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INPUT_NODE: &str = "x";
pub const METRIC_NODE: &str = "g";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FunctionNetwork {
    names: Vec<String>,
    parents: Vec<Vec<usize>>,
    metric_edges: Vec<bool>,
}

/// Serialized form: node names (including `x` and `g`) and directed edges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyDoc {
    pub nodes: Vec<String>,
    pub edges: Vec<[String; 2]>,
}

impl FunctionNetwork {
    pub fn new(names: Vec<String>, parents: Vec<Vec<usize>>, metric_edges: Vec<bool>) -> Result<Self> {
        let n = names.len();
        if n == 0 || parents.len() != n || metric_edges.len() != n {
            return Err(Error::InvalidArgument("network needs one parent list and metric flag per node".into()));
        }
        for (i, ps) in parents.iter().enumerate() {
            if ps.iter().any(|p| *p >= n || *p == i) {
                return Err(Error::InvalidArgument(format!("invalid parent list for node {}", names[i])));
            }
        }
        let net = Self { names, parents, metric_edges };
        net.topological_order()?;
        Ok(net)
    }

    /// S -> I -> Q, and I, Q -> R; every compartment feeds the metric.
    pub fn siqr() -> Self {
        Self {
            names: ["S", "I", "Q", "R"].iter().map(|s| s.to_string()).collect(),
            parents: vec![vec![], vec![0], vec![1], vec![1, 2]],
            metric_edges: vec![true; 4],
        }
    }

    /// `n` unconnected compartments, all feeding the metric.
    pub fn independent(n: usize) -> Self {
        Self {
            names: (0..n).map(|i| format!("y{}", i + 1)).collect(),
            parents: vec![Vec::new(); n],
            metric_edges: vec![true; n],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "siqr" => Ok(Self::siqr()),
            other => Err(Error::InvalidArgument(format!("unknown network preset {other:?}"))),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parents(&self, i: usize) -> &[usize] {
        &self.parents[i]
    }

    pub fn metric_edges(&self) -> &[bool] {
        &self.metric_edges
    }

    pub fn children(&self, i: usize) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&c| self.parents[c].contains(&i)).collect()
    }

    /// Kahn's algorithm, always taking the lowest ready index.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let n = self.n_nodes();
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut done = vec![false; n];
        let mut order = Vec::with_capacity(n);
        while order.len() < n {
            let next = (0..n).find(|&i| !done[i] && indeg[i] == 0).ok_or_else(|| {
                Error::InvalidArgument("compartment graph has a cycle".into())
            })?;
            done[next] = true;
            order.push(next);
            for c in self.children(next) {
                indeg[c] -= 1;
            }
        }
        Ok(order)
    }

    /// Nodes with a directed path to the metric sink.
    pub fn metric_ancestors(&self) -> Vec<bool> {
        let mut anc = self.metric_edges.clone();
        let mut changed = true;
        while changed {
            changed = false;
            for i in 0..self.n_nodes() {
                if anc[i] {
                    for &p in &self.parents[i] {
                        if !anc[p] {
                            anc[p] = true;
                            changed = true;
                        }
                    }
                }
            }
        }
        anc
    }

    /// Keeps metric edges only for observed compartments. Compartment edges
    /// are untouched, so an unobserved node with an observed descendant stays
    /// an ancestor of the metric.
    pub fn prune_metric_edges(&self, observed: &[bool]) -> Result<Self> {
        if observed.len() != self.n_nodes() {
            return Err(Error::InvalidArgument("mask length differs from node count".into()));
        }
        if !observed.iter().any(|o| *o) {
            return Err(Error::EmptyMask(0));
        }
        let before = self.metric_ancestors();
        let mut out = self.clone();
        for (e, o) in out.metric_edges.iter_mut().zip(observed) {
            *e = *e && *o;
        }
        let after = out.metric_ancestors();
        for i in 0..self.n_nodes() {
            let feeds_observed = self.descendants(i).iter().any(|&d| after[d] && out.metric_edges[d]);
            debug_assert!(!(before[i] && feeds_observed) || after[i], "ancestor relation lost for {}", self.names[i]);
        }
        Ok(out)
    }

    fn descendants(&self, i: usize) -> Vec<usize> {
        let mut seen = vec![false; self.n_nodes()];
        let mut stack = self.children(i);
        while let Some(c) = stack.pop() {
            if !seen[c] {
                seen[c] = true;
                stack.extend(self.children(c));
            }
        }
        (0..self.n_nodes()).filter(|&d| seen[d]).collect()
    }

    pub fn to_doc(&self) -> TopologyDoc {
        let mut nodes = vec![INPUT_NODE.to_string()];
        nodes.extend(self.names.iter().cloned());
        nodes.push(METRIC_NODE.to_string());
        let mut edges = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            edges.push([INPUT_NODE.to_string(), name.clone()]);
            for &p in &self.parents[i] {
                edges.push([self.names[p].clone(), name.clone()]);
            }
        }
        for (i, name) in self.names.iter().enumerate() {
            if self.metric_edges[i] {
                edges.push([name.clone(), METRIC_NODE.to_string()]);
            }
        }
        TopologyDoc { nodes, edges }
    }

    pub fn from_doc(doc: &TopologyDoc) -> Result<Self> {
        let names: Vec<String> = doc
            .nodes
            .iter()
            .filter(|n| n.as_str() != INPUT_NODE && n.as_str() != METRIC_NODE)
            .cloned()
            .collect();
        let index = |n: &str| names.iter().position(|m| m == n);
        let mut parents = vec![Vec::new(); names.len()];
        let mut metric = vec![false; names.len()];
        for [from, to] in &doc.edges {
            if to == INPUT_NODE {
                return Err(Error::InvalidArgument("the input node cannot have parents".into()));
            }
            if from == METRIC_NODE {
                return Err(Error::InvalidArgument("the metric node cannot have children".into()));
            }
            if from == INPUT_NODE {
                if index(to).is_none() {
                    return Err(Error::InvalidArgument(format!("unknown node {to:?}")));
                }
                continue;
            }
            let f = index(from).ok_or_else(|| Error::InvalidArgument(format!("unknown node {from:?}")))?;
            if to == METRIC_NODE {
                metric[f] = true;
            } else {
                let t = index(to).ok_or_else(|| Error::InvalidArgument(format!("unknown node {to:?}")))?;
                if !parents[t].contains(&f) {
                    parents[t].push(f);
                }
            }
        }
        for p in &mut parents {
            p.sort_unstable();
        }
        Self::new(names, parents, metric)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("topology serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TopologyDoc = serde_json::from_str(text)?;
        Self::from_doc(&doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn siqr_parents_and_order() {
        let net = FunctionNetwork::siqr();
        assert_eq!(net.parents(3), &[1, 2]);
        assert_eq!(net.topological_order().unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(net.metric_ancestors(), vec![true; 4]);
    }

    #[test]
    fn json_round_trip() {
        let net = FunctionNetwork::siqr();
        let back = FunctionNetwork::from_json(&net.to_json()).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn cycles_are_rejected() {
        let doc = r#"{"nodes":["x","a","b","g"],"edges":[["a","b"],["b","a"],["a","g"]]}"#;
        assert!(FunctionNetwork::from_json(doc).is_err());
        let doc = r#"{"nodes":["x","a","g"],"edges":[["g","a"]]}"#;
        assert!(FunctionNetwork::from_json(doc).is_err());
    }

    #[test]
    fn pruning_keeps_hidden_ancestors() {
        let net = FunctionNetwork::siqr();
        assert_eq!(net.prune_metric_edges(&[true; 4]).unwrap(), net);
        let hidden_s = net.prune_metric_edges(&[false, true, true, true]).unwrap();
        assert_eq!(hidden_s.metric_edges(), &[false, true, true, true]);
        assert!(hidden_s.metric_ancestors()[0]);
        let only_s = net.prune_metric_edges(&[true, false, false, false]).unwrap();
        assert_eq!(only_s.metric_ancestors(), vec![true, false, false, false]);
        assert_eq!(only_s.n_nodes(), 4);
        assert!(matches!(net.prune_metric_edges(&[false; 4]), Err(Error::EmptyMask(_))));
    }
}
