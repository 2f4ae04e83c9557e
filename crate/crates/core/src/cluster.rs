//! Node selection, head choice and layer partitioning for a deployment.
//!
//! Planning is a pure function of a [`ClusterSpec`] and a [`ModelSpec`]:
//!
//! 1. [`select_nodes`] prefers a single multi-GPU node that holds the whole
//!    model; otherwise it grows a chain greedily from the best head candidate,
//!    always taking the cheapest next hop.
//! 2. [`choose_head`] picks the node with the best `cpu_score * network_score`.
//! 3. [`partition_layers`] splits layers in proportion to
//!    `capacity_score * gpu_count` with largest-remainder rounding.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiler::LinkProfile;

/// Tokens in the reference activation used to price a link during selection.
pub const REFERENCE_TOKENS: u64 = 1024;

/// Fractional remainders closer than this are treated as ties.
const REMAINDER_TIE_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlacementError {
    #[error("cluster has no nodes")]
    EmptyCluster,
    #[error("no node offers GPU type `{gpu_type}`")]
    NoMatchingNodes { gpu_type: String },
    #[error(
        "insufficient GPU memory: required {required_bytes} bytes, available {available_bytes} bytes (deficit {} bytes)",
        .required_bytes - .available_bytes
    )]
    InsufficientMemory {
        required_bytes: u64,
        available_bytes: u64,
    },
    #[error("insufficient GPUs: required {required}, available {available}")]
    InsufficientGpus { required: u32, available: u32 },
    #[error("no link from `{from}` to any remaining candidate node")]
    Unreachable { from: String },
    #[error("{nodes} nodes cannot each host at least one of {layers} layers")]
    TooManyNodes { nodes: usize, layers: u32 },
    #[error("invalid cluster: {0}")]
    InvalidCluster(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Platform {
    Linux,
    Windows,
    ContainerizedVM,
}

/// A worker node as registered with the cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDescriptor {
    pub name: String,
    pub platform: Platform,
    pub gpu_type: String,
    pub gpu_count: u32,
    pub gpu_mem_bytes: u64,
    /// Relative compute throughput of one GPU on this node.
    pub capacity_score: f64,
    pub cpu_score: f64,
    pub network_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<String>,
}

impl NodeDescriptor {
    pub fn validate(&self) -> Result<(), PlacementError> {
        let bad = |what: &str| {
            Err(PlacementError::InvalidCluster(format!(
                "node `{}`: {what}",
                self.name
            )))
        };
        if self.name.is_empty() {
            return bad("empty name");
        }
        if self.gpu_count == 0 {
            return bad("gpu_count must be >= 1");
        }
        for (label, v) in [
            ("capacity_score", self.capacity_score),
            ("cpu_score", self.cpu_score),
            ("network_score", self.network_score),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{label} must be positive"));
            }
        }
        Ok(())
    }

    pub fn total_mem_bytes(&self) -> u64 {
        self.gpu_mem_bytes.saturating_mul(u64::from(self.gpu_count))
    }

    /// Weight used for proportional layer allocation.
    pub fn partition_weight(&self) -> f64 {
        self.capacity_score * f64::from(self.gpu_count)
    }

    fn head_score(&self) -> f64 {
        self.cpu_score * self.network_score
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ClusterSpec {
    pub nodes: Vec<NodeDescriptor>,
    #[serde(default)]
    pub links: Vec<LinkProfile>,
}

impl ClusterSpec {
    pub fn from_json(s: &str) -> Result<Self, PlacementError> {
        let spec: Self =
            serde_json::from_str(s).map_err(|e| PlacementError::InvalidCluster(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PlacementError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            PlacementError::InvalidCluster(format!("{}: {e}", path.as_ref().display()))
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), PlacementError> {
        let mut names = BTreeSet::new();
        for n in &self.nodes {
            n.validate()?;
            if !names.insert(n.name.as_str()) {
                return Err(PlacementError::InvalidCluster(format!(
                    "duplicate node `{}`",
                    n.name
                )));
            }
        }
        let mut pairs = BTreeSet::new();
        for l in &self.links {
            if !names.contains(l.from.as_str()) || !names.contains(l.to.as_str()) {
                return Err(PlacementError::InvalidCluster(format!(
                    "link {}->{} references an unknown node",
                    l.from, l.to
                )));
            }
            if !pairs.insert((l.from.as_str(), l.to.as_str())) {
                return Err(PlacementError::InvalidCluster(format!(
                    "more than one link {}->{}",
                    l.from, l.to
                )));
            }
            l.validate()
                .map_err(|e| PlacementError::InvalidCluster(e.to_string()))?;
        }
        Ok(())
    }

    pub fn node(&self, name: &str) -> Option<&NodeDescriptor> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn link(&self, from: &str, to: &str) -> Option<&LinkProfile> {
        self.links.iter().find(|l| l.from == from && l.to == to)
    }
}

/// Shape of the served model as far as placement and transport care.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: u32,
    pub hidden_dim: u32,
    pub dtype_bytes: u32,
    pub bytes_per_layer: u64,
}

impl ModelSpec {
    /// Approximate built-in shapes. Weight sizes are parameter counts times
    /// storage width divided evenly over layers.
    pub fn preset(name: &str) -> Option<Self> {
        let m = |name: &str, num_layers, hidden_dim, bytes_per_layer| ModelSpec {
            name: name.to_string(),
            num_layers,
            hidden_dim,
            dtype_bytes: 2,
            bytes_per_layer,
        };
        match name {
            "llama2-7b" => Some(m("llama2-7b", 32, 4096, 421_150_976)),
            "llama-30b" => Some(m("llama-30b", 60, 6656, 1_083_333_333)),
            "llama2-70b-awq" => Some(m("llama2-70b-awq", 80, 8192, 431_104_051)),
            "tiny" => Some(m("tiny", 8, 256, 1 << 20)),
            _ => None,
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["llama2-7b", "llama-30b", "llama2-70b-awq", "tiny"]
    }

    pub fn validate(&self) -> Result<(), PlacementError> {
        if self.num_layers == 0 || self.hidden_dim == 0 || self.dtype_bytes == 0 || self.bytes_per_layer == 0
        {
            return Err(PlacementError::InvalidCluster(format!(
                "model `{}`: all dimensions must be >= 1",
                self.name
            )));
        }
        Ok(())
    }

    pub fn weight_bytes(&self) -> u64 {
        u64::from(self.num_layers).saturating_mul(self.bytes_per_layer)
    }

    /// Activation bytes crossing a stage boundary for `tokens` tokens.
    pub fn activation_bytes(&self, tokens: u64) -> u64 {
        tokens * u64::from(self.hidden_dim) * u64::from(self.dtype_bytes)
    }
}

/// One pipeline stage of a plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlacement {
    pub node: String,
    pub layers: Range<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub stages: Vec<StagePlacement>,
    pub head: String,
}

impl PartitionPlan {
    pub fn layer_counts(&self) -> Vec<u32> {
        self.stages.iter().map(|s| s.layers.end - s.layers.start).collect()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.stages.iter().map(|s| s.node.as_str())
    }

    pub fn validate(&self, num_layers: u32) -> Result<(), PlacementError> {
        let bad = |m: String| Err(PlacementError::InvalidCluster(m));
        let Some(first) = self.stages.first() else {
            return bad("plan has no stages".into());
        };
        if first.node != self.head {
            return bad(format!("head `{}` is not the first stage", self.head));
        }
        let mut next = 0;
        for s in &self.stages {
            if s.layers.start != next || s.layers.end <= s.layers.start {
                return bad(format!("stage on `{}` has range {:?}", s.node, s.layers));
            }
            next = s.layers.end;
        }
        if next != num_layers {
            return bad(format!("plan covers {next} of {num_layers} layers"));
        }
        Ok(())
    }
}

impl fmt::Display for PartitionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.stages.iter().map(|s| s.node.len()).max().unwrap_or(4).max(4);
        writeln!(f, "{:<5}  {:<width$}  {:>9}  {:>6}", "stage", "node", "layers", "count")?;
        for (i, s) in self.stages.iter().enumerate() {
            let range = format!("{}..{}", s.layers.start, s.layers.end);
            let head = if s.node == self.head { " (head)" } else { "" };
            writeln!(
                f,
                "{:<5}  {:<width$}  {:>9}  {:>6}{head}",
                i,
                s.node,
                range,
                s.layers.end - s.layers.start
            )?;
        }
        Ok(())
    }
}

/// Cost of shipping the reference activation across `link`.
pub fn link_cost(link: &LinkProfile, m: &ModelSpec) -> f64 {
    let payload = m.activation_bytes(REFERENCE_TOKENS);
    link.latency_s + payload as f64 / link.bandwidth_bps
}

/// Pick the nodes that will serve `m`, in pipeline order.
pub fn select_nodes(
    c: &ClusterSpec,
    m: &ModelSpec,
    required_gpu_type: &str,
    required_gpu_count: u32,
) -> Result<Vec<NodeDescriptor>, PlacementError> {
    if c.nodes.is_empty() {
        return Err(PlacementError::EmptyCluster);
    }
    let candidates: Vec<&NodeDescriptor> = c
        .nodes
        .iter()
        .filter(|n| n.gpu_type.eq_ignore_ascii_case(required_gpu_type))
        .collect();
    if candidates.is_empty() {
        return Err(PlacementError::NoMatchingNodes {
            gpu_type: required_gpu_type.to_string(),
        });
    }
    let model_bytes = m.weight_bytes();

    let single: Vec<&NodeDescriptor> = candidates
        .iter()
        .copied()
        .filter(|n| n.gpu_count >= required_gpu_count && n.total_mem_bytes() >= model_bytes)
        .collect();
    if let Some(best) = best_head(&single) {
        return Ok(vec![best.clone()]);
    }

    let available_bytes: u64 = candidates.iter().map(|n| n.total_mem_bytes()).sum();
    if available_bytes < model_bytes {
        return Err(PlacementError::InsufficientMemory {
            required_bytes: model_bytes,
            available_bytes,
        });
    }
    let available_gpus: u32 = candidates.iter().map(|n| n.gpu_count).sum();
    if available_gpus < required_gpu_count {
        return Err(PlacementError::InsufficientGpus {
            required: required_gpu_count,
            available: available_gpus,
        });
    }

    let head = best_head(&candidates).expect("candidates is non-empty");
    let mut chain = vec![head];
    let mut mem = head.total_mem_bytes();
    let mut gpus = head.gpu_count;
    while mem < model_bytes || gpus < required_gpu_count {
        let tail = chain.last().unwrap();
        let next = candidates
            .iter()
            .copied()
            .filter(|n| !chain.iter().any(|c| c.name == n.name))
            .filter_map(|n| c.link(&tail.name, &n.name).map(|l| (link_cost(l, m), n)))
            .min_by(|(ca, a), (cb, b)| ca.total_cmp(cb).then_with(|| a.name.cmp(&b.name)));
        let Some((_, n)) = next else {
            return Err(PlacementError::Unreachable {
                from: tail.name.clone(),
            });
        };
        mem += n.total_mem_bytes();
        gpus += n.gpu_count;
        chain.push(n);
    }
    Ok(chain.into_iter().cloned().collect())
}

fn best_head<'a>(nodes: &[&'a NodeDescriptor]) -> Option<&'a NodeDescriptor> {
    nodes.iter().copied().min_by(|a, b| {
        b.head_score()
            .total_cmp(&a.head_score())
            .then_with(|| a.name.cmp(&b.name))
    })
}

/// Name of the node best suited to host the request queue and controller.
pub fn choose_head(nodes: &[NodeDescriptor]) -> Option<String> {
    let refs: Vec<&NodeDescriptor> = nodes.iter().collect();
    best_head(&refs).map(|n| n.name.clone())
}

/// Rotate `nodes` so the chosen head is first, keeping cyclic order.
pub fn rotate_head(nodes: &mut [NodeDescriptor]) -> Option<String> {
    let head = choose_head(nodes)?;
    let pos = nodes.iter().position(|n| n.name == head)?;
    nodes.rotate_left(pos);
    Some(head)
}

/// Split `total` units over `weights` proportionally. Every entry receives at
/// least one unit; the rest go by largest remainder, ties to the lower index.
///
/// Requires `total >= weights.len()` and positive weights.
pub fn apportion(total: u32, weights: &[f64]) -> Vec<u32> {
    let n = weights.len();
    assert!(n > 0 && total as usize >= n);
    let mut pinned = vec![false; n];
    let (quotas, free_total) = loop {
        let pinned_count = pinned.iter().filter(|p| **p).count() as u32;
        let free_total = total - pinned_count;
        let free_weight: f64 = (0..n).filter(|&i| !pinned[i]).map(|i| weights[i]).sum();
        let quotas: Vec<f64> = (0..n)
            .map(|i| {
                if pinned[i] {
                    0.0
                } else {
                    f64::from(free_total) * weights[i] / free_weight
                }
            })
            .collect();
        let mut changed = false;
        for i in 0..n {
            if !pinned[i] && quotas[i] < 1.0 {
                pinned[i] = true;
                changed = true;
            }
        }
        if !changed {
            break (quotas, free_total);
        }
    };

    let mut alloc: Vec<u32> = (0..n)
        .map(|i| if pinned[i] { 1 } else { quotas[i].floor() as u32 })
        .collect();
    let assigned: u32 = (0..n).filter(|&i| !pinned[i]).map(|i| alloc[i]).sum();
    let rem = |i: usize| quotas[i] - quotas[i].floor();
    let mut order: Vec<usize> = (0..n).filter(|&i| !pinned[i]).collect();
    order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
    // remainders equal up to rounding noise form one group, ordered by index
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && rem(order[end - 1]) - rem(order[end]) <= REMAINDER_TIE_EPS {
            end += 1;
        }
        order[start..end].sort_unstable();
        start = end;
    }
    for &i in order.iter().take((free_total - assigned) as usize) {
        alloc[i] += 1;
    }
    alloc
}

/// Assign contiguous layer ranges to `nodes` in order; the first node is head.
pub fn partition_layers(
    nodes: &[NodeDescriptor],
    m: &ModelSpec,
) -> Result<PartitionPlan, PlacementError> {
    if nodes.is_empty() {
        return Err(PlacementError::EmptyCluster);
    }
    if nodes.len() > m.num_layers as usize {
        return Err(PlacementError::TooManyNodes {
            nodes: nodes.len(),
            layers: m.num_layers,
        });
    }
    let weights: Vec<f64> = nodes.iter().map(NodeDescriptor::partition_weight).collect();
    let counts = apportion(m.num_layers, &weights);
    let mut lo = 0;
    let stages = nodes
        .iter()
        .zip(counts)
        .map(|(n, c)| {
            let s = StagePlacement {
                node: n.name.clone(),
                layers: lo..lo + c,
            };
            lo += c;
            s
        })
        .collect();
    Ok(PartitionPlan {
        stages,
        head: nodes[0].name.clone(),
    })
}

/// Full planning pipeline: select, rotate the head to the front, partition.
pub fn plan_deployment(
    c: &ClusterSpec,
    m: &ModelSpec,
    gpu_type: &str,
    gpu_count: u32,
) -> Result<PartitionPlan, PlacementError> {
    m.validate()?;
    let mut nodes = select_nodes(c, m, gpu_type, gpu_count)?;
    rotate_head(&mut nodes);
    partition_layers(&nodes, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn node(name: &str, gpus: u32, mem_gib: u64, cap: f64) -> NodeDescriptor {
        NodeDescriptor {
            name: name.into(),
            platform: Platform::Linux,
            gpu_type: "RTX4090".into(),
            gpu_count: gpus,
            gpu_mem_bytes: mem_gib << 30,
            capacity_score: cap,
            cpu_score: 1.0,
            network_score: 1.0,
            address: None,
        }
    }

    fn model(layers: u32, gib_per_layer: u64) -> ModelSpec {
        ModelSpec {
            name: "m".into(),
            num_layers: layers,
            hidden_dim: 4096,
            dtype_bytes: 2,
            bytes_per_layer: gib_per_layer << 30,
        }
    }

    fn full_mesh(nodes: Vec<NodeDescriptor>, cost: impl Fn(&str, &str) -> f64) -> ClusterSpec {
        let mut links = Vec::new();
        for a in &nodes {
            for b in &nodes {
                if a.name != b.name {
                    links.push(LinkProfile::new(&a.name, &b.name, cost(&a.name, &b.name), 1e12));
                }
            }
        }
        ClusterSpec { nodes, links }
    }

    #[test]
    fn multi_gpu_node_is_preferred() {
        let c = full_mesh(
            vec![node("a", 1, 24, 1.0), node("big", 4, 24, 1.0), node("b", 1, 24, 1.0)],
            |_, _| 0.01,
        );
        let picked = select_nodes(&c, &model(32, 2), "rtx4090", 4).unwrap();
        assert_eq!(picked.len(), 1);
        assert_eq!(picked[0].name, "big");
    }

    #[test]
    fn two_equal_nodes_both_selected_in_name_order() {
        let c = full_mesh(vec![node("b", 1, 24, 1.0), node("a", 1, 24, 1.0)], |_, _| 0.01);
        let picked = select_nodes(&c, &model(32, 1), "RTX4090", 1).unwrap();
        let names: Vec<_> = picked.iter().map(|n| n.name.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
    }

    #[test]
    fn cheaper_link_wins_second_slot() {
        let mut a = node("a", 1, 24, 1.0);
        a.cpu_score = 4.0;
        let c = full_mesh(vec![a, node("b", 1, 24, 1.0), node("c", 1, 24, 1.0)], |x, y| {
            match (x, y) {
                ("a", "b") => 0.005,
                ("a", "c") => 0.050,
                _ => 0.020,
            }
        });
        let picked = select_nodes(&c, &model(32, 1), "RTX4090", 1).unwrap();
        let names: Vec<_> = picked.iter().map(|n| n.name.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
    }

    #[test]
    fn insufficient_memory_reports_deficit() {
        let c = full_mesh(vec![node("a", 1, 24, 1.0), node("b", 1, 24, 1.0)], |_, _| 0.01);
        let err = select_nodes(&c, &model(32, 2), "RTX4090", 1).unwrap_err();
        assert_eq!(
            err,
            PlacementError::InsufficientMemory {
                required_bytes: 64 << 30,
                available_bytes: 48 << 30
            }
        );
        assert!(err.to_string().contains(&format!("deficit {}", 16u64 << 30)));
    }

    #[test]
    fn wrong_gpu_type_and_empty_cluster() {
        let c = full_mesh(vec![node("a", 1, 24, 1.0)], |_, _| 0.01);
        assert!(matches!(
            select_nodes(&c, &model(4, 1), "A100", 1),
            Err(PlacementError::NoMatchingNodes { .. })
        ));
        assert_eq!(
            select_nodes(&ClusterSpec::default(), &model(4, 1), "A100", 1),
            Err(PlacementError::EmptyCluster)
        );
    }

    #[test]
    fn missing_links_make_chain_unreachable() {
        let c = ClusterSpec {
            nodes: vec![node("a", 1, 24, 1.0), node("b", 1, 24, 1.0)],
            links: vec![],
        };
        assert!(matches!(
            select_nodes(&c, &model(32, 1), "RTX4090", 1),
            Err(PlacementError::Unreachable { .. })
        ));
    }

    #[test]
    fn partition_examples() {
        let m = |l| model(l, 1);
        let eq = [node("a", 1, 24, 1.0), node("b", 1, 24, 1.0)];
        assert_eq!(partition_layers(&eq, &m(32)).unwrap().layer_counts(), [16, 16]);
        let two_one = [node("a", 1, 24, 2.0), node("b", 1, 24, 1.0)];
        assert_eq!(partition_layers(&two_one, &m(30)).unwrap().layer_counts(), [20, 10]);
        let three = [node("a", 1, 24, 3.0), node("b", 1, 24, 2.0), node("c", 1, 24, 2.0)];
        let plan = partition_layers(&three, &m(10)).unwrap();
        assert_eq!(plan.layer_counts(), [4, 3, 3]);
        assert_eq!(plan.head, "a");
        plan.validate(10).unwrap();
    }

    #[test]
    fn gpu_count_scales_weight() {
        let nodes = [node("a", 2, 24, 1.0), node("b", 1, 24, 1.0)];
        assert_eq!(partition_layers(&nodes, &model(30, 1)).unwrap().layer_counts(), [20, 10]);
    }

    #[test]
    fn floor_pins_tiny_nodes_to_one_layer() {
        assert_eq!(apportion(10, &[100.0, 1.0, 1.0]), vec![8, 1, 1]);
        assert_eq!(apportion(3, &[1.0, 1.0, 1.0]), vec![1, 1, 1]);
    }

    #[test]
    fn more_nodes_than_layers_fails() {
        let nodes = [node("a", 1, 24, 1.0), node("b", 1, 24, 1.0), node("c", 1, 24, 1.0)];
        assert_eq!(
            partition_layers(&nodes, &model(2, 1)),
            Err(PlacementError::TooManyNodes { nodes: 3, layers: 2 })
        );
    }

    #[test]
    fn head_choice() {
        let mut a = node("a", 1, 24, 1.0);
        let mut b = node("b", 1, 24, 1.0);
        assert_eq!(choose_head(std::slice::from_ref(&a)).unwrap(), "a");
        a.cpu_score = 2.0;
        assert_eq!(choose_head(&[b.clone(), a.clone()]).unwrap(), "a");
        (a.cpu_score, a.network_score) = (2.0, 3.0);
        (b.cpu_score, b.network_score) = (3.0, 2.0);
        assert_eq!(choose_head(&[b.clone(), a.clone()]).unwrap(), "a");

        let mut order = vec![node("x", 1, 1, 1.0), b, a];
        order[1].cpu_score = 10.0;
        assert_eq!(rotate_head(&mut order).unwrap(), "b");
        let names: Vec<_> = order.iter().map(|n| n.name.as_str()).collect();
        assert_eq!(names, ["b", "a", "x"]);
    }

    #[test]
    fn cluster_validation() {
        let mut c = full_mesh(vec![node("a", 1, 24, 1.0), node("b", 1, 24, 1.0)], |_, _| 0.01);
        c.validate().unwrap();
        c.links.push(LinkProfile::new("a", "zzz", 0.0, 1.0));
        assert!(c.validate().is_err());
        c.links.pop();
        c.links.push(LinkProfile::new("a", "b", 0.0, 1.0));
        assert!(c.validate().is_err());

        let json = serde_json::to_string(&ClusterSpec {
            nodes: vec![node("a", 1, 24, 1.0)],
            links: vec![],
        })
        .unwrap();
        assert_eq!(ClusterSpec::from_json(&json).unwrap().nodes[0].name, "a");
    }

    #[test]
    fn plan_prints_as_table() {
        let nodes = [node("alpha", 1, 24, 1.0), node("b", 1, 24, 1.0)];
        let text = partition_layers(&nodes, &model(32, 1)).unwrap().to_string();
        assert!(text.contains("alpha"));
        assert!(text.contains("0..16"));
        assert!(text.contains("(head)"));
    }
}
