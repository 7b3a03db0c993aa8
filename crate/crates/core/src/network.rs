//! Network topology, sensor placement and protected groups.
//!
//! The INP reader accepts the `[TITLE]`, `[JUNCTIONS]`, `[RESERVOIRS]`,
//! `[PIPES]` and `[COORDINATES]` sections of the EPANET text format. All other
//! sections are skipped with a warning. Values are taken as SI (meters, cubic
//! meters per second); no unit conversion is performed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use petgraph::unionfind::UnionFind;

use crate::config::KeyValues;
use crate::error::{Error, Result};

pub type NodeId = u32;

/// A demand junction.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    /// Meters.
    pub elevation: f64,
    /// Cubic meters per second.
    pub base_demand: f64,
}

/// Fixed-head source.
#[derive(Debug, Clone, PartialEq)]
pub struct Reservoir {
    pub id: NodeId,
    /// Total head in meters.
    pub head: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pipe {
    pub id: u32,
    pub from_node: NodeId,
    pub to_node: NodeId,
    /// Meters.
    pub length: f64,
    /// Meters.
    pub diameter: f64,
    /// Hazen-Williams C.
    pub roughness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub name: String,
    pub nodes: Vec<Node>,
    pub pipes: Vec<Pipe>,
    pub reservoirs: Vec<Reservoir>,
    pub coordinates: BTreeMap<NodeId, (f64, f64)>,
}

impl Network {
    /// Builds a network and checks every topology invariant.
    pub fn new(
        name: impl Into<String>,
        nodes: Vec<Node>,
        pipes: Vec<Pipe>,
        reservoirs: Vec<Reservoir>,
    ) -> Result<Self> {
        let net = Network {
            name: name.into(),
            nodes,
            pipes,
            reservoirs,
            coordinates: BTreeMap::new(),
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reservoirs.is_empty() {
            return Err(Error::Validation("network has no reservoir".into()));
        }
        let mut ids = HashMap::new();
        for n in &self.nodes {
            if n.id == 0 {
                return Err(Error::Validation("node id 0 is not a positive integer".into()));
            }
            if !(n.base_demand >= 0.0) || !n.elevation.is_finite() {
                return Err(Error::Validation(format!(
                    "junction {} has invalid elevation/demand",
                    n.id
                )));
            }
            if ids.insert(n.id, ()).is_some() {
                return Err(Error::Validation(format!("duplicate node id {}", n.id)));
            }
        }
        for r in &self.reservoirs {
            if r.id == 0 || !r.head.is_finite() {
                return Err(Error::Validation(format!("reservoir {} is invalid", r.id)));
            }
            if ids.insert(r.id, ()).is_some() {
                return Err(Error::Validation(format!("duplicate node id {}", r.id)));
            }
        }
        let mut pipe_ids = BTreeSet::new();
        for p in &self.pipes {
            if !pipe_ids.insert(p.id) {
                return Err(Error::Validation(format!("duplicate pipe id {}", p.id)));
            }
            for end in [p.from_node, p.to_node] {
                if !ids.contains_key(&end) {
                    return Err(Error::Validation(format!(
                        "pipe {} references unknown node {}",
                        p.id, end
                    )));
                }
            }
            if p.from_node == p.to_node {
                return Err(Error::Validation(format!("pipe {} is a self-loop", p.id)));
            }
            if !(p.length > 0.0 && p.diameter > 0.0 && p.roughness > 0.0) {
                return Err(Error::Validation(format!(
                    "pipe {} needs positive length, diameter and roughness",
                    p.id
                )));
            }
        }

        let index: HashMap<NodeId, usize> = self
            .all_node_ids()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect();
        let mut uf = UnionFind::<usize>::new(index.len());
        for p in &self.pipes {
            uf.union(index[&p.from_node], index[&p.to_node]);
        }
        let root = uf.find(0);
        if let Some(id) = self.all_node_ids().find(|id| uf.find(index[id]) != root) {
            return Err(Error::Validation(format!(
                "network is disconnected (node {id} unreachable)"
            )));
        }
        Ok(())
    }

    /// Junction ids followed by reservoir ids.
    pub fn all_node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .map(|n| n.id)
            .chain(self.reservoirs.iter().map(|r| r.id))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len() + self.reservoirs.len()
    }

    pub fn junction(&self, id: NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn junction_index(&self, id: NodeId) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn read_inp(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_inp(&text)
    }

    /// Writes the supported subset back out in INP syntax.
    pub fn to_inp(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "[TITLE]\n{}\n", self.name);
        let _ = writeln!(out, "[JUNCTIONS]\n;ID\tElev\tDemand");
        for n in &self.nodes {
            let _ = writeln!(out, "{}\t{}\t{}", n.id, n.elevation, n.base_demand);
        }
        let _ = writeln!(out, "\n[RESERVOIRS]\n;ID\tHead");
        for r in &self.reservoirs {
            let _ = writeln!(out, "{}\t{}", r.id, r.head);
        }
        let _ = writeln!(out, "\n[PIPES]\n;ID\tNode1\tNode2\tLength\tDiameter\tRoughness");
        for p in &self.pipes {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                p.id, p.from_node, p.to_node, p.length, p.diameter, p.roughness
            );
        }
        if !self.coordinates.is_empty() {
            let _ = writeln!(out, "\n[COORDINATES]");
            for (id, (x, y)) in &self.coordinates {
                let _ = writeln!(out, "{id}\t{x}\t{y}");
            }
        }
        let _ = writeln!(out, "\n[END]");
        out
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Title,
    Junctions,
    Reservoirs,
    Pipes,
    Coordinates,
    End,
    Ignored,
    None,
}

fn field<T: std::str::FromStr>(cols: &[&str], i: usize, what: &str, line: usize) -> Result<T> {
    let raw = cols
        .get(i)
        .ok_or_else(|| Error::parse(line, format!("missing {what}")))?;
    raw.parse()
        .map_err(|_| Error::parse(line, format!("invalid {what} `{raw}`")))
}

/// Parses an INP-subset document into a validated [`Network`].
pub fn parse_inp(text: &str) -> Result<Network> {
    let mut section = Section::None;
    let mut seen = BTreeSet::new();
    let mut name = String::new();
    let mut nodes = Vec::new();
    let mut reservoirs = Vec::new();
    let mut pipes = Vec::new();
    let mut coordinates = BTreeMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let content = raw.split(';').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            let header = content.to_ascii_uppercase();
            section = match header.as_str() {
                "[TITLE]" => Section::Title,
                "[JUNCTIONS]" => Section::Junctions,
                "[RESERVOIRS]" => Section::Reservoirs,
                "[PIPES]" => Section::Pipes,
                "[COORDINATES]" => Section::Coordinates,
                "[END]" => Section::End,
                _ => {
                    log::warn!("line {line_no}: ignoring unsupported section {content}");
                    Section::Ignored
                }
            };
            seen.insert(header);
            continue;
        }
        let cols: Vec<&str> = content.split_whitespace().collect();
        match section {
            Section::Title => {
                if name.is_empty() {
                    name = content.to_string();
                }
            }
            Section::Junctions => nodes.push(Node {
                id: field(&cols, 0, "junction id", line_no)?,
                elevation: field(&cols, 1, "elevation", line_no)?,
                base_demand: cols
                    .get(2)
                    .map(|_| field(&cols, 2, "demand", line_no))
                    .transpose()?
                    .unwrap_or(0.0),
            }),
            Section::Reservoirs => reservoirs.push(Reservoir {
                id: field(&cols, 0, "reservoir id", line_no)?,
                head: field(&cols, 1, "head", line_no)?,
            }),
            Section::Pipes => pipes.push(Pipe {
                id: field(&cols, 0, "pipe id", line_no)?,
                from_node: field(&cols, 1, "start node", line_no)?,
                to_node: field(&cols, 2, "end node", line_no)?,
                length: field(&cols, 3, "length", line_no)?,
                diameter: field(&cols, 4, "diameter", line_no)?,
                roughness: field(&cols, 5, "roughness", line_no)?,
            }),
            Section::Coordinates => {
                let id: NodeId = field(&cols, 0, "node id", line_no)?;
                let x: f64 = field(&cols, 1, "x", line_no)?;
                let y: f64 = field(&cols, 2, "y", line_no)?;
                coordinates.insert(id, (x, y));
            }
            Section::End | Section::Ignored => {}
            Section::None => {
                return Err(Error::parse(line_no, "data outside of any section"));
            }
        }
    }

    for required in ["[JUNCTIONS]", "[RESERVOIRS]", "[PIPES]"] {
        if !seen.contains(required) {
            return Err(Error::Validation(format!("missing section {required}")));
        }
    }

    let mut net = Network::new(name, nodes, pipes, reservoirs)?;
    let ids: BTreeSet<NodeId> = net.all_node_ids().collect();
    if let Some(id) = coordinates.keys().find(|id| !ids.contains(id)) {
        return Err(Error::Validation(format!("coordinates for unknown node {id}")));
    }
    net.coordinates = coordinates;
    Ok(net)
}

/// Ordered sensor node ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorSet {
    ids: Vec<NodeId>,
}

impl SensorSet {
    pub fn new(net: &Network, ids: Vec<NodeId>) -> Result<Self> {
        if ids.len() < 2 {
            return Err(Error::Validation(format!(
                "at least two sensors are required, got {}",
                ids.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for &id in &ids {
            if !seen.insert(id) {
                return Err(Error::Validation(format!("sensor {id} listed twice")));
            }
            if net.junction(id).is_none() {
                return Err(Error::Validation(format!("sensor {id} is not a junction")));
            }
        }
        Ok(SensorSet { ids })
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Junction to protected-group map. Group indices are 0-based here and
/// printed 1-based (`s_1 ... s_K`) in every file format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    group_count: usize,
    node_to_group: BTreeMap<NodeId, usize>,
}

impl GroupAssignment {
    pub fn group_count(&self) -> usize {
        self.group_count
    }

    pub fn group_of(&self, node: NodeId) -> Option<usize> {
        self.node_to_group.get(&node).copied()
    }

    pub fn members(&self, group: usize) -> Vec<NodeId> {
        self.node_to_group
            .iter()
            .filter(|(_, &g)| g == group)
            .map(|(&n, _)| n)
            .collect()
    }
}

/// Contents of a group config file: `group.<k> = ids` and `sensors = ids`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupConfig {
    pub groups: Vec<Vec<NodeId>>,
    pub sensors: Vec<NodeId>,
}

impl GroupConfig {
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut indexed = BTreeMap::new();
        for key in kv.keys() {
            if let Some(k) = key.strip_prefix("group.") {
                let k: usize = k
                    .parse()
                    .map_err(|_| Error::Config(format!("bad group key `{key}`")))?;
                indexed.insert(k, kv.list::<NodeId>(key)?.unwrap_or_default());
            }
        }
        if indexed.is_empty() {
            return Err(Error::Config("no `group.<k>` entries".into()));
        }
        if indexed.keys().copied().ne(1..=indexed.len()) {
            return Err(Error::Config(
                "group keys must be numbered 1..K without gaps".into(),
            ));
        }
        let sensors = kv
            .list::<NodeId>("sensors")?
            .ok_or_else(|| Error::Config("missing key `sensors`".into()))?;
        Ok(GroupConfig {
            groups: indexed.into_values().collect(),
            sensors,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_key_values(&KeyValues::parse(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_key_values(&KeyValues::read(path)?)
    }
}

/// Checks the config against the network and builds the assignment.
pub fn assign_groups(net: &Network, spec: &GroupConfig) -> Result<GroupAssignment> {
    let mut node_to_group = BTreeMap::new();
    for (k, members) in spec.groups.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Validation(format!("group {} is empty", k + 1)));
        }
        for &id in members {
            if net.junction(id).is_none() {
                return Err(Error::Validation(format!(
                    "group {} lists {id}, which is not a junction",
                    k + 1
                )));
            }
            if let Some(prev) = node_to_group.insert(id, k) {
                return Err(Error::Validation(format!(
                    "node {id} appears in groups {} and {}",
                    prev + 1,
                    k + 1
                )));
            }
        }
    }
    let missing: Vec<String> = net
        .nodes
        .iter()
        .filter(|n| !node_to_group.contains_key(&n.id))
        .map(|n| n.id.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "junctions not assigned to any group: {}",
            missing.join(", ")
        )));
    }
    Ok(GroupAssignment {
        group_count: spec.groups.len(),
        node_to_group,
    })
}
