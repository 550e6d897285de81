//! The exploration tree: every sampled point is a node, and every edge records
//! the likelihood threshold (the parent's likelihood) the child was drawn
//! under. Classic runs, dynamic runs, resumed runs and merged runs are all
//! just trees.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use crate::error::{NestError, Result};
use crate::hexfloat;

pub type NodeId = usize;

pub const ROOT: NodeId = 0;

/// Current version of the `.nstree` text format.
pub const TREE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub log_likelihood: f64,
    pub point_unit: Vec<f64>,
    pub point_physical: Vec<f64>,
}

impl Node {
    pub fn is_root(&self) -> bool {
        self.parent.is_none()
    }
}

/// Read access shared by full trees and filtered views.
pub trait TreeSource {
    fn node(&self, id: NodeId) -> &Node;
    fn children(&self, id: NodeId) -> &[NodeId];

    fn root_children(&self) -> &[NodeId] {
        self.children(ROOT)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplorationTree {
    nodes: Vec<Node>,
    dimension: usize,
}

impl ExplorationTree {
    pub fn new(dimension: usize) -> Result<Self> {
        if dimension == 0 {
            return Err(NestError::invalid("tree dimension must be at least 1"));
        }
        Ok(ExplorationTree {
            nodes: vec![Node {
                id: ROOT,
                parent: None,
                children: Vec::new(),
                log_likelihood: f64::NEG_INFINITY,
                point_unit: Vec::new(),
                point_physical: Vec::new(),
            }],
            dimension,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn root_id(&self) -> NodeId {
        ROOT
    }

    pub fn root(&self) -> &Node {
        &self.nodes[ROOT]
    }

    /// Total number of nodes including the root.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() == 1
    }

    pub fn get(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn attach_child(
        &mut self,
        parent: NodeId,
        point_unit: Vec<f64>,
        point_physical: Vec<f64>,
        log_likelihood: f64,
    ) -> Result<NodeId> {
        let parent_logl = self
            .nodes
            .get(parent)
            .ok_or(NestError::NotFound(parent))?
            .log_likelihood;
        if point_unit.len() != self.dimension {
            return Err(NestError::invalid(format!(
                "point has {} coordinates, tree dimension is {}",
                point_unit.len(),
                self.dimension
            )));
        }
        if log_likelihood.is_nan() {
            return Err(NestError::Data(format!(
                "NaN log-likelihood offered as child of node {parent}"
            )));
        }
        if log_likelihood < parent_logl {
            return Err(NestError::ContractViolation {
                parent,
                parent_log_likelihood: parent_logl,
                child: log_likelihood,
            });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            id,
            parent: Some(parent),
            children: Vec::new(),
            log_likelihood,
            point_unit,
            point_physical,
        });
        self.nodes[parent].children.push(id);
        Ok(id)
    }

    /// Drop every node with id `>= count`. Ids are assigned in sampling order,
    /// so this rewinds the tree to an earlier moment of the run.
    pub fn truncate(&mut self, count: usize) {
        let count = count.max(1);
        if count >= self.nodes.len() {
            return;
        }
        self.nodes.truncate(count);
        for n in &mut self.nodes {
            n.children.retain(|&c| c < count);
        }
    }

    /// Merge runs by concatenating their root children. Ids are reassigned:
    /// the first tree keeps its ids, later trees are shifted after it.
    pub fn merge(trees: &[ExplorationTree]) -> Result<ExplorationTree> {
        let first = trees
            .first()
            .ok_or_else(|| NestError::invalid("merge needs at least one tree"))?;
        let dim = first.dimension;
        let mut out = ExplorationTree::new(dim)?;
        for t in trees {
            if t.dimension != dim {
                return Err(NestError::invalid(format!(
                    "cannot merge trees of dimension {} and {}",
                    dim, t.dimension
                )));
            }
            let offset = out.nodes.len() - 1;
            let remap = |id: NodeId| if id == ROOT { ROOT } else { id + offset };
            for n in &t.nodes[1..] {
                out.nodes.push(Node {
                    id: remap(n.id),
                    parent: n.parent.map(remap),
                    children: n.children.iter().map(|&c| remap(c)).collect(),
                    log_likelihood: n.log_likelihood,
                    point_unit: n.point_unit.clone(),
                    point_physical: n.point_physical.clone(),
                });
            }
            let rc: Vec<NodeId> = t.nodes[ROOT].children.iter().map(|&c| remap(c)).collect();
            out.nodes[ROOT].children.extend(rc);
        }
        Ok(out)
    }

    /// A read-only view in which only the root children at positions
    /// `keep` are visible.
    pub fn unlink_root_children(
        &self,
        keep: &BTreeSet<usize>,
        reattach: Reattach,
    ) -> Result<TreeView<'_>> {
        if keep.is_empty() {
            return Err(NestError::invalid("keep set must not be empty"));
        }
        let rc = &self.nodes[ROOT].children;
        if let Some(&bad) = keep.iter().find(|&&i| i >= rc.len()) {
            return Err(NestError::invalid(format!(
                "root child index {bad} out of range (root has {} children)",
                rc.len()
            )));
        }
        let root_children: Vec<NodeId> = keep.iter().map(|&i| rc[i]).collect();
        let mut view = TreeView {
            tree: self,
            root_children,
            overrides: HashMap::new(),
        };
        if reattach == Reattach::Threshold {
            view.build_reattachments();
        }
        Ok(view)
    }

    /// Write the full tree in `.nstree` format.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_header(w, self.dimension)?;
        self.write_nodes(w, 0)
    }

    /// Append node records starting at `start` (which may be 0 for the root).
    pub fn write_nodes<W: Write>(&self, w: &mut W, start: NodeId) -> Result<()> {
        for n in self.nodes.iter().skip(start) {
            write_node(w, n)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<ExplorationTree> {
        let mut lines = r.lines().enumerate();
        let (_, header) = lines.next().ok_or(NestError::Parse {
            line: 1,
            message: "empty stream".into(),
        })?;
        let header = header?;
        let dimension = parse_header(&header)?;
        let mut tree = ExplorationTree::new(dimension).map_err(|e| NestError::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        let mut saw_root = false;
        for (idx, line) in lines {
            let lineno = idx + 1;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let perr = |message: String| NestError::Parse {
                line: lineno,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(perr(format!("expected 5 fields, found {}", fields.len())));
            }
            let id: NodeId = fields[0]
                .parse()
                .map_err(|_| perr(format!("bad node id {:?}", fields[0])))?;
            let logl = hexfloat::parse(fields[2])
                .ok_or_else(|| perr(format!("bad log-likelihood {:?}", fields[2])))?;
            let unit =
                parse_coords(fields[3]).ok_or_else(|| perr("bad unit coordinates".into()))?;
            let phys =
                parse_coords(fields[4]).ok_or_else(|| perr("bad physical coordinates".into()))?;
            if !saw_root {
                if id != ROOT || fields[1] != "-" {
                    return Err(perr("first record must be the root".into()));
                }
                if logl != f64::NEG_INFINITY {
                    return Err(perr("root log-likelihood must be -inf".into()));
                }
                saw_root = true;
                continue;
            }
            if id != tree.nodes.len() {
                return Err(perr(format!(
                    "node ids must be consecutive: expected {}, found {id}",
                    tree.nodes.len()
                )));
            }
            let parent: NodeId = fields[1]
                .parse()
                .map_err(|_| perr(format!("bad parent id {:?}", fields[1])))?;
            tree.attach_child(parent, unit, phys, logl)
                .map_err(|e| perr(e.to_string()))?;
        }
        if !saw_root {
            return Err(NestError::Parse {
                line: 2,
                message: "missing root record".into(),
            });
        }
        Ok(tree)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ExplorationTree> {
        ExplorationTree::read_from(bytes)
    }
}

impl TreeSource for ExplorationTree {
    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id].children
    }
}

/// How descendants of unlinked root children are treated in a view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Reattach {
    /// Hidden subtrees stay hidden.
    #[default]
    None,
    /// A hidden node sampled under threshold `t` is re-attached below the
    /// visible node with the smallest likelihood `>= t`, if it lies above that
    /// node's likelihood.
    Threshold,
}

/// A read-only subset of a tree exposing only some root children.
#[derive(Clone, Debug)]
pub struct TreeView<'a> {
    tree: &'a ExplorationTree,
    root_children: Vec<NodeId>,
    overrides: HashMap<NodeId, Vec<NodeId>>,
}

impl<'a> TreeView<'a> {
    pub fn tree(&self) -> &ExplorationTree {
        self.tree
    }

    /// Number of reachable nodes, root included.
    pub fn node_count(&self) -> usize {
        let mut count = 1;
        let mut stack: Vec<NodeId> = self.root_children.clone();
        while let Some(id) = stack.pop() {
            count += 1;
            stack.extend_from_slice(self.children(id));
        }
        count
    }

    fn build_reattachments(&mut self) {
        let tree = self.tree;
        let n = tree.nodes.len();
        let mut visible = vec![false; n];
        visible[ROOT] = true;
        let mut stack = self.root_children.clone();
        while let Some(id) = stack.pop() {
            visible[id] = true;
            stack.extend_from_slice(&tree.nodes[id].children);
        }
        // Candidate attachment points: the base visible set sorted by logL.
        let mut anchors: Vec<(f64, NodeId)> = (1..n)
            .filter(|&i| visible[i])
            .map(|i| (tree.nodes[i].log_likelihood, i))
            .collect();
        anchors.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let base_visible = visible.clone();
        for id in 1..n {
            if visible[id] {
                continue;
            }
            let node = &tree.nodes[id];
            let parent = node.parent.expect("non-root has a parent");
            if parent == ROOT {
                continue;
            }
            if visible[parent] && !base_visible[parent] {
                // Parent was itself re-attached; keep the original edge.
                visible[id] = true;
                continue;
            }
            let threshold = tree.nodes[parent].log_likelihood;
            let pos = anchors.partition_point(|(l, _)| *l < threshold);
            if let Some(&(anchor_logl, anchor)) = anchors.get(pos) {
                if node.log_likelihood > anchor_logl {
                    visible[id] = true;
                    self.overrides
                        .entry(anchor)
                        .or_insert_with(|| tree.nodes[anchor].children.clone())
                        .push(id);
                }
            }
        }
    }
}

impl TreeSource for TreeView<'_> {
    fn node(&self, id: NodeId) -> &Node {
        &self.tree.nodes[id]
    }

    fn children(&self, id: NodeId) -> &[NodeId] {
        if id == ROOT {
            return &self.root_children;
        }
        match self.overrides.get(&id) {
            Some(c) => c,
            None => &self.tree.nodes[id].children,
        }
    }
}

pub fn write_header<W: Write>(w: &mut W, dimension: usize) -> Result<()> {
    writeln!(w, "#nstree\t{TREE_FORMAT_VERSION}\tdim={dimension}")?;
    Ok(())
}

pub fn write_node<W: Write>(w: &mut W, n: &Node) -> Result<()> {
    let parent = n.parent.map_or_else(|| "-".to_string(), |p| p.to_string());
    writeln!(
        w,
        "{}\t{}\t{}\t{}\t{}",
        n.id,
        parent,
        hexfloat::format(n.log_likelihood),
        format_coords(&n.point_unit),
        format_coords(&n.point_physical)
    )?;
    Ok(())
}

fn format_coords(v: &[f64]) -> String {
    v.iter()
        .map(|&x| hexfloat::format(x))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_coords(s: &str) -> Option<Vec<f64>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(hexfloat::parse).collect()
}

fn parse_header(line: &str) -> Result<usize> {
    let err = |message: String| NestError::Parse { line: 1, message };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 || fields[0] != "#nstree" {
        return Err(err(format!("not an nstree header: {line:?}")));
    }
    let version: u32 = fields[1]
        .parse()
        .map_err(|_| err(format!("bad version {:?}", fields[1])))?;
    if version != TREE_FORMAT_VERSION {
        return Err(err(format!("unsupported nstree version {version}")));
    }
    fields[2]
        .strip_prefix("dim=")
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| err(format!("bad dimension field {:?}", fields[2])))
}
