use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a node inside its owning [`KnowledgeTree`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Topic,
    Note,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    /// Topic title or note text.
    pub text: String,
    pub depth: usize,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
}

impl Node {
    pub fn is_topic(&self) -> bool {
        self.kind == NodeKind::Topic
    }

    pub fn is_note(&self) -> bool {
        self.kind == NodeKind::Note
    }
}

/// Topic/note hierarchy rooted at a synthetic topic.
///
/// Nodes live in an arena and are only ever appended, so a node's parent
/// always has a smaller index. Within a topic, note children are kept ahead
/// of topic children; that is the only order a markdown outline can express.
///
/// Equality is structural: two trees are equal when their pre-order shapes,
/// kinds and texts agree, regardless of how the arena was filled.
#[derive(Debug, Clone)]
pub struct KnowledgeTree {
    nodes: Vec<Node>,
}

pub const ROOT_TITLE: &str = "(root)";

impl Default for KnowledgeTree {
    fn default() -> Self {
        Self::new()
    }
}

impl KnowledgeTree {
    pub fn new() -> Self {
        Self {
            nodes: vec![Node {
                id: NodeId(0),
                kind: NodeKind::Topic,
                text: ROOT_TITLE.to_string(),
                depth: 0,
                parent: None,
                children: Vec::new(),
            }],
        }
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True when the tree holds nothing but the synthetic root.
    pub fn is_empty(&self) -> bool {
        self.nodes.len() == 1
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id.index())
    }

    fn expect(&self, id: NodeId) -> Result<&Node> {
        self.node(id)
            .ok_or_else(|| Error::Domain(format!("node {id} does not exist")))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter()
    }

    pub fn outdeg(&self, id: NodeId) -> usize {
        self.node(id).map_or(0, |n| n.children.len())
    }

    pub fn topic_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_topic()).count()
    }

    pub fn note_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_note()).count()
    }

    pub fn add_topic(&mut self, parent: NodeId, title: impl Into<String>) -> Result<NodeId> {
        let title = title.into();
        self.push_child(parent, NodeKind::Topic, title)
    }

    pub fn add_note(&mut self, parent: NodeId, text: impl Into<String>) -> Result<NodeId> {
        let text = text.into();
        self.push_child(parent, NodeKind::Note, text)
    }

    fn push_child(&mut self, parent: NodeId, kind: NodeKind, text: String) -> Result<NodeId> {
        let parent_node = self.expect(parent)?;
        if parent_node.is_note() {
            return Err(Error::Domain(format!(
                "cannot attach a child to note node {parent}"
            )));
        }
        if text.trim().is_empty() {
            return Err(Error::Structure {
                node: parent.to_string(),
                reason: "child text must be nonempty".into(),
            });
        }
        let depth = parent_node.depth + 1;
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            id,
            kind,
            text,
            depth,
            parent: Some(parent),
            children: Vec::new(),
        });
        match kind {
            NodeKind::Topic => self.nodes[parent.index()].children.push(id),
            NodeKind::Note => {
                let siblings = &self.nodes[parent.index()].children;
                let first_topic = siblings
                    .iter()
                    .position(|c| self.nodes[c.index()].is_topic())
                    .unwrap_or(siblings.len());
                self.nodes[parent.index()].children.insert(first_topic, id);
            }
        }
        Ok(id)
    }

    /// Node ids in pre-order, root first.
    pub fn preorder(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root()];
        while let Some(id) = stack.pop() {
            out.push(id);
            let node = &self.nodes[id.index()];
            stack.extend(node.children.iter().rev().copied());
        }
        out
    }

    /// Topic titles from the first level down to `id`; empty for the root.
    pub fn path(&self, id: NodeId) -> Vec<&str> {
        let mut titles = Vec::new();
        let mut cur = self.node(id);
        while let Some(node) = cur {
            if node.parent.is_none() {
                break;
            }
            titles.push(node.text.as_str());
            cur = node.parent.and_then(|p| self.node(p));
        }
        titles.reverse();
        titles
    }

    /// Human-readable path, `(root) > A > B`.
    pub fn path_label(&self, id: NodeId) -> String {
        let mut label = ROOT_TITLE.to_string();
        for part in self.path(id) {
            label.push_str(" > ");
            label.push_str(part);
        }
        label
    }

    /// Looks up a topic by its title path below the root.
    pub fn find_topic(&self, path: &[&str]) -> Option<NodeId> {
        let mut cur = self.root();
        for title in path {
            cur = self.nodes[cur.index()]
                .children
                .iter()
                .copied()
                .find(|c| {
                    let n = &self.nodes[c.index()];
                    n.is_topic() && n.text == *title
                })?;
        }
        Some(cur)
    }

    /// Copies the tree, dropping every node (with its subtree) for which
    /// `keep` returns false. The root is always kept.
    pub fn filtered(&self, mut keep: impl FnMut(&KnowledgeTree, &Node) -> bool) -> KnowledgeTree {
        let mut out = KnowledgeTree::new();
        let mut stack: Vec<(NodeId, NodeId)> = self.nodes[0]
            .children
            .iter()
            .rev()
            .map(|c| (*c, out.root()))
            .collect();
        while let Some((src, dst_parent)) = stack.pop() {
            let node = &self.nodes[src.index()];
            if !keep(self, node) {
                continue;
            }
            let dst = out
                .push_child(dst_parent, node.kind, node.text.clone())
                .expect("copied nodes keep their invariants");
            stack.extend(node.children.iter().rev().map(|c| (*c, dst)));
        }
        out
    }

    /// Grafts a copy of `other` (minus its root) under `parent`.
    pub fn graft(&mut self, parent: NodeId, other: &KnowledgeTree) -> Result<()> {
        let mut stack: Vec<(NodeId, NodeId)> = other.nodes[0]
            .children
            .iter()
            .rev()
            .map(|c| (*c, parent))
            .collect();
        while let Some((src, dst_parent)) = stack.pop() {
            let node = &other.nodes[src.index()];
            let dst = self.push_child(dst_parent, node.kind, node.text.clone())?;
            stack.extend(node.children.iter().rev().map(|c| (*c, dst)));
        }
        Ok(())
    }

    fn shape(&self) -> Vec<(usize, NodeKind, &str)> {
        self.preorder()
            .into_iter()
            .map(|id| {
                let n = &self.nodes[id.index()];
                (n.depth, n.kind, n.text.as_str())
            })
            .collect()
    }
}

impl PartialEq for KnowledgeTree {
    fn eq(&self, other: &Self) -> bool {
        // Pre-order (depth, kind, text) sequences determine a tree uniquely.
        self.shape() == other.shape()
    }
}

impl Eq for KnowledgeTree {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn notes_are_kept_ahead_of_subtopics() {
        let mut t = KnowledgeTree::new();
        let a = t.add_topic(t.root(), "A").unwrap();
        t.add_topic(a, "B").unwrap();
        t.add_note(a, "fact").unwrap();
        let kinds: Vec<_> = t.node(a).unwrap().children.iter().map(|c| t.node(*c).unwrap().kind).collect();
        assert_eq!(kinds, vec![NodeKind::Note, NodeKind::Topic]);
    }

    #[test]
    fn notes_cannot_have_children() {
        let mut t = KnowledgeTree::new();
        let n = t.add_note(t.root(), "x").unwrap();
        assert!(matches!(t.add_note(n, "y"), Err(Error::Domain(_))));
    }

    #[test]
    fn depth_follows_parent() {
        let mut t = KnowledgeTree::new();
        let a = t.add_topic(t.root(), "A").unwrap();
        let b = t.add_topic(a, "B").unwrap();
        let n = t.add_note(b, "x").unwrap();
        assert_eq!(t.node(n).unwrap().depth, 3);
        assert_eq!(t.path(n), vec!["A", "B", "x"]);
        assert_eq!(t.find_topic(&["A", "B"]), Some(b));
    }

    #[test]
    fn structural_equality_ignores_arena_order() {
        let mut t1 = KnowledgeTree::new();
        let a = t1.add_topic(t1.root(), "A").unwrap();
        t1.add_topic(a, "B").unwrap();
        t1.add_note(a, "x").unwrap();

        let mut t2 = KnowledgeTree::new();
        let a2 = t2.add_topic(t2.root(), "A").unwrap();
        t2.add_note(a2, "x").unwrap();
        t2.add_topic(a2, "B").unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn every_node_reached_once() {
        let mut t = KnowledgeTree::new();
        let a = t.add_topic(t.root(), "A").unwrap();
        for i in 0..5 {
            let b = t.add_topic(a, format!("B{i}")).unwrap();
            t.add_note(b, "n").unwrap();
        }
        let mut seen = t.preorder();
        assert_eq!(seen.len(), t.len());
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), t.len());
    }

    #[test]
    fn filtered_drops_subtrees() {
        let mut t = KnowledgeTree::new();
        let a = t.add_topic(t.root(), "A").unwrap();
        t.add_note(a, "keep").unwrap();
        let b = t.add_topic(t.root(), "B").unwrap();
        t.add_note(b, "gone").unwrap();
        let f = t.filtered(|_, n| n.text != "B");
        assert_eq!(f.len(), 3);
        assert!(f.find_topic(&["B"]).is_none());
    }
}
