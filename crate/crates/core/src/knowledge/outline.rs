//! Markdown-outline encoding of a prompt.
//!
//! Grammar, line by line:
//!
//! * `#`..`######` followed by a space opens a topic at that heading level.
//!   Deeper runs of `#` are clamped to level 6.
//! * `- ` opens a note under the most recent topic (the root if none yet).
//! * Blank lines separate blocks and are otherwise ignored.
//! * Any other line is free text. Free text before the first tree line is
//!   the preamble, free text after the last tree line is the epilogue, and
//!   free text in between is kept as a note of the current topic.

use tracing::warn;

use super::tree::{KnowledgeTree, NodeId};
use crate::error::{Error, Result};

pub const MAX_HEADING_LEVEL: usize = 6;

/// A system prompt: free-text preamble, knowledge tree, free-text epilogue.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PromptDocument {
    pub preamble: Vec<String>,
    pub tree: KnowledgeTree,
    pub epilogue: Vec<String>,
}

impl PromptDocument {
    /// Builds a document in canonical form: blocks are split on blank lines
    /// and right-trimmed, and with an empty tree the epilogue is folded into
    /// the preamble (the two are indistinguishable in text).
    pub fn new(preamble: Vec<String>, tree: KnowledgeTree, epilogue: Vec<String>) -> Self {
        let mut preamble = canonical_blocks(preamble);
        let mut epilogue = canonical_blocks(epilogue);
        if tree.is_empty() {
            preamble.append(&mut epilogue);
        }
        Self {
            preamble,
            tree,
            epilogue,
        }
    }

    pub fn from_tree(tree: KnowledgeTree) -> Self {
        Self::new(Vec::new(), tree, Vec::new())
    }

    /// True when there is neither tree content nor preamble text.
    pub fn is_blank(&self) -> bool {
        self.tree.is_empty() && self.preamble.is_empty()
    }
}

fn canonical_blocks(blocks: Vec<String>) -> Vec<String> {
    let mut out = Vec::new();
    for block in blocks {
        let mut current: Vec<&str> = Vec::new();
        for line in block.lines() {
            let line = line.trim_end();
            if line.trim().is_empty() {
                if !current.is_empty() {
                    out.push(current.join("\n"));
                    current.clear();
                }
            } else {
                current.push(line);
            }
        }
        if !current.is_empty() {
            out.push(current.join("\n"));
        }
    }
    out
}

enum Line<'a> {
    Blank,
    Heading(usize, &'a str),
    Note(&'a str),
    Free(&'a str),
}

fn classify(line: &str) -> Line<'_> {
    if line.trim().is_empty() {
        return Line::Blank;
    }
    let hashes = line.bytes().take_while(|b| *b == b'#').count();
    if hashes > 0 && line[hashes..].starts_with(' ') {
        let title = line[hashes..].trim();
        if !title.is_empty() {
            let level = if hashes > MAX_HEADING_LEVEL {
                warn!(level = hashes, title, "heading deeper than 6 re-leveled to 6");
                MAX_HEADING_LEVEL
            } else {
                hashes
            };
            return Line::Heading(level, title);
        }
    }
    if let Some(rest) = line.strip_prefix("- ") {
        let text = rest.trim();
        return if text.is_empty() {
            Line::Blank
        } else {
            Line::Note(text)
        };
    }
    Line::Free(line.trim_end())
}

fn is_tree_line(line: &Line<'_>) -> bool {
    matches!(line, Line::Heading(..) | Line::Note(_))
}

fn push_blocks(lines: &[Line<'_>], out: &mut Vec<String>) {
    let mut current: Vec<&str> = Vec::new();
    for line in lines {
        match line {
            Line::Free(text) => current.push(text),
            _ => {
                if !current.is_empty() {
                    out.push(current.join("\n"));
                    current.clear();
                }
            }
        }
    }
    if !current.is_empty() {
        out.push(current.join("\n"));
    }
}

/// Parses prompt text. Never fails: text without any outline lines becomes
/// a preamble-only document.
pub fn parse_prompt(text: &str) -> PromptDocument {
    let lines: Vec<Line<'_>> = text.lines().map(classify).collect();
    let first = lines.iter().position(is_tree_line);
    let last = lines.iter().rposition(is_tree_line);

    let (Some(first), Some(last)) = (first, last) else {
        let mut preamble = Vec::new();
        push_blocks(&lines, &mut preamble);
        return PromptDocument::new(preamble, KnowledgeTree::new(), Vec::new());
    };

    let mut preamble = Vec::new();
    push_blocks(&lines[..first], &mut preamble);
    let mut epilogue = Vec::new();
    push_blocks(&lines[last + 1..], &mut epilogue);

    let mut tree = KnowledgeTree::new();
    // (heading level, node) with the root at level 0.
    let mut stack: Vec<(usize, NodeId)> = vec![(0, tree.root())];
    for line in &lines[first..=last] {
        match line {
            Line::Blank => {}
            Line::Heading(level, title) => {
                while stack.last().is_some_and(|(l, _)| *l >= *level) {
                    stack.pop();
                }
                let parent = stack.last().map_or(tree.root(), |(_, id)| *id);
                let id = tree
                    .add_topic(parent, one_line(title))
                    .expect("parent on the heading stack is a topic");
                stack.push((*level, id));
            }
            Line::Note(text) | Line::Free(text) => {
                let parent = stack.last().map_or(tree.root(), |(_, id)| *id);
                tree.add_note(parent, one_line(text))
                    .expect("parent on the heading stack is a topic");
            }
        }
    }

    PromptDocument::new(preamble, tree, epilogue)
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Renders the outline part of a tree, without surrounding blocks.
pub fn render_tree(tree: &KnowledgeTree) -> Result<String> {
    let mut lines: Vec<String> = Vec::new();
    for id in tree.preorder() {
        let node = tree.node(id).expect("preorder yields live ids");
        if node.parent.is_none() {
            continue;
        }
        if node.is_note() {
            lines.push(format!("- {}", one_line(&node.text)));
            continue;
        }
        if node.depth > MAX_HEADING_LEVEL {
            return Err(Error::Structure {
                node: tree.path_label(id),
                reason: format!(
                    "topic depth {} exceeds the deepest heading level {MAX_HEADING_LEVEL}",
                    node.depth
                ),
            });
        }
        if !lines.is_empty() {
            lines.push(String::new());
        }
        lines.push(format!("{} {}", "#".repeat(node.depth), one_line(&node.text)));
    }
    Ok(lines.join("\n"))
}

/// Canonical text form: preamble blocks, outline, epilogue blocks, each
/// separated by one blank line, with a single trailing newline.
pub fn render_prompt(doc: &PromptDocument) -> Result<String> {
    let mut parts: Vec<String> = Vec::new();
    if !doc.preamble.is_empty() {
        parts.push(doc.preamble.join("\n\n"));
    }
    let tree = render_tree(&doc.tree)?;
    if !tree.is_empty() {
        parts.push(tree);
    }
    if !doc.epilogue.is_empty() {
        parts.push(doc.epilogue.join("\n\n"));
    }
    if parts.is_empty() {
        return Ok(String::new());
    }
    let mut out = parts.join("\n\n");
    out.push('\n');
    Ok(out)
}
