use std::fmt;

use super::{AnnotatedSentence, IngestError};

/// A constituency tree. Leaves are words and have no children.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tree {
    pub label: String,
    pub children: Vec<Tree>,
}

impl Tree {
    pub fn leaf(word: impl Into<String>) -> Self {
        Self { label: word.into(), children: Vec::new() }
    }

    pub fn node(label: impl Into<String>, children: Vec<Tree>) -> Self {
        Self { label: label.into(), children }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.walk_leaves(&mut |leaf, _| out.push(leaf.label.as_str()), &mut Vec::new());
        out
    }

    /// Calls `f(leaf, path)` for every leaf, where `path` lists the labels
    /// from the root down to the leaf's parent (the preterminal).
    fn walk_leaves<'a>(&'a self, f: &mut impl FnMut(&'a Tree, &[&'a str]), path: &mut Vec<&'a str>) {
        if self.is_leaf() {
            f(self, path);
            return;
        }
        path.push(&self.label);
        for c in &self.children {
            c.walk_leaves(f, path);
        }
        path.pop();
    }

    /// Strips anonymous, `ROOT` and `TOP` wrappers around a single subtree.
    fn unwrap_root(mut self) -> Self {
        while (self.label.is_empty() || self.label == "ROOT" || self.label == "TOP")
            && self.children.len() == 1
            && !self.children[0].is_leaf()
        {
            self = self.children.pop().expect("one child");
        }
        self
    }
}

impl fmt::Display for Tree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_leaf() {
            return f.write_str(&self.label);
        }
        f.write_str("(")?;
        f.write_str(&self.label)?;
        for c in &self.children {
            write!(f, " {c}")?;
        }
        f.write_str(")")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tok<'a> {
    Open(usize),
    Close(usize),
    Atom(&'a str),
}

fn lex(text: &str) -> Vec<Tok<'_>> {
    let mut toks = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        let delim = ch == '(' || ch == ')' || ch.is_whitespace();
        if delim {
            if let Some(s) = start.take() {
                toks.push(Tok::Atom(&text[s..i]));
            }
            match ch {
                '(' => toks.push(Tok::Open(i)),
                ')' => toks.push(Tok::Close(i)),
                _ => {}
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        toks.push(Tok::Atom(&text[s..]));
    }
    toks
}

/// Parses bracketed trees, one sentence per top-level tree.
pub fn parse_ptb_trees(text: &str) -> Result<Vec<AnnotatedSentence>, IngestError> {
    let toks = lex(text);
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < toks.len() {
        match toks[pos] {
            Tok::Open(_) => {
                let tree = parse_node(&toks, &mut pos)?.unwrap_root();
                out.push(sentence_from_tree(tree));
            }
            Tok::Close(offset) => return Err(IngestError::Bracket { offset, msg: "unmatched ')'".into() }),
            Tok::Atom(a) => {
                return Err(IngestError::Bracket { offset: atom_offset(text, a), msg: format!("word {a:?} outside a tree") })
            }
        }
    }
    Ok(out)
}

fn atom_offset(text: &str, atom: &str) -> usize {
    atom.as_ptr() as usize - text.as_ptr() as usize
}

fn parse_node(toks: &[Tok<'_>], pos: &mut usize) -> Result<Tree, IngestError> {
    let Tok::Open(open_at) = toks[*pos] else { unreachable!("caller checked") };
    *pos += 1;
    let mut label = String::new();
    if let Some(Tok::Atom(a)) = toks.get(*pos) {
        label = a.to_string();
        *pos += 1;
    }
    let mut children = Vec::new();
    loop {
        match toks.get(*pos) {
            None => return Err(IngestError::Bracket { offset: open_at, msg: "unclosed '('".into() }),
            Some(Tok::Close(_)) => {
                *pos += 1;
                break;
            }
            Some(Tok::Open(_)) => children.push(parse_node(toks, pos)?),
            Some(Tok::Atom(a)) => {
                children.push(Tree::leaf(*a));
                *pos += 1;
            }
        }
    }
    if children.is_empty() {
        // "(word)" degenerates to a leaf-less node; keep it as a leaf
        return Ok(Tree::leaf(label));
    }
    Ok(Tree::node(label, children))
}

fn sentence_from_tree(tree: Tree) -> AnnotatedSentence {
    let mut tokens = Vec::new();
    let mut xpos = Vec::new();
    tree.walk_leaves(
        &mut |leaf, path| {
            tokens.push(leaf.label.clone());
            xpos.push(path.last().copied().unwrap_or("").to_string());
        },
        &mut Vec::new(),
    );
    let mut s = AnnotatedSentence::new(tokens);
    s.xpos = Some(xpos);
    s.tree = Some(tree);
    s
}

/// Label of each token's `degree`-th ancestor above its preterminal
/// (1 = parent, 2 = grandparent, 3 = great-grandparent), or `"None"`.
///
/// The tree is expected with its ROOT wrapper already removed, as
/// [`parse_ptb_trees`] produces it.
pub fn derive_ancestor_labels(sentence: &AnnotatedSentence, degree: usize) -> Result<Vec<String>, IngestError> {
    let tree = sentence.tree.as_ref().ok_or(IngestError::Missing { sent: 0, what: "constituency tree" })?;
    if !(1..=3).contains(&degree) {
        return Err(IngestError::Invalid { sent: 0, msg: format!("ancestor degree {degree} not in 1..=3") });
    }
    let mut out = Vec::new();
    tree.walk_leaves(
        &mut |_, path| {
            // path = [root, ..., parent-of-preterminal, preterminal]
            let above = path.len().saturating_sub(1);
            let label = if above >= degree { path[above - degree] } else { "None" };
            out.push(label.to_string());
        },
        &mut Vec::new(),
    );
    Ok(out)
}
