//! Untyped markup trees, their YXML transfer syntax, and typed-value
//! encoding combinators on top of them.

pub mod codec;
pub mod yxml;

pub use codec::{Decode, DecodeError, Encode};
pub use yxml::{YxmlError, X, Y};

/// A forest of markup trees: the unit produced by typed encoders.
pub type Body = Vec<Tree>;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Tree {
    Elem {
        name: String,
        attributes: Vec<(String, Vec<u8>)>,
        body: Body,
    },
    Text(Vec<u8>),
}

impl Tree {
    pub fn elem(name: impl Into<String>, body: Body) -> Tree {
        Tree::Elem {
            name: name.into(),
            attributes: Vec::new(),
            body,
        }
    }

    pub fn elem_with(
        name: impl Into<String>,
        attributes: Vec<(String, Vec<u8>)>,
        body: Body,
    ) -> Tree {
        Tree::Elem {
            name: name.into(),
            attributes,
            body,
        }
    }

    pub fn text(content: impl Into<Vec<u8>>) -> Tree {
        Tree::Text(content.into())
    }

    pub fn name(&self) -> Option<&str> {
        match self {
            Tree::Elem { name, .. } => Some(name),
            Tree::Text(_) => None,
        }
    }

    pub fn attribute(&self, key: &str) -> Option<&[u8]> {
        match self {
            Tree::Elem { attributes, .. } => attributes
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_slice()),
            Tree::Text(_) => None,
        }
    }

    /// Attribute value as UTF-8 text, if present and valid.
    pub fn attribute_str(&self, key: &str) -> Option<&str> {
        self.attribute(key).and_then(|v| std::str::from_utf8(v).ok())
    }

    pub fn body(&self) -> &[Tree] {
        match self {
            Tree::Elem { body, .. } => body,
            Tree::Text(_) => &[],
        }
    }

    /// Concatenated text content of this tree, in document order.
    pub fn content(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.collect_text(&mut out);
        out
    }

    fn collect_text(&self, out: &mut Vec<u8>) {
        match self {
            Tree::Text(t) => out.extend_from_slice(t),
            Tree::Elem { body, .. } => body.iter().for_each(|t| t.collect_text(out)),
        }
    }
}

/// Canonical form of a forest as seen through the transfer syntax: empty
/// text nodes vanish and adjacent text siblings merge.
pub fn normalize(forest: &[Tree]) -> Body {
    let mut out: Body = Vec::with_capacity(forest.len());
    for tree in forest {
        match tree {
            Tree::Text(t) if t.is_empty() => {}
            Tree::Text(t) => match out.last_mut() {
                Some(Tree::Text(prev)) => prev.extend_from_slice(t),
                _ => out.push(Tree::Text(t.clone())),
            },
            Tree::Elem {
                name,
                attributes,
                body,
            } => out.push(Tree::Elem {
                name: name.clone(),
                attributes: attributes.clone(),
                body: normalize(body),
            }),
        }
    }
    out
}
