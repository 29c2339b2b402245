//! Typed values over untyped markup forests.
//!
//! Every value encodes to a [`Body`]. Scalars become a single text node
//! (or nothing, for the empty string); composite values wrap each component
//! in an anonymous `:` element so that decoding never needs lookahead.
//! Variants use the decimal tag as the element name.

use super::{Body, Tree};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("decode error: expected {expected}, found {found}")]
pub struct DecodeError {
    pub expected: String,
    pub found: String,
}

impl DecodeError {
    pub fn new(expected: impl Into<String>, found: &[Tree]) -> Self {
        DecodeError {
            expected: expected.into(),
            found: describe(found),
        }
    }
}

fn describe(body: &[Tree]) -> String {
    match body {
        [] => "empty body".to_string(),
        [Tree::Text(t)] => format!("text {:?}", String::from_utf8_lossy(t)),
        [Tree::Elem { name, body, .. }] => {
            format!("element {name:?} with {} children", body.len())
        }
        many => format!("{} trees", many.len()),
    }
}

const NODE: &str = ":";

pub trait Encode {
    fn encode(&self) -> Body;
}

pub trait Decode: Sized {
    fn decode(body: &[Tree]) -> Result<Self, DecodeError>;
}

fn node(body: Body) -> Tree {
    Tree::elem(NODE, body)
}

fn un_node<'a>(tree: &'a Tree, expected: &str) -> Result<&'a [Tree], DecodeError> {
    match tree {
        Tree::Elem {
            name, attributes, body,
        } if name == NODE && attributes.is_empty() => Ok(body),
        other => Err(DecodeError::new(expected, std::slice::from_ref(other))),
    }
}

fn text_of<'a>(body: &'a [Tree], expected: &str) -> Result<&'a [u8], DecodeError> {
    match body {
        [] => Ok(&[]),
        [Tree::Text(t)] => Ok(t),
        other => Err(DecodeError::new(expected, other)),
    }
}

impl Encode for () {
    fn encode(&self) -> Body {
        Vec::new()
    }
}

impl Decode for () {
    fn decode(body: &[Tree]) -> Result<Self, DecodeError> {
        if body.is_empty() {
            Ok(())
        } else {
            Err(DecodeError::new("unit", body))
        }
    }
}

impl Encode for str {
    fn encode(&self) -> Body {
        if self.is_empty() {
            Vec::new()
        } else {
            vec![Tree::text(self.as_bytes())]
        }
    }
}

impl Encode for String {
    fn encode(&self) -> Body {
        self.as_str().encode()
    }
}

impl Decode for String {
    fn decode(body: &[Tree]) -> Result<Self, DecodeError> {
        let bytes = text_of(body, "string")?;
        String::from_utf8(bytes.to_vec()).map_err(|_| DecodeError::new("UTF-8 string", body))
    }
}

macro_rules! int_codec {
    ($($t:ty),*) => {$(
        impl Encode for $t {
            fn encode(&self) -> Body {
                vec![Tree::text(self.to_string())]
            }
        }

        impl Decode for $t {
            fn decode(body: &[Tree]) -> Result<Self, DecodeError> {
                let bytes = text_of(body, "int")?;
                std::str::from_utf8(bytes)
                    .ok()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| DecodeError::new(concat!("int (", stringify!($t), ")"), body))
            }
        }
    )*};
}

int_codec!(i32, i64, u32, u64, usize);

impl Encode for bool {
    fn encode(&self) -> Body {
        vec![Tree::text(if *self { "1" } else { "0" })]
    }
}

impl Decode for bool {
    fn decode(body: &[Tree]) -> Result<Self, DecodeError> {
        match text_of(body, "bool")? {
            b"0" => Ok(false),
            b"1" => Ok(true),
            _ => Err(DecodeError::new("bool", body)),
        }
    }
}

impl<A: Encode, B: Encode> Encode for (A, B) {
    fn encode(&self) -> Body {
        vec![node(self.0.encode()), node(self.1.encode())]
    }
}

impl<A: Decode, B: Decode> Decode for (A, B) {
    fn decode(body: &[Tree]) -> Result<Self, DecodeError> {
        match body {
            [a, b] => Ok((
                A::decode(un_node(a, "pair component")?)?,
                B::decode(un_node(b, "pair component")?)?,
            )),
            other => Err(DecodeError::new("pair", other)),
        }
    }
}

impl<A: Encode, B: Encode, C: Encode> Encode for (A, B, C) {
    fn encode(&self) -> Body {
        vec![
            node(self.0.encode()),
            node(self.1.encode()),
            node(self.2.encode()),
        ]
    }
}

impl<A: Decode, B: Decode, C: Decode> Decode for (A, B, C) {
    fn decode(body: &[Tree]) -> Result<Self, DecodeError> {
        match body {
            [a, b, c] => Ok((
                A::decode(un_node(a, "triple component")?)?,
                B::decode(un_node(b, "triple component")?)?,
                C::decode(un_node(c, "triple component")?)?,
            )),
            other => Err(DecodeError::new("triple", other)),
        }
    }
}

impl<T: Encode> Encode for Vec<T> {
    fn encode(&self) -> Body {
        self.iter().map(|x| node(x.encode())).collect()
    }
}

impl<T: Decode> Decode for Vec<T> {
    fn decode(body: &[Tree]) -> Result<Self, DecodeError> {
        body.iter()
            .map(|t| T::decode(un_node(t, "list element")?))
            .collect()
    }
}

impl<T: Encode> Encode for Option<T> {
    fn encode(&self) -> Body {
        match self {
            None => Vec::new(),
            Some(x) => vec![node(x.encode())],
        }
    }
}

impl<T: Decode> Decode for Option<T> {
    fn decode(body: &[Tree]) -> Result<Self, DecodeError> {
        match body {
            [] => Ok(None),
            [t] => Ok(Some(T::decode(un_node(t, "option value")?)?)),
            other => Err(DecodeError::new("option", other)),
        }
    }
}

impl<T: Encode + ?Sized> Encode for &T {
    fn encode(&self) -> Body {
        (**self).encode()
    }
}

/// Encodes one case of a tagged variant.
pub fn tagged(tag: u32, body: Body) -> Body {
    vec![Tree::elem(tag.to_string(), body)]
}

/// Splits an encoded variant into its tag and payload.
pub fn untag(body: &[Tree]) -> Result<(u32, &[Tree]), DecodeError> {
    match body {
        [Tree::Elem {
            name,
            attributes,
            body: inner,
        }] if attributes.is_empty() => name
            .parse()
            .map(|tag| (tag, inner.as_slice()))
            .map_err(|_| DecodeError::new("variant tag", body)),
        other => Err(DecodeError::new("variant", other)),
    }
}

pub fn encode<T: Encode + ?Sized>(value: &T) -> Body {
    value.encode()
}

pub fn decode<T: Decode>(body: &[Tree]) -> Result<T, DecodeError> {
    T::decode(body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq)]
    enum Shape {
        Dot,
        Line(i64),
        Named(String, bool),
    }

    impl Encode for Shape {
        fn encode(&self) -> Body {
            match self {
                Shape::Dot => tagged(0, Vec::new()),
                Shape::Line(n) => tagged(1, n.encode()),
                Shape::Named(s, b) => tagged(2, (s, b).encode()),
            }
        }
    }

    impl Decode for Shape {
        fn decode(body: &[Tree]) -> Result<Self, DecodeError> {
            match untag(body)? {
                (0, b) => <()>::decode(b).map(|_| Shape::Dot),
                (1, b) => i64::decode(b).map(Shape::Line),
                (2, b) => <(String, bool)>::decode(b).map(|(s, f)| Shape::Named(s, f)),
                _ => Err(DecodeError::new("shape tag 0..=2", body)),
            }
        }
    }

    #[test]
    fn empty_list_is_empty_forest() {
        assert!(Vec::<i64>::new().encode().is_empty());
    }

    #[test]
    fn pair_round_trip() {
        let v = ("a".to_string(), 7i64);
        assert_eq!(decode::<(String, i64)>(&v.encode()).unwrap(), v);
    }

    #[test]
    fn int_from_string_is_shape_mismatch() {
        let err = decode::<i64>(&"x".encode()).unwrap_err();
        assert!(err.expected.starts_with("int"));
        assert!(err.found.contains("\"x\""));
    }

    #[test]
    fn empty_string_and_options() {
        assert!(String::new().encode().is_empty());
        assert_eq!(decode::<String>(&[]).unwrap(), "");
        assert_eq!(decode::<Option<String>>(&Some(String::new()).encode()).unwrap(), Some(String::new()));
        assert_eq!(decode::<Option<i64>>(&None::<i64>.encode()).unwrap(), None);
    }

    #[test]
    fn variants() {
        for s in [Shape::Dot, Shape::Line(-3), Shape::Named("n".into(), true)] {
            assert_eq!(decode::<Shape>(&s.encode()).unwrap(), s);
        }
        assert!(decode::<Shape>(&tagged(9, Vec::new())).is_err());
    }

    #[test]
    fn bool_rejects_other_text() {
        assert!(decode::<bool>(&[Tree::text("2")]).is_err());
    }
}
