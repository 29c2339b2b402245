//! YXML: markup trees embedded in byte streams with two reserved control
//! bytes. Text is carried verbatim because the control bytes may not occur
//! in it.
//!
//! ```text
//! open  = X Y name (Y key '=' value)* X
//! close = X Y X
//! text  = any bytes except X and Y
//! ```

use super::{Body, Tree};
use thiserror::Error;

pub const X: u8 = 0x05;
pub const Y: u8 = 0x06;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum YxmlError {
    #[error("cannot encode {what} {value:?}: {reason}")]
    Encode {
        what: &'static str,
        value: String,
        reason: &'static str,
    },
    #[error("malformed YXML at byte {offset}: {reason}")]
    Decode { offset: usize, reason: &'static str },
}

impl YxmlError {
    fn encode(what: &'static str, value: &[u8], reason: &'static str) -> Self {
        YxmlError::Encode {
            what,
            value: String::from_utf8_lossy(value).into_owned(),
            reason,
        }
    }

    fn decode(offset: usize, reason: &'static str) -> Self {
        YxmlError::Decode { offset, reason }
    }

    pub fn offset(&self) -> Option<usize> {
        match self {
            YxmlError::Decode { offset, .. } => Some(*offset),
            YxmlError::Encode { .. } => None,
        }
    }
}

fn is_reserved(b: u8) -> bool {
    b == X || b == Y
}

fn check_name(what: &'static str, name: &[u8]) -> Result<(), YxmlError> {
    if name.is_empty() {
        return Err(YxmlError::encode(what, name, "empty name"));
    }
    if name.iter().any(|&b| is_reserved(b) || b == b'=') {
        return Err(YxmlError::encode(what, name, "reserved byte in name"));
    }
    Ok(())
}

fn check_text(what: &'static str, text: &[u8]) -> Result<(), YxmlError> {
    if text.iter().copied().any(is_reserved) {
        return Err(YxmlError::encode(what, text, "reserved control byte"));
    }
    Ok(())
}

pub fn encode(tree: &Tree) -> Result<Vec<u8>, YxmlError> {
    let mut out = Vec::new();
    encode_into(tree, &mut out)?;
    Ok(out)
}

pub fn encode_body(body: &[Tree]) -> Result<Vec<u8>, YxmlError> {
    let mut out = Vec::new();
    for tree in body {
        encode_into(tree, &mut out)?;
    }
    Ok(out)
}

fn encode_into(tree: &Tree, out: &mut Vec<u8>) -> Result<(), YxmlError> {
    match tree {
        Tree::Text(text) => {
            check_text("text", text)?;
            out.extend_from_slice(text);
        }
        Tree::Elem {
            name,
            attributes,
            body,
        } => {
            check_name("element name", name.as_bytes())?;
            out.extend_from_slice(&[X, Y]);
            out.extend_from_slice(name.as_bytes());
            for (i, (key, value)) in attributes.iter().enumerate() {
                check_name("attribute key", key.as_bytes())?;
                check_text("attribute value", value)?;
                if attributes[..i].iter().any(|(k, _)| k == key) {
                    return Err(YxmlError::encode(
                        "attribute key",
                        key.as_bytes(),
                        "duplicate attribute",
                    ));
                }
                out.push(Y);
                out.extend_from_slice(key.as_bytes());
                out.push(b'=');
                out.extend_from_slice(value);
            }
            out.push(X);
            for child in body {
                encode_into(child, out)?;
            }
            out.extend_from_slice(&[X, Y, X]);
        }
    }
    Ok(())
}

struct Open {
    name: String,
    attributes: Vec<(String, Vec<u8>)>,
    body: Body,
}

/// Parses a YXML byte string into a forest. Total: every input yields
/// either a forest or a positioned error.
pub fn decode(bytes: &[u8]) -> Result<Body, YxmlError> {
    let mut stack: Vec<Open> = Vec::new();
    let mut top: Body = Vec::new();
    let mut pos = 0;

    fn push(stack: &mut [Open], top: &mut Body, tree: Tree) {
        match stack.last_mut() {
            Some(open) => open.body.push(tree),
            None => top.push(tree),
        }
    }

    while pos < bytes.len() {
        match bytes[pos] {
            X => {
                if bytes.get(pos + 1) != Some(&Y) {
                    return Err(YxmlError::decode(pos, "stray control byte"));
                }
                if bytes.get(pos + 2) == Some(&X) {
                    let open = stack
                        .pop()
                        .ok_or_else(|| YxmlError::decode(pos, "close without open"))?;
                    push(
                        &mut stack,
                        &mut top,
                        Tree::Elem {
                            name: open.name,
                            attributes: open.attributes,
                            body: open.body,
                        },
                    );
                    pos += 3;
                    continue;
                }
                let start = pos + 2;
                let end = bytes[start..]
                    .iter()
                    .position(|&b| b == X)
                    .map(|i| start + i)
                    .ok_or_else(|| YxmlError::decode(pos, "unterminated element header"))?;
                let mut fields = bytes[start..end].split(|&b| b == Y);
                let name = fields.next().unwrap_or_default();
                if name.is_empty() {
                    return Err(YxmlError::decode(start, "empty element name"));
                }
                let name = String::from_utf8(name.to_vec())
                    .map_err(|_| YxmlError::decode(start, "element name is not UTF-8"))?;
                let mut attributes: Vec<(String, Vec<u8>)> = Vec::new();
                let mut field_start = start + name.len() + 1;
                for field in fields {
                    let eq = field
                        .iter()
                        .position(|&b| b == b'=')
                        .ok_or_else(|| YxmlError::decode(field_start, "attribute without '='"))?;
                    if eq == 0 {
                        return Err(YxmlError::decode(field_start, "empty attribute key"));
                    }
                    let key = String::from_utf8(field[..eq].to_vec()).map_err(|_| {
                        YxmlError::decode(field_start, "attribute key is not UTF-8")
                    })?;
                    if attributes.iter().any(|(k, _)| *k == key) {
                        return Err(YxmlError::decode(field_start, "duplicate attribute"));
                    }
                    attributes.push((key, field[eq + 1..].to_vec()));
                    field_start += field.len() + 1;
                }
                stack.push(Open {
                    name,
                    attributes,
                    body: Vec::new(),
                });
                pos = end + 1;
            }
            Y => return Err(YxmlError::decode(pos, "stray control byte")),
            _ => {
                let end = bytes[pos..]
                    .iter()
                    .position(|&b| is_reserved(b))
                    .map_or(bytes.len(), |i| pos + i);
                push(&mut stack, &mut top, Tree::Text(bytes[pos..end].to_vec()));
                pos = end;
            }
        }
    }
    if !stack.is_empty() {
        return Err(YxmlError::decode(bytes.len(), "unclosed element"));
    }
    Ok(top)
}

/// Decodes input that must contain exactly one tree.
pub fn decode_single(bytes: &[u8]) -> Result<Tree, YxmlError> {
    let mut forest = decode(bytes)?;
    match forest.len() {
        1 => Ok(forest.pop().unwrap()),
        0 => Err(YxmlError::decode(0, "expected a single tree, found none")),
        _ => Err(YxmlError::decode(0, "expected a single tree, found several")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a_with_attr() -> Tree {
        Tree::elem_with(
            "a",
            vec![("k".into(), b"v".to_vec())],
            vec![Tree::text("d")],
        )
    }

    #[test]
    fn text_passes_through() {
        assert_eq!(encode(&Tree::text("abc")).unwrap(), b"abc");
    }

    #[test]
    fn element_with_attribute() {
        let expected = [X, Y, b'a', Y, b'k', b'=', b'v', X, b'd', X, Y, X];
        assert_eq!(encode(&a_with_attr()).unwrap(), expected);
        assert_eq!(decode(&expected).unwrap(), vec![a_with_attr()]);
    }

    #[test]
    fn empty_element() {
        let expected = [X, Y, b'e', X, X, Y, X];
        assert_eq!(encode(&Tree::elem("e", vec![])).unwrap(), expected);
    }

    #[test]
    fn empty_input_is_empty_forest() {
        assert_eq!(decode(b"").unwrap(), Vec::<Tree>::new());
    }

    #[test]
    fn close_without_open() {
        let err = decode(&[X, Y, X]).unwrap_err();
        assert_eq!(err.offset(), Some(0));
    }

    #[test]
    fn unclosed_element() {
        let err = decode(&[X, Y, b'a', X, b't']).unwrap_err();
        assert_eq!(err.offset(), Some(5));
    }

    #[test]
    fn stray_control_bytes() {
        assert_eq!(decode(&[b'a', Y]).unwrap_err().offset(), Some(1));
        assert_eq!(decode(&[b'a', X, b'b']).unwrap_err().offset(), Some(1));
    }

    #[test]
    fn attribute_without_equals() {
        let err = decode(&[X, Y, b'a', Y, b'k', X, X, Y, X]).unwrap_err();
        assert_eq!(err.offset(), Some(4));
    }

    #[test]
    fn attribute_value_may_contain_equals() {
        let tree = Tree::elem_with("a", vec![("k".into(), b"x=y".to_vec())], vec![]);
        let bytes = encode(&tree).unwrap();
        assert_eq!(decode(&bytes).unwrap(), vec![tree]);
    }

    #[test]
    fn encode_rejects_reserved_bytes() {
        assert!(encode(&Tree::text(vec![b'a', X])).is_err());
        assert!(encode(&Tree::elem("", vec![])).is_err());
        assert!(encode(&Tree::elem("a=b", vec![])).is_err());
        let dup = Tree::elem_with(
            "a",
            vec![("k".into(), vec![]), ("k".into(), vec![])],
            vec![],
        );
        assert!(encode(&dup).is_err());
    }
}
