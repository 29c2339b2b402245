//! Chunk framing: a header line of decimal chunk lengths joined by `,`
//! and terminated by `\n`, followed by the raw chunk bytes.

use std::io::{self, BufRead, Read, Write};
use thiserror::Error;

/// Upper bound on a header line, to fail fast on garbage.
const MAX_HEADER: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum FramingError {
    #[error("end of stream inside a message")]
    Truncated,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("empty message")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_chunks<C: AsRef<[u8]>>(out: &mut impl Write, chunks: &[C]) -> Result<(), FramingError> {
    if chunks.is_empty() {
        return Err(FramingError::Empty);
    }
    let header = chunks
        .iter()
        .map(|c| c.as_ref().len().to_string())
        .collect::<Vec<_>>()
        .join(",");
    out.write_all(header.as_bytes())?;
    out.write_all(b"\n")?;
    for chunk in chunks {
        out.write_all(chunk.as_ref())?;
    }
    Ok(())
}

/// Reads one message. `Ok(None)` means the stream ended cleanly between
/// messages.
pub fn read_chunks(input: &mut impl BufRead) -> Result<Option<Vec<Vec<u8>>>, FramingError> {
    let mut header = Vec::new();
    let n = input.take(MAX_HEADER as u64 + 1).read_until(b'\n', &mut header)?;
    if n == 0 {
        return Ok(None);
    }
    if header.last() != Some(&b'\n') {
        return Err(if header.len() > MAX_HEADER {
            FramingError::MalformedHeader("header too long".into())
        } else {
            FramingError::Truncated
        });
    }
    header.pop();
    let lengths = parse_header(&header)?;
    let mut chunks = Vec::with_capacity(lengths.len());
    for len in lengths {
        let mut chunk = vec![0; len];
        input.read_exact(&mut chunk).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => FramingError::Truncated,
            _ => FramingError::Io(e),
        })?;
        chunks.push(chunk);
    }
    Ok(Some(chunks))
}

fn parse_header(header: &[u8]) -> Result<Vec<usize>, FramingError> {
    let bad = || FramingError::MalformedHeader(String::from_utf8_lossy(header).into_owned());
    if header.is_empty() {
        return Err(bad());
    }
    header
        .split(|b| *b == b',')
        .map(|field| {
            if field.is_empty() || !field.iter().all(u8::is_ascii_digit) {
                return Err(bad());
            }
            std::str::from_utf8(field).unwrap().parse().map_err(|_| bad())
        })
        .collect()
}
