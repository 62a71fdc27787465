use std::io::{Read, Write};

use super::{Envelope, ProtocolError};

/// Largest accepted frame body, in bytes (2 MiB).
pub const MAX_FRAME_LEN: usize = 2 * 1024 * 1024;

/// 4-byte big-endian length followed by the sorted-key JSON envelope.
pub fn encode(env: &Envelope) -> Result<Vec<u8>, ProtocolError> {
    // serde_json's Map is a BTreeMap here, so keys come out sorted.
    let body = serde_json::to_vec(&env.to_value()).map_err(|e| ProtocolError::Json(e.to_string()))?;
    frame(body)
}

pub fn decode(frame: &[u8]) -> Result<Envelope, ProtocolError> {
    let body = unframe(frame)?;
    let value = serde_json::from_slice(body).map_err(|e| ProtocolError::Json(e.to_string()))?;
    Envelope::from_value(value)
}

pub(crate) fn frame(body: Vec<u8>) -> Result<Vec<u8>, ProtocolError> {
    if body.len() > MAX_FRAME_LEN {
        return Err(ProtocolError::Oversize(body.len()));
    }
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

fn unframe(frame: &[u8]) -> Result<&[u8], ProtocolError> {
    let (head, body) = frame
        .split_first_chunk::<4>()
        .ok_or(ProtocolError::LengthMismatch { declared: 0, actual: frame.len() })?;
    let declared = u32::from_be_bytes(*head) as usize;
    if declared > MAX_FRAME_LEN {
        return Err(ProtocolError::Oversize(declared));
    }
    if declared != body.len() {
        return Err(ProtocolError::LengthMismatch { declared, actual: body.len() });
    }
    Ok(body)
}

/// Writes one frame carrying an arbitrary JSON body.
pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> Result<(), ProtocolError> {
    if body.len() > MAX_FRAME_LEN {
        return Err(ProtocolError::Oversize(body.len()));
    }
    let mut buf = Vec::with_capacity(body.len() + 4);
    buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
    buf.extend_from_slice(body);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame body. `Ok(None)` on clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>, ProtocolError> {
    let mut head = [0u8; 4];
    match r.read_exact(&mut head) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(head) as usize;
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::Oversize(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}
