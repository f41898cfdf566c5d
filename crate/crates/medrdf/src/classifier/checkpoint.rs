//! Checkpoint file format for the built-in network.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8    magic  b"MEDRDFN1"
//! bytes 8..12   format version (u32, currently 1)
//! bytes 12..44  eight u32 header fields:
//!               channels, height, width, num_classes,
//!               conv1_out, conv2_out, hidden, reserved (0)
//! bytes 44..    parameters as f32, row-major, in the fixed order
//!               conv1 weights/bias, conv2 weights/bias,
//!               fc1 weights/bias, fc2 weights/bias
//! ```
//!
//! Parameters are stored in 32-bit floats; loading widens back to f64.

use crate::classifier::{Classifier, SmallNet};
use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 8] = b"MEDRDFN1";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 * 4;

pub fn save_checkpoint(net: &SmallNet, path: &Path) -> Result<()> {
    let (c, h, w) = net.input_shape();
    let mut bytes = Vec::with_capacity(HEADER_LEN + net.param_count() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    for field in [
        c as u32,
        h as u32,
        w as u32,
        net.num_classes() as u32,
        net.conv1_out() as u32,
        net.conv2_out() as u32,
        net.hidden() as u32,
        0u32,
    ] {
        bytes.extend_from_slice(&field.to_le_bytes());
    }
    for p in net.params_flat() {
        bytes.extend_from_slice(&(p as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<SmallNet> {
    let display = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(display.clone(), e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::parse(display, bytes.len() as u64, "truncated header"));
    }
    if &bytes[0..8] != MAGIC {
        return Err(Error::parse(display, 0, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::parse(
            display,
            8,
            format!("unsupported format version {version}"),
        ));
    }
    let mut fields = [0u32; 8];
    for (i, f) in fields.iter_mut().enumerate() {
        let at = 12 + i * 4;
        *f = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    }
    let [c, h, w, k, c1, c2, hid, _reserved] = fields.map(|v| v as usize);
    if c == 0 || h == 0 || w == 0 || k < 2 || c1 == 0 || c2 == 0 || hid == 0 {
        return Err(Error::parse(display, 12, "invalid header field"));
    }
    let net = SmallNet::with_widths((c, h, w), k, c1, c2, hid, 0)?;
    let expected = HEADER_LEN + net.param_count() * 4;
    if bytes.len() != expected {
        return Err(Error::parse(
            display,
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut params = Vec::with_capacity(net.param_count());
    for chunk in bytes[HEADER_LEN..].chunks_exact(4) {
        params.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let mut net = net;
    net.set_params_flat(&params)?;
    Ok(net)
}
