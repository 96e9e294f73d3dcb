//! JSON serialization with floats printed at 17 significant digits.
//!
//! 17 digits round-trip any f64 exactly, and a fixed format keeps dataset
//! manifests byte-identical across generate -> load -> re-serialize.

use crate::error::Result;
use serde::Serialize;
use serde_json::ser::{CompactFormatter, Formatter, Serializer};
use std::io;

struct SigDigits17;

impl Formatter for SigDigits17 {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{:.16e}", value)
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{:.16e}", value as f64)
    }

    // everything else: compact defaults
    fn write_null<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        CompactFormatter.write_null(writer)
    }
}

/// Serialize `value` as compact JSON with 17-significant-digit floats.
pub fn to_string_17<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = Serializer::with_formatter(&mut out, SigDigits17);
    value.serialize(&mut ser)?;
    // the formatter only emits ASCII
    Ok(String::from_utf8(out).expect("json output is utf-8"))
}
