//! Byte-stable JSON: object keys sorted, floats printed with 17 significant
//! digits.

use std::io;

use serde::Serialize;
use serde_json::ser::{Formatter, Serializer};

use crate::error::Result;

struct FixedFloats;

impl Formatter for FixedFloats {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

/// Canonical text of `value`, newline-terminated. Non-finite floats become
/// `null`.
pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    // Going through `Value` sorts every object's keys.
    let v = serde_json::to_value(value)?;
    let mut buf = Vec::new();
    let mut ser = Serializer::with_formatter(&mut buf, FixedFloats);
    v.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes utf-8"))
}
