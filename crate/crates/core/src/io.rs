//! CSV plumbing shared by every exporter.
//!
//! Each artifact starts with one `#` comment line naming the tool version and
//! a hash of the configuration that produced it, followed by a header row.

use std::io::Write;

use sha2::{Digest, Sha256};

use crate::error::Result;

pub const TOOL: &str = concat!("powerdelay ", env!("CARGO_PKG_VERSION"));

/// Provenance line body for a run configured by `config` (any canonical text).
pub fn provenance(config: &str) -> String {
    let digest = Sha256::digest(config.as_bytes());
    let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    format!("{TOOL} config={hex}")
}

pub fn csv_writer<W: Write>(mut out: W, provenance: &str) -> Result<csv::Writer<W>> {
    writeln!(out, "# {provenance}")?;
    Ok(csv::WriterBuilder::new().from_writer(out))
}

/// Reader that skips `#` provenance lines.
pub fn csv_reader<R: std::io::Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn provenance_is_stable_and_config_sensitive() {
        assert_eq!(provenance("a"), provenance("a"));
        assert_ne!(provenance("a"), provenance("b"));
        assert!(provenance("a").starts_with("powerdelay "));
    }
}
