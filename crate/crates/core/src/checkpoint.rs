//! Text checkpoints: a magic line followed by one line of JSON.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn write<T: Serialize>(path: impl AsRef<Path>, magic: &str, body: &T) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    // Write to a sibling then rename so a crash never leaves half a checkpoint.
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        writeln!(f, "{magic}")?;
        serde_json::to_writer(&mut f, body)?;
        f.write_all(b"\n")?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read<T: DeserializeOwned>(path: impl AsRef<Path>, magic: &str) -> Result<T> {
    let path = path.as_ref();
    let f = std::fs::File::open(path)?;
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Checkpoint(format!("{} is empty", path.display())))??;
    if first != magic {
        return Err(Error::Checkpoint(format!(
            "{}: expected `{magic}`, found `{first}`",
            path.display()
        )));
    }
    let body = lines
        .next()
        .ok_or_else(|| Error::Checkpoint(format!("{} has no body", path.display())))??;
    Ok(serde_json::from_str(&body)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let values = vec![0.1 + 0.2, std::f64::consts::PI, 1e-300, -2.5e17];
        write(&p, "MAGIC v1", &values).unwrap();
        let back: Vec<f64> = read(&p, "MAGIC v1").unwrap();
        assert_eq!(
            values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(matches!(read::<Vec<f64>>(&p, "OTHER v1"), Err(Error::Checkpoint(_))));
    }
}
