//! `MARCO-DS v1` dataset cache.
//!
//! Line 1 is the magic `MARCO-DS v1`. Line 2 is a JSON header
//! `{"domains":[..],"users":[..],"max_sequence":M,"informativeness":null|[..],"ratings":R}`.
//! Each of the following `R` lines is one rating
//! `{"d":domain,"u":user_index,"i":"item id","r":rating}`, grouped by domain
//! and in stored order within a domain. Lines end with `\n`.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetBuilder, RatingDataset, RatingTriple};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &str = "MARCO-DS v1";

#[derive(Serialize, Deserialize)]
struct Header {
    domains: Vec<String>,
    users: Vec<String>,
    max_sequence: usize,
    informativeness: Option<Vec<f64>>,
    ratings: usize,
}

#[derive(Serialize, Deserialize)]
struct Row<'a> {
    d: usize,
    u: u32,
    #[serde(borrow)]
    i: std::borrow::Cow<'a, str>,
    r: f64,
}

pub fn write_dataset<W: Write>(w: W, ds: &RatingDataset) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "{DATASET_MAGIC}")?;
    let header = Header {
        domains: ds.domains().iter().map(|d| d.name().to_string()).collect(),
        users: ds.user_names().to_vec(),
        max_sequence: ds.max_sequence(),
        informativeness: ds.informativeness().map(<[f64]>::to_vec),
        ratings: ds.total_ratings(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (d, dom) in ds.domains().iter().enumerate() {
        for r in dom.ratings() {
            let row = Row {
                d,
                u: dom.global_user(r.user),
                i: dom.item_name(r.item).into(),
                r: r.value,
            };
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<RatingDataset> {
    let mut lines = BufReader::new(r).lines();
    let bad = |line: usize, msg: &str| Error::Parse {
        line,
        msg: msg.to_string(),
    };
    let magic = lines.next().ok_or_else(|| bad(1, "empty file"))??;
    if magic != DATASET_MAGIC {
        return Err(bad(1, &format!("expected `{DATASET_MAGIC}`, found `{magic}`")));
    }
    let header_line = lines.next().ok_or_else(|| bad(2, "missing header"))??;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| bad(2, &e.to_string()))?;
    let mut builder = DatasetBuilder::new()
        .domain_names(header.domains.clone())
        .user_order(header.users.clone())
        .informativeness(header.informativeness.clone())
        .max_sequence(header.max_sequence);
    let mut count = 0;
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 3;
        let row: Row = serde_json::from_str(&line).map_err(|e| bad(lineno, &e.to_string()))?;
        let user = header
            .users
            .get(row.u as usize)
            .ok_or_else(|| bad(lineno, "user index out of range"))?;
        builder.push(RatingTriple {
            user_id: user.clone(),
            item_id: row.i.into_owned(),
            rating: row.r,
            domain: row.d,
        })?;
        count += 1;
    }
    if count != header.ratings {
        return Err(Error::Validation(format!(
            "header declares {} ratings but {count} were read",
            header.ratings
        )));
    }
    Ok(builder.build(None)?.0)
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &RatingDataset) -> Result<()> {
    write_dataset(std::fs::File::create(path)?, ds)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<RatingDataset> {
    read_dataset(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::super::{ingest_reader, CsvSchema};
    use super::*;

    #[test]
    fn rejects_wrong_magic() {
        assert!(matches!(read_dataset("MARCO-DS v2\n{}".as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn ingest_serialize_ingest_is_identity() {
        let csv = "user_id,item_id,rating,domain\nb,i1,4,0\na,i2,3.5,0\na,i1,1,1\nc,\"x, y\",2.25,1\nb,i1,5,1\n";
        let (ds, _) = ingest_reader(csv.as_bytes(), &CsvSchema::default()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        let mut again = Vec::new();
        write_dataset(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }
}
