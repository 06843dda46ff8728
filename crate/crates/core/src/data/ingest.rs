use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetBuilder, RatingDataset, RatingTriple};
use crate::error::{Error, Result};

/// Column mapping for rating CSV files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub user_col: String,
    pub item_col: String,
    pub rating_col: String,
    pub domain_col: String,
    /// Minimum ratings per user and per item within a domain; `None` disables the filter.
    pub min_interactions: Option<usize>,
    pub max_sequence: usize,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            user_col: "user_id".into(),
            item_col: "item_id".into(),
            rating_col: "rating".into(),
            domain_col: "domain".into(),
            min_interactions: None,
            max_sequence: super::DEFAULT_MAX_SEQUENCE,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub rows: usize,
    pub duplicates: usize,
    pub filtered: usize,
}

pub fn ingest_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<(RatingDataset, IngestStats)> {
    let file = std::fs::File::open(path.as_ref())?;
    ingest_reader(file, schema)
}

pub fn ingest_reader<R: Read>(reader: R, schema: &CsvSchema) -> Result<(RatingDataset, IngestStats)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse {
                line: 1,
                msg: format!("missing column `{name}`"),
            })
    };
    let (cu, ci, cr, cd) = (
        col(&schema.user_col)?,
        col(&schema.item_col)?,
        col(&schema.rating_col)?,
        col(&schema.domain_col)?,
    );

    let mut builder = DatasetBuilder::new().max_sequence(schema.max_sequence);
    let mut rows = 0;
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| {
            record.get(i).ok_or_else(|| Error::Parse {
                line,
                msg: format!("missing field {i}"),
            })
        };
        let rating: f64 = field(cr)?.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("rating `{}` is not a number", field(cr).unwrap_or_default()),
        })?;
        if !rating.is_finite() {
            return Err(Error::Parse {
                line,
                msg: "rating is not finite".into(),
            });
        }
        let domain: usize = field(cd)?.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("domain `{}` is not a non-negative integer", field(cd).unwrap_or_default()),
        })?;
        let (user_id, item_id) = (field(cu)?.to_string(), field(ci)?.to_string());
        if user_id.is_empty() || item_id.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty user or item id".into(),
            });
        }
        builder
            .push(RatingTriple {
                user_id,
                item_id,
                rating,
                domain,
            })
            .map_err(|e| match e {
                Error::Validation(m) => Error::Validation(format!("line {line}: {m}")),
                other => other,
            })?;
        rows += 1;
    }
    let duplicates = builder.duplicates();
    let (ds, filtered) = builder.build(schema.min_interactions)?;
    Ok((
        ds,
        IngestStats {
            rows,
            duplicates,
            filtered,
        },
    ))
}
