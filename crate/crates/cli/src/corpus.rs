//! Prepared corpus on disk: `corpus.tsv` with raw concept values and
//! `stats.json` with the normalization fitted on the training part.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use cbplm::concepts::{ConceptRegistry, ConceptVector, NormalizationStats, BUILTIN_COUNT};
use cbplm::{Error, Result};

pub const CORPUS_FILE: &str = "corpus.tsv";
pub const STATS_FILE: &str = "stats.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub id: String,
    pub sequence: String,
    pub raw: ConceptVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub rows: Vec<Row>,
    pub registry: ConceptRegistry,
    pub stats: NormalizationStats,
}

/// Built-in concepts first, then one categorical concept per extra name.
pub fn registry_for(names: &[String]) -> Result<ConceptRegistry> {
    let mut reg = ConceptRegistry::builtin();
    if names.len() < BUILTIN_COUNT || names[..BUILTIN_COUNT] != reg.names()[..] {
        return Err(Error::Config("concept columns must start with the 14 built-in concepts".into()));
    }
    for extra in &names[BUILTIN_COUNT..] {
        reg = reg.with_categorical(extra)?;
    }
    Ok(reg)
}

pub fn write(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(CORPUS_FILE))?);
    write!(w, "id\tsequence")?;
    for name in corpus.registry.names() {
        write!(w, "\t{name}")?;
    }
    writeln!(w)?;
    for row in &corpus.rows {
        write!(w, "{}\t{}", row.id, row.sequence)?;
        for (v, &obs) in row.raw.values.iter().zip(&row.raw.observed) {
            if obs {
                write!(w, "\t{v}")?;
            } else {
                write!(w, "\t")?;
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    std::fs::write(dir.join(STATS_FILE), serde_json::to_string_pretty(&corpus.stats)?)?;
    Ok(())
}

pub fn read(dir: &Path) -> Result<Corpus> {
    let stats: NormalizationStats = serde_json::from_str(&std::fs::read_to_string(dir.join(STATS_FILE))?)?;
    let registry = registry_for(&stats.names)?;
    let reader = BufReader::new(File::open(dir.join(CORPUS_FILE))?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| Error::Format { line: 1, message: "empty corpus file".into() })??;
    let columns: Vec<&str> = header.split('\t').skip(2).collect();
    if columns.iter().map(|c| c.to_string()).ne(registry.names()) {
        return Err(Error::Format { line: 1, message: "corpus columns do not match stats.json".into() });
    }
    let k = registry.len();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| Error::Format { line: n + 2, message };
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != k + 2 {
            return Err(bad(format!("expected {} columns, found {}", k + 2, cells.len())));
        }
        let mut values = Vec::with_capacity(k);
        let mut observed = Vec::with_capacity(k);
        for cell in &cells[2..] {
            if cell.is_empty() {
                values.push(0.0);
                observed.push(false);
            } else {
                values.push(cell.parse().map_err(|_| bad(format!("bad value `{cell}`")))?);
                observed.push(true);
            }
        }
        rows.push(Row { id: cells[0].to_string(), sequence: cells[1].to_string(), raw: ConceptVector { values, observed, normalized: false } });
    }
    Ok(Corpus { rows, registry, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use cbplm::concepts::{compute_all, fit_normalization};

    #[test]
    fn round_trip() {
        let registry = ConceptRegistry::builtin().with_categorical("secreted").unwrap();
        let mut rows: Vec<Row> = ["MKTAYIAKQR", "GGSWWDEEK"]
            .iter()
            .enumerate()
            .map(|(i, s)| Row { id: format!("s{i}"), sequence: s.to_string(), raw: compute_all(s, &registry).unwrap() })
            .collect();
        rows[0].raw.values[BUILTIN_COUNT] = 1.0;
        rows[0].raw.observed[BUILTIN_COUNT] = true;
        let stats = fit_normalization(&registry, &rows.iter().map(|r| r.raw.clone()).collect::<Vec<_>>());
        let corpus = Corpus { rows, registry, stats };
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), &corpus).unwrap();
        assert_eq!(read(dir.path()).unwrap(), corpus);
    }

    #[test]
    fn rejects_foreign_columns() {
        assert!(registry_for(&["x".to_string()]).is_err());
    }
}
