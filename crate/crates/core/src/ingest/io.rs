//! Line-oriented text serialization of catalogs, corpora and splits.
//!
//! ```text
//! # catalog <n>
//! <index>\t<external_id>\t<title>
//! # sequences <m>
//! <user_id>\t<i1> <i2> ...
//! ```

use std::io::{BufRead, Write};

use super::{chronological_split, Corpus, ItemCatalog, SplitCorpus, UserSequence};
use crate::error::{Error, Result};

pub fn write_catalog<W: Write>(mut w: W, catalog: &ItemCatalog) -> Result<()> {
    for i in 0..catalog.len() {
        writeln!(w, "{i}\t{}\t{}", catalog.external_id(i), catalog.title(i))?;
    }
    Ok(())
}

fn parse_catalog_line(catalog: &mut ItemCatalog, line: &str, line_no: usize) -> Result<()> {
    let mut parts = line.splitn(3, '\t');
    let (Some(idx), Some(id), Some(title)) = (parts.next(), parts.next(), parts.next()) else {
        return Err(Error::parse(line_no, "catalog line needs index, id and title"));
    };
    let idx: usize = idx
        .parse()
        .map_err(|_| Error::parse(line_no, format!("bad index {idx:?}")))?;
    if idx != catalog.len() {
        return Err(Error::parse(
            line_no,
            format!("index {idx} out of order (expected {})", catalog.len()),
        ));
    }
    catalog
        .push(id, title)
        .map_err(|e| Error::parse(line_no, e.to_string()))?;
    Ok(())
}

pub fn read_catalog<R: BufRead>(r: R) -> Result<ItemCatalog> {
    let mut catalog = ItemCatalog::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        parse_catalog_line(&mut catalog, &line, n + 1)?;
    }
    Ok(catalog)
}

pub fn write_corpus<W: Write>(mut w: W, corpus: &Corpus) -> Result<()> {
    writeln!(w, "# catalog {}", corpus.catalog.len())?;
    write_catalog(&mut w, &corpus.catalog)?;
    writeln!(w, "# sequences {}", corpus.sequences.len())?;
    for seq in &corpus.sequences {
        let items: Vec<String> = seq.items.iter().map(|i| i.to_string()).collect();
        writeln!(w, "{}\t{}", seq.user_id, items.join(" "))?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<Corpus> {
    enum Section {
        None,
        Catalog,
        Sequences,
    }
    let mut section = Section::None;
    let mut corpus = Corpus::default();
    for (n, line) in r.lines().enumerate() {
        let line_no = n + 1;
        let line = line?;
        if let Some(header) = line.strip_prefix("# ") {
            section = if header.starts_with("catalog") {
                Section::Catalog
            } else if header.starts_with("sequences") {
                Section::Sequences
            } else {
                section
            };
            continue;
        }
        if line.is_empty() {
            continue;
        }
        match section {
            Section::None => return Err(Error::parse(line_no, "data before section header")),
            Section::Catalog => parse_catalog_line(&mut corpus.catalog, &line, line_no)?,
            Section::Sequences => {
                let (user, items) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::parse(line_no, "sequence line needs a user id"))?;
                let items = items
                    .split_whitespace()
                    .map(|t| {
                        let i: usize = t
                            .parse()
                            .map_err(|_| Error::parse(line_no, format!("bad item {t:?}")))?;
                        corpus
                            .catalog
                            .check(i)
                            .map_err(|e| Error::parse(line_no, e.to_string()))?;
                        Ok(i)
                    })
                    .collect::<Result<Vec<_>>>()?;
                corpus.sequences.push(UserSequence {
                    user_id: user.to_string(),
                    items,
                    timestamps: None,
                });
            }
        }
    }
    Ok(corpus)
}

/// A split is stored as its full corpus; the leave-one-out split is a pure
/// function of it and is recomputed on load.
pub fn write_split<W: Write>(mut w: W, split: &SplitCorpus) -> Result<()> {
    writeln!(w, "# split users={} rejected={}", split.users.len(), split.rejected)?;
    write_corpus(w, &split.corpus)
}

pub fn read_split<R: BufRead>(r: R) -> Result<SplitCorpus> {
    Ok(chronological_split(&read_corpus(r)?))
}
