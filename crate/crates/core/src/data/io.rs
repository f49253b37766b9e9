use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Attribute, DataError, QaExample, Scope, ScopedDataset, Split, Vocab};

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "knowbench";
const VOCAB_HEADER: &str = "knowbench-vocab";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    counts: BTreeMap<Split, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    instance_id: u32,
    attribute: Attribute,
    scope: Scope,
    split: Split,
    question: String,
    answer: String,
}

/// Sidecar vocabulary file stored next to a dataset file.
pub fn vocab_path(dataset: &Path) -> PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

/// Writes the dataset as JSON lines: one header, then one record per example.
pub fn write_dataset<W: Write>(ds: &ScopedDataset, mut w: W) -> Result<(), DataError> {
    let header = Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        counts: Split::ALL.iter().map(|&s| (s, ds.split(s).len())).collect(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("serializable"))?;
    for split in Split::ALL {
        for e in ds.split(split) {
            let r = Record {
                id: e.id.clone(),
                instance_id: e.instance_id,
                attribute: e.attribute,
                scope: e.scope,
                split,
                question: e.question.clone(),
                answer: e.answer.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&r).expect("serializable"))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_vocab<W: Write>(v: &Vocab, mut w: W) -> Result<(), DataError> {
    writeln!(w, "{VOCAB_HEADER} {FORMAT_VERSION}")?;
    for t in v.tokens() {
        writeln!(w, "{t}")?;
    }
    w.flush()?;
    Ok(())
}

fn read_vocab<R: BufRead>(r: R) -> Result<Vocab, DataError> {
    let mut lines = r.lines();
    let first = lines.next().transpose()?.unwrap_or_default();
    if first != format!("{VOCAB_HEADER} {FORMAT_VERSION}") {
        return Err(DataError::Vocab(format!("unexpected header {first:?}")));
    }
    let tokens = lines.collect::<Result<Vec<_>, _>>()?;
    Vocab::from_tokens(tokens)
}

fn parse_err(line: usize, message: impl Into<String>) -> DataError {
    DataError::Parse {
        line,
        message: message.into(),
    }
}

/// Parses a dataset; `vocab` must cover every token it contains.
pub fn read_dataset<R: BufRead>(r: R, vocab: Vocab) -> Result<ScopedDataset, DataError> {
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .transpose()?
        .ok_or_else(|| parse_err(1, "missing header"))?;
    let header: Header =
        serde_json::from_str(&header_line).map_err(|e| parse_err(1, format!("header: {e}")))?;
    if header.format != FORMAT_NAME {
        return Err(parse_err(1, format!("unknown format {:?}", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(parse_err(1, format!("unsupported version {}", header.version)));
    }
    let mut splits: BTreeMap<Split, Vec<QaExample>> = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        if r.scope != r.attribute.scope() {
            return Err(DataError::TaxonomyViolation {
                line: line_no,
                attribute: r.attribute,
                expected: r.attribute.scope(),
                found: r.scope,
            });
        }
        if r.scope != r.split.scope() {
            return Err(parse_err(
                line_no,
                format!("scope {:?} not allowed in split {:?}", r.scope, r.split),
            ));
        }
        for w in r.question.split_whitespace().chain(r.answer.split_whitespace()) {
            if vocab.id(w).is_none() {
                return Err(parse_err(line_no, format!("token {w:?} is not in the vocabulary")));
            }
        }
        splits.entry(r.split).or_default().push(QaExample {
            id: r.id,
            instance_id: r.instance_id,
            attribute: r.attribute,
            scope: r.scope,
            question: r.question,
            answer: r.answer,
        });
    }
    for s in Split::ALL {
        let found = splits.get(&s).map_or(0, Vec::len);
        let declared = header.counts.get(&s).copied().unwrap_or(0);
        if found != declared {
            return Err(parse_err(
                1,
                format!("header declares {declared} {s:?} records, file has {found}"),
            ));
        }
    }
    let mut take = |s| splits.remove(&s).unwrap_or_default();
    Ok(ScopedDataset {
        unlearn: take(Split::Unlearn),
        retention: take(Split::Retention),
        ood: take(Split::Ood),
        general: take(Split::General),
        vocab,
    })
}

/// Writes `path` and its vocabulary sidecar.
pub fn save_dataset(ds: &ScopedDataset, path: &Path) -> Result<(), DataError> {
    write_dataset(ds, BufWriter::new(File::create(path)?))?;
    write_vocab(&ds.vocab, BufWriter::new(File::create(vocab_path(path))?))
}

pub fn load_dataset(path: &Path) -> Result<ScopedDataset, DataError> {
    let vocab = read_vocab(BufReader::new(File::open(vocab_path(path))?))?;
    read_dataset(BufReader::new(File::open(path)?), vocab)
}
