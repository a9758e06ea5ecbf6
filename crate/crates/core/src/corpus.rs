//! Raw corpus structuring and word-level segment packing.
//!
//! An empty line separates documents. Inside a document, whitespace-only
//! lines are removed and lines shorter than `min_chars` characters are
//! dropped. Lines are then packed greedily into segments of at most
//! `max_words` whitespace-delimited words.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_WORDS: usize = 512;
pub const DEFAULT_MIN_CHARS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuredDocument {
    pub doc_id: usize,
    pub lines: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub doc_id: usize,
    pub seg_index: usize,
    pub words: Vec<String>,
}

/// Removes blank lines and lines with fewer than `min_chars` characters
/// (Unicode scalar values, spaces included). Kept lines stay in order.
pub fn structure_raw_text(raw: &str, min_chars: usize) -> Vec<String> {
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .filter(|l| l.chars().count() >= min_chars)
        .map(str::to_string)
        .collect()
}

/// Yields one [`StructuredDocument`] per empty-line-delimited block.
pub struct DocumentStream<R> {
    reader: R,
    next_id: usize,
    min_chars: usize,
    buf: String,
    source: PathBuf,
    lineno: usize,
}

impl<R: BufRead> DocumentStream<R> {
    pub fn new(reader: R, min_chars: usize, first_doc_id: usize, source: PathBuf) -> Self {
        DocumentStream {
            reader,
            next_id: first_doc_id,
            min_chars,
            buf: String::new(),
            source,
            lineno: 0,
        }
    }

    pub fn next_doc_id(&self) -> usize {
        self.next_id
    }
}

impl<R: BufRead> Iterator for DocumentStream<R> {
    type Item = Result<StructuredDocument>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut block = String::new();
        loop {
            self.buf.clear();
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => break,
                Ok(_) => {
                    self.lineno += 1;
                    let line = self.buf.trim_end_matches(['\n', '\r']);
                    if line.is_empty() {
                        if block.is_empty() {
                            continue;
                        }
                        break;
                    }
                    block.push_str(line);
                    block.push('\n');
                }
                Err(e) => {
                    return Some(Err(Error::io(
                        format!("{}:{}", self.source.display(), self.lineno + 1),
                        e,
                    )))
                }
            }
        }
        if block.is_empty() {
            return None;
        }
        let doc = StructuredDocument {
            doc_id: self.next_id,
            lines: structure_raw_text(&block, self.min_chars),
        };
        self.next_id += 1;
        Some(Ok(doc))
    }
}

pub fn stream_documents(path: impl AsRef<Path>, min_chars: usize) -> Result<DocumentStream<BufReader<File>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(DocumentStream::new(
        BufReader::new(file),
        min_chars,
        0,
        path.to_path_buf(),
    ))
}

/// Reads a file, or every regular file of a directory in name order, with
/// document ids continuing across files.
pub fn read_corpus(path: impl AsRef<Path>, min_chars: usize) -> Result<Vec<StructuredDocument>> {
    let path = path.as_ref();
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut docs = Vec::new();
    let mut next_id = 0;
    for file_path in files {
        let file = File::open(&file_path).map_err(|e| Error::io(&file_path, e))?;
        let mut stream = DocumentStream::new(BufReader::new(file), min_chars, next_id, file_path);
        for doc in stream.by_ref() {
            docs.push(doc?);
        }
        next_id = stream.next_doc_id();
    }
    Ok(docs)
}

/// Greedy word packing. A single line longer than `max_words` loses its
/// tail; otherwise lines flow across segment boundaries.
pub fn pack_sentences(doc: &StructuredDocument, max_words: usize) -> Result<Vec<Segment>> {
    if max_words < 1 {
        return Err(Error::invalid("max_words must be at least 1"));
    }
    let mut segments = Vec::new();
    let mut current: Vec<String> = Vec::with_capacity(max_words);
    for line in &doc.lines {
        for word in line.split_whitespace().take(max_words) {
            current.push(word.to_string());
            if current.len() == max_words {
                segments.push(Segment {
                    doc_id: doc.doc_id,
                    seg_index: segments.len(),
                    words: std::mem::replace(&mut current, Vec::with_capacity(max_words)),
                });
            }
        }
    }
    if !current.is_empty() {
        segments.push(Segment {
            doc_id: doc.doc_id,
            seg_index: segments.len(),
            words: current,
        });
    }
    Ok(segments)
}

pub(crate) fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Packs every document on `threads` workers; output is ordered by
/// `(doc_id, seg_index)` regardless of thread count.
pub fn pack_documents(docs: &[StructuredDocument], max_words: usize, threads: usize) -> Result<Vec<Segment>> {
    let pool = thread_pool(threads)?;
    let packed: Vec<Vec<Segment>> = pool.install(|| {
        docs.par_iter()
            .map(|d| pack_sentences(d, max_words))
            .collect::<Result<_>>()
    })?;
    let mut segments: Vec<Segment> = packed.into_iter().flatten().collect();
    segments.sort_by_key(|s| (s.doc_id, s.seg_index));
    Ok(segments)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{}:{}", path.display(), i + 1), e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::io::Cursor;

    use proptest::prelude::*;

    use super::*;

    fn words(n: usize, tag: &str) -> String {
        (0..n).map(|i| format!("{tag}{i}")).collect::<Vec<_>>().join(" ")
    }

    fn docs_from(text: &str) -> Vec<StructuredDocument> {
        DocumentStream::new(Cursor::new(text.as_bytes()), DEFAULT_MIN_CHARS, 0, "mem".into())
            .collect::<Result<_>>()
            .unwrap()
    }

    #[test]
    fn short_lines_are_dropped() {
        let raw = "mild sepsis noted.\n12345678901234567890\n\n   \nthis line is long enough to keep";
        assert_eq!("mild sepsis noted.".chars().count(), 18);
        assert_eq!(
            structure_raw_text(raw, 20),
            vec!["12345678901234567890", "this line is long enough to keep"]
        );
        assert!(structure_raw_text("\n\n  \n", 20).is_empty());
    }

    #[test]
    fn min_chars_counts_scalar_values() {
        // 19 scalar values, 38 bytes
        let line = "αβγδεζηθικλμνξοπρστ";
        assert!(structure_raw_text(line, 20).is_empty());
        assert_eq!(structure_raw_text(&format!("{line}υ"), 20).len(), 1);
    }

    #[test]
    fn empty_lines_split_documents() {
        let docs = docs_from("first document line A\n\nsecond document line B");
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[1].doc_id, 1);
        assert_eq!(docs[1].lines, vec!["second document line B"]);

        let docs = docs_from("first document line A\r\n\r\n\n\n");
        assert_eq!(docs.len(), 1);
        assert!(docs_from("").is_empty());
    }

    #[test]
    fn filtered_documents_are_empty_but_counted() {
        let docs = docs_from("short\n\nanother document that is long");
        assert_eq!(docs.len(), 2);
        assert!(docs[0].lines.is_empty());
        assert!(pack_sentences(&docs[0], 8).unwrap().is_empty());
    }

    #[test]
    fn packing_examples() {
        let doc = |lines: Vec<String>| StructuredDocument { doc_id: 3, lines };
        let segs = pack_sentences(&doc(vec![words(600, "w")]), 512).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].words.len(), 512);
        assert_eq!(segs[0].words[511], "w511");

        let segs = pack_sentences(&doc(vec![words(300, "a"), words(300, "b")]), 512).unwrap();
        assert_eq!(segs.iter().map(|s| s.words.len()).collect::<Vec<_>>(), vec![512, 88]);
        assert_eq!(segs[0].words[300], "b0");
        assert_eq!(segs[1].words[0], "b212");
        assert_eq!(segs[1].seg_index, 1);

        let segs = pack_sentences(&doc(vec![words(512, "c")]), 512).unwrap();
        assert_eq!(segs.len(), 1);

        assert!(pack_sentences(&doc(vec![]), 0).is_err());
    }

    #[test]
    fn parallel_packing_matches_sequential() {
        let docs: Vec<StructuredDocument> = (0..40)
            .map(|d| StructuredDocument {
                doc_id: d,
                lines: (0..(d % 7 + 1)).map(|l| words(l * 13 + d, "x")).collect(),
            })
            .collect();
        let one = pack_documents(&docs, 50, 1).unwrap();
        let four = pack_documents(&docs, 50, 4).unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("segs.jsonl");
        let segs = vec![Segment {
            doc_id: 0,
            seg_index: 0,
            words: vec!["a".into(), "b".into()],
        }];
        write_jsonl(&path, &segs).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "{\"doc_id\":0,\"seg_index\":0,\"words\":[\"a\",\"b\"]}\n"
        );
        assert_eq!(read_jsonl::<Segment>(&path).unwrap(), segs);
    }

    proptest! {
        #[test]
        fn packing_conserves_words(
            lens in proptest::collection::vec(1usize..40, 1..12),
            max_words in 1usize..30,
        ) {
            let lines: Vec<String> = lens.iter().enumerate().map(|(i, &n)| words(n, &format!("l{i}_"))).collect();
            let doc = StructuredDocument { doc_id: 0, lines: lines.clone() };
            let segs = pack_sentences(&doc, max_words).unwrap();
            let packed: Vec<String> = segs.iter().flat_map(|s| s.words.clone()).collect();
            let expected: Vec<String> = lines
                .iter()
                .flat_map(|l| l.split_whitespace().take(max_words).map(str::to_string).collect::<Vec<_>>())
                .collect();
            prop_assert_eq!(packed, expected);
            prop_assert!(segs.iter().all(|s| !s.words.is_empty() && s.words.len() <= max_words));
            prop_assert!(segs[..segs.len() - 1].iter().all(|s| s.words.len() == max_words));
        }
    }
}
