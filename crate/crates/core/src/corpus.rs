//! Disassembly corpus: export ingestion, block flattening, and persistence.
//!
//! Exports are JSON lines (optionally gzip-compressed), one object per
//! function: `{"path": str, "name": str, "blocks": [{"addr", "call_order",
//! "ins"}]}`. Ingestion flattens each function's blocks into a single
//! instruction string and drops functions below the block threshold.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Functions with fewer blocks than this are never stored.
pub const MIN_BLOCKS: usize = 10;

/// Optimization tags accepted by the corpus.
pub const OPT_LEVELS: [&str; 4] = ["O0", "O1", "O2", "O3"];

pub const CORPUS_FORMAT: &str = "pluvio-corpus";
pub const CORPUS_VERSION: u32 = 1;

/// One basic block of a disassembled function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    /// Byte offset of the block in the binary.
    pub address: u64,
    /// Position in the function's block call sequence.
    pub call_order: u64,
    /// Instruction strings, mnemonic and operands joined by single spaces.
    pub instructions: Vec<String>,
}

/// A disassembled function with provenance metadata and its flattened
/// instruction text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionRecord {
    pub id: String,
    pub source_path: String,
    pub library: String,
    pub architecture: String,
    pub optimization: String,
    pub name_raw: String,
    pub name_norm: String,
    pub blocks: Vec<Block>,
    pub instruction_sequence: String,
}

/// Provenance tags attached to every record of one ingested export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestMeta {
    pub library: String,
    pub architecture: String,
    pub optimization: String,
}

/// Records accepted from one export plus the count of functions skipped for
/// being below the block threshold.
#[derive(Debug, Clone)]
pub struct IngestOutcome {
    pub records: Vec<FunctionRecord>,
    pub skipped_small: usize,
}

#[derive(Debug, Deserialize)]
struct ExportBlock {
    addr: u64,
    call_order: u64,
    ins: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct ExportFunction {
    path: String,
    name: String,
    blocks: Vec<ExportBlock>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
    arch_vocab: Vec<String>,
    opt_vocab: Vec<String>,
    lib_vocab: Vec<String>,
}

/// In-memory corpus: records plus the tag vocabularies they reference.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusStore {
    pub records: Vec<FunctionRecord>,
    pub arch_vocab: Vec<String>,
    pub opt_vocab: Vec<String>,
    pub lib_vocab: Vec<String>,
    id_index: HashMap<String, usize>,
}

/// Flatten blocks into one instruction string: blocks ordered by
/// (call_order, address), instructions joined with single spaces.
pub fn file2ins(blocks: &[Block]) -> Result<String> {
    if blocks.is_empty() {
        return Err(Error::Domain("file2ins requires at least one block".into()));
    }
    let mut order: Vec<&Block> = blocks.iter().collect();
    order.sort_by_key(|b| (b.call_order, b.address));
    let mut out = String::new();
    for block in order {
        for ins in &block.instructions {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(ins);
        }
    }
    Ok(out)
}

/// Suffix patterns stripped by [`normalize_name`]; each entry is
/// (suffix label, expects trailing number).
pub const DEFAULT_NAME_RULES: [(&str, bool); 4] = [
    ("isra", true),
    ("part", true),
    ("constprop", true),
    ("cold", false),
];

/// Strip leading underscores and compiler-clone suffixes (`.isra.<n>`,
/// `.part.<n>`, `.constprop.<n>`, `.cold`) until a fixpoint. Idempotent.
pub fn normalize_name(raw: &str) -> String {
    normalize_name_with(raw, &DEFAULT_NAME_RULES)
}

/// [`normalize_name`] with a caller-supplied suffix rule list.
pub fn normalize_name_with(raw: &str, rules: &[(&str, bool)]) -> String {
    let mut name = raw.trim_start_matches('_').to_string();
    loop {
        let mut stripped = false;
        for (label, numbered) in rules {
            if *numbered {
                if let Some(head) = strip_numbered_suffix(&name, label) {
                    name = head;
                    stripped = true;
                }
            } else {
                let suffix = format!(".{label}");
                if let Some(head) = name.strip_suffix(&suffix) {
                    if !head.is_empty() {
                        name = head.to_string();
                        stripped = true;
                    }
                }
            }
        }
        if !stripped {
            break;
        }
    }
    name
}

/// If `name` ends with `.<label>.<digits>`, return the part before it.
fn strip_numbered_suffix(name: &str, label: &str) -> Option<String> {
    let marker = format!(".{label}.");
    let at = name.rfind(&marker)?;
    let tail = &name[at + marker.len()..];
    if !tail.is_empty() && tail.bytes().all(|b| b.is_ascii_digit()) && at > 0 {
        Some(name[..at].to_string())
    } else {
        None
    }
}

fn validate_meta(meta: &IngestMeta) -> Result<()> {
    if !OPT_LEVELS.contains(&meta.optimization.as_str()) {
        return Err(Error::Vocabulary(format!(
            "unknown optimization tag `{}` (expected one of {:?})",
            meta.optimization, OPT_LEVELS
        )));
    }
    if meta.architecture.trim().is_empty() {
        return Err(Error::Vocabulary("architecture tag is empty".into()));
    }
    if meta.library.trim().is_empty() {
        return Err(Error::Vocabulary("library tag is empty".into()));
    }
    Ok(())
}

fn open_maybe_gzip(path: &Path) -> Result<Box<dyn BufRead>> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic)?;
    let file = File::open(path)?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(flate2::read::GzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

/// Parse an export file into `FunctionRecord`s carrying `meta`, skipping
/// (and counting) functions with fewer than [`MIN_BLOCKS`] blocks.
pub fn ingest_export(path: &Path, meta: &IngestMeta) -> Result<IngestOutcome> {
    let reader = open_maybe_gzip(path)?;
    ingest_reader(reader, meta, &path.display().to_string())
}

/// [`ingest_export`] over any line source (uncompressed).
pub fn ingest_reader(
    reader: impl BufRead,
    meta: &IngestMeta,
    source_name: &str,
) -> Result<IngestOutcome> {
    validate_meta(meta)?;
    let mut records = Vec::new();
    let mut skipped_small = 0usize;
    let mut seen: HashMap<(String, String), usize> = HashMap::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let func: ExportFunction = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("{}:{}", source_name, lineno + 1), e.to_string()))?;
        let record = build_record(func, meta, &mut seen)?;
        match record {
            Some(r) => records.push(r),
            None => skipped_small += 1,
        }
    }
    Ok(IngestOutcome {
        records,
        skipped_small,
    })
}

fn build_record(
    func: ExportFunction,
    meta: &IngestMeta,
    seen: &mut HashMap<(String, String), usize>,
) -> Result<Option<FunctionRecord>> {
    let ctx = format!("function `{}` ({})", func.name, func.path);
    if func.name.is_empty() {
        return Err(Error::parse(&ctx, "empty function name"));
    }
    let mut blocks = Vec::with_capacity(func.blocks.len());
    let mut orders = HashSet::new();
    for (i, b) in func.blocks.into_iter().enumerate() {
        if b.ins.is_empty() {
            return Err(Error::parse(&ctx, format!("block {i} has no instructions")));
        }
        if !orders.insert(b.call_order) {
            return Err(Error::parse(
                &ctx,
                format!("duplicate call_order {}", b.call_order),
            ));
        }
        let mut instructions = Vec::with_capacity(b.ins.len());
        for ins in b.ins {
            let canon = ins.split_whitespace().collect::<Vec<_>>().join(" ");
            if canon.is_empty() {
                return Err(Error::parse(&ctx, format!("block {i} has a blank instruction")));
            }
            instructions.push(canon);
        }
        blocks.push(Block {
            address: b.addr,
            call_order: b.call_order,
            instructions,
        });
    }
    if blocks.len() < MIN_BLOCKS {
        return Ok(None);
    }
    let occurrence = seen
        .entry((func.path.clone(), func.name.clone()))
        .and_modify(|n| *n += 1)
        .or_insert(0);
    let mut id = format!(
        "{}/{}/{}/{}#{}",
        meta.library, meta.architecture, meta.optimization, func.path, func.name
    );
    if *occurrence > 0 {
        id.push_str(&format!("@{occurrence}"));
    }
    let instruction_sequence = file2ins(&blocks)?;
    Ok(Some(FunctionRecord {
        id,
        source_path: func.path,
        library: meta.library.clone(),
        architecture: meta.architecture.clone(),
        optimization: meta.optimization.clone(),
        name_raw: func.name.clone(),
        name_norm: normalize_name(&func.name),
        blocks,
        instruction_sequence,
    }))
}

impl CorpusStore {
    pub fn new() -> Self {
        CorpusStore {
            records: Vec::new(),
            arch_vocab: Vec::new(),
            opt_vocab: OPT_LEVELS.iter().map(|s| s.to_string()).collect(),
            lib_vocab: Vec::new(),
            id_index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&FunctionRecord> {
        self.id_index.get(id).map(|&i| &self.records[i])
    }

    /// Add one record, growing the architecture/library vocabularies as
    /// needed. Rejects duplicate ids, sub-threshold records, unknown
    /// optimization tags, and flattened text that disagrees with the blocks.
    pub fn add(&mut self, record: FunctionRecord) -> Result<()> {
        if self.id_index.contains_key(&record.id) {
            return Err(Error::Domain(format!("duplicate record id `{}`", record.id)));
        }
        if record.blocks.len() < MIN_BLOCKS {
            return Err(Error::Domain(format!(
                "record `{}` has {} blocks, below the minimum of {}",
                record.id,
                record.blocks.len(),
                MIN_BLOCKS
            )));
        }
        if !self.opt_vocab.contains(&record.optimization) {
            return Err(Error::Vocabulary(format!(
                "optimization `{}` not in corpus vocabulary",
                record.optimization
            )));
        }
        if record.instruction_sequence != file2ins(&record.blocks)? {
            return Err(Error::Domain(format!(
                "record `{}`: instruction_sequence is not the flattening of its blocks",
                record.id
            )));
        }
        if !self.arch_vocab.contains(&record.architecture) {
            self.arch_vocab.push(record.architecture.clone());
        }
        if !self.lib_vocab.contains(&record.library) {
            self.lib_vocab.push(record.library.clone());
        }
        self.id_index.insert(record.id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn add_all(&mut self, records: Vec<FunctionRecord>) -> Result<()> {
        for r in records {
            self.add(r)?;
        }
        Ok(())
    }

    /// Write the corpus as JSON lines behind a format/version header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = File::create(path)?;
        let header = CorpusHeader {
            format: CORPUS_FORMAT.to_string(),
            version: CORPUS_VERSION,
            arch_vocab: self.arch_vocab.clone(),
            opt_vocab: self.opt_vocab.clone(),
            lib_vocab: self.lib_vocab.clone(),
        };
        writeln!(file, "{}", serde_json::to_string(&header)?)?;
        for record in &self.records {
            writeln!(file, "{}", serde_json::to_string(record)?)?;
        }
        Ok(())
    }

    /// Load a corpus, refusing any unknown format or version outright.
    pub fn load(path: &Path) -> Result<CorpusStore> {
        let reader = open_maybe_gzip(path)?;
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::parse(path.display().to_string(), "empty corpus file"))??;
        let header: CorpusHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::parse(format!("{}:1", path.display()), e.to_string()))?;
        if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
            return Err(Error::Incompatible {
                what: "corpus file".into(),
                expected: format!("{CORPUS_FORMAT} v{CORPUS_VERSION}"),
                found: format!("{} v{}", header.format, header.version),
            });
        }
        let mut store = CorpusStore {
            records: Vec::new(),
            arch_vocab: header.arch_vocab,
            opt_vocab: header.opt_vocab,
            lib_vocab: header.lib_vocab,
            id_index: HashMap::new(),
        };
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: FunctionRecord = serde_json::from_str(&line)
                .map_err(|e| Error::parse(format!("{}:{}", path.display(), lineno + 2), e.to_string()))?;
            if !store.arch_vocab.contains(&record.architecture)
                || !store.opt_vocab.contains(&record.optimization)
                || !store.lib_vocab.contains(&record.library)
            {
                return Err(Error::Vocabulary(format!(
                    "record `{}` references tags missing from the corpus header",
                    record.id
                )));
            }
            if store.id_index.contains_key(&record.id) {
                return Err(Error::Domain(format!("duplicate record id `{}`", record.id)));
            }
            store.id_index.insert(record.id.clone(), store.records.len());
            store.records.push(record);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn block(call_order: u64, address: u64, ins: &[&str]) -> Block {
        Block {
            address,
            call_order,
            instructions: ins.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn file2ins_single_block_identity() {
        let blocks = vec![block(0, 0x10, &["mov r0, r1"])];
        assert_eq!(file2ins(&blocks).unwrap(), "mov r0, r1");
    }

    #[test]
    fn file2ins_orders_by_call_order_first() {
        let blocks = vec![block(1, 0x10, &["b"]), block(0, 0x20, &["a"])];
        assert_eq!(file2ins(&blocks).unwrap(), "a b");
    }

    #[test]
    fn file2ins_breaks_call_order_ties_by_address() {
        let blocks = vec![block(0, 0x20, &["late"]), block(0, 0x10, &["early"])];
        assert_eq!(file2ins(&blocks).unwrap(), "early late");
    }

    #[test]
    fn file2ins_rejects_empty_input() {
        assert!(matches!(file2ins(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn normalize_name_cases() {
        assert_eq!(normalize_name("memcpy"), "memcpy");
        assert_eq!(normalize_name("_foo.isra.3"), "foo");
        assert_eq!(normalize_name("bar.part.0.cold"), "bar");
        assert_eq!(normalize_name("__baz.constprop.12"), "baz");
        // Not a clone suffix: no digits after .part.
        assert_eq!(normalize_name("qux.part.x"), "qux.part.x");
    }

    #[test]
    fn normalize_name_is_idempotent_on_samples() {
        for raw in ["_a.isra.1", "b.cold.part.2", "___c", "d.isra.0.isra.1", "plain"] {
            let once = normalize_name(raw);
            assert_eq!(normalize_name(&once), once, "not idempotent for {raw}");
        }
    }

    fn write_export(dir: &Path, name: &str, funcs: &[(&str, usize)]) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = File::create(&path).unwrap();
        for (fname, nblocks) in funcs {
            let blocks: Vec<serde_json::Value> = (0..*nblocks)
                .map(|i| {
                    serde_json::json!({
                        "addr": 0x1000 + 0x10 * i,
                        "call_order": i,
                        "ins": [format!("op{} r0, r1", i)]
                    })
                })
                .collect();
            let obj = serde_json::json!({"path": "lib/a.c", "name": fname, "blocks": blocks});
            writeln!(f, "{}", serde_json::to_string(&obj).unwrap()).unwrap();
        }
        path
    }

    fn meta() -> IngestMeta {
        IngestMeta {
            library: "libx".into(),
            architecture: "ARM".into(),
            optimization: "O1".into(),
        }
    }

    #[test]
    fn ingest_keeps_functions_at_or_above_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_export(dir.path(), "ok.jsonl", &[("f", 12)]);
        let out = ingest_export(&path, &meta()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].blocks.len(), 12);
        assert_eq!(out.skipped_small, 0);
    }

    #[test]
    fn ingest_skips_and_counts_small_functions() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_export(dir.path(), "small.jsonl", &[("tiny", 9)]);
        let out = ingest_export(&path, &meta()).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.skipped_small, 1);

        // Fixture block counts: 10 survives, 3 does not.
        let path = write_export(dir.path(), "mixed.jsonl", &[("keep", 10), ("drop", 3)]);
        let out = ingest_export(&path, &meta()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].name_raw, "keep");
        assert_eq!(out.skipped_small, 1);
    }

    #[test]
    fn ingest_rejects_unknown_optimization() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_export(dir.path(), "f.jsonl", &[("f", 10)]);
        let bad = IngestMeta {
            optimization: "Oz".into(),
            ..meta()
        };
        assert!(matches!(ingest_export(&path, &bad), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn ingest_names_offending_function_on_bad_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let blocks: Vec<serde_json::Value> = (0..10)
            .map(|i| serde_json::json!({"addr": i, "call_order": i, "ins": []}))
            .collect();
        let obj = serde_json::json!({"path": "p", "name": "broken_fn", "blocks": blocks});
        std::fs::write(&path, serde_json::to_string(&obj).unwrap()).unwrap();
        let err = ingest_export(&path, &meta()).unwrap_err();
        assert!(err.to_string().contains("broken_fn"), "got: {err}");
    }

    #[test]
    fn ingest_reads_gzip_exports() {
        let dir = tempfile::tempdir().unwrap();
        let plain = write_export(dir.path(), "x.jsonl", &[("f", 11)]);
        let gz_path = dir.path().join("x.jsonl.gz");
        let mut enc = flate2::write::GzEncoder::new(
            File::create(&gz_path).unwrap(),
            flate2::Compression::default(),
        );
        enc.write_all(&std::fs::read(&plain).unwrap()).unwrap();
        enc.finish().unwrap();
        let out = ingest_export(&gz_path, &meta()).unwrap();
        assert_eq!(out.records.len(), 1);
    }

    #[test]
    fn corpus_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_export(dir.path(), "rt.jsonl", &[("f", 10), ("g", 11), ("h", 12)]);
        let out = ingest_export(&path, &meta()).unwrap();
        let mut store = CorpusStore::new();
        store.add_all(out.records).unwrap();

        let corpus_path = dir.path().join("corpus.jsonl");
        store.save(&corpus_path).unwrap();
        let loaded = CorpusStore::load(&corpus_path).unwrap();
        assert_eq!(store, loaded);

        // Empty store round-trips too.
        let empty = CorpusStore::new();
        let empty_path = dir.path().join("empty.jsonl");
        empty.save(&empty_path).unwrap();
        assert_eq!(CorpusStore::load(&empty_path).unwrap(), empty);
    }

    #[test]
    fn corpus_load_rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("future.jsonl");
        std::fs::write(
            &path,
            "{\"format\":\"pluvio-corpus\",\"version\":99,\"arch_vocab\":[],\"opt_vocab\":[],\"lib_vocab\":[]}\n",
        )
        .unwrap();
        assert!(matches!(
            CorpusStore::load(&path),
            Err(Error::Incompatible { .. })
        ));
    }

    #[test]
    fn store_rejects_duplicate_ids_and_small_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_export(dir.path(), "d.jsonl", &[("f", 10)]);
        let out = ingest_export(&path, &meta()).unwrap();
        let rec = out.records[0].clone();
        let mut store = CorpusStore::new();
        store.add(rec.clone()).unwrap();
        assert!(store.add(rec.clone()).is_err());

        let mut small = rec;
        small.id = "other".into();
        small.blocks.truncate(5);
        small.instruction_sequence = file2ins(&small.blocks).unwrap();
        assert!(store.add(small).is_err());
    }
}
