//! Balanced labeled pairs and training / out-of-domain evaluation splits.
//!
//! A pair is positive when the two records share a normalized name. Splits
//! mirror the four (architecture x library) cells: TRAIN, OOD-ARCH,
//! OOD-LIBS, and OOD-ARCH&LIBS. Sub-filters slice the OOD splits by
//! same/different architecture or optimization and rebalance by
//! down-sampling the majority label.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusStore, FunctionRecord};
use crate::error::{Error, Result};
use crate::rng::substream;

/// Tags of one pair member, carried for sub-filtering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMeta {
    pub architecture: String,
    pub optimization: String,
    pub library: String,
}

impl PairMeta {
    fn of(record: &FunctionRecord) -> Self {
        PairMeta {
            architecture: record.architecture.clone(),
            optimization: record.optimization.clone(),
            library: record.library.clone(),
        }
    }
}

/// Two function references with a clone label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSample {
    pub left_id: String,
    pub right_id: String,
    pub label: u8,
    pub left_meta: PairMeta,
    pub right_meta: PairMeta,
}

/// A named set of labeled pairs plus the tag sets it draws from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub name: String,
    pub seed: u64,
    pub arch_set: Vec<String>,
    pub lib_set: Vec<String>,
    pub pairs: Vec<PairSample>,
}

pub const SPLIT_TRAIN: &str = "TRAIN";
pub const SPLIT_OOD_ARCH: &str = "OOD-ARCH";
pub const SPLIT_OOD_LIBS: &str = "OOD-LIBS";
pub const SPLIT_OOD_ARCH_LIBS: &str = "OOD-ARCH&LIBS";

/// Split-builder configuration: the Table-2-style tag sets and pair counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_archs: Vec<String>,
    pub train_libs: Vec<String>,
    pub ood_archs: Vec<String>,
    pub ood_libs: Vec<String>,
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub seed: u64,
    /// Allow TRAIN pairs whose members come from different architectures.
    pub mixed_arch_train_pairs: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubfilterCriterion {
    SameA,
    DiffA,
    SameO,
    DiffO,
}

impl SubfilterCriterion {
    pub fn label(&self) -> &'static str {
        match self {
            SubfilterCriterion::SameA => "sameA",
            SubfilterCriterion::DiffA => "diffA",
            SubfilterCriterion::SameO => "sameO",
            SubfilterCriterion::DiffO => "diffO",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sameA" => Ok(SubfilterCriterion::SameA),
            "diffA" => Ok(SubfilterCriterion::DiffA),
            "sameO" => Ok(SubfilterCriterion::SameO),
            "diffO" => Ok(SubfilterCriterion::DiffO),
            _ => Err(Error::Config(format!(
                "unknown sub-filter `{s}` (expected sameA, diffA, sameO, or diffO)"
            ))),
        }
    }

    fn keeps(&self, pair: &PairSample) -> bool {
        match self {
            SubfilterCriterion::SameA => pair.left_meta.architecture == pair.right_meta.architecture,
            SubfilterCriterion::DiffA => pair.left_meta.architecture != pair.right_meta.architecture,
            SubfilterCriterion::SameO => pair.left_meta.optimization == pair.right_meta.optimization,
            SubfilterCriterion::DiffO => pair.left_meta.optimization != pair.right_meta.optimization,
        }
    }
}

/// Options modifying pair generation.
#[derive(Debug, Clone, Copy, Default)]
pub struct PairGenOptions {
    /// Require both members of every pair to share an architecture.
    pub same_arch_only: bool,
}

struct Grouped<'a> {
    /// Records in group-major order.
    ordered: Vec<&'a FunctionRecord>,
    /// (start offset, len) per group, aligned with `ordered`.
    groups: Vec<(usize, usize)>,
}

fn group_records<'a, K: Ord, F: Fn(&FunctionRecord) -> K>(
    records: &[&'a FunctionRecord],
    key: F,
) -> Grouped<'a> {
    let mut by_key: BTreeMap<K, Vec<&FunctionRecord>> = BTreeMap::new();
    for r in records {
        by_key.entry(key(r)).or_default().push(r);
    }
    let mut ordered = Vec::with_capacity(records.len());
    let mut groups = Vec::with_capacity(by_key.len());
    for (_, members) in by_key {
        groups.push((ordered.len(), members.len()));
        ordered.extend(members);
    }
    Grouped { ordered, groups }
}

/// Decode the k-th unordered pair (i < j) of a group of size `m`.
fn decode_pair(m: usize, mut k: u64) -> (usize, usize) {
    for i in 0..m {
        let count = (m - 1 - i) as u64;
        if k < count {
            return (i, i + 1 + k as usize);
        }
        k -= count;
    }
    unreachable!("pair index out of range");
}

/// Generate exactly `n_pairs/2` positive and `n_pairs/2` negative pairs,
/// sampled uniformly (with replacement) from the candidate pair sets.
pub fn generate_pairs(
    records: &[&FunctionRecord],
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<PairSample>> {
    generate_pairs_opts(records, n_pairs, seed, PairGenOptions::default())
}

pub fn generate_pairs_opts(
    records: &[&FunctionRecord],
    n_pairs: usize,
    seed: u64,
    opts: PairGenOptions,
) -> Result<Vec<PairSample>> {
    if n_pairs % 2 != 0 {
        return Err(Error::Split(format!("pair count {n_pairs} is not even")));
    }
    let n = records.len();

    // Positive candidates: same normalized name (and same architecture when
    // restricted), distinct records.
    let grouped = if opts.same_arch_only {
        group_records(records, |r| (r.name_norm.clone(), r.architecture.clone()))
    } else {
        group_records(records, |r| r.name_norm.clone())
    };
    let pos_per_group: Vec<u64> = grouped
        .groups
        .iter()
        .map(|&(_, len)| (len as u64) * (len as u64 - 1) / 2)
        .collect();
    let total_pos: u64 = pos_per_group.iter().sum();
    if total_pos == 0 && n_pairs > 0 {
        return Err(Error::Split(
            "no clone group exists: every normalized name is unique in this cell".into(),
        ));
    }

    // Negative candidates: different normalized names. Count them exactly so
    // impossibility is reported up front.
    let name_groups = group_records(records, |r| r.name_norm.clone());
    let same_name_pairs: u64 = name_groups
        .groups
        .iter()
        .map(|&(_, len)| (len as u64) * (len as u64 - 1) / 2)
        .sum();
    let total_neg = (n as u64) * (n as u64 - 1) / 2 - same_name_pairs;
    if total_neg == 0 && n_pairs > 0 {
        return Err(Error::Split(
            "cannot balance labels: all records share one normalized name".into(),
        ));
    }

    let mut rng = substream(seed, "pairs");
    let mut out = Vec::with_capacity(n_pairs);

    for _ in 0..n_pairs / 2 {
        // Uniform positive: pick a candidate pair index, walk the groups.
        let mut idx = rng.gen_range(0..total_pos);
        let mut chosen = None;
        for (g, &(start, len)) in grouped.groups.iter().enumerate() {
            if idx < pos_per_group[g] {
                let (i, j) = decode_pair(len, idx);
                chosen = Some((grouped.ordered[start + i], grouped.ordered[start + j]));
                break;
            }
            idx -= pos_per_group[g];
        }
        let (a, b) = chosen.expect("index within total_pos");
        out.push(make_pair(a, b, 1));
    }

    for _ in 0..n_pairs / 2 {
        let (a, b) = sample_negative(&name_groups, n, total_neg, opts.same_arch_only, &mut rng)?;
        out.push(make_pair(a, b, 0));
    }
    Ok(out)
}

/// Uniform draw over unordered different-name pairs: pick the left record
/// with weight (n - |its name group|), then the right uniformly among
/// records outside that group. Ordered draws are equiprobable, so unordered
/// pairs are too.
fn sample_negative<'a>(
    name_groups: &Grouped<'a>,
    n: usize,
    total_neg: u64,
    same_arch_only: bool,
    rng: &mut impl Rng,
) -> Result<(&'a FunctionRecord, &'a FunctionRecord)> {
    let mut attempts = 0usize;
    loop {
        let mut u = rng.gen_range(0..2 * total_neg);
        let mut picked = None;
        for &(start, len) in &name_groups.groups {
            let group_weight = (len as u64) * ((n - len) as u64);
            if u < group_weight {
                let within = (u / (n - len) as u64) as usize;
                let other = (u % (n - len) as u64) as usize;
                let left = name_groups.ordered[start + within];
                // Map `other` onto records outside [start, start+len).
                let right_idx = if other < start { other } else { other + len };
                picked = Some((left, name_groups.ordered[right_idx]));
                break;
            }
            u -= group_weight;
        }
        let (a, b) = picked.expect("index within weight total");
        debug_assert_ne!(a.name_norm, b.name_norm);
        if !same_arch_only || a.architecture == b.architecture {
            return Ok((a, b));
        }
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Split(
                "could not find same-architecture negative pairs in this cell".into(),
            ));
        }
    }
}

fn make_pair(a: &FunctionRecord, b: &FunctionRecord, label: u8) -> PairSample {
    PairSample {
        left_id: a.id.clone(),
        right_id: b.id.clone(),
        label,
        left_meta: PairMeta::of(a),
        right_meta: PairMeta::of(b),
    }
}

fn cell<'a>(store: &'a CorpusStore, archs: &[String], libs: &[String]) -> Vec<&'a FunctionRecord> {
    store
        .records
        .iter()
        .filter(|r| archs.contains(&r.architecture) && libs.contains(&r.library))
        .collect()
}

/// Build the four split manifests from a corpus and a split configuration.
pub fn build_splits(store: &CorpusStore, cfg: &SplitConfig) -> Result<Vec<SplitManifest>> {
    for a in &cfg.ood_archs {
        if cfg.train_archs.contains(a) {
            return Err(Error::Config(format!(
                "architecture `{a}` appears in both the training and OOD sets"
            )));
        }
    }
    for l in &cfg.ood_libs {
        if cfg.train_libs.contains(l) {
            return Err(Error::Config(format!(
                "library `{l}` appears in both the training and OOD sets"
            )));
        }
    }

    let plan: [(&str, &Vec<String>, &Vec<String>, usize, bool); 4] = [
        (SPLIT_TRAIN, &cfg.train_archs, &cfg.train_libs, cfg.train_pairs, true),
        (SPLIT_OOD_ARCH, &cfg.ood_archs, &cfg.train_libs, cfg.eval_pairs, false),
        (SPLIT_OOD_LIBS, &cfg.train_archs, &cfg.ood_libs, cfg.eval_pairs, false),
        (SPLIT_OOD_ARCH_LIBS, &cfg.ood_archs, &cfg.ood_libs, cfg.eval_pairs, false),
    ];

    let mut manifests = Vec::with_capacity(4);
    for (name, archs, libs, n_pairs, is_train) in plan {
        let records = cell(store, archs, libs);
        if records.is_empty() {
            return Err(Error::Split(format!("no records available for split {name}")));
        }
        let opts = PairGenOptions {
            same_arch_only: is_train && !cfg.mixed_arch_train_pairs,
        };
        let split_seed = derived_seed(cfg.seed, name);
        let pairs = generate_pairs_opts(&records, n_pairs, split_seed, opts)
            .map_err(|e| Error::Split(format!("{name}: {e}")))?;
        manifests.push(SplitManifest {
            name: name.to_string(),
            seed: split_seed,
            arch_set: archs.clone(),
            lib_set: libs.clone(),
            pairs,
        });
    }
    Ok(manifests)
}

fn derived_seed(seed: u64, name: &str) -> u64 {
    substream(seed, name).gen()
}

/// Slice an OOD split by a same/different criterion, then rebalance labels
/// by down-sampling the majority under the split's seed.
pub fn subfilter(split: &SplitManifest, criterion: SubfilterCriterion) -> Result<SplitManifest> {
    if split.name != SPLIT_OOD_ARCH && split.name != SPLIT_OOD_LIBS {
        return Err(Error::Split(format!(
            "sub-filters apply to {SPLIT_OOD_ARCH} or {SPLIT_OOD_LIBS}, not {}",
            split.name
        )));
    }
    let kept: Vec<PairSample> = split
        .pairs
        .iter()
        .filter(|p| criterion.keeps(p))
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::Split(format!(
            "{}-{} is empty before rebalancing",
            split.name,
            criterion.label()
        )));
    }
    let pairs = rebalance(kept, split.seed, criterion.label())?;
    Ok(SplitManifest {
        name: format!("{}-{}", split.name, criterion.label()),
        seed: split.seed,
        arch_set: split.arch_set.clone(),
        lib_set: split.lib_set.clone(),
        pairs,
    })
}

/// Down-sample the majority label to the minority count, preserving the
/// original relative order of the survivors.
fn rebalance(pairs: Vec<PairSample>, seed: u64, stream: &str) -> Result<Vec<PairSample>> {
    let n_pos = pairs.iter().filter(|p| p.label == 1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Split(
            "cannot rebalance: one label class is empty after filtering".into(),
        ));
    }
    let (majority, keep_count) = if n_pos > n_neg { (1u8, n_neg) } else { (0u8, n_pos) };
    let majority_idx: Vec<usize> = pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| p.label == majority)
        .map(|(i, _)| i)
        .collect();
    let mut shuffled = majority_idx.clone();
    let mut rng = substream(seed, &format!("rebalance-{stream}"));
    use rand::seq::SliceRandom;
    shuffled.shuffle(&mut rng);
    let mut keep: Vec<usize> = shuffled.into_iter().take(keep_count).collect();
    keep.sort_unstable();
    let mut keep_iter = keep.into_iter().peekable();
    let out = pairs
        .into_iter()
        .enumerate()
        .filter(|(i, p)| {
            if p.label != majority {
                true
            } else if keep_iter.peek() == Some(i) {
                keep_iter.next();
                true
            } else {
                false
            }
        })
        .map(|(_, p)| p)
        .collect();
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ManifestPairEntry {
    left: String,
    right: String,
    label: u8,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    name: String,
    seed: u64,
    arch_set: Vec<String>,
    lib_set: Vec<String>,
    pairs: Vec<ManifestPairEntry>,
}

impl SplitManifest {
    /// Count of (positive, negative) labels.
    pub fn label_counts(&self) -> (usize, usize) {
        let pos = self.pairs.iter().filter(|p| p.label == 1).count();
        (pos, self.pairs.len() - pos)
    }

    pub fn is_balanced(&self) -> bool {
        let (pos, neg) = self.label_counts();
        pos.abs_diff(neg) <= 1
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ManifestFile {
            name: self.name.clone(),
            seed: self.seed,
            arch_set: self.arch_set.clone(),
            lib_set: self.lib_set.clone(),
            pairs: self
                .pairs
                .iter()
                .map(|p| ManifestPairEntry {
                    left: p.left_id.clone(),
                    right: p.right_id.clone(),
                    label: p.label,
                })
                .collect(),
        };
        let mut f = File::create(path)?;
        writeln!(f, "{}", serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    /// Load a manifest, rehydrating pair metadata from the corpus.
    pub fn load(path: &Path, store: &CorpusStore) -> Result<SplitManifest> {
        let file: ManifestFile = serde_json::from_reader(File::open(path)?)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        let mut pairs = Vec::with_capacity(file.pairs.len());
        for entry in file.pairs {
            let left = store.get(&entry.left).ok_or_else(|| {
                Error::Manifest(format!("pair references unknown record `{}`", entry.left))
            })?;
            let right = store.get(&entry.right).ok_or_else(|| {
                Error::Manifest(format!("pair references unknown record `{}`", entry.right))
            })?;
            pairs.push(PairSample {
                left_id: entry.left,
                right_id: entry.right,
                label: entry.label,
                left_meta: PairMeta::of(left),
                right_meta: PairMeta::of(right),
            });
        }
        Ok(SplitManifest {
            name: file.name,
            seed: file.seed,
            arch_set: file.arch_set,
            lib_set: file.lib_set,
            pairs,
        })
    }

    /// File name used for this split on disk.
    pub fn file_name(&self) -> String {
        format!(
            "{}.json",
            self.name
                .to_lowercase()
                .replace("&", "-")
                .replace(['/', ' '], "_")
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{file2ins, Block, FunctionRecord};

    fn record(name: &str, arch: &str, opt: &str, lib: &str, salt: u64) -> FunctionRecord {
        let blocks: Vec<Block> = (0..10)
            .map(|i| Block {
                address: 0x1000 + i * 16 + salt,
                call_order: i,
                instructions: vec![format!("op{i} r{}, r{}", salt % 8, i % 8)],
            })
            .collect();
        let instruction_sequence = file2ins(&blocks).unwrap();
        FunctionRecord {
            id: format!("{lib}/{arch}/{opt}/src#{name}@{salt}"),
            source_path: "src".into(),
            library: lib.into(),
            architecture: arch.into(),
            optimization: opt.into(),
            name_raw: name.into(),
            name_norm: name.into(),
            blocks,
            instruction_sequence,
        }
    }

    fn small_corpus() -> Vec<FunctionRecord> {
        vec![
            record("f", "x86", "O0", "libx", 0),
            record("f", "ARM", "O1", "libx", 1),
            record("g", "x86", "O2", "libx", 2),
            record("g", "ARM", "O0", "libx", 3),
        ]
    }

    #[test]
    fn generate_pairs_is_balanced_and_deterministic() {
        let recs = small_corpus();
        let refs: Vec<&FunctionRecord> = recs.iter().collect();
        let pairs = generate_pairs(&refs, 4, 11).unwrap();
        assert_eq!(pairs.len(), 4);
        assert_eq!(pairs.iter().filter(|p| p.label == 1).count(), 2);
        let again = generate_pairs(&refs, 4, 11).unwrap();
        assert_eq!(pairs, again);
    }

    #[test]
    fn generated_pairs_respect_label_semantics() {
        let recs = small_corpus();
        let refs: Vec<&FunctionRecord> = recs.iter().collect();
        let by_id: BTreeMap<&str, &FunctionRecord> =
            recs.iter().map(|r| (r.id.as_str(), r)).collect();
        for seed in 0..20u64 {
            for p in generate_pairs(&refs, 8, seed).unwrap() {
                assert_ne!(p.left_id, p.right_id);
                let l = by_id[p.left_id.as_str()];
                let r = by_id[p.right_id.as_str()];
                assert_eq!(p.label == 1, l.name_norm == r.name_norm);
            }
        }
    }

    #[test]
    fn generate_pairs_requires_a_clone_group() {
        let recs = vec![
            record("a", "x86", "O0", "libx", 0),
            record("b", "x86", "O0", "libx", 1),
        ];
        let refs: Vec<&FunctionRecord> = recs.iter().collect();
        assert!(matches!(generate_pairs(&refs, 2, 0), Err(Error::Split(_))));
    }

    #[test]
    fn generate_pairs_requires_a_second_name() {
        let recs = vec![
            record("a", "x86", "O0", "libx", 0),
            record("a", "ARM", "O1", "libx", 1),
        ];
        let refs: Vec<&FunctionRecord> = recs.iter().collect();
        assert!(matches!(generate_pairs(&refs, 2, 0), Err(Error::Split(_))));
    }

    #[test]
    fn generate_pairs_rejects_odd_counts() {
        let recs = small_corpus();
        let refs: Vec<&FunctionRecord> = recs.iter().collect();
        assert!(generate_pairs(&refs, 3, 0).is_err());
    }

    #[test]
    fn same_arch_option_constrains_both_labels() {
        let mut recs = small_corpus();
        recs.push(record("f", "x86", "O3", "libx", 4));
        recs.push(record("g", "x86", "O1", "libx", 5));
        let refs: Vec<&FunctionRecord> = recs.iter().collect();
        let pairs =
            generate_pairs_opts(&refs, 12, 3, PairGenOptions { same_arch_only: true }).unwrap();
        for p in pairs {
            assert_eq!(p.left_meta.architecture, p.right_meta.architecture);
        }
    }

    fn table2_store() -> CorpusStore {
        let mut store = CorpusStore::new();
        let mut salt = 0;
        for arch in ["ARM", "AMD64", "x86", "PowerPC", "MIPS"] {
            for lib in ["busybox", "OpenSSL", "sqlite3", "putty", "curl"] {
                for name in ["alpha", "beta", "gamma"] {
                    for opt in ["O0", "O2"] {
                        store.add(record(name, arch, opt, lib, salt)).unwrap();
                        salt += 1;
                    }
                }
            }
        }
        store
    }

    fn table2_cfg() -> SplitConfig {
        SplitConfig {
            train_archs: vec!["ARM".into(), "AMD64".into(), "x86".into()],
            train_libs: vec!["busybox".into(), "OpenSSL".into(), "sqlite3".into()],
            ood_archs: vec!["PowerPC".into(), "MIPS".into()],
            ood_libs: vec!["putty".into(), "curl".into()],
            train_pairs: 20,
            eval_pairs: 12,
            seed: 7,
            mixed_arch_train_pairs: true,
        }
    }

    #[test]
    fn build_splits_places_records_in_the_right_cells() {
        let store = table2_store();
        let splits = build_splits(&store, &table2_cfg()).unwrap();
        assert_eq!(splits.len(), 4);
        let by_name: BTreeMap<&str, &SplitManifest> =
            splits.iter().map(|s| (s.name.as_str(), s)).collect();

        for split in &splits {
            assert!(split.is_balanced());
            for p in &split.pairs {
                for meta in [&p.left_meta, &p.right_meta] {
                    assert!(split.arch_set.contains(&meta.architecture));
                    assert!(split.lib_set.contains(&meta.library));
                }
            }
        }
        // A PowerPC/putty record can only ever appear in OOD-ARCH&LIBS.
        for (name, split) in &by_name {
            for p in &split.pairs {
                let pp = |m: &PairMeta| m.architecture == "PowerPC" && m.library == "putty";
                if pp(&p.left_meta) || pp(&p.right_meta) {
                    assert_eq!(*name, SPLIT_OOD_ARCH_LIBS);
                }
                let ac = |m: &PairMeta| m.architecture == "ARM" && m.library == "curl";
                if ac(&p.left_meta) || ac(&p.right_meta) {
                    assert_eq!(*name, SPLIT_OOD_LIBS);
                }
            }
        }
    }

    #[test]
    fn build_splits_rejects_overlapping_sets() {
        let store = table2_store();
        let mut cfg = table2_cfg();
        cfg.ood_archs.push("ARM".into());
        assert!(matches!(build_splits(&store, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn build_splits_names_the_empty_split() {
        let store = table2_store();
        let mut cfg = table2_cfg();
        cfg.ood_libs = vec!["nonexistent".into()];
        let err = build_splits(&store, &cfg).unwrap_err();
        assert!(err.to_string().contains(SPLIT_OOD_LIBS), "got {err}");
    }

    #[test]
    fn subfilter_definitions_and_partition() {
        let store = table2_store();
        let splits = build_splits(&store, &table2_cfg()).unwrap();
        let ood_arch = splits.iter().find(|s| s.name == SPLIT_OOD_ARCH).unwrap();

        let same = subfilter(ood_arch, SubfilterCriterion::SameA).unwrap();
        let diff = subfilter(ood_arch, SubfilterCriterion::DiffA).unwrap();
        assert_eq!(same.name, "OOD-ARCH-sameA");
        for p in &same.pairs {
            assert_eq!(p.left_meta.architecture, p.right_meta.architecture);
        }
        for p in &diff.pairs {
            assert_ne!(p.left_meta.architecture, p.right_meta.architecture);
        }
        assert!(same.is_balanced());
        assert!(diff.is_balanced());

        // Before rebalancing the two criteria partition the parent.
        let kept_same = ood_arch
            .pairs
            .iter()
            .filter(|p| SubfilterCriterion::SameA.keeps(p))
            .count();
        let kept_diff = ood_arch
            .pairs
            .iter()
            .filter(|p| SubfilterCriterion::DiffA.keeps(p))
            .count();
        assert_eq!(kept_same + kept_diff, ood_arch.pairs.len());
    }

    #[test]
    fn subfilter_counts_match_hand_fixture() {
        // OOD-ARCH fixture with 3 sameA and 5 diffA pairs.
        let recs = small_corpus();
        let mk = |l: &FunctionRecord, r: &FunctionRecord, label: u8| make_pair(l, r, label);
        let (a, b, c, d) = (&recs[0], &recs[1], &recs[2], &recs[3]);
        let pairs = vec![
            mk(a, c, 0), // x86/x86 same
            mk(b, d, 0), // ARM/ARM same
            mk(a, b, 1), // diff
            mk(c, d, 1), // diff
            mk(a, d, 0), // diff
            mk(b, c, 0), // diff
            mk(b, a, 1), // diff
            mk(c, a, 1), // x86/x86 same
        ];
        let split = SplitManifest {
            name: SPLIT_OOD_ARCH.into(),
            seed: 5,
            arch_set: vec!["x86".into(), "ARM".into()],
            lib_set: vec!["libx".into()],
            pairs,
        };
        let kept = split
            .pairs
            .iter()
            .filter(|p| SubfilterCriterion::SameA.keeps(p))
            .count();
        assert_eq!(kept, 3);
        let diff_kept = split
            .pairs
            .iter()
            .filter(|p| SubfilterCriterion::DiffA.keeps(p))
            .count();
        assert_eq!(diff_kept, 5);
    }

    #[test]
    fn subfilter_rejects_wrong_parent() {
        let store = table2_store();
        let splits = build_splits(&store, &table2_cfg()).unwrap();
        let train = splits.iter().find(|s| s.name == SPLIT_TRAIN).unwrap();
        assert!(subfilter(train, SubfilterCriterion::SameA).is_err());
    }

    #[test]
    fn manifest_round_trip_via_corpus() {
        let store = table2_store();
        let splits = build_splits(&store, &table2_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for split in &splits {
            let path = dir.path().join(split.file_name());
            split.save(&path).unwrap();
            let loaded = SplitManifest::load(&path, &store).unwrap();
            assert_eq!(&loaded, split);
        }
    }

    #[test]
    fn build_splits_is_byte_deterministic() {
        let store = table2_store();
        let a = build_splits(&store, &table2_cfg()).unwrap();
        let b = build_splits(&store, &table2_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (x, y) in a.iter().zip(&b) {
            let px = dir.path().join("a.json");
            let py = dir.path().join("b.json");
            x.save(&px).unwrap();
            y.save(&py).unwrap();
            assert_eq!(std::fs::read(&px).unwrap(), std::fs::read(&py).unwrap());
        }
    }
}
