//! Synthetic corpus generator: desk-scale stand-in for multi-toolchain
//! builds of real libraries.
//!
//! Base functions are random instruction sequences over a fixed alphabet.
//! Each synthetic architecture applies bijective mnemonic/register renames
//! (immediates survive untouched); each optimization level splices junk
//! instructions and duplicates blocks, emulating inlining and
//! compiler-injected code. The same base function under every
//! (architecture, optimization) cell keeps its name, so ground-truth clones
//! exist across cells. All rewrite rules live in the spec file, making an
//! experiment self-describing.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, CorpusStore, IngestMeta};
use crate::error::{Error, Result};
use crate::rng::substream;

/// Mnemonics carrying function content.
const REAL_MNEMONICS: [&str; 16] = [
    "add", "sub", "mul", "div", "ld", "st", "mov", "cmp", "jmp", "call", "and", "orr", "xor",
    "shl", "shr", "ret",
];

/// Mnemonics used only for injected noise instructions.
const JUNK_MNEMONICS: [&str; 12] = [
    "chk", "guard", "spill", "fill", "probe", "pad", "fence", "sync", "canary", "align", "trap",
    "hint",
];

const REGISTERS: [&str; 16] = [
    "r0", "r1", "r2", "r3", "r4", "r5", "r6", "r7", "r8", "r9", "r10", "r11", "r12", "r13",
    "r14", "r15",
];

const COMMON_IMMEDIATES: [&str; 6] = ["#0", "#1", "#2", "#4", "#8", "#16"];

/// Distinct payload immediates shared by the whole corpus; each base
/// function samples its own characteristic subset.
const PAYLOAD_POOL: usize = 64;
const PAYLOAD_PER_FUNCTION: usize = 5;

/// Each function leans on its own few registers and mnemonics, the way real
/// code concentrates on a working set.
const REGISTER_PROFILE: usize = 5;
const MNEMONIC_PROFILE: usize = 7;

/// Rewrite rules of one synthetic architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchRule {
    pub name: String,
    pub mnemonic_map: BTreeMap<String, String>,
    pub register_map: BTreeMap<String, String>,
}

/// Noise rules of one synthetic optimization level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptRule {
    /// Must be one of the corpus optimization tags (O0..O3).
    pub name: String,
    /// Expected junk instructions inserted per original instruction.
    pub junk_rate: f64,
    /// Probability that a block is duplicated at the function tail.
    pub dup_rate: f64,
}

/// Full description of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_base_functions: usize,
    pub n_libraries: usize,
    pub seed: u64,
    pub architectures: Vec<ArchRule>,
    pub optimizations: Vec<OptRule>,
}

impl SyntheticSpec {
    pub fn n_architectures(&self) -> usize {
        self.architectures.len()
    }

    pub fn n_optimizations(&self) -> usize {
        self.optimizations.len()
    }

    /// Build a spec with random bijective rename maps per architecture and
    /// noise rates growing with the optimization level.
    pub fn generate(
        n_base_functions: usize,
        n_architectures: usize,
        n_optimizations: usize,
        n_libraries: usize,
        seed: u64,
    ) -> Result<SyntheticSpec> {
        if n_optimizations > corpus::OPT_LEVELS.len() {
            return Err(Error::Domain(format!(
                "at most {} optimization levels are supported",
                corpus::OPT_LEVELS.len()
            )));
        }
        let mut architectures = Vec::with_capacity(n_architectures);
        let all_mnemonics: Vec<&str> = REAL_MNEMONICS
            .iter()
            .chain(JUNK_MNEMONICS.iter())
            .cloned()
            .collect();
        for a in 0..n_architectures {
            let name = format!("synth{}", (b'A' + (a % 26) as u8) as char);
            let mut rng = substream(seed, &format!("synth-arch-{a}"));
            let mut mn_targets: Vec<usize> = (0..all_mnemonics.len()).collect();
            mn_targets.shuffle(&mut rng);
            // Instruction sets overlap in the wild; each architecture keeps
            // a share of mnemonics verbatim and renames the rest.
            let mnemonic_map = all_mnemonics
                .iter()
                .zip(&mn_targets)
                .map(|(&m, &t)| {
                    let target = if rng.gen_bool(0.5) {
                        m.to_string()
                    } else {
                        format!("{name}_op{t:02}")
                    };
                    (m.to_string(), target)
                })
                .collect();
            let mut reg_targets: Vec<usize> = (0..REGISTERS.len()).collect();
            reg_targets.shuffle(&mut rng);
            // Register files overlap across instruction sets as well.
            let register_map = REGISTERS
                .iter()
                .zip(&reg_targets)
                .map(|(&r, &t)| {
                    let target = if rng.gen_bool(0.3) {
                        r.to_string()
                    } else {
                        format!("{name}_g{t}")
                    };
                    (r.to_string(), target)
                })
                .collect();
            architectures.push(ArchRule {
                name,
                mnemonic_map,
                register_map,
            });
        }
        // Noise grows with the optimization level: higher levels inline
        // more and inject more bookkeeping code.
        let rates = [(0.0, 0.0), (0.3, 0.1), (0.6, 0.2), (0.9, 0.3)];
        let optimizations = (0..n_optimizations)
            .map(|o| OptRule {
                name: corpus::OPT_LEVELS[o].to_string(),
                junk_rate: rates[o].0,
                dup_rate: rates[o].1,
            })
            .collect();
        let spec = SyntheticSpec {
            n_base_functions,
            n_libraries,
            seed,
            architectures,
            optimizations,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Rewrite maps must be bijections: complete over the alphabets, with
    /// no two sources sharing a target.
    pub fn validate(&self) -> Result<()> {
        if self.n_base_functions == 0 || self.n_libraries == 0 {
            return Err(Error::Domain(
                "spec needs at least one base function and one library".into(),
            ));
        }
        if self.architectures.is_empty() || self.optimizations.is_empty() {
            return Err(Error::Domain(
                "spec needs at least one architecture and one optimization".into(),
            ));
        }
        for arch in &self.architectures {
            for (label, map, alphabet) in [
                ("mnemonic", &arch.mnemonic_map, {
                    let v: Vec<&str> = REAL_MNEMONICS
                        .iter()
                        .chain(JUNK_MNEMONICS.iter())
                        .cloned()
                        .collect();
                    v
                }),
                ("register", &arch.register_map, REGISTERS.to_vec()),
            ] {
                for sym in &alphabet {
                    if !map.contains_key(*sym) {
                        return Err(Error::Domain(format!(
                            "architecture `{}`: {label} map is missing `{sym}`",
                            arch.name
                        )));
                    }
                }
                let mut targets: Vec<&String> = map.values().collect();
                targets.sort();
                targets.dedup();
                if targets.len() != map.len() {
                    return Err(Error::Domain(format!(
                        "architecture `{}`: {label} map is not a bijection",
                        arch.name
                    )));
                }
            }
        }
        for opt in &self.optimizations {
            if !corpus::OPT_LEVELS.contains(&opt.name.as_str()) {
                return Err(Error::Domain(format!(
                    "optimization rule `{}` is not a corpus optimization tag",
                    opt.name
                )));
            }
            if opt.junk_rate < 0.0 || !(0.0..=1.0).contains(&opt.dup_rate) {
                return Err(Error::Domain(format!(
                    "optimization `{}`: junk_rate must be >= 0 and dup_rate in [0, 1]",
                    opt.name
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        writeln!(f, "{}", serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SyntheticSpec> {
        let spec: SyntheticSpec = serde_json::from_reader(File::open(path)?)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// One instruction as a token list (mnemonic first).
type Ins = Vec<String>;

/// A base function before any architecture/optimization rewriting.
#[derive(Debug, Clone)]
struct BaseFunction {
    name: String,
    library: String,
    blocks: Vec<Vec<Ins>>,
}

/// Export-schema block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthBlock {
    pub addr: u64,
    pub call_order: u64,
    pub ins: Vec<String>,
}

/// Export-schema function.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthFunction {
    pub path: String,
    pub name: String,
    pub blocks: Vec<SynthBlock>,
}

/// All functions of one (library, architecture, optimization) cell.
#[derive(Debug, Clone)]
pub struct SynthCell {
    pub library: String,
    pub architecture: String,
    pub optimization: String,
    pub functions: Vec<SynthFunction>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthFileEntry {
    pub path: String,
    pub library: String,
    pub architecture: String,
    pub optimization: String,
}

/// Listing written next to the per-cell export files so they can be
/// ingested with the right tags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthManifest {
    pub files: Vec<SynthFileEntry>,
}

fn payload_pool(seed: u64) -> Vec<String> {
    let mut rng = substream(seed, "synth-payload-pool");
    let mut pool = Vec::with_capacity(PAYLOAD_POOL);
    while pool.len() < PAYLOAD_POOL {
        let v: u32 = rng.gen_range(0x20..0xfff);
        let s = format!("#0x{v:04x}");
        if !pool.contains(&s) {
            pool.push(s);
        }
    }
    pool
}

/// A base function's working set: preferred registers, mnemonics, and its
/// characteristic payload immediates.
struct WorkingSet<'a> {
    registers: Vec<&'static str>,
    mnemonics: Vec<&'static str>,
    payload: Vec<&'a String>,
}

fn base_functions(spec: &SyntheticSpec) -> Vec<BaseFunction> {
    let pool = payload_pool(spec.seed);
    (0..spec.n_base_functions)
        .map(|i| {
            let mut rng = substream(spec.seed, &format!("synth-base-{i}"));
            let pick = |rng: &mut rand_chacha::ChaCha8Rng, from: &[&'static str], n: usize| {
                let mut xs: Vec<&'static str> = from.to_vec();
                xs.shuffle(rng);
                xs.truncate(n);
                xs
            };
            let ws = WorkingSet {
                registers: pick(&mut rng, &REGISTERS, REGISTER_PROFILE),
                mnemonics: pick(&mut rng, &REAL_MNEMONICS, MNEMONIC_PROFILE),
                payload: {
                    let mut idx: Vec<usize> = (0..pool.len()).collect();
                    idx.shuffle(&mut rng);
                    idx.into_iter().take(PAYLOAD_PER_FUNCTION).map(|j| &pool[j]).collect()
                },
            };
            let n_blocks = rng.gen_range(10..=12);
            let blocks = (0..n_blocks)
                .map(|_| {
                    let n_ins = rng.gen_range(3..=4);
                    (0..n_ins).map(|_| random_instruction(&mut rng, &ws)).collect()
                })
                .collect();
            BaseFunction {
                name: format!("fn{i:03}"),
                library: format!("synthlib{}", i % spec.n_libraries),
                blocks,
            }
        })
        .collect()
}

fn pick_register(rng: &mut impl Rng, ws: &WorkingSet) -> String {
    if rng.gen_bool(0.85) {
        ws.registers[rng.gen_range(0..ws.registers.len())].to_string()
    } else {
        REGISTERS[rng.gen_range(0..REGISTERS.len())].to_string()
    }
}

fn random_instruction(rng: &mut impl Rng, ws: &WorkingSet) -> Ins {
    let mnemonic = if rng.gen_bool(0.85) {
        ws.mnemonics[rng.gen_range(0..ws.mnemonics.len())]
    } else {
        REAL_MNEMONICS[rng.gen_range(0..REAL_MNEMONICS.len())]
    };
    let mut ins = vec![mnemonic.to_string()];
    ins.push(pick_register(rng, ws));
    // Second operand: payload immediate, register, or common immediate.
    match rng.gen_range(0..10) {
        0..=6 => ins.push(ws.payload[rng.gen_range(0..ws.payload.len())].clone()),
        7..=8 => ins.push(pick_register(rng, ws)),
        _ => ins.push(COMMON_IMMEDIATES[rng.gen_range(0..COMMON_IMMEDIATES.len())].to_string()),
    }
    // Occasional third operand.
    if rng.gen_bool(0.5) {
        if rng.gen_bool(0.6) {
            ins.push(ws.payload[rng.gen_range(0..ws.payload.len())].clone());
        } else {
            ins.push(pick_register(rng, ws));
        }
    }
    ins
}

fn junk_instruction(rng: &mut impl Rng) -> Ins {
    let mnemonic = JUNK_MNEMONICS[rng.gen_range(0..JUNK_MNEMONICS.len())].to_string();
    let mut ins = vec![mnemonic];
    ins.push(REGISTERS[rng.gen_range(0..REGISTERS.len())].to_string());
    if rng.gen_bool(0.5) {
        ins.push(REGISTERS[rng.gen_range(0..REGISTERS.len())].to_string());
    }
    ins
}

fn rename(ins: &Ins, arch: &ArchRule) -> String {
    let tokens: Vec<&str> = ins
        .iter()
        .map(|t| {
            arch.mnemonic_map
                .get(t)
                .or_else(|| arch.register_map.get(t))
                .map(|s| s.as_str())
                .unwrap_or(t.as_str())
        })
        .collect();
    tokens.join(" ")
}

/// Materialize every (library, architecture, optimization) cell of the
/// spec. Deterministic: the cell noise streams derive from the spec seed.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Vec<SynthCell>> {
    spec.validate()?;
    let bases = base_functions(spec);
    let mut cells = Vec::new();
    for arch in &spec.architectures {
        for opt in &spec.optimizations {
            let mut by_lib: BTreeMap<&str, Vec<SynthFunction>> = BTreeMap::new();
            for base in &bases {
                let mut rng = substream(
                    spec.seed,
                    &format!("synth-cell-{}-{}-{}-{}", base.library, arch.name, opt.name, base.name),
                );
                let func = materialize(base, arch, opt, &mut rng);
                by_lib.entry(base.library.as_str()).or_default().push(func);
            }
            for (lib, functions) in by_lib {
                cells.push(SynthCell {
                    library: lib.to_string(),
                    architecture: arch.name.clone(),
                    optimization: opt.name.clone(),
                    functions,
                });
            }
        }
    }
    Ok(cells)
}

fn materialize(
    base: &BaseFunction,
    arch: &ArchRule,
    opt: &OptRule,
    rng: &mut impl Rng,
) -> SynthFunction {
    // Half the junk budget lands inline after real instructions; the rest
    // accumulates into whole injected blocks (inlined helpers, guards)
    // spliced at random call positions, still in the base alphabet.
    let n_real: usize = base.blocks.iter().map(|b| b.len()).sum();
    let mut blocks: Vec<Vec<Ins>> = Vec::with_capacity(base.blocks.len());
    for block in &base.blocks {
        let mut out = Vec::with_capacity(block.len() * 2);
        for ins in block {
            out.push(ins.clone());
            let mut extra = opt.junk_rate * 0.5;
            while extra > 0.0 {
                let p = extra.min(1.0);
                if rng.gen_bool(p) {
                    out.push(junk_instruction(rng));
                }
                extra -= 1.0;
            }
        }
        blocks.push(out);
    }
    // Injected blocks (guards, spill bookkeeping) cluster at the function
    // entry, the way compiler prologues do.
    let mut block_budget = (opt.junk_rate * 0.5 * n_real as f64).round() as usize;
    let mut at = 0usize;
    while block_budget > 0 {
        let size = rng.gen_range(4..=7).min(block_budget.max(4));
        let junk_block: Vec<Ins> = (0..size).map(|_| junk_instruction(rng)).collect();
        blocks.insert(at.min(blocks.len()), junk_block);
        at += 1;
        block_budget = block_budget.saturating_sub(size);
    }
    // Whole-block duplication at a random call position (inlined copies
    // land wherever the call site sat, shifting everything after them).
    let n_original = blocks.len();
    for i in 0..n_original {
        if rng.gen_bool(opt.dup_rate) {
            let copy = blocks[i].clone();
            let at = rng.gen_range(0..=blocks.len());
            blocks.insert(at, copy);
        }
    }
    // Assign addresses/call order, then emit in shuffled order (ingestion
    // re-sorts by call order and address).
    let mut synth_blocks: Vec<SynthBlock> = blocks
        .iter()
        .enumerate()
        .map(|(j, block)| SynthBlock {
            addr: 0x1000 + 0x40 * j as u64,
            call_order: j as u64,
            ins: block.iter().map(|ins| rename(ins, arch)).collect(),
        })
        .collect();
    synth_blocks.shuffle(rng);
    SynthFunction {
        path: format!("synth/{}/{}/{}.s", base.library, arch.name, opt.name),
        name: base.name.clone(),
        blocks: synth_blocks,
    }
}

/// Write one export file per cell plus a manifest listing the tags.
pub fn write_export_dir(cells: &[SynthCell], dir: &Path) -> Result<SynthManifest> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(cells.len());
    for cell in cells {
        let file_name = format!(
            "{}__{}__{}.jsonl",
            cell.library, cell.architecture, cell.optimization
        );
        let mut f = File::create(dir.join(&file_name))?;
        for func in &cell.functions {
            writeln!(f, "{}", serde_json::to_string(func)?)?;
        }
        files.push(SynthFileEntry {
            path: file_name,
            library: cell.library.clone(),
            architecture: cell.architecture.clone(),
            optimization: cell.optimization.clone(),
        });
    }
    let manifest = SynthManifest { files };
    let mut f = File::create(dir.join("synth_manifest.json"))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Synthesize and ingest straight into a corpus store, round-tripping each
/// cell through the export schema exactly as the file route would.
pub fn synthesize_store(spec: &SyntheticSpec) -> Result<CorpusStore> {
    let cells = synthesize(spec)?;
    let mut store = CorpusStore::new();
    for cell in &cells {
        let meta = IngestMeta {
            library: cell.library.clone(),
            architecture: cell.architecture.clone(),
            optimization: cell.optimization.clone(),
        };
        let mut buf = Vec::new();
        for func in &cell.functions {
            writeln!(buf, "{}", serde_json::to_string(func)?)?;
        }
        let outcome = corpus::ingest_reader(
            std::io::BufReader::new(buf.as_slice()),
            &meta,
            &format!("synth:{}-{}-{}", cell.library, cell.architecture, cell.optimization),
        )?;
        store.add_all(outcome.records)?;
    }
    Ok(store)
}
