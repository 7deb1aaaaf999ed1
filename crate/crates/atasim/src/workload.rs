//! Trace file format, ingestion, synthetic trace generation with tunable
//! inter-core locality, and locality analysis.
//!
//! Trace format: one record per line, whitespace-separated
//! `cycle core kind address inst` where kind is `L` or `S` and the address
//! is hex (`0x...`) or decimal. `#` starts a comment. Files ending in `.gz`
//! are read through gzip. Records of one core must be non-decreasing in
//! cycle.

use crate::core::AccessKind;
use flate2::read::GzDecoder;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

/// One trace line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub cycle: u64,
    pub core_id: u32,
    pub kind: AccessKind,
    pub address: u64,
    pub instruction_id: u64,
}

/// Parse failure with the offending line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for TraceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "trace line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for TraceError {}

fn parse_u64(field: &str, what: &str, line: usize) -> Result<u64, TraceError> {
    let parsed = if let Some(hex) = field.strip_prefix("0x").or_else(|| field.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16)
    } else {
        field.parse::<u64>()
    };
    parsed.map_err(|_| TraceError {
        line,
        message: format!("bad {what} `{field}`"),
    })
}

/// Parses a whole trace, validating per-core cycle monotonicity.
pub fn parse_trace<R: Read>(input: R) -> Result<Vec<TraceRecord>, TraceError> {
    let reader = BufReader::new(input);
    let mut records = Vec::new();
    let mut last_cycle: BTreeMap<u32, u64> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| TraceError {
            line: lineno,
            message: e.to_string(),
        })?;
        let text = match line.split('#').next() {
            Some(t) => t.trim(),
            None => "",
        };
        if text.is_empty() {
            continue;
        }
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(TraceError {
                line: lineno,
                message: format!("expected 5 fields `cycle core kind address inst`, got {}", fields.len()),
            });
        }
        let cycle = parse_u64(fields[0], "cycle", lineno)?;
        let core_id = parse_u64(fields[1], "core", lineno)? as u32;
        let kind = match fields[2] {
            "L" => AccessKind::Load,
            "S" => AccessKind::Store,
            other => {
                return Err(TraceError {
                    line: lineno,
                    message: format!("unknown kind {other}"),
                })
            }
        };
        let address = parse_u64(fields[3], "address", lineno)?;
        let instruction_id = parse_u64(fields[4], "inst", lineno)?;
        if let Some(&prev) = last_cycle.get(&core_id) {
            if cycle < prev {
                return Err(TraceError {
                    line: lineno,
                    message: format!(
                        "core {core_id} cycle {cycle} goes backwards (previous {prev})"
                    ),
                });
            }
        }
        last_cycle.insert(core_id, cycle);
        records.push(TraceRecord {
            cycle,
            core_id,
            kind,
            address,
            instruction_id,
        });
    }
    Ok(records)
}

/// Opens a trace file, transparently gunzipping `.gz` paths.
pub fn load_trace(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    let file = std::fs::File::open(path).map_err(|e| TraceError {
        line: 0,
        message: format!("{}: {}", path.display(), e),
    })?;
    if path.extension().is_some_and(|e| e == "gz") {
        parse_trace(GzDecoder::new(file))
    } else {
        parse_trace(file)
    }
}

/// Renders records back into the text format.
pub fn format_trace(records: &[TraceRecord]) -> String {
    let mut out = String::from("# cycle core kind address inst\n");
    for r in records {
        let kind = match r.kind {
            AccessKind::Load => 'L',
            AccessKind::Store => 'S',
        };
        out.push_str(&format!(
            "{} {} {} {:#x} {}\n",
            r.cycle, r.core_id, kind, r.address, r.instruction_id
        ));
    }
    out
}

/// Writes a trace file, gzipping when the path ends in `.gz`.
pub fn save_trace(path: &Path, records: &[TraceRecord]) -> std::io::Result<()> {
    use std::io::Write;
    let text = format_trace(records);
    if path.extension().is_some_and(|e| e == "gz") {
        let file = std::fs::File::create(path)?;
        let mut enc = flate2::write::GzEncoder::new(file, flate2::Compression::default());
        enc.write_all(text.as_bytes())?;
        enc.finish()?;
    } else {
        std::fs::write(path, text)?;
    }
    Ok(())
}

/// FNV-1a digest over the canonical record tuples; identifies a trace in
/// reports so cross-architecture comparisons can refuse mismatched inputs.
pub fn trace_digest(records: &[TraceRecord]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |v: u64| {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for r in records {
        eat(r.cycle);
        eat(r.core_id as u64);
        eat(match r.kind {
            AccessKind::Load => 0,
            AccessKind::Store => 1,
        });
        eat(r.address);
        eat(r.instruction_id);
    }
    h
}

/// Parameters of the synthetic generator.
///
/// Each emitted instruction walks the four sectors of one line (one record
/// per sector, one instruction id for the group). The line is drawn from the
/// shared region with probability `shared_prob` (Zipf-weighted, exponent
/// `zipf_s`), otherwise from the core's private region via a strided walk.
#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    pub cores: u32,
    pub lines_private: u64,
    pub lines_shared: u64,
    pub shared_prob: f64,
    pub requests_per_core: u64,
    pub zipf_s: f64,
    pub stride: u64,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> GenParams {
        GenParams {
            cores: 30,
            lines_private: 1024,
            lines_shared: 256,
            shared_prob: 0.5,
            requests_per_core: 4000,
            zipf_s: 0.8,
            stride: 1,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenError(pub String);

impl fmt::Display for GenError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "trace generator: {}", self.0)
    }
}

impl std::error::Error for GenError {}

const GEN_LINE_BYTES: u64 = 128;
const SECTORS_PER_LINE: u64 = 4;
const SECTOR_BYTES: u64 = 32;

/// Deterministic synthetic trace. Shared lines start at line 0; core c's
/// private region starts at `lines_shared + c * lines_private`.
pub fn generate(params: &GenParams) -> Result<Vec<TraceRecord>, GenError> {
    if params.cores == 0 {
        return Err(GenError("cores must be nonzero".to_string()));
    }
    if !(0.0..=1.0).contains(&params.shared_prob) {
        return Err(GenError(format!(
            "shared_prob {} outside [0,1]",
            params.shared_prob
        )));
    }
    if params.shared_prob > 0.0 && params.lines_shared == 0 {
        return Err(GenError(
            "lines_shared is 0 but shared_prob is nonzero".to_string(),
        ));
    }
    if params.shared_prob < 1.0 && params.lines_private == 0 {
        return Err(GenError(
            "lines_private is 0 but shared_prob is below 1".to_string(),
        ));
    }
    if params.zipf_s < 0.0 {
        return Err(GenError(format!("zipf_s {} negative", params.zipf_s)));
    }

    let zipf = if params.lines_shared > 0 && params.zipf_s > 0.0 {
        Some(
            rand_distr::Zipf::new(params.lines_shared as f64, params.zipf_s)
                .map_err(|e| GenError(format!("zipf: {e}")))?,
        )
    } else {
        None
    };

    let mut records = Vec::with_capacity((params.cores as u64 * params.requests_per_core) as usize);
    let mut next_instruction = 0u64;
    for core in 0..params.cores {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(core as u64));
        let private_base = params.lines_shared + core as u64 * params.lines_private;
        let mut walk = 0u64;
        let mut emitted = 0u64;
        let mut cycle = 0u64;
        while emitted < params.requests_per_core {
            let shared = params.shared_prob > 0.0 && rng.random::<f64>() < params.shared_prob;
            let line = if shared {
                match &zipf {
                    Some(z) => {
                        let v = z.sample(&mut rng) as u64; // 1..=lines_shared
                        v - 1
                    }
                    None => rng.random_range(0..params.lines_shared),
                }
            } else {
                let l = private_base + walk;
                walk = (walk + params.stride) % params.lines_private;
                l
            };
            let instruction_id = next_instruction;
            next_instruction += 1;
            for sector in 0..SECTORS_PER_LINE {
                if emitted == params.requests_per_core {
                    break;
                }
                records.push(TraceRecord {
                    cycle,
                    core_id: core,
                    kind: AccessKind::Load,
                    address: line * GEN_LINE_BYTES + sector * SECTOR_BYTES,
                    instruction_id,
                });
                emitted += 1;
                cycle += 1;
            }
        }
    }
    records.sort_by_key(|r| (r.cycle, r.core_id, r.instruction_id, r.address));
    Ok(records)
}

/// Inter-core locality profile of a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalityProfile {
    /// Fraction of distinct lines accessed by two or more cores.
    pub replication_ratio: f64,
    /// cores-touching-count -> number of lines.
    pub sharing_histogram: BTreeMap<u32, u64>,
    /// core -> distinct lines touched.
    pub per_core_footprint: BTreeMap<u32, u64>,
    pub distinct_lines: u64,
}

/// Exact counts by brute-force set union per line; permutation-invariant
/// over records.
pub fn analyze_locality(records: &[TraceRecord], line_bytes: u64) -> LocalityProfile {
    let mut line_cores: BTreeMap<u64, BTreeSet<u32>> = BTreeMap::new();
    for r in records {
        line_cores
            .entry(r.address / line_bytes)
            .or_default()
            .insert(r.core_id);
    }
    let distinct_lines = line_cores.len() as u64;
    let mut sharing_histogram: BTreeMap<u32, u64> = BTreeMap::new();
    let mut per_core_footprint: BTreeMap<u32, u64> = BTreeMap::new();
    let mut replicated = 0u64;
    for cores in line_cores.values() {
        *sharing_histogram.entry(cores.len() as u32).or_insert(0) += 1;
        if cores.len() >= 2 {
            replicated += 1;
        }
        for &c in cores {
            *per_core_footprint.entry(c).or_insert(0) += 1;
        }
    }
    LocalityProfile {
        replication_ratio: if distinct_lines == 0 {
            0.0
        } else {
            replicated as f64 / distinct_lines as f64
        },
        sharing_histogram,
        per_core_footprint,
        distinct_lines,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_documented_examples() {
        let input = "0 0 L 0x1080 1\n5 2 S 0x20 7\n";
        let recs = parse_trace(input.as_bytes()).unwrap();
        assert_eq!(
            recs[0],
            TraceRecord {
                cycle: 0,
                core_id: 0,
                kind: AccessKind::Load,
                address: 0x1080,
                instruction_id: 1
            }
        );
        assert_eq!(recs[1].kind, AccessKind::Store);
        assert_eq!(recs[1].address, 0x20);
    }

    #[test]
    fn unknown_kind_is_an_error_with_line_number() {
        let err = parse_trace("0 0 X 0x0 1\n".as_bytes()).unwrap_err();
        assert_eq!(err.line, 1);
        assert!(err.message.contains("unknown kind X"));
    }

    #[test]
    fn bad_field_reports_line_and_field() {
        let err = parse_trace("0 0 L zzz 1\n".as_bytes()).unwrap_err();
        assert!(err.message.contains("address"));
        let err = parse_trace("0 0 L 0x0\n".as_bytes()).unwrap_err();
        assert!(err.message.contains("5 fields"));
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let input = "# header\n\n0 0 L 0x0 1 # trailing\n";
        assert_eq!(parse_trace(input.as_bytes()).unwrap().len(), 1);
    }

    #[test]
    fn per_core_cycles_must_not_decrease() {
        let input = "5 0 L 0x0 1\n3 0 L 0x80 2\n";
        let err = parse_trace(input.as_bytes()).unwrap_err();
        assert_eq!(err.line, 2);
        assert!(err.message.contains("backwards"));
        // different cores are independent
        let ok = "5 0 L 0x0 1\n3 1 L 0x80 2\n";
        assert!(parse_trace(ok.as_bytes()).is_ok());
    }

    #[test]
    fn format_parse_round_trip() {
        let params = GenParams {
            cores: 3,
            requests_per_core: 40,
            ..GenParams::default()
        };
        let recs = generate(&params).unwrap();
        let back = parse_trace(format_trace(&recs).as_bytes()).unwrap();
        assert_eq!(recs, back);
    }

    #[test]
    fn gzip_round_trip() {
        let dir = std::env::temp_dir().join(format!("atasim-gz-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.trace.gz");
        let recs = generate(&GenParams {
            cores: 2,
            requests_per_core: 20,
            ..GenParams::default()
        })
        .unwrap();
        save_trace(&path, &recs).unwrap();
        let back = load_trace(&path).unwrap();
        assert_eq!(recs, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn generator_is_deterministic_per_seed() {
        let params = GenParams {
            cores: 4,
            requests_per_core: 200,
            seed: 99,
            ..GenParams::default()
        };
        assert_eq!(generate(&params).unwrap(), generate(&params).unwrap());
        let other = GenParams {
            seed: 100,
            ..params.clone()
        };
        assert_ne!(generate(&params).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn zero_sharing_means_zero_replication() {
        let params = GenParams {
            cores: 4,
            shared_prob: 0.0,
            requests_per_core: 400,
            ..GenParams::default()
        };
        let recs = generate(&params).unwrap();
        let profile = analyze_locality(&recs, GEN_LINE_BYTES);
        assert_eq!(profile.replication_ratio, 0.0);
    }

    #[test]
    fn full_sharing_replicates_every_multiply_touched_line() {
        let params = GenParams {
            cores: 10,
            shared_prob: 1.0,
            lines_shared: 64,
            requests_per_core: 1000,
            ..GenParams::default()
        };
        let recs = generate(&params).unwrap();
        let profile = analyze_locality(&recs, GEN_LINE_BYTES);
        // with 10 cores x 250 instructions over 64 Zipf-weighted lines every
        // touched line is touched by at least two cores
        assert_eq!(profile.replication_ratio, 1.0);
        let total: u64 = profile.sharing_histogram.values().sum();
        assert_eq!(total, profile.distinct_lines);
    }

    #[test]
    fn zero_region_with_nonzero_probability_errors() {
        let bad = GenParams {
            lines_shared: 0,
            shared_prob: 0.5,
            ..GenParams::default()
        };
        assert!(generate(&bad).is_err());
        let bad = GenParams {
            lines_private: 0,
            shared_prob: 0.5,
            ..GenParams::default()
        };
        assert!(generate(&bad).is_err());
        let ok = GenParams {
            lines_private: 0,
            shared_prob: 1.0,
            ..GenParams::default()
        };
        assert!(generate(&ok).is_ok());
    }

    #[test]
    fn shared_fraction_tracks_probability() {
        // >= 10^5 requests: empirical shared fraction within 2% of p
        for &p in &[0.2f64, 0.5, 0.8] {
            let params = GenParams {
                cores: 10,
                requests_per_core: 12_000,
                shared_prob: p,
                lines_shared: 512,
                lines_private: 4096,
                seed: 7,
                ..GenParams::default()
            };
            let recs = generate(&params).unwrap();
            let shared = recs
                .iter()
                .filter(|r| r.address / GEN_LINE_BYTES < 512)
                .count() as f64;
            let frac = shared / recs.len() as f64;
            assert!(
                (frac - p).abs() <= 0.02,
                "p={p} got {frac} over {} records",
                recs.len()
            );
        }
    }

    #[test]
    fn instruction_ids_group_four_sector_walks() {
        let params = GenParams {
            cores: 2,
            requests_per_core: 40,
            ..GenParams::default()
        };
        let recs = generate(&params).unwrap();
        let mut by_instr: BTreeMap<u64, Vec<&TraceRecord>> = BTreeMap::new();
        for r in &recs {
            by_instr.entry(r.instruction_id).or_default().push(r);
        }
        for (id, group) in by_instr {
            assert_eq!(group.len(), 4, "instruction {id}");
            let line = group[0].address / GEN_LINE_BYTES;
            let mut sectors: Vec<u64> = group
                .iter()
                .map(|r| (r.address % GEN_LINE_BYTES) / SECTOR_BYTES)
                .collect();
            sectors.sort_unstable();
            assert_eq!(sectors, vec![0, 1, 2, 3]);
            assert!(group.iter().all(|r| r.address / GEN_LINE_BYTES == line));
            assert!(group.iter().all(|r| r.core_id == group[0].core_id));
        }
    }

    #[test]
    fn analyze_is_permutation_invariant() {
        let params = GenParams {
            cores: 5,
            requests_per_core: 300,
            ..GenParams::default()
        };
        let recs = generate(&params).unwrap();
        let forward = analyze_locality(&recs, GEN_LINE_BYTES);
        let mut reversed = recs.clone();
        reversed.reverse();
        assert_eq!(forward, analyze_locality(&reversed, GEN_LINE_BYTES));
    }

    #[test]
    fn two_core_profiles() {
        // disjoint
        let a = TraceRecord { cycle: 0, core_id: 0, kind: AccessKind::Load, address: 0, instruction_id: 0 };
        let b = TraceRecord { cycle: 0, core_id: 1, kind: AccessKind::Load, address: 128, instruction_id: 1 };
        let p = analyze_locality(&[a, b], 128);
        assert_eq!(p.replication_ratio, 0.0);
        // both on one line
        let b = TraceRecord { address: 64, ..b };
        let p = analyze_locality(&[a, b], 128);
        assert_eq!(p.replication_ratio, 1.0);
        assert_eq!(p.sharing_histogram.get(&2), Some(&1));
        assert_eq!(p.distinct_lines, 1);
    }

    #[test]
    fn digest_distinguishes_traces() {
        let params = GenParams {
            cores: 2,
            requests_per_core: 50,
            ..GenParams::default()
        };
        let a = generate(&params).unwrap();
        let b = generate(&GenParams {
            seed: 2,
            ..params.clone()
        })
        .unwrap();
        assert_eq!(trace_digest(&a), trace_digest(&a));
        assert_ne!(trace_digest(&a), trace_digest(&b));
    }
}
