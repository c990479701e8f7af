//! Deterministic synthetic bi-temporal dataset: feature-grid pairs with a
//! planted change signature, template captions, JSONL persistence, and
//! vocabulary construction.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::Vocabulary;
use crate::error::{HisemError, Result};
use crate::metrics::tokenize;

pub const OBJECTS: [&str; 4] = ["building", "road", "trees", "house"];
pub const LOCATIONS: [&str; 5] = [
    "top left corner",
    "top right corner",
    "bottom left corner",
    "bottom right corner",
    "center",
];

/// One scene pair on disk: flattened [H×W×D] grids plus references.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetRecord {
    pub id: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub f_t1: Vec<f64>,
    pub f_t2: Vec<f64>,
    pub label: u8,
    pub captions: Vec<String>,
}

/// Shape and signal/noise knobs for the generator.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    /// Std-dev of the temporal nuisance noise added to f_t2.
    pub noise_amp: f64,
    /// Amplitude of the planted change signature.
    pub signal_amp: f64,
}

impl Default for GenConfig {
    fn default() -> GenConfig {
        GenConfig {
            h: 7,
            w: 7,
            d: 64,
            noise_amp: 0.1,
            signal_amp: 1.0,
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 bounded away from zero
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Cell mask for a named region of the grid, 1.0 inside and 0.0 outside.
fn region_mask(h: usize, w: usize, loc: usize) -> Vec<f64> {
    let mut m = vec![0.0; h * w];
    let (r0, r1, c0, c1) = match loc {
        0 => (0, h / 2, 0, w / 2),
        1 => (0, h / 2, w - w / 2, w),
        2 => (h - h / 2, h, 0, w / 2),
        3 => (h - h / 2, h, w - w / 2, w),
        _ => (h / 3, h - h / 3, w / 3, w - w / 3),
    };
    for r in r0..r1 {
        for c in c0..c1 {
            m[r * w + c] = 1.0;
        }
    }
    m
}

fn changed_captions(obj: &str, appear: bool, loc: &str) -> Vec<String> {
    let verb = if appear { "appears" } else { "disappears" };
    vec![
        format!("a {obj} {verb} in the {loc}"),
        format!("some {obj} {verb} in the {loc}"),
        format!("in the {loc} a {obj} {verb}"),
        format!("a {obj} {verb} near the {loc}"),
        format!("one {obj} {verb} in the {loc} area"),
    ]
}

fn unchanged_captions() -> Vec<String> {
    [
        "the scene remains the same",
        "there is no change in the scene",
        "the two scenes are almost the same",
        "nothing has changed in this area",
        "no change is observed between the scenes",
    ]
    .map(String::from)
    .to_vec()
}

/// Generates `n_pairs` records, alternating unchanged/changed for an even
/// split. Unchanged pairs differ only by nuisance noise; changed pairs
/// additionally carry an object signature over a spatial region, planted
/// on f_t2 for appearances and on f_t1 for disappearances. Channel 0 of
/// the signature always points in the +diff direction, so the pooled
/// temporal difference separates the labels linearly.
pub fn synth_generate(n_pairs: usize, cfg: &GenConfig, seed: u64) -> Result<Vec<DatasetRecord>> {
    if n_pairs < 2 {
        return Err(HisemError::InvalidArgument(format!(
            "need at least 2 pairs, got {n_pairs}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, d) = (cfg.h, cfg.w, cfg.d);
    let mut out = Vec::with_capacity(n_pairs);
    for id in 0..n_pairs {
        let mut f_t1: Vec<f64> = (0..h * w * d).map(|_| gauss(&mut rng)).collect();
        let mut f_t2: Vec<f64> = f_t1
            .iter()
            .map(|&v| v + cfg.noise_amp * gauss(&mut rng))
            .collect();
        let changed = id % 2 == 1;
        let captions = if changed {
            let obj = rng.gen_range(0..OBJECTS.len());
            let appear = rng.gen_bool(0.5);
            let loc = rng.gen_range(0..LOCATIONS.len());
            let mask = region_mask(h, w, loc);
            // signature: change direction on channel 0, object id on 1+obj
            let mut sig = vec![0.0; d];
            sig[0] = cfg.signal_amp;
            sig[(1 + obj).min(d - 1)] = cfg.signal_amp;
            let target = if appear { &mut f_t2 } else { &mut f_t1 };
            for cell in 0..h * w {
                if mask[cell] == 0.0 {
                    continue;
                }
                for (k, &s) in sig.iter().enumerate() {
                    // planting on f_t1 flips the sign so f_t2−f_t1 keeps
                    // a positive channel-0 component either way
                    target[cell * d + k] += if appear { s } else { -s };
                }
            }
            changed_captions(OBJECTS[obj], appear, LOCATIONS[loc])
        } else {
            unchanged_captions()
        };
        out.push(DatasetRecord {
            id,
            h,
            w,
            d,
            f_t1,
            f_t2,
            label: changed as u8,
            captions,
        });
    }
    Ok(out)
}

/// One JSON object per line.
pub fn save_dataset(records: &[DatasetRecord], path: &Path) -> Result<()> {
    let io = |e| HisemError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut f = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let io = |e| HisemError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let f = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord =
            serde_json::from_str(&line).map_err(|e| HisemError::MalformedRecord {
                line: i + 1,
                msg: e.to_string(),
            })?;
        if rec.f_t1.len() != rec.h * rec.w * rec.d || rec.f_t2.len() != rec.f_t1.len() {
            return Err(HisemError::MalformedRecord {
                line: i + 1,
                msg: format!(
                    "feature length {} does not match {}x{}x{}",
                    rec.f_t1.len(),
                    rec.h,
                    rec.w,
                    rec.d
                ),
            });
        }
        out.push(rec);
    }
    if out.is_empty() {
        eprintln!("warning: dataset {} is empty", path.display());
    }
    Ok(out)
}

/// Frequency-thresholded vocabulary: tokens with freq ≥ min_freq, ordered
/// by (freq desc, token asc) after the reserved ids.
pub fn build_vocab(captions: &[String], min_freq: usize) -> Result<Vocabulary> {
    let mut freq: HashMap<String, usize> = HashMap::new();
    for c in captions {
        for t in tokenize(c) {
            *freq.entry(t).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(String, usize)> =
        freq.into_iter().filter(|&(_, n)| n >= min_freq).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Vocabulary::new(kept.into_iter().map(|(t, _)| t))
}
