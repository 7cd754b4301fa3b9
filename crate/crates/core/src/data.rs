//! Synthetic group-emotion data with a planted salient face.
//!
//! Each sample is a set of face feature vectors plus one global context
//! vector. Exactly one face (the *dominant* face) carries the label: a
//! strong class prototype in its content dimensions and a raised marker in
//! a dedicated salience channel. The remaining faces carry weaker,
//! conflicting prototypes and zero salience. Uniform averaging dilutes the
//! dominant face among distractors; a pooling mechanism that can weight
//! faces can recover it, which is exactly the gap the benchmark measures.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::Label;
use crate::rng::CounterRng;
use crate::tensor::TensorError;

/// Dimensions of a face's prototype content block.
pub const CONTENT_DIM: usize = 32;
/// Index of the salience channel within a face vector.
pub const SALIENCE_INDEX: usize = 32;
/// Full face vector dimension: content plus one salience channel.
pub const FACE_DIM: usize = 33;
/// Global context dimension: a scene block plus a projection of the
/// dominant face's prototype.
pub const GLOBAL_DIM: usize = 64;

const BLOCK: usize = 10;

/// Class prototype `c_k`: unit-norm indicator of a 10-wide block,
/// value 1/sqrt(10) over dims [k*10, (k+1)*10), zero elsewhere.
pub fn prototype(class: usize) -> [f32; CONTENT_DIM] {
    assert!(class < Label::COUNT, "class index {class} out of range");
    let mut p = [0.0f32; CONTENT_DIM];
    let v = 1.0 / (BLOCK as f32).sqrt();
    for item in p.iter_mut().skip(class * BLOCK).take(BLOCK) {
        *item = v;
    }
    p
}

/// One group sample: a variable-size face set, a global context vector,
/// the label, and (for diagnostics only — never fed to the model) the index
/// of the planted dominant face.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSample {
    pub id: String,
    pub global_context: Vec<f32>,
    pub faces: Vec<Vec<f32>>,
    pub label: Label,
    pub dominant_index: Option<usize>,
}

/// Generator parameters. Invariants: the dominant prototype must be
/// strictly stronger than distractors (`a > b >= 0`), noise positive,
/// and the face-count range non-empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_eval: usize,
    pub face_count_min: usize,
    pub face_count_max: usize,
    /// Dominant-face prototype strength `a`.
    pub dominant_strength: f64,
    /// Distractor prototype strength `b`.
    pub distractor_strength: f64,
    /// Mean of the dominant face's salience channel.
    pub salience_mean: f64,
    /// Standard deviation of the Gaussian noise on every coordinate.
    pub noise_sigma: f64,
    /// Strength of the scene block in the global context.
    pub global_strength: f64,
    /// Strength of the dominant-prototype projection in the global context.
    pub context_projection: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 4000,
            n_val: 1000,
            n_eval: 1000,
            face_count_min: 1,
            face_count_max: 8,
            dominant_strength: 3.0,
            distractor_strength: 1.5,
            salience_mean: 4.5,
            noise_sigma: 1.0,
            global_strength: 0.5,
            context_projection: 0.5,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if !(self.dominant_strength > self.distractor_strength && self.distractor_strength >= 0.0)
        {
            return Err(TensorError::invalid(
                "dataset config",
                format!(
                    "need dominant_strength > distractor_strength >= 0, got a={} b={}",
                    self.dominant_strength, self.distractor_strength
                ),
            ));
        }
        if !(self.noise_sigma > 0.0) {
            return Err(TensorError::invalid(
                "dataset config",
                format!("noise_sigma must be positive, got {}", self.noise_sigma),
            ));
        }
        if self.face_count_min < 1 || self.face_count_min > self.face_count_max {
            return Err(TensorError::invalid(
                "dataset config",
                format!(
                    "face count range [{}, {}] is invalid (need 1 <= min <= max)",
                    self.face_count_min, self.face_count_max
                ),
            ));
        }
        if self.salience_mean < 0.0 || self.global_strength < 0.0 || self.context_projection < 0.0
        {
            return Err(TensorError::invalid(
                "dataset config",
                "salience_mean, global_strength, and context_projection must be non-negative",
            ));
        }
        Ok(())
    }
}

/// The three generated partitions, disjoint by sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<GroupSample>,
    pub val: Vec<GroupSample>,
    pub eval: Vec<GroupSample>,
}

/// Draws one sample from the generative process using `rng` (a dedicated
/// per-sample stream). Draw order is fixed: label, face count, dominant
/// index, then per face (distractor class if applicable, then 33 noise
/// normals), then 64 global noise normals.
fn draw_sample(rng: &mut CounterRng, cfg: &DatasetConfig, id: String) -> GroupSample {
    let label_idx = rng.next_below(Label::COUNT);
    let label = Label::from_index(label_idx).expect("index < 3");
    let span = cfg.face_count_max - cfg.face_count_min + 1;
    let n_faces = cfg.face_count_min + rng.next_below(span);
    let dominant = rng.next_below(n_faces);

    let sigma = cfg.noise_sigma;
    let c_label = prototype(label_idx);
    let mut faces = Vec::with_capacity(n_faces);
    for i in 0..n_faces {
        let mut face = vec![0.0f32; FACE_DIM];
        if i == dominant {
            for (j, f) in face.iter_mut().enumerate().take(CONTENT_DIM) {
                *f = (cfg.dominant_strength * c_label[j] as f64 + sigma * rng.next_normal())
                    as f32;
            }
            face[SALIENCE_INDEX] = (cfg.salience_mean + sigma * rng.next_normal()) as f32;
        } else {
            // Distractors carry one of the two *other* class prototypes.
            let other = (label_idx + 1 + rng.next_below(2)) % Label::COUNT;
            let c_other = prototype(other);
            for (j, f) in face.iter_mut().enumerate().take(CONTENT_DIM) {
                *f = (cfg.distractor_strength * c_other[j] as f64 + sigma * rng.next_normal())
                    as f32;
            }
            face[SALIENCE_INDEX] = (sigma * rng.next_normal()) as f32;
        }
        faces.push(face);
    }

    // Global context: a scene block aligned with the label, then a
    // projection of the dominant face's prototype component.
    let mut global = vec![0.0f32; GLOBAL_DIM];
    for (j, g) in global.iter_mut().enumerate().take(CONTENT_DIM) {
        *g = (cfg.global_strength * c_label[j] as f64 + sigma * rng.next_normal()) as f32;
    }
    for j in 0..CONTENT_DIM {
        global[CONTENT_DIM + j] =
            (cfg.context_projection * c_label[j] as f64 + sigma * rng.next_normal()) as f32;
    }

    GroupSample { id, global_context: global, faces, label, dominant_index: Some(dominant) }
}

/// Generates the three partitions deterministically from `cfg.seed`.
/// Sample `i` (indexed across all partitions in train/val/eval order) is
/// drawn from RNG stream `i`, so each sample's bits are independent of the
/// partition sizes around it.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset, TensorError> {
    cfg.validate()?;
    let root = CounterRng::new(cfg.seed);
    let mut next_stream = 0u64;
    let mut part = |name: &str, count: usize| -> Vec<GroupSample> {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = root.stream(next_stream);
            next_stream += 1;
            out.push(draw_sample(&mut rng, cfg, format!("{name}-{i:05}")));
        }
        out
    };
    Ok(Dataset {
        train: part("train", cfg.n_train),
        val: part("val", cfg.n_val),
        eval: part("eval", cfg.n_eval),
    })
}

/// Monte-Carlo estimate of the planted-salience oracle's accuracy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleEstimate {
    pub accuracy: f64,
    /// Half-width of the 95% binomial confidence interval.
    pub ci_half_width: f64,
    pub trials: usize,
}

/// The oracle classifies by (i) selecting the face with the highest
/// salience-channel value, then (ii) picking the class whose prototype has
/// the largest inner product with that face's content dims. Ties break
/// toward the lowest index. This upper-bounds what salience-driven pooling
/// can achieve and is estimated on fresh samples drawn from `cfg`.
pub fn bayes_oracle_accuracy(
    cfg: &DatasetConfig,
    n_mc: usize,
) -> Result<OracleEstimate, TensorError> {
    cfg.validate()?;
    if n_mc < 1000 {
        return Err(TensorError::invalid(
            "oracle",
            format!("need at least 1000 Monte-Carlo trials for a usable estimate, got {n_mc}"),
        ));
    }
    // A dedicated stream space, disjoint from the per-sample dataset
    // streams, so the estimate never reuses generated samples.
    let root = CounterRng::new(cfg.seed).stream(u64::MAX);
    let mut hits = 0usize;
    for i in 0..n_mc {
        let mut rng = root.stream(i as u64);
        let s = draw_sample(&mut rng, cfg, String::new());
        if oracle_predict(&s) == s.label {
            hits += 1;
        }
    }
    let acc = hits as f64 / n_mc as f64;
    let ci = 1.96 * (acc * (1.0 - acc) / n_mc as f64).sqrt();
    Ok(OracleEstimate { accuracy: acc, ci_half_width: ci, trials: n_mc })
}

/// The oracle decision rule on one sample (see `bayes_oracle_accuracy`).
pub fn oracle_predict(sample: &GroupSample) -> Label {
    let mut best_face = 0;
    for (i, f) in sample.faces.iter().enumerate() {
        if f[SALIENCE_INDEX] > sample.faces[best_face][SALIENCE_INDEX] {
            best_face = i;
        }
    }
    let face = &sample.faces[best_face];
    let mut best_class = 0;
    let mut best_score = f32::NEG_INFINITY;
    for k in 0..Label::COUNT {
        let c = prototype(k);
        let score: f32 = c.iter().zip(face.iter()).map(|(a, b)| a * b).sum();
        if score > best_score {
            best_score = score;
            best_class = k;
        }
    }
    Label::from_index(best_class).expect("index < 3")
}

/// Fraction of samples whose dominant face is the salience argmax —
/// measures whether the planted face is recoverable from the salience
/// channel alone.
pub fn salience_recovery_rate(samples: &[GroupSample]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for s in samples {
        let Some(dom) = s.dominant_index else { continue };
        total += 1;
        let mut best = 0;
        for (i, f) in s.faces.iter().enumerate() {
            if f[SALIENCE_INDEX] > s.faces[best][SALIENCE_INDEX] {
                best = i;
            }
        }
        if best == dom {
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Errors from dataset file I/O.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    label: Label,
    global: Vec<f32>,
    faces: Vec<Vec<f32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dominant: Option<usize>,
    #[serde(flatten, skip_serializing)]
    extra: serde_json::Map<String, serde_json::Value>,
}

/// Writes one partition as JSON Lines, one sample per line, in order.
pub fn write_partition<W: Write>(mut w: W, samples: &[GroupSample]) -> Result<(), DataError> {
    for s in samples {
        let rec = Record {
            id: s.id.clone(),
            label: s.label,
            global: s.global_context.clone(),
            faces: s.faces.clone(),
            dominant: s.dominant_index,
            extra: serde_json::Map::new(),
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| DataError::Invalid(format!("serializing sample '{}': {e}", s.id)))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn write_partition_file(path: &Path, samples: &[GroupSample]) -> Result<(), DataError> {
    let file = std::fs::File::create(path)?;
    let mut buf = std::io::BufWriter::new(file);
    write_partition(&mut buf, samples)?;
    buf.flush()?;
    Ok(())
}

/// Reads a JSONL partition. Malformed lines are hard errors naming the
/// line number; unknown fields are ignored with a warning string returned
/// to the caller. An empty file yields an empty partition.
pub fn read_partition<R: BufRead>(r: R) -> Result<(Vec<GroupSample>, Vec<String>), DataError> {
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for (idx, line) in r.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| DataError::Parse { line: line_no, msg: e.to_string() })?;
        if !rec.extra.is_empty() {
            let keys: Vec<&str> = rec.extra.keys().map(|k| k.as_str()).collect();
            warnings.push(format!(
                "line {line_no}: ignoring unknown field(s): {}",
                keys.join(", ")
            ));
        }
        if rec.faces.is_empty() {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("sample '{}' has no faces", rec.id),
            });
        }
        let dim = rec.faces[0].len();
        if dim == 0 || rec.faces.iter().any(|f| f.len() != dim) {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("sample '{}' has empty or ragged face vectors", rec.id),
            });
        }
        if rec.global.is_empty() {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("sample '{}' has an empty global context", rec.id),
            });
        }
        if let Some(d) = rec.dominant {
            if d >= rec.faces.len() {
                return Err(DataError::Parse {
                    line: line_no,
                    msg: format!(
                        "sample '{}': dominant index {d} out of range for {} faces",
                        rec.id,
                        rec.faces.len()
                    ),
                });
            }
        }
        if !seen_ids.insert(rec.id.clone()) {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("duplicate sample id '{}'", rec.id),
            });
        }
        samples.push(GroupSample {
            id: rec.id,
            global_context: rec.global,
            faces: rec.faces,
            label: rec.label,
            dominant_index: rec.dominant,
        });
    }
    Ok((samples, warnings))
}

pub fn read_partition_file(path: &Path) -> Result<(Vec<GroupSample>, Vec<String>), DataError> {
    let file = std::fs::File::open(path)?;
    read_partition(BufReader::new(file))
}
