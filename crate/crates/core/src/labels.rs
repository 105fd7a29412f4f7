//! Label transformations: label smoothing, DisturbLabel, the confidence
//! penalty, and per-class soft labels learned from peer-sample logits.

use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{self, Network};
use crate::par::{self, Exec};
use crate::rng::StreamRng;

/// One probability vector per class, shared by every sample of that class.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelTable {
    rows: Vec<Vec<f64>>,
    stage: usize,
    temperature: f64,
}

impl SoftLabelTable {
    pub fn new(rows: Vec<Vec<f64>>, stage: usize, temperature: f64) -> Result<Self> {
        let c = rows.len();
        if c == 0 {
            return Err(Error::invalid("soft-label table needs at least one class"));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::Shape {
                    what: "soft-label row",
                    expected: c,
                    actual: row.len(),
                });
            }
            nn::check_probability(row).map_err(|m| Error::invalid(format!("soft-label row {i}: {m}")))?;
        }
        Ok(Self {
            rows,
            stage,
            temperature,
        })
    }

    pub fn one_hot(classes: usize) -> Self {
        let rows = (0..classes)
            .map(|c| (0..classes).map(|j| if j == c { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            rows,
            stage: 0,
            temperature: 1.0,
        }
    }

    pub fn uniform(classes: usize) -> Self {
        Self {
            rows: vec![vec![1.0 / classes as f64; classes]; classes],
            stage: 0,
            temperature: 1.0,
        }
    }

    pub fn classes(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.rows[class]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// SHA-256 over the exact bit patterns of the table.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.stage as u64).to_le_bytes());
        h.update(self.temperature.to_bits().to_le_bytes());
        for v in self.rows.iter().flatten() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// CSV with header `class,stage,T,p0..p{C-1}`, 17 significant digits.
    /// `provenance` lines are emitted first as `# ` comments.
    pub fn to_csv(&self, provenance: &[String]) -> String {
        let mut out = String::new();
        for line in provenance {
            let _ = writeln!(out, "# {line}");
        }
        out.push_str("class,stage,T");
        for j in 0..self.classes() {
            let _ = write!(out, ",p{j}");
        }
        out.push('\n');
        for (c, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{c},{},{:.16e}", self.stage, self.temperature);
            for v in row {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
        let bad = |line: usize, msg: String| Error::Parse {
            offset: line,
            msg: format!("line {}: {msg}", line + 1),
        };
        let (hl, header) = lines.next().ok_or_else(|| bad(0, "missing header".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || cols[..3] != ["class", "stage", "T"] {
            return Err(bad(hl, format!("unexpected header {header:?}")));
        }
        let c = cols.len() - 3;
        let mut rows = vec![None; c];
        let mut stage = None;
        let mut temperature = None;
        for (ln, line) in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != c + 3 {
                return Err(bad(ln, format!("expected {} fields, got {}", c + 3, fields.len())));
            }
            let class: usize = fields[0].parse().map_err(|e| bad(ln, format!("class: {e}")))?;
            let st: usize = fields[1].parse().map_err(|e| bad(ln, format!("stage: {e}")))?;
            let t: f64 = fields[2].parse().map_err(|e| bad(ln, format!("T: {e}")))?;
            if class >= c || rows[class].is_some() {
                return Err(bad(ln, format!("unexpected class {class}")));
            }
            if stage.is_some_and(|s| s != st) || temperature.is_some_and(|x: f64| x.to_bits() != t.to_bits()) {
                return Err(bad(ln, "stage/T differ between rows".into()));
            }
            stage = Some(st);
            temperature = Some(t);
            let row = fields[3..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(ln, format!("probability: {e}")))?;
            rows[class] = Some(row);
        }
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| bad(0, format!("missing row for class {i}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows, stage.unwrap_or(0), temperature.unwrap_or(1.0))
    }
}

/// Training-split indices of one class drawn for a soft-label update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerSet {
    pub class: usize,
    /// Ascending.
    pub indices: Vec<usize>,
    pub seed: u64,
}

/// Label regularizer used by a comparison run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaselineSpec {
    Hard,
    Smooth { epsilon: f64 },
    Disturb { alpha: f64 },
    ConfidencePenalty { beta: f64 },
}

impl BaselineSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BaselineSpec::Hard => Ok(()),
            BaselineSpec::Smooth { epsilon } if (0.0..=1.0).contains(&epsilon) => Ok(()),
            BaselineSpec::Disturb { alpha } if (0.0..=1.0).contains(&alpha) => Ok(()),
            BaselineSpec::ConfidencePenalty { beta } if beta >= 0.0 && beta.is_finite() => Ok(()),
            other => Err(Error::invalid(format!("baseline parameter out of range: {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaselineSpec::Hard => "hard",
            BaselineSpec::Smooth { .. } => "smooth",
            BaselineSpec::Disturb { .. } => "disturb",
            BaselineSpec::ConfidencePenalty { .. } => "confidence-penalty",
        }
    }
}

/// `(1 - eps) * onehot(y) + eps / C`.
pub fn label_smooth(y: usize, epsilon: f64, classes: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon must be in [0, 1], got {epsilon}")));
    }
    if y >= classes {
        return Err(Error::invalid(format!("label {y} out of range for {classes} classes")));
    }
    let off = epsilon / classes as f64;
    let mut v = vec![off; classes];
    v[y] = (1.0 - epsilon) + off;
    Ok(v)
}

/// Keep `y` with probability `1 - alpha`, otherwise draw a class uniformly
/// from all `classes` (the original included), so the expected one-hot
/// equals `label_smooth(y, alpha, classes)`.
pub fn disturb_label<R: Rng + ?Sized>(y: usize, alpha: f64, classes: usize, rng: &mut R) -> usize {
    debug_assert!((0.0..=1.0).contains(&alpha));
    if alpha <= 0.0 {
        return y;
    }
    if rng.random::<f64>() < alpha {
        rng.random_range(0..classes)
    } else {
        y
    }
}

/// `-beta * H(p)`; adding it to a loss rewards higher-entropy predictions.
pub fn confidence_penalty(p: &[f64], beta: f64) -> f64 {
    -beta * nn::entropy(p)
}

/// `0.5 * ||a - b||^2`.
pub fn half_sq_dist(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            what: "half squared distance",
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(0.5 * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
}

/// Draw up to `k` distinct training samples of `class`, uniformly without
/// replacement. When `k` covers the class every sample is returned.
pub fn get_peer_samples(class: usize, k: usize, dataset: &Dataset, seed: u64) -> Result<PeerSet> {
    if k == 0 {
        return Err(Error::invalid("peer count must be >= 1"));
    }
    let members = dataset.class_indices(Split::Train, class);
    if members.is_empty() {
        return Err(Error::EmptyClass { class });
    }
    let indices = if k >= members.len() {
        members
    } else {
        let mut rng = StreamRng::seed_from_u64(seed);
        let mut picked: Vec<usize> = index::sample(&mut rng, members.len(), k)
            .into_iter()
            .map(|i| members[i])
            .collect();
        picked.sort_unstable();
        picked
    };
    Ok(PeerSet {
        class,
        indices,
        seed,
    })
}

/// Element-wise mean of logit vectors, summed in the given order.
///
/// This is the unique minimizer of `sum_i half_sq_dist(y, logits_i)` over `y`.
pub fn mean_logits(logits: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = logits.first().ok_or_else(|| Error::invalid("no peer logits"))?;
    let mut sum = vec![0.0; first.len()];
    for l in logits {
        if l.len() != sum.len() {
            return Err(Error::Shape {
                what: "peer logits",
                expected: sum.len(),
                actual: l.len(),
            });
        }
        for (s, v) in sum.iter_mut().zip(l) {
            *s += v;
        }
    }
    let n = logits.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Soft label of one class from its peers' logits: `softmax(mean / T)`.
pub fn soft_label_from_logits(logits: &[Vec<f64>], temperature: f64) -> Result<Vec<f64>> {
    nn::softmax_tempered(&mean_logits(logits)?, temperature)
}

/// Recompute the whole table from the current network. Each class draws its
/// peers from its own seed (taken from `rng` up front), so classes can be
/// processed in any order or concurrently with identical results.
pub fn update_soft_labels<R: Rng + ?Sized>(
    net: &Network,
    dataset: &Dataset,
    k: usize,
    temperature: f64,
    stage: usize,
    rng: &mut R,
    exec: Exec,
) -> Result<SoftLabelTable> {
    let classes = dataset.classes();
    if net.output_dim() != classes {
        return Err(Error::Shape {
            what: "network outputs vs classes",
            expected: classes,
            actual: net.output_dim(),
        });
    }
    let seeds: Vec<(usize, u64)> = (0..classes).map(|c| (c, rng.random())).collect();
    let rows = par::map(exec, &seeds, |&(class, seed)| -> Result<Vec<f64>> {
        let peers = get_peer_samples(class, k, dataset, seed)?;
        let logits = peers
            .indices
            .iter()
            .map(|&i| {
                let z = net.forward(dataset.sample(i));
                if z.iter().all(|v| v.is_finite()) {
                    Ok(z)
                } else {
                    Err(Error::NonFiniteLogits { class, sample: i })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        soft_label_from_logits(&logits, temperature)
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    SoftLabelTable::new(rows, stage, temperature)
}
