//! Offline attention analyses: cumulative received-attention curves with a
//! single ℓ2 change point, shift-location histograms, and the layer-pair mIoU
//! of key text tokens.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{column_sums, Matrix};
use crate::model::AttentionMaps;
use crate::rank::{fraction_count, top_k_indices};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionCurve {
    pub token_id: usize,
    /// Attention received at each layer.
    pub values: Vec<f64>,
    /// Prefix sums of `values`.
    pub cumulative: Vec<f64>,
}

pub fn cumulative_curve(token_id: usize, values: &[f64]) -> Result<AttentionCurve> {
    if values.len() < 2 {
        return Err(Error::SeriesTooShort {
            len: values.len(),
            min: 2,
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attention curve"));
    }
    let cumulative = values
        .iter()
        .scan(0.0, |acc, &v| {
            *acc += v;
            Some(*acc)
        })
        .collect();
    Ok(AttentionCurve {
        token_id,
        values: values.to_vec(),
        cumulative,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangePointResult {
    pub token_id: usize,
    /// Last (1-based) index of the first segment: segments are `1..=b` and `b+1..=L`.
    pub breakpoint: usize,
    pub segment_means: (f64, f64),
    pub sse: f64,
}

/// Running mean and sum of squared deviations (Welford).
#[derive(Debug, Clone, Copy, Default)]
struct Running {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Running {
    fn push(&mut self, y: f64) {
        self.n += 1.0;
        let delta = y - self.mean;
        self.mean += delta / self.n;
        self.m2 += delta * (y - self.mean);
    }
}

/// Single change point under the ℓ2 segment cost (Binseg with one split).
///
/// Scans every split once using forward and backward running segment
/// statistics. Ties resolve to the smallest breakpoint, so a constant series
/// yields `b = 1`.
pub fn detect_change_point(series: &[f64]) -> Result<ChangePointResult> {
    let len = series.len();
    if len < 2 {
        return Err(Error::SeriesTooShort { len, min: 2 });
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("change-point series"));
    }

    // suffix[i] describes series[i..]
    let mut suffix = vec![Running::default(); len + 1];
    let mut acc = Running::default();
    for i in (0..len).rev() {
        acc.push(series[i]);
        suffix[i] = acc;
    }

    let mut prefix = Running::default();
    let mut best: Option<(usize, f64, f64, f64)> = None;
    for b in 1..len {
        prefix.push(series[b - 1]);
        let tail = suffix[b];
        let cost = prefix.m2 + tail.m2;
        if best.is_none_or(|(_, c, _, _)| cost < c) {
            best = Some((b, cost, prefix.mean, tail.mean));
        }
    }
    let (breakpoint, sse, mu1, mu2) = best.expect("len >= 2 gives at least one split");
    Ok(ChangePointResult {
        token_id: 0,
        breakpoint,
        segment_means: (mu1, mu2),
        sse,
    })
}

/// Change point of a token's cumulative curve.
pub fn curve_change_point(curve: &AttentionCurve) -> Result<ChangePointResult> {
    let mut r = detect_change_point(&curve.cumulative)?;
    r.token_id = curve.token_id;
    Ok(r)
}

/// Per-layer attention each original vision token receives: the sum of its
/// text-to-vision column over all text queries. Pruned tokens receive zero.
/// Rows follow `maps.initial_vision_ids()`.
pub fn received_attention(maps: &AttentionMaps) -> Result<Vec<Vec<f64>>> {
    if maps.per_layer.is_empty() {
        return Err(Error::Empty("attention maps"));
    }
    let ids = maps.initial_vision_ids();
    let mut out = vec![vec![0.0; maps.num_layers()]; ids.len()];
    for (li, layer) in maps.per_layer.iter().enumerate() {
        if layer.t2v.cols() == 0 || layer.t2v.rows() == 0 {
            continue;
        }
        let sums = column_sums(&layer.t2v)?;
        for (&id, &s) in layer.vision_ids.iter().zip(sums.iter()) {
            let row = ids.binary_search(&id).map_err(|_| {
                Error::InvalidConfig(format!(
                    "vision token {id} at layer {} is not present at layer 0",
                    layer.layer_index
                ))
            })?;
            out[row][li] = s;
        }
    }
    Ok(out)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidFraction(fraction))
    }
}

/// Original positions of the `ceil(fraction * V)` vision tokens receiving the
/// most text attention summed over all layers. Ascending.
pub fn top_vision_tokens(maps: &AttentionMaps, fraction: f64) -> Result<Vec<usize>> {
    check_fraction(fraction)?;
    let received = received_attention(maps)?;
    let totals: Vec<f64> = received.iter().map(|r| r.iter().sum()).collect();
    let k = fraction_count(fraction, totals.len());
    let ids = maps.initial_vision_ids();
    Ok(top_k_indices(&totals, k)
        .into_iter()
        .map(|i| ids[i])
        .collect())
}

/// Breakpoint counts indexed by layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftHistogram {
    pub counts: Vec<u64>,
    pub samples: u64,
    pub tokens: u64,
}

impl ShiftHistogram {
    pub fn new(num_layers: usize) -> Self {
        Self {
            counts: vec![0; num_layers],
            samples: 0,
            tokens: 0,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.counts.len()
    }

    pub fn merge(&mut self, other: &ShiftHistogram) -> Result<()> {
        if other.counts.len() != self.counts.len() {
            return Err(Error::HeterogeneousCorpus {
                expected: self.counts.len(),
                actual: other.counts.len(),
                sample: "<histogram>".into(),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.samples += other.samples;
        self.tokens += other.tokens;
        Ok(())
    }

    /// Layer with the highest count (smallest layer on ties).
    pub fn mode(&self) -> Option<usize> {
        let max = *self.counts.iter().max()?;
        (max > 0).then(|| self.counts.iter().position(|&c| c == max).unwrap())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,count\n");
        for (l, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{l},{c}");
        }
        out
    }
}

/// Shift points of one sample's top vision tokens.
pub fn sample_shifts(maps: &AttentionMaps, fraction: f64) -> Result<Vec<ChangePointResult>> {
    let top = top_vision_tokens(maps, fraction)?;
    let received = received_attention(maps)?;
    let ids = maps.initial_vision_ids();
    top.iter()
        .map(|&id| {
            let row = ids.binary_search(&id).expect("top tokens come from ids");
            curve_change_point(&cumulative_curve(id, &received[row])?)
        })
        .collect()
}

fn common_layers<'a>(corpus: impl IntoIterator<Item = &'a AttentionMaps>) -> Result<Option<usize>> {
    let mut layers = None;
    for maps in corpus {
        match layers {
            None => layers = Some(maps.num_layers()),
            Some(l) if l != maps.num_layers() => {
                return Err(Error::HeterogeneousCorpus {
                    expected: l,
                    actual: maps.num_layers(),
                    sample: maps.sample_id.clone(),
                })
            }
            _ => {}
        }
    }
    Ok(layers)
}

/// Histogram of shift points across a corpus.
pub fn shift_histogram(corpus: &[AttentionMaps], fraction: f64) -> Result<ShiftHistogram> {
    check_fraction(fraction)?;
    let Some(layers) = common_layers(corpus)? else {
        return Ok(ShiftHistogram::new(0));
    };
    let mut hist = ShiftHistogram::new(layers);
    for maps in corpus {
        for r in sample_shifts(maps, fraction)? {
            hist.counts[r.breakpoint] += 1;
            hist.tokens += 1;
        }
        hist.samples += 1;
    }
    Ok(hist)
}

/// Top `ceil(fraction * T)` text tokens by received text attention.
pub fn key_text_tokens(t2t: &Matrix, fraction: f64) -> Result<Vec<usize>> {
    check_fraction(fraction)?;
    if t2t.is_empty() {
        return Err(Error::Empty("text block"));
    }
    let importance = column_sums(t2t)?;
    Ok(top_k_indices(
        &importance,
        fraction_count(fraction, importance.len()),
    ))
}

/// `|a ∩ b| / |a ∪ b|` for sorted index sets; two empty sets give 1.
pub fn iou(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Mean IoU of key-text-token sets between every pair of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouMatrix {
    pub num_layers: usize,
    pub samples: u64,
    /// Row-major sums of per-sample IoU; divide by `samples` for the mean.
    sums: Vec<f64>,
}

impl MiouMatrix {
    pub fn new(num_layers: usize) -> Self {
        Self {
            num_layers,
            samples: 0,
            sums: vec![0.0; num_layers * num_layers],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.samples == 0 {
            return if i == j { 1.0 } else { 0.0 };
        }
        self.sums[i * self.num_layers + j] / self.samples as f64
    }

    pub fn values(&self) -> Vec<Vec<f64>> {
        (0..self.num_layers)
            .map(|i| (0..self.num_layers).map(|j| self.get(i, j)).collect())
            .collect()
    }

    fn add_sample(&mut self, keys: &[Vec<usize>]) {
        let l = self.num_layers;
        for i in 0..l {
            self.sums[i * l + i] += 1.0;
            for j in i + 1..l {
                let v = iou(&keys[i], &keys[j]);
                self.sums[i * l + j] += v;
                self.sums[j * l + i] += v;
            }
        }
        self.samples += 1;
    }

    pub fn merge(&mut self, other: &MiouMatrix) -> Result<()> {
        if other.num_layers != self.num_layers {
            return Err(Error::HeterogeneousCorpus {
                expected: self.num_layers,
                actual: other.num_layers,
                sample: "<miou>".into(),
            });
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        self.samples += other.samples;
        Ok(())
    }

    /// L x L grid with a header row of layer indices.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for j in 0..self.num_layers {
            let _ = write!(out, ",{j}");
        }
        out.push('\n');
        for i in 0..self.num_layers {
            let _ = write!(out, "{i}");
            for j in 0..self.num_layers {
                let _ = write!(out, ",{:.6}", self.get(i, j));
            }
            out.push('\n');
        }
        out
    }
}

pub fn miou_matrix(corpus: &[AttentionMaps], fraction: f64) -> Result<MiouMatrix> {
    check_fraction(fraction)?;
    let Some(layers) = common_layers(corpus)? else {
        return Ok(MiouMatrix::new(0));
    };
    let mut out = MiouMatrix::new(layers);
    for maps in corpus {
        let keys = maps
            .per_layer
            .iter()
            .map(|l| key_text_tokens(&l.t2t, fraction))
            .collect::<Result<Vec<_>>>()?;
        out.add_sample(&keys);
    }
    Ok(out)
}
