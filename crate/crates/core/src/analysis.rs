//! Attention-sparsity analyses: per-head entropy of attention probabilities,
//! Jensen-Shannon divergence between vertically adjacent heads, and the
//! violin-plot CSV exporters.

use std::fs;
use std::path::Path;

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{ForwardOpts, Model};
use crate::rng;
use crate::tensor::Tensor;

const NORMALIZATION_SLACK: f64 = 1e-6;

fn check_distribution(what: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Data(format!("{what}: empty distribution")));
    }
    if let Some(&x) = p.iter().find(|&&x| !(x >= 0.0)) {
        return Err(Error::Data(format!("{what}: negative or non-finite entry {x}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_SLACK {
        return Err(Error::Data(format!("{what}: mass sums to {sum}, not 1")));
    }
    Ok(())
}

/// Shannon entropy in nats, with 0 ln 0 = 0.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    check_distribution("entropy", probs)?;
    Ok(probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum())
}

/// Jensen-Shannon divergence in nats: JSD = KL(p||m)/2 + KL(q||m)/2 with
/// m = (p+q)/2. Symmetric and bounded by ln 2; 0-mass terms contribute 0.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Data(format!("jsd: support sizes {} vs {}", p.len(), q.len())));
    }
    check_distribution("jsd(p)", p)?;
    check_distribution("jsd(q)", q)?;
    let half_kl = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (x / (0.5 * (x + y))).ln())
            .sum::<f64>()
            * 0.5
    };
    Ok(half_kl(p, q) + half_kl(q, p))
}

/// One measurement: `value` is entropy or JSD in nats. For JSD the `layer`
/// field names the upper layer of the adjacent pair (0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisRecord {
    pub example_id: usize,
    pub token_index: usize,
    pub layer: usize,
    pub head: usize,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Entropy,
    Jsd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Color {
    Red,
    Yellow,
    Blue,
}

impl Color {
    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "RED",
            Color::Yellow => "YELLOW",
            Color::Blue => "BLUE",
        }
    }

    pub fn parse(s: &str) -> Option<Color> {
        match s {
            "RED" => Some(Color::Red),
            "YELLOW" => Some(Color::Yellow),
            "BLUE" => Some(Color::Blue),
            _ => None,
        }
    }
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Entropy => "entropy",
            Metric::Jsd => "jsd",
        }
    }

    /// (blue_below, red_above) median thresholds, in nats. The entropy pair
    /// is calibrated for 512-key attention rows and is reported unchanged at
    /// shorter lengths.
    pub fn thresholds(self) -> (f64, f64) {
        match self {
            Metric::Entropy => (1.5, 4.5),
            Metric::Jsd => (0.25, 0.75),
        }
    }

    pub fn color_for(self, median: f64) -> Color {
        let (blue_below, red_above) = self.thresholds();
        if median < blue_below {
            Color::Blue
        } else if median > red_above {
            Color::Red
        } else {
            Color::Yellow
        }
    }
}

/// Attention probabilities for one example at batch size 1: per layer, per
/// head, an s*s row-stochastic matrix, plus the unpadded key positions.
fn example_probs(model: &Model, ex: &Example) -> Result<(Vec<Vec<Tensor>>, Vec<usize>)> {
    let mut tape = crate::autodiff::Tape::new();
    let mut silent = rng::seeded(0, rng::STREAM_EVAL);
    let run = model.forward_batch(
        &mut tape,
        std::slice::from_ref(&ex.tokens),
        std::slice::from_ref(&ex.segments),
        std::slice::from_ref(&ex.mask),
        ForwardOpts::default(),
        &mut silent,
    )?;
    let probs = run
        .trace
        .probs
        .iter()
        .map(|layer| layer.iter().map(|&id| tape.value(id).clone()).collect())
        .collect();
    let real: Vec<usize> = (0..ex.mask.len()).filter(|&i| ex.mask[i] == 1).collect();
    Ok((probs, real))
}

/// Row `t` of an attention matrix, restricted to unpadded keys and
/// renormalized. Masked keys hold only the softmax floor mass, so this is a
/// rescaling, not a reweighting.
fn restricted_row(probs: &Tensor, t: usize, real: &[usize]) -> Vec<f64> {
    let s = probs.last_dim();
    let row = &probs.data()[t * s..(t + 1) * s];
    let kept: Vec<f64> = real.iter().map(|&k| row[k]).collect();
    let sum: f64 = kept.iter().sum();
    kept.into_iter().map(|p| p / sum).collect()
}

/// Entropy of every (non-pad token, layer, head) attention row, in nats.
/// Inference mode; deterministic.
pub fn collect_entropy(model: &Model, examples: &[Example]) -> Result<Vec<AnalysisRecord>> {
    let mut records = Vec::new();
    for (example_id, ex) in examples.iter().enumerate() {
        let (probs, real) = example_probs(model, ex)?;
        for &t in &real {
            for (layer, heads) in probs.iter().enumerate() {
                for (head, mat) in heads.iter().enumerate() {
                    let value = entropy(&restricted_row(mat, t, &real))?;
                    records.push(AnalysisRecord { example_id, token_index: t, layer, head, value });
                }
            }
        }
    }
    Ok(records)
}

/// JSD between head i at layer L and head i at layer L-1, per non-pad token
/// row. The record's `layer` is the upper layer L, 0-based, so L ranges over
/// 1..layers.
pub fn collect_jsd(model: &Model, examples: &[Example]) -> Result<Vec<AnalysisRecord>> {
    if model.cfg.layers < 2 {
        return Err(Error::Usage("adjacent-layer JSD needs at least two layers".into()));
    }
    let mut records = Vec::new();
    for (example_id, ex) in examples.iter().enumerate() {
        let (probs, real) = example_probs(model, ex)?;
        for &t in &real {
            for layer in 1..probs.len() {
                for head in 0..probs[layer].len() {
                    let upper = restricted_row(&probs[layer][head], t, &real);
                    let lower = restricted_row(&probs[layer - 1][head], t, &real);
                    let value = jsd(&upper, &lower)?;
                    records.push(AnalysisRecord { example_id, token_index: t, layer, head, value });
                }
            }
        }
    }
    Ok(records)
}

/// (q1, median, q3) of a sorted sample by linear interpolation.
pub fn quartiles(sorted: &[f64]) -> (f64, f64, f64) {
    assert!(!sorted.is_empty(), "quartiles of an empty sample");
    let at = |p: f64| -> f64 {
        let h = p * (sorted.len() - 1) as f64;
        let lo = h.floor() as usize;
        let frac = h - lo as f64;
        if lo + 1 < sorted.len() {
            sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
        } else {
            sorted[lo]
        }
    };
    (at(0.25), at(0.5), at(0.75))
}

/// Per-head distribution summary. `head` is the column index after the
/// within-layer sort by median, not the model's head index.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSummary {
    pub layer: usize,
    pub head: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub color: Color,
}

/// Group records by (layer, head), order heads within each layer ascending by
/// median (stable, so ties keep the model head order), and bucket by the
/// metric's thresholds.
pub fn summarize(records: &[AnalysisRecord], metric: Metric) -> Vec<HeadSummary> {
    let mut groups: std::collections::BTreeMap<(usize, usize), Vec<f64>> = std::collections::BTreeMap::new();
    for r in records {
        groups.entry((r.layer, r.head)).or_default().push(r.value);
    }
    let mut by_layer: std::collections::BTreeMap<usize, Vec<(f64, f64, f64)>> = std::collections::BTreeMap::new();
    for ((layer, _head), mut values) in groups {
        values.sort_by(f64::total_cmp);
        let (q1, median, q3) = quartiles(&values);
        by_layer.entry(layer).or_default().push((median, q1, q3));
    }
    let mut out = Vec::new();
    for (layer, mut stats) in by_layer {
        stats.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (column, (median, q1, q3)) in stats.into_iter().enumerate() {
            out.push(HeadSummary {
                layer,
                head: column,
                median,
                q1,
                q3,
                color: metric.color_for(median),
            });
        }
    }
    out
}

pub const RECORDS_HEADER: &str = "example_id,token_index,layer,head,value";
pub const SUMMARY_HEADER: &str = "layer,head,median,q1,q3,color";

pub fn export_records(path: &Path, records: &[AnalysisRecord]) -> Result<()> {
    let mut out = String::from(RECORDS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.example_id, r.token_index, r.layer, r.head, r.value
        ));
    }
    fs::write(path, out).map_err(Error::io(path))
}

pub fn parse_records(path: &Path) -> Result<Vec<AnalysisRecord>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RECORDS_HEADER => {}
        other => return Err(Error::Data(format!("bad records header {other:?}"))),
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Data(format!("line {}: expected 5 fields", lineno + 2)));
        }
        let bad = |what: &str| Error::Data(format!("line {}: bad {what}", lineno + 2));
        records.push(AnalysisRecord {
            example_id: fields[0].parse().map_err(|_| bad("example_id"))?,
            token_index: fields[1].parse().map_err(|_| bad("token_index"))?,
            layer: fields[2].parse().map_err(|_| bad("layer"))?,
            head: fields[3].parse().map_err(|_| bad("head"))?,
            value: fields[4].parse().map_err(|_| bad("value"))?,
        });
    }
    Ok(records)
}

pub fn export_summaries(path: &Path, summaries: &[HeadSummary]) -> Result<()> {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.layer,
            s.head,
            s.median,
            s.q1,
            s.q3,
            s.color.name()
        ));
    }
    fs::write(path, out).map_err(Error::io(path))
}

/// Provenance sidecar for a pair of analysis CSVs.
pub fn write_sidecar(path: &Path, checkpoint_sha256: &str, examples: usize, metric: Metric) -> Result<()> {
    let (blue_below, red_above) = metric.thresholds();
    let doc = serde_json::json!({
        "checkpoint_sha256": checkpoint_sha256,
        "examples": examples,
        "metric": metric.name(),
        "thresholds": { "blue_below": blue_below, "red_above": red_above },
        "note": "entropy thresholds assume 512-key rows; shorter desk-scale rows cap entropy at ln(keys), skewing buckets toward BLUE",
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text).map_err(Error::io(path))
}
