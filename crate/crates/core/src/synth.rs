//! Synthetic corpora with controllable information density.
//!
//! Sequences are piecewise constant over segments plus Gaussian noise.
//! Segment values come from a finite palette; the palette index of each
//! segment doubles as its condition token, so the same token shows up
//! with different segment lengths across sequences. Ground-truth
//! boundaries are kept for adaptivity checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SegmentLengths {
    /// Independent uniform draw per segment.
    Uniform { min: usize, max: usize },
    /// Independent truncated-geometric draw per segment.
    Geometric { p: f64, min: usize, max: usize },
    /// Draw the total length first, then split it into the drawn number
    /// of segments. Keeps total length independent of segment count,
    /// which is what makes fixed-rate code counts uninformative.
    TotalSplit {
        total_min: usize,
        total_max: usize,
        min_len: usize,
    },
    /// Deterministic function of the segment's token id.
    PerToken { min: usize, max: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_sequences: usize,
    /// Frame dimension d.
    pub dim: usize,
    pub segments_min: usize,
    pub segments_max: usize,
    pub lengths: SegmentLengths,
    /// Number of distinct segment values (= condition vocabulary).
    pub palette_size: usize,
    /// Palette entries are drawn uniformly from [-value_scale, value_scale].
    pub value_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// Desk-scale default corpus.
    fn default() -> Self {
        SyntheticSpec {
            num_sequences: 500,
            dim: 8,
            segments_min: 1,
            segments_max: 8,
            lengths: SegmentLengths::TotalSplit {
                total_min: 32,
                total_max: 128,
                min_len: 2,
            },
            palette_size: 48,
            value_scale: 1.0,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Deterministic condition→frames grammar: noise-free, with every
    /// token owning a fixed segment value and a fixed segment length.
    pub fn toy_grammar(seed: u64) -> Self {
        SyntheticSpec {
            num_sequences: 700,
            dim: 8,
            segments_min: 2,
            segments_max: 5,
            lengths: SegmentLengths::PerToken { min: 6, max: 16 },
            palette_size: 12,
            value_scale: 1.0,
            noise_sigma: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_sequences == 0 || self.dim == 0 || self.palette_size == 0 {
            return Err(Error::Config("counts and dims must be positive".into()));
        }
        if self.segments_min == 0 || self.segments_min > self.segments_max {
            return Err(Error::Config("need 1 <= segments_min <= segments_max".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        match self.lengths {
            SegmentLengths::Uniform { min, max } | SegmentLengths::PerToken { min, max } => {
                if min == 0 || min > max {
                    return Err(Error::Config("need 1 <= min <= max segment length".into()));
                }
            }
            SegmentLengths::Geometric { p, min, max } => {
                if min == 0 || min > max || p <= 0.0 || p >= 1.0 {
                    return Err(Error::Config("bad geometric length parameters".into()));
                }
            }
            SegmentLengths::TotalSplit {
                total_min,
                total_max,
                min_len,
            } => {
                if min_len == 0 || total_min > total_max {
                    return Err(Error::Config("bad total-split parameters".into()));
                }
                if total_min < self.segments_max * min_len {
                    return Err(Error::Config(format!(
                        "total_min {} cannot fit {} segments of at least {}",
                        total_min, self.segments_max, min_len
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One generated sequence with its ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticItem<S: Scalar> {
    /// Palette index of each segment, in order.
    pub tokens: Vec<usize>,
    /// `[T × d]` frames.
    pub frames: Tensor<S>,
    /// Start frame of each segment; first entry is 0.
    pub boundaries: Vec<usize>,
    pub segment_lengths: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset<S: Scalar> {
    pub spec: SyntheticSpec,
    /// `[palette_size × d]` segment values.
    pub palette: Tensor<S>,
    pub items: Vec<SyntheticItem<S>>,
}

/// Deterministic per-token length for the `PerToken` mode.
pub fn token_length(token: usize, min: usize, max: usize) -> usize {
    min + (token * 7 + 3) % (max - min + 1)
}

/// Generate a dataset. Every sequence draws from its own counter-derived
/// RNG stream, so generation order (or parallel generation) cannot
/// change the result.
pub fn gen_synthetic<S: Scalar>(spec: &SyntheticSpec) -> Result<SyntheticDataset<S>> {
    spec.validate()?;
    let mut master = ChaCha20Rng::seed_from_u64(spec.seed);
    master.set_stream(0);
    let palette_data: Vec<S> = (0..spec.palette_size * spec.dim)
        .map(|_| S::from_f64((master.gen::<f64>() * 2.0 - 1.0) * spec.value_scale))
        .collect();
    let palette = Tensor::new(vec![spec.palette_size, spec.dim], palette_data)?;

    let mut items = Vec::with_capacity(spec.num_sequences);
    for i in 0..spec.num_sequences {
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);
        items.push(gen_item(spec, &palette, &mut rng)?);
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        palette,
        items,
    })
}

fn gen_item<S: Scalar>(
    spec: &SyntheticSpec,
    palette: &Tensor<S>,
    rng: &mut ChaCha20Rng,
) -> Result<SyntheticItem<S>> {
    let g = rng.gen_range(spec.segments_min..=spec.segments_max);
    let tokens: Vec<usize> = (0..g).map(|_| rng.gen_range(0..spec.palette_size)).collect();
    let segment_lengths = draw_lengths(spec, &tokens, g, rng);

    let t_total: usize = segment_lengths.iter().sum();
    let mut frames = Tensor::zeros(vec![t_total, spec.dim]);
    let mut boundaries = Vec::with_capacity(g);
    let mut pos = 0;
    for (seg, (&token, &len)) in tokens.iter().zip(&segment_lengths).enumerate() {
        let _ = seg;
        boundaries.push(pos);
        for _ in 0..len {
            let row = frames.row_mut(pos);
            for (slot, &v) in row.iter_mut().zip(palette.row(token)) {
                let noise = if spec.noise_sigma > 0.0 {
                    gaussian(rng) * spec.noise_sigma
                } else {
                    0.0
                };
                *slot = v + S::from_f64(noise);
            }
            pos += 1;
        }
    }
    Ok(SyntheticItem {
        tokens,
        frames,
        boundaries,
        segment_lengths,
    })
}

fn draw_lengths(
    spec: &SyntheticSpec,
    tokens: &[usize],
    g: usize,
    rng: &mut ChaCha20Rng,
) -> Vec<usize> {
    match spec.lengths {
        SegmentLengths::Uniform { min, max } => {
            (0..g).map(|_| rng.gen_range(min..=max)).collect()
        }
        SegmentLengths::Geometric { p, min, max } => (0..g)
            .map(|_| {
                let mut len = min;
                while len < max && rng.gen::<f64>() >= p {
                    len += 1;
                }
                len
            })
            .collect(),
        SegmentLengths::TotalSplit {
            total_min,
            total_max,
            min_len,
        } => {
            let total = rng.gen_range(total_min..=total_max);
            split_total(total, g, min_len, rng)
        }
        SegmentLengths::PerToken { min, max } => tokens
            .iter()
            .map(|&tok| token_length(tok, min, max))
            .collect(),
    }
}

/// Random composition of `total` into `g` parts, each at least `min_len`.
fn split_total(total: usize, g: usize, min_len: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    debug_assert!(total >= g * min_len);
    let extra = total - g * min_len;
    let weights: Vec<f64> = (0..g).map(|_| rng.gen::<f64>() + 1e-9).collect();
    let wsum: f64 = weights.iter().sum();
    let mut parts: Vec<usize> = weights
        .iter()
        .map(|w| (w / wsum * extra as f64).floor() as usize)
        .collect();
    let mut assigned: usize = parts.iter().sum();
    let mut i = 0;
    while assigned < extra {
        parts[i % g] += 1;
        assigned += 1;
        i += 1;
    }
    parts.iter().map(|&p| p + min_len).collect()
}

fn gaussian(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// ── Dataset statistics ───────────────────────────────────────────────

/// Histogram report over ground-truth segment lengths: overall and per
/// condition token.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StatsReport {
    /// (length, count), ascending by length.
    pub overall: Vec<(usize, usize)>,
    /// token → (length, count) histogram, ascending by token.
    pub per_token: Vec<(usize, Vec<(usize, usize)>)>,
    pub total_segments: usize,
}

pub fn stats<S: Scalar>(dataset: &SyntheticDataset<S>) -> Result<StatsReport> {
    if dataset.items.is_empty() {
        return Err(Error::EmptyInput("no sequences to analyze"));
    }
    let mut overall = std::collections::BTreeMap::new();
    let mut per_token: std::collections::BTreeMap<usize, std::collections::BTreeMap<usize, usize>> =
        std::collections::BTreeMap::new();
    let mut total = 0usize;
    for item in &dataset.items {
        for (&token, &len) in item.tokens.iter().zip(&item.segment_lengths) {
            *overall.entry(len).or_insert(0) += 1;
            *per_token.entry(token).or_default().entry(len).or_insert(0) += 1;
            total += 1;
        }
    }
    Ok(StatsReport {
        overall: overall.into_iter().collect(),
        per_token: per_token
            .into_iter()
            .map(|(t, m)| (t, m.into_iter().collect()))
            .collect(),
        total_segments: total,
    })
}

impl StatsReport {
    /// CSV with a header row; `token` is empty for the overall histogram.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,token,length,count\n");
        for &(len, count) in &self.overall {
            out.push_str(&format!("overall,,{len},{count}\n"));
        }
        for (token, hist) in &self.per_token {
            for &(len, count) in hist {
                out.push_str(&format!("token,{token},{len},{count}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_free_single_segment_is_constant() {
        let spec = SyntheticSpec {
            num_sequences: 3,
            segments_min: 1,
            segments_max: 1,
            noise_sigma: 0.0,
            lengths: SegmentLengths::Uniform { min: 5, max: 9 },
            ..Default::default()
        };
        let ds = gen_synthetic::<f64>(&spec).unwrap();
        for item in &ds.items {
            let first = item.frames.row(0).to_vec();
            for i in 0..item.frames.rows() {
                assert_eq!(item.frames.row(i), &first[..]);
            }
            assert_eq!(item.tokens.len(), 1);
            assert_eq!(item.boundaries, vec![0]);
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let spec = SyntheticSpec {
            num_sequences: 10,
            ..Default::default()
        };
        let a = gen_synthetic::<f32>(&spec).unwrap();
        let b = gen_synthetic::<f32>(&spec).unwrap();
        assert_eq!(a.palette, b.palette);
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.tokens, y.tokens);
            assert_eq!(x.frames, y.frames);
        }
    }

    #[test]
    fn boundary_count_matches_drawn_segment_count() {
        let spec = SyntheticSpec {
            num_sequences: 1000,
            ..Default::default()
        };
        let ds = gen_synthetic::<f32>(&spec).unwrap();
        assert_eq!(ds.items.len(), 1000);
        for item in &ds.items {
            assert_eq!(item.boundaries.len(), item.tokens.len());
            assert_eq!(item.segment_lengths.len(), item.tokens.len());
            assert_eq!(
                item.segment_lengths.iter().sum::<usize>(),
                item.frames.rows()
            );
            assert!(item.tokens.len() >= spec.segments_min);
            assert!(item.tokens.len() <= spec.segments_max);
            // boundaries are the running starts of the segments
            let mut pos = 0;
            for (b, l) in item.boundaries.iter().zip(&item.segment_lengths) {
                assert_eq!(*b, pos);
                pos += l;
            }
        }
    }

    #[test]
    fn total_split_respects_bounds() {
        let spec = SyntheticSpec::default();
        let ds = gen_synthetic::<f32>(&spec).unwrap();
        for item in &ds.items {
            let t = item.frames.rows();
            assert!((32..=128).contains(&t), "t = {t}");
            assert!(item.segment_lengths.iter().all(|&l| l >= 2));
        }
    }

    #[test]
    fn grammar_lengths_are_token_deterministic() {
        let spec = SyntheticSpec::toy_grammar(9);
        let ds = gen_synthetic::<f32>(&spec).unwrap();
        for item in &ds.items {
            for (&tok, &len) in item.tokens.iter().zip(&item.segment_lengths) {
                assert_eq!(len, token_length(tok, 6, 16));
            }
        }
    }

    #[test]
    fn stats_histograms_count_correctly() {
        // hand-built dataset: one sequence with segment lengths [3, 5]
        let spec = SyntheticSpec {
            num_sequences: 1,
            dim: 2,
            palette_size: 4,
            ..Default::default()
        };
        let palette = Tensor::<f64>::zeros(vec![4, 2]);
        let ds = SyntheticDataset {
            spec,
            palette,
            items: vec![SyntheticItem {
                tokens: vec![1, 2],
                frames: Tensor::zeros(vec![8, 2]),
                boundaries: vec![0, 3],
                segment_lengths: vec![3, 5],
            }],
        };
        let report = stats(&ds).unwrap();
        assert_eq!(report.overall, vec![(3, 1), (5, 1)]);
        assert_eq!(report.total_segments, 2);
        assert_eq!(report.per_token.len(), 2);

        let csv = report.to_csv();
        assert!(csv.starts_with("kind,token,length,count\n"));
        assert!(csv.contains("overall,,3,1"));
        assert!(csv.contains("token,2,5,1"));
    }

    #[test]
    fn per_token_histogram_is_point_mass_for_fixed_lengths() {
        let spec = SyntheticSpec::toy_grammar(3);
        let ds = gen_synthetic::<f32>(&spec).unwrap();
        let report = stats(&ds).unwrap();
        for (token, hist) in &report.per_token {
            assert_eq!(hist.len(), 1, "token {token} has spread lengths");
            assert_eq!(hist[0].0, token_length(*token, 6, 16));
        }
        let total: usize = report.overall.iter().map(|&(_, c)| c).sum();
        assert_eq!(total, report.total_segments);
    }
}
