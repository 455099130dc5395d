//! Joint-contribution heatmaps from the final feature map, 0–100 score
//! rescaling and per-window progress summaries.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{Category, Date};
use crate::error::{Error, Result};
use crate::math;
use crate::skeleton::JointLayout;
use crate::tensor::NdArray;

pub const DEFAULT_TOP_K: usize = 5;

/// Linear map of a 0–50 total onto 0–100.
pub fn rescale_score(raw: f64) -> f64 {
    (raw * 2.0).clamp(0.0, 100.0)
}

/// Per-frame joint shares of feature energy for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// `T' × V`, each row summing to 1.
    pub contributions: Vec<Vec<f64>>,
    /// Highest-contribution joints per frame, strongest first.
    pub top_joints: Vec<Vec<usize>>,
    /// Frames with no feature energy, reported as uniform rows.
    pub degenerate_frames: Vec<usize>,
}

/// Channel-wise L2 norm at every `(t, v)` of sample `item` in an
/// `N × C × T' × V` feature map, normalized per frame.
pub fn extract_contributions(features: &NdArray, item: usize, top_k: usize) -> Result<Heatmap> {
    let s = features.shape();
    if s.len() != 4 || item >= s[0] || s[3] == 0 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!("feature map must be N × C × T × V with sample {item} present"),
        });
    }
    let (c, t, v) = (s[1], s[2], s[3]);
    let base = item * c * t * v;
    let d = features.data();
    let mut contributions = Vec::with_capacity(t);
    let mut top_joints = Vec::with_capacity(t);
    let mut degenerate_frames = Vec::new();
    for tt in 0..t {
        let mut row: Vec<f64> = (0..v)
            .map(|j| {
                let sq: f64 = (0..c)
                    .map(|ch| {
                        let x = d[base + (ch * t + tt) * v + j];
                        x * x
                    })
                    .sum();
                math::sqrt(sq)
            })
            .collect();
        let total: f64 = row.iter().sum();
        if total > 0.0 && total.is_finite() {
            row.iter_mut().for_each(|x| *x /= total);
        } else {
            degenerate_frames.push(tt);
            row.iter_mut().for_each(|x| *x = 1.0 / v as f64);
        }
        let mut order: Vec<usize> = (0..v).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        order.truncate(top_k.min(v));
        top_joints.push(order);
        contributions.push(row);
    }
    Ok(Heatmap {
        contributions,
        top_joints,
        degenerate_frames,
    })
}

/// Mean of the two endpoint contributions for every edge, per frame.
pub fn edge_contributions(heatmap: &Heatmap, edges: &[(usize, usize)]) -> Vec<Vec<f64>> {
    heatmap
        .contributions
        .iter()
        .map(|row| edges.iter().map(|&(a, b)| 0.5 * (row[a] + row[b])).collect())
        .collect()
}

pub const REPORT_VERSION: u32 = 1;

/// User-facing assessment of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapReport {
    pub format: String,
    pub version: u32,
    pub sample_id: String,
    pub raw_score: f64,
    pub score: f64,
    pub joints: Vec<String>,
    pub edges: Vec<(usize, usize)>,
    pub heatmap: Heatmap,
    /// `T' × E`
    pub edge_contributions: Vec<Vec<f64>>,
    pub periods: Option<PeriodSummary>,
}

impl HeatmapReport {
    pub const FORMAT: &'static str = "rastg-report";

    pub fn new(sample_id: impl Into<String>, raw_score: f64, heatmap: Heatmap, layout: &JointLayout) -> Self {
        let edge_contributions = edge_contributions(&heatmap, &layout.edges);
        Self {
            format: Self::FORMAT.into(),
            version: REPORT_VERSION,
            sample_id: sample_id.into(),
            raw_score,
            score: rescale_score(raw_score),
            joints: layout.joints.clone(),
            edges: layout.edges.clone(),
            heatmap,
            edge_contributions,
            periods: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "days", rename_all = "lowercase")]
pub enum WindowSpec {
    /// Calendar months.
    Month,
    /// Consecutive spans of this many days, starting at the earliest session.
    Days(u32),
}

/// A scored session on the 0–100 scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub date: Date,
    pub category: Category,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStat {
    pub mean: f64,
    pub count: usize,
    pub min: f64,
    pub max: f64,
}

impl WindowStat {
    fn of(scores: &[f64]) -> Option<Self> {
        if scores.is_empty() {
            return None;
        }
        let count = scores.len();
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // rounding can push the mean a hair outside [min, max]
        let mean = (scores.iter().sum::<f64>() / count as f64).clamp(min, max);
        Some(Self { mean, count, min, max })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    /// First day of the window.
    pub start: Date,
    /// First day after the window.
    pub end: Date,
    pub overall: WindowStat,
    /// Only categories with at least one session.
    pub categories: BTreeMap<Category, WindowStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodSummary {
    pub window: WindowSpec,
    pub windows: Vec<WindowSummary>,
}

fn window_of(spec: WindowSpec, origin: Date, d: Date) -> (Date, Date) {
    match spec {
        WindowSpec::Month => {
            let start = Date {
                year: d.year,
                month: d.month,
                day: 1,
            };
            let end = if d.month == 12 {
                Date {
                    year: d.year + 1,
                    month: 1,
                    day: 1,
                }
            } else {
                Date {
                    year: d.year,
                    month: d.month + 1,
                    day: 1,
                }
            };
            (start, end)
        }
        WindowSpec::Days(n) => {
            let n = i64::from(n.max(1));
            let k = (d.ordinal() - origin.ordinal()).div_euclid(n);
            let start = origin.add_days(k * n);
            (start, start.add_days(n))
        }
    }
}

/// Mean score per window, overall and per category; windows ascending,
/// windows without sessions omitted.
pub fn period_summary(samples: &[ScoredSample], window: WindowSpec) -> PeriodSummary {
    let origin = samples.iter().map(|s| s.date).min();
    let mut buckets: BTreeMap<Date, (Date, Vec<&ScoredSample>)> = BTreeMap::new();
    if let Some(origin) = origin {
        for s in samples {
            let (start, end) = window_of(window, origin, s.date);
            buckets.entry(start).or_insert_with(|| (end, Vec::new())).1.push(s);
        }
    }
    let windows = buckets
        .into_iter()
        .filter_map(|(start, (end, members))| {
            let all: Vec<f64> = members.iter().map(|s| s.score).collect();
            let overall = WindowStat::of(&all)?;
            let categories = Category::ALL
                .iter()
                .filter_map(|&c| {
                    let xs: Vec<f64> = members.iter().filter(|s| s.category == c).map(|s| s.score).collect();
                    WindowStat::of(&xs).map(|st| (c, st))
                })
                .collect();
            Some(WindowSummary {
                start,
                end,
                overall,
                categories,
            })
        })
        .collect();
    PeriodSummary { window, windows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn concentrated_and_uniform_energy() {
        let mut fm = NdArray::zeros(&[1, 3, 2, 4]);
        fm.set(&[0, 1, 0, 2], 5.0);
        let uniform = NdArray::full(&[1, 3, 1, 4], 0.7);
        let h = extract_contributions(&fm, 0, 5).unwrap();
        assert_eq!(h.contributions[0], vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(h.top_joints[0][0], 2);
        assert_eq!(h.top_joints[0].len(), 4);
        assert_eq!(h.degenerate_frames, vec![1]);
        assert!(h.contributions[1].iter().all(|x| *x == 0.25));
        let u = extract_contributions(&uniform, 0, 2).unwrap();
        for x in &u.contributions[0] {
            assert!((x - 0.25).abs() < 1e-15);
        }
        assert!(extract_contributions(&uniform, 1, 2).is_err());
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale_score(25.0), 50.0);
        assert_eq!(rescale_score(-3.0), 0.0);
        assert_eq!(rescale_score(51.0), 100.0);
    }

    fn at(y: u16, m: u8, d: u8, score: f64, c: Category) -> ScoredSample {
        ScoredSample {
            date: Date::new(y, m, d).unwrap(),
            category: c,
            score,
        }
    }

    #[test]
    fn period_examples() {
        let one = period_summary(&[at(2024, 3, 5, 70.0, Category::Uni)], WindowSpec::Month);
        assert_eq!(one.windows.len(), 1);
        assert_eq!(one.windows[0].overall.mean, 70.0);

        let two = period_summary(
            &[
                at(2024, 3, 5, 40.0, Category::Uni),
                at(2024, 3, 28, 60.0, Category::Bis),
            ],
            WindowSpec::Month,
        );
        assert_eq!(two.windows[0].overall.mean, 50.0);
        assert_eq!(two.windows[0].categories.len(), 2);
        assert!(!two.windows[0].categories.contains_key(&Category::Bia));

        let months: Vec<ScoredSample> = (0..4u8)
            .flat_map(|m| {
                [
                    at(2024, 3 + m, 2, 50.0 + m as f64, Category::Bia),
                    at(2024, 3 + m, 20, 60.0, Category::Uni),
                ]
            })
            .collect();
        let s = period_summary(&months, WindowSpec::Month);
        assert_eq!(s.windows.len(), 4);
        assert!(s.windows.windows(2).all(|w| w[0].start < w[1].start));

        // a gap month is absent, not zero
        let gap = period_summary(
            &[at(2024, 1, 1, 10.0, Category::Uni), at(2024, 3, 1, 30.0, Category::Uni)],
            WindowSpec::Month,
        );
        assert_eq!(gap.windows.len(), 2);

        let weekly = period_summary(&months, WindowSpec::Days(7));
        assert!(weekly.windows.len() >= 4);
        assert!(period_summary(&[], WindowSpec::Month).windows.is_empty());
    }
}
