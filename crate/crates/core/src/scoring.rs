//! Binary human-robot cue alignment and its aggregates.
//!
//! A category scores 1 when the robot chose the same option ID as the human
//! ground truth and 0 otherwise; there is no partial credit. Aggregates are
//! per-category means and sample SDs, a grand mean over all bits, and an SD
//! over per-record means.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::GroundTruthPair;
use crate::taxonomy::{canonical_taxonomy, CueAssignment, CueCategory, InvalidAssignment};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoringError {
    #[error("{side} cues invalid: {source}")]
    InvalidAssignment {
        side: &'static str,
        #[source]
        source: InvalidAssignment,
    },
    #[error("pairs without a robot response: {}", .0.join(", "))]
    MissingRobotResponse(Vec<String>),
    #[error("no records to aggregate")]
    EmptyInput,
}

/// Per-category alignment bits, each 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AlignmentBits {
    pub speech: u8,
    pub action: u8,
    pub face: u8,
    pub emotion: u8,
}

impl AlignmentBits {
    pub fn get(&self, category: CueCategory) -> u8 {
        match category {
            CueCategory::Speech => self.speech,
            CueCategory::Action => self.action,
            CueCategory::Face => self.face,
            CueCategory::Emotion => self.emotion,
        }
    }

    pub fn as_array(&self) -> [u8; 4] {
        [self.speech, self.action, self.face, self.emotion]
    }

    pub fn matches(&self) -> u32 {
        self.as_array().iter().map(|&b| u32::from(b)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub pair_id: String,
    #[serde(flatten)]
    pub bits: AlignmentBits,
}

impl AlignmentRecord {
    /// Mean of this record's four bits.
    pub fn mean(&self) -> f64 {
        f64::from(self.bits.matches()) / 4.0
    }
}

pub fn score_pair(robot: &CueAssignment, human: &CueAssignment) -> Result<AlignmentBits, ScoringError> {
    robot.validate().map_err(|source| ScoringError::InvalidAssignment { side: "robot", source })?;
    human.validate().map_err(|source| ScoringError::InvalidAssignment { side: "human", source })?;
    let bit = |c: CueCategory| u8::from(robot.get(c) == human.get(c));
    Ok(AlignmentBits {
        speech: bit(CueCategory::Speech),
        action: bit(CueCategory::Action),
        face: bit(CueCategory::Face),
        emotion: bit(CueCategory::Emotion),
    })
}

/// One record per pair, in input order. Every pair must carry a robot
/// response; all offending ids are reported together.
pub fn build_records(pairs: &[GroundTruthPair]) -> Result<Vec<AlignmentRecord>, ScoringError> {
    let missing: Vec<String> = pairs.iter().filter(|p| p.robot.is_none()).map(|p| p.id.clone()).collect();
    if !missing.is_empty() {
        return Err(ScoringError::MissingRobotResponse(missing));
    }
    pairs
        .iter()
        .map(|p| {
            let robot = p.robot.as_ref().expect("checked above");
            Ok(AlignmentRecord { pair_id: p.id.clone(), bits: score_pair(&robot.cues, &p.human.cues)? })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub category: CueCategory,
    pub mean: f64,
    pub sd: f64,
    pub accuracy_percent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalStats {
    /// Grand mean over all 4n bits.
    pub mean: f64,
    /// Sample SD of the per-record means.
    pub sd: f64,
    pub accuracy_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub n: usize,
    /// Speech, Action, Face, Emotion.
    pub categories: Vec<CategoryStats>,
    pub total: TotalStats,
}

impl AlignmentReport {
    pub fn category(&self, category: CueCategory) -> &CategoryStats {
        &self.categories[category as usize]
    }
}

/// Sample standard deviation (n - 1 denominator); 0 for a single value.
pub fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (n - 1) as f64).sqrt()
}

pub fn aggregate(records: &[AlignmentRecord]) -> Result<AlignmentReport, ScoringError> {
    if records.is_empty() {
        return Err(ScoringError::EmptyInput);
    }
    let n = records.len();
    let categories = CueCategory::ALL
        .into_iter()
        .map(|category| {
            let bits: Vec<f64> = records.iter().map(|r| f64::from(r.bits.get(category))).collect();
            let ones: u32 = records.iter().map(|r| u32::from(r.bits.get(category))).sum();
            let mean = f64::from(ones) / n as f64;
            CategoryStats { category, mean, sd: sample_sd(&bits), accuracy_percent: 100.0 * mean }
        })
        .collect();
    let total_ones: u32 = records.iter().map(|r| r.bits.matches()).sum();
    let mean = f64::from(total_ones) / (4 * n) as f64;
    let per_record: Vec<f64> = records.iter().map(AlignmentRecord::mean).collect();
    let total = TotalStats { mean, sd: sample_sd(&per_record), accuracy_percent: 100.0 * mean };
    Ok(AlignmentReport { n, categories, total })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Human,
    Robot,
}

impl Source {
    pub fn key(self) -> &'static str {
        match self {
            Source::Human => "human",
            Source::Robot => "robot",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        match key.trim().to_ascii_lowercase().as_str() {
            "human" => Some(Source::Human),
            "robot" => Some(Source::Robot),
            _ => None,
        }
    }
}

/// Histogram of chosen options for one category. Every option ID appears
/// as a key, with zero counts included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyDistribution {
    pub category: CueCategory,
    pub source: Source,
    pub total: usize,
    pub counts: BTreeMap<u32, usize>,
    pub proportions: BTreeMap<u32, f64>,
}

impl FrequencyDistribution {
    pub fn count(&self, id: u32) -> usize {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    pub fn proportion(&self, id: u32) -> f64 {
        self.proportions.get(&id).copied().unwrap_or(0.0)
    }

    /// Most frequent option; ties go to the lower ID.
    pub fn mode(&self) -> u32 {
        let mut best = (0usize, 1u32);
        for (&id, &count) in &self.counts {
            if count > best.0 {
                best = (count, id);
            }
        }
        best.1
    }
}

/// Four distributions in SAFE order.
pub fn frequency(assignments: &[CueAssignment], source: Source) -> Result<Vec<FrequencyDistribution>, ScoringError> {
    if assignments.is_empty() {
        return Err(ScoringError::EmptyInput);
    }
    let n = assignments.len();
    let taxonomy = canonical_taxonomy();
    Ok(CueCategory::ALL
        .into_iter()
        .map(|category| {
            let mut counts: BTreeMap<u32, usize> = taxonomy.options(category).map(|o| (o.id, 0)).collect();
            for a in assignments {
                if let Some(c) = counts.get_mut(&a.get(category)) {
                    *c += 1;
                }
            }
            let proportions = counts.iter().map(|(&id, &c)| (id, c as f64 / n as f64)).collect();
            FrequencyDistribution { category, source, total: n, counts, proportions }
        })
        .collect())
}

/// Assignments of one side of a dataset. Pairs without a robot response
/// contribute nothing to the robot side.
pub fn side_assignments(pairs: &[GroundTruthPair], source: Source) -> Vec<CueAssignment> {
    pairs
        .iter()
        .filter_map(|p| match source {
            Source::Human => Some(p.human.cues),
            Source::Robot => p.robot.as_ref().map(|r| r.cues),
        })
        .collect()
}
