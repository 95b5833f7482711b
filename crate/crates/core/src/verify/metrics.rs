use serde::{Deserialize, Serialize};

use crate::region::{QaStatus, Region};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqaFractions {
    pub correct: f64,
    pub wrong_answer: f64,
    pub unanswerable: f64,
    pub wrong_semantic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationMetrics {
    /// Verified regions whose top shown candidate was confirmed.
    pub top1_accuracy: Option<f64>,
    /// Confirmed share of all shown candidates.
    pub tag_accuracy: Option<f64>,
    pub vqa: Option<VqaFractions>,
    pub tag_filter_count: usize,
    pub vqa_count: usize,
}

/// Metrics, or an explicit marker when nothing has been verified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricsReport {
    Empty { empty: bool },
    Ready(VerificationMetrics),
}

impl MetricsReport {
    pub fn metrics(&self) -> Option<&VerificationMetrics> {
        match self {
            MetricsReport::Ready(m) => Some(m),
            MetricsReport::Empty { .. } => None,
        }
    }
}

pub fn verification_metrics<'a>(regions: impl IntoIterator<Item = &'a Region>) -> MetricsReport {
    let (mut filters, mut top1, mut shown, mut confirmed) = (0usize, 0usize, 0usize, 0usize);
    let mut outcomes = [0usize; 4];
    for r in regions {
        let v = &r.verification;
        if v.is_verified() && !v.shown.is_empty() {
            filters += 1;
            top1 += usize::from(v.confirmed.contains(&v.shown[0]));
            shown += v.shown.len();
            confirmed += v.confirmed.len();
        }
        for qa in &r.qa_pairs {
            match qa.status {
                QaStatus::Unverified => {}
                QaStatus::Correct => outcomes[0] += 1,
                QaStatus::WrongAnswer | QaStatus::HumanCorrected => outcomes[1] += 1,
                QaStatus::Unanswerable => outcomes[2] += 1,
                QaStatus::WrongSemantic => outcomes[3] += 1,
            }
        }
    }
    let vqa_count: usize = outcomes.iter().sum();
    if filters == 0 && vqa_count == 0 {
        return MetricsReport::Empty { empty: true };
    }
    let frac = |n: usize, d: usize| (d > 0).then(|| n as f64 / d as f64);
    MetricsReport::Ready(VerificationMetrics {
        top1_accuracy: frac(top1, filters),
        tag_accuracy: frac(confirmed, shown),
        vqa: (vqa_count > 0).then(|| VqaFractions {
            correct: outcomes[0] as f64 / vqa_count as f64,
            wrong_answer: outcomes[1] as f64 / vqa_count as f64,
            unanswerable: outcomes[2] as f64 / vqa_count as f64,
            wrong_semantic: outcomes[3] as f64 / vqa_count as f64,
        }),
        tag_filter_count: filters,
        vqa_count,
    })
}
