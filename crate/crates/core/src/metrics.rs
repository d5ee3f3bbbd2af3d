//! Attention-balance measures over modality spans.

use serde::{Deserialize, Serialize};

use crate::decoder::{AttentionProfile, ModalitySpans};
use crate::error::{MoirError, Result};

/// Guards the dominance-index ratio against a zero denominator.
pub const MDI_EPSILON: f64 = 1e-12;

/// Attention mass and per-token attention of each modality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModalityAttention {
    pub mass_a: f64,
    pub mass_b: f64,
    pub per_token_a: f64,
    pub per_token_b: f64,
}

/// Head-averaged attention mass falling in each span, and that mass divided
/// by the span length.
pub fn attention_per_modality(
    profile: &AttentionProfile,
    spans: &ModalitySpans,
) -> Result<ModalityAttention> {
    if spans.total() != profile.len {
        return Err(MoirError::input(format!(
            "spans cover {} positions, profile has {}",
            spans.total(),
            profile.len
        )));
    }
    let heads = profile.heads as f64;
    let mass = |r: &std::ops::Range<usize>| {
        (0..profile.heads)
            .map(|h| profile.head(h)[r.clone()].iter().sum::<f64>())
            .sum::<f64>()
            / heads
    };
    let mass_a = mass(&spans.span_a);
    let mass_b = mass(&spans.span_b);
    Ok(ModalityAttention {
        mass_a,
        mass_b,
        per_token_a: mass_a / spans.span_a.len() as f64,
        per_token_b: mass_b / spans.span_b.len() as f64,
    })
}

/// Modality dominance index: `100 * ref / (other + eps)`. 100 marks equal
/// per-token attention; larger values mean the reference modality dominates.
pub fn mdi(per_token_ref: f64, per_token_other: f64) -> f64 {
    100.0 * per_token_ref / (per_token_other + MDI_EPSILON)
}

/// Attention efficiency index: total-variation distance, in percent, between
/// the attention share and the token-count share of each modality. Zero means
/// attention is exactly proportional to token counts.
pub fn aei(mass_by_modality: &[f64], token_share_by_modality: &[f64]) -> Result<f64> {
    if mass_by_modality.len() != token_share_by_modality.len() || mass_by_modality.is_empty() {
        return Err(MoirError::input("share vectors must be nonempty and equally long"));
    }
    for (name, v) in [("attention", mass_by_modality), ("token", token_share_by_modality)] {
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(MoirError::input(format!("{name} shares must be nonnegative")));
        }
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-8 {
            return Err(MoirError::input(format!("{name} shares sum to {s}, not 1")));
        }
    }
    let tv: f64 = mass_by_modality
        .iter()
        .zip(token_share_by_modality)
        .map(|(p, q)| (p - q).abs())
        .sum::<f64>()
        / 2.0;
    Ok((100.0 * tv).clamp(0.0, 100.0))
}

/// MDI (text side as reference) and AEI for a single attention profile.
pub fn balance_indices(profile: &AttentionProfile, spans: &ModalitySpans) -> Result<(f64, f64)> {
    let m = attention_per_modality(profile, spans)?;
    let total = spans.total() as f64;
    let token_share = [spans.span_a.len() as f64 / total, spans.span_b.len() as f64 / total];
    // Renormalise away rounding so the shares pass the sum check.
    let mass_total = m.mass_a + m.mass_b;
    let mass_share = [m.mass_a / mass_total, m.mass_b / mass_total];
    Ok((mdi(m.per_token_b, m.per_token_a), aei(&mass_share, &token_share)?))
}

/// Table-style summary of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub rank_delta_a: f64,
    pub rank_delta_b: f64,
    pub mdi: f64,
    pub aei: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unchanged_rate: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(weights: Vec<f64>, heads: usize) -> AttentionProfile {
        let len = weights.len() / heads;
        AttentionProfile { heads, len, weights }
    }

    #[test]
    fn uniform_attention_balances_per_token() {
        let p = profile(vec![0.25; 4], 1);
        let m = attention_per_modality(&p, &ModalitySpans::new(2, 2)).unwrap();
        assert_eq!(m.per_token_a, m.per_token_b);
        assert!((m.mass_a + m.mass_b - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn all_attention_on_a() {
        let p = profile(vec![0.6, 0.4, 0.0, 0.0, 0.0], 1);
        let m = attention_per_modality(&p, &ModalitySpans::new(2, 3)).unwrap();
        assert_eq!(m.mass_a, 1.0);
        assert_eq!(m.per_token_b, 0.0);
    }

    #[test]
    fn per_modality_arithmetic() {
        let p = profile(vec![0.5, 0.25, 0.25], 1);
        let m = attention_per_modality(&p, &ModalitySpans::new(1, 2)).unwrap();
        assert_eq!(m.mass_a, 0.5);
        assert_eq!(m.per_token_a, 0.5);
        assert_eq!(m.per_token_b, 0.25);
    }

    #[test]
    fn heads_are_averaged() {
        let p = profile(vec![1.0, 0.0, 0.0, 1.0], 2);
        let m = attention_per_modality(&p, &ModalitySpans::new(1, 1)).unwrap();
        assert_eq!((m.mass_a, m.mass_b), (0.5, 0.5));
    }

    #[test]
    fn span_length_must_match() {
        let p = profile(vec![0.5, 0.5], 1);
        assert!(attention_per_modality(&p, &ModalitySpans::new(2, 1)).is_err());
    }

    #[test]
    fn mdi_examples() {
        assert_eq!(mdi(0.3, 0.3), 100.0 * 0.3 / (0.3 + MDI_EPSILON));
        assert!((mdi(0.3, 0.3) - 100.0).abs() < 1e-9);
        assert!((mdi(0.2, 0.1) - 200.0).abs() < 1e-8);
        let guarded = mdi(0.2, 0.0);
        assert!(guarded.is_finite());
        assert!((guarded - 0.2 / 1e-12 * 100.0).abs() / guarded < 1e-12);
    }

    #[test]
    fn aei_examples() {
        assert_eq!(aei(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(aei(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 50.0);
        assert!((aei(&[0.7, 0.3], &[0.6, 0.4]).unwrap() - 10.0).abs() < 1e-12);
        assert!(matches!(aei(&[0.7, 0.2], &[0.6, 0.4]), Err(MoirError::InvalidInput(_))));
        assert!(aei(&[1.2, -0.2], &[0.6, 0.4]).is_err());
    }

    #[test]
    fn swapping_spans_inverts_mdi() {
        let w = vec![0.1, 0.2, 0.3, 0.15, 0.25];
        let p = profile(w.clone(), 1);
        let (m1, a1) = balance_indices(&p, &ModalitySpans::new(2, 3)).unwrap();
        // Same weights with the modalities' positions exchanged.
        let mut rev = w[2..].to_vec();
        rev.extend_from_slice(&w[..2]);
        let (m2, a2) = balance_indices(&profile(rev, 1), &ModalitySpans::new(3, 2)).unwrap();
        assert!((m1 * m2 - 1e4).abs() < 1e-6);
        assert!((a1 - a2).abs() < 1e-12);
    }
}
