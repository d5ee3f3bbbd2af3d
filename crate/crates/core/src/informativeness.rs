//! Channel informativeness from the singular structure of a flattened token
//! matrix, bottom-k' channel selection, and effective-rank deltas.

use serde::{Deserialize, Serialize};

use crate::error::{MoirError, Result};
use crate::linalg::{effective_rank, svd, Matrix};
use crate::tokens::{Modality, TokenSequence};

/// How a counterpart sequence is brought to the target token length before
/// routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMode {
    #[default]
    Interpolate,
    MeanPoolBroadcast,
    TruncateOrTile,
}

/// Per-channel informativeness scores for one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScores {
    pub scores: Vec<f64>,
}

impl ChannelScores {
    pub fn dims(&self) -> usize {
        self.scores.len()
    }
}

/// The channels of each modality that receive routed information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingPlan {
    pub channels_for_a: Vec<usize>,
    pub channels_for_b: Vec<usize>,
    pub k_prime: f64,
    pub align_mode: AlignMode,
}

impl RoutingPlan {
    /// Checks the plan against an embedding width.
    pub fn validate(&self, dims: usize) -> Result<()> {
        validate_k_prime(self.k_prime)?;
        let expected = selection_count(dims, self.k_prime);
        for (name, set) in [("A", &self.channels_for_a), ("B", &self.channels_for_b)] {
            if set.len() != expected {
                return Err(MoirError::input(format!(
                    "plan for {name} selects {} channels, expected {expected}",
                    set.len()
                )));
            }
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(MoirError::input(format!(
                    "plan for {name} is not strictly ascending"
                )));
            }
            if set.last().is_some_and(|&d| d >= dims) {
                return Err(MoirError::input(format!(
                    "plan for {name} has a channel out of range for D={dims}"
                )));
            }
        }
        Ok(())
    }

    pub fn channels(&self, m: Modality) -> &[usize] {
        match m {
            Modality::A => &self.channels_for_a,
            Modality::B => &self.channels_for_b,
        }
    }

    /// The same plan with the roles of the two modalities exchanged.
    pub fn swapped(&self) -> RoutingPlan {
        RoutingPlan {
            channels_for_a: self.channels_for_b.clone(),
            channels_for_b: self.channels_for_a.clone(),
            ..self.clone()
        }
    }
}

pub(crate) fn validate_k_prime(k_prime: f64) -> Result<()> {
    if !(k_prime > 0.0 && k_prime < 1.0) {
        return Err(MoirError::config(format!(
            "k' must lie strictly between 0 and 1, got {k_prime}"
        )));
    }
    Ok(())
}

/// Number of channels routed for a given width: `max(1, floor(k' * D))`.
pub fn selection_count(dims: usize, k_prime: f64) -> usize {
    ((k_prime * dims as f64).floor() as usize).clamp(1, dims)
}

/// Reshapes `B x L x D` tokens into a `(B*L) x D` matrix; row `b*L + l` is
/// token `(b, l)`.
pub fn flatten_tokens(f: &TokenSequence) -> Matrix {
    let (b, l, d) = f.shape();
    Matrix::new(b * l, d, f.values().to_vec()).expect("token sequence invariants hold")
}

/// Inverse of [`flatten_tokens`].
pub fn unflatten_tokens(m: &Matrix, batch: usize, modality: Modality) -> Result<TokenSequence> {
    if batch == 0 || !m.rows().is_multiple_of(batch) {
        return Err(MoirError::input(format!(
            "{} rows do not split into {batch} batch entries",
            m.rows()
        )));
    }
    TokenSequence::new(
        batch,
        m.rows() / batch,
        m.cols(),
        m.values().to_vec(),
        modality,
    )
}

/// Scores each channel by its energy in the principal directions of the
/// flattened tokens: `S_d = sum_i sigma_i^2 * V[d, i]^2`.
pub fn channel_scores(f: &TokenSequence) -> Result<ChannelScores> {
    let factors = svd(&flatten_tokens(f))?;
    let dims = f.dims();
    let scores = (0..dims)
        .map(|d| {
            factors
                .singular
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let v = factors.right.get(d, i);
                    s * s * v * v
                })
                .sum()
        })
        .collect();
    Ok(ChannelScores { scores })
}

/// The `max(1, floor(k' * D))` lowest-scoring channels, ascending. Ties go to
/// the lower channel index.
pub fn select_bottom_channels(s: &ChannelScores, k_prime: f64) -> Result<Vec<usize>> {
    validate_k_prime(k_prime)?;
    if s.scores.is_empty() {
        return Err(MoirError::input("no channel scores"));
    }
    let count = selection_count(s.dims(), k_prime);
    let mut order: Vec<usize> = (0..s.dims()).collect();
    order.sort_by(|&i, &j| s.scores[i].total_cmp(&s.scores[j]).then(i.cmp(&j)));
    let mut picked = order[..count].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Builds a routing plan from the two modalities' scores.
pub fn plan_from_scores(
    scores_a: &ChannelScores,
    scores_b: &ChannelScores,
    k_prime: f64,
    align_mode: AlignMode,
) -> Result<RoutingPlan> {
    if scores_a.dims() != scores_b.dims() {
        return Err(MoirError::input(format!(
            "channel count mismatch: {} vs {}",
            scores_a.dims(),
            scores_b.dims()
        )));
    }
    Ok(RoutingPlan {
        channels_for_a: select_bottom_channels(scores_a, k_prime)?,
        channels_for_b: select_bottom_channels(scores_b, k_prime)?,
        k_prime,
        align_mode,
    })
}

/// Scores both modalities on the presented batch and selects channels.
pub fn plan_routing(
    f_a: &TokenSequence,
    f_b: &TokenSequence,
    k_prime: f64,
    align_mode: AlignMode,
) -> Result<RoutingPlan> {
    plan_from_scores(&channel_scores(f_a)?, &channel_scores(f_b)?, k_prime, align_mode)
}

/// Effective rank of the flattened token matrix.
pub fn token_effective_rank(f: &TokenSequence) -> Result<f64> {
    effective_rank(&svd(&flatten_tokens(f))?.singular)
}

/// `erank(after) - erank(before)` on the flattened token matrices.
pub fn rank_delta(before: &TokenSequence, after: &TokenSequence) -> Result<f64> {
    if before.dims() != after.dims() {
        return Err(MoirError::input(format!(
            "rank delta needs equal widths, got {} and {}",
            before.dims(),
            after.dims()
        )));
    }
    Ok(token_effective_rank(after)? - token_effective_rank(before)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(b: usize, l: usize, d: usize, values: Vec<f64>) -> TokenSequence {
        TokenSequence::new(b, l, d, values, Modality::A).unwrap()
    }

    /// Column sums of squares: the diagonal of the Gram matrix X^T X.
    fn column_energy(f: &TokenSequence) -> Vec<f64> {
        let mut out = vec![0.0; f.dims()];
        for (i, v) in f.values().iter().enumerate() {
            out[i % f.dims()] += v * v;
        }
        out
    }

    #[test]
    fn flatten_single_token() {
        let m = flatten_tokens(&seq(1, 1, 3, vec![1.0, 2.0, 3.0]));
        assert_eq!((m.rows(), m.cols()), (1, 3));
        assert_eq!(m.values(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn flatten_orders_batch_entries() {
        let m = flatten_tokens(&seq(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(m.row(0), &[1.0, 2.0]);
        assert_eq!(m.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn identity_tokens_score_equally() {
        let s = channel_scores(&seq(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        for v in s.scores {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_channel_scores_zero() {
        let s = channel_scores(&seq(1, 3, 3, vec![1.0, 0.0, 2.0, -1.0, 0.0, 4.0, 0.5, 0.0, 1.0])).unwrap();
        assert!(s.scores[1].abs() < 1e-12);
    }

    #[test]
    fn small_matrix_scores() {
        // Column energies: 1+9 = 10, 4+16 = 20.
        let s = channel_scores(&seq(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert!((s.scores[0] - 10.0).abs() < 1e-10);
        assert!((s.scores[1] - 20.0).abs() < 1e-10);
    }

    #[test]
    fn bottom_channel_examples() {
        let pick = |v: Vec<f64>, k| select_bottom_channels(&ChannelScores { scores: v }, k).unwrap();
        assert_eq!(pick(vec![3.0, 1.0, 2.0], 0.34), vec![1]);
        assert_eq!(pick(vec![1.0, 1.0, 2.0], 0.34), vec![0]);
        assert_eq!(pick(vec![0.0; 4096], 0.10).len(), 409);
        // k' * D below one still routes a channel.
        assert_eq!(pick(vec![5.0, 4.0, 3.0], 0.1), vec![2]);
    }

    #[test]
    fn bottom_channels_rejects_bad_fraction() {
        let s = ChannelScores { scores: vec![1.0, 2.0] };
        for k in [0.0, 1.0, -0.5, 1.5, f64::NAN] {
            assert!(matches!(
                select_bottom_channels(&s, k),
                Err(MoirError::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn rank_delta_examples() {
        let rank_one = seq(1, 2, 2, vec![1.0, 1.0, 1.0, 1.0]);
        let identity = seq(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(rank_delta(&identity, &identity).unwrap(), 0.0);
        // erank goes 1 -> 2.
        assert!((rank_delta(&rank_one, &identity).unwrap() - 1.0).abs() < 1e-12);
        let zero = seq(1, 2, 2, vec![0.0; 4]);
        assert!(matches!(
            rank_delta(&zero, &identity),
            Err(MoirError::DegenerateSpectrum)
        ));
    }

    #[test]
    fn plan_validation() {
        let plan = RoutingPlan {
            channels_for_a: vec![1],
            channels_for_b: vec![3],
            k_prime: 0.25,
            align_mode: AlignMode::Interpolate,
        };
        assert!(plan.validate(4).is_ok());
        assert!(plan.validate(3).is_err());
        assert!(plan.validate(8).is_err());
    }

    fn token_strategy() -> impl Strategy<Value = TokenSequence> {
        (1usize..=4, 1usize..=16, 1usize..=32).prop_flat_map(|(b, l, d)| {
            prop::collection::vec(-3.0f64..3.0, b * l * d)
                .prop_map(move |v| TokenSequence::new(b, l, d, v, Modality::A).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn flatten_round_trips(f in token_strategy()) {
            let back = unflatten_tokens(&flatten_tokens(&f), f.batch(), Modality::A).unwrap();
            prop_assert_eq!(back, f);
        }

        #[test]
        fn scores_match_column_energy(f in token_strategy()) {
            let s = channel_scores(&f).unwrap();
            let oracle = column_energy(&f);
            let total: f64 = oracle.iter().sum();
            for (a, b) in s.scores.iter().zip(&oracle) {
                prop_assert!((a - b).abs() <= 1e-8 * b.abs().max(total * 1e-3).max(1e-300));
            }
            let sv_energy: f64 = svd(&flatten_tokens(&f)).unwrap().singular.iter().map(|s| s * s).sum();
            let score_total: f64 = s.scores.iter().sum();
            prop_assert!((score_total - sv_energy).abs() <= 1e-8 * sv_energy.max(1e-300));
        }

        #[test]
        fn selection_is_scale_invariant(
            scores in prop::collection::vec(0.0f64..10.0, 1..64),
            c in prop::sample::select(vec![0.5, 3.0, 1e6]),
            k in 0.01f64..0.99,
        ) {
            let base = select_bottom_channels(&ChannelScores { scores: scores.clone() }, k).unwrap();
            let scaled = ChannelScores { scores: scores.iter().map(|s| s * c).collect() };
            prop_assert_eq!(&base, &select_bottom_channels(&scaled, k).unwrap());
            prop_assert_eq!(&base, &select_bottom_channels(&ChannelScores { scores }, k).unwrap());
        }
    }
}
