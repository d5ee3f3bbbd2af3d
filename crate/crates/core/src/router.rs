//! Gated cross-modal routing into low-informativeness channels, with token
//! length alignment and exact reverse-mode gradients.

use serde::{Deserialize, Serialize};

use crate::error::{MoirError, Result};
use crate::informativeness::{AlignMode, RoutingPlan};
use crate::tokens::{Modality, TokenSequence};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] on (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Whether each routed channel owns its gate or one gate is shared per
/// direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    #[default]
    PerChannel,
    Scalar,
}

/// Unconstrained gate parameters; the blend weight is `sigmoid(theta)`.
///
/// In [`GateMode::Scalar`] each vector holds a single entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub theta_a: Vec<f64>,
    pub theta_b: Vec<f64>,
    pub mode: GateMode,
}

impl GateParams {
    /// All gates start at blend weight `alpha_init`.
    pub fn new(dims: usize, alpha_init: f64, mode: GateMode) -> Result<Self> {
        if !(alpha_init > 0.0 && alpha_init < 1.0) {
            return Err(MoirError::config(format!(
                "gate init must lie in (0, 1), got {alpha_init}"
            )));
        }
        let n = match mode {
            GateMode::PerChannel => dims,
            GateMode::Scalar => 1,
        };
        let theta = logit(alpha_init);
        Ok(Self {
            theta_a: vec![theta; n],
            theta_b: vec![theta; n],
            mode,
        })
    }

    /// Every gate parameter set to `theta`.
    pub fn constant(dims: usize, theta: f64, mode: GateMode) -> Self {
        let n = match mode {
            GateMode::PerChannel => dims,
            GateMode::Scalar => 1,
        };
        Self {
            theta_a: vec![theta; n],
            theta_b: vec![theta; n],
            mode,
        }
    }

    pub fn theta(&self, m: Modality) -> &[f64] {
        match m {
            Modality::A => &self.theta_a,
            Modality::B => &self.theta_b,
        }
    }

    #[inline]
    fn slot(&self, channel: usize) -> usize {
        match self.mode {
            GateMode::PerChannel => channel,
            GateMode::Scalar => 0,
        }
    }

    /// Blend weight applied to `channel` of modality `m`.
    pub fn alpha(&self, m: Modality, channel: usize) -> f64 {
        sigmoid(self.theta(m)[self.slot(channel)])
    }

    pub fn swapped(&self) -> GateParams {
        GateParams {
            theta_a: self.theta_b.clone(),
            theta_b: self.theta_a.clone(),
            mode: self.mode,
        }
    }

    fn check(&self, dims: usize) -> Result<()> {
        let n = match self.mode {
            GateMode::PerChannel => dims,
            GateMode::Scalar => 1,
        };
        if self.theta_a.len() != n || self.theta_b.len() != n {
            return Err(MoirError::input(format!(
                "gate vectors have lengths {}/{}, expected {n}",
                self.theta_a.len(),
                self.theta_b.len()
            )));
        }
        if self.theta_a.iter().chain(&self.theta_b).any(|t| !t.is_finite()) {
            return Err(MoirError::input("non-finite gate parameter"));
        }
        Ok(())
    }
}

/// Both routed sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutedPair {
    pub routed_a: TokenSequence,
    pub routed_b: TokenSequence,
}

/// Linear resampling along the token axis: each output position is a
/// weighted sum of source positions.
#[derive(Debug, Clone)]
struct AlignMap {
    source_len: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

impl AlignMap {
    fn new(source_len: usize, target_len: usize, mode: AlignMode) -> Self {
        let taps = if source_len == target_len {
            (0..target_len).map(|t| vec![(t, 1.0)]).collect()
        } else {
            match mode {
                AlignMode::Interpolate => (0..target_len)
                    .map(|t| interpolation_taps(source_len, target_len, t))
                    .collect(),
                AlignMode::MeanPoolBroadcast => {
                    let w = 1.0 / source_len as f64;
                    let row: Vec<(usize, f64)> = (0..source_len).map(|s| (s, w)).collect();
                    vec![row; target_len]
                }
                AlignMode::TruncateOrTile => {
                    (0..target_len).map(|t| vec![(t % source_len, 1.0)]).collect()
                }
            }
        };
        Self { source_len, taps }
    }

    fn apply(&self, src: &TokenSequence) -> TokenSequence {
        let (batch, _, dims) = src.shape();
        let mut out = TokenSequence::zeros(batch, self.taps.len(), dims, src.modality());
        if self.taps.iter().all(|t| t.len() == 1 && t[0].1 == 1.0) {
            // Pure gather: copy rows so the result is bit-exact.
            for b in 0..batch {
                for (t, taps) in self.taps.iter().enumerate() {
                    let start = out.index(b, t, 0);
                    out.values_mut()[start..start + dims].copy_from_slice(src.token(b, taps[0].0));
                }
            }
            return out;
        }
        for b in 0..batch {
            for (t, taps) in self.taps.iter().enumerate() {
                for &(s, w) in taps {
                    for d in 0..dims {
                        let i = out.index(b, t, d);
                        out.values_mut()[i] += w * src.get(b, s, d);
                    }
                }
            }
        }
        out
    }

    /// Adjoint map: scatters a gradient on the aligned tokens back to the
    /// source positions, accumulating into `grad_src` for channel `d`.
    fn scatter_channel(
        &self,
        grad_aligned: &[f64],
        batch: usize,
        dims: usize,
        d: usize,
        grad_src: &mut [f64],
    ) {
        let target_len = self.taps.len();
        for b in 0..batch {
            for (t, taps) in self.taps.iter().enumerate() {
                let g = grad_aligned[(b * target_len + t) * dims + d];
                if g == 0.0 {
                    continue;
                }
                for &(s, w) in taps {
                    grad_src[(b * self.source_len + s) * dims + d] += w * g;
                }
            }
        }
    }
}

fn interpolation_taps(source_len: usize, target_len: usize, t: usize) -> Vec<(usize, f64)> {
    if source_len == 1 {
        return vec![(0, 1.0)];
    }
    let x = if target_len == 1 {
        // A single output token sits at the centre of the source span.
        (source_len - 1) as f64 / 2.0
    } else {
        t as f64 * (source_len - 1) as f64 / (target_len - 1) as f64
    };
    let lo = (x.floor() as usize).min(source_len - 1);
    let frac = x - lo as f64;
    if frac == 0.0 || lo + 1 >= source_len {
        vec![(lo, 1.0)]
    } else {
        vec![(lo, 1.0 - frac), (lo + 1, frac)]
    }
}

/// Resamples `source` to `target_len` tokens. Equal lengths return the input
/// unchanged in every mode.
pub fn align_tokens(
    source: &TokenSequence,
    target_len: usize,
    mode: AlignMode,
) -> Result<TokenSequence> {
    if target_len == 0 {
        return Err(MoirError::input("target length must be at least 1"));
    }
    Ok(AlignMap::new(source.tokens(), target_len, mode).apply(source))
}

fn check_pair(f_a: &TokenSequence, f_b: &TokenSequence, plan: &RoutingPlan, gates: &GateParams) -> Result<()> {
    if f_a.dims() != f_b.dims() {
        return Err(MoirError::input(format!(
            "modalities have different widths: {} vs {}",
            f_a.dims(),
            f_b.dims()
        )));
    }
    if f_a.batch() != f_b.batch() {
        return Err(MoirError::input(format!(
            "modalities have different batch sizes: {} vs {}",
            f_a.batch(),
            f_b.batch()
        )));
    }
    plan.validate(f_a.dims())?;
    gates.check(f_a.dims())
}

/// Blends counterpart values into the planned channels of both modalities.
///
/// On each routed channel `d` of A:
/// `routed_a[.., d] = alpha_d * align(f_b)[.., d] + (1 - alpha_d) * f_a[.., d]`,
/// and symmetrically for B. Both directions read the original inputs.
pub fn route_pair(
    f_a: &TokenSequence,
    f_b: &TokenSequence,
    plan: &RoutingPlan,
    gates: &GateParams,
) -> Result<RoutedPair> {
    check_pair(f_a, f_b, plan, gates)?;
    let b_on_a = align_tokens(f_b, f_a.tokens(), plan.align_mode)?;
    let a_on_b = align_tokens(f_a, f_b.tokens(), plan.align_mode)?;
    Ok(RoutedPair {
        routed_a: blend(f_a, &b_on_a, &plan.channels_for_a, gates, Modality::A),
        routed_b: blend(f_b, &a_on_b, &plan.channels_for_b, gates, Modality::B),
    })
}

fn blend(
    own: &TokenSequence,
    counterpart: &TokenSequence,
    channels: &[usize],
    gates: &GateParams,
    m: Modality,
) -> TokenSequence {
    let mut out = own.clone();
    let (batch, len, _) = own.shape();
    for &d in channels {
        let alpha = gates.alpha(m, d);
        for b in 0..batch {
            for l in 0..len {
                let v = alpha * counterpart.get(b, l, d) + (1.0 - alpha) * own.get(b, l, d);
                out.set(b, l, d, v);
            }
        }
    }
    out
}

/// Gradients of a scalar loss with respect to the routing inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteGrads {
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
    pub grad_theta_a: Vec<f64>,
    pub grad_theta_b: Vec<f64>,
}

/// Reverse-mode pass of [`route_pair`] given upstream gradients on the routed
/// outputs. The routing plan is treated as a constant.
pub fn route_backward(
    f_a: &TokenSequence,
    f_b: &TokenSequence,
    plan: &RoutingPlan,
    gates: &GateParams,
    upstream_a: &[f64],
    upstream_b: &[f64],
) -> Result<RouteGrads> {
    check_pair(f_a, f_b, plan, gates)?;
    if upstream_a.len() != f_a.values().len() || upstream_b.len() != f_b.values().len() {
        return Err(MoirError::input(format!(
            "upstream gradient lengths {}/{} do not match token sizes {}/{}",
            upstream_a.len(),
            upstream_b.len(),
            f_a.values().len(),
            f_b.values().len()
        )));
    }
    let mut grads = RouteGrads {
        grad_a: upstream_a.to_vec(),
        grad_b: upstream_b.to_vec(),
        grad_theta_a: vec![0.0; gates.theta_a.len()],
        grad_theta_b: vec![0.0; gates.theta_b.len()],
    };
    let b_to_a = AlignMap::new(f_b.tokens(), f_a.tokens(), plan.align_mode);
    let a_to_b = AlignMap::new(f_a.tokens(), f_b.tokens(), plan.align_mode);
    let b_on_a = b_to_a.apply(f_b);
    let a_on_b = a_to_b.apply(f_a);

    let RouteGrads {
        grad_a,
        grad_b,
        grad_theta_a,
        grad_theta_b,
    } = &mut grads;
    backward_direction(
        f_a, &b_on_a, &b_to_a, upstream_a, &plan.channels_for_a, gates, Modality::A,
        grad_a, grad_b, grad_theta_a,
    );
    backward_direction(
        f_b, &a_on_b, &a_to_b, upstream_b, &plan.channels_for_b, gates, Modality::B,
        grad_b, grad_a, grad_theta_b,
    );
    Ok(grads)
}

#[allow(clippy::too_many_arguments)]
fn backward_direction(
    own: &TokenSequence,
    aligned: &TokenSequence,
    map: &AlignMap,
    upstream: &[f64],
    channels: &[usize],
    gates: &GateParams,
    m: Modality,
    grad_own: &mut [f64],
    grad_counterpart: &mut [f64],
    grad_theta: &mut [f64],
) {
    let (batch, len, dims) = own.shape();
    let mut grad_aligned = vec![0.0; aligned.values().len()];
    for &d in channels {
        let alpha = gates.alpha(m, d);
        let dsig = alpha * (1.0 - alpha);
        let mut dtheta = 0.0;
        for b in 0..batch {
            for l in 0..len {
                let i = own.index(b, l, d);
                let g = upstream[i];
                grad_own[i] -= alpha * g;
                grad_aligned[i] = alpha * g;
                dtheta += g * (aligned.get(b, l, d) - own.get(b, l, d));
            }
        }
        grad_theta[gates.slot(d)] += dtheta * dsig;
        map.scatter_channel(&grad_aligned, batch, dims, d, grad_counterpart);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::informativeness::selection_count;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(b: usize, l: usize, d: usize, values: Vec<f64>, m: Modality) -> TokenSequence {
        TokenSequence::new(b, l, d, values, m).unwrap()
    }

    fn random_seq(rng: &mut ChaCha8Rng, b: usize, l: usize, d: usize, m: Modality) -> TokenSequence {
        seq(b, l, d, (0..b * l * d).map(|_| rng.gen_range(-2.0..2.0)).collect(), m)
    }

    fn plan(a: Vec<usize>, b: Vec<usize>, k: f64, mode: AlignMode) -> RoutingPlan {
        RoutingPlan {
            channels_for_a: a,
            channels_for_b: b,
            k_prime: k,
            align_mode: mode,
        }
    }

    #[test]
    fn align_identity_all_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_seq(&mut rng, 2, 5, 3, Modality::B);
        for mode in [AlignMode::Interpolate, AlignMode::MeanPoolBroadcast, AlignMode::TruncateOrTile] {
            assert_eq!(align_tokens(&s, 5, mode).unwrap(), s);
        }
    }

    #[test]
    fn align_interpolate_midpoint() {
        let s = seq(1, 2, 1, vec![0.0, 2.0], Modality::B);
        let out = align_tokens(&s, 3, AlignMode::Interpolate).unwrap();
        assert_eq!(out.values(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn align_mean_pool() {
        let s = seq(1, 3, 1, vec![1.0, 3.0, 5.0], Modality::B);
        let out = align_tokens(&s, 1, AlignMode::MeanPoolBroadcast).unwrap();
        assert!((out.values()[0] - 3.0).abs() < 1e-15);
        let out = align_tokens(&s, 4, AlignMode::MeanPoolBroadcast).unwrap();
        assert_eq!(out.tokens(), 4);
    }

    #[test]
    fn align_truncate_and_tile() {
        let s = seq(1, 3, 1, vec![1.0, 3.0, 5.0], Modality::B);
        assert_eq!(align_tokens(&s, 2, AlignMode::TruncateOrTile).unwrap().values(), &[1.0, 3.0]);
        assert_eq!(
            align_tokens(&s, 7, AlignMode::TruncateOrTile).unwrap().values(),
            &[1.0, 3.0, 5.0, 1.0, 3.0, 5.0, 1.0]
        );
    }

    #[test]
    fn closed_gate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_seq(&mut rng, 2, 4, 6, Modality::A);
        let b = random_seq(&mut rng, 2, 3, 6, Modality::B);
        let p = plan(vec![0, 4], vec![2, 5], 0.34, AlignMode::Interpolate);
        let gates = GateParams::constant(6, -50.0, GateMode::PerChannel);
        let out = route_pair(&a, &b, &p, &gates).unwrap();
        for (x, y) in out.routed_a.values().iter().zip(a.values()) {
            assert!((x - y).abs() <= 1e-12);
        }
        for (x, y) in out.routed_b.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn open_gate_copies_counterpart() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_seq(&mut rng, 1, 4, 5, Modality::A);
        let b = random_seq(&mut rng, 1, 4, 5, Modality::B);
        let p = plan(vec![1, 3], vec![0, 2], 0.4, AlignMode::Interpolate);
        let gates = GateParams::constant(5, 50.0, GateMode::PerChannel);
        let out = route_pair(&a, &b, &p, &gates).unwrap();
        for l in 0..4 {
            for &d in &p.channels_for_a {
                assert!((out.routed_a.get(0, l, d) - b.get(0, l, d)).abs() <= 1e-12);
            }
            for &d in &p.channels_for_b {
                assert!((out.routed_b.get(0, l, d) - a.get(0, l, d)).abs() <= 1e-12);
            }
            for d in [0, 2, 4] {
                assert_eq!(out.routed_a.get(0, l, d).to_bits(), a.get(0, l, d).to_bits());
            }
        }
    }

    #[test]
    fn half_gate_is_midpoint() {
        let a = seq(1, 1, 1, vec![2.0], Modality::A);
        let b = seq(1, 1, 1, vec![4.0], Modality::B);
        let p = plan(vec![0], vec![0], 0.5, AlignMode::Interpolate);
        let out = route_pair(&a, &b, &p, &GateParams::constant(1, 0.0, GateMode::PerChannel)).unwrap();
        assert_eq!(out.routed_a.values(), &[3.0]);
        assert_eq!(out.routed_b.values(), &[3.0]);
    }

    #[test]
    fn scalar_gate_shares_one_parameter() {
        let g = GateParams::new(8, 0.5, GateMode::Scalar).unwrap();
        assert_eq!(g.theta_a.len(), 1);
        assert_eq!(g.alpha(Modality::A, 7), 0.5);
    }

    #[test]
    fn rejects_mismatched_widths() {
        let a = seq(1, 1, 2, vec![0.0; 2], Modality::A);
        let b = seq(1, 1, 3, vec![0.0; 3], Modality::B);
        let p = plan(vec![0], vec![0], 0.4, AlignMode::Interpolate);
        let g = GateParams::constant(2, 0.0, GateMode::PerChannel);
        assert!(matches!(route_pair(&a, &b, &p, &g), Err(MoirError::InvalidInput(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_seq(&mut rng, 1, 3, 4, Modality::A);
        let b = random_seq(&mut rng, 1, 2, 4, Modality::B);
        let p = plan(vec![1], vec![3], 0.25, AlignMode::Interpolate);
        let g = GateParams::new(4, 0.5, GateMode::PerChannel).unwrap();
        let r = route_backward(&a, &b, &p, &g, &[0.0; 12], &[0.0; 8]).unwrap();
        assert!(r.grad_a.iter().chain(&r.grad_b).chain(&r.grad_theta_a).chain(&r.grad_theta_b).all(|&x| x == 0.0));
    }

    #[test]
    fn closed_gate_passes_gradient_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_seq(&mut rng, 1, 3, 4, Modality::A);
        let b = random_seq(&mut rng, 1, 2, 4, Modality::B);
        let p = plan(vec![1], vec![3], 0.25, AlignMode::Interpolate);
        let g = GateParams::constant(4, -50.0, GateMode::PerChannel);
        let up_a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = route_backward(&a, &b, &p, &g, &up_a, &[0.0; 8]).unwrap();
        for (x, y) in r.grad_a.iter().zip(&up_a) {
            assert!((x - y).abs() <= 1e-12);
        }
        assert!(r.grad_b.iter().all(|x| x.abs() <= 1e-12));
    }

    /// Scalar loss `<w_a, routed_a> + <w_b, routed_b>`; its gradient with
    /// respect to the routed outputs is exactly `(w_a, w_b)`.
    fn probe_loss(a: &TokenSequence, b: &TokenSequence, p: &RoutingPlan, g: &GateParams, wa: &[f64], wb: &[f64]) -> f64 {
        let out = route_pair(a, b, p, g).unwrap();
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>();
        dot(out.routed_a.values(), wa) + dot(out.routed_b.values(), wb)
    }

    fn rel_err(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
    }

    #[test]
    fn finite_differences_agree() {
        let h = 1e-5;
        for (seed, mode, gate_mode) in [
            (10, AlignMode::Interpolate, GateMode::PerChannel),
            (11, AlignMode::MeanPoolBroadcast, GateMode::PerChannel),
            (12, AlignMode::TruncateOrTile, GateMode::Scalar),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 4;
            let k = 0.3;
            assert_eq!(selection_count(d, k), 1);
            let a = random_seq(&mut rng, 1, 3, d, Modality::A);
            let b = random_seq(&mut rng, 1, 2, d, Modality::B);
            let p = plan(vec![rng.gen_range(0..d)], vec![rng.gen_range(0..d)], k, mode);
            let mut g = GateParams::new(d, 0.5, gate_mode).unwrap();
            for t in g.theta_a.iter_mut().chain(g.theta_b.iter_mut()) {
                *t = rng.gen_range(-1.5..1.5);
            }
            let wa: Vec<f64> = (0..a.values().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wb: Vec<f64> = (0..b.values().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r = route_backward(&a, &b, &p, &g, &wa, &wb).unwrap();

            for i in 0..a.values().len() {
                let (mut ap, mut am) = (a.clone(), a.clone());
                ap.values_mut()[i] += h;
                am.values_mut()[i] -= h;
                let num = (probe_loss(&ap, &b, &p, &g, &wa, &wb) - probe_loss(&am, &b, &p, &g, &wa, &wb)) / (2.0 * h);
                assert!(rel_err(r.grad_a[i], num) <= 1e-4, "grad_a[{i}] {} vs {num}", r.grad_a[i]);
            }
            for i in 0..b.values().len() {
                let (mut bp, mut bm) = (b.clone(), b.clone());
                bp.values_mut()[i] += h;
                bm.values_mut()[i] -= h;
                let num = (probe_loss(&a, &bp, &p, &g, &wa, &wb) - probe_loss(&a, &bm, &p, &g, &wa, &wb)) / (2.0 * h);
                assert!(rel_err(r.grad_b[i], num) <= 1e-4, "grad_b[{i}] {} vs {num}", r.grad_b[i]);
            }
            for side in [Modality::A, Modality::B] {
                for i in 0..g.theta(side).len() {
                    let bump = |delta: f64| {
                        let mut gg = g.clone();
                        match side {
                            Modality::A => gg.theta_a[i] += delta,
                            Modality::B => gg.theta_b[i] += delta,
                        }
                        probe_loss(&a, &b, &p, &gg, &wa, &wb)
                    };
                    let num = (bump(h) - bump(-h)) / (2.0 * h);
                    let ana = match side {
                        Modality::A => r.grad_theta_a[i],
                        Modality::B => r.grad_theta_b[i],
                    };
                    assert!(rel_err(ana, num) <= 1e-4, "theta {side}[{i}] {ana} vs {num}");
                }
            }
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn case() -> impl Strategy<Value = (TokenSequence, TokenSequence, RoutingPlan, GateParams)> {
            (1usize..=2, 1usize..=5, 1usize..=5, 2usize..=8, 0usize..3).prop_flat_map(|(bt, la, lb, d, mode)| {
                let mode = [AlignMode::Interpolate, AlignMode::MeanPoolBroadcast, AlignMode::TruncateOrTile][mode];
                let k = 0.3;
                let n = selection_count(d, k);
                (
                    prop::collection::vec(-5.0f64..5.0, bt * la * d),
                    prop::collection::vec(-5.0f64..5.0, bt * lb * d),
                    prop::sample::subsequence((0..d).collect::<Vec<_>>(), n),
                    prop::sample::subsequence((0..d).collect::<Vec<_>>(), n),
                    prop::collection::vec(-4.0f64..4.0, d),
                    prop::collection::vec(-4.0f64..4.0, d),
                )
                    .prop_map(move |(va, vb, ca, cb, ta, tb)| {
                        (
                            seq(bt, la, d, va, Modality::A),
                            seq(bt, lb, d, vb, Modality::B),
                            plan(ca, cb, k, mode),
                            GateParams { theta_a: ta, theta_b: tb, mode: GateMode::PerChannel },
                        )
                    })
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(128))]

            #[test]
            fn unselected_channels_untouched((a, b, p, g) in case()) {
                let out = route_pair(&a, &b, &p, &g).unwrap();
                for (routed, orig, chosen) in [(&out.routed_a, &a, &p.channels_for_a), (&out.routed_b, &b, &p.channels_for_b)] {
                    prop_assert_eq!(routed.shape(), orig.shape());
                    for (i, (x, y)) in routed.values().iter().zip(orig.values()).enumerate() {
                        if !chosen.contains(&(i % orig.dims())) {
                            prop_assert_eq!(x.to_bits(), y.to_bits());
                        }
                    }
                }
            }

            #[test]
            fn routing_is_homogeneous((a, b, p, g) in case(), c in -3.0f64..3.0) {
                let base = route_pair(&a, &b, &p, &g).unwrap();
                let scaled = route_pair(&a.scaled(c), &b.scaled(c), &p, &g).unwrap();
                for (x, y) in scaled.routed_a.values().iter().chain(scaled.routed_b.values())
                    .zip(base.routed_a.values().iter().chain(base.routed_b.values())) {
                    prop_assert!((x - c * y).abs() <= 1e-12 * (1.0 + y.abs() * c.abs()));
                }
            }

            #[test]
            fn label_symmetry((a, b, p, g) in case()) {
                let out = route_pair(&a, &b, &p, &g).unwrap();
                let a_as_b = a.clone().with_modality(Modality::B);
                let b_as_a = b.clone().with_modality(Modality::A);
                let swapped = route_pair(&b_as_a, &a_as_b, &p.swapped(), &g.swapped()).unwrap();
                prop_assert_eq!(swapped.routed_a.values(), out.routed_b.values());
                prop_assert_eq!(swapped.routed_b.values(), out.routed_a.values());
            }

            #[test]
            fn gate_monotone((a, b, p, g) in case(), lo in -6.0f64..0.0, step in 0.1f64..6.0) {
                let aligned = align_tokens(&b, a.tokens(), p.align_mode).unwrap();
                let d = p.channels_for_a[0];
                let at = |theta: f64| {
                    let mut gg = g.clone();
                    gg.theta_a[d] = theta;
                    route_pair(&a, &b, &p, &gg).unwrap().routed_a
                };
                let (low, high) = (at(lo), at(lo + step));
                for bt in 0..a.batch() {
                    for l in 0..a.tokens() {
                        if aligned.get(bt, l, d) > a.get(bt, l, d) + 1e-9 {
                            prop_assert!(high.get(bt, l, d) > low.get(bt, l, d));
                        }
                    }
                }
            }
        }
    }
}
