//! Bridging functions: the map `F` from a latent correlation to the
//! population Kendall's tau of two same-kind observed variables, its
//! derivative, its monotone inverse, and a Monte-Carlo oracle.
//!
//! * continuous–continuous: `F(r) = (2/π) asin r`
//! * binary–binary: `F(r) = 2 [Φ₂(Δ, Δ'; r) − Φ(Δ) Φ(Δ')]`
//! * ordinal–ordinal: `F(r) = 2 Σ_{k,k'} p_{kk'} [P(X>k, X'>k') − P(X>k, X'<k')]`,
//!   every term a bivariate normal rectangle probability
//! * truncated–truncated: `F(r) = 2 [P(V>Δ, V'>Δ', V₁>V₂, V₁'>V₂') − P(V>Δ, W'>Δ', V>V₂, W'>W)]`,
//!   two four-dimensional orthant probabilities.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{FsgcError, Result};
use crate::marginal::VariableKind;
use crate::normal::{self, SmallCorr};

/// Largest latent correlation magnitude treated as interior.
pub const R_INTERIOR: f64 = 1.0 - 1e-9;
/// Magnitude returned when a tau lies outside the attainable range.
pub const INVERSE_CLAMP: f64 = 1.0 - 1e-6;

const ROOT_TOL: f64 = 1e-12;

/// Kind and latent cutoffs for a pair of time points.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeContext {
    kind: VariableKind,
    cutoffs_a: Vec<f64>,
    cutoffs_b: Vec<f64>,
}

impl BridgeContext {
    pub fn new(kind: VariableKind, cutoffs_a: Vec<f64>, cutoffs_b: Vec<f64>) -> Result<Self> {
        kind.validate()?;
        for cut in [&cutoffs_a, &cutoffs_b] {
            if cut.len() != kind.n_cutoffs() {
                return Err(FsgcError::InvalidInput(format!(
                    "{} bridge needs {} cutoffs per side, got {}",
                    kind.name(),
                    kind.n_cutoffs(),
                    cut.len()
                )));
            }
            if cut.iter().any(|c| !c.is_finite()) || cut.windows(2).any(|w| w[0] >= w[1]) {
                return Err(FsgcError::InvalidInput(
                    "cutoffs must be finite and strictly increasing".into(),
                ));
            }
        }
        Ok(BridgeContext {
            kind,
            cutoffs_a,
            cutoffs_b,
        })
    }

    pub fn continuous() -> Self {
        BridgeContext {
            kind: VariableKind::Continuous,
            cutoffs_a: Vec::new(),
            cutoffs_b: Vec::new(),
        }
    }

    pub fn binary(a: f64, b: f64) -> Result<Self> {
        Self::new(VariableKind::Binary, vec![a], vec![b])
    }

    pub fn truncated(a: f64, b: f64) -> Result<Self> {
        Self::new(VariableKind::Truncated, vec![a], vec![b])
    }

    pub fn ordinal(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let kind = VariableKind::ordinal(a.len() + 1)?;
        Self::new(kind, a, b)
    }

    pub fn kind(&self) -> VariableKind {
        self.kind
    }

    pub fn cutoffs(&self) -> (&[f64], &[f64]) {
        (&self.cutoffs_a, &self.cutoffs_b)
    }
}

fn check_r(r: f64) -> Result<()> {
    if r.is_nan() || r.abs() > 1.0 {
        Err(FsgcError::OutOfDomain(format!("latent correlation {r} outside [-1, 1]")))
    } else {
        Ok(())
    }
}

/// `F(r)` for the context's pair type.
pub fn bridge_forward(r: f64, ctx: &BridgeContext) -> Result<f64> {
    check_r(r)?;
    let tau = match ctx.kind {
        VariableKind::Continuous => 2.0 / PI * r.asin(),
        VariableKind::Binary => {
            let (a, b) = (ctx.cutoffs_a[0], ctx.cutoffs_b[0]);
            2.0 * (normal::bvn_cdf(a, b, r) - normal::cdf(a) * normal::cdf(b))
        }
        VariableKind::Ordinal { .. } => discrete_tau(r, &ctx.cutoffs_a, &ctx.cutoffs_b).0,
        VariableKind::Truncated => truncated_tau(r, ctx.cutoffs_a[0], ctx.cutoffs_b[0])?,
    };
    Ok(tau.clamp(-1.0, 1.0))
}

/// `F'(r)`.
pub fn bridge_derivative(r: f64, ctx: &BridgeContext) -> Result<f64> {
    check_r(r)?;
    Ok(match ctx.kind {
        VariableKind::Continuous => 2.0 / (PI * ((1.0 - r) * (1.0 + r)).sqrt()),
        VariableKind::Binary => 2.0 * normal::bvn_pdf(ctx.cutoffs_a[0], ctx.cutoffs_b[0], r),
        VariableKind::Ordinal { .. } => discrete_tau(r, &ctx.cutoffs_a, &ctx.cutoffs_b).1,
        VariableKind::Truncated => truncated_tau_derivative(r, ctx.cutoffs_a[0], ctx.cutoffs_b[0]),
    })
}

/// Tau and its derivative for discrete margins given by interior cutoffs.
fn discrete_tau(r: f64, cuts_a: &[f64], cuts_b: &[f64]) -> (f64, f64) {
    let pad = |c: &[f64]| {
        let mut v = Vec::with_capacity(c.len() + 2);
        v.push(f64::NEG_INFINITY);
        v.extend_from_slice(c);
        v.push(f64::INFINITY);
        v
    };
    let (a, b) = (pad(cuts_a), pad(cuts_b));
    let (la, lb) = (a.len() - 1, b.len() - 1);
    // g[i][j] = Φ₂(a_i, b_j; r) and its r-derivative.
    let mut g = vec![vec![0.0; lb + 1]; la + 1];
    let mut dg = vec![vec![0.0; lb + 1]; la + 1];
    for i in 0..=la {
        for j in 0..=lb {
            g[i][j] = normal::bvn_cdf(a[i], b[j], r);
            dg[i][j] = normal::bvn_pdf(a[i], b[j], r);
        }
    }
    let mut tau = 0.0;
    let mut dtau = 0.0;
    for k in 0..la {
        for kk in 0..lb {
            let cell = |m: &Vec<Vec<f64>>| m[k + 1][kk + 1] - m[k][kk + 1] - m[k + 1][kk] + m[k][kk];
            // P(X > k, X' > k') and P(X > k, X' < k'); the constant in the first
            // term drops out of the derivative.
            let above = |m: &Vec<Vec<f64>>, c: f64| c - m[k + 1][lb] - m[la][kk + 1] + m[k + 1][kk + 1];
            let below = |m: &Vec<Vec<f64>>| m[la][kk] - m[k + 1][kk];
            let p = cell(&g);
            let dp = cell(&dg);
            let diff = above(&g, 1.0) - below(&g);
            let ddiff = above(&dg, 0.0) - below(&dg);
            tau += p * diff;
            dtau += dp * diff + p * ddiff;
        }
    }
    (2.0 * tau, 2.0 * dtau)
}

fn truncated_sigmas(r: f64) -> (SmallCorr, SmallCorr) {
    let h = FRAC_1_SQRT_2;
    let same = [
        [1.0, r, h, r * h],
        [r, 1.0, r * h, h],
        [h, r * h, 1.0, r],
        [r * h, h, r, 1.0],
    ];
    let crossed = [
        [1.0, 0.0, h, -r * h],
        [0.0, 1.0, -r * h, h],
        [h, -r * h, 1.0, -r],
        [-r * h, h, -r, 1.0],
    ];
    (same, crossed)
}

fn truncated_tau(r: f64, da: f64, db: f64) -> Result<f64> {
    if r == 0.0 {
        return Ok(0.0);
    }
    let bounds = [-da, -db, 0.0, 0.0];
    let (same, crossed) = truncated_sigmas(r);
    Ok(2.0 * (normal::mvn_cdf(&bounds, &same)? - normal::mvn_cdf(&bounds, &crossed)?))
}

fn truncated_tau_derivative(r: f64, da: f64, db: f64) -> f64 {
    let h = FRAC_1_SQRT_2;
    let bounds = [-da, -db, 0.0, 0.0];
    let (same, crossed) = truncated_sigmas(r);
    let d_same = [
        [0.0, 1.0, 0.0, h],
        [1.0, 0.0, h, 0.0],
        [0.0, h, 0.0, 1.0],
        [h, 0.0, 1.0, 0.0],
    ];
    let d_crossed = [
        [0.0, 0.0, 0.0, -h],
        [0.0, 0.0, -h, 0.0],
        [0.0, -h, 0.0, -1.0],
        [-h, 0.0, -1.0, 0.0],
    ];
    2.0 * (normal::mvn_cdf_directional(&bounds, &same, &d_same)
        - normal::mvn_cdf_directional(&bounds, &crossed, &d_crossed))
}

/// Attainable tau range `[F(−1⁺), F(1⁻)]`.
pub fn attainable_range(ctx: &BridgeContext) -> Result<(f64, f64)> {
    Ok((bridge_forward(-R_INTERIOR, ctx)?, bridge_forward(R_INTERIOR, ctx)?))
}

/// Result of inverting the bridge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeInverse {
    pub r: f64,
    pub clamped: bool,
}

/// Solves `F(r) = tau` by bracketed root finding. Taus outside the attainable
/// range clamp to `±(1 − 1e−6)` and are flagged.
pub fn bridge_inverse(tau: f64, ctx: &BridgeContext) -> Result<BridgeInverse> {
    if !tau.is_finite() {
        return Err(FsgcError::InvalidInput(format!("non-finite tau {tau}")));
    }
    if tau == 0.0 {
        return Ok(BridgeInverse { r: 0.0, clamped: false });
    }
    let (lo, hi) = attainable_range(ctx)?;
    if tau < lo {
        return Ok(BridgeInverse { r: -INVERSE_CLAMP, clamped: true });
    }
    if tau > hi {
        return Ok(BridgeInverse { r: INVERSE_CLAMP, clamped: true });
    }
    if ctx.kind == VariableKind::Continuous {
        return Ok(BridgeInverse {
            r: (PI * tau / 2.0).sin(),
            clamped: false,
        });
    }
    let r = brent(|r| bridge_forward(r, ctx).map(|f| f - tau), -R_INTERIOR, R_INTERIOR, lo - tau, hi - tau)?;
    Ok(BridgeInverse { r, clamped: false })
}

/// Brent's method on a bracket with known endpoint values.
fn brent<F: FnMut(f64) -> Result<f64>>(mut f: F, a0: f64, b0: f64, fa0: f64, fb0: f64) -> Result<f64> {
    let (mut a, mut b, mut fa, mut fb) = (a0, b0, fa0, fb0);
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    let (mut c, mut fc) = (b, fb);
    let (mut d, mut e) = (b - a, b - a);
    for _ in 0..200 {
        if (fb > 0.0) == (fc > 0.0) {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * ROOT_TOL;
        let m = 0.5 * (c - b);
        if m.abs() <= tol || fb == 0.0 {
            return Ok(b);
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let rr = fb / fc;
                p = s * (2.0 * m * qq * (qq - rr) - (b - a) * (rr - 1.0));
                q = (qq - 1.0) * (rr - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = m;
            }
        } else {
            d = m;
            e = m;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(m) };
        fb = f(b)?;
    }
    Err(FsgcError::NumericalFailure("bridge inversion did not converge".into()))
}

/// Monte-Carlo estimate of Kendall's tau with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McTau {
    pub tau: f64,
    pub std_error: f64,
}

const MC_CHUNK: usize = 1 << 16;

/// Simulates independent pairs of latent bivariate normals with correlation
/// `r`, generates observed values for the context's kind, and averages the
/// concordance sign. Deterministic in `seed` regardless of thread count.
pub fn mc_tau_oracle(r: f64, ctx: &BridgeContext, n_samples: usize, seed: u64) -> Result<McTau> {
    check_r(r)?;
    if n_samples < 10_000 {
        return Err(FsgcError::InvalidInput(format!(
            "Monte-Carlo oracle needs at least 10^4 samples, got {n_samples}"
        )));
    }
    let s = ((1.0 - r) * (1.0 + r)).sqrt();
    let generate = |v: f64, cuts: &[f64]| -> f64 {
        match ctx.kind {
            VariableKind::Continuous => v,
            VariableKind::Binary | VariableKind::Ordinal { .. } => {
                cuts.iter().filter(|&&c| v >= c).count() as f64
            }
            VariableKind::Truncated => {
                if v > cuts[0] {
                    v.exp()
                } else {
                    0.0
                }
            }
        }
    };
    let chunks = n_samples.div_ceil(MC_CHUNK);
    let sums: Vec<(i64, i64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let len = MC_CHUNK.min(n_samples - c * MC_CHUNK);
            let mut draw = || {
                let z1: f64 = rng.sample(StandardNormal);
                let z2: f64 = rng.sample(StandardNormal);
                let v1 = z1;
                let v2 = r * z1 + s * z2;
                (generate(v1, &ctx.cutoffs_a), generate(v2, &ctx.cutoffs_b))
            };
            let (mut sum, mut nonzero) = (0i64, 0i64);
            for _ in 0..len {
                let (x1, x2) = draw();
                let (y1, y2) = draw();
                let sign = ((x1 - y1) * (x2 - y2)).signum() as i64 * i64::from((x1 - y1) * (x2 - y2) != 0.0);
                sum += sign;
                nonzero += sign.abs();
            }
            (sum, nonzero)
        })
        .collect();
    let (sum, nonzero) = sums.iter().fold((0i64, 0i64), |acc, x| (acc.0 + x.0, acc.1 + x.1));
    let n = n_samples as f64;
    let mean = sum as f64 / n;
    let var = (nonzero as f64 / n - mean * mean) * n / (n - 1.0);
    Ok(McTau {
        tau: mean,
        std_error: (var.max(0.0) / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn continuous_examples() {
        let ctx = BridgeContext::continuous();
        assert_eq!(bridge_forward(0.0, &ctx).unwrap(), 0.0);
        assert!((bridge_forward(0.5, &ctx).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let inv = bridge_inverse(1.0 / 3.0, &ctx).unwrap();
        assert!((inv.r - 0.5).abs() < 1e-8 && !inv.clamped);
    }

    #[test]
    fn binary_examples() {
        let ctx = BridgeContext::binary(0.0, 0.0).unwrap();
        assert!((bridge_forward(1.0, &ctx).unwrap() - 0.5).abs() < 1e-15);
        let skew = BridgeContext::binary(-0.7, 1.3).unwrap();
        assert_eq!(bridge_forward(0.0, &skew).unwrap(), 0.0);
        let inv = bridge_inverse(0.6, &ctx).unwrap();
        assert!(inv.clamped);
        assert_eq!(inv.r, INVERSE_CLAMP);
        assert_eq!(bridge_inverse(0.0, &skew).unwrap().r, 0.0);
    }

    #[test]
    fn ordinal_with_two_levels_reduces_to_binary() {
        // The generic discrete sum with a single cutoff must equal the closed form.
        for &r in &[-0.8, -0.1, 0.35, 0.97] {
            let (tau, _) = discrete_tau(r, &[0.4], &[-0.9]);
            let bin = bridge_forward(r, &BridgeContext::binary(0.4, -0.9).unwrap()).unwrap();
            assert!((tau - bin).abs() < 1e-14);
        }
    }

    #[test]
    fn ordinal_zero_at_independence() {
        let ctx = BridgeContext::ordinal(vec![-0.6, 0.1, 0.6], vec![-1.0, 0.3, 1.2]).unwrap();
        assert!(bridge_forward(0.0, &ctx).unwrap().abs() < 1e-12);
    }

    #[test]
    fn truncated_zero_at_independence() {
        let ctx = BridgeContext::truncated(0.5, -0.2).unwrap();
        assert_eq!(bridge_forward(0.0, &ctx).unwrap(), 0.0);
    }

    #[test]
    fn truncated_with_no_truncation_approaches_continuous() {
        // A far-left cutoff leaves the margin effectively continuous.
        let ctx = BridgeContext::truncated(-9.0, -9.0).unwrap();
        for &r in &[-0.6, 0.3, 0.9] {
            let tt = bridge_forward(r, &ctx).unwrap();
            assert!((tt - 2.0 / PI * f64::asin(r)).abs() < 1e-8, "r = {r}: {tt}");
        }
    }

    #[test]
    fn derivatives_match_differences() {
        let ctxs = [
            BridgeContext::continuous(),
            BridgeContext::binary(0.3, -0.5).unwrap(),
            BridgeContext::ordinal(vec![-0.6, 0.1, 0.6], vec![-0.2, 0.5, 1.4]).unwrap(),
            BridgeContext::truncated(0.5, 0.1).unwrap(),
        ];
        for ctx in &ctxs {
            for &r in &[-0.7, -0.2, 0.1, 0.55, 0.9] {
                let e = 1e-5;
                let fd = (bridge_forward(r + e, ctx).unwrap() - bridge_forward(r - e, ctx).unwrap()) / (2.0 * e);
                let an = bridge_derivative(r, ctx).unwrap();
                assert!((fd - an).abs() < 1e-6 * an.abs().max(1.0), "{:?} r={r}: {fd} vs {an}", ctx.kind());
            }
        }
    }

    #[test]
    fn out_of_domain_is_rejected() {
        assert!(bridge_forward(1.2, &BridgeContext::continuous()).is_err());
        assert!(BridgeContext::binary(f64::INFINITY, 0.0).is_err());
        assert!(BridgeContext::ordinal(vec![0.5, 0.1], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn oracle_is_deterministic() {
        let ctx = BridgeContext::binary(0.0, 0.0).unwrap();
        let a = mc_tau_oracle(0.0, &ctx, 20_000, 7).unwrap();
        let b = mc_tau_oracle(0.0, &ctx, 20_000, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.tau.abs() < 3.0 * a.std_error + 1e-12);
        assert!(mc_tau_oracle(0.0, &ctx, 100, 7).is_err());
    }
}
