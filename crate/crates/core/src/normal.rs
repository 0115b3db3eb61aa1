//! Standard normal kernels: univariate density, distribution and quantile,
//! the bivariate distribution (Genz's BVND), and lower
//! orthant probabilities up to dimension four by Plackett reduction.

#![allow(clippy::excessive_precision)]

use std::f64::consts::{PI, SQRT_2};

use libm::erfc;
use statrs::function::erf::erfc_inv;

use crate::error::{FsgcError, Result};
use crate::quad;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_677_939_946_059_934_381_87;

/// Standard normal density.
#[inline]
pub fn pdf(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
    }
}

/// Standard normal distribution function.
#[inline]
pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal quantile. Returns `±∞` at the endpoints and NaN outside `[0, 1]`.
pub fn quantile(p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    // One Halley step against the accurate cdf polishes the initial inverse.
    let x = -SQRT_2 * erfc_inv(2.0 * p);
    let e = cdf(x) - p;
    let u = e / pdf(x);
    if u.is_finite() {
        x - u / (1.0 + 0.5 * x * u)
    } else {
        x
    }
}

// Gauss–Legendre (weight, abscissa) pairs from Genz's tvpack.
const GL6: [(f64, f64); 3] = [
    (0.1713244923791705e+00, -0.9324695142031522e+00),
    (0.3607615730481384e+00, -0.6612093864662647e+00),
    (0.4679139345726904e+00, -0.2386191860831970e+00),
];

const GL12: [(f64, f64); 6] = [
    (0.4717533638651177e-01, -0.9815606342467191e+00),
    (0.1069393259953183e+00, -0.9041172563704750e+00),
    (0.1600783285433464e+00, -0.7699026741943050e+00),
    (0.2031674267230659e+00, -0.5873179542866171e+00),
    (0.2334925365383547e+00, -0.3678314989981802e+00),
    (0.2491470458134029e+00, -0.1252334085114692e+00),
];

const GL20: [(f64, f64); 10] = [
    (0.1761400713915212e-01, -0.9931285991850949e+00),
    (0.4060142980038694e-01, -0.9639719272779138e+00),
    (0.6267204833410906e-01, -0.9122344282513259e+00),
    (0.8327674157670475e-01, -0.8391169718222188e+00),
    (0.1019301198172404e+00, -0.7463319064601508e+00),
    (0.1181945319615184e+00, -0.6360536807265150e+00),
    (0.1316886384491766e+00, -0.5108670019508271e+00),
    (0.1420961093183821e+00, -0.3737060887154196e+00),
    (0.1491729864726037e+00, -0.2277858511416451e+00),
    (0.1527533871307259e+00, -0.7652652113349733e-01),
];

/// Upper bivariate probability `P(X > dh, Y > dk)` for standard normals with
/// correlation `r` (Drezner–Wesolowsky with Genz's modifications near |r| = 1).
fn bvnd(dh: f64, dk: f64, r: f64) -> f64 {
    let h = dh;
    let mut k = dk;
    let mut hk = h * k;
    let quad: &[(f64, f64)] = if r.abs() < 0.3 {
        &GL6
    } else if r.abs() < 0.75 {
        &GL12
    } else {
        &GL20
    };
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hs = (h * h + k * k) / 2.0;
        let asr = r.asin();
        for &(w, x) in quad {
            for is in [-1.0, 1.0] {
                let sn = (asr * (is * x + 1.0) / 2.0).sin();
                bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            }
        }
        bvn * asr / (4.0 * PI) + cdf(-h) * cdf(-k)
    } else {
        if r < 0.0 {
            k = -k;
            hk = -hk;
        }
        if r.abs() < 1.0 {
            let a_s = (1.0 - r) * (1.0 + r);
            let mut a = a_s.sqrt();
            let b_s = (h - k) * (h - k);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 16.0;
            let asr = -(b_s / a_s + hk) / 2.0;
            if asr > -100.0 {
                bvn = a
                    * asr.exp()
                    * (1.0 - c * (b_s - a_s) * (1.0 - d * b_s / 5.0) / 3.0
                        + c * d * a_s * a_s / 5.0);
            }
            if hk > -100.0 {
                let b = b_s.sqrt();
                bvn -= (-hk / 2.0).exp()
                    * (2.0 * PI).sqrt()
                    * cdf(-b / a)
                    * b
                    * (1.0 - c * b_s * (1.0 - d * b_s / 5.0) / 3.0);
            }
            a /= 2.0;
            for &(w, x) in quad {
                for is in [-1.0, 1.0] {
                    let xs = (a * (is * x + 1.0)).powi(2);
                    let rs = (1.0 - xs).sqrt();
                    let asr = -(b_s / xs + hk) / 2.0;
                    if asr > -100.0 {
                        bvn += a
                            * w
                            * asr.exp()
                            * ((-hk * xs / (2.0 * (1.0 + rs).powi(2))).exp() / rs
                                - (1.0 + c * xs * (1.0 + d * xs)));
                    }
                }
            }
            bvn = -bvn / (2.0 * PI);
        }
        if r > 0.0 {
            bvn += cdf(-h.max(k));
        } else {
            bvn = -bvn;
            if k > h {
                if h < 0.0 {
                    bvn += cdf(k) - cdf(h);
                } else {
                    bvn += cdf(-h) - cdf(-k);
                }
            }
        }
        bvn
    }
}

/// Bivariate normal distribution `Φ₂(h, k; r) = P(X < h, Y < k)`.
/// Infinite limits are handled exactly; `r` must lie in `[-1, 1]`.
pub fn bvn_cdf(h: f64, k: f64, r: f64) -> f64 {
    if h == f64::NEG_INFINITY || k == f64::NEG_INFINITY {
        return 0.0;
    }
    if h == f64::INFINITY {
        return cdf(k);
    }
    if k == f64::INFINITY {
        return cdf(h);
    }
    bvnd(-h, -k, r).clamp(0.0, 1.0)
}

/// Bivariate normal density `φ₂(h, k; r)`; zero at infinite arguments.
pub fn bvn_pdf(h: f64, k: f64, r: f64) -> f64 {
    if h.is_infinite() || k.is_infinite() {
        return 0.0;
    }
    let s = (1.0 - r) * (1.0 + r);
    if s <= 0.0 {
        return 0.0;
    }
    let q = (h * h - 2.0 * r * h * k + k * k) / s;
    (-0.5 * q).exp() / (2.0 * PI * s.sqrt())
}

/// Fixed-size correlation matrix for the low-dimensional orthant routines.
pub type SmallCorr = [[f64; 4]; 4];

const PLACKETT_TOL: f64 = 1e-12;
const PLACKETT_SEGMENTS: usize = 400;

/// Sum over pairs `i < j` of `weights[i][j] · φ₂(b_i, b_j; Σ_ij) · Φ_{n−2}(·)`,
/// the conditional probability of the remaining coordinates given
/// `(X_i, X_j) = (b_i, b_j)` under `sigma`. This is `Σ_ij w_ij ∂Φ_n/∂Σ_ij`.
fn pair_sensitivity(b: &[f64], sigma: &SmallCorr, weights: &SmallCorr) -> f64 {
    let n = b.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let w = weights[i][j];
            if w == 0.0 {
                continue;
            }
            let rho = sigma[i][j];
            let dens = bvn_pdf(b[i], b[j], rho);
            if dens == 0.0 {
                continue;
            }
            let det = 1.0 - rho * rho;
            let rest: Vec<usize> = (0..n).filter(|&r| r != i && r != j).collect();
            // Conditional mean and covariance of the remaining coordinates.
            let mut mean = [0.0; 2];
            let mut cross = [[0.0; 2]; 2];
            for (a, &r) in rest.iter().enumerate() {
                let (ci, cj) = (sigma[r][i], sigma[r][j]);
                cross[a] = [(ci - rho * cj) / det, (cj - rho * ci) / det];
                mean[a] = cross[a][0] * b[i] + cross[a][1] * b[j];
            }
            let cond = match rest.len() {
                0 => 1.0,
                1 => {
                    let r = rest[0];
                    let var = 1.0 - cross[0][0] * sigma[r][i] - cross[0][1] * sigma[r][j];
                    standardized_cdf(b[r] - mean[0], var)
                }
                _ => {
                    let (r, s) = (rest[0], rest[1]);
                    let var_r = 1.0 - cross[0][0] * sigma[r][i] - cross[0][1] * sigma[r][j];
                    let var_s = 1.0 - cross[1][0] * sigma[s][i] - cross[1][1] * sigma[s][j];
                    let cov = sigma[r][s] - cross[0][0] * sigma[s][i] - cross[0][1] * sigma[s][j];
                    let (var_r, var_s) = (var_r.max(0.0), var_s.max(0.0));
                    if var_r <= 1e-300 || var_s <= 1e-300 {
                        standardized_cdf(b[r] - mean[0], var_r)
                            .min(standardized_cdf(b[s] - mean[1], var_s))
                    } else {
                        let (sr, ss) = (var_r.sqrt(), var_s.sqrt());
                        let rc = (cov / (sr * ss)).clamp(-1.0, 1.0);
                        bvn_cdf((b[r] - mean[0]) / sr, (b[s] - mean[1]) / ss, rc)
                    }
                }
            };
            total += w * dens * cond;
        }
    }
    total
}

fn standardized_cdf(x: f64, var: f64) -> f64 {
    if var <= 1e-300 {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            0.0
        } else {
            0.5
        }
    } else {
        cdf(x / var.sqrt())
    }
}

/// Lower orthant probability `P(X_1 < b_1, …, X_n < b_n)` for a standard
/// normal vector with correlation `corr` (n ≤ 4). `+∞` limits marginalize the
/// coordinate out; any `−∞` limit gives zero.
///
/// Dimensions three and four integrate Plackett's identity along the path
/// `Σ(t) = I + t (R − I)` with the substitution `t = 1 − u²`, which removes the
/// square-root endpoint behaviour of nearly singular targets.
pub fn mvn_cdf(b: &[f64], corr: &SmallCorr) -> Result<f64> {
    if b.len() > 4 {
        return Err(FsgcError::InvalidInput(format!(
            "orthant probabilities supported up to dimension 4, got {}",
            b.len()
        )));
    }
    if b.iter().any(|x| x.is_nan()) {
        return Err(FsgcError::InvalidInput("NaN orthant limit".into()));
    }
    if b.contains(&f64::NEG_INFINITY) {
        return Ok(0.0);
    }
    let keep: Vec<usize> = (0..b.len()).filter(|&i| b[i].is_finite()).collect();
    let bb: Vec<f64> = keep.iter().map(|&i| b[i]).collect();
    let mut r = [[0.0; 4]; 4];
    for (a, &i) in keep.iter().enumerate() {
        for (c, &j) in keep.iter().enumerate() {
            r[a][c] = if a == c { 1.0 } else { corr[i][j] };
        }
    }
    match bb.len() {
        0 => Ok(1.0),
        1 => Ok(cdf(bb[0])),
        2 => Ok(bvn_cdf(bb[0], bb[1], r[0][1])),
        n => {
            let independent: f64 = bb.iter().map(|&x| cdf(x)).product();
            let integrand = |u: f64| {
                let t = 1.0 - u * u;
                let mut sigma = [[0.0; 4]; 4];
                for i in 0..n {
                    for j in 0..n {
                        sigma[i][j] = if i == j { 1.0 } else { t * r[i][j] };
                    }
                }
                2.0 * u * pair_sensitivity(&bb, &sigma, &r)
            };
            let res = quad::integrate(integrand, 0.0, 1.0, PLACKETT_TOL, PLACKETT_SEGMENTS);
            if !res.converged && res.error > 1e-8 {
                return Err(FsgcError::NumericalFailure(format!(
                    "orthant quadrature did not converge (error estimate {:e})",
                    res.error
                )));
            }
            Ok((independent + res.value).clamp(0.0, 1.0))
        }
    }
}

/// Directional derivative of `mvn_cdf(b, corr)` along the symmetric
/// perturbation `dcorr` (only the strict upper triangle is read). Limits
/// must be finite.
pub fn mvn_cdf_directional(b: &[f64], corr: &SmallCorr, dcorr: &SmallCorr) -> f64 {
    pair_sensitivity(b, corr, dcorr)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values from 40-digit quadrature of φ(x)Φ((k − r x)/√(1−r²)).
    const BVN_REFERENCE: [(f64, f64, f64, f64); 8] = [
        (0.3, -0.7, 0.5, 0.20652377978573901),
        (1.2, 0.4, -0.8, 0.54079324097549159),
        (-1.0, -1.5, 0.95, 0.065411428617430168),
        (2.5, 2.5, 0.9, 0.99079890446129557),
        (-2.5, 1.0, -0.95, 5.4610386524992249e-9),
        (0.0, 0.0, -0.99, 0.022526706822206062),
        (0.7, -0.2, 0.0, 0.3189364332193854),
        (-0.3, 0.8, -0.93, 0.17568510510356527),
    ];

    #[test]
    fn quantile_matches_table_values() {
        assert_eq!(quantile(0.5), 0.0);
        assert!((quantile(0.3) + 0.524_400_512_708_041_2).abs() < 1e-14);
        assert!((quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-13);
        assert!((cdf(quantile(0.01)) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn bvn_origin_closed_form() {
        for &r in &[-0.999, -0.93, -0.5, 0.0, 0.2, 0.8, 0.93, 0.999] {
            let expect = 0.25 + f64::asin(r) / (2.0 * PI);
            assert!((bvn_cdf(0.0, 0.0, r) - expect).abs() < 1e-15, "r = {r}");
        }
    }

    #[test]
    fn bvn_reference_values() {
        for &(h, k, r, expect) in &BVN_REFERENCE {
            let got = bvn_cdf(h, k, r);
            assert!((got - expect).abs() < 1e-14, "{h} {k} {r}: {got} vs {expect}");
            assert!((bvn_cdf(k, h, r) - got).abs() < 1e-15);
        }
    }

    #[test]
    fn bvn_limits() {
        assert_eq!(bvn_cdf(0.3, 0.8, 1.0), cdf(0.3));
        assert!((bvn_cdf(0.3, 0.8, -1.0) - (cdf(0.3) + cdf(0.8) - 1.0)).abs() < 1e-15);
        assert!((bvn_cdf(0.3, -0.8, -1.0)).abs() < 1e-15);
        assert_eq!(bvn_cdf(f64::INFINITY, 0.4, 0.3), cdf(0.4));
        assert_eq!(bvn_cdf(f64::NEG_INFINITY, 0.4, 0.3), 0.0);
    }

    #[test]
    fn bvn_density_derivative() {
        // d/dr Φ₂(h, k; r) = φ₂(h, k; r).
        for &(h, k, r) in &[(0.3, -0.4, 0.2), (1.1, 0.9, 0.85), (-0.5, 0.6, -0.94)] {
            let e = 1e-6;
            let fd = (bvn_cdf(h, k, r + e) - bvn_cdf(h, k, r - e)) / (2.0 * e);
            assert!((fd - bvn_pdf(h, k, r)).abs() < 1e-8);
        }
    }

    fn equicorr(n: usize, rho: f64) -> SmallCorr {
        let mut r = [[0.0; 4]; 4];
        for (i, row) in r.iter_mut().enumerate().take(n) {
            for (j, v) in row.iter_mut().enumerate().take(n) {
                *v = if i == j { 1.0 } else { rho };
            }
        }
        r
    }

    #[test]
    fn trivariate_orthant_closed_form() {
        let mut r = equicorr(3, 0.0);
        let entries = [(0, 1, 0.3), (0, 2, -0.45), (1, 2, 0.6)];
        for &(i, j, v) in &entries {
            r[i][j] = v;
            r[j][i] = v;
        }
        let expect = 0.125 + (0.3f64.asin() + (-0.45f64).asin() + 0.6f64.asin()) / (4.0 * PI);
        let got = mvn_cdf(&[0.0, 0.0, 0.0], &r).unwrap();
        assert!((got - expect).abs() < 1e-11, "{got} vs {expect}");
    }

    #[test]
    fn equicorrelated_half_orthants() {
        // With ρ = 1/2 the n-dimensional orthant probability is 1/(n+1).
        for n in 2..=4 {
            let got = mvn_cdf(&vec![0.0; n], &equicorr(n, 0.5)).unwrap();
            assert!((got - 1.0 / (n as f64 + 1.0)).abs() < 1e-10, "n = {n}: {got}");
        }
    }

    #[test]
    fn block_diagonal_factorizes() {
        let mut r = equicorr(4, 0.0);
        r[0][2] = 0.7;
        r[2][0] = 0.7;
        r[1][3] = -0.4;
        r[3][1] = -0.4;
        let b = [0.3, -0.2, 1.1, 0.5];
        let expect = bvn_cdf(b[0], b[2], 0.7) * bvn_cdf(b[1], b[3], -0.4);
        let got = mvn_cdf(&b, &r).unwrap();
        assert!((got - expect).abs() < 1e-11);
    }

    #[test]
    fn infinite_limits_marginalize() {
        let r = equicorr(3, 0.4);
        let got = mvn_cdf(&[0.2, f64::INFINITY, -0.1], &r).unwrap();
        assert!((got - bvn_cdf(0.2, -0.1, 0.4)).abs() < 1e-15);
        assert_eq!(mvn_cdf(&[0.2, f64::NEG_INFINITY, -0.1], &r).unwrap(), 0.0);
    }

    #[test]
    fn directional_derivative_matches_differences() {
        let mut r = equicorr(4, 0.3);
        r[0][3] = -0.2;
        r[3][0] = -0.2;
        let mut dr = [[0.0; 4]; 4];
        dr[0][1] = 1.0;
        dr[1][0] = 1.0;
        dr[2][3] = 0.5;
        dr[3][2] = 0.5;
        let b = [0.4, -0.3, 0.0, 0.8];
        let e = 1e-5;
        let shift = |s: f64| {
            let mut m = r;
            for i in 0..4 {
                for j in 0..4 {
                    m[i][j] += s * dr[i][j];
                }
            }
            mvn_cdf(&b, &m).unwrap()
        };
        let fd = (shift(e) - shift(-e)) / (2.0 * e);
        let an = mvn_cdf_directional(&b, &r, &dr);
        assert!((fd - an).abs() < 1e-7, "{fd} vs {an}");
    }
}
