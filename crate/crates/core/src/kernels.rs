//! Ratio-shaping kernels.
//!
//! A shaping function `f` maps the probability ratio `r = pi_new / pi_old` into
//! the surrogate objective. Every family here is anchored at `f(1) = 1` and sits
//! below the identity (`f(r) <= r`). The negative-advantage branch uses the
//! point reflection of `f` about `(1, 1)`, `g(r) = 2 - f(2 - r)`.
//!
//! The ANO kernel is built from
//!
//! ```text
//! phi(z) = ln(1 + 2^(-2z)) + 4 / (1 + 2^(-z))
//! f(r)   = C * (phi(-1) - phi((r - 1 - eps) / eps)) + 1,   C = 45 eps / (32 ln 2)
//! ```
//!
//! It is smooth, has its unique maximum at `r = 1 + eps`, a single inflection
//! point beyond the maximum, a slope of `45/16` as `r -> -inf` and a slope that
//! decays to zero as `r -> +inf`.
//!
//! `phi` is evaluated as `softplus(-2 z ln 2) + 4 sigmoid(z ln 2)`, which is the
//! same function but never overflows for extreme ratios.

use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Peak height of the ANO gradient profile: `f'(r) = ANO_SLOPE_SCALE * [...]`.
pub const ANO_SLOPE_SCALE: f64 = 45.0 / 32.0;

/// Limit of the ANO slope as `r -> -inf`.
pub const ANO_LEFT_SLOPE_LIMIT: f64 = 45.0 / 16.0;

/// `|z|` at which the certificate probes the tails.
pub const TAIL_PROBE: f64 = 1e6;

const ANCHOR_TOL: f64 = 1e-12;

/// Trust-region radius `eps`, validated to lie in `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct TrustRegionRadius(f64);

impl TrustRegionRadius {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !epsilon.is_finite() {
            return Err(domain(format!("trust-region radius must be finite, got {epsilon}")));
        }
        if epsilon <= 0.0 || epsilon >= 1.0 {
            return Err(domain(format!(
                "trust-region radius must lie in (0, 1), got {epsilon}"
            )));
        }
        if epsilon > 0.5 {
            log::warn!("trust-region radius {epsilon} > 0.5: the dual's lower anchor 1 - eps approaches 0");
        }
        Ok(Self(epsilon))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for TrustRegionRadius {
    type Error = Error;
    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<TrustRegionRadius> for f64 {
    fn from(value: TrustRegionRadius) -> Self {
        value.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// `f(r) = r`, the unshaped surrogate.
    Identity,
    /// `f(r) = min(r, 1 + eps)`.
    Ppo,
    /// `f(r) = -(r - 1 - eps)^2 / (2 eps) + eps / 2 + 1`.
    Spo,
    /// Redescending kernel built from `phi`.
    Ano,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 4] = [Self::Identity, Self::Ppo, Self::Spo, Self::Ano];

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Ppo => "ppo",
            Self::Spo => "spo",
            Self::Ano => "ano",
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" | "pg" => Ok(Self::Identity),
            "ppo" => Ok(Self::Ppo),
            "spo" => Ok(Self::Spo),
            "ano" => Ok(Self::Ano),
            other => Err(domain(format!("unknown kernel family '{other}'"))),
        }
    }
}

/// Derivative of a shaping function together with the PPO kink flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slope {
    pub value: f64,
    /// Set when `r` sits on a non-differentiable point; `value` is then the
    /// left derivative.
    pub at_kink: bool,
}

/// A kernel family plus its trust-region radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct ShapingFunctionSpec {
    family: KernelFamily,
    radius: TrustRegionRadius,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    family: KernelFamily,
    epsilon: f64,
}

impl TryFrom<RawSpec> for ShapingFunctionSpec {
    type Error = Error;
    fn try_from(raw: RawSpec) -> Result<Self> {
        Self::new(raw.family, raw.epsilon)
    }
}

impl From<ShapingFunctionSpec> for RawSpec {
    fn from(spec: ShapingFunctionSpec) -> Self {
        RawSpec { family: spec.family, epsilon: spec.epsilon() }
    }
}

impl ShapingFunctionSpec {
    /// Builds a spec and checks the anchor `f(1) = 1`.
    pub fn new(family: KernelFamily, epsilon: f64) -> Result<Self> {
        let spec = Self { family, radius: TrustRegionRadius::new(epsilon)? };
        let anchor = spec.value(1.0);
        if (anchor - 1.0).abs() > ANCHOR_TOL {
            return Err(Error::Internal(format!(
                "{family} kernel fails identity anchoring: f(1) = {anchor}"
            )));
        }
        Ok(spec)
    }

    pub fn identity() -> Self {
        Self::new(KernelFamily::Identity, 0.2).expect("identity spec")
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn epsilon(&self) -> f64 {
        self.radius.get()
    }

    /// Normalized offset `z = (r - 1 - eps) / eps`.
    fn offset(&self, r: f64) -> f64 {
        let eps = self.epsilon();
        (r - 1.0 - eps) / eps
    }

    /// `f(r)` without input validation. Infinite `r` is allowed where the
    /// family has a finite limit.
    pub fn value(&self, r: f64) -> f64 {
        let eps = self.epsilon();
        match self.family {
            KernelFamily::Identity => r,
            KernelFamily::Ppo => r.min(1.0 + eps),
            KernelFamily::Spo => {
                let d = r - 1.0 - eps;
                -d * d / (2.0 * eps) + eps / 2.0 + 1.0
            }
            KernelFamily::Ano => {
                ano_scale(eps) * (phi_raw(-1.0) - phi_raw(self.offset(r))) + 1.0
            }
        }
    }

    /// `f'(r)` without input validation.
    pub fn slope(&self, r: f64) -> Slope {
        let eps = self.epsilon();
        match self.family {
            KernelFamily::Identity => Slope { value: 1.0, at_kink: false },
            KernelFamily::Ppo => {
                let kink = 1.0 + eps;
                Slope { value: if r <= kink { 1.0 } else { 0.0 }, at_kink: r == kink }
            }
            KernelFamily::Spo => Slope { value: -(r - 1.0 - eps) / eps, at_kink: false },
            KernelFamily::Ano => {
                Slope { value: ano_slope_with_scale(self.offset(r), ANO_SLOPE_SCALE), at_kink: false }
            }
        }
    }

    /// `g(r) = 2 - f(2 - r)`.
    pub fn dual_value(&self, r: f64) -> f64 {
        2.0 - self.value(2.0 - r)
    }

    /// `g'(r) = f'(2 - r)`.
    pub fn dual_slope(&self, r: f64) -> Slope {
        self.slope(2.0 - r)
    }
}

impl fmt::Display for ShapingFunctionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            KernelFamily::Identity => f.write_str("identity"),
            family => write!(f, "{family}:{}", self.epsilon()),
        }
    }
}

/// Parses `family` or `family:eps` (eps defaults to 0.2).
impl FromStr for ShapingFunctionSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (family, eps) = match s.split_once(':') {
            Some((family, eps)) => {
                let eps = eps
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| domain(format!("bad kernel radius in '{s}': {e}")))?;
                (family, eps)
            }
            None => (s, 0.2),
        };
        Self::new(family.parse()?, eps)
    }
}

fn ano_scale(eps: f64) -> f64 {
    45.0 * eps / (32.0 * LN_2)
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn phi_raw(z: f64) -> f64 {
    softplus(-2.0 * z * LN_2) + 4.0 * sigmoid(z * LN_2)
}

/// ANO slope at offset `z` for an arbitrary leading constant. The shipped
/// kernel uses [`ANO_SLOPE_SCALE`]; other values exist for mutation tests.
#[doc(hidden)]
pub fn ano_slope_with_scale(z: f64, scale: f64) -> f64 {
    let t = z * LN_2;
    scale * (2.0 * sigmoid(-2.0 * t) - 4.0 * sigmoid(t) * sigmoid(-t))
}

fn finite(r: f64, what: &str) -> Result<f64> {
    if r.is_finite() {
        Ok(r)
    } else {
        Err(domain(format!("{what} must be finite, got {r}")))
    }
}

/// The ANO base kernel `phi(z)`.
pub fn phi(z: f64) -> Result<f64> {
    Ok(phi_raw(finite(z, "phi argument")?))
}

/// `f(r)` for the selected family.
pub fn evaluate(spec: &ShapingFunctionSpec, r: f64) -> Result<f64> {
    Ok(spec.value(finite(r, "ratio")?))
}

/// `f'(r)`; at the PPO kink this is the left derivative (see [`gradient_at`]).
pub fn gradient(spec: &ShapingFunctionSpec, r: f64) -> Result<f64> {
    gradient_at(spec, r).map(|s| s.value)
}

pub fn gradient_at(spec: &ShapingFunctionSpec, r: f64) -> Result<Slope> {
    Ok(spec.slope(finite(r, "ratio")?))
}

/// The symmetric dual `g(r) = 2 - f(2 - r)`.
pub fn dual(spec: &ShapingFunctionSpec, r: f64) -> Result<f64> {
    Ok(spec.dual_value(finite(r, "ratio")?))
}

/// Numerator of the derivative of the normalized ANO gradient in `x = 2^-z`.
/// Its unique positive root locates the inflection point.
pub fn inflection_polynomial(x: f64) -> f64 {
    x.powi(5) + 5.0 * x.powi(3) + x * x + 2.0 * x - 1.0
}

/// Root of [`inflection_polynomial`] in `(0, 1)` by bisection, to `|P(x)| < 1e-12`.
pub fn inflection_root() -> f64 {
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut mid = 0.5;
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let p = inflection_polynomial(mid);
        if p.abs() < 1e-14 || hi - lo <= f64::EPSILON {
            break;
        }
        if p < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    mid
}

/// Location of the ANO inflection point, `1 + eps (1 - log2 x*)`.
pub fn ano_inflection_ratio(epsilon: f64) -> f64 {
    1.0 + epsilon * (1.0 - inflection_root().log2())
}

/// Limit of `f_ANO(r)` as `r -> +inf`: `C (phi(-1) - 4) + 1`.
pub fn ano_right_value_limit(epsilon: f64) -> f64 {
    ano_scale(epsilon) * (phi_raw(-1.0) - 4.0) + 1.0
}

/// Geometry of a kernel measured on a finite grid, plus tail probes at
/// `z = +-1e6`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelCertificate {
    pub family: KernelFamily,
    pub epsilon: f64,
    /// First grid point attaining the maximum of `f`.
    pub argmax_ratio: f64,
    /// The maximum is attained on a run of grid points (PPO); `argmax_ratio`
    /// is then its left edge.
    pub argmax_plateau: bool,
    /// `f'` at `z = -1e6`.
    pub left_slope_limit: f64,
    /// `f` at `z = +1e6`.
    pub right_value_limit: f64,
    /// ANO only: root-based inflection location.
    pub inflection_ratio: Option<f64>,
    /// Where the finite-difference second derivative changes sign on the tail.
    pub measured_inflection_ratio: Option<f64>,
    pub sup_abs_gradient_on_grid: f64,
    /// Grid points where `f(r) > r + 1e-9`.
    pub enclosure_violations: usize,
    /// Sign changes of the second derivative for `r > 1 + eps`.
    pub sign_changes_of_second_derivative_on_tail: usize,
}

const ENCLOSURE_TOL: f64 = 1e-9;

pub fn certify(
    spec: &ShapingFunctionSpec,
    grid_lo: f64,
    grid_hi: f64,
    grid_n: usize,
) -> Result<KernelCertificate> {
    if !(grid_lo.is_finite() && grid_hi.is_finite()) || grid_lo >= grid_hi {
        return Err(domain(format!("degenerate grid [{grid_lo}, {grid_hi}]")));
    }
    if grid_n < 1000 {
        return Err(domain(format!("grid needs at least 1000 points, got {grid_n}")));
    }
    let eps = spec.epsilon();
    let h = (grid_hi - grid_lo) / (grid_n - 1) as f64;
    let grid: Vec<f64> = (0..grid_n).map(|i| grid_lo + i as f64 * h).collect();
    let values: Vec<f64> = grid.iter().map(|&r| spec.value(r)).collect();
    let slopes: Vec<f64> = grid.iter().map(|&r| spec.slope(r).value).collect();

    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let argmax = values.iter().position(|&v| v == max).unwrap_or(0);
    let tied = values.iter().filter(|&&v| (v - max).abs() <= 1e-14 * max.abs().max(1.0)).count();

    let enclosure_violations = grid
        .iter()
        .zip(&values)
        .filter(|(&r, &v)| v > r + ENCLOSURE_TOL)
        .count();
    let sup_abs_gradient_on_grid = slopes.iter().fold(0.0_f64, |m, s| m.max(s.abs()));

    let peak = 1.0 + eps;
    let mut sign_changes = 0;
    let mut last_sign = 0.0_f64;
    let mut measured_inflection = None;
    for i in 1..grid_n - 1 {
        if grid[i] <= peak {
            continue;
        }
        let curvature = (slopes[i + 1] - slopes[i - 1]) / (2.0 * h);
        if curvature == 0.0 || !curvature.is_finite() {
            continue;
        }
        let sign = curvature.signum();
        if last_sign != 0.0 && sign != last_sign {
            sign_changes += 1;
            measured_inflection.get_or_insert(grid[i] - 0.5 * h);
        }
        last_sign = sign;
    }

    let inflection_ratio = match spec.family() {
        KernelFamily::Ano => Some(ano_inflection_ratio(eps)),
        _ => None,
    };

    Ok(KernelCertificate {
        family: spec.family(),
        epsilon: eps,
        argmax_ratio: grid[argmax],
        argmax_plateau: tied > 2,
        left_slope_limit: spec.slope(peak - TAIL_PROBE * eps).value,
        right_value_limit: spec.value(peak + TAIL_PROBE * eps),
        inflection_ratio,
        measured_inflection_ratio: measured_inflection,
        sup_abs_gradient_on_grid,
        enclosure_violations,
        sign_changes_of_second_derivative_on_tail: sign_changes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: KernelFamily, eps: f64) -> ShapingFunctionSpec {
        ShapingFunctionSpec::new(family, eps).unwrap()
    }

    // Direct transcription of the textbook formula; only valid for moderate z.
    fn phi_naive(z: f64) -> f64 {
        (1.0 + 2f64.powf(-2.0 * z)).ln() + 4.0 / (1.0 + 2f64.powf(-z))
    }

    #[test]
    fn phi_worked_values() {
        assert!((phi(0.0).unwrap() - (LN_2 + 2.0)).abs() < 1e-15);
        assert!((phi(-1.0).unwrap() - (5f64.ln() + 4.0 / 3.0)).abs() < 1e-15);
        assert!((phi(1e4).unwrap() - 4.0).abs() < 1e-12);
        assert!(phi(f64::NAN).is_err());
        assert!(phi(f64::INFINITY).is_err());
    }

    #[test]
    fn phi_matches_naive_form_where_naive_is_safe() {
        for i in -400..=400 {
            let z = i as f64 * 0.05;
            let (a, b) = (phi(z).unwrap(), phi_naive(z));
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "z={z}: {a} vs {b}");
        }
    }

    #[test]
    fn phi_is_finite_and_positive_at_extremes() {
        for z in [-1e6, -1e3, -50.0, 50.0, 1e3, 1e6] {
            let v = phi(z).unwrap();
            assert!(v.is_finite() && v > 0.0, "phi({z}) = {v}");
        }
    }

    #[test]
    fn evaluate_worked_values() {
        assert!((evaluate(&spec(KernelFamily::Ppo, 0.2), 1.5).unwrap() - 1.2).abs() < 1e-15);
        assert!((evaluate(&spec(KernelFamily::Spo, 0.2), 1.2).unwrap() - 1.1).abs() < 1e-15);
        let c = 45.0 * 0.2 / (32.0 * LN_2);
        let oracle = c * (phi_naive(-1.0) - phi_naive(0.0)) + 1.0;
        let ano = evaluate(&spec(KernelFamily::Ano, 0.2), 1.2).unwrap();
        assert!((ano - oracle).abs() < 1e-14);
        // rounded worked value 1.10129
        assert!((ano - 1.10129).abs() < 5e-6, "{ano}");
        for eps in [0.05, 0.1, 0.2, 0.3, 0.45] {
            assert_eq!(evaluate(&spec(KernelFamily::Ano, eps), 1.0).unwrap(), 1.0);
        }
        assert!(evaluate(&spec(KernelFamily::Ano, 0.2), f64::NAN).is_err());
    }

    #[test]
    fn gradient_worked_values() {
        let ano = spec(KernelFamily::Ano, 0.2);
        assert!(gradient(&ano, 1.2).unwrap().abs() < 1e-15);
        assert!(ano.slope(1.0 + 0.2).value.abs() < 1e-10);
        assert!((gradient(&ano, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((gradient(&ano, -1e6).unwrap() - 2.8125).abs() < 1e-9);
        assert!(gradient(&ano, 1e6).unwrap().abs() < 1e-9);
        assert!(gradient(&ano, f64::INFINITY).is_err());
    }

    #[test]
    fn ppo_kink_returns_left_derivative_and_flags() {
        let ppo = spec(KernelFamily::Ppo, 0.2);
        let at = gradient_at(&ppo, 1.2).unwrap();
        assert_eq!(at, Slope { value: 1.0, at_kink: true });
        assert!(!gradient_at(&ppo, 1.3).unwrap().at_kink);
        assert_eq!(gradient(&ppo, 1.3).unwrap(), 0.0);
    }

    #[test]
    fn dual_worked_values() {
        for family in KernelFamily::ALL {
            assert!((dual(&spec(family, 0.2), 1.0).unwrap() - 1.0).abs() < 1e-15);
        }
        assert!((dual(&spec(KernelFamily::Ppo, 0.2), 0.7).unwrap() - 0.8).abs() < 1e-15);
        let ano = spec(KernelFamily::Ano, 0.2);
        let expected = 2.0 - evaluate(&ano, 1.2).unwrap();
        assert_eq!(dual(&ano, 0.8).unwrap(), expected);
        assert!((expected - 0.89871).abs() < 5e-6);
    }

    #[test]
    fn radius_validation() {
        assert!(TrustRegionRadius::new(0.0).is_err());
        assert!(TrustRegionRadius::new(-0.1).is_err());
        assert!(TrustRegionRadius::new(1.0).is_err());
        assert!(TrustRegionRadius::new(f64::NAN).is_err());
        assert!(TrustRegionRadius::new(0.7).is_ok());
    }

    #[test]
    fn spec_parsing() {
        let s: ShapingFunctionSpec = "ano:0.3".parse().unwrap();
        assert_eq!((s.family(), s.epsilon()), (KernelFamily::Ano, 0.3));
        let s: ShapingFunctionSpec = "PPO".parse().unwrap();
        assert_eq!((s.family(), s.epsilon()), (KernelFamily::Ppo, 0.2));
        assert!("gauss:0.2".parse::<ShapingFunctionSpec>().is_err());
        assert!("ano:0".parse::<ShapingFunctionSpec>().is_err());
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<ShapingFunctionSpec>(&json).unwrap(), s);
    }

    #[test]
    fn inflection_root_is_tight() {
        assert_eq!(inflection_polynomial(0.0), -1.0);
        assert_eq!(inflection_polynomial(1.0), 8.0);
        let x = inflection_root();
        assert!(inflection_polynomial(x).abs() < 1e-12);
        assert!((x - 0.3408).abs() < 1e-4, "{x}");
        assert!((ano_inflection_ratio(0.2) - 1.5106).abs() < 1e-4);
    }

    #[test]
    fn certify_ano() {
        let c = certify(&spec(KernelFamily::Ano, 0.2), -10.0, 10.0, 100_000).unwrap();
        let h = 20.0 / 99_999.0;
        assert!((c.argmax_ratio - 1.2).abs() <= h);
        assert!(!c.argmax_plateau);
        assert_eq!(c.enclosure_violations, 0);
        assert_eq!(c.sign_changes_of_second_derivative_on_tail, 1);
        assert!(c.sup_abs_gradient_on_grid <= ANO_LEFT_SLOPE_LIMIT + 1e-6);
        assert!((c.right_value_limit - ano_right_value_limit(0.2)).abs() < 1e-9);
        assert!((c.right_value_limit - 0.57102).abs() < 1e-5);
        let measured = c.measured_inflection_ratio.unwrap();
        assert!((measured - c.inflection_ratio.unwrap()).abs() <= 2.0 * h);

        let c3 = certify(&spec(KernelFamily::Ano, 0.3), -10.0, 10.0, 10_000).unwrap();
        assert!((c3.left_slope_limit - ANO_LEFT_SLOPE_LIMIT).abs() < 1e-9);
    }

    #[test]
    fn certify_ppo_and_spo() {
        let ppo = certify(&spec(KernelFamily::Ppo, 0.2), -10.0, 10.0, 100_001).unwrap();
        assert!(ppo.argmax_plateau);
        assert!((ppo.argmax_ratio - 1.2).abs() < 1e-3);
        assert!(ppo.sup_abs_gradient_on_grid <= 1.0);
        assert_eq!(ppo.inflection_ratio, None);

        let narrow = certify(&spec(KernelFamily::Spo, 0.2), -1.0, 3.0, 10_000).unwrap();
        let wide = certify(&spec(KernelFamily::Spo, 0.2), -10.0, 10.0, 10_000).unwrap();
        assert_eq!(wide.sign_changes_of_second_derivative_on_tail, 0);
        assert!(wide.sup_abs_gradient_on_grid > narrow.sup_abs_gradient_on_grid);
        assert_eq!(wide.enclosure_violations, 0);
    }

    #[test]
    fn certify_rejects_degenerate_grids() {
        let s = spec(KernelFamily::Ano, 0.2);
        assert!(certify(&s, 1.0, 1.0, 5000).is_err());
        assert!(certify(&s, 2.0, 1.0, 5000).is_err());
        assert!(certify(&s, 0.0, 1.0, 999).is_err());
        assert!(certify(&s, f64::NEG_INFINITY, 1.0, 5000).is_err());
    }

    #[test]
    fn spo_gradient_explodes_past_ano_bound() {
        let eps = 0.2;
        let g = gradient(&spec(KernelFamily::Spo, eps), 1.0 + eps + 10.0 * eps).unwrap();
        assert!(g.abs() > ANO_LEFT_SLOPE_LIMIT);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn family() -> impl Strategy<Value = KernelFamily> {
            prop::sample::select(KernelFamily::ALL.to_vec())
        }

        proptest! {
            #[test]
            fn dual_is_point_reflection(fam in family(), eps in 0.01f64..0.9, r in -100.0f64..100.0) {
                let s = spec(fam, eps);
                prop_assert_eq!(s.dual_value(r), 2.0 - s.value(2.0 - r));
                // reflecting twice gives f back
                let back = 2.0 - s.dual_value(2.0 - r);
                prop_assert!((back - s.value(r)).abs() <= 1e-12 * s.value(r).abs().max(1.0));
            }

            #[test]
            fn enclosure(fam in family(), eps in 0.01f64..0.9, r in -1e3f64..1e3) {
                let s = spec(fam, eps);
                prop_assert!(s.value(r) <= r + 1e-9);
                prop_assert!(s.dual_value(r) >= r - 1e-9);
            }

            #[test]
            fn ano_sign_of_slope(eps in 0.01f64..0.9, d in 1e-6f64..50.0) {
                let s = spec(KernelFamily::Ano, eps);
                prop_assert!(s.slope(1.0 + eps - d * eps).value > 0.0);
                prop_assert!(s.slope(1.0 + eps + d * eps).value < 0.0);
            }
        }
    }
}
