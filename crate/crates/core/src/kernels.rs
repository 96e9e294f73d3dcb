//! Robust kernel family: cost kappa, influence psi = dkappa/dx, and the IRLS
//! weight omega(x) = psi(x) / x.
//!
//! The named kinds are fixed shapes of the general alpha-parameterized family
//! (L2 <-> alpha=2, Charbonnier <-> alpha=1, Cauchy <-> alpha=0,
//! Geman-McClure <-> alpha=-2), evaluated through closed forms so the
//! removable singularities of the general expression never arise. L1 is the
//! non-smooth absolute-value kernel and is kept distinct from Charbonnier.
//!
//! Normalization: kappa_L2(x) = (x/c)^2 / 2, so the L2 IRLS weight is the
//! constant 1/c^2 and IRLS with L2 at c=1 reduces to unweighted least squares.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Default floor guarding the 1/x division in the IRLS weight. Small enough
/// not to perturb optimization, large enough to bound the L1 weight.
pub const DEFAULT_WEIGHT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    L2,
    L1,
    Charbonnier,
    Cauchy,
    #[serde(rename = "geman_mcclure")]
    GemanMcClure,
    BarronGeneral,
}

/// Kernel selector: kind, shape alpha (BarronGeneral only) and scale c.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// Shape parameter of the general family; ignored by named kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub scale: f64,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, scale: f64) -> Self {
        KernelSpec {
            kind,
            alpha: None,
            scale,
        }
    }

    pub fn barron(alpha: f64, scale: f64) -> Self {
        KernelSpec {
            kind: KernelKind::BarronGeneral,
            alpha: Some(alpha),
            scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.scale.is_finite() || self.scale <= 0.0 {
            return Err(Error::invalid(format!(
                "kernel scale must be finite and > 0, got {}",
                self.scale
            )));
        }
        if self.kind == KernelKind::BarronGeneral {
            let alpha = self.alpha.ok_or_else(|| {
                Error::invalid("barron_general requires an alpha shape parameter")
            })?;
            if !alpha.is_finite() {
                return Err(Error::invalid("barron_general alpha must be finite"));
            }
            if alpha == 2.0 || alpha == 0.0 {
                return Err(Error::invalid(format!(
                    "alpha = {} is a removable singularity of the general family; \
                     use the matching named kind instead",
                    alpha
                )));
            }
        }
        Ok(())
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::new(KernelKind::Charbonnier, 1.0)
    }
}

fn check_residual(x: f64) -> Result<()> {
    if !x.is_finite() || x < 0.0 {
        return Err(Error::invalid(format!(
            "residual magnitude must be finite and >= 0, got {x}"
        )));
    }
    Ok(())
}

/// Kernel cost kappa(x). Zero at zero and monotonically non-decreasing.
pub fn kernel_value(x: f64, spec: &KernelSpec) -> Result<f64> {
    spec.validate()?;
    check_residual(x)?;
    let c = spec.scale;
    let u = (x / c) * (x / c);
    Ok(match spec.kind {
        KernelKind::L2 => 0.5 * u,
        KernelKind::L1 => x / c,
        // sqrt(u+1) - 1 rewritten to avoid cancellation for small u
        KernelKind::Charbonnier => u / ((u + 1.0).sqrt() + 1.0),
        KernelKind::Cauchy => (0.5 * u).ln_1p(),
        KernelKind::GemanMcClure => 2.0 * u / (u + 4.0),
        KernelKind::BarronGeneral => {
            let alpha = spec.alpha.expect("validated");
            let z = (alpha - 2.0).abs();
            // (u/z + 1)^(alpha/2) - 1, cancellation-free for small u
            (z / alpha) * (0.5 * alpha * (u / z).ln_1p()).exp_m1()
        }
    })
}

/// Influence psi(x) = dkappa/dx.
pub fn influence(x: f64, spec: &KernelSpec) -> Result<f64> {
    spec.validate()?;
    check_residual(x)?;
    Ok(match spec.kind {
        KernelKind::L1 => 1.0 / spec.scale,
        _ => x * weight_core(x, spec),
    })
}

/// IRLS weight omega(x) = psi(m) / m with m = max(x, floor); the floor guards
/// the 1/x division so the weight stays bounded for the non-smooth kinds.
pub fn irls_weight(x: f64, spec: &KernelSpec, floor: f64) -> Result<f64> {
    spec.validate()?;
    check_residual(x)?;
    if !floor.is_finite() || floor <= 0.0 {
        return Err(Error::invalid(format!(
            "weight floor must be finite and > 0, got {floor}"
        )));
    }
    let m = x.max(floor);
    Ok(match spec.kind {
        KernelKind::L1 => 1.0 / (spec.scale * m),
        _ => weight_core(m, spec),
    })
}

/// psi(x)/x in closed form. For every smooth kind the expression has no
/// singularity at x = 0, which is what makes omega well defined there.
fn weight_core(x: f64, spec: &KernelSpec) -> f64 {
    let c = spec.scale;
    let c2 = c * c;
    let u = (x / c) * (x / c);
    match spec.kind {
        KernelKind::L2 => 1.0 / c2,
        KernelKind::L1 => unreachable!("L1 handled by callers"),
        KernelKind::Charbonnier => 1.0 / (c2 * (u + 1.0).sqrt()),
        KernelKind::Cauchy => 2.0 / (c2 * (u + 2.0)),
        KernelKind::GemanMcClure => {
            let d = u + 4.0;
            16.0 / (c2 * d * d)
        }
        KernelKind::BarronGeneral => {
            let alpha = spec.alpha.expect("validated");
            let z = (alpha - 2.0).abs();
            ((0.5 * alpha - 1.0) * (u / z).ln_1p()).exp() / c2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const NAMED: [KernelKind; 5] = [
        KernelKind::L2,
        KernelKind::L1,
        KernelKind::Charbonnier,
        KernelKind::Cauchy,
        KernelKind::GemanMcClure,
    ];

    fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let t = (i as f64 + 0.5) / n as f64;
                lo * (hi / lo).powf(t)
            })
            .collect()
    }

    #[test]
    fn kappa_is_zero_at_zero() {
        for kind in NAMED {
            let spec = KernelSpec::new(kind, 0.7);
            assert_eq!(kernel_value(0.0, &spec).unwrap(), 0.0, "{kind:?}");
        }
        let spec = KernelSpec::barron(-1.3, 0.7);
        assert_eq!(kernel_value(0.0, &spec).unwrap(), 0.0);
    }

    #[test]
    fn hand_evaluated_costs() {
        // 2 x^2 / (x^2 + 4) at x = 1, c = 1
        let gm = KernelSpec::new(KernelKind::GemanMcClure, 1.0);
        assert!((kernel_value(1.0, &gm).unwrap() - 0.4).abs() < 1e-15);
        // (x/c)^2 / 2 at x = 2, c = 1
        let l2 = KernelSpec::new(KernelKind::L2, 1.0);
        assert!((kernel_value(2.0, &l2).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_weights() {
        let l2 = KernelSpec::new(KernelKind::L2, 1.0);
        for x in [0.0, 0.3, 5.0] {
            assert_eq!(irls_weight(x, &l2, DEFAULT_WEIGHT_FLOOR).unwrap(), 1.0);
        }
        // psi(x) = 16 x / (x^2+4)^2, so omega(0) = 16/16 = 1
        let gm = KernelSpec::new(KernelKind::GemanMcClure, 1.0);
        assert!((irls_weight(0.0, &gm, DEFAULT_WEIGHT_FLOOR).unwrap() - 1.0).abs() < 1e-12);
        // psi = 1, omega = 1/|x|
        let l1 = KernelSpec::new(KernelKind::L1, 1.0);
        assert!((irls_weight(2.0, &l1, 1e-8).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kappa_monotone_nondecreasing() {
        let mut specs: Vec<KernelSpec> = NAMED
            .iter()
            .map(|&k| KernelSpec::new(k, 0.5))
            .collect();
        specs.push(KernelSpec::barron(-4.0, 0.5));
        specs.push(KernelSpec::barron(1.5, 0.5));
        for spec in specs {
            let mut prev = 0.0;
            for x in log_grid(1e-3, 20.0, 200) {
                let v = kernel_value(x, &spec).unwrap();
                assert!(v >= prev - 1e-15, "{spec:?} at {x}");
                prev = v;
            }
        }
    }

    #[test]
    fn influence_matches_finite_differences() {
        let mut specs: Vec<KernelSpec> = Vec::new();
        for c in [0.25, 1.0, 3.0] {
            for kind in NAMED {
                specs.push(KernelSpec::new(kind, c));
            }
            for alpha in [1.5, 0.5, -1.0, -4.0] {
                specs.push(KernelSpec::barron(alpha, c));
            }
        }
        for spec in &specs {
            for x in log_grid(0.0101, 9.99, 60) {
                let h = 6e-6 * x;
                let fd = (kernel_value(x + h, spec).unwrap()
                    - kernel_value(x - h, spec).unwrap())
                    / (2.0 * h);
                let psi = influence(x, spec).unwrap();
                let rel = (psi - fd).abs() / fd.abs().max(1e-300);
                assert!(rel <= 1e-6, "{spec:?} at x={x}: psi={psi} fd={fd} rel={rel}");
            }
        }
    }

    #[test]
    fn irls_identity_x_times_weight_equals_psi() {
        let floor = DEFAULT_WEIGHT_FLOOR;
        let mut specs: Vec<KernelSpec> = NAMED
            .iter()
            .map(|&k| KernelSpec::new(k, 0.8))
            .collect();
        specs.push(KernelSpec::barron(-3.0, 0.8));
        for spec in &specs {
            for x in log_grid(1e-7, 10.0, 80) {
                if x < floor {
                    continue;
                }
                let lhs = x * irls_weight(x, spec, floor).unwrap();
                let psi = influence(x, spec).unwrap();
                // identical expression trees for the smooth kinds; L1 incurs
                // one rounding step in (1/(c x)) * x
                let tol = psi.abs() * 1e-15;
                assert!(
                    (lhs - psi).abs() <= tol,
                    "{spec:?} at x={x}: {lhs} vs {psi}"
                );
            }
        }
    }

    #[test]
    fn barron_limits_match_named_closed_forms() {
        // relative agreement; at x = 10 the absolute gap of the alpha->2
        // limit is O(3e-2) while the relative gap stays below 1e-3
        let grid = log_grid(0.0101, 9.99, 60);
        let l2 = KernelSpec::new(KernelKind::L2, 1.0);
        let cauchy = KernelSpec::new(KernelKind::Cauchy, 1.0);
        for da in [1e-4, -1e-4] {
            let near2 = KernelSpec::barron(2.0 + da, 1.0);
            let near0 = KernelSpec::barron(da, 1.0);
            for &x in &grid {
                let a = kernel_value(x, &near2).unwrap();
                let b = kernel_value(x, &l2).unwrap();
                assert!(
                    (a - b).abs() <= 1e-3 * b.abs().max(1.0),
                    "alpha=2{da:+} at x={x}: {a} vs {b}"
                );
                let a = kernel_value(x, &near0).unwrap();
                let b = kernel_value(x, &cauchy).unwrap();
                assert!(
                    (a - b).abs() <= 1e-3 * b.abs().max(1.0),
                    "alpha=0{da:+} at x={x}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn redescending_influence_ordering_at_large_x() {
        let c = 0.6;
        let x = 10.0 * c;
        let psi_l2 = influence(x, &KernelSpec::new(KernelKind::L2, c)).unwrap();
        let psi_ch = influence(x, &KernelSpec::new(KernelKind::Charbonnier, c)).unwrap();
        let psi_gm = influence(x, &KernelSpec::new(KernelKind::GemanMcClure, c)).unwrap();
        assert!(psi_l2 > psi_ch && psi_ch > psi_gm);
    }

    #[test]
    fn invalid_arguments_are_rejected() {
        let spec = KernelSpec::new(KernelKind::L2, 1.0);
        assert!(kernel_value(f64::NAN, &spec).is_err());
        assert!(kernel_value(-1.0, &spec).is_err());
        assert!(kernel_value(1.0, &KernelSpec::new(KernelKind::L2, 0.0)).is_err());
        assert!(kernel_value(1.0, &KernelSpec::new(KernelKind::L2, -2.0)).is_err());
        assert!(kernel_value(1.0, &KernelSpec::barron(2.0, 1.0)).is_err());
        assert!(kernel_value(1.0, &KernelSpec::barron(0.0, 1.0)).is_err());
        assert!(kernel_value(1.0, &KernelSpec::barron(f64::NEG_INFINITY, 1.0)).is_err());
        assert!(irls_weight(1.0, &spec, 0.0).is_err());
    }

    #[test]
    fn kernel_spec_json_shape() {
        let spec = KernelSpec::barron(-2.5, 0.01);
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(text, r#"{"kind":"barron_general","alpha":-2.5,"scale":0.01}"#);
        let named: KernelSpec =
            serde_json::from_str(r#"{"kind":"geman_mcclure","scale":0.25}"#).unwrap();
        assert_eq!(named.kind, KernelKind::GemanMcClure);
        assert_eq!(named.alpha, None);
    }
}
