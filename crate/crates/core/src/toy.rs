//! One-dimensional Gaussian fits to a Gaussian mixture under forward and
//! reverse KL, by deterministic trapezoidal quadrature.
//!
//! The forward fit covers both modes (its optimum is the moment match); the
//! reverse fit locks onto one mode. Parameters are optimized as
//! `(mu, ln sigma)` so sigma stays positive.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::divergence::KlKind;
use crate::error::{Error, Result};

/// Densities below this are floored before taking logs.
const DENSITY_FLOOR: f64 = 1e-300;
/// Allowed probability mass outside the grid.
const MASS_TOL: f64 = 1e-8;

pub trait Density1D {
    fn pdf(&self, x: f64) -> f64;
    fn name(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gaussian1D {
    pub mu: f64,
    pub sigma: f64,
}

impl Gaussian1D {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!(
                "gaussian needs finite mu and sigma > 0, got ({mu}, {sigma})"
            )));
        }
        Ok(Self { mu, sigma })
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        let z = (x - self.mu) / self.sigma;
        -0.5 * z * z - self.sigma.ln() - 0.5 * (2.0 * PI).ln()
    }
}

impl Density1D for Gaussian1D {
    fn pdf(&self, x: f64) -> f64 {
        self.ln_pdf(x).exp()
    }

    fn name(&self) -> String {
        format!("N({}, {}^2)", self.mu, self.sigma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mu: f64,
    pub sigma: f64,
}

/// Mixture of 1D Gaussians. Weights are positive and sum to 1 within 1e-12.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<MixtureComponent>", into = "Vec<MixtureComponent>")]
pub struct Mixture1D {
    components: Vec<(f64, Gaussian1D)>,
}

impl Mixture1D {
    pub fn new(components: Vec<(f64, Gaussian1D)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Config("mixture has no components".into()));
        }
        if components.iter().any(|(w, _)| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        let total: f64 = components.iter().map(|(w, _)| w).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[(f64, Gaussian1D)] {
        &self.components
    }

    /// Mean and standard deviation of the mixture: the forward-KL optimum.
    pub fn moment_match(&self) -> Gaussian1D {
        let mean: f64 = self.components.iter().map(|(w, g)| w * g.mu).sum();
        let second: f64 = self
            .components
            .iter()
            .map(|(w, g)| w * (g.sigma * g.sigma + g.mu * g.mu))
            .sum();
        Gaussian1D {
            mu: mean,
            sigma: (second - mean * mean).sqrt(),
        }
    }

    /// Stand-in bimodal target `0.5 N(-4, 1) + 0.5 N(4, 1)`.
    pub fn default_bimodal() -> Self {
        Self {
            components: vec![
                (
                    0.5,
                    Gaussian1D {
                        mu: -4.0,
                        sigma: 1.0,
                    },
                ),
                (
                    0.5,
                    Gaussian1D {
                        mu: 4.0,
                        sigma: 1.0,
                    },
                ),
            ],
        }
    }
}

impl TryFrom<Vec<MixtureComponent>> for Mixture1D {
    type Error = Error;
    fn try_from(v: Vec<MixtureComponent>) -> Result<Self> {
        let comps = v
            .into_iter()
            .map(|c| Ok((c.weight, Gaussian1D::new(c.mu, c.sigma)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(comps)
    }
}

impl From<Mixture1D> for Vec<MixtureComponent> {
    fn from(m: Mixture1D) -> Self {
        m.components
            .into_iter()
            .map(|(weight, g)| MixtureComponent {
                weight,
                mu: g.mu,
                sigma: g.sigma,
            })
            .collect()
    }
}

impl Density1D for Mixture1D {
    fn pdf(&self, x: f64) -> f64 {
        self.components.iter().map(|(w, g)| w * g.pdf(x)).sum()
    }

    fn name(&self) -> String {
        let parts: Vec<String> = self
            .components
            .iter()
            .map(|(w, g)| format!("{w}*{}", g.name()))
            .collect();
        parts.join(" + ")
    }
}

/// Uniform grid on `[lo, hi]` with trapezoidal weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quadrature {
    pub lo: f64,
    pub hi: f64,
    pub n_points: usize,
}

impl Quadrature {
    pub const MIN_POINTS: usize = 101;

    pub fn new(lo: f64, hi: f64, n_points: usize) -> Result<Self> {
        let q = Self { lo, hi, n_points };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.hi > self.lo) {
            return Err(Error::Config(format!(
                "grid needs finite hi > lo, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        if self.n_points < Self::MIN_POINTS {
            return Err(Error::Config(format!(
                "grid needs at least {} points, got {}",
                Self::MIN_POINTS,
                self.n_points
            )));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n_points - 1) as f64
    }

    /// `(x_i, w_i)` pairs.
    pub fn nodes(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let h = self.step();
        let last = self.n_points - 1;
        (0..self.n_points).map(move |i| {
            let w = if i == 0 || i == last { 0.5 * h } else { h };
            (self.lo + i as f64 * h, w)
        })
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes().map(|(x, w)| w * f(x)).sum()
    }

    /// Errors unless the density integrates to 1 within the mass tolerance.
    pub fn check_mass(&self, d: &dyn Density1D) -> Result<()> {
        let mass = self.integrate(|x| d.pdf(x));
        if (mass - 1.0).abs() >= MASS_TOL {
            return Err(Error::Quadrature(format!(
                "density {} has mass {mass} on [{}, {}]",
                d.name(),
                self.lo,
                self.hi
            )));
        }
        Ok(())
    }
}

/// `KL(a || b)` for [`KlKind::Forward`], `KL(b || a)` for
/// [`KlKind::Reverse`], where `a` is the target and `b` the fit.
///
/// Only the density weighting the integrand must keep its mass on the grid:
/// the truncation error is that density's tail mass times a log ratio.
pub fn kld_quadrature(
    a: &dyn Density1D,
    b: &dyn Density1D,
    quad: &Quadrature,
    kind: KlKind,
) -> Result<f64> {
    quad.validate()?;
    let (first, second) = match kind {
        KlKind::Forward => (a, b),
        KlKind::Reverse => (b, a),
    };
    quad.check_mass(first)?;
    Ok(quad.integrate(|x| {
        let u = first.pdf(x).max(DENSITY_FLOOR);
        let v = second.pdf(x).max(DENSITY_FLOOR);
        u * (u / v).ln()
    }))
}

/// Quadrature gradient of the divergence with respect to `(mu, ln sigma)`.
pub fn kld_gradient(
    target: &Mixture1D,
    q: &Gaussian1D,
    quad: &Quadrature,
    kind: KlKind,
) -> [f64; 2] {
    let s2 = q.sigma * q.sigma;
    let mut g = [0.0; 2];
    for (x, w) in quad.nodes() {
        let z2 = (x - q.mu) * (x - q.mu) / s2;
        let d_mu = (x - q.mu) / s2;
        let d_ls = z2 - 1.0;
        match kind {
            // -E_p[d log q]
            KlKind::Forward => {
                let p = target.pdf(x);
                g[0] -= w * p * d_mu;
                g[1] -= w * p * d_ls;
            }
            // int dq (log q - log p); the int q d(log q) term vanishes
            KlKind::Reverse => {
                let qx = q.pdf(x);
                let log_ratio = qx.max(DENSITY_FLOOR).ln() - target.pdf(x).max(DENSITY_FLOOR).ln();
                g[0] += w * qx * d_mu * log_ratio;
                g[1] += w * qx * d_ls * log_ratio;
            }
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub fit: Gaussian1D,
    pub kld: f64,
    pub grad_norm: f64,
    pub steps: usize,
}

fn fit(
    target: &Mixture1D,
    quad: &Quadrature,
    init: Gaussian1D,
    lr: f64,
    steps: usize,
    kind: KlKind,
) -> Result<FitResult> {
    quad.validate()?;
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("lr must be positive, got {lr}")));
    }
    let init = Gaussian1D::new(init.mu, init.sigma)?;
    quad.check_mass(target)?;
    let mut mu = init.mu;
    let mut ls = init.sigma.ln();
    for step in 0..steps {
        let g = kld_gradient(
            target,
            &Gaussian1D {
                mu,
                sigma: ls.exp(),
            },
            quad,
            kind,
        );
        mu -= lr * g[0];
        ls -= lr * g[1];
        if !(mu.is_finite() && ls.is_finite() && ls.exp() > 0.0) {
            return Err(Error::NonFinite(format!(
                "{kind:?} toy fit diverged at step {step}"
            )));
        }
    }
    let fit = Gaussian1D {
        mu,
        sigma: ls.exp(),
    };
    let g = kld_gradient(target, &fit, quad, kind);
    Ok(FitResult {
        fit,
        kld: kld_quadrature(target, &fit, quad, kind)?,
        grad_norm: g[0].hypot(g[1]),
        steps,
    })
}

/// Gradient descent on `KL(target || q)`.
pub fn fit_forward(
    target: &Mixture1D,
    quad: &Quadrature,
    init: Gaussian1D,
    lr: f64,
    steps: usize,
) -> Result<FitResult> {
    fit(target, quad, init, lr, steps, KlKind::Forward)
}

/// Gradient descent on `KL(q || target)`.
pub fn fit_reverse(
    target: &Mixture1D,
    quad: &Quadrature,
    init: Gaussian1D,
    lr: f64,
    steps: usize,
) -> Result<FitResult> {
    fit(target, quad, init, lr, steps, KlKind::Reverse)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub target: Mixture1D,
    pub grid: Quadrature,
    pub lr: f64,
    pub steps: usize,
    pub init: Gaussian1D,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            target: Mixture1D::default_bimodal(),
            grid: Quadrature {
                lo: -15.0,
                hi: 15.0,
                n_points: 4001,
            },
            lr: 0.05,
            steps: 5000,
            init: Gaussian1D {
                mu: 3.0,
                sigma: 1.0,
            },
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        Gaussian1D::new(self.init.mu, self.init.sigma)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "toy.lr must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyOutcome {
    pub target: Mixture1D,
    /// The default target is a stand-in; no reference parameters exist.
    pub target_is_default_stand_in: bool,
    pub moment_match: Gaussian1D,
    pub forward: FitResult,
    pub reverse: FitResult,
}

pub fn run_toy(cfg: &ToyConfig) -> Result<ToyOutcome> {
    cfg.validate()?;
    let forward = fit_forward(&cfg.target, &cfg.grid, cfg.init, cfg.lr, cfg.steps)?;
    let reverse = fit_reverse(&cfg.target, &cfg.grid, cfg.init, cfg.lr, cfg.steps)?;
    Ok(ToyOutcome {
        target_is_default_stand_in: cfg.target == Mixture1D::default_bimodal(),
        moment_match: cfg.target.moment_match(),
        target: cfg.target.clone(),
        forward,
        reverse,
    })
}

pub const DENSITY_CSV_HEADER: &str = "x,target,forward_fit,reverse_fit";

/// Plot-ready densities on the quadrature grid, in exponent form since the
/// tails span hundreds of decades.
pub fn density_csv(out: &ToyOutcome, grid: &Quadrature) -> String {
    let mut s = String::from(DENSITY_CSV_HEADER);
    s.push('\n');
    for (x, _) in grid.nodes() {
        let _ = writeln!(
            s,
            "{x},{:e},{:e},{:e}",
            out.target.pdf(x),
            out.forward.fit.pdf(x),
            out.reverse.fit.pdf(x)
        );
    }
    s
}
