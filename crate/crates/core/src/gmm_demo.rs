//! One-dimensional illustration of how the gradient-aware loss and the KL
//! loss pick different single-Gaussian fits to a two-mode mixture.
//!
//! Densities live on a shared midpoint grid and every integral is a Riemann
//! sum with the grid spacing as weight.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Minimum target mass the evaluation grid must capture.
pub const MIN_COVERAGE: f64 = 0.999;

/// Midpoint grid, symmetric about its center so mirrored points agree exactly.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid1D {
    pub points: Vec<f64>,
    pub h: f64,
}

impl Grid1D {
    /// Cells of width `h` covering `[lo, hi]` (rounded to a whole number of cells).
    pub fn midpoint(lo: f64, hi: f64, h: f64) -> Result<Self> {
        if !(h > 0.0) || !(hi > lo) {
            return Err(Error::InvalidArgument(format!("bad grid [{lo}, {hi}] with spacing {h}")));
        }
        let n = ((hi - lo) / h).round().max(1.0) as usize;
        let center = 0.5 * (lo + hi);
        let half = (n as f64 - 1.0) / 2.0;
        let points = (0..n).map(|i| center + (i as f64 - half) * h).collect();
        Ok(Self { points, h })
    }

    /// Nodes `lo, lo + step, …` up to `hi`, built symmetrically about the center
    /// and rounded to nine decimals.
    pub fn nodes(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
        if !(step > 0.0) || hi < lo {
            return Err(Error::InvalidArgument(format!("bad node range [{lo}, {hi}] with step {step}")));
        }
        let n = ((hi - lo) / step).round() as usize + 1;
        let center = 0.5 * (lo + hi);
        let half = (n as f64 - 1.0) / 2.0;
        Ok((0..n).map(|i| ((center + (i as f64 - half) * step) * 1e9).round() / 1e9).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Halved spacing over the same interval.
    pub fn refined(&self) -> Self {
        let lo = self.points[0] - 0.5 * self.h;
        let hi = self.points[self.len() - 1] + 0.5 * self.h;
        Self::midpoint(lo, hi, 0.5 * self.h).expect("valid parent grid")
    }
}

pub fn gaussian_log_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * PI).ln()
}

pub fn gaussian_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    gaussian_log_pdf(x, mu, sigma).exp()
}

/// Target mixture together with its evaluation grid and cached densities.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture1D {
    means: Vec<f64>,
    stds: Vec<f64>,
    weights: Vec<f64>,
    grid: Grid1D,
    density: Vec<f64>,
    log_density: Vec<f64>,
}

impl Mixture1D {
    pub fn new(means: Vec<f64>, stds: Vec<f64>, weights: Vec<f64>, grid: Grid1D) -> Result<Self> {
        let k = means.len();
        if k == 0 || stds.len() != k || weights.len() != k {
            return Err(Error::DimensionMismatch {
                what: "mixture components",
                expected: k,
                got: stds.len().min(weights.len()),
            });
        }
        if stds.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("component stds must be positive".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument("mixture weights must form a distribution".into()));
        }
        if grid.is_empty() {
            return Err(Error::InvalidArgument("empty evaluation grid".into()));
        }
        let log_density: Vec<f64> = grid
            .points
            .iter()
            .map(|&x| {
                let terms: Vec<f64> = (0..k)
                    .filter(|&i| weights[i] > 0.0)
                    .map(|i| weights[i].ln() + gaussian_log_pdf(x, means[i], stds[i]))
                    .collect();
                let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let density: Vec<f64> = log_density.iter().map(|l| l.exp()).collect();
        let mass = density.iter().sum::<f64>() * grid.h;
        if mass < MIN_COVERAGE {
            return Err(Error::InvalidArgument(format!(
                "evaluation grid captures only {mass:.6} of the target mass"
            )));
        }
        Ok(Self {
            means,
            stds,
            weights,
            grid,
            density,
            log_density,
        })
    }

    /// Two equal modes at ±2 with standard deviation 0.5, on [−38, 38] with
    /// spacing 0.01 so that every model on the default surface also fits.
    pub fn two_mode() -> Self {
        Self::new(vec![-2.0, 2.0], vec![0.5, 0.5], vec![0.5, 0.5], Grid1D::midpoint(-38.0, 38.0, 0.01).expect("valid"))
            .expect("valid default mixture")
    }

    /// Same components on another grid.
    pub fn with_grid(&self, grid: Grid1D) -> Result<Self> {
        Self::new(self.means.clone(), self.stds.clone(), self.weights.clone(), grid)
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mean and standard deviation of the mixture (analytic).
    pub fn moments(&self) -> (f64, f64) {
        let mean: f64 = self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum();
        let second: f64 = (0..self.means.len())
            .map(|i| self.weights[i] * (self.stds[i].powi(2) + self.means[i].powi(2)))
            .sum();
        (mean, (second - mean * mean).sqrt())
    }
}

/// Unnormalized Gaussian bump `exp(−(x − c)²/(2w²))` on the grid.
pub fn bump(grid: &Grid1D, center: f64, width: f64) -> Vec<f64> {
    grid.points.iter().map(|&x| (-(x - center).powi(2) / (2.0 * width * width)).exp()).collect()
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("model std {sigma} must be positive")))
    }
}

/// `|Σ_x (p(x) − q(x)) f(x) h|²` for `q = N(μ, σ²)`.
pub fn paml_loss_1d(target: &Mixture1D, mu: f64, sigma: f64, f: &[f64]) -> Result<f64> {
    check_sigma(sigma)?;
    if f.len() != target.grid.len() {
        return Err(Error::DimensionMismatch {
            what: "test function length",
            expected: target.grid.len(),
            got: f.len(),
        });
    }
    let diff: f64 = target
        .grid
        .points
        .iter()
        .zip(&target.density)
        .zip(f)
        .map(|((&x, &p), &fx)| (p - gaussian_pdf(x, mu, sigma)) * fx)
        .sum::<f64>()
        * target.grid.h;
    Ok(diff * diff)
}

/// `Σ_x p(x) ln(p(x)/q(x)) h` for `q = N(μ, σ²)`.
pub fn kl_loss_1d(target: &Mixture1D, mu: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Ok(target
        .grid
        .points
        .iter()
        .zip(&target.density)
        .zip(&target.log_density)
        .filter(|((_, &p), _)| p > 0.0)
        .map(|((&x, &p), &lp)| p * (lp - gaussian_log_pdf(x, mu, sigma)))
        .sum::<f64>()
        * target.grid.h)
}

/// Grid minimizer of a surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Argmin {
    pub mu: f64,
    pub sigma: f64,
    pub value: f64,
    /// Surface flat to within [`FLAT_TOL`]; the location carries no information.
    pub degenerate: bool,
}

/// Range below which a surface counts as flat.
pub const FLAT_TOL: f64 = 1e-9;

/// Both loss surfaces over a (σ, μ) grid; row index is σ, column index is μ.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub paml: DMatrix<f64>,
    pub kl: DMatrix<f64>,
    pub paml_argmin: Argmin,
    pub kl_argmin: Argmin,
}

/// `log10((L − min)/(max − min) + 1e-12)`, so every surface maps into `[−12, 0]`.
pub fn log_normalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (lo, hi) = (m.min(), m.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    m.map(|v| ((v - lo) / span + 1e-12).log10())
}

fn argmin(m: &DMatrix<f64>, mu: &[f64], sigma: &[f64]) -> Argmin {
    let (mut best, mut at) = (f64::INFINITY, (0, 0));
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if m[(i, j)] < best {
                best = m[(i, j)];
                at = (i, j);
            }
        }
    }
    Argmin {
        mu: mu[at.1],
        sigma: sigma[at.0],
        value: best,
        degenerate: m.max() - m.min() <= FLAT_TOL,
    }
}

/// Evaluates both losses on every `(σ, μ)` pair, splitting σ rows across threads.
pub fn loss_surface(target: &Mixture1D, f: &[f64], mu: &[f64], sigma: &[f64]) -> Result<Surface> {
    if mu.is_empty() || sigma.is_empty() {
        return Err(Error::InvalidArgument("surface grids must be non-empty".into()));
    }
    if let Some(&s) = sigma.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument(format!("model std {s} must be positive")));
    }
    if f.len() != target.grid.len() {
        return Err(Error::DimensionMismatch {
            what: "test function length",
            expected: target.grid.len(),
            got: f.len(),
        });
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(sigma.len());
    let chunk = sigma.len().div_ceil(workers);
    let rows: Vec<(Vec<f64>, Vec<f64>)> = std::thread::scope(|s| {
        let handles: Vec<_> = sigma
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|&sg| {
                            let p: Vec<f64> = mu.iter().map(|&m| paml_loss_1d(target, m, sg, f).expect("checked")).collect();
                            let k: Vec<f64> = mu.iter().map(|&m| kl_loss_1d(target, m, sg).expect("checked")).collect();
                            (p, k)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("surface worker")).collect()
    });
    let paml = DMatrix::from_fn(sigma.len(), mu.len(), |i, j| rows[i].0[j]);
    let kl = DMatrix::from_fn(sigma.len(), mu.len(), |i, j| rows[i].1[j]);
    Ok(Surface {
        paml_argmin: argmin(&paml, mu, sigma),
        kl_argmin: argmin(&kl, mu, sigma),
        mu: mu.to_vec(),
        sigma: sigma.to_vec(),
        paml,
        kl,
    })
}

/// CSV with the μ grid as header row and the σ value leading each row.
pub fn surface_csv(m: &DMatrix<f64>, mu: &[f64], sigma: &[f64]) -> String {
    let mut out = String::from("sigma\\mu");
    for v in mu {
        out.push_str(&format!(",{v}"));
    }
    out.push('\n');
    for (i, s) in sigma.iter().enumerate() {
        out.push_str(&s.to_string());
        for j in 0..mu.len() {
            out.push_str(&format!(",{}", m[(i, j)]));
        }
        out.push('\n');
    }
    out
}

/// Mixture, test function and surface grids of one demo run. The default is
/// the two-mode mixture with a bump of the mode's width on the left mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub weights: Vec<f64>,
    /// Integration grid `[lo, hi]` and spacing.
    pub grid: (f64, f64, f64),
    pub bump_center: f64,
    pub bump_width: f64,
    /// Surface nodes `(lo, hi, step)` for μ and σ.
    pub mu: (f64, f64, f64),
    pub sigma: (f64, f64, f64),
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            means: vec![-2.0, 2.0],
            stds: vec![0.5, 0.5],
            weights: vec![0.5, 0.5],
            grid: (-38.0, 38.0, 0.01),
            bump_center: -2.0,
            bump_width: 0.5,
            mu: (-6.0, 6.0, 0.05),
            sigma: (0.1, 4.0, 0.05),
        }
    }
}

impl GmmConfig {
    pub fn mixture(&self) -> Result<Mixture1D> {
        let (lo, hi, h) = self.grid;
        Mixture1D::new(self.means.clone(), self.stds.clone(), self.weights.clone(), Grid1D::midpoint(lo, hi, h)?)
    }

    pub fn test_function(&self, grid: &Grid1D) -> Result<Vec<f64>> {
        if !(self.bump_width > 0.0) {
            return Err(Error::InvalidArgument(format!("bump width {} must be positive", self.bump_width)));
        }
        Ok(bump(grid, self.bump_center, self.bump_width))
    }

    pub fn surface(&self) -> Result<Surface> {
        let target = self.mixture()?;
        let f = self.test_function(target.grid())?;
        let mu = Grid1D::nodes(self.mu.0, self.mu.1, self.mu.2)?;
        let sigma = Grid1D::nodes(self.sigma.0, self.sigma.1, self.sigma.2)?;
        loss_surface(&target, &f, &mu, &sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single() -> Mixture1D {
        Mixture1D::new(vec![0.3], vec![0.8], vec![1.0], Grid1D::midpoint(-8.0, 8.0, 0.01).unwrap()).unwrap()
    }

    #[test]
    fn zero_test_function_gives_zero() {
        let t = Mixture1D::two_mode();
        let f = vec![0.0; t.grid().len()];
        assert_eq!(paml_loss_1d(&t, 1.0, 2.0, &f).unwrap(), 0.0);
    }

    #[test]
    fn exact_model_has_zero_losses() {
        let t = single();
        let f = bump(t.grid(), -1.0, 0.7);
        assert!(paml_loss_1d(&t, 0.3, 0.8, &f).unwrap() < 1e-24);
        assert!(kl_loss_1d(&t, 0.3, 0.8).unwrap().abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let t = single();
        assert!(kl_loss_1d(&t, 0.0, 0.0).is_err());
        assert!(paml_loss_1d(&t, 0.0, -1.0, &vec![0.0; t.grid().len()]).is_err());
        assert!(Mixture1D::new(vec![0.0], vec![1.0], vec![1.0], Grid1D::midpoint(-1.0, 1.0, 0.01).unwrap()).is_err());
        assert!(Mixture1D::new(vec![0.0, 1.0], vec![1.0, 1.0], vec![0.4, 0.4], Grid1D::midpoint(-9.0, 9.0, 0.01).unwrap()).is_err());
    }

    #[test]
    fn grids_are_mirror_symmetric() {
        let g = Grid1D::midpoint(-3.0, 3.0, 0.1).unwrap();
        let n = g.len();
        assert_eq!(n, 60);
        for i in 0..n {
            assert_eq!(g.points[i], -g.points[n - 1 - i]);
        }
        let nodes = Grid1D::nodes(-6.0, 6.0, 0.05).unwrap();
        assert_eq!(nodes.len(), 241);
        assert_eq!(nodes[120], 0.0);
        assert_eq!(g.refined().len(), 120);
    }

    #[test]
    fn mixture_moments() {
        let (m, s) = Mixture1D::two_mode().moments();
        assert!(m.abs() < 1e-15);
        assert!((s - 4.25f64.sqrt()).abs() < 1e-12);
    }
}
