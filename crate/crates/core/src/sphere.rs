//! Sampling on the unit sphere: uniform directions, uniform spherical caps
//! of a given chordal radius, and random orthonormal frames.
//!
//! For a uniform point `u` on the sphere in dimension `d` and a fixed unit
//! `c`, the variable `x = ‖u − c‖² / 4` is `Beta(a, a)` with `a = (d − 1)/2`.
//! A uniform draw from the cap `{u : ‖u − c‖ ≤ κ}` is therefore a
//! `Beta(a, a)` draw truncated to `[0, κ²/4]` for the radius, combined with a
//! uniform tangent direction. The truncated radius is drawn by inverting the
//! regularized incomplete beta function in log space, which stays accurate
//! for the tiny cap masses that appear in high dimension.

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::beta::ln_beta;

use crate::embedding::{dot, norm, UnitVector};
use crate::error::{Error, Result};

/// Uniform direction on the unit sphere in `dim` dimensions.
pub fn uniform_sphere<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> UnitVector {
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&g);
        if n > 1e-6 {
            return UnitVector::new_unchecked(g.into_iter().map(|x| x / n).collect());
        }
    }
}

/// Uniform unit direction orthogonal to `center`.
fn tangent_direction<R: Rng + ?Sized>(center: &[f64], rng: &mut R) -> Vec<f64> {
    loop {
        let mut g: Vec<f64> = (0..center.len()).map(|_| rng.sample(StandardNormal)).collect();
        let p = dot(&g, center);
        g.iter_mut().zip(center).for_each(|(x, c)| *x -= p * c);
        let n = norm(&g);
        if n > 1e-6 {
            g.iter_mut().for_each(|x| *x /= n);
            return g;
        }
    }
}

/// `m` orthonormal vectors in `R^dim`, uniformly rotated (Gaussian +
/// Gram–Schmidt, applied twice for stability).
pub fn random_frame<R: Rng + ?Sized>(dim: usize, m: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if m > dim {
        return Err(Error::InvalidParameter(format!("cannot fit {m} orthonormal vectors in dimension {dim}")));
    }
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(m);
    while frame.len() < m {
        let mut g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for f in &frame {
                let p = dot(&g, f);
                g.iter_mut().zip(f).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = norm(&g);
        if n > 1e-8 {
            g.iter_mut().for_each(|x| *x /= n);
            frame.push(g);
        }
    }
    Ok(frame)
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..100_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// `ln I_x(a, a)` for the symmetric regularized incomplete beta function.
fn ln_inc_beta_sym(a: f64, ln_b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if x >= 1.0 {
        return 0.0;
    }
    let lower = |x: f64| a * x.ln() + a * (-x).ln_1p() - ln_b - a.ln() + beta_cf(a, a, x).ln();
    if x <= 0.5 {
        lower(x)
    } else {
        (-lower(1.0 - x).exp()).ln_1p()
    }
}

/// Uniform sampler for a spherical cap of chordal radius `kappa`.
#[derive(Clone, Debug)]
pub struct CapSampler {
    dim: usize,
    kappa: f64,
    a: f64,
    ln_b: f64,
    x_max: f64,
    ln_mass: f64,
}

impl CapSampler {
    pub fn new(dim: usize, kappa: f64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::DimensionTooSmall(dim));
        }
        if !(0.0..=2.0).contains(&kappa) {
            return Err(Error::InvalidParameter(format!("cap radius {kappa} outside [0, 2]")));
        }
        let a = (dim as f64 - 1.0) / 2.0;
        let ln_b = ln_beta(a, a);
        let x_max = (kappa * kappa / 4.0).min(1.0);
        let ln_mass = ln_inc_beta_sym(a, ln_b, x_max);
        Ok(Self { dim, kappa, a, ln_b, x_max, ln_mass })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Fraction of the sphere covered by the cap.
    pub fn sphere_fraction(&self) -> f64 {
        self.ln_mass.exp()
    }

    /// CDF of the chordal distance `r` from the center for a uniform cap draw.
    pub fn chordal_cdf(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        if r >= self.kappa {
            return 1.0;
        }
        (ln_inc_beta_sym(self.a, self.ln_b, r * r / 4.0) - self.ln_mass).exp()
    }

    /// Solves `ln I_x − ln I_{x_max} = ln p` for `x`, Newton in `ln x` with a
    /// bisection fallback.
    fn invert(&self, ln_p: f64) -> f64 {
        let a = self.a;
        let t_max = self.x_max.ln();
        let target = ln_p + self.ln_mass;
        let f = |t: f64| ln_inc_beta_sym(a, self.ln_b, t.exp()) - target;

        let mut hi = t_max;
        let mut lo = t_max + ln_p / a - 1.0;
        while f(lo) > 0.0 {
            lo -= 1.0 + (t_max - lo);
        }
        let mut t = (t_max + ln_p / a).clamp(lo, hi);
        for _ in 0..100 {
            let ft = f(t);
            if ft.abs() < 1e-13 {
                break;
            }
            if ft > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let x = t.exp();
            let ln_i = ft + target;
            let slope = (a * x.ln() + (a - 1.0) * (-x).ln_1p() - self.ln_b - ln_i).exp();
            let mut next = t - ft / slope;
            if !next.is_finite() || next <= lo || next >= hi {
                next = 0.5 * (lo + hi);
            }
            if (next - t).abs() < 1e-15 * t.abs().max(1.0) {
                t = next;
                break;
            }
            t = next;
        }
        t.exp()
    }

    /// Draws the chordal distance from the center.
    pub fn sample_radius<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.kappa == 0.0 {
            return 0.0;
        }
        // open interval (0, 1]
        let p: f64 = 1.0 - rng.random::<f64>();
        let x = self.invert(p.ln()).min(self.x_max);
        2.0 * x.sqrt()
    }

    /// Draws a uniform point of the cap around `center`.
    pub fn sample<R: Rng + ?Sized>(&self, center: &UnitVector, rng: &mut R) -> UnitVector {
        debug_assert_eq!(center.dim(), self.dim);
        if self.kappa == 0.0 {
            return center.clone();
        }
        let r = self.sample_radius(rng);
        let x = r * r / 4.0;
        let cos = 1.0 - 2.0 * x;
        let sin = 2.0 * (x * (1.0 - x)).max(0.0).sqrt();
        let w = tangent_direction(center, rng);
        let v: Vec<f64> = center.iter().zip(&w).map(|(c, t)| cos * c + sin * t).collect();
        let n = norm(&v);
        UnitVector::new_unchecked(v.into_iter().map(|x| x / n).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::chordal_distance;
    use crate::rng::SeedTree;
    use statrs::function::beta::beta_reg;

    #[test]
    fn log_incomplete_beta_matches_reference() {
        for &d in &[2usize, 3, 5, 16, 33] {
            let a = (d as f64 - 1.0) / 2.0;
            let lb = ln_beta(a, a);
            for &x in &[1e-4, 0.01, 0.2, 0.5, 0.7, 0.99] {
                let ours = ln_inc_beta_sym(a, lb, x).exp();
                let reference = beta_reg(a, a, x);
                assert!((ours - reference).abs() < 1e-12 * reference.max(1e-300) + 1e-14, "d={d} x={x}");
            }
        }
    }

    #[test]
    fn circle_cap_cdf_is_arc_length() {
        // d = 2: the angle is uniform, so P(angle ≤ θ) = θ / θ_max.
        let s = CapSampler::new(2, 1.0).unwrap();
        let theta_max = 2.0 * (0.5f64).asin();
        let r = 0.5;
        let theta = 2.0 * (r / 2.0f64).asin();
        assert!((s.chordal_cdf(r) - theta / theta_max).abs() < 1e-12);
    }

    #[test]
    fn radius_inversion_hits_quantiles() {
        for &(d, k) in &[(3usize, 0.4), (64, 0.3), (512, 0.1), (16, 1.8)] {
            let s = CapSampler::new(d, k).unwrap();
            for &p in &[1e-6, 0.1, 0.5, 0.9, 1.0] {
                let x = s.invert(f64::ln(p));
                let r = 2.0 * x.sqrt();
                assert!((s.chordal_cdf(r) - p).abs() < 1e-9, "d={d} k={k} p={p}");
            }
        }
    }

    #[test]
    fn cap_draws_stay_in_cap() {
        let mut rng = SeedTree::new(3).stream("cap", &[]);
        let c = uniform_sphere(32, &mut rng);
        let s = CapSampler::new(32, 0.25).unwrap();
        for _ in 0..2000 {
            let u = s.sample(&c, &mut rng);
            assert!((norm(&u) - 1.0).abs() < 1e-12);
            assert!(chordal_distance(&u, &c).unwrap() <= 0.25 + 1e-12);
        }
    }

    #[test]
    fn frame_is_orthonormal() {
        let mut rng = SeedTree::new(5).stream("frame", &[]);
        let f = random_frame(8, 8, &mut rng).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&f[i], &f[j]) - want).abs() < 1e-12);
            }
        }
        assert!(random_frame(3, 4, &mut rng).is_err());
    }
}
