//! Dense real polynomials and a companion-matrix real-root finder.

use nalgebra::DMatrix;

use super::PnpError;

/// Real polynomial with coefficients in ascending powers: `c[0] + c[1] x + ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly(pub Vec<f64>);

impl Poly {
    pub fn new(coeffs_ascending: Vec<f64>) -> Self {
        Poly(coeffs_ascending)
    }

    /// Build from coefficients listed highest power first.
    pub fn from_descending(coeffs: &[f64]) -> Self {
        Poly(coeffs.iter().rev().copied().collect())
    }

    /// Monic polynomial with the given roots.
    pub fn from_roots(roots: &[f64]) -> Self {
        roots
            .iter()
            .fold(Poly(vec![1.0]), |acc, &r| acc.mul(&Poly(vec![-r, 1.0])))
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.0
    }

    /// Degree ignoring exact-zero leading terms; `None` for the zero polynomial.
    pub fn degree(&self) -> Option<usize> {
        self.0.iter().rposition(|&c| c != 0.0)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn derivative(&self) -> Poly {
        if self.0.len() <= 1 {
            return Poly(vec![0.0]);
        }
        Poly(self.0.iter().enumerate().skip(1).map(|(k, &c)| k as f64 * c).collect())
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let n = self.0.len().max(other.0.len());
        Poly(
            (0..n)
                .map(|k| self.0.get(k).unwrap_or(&0.0) + other.0.get(k).unwrap_or(&0.0))
                .collect(),
        )
    }

    pub fn scale(&self, s: f64) -> Poly {
        Poly(self.0.iter().map(|c| c * s).collect())
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        if self.0.is_empty() || other.0.is_empty() {
            return Poly(vec![0.0]);
        }
        let mut out = vec![0.0; self.0.len() + other.0.len() - 1];
        for (i, a) in self.0.iter().enumerate() {
            for (j, b) in other.0.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Poly(out)
    }

    fn max_abs_coeff(&self) -> f64 {
        self.0.iter().fold(0.0f64, |m, c| m.max(c.abs()))
    }
}

/// Real roots in ascending order, repeated according to multiplicity.
///
/// Eigenvalues of the monic companion matrix whose imaginary part is below
/// `1e-8 * max|coeff|` are kept, then each is polished with two Newton steps.
pub fn real_roots(poly: &Poly) -> Result<Vec<f64>, PnpError> {
    let deg = poly.degree().ok_or(PnpError::ZeroPolynomial)?;
    if poly.0.iter().any(|c| !c.is_finite()) {
        return Err(PnpError::NonFinite);
    }
    let lead = poly.0[deg];
    let monic: Vec<f64> = poly.0[..=deg].iter().map(|c| c / lead).collect();
    let mut roots = match deg {
        0 => Vec::new(),
        1 => vec![-monic[0]],
        _ => {
            let mut comp = DMatrix::<f64>::zeros(deg, deg);
            for k in 0..deg {
                comp[(0, k)] = -monic[deg - 1 - k];
            }
            for k in 1..deg {
                comp[(k, k - 1)] = 1.0;
            }
            let tol = 1e-8 * Poly(monic.clone()).max_abs_coeff();
            comp.complex_eigenvalues()
                .iter()
                .filter(|z| z.im.abs() <= tol)
                .map(|z| z.re)
                .collect()
        }
    };
    let p = Poly(monic);
    let dp = p.derivative();
    for r in roots.iter_mut() {
        *r = newton_polish(&p, &dp, *r, 2);
    }
    roots.sort_by(f64::total_cmp);
    Ok(roots)
}

fn newton_polish(p: &Poly, dp: &Poly, mut x: f64, iters: usize) -> f64 {
    for _ in 0..iters {
        let fx = p.eval(x);
        let dfx = dp.eval(x);
        if fx == 0.0 || dfx == 0.0 || !dfx.is_finite() {
            break;
        }
        let next = x - fx / dfx;
        if !next.is_finite() || p.eval(next).abs() > fx.abs() {
            break;
        }
        x = next;
    }
    x
}
