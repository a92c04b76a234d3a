use nalgebra::{DMatrix, DVector};

use super::features::FEATURE_LEN;

/// Ridge added to the within-class scatter when it is (near) singular.
pub const RIDGE: f64 = 1e-6;

/// Unit-norm Fisher direction, the midpoint of the projected class means,
/// and a logistic slope mapping signed distance to a probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Flda {
    pub projection: Vec<f64>,
    pub midpoint: f64,
    pub slope: f64,
}

fn mean(rows: &[Vec<f64>]) -> DVector<f64> {
    let mut m = DVector::zeros(FEATURE_LEN);
    for r in rows {
        m += DVector::from_column_slice(r);
    }
    m / rows.len() as f64
}

impl Flda {
    /// Fits on standardized features; natural projects to the positive side.
    pub fn fit(natural: &[Vec<f64>], cg: &[Vec<f64>]) -> Flda {
        let (mn, mc) = (mean(natural), mean(cg));
        let mut sw = DMatrix::<f64>::zeros(FEATURE_LEN, FEATURE_LEN);
        for (rows, m) in [(natural, &mn), (cg, &mc)] {
            for r in rows {
                let d = DVector::from_column_slice(r) - m;
                sw.ger(1.0, &d, &d, 1.0);
            }
        }
        let dof = (natural.len() + cg.len()).saturating_sub(2).max(1);
        sw /= dof as f64;
        let eig = sw.clone().symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if lo <= 1e-12 * hi.max(1.0) {
            log::warn!("within-class scatter is degenerate (eigenvalues {lo:e}..{hi:e}); adding ridge {RIDGE:e}");
            for i in 0..FEATURE_LEN {
                sw[(i, i)] += RIDGE;
            }
        }
        let diff = &mn - &mc;
        let w = match sw.clone().cholesky() {
            Some(c) => c.solve(&diff),
            None => sw.lu().solve(&diff).unwrap_or_else(|| diff.clone()),
        };
        let norm = w.norm();
        let w = if norm.is_finite() && norm > 1e-300 {
            w / norm
        } else {
            let mut e = DVector::zeros(FEATURE_LEN);
            e[0] = 1.0;
            e
        };
        let projection: Vec<f64> = w.iter().map(|&v| v as f32 as f64).collect();
        let project = |r: &Vec<f64>| dot(&projection, r);
        let pn: Vec<f64> = natural.iter().map(project).collect();
        let pc: Vec<f64> = cg.iter().map(project).collect();
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let midpoint = 0.5 * (avg(&pn) + avg(&pc));
        let distances: Vec<(f64, f64)> =
            pn.iter().map(|&p| (p - midpoint, 1.0)).chain(pc.iter().map(|&p| (p - midpoint, 0.0))).collect();
        Flda { projection, midpoint, slope: fit_slope(&distances) }
    }

    pub fn distance(&self, z: &[f64]) -> f64 {
        dot(&self.projection, z) - self.midpoint
    }

    pub fn score(&self, z: &[f64]) -> f64 {
        naturalize_autodiff::sigmoid(self.slope * self.distance(z))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Positive slope `a` of `sigmoid(a * d)` by Newton's method on penalized BCE.
/// The small L2 penalty keeps `a` finite on separable data.
fn fit_slope(samples: &[(f64, f64)]) -> f64 {
    let penalty = 1e-3 * samples.len() as f64;
    let mut a = 1.0f64;
    for _ in 0..100 {
        let (mut g, mut h) = (penalty * a, penalty);
        for &(d, t) in samples {
            let p = naturalize_autodiff::sigmoid(a * d);
            g += (p - t) * d;
            h += p * (1.0 - p) * d * d;
        }
        let next = (a - g / h).clamp(1e-6, 1e6);
        if (next - a).abs() < 1e-12 * a.max(1.0) {
            a = next;
            break;
        }
        a = next;
    }
    a
}
