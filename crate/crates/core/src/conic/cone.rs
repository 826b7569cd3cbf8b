//! Per-block cone algebra: Jordan products, Nesterov–Todd scaling and
//! step-to-boundary computations for the nonnegative ray and the
//! second-order cone.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConeKind {
    Nonneg,
    Soc,
}

/// NT scaling of one block. For the nonnegative ray `w` holds `sqrt(s/z)`;
/// for a second-order cone it holds the hyperbolic unit vector `w̄` and
/// `eta` the scalar factor, so that `W = eta * W̄`.
#[derive(Debug, Clone)]
pub struct Scaling {
    pub kind: ConeKind,
    pub eta: f64,
    pub w: Vec<f64>,
}

fn soc_det(v: &[f64]) -> f64 {
    let n1 = norm(&v[1..]);
    (v[0] - n1) * (v[0] + n1)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Scaling {
    pub fn identity(kind: ConeKind, dim: usize) -> Scaling {
        let mut w = vec![0.0; dim];
        w[0] = 1.0;
        Scaling { kind, eta: 1.0, w }
    }

    /// Scaling with `W z = W^{-1} s`; both must be strictly interior.
    pub fn nt(kind: ConeKind, s: &[f64], z: &[f64]) -> Scaling {
        match kind {
            ConeKind::Nonneg => Scaling {
                kind,
                eta: 1.0,
                w: vec![(s[0] / z[0]).sqrt()],
            },
            ConeKind::Soc => {
                let sn = soc_det(s).max(f64::MIN_POSITIVE).sqrt();
                let zn = soc_det(z).max(f64::MIN_POSITIVE).sqrt();
                let sb: Vec<f64> = s.iter().map(|v| v / sn).collect();
                let zb: Vec<f64> = z.iter().map(|v| v / zn).collect();
                let gamma = ((1.0 + dot(&sb, &zb)) / 2.0).sqrt();
                let mut w: Vec<f64> = Vec::with_capacity(s.len());
                w.push((sb[0] + zb[0]) / (2.0 * gamma));
                for k in 1..s.len() {
                    w.push((sb[k] - zb[k]) / (2.0 * gamma));
                }
                // Renormalise so that w0^2 - |w1|^2 = 1 holds to rounding.
                let n1 = norm(&w[1..]);
                w[0] = (1.0 + n1 * n1).sqrt();
                Scaling {
                    kind,
                    eta: (sn / zn).sqrt(),
                    w,
                }
            }
        }
    }

    fn wbar(&self, v: &[f64], out: &mut [f64], flip: bool) {
        let w0 = self.w[0];
        let w1 = &self.w[1..];
        let sgn = if flip { -1.0 } else { 1.0 };
        let wv = sgn * dot(w1, &v[1..]);
        out[0] = w0 * v[0] + wv;
        let coef = v[0] + wv / (1.0 + w0);
        for k in 1..v.len() {
            out[k] = sgn * v[k] + coef * w1[k - 1];
        }
    }

    /// `out = W v`.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        match self.kind {
            ConeKind::Nonneg => out[0] = self.w[0] * v[0],
            ConeKind::Soc => {
                self.wbar(v, out, false);
                for o in out.iter_mut() {
                    *o *= self.eta;
                }
            }
        }
    }

    /// `out = W^{-1} v`, using `W^{-1} = J W̄ J / eta`.
    pub fn apply_inv(&self, v: &[f64], out: &mut [f64]) {
        match self.kind {
            ConeKind::Nonneg => out[0] = v[0] / self.w[0],
            ConeKind::Soc => {
                self.wbar(v, out, true);
                out[0] /= self.eta;
                for o in out[1..].iter_mut() {
                    *o = -*o / self.eta;
                }
            }
        }
    }
}

/// Jordan product `u ∘ v`.
pub fn jordan(kind: ConeKind, u: &[f64], v: &[f64], out: &mut [f64]) {
    match kind {
        ConeKind::Nonneg => out[0] = u[0] * v[0],
        ConeKind::Soc => {
            out[0] = dot(u, v);
            for k in 1..u.len() {
                out[k] = u[0] * v[k] + v[0] * u[k];
            }
        }
    }
}

/// Solves `lambda ∘ x = r` for `x`.
pub fn jordan_div(kind: ConeKind, lambda: &[f64], r: &[f64], out: &mut [f64]) {
    match kind {
        ConeKind::Nonneg => out[0] = r[0] / lambda[0],
        ConeKind::Soc => {
            let det = soc_det(lambda);
            let x0 = (lambda[0] * r[0] - dot(&lambda[1..], &r[1..])) / det;
            out[0] = x0;
            for k in 1..lambda.len() {
                out[k] = (r[k] - x0 * lambda[k]) / lambda[0];
            }
        }
    }
}

/// Largest `a >= 0` with `v + a d` in the cone (`f64::INFINITY` when unbounded).
pub fn max_step(kind: ConeKind, v: &[f64], d: &[f64]) -> f64 {
    match kind {
        ConeKind::Nonneg => {
            if d[0] < 0.0 {
                -v[0] / d[0]
            } else {
                f64::INFINITY
            }
        }
        ConeKind::Soc => {
            let dn = norm(&d[1..]);
            if d[0] >= dn {
                return f64::INFINITY;
            }
            let vn = norm(&v[1..]);
            let a = (d[0] - dn) * (d[0] + dn);
            let b = v[0] * d[0] - dot(&v[1..], &d[1..]);
            let c = ((v[0] - vn) * (v[0] + vn)).max(0.0);
            let disc = (b * b - a * c).max(0.0).sqrt();
            if b > 0.0 {
                (b + disc) / (-a)
            } else {
                let den = disc - b;
                if den <= 0.0 {
                    0.0
                } else {
                    c / den
                }
            }
        }
    }
}

/// Smallest shift `t` such that `v + t e` lies on the cone boundary (negative when interior).
pub fn boundary_shift(kind: ConeKind, v: &[f64]) -> f64 {
    match kind {
        ConeKind::Nonneg => -v[0],
        ConeKind::Soc => norm(&v[1..]) - v[0],
    }
}
