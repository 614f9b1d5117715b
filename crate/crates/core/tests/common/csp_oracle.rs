//! Dependency-free generalized eigen-solver for 3x3 CSP problems, shared
//! by the core tests and the acceptance suite.

use std::f64::consts::PI;

pub type M3 = [[f64; 3]; 3];

fn det3(m: &M3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn lin(a: &M3, b: &M3, l: f64) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][j] - l * b[i][j];
        }
    }
    out
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Generalized eigenpairs of `s1 w = λ (s1 + s2) w` without any linear
/// algebra library: `det(s1 - λ s)` is a cubic whose coefficients follow
/// from four evaluations; roots by the trigonometric formula polished with
/// Newton; eigenvectors as the cross product of two rows of `s1 - λ s`.
pub fn brute_force(s1: &M3, s2: &M3) -> Vec<(f64, [f64; 3])> {
    let s = {
        let mut s = *s1;
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] += s2[i][j];
            }
        }
        s
    };
    let p = |l: f64| det3(&lin(s1, &s, l));
    // p(λ) = a λ³ + b λ² + c λ + d, recovered from p(0), p(±1), p(2).
    let (p0, p1, pm1, p2) = (p(0.0), p(1.0), p(-1.0), p(2.0));
    let d = p0;
    let b = (p1 + pm1) / 2.0 - d;
    let a = (p2 - 2.0 * p1 + p0 - 2.0 * b) / 6.0;
    let c = p1 - a - b - d;
    // Depressed cubic t³ + pt + q with λ = t - b/(3a).
    let (bn, cn, dn) = (b / a, c / a, d / a);
    let pp = cn - bn * bn / 3.0;
    let qq = 2.0 * bn.powi(3) / 27.0 - bn * cn / 3.0 + dn;
    let r = (-pp / 3.0).sqrt();
    let phi = (3.0 * qq / (2.0 * pp * r)).clamp(-1.0, 1.0).acos();
    let mut out = Vec::new();
    for k in 0..3 {
        let mut l = 2.0 * r * ((phi - 2.0 * PI * k as f64) / 3.0).cos() - bn / 3.0;
        for _ in 0..50 {
            let f = ((a * l + b) * l + c) * l + d;
            let df = (3.0 * a * l + 2.0 * b) * l + c;
            if df == 0.0 {
                break;
            }
            l -= f / df;
        }
        let m = lin(s1, &s, l);
        let candidates = [cross(m[0], m[1]), cross(m[0], m[2]), cross(m[1], m[2])];
        let mut w = *candidates
            .iter()
            .max_by(|x, y| norm(x).total_cmp(&norm(y)))
            .unwrap();
        let quad = quad_form(&s, &w);
        w.iter_mut().for_each(|v| *v /= quad.sqrt());
        out.push((l, w));
    }
    out.sort_by(|x, y| y.0.total_cmp(&x.0));
    out
}

pub fn norm(v: &[f64; 3]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn quad_form(m: &M3, w: &[f64; 3]) -> f64 {
    (0..3).map(|i| (0..3).map(|j| w[i] * m[i][j] * w[j]).sum::<f64>()).sum()
}

pub fn random_spd(next: &mut impl FnMut() -> f64) -> M3 {
    let b: Vec<f64> = (0..9).map(|_| next()).collect();
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| b[i * 3 + k] * b[j * 3 + k]).sum::<f64>() + if i == j { 0.2 } else { 0.0 };
        }
    }
    m
}
