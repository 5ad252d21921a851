use hetgrow::eigen::SymmetricMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> SymmetricMatrix {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = rng.random_range(-2.0..2.0);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    SymmetricMatrix::new(n, a).unwrap()
}

/// Determinant by cofactor expansion along the first row.
pub fn det(a: &[f64], n: usize) -> f64 {
    if n == 1 {
        return a[0];
    }
    let mut total = 0.0;
    for col in 0..n {
        let minor: Vec<f64> = (1..n)
            .flat_map(|r| (0..n).filter(move |&c| c != col).map(move |c| (r, c)))
            .map(|(r, c)| a[r * n + c])
            .collect();
        let sign = if col % 2 == 0 { 1.0 } else { -1.0 };
        total += sign * a[col] * det(&minor, n - 1);
    }
    total
}

pub fn char_poly(m: &SymmetricMatrix, x: f64) -> f64 {
    let n = m.dim();
    let shifted: Vec<f64> = (0..n * n)
        .map(|k| m.data()[k] - if k / n == k % n { x } else { 0.0 })
        .collect();
    det(&shifted, n)
}

/// Roots of `det(A − xI)` located by sign changes on a fine grid and refined
/// by bisection. Double roots are found as sign-preserving touches that the
/// grid step straddles, so inputs here are generic random matrices.
pub fn char_poly_roots(m: &SymmetricMatrix) -> Vec<f64> {
    let n = m.dim();
    let bound = m.inf_norm() + 1.0;
    let steps = 20_000;
    let h = 2.0 * bound / steps as f64;
    let mut roots = Vec::new();
    let mut x0 = -bound;
    let mut f0 = char_poly(m, x0);
    for s in 1..=steps {
        let x1 = -bound + s as f64 * h;
        let f1 = char_poly(m, x1);
        if f0 == 0.0 {
            roots.push(x0);
        } else if f0.signum() != f1.signum() && f1 != 0.0 {
            let (mut lo, mut hi, mut flo) = (x0, x1, f0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let fm = char_poly(m, mid);
                if fm.signum() == flo.signum() {
                    lo = mid;
                    flo = fm;
                } else {
                    hi = mid;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
        x0 = x1;
        f0 = f1;
    }
    assert_eq!(roots.len(), n, "grid missed a root");
    roots
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn lu_det(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i * n + c].abs().total_cmp(&m[j * n + c].abs())).unwrap();
        if m[p * n + c] == 0.0 {
            return 0.0;
        }
        if p != c {
            for k in 0..n {
                m.swap(p * n + k, c * n + k);
            }
            det = -det;
        }
        let pivot = m[c * n + c];
        det *= pivot;
        for r in c + 1..n {
            let f = m[r * n + c] / pivot;
            for k in c..n {
                m[r * n + k] -= f * m[c * n + k];
            }
        }
    }
    det
}
