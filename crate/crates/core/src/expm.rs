//! Matrix exponential via scaling-and-squaring with Padé(13), after
//! Higham (2005), with a spectral shortcut for symmetric arguments.

use nalgebra::{DMatrix, SymmetricEigen};

/// Padé order-13 numerator coefficients.
const B13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// Higham's theta for the order-13 approximant.
const THETA_13: f64 = 5.371920351148152;

fn one_norm(a: &DMatrix<f64>) -> f64 {
    let mut max = 0.0f64;
    for j in 0..a.ncols() {
        let s: f64 = a.column(j).iter().map(|x| x.abs()).sum();
        max = max.max(s);
    }
    max
}

fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    true
}

/// exp(A) for a square real matrix.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm requires a square matrix");
    if n == 1 {
        return DMatrix::from_element(1, 1, a[(0, 0)].exp());
    }
    let scale = one_norm(a).max(1.0);
    if is_symmetric(a, 1e-13 * scale) {
        return expm_symmetric(a);
    }
    expm_pade13(a)
}

/// Spectral route for symmetric A: exp(A) = V exp(D) V^T.
pub fn expm_symmetric(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let v = &eig.eigenvectors;
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    for (k, lam) in eig.eigenvalues.iter().enumerate() {
        let e = lam.exp();
        let col = v.column(k);
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                out[(i, j)] += e * col[i] * col[j];
            }
        }
    }
    out
}

fn expm_pade13(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = one_norm(a);
    let s = if norm > THETA_13 { (norm / THETA_13).log2().ceil().max(0.0) as u32 } else { 0 };
    let a1 = a / 2f64.powi(s as i32);

    let a2 = &a1 * &a1;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let id = DMatrix::<f64>::identity(n, n);

    // u = A [A6 (b13 A6 + b11 A4 + b9 A2) + b7 A6 + b5 A4 + b3 A2 + b1 I]
    let w1 = &a6 * (B13[13] * &a6 + B13[11] * &a4 + B13[9] * &a2);
    let w2 = B13[7] * &a6 + B13[5] * &a4 + B13[3] * &a2 + B13[1] * &id;
    let u = &a1 * (w1 + w2);
    // v = A6 (b12 A6 + b10 A4 + b8 A2) + b6 A6 + b4 A4 + b2 A2 + b0 I
    let z1 = &a6 * (B13[12] * &a6 + B13[10] * &a4 + B13[8] * &a2);
    let v = z1 + B13[6] * &a6 + B13[4] * &a4 + B13[2] * &a2 + B13[0] * &id;

    let p = &v + &u;
    let q = &v - &u;
    let mut r = q
        .lu()
        .solve(&p)
        .expect("Pade denominator is singular; matrix norm out of range");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}
