//! Matrix exponential by scaling and squaring with diagonal Padé
//! approximants, degree and scaling picked from the 1-norm so that the
//! backward error stays below unit roundoff.

use nalgebra::DMatrix;

use crate::error::{PopdiffError, Result};

const THETA_3: f64 = 1.495585217958292e-2;
const THETA_5: f64 = 2.53939833006323e-1;
const THETA_7: f64 = 9.504178996162932e-1;
const THETA_9: f64 = 2.097847961257068e0;
const THETA_13: f64 = 5.371920351148152e0;

const PADE_3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE_5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE_7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE_9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE_13: [f64; 14] = [
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

pub fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `exp(a)` for a square matrix.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    assert!(a.is_square(), "expm needs a square matrix");
    let n = a.nrows();
    if n == 0 {
        return Ok(a.clone());
    }
    let norm = one_norm(a);
    if !norm.is_finite() {
        return Err(PopdiffError::Conditioning(
            "matrix exponential argument is not finite".into(),
        ));
    }
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;

    let low_order = [
        (THETA_3, &PADE_3[..]),
        (THETA_5, &PADE_5[..]),
        (THETA_7, &PADE_7[..]),
        (THETA_9, &PADE_9[..]),
    ];
    for (theta, coeffs) in low_order {
        if norm <= theta {
            let (u, v) = pade_low(a, &a2, &ident, coeffs);
            return finish(u, v);
        }
    }

    let s = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scale = 2f64.powi(-s);
    let a = a * scale;
    let a2 = a2 * (scale * scale);
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &PADE_13;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];
    let mut r = finish(u, v)?;
    for _ in 0..s {
        r = &r * &r;
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(PopdiffError::Conditioning(
            "matrix exponential overflowed while squaring".into(),
        ));
    }
    Ok(r)
}

fn pade_low(
    a: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    ident: &DMatrix<f64>,
    coeffs: &[f64],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut u = DMatrix::<f64>::zeros(n, n);
    let mut v = DMatrix::<f64>::zeros(n, n);
    let mut power = ident.clone();
    for k in (0..coeffs.len()).step_by(2) {
        v += &power * coeffs[k];
        u += &power * coeffs[k + 1];
        power = &power * a2;
    }
    (a * u, v)
}

fn finish(u: DMatrix<f64>, v: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = &v + &u;
    let q = v - u;
    let lu = q.lu();
    let r = lu
        .solve(&p)
        .ok_or_else(|| PopdiffError::Conditioning("Padé denominator is singular".into()))?;
    if r.iter().any(|v| !v.is_finite()) {
        return Err(PopdiffError::Conditioning(
            "matrix exponential is not finite".into(),
        ));
    }
    Ok(r)
}

/// `exp([[a, e], [0, a]])`, returning `(exp(a), L(a, e))` where the second
/// entry is the upper-right block (the Fréchet derivative of exp at `a` in
/// direction `e`).
pub fn expm_with_directional(
    a: &DMatrix<f64>,
    e: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let mut big = DMatrix::<f64>::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(a);
    big.view_mut((0, n), (n, n)).copy_from(e);
    big.view_mut((n, n), (n, n)).copy_from(a);
    let ex = expm(&big)?;
    Ok((
        ex.view((n, n), (n, n)).into_owned(),
        ex.view((0, n), (n, n)).into_owned(),
    ))
}
