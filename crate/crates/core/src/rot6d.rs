//! Rotation representations for pose-parameter frames: axis-angle,
//! 3×3 rotation matrix, and the continuous 6D form (first two matrix
//! columns, flattened column-major). All functions are pure.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Vec3<S> = [S; 3];
pub type Mat3<S> = [[S; 3]; 3];
pub type Rot6d<S> = [S; 6];

const SMALL_ANGLE: f64 = 1e-7;

/// Rodrigues' formula; the magnitude of `omega` is the angle in radians.
/// Near zero the sin/cos ratios switch to series expansions.
pub fn axis_angle_to_matrix<S: Scalar>(omega: Vec3<S>) -> Mat3<S> {
    let theta2 = dot(omega, omega);
    let theta = theta2.sqrt();
    let (a, b) = if theta.to_f64s() < SMALL_ANGLE {
        // sin θ / θ and (1 − cos θ) / θ²
        let half = S::from_f64(0.5);
        (
            S::one() - theta2 / S::from_f64(6.0),
            half - theta2 / S::from_f64(24.0),
        )
    } else {
        (theta.sin() / theta, (S::one() - theta.cos()) / theta2)
    };
    let k = skew(omega);
    let k2 = mat_mul(&k, &k);
    let mut r = identity();
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = r[i][j] + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// First two columns of the rotation matrix, column-major.
pub fn matrix_to_6d<S: Scalar>(r: &Mat3<S>) -> Rot6d<S> {
    [r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1]]
}

/// Gram–Schmidt reconstruction: normalize the first column, orthogonalize
/// and normalize the second, take the cross product for the third.
pub fn rot6d_to_matrix<S: Scalar>(r: &Rot6d<S>) -> Result<Mat3<S>> {
    let a1 = [r[0], r[1], r[2]];
    let a2 = [r[3], r[4], r[5]];
    let n1 = dot(a1, a1).sqrt();
    if n1.to_f64s() < 1e-12 {
        return Err(Error::Degenerate("first column has (near) zero norm".into()));
    }
    let b1 = scale_v(a1, S::one() / n1);
    let proj = dot(b1, a2);
    let ortho = [
        a2[0] - proj * b1[0],
        a2[1] - proj * b1[1],
        a2[2] - proj * b1[2],
    ];
    let n2 = dot(ortho, ortho).sqrt();
    if n2.to_f64s() < 1e-12 {
        return Err(Error::Degenerate(
            "columns are (near) parallel after projection".into(),
        ));
    }
    let b2 = scale_v(ortho, S::one() / n2);
    let b3 = cross(b1, b2);
    Ok([
        [b1[0], b2[0], b3[0]],
        [b1[1], b2[1], b3[1]],
        [b1[2], b2[2], b3[2]],
    ])
}

/// Canonical axis-angle (angle in [0, π]) from a rotation matrix.
/// Near-zero and near-π branches are handled separately; the near-π
/// branch extracts the axis from the largest diagonal element.
pub fn matrix_to_axis_angle<S: Scalar>(r: &Mat3<S>) -> Vec3<S> {
    let half = S::from_f64(0.5);
    let trace = r[0][0] + r[1][1] + r[2][2];
    let cos_theta = ((trace - S::one()) * half)
        .max(-S::one())
        .min(S::one());
    let theta = cos_theta.acos();
    let vee = [
        (r[2][1] - r[1][2]) * half,
        (r[0][2] - r[2][0]) * half,
        (r[1][0] - r[0][1]) * half,
    ];

    if theta.to_f64s() < SMALL_ANGLE {
        // ω = θ/sinθ · vee ≈ (1 + θ²/6) · vee
        let f = S::one() + theta * theta / S::from_f64(6.0);
        return scale_v(vee, f);
    }
    if theta.to_f64s() > std::f64::consts::PI - 1e-4 {
        // acos is ill-conditioned at the trace's lower limit; recover the
        // angle from the skew part instead: ‖vee‖ = sin θ = sin(π − θ)
        let sin_residual = dot(vee, vee).sqrt().min(S::one());
        let theta = S::from_f64(std::f64::consts::PI) - sin_residual.asin();
        // R ≈ I + (1 − cosθ)(aaᵀ − I): read aaᵀ off the symmetric part
        let one_m = S::one() - cos_theta;
        let mut diag = [S::zero(); 3];
        for (i, d) in diag.iter_mut().enumerate() {
            *d = ((r[i][i] - cos_theta) / one_m).max(S::zero());
        }
        let lead = if diag[0] >= diag[1] && diag[0] >= diag[2] {
            0
        } else if diag[1] >= diag[2] {
            1
        } else {
            2
        };
        let mut axis = [S::zero(); 3];
        axis[lead] = diag[lead].sqrt();
        let denom = S::from_f64(2.0) * one_m * axis[lead];
        for j in 0..3 {
            if j != lead {
                axis[j] = (r[lead][j] + r[j][lead]) / denom;
            }
        }
        // orient along the skew part when it is not vanishingly small
        let s = dot(axis, vee);
        let axis = if s < S::zero() {
            scale_v(axis, -S::one())
        } else {
            axis
        };
        let n = dot(axis, axis).sqrt();
        return scale_v(axis, theta / n);
    }
    let sin_theta = theta.sin();
    scale_v(vee, theta / sin_theta)
}

pub fn identity<S: Scalar>() -> Mat3<S> {
    let mut m = [[S::zero(); 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = S::one();
    }
    m
}

pub fn mat_mul<S: Scalar>(a: &Mat3<S>, b: &Mat3<S>) -> Mat3<S> {
    let mut out = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = S::zero();
            for (k, brow) in b.iter().enumerate() {
                acc += a[i][k] * brow[j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn transpose<S: Scalar>(a: &Mat3<S>) -> Mat3<S> {
    let mut out = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for (j, row) in a.iter().enumerate() {
            out[i][j] = row[i];
        }
    }
    out
}

pub fn determinant<S: Scalar>(m: &Mat3<S>) -> S {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Max elementwise absolute difference.
pub fn matrix_distance<S: Scalar>(a: &Mat3<S>, b: &Mat3<S>) -> S {
    let mut worst = S::zero();
    for i in 0..3 {
        for j in 0..3 {
            worst = worst.max((a[i][j] - b[i][j]).abs());
        }
    }
    worst
}

fn skew<S: Scalar>(w: Vec3<S>) -> Mat3<S> {
    [
        [S::zero(), -w[2], w[1]],
        [w[2], S::zero(), -w[0]],
        [-w[1], w[0], S::zero()],
    ]
}

fn dot<S: Scalar>(a: Vec3<S>, b: Vec3<S>) -> S {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross<S: Scalar>(a: Vec3<S>, b: Vec3<S>) -> Vec3<S> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn scale_v<S: Scalar>(v: Vec3<S>, s: S) -> Vec3<S> {
    [v[0] * s, v[1] * s, v[2] * s]
}

/// Random rotation samples covering the tricky angle ranges, for tests.
pub fn sample_axis_angle<S: Scalar>(rng: &mut impl rand::Rng, case: usize) -> Vec3<S> {
    use std::f64::consts::PI;
    let dir = loop {
        let v = [
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 {
            break [v[0] / n, v[1] / n, v[2] / n];
        }
    };
    let theta = match case % 4 {
        0 => rng.gen::<f64>() * (PI - 2e-3) + 1e-3, // generic
        1 => rng.gen::<f64>() * 1e-6,               // near zero
        2 => PI - rng.gen::<f64>() * 1e-5,          // near π
        _ => rng.gen::<f64>() * 0.1,                // small but not tiny
    };
    [
        S::from_f64(dir[0] * theta),
        S::from_f64(dir[1] * theta),
        S::from_f64(dir[2] * theta),
    ]
}
