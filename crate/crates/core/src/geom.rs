//! Small fixed-size 3D algebra generic over [`Real`].
//!
//! nalgebra is used for the f64 linear algebra (SVD, Cholesky); these helpers
//! exist so the same kinematics code can run on dual numbers.

use crate::dual::Real;

pub type Vec3<T> = [T; 3];
/// Row-major 3x3 matrix.
pub type Mat3<T> = [[T; 3]; 3];

#[inline]
pub fn lift3<T: Real>(v: [f64; 3]) -> Vec3<T> {
    [T::cst(v[0]), T::cst(v[1]), T::cst(v[2])]
}

#[inline]
pub fn value3<T: Real>(v: &Vec3<T>) -> [f64; 3] {
    [v[0].value(), v[1].value(), v[2].value()]
}

#[inline]
pub fn add<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale<T: Real>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm<T: Real>(a: Vec3<T>) -> T {
    dot(a, a).sqrt()
}

pub fn identity<T: Real>() -> Mat3<T> {
    let (o, z) = (T::cst(1.0), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

#[inline]
pub fn mat_vec<T: Real>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

/// Mixed product: f64 matrix times generic vector.
#[inline]
pub fn matf_vec<T: Real>(m: &Mat3<f64>, v: Vec3<T>) -> Vec3<T> {
    let row = |r: &[f64; 3]| v[0] * r[0] + v[1] * r[1] + v[2] * r[2];
    [row(&m[0]), row(&m[1]), row(&m[2])]
}

pub fn mat_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

/// Mixed product: generic matrix times f64 matrix.
pub fn mat_mulf<T: Real>(a: &Mat3<T>, b: &Mat3<f64>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

/// Rotation matrix of an axis-angle vector (Rodrigues).
///
/// Uses the Taylor expansion of `sin(θ)/θ` and `(1 - cos θ)/θ²` near zero so
/// derivatives stay exact at the identity.
pub fn rodrigues<T: Real>(w: Vec3<T>) -> Mat3<T> {
    let th2 = dot(w, w);
    let t2 = th2.value();
    let (a, b) = if t2 < 1e-8 {
        let a = T::cst(1.0) - th2 / 6.0 + th2 * th2 / 120.0;
        let b = T::cst(0.5) - th2 / 24.0 + th2 * th2 / 720.0;
        (a, b)
    } else {
        let th = th2.sqrt();
        (th.sin() / th, (T::cst(1.0) - th.cos()) / th2)
    };
    let [x, y, z] = w;
    let o = T::cst(1.0);
    // R = I + a [w]x + b [w]x²
    [
        [
            o - b * (y * y + z * z),
            b * x * y - a * z,
            b * x * z + a * y,
        ],
        [
            b * x * y + a * z,
            o - b * (x * x + z * z),
            b * y * z - a * x,
        ],
        [
            b * x * z - a * y,
            b * y * z + a * x,
            o - b * (x * x + y * y),
        ],
    ]
}

/// Axis-angle vector of a rotation matrix (f64 only).
pub fn log_rotation(r: &Mat3<f64>) -> [f64; 3] {
    // sin θ · axis from the skew part, cos θ from the trace
    let v = [
        0.5 * (r[2][1] - r[1][2]),
        0.5 * (r[0][2] - r[2][0]),
        0.5 * (r[1][0] - r[0][1]),
    ];
    let s = norm(v);
    let c = 0.5 * (r[0][0] + r[1][1] + r[2][2] - 1.0);
    let th = s.atan2(c);
    if th < 1e-8 {
        return v;
    }
    if std::f64::consts::PI - th > 1e-6 {
        return scale(v, th / s);
    }
    // Near a half turn the skew part vanishes: (R + Rᵀ)/2 − cos θ I = (1 − cos θ) a aᵀ.
    let k = (0..3).fold(0, |m, i| if r[i][i] > r[m][m] { i } else { m });
    let mut axis = [0.0; 3];
    for (i, a) in axis.iter_mut().enumerate() {
        *a = 0.5 * (r[i][k] + r[k][i]) - if i == k { c } else { 0.0 };
    }
    let n = norm(axis);
    let mut axis = scale(axis, 1.0 / n);
    if dot(axis, v) < 0.0 {
        axis = scale(axis, -1.0);
    }
    scale(axis, th)
}

/// Smallest rotation taking direction `a` onto direction `b`.
pub fn minimal_rotation(a: [f64; 3], b: [f64; 3]) -> Mat3<f64> {
    let a = scale(a, 1.0 / norm(a));
    let b = scale(b, 1.0 / norm(b));
    let axis = cross(a, b);
    let s = norm(axis);
    let c = dot(a, b);
    if s < 1e-12 {
        if c > 0.0 {
            return identity();
        }
        // Antiparallel: half turn about any axis orthogonal to `a`.
        let helper = if a[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let n = cross(a, helper);
        return rodrigues(scale(n, std::f64::consts::PI / norm(n)));
    }
    rodrigues(scale(axis, s.atan2(c) / s))
}

/// Rotation minimizing `Σ wᵢ |R aᵢ − bᵢ|²` (Kabsch, no centering). `None`
/// when the directions do not span a plane.
pub fn best_rotation(pairs: &[([f64; 3], [f64; 3], f64)]) -> Option<Mat3<f64>> {
    let mut h = nalgebra::Matrix3::zeros();
    for (p, q, w) in pairs {
        h += nalgebra::Vector3::from(*q) * nalgebra::Vector3::from(*p).transpose() * *w;
    }
    let svd = h.svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    if sv[1] <= 1e-9 * sv[0].max(f64::MIN_POSITIVE) {
        return None;
    }
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut d = nalgebra::Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        // flip the axis of the smallest singular value
        let k = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |m, (i, &x)| if x < m.1 { (i, x) } else { m })
            .0;
        d[(k, k)] = -1.0;
    }
    Some(from_na(&(u * d * v_t)))
}

/// Geodesic angle between two rotations.
pub fn rotation_angle_between(a: &Mat3<f64>, b: &Mat3<f64>) -> f64 {
    let rel = mat_mul(&transpose(a), b);
    let tr = rel[0][0] + rel[1][1] + rel[2][2];
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

pub fn to_na(m: &Mat3<f64>) -> nalgebra::Matrix3<f64> {
    nalgebra::Matrix3::new(
        m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
    )
}

pub fn from_na(m: &nalgebra::Matrix3<f64>) -> Mat3<f64> {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

/// Rigid transform `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rigid<T> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> Rigid<T> {
    pub fn identity() -> Self {
        Self {
            rotation: identity(),
            translation: [T::zero(); 3],
        }
    }

    #[inline]
    pub fn apply(&self, p: Vec3<T>) -> Vec3<T> {
        add(mat_vec(&self.rotation, p), self.translation)
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &Rigid<T>) -> Rigid<T> {
        Rigid {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: self.apply(other.translation),
        }
    }

    pub fn value(&self) -> Rigid<f64> {
        let mut rotation = [[0.0; 3]; 3];
        for (dst, src) in rotation.iter_mut().zip(self.rotation.iter()) {
            *dst = value3(src);
        }
        Rigid {
            rotation,
            translation: value3(&self.translation),
        }
    }
}
