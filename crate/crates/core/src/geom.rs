//! Small geometric helpers shared by the mesh kernels.

use nalgebra::{Point2, Point3, Vector3};

pub type P3 = Point3<f64>;
pub type V3 = Vector3<f64>;
pub type P2 = Point2<f64>;

pub fn triangle_area(a: &P3, b: &P3, c: &P3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Unnormalized normal `(b - a) x (c - a)`, twice the triangle area in length.
pub fn triangle_normal(a: &P3, b: &P3, c: &P3) -> V3 {
    (b - a).cross(&(c - a))
}

/// Cotangent of the angle at `apex` in the triangle (apex, p, q).
pub fn cot_at(apex: &P3, p: &P3, q: &P3) -> f64 {
    let e1 = p - apex;
    let e2 = q - apex;
    let sin = e1.cross(&e2).norm();
    if sin <= f64::MIN_POSITIVE {
        return 0.0;
    }
    e1.dot(&e2) / sin
}

pub fn angle_at(apex: &P3, p: &P3, q: &P3) -> f64 {
    let e1 = p - apex;
    let e2 = q - apex;
    e1.cross(&e2).norm().atan2(e1.dot(&e2))
}

/// Closest point on triangle (a, b, c) to `p`, returned with barycentric weights.
pub fn closest_point_on_triangle(p: &P3, a: &P3, b: &P3, c: &P3) -> (P3, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, [1.0, 0.0, 0.0]);
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, [1.0 - v, v, 0.0]);
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, [0.0, 1.0 - w, w]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, [1.0 - v - w, v, w])
}

/// Closest point on segment `ab` to `p` as the segment parameter in [0, 1].
pub fn closest_param_on_segment(p: &P3, a: &P3, b: &P3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 <= 0.0 {
        return 0.0;
    }
    ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
}

/// Signed area of a closed planar polygon (counterclockwise positive).
pub fn polygon_signed_area(points: &[P2]) -> f64 {
    let n = points.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let p = points[i];
        let q = points[(i + 1) % n];
        acc += p.x * q.y - q.x * p.y;
    }
    0.5 * acc
}

/// Signed volume contribution of one oriented triangle (divergence theorem).
pub fn signed_tet_volume(a: &P3, b: &P3, c: &P3) -> f64 {
    a.coords.dot(&b.coords.cross(&c.coords)) / 6.0
}

pub fn centroid(points: impl IntoIterator<Item = P3>) -> P3 {
    let mut acc = V3::zeros();
    let mut n = 0usize;
    for p in points {
        acc += p.coords;
        n += 1;
    }
    if n == 0 {
        return P3::origin();
    }
    P3::from(acc / n as f64)
}

/// Any unit vector orthogonal to `n`.
pub fn any_orthogonal(n: &V3) -> V3 {
    let pick = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        V3::x()
    } else if n.y.abs() <= n.z.abs() {
        V3::y()
    } else {
        V3::z()
    };
    n.cross(&pick).normalize()
}
