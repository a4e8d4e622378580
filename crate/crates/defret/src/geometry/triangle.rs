//! Exact point-to-triangle distance.

use nalgebra::Point3;

/// Closest point on the closed triangle `abc` to `p`, by Voronoi-region
/// classification (vertex, edge, or face region). A degenerate triangle
/// falls back to the nearest of its three edges.
pub fn closest_point_on_triangle(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> Point3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;

    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }

    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let denom = d1 - d3;
        if denom > 0.0 {
            return a + ab * (d1 / denom);
        }
        return *a;
    }

    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let denom = d2 - d6;
        if denom > 0.0 {
            return a + ac * (d2 / denom);
        }
        return *a;
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let denom = (d4 - d3) + (d5 - d6);
        if denom > 0.0 {
            return b + (c - b) * ((d4 - d3) / denom);
        }
        return *b;
    }

    let denom = va + vb + vc;
    if denom <= 0.0 || !denom.is_finite() {
        // Degenerate (collinear or coincident vertices): nearest edge wins.
        let e1 = closest_point_on_segment(p, a, b);
        let e2 = closest_point_on_segment(p, b, c);
        let e3 = closest_point_on_segment(p, c, a);
        let mut best = e1;
        let mut best_d = (p - e1).norm_squared();
        for q in [e2, e3] {
            let d = (p - q).norm_squared();
            if d < best_d {
                best_d = d;
                best = q;
            }
        }
        return best;
    }
    let v = vb / denom;
    let w = vc / denom;
    a + ab * v + ac * w
}

pub fn closest_point_on_segment(p: &Point3<f64>, a: &Point3<f64>, b: &Point3<f64>) -> Point3<f64> {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return *a;
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

pub fn point_triangle_distance_sq(p: &Point3<f64>, tri: &[Point3<f64>; 3]) -> f64 {
    let q = closest_point_on_triangle(p, &tri[0], &tri[1], &tri[2]);
    (p - q).norm_squared()
}

/// Euclidean distance from `p` to the closed triangle.
pub fn point_triangle_distance(p: &Point3<f64>, tri: &[Point3<f64>; 3]) -> f64 {
    point_triangle_distance_sq(p, tri).sqrt()
}
