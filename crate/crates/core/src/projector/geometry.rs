//! Exact area of an axis-aligned square pixel inside a detector strip.

/// Area of the square of side `pixel` centred at the origin that lies in the strip
/// `s_lo <= x cos(theta) + y sin(theta) <= s_hi`, by clipping the square polygon
/// against both half-planes.
pub fn square_strip_area(pixel: f64, cos_t: f64, sin_t: f64, s_lo: f64, s_hi: f64) -> f64 {
    if s_hi <= s_lo {
        return 0.0;
    }
    let h = 0.5 * pixel;
    let reach = h * (cos_t.abs() + sin_t.abs());
    if s_hi <= -reach || s_lo >= reach {
        return 0.0;
    }
    if s_lo <= -reach && s_hi >= reach {
        return pixel * pixel;
    }
    let square = [(-h, -h), (h, -h), (h, h), (-h, h)];
    let mut poly: Vec<(f64, f64)> = square.to_vec();
    // keep s >= s_lo, i.e. -s <= -s_lo
    poly = clip_half_plane(&poly, -cos_t, -sin_t, -s_lo);
    poly = clip_half_plane(&poly, cos_t, sin_t, s_hi);
    polygon_area(&poly)
}

/// Sutherland-Hodgman clip of a convex polygon against `a x + b y <= c`.
fn clip_half_plane(poly: &[(f64, f64)], a: f64, b: f64, c: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    if poly.is_empty() {
        return out;
    }
    let side = |p: (f64, f64)| a * p.0 + b * p.1 - c;
    for i in 0..poly.len() {
        let cur = poly[i];
        let nxt = poly[(i + 1) % poly.len()];
        let (dc, dn) = (side(cur), side(nxt));
        if dc <= 0.0 {
            out.push(cur);
        }
        if (dc < 0.0 && dn > 0.0) || (dc > 0.0 && dn < 0.0) {
            let t = dc / (dc - dn);
            out.push((cur.0 + t * (nxt.0 - cur.0), cur.1 + t * (nxt.1 - cur.1)));
        }
    }
    out
}

fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..poly.len() {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % poly.len()];
        twice += x0 * y1 - x1 * y0;
    }
    0.5 * twice.abs()
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Closed-form areas used as independent checks of the clipping code.

    /// Area of the centred square of side `p` with `x cos + y sin <= t`, from the CDF of
    /// the sum of two independent uniforms of widths `p|cos|` and `p|sin|`.
    pub fn square_below(p: f64, cos_t: f64, sin_t: f64, t: f64) -> f64 {
        let a = p * cos_t.abs();
        let b = p * sin_t.abs();
        let (a, b) = if a >= b { (a, b) } else { (b, a) };
        if b < 1e-12 * p {
            return p * p * ((t + 0.5 * a) / a).clamp(0.0, 1.0);
        }
        let r = |v: f64| if v > 0.0 { 0.5 * v * v } else { 0.0 };
        let inside = r(t + 0.5 * (a + b)) - r(t + 0.5 * (a - b)) - r(t - 0.5 * (a - b))
            + r(t - 0.5 * (a + b));
        p * p * inside / (a * b)
    }

    /// Area of the disk of radius `radius` centred at the origin with `s <= t`.
    pub fn disk_below(radius: f64, t: f64) -> f64 {
        let t = t.clamp(-radius, radius);
        let cap = radius * radius * (t / radius).acos() - t * (radius * radius - t * t).sqrt();
        std::f64::consts::PI * radius * radius - cap
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_overlap_is_pixel_area() {
        let a = square_strip_area(1.0, 1.0, 0.0, -1.0, 1.0);
        assert_eq!(a, 1.0);
        // strip exactly the pixel width, axis aligned
        let a = square_strip_area(2.0, 1.0, 0.0, -1.0, 1.0);
        assert!((a - 4.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_strip_is_zero() {
        assert_eq!(square_strip_area(1.0, 0.6, 0.8, 0.8, 2.0), 0.0);
        assert_eq!(square_strip_area(1.0, 0.6, 0.8, -3.0, -0.71), 0.0);
    }

    #[test]
    fn half_pixel_at_45_degrees() {
        let c = std::f64::consts::FRAC_1_SQRT_2;
        let a = square_strip_area(1.0, c, c, 0.0, 10.0);
        assert!((a - 0.5).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn clipping_matches_closed_form(
            theta in 0.0f64..std::f64::consts::PI,
            s_lo in -1.2f64..1.2,
            width in 0.0f64..1.5,
            p in 0.3f64..2.0,
        ) {
            let (sn, cs) = theta.sin_cos();
            let s_lo = s_lo * p;
            let s_hi = s_lo + width * p;
            let clipped = square_strip_area(p, cs, sn, s_lo, s_hi);
            let exact = oracle::square_below(p, cs, sn, s_hi) - oracle::square_below(p, cs, sn, s_lo);
            prop_assert!((clipped - exact).abs() <= 1e-12 * p * p, "{clipped} vs {exact}");
        }
    }
}
