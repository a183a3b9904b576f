//! Periodic monotonicity-preserving cubic interpolation of the cavity
//! volume over one cardiac cycle.
//!
//! The five (phase fraction, volume) knots are joined by a piecewise cubic
//! Hermite interpolant with Fritsch–Carlson slopes (the weighted harmonic
//! mean rule), wrapped periodically with period 1. The interpolant is C1,
//! hits every knot exactly, and never overshoots between knots with
//! monotone values.

/// Periodic interpolant through `(t_k, v_k)` knots with period 1.
#[derive(Debug, Clone)]
pub struct VolumeCurve {
    knots_t: Vec<f64>,
    knots_v: Vec<f64>,
    slopes: Vec<f64>,
}

impl VolumeCurve {
    /// `fractions` must be strictly increasing in [0, 1) with the first
    /// element 0; callers validate via `PhantomParams::validate`.
    pub fn new(fractions: &[f64], volumes: &[f64]) -> Self {
        assert_eq!(fractions.len(), volumes.len());
        let n = fractions.len();
        assert!(n >= 2);

        // Interval widths and secants, with the last interval wrapping to
        // the first knot one period later.
        let mut h = vec![0.0; n];
        let mut delta = vec![0.0; n];
        for k in 0..n {
            let t1 = if k + 1 < n {
                fractions[k + 1]
            } else {
                fractions[0] + 1.0
            };
            let v1 = volumes[(k + 1) % n];
            h[k] = t1 - fractions[k];
            delta[k] = (v1 - volumes[k]) / h[k];
        }

        // Fritsch–Carlson slope at knot k from the secants of the two
        // adjacent intervals (cyclic).
        let mut slopes = vec![0.0; n];
        for k in 0..n {
            let prev = (k + n - 1) % n;
            let d0 = delta[prev];
            let d1 = delta[k];
            if d0 * d1 <= 0.0 {
                slopes[k] = 0.0;
            } else {
                let w1 = 2.0 * h[k] + h[prev];
                let w2 = h[k] + 2.0 * h[prev];
                slopes[k] = (w1 + w2) / (w1 / d0 + w2 / d1);
            }
        }

        VolumeCurve {
            knots_t: fractions.to_vec(),
            knots_v: volumes.to_vec(),
            slopes,
        }
    }

    /// Evaluate at a cycle fraction; any real input is wrapped into [0, 1).
    pub fn eval(&self, t_fraction: f64) -> f64 {
        let n = self.knots_t.len();
        let t = t_fraction.rem_euclid(1.0);

        // Locate the interval [t_k, t_{k+1}) containing t.
        let mut k = n - 1;
        for i in 0..n - 1 {
            if t >= self.knots_t[i] && t < self.knots_t[i + 1] {
                k = i;
                break;
            }
        }
        let t0 = self.knots_t[k];
        let t1 = if k + 1 < n {
            self.knots_t[k + 1]
        } else {
            self.knots_t[0] + 1.0
        };
        let v0 = self.knots_v[k];
        let v1 = self.knots_v[(k + 1) % n];
        let m0 = self.slopes[k];
        let m1 = self.slopes[(k + 1) % n];

        // Exact knot hits, no Hermite round-off at the knots themselves.
        if t == t0 {
            return v0;
        }

        let h = t1 - t0;
        let s = (t - t0) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * v0 + h10 * h * m0 + h01 * v1 + h11 * h * m1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FRACS: [f64; 5] = [0.0, 0.175, 0.35, 0.60, 0.80];
    const VOLS: [f64; 5] = [120.0, 85.0, 50.0, 90.0, 115.0];

    #[test]
    fn passes_through_every_knot() {
        let c = VolumeCurve::new(&FRACS, &VOLS);
        for (t, v) in FRACS.iter().zip(VOLS.iter()) {
            assert!((c.eval(*t) - v).abs() < 1e-9, "knot ({t}, {v})");
        }
    }

    #[test]
    fn es_knot_is_exact() {
        let fr = [0.0, 0.175, 0.35, 0.60, 0.80];
        let vo = [120.0, 85.0, 50.0, 90.0, 115.0];
        let c = VolumeCurve::new(&fr, &vo);
        assert_eq!(c.eval(0.35), 50.0);
    }

    #[test]
    fn periodic_wrap_is_continuous() {
        let c = VolumeCurve::new(&FRACS, &VOLS);
        assert!((c.eval(0.0) - c.eval(1.0)).abs() < 1e-12);
        assert!((c.eval(0.999_999) - c.eval(0.0)).abs() < 0.01);
        assert!((c.eval(-0.2) - c.eval(0.8)).abs() < 1e-12);
    }

    #[test]
    fn monotone_between_monotone_knots() {
        let c = VolumeCurve::new(&FRACS, &VOLS);
        // 0.0 -> 0.35 strictly decreasing knots: curve never increases.
        let mut prev = c.eval(0.0);
        for i in 1..=700 {
            let t = 0.35 * i as f64 / 700.0;
            let v = c.eval(t);
            assert!(v <= prev + 1e-10, "non-monotone at t={t}: {v} > {prev}");
            prev = v;
        }
        // 0.35 -> 0.80 strictly increasing knots: curve never decreases.
        let mut prev = c.eval(0.35);
        for i in 1..=900 {
            let t = 0.35 + 0.45 * i as f64 / 900.0;
            let v = c.eval(t);
            assert!(v >= prev - 1e-10, "non-monotone at t={t}");
            prev = v;
        }
    }

    #[test]
    fn values_stay_within_knot_envelope() {
        let c = VolumeCurve::new(&FRACS, &VOLS);
        for i in 0..2000 {
            let t = i as f64 / 2000.0;
            let v = c.eval(t);
            assert!((50.0..=120.0).contains(&v), "t={t} v={v}");
        }
    }
}
