//! Symmetric alpha-stable variates via the Chambers-Mallows-Stuck
//! transform, in the 1-parameterization S(alpha, beta = 0, scale,
//! location). At alpha = 2 the law is Normal(location, sd = scale * sqrt(2)).

use rand::Rng;

// Keep uniforms away from 0 and 1 so cos(v) and ln(w) stay finite.
const UNIT_EPS: f64 = 1e-12;

fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>().clamp(UNIT_EPS, 1.0 - UNIT_EPS)
}

/// One draw from the symmetric stable law with stability exponent
/// `alpha` in (1, 2], `scale` > 0, centered at `location`. Deterministic
/// given the RNG state.
pub fn draw_stable<R: Rng + ?Sized>(alpha: f64, scale: f64, location: f64, rng: &mut R) -> f64 {
    debug_assert!(alpha > 1.0 && alpha <= 2.0, "alpha must lie in (1, 2]");
    debug_assert!(scale > 0.0, "scale must be positive");
    let v = std::f64::consts::PI * (open_unit(rng) - 0.5);
    let w = -open_unit(rng).ln();
    let x = if alpha == 2.0 {
        2.0 * v.sin() * w.sqrt()
    } else {
        let s = (alpha * v).sin() / v.cos().powf(1.0 / alpha);
        let tail = (((1.0 - alpha) * v).cos() / w).powf((1.0 - alpha) / alpha);
        s * tail
    };
    location + scale * x
}
