//! Random hypotheses and their perturbation.

use nalgebra::{Rotation3, Unit, Vector3};
use rand::Rng;

use crate::geometry::PlaneHypothesis;

/// Perturbation scale `2^-iteration`.
pub fn perturbation_scale(iteration: usize) -> f64 {
    0.5f64.powi(iteration.min(1000) as i32)
}

/// Uniformly distributed unit vector.
pub fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::<f64>::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        let n2 = v.norm_squared();
        if n2 > 1e-6 && n2 <= 1.0 {
            return v / n2.sqrt();
        }
    }
}

/// Turns `n` so that it faces the viewer along `ray` (`n . ray < 0`).
pub fn face_camera(n: Vector3<f64>, ray: &Vector3<f64>) -> Vector3<f64> {
    let r = ray.normalize();
    let d = n.dot(&r);
    if d < -0.01 {
        return n;
    }
    // reflect across the plane orthogonal to the ray and nudge toward it
    (n - (2.0 * d + 0.01) * r).normalize()
}

/// Normal uniform on the hemisphere visible along `ray`.
pub fn random_normal<R: Rng + ?Sized>(rng: &mut R, ray: &Vector3<f64>) -> Vector3<f64> {
    let n = random_unit(rng);
    if n.dot(ray) < 0.0 {
        n
    } else if n.dot(ray) > 0.0 {
        -n
    } else {
        face_camera(n, ray)
    }
}

pub fn random_depth<R: Rng + ?Sized>(rng: &mut R, (min, max): (f64, f64)) -> f64 {
    if min == max {
        min
    } else {
        rng.random_range(min..=max)
    }
}

/// Random camera-facing hypothesis for the pixel with viewing ray `ray`.
pub fn random_hypothesis<R: Rng + ?Sized>(rng: &mut R, range: (f64, f64), ray: &Vector3<f64>) -> PlaneHypothesis {
    PlaneHypothesis::new(random_depth(rng, range), random_normal(rng, ray))
}

/// The eight candidate hypotheses tried next to the current one: every
/// combination of {current, perturbed, random} depth with {current,
/// perturbed, random} normal except (current, current).
///
/// The perturbed depth is `z * (1 + U(-e, e))` and the perturbed normal is a
/// rotation of the current one by at most `e * 90` degrees, with
/// `e = 2^-iteration`.
pub fn perturb<R: Rng + ?Sized>(
    hyp: &PlaneHypothesis,
    iteration: usize,
    depth_range: (f64, f64),
    ray: &Vector3<f64>,
    rng: &mut R,
) -> [PlaneHypothesis; 8] {
    let eps = perturbation_scale(iteration);
    let z = hyp.depth;
    // keep the perturbed depth inside the search range, unless the current
    // depth already left it
    let lo = depth_range.0.min(z);
    let hi = depth_range.1.max(z);
    let z_pert = (z * (1.0 + rng.random_range(-eps..=eps))).clamp(lo, hi);
    let axis = Unit::new_normalize(random_unit(rng));
    let angle = rng.random_range(0.0..=eps * std::f64::consts::FRAC_PI_2);
    let n_pert = face_camera(Rotation3::from_axis_angle(&axis, angle) * hyp.normal, ray);
    let z_rand = random_depth(rng, depth_range);
    let n_rand = random_normal(rng, ray);
    let n_cur = face_camera(hyp.normal, ray);

    let depths = [z, z_pert, z_rand];
    let normals = [n_cur, n_pert, n_rand];
    let mut out = [PlaneHypothesis::new(z, n_cur); 8];
    let mut k = 0;
    for (i, &d) in depths.iter().enumerate() {
        for (j, &n) in normals.iter().enumerate() {
            if i == 0 && j == 0 {
                continue;
            }
            out[k] = PlaneHypothesis::new(d, n);
            k += 1;
        }
    }
    out
}
