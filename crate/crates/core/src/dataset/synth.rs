use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DomainSet, DomainTag};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::seed;

/// Two interleaving half circles (class 0 outer, class 1 inner) as the
/// source, and the same points rotated by `rotation_deg` about the origin as
/// the target. Target labels are kept as shadow labels only.
pub fn gen_two_moons_shift(
    n_per_domain: usize,
    rotation_deg: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<(DomainSet, DomainSet)> {
    if n_per_domain < 2 {
        return Err(Error::config("n", "two-moons needs at least 2 samples per domain"));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::config("noise", "noise sigma must be nonnegative"));
    }
    let mut rng = seed::stream(seed, seed::TAG_DATA, 0);
    let n_outer = n_per_domain / 2;
    let n_inner = n_per_domain - n_outer;
    let mut points = Vec::with_capacity(2 * n_per_domain);
    let mut labels = Vec::with_capacity(n_per_domain);
    for (count, class) in [(n_outer, 0usize), (n_inner, 1)] {
        for i in 0..count {
            let t = if count > 1 {
                std::f64::consts::PI * i as f64 / (count - 1) as f64
            } else {
                0.0
            };
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 1.0 - t.sin() - 0.5)
            };
            points.extend([x, y]);
            labels.push(class);
        }
    }
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("sigma checked above");
        for p in &mut points {
            *p += normal.sample(&mut rng);
        }
    }

    let (sin, cos) = sin_cos_deg(rotation_deg);
    let rotated: Vec<f64> = points
        .chunks_exact(2)
        .flat_map(|p| [cos * p[0] - sin * p[1], sin * p[0] + cos * p[1]])
        .collect();

    let source = DomainSet::labeled(
        Matrix::new(n_per_domain, 2, points)?,
        labels.clone(),
        DomainTag::Source,
        2,
    )?;
    let target = DomainSet::unlabeled(Matrix::new(n_per_domain, 2, rotated)?, 2)?.with_shadow_labels(labels)?;
    Ok((source, target))
}

/// Unit-variance Gaussian blobs around class means drawn from `U(-4, 4)^dim`;
/// the target is the same sample translated by `shift`.
pub fn gen_blobs_shift(
    n_per_domain: usize,
    class_count: usize,
    dim: usize,
    shift: &[f64],
    seed: u64,
) -> Result<(DomainSet, DomainSet)> {
    if class_count < 2 {
        return Err(Error::config("classes", "blobs need at least 2 classes"));
    }
    if dim == 0 {
        return Err(Error::config("dim", "dimension must be at least 1"));
    }
    if shift.len() != dim {
        return Err(Error::config(
            "shift",
            format!("expected {dim} components, got {}", shift.len()),
        ));
    }
    let mut rng = seed::stream(seed, seed::TAG_DATA, 0);
    let means: Vec<Vec<f64>> = (0..class_count)
        .map(|_| (0..dim).map(|_| rng.random_range(-4.0..4.0)).collect())
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut points = Vec::with_capacity(n_per_domain * dim);
    let mut labels = Vec::with_capacity(n_per_domain);
    for i in 0..n_per_domain {
        let class = i % class_count;
        for mean in &means[class] {
            points.push(mean + normal.sample(&mut rng));
        }
        labels.push(class);
    }
    let shifted: Vec<f64> = points
        .chunks_exact(dim)
        .flat_map(|p| p.iter().zip(shift).map(|(x, s)| x + s))
        .collect();
    let source = DomainSet::labeled(
        Matrix::new(n_per_domain, dim, points)?,
        labels.clone(),
        DomainTag::Source,
        class_count,
    )?;
    let target =
        DomainSet::unlabeled(Matrix::new(n_per_domain, dim, shifted)?, class_count)?.with_shadow_labels(labels)?;
    Ok((source, target))
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90°.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    match r {
        0.0 => (0.0, 1.0),
        90.0 => (1.0, 0.0),
        180.0 => (0.0, -1.0),
        270.0 => (-1.0, 0.0),
        _ => r.to_radians().sin_cos(),
    }
}
