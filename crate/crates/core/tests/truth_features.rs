//! Area-uniformity of seeded features, checked against an independent
//! mesh-based sampler through the nearest-neighbour distance distribution.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snac_core::truth::{generate_body, seed_features, BodySpec, FeatureSpec};

fn nn_distances(p: &[Vector3<f64>]) -> Vec<f64> {
    p.iter()
        .enumerate()
        .map(|(i, a)| {
            p.iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| (a - b).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Asymptotic two-sample Kolmogorov–Smirnov p-value.
fn ks_two_sample(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lam = (en + 0.12 + 0.11 / en) * d;
    let mut q = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        q += 2.0 * (-1f64).powi(k - 1) * (-2.0 * kf * kf * lam * lam).exp();
    }
    q.clamp(0.0, 1.0)
}

#[test]
fn nearest_neighbour_distribution_matches_mesh_sampling() {
    let (body, _, _) = generate_body(&BodySpec::default());
    let n = 5000;
    let feats = seed_features(&body, &FeatureSpec { count: n, seed: 77, ..FeatureSpec::default() });
    let seeded: Vec<_> = feats.iter().map(|f| f.acaf_position).collect();

    // Reference: triangulate the surface on a fine latitude/longitude grid,
    // pick triangles by area, sample barycentrically, then snap radially.
    let step = 0.5f64.to_radians();
    let (nlat, nlon) = (360usize, 720usize);
    let vertex = |i: usize, j: usize| {
        let phi = -std::f64::consts::FRAC_PI_2 + i as f64 * step;
        let lam = -std::f64::consts::PI + j as f64 * step;
        let d = Vector3::new(phi.cos() * lam.cos(), phi.cos() * lam.sin(), phi.sin());
        d * body.coefficients.radius(lam, phi)
    };
    let mut verts = vec![Vector3::zeros(); (nlat + 1) * (nlon + 1)];
    for i in 0..=nlat {
        for j in 0..=nlon {
            verts[i * (nlon + 1) + j] = vertex(i, j);
        }
    }
    let mut tris = Vec::new();
    let mut cum = Vec::new();
    let mut total = 0.0;
    for i in 0..nlat {
        for j in 0..nlon {
            let v = |a: usize, b: usize| verts[a * (nlon + 1) + b];
            for t in [[v(i, j), v(i, j + 1), v(i + 1, j + 1)], [v(i, j), v(i + 1, j + 1), v(i + 1, j)]] {
                let area = 0.5 * (t[1] - t[0]).cross(&(t[2] - t[0])).norm();
                total += area;
                tris.push(t);
                cum.push(total);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let reference: Vec<_> = (0..n)
        .map(|_| {
            let x = rng.gen::<f64>() * total;
            let k = cum.partition_point(|c| *c < x).min(tris.len() - 1);
            let t = tris[k];
            let (mut r1, mut r2) = (rng.gen::<f64>(), rng.gen::<f64>());
            if r1 + r2 > 1.0 {
                r1 = 1.0 - r1;
                r2 = 1.0 - r2;
            }
            let p = t[0] + (t[1] - t[0]) * r1 + (t[2] - t[0]) * r2;
            body.surface_point(&p)
        })
        .collect();

    let p = ks_two_sample(nn_distances(&seeded), nn_distances(&reference));
    assert!(p > 0.01, "KS p = {p}");
}
