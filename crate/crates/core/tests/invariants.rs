use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridcox::eval::permutation_test;
use gridcox::mesh::{build_circular_mesh, build_tri_mesh, wrap_angle, FemMesh, Rect, TemporalMesh};
use gridcox::model::{expected_count, fit_map, Hyperparameters, ModelKind, ModelSpec, NewtonOptions, PriorConfig};
use gridcox::spde::{assemble_precision, kron_precision, marginal_variance, DomainKind, SpdeParams};
use gridcox::sparse::Cholesky;
use gridcox::trajectory::{angular_step, integration_weights, segment_path, IntegrationWeights, Meshes, Sample, SessionData};

fn session(n: usize, seed: u64, spike_p: f64) -> SessionData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = [rng.random_range(20.0..80.0), rng.random_range(20.0..80.0)];
    let mut heading: f64 = rng.random_range(0.0..6.0);
    let mut theta: f64 = rng.random_range(0.0..6.0);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(Sample { t: i as f64 * 0.1, x: p[0], y: p[1], theta: wrap_angle(theta), spike: rng.random_bool(spike_p) });
        heading += rng.random_range(-0.6..0.6);
        theta += rng.random_range(-0.8..0.8);
        let step = rng.random_range(0.0..3.0);
        p[0] = (p[0] + step * heading.cos()).clamp(1.0, 99.0);
        p[1] = (p[1] + step * heading.sin()).clamp(1.0, 99.0);
    }
    SessionData::new(out).unwrap()
}

fn bisect(d: &SessionData) -> SessionData {
    let mut out = Vec::new();
    for w in d.samples.windows(2) {
        out.push(w[0]);
        out.push(Sample {
            t: 0.5 * (w[0].t + w[1].t),
            x: 0.5 * (w[0].x + w[1].x),
            y: 0.5 * (w[0].y + w[1].y),
            theta: wrap_angle(w[0].theta + 0.5 * angular_step(w[0].theta, w[1].theta)),
            spike: false,
        });
    }
    out.push(*d.samples.last().unwrap());
    SessionData::new(out).unwrap()
}

fn meshes(duration: f64) -> Meshes {
    Meshes {
        tri: build_tri_mesh(Rect::new(0.0, 0.0, 100.0, 100.0), 15.0, 5.0).unwrap(),
        circ: Some(build_circular_mesh(8).unwrap()),
        temporal: Some(TemporalMesh::uniform(duration, 5).unwrap()),
    }
}

fn weights(d: &SessionData, m: &Meshes, kind: ModelKind) -> IntegrationWeights {
    let segs = segment_path(
        d,
        &m.tri,
        if kind.has_theta() { m.circ.as_ref() } else { None },
        if kind.has_time() { m.temporal.as_ref() } else { None },
        &[],
    )
    .unwrap();
    integration_weights(&segs, m, kind, d, &d.spike_train(), None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bisecting_samples_leaves_spatial_weights_unchanged(seed in 0u64..10_000) {
        let d = session(300, seed, 0.0);
        let m = meshes(d.duration());
        let a = weights(&d, &m, ModelKind::Omega);
        let b = weights(&bisect(&d), &m, ModelKind::Omega);
        let (sa, sb): (f64, f64) = (a.b.iter().sum(), b.b.iter().sum());
        prop_assert!((sa - sb).abs() <= 1e-9 * sa);
        prop_assert!((sa - d.path_length()).abs() <= 1e-9 * sa);
        let scale = a.b.iter().fold(0.0f64, |m, v| m.max(*v));
        for (x, y) in a.b.iter().zip(&b.b) {
            prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-6 * scale));
        }
    }

    #[test]
    fn product_weights_marginalize_to_spatial_weights(seed in 0u64..10_000) {
        let d = session(300, seed, 0.0);
        let m = meshes(d.duration());
        let p = m.p_omega();
        let scale = d.path_length();
        let omega = weights(&d, &m, ModelKind::Omega);
        let inter = weights(&d, &m, ModelKind::OmegaTheta);
        for i in 0..p {
            let s: f64 = (0..m.p_theta()).map(|j| inter.b[j * p + i]).sum();
            prop_assert!((s - omega.b[i]).abs() <= 1e-10 * scale);
        }
        for kind in [ModelKind::OmegaT, ModelKind::OmegaThetaT] {
            let iw = weights(&d, &m, kind);
            let dense = gridcox::sparse::to_dense(iw.bt.as_ref().unwrap());
            for c in 0..iw.p_field {
                let s: f64 = (0..iw.p_time).map(|r| dense[(r, c)]).sum();
                prop_assert!((s - iw.b[c]).abs() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn observation_rows_are_partitions_of_unity(seed in 0u64..10_000, kind_ix in 0usize..4) {
        let kind = ModelKind::ALL[kind_ix];
        let d = session(200, seed, 0.2);
        let m = meshes(d.duration());
        let iw = weights(&d, &m, kind);
        let ones = vec![1.0; iw.p_field];
        let rows = gridcox::sparse::mul_vec(&iw.a_obs, &ones);
        prop_assert_eq!(rows.len(), iw.n_spikes);
        prop_assert!(rows.iter().all(|r| (r - 1.0).abs() < 1e-12));
        if let Some(at) = &iw.a_obs_t {
            let rows = gridcox::sparse::mul_vec(at, &vec![1.0; iw.p_time]);
            prop_assert!(rows.iter().all(|r| (r - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn kronecker_log_determinant_factorizes(rho_a in 5.0f64..60.0, phi_a in -0.9f64..2.0, rho_b in 0.3f64..4.0, p in 4usize..12) {
        let tri = build_tri_mesh(Rect::new(0.0, 0.0, 40.0, 40.0), 12.0, 0.0).unwrap();
        let circ = build_circular_mesh(p).unwrap();
        let qa = assemble_precision(&tri.mass_stiffness(), &SpdeParams::new(DomainKind::Plane, rho_a, 1.3, phi_a).unwrap()).unwrap();
        let qb = assemble_precision(&circ.mass_stiffness(), &SpdeParams::new(DomainKind::Circle, rho_b, 0.7, 1.0).unwrap()).unwrap();
        let ld = |q: &gridcox::sparse::SparseMat| Cholesky::factor(q).unwrap().log_det();
        let k = kron_precision(&qb, &qa);
        let want = tri.node_count() as f64 * ld(&qb.q) + p as f64 * ld(&qa.q);
        prop_assert!((ld(&k.q) - want).abs() <= 1e-8 * want.abs().max(1.0));
    }

    #[test]
    fn permutation_p_values_mirror_under_negation(diffs in prop::collection::vec(-5.0f64..5.0, 1..40), seed in 0u64..1000) {
        let neg: Vec<f64> = diffs.iter().map(|d| -d).collect();
        let a = permutation_test(&diffs, 3000, seed).unwrap();
        let b = permutation_test(&neg, 3000, seed).unwrap();
        prop_assert_eq!(a.p_lower, b.p_upper);
        prop_assert!(a.p_lower + a.p_upper >= 1.0);
        prop_assert!((0.0..=1.0).contains(&a.p_two_sided));
    }

    #[test]
    fn variance_scales_with_sigma_and_decreases_with_damping(kappa in 0.1f64..8.0, phi in -0.95f64..3.0, sigma in 0.1f64..5.0, dom in 0usize..3) {
        let d = DomainKind::ALL[dom];
        let v1 = marginal_variance(d, kappa, phi, 1.0).unwrap();
        let vs = marginal_variance(d, kappa, phi, sigma).unwrap();
        prop_assert!((vs - sigma * sigma * v1).abs() <= 1e-12 * vs);
        let v2 = marginal_variance(d, kappa, phi + 0.05, 1.0).unwrap();
        prop_assert!(v2 < v1);
    }
}

#[test]
fn expected_count_posterior_contracts_with_more_data() {
    let sd = |n: usize| {
        let d = session(n, 42, 0.1);
        let m = Meshes { circ: None, temporal: None, ..meshes(d.duration()) };
        let iw = weights(&d, &m, ModelKind::Omega);
        let spec = ModelSpec::new(ModelKind::Omega, PriorConfig::default(), m).unwrap();
        let h = Hyperparameters::new(ModelKind::Omega, (30.0, 0.5, 1.0), None, None).unwrap();
        let fit = fit_map(&spec, &iw, &h, &NewtonOptions::default(), None, None).unwrap();
        let draws = gridcox::model::sample_posterior(&fit, 400, 1);
        let l: Vec<f64> = draws.iter().map(|x| expected_count(&iw, x).ln()).collect();
        gridcox::numeric::variance(&l).sqrt()
    };
    let (small, large) = (sd(500), sd(8000));
    assert!(large < 0.5 * small, "{small} → {large}");
}
