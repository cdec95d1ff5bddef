//! Extended-system certificate checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use setguard::certificates::{
    build_extended_system, sprocedure_pair, sym_eig_max, theorem3_block_matrix, verify_theorem3, CertificateError, CertificateReport,
    ExtendedSystem, VertexOptions,
};
use setguard::controllers::OutputFeedbackGain;
use setguard::linalg::{mat, spectral_abscissa};
use setguard::plants::{LinearPlant, Nonlinearity, SectorPlant};
use setguard::simkit::{certify, preset_example6, CertificateOutcome, Controller, Example6Variant, Injection, Scenario};
use setguard::{BoundaryProfile, Channel, Profile, Transform};

fn gains(s: &Scenario) -> &OutputFeedbackGain {
    match &s.controller {
        Controller::OutputFeedback(g) => g,
        other => panic!("unexpected controller {other:?}"),
    }
}

fn certified(gamma: f64) -> (Scenario, CertificateReport) {
    let s = preset_example6(&Example6Variant { gamma, ..Example6Variant::default() }).unwrap();
    match certify(&s).unwrap() {
        CertificateOutcome::Extended(r) => (s, *r),
        other => panic!("unexpected outcome {other:?}"),
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

#[test]
fn sprocedure_bounds_dissipation_on_sector() {
    let (s, r) = certified(10.0);
    assert!(r.feasible);
    let beta = r.beta.unwrap();
    let c = r.sector_bound;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = f64::NEG_INFINITY;
    for v in &r.vertices {
        let sys = build_extended_system(&s.plant, gains(&s), &v.jac_inv).unwrap();
        let (decay, sector) = sprocedure_pair(&sys, &r.p, r.alpha, beta, c);
        let full = theorem3_block_matrix(&sys, &r.p, r.alpha, beta, c).unwrap();
        assert!((&decay + &sector - &full).norm() < 1e-9 * full.norm());
        let (dim, k, nf) = (sys.dim(), sys.g_e.ncols(), sys.d_e.ncols());
        for _ in 0..10_000 / r.vertices.len() {
            let xe = random_vec(&mut rng, dim, 5.0);
            let xnorm = (&sys.e * &xe).norm();
            let dir = random_vec(&mut rng, k, 1.0);
            let phi = if dir.norm() > 0.0 { dir.normalize() * (c * xnorm * rng.random_range(0.0..1.0)) } else { dir };
            let fe = random_vec(&mut rng, nf, 5.0);
            let z = DVector::from_iterator(dim + k + nf, xe.iter().chain(phi.iter()).chain(fe.iter()).copied());
            let sec = z.dot(&(&sector * &z));
            assert!(sec >= -1e-9 * z.norm_squared(), "sector form negative: {sec}");
            let dis = z.dot(&(&decay * &z));
            worst = worst.max(dis / z.norm_squared());
        }
    }
    assert!(worst <= 1e-12, "dissipation form positive on the sector: {worst:e}");
}

#[test]
fn interior_vertices_do_not_change_verdict() {
    let (s, r) = certified(10.0);
    let grid = s.time_grid(2000);
    let plain = VertexOptions::default();
    let with_extra = VertexOptions { extra: vec![1.5, 3.0, 10.0, 100.0, 500.0], ..VertexOptions::default() };
    let g = gains(&s);
    let a = verify_theorem3(&s.plant, g, &s.transform, r.alpha, r.sector_bound, &grid, &plain, Some(r.p.clone())).unwrap();
    let b = verify_theorem3(&s.plant, g, &s.transform, r.alpha, r.sector_bound, &grid, &with_extra, Some(r.p.clone())).unwrap();
    assert!(b.vertices.len() > a.vertices.len());
    assert_eq!(a.feasible, b.feasible);
    assert_eq!(a.beta, b.beta);
    // the block matrix is affine in the inverse Jacobian, so the worst case sits on a corner
    assert!(b.worst_eig() <= a.worst_eig() + 1e-9, "{} vs {}", b.worst_eig(), a.worst_eig());
}

#[test]
fn extended_system_matches_closed_loop_dynamics() {
    let s = preset_example6(&Example6Variant { gamma: 10.0, injection: Injection::Published, ..Example6Variant::default() }).unwrap();
    let g = gains(&s);
    let p = &s.plant;
    let base = &p.base;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..20 {
        let jac_inv = vec![rng.random_range(1.0..50.0), rng.random_range(1.0..50.0)];
        let sys = build_extended_system(p, g, &jac_inv).unwrap();
        let x = random_vec(&mut rng, 3, 3.0);
        let eps = random_vec(&mut rng, 2, 3.0);
        let phi = random_vec(&mut rng, 3, 1.0);
        let f = random_vec(&mut rng, 1, 1.0);
        let phi_t = random_vec(&mut rng, 2, 1.0);
        // along trajectories Phi equals y, which makes the injections vanish
        let y = &base.l * &x;
        let u = &g.k1 * &y + g.effective_k2() * &eps;
        let xdot = &base.a * &x + &base.b * &u + &p.g * &phi + &base.d * &f;
        let jm = DMatrix::from_diagonal(&DVector::from_vec(jac_inv.clone()));
        let epsdot = &jm * (&base.l * &xdot - &phi_t);

        let xe = DVector::from_iterator(5, x.iter().chain(eps.iter()).copied());
        let fe = DVector::from_iterator(5, f.iter().chain(phi_t.iter()).chain(y.iter()).copied());
        let lhs = &sys.a_e * &xe + &sys.g_e * &phi + &sys.d_e * &fe;
        let rhs = DVector::from_iterator(5, xdot.iter().chain(epsdot.iter()).copied());
        assert!((&lhs - &rhs).norm() < 1e-10 * (1.0 + rhs.norm()), "{lhs} vs {rhs}");
    }
}

fn scalar_case(a: f64, kappa: f64) -> (SectorPlant, OutputFeedbackGain, Transform) {
    let base = LinearPlant::new(mat(&[&[a]]), mat(&[&[1.0]]), mat(&[&[0.0]]), mat(&[&[1.0]])).unwrap();
    let plant = SectorPlant::new(base, mat(&[&[0.0]]), Nonlinearity::Zero, 0.0).unwrap();
    // T2 = -a removes the state from the eps row, leaving A_e upper triangular
    let gains = OutputFeedbackGain::new(mat(&[&[0.0]]), mat(&[&[-kappa]]), 1.0, mat(&[&[0.0]]), mat(&[&[-a]])).unwrap();
    let band = BoundaryProfile::paired(Profile::constant(-1.0), Profile::constant(1.0));
    (plant, gains, Transform::single(Channel::logistic_between(band)))
}

#[test]
fn single_vertex_triangular_case() {
    let (plant, g, tr) = scalar_case(-2.0, 1.0);
    let grid = [0.0, 1.0];
    // dPhi/deps at eps = 0 is 1/2 for the unit band, so capping at 2 leaves one vertex
    let opts = VertexOptions { cap: 2.0, ..VertexOptions::default() };
    let r = verify_theorem3(&plant, &g, &tr, 0.5, 0.0, &grid, &opts, None).unwrap();
    assert_eq!(r.vertices.len(), 1);
    assert!((r.vertices[0].jac_inv[0] - 2.0).abs() < 1e-12);
    let sys = build_extended_system(&plant, &g, &[2.0]).unwrap();
    assert_eq!(sys.a_e[(1, 0)], 0.0);
    assert!((spectral_abscissa(&sys.a_e) + 2.0).abs() < 1e-12);
    assert!(r.feasible, "{r}");
    assert!(r.p_eigenvalues()[0] > 0.0);
    let m = theorem3_block_matrix(&sys, &r.p, 0.5, r.beta.unwrap(), 0.0).unwrap();
    assert!(sym_eig_max(&m) <= 1e-9);
}

#[test]
fn unstable_nominal_vertex_reported() {
    let (plant, g, tr) = scalar_case(0.5, 1.0);
    let opts = VertexOptions { cap: 2.0, ..VertexOptions::default() };
    let r = verify_theorem3(&plant, &g, &tr, 0.5, 0.0, &[0.0, 1.0], &opts, None).unwrap();
    assert!(!r.feasible);
    assert!(r.hypothesis_flags.iter().any(|f| f.contains("not Hurwitz")), "{:?}", r.hypothesis_flags);
}

#[test]
fn dimension_and_sign_errors() {
    let (plant, g, _) = scalar_case(-2.0, 1.0);
    assert!(matches!(build_extended_system(&plant, &g, &[1.0, 2.0]), Err(CertificateError::Dimension(_))));
    assert!(matches!(build_extended_system(&plant, &g, &[0.0]), Err(CertificateError::NonPositiveJacobian)));
    let sys: ExtendedSystem = build_extended_system(&plant, &g, &[1.0]).unwrap();
    assert!(theorem3_block_matrix(&sys, &DMatrix::identity(3, 3), 0.1, 1.0, 0.0).is_err());
}

#[test]
fn published_injection_is_not_certifiable() {
    let s = preset_example6(&Example6Variant { gamma: 10.0, injection: Injection::Published, ..Example6Variant::default() }).unwrap();
    let sys = build_extended_system(&s.plant, gains(&s), &[1.8182, 1.2008]).unwrap();
    assert!(spectral_abscissa(&sys.a_e) > 0.0);
    match certify(&s).unwrap() {
        CertificateOutcome::Extended(r) => assert!(!r.feasible),
        other => panic!("unexpected outcome {other:?}"),
    }
}

#[test]
fn cap_comparison_report() {
    let s = preset_example6(&Example6Variant { gamma: 10.0, ..Example6Variant::default() }).unwrap();
    let grid = s.time_grid(2000);
    let mut lines = Vec::new();
    for cap in [1e3, 1e6] {
        let opts = VertexOptions { cap, ..VertexOptions::default() };
        let r = verify_theorem3(&s.plant, gains(&s), &s.transform, 0.01, 1.0, &grid, &opts, None).unwrap();
        if cap == 1e3 {
            assert!(r.feasible, "{r}");
        }
        assert!(r.p_eigenvalues().iter().all(|e| e.is_finite()));
        lines.push(format!("cap {cap:.0e}: feasible {} worst {:.3e} eig(P) {:?}", r.feasible, r.worst_eig(), r.p_eigenvalues()));
    }
    println!("{}", lines.join("\n"));
}
