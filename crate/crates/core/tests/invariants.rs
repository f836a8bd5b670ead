use hyperspde::evolve::{integrate_spde, spectral_shift, EvolveConfig, SpdeProblem};
use hyperspde::grid::{dft, idft, mollify, sobolev_inner, sobolev_norm, Field, Grid1D, Mollifier, C64};
use hyperspde::noise::{polygonalize, sample_brownian};
use hyperspde::par::map_indexed;
use hyperspde::stats::closed_form_solution;
use hyperspde::symbols::{
    apply_adjoint, apply_pdo, symmetrized_transport_fn, Quantization, SeparableSymbol, SymbolTerm, TimeSymbolFamily,
    XiMultiplier,
};
use proptest::prelude::*;

fn field_strategy() -> impl Strategy<Value = Field> {
    prop::sample::select(vec![8usize, 16, 32, 64]).prop_flat_map(|n| {
        prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n).prop_map(move |v| {
            let g = Grid1D::periodic(n).unwrap();
            Field::from_values(&g, 1, v.into_iter().map(|(a, b)| C64::new(a, b)).collect()).unwrap()
        })
    })
}

fn pair_strategy() -> impl Strategy<Value = (Field, Field)> {
    prop::sample::select(vec![8usize, 16, 32]).prop_flat_map(|n| {
        let v = prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n);
        (v.clone(), v).prop_map(move |(a, b)| {
            let g = Grid1D::periodic(n).unwrap();
            let mk = |v: Vec<(f64, f64)>| {
                Field::from_values(&g, 1, v.into_iter().map(|(x, y)| C64::new(x, y)).collect()).unwrap()
            };
            (mk(a), mk(b))
        })
    })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1e-300 + a.abs().max(b.abs()))
}

// Variable-coefficient operator with both quantizations and a zeroth-order part.
fn mixed_symbol(g: &Grid1D, c: f64) -> SeparableSymbol {
    let terms = vec![
        SymbolTerm::scalar_fn(g, |x| 1.0 + c * x.sin(), XiMultiplier::Derivative, Quantization::Left),
        SymbolTerm::scalar_fn(g, |x| c * x.cos(), XiMultiplier::Derivative, Quantization::Right),
        SymbolTerm::scalar_fn(g, |x| 0.3 * (2.0 * x).cos(), XiMultiplier::One, Quantization::Left),
    ];
    SeparableSymbol::new(g, 1, 1.0, terms).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dft_round_trip(u in field_strategy()) {
        let back = idft(&dft(&u).unwrap());
        prop_assert!(back.sub(&u).max_abs() < 1e-13);
    }

    #[test]
    fn parseval_for_normalized_dft(u in field_strategy()) {
        let n = u.grid().n() as f64;
        let nodal: f64 = u.values().iter().map(|v| v.norm_sqr()).sum::<f64>() / n;
        let norm = sobolev_norm(&u, 0.0).unwrap();
        prop_assert!(rel(norm * norm, nodal) < 1e-12);
    }

    #[test]
    fn sobolev_norm_monotone_in_index(u in field_strategy(), s in -3.0f64..3.0, ds in 0.0f64..2.0) {
        let lo = sobolev_norm(&u, s).unwrap();
        let hi = sobolev_norm(&u, s + ds).unwrap();
        prop_assert!(lo <= hi * (1.0 + 1e-12));
    }

    #[test]
    fn sobolev_inner_hermitian((u, v) in pair_strategy(), s in -2.0f64..2.0) {
        let uv = sobolev_inner(&u, &v, s).unwrap();
        let vu = sobolev_inner(&v, &u, s).unwrap();
        prop_assert!((uv - vu.conj()).norm() < 1e-12 * (1.0 + uv.norm()));
        let uu = sobolev_inner(&u, &u, s).unwrap();
        prop_assert!(rel(uu.re, sobolev_norm(&u, s).unwrap().powi(2)) < 1e-12);
        prop_assert!(uu.im.abs() < 1e-12 * uu.re.max(1e-300));
    }

    #[test]
    fn pdo_is_linear((u, v) in pair_strategy(), a in -2.0f64..2.0, c in -0.5f64..0.5) {
        let sym = mixed_symbol(u.grid(), c);
        let lhs = apply_pdo(&sym, &u.add(&v.scaled(a))).unwrap();
        let rhs = apply_pdo(&sym, &u).unwrap().add(&apply_pdo(&sym, &v).unwrap().scaled(a));
        prop_assert!(lhs.sub(&rhs).max_abs() < 1e-10 * (1.0 + rhs.max_abs()));
    }

    #[test]
    fn adjoint_pairing((u, v) in pair_strategy(), c in -0.5f64..0.5) {
        let sym = mixed_symbol(u.grid(), c);
        let lhs = sobolev_inner(&apply_pdo(&sym, &u).unwrap(), &v, 0.0).unwrap();
        let rhs = sobolev_inner(&u, &apply_adjoint(&sym, &v).unwrap(), 0.0).unwrap();
        prop_assert!((lhs - rhs).norm() < 1e-10 * (1.0 + lhs.norm()));
    }

    #[test]
    fn symmetrized_transport_is_skew(u in field_strategy(), c in -0.9f64..0.9, k in 1i32..4) {
        let g = u.grid().clone();
        let sym = symmetrized_transport_fn(&g, |x| 1.0 + c * (k as f64 * x).sin(), None);
        let au = apply_pdo(&sym, &u).unwrap();
        let pairing = sobolev_inner(&au, &u, 0.0).unwrap();
        let scale = sobolev_norm(&au, 0.0).unwrap() * sobolev_norm(&u, 0.0).unwrap();
        prop_assert!(pairing.re.abs() < 1e-12 * (1.0 + scale));
    }

    #[test]
    fn spectral_shift_composes(u in field_strategy(), a in -7.0f64..7.0, b in -7.0f64..7.0) {
        let two = spectral_shift(&spectral_shift(&u, a), b);
        let one = spectral_shift(&u, a + b);
        prop_assert!(two.sub(&one).max_abs() < 1e-11);
        let norm0 = sobolev_norm(&u, 0.5).unwrap();
        prop_assert!(rel(sobolev_norm(&one, 0.5).unwrap(), norm0) < 1e-12);
    }

    #[test]
    fn mollifier_contracts(u in field_strategy(), eps in 1e-3f64..1.0, s in -2.0f64..2.0) {
        let m = Mollifier::new(u.grid(), eps).unwrap();
        let ju = mollify(&u, &m);
        prop_assert!(sobolev_norm(&ju, s).unwrap() <= sobolev_norm(&u, s).unwrap() * (1.0 + 1e-12));
    }

    #[test]
    fn brownian_paths_reproducible(seed in any::<u64>(), index in 0u64..1000, log_m in 3u32..9) {
        let m = 1usize << log_m;
        let a = sample_brownian(m, 1.0, seed, index).unwrap();
        let b = sample_brownian(m, 1.0, seed, index).unwrap();
        prop_assert_eq!(a.values(), b.values());
        prop_assert_eq!(a.values()[0], 0.0);
        let other = sample_brownian(m, 1.0, seed, index + 1).unwrap();
        prop_assert_ne!(a.values(), other.values());
    }

    #[test]
    fn polygonal_path_interpolates_breakpoints(seed in any::<u64>(), log_n in 0u32..6) {
        let path = sample_brownian(64, 1.5, seed, 0).unwrap();
        let n = 1usize << log_n;
        let poly = polygonalize(&path, n).unwrap();
        let stride = 64 / n;
        for i in 0..=n {
            prop_assert!((poly.value_at(path.time(i * stride)) - path.values()[i * stride]).abs() < 1e-12);
        }
        let direct: f64 = (0..n).map(|i| poly.slope(i).powi(2) * poly.segment_length()).sum();
        prop_assert!(rel(poly.energy(), direct) < 1e-12);
    }
}

#[test]
fn ordered_parallel_map() {
    let v = map_indexed(1000, |i| i * i);
    assert!(v.iter().enumerate().all(|(i, &x)| x == i * i));
}

#[test]
fn constant_transport_matches_shift() {
    let g = Grid1D::periodic(64).unwrap();
    let u0 = Field::from_real_fn(&g, |x| (-4.0 * (x - 3.0).powi(2)).exp());
    let a = TimeSymbolFamily::constant(symmetrized_transport_fn(&g, |_| 1.0, None));
    let p = SpdeProblem::new(u0, Some(a), None, 1.0, 1.0);
    let path = sample_brownian(4096, 1.0, 7, 3).unwrap();
    let traj = integrate_spde(&p, &path, &EvolveConfig::with_steps(4096)).unwrap();
    let exact = closed_form_solution(&p, *path.values().last().unwrap()).unwrap();
    let err = sobolev_norm(&traj.final_field().sub(&exact), 0.0).unwrap() / sobolev_norm(&exact, 0.0).unwrap();
    assert!(err < 1e-3, "relative L2 error {err:e}");
}

#[test]
fn repeated_solves_are_bitwise_identical() {
    let g = Grid1D::periodic(32).unwrap();
    let u0 = Field::from_real_fn(&g, |x| x.sin() + 0.2 * (3.0 * x).cos());
    let a = TimeSymbolFamily::constant(symmetrized_transport_fn(&g, |x| 1.0 + 0.4 * x.cos(), None));
    let p = SpdeProblem::new(u0, Some(a), None, 1.0, 1.0);
    let path = sample_brownian(256, 1.0, 11, 0).unwrap();
    let cfg = EvolveConfig::with_steps(256);
    let x = integrate_spde(&p, &path, &cfg).unwrap();
    let y = integrate_spde(&p, &path, &cfg).unwrap();
    assert_eq!(x.final_field().values(), y.final_field().values());
}
