#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use useq_core::changepoint::{ycov_exact, ystat_full};
use useq_core::combin::for_each_index;
use useq_core::contractions::{contract_tensor, lemma_battery};
use useq_core::fclt_conditions::{check_theorem_i, q_set, CheckMode};
use useq_core::limit_processes::{a_process_cov, min_eigenvalue, LimitSpec};
use useq_core::product_formula::{random_degenerate, random_space, ProductDecomposition};
use useq_core::rgg::{MotifKernel, MotifPattern};
use useq_core::sample_spaces::{DistributionSpec, FiniteSpace, RngStream};
use useq_core::tensor::Tensor;
use useq_core::ustat_core::{
    eval_ustat, full_upath, g_tensors, j_sum_tensor, psi_tensors, reconstruct_from_psi, sigma2_exact_tensor, CircleWindow, Kernel,
    KernelSpec, PowerRule, ProductKernel,
};

fn random_symmetric(order: usize, atoms: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(order, atoms, |_| rng.gen::<f64>() * 2.0 - 1.0).unwrap().symmetrize().unwrap()
}

fn config() -> ProptestConfig {
    ProptestConfig { cases: 24, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn sampling_is_reproducible(seed in any::<u64>(), id in 0u64..1000, n in 1usize..50) {
        let specs = [
            DistributionSpec::cube(2),
            DistributionSpec::CircleUniform,
            DistributionSpec::Finite(FiniteSpace::scalar(&[0.0, 1.0, 5.0], &[0.2, 0.3, 0.5]).unwrap()),
        ];
        for spec in &specs {
            let a = spec.sample(n, &mut RngStream::new(seed, id).rng()).unwrap();
            let b = spec.sample(n, &mut RngStream::new(seed, id).rng()).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn exact_expectation_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = RngStream::new(seed, 0).rng();
        let space = DistributionSpec::Finite(random_space(rng.gen_range(2..=4), &mut rng));
        let f1 = |x: &[&[f64]]| x[0][0] * x[1][0] + x[1][0];
        let f2 = |x: &[&[f64]]| (x[0][0] - x[1][0]).abs();
        let lhs = space.exact_expect(2, |x| a * f1(x) + b * f2(x)).unwrap();
        let rhs = a * space.exact_expect(2, f1).unwrap() + b * space.exact_expect(2, f2).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn point_mass_expectation(v in -10.0f64..10.0) {
        let space = DistributionSpec::Finite(FiniteSpace::scalar(&[v], &[1.0]).unwrap());
        let e = space.exact_expect(3, |x| x[0][0] * x[1][0] - x[2][0]).unwrap();
        prop_assert!((e - (v * v - v)).abs() < 1e-12);
    }

    #[test]
    fn hoeffding_reconstruction(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 1).rng();
        let space = random_space(rng.gen_range(2..=4), &mut rng);
        let p = rng.gen_range(1..=3);
        let n = rng.gen_range(p..=7);
        let t = random_symmetric(p, space.len(), &mut rng);
        let psis = psi_tensors(&g_tensors(&t, &space.weights), space.len()).unwrap();
        let mut worst: f64 = 0.0;
        for_each_index(n, space.len(), |xs| {
            worst = worst.max((j_sum_tensor(&t, xs) - reconstruct_from_psi(&psis, xs)).abs());
        });
        prop_assert!(worst < 1e-10, "error {worst}");
    }

    #[test]
    fn projections_are_orthogonal(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 2).rng();
        let space = random_space(rng.gen_range(2..=3), &mut rng);
        let p = rng.gen_range(2..=3);
        let n = rng.gen_range(p..=6);
        let t = random_symmetric(p, space.len(), &mut rng);
        let psis = psi_tensors(&g_tensors(&t, &space.weights), space.len()).unwrap();
        for k in 1..=p {
            for l in (k + 1)..=p {
                let c = space.sum_weighted(n, |xs| j_sum_tensor(&psis[k], xs) * j_sum_tensor(&psis[l], xs)).unwrap();
                prop_assert!(c.abs() < 1e-10, "k={k} l={l}: {c}");
            }
        }
    }

    #[test]
    fn incremental_path_equals_recomputation(seed in any::<u64>(), n in 3usize..25, which in 0usize..3) {
        let kernel: KernelSpec = match which {
            0 => Arc::new(ProductKernel { order: 2 }),
            1 => Arc::new(ProductKernel { order: 3 }),
            _ => Arc::new(CircleWindow { width_rule: PowerRule { c: 0.5, a: 0.3 } }),
        };
        let dist = if which == 2 { DistributionSpec::CircleUniform } else { DistributionSpec::cube(1) };
        let sample = dist.sample(n, &mut RngStream::new(seed, 3).rng()).unwrap();
        let path = full_upath(kernel.as_ref(), &sample).unwrap();
        for k in 0..=n {
            let direct = eval_ustat(kernel.as_ref(), &sample.prefix(k), n).value;
            prop_assert!((path[k] - direct).abs() <= 1e-9 * (1.0 + direct.abs()), "k={k}: {} vs {direct}", path[k]);
        }
    }

    #[test]
    fn sigma2_forms_match_enumeration(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 4).rng();
        let atoms = rng.gen_range(2..=3);
        let space = random_space(atoms, &mut rng);
        let p = rng.gen_range(1..=3);
        let n = rng.gen_range(p..=8);
        let t = random_symmetric(p, atoms, &mut rng);
        let s = sigma2_exact_tensor(&t, &space.weights, n);
        let m1 = space.sum_weighted(n, |xs| j_sum_tensor(&t, xs)).unwrap();
        let m2 = space.sum_weighted(n, |xs| j_sum_tensor(&t, xs).powi(2)).unwrap();
        let var = m2 - m1 * m1;
        let scale = var.abs().max(1e-12);
        prop_assert!((s.via_psi_norms - s.via_g_variances).abs() <= 1e-9 * scale);
        prop_assert!((s.via_psi_norms - var).abs() <= 1e-9 * scale, "{} vs {var}", s.via_psi_norms);
    }

    #[test]
    fn contraction_norm_is_symmetric_in_arguments(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 5).rng();
        let space = random_space(rng.gen_range(2..=4), &mut rng);
        let p = rng.gen_range(1..=3);
        let q = rng.gen_range(1..=3);
        let psi = random_symmetric(p, space.len(), &mut rng);
        let phi = random_symmetric(q, space.len(), &mut rng);
        for r in 1..=p.min(q) {
            for l in 0..=r {
                if l == r && r == p && r == q {
                    continue;
                }
                let a = contract_tensor(&psi, &phi, r, l, &space.weights).unwrap().norm(&space.weights);
                let b = contract_tensor(&phi, &psi, r, l, &space.weights).unwrap().norm(&space.weights);
                prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a), "r={r} l={l}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn contraction_lemma_items(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 6).rng();
        let space = random_space(rng.gen_range(2..=4), &mut rng);
        let psi = random_symmetric(rng.gen_range(1..=3), space.len(), &mut rng);
        let phi = random_symmetric(rng.gen_range(1..=3), space.len(), &mut rng);
        for c in lemma_battery(&psi, &phi, &space.weights).unwrap() {
            prop_assert!(c.holds(1e-10), "{c:?}");
        }
    }

    #[test]
    fn checks_invariant_under_atom_relabeling(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 7).rng();
        let atoms: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mut order = [0usize, 1, 2];
        order.shuffle(&mut rng);
        let pa: Vec<f64> = order.iter().map(|&i| atoms[i]).collect();
        let pw: Vec<f64> = order.iter().map(|&i| weights[i]).collect();
        let kernel: KernelSpec = Arc::new(ProductKernel { order: 2 });
        let ns = [8, 16, 32];
        let a = check_theorem_i(&kernel, &Arc::new(DistributionSpec::Finite(FiniteSpace::scalar(&atoms, &weights).unwrap())), &ns, CheckMode::Exact).unwrap();
        let b = check_theorem_i(&kernel, &Arc::new(DistributionSpec::Finite(FiniteSpace::scalar(&pa, &pw).unwrap())), &ns, CheckMode::Exact).unwrap();
        prop_assert_eq!(a.checks.len(), b.checks.len());
        for (x, y) in a.checks.iter().zip(&b.checks) {
            prop_assert_eq!(&x.id, &y.id);
            for (u, v) in x.values.iter().zip(&y.values) {
                prop_assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()), "{}: {u} vs {v}", x.id);
            }
        }
    }

    #[test]
    fn limit_covariances_are_symmetric_psd(times in prop::collection::vec(0.01f64..1.0, 2..7), lambda in 0.0f64..5.0) {
        let mut grid = times;
        grid.sort_by(f64::total_cmp);
        grid.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
        let specs = [
            LimitSpec::Gamma { alpha2: vec![0.3, 0.7] },
            LimitSpec::TimeChangedBm { p: 3 },
            LimitSpec::AProcess { scale: 2.0 },
            LimitSpec::Bridge { scale: 1.0 },
            LimitSpec::Mixture { c1: 1.0, c2: 0.5 },
            LimitSpec::Dense { p: 2, lambda },
        ];
        for spec in &specs {
            let m = spec.matrix(&grid);
            for i in 0..grid.len() {
                for j in 0..grid.len() {
                    prop_assert!((m[i][j] - m[j][i]).abs() < 1e-14);
                }
            }
            let scale = m.iter().map(|r| r.iter().fold(0.0f64, |a, b| a.max(b.abs()))).fold(0.0f64, f64::max);
            prop_assert!(min_eigenvalue(&m) >= -1e-10 * (1.0 + scale), "{spec:?}");
        }
    }

    #[test]
    fn a_process_time_reversal(s in 0.0f64..1.0, t in 0.0f64..1.0) {
        prop_assert!((a_process_cov(s, t) - a_process_cov(1.0 - t, 1.0 - s)).abs() < 1e-14);
    }

    #[test]
    fn equal_sizes_group_into_symmetric_pieces(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 8).rng();
        let space = random_space(rng.gen_range(2..=3), &mut rng);
        let p = rng.gen_range(1..=2);
        let q = rng.gen_range(1..=2);
        let n = rng.gen_range(p + q..=5);
        let psi = random_degenerate(p, &space, &mut rng).unwrap();
        let phi = random_degenerate(q, &space, &mut rng).unwrap();
        let dec = ProductDecomposition::new(&psi, &phi, &space, n, n).unwrap();
        let xs: Vec<usize> = (0..n).map(|_| rng.gen_range(0..space.len())).collect();
        let mut ys = xs.clone();
        ys.shuffle(&mut rng);
        let group = |v: &[usize]| {
            let mut by: BTreeMap<usize, f64> = BTreeMap::new();
            for (m, val) in dec.product_hoeffding(v).unwrap() {
                *by.entry(m.len()).or_default() += val;
            }
            by
        };
        let (a, b) = (group(&xs), group(&ys));
        for (k, v) in &a {
            prop_assert!((v - b.get(k).copied().unwrap_or(0.0)).abs() < 1e-9, "|M|={k}");
        }
    }

    #[test]
    fn edge_kernel_symmetric_and_translation_invariant(x in prop::array::uniform2(0.0f64..1.0), y in prop::array::uniform2(0.0f64..1.0), shift in prop::array::uniform2(-5.0f64..5.0), n in 10usize..2000) {
        let k = MotifKernel::new(MotifPattern::edge(), 2, PowerRule { c: 1.0, a: 0.5 });
        let xs = [x[0] + shift[0], x[1] + shift[1]];
        let ys = [y[0] + shift[0], y[1] + shift[1]];
        let base = k.eval(&[&x, &y], n);
        prop_assert_eq!(base, k.eval(&[&y, &x], n));
        let d = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt();
        if (d - k.radius(n)).abs() > 1e-9 {
            prop_assert_eq!(base, k.eval(&[&xs, &ys], n));
        }
    }

    #[test]
    fn ystat_endpoints_vanish(seed in any::<u64>(), n in 2usize..40) {
        let sample = DistributionSpec::cube(1).sample(n, &mut RngStream::new(seed, 9).rng()).unwrap();
        let y = ystat_full(&ProductKernel { order: 2 }, &sample, 0.25).unwrap();
        prop_assert_eq!(y.len(), n + 1);
        prop_assert!(y[0].abs() < 1e-9 && y[n].abs() < 1e-9, "{} {}", y[0], y[n]);
    }
}

#[test]
fn q_set_is_monotone() {
    for p in 1..=3 {
        for r in 0..=p {
            for l in 0..=r {
                for i in 1..=p {
                    for k in 1..=p {
                        let small = q_set(i, k, r, l, p);
                        for i2 in i..=p {
                            for k2 in k..=p {
                                let big = q_set(i2, k2, r, l, p);
                                assert!(small.iter().all(|x| big.contains(x)), "Q({i},{k},{r},{l}) not inside Q({i2},{k2},{r},{l})");
                            }
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn finite_frequencies_within_four_se() {
    let w = [0.1, 0.2, 0.3, 0.4];
    let dist = DistributionSpec::Finite(FiniteSpace::scalar(&[0.0, 1.0, 2.0, 3.0], &w).unwrap());
    let m = 100_000;
    let s = dist.sample(m, &mut RngStream::new(42, 0).rng()).unwrap();
    let mut counts = [0usize; 4];
    for i in 0..m {
        counts[s.point(i)[0] as usize] += 1;
    }
    for (c, p) in counts.iter().zip(w) {
        let freq = *c as f64 / m as f64;
        let se = (p * (1.0 - p) / m as f64).sqrt();
        assert!((freq - p).abs() < 4.0 * se, "{freq} vs {p}");
    }
}

#[test]
fn ystat_variance_matches_exact_formula() {
    let space = FiniteSpace::scalar(&[0.0, 1.0, 3.0], &[0.5, 0.3, 0.2]).unwrap();
    let dist = DistributionSpec::Finite(space.clone());
    let kernel = ProductKernel { order: 2 };
    let mean = dist.exact_expect(2, |x| x[0][0] * x[1][0]).unwrap();
    let t = Tensor::from_fn(2, 3, |ix| space.atoms[ix[0]][0] * space.atoms[ix[1]][0]).unwrap();
    let s = sigma2_exact_tensor(&t, &space.weights, 2);
    let (g1, g2) = (s.psi_norms2[1], s.psi_norms2[2]);
    let n = 10;
    let reps = 20_000;
    let base = RngStream::new(77, 0);
    let paths: Vec<Vec<f64>> =
        (0..reps).map(|r| ystat_full(&kernel, &dist.sample(n, &mut base.child(r).rng()).unwrap(), mean).unwrap()).collect();
    for k in 1..n {
        let v: Vec<f64> = paths.iter().map(|p| p[k]).collect();
        let m = v.iter().sum::<f64>() / reps as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (reps as f64 - 1.0);
        let fourth = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / reps as f64;
        let se = ((fourth - var * var) / reps as f64).sqrt();
        let tt = k as f64 / n as f64;
        let exact = ycov_exact(g1, g2, n, tt, tt);
        assert!((var - exact).abs() <= 4.0 * se, "k={k}: {var} vs {exact} (se {se})");
    }
}
