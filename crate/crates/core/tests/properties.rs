use dcstop_core::cost::{CostSpec, ScalarFn};
use dcstop_core::grid::SimplexGrid;
use dcstop_core::lattice::{Lattice, LatticeSpec};
use dcstop_core::mvm::MvmTree;
use dcstop_core::rst::{push_right, StoppingKernel};
use dcstop_core::scalar::{ratio, Scalar};
use dcstop_core::{ExactMeasure, Measure};
use proptest::prelude::*;

/// Measures on the integer times 1..=8 with integer weights.
fn measure() -> impl Strategy<Value = Measure> {
    prop::collection::vec((1u32..=8, 1u32..=20), 1..6).prop_map(|pairs| {
        Measure::normalized(pairs.into_iter().map(|(t, w)| (t as f64, w as f64))).unwrap()
    })
}

fn exact(m: &Measure) -> ExactMeasure {
    m.convert().unwrap()
}

fn cost(i: u8) -> CostSpec {
    match i % 4 {
        0 => CostSpec::terminal(ScalarFn::Abs),
        1 => CostSpec::terminal(ScalarFn::IndicatorGe { threshold: 1.0 }),
        2 => CostSpec::terminal(ScalarFn::PositivePart { strike: 0.5 }),
        _ => CostSpec::running_max(ScalarFn::Identity),
    }
}

proptest! {
    #[test]
    fn w1_is_a_metric(a in measure(), b in measure(), c in measure()) {
        prop_assert!(a.w1_distance(&a).abs() < 1e-12);
        prop_assert!((a.w1_distance(&b) - b.w1_distance(&a)).abs() < 1e-12);
        prop_assert!(a.w1_distance(&c) <= a.w1_distance(&b) + b.w1_distance(&c) + 1e-12);
    }

    #[test]
    fn coupling_cost_equals_w1(a in measure(), b in measure()) {
        let k = a.monotone_coupling(&b);
        prop_assert!((k.cost() - a.w1_distance(&b)).abs() < 1e-12);
        prop_assert!(k.is_monotone());
        for (got, want) in k.source_marginal().iter().zip(a.weights()) {
            prop_assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_and_float_w1_agree(a in measure(), b in measure()) {
        let q = exact(&a).w1_distance(&exact(&b)).to_f64_lossy();
        prop_assert!((q - a.w1_distance(&b)).abs() < 1e-12);
    }

    #[test]
    fn right_shift_iff_rightward_coupling(a in measure(), b in measure()) {
        prop_assert_eq!(b.is_right_shift_of(&a), a.monotone_coupling(&b).is_rightward());
    }

    #[test]
    fn mean_is_one_lipschitz(a in measure(), b in measure()) {
        prop_assert!((a.mean() - b.mean()).abs() <= a.w1_distance(&b) + 1e-12);
    }

    #[test]
    fn ceiling_projection_shifts_right(a in measure(), step in 1u32..=4) {
        let grid: Vec<f64> = (1..=8u32).filter(|t| t % step == 0 || *t == 8).map(f64::from).collect();
        let p = a.ceiling_project(&grid).unwrap();
        prop_assert!(p.is_right_shift_of(&a));
        prop_assert!(a.w1_distance(&p) <= step as f64 - 1.0 + 1e-12);
    }

    #[test]
    fn kernel_mvm_equivalence(seed in any::<u64>(), depth in 1usize..=5, c in any::<u8>()) {
        let cost = cost(c);
        let lattice = Lattice::build(LatticeSpec::history(depth, 1.0).with_max(cost.requires_max())).unwrap();
        let steps: Vec<usize> = (1..=depth).filter(|s| (seed >> s) & 1 == 1 || *s == depth).collect();
        let mut state = seed;
        let k = StoppingKernel::from_fn(&lattice, steps, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        }).unwrap();
        let mu = k.marginal_of(&lattice).unwrap();
        let tree = MvmTree::from_kernel(&k, &lattice).unwrap();
        prop_assert!(tree.validate(&mu).ok);
        let via_tree = tree.accumulate(&lattice, &cost, 0.0).unwrap().expected_leaf();
        prop_assert!((via_tree - k.objective_value(&lattice, &cost).unwrap()).abs() < 1e-12);
        let back = tree.to_kernel(&lattice).unwrap();
        prop_assert_eq!(MvmTree::from_kernel(&back, &lattice).unwrap(), tree);

        let target = mu.ceiling_project(&[depth as f64]).unwrap();
        let pushed = push_right(&k, &lattice, &mu.monotone_coupling(&target)).unwrap();
        prop_assert!((pushed.expected_displacement - mu.w1_distance(&target)).abs() < 1e-12);
        prop_assert!(pushed.kernel.marginal_of(&lattice).unwrap().w1_distance(&target) < 1e-12);
    }

    #[test]
    fn grid_rank_round_trip(k in 1usize..=4, res in 1u32..=12, pick in any::<prop::sample::Index>()) {
        let g = SimplexGrid::new(k, res).unwrap();
        prop_assert_eq!(g.len() as u64, SimplexGrid::expected_len(k, res));
        let r = pick.index(g.len());
        let p = g.point(r).to_vec();
        prop_assert_eq!(p.iter().sum::<u32>(), res);
        prop_assert_eq!(g.rank(&p), r);
        let y = g.point_f64(r);
        let located = g.locate(&y);
        prop_assert!(located.iter().any(|(i, w)| *i == r && (*w - 1.0).abs() < 1e-12));
    }
}

#[test]
fn exact_measure_arithmetic() {
    let a = ExactMeasure::from_pairs([(ratio(1, 1), ratio(1, 3)), (ratio(2, 1), ratio(2, 3))]).unwrap();
    let b = ExactMeasure::dirac(ratio(2, 1)).unwrap();
    assert_eq!(a.w1_distance(&b), ratio(1, 3));
    assert_eq!(a.mean(), ratio(5, 3));
    assert!(b.is_right_shift_of(&a));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solver_policy_is_feasible_and_below_oracle(
        depth in 1usize..=3,
        w in 1u32..=9,
        res in 2u32..=12,
        c in any::<u8>(),
    ) {
        use dcstop_core::dpp::{extract_policy, solve, SolveOptions};
        use dcstop_core::oracle::oracle_value;
        let cost = cost(c);
        let spec = LatticeSpec::history(depth, 1.0);
        let mu = if depth == 1 {
            Measure::dirac(1.0).unwrap()
        } else {
            Measure::normalized([(1.0, w as f64), (depth as f64, (10 - w) as f64)]).unwrap()
        };
        let table = solve(&spec, &cost, &mu, &SolveOptions::new(res)).unwrap();
        let lattice = Lattice::build(spec.clone().with_max(cost.requires_max())).unwrap();
        let tree = extract_policy(&table, &lattice, &mu).unwrap();
        prop_assert!(tree.validate(&mu).ok);
        let realized = tree.to_kernel(&lattice).unwrap().objective_value(&lattice, &cost).unwrap();
        prop_assert!((realized - table.value()).abs() < 1e-9);
        let oracle = oracle_value(&spec, &cost, &mu, false).unwrap().value.unwrap();
        prop_assert!(table.value() <= oracle + 1e-9);
        prop_assert!(oracle - table.value() <= table.slack() + 1e-9);
    }
}
