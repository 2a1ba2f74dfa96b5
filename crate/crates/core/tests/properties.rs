use edg_core::kernel::Declared;
use edg_core::rhs::{exchange_sums, ExchangeSums, RhsPlan};
use edg_core::*;
use proptest::prelude::*;

fn families() -> Vec<Kernel> {
    vec![
        Kernel::constant(false),
        Kernel::product(1.0, false).unwrap(),
        Kernel::product(1.5, true).unwrap(),
        Kernel::product(2.0, false).unwrap(),
        Kernel::biased(1.5, 0.1).unwrap(),
        Kernel::symmetric_sum(0.5, 1.5, false).unwrap(),
        Kernel::power(0.3, 1.0, false).unwrap(),
    ]
}

/// Nonnegative state with a sprinkling of exact zeros.
fn state_strategy(max_n: usize) -> impl Strategy<Value = ClusterState> {
    (1..=max_n).prop_flat_map(|n| {
        prop::collection::vec((0.0..1.0f64, prop::bool::weighted(0.15)), n + 1).prop_map(
            |cells| {
                let c = cells
                    .into_iter()
                    .map(|(v, zero)| if zero { 0.0 } else { v })
                    .collect();
                ClusterState::new(0.0, c).unwrap()
            },
        )
    })
}

/// Random profile under a geometric envelope, so the truncation edge carries
/// little mass.
fn decaying_state_strategy(max_n: usize) -> impl Strategy<Value = ClusterState> {
    (state_strategy(max_n), 0.3..0.9f64).prop_map(|(s, r)| {
        let c = s
            .c()
            .iter()
            .enumerate()
            .map(|(j, v)| v * r.powi(j as i32))
            .collect();
        ClusterState::new(0.0, c).unwrap()
    })
}

fn gain_loss(c: &[f64], sums: &ExchangeSums) -> Vec<f64> {
    let n = c.len() - 1;
    (0..=n)
        .map(|j| {
            let mut a = c[j] * (sums.export[j] + sums.import[j]);
            if j > 0 {
                a += c[j - 1] * sums.import[j - 1];
            }
            if j < n {
                a += c[j + 1] * sums.export[j + 1];
            }
            a
        })
        .collect()
}

fn weights(n: usize, p: f64) -> Vec<f64> {
    (0..=n).map(|j| if p == 0.0 { 1.0 } else { (j as f64).powf(p) }).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    summation::compensated_dot(a, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rates_are_nonnegative_and_empty_sites_never_export(
        mu in 0.0..2.5f64, nu in 0.0..2.5f64, classical: bool,
        j in 0usize..=64, k in 0usize..=64,
    ) {
        let kernel = Kernel::power(mu, nu, classical).unwrap();
        let v = kernel.eval(j, k).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert_eq!(kernel.eval(0, k).unwrap(), 0.0);
        if classical {
            prop_assert_eq!(kernel.eval(j, 0).unwrap(), 0.0);
        }
    }

    #[test]
    fn biased_exchange_favours_the_larger_cluster(
        beta in 1.01..2.5f64, eps in 0.01..0.5f64, k in 1usize..64, gap in 1usize..32,
    ) {
        let j = (k + gap).min(64);
        prop_assume!(k < j);
        let kernel = Kernel::biased(beta, eps).unwrap();
        let up = kernel.eval(k, j).unwrap();
        let down = kernel.eval(j, k).unwrap();
        // up to the rounding of the two products
        prop_assert!(up >= (1.0 + eps) * down * (1.0 - 1e-14));
        let expected = (1.0 + eps).powi((j - k) as i32);
        prop_assert!(((up / down) / expected - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classification_depends_only_on_declaration(mu in 0.0..3.0f64, nu in 0.0..3.0f64) {
        let a = Kernel::symmetric_sum(mu, nu, false).unwrap();
        let b = Kernel::symmetric_sum(mu, nu, true).unwrap();
        prop_assert_eq!(a.classify(), a.clone().classify());
        prop_assert_eq!(a.classify(), b.classify());
        let declared = Kernel::from_fn("lb", move |j, k| ((j * k) as f64).powf(mu), true,
            Declared::LowerBound { mu, nu: mu }).unwrap();
        prop_assert_eq!(declared.classify(), declared.classify());
    }

    #[test]
    fn separable_sum_matches_termwise_evaluation(
        mu in 0.0..2.5f64, nu in 0.0..2.5f64, j in 1usize..=64, k in 1usize..=64,
    ) {
        let kernel = Kernel::symmetric_sum(mu, nu, false).unwrap();
        let (jf, kf) = (j as f64, k as f64);
        let expected = jf.powf(mu) * kf.powf(nu) + jf.powf(nu) * kf.powf(mu);
        let got = kernel.eval(j, k).unwrap();
        prop_assert!((got - expected).abs() <= 1e-14 * expected);
    }

    #[test]
    fn initial_volume_is_exact(
        n in 1usize..400, m0 in 0.5..2.0f64, frac in 0.0..1.0f64,
        kappa in 0.05..0.95f64, q in 2.05..6.0f64, shape in 0u8..3,
    ) {
        let spec = match shape {
            0 => InitialSpec::monodisperse(frac * m0),
            1 => InitialSpec::geometric(kappa, Amplitude::OccupiedFraction(frac * m0)),
            _ => InitialSpec::algebraic(q, Amplitude::OccupiedFraction(frac * m0)),
        }
        .with_empty(EmptyVolume::Remainder { m0 });
        let s = init_distribution(&spec, n).unwrap();
        let total: f64 = s.c().iter().sum();
        prop_assert!((total - m0).abs() <= 1e-14 * m0 * 4.0);
        prop_assert!((s.moment(0.0) - m0).abs() <= 1e-14 * m0);
        prop_assert!(s.c().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn linear_excess_tail_shrinks_with_the_cut(s in state_strategy(80)) {
        let n = s.n();
        let tails: Vec<f64> = (0..=n)
            .map(|m| s.tail_weighted_sum(m, TailWeight::LinearExcess).unwrap())
            .collect();
        for w in tails.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn three_halves_moment_obeys_cauchy_schwarz(s in state_strategy(200)) {
        let m32 = s.moment(1.5);
        prop_assert!(m32 * m32 <= s.moment(1.0) * s.moment(2.0) * (1.0 + 1e-12));
    }

    #[test]
    fn volume_and_mass_are_conserved(s in state_strategy(64), which in 0usize..7) {
        let kernel = &families()[which];
        let d = rhs_separable(kernel, &s).unwrap();
        let d = d.values();
        let scale: f64 = d.iter().map(|v| v.abs()).sum();
        let m0: f64 = d.iter().sum();
        let m1: f64 = d.iter().enumerate().map(|(j, v)| j as f64 * v).sum();
        prop_assert!(m0.abs() <= 1e-12 * scale, "{m0} vs {scale}");
        prop_assert!(m1.abs() <= 1e-12 * scale, "{m1} vs {scale}");
    }

    #[test]
    fn separable_and_direct_paths_agree(s in state_strategy(64), which in 0usize..7) {
        let kernel = &families()[which];
        let fast = rhs_separable(kernel, &s).unwrap();
        let slow = rhs_direct(kernel, &s).unwrap();
        let peak = slow.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = fast.values().iter().zip(slow.values())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        prop_assert!(diff <= 1e-12 * peak, "{diff} vs {peak}");
    }

    #[test]
    fn flux_differences_rebuild_the_derivative(s in state_strategy(64), which in 0usize..7) {
        let kernel = &families()[which];
        let d = rhs_direct(kernel, &s).unwrap();
        let rebuilt = flux(kernel, &s).unwrap().divergence();
        let peak = d.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in d.values().iter().zip(&rebuilt) {
            prop_assert!((a - b).abs() <= 1e-13 * peak.max(f64::MIN_POSITIVE));
        }
    }

    #[test]
    fn tail_of_derivative_is_the_flux_through_the_cut(s in state_strategy(64), which in 0usize..7) {
        let kernel = &families()[which];
        let d = rhs_direct(kernel, &s).unwrap();
        let i = flux(kernel, &s).unwrap();
        let sums = exchange_sums(kernel, &s).unwrap();
        let scale: f64 = gain_loss(s.c(), &sums).iter().sum();
        for m in 1..=s.n() {
            let tail: f64 = summation::compensated_sum(d.values()[m..].iter().copied());
            prop_assert!((tail - i.values()[m - 1]).abs() <= 1e-13 * scale.max(f64::MIN_POSITIVE));
        }
    }

    #[test]
    fn regrouped_moment_rate_matches_the_weighted_derivative(
        s in state_strategy(64), which in 0usize..7, p_index in 0usize..4,
    ) {
        let kernel = &families()[which];
        let p = [0.0, 1.0, 2.0, 2.5][p_index];
        let g = weights(s.n(), p);
        let rate = moment_rate(kernel, &s, &g).unwrap();
        let d = rhs_separable(kernel, &s).unwrap();
        let direct = dot(&g, d.values());
        let sums = exchange_sums(kernel, &s).unwrap();
        let scale = dot(&g, &gain_loss(s.c(), &sums));
        if p <= 1.0 {
            prop_assert!(rate.abs() <= 1e-14 * scale, "{rate} vs {scale}");
            prop_assert!(direct.abs() <= 1e-14 * scale, "{direct} vs {scale}");
        } else {
            // A state with O(1) mass at the truncation edge can make the rate a
            // near-cancellation; the error is then bounded by the scale.
            prop_assert!((rate - direct).abs() <= 1e-14 * scale, "{rate} {direct} {scale}");
        }
    }

    #[test]
    fn moment_rates_agree_relatively_on_decaying_states(
        s in decaying_state_strategy(64), which in 0usize..7, p_index in 0usize..2,
    ) {
        let kernel = &families()[which];
        let g = weights(s.n(), [2.0, 2.5][p_index]);
        let rate = moment_rate(kernel, &s, &g).unwrap();
        let direct = dot(&g, rhs_separable(kernel, &s).unwrap().values());
        let sums = exchange_sums(kernel, &s).unwrap();
        let scale = dot(&g, &gain_loss(s.c(), &sums));
        // Relative agreement holds unless the rate itself is a cancellation
        // of gain and loss far below their size, which the rounding of the
        // derivative cannot resolve.
        prop_assume!(rate != 0.0 && rate.abs() >= 1e-3 * scale);
        prop_assert!(((rate - direct) / rate).abs() < 1e-12, "{rate} {direct}");
    }

    #[test]
    fn symmetric_regrouping_agrees_with_the_first_form(
        s in state_strategy(64), which in 0usize..4, p in 0.0..3.0f64,
    ) {
        let kernel = [
            Kernel::constant(false),
            Kernel::product(1.0, false).unwrap(),
            Kernel::product(2.0, true).unwrap(),
            Kernel::symmetric_sum(0.5, 1.5, false).unwrap(),
        ][which].clone();
        let g: Vec<f64> = (0..=s.n()).map(|j| (j as f64 + 1.0).powf(p)).collect();
        let first = moment_rate(&kernel, &s, &g).unwrap();
        let second = symmetric_form(&kernel, s.c(), &g);
        let sums = exchange_sums(&kernel, &s).unwrap();
        let scale = dot(&g, &gain_loss(s.c(), &sums));
        prop_assert!((first - second).abs() <= 1e-10 * first.abs().max(1e-3 * scale));
    }
}

/// Symmetrised evaluation of `sum_j g_j dc_j/dt` for kernels with
/// `K(j,k) = K(k,j)` on `j,k >= 1`: the interior block carries the discrete
/// second difference of `g`, and the row `j = N` and column `k = 0` are kept
/// as boundary terms.
fn symmetric_form(kernel: &Kernel, c: &[f64], g: &[f64]) -> f64 {
    let n = c.len() - 1;
    let k = |a: usize, b: usize| kernel.eval(a, b).unwrap();
    let mut acc = summation::CompensatedSum::new();
    for j in 1..n {
        let lap = g[j - 1] - 2.0 * g[j] + g[j + 1];
        for l in 1..n {
            acc.add(lap * c[j] * k(j, l) * c[l]);
        }
    }
    for j in 1..n {
        acc.add((g[j - 1] - g[j] + g[1] - g[0]) * c[j] * k(j, 0) * c[0]);
    }
    for j in 1..n {
        acc.add((g[j + 1] - g[j] + g[n - 1] - g[n]) * c[j] * k(n, j) * c[n]);
    }
    acc.add((g[n - 1] - g[n] + g[1] - g[0]) * c[n] * k(n, 0) * c[0]);
    acc.value()
}

#[test]
fn truncated_geometric_tail_matches_its_closed_form() {
    // sum_{j=m}^{N} (j-m) k^j = k^{m+1}/(1-k)^2 - k^{N+1}((N+1-m)/(1-k) + k/(1-k)^2)
    let n = 200;
    for kappa in [0.1, 0.3, 0.5, 0.7, 0.85, 0.9] {
        let s = init_distribution(
            &InitialSpec::geometric(kappa, Amplitude::Scale(1.0)).with_empty(EmptyVolume::Fixed(0.0)),
            n,
        )
        .unwrap();
        for m in 0..=20 {
            let got = s.tail_weighted_sum(m, TailWeight::LinearExcess).unwrap();
            let infinite = kappa.powi(m as i32 + 1) / (1.0 - kappa).powi(2);
            let nf = n as f64;
            let cut = kappa.powi(n as i32 + 1)
                * ((nf + 1.0 - m as f64) / (1.0 - kappa) + kappa / (1.0 - kappa).powi(2));
            let truncated = infinite - cut;
            assert!((got / truncated - 1.0).abs() < 1e-12, "kappa {kappa} m {m}");
        }
    }
}

#[test]
fn geometric_tail_converges_to_the_untruncated_value() {
    // The missing mass beyond N decays like N k^N; N = 200 is enough below
    // k = 0.86, while k = 0.9 needs N = 400 for the same accuracy.
    for (kappa, n) in [(0.5, 200), (0.8, 200), (0.85, 200), (0.9, 400)] {
        let s = init_distribution(
            &InitialSpec::geometric(kappa, Amplitude::Scale(1.0)).with_empty(EmptyVolume::Fixed(0.0)),
            n,
        )
        .unwrap();
        for m in 0..=20 {
            let got = s.tail_weighted_sum(m, TailWeight::LinearExcess).unwrap();
            let exact = kappa.powi(m as i32 + 1) / (1.0 - kappa).powi(2);
            assert!((got / exact - 1.0).abs() < 1e-10, "kappa {kappa} m {m}");
        }
    }
    let s = init_distribution(
        &InitialSpec::geometric(0.5, Amplitude::Scale(1.0)).with_empty(EmptyVolume::Fixed(0.0)),
        200,
    )
    .unwrap();
    assert!((s.tail_weighted_sum(5, TailWeight::LinearExcess).unwrap() - 0.0625).abs() < 1e-15);
}

#[test]
fn separable_and_direct_agree_on_large_orders() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for kernel in families() {
        let n = 512;
        let fast = RhsPlan::new(&kernel, n).unwrap();
        let slow = RhsPlan::direct(&kernel, n).unwrap();
        let mut sums = ExchangeSums::zeros(n);
        let (mut a, mut b) = (vec![0.0; n + 1], vec![0.0; n + 1]);
        for _ in 0..5 {
            let c: Vec<f64> = (0..=n).map(|_| rng.random::<f64>()).collect();
            fast.eval_into(&c, &mut sums, &mut a);
            slow.eval_into(&c, &mut sums, &mut b);
            let peak = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let diff = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            assert!(diff <= 1e-12 * peak, "{}: {diff} vs {peak}", kernel.name());
        }
    }
}
