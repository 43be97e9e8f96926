use proptest::prelude::*;
use tempfile::tempdir;

use toolwear::data::{Channel, ControlPoint, ExperimentSeries, ForceChannel};
use toolwear::design::sobol_unit;
use toolwear::diagnostics::psrf;
use toolwear::io::{self, DrawsFormat};
use toolwear::kernel::KernelConfig;
use toolwear::predict::{gp_conditional, GridSpec, PosteriorGp};
use toolwear::sampler::{run_chains, ChainSet, LogDensity, SamplerConfig};
use toolwear::segmentation::{binary_segmentation, extract_contact_phases, RawTrace};
use toolwear::Execution;

fn within_cost(x: &[f64], cps: &[usize]) -> f64 {
    let mut edges = vec![0];
    edges.extend_from_slice(cps);
    edges.push(x.len());
    edges
        .windows(2)
        .map(|w| {
            let s = &x[w[0]..w[1]];
            let m = s.iter().sum::<f64>() / s.len() as f64;
            s.iter().map(|v| (v - m).powi(2)).sum::<f64>()
        })
        .sum()
}

fn signal() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-50.0f64..50.0, 20usize..60), 1..5).prop_flat_map(|levels| {
        let base: Vec<f64> = levels.iter().flat_map(|&(l, n)| std::iter::repeat_n(l, n)).collect();
        let n = base.len();
        prop::collection::vec(-2.0f64..2.0, n).prop_map(move |noise| base.iter().zip(&noise).map(|(a, b)| a + b).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sobol_points_in_unit_cube(n in 1usize..300, skip in 0u64..1000) {
        for p in sobol_unit(2, n, skip).unwrap() {
            prop_assert!(p.iter().all(|&u| (0.0..1.0).contains(&u)));
        }
    }

    #[test]
    fn splits_never_increase_sse(x in signal(), penalty in 0.0f64..500.0) {
        prop_assume!(x.len() >= 40);
        let seg = binary_segmentation(&x, penalty, 20).unwrap();
        prop_assert!(seg.changepoints.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(seg.changepoints.iter().all(|&c| c > 0 && c < x.len()));
        prop_assert!(seg.bounds().iter().all(|(a, b)| b - a >= 20));
        // dropping any accepted changepoint cannot lower the cost
        let full = within_cost(&x, &seg.changepoints);
        prop_assert!(full <= within_cost(&x, &[]) + 1e-9);
        for drop in 0..seg.changepoints.len() {
            let mut fewer = seg.changepoints.clone();
            fewer.remove(drop);
            prop_assert!(full <= within_cost(&x, &fewer) + 1e-9);
        }
    }

    #[test]
    fn extracted_length_increasing(x in signal(), lps in 0.001f64..1.0) {
        prop_assume!(x.len() >= 40);
        let shifted: Vec<f64> = x.iter().map(|v| v + 100.0).collect();
        let n = shifted.len();
        let trace = RawTrace::new((0..n as u64).collect(), shifted.clone(), shifted.clone(), shifted, lps).unwrap();
        let seg = binary_segmentation(&trace.ft, 10.0, 20).unwrap();
        let threshold = seg.segment_means.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
        let series = extract_contact_phases(&trace, &seg, threshold).unwrap();
        prop_assert!(series.length.windows(2).all(|w| w[0] < w[1]));
        let expected = series.length.len() as f64 * lps;
        prop_assert!((series.length.last().unwrap() - expected).abs() <= 1e-9 * expected);
        prop_assert_eq!(series.length.len(), n);
    }

    #[test]
    fn psrf_affine_invariant(
        a in prop::collection::vec(-5.0f64..5.0, 40),
        b in prop::collection::vec(-5.0f64..5.0, 40),
        shift in -1e3f64..1e3,
        scale in 0.01f64..100.0,
    ) {
        let r = psrf(&[a.clone(), b.clone()]).unwrap();
        let t = |c: &[f64]| c.iter().map(|v| v * scale + shift).collect::<Vec<_>>();
        let r2 = psrf(&[t(&a), t(&b)]).unwrap();
        prop_assert!((r - r2).abs() <= 1e-9 * r.max(1.0));
    }

    #[test]
    fn gp_variance_bounded(
        pts in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..7),
        star in (-3.0f64..3.0, -3.0f64..3.0),
        eta_sq in 0.1f64..5.0,
        rho in (0.1f64..3.0, 0.1f64..3.0),
        sigma_b_sq in 0.01f64..1.0,
    ) {
        let train: Vec<ControlPoint> = pts.iter().map(|&(v, f)| ControlPoint::new(v, f)).collect();
        let cfg = KernelConfig::new(eta_sq, rho.0, rho.1, sigma_b_sq).unwrap();
        let beta: Vec<f64> = (0..train.len()).map(|i| i as f64).collect();
        let (m, v) = gp_conditional(&beta, 0.5, &cfg, &train, &ControlPoint::new(star.0, star.1)).unwrap();
        prop_assert!(m.is_finite());
        prop_assert!(v >= 0.0);
        prop_assert!(v <= cfg.total_variance() * (1.0 + 1e-12));
    }

    #[test]
    fn series_round_trip(rows in prop::collection::vec((1e-6f64..10.0, -1e3f64..1e3, -1e3f64..1e3, -1e3f64..1e3), 2..50)) {
        let mut length = Vec::new();
        let mut acc = 0.0;
        for r in &rows {
            acc += r.0;
            length.push(acc);
        }
        let s = ExperimentSeries {
            length,
            ft: rows.iter().map(|r| r.1).collect(),
            ff: rows.iter().map(|r| r.2).collect(),
            fp: rows.iter().map(|r| r.3).collect(),
        };
        let dir = tempdir().unwrap();
        let p = dir.path().join("s.csv");
        io::write_series(&p, &s).unwrap();
        prop_assert_eq!(io::load_series(&p).unwrap(), s);
    }

    #[test]
    fn draws_round_trip(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 12), binary in any::<bool>()) {
        let chains = ChainSet {
            param_names: vec!["a".into(), "b[1]".into(), "c".into()],
            draws: vec![
                values[..6].chunks(3).map(|c| c.to_vec()).collect(),
                values[6..].chunks(3).map(|c| c.to_vec()).collect(),
            ],
            n_warmup: 5,
            n_retained: 2,
            seed: 9,
            accept_stats: vec![0.8, 0.9],
            divergences: vec![0, 1],
            step_sizes: vec![0.1, 0.2],
        };
        let fmt = if binary { DrawsFormat::Binary } else { DrawsFormat::Csv };
        let dir = tempdir().unwrap();
        let p = dir.path().join(format!("d.{}", fmt.extension()));
        io::write_draws(&p, &chains, fmt).unwrap();
        let back = io::read_draws(&p).unwrap();
        prop_assert_eq!(back.draws, chains.draws);
        prop_assert_eq!(back.param_names, chains.param_names);
    }
}

struct Banana;

impl LogDensity for Banana {
    fn dim(&self) -> usize {
        2
    }

    fn log_density_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
        let r = x[1] - 0.5 * x[0] * x[0];
        g[0] = -x[0] + r * x[0];
        g[1] = -r;
        -0.5 * x[0] * x[0] - 0.5 * r * r
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn sampler_execution_independent(seed in any::<u64>(), chains in 2usize..5) {
        let cfg = SamplerConfig { n_chains: chains, n_warmup: 60, n_samples: 40, seed, ..SamplerConfig::default() };
        let a = run_chains(&Banana, &cfg, Execution::Sequential).unwrap();
        let b = run_chains(&Banana, &cfg, Execution::Parallel).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn surface_execution_independent(draws in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 9), 4..20)) {
        let ids = [1u32, 2, 3, 4];
        let train = [
            ControlPoint::new(20.0, 20.0),
            ControlPoint::new(60.0, 25.0),
            ControlPoint::new(35.0, 50.0),
            ControlPoint::new(50.0, 40.0),
        ];
        let mut names: Vec<String> = ids.iter().map(|i| format!("beta[{i}]")).collect();
        names.extend(["mu_beta", "eta_beta_sq", "rho1", "rho2", "sigma_beta_sq"].map(String::from));
        let rows: Vec<Vec<f64>> = draws
            .iter()
            .map(|d| {
                let mut r = d[..5].to_vec();
                r.extend(d[5..].iter().map(|u| (u + 1.5) * 0.8));
                r
            })
            .collect();
        let n = rows.len();
        let chains = ChainSet {
            param_names: names,
            draws: vec![rows],
            n_warmup: 0,
            n_retained: n,
            seed: 0,
            accept_stats: vec![0.8],
            divergences: vec![0],
            step_sizes: vec![0.1],
        };
        let grid = GridSpec::covering(&train);
        let ch = Channel::Force(ForceChannel::Ft);
        let s = PosteriorGp::from_slopes(&chains, &ids, &train, Execution::Sequential).unwrap()
            .surface(&grid, ch, 0.1, Execution::Sequential).unwrap();
        let p = PosteriorGp::from_slopes(&chains, &ids, &train, Execution::Parallel).unwrap()
            .surface(&grid, ch, 0.1, Execution::Parallel).unwrap();
        prop_assert_eq!(s, p);
    }
}
