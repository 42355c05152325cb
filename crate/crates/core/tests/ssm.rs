use msmamba_core::rng::rng_for;
use msmamba_core::ssm::{
    discretize_zoh, naive_scan_oracle, scan, selective_params, spectral_decay_report, BlockDims, MambaBlock, SsmCore,
};
use msmamba_core::tensor::{GradChecker, Graph, ParamStore, Tensor};
use msmamba_core::Error;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

struct ScanCase {
    batch: usize,
    seq: usize,
    ch: usize,
    state: usize,
    x: Vec<f64>,
    delta: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

impl ScanCase {
    fn random(rng: &mut ChaCha8Rng, batch: usize, seq: usize, ch: usize, state: usize) -> Self {
        let mut draw = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>();
        ScanCase {
            batch,
            seq,
            ch,
            state,
            x: draw(batch * seq * ch, -2.0, 2.0),
            delta: draw(batch * seq * ch, 1e-3, 2.0),
            a: draw(ch * state, -4.0, -1e-2),
            b: draw(batch * seq * state, -2.0, 2.0),
            c: draw(batch * seq * state, -2.0, 2.0),
            d: draw(ch, -1.0, 1.0),
        }
    }

    fn run_kernel(&self) -> Vec<f64> {
        let mut g = Graph::no_grad();
        let sx = vec![self.batch, self.seq, self.ch];
        let sn = vec![self.batch, self.seq, self.state];
        let t = |shape: &[usize], v: &[f64]| Tensor::new(shape.to_vec(), v.to_vec()).unwrap();
        scan(
            &mut g,
            &t(&sx, &self.x),
            &t(&sx, &self.delta),
            &t(&[self.ch, self.state], &self.a),
            &t(&sn, &self.b),
            &t(&sn, &self.c),
            &t(&[self.ch], &self.d),
        )
        .unwrap()
        .to_vec()
    }

    fn run_oracle(&self, b: usize) -> Vec<Vec<f64>> {
        let rows = |v: &[f64], w: usize| -> Vec<Vec<f64>> {
            (0..self.seq).map(|t| v[(b * self.seq + t) * w..(b * self.seq + t + 1) * w].to_vec()).collect()
        };
        let a: Vec<Vec<f64>> = self.a.chunks(self.state).map(<[f64]>::to_vec).collect();
        naive_scan_oracle(
            &rows(&self.x, self.ch),
            &rows(&self.delta, self.ch),
            &a,
            &rows(&self.b, self.state),
            &rows(&self.c, self.state),
            &self.d,
        )
        .unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn scan_matches_naive_oracle(seed in any::<u64>(), seq in 1usize..=64, ch in 1usize..=8, state in 1usize..=8, batch in 1usize..=2) {
        let mut rng = rng_for(seed, "scan-case");
        let case = ScanCase::random(&mut rng, batch, seq, ch, state);
        let y = case.run_kernel();
        for b in 0..batch {
            let want = case.run_oracle(b);
            for t in 0..seq {
                for i in 0..ch {
                    let got = y[(b * seq + t) * ch + i];
                    prop_assert!((got - want[t][i]).abs() < 1e-12, "b={} t={} i={}: {} vs {}", b, t, i, got, want[t][i]);
                }
            }
        }
    }

    #[test]
    fn states_respect_stability_bound(seed in any::<u64>(), seq in 1usize..=64) {
        // One channel, one state, C = 1, D = 0: the output is the state itself.
        let mut rng = rng_for(seed, "stability");
        let x: Vec<f64> = (0..seq).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let delta: Vec<f64> = (0..seq).map(|_| rng.gen_range(1e-2..3.0)).collect();
        let b: Vec<f64> = (0..seq).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let a = rng.gen_range(-5.0..-0.05);
        let mut sup_bhat: f64 = 0.0;
        let mut max_ahat: f64 = 0.0;
        for t in 0..seq {
            let s = discretize_zoh(a, b[t], delta[t]).unwrap();
            prop_assert!(s.a_hat > 0.0 && s.a_hat < 1.0);
            sup_bhat = sup_bhat.max(s.b_hat.abs());
            max_ahat = max_ahat.max(s.a_hat);
        }
        let sup_x = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let bound = sup_bhat * sup_x / (1.0 - max_ahat);
        let mut g = Graph::no_grad();
        let h = scan(
            &mut g,
            &Tensor::new(vec![seq, 1], x).unwrap(),
            &Tensor::new(vec![seq, 1], delta).unwrap(),
            &Tensor::full(&[1, 1], a),
            &Tensor::new(vec![seq, 1], b).unwrap(),
            &Tensor::ones(&[seq, 1]),
            &Tensor::zeros(&[1]),
        ).unwrap();
        for v in h.data() {
            prop_assert!(v.abs() <= bound * (1.0 + 1e-12));
        }
    }
}

#[test]
fn zoh_closed_form_values() {
    let s = discretize_zoh(-1.0, 1.0, 0.5).unwrap();
    assert!((s.a_hat - 0.606_530_659_712_633_4).abs() < 1e-9);
    assert!((s.b_hat - 0.393_469_340_287_366_6).abs() < 1e-9);
    assert!((s.a_hat - 0.606531).abs() < 1e-6);
    assert!((s.b_hat - 0.393469).abs() < 1e-6);
}

#[test]
fn zoh_limits_and_series_continuity() {
    let (b, delta) = (1.0, 0.5);
    for a in [1e-8, -1e-8] {
        let s = discretize_zoh(a, b, delta).unwrap();
        assert!((s.b_hat - delta * b).abs() < 1e-6 * (delta * b));
    }
    let s = discretize_zoh(0.0, 3.0, 0.25).unwrap();
    assert_eq!(s.a_hat, 1.0);
    assert!((s.b_hat - 0.75).abs() < 1e-15);
    let s = discretize_zoh(-1.0, 1.0, 1e-12).unwrap();
    assert!((s.a_hat - 1.0).abs() < 1e-11 && s.b_hat.abs() < 1e-11);
    // Both branches agree at the switch point.
    let below = discretize_zoh(-0.999_999e-6, 2.0, 1.0).unwrap().b_hat;
    let above = discretize_zoh(-1.000_001e-6, 2.0, 1.0).unwrap().b_hat;
    assert!((below - above).abs() < 1e-11);
}

#[test]
fn zoh_rejects_non_positive_step() {
    assert!(matches!(discretize_zoh(-1.0, 1.0, 0.0), Err(Error::Domain(_))));
    assert!(matches!(discretize_zoh(-1.0, 1.0, -0.1), Err(Error::Domain(_))));
    assert!(matches!(discretize_zoh(-1.0, 1.0, f64::NAN), Err(Error::Domain(_))));
}

#[test]
fn hand_unrolled_scalar_recurrence() {
    // a_hat = 0.5 with delta = 1 means a = ln 0.5; b_hat = 1 needs b = a/(e^a - 1).
    let a = 0.5f64.ln();
    let b = a / (a.exp() - 1.0);
    let mut g = Graph::no_grad();
    let y = scan(
        &mut g,
        &Tensor::ones(&[3, 1]),
        &Tensor::ones(&[3, 1]),
        &Tensor::full(&[1, 1], a),
        &Tensor::full(&[3, 1], b),
        &Tensor::ones(&[3, 1]),
        &Tensor::zeros(&[1]),
    )
    .unwrap();
    for (got, want) in y.data().iter().zip([1.0, 1.5, 1.75]) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn zero_input_and_single_step() {
    let mut rng = rng_for(1, "case");
    let mut case = ScanCase::random(&mut rng, 1, 9, 3, 4);
    case.x = vec![0.0; case.x.len()];
    assert!(case.run_kernel().iter().all(|v| *v == 0.0));
    assert!(case.run_oracle(0).iter().flatten().all(|v| *v == 0.0));

    let case = ScanCase::random(&mut rng, 1, 1, 2, 3);
    let y = case.run_kernel();
    for i in 0..2 {
        let mut want = case.d[i] * case.x[i];
        for j in 0..3 {
            let s = discretize_zoh(case.a[i * 3 + j], case.b[j], case.delta[i]).unwrap();
            want += case.c[j] * s.b_hat * case.x[i];
        }
        assert!((y[i] - want).abs() < 1e-13);
    }
}

#[test]
fn scan_rejects_bad_inputs() {
    let mut g = Graph::no_grad();
    let ok = |s: &[usize]| Tensor::ones(s);
    let bad_delta = Tensor::new(vec![2, 1], vec![0.5, 0.0]).unwrap();
    let r = scan(&mut g, &ok(&[2, 1]), &bad_delta, &ok(&[1, 1]), &ok(&[2, 1]), &ok(&[2, 1]), &ok(&[1]));
    assert!(matches!(r, Err(Error::Domain(_))));
    let r = scan(&mut g, &ok(&[2, 1]), &ok(&[2, 1]), &ok(&[1, 2]), &ok(&[2, 1]), &ok(&[2, 1]), &ok(&[1]));
    assert!(matches!(r, Err(Error::Shape { .. })));
}

#[test]
fn scan_gradients_match_finite_differences() {
    let mut rng = rng_for(5, "scan-grad");
    let case = ScanCase::random(&mut rng, 2, 6, 3, 4);
    let mut store = ParamStore::new();
    let sx = vec![2, 6, 3];
    let sn = vec![2, 6, 4];
    let x = store.add("x", Tensor::new(sx.clone(), case.x.clone()).unwrap());
    let d = store.add("delta", Tensor::new(sx.clone(), case.delta.clone()).unwrap());
    let a = store.add("a", Tensor::new(vec![3, 4], case.a.clone()).unwrap());
    let b = store.add("b", Tensor::new(sn.clone(), case.b.clone()).unwrap());
    let c = store.add("c", Tensor::new(sn, case.c.clone()).unwrap());
    let s = store.add("d", Tensor::new(vec![3], case.d.clone()).unwrap());
    let readout = Tensor::new(sx, (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let report = GradChecker::new(1e-5)
        .run(&store, |g, p| {
            let y = scan(g, p.get(x), p.get(d), p.get(a), p.get(b), p.get(c), p.get(s))?;
            let y = g.mul(&y, &readout)?;
            g.sum(&y)
        })
        .unwrap();
    assert!(report.max_coord_rel_error < 1e-6, "{:?}", report.params);
}

#[test]
fn selective_params_scale_behaviour() {
    let mut store = ParamStore::new();
    let mut rng = rng_for(2, "init");
    let core = SsmCore::init(&mut store, "ssm", 4, 3, (1e-3, 1e-1), &mut rng);
    let x = Tensor::new(vec![5, 4], (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let mut g = Graph::no_grad();
    let p = g.bind(&store);
    let base = selective_params(&mut g, &p, &x, &core, None).unwrap();
    let one = selective_params(&mut g, &p, &x, &core, Some(&Tensor::scalar(1.0))).unwrap();
    let two = selective_params(&mut g, &p, &x, &core, Some(&Tensor::scalar(2.0))).unwrap();
    assert_eq!(base.delta, one.delta);
    for (a, b) in base.delta.data().iter().zip(two.delta.data()) {
        assert!(*a > 0.0);
        assert!((2.0 * a - b).abs() < 1e-15);
    }
    assert_eq!(base.b_seq, two.b_seq);
    assert!(matches!(
        selective_params(&mut g, &p, &x, &core, Some(&Tensor::scalar(0.0))),
        Err(Error::Domain(_))
    ));

    store.set(core.delta_bias, Tensor::zeros(&[4])).unwrap();
    let mut g = Graph::no_grad();
    let p = g.bind(&store);
    let zero = selective_params(&mut g, &p, &Tensor::zeros(&[5, 4]), &core, Some(&Tensor::scalar(3.0))).unwrap();
    for v in zero.delta.data() {
        assert!((v - 3.0 * 2f64.ln()).abs() < 1e-15);
    }
}

#[test]
fn ssm_init_invariants() {
    let mut store = ParamStore::new();
    let core = SsmCore::init(&mut store, "ssm", 6, 5, (1e-3, 1e-1), &mut rng_for(0, "init"));
    let a = core.a_values(&store);
    for i in 0..6 {
        for j in 0..5 {
            assert!((a.data()[i * 5 + j] + (j + 1) as f64).abs() < 1e-12);
        }
    }
    // Initial step sizes land in [1e-3, 1e-1].
    let mut g = Graph::no_grad();
    let p = g.bind(&store);
    let d = selective_params(&mut g, &p, &Tensor::zeros(&[1, 6]), &core, None).unwrap();
    assert!(d.delta.data().iter().all(|v| (1e-3 - 1e-12..=1e-1 + 1e-12).contains(v)));
}

fn block_fixture(seed: u64, d_model: usize, d_state: usize) -> (ParamStore, MambaBlock) {
    let mut store = ParamStore::new();
    let dims = BlockDims::new(d_model, d_state, 2, 4).unwrap();
    let block = MambaBlock::init(&mut store, "block", dims, &mut rng_for(seed, "init"));
    (store, block)
}

#[test]
fn block_is_deterministic_and_scale_one_is_unmodulated() {
    let (store, block) = block_fixture(3, 8, 4);
    let (store2, block2) = block_fixture(3, 8, 4);
    let e = Tensor::new(vec![2, 5, 8], (0..80).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
    let run = |s: &ParamStore, b: &MambaBlock, scale: Option<f64>| {
        let mut g = Graph::no_grad();
        let p = g.bind(s);
        let sc = scale.map(Tensor::scalar);
        b.forward(&mut g, &p, &e, sc.as_ref()).unwrap()
    };
    assert_eq!(run(&store, &block, Some(2.0)), run(&store2, &block2, Some(2.0)));
    assert_eq!(run(&store, &block, Some(1.0)), run(&store, &block, None));
    let diff = run(&store, &block, Some(1.0)).max_abs_diff(&run(&store, &block, Some(8.0))).unwrap();
    assert!(diff > 1e-6);
}

#[test]
fn block_zero_input_gives_zero_before_norm() {
    let (mut store, block) = block_fixture(4, 8, 4);
    store.set(block.conv_bias, Tensor::zeros(&[16])).unwrap();
    let mut g = Graph::no_grad();
    let p = g.bind(&store);
    let y = block.forward_pre_norm(&mut g, &p, &Tensor::zeros(&[4, 8]), Some(&Tensor::scalar(2.0))).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn block_param_count_matches_store() {
    let (store, block) = block_fixture(0, 5, 3);
    assert_eq!(block.dims.param_count(), store.numel());
    assert_eq!(block.param_ids().len(), store.len());
}

#[test]
fn block_macs_match_runtime_count() {
    let (store, block) = block_fixture(0, 6, 3);
    let mut g = Graph::no_grad();
    let p = g.bind(&store);
    block.forward(&mut g, &p, &Tensor::ones(&[7, 6]), None).unwrap();
    assert_eq!(g.macs(), block.dims.macs(7));
}

#[test]
fn block_gradient_check() {
    let (mut store, block) = block_fixture(11, 8, 4);
    let mut rng = rng_for(11, "data");
    let e = store.add("e", Tensor::new(vec![4, 8], (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
    let readout = Tensor::new(vec![4, 8], (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let scale = store.add("scale", Tensor::scalar(1.7));
    let report = GradChecker::new(1e-5)
        .run(&store, |g, p| {
            let y = block.forward(g, p, p.get(e), Some(p.get(scale)))?;
            let y = g.mul(&y, &readout)?;
            g.sum(&y)
        })
        .unwrap();
    for pc in &report.params {
        assert!(pc.rel_error < 1e-5, "{}: {:e}", pc.name, pc.rel_error);
    }
}

#[test]
fn spectral_report_values_and_monotonicity() {
    let a = Tensor::full(&[1, 1], -1.0);
    let report = spectral_decay_report(&a, &[0.1, 1.0, 10.0]).unwrap();
    let mags = report.magnitudes(0, 0);
    for (got, want) in mags.iter().zip([0.9048, 0.3679, 4.54e-5]) {
        assert!(((got - want) / want).abs() < 1e-3, "{got} vs {want}");
    }
    assert!(mags.windows(2).all(|w| w[0] > w[1]));
    assert!(report.non_contracting.is_empty());

    let a = Tensor::new(vec![2, 2], vec![-0.5, -1.0, -2.0, -7.0]).unwrap();
    let grid = [1e-9, 0.3, 0.6, 1.2, 2.4];
    let report = spectral_decay_report(&a, &grid).unwrap();
    for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let m = report.magnitudes(i, j);
        assert!(m.windows(2).all(|w| w[0] > w[1]));
        assert!((m[0] - 1.0).abs() < 1e-8);
        for k in 1..4 {
            assert!((m[k + 1] - m[k] * m[k]).abs() < 1e-14);
        }
    }
}

#[test]
fn spectral_report_csv() {
    let report = spectral_decay_report(&Tensor::full(&[1, 1], -1.0), &[1.0]).unwrap();
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("channel,state,delta,magnitude"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..3], &["0", "0", "1"]);
    assert!((row[3].parse::<f64>().unwrap() - (-1f64).exp()).abs() < 1e-15);
}
