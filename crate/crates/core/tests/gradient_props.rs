use beef_core::autodiff::{Tape, Var};
use beef_core::error::Result;
use beef_core::gradcheck::{check_inputs, GradCheckOptions};
use beef_core::tensor::kernels::ConvGeometry;
use beef_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Weighted sum so the checked scalar depends on every output coordinate.
fn weighted(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, t.shape(y), -1.0, 1.0);
    let w = t.input(w)?;
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn check<F>(seed: u64, inputs: Vec<Tensor<f64>>, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let g = |t: &mut Tape<f64>, v: &[Var]| {
        let y = f(t, v)?;
        weighted(t, y, seed ^ 0xabc)
    };
    let opts = GradCheckOptions {
        eps: 1e-5,
        max_coords: 64,
    };
    check_inputs(g, &inputs, opts).unwrap().max_rel_error
}

type Unary = fn(&mut Tape<f64>, Var) -> Result<Var>;

const UNARY: [(&str, Unary); 10] = [
    ("relu", |t, x| t.relu(x)),
    ("sigmoid", |t, x| t.sigmoid(x)),
    ("tanh", |t, x| t.tanh(x)),
    ("softmax", |t, x| t.softmax(x, 1.0)),
    ("softmax_cold", |t, x| t.softmax(x, 0.3)),
    ("log_softmax", |t, x| t.log_softmax(x)),
    ("scale", |t, x| t.scale(x, 1.7)),
    ("mean", |t, x| t.mean(x)),
    ("sum", |t, x| t.sum(x)),
    ("slice", |t, x| t.slice(x, 1, 2)),
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unary_ops(seed in any::<u64>(), n in 3usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[n], -2.0, 2.0);
        for (name, op) in UNARY {
            let e = check(seed, vec![x.clone()], |t, v| op(t, v[0]));
            prop_assert!(e < TOL, "{name}: {e}");
        }
    }

    #[test]
    fn clamped_log_above_floor(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[n], 0.05, 3.0);
        let e = check(seed, vec![x], |t, v| Ok(t.clamped_log(v[0], 1e-12)?.0));
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn binary_ops(seed in any::<u64>(), n in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[n], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[n], -2.0, 2.0);
        let s = rand_tensor(&mut rng, &[1], -2.0, 2.0);
        let ins = vec![a, b, s];
        for (name, e) in [
            ("add", check(seed, ins.clone(), |t, v| t.add(v[0], v[1]))),
            ("sub", check(seed, ins.clone(), |t, v| t.sub(v[0], v[1]))),
            ("mul", check(seed, ins.clone(), |t, v| t.mul(v[0], v[1]))),
            ("mul_scalar", check(seed, ins.clone(), |t, v| t.mul_scalar(v[0], v[2]))),
            ("concat", check(seed, ins.clone(), |t, v| t.concat(&[v[0], v[2], v[1]]))),
            ("index", check(seed, ins.clone(), |t, v| t.index(v[1], n - 1))),
        ] {
            prop_assert!(e < TOL, "{name}: {e}");
        }
    }

    #[test]
    fn linear(seed in any::<u64>(), i in 1usize..7, o in 1usize..7, bias in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = vec![
            rand_tensor(&mut rng, &[i], -1.0, 1.0),
            rand_tensor(&mut rng, &[o, i], -1.0, 1.0),
            rand_tensor(&mut rng, &[o], -1.0, 1.0),
        ];
        let e = check(seed, ins, |t, v| t.linear(v[0], v[1], bias.then_some(v[2])));
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn reshape_gather_pool(seed in any::<u64>(), r in 1usize..5, c in 1usize..5, w in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rand_tensor(&mut rng, &[r, c], -1.0, 1.0);
        let flat = rand_tensor(&mut rng, &[w * c], -1.0, 1.0);
        let e1 = check(seed, vec![m.clone()], |t, v| t.reshape(v[0], &[c, r]));
        let e2 = check(seed, vec![m], |t, v| t.gather(v[0], r - 1));
        let e3 = check(seed, vec![flat], |t, v| t.sum_pool(v[0], w));
        prop_assert!(e1 < TOL && e2 < TOL && e3 < TOL, "{e1} {e2} {e3}");
    }

    #[test]
    fn mode_n_product(seed in any::<u64>(), dims in prop::collection::vec(1usize..4, 3), mode in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let core = rand_tensor(&mut rng, &dims, -1.0, 1.0);
        let vec = rand_tensor(&mut rng, &[dims[mode - 1]], -1.0, 1.0);
        let e = check(seed, vec![core, vec], |t, v| t.mode_n_product(v[0], v[1], mode));
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn conv3d_and_pooling(
        seed in any::<u64>(),
        kt in 1usize..3, kh in 1usize..4,
        st in 1usize..3, sh in 1usize..3,
        pad in 0usize..2,
        cin in 1usize..3, cout in 1usize..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 4, 4, cin], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[kt, kh, kh, cin, cout], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[cout], -1.0, 1.0);
        let g = ConvGeometry { kernel: [kt, kh, kh], stride: [st, sh, sh], padding: [pad, pad, pad] };
        let e = check(seed, vec![x.clone(), w, b], |t, v| t.conv3d(v[0], v[1], v[2], g));
        prop_assert!(e < TOL, "conv3d: {e}");
        let e = check(seed, vec![x], |t, v| t.mean_over_leading(v[0]));
        prop_assert!(e < TOL, "mean_over_leading: {e}");
    }
}
