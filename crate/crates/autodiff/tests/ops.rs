use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sheetcoder_autodiff::gradcheck::{check_store, Stencil};
use sheetcoder_autodiff::{AdError, DenseArray, GradStore, ParamId, ParamStore, Tape, Var};

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var, AdError>;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> DenseArray {
    DenseArray::new(shape, (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// loss = sum(build(inputs) * w) for a fixed random w, checked by central differences.
fn gradcheck(shapes: &[&[usize]], build: &Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes.iter().enumerate().map(|(i, s)| store.add(format!("x{i}"), random(s, &mut rng))).collect();
    let out_shape = {
        let mut t = Tape::new();
        let vars: Vec<Var> = ids.iter().map(|id| t.param(&store, *id)).collect();
        let out = build(&mut t, &vars).unwrap();
        t.value(out).shape().to_vec()
    };
    let w = random(&out_shape, &mut rng);
    let forward = |s: &ParamStore, t: &mut Tape| -> Var {
        let vars: Vec<Var> = ids.iter().map(|id| t.param(s, *id)).collect();
        let out = build(t, &vars).unwrap();
        let wv = t.constant(w.clone());
        let p = t.mul(out, wv).unwrap();
        t.sum_all(p)
    };
    let mut t = Tape::new();
    let loss = forward(&store, &mut t);
    let mut grads = GradStore::new(store.len());
    t.backward(loss).unwrap().accumulate_params(&t, &mut grads);
    let f = |s: &ParamStore| {
        let mut t = Tape::new();
        let l = forward(s, &mut t);
        t.value(l).item()
    };
    for r in check_store(&store, &grads, &f, Stencil::Central { h: 1e-4 }, None, 1e-3) {
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
    }
}

#[test]
fn grad_matmul() {
    gradcheck(&[&[3, 4], &[4, 2]], &|t, v| t.matmul(v[0], v[1]));
    gradcheck(&[&[3, 4], &[5, 4]], &|t, v| t.matmul_nt(v[0], v[1]));
}

#[test]
fn grad_elementwise() {
    gradcheck(&[&[2, 3], &[2, 3]], &|t, v| t.add(v[0], v[1]));
    gradcheck(&[&[2, 3], &[2, 3]], &|t, v| t.sub(v[0], v[1]));
    gradcheck(&[&[2, 3], &[2, 3]], &|t, v| t.mul(v[0], v[1]));
    gradcheck(&[&[2, 3], &[1, 3]], &|t, v| t.add_row(v[0], v[1]));
    gradcheck(&[&[2, 3]], &|t, v| Ok(t.scale(v[0], -2.5)));
    gradcheck(&[&[2, 3], &[2, 3], &[2, 3]], &|t, v| t.add_n(v));
    gradcheck(&[&[2, 3], &[2, 3]], &|t, v| t.mean_n(v));
}

#[test]
fn grad_nonlinearities() {
    gradcheck(&[&[3, 4]], &|t, v| Ok(t.gelu(v[0])));
    gradcheck(&[&[3, 4]], &|t, v| Ok(t.tanh(v[0])));
    gradcheck(&[&[3, 4]], &|t, v| Ok(t.sigmoid(v[0])));
}

#[test]
fn grad_shape_ops() {
    gradcheck(&[&[2, 6]], &|t, v| t.reshape(v[0], &[3, 4]));
    gradcheck(&[&[2, 5]], &|t, v| t.transpose(v[0]));
    gradcheck(&[&[6, 4]], &|t, v| t.transpose01(v[0], 2, 3, 4));
    gradcheck(&[&[2, 3], &[2, 1]], &|t, v| t.concat_cols(v));
    gradcheck(&[&[2, 3], &[4, 3]], &|t, v| t.concat_rows(v));
    gradcheck(&[&[5, 3]], &|t, v| t.slice_rows(v[0], 1, 3));
    gradcheck(&[&[3, 5]], &|t, v| t.slice_cols(v[0], 2, 2));
    gradcheck(&[&[4, 3]], &|t, v| t.gather_rows(v[0], &[2, 0, 2, 3]));
    gradcheck(&[&[3, 4], &[2, 4]], &|t, v| t.outer_add(v[0], v[1]));
}

#[test]
fn grad_softmax_layer_norm_ce() {
    gradcheck(&[&[3, 5]], &|t, v| t.softmax(v[0], None));
    gradcheck(&[&[3, 5]], &|t, v| t.softmax(v[0], Some(&[true, false, true, true, false])));
    gradcheck(&[&[3, 5], &[1, 5], &[1, 5]], &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-6));
    gradcheck(&[&[3, 5]], &|t, v| t.cross_entropy(v[0], &[4, 0, 2]));
}

#[test]
fn grad_composite_graph() {
    // Three layers with shared weights and attention-style scoring.
    gradcheck(&[&[4, 3], &[3, 3], &[1, 3], &[3, 1]], &|t, v| {
        let h1 = t.matmul(v[0], v[1])?;
        let h1 = t.add_row(h1, v[2])?;
        let h1 = t.tanh(h1);
        let h2 = t.matmul(h1, v[1])?;
        let h2 = t.gelu(h2);
        let s = t.matmul(h2, v[3])?;
        let s = t.transpose(s)?;
        let p = t.softmax(s, Some(&[true, true, false, true]))?;
        t.matmul(p, h1)
    });
}

#[test]
fn identity_matmul() {
    let mut t = Tape::new();
    let x = DenseArray::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let i = t.constant(DenseArray::eye(3));
    let xv = t.constant(x.clone());
    let y = t.matmul(i, xv).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn softmax_of_zeros_is_uniform_and_masking() {
    let mut t = Tape::new();
    let z = t.constant(DenseArray::zeros(&[2, 4]));
    let s = t.softmax(z, None).unwrap();
    assert!(t.value(s).data().iter().all(|p| (p - 0.25).abs() < 1e-15));
    let m = t.softmax(z, Some(&[false, true, false, true])).unwrap();
    assert_eq!(t.value(m).row_slice(0), &[0.0, 0.5, 0.0, 0.5]);
    let none = t.softmax(z, Some(&[false; 4])).unwrap();
    assert!(t.value(none).data().iter().all(|p| *p == 0.0));
}

#[test]
fn sum_gradient_is_ones() {
    let mut s = ParamStore::new();
    let id = s.add("x", DenseArray::row(vec![1.0, -3.0, 2.0]));
    let mut t = Tape::new();
    let x = t.param(&s, id);
    let l = t.sum_all(x);
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn cross_entropy_gradient_identity() {
    let logits = vec![0.3, -1.0, 2.0, 0.5];
    let mut t = Tape::new();
    let x = t.constant(DenseArray::row(logits.clone()));
    let l = t.cross_entropy(x, &[2]).unwrap();
    let g = t.backward(l).unwrap();
    let sm = t.softmax(x, None).unwrap();
    let expect: Vec<f64> = t.value(sm).data().iter().enumerate().map(|(j, p)| p - if j == 2 { 1.0 } else { 0.0 }).collect();
    for (a, b) in g.get(x).unwrap().data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn full_extent_row_convolution_shape() {
    // rows x L x H activations, kernel 1 x L mapping H -> H'
    let (rows, l, h, h2) = (5, 4, 3, 7);
    let mut t = Tape::new();
    let act = t.constant(DenseArray::zeros(&[rows * l, h]));
    let k = t.constant(DenseArray::zeros(&[l * h, h2]));
    let flat = t.reshape(act, &[rows, l * h]).unwrap();
    let c = t.matmul(flat, k).unwrap();
    assert_eq!(t.value(c).shape(), &[rows, h2]);
}

#[test]
fn errors_name_the_op() {
    let mut t = Tape::new();
    let a = t.constant(DenseArray::zeros(&[2, 3]));
    let b = t.constant(DenseArray::zeros(&[2, 3]));
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    assert!(matches!(t.backward(a), Err(AdError::NotScalar(_))));
    let mut longer = Tape::new();
    for _ in 0..5 {
        longer.constant(DenseArray::scalar(1.0));
    }
    let far = longer.constant(DenseArray::scalar(1.0));
    assert!(matches!(t.backward(far), Err(AdError::NoForward)));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in proptest::collection::vec(-30.0f64..30.0, 12), mask in proptest::collection::vec(any::<bool>(), 4)) {
        let mut t = Tape::new();
        let x = t.constant(DenseArray::new(&[3, 4], data).unwrap());
        let s = t.softmax(x, Some(&mask)).unwrap();
        for i in 0..3 {
            let row = t.value(s).row_slice(i);
            let sum: f64 = row.iter().sum();
            prop_assert!(row.iter().all(|p| *p >= 0.0));
            if mask.iter().any(|m| *m) {
                prop_assert!((sum - 1.0).abs() < 1e-9);
            } else {
                prop_assert_eq!(sum, 0.0);
            }
        }
    }
}
