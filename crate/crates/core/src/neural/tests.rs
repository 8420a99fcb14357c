use super::*;

fn store(entries: &[(&str, &[usize], Init)], seed: u64) -> ParamStore<f64> {
    let mut b = ParamBuilder::new();
    for (n, s, i) in entries {
        b.add(*n, s, *i);
    }
    b.build(seed).unwrap()
}

/// Central-difference check of every parameter coordinate.
fn check_grads(params: &ParamStore<f64>, f: impl Fn(&mut Graph<'_, f64>) -> Var) {
    let grads = {
        let mut g = Graph::new(params);
        let loss = f(&mut g);
        g.backward(loss).unwrap()
    };
    let h = 1e-6;
    let mut p = params.clone();
    for i in 0..p.len() {
        let orig = p.values()[i];
        p.values_mut()[i] = orig + h;
        let up = {
            let mut g = Graph::new(&p);
            let l = f(&mut g);
            g.data(l)[0]
        };
        p.values_mut()[i] = orig - h;
        let down = {
            let mut g = Graph::new(&p);
            let l = f(&mut g);
            g.data(l)[0]
        };
        p.values_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = grads.values()[i];
        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
        assert!(err < 1e-5, "coordinate {i}: analytic {an}, numeric {fd}");
    }
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let p = store(&[], 0);
    let mut g = Graph::new(&p);
    let x = g.input(Tensor::zeros(2, 4));
    let y = g.softmax(x);
    assert!(g.data(y).iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn layer_norm_output_has_zero_mean_unit_variance() {
    let p = store(&[("g", &[6], Init::Ones), ("b", &[6], Init::Zeros)], 0);
    let mut g = Graph::new(&p);
    let x = g.input(Tensor::from_f64(2, 6, &[3.0, -7.0, 12.0, 0.5, 9.0, -4.0, 100.0, 80.0, -60.0, 20.0, 0.0, 5.0]));
    let (gn, bn) = (g.param(p.id("g").unwrap()), g.param(p.id("b").unwrap()));
    let y = g.layer_norm(x, gn, bn).unwrap();
    for row in g.data(y).chunks(6) {
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-5);
    }
}

#[test]
fn sum_of_squares_gradient_is_twice_theta() {
    let p = store(&[("w", &[3, 4], Init::Normal(1.0))], 3);
    let mut g = Graph::new(&p);
    let w = g.param(p.id("w").unwrap());
    let l = g.sum_squares(w);
    let grads = g.backward(l).unwrap();
    for (gv, pv) in grads.values().iter().zip(p.values()) {
        assert!((gv - 2.0 * pv).abs() < 1e-12);
    }
}

#[test]
fn disconnected_parameters_get_zero_gradient() {
    let p = store(&[("used", &[2, 2], Init::Normal(1.0)), ("unused", &[5], Init::Normal(1.0))], 1);
    let mut g = Graph::new(&p);
    let w = g.param(p.id("used").unwrap());
    let l = g.sum_squares(w);
    let grads = g.backward(l).unwrap();
    assert!(grads.by_name("unused").unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_rejects_non_scalar_and_foreign_nodes() {
    let p = store(&[("w", &[2, 2], Init::Ones)], 0);
    let mut g = Graph::new(&p);
    let w = g.param(p.id("w").unwrap());
    assert!(matches!(g.backward(w), Err(NeuralError::Usage(_))));
    let other = {
        let mut g2 = Graph::new(&p);
        for _ in 0..5 {
            g2.input(Tensor::zeros(1, 1));
        }
        Var(4)
    };
    assert!(matches!(g.backward(other), Err(NeuralError::Usage(_))));
}

#[test]
fn shape_mismatch_is_an_error() {
    let p = store(&[], 0);
    let mut g = Graph::new(&p);
    let a = g.input(Tensor::zeros(2, 3));
    let b = g.input(Tensor::zeros(2, 3));
    assert!(matches!(g.matmul(a, b), Err(NeuralError::Shape(_))));
    assert!(matches!(g.cross_entropy(a, &[0]), Err(NeuralError::Shape(_))));
    let e = g.input(Tensor::zeros(0, 3));
    assert!(matches!(g.cross_entropy(e, &[]), Err(NeuralError::Usage(_))));
}

fn attn_params(dim: usize, seed: u64) -> ParamStore<f64> {
    let mut b = ParamBuilder::new();
    for n in ["wq", "wk", "wv"] {
        b.add(n, &[dim, dim], Init::Normal(0.5));
    }
    b.add("x", &[8, dim], Init::Normal(1.0));
    b.build(seed).unwrap()
}

fn attention_out(g: &mut Graph<'_, f64>, mask: Option<&[bool]>) -> Var {
    let p = g.params();
    let x = g.param(p.id("x").unwrap());
    let proj: Vec<Var> = ["wq", "wk", "wv"]
        .iter()
        .map(|n| {
            let w = g.param(p.id(n).unwrap());
            g.matmul(x, w).unwrap()
        })
        .collect();
    g.causal_attention(proj[0], proj[1], proj[2], SeqShape { batch: 2, seq: 4, heads: 2 }, mask).unwrap()
}

#[test]
fn attention_is_causal() {
    let p = attn_params(4, 7);
    let base = {
        let mut g = Graph::new(&p);
        let o = attention_out(&mut g, None);
        g.value(o)
    };
    let mut q = p.clone();
    let xid = q.id("x").unwrap();
    // perturb the last position of the first sequence
    for v in &mut q.get_mut(xid)[3 * 4..4 * 4] {
        *v += 10.0;
    }
    let mut g = Graph::new(&q);
    let o = attention_out(&mut g, None);
    let pert = g.value(o);
    for r in 0..3 {
        assert_eq!(base.row(r), pert.row(r), "row {r} saw a future token");
    }
    assert_ne!(base.row(3), pert.row(3));
    for r in 4..8 {
        assert_eq!(base.row(r), pert.row(r));
    }
}

#[test]
fn attention_mask_hides_padded_keys_and_zeroes_empty_rows() {
    let p = attn_params(4, 2);
    let mask = [false, false, true, true, true, true, true, true];
    let mut g = Graph::new(&p);
    let o = attention_out(&mut g, Some(&mask));
    let out = g.value(o);
    assert!(out.row(0).iter().chain(out.row(1)).all(|&v| v == 0.0));
    let mut q = p.clone();
    let xid = q.id("x").unwrap();
    q.get_mut(xid)[..8].iter_mut().for_each(|v| *v -= 3.0);
    let mut g2 = Graph::new(&q);
    let o2 = attention_out(&mut g2, Some(&mask));
    let out2 = g2.value(o2);
    for r in 2..8 {
        assert_eq!(out.row(r), out2.row(r));
    }
}

#[test]
fn finite_difference_attention_and_layer_norm() {
    let mut b = ParamBuilder::new();
    for n in ["wq", "wk", "wv"] {
        b.add(n, &[4, 4], Init::Normal(0.5));
    }
    b.add("x", &[8, 4], Init::Normal(1.0)).add("g", &[4], Init::Normal(1.0)).add("b", &[4], Init::Normal(0.3));
    b.linear("head", 4, 3, 0.5);
    let p = b.build::<f64>(11).unwrap();
    let mask = [false, true, true, true, true, true, true, true];
    check_grads(&p, |g| {
        let o = attention_out(g, Some(&mask));
        let pp = g.params();
        let (gn, bn) = (g.param(pp.id("g").unwrap()), g.param(pp.id("b").unwrap()));
        let n = g.layer_norm(o, gn, bn).unwrap();
        let a = g.gelu(n);
        let (w, bb) = (g.param(pp.id("head.w").unwrap()), g.param(pp.id("head.b").unwrap()));
        let logits = g.affine(a, w, bb).unwrap();
        let sel = g.select_rows(logits, &[3, 7, 5]).unwrap();
        g.cross_entropy(sel, &[0, 2, 1]).unwrap()
    });
}

#[test]
fn finite_difference_row_ops_and_activations() {
    let p = store(
        &[
            ("emb", &[5, 3], Init::Normal(1.0)),
            ("pos", &[2, 3], Init::Normal(1.0)),
            ("row", &[3], Init::Normal(1.0)),
            ("m", &[4, 3], Init::Normal(1.0)),
        ],
        5,
    );
    check_grads(&p, |g| {
        let pp = g.params();
        let emb = g.param(pp.id("emb").unwrap());
        let pos = g.param(pp.id("pos").unwrap());
        let row = g.param(pp.id("row").unwrap());
        let m = g.param(pp.id("m").unwrap());
        let e = g.gather(emb, &[4, 0, 4, 2]).unwrap();
        let e = g.add_tiled(e, pos, 2).unwrap();
        let e = g.add_row(e, row).unwrap();
        let t = g.tanh(e);
        let s = g.sigmoid(m);
        let prod = g.mul(t, s).unwrap();
        let r = g.relu(m);
        let diff = g.sub(prod, r).unwrap();
        let sc = g.scale(diff, 1.7);
        let sm = g.softmax(sc);
        let a = g.slice_cols(sm, 1, 2).unwrap();
        let c = g.concat_cols(&[a, t]).unwrap();
        let asm = g.assemble_rows(6, vec![(c, vec![5, 0, 2, 3])]).unwrap();
        let picked = g.pick_cols(asm, &[0, 1, 2, 3, 4, 0]).unwrap();
        let l1 = g.sum_squares(picked);
        let l2 = g.mse(c, &[0.1; 20]).unwrap();
        g.add(l1, l2).unwrap()
    });
}

#[test]
fn adam_fixed_point_descent_and_convergence() {
    let mut p = store(&[("w", &[4], Init::Normal(3.0))], 9);
    let before = p.clone();
    let mut opt = AdamState::new(&p, AdamConfig { lr: 0.05, ..AdamConfig::default() });
    let zero = GradStore::zeros(p.layout().clone());
    opt.update(&mut p, &zero).unwrap();
    assert_eq!(p, before);

    let mut opt = AdamState::new(&p, AdamConfig { lr: 0.05, ..AdamConfig::default() });
    let loss_of = |p: &ParamStore<f64>| p.values().iter().map(|v| v * v).sum::<f64>();
    let l0 = loss_of(&p);
    for _ in 0..200 {
        let grads = {
            let mut g = Graph::new(&p);
            let w = g.param(p.id("w").unwrap());
            let l = g.sum_squares(w);
            g.backward(l).unwrap()
        };
        opt.update(&mut p, &grads).unwrap();
    }
    assert!(loss_of(&p) < l0);
    assert!(p.values().iter().all(|v| v.abs() < 0.5));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut b = ParamBuilder::new();
    b.linear("a", 3, 5, 0.02).add("g", &[5], Init::Ones).add("t", &[2, 3, 4], Init::Normal(1.0));
    let p = b.build::<f32>(1).unwrap();
    let hyper = serde_json::json!({ "layers": 3 });
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &p, &hyper).unwrap();
    let (q, header) = read_checkpoint(bytes.as_slice()).unwrap();
    assert_eq!(header.hyperparameters, hyper);
    assert_eq!(q.layout().segments().len(), 4);
    let bits = |s: &ParamStore<f32>| s.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&p), bits(&q));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub/model.ckpt");
    save_checkpoint(&path, &p, &hyper).unwrap();
    let (r, _) = load_checkpoint(&path).unwrap();
    assert_eq!(bits(&p), bits(&r));

    bytes.pop();
    assert!(matches!(read_checkpoint(bytes.as_slice()), Err(NeuralError::Checkpoint(_))));
}

#[test]
fn duplicate_and_unknown_segments_are_rejected() {
    let mut b = ParamBuilder::new();
    b.add("a", &[2], Init::Zeros).add("a", &[3], Init::Zeros);
    assert!(matches!(b.build::<f32>(0), Err(NeuralError::DuplicateSegment(_))));
    let p = store(&[("a", &[2], Init::Zeros)], 0);
    assert!(matches!(p.id("b"), Err(NeuralError::UnknownSegment(_))));
}

#[test]
fn f32_and_f64_forward_agree() {
    let p = attn_params(4, 3);
    let p32: ParamStore<f32> = p.cast();
    let mut g = Graph::new(&p);
    let o = attention_out(&mut g, None);
    let mut g32 = Graph::new(&p32);
    let p32r = g32.params();
    let x = g32.param(p32r.id("x").unwrap());
    let proj: Vec<Var> = ["wq", "wk", "wv"]
        .iter()
        .map(|n| {
            let w = g32.param(p32r.id(n).unwrap());
            g32.matmul(x, w).unwrap()
        })
        .collect();
    let o32 = g32.causal_attention(proj[0], proj[1], proj[2], SeqShape { batch: 2, seq: 4, heads: 2 }, None).unwrap();
    for (a, b) in g.data(o).iter().zip(g32.data(o32)) {
        assert!((a - *b as f64).abs() < 1e-4);
    }
}
