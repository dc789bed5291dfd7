mod common;

use common::{check_graph_fn, project, rng, uniform};
use curriculum_lab::diffcore::{shuffle_index, DiffTensor, Graph, Primitive};
use proptest::prelude::*;

fn assert_fd(name: &str, inputs: &[DiffTensor], build: impl Fn(&mut Graph, &[curriculum_lab::diffcore::Var]) -> curriculum_lab::Result<curriculum_lab::diffcore::Var>) {
    let (worst, bad) = check_graph_fn(inputs, build);
    assert!(bad.is_none(), "{name}: {bad:?} (worst rel {worst:e})");
}

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..5u64 {
        let mut r = rng(seed);
        let cases: Vec<(Primitive, Vec<DiffTensor>)> = vec![
            (Primitive::MatMul, vec![uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[4, 2], -1.0, 1.0)]),
            (Primitive::Conv1x1, vec![uniform(&mut r, &[3, 2, 3], -1.0, 1.0), uniform(&mut r, &[4, 3], -1.0, 1.0), uniform(&mut r, &[4], -1.0, 1.0)]),
            (Primitive::Conv3x3, vec![uniform(&mut r, &[2, 3, 4], -1.0, 1.0), uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0), uniform(&mut r, &[3], -1.0, 1.0)]),
            (Primitive::DepthwiseConv5x5, vec![uniform(&mut r, &[2, 4, 3], -1.0, 1.0), uniform(&mut r, &[2, 5, 5], -1.0, 1.0), uniform(&mut r, &[2], -1.0, 1.0)]),
            (Primitive::Relu, vec![uniform(&mut r, &[2, 5], -1.0, 1.0)]),
            (Primitive::Softmax, vec![uniform(&mut r, &[2, 5], -1.0, 1.0)]),
            (Primitive::LogSoftmax, vec![uniform(&mut r, &[3, 4], -1.0, 1.0)]),
            (Primitive::ChannelShuffle(3), vec![uniform(&mut r, &[6, 2, 2], -1.0, 1.0)]),
            (Primitive::ChannelGroupMax(2), vec![uniform(&mut r, &[6, 2, 2], -1.0, 1.0)]),
            (Primitive::ChannelGroupAvg(3), vec![uniform(&mut r, &[6, 2, 2], -1.0, 1.0)]),
            (Primitive::ConcatChannels, vec![uniform(&mut r, &[2, 2, 2], -1.0, 1.0), uniform(&mut r, &[3, 2, 2], -1.0, 1.0)]),
            (Primitive::Add, vec![uniform(&mut r, &[3, 3], -1.0, 1.0), uniform(&mut r, &[3, 3], -1.0, 1.0)]),
            (Primitive::Scale(-1.7), vec![uniform(&mut r, &[4], -1.0, 1.0)]),
            (Primitive::ReduceMean, vec![uniform(&mut r, &[5], -1.0, 1.0)]),
            (Primitive::SquaredError, vec![uniform(&mut r, &[2, 3], -1.0, 1.0), uniform(&mut r, &[2, 3], -1.0, 1.0)]),
        ];
        for (kind, inputs) in cases {
            assert_fd(kind.name(), &inputs, |g, v| {
                let y = g.apply(kind, v)?;
                project(g, y, seed)
            });
        }
    }
}

#[test]
fn auxiliary_ops_match_finite_differences() {
    let mut r = rng(99);
    let x = uniform(&mut r, &[3, 6], -1.0, 1.0);
    assert_fd("exp/sum_last/slice", &[x.clone()], |g, v| {
        let e = g.exp(v[0]);
        let s = g.slice(e, 1, 2, 3)?;
        let t = g.sum_last(s);
        project(g, t, 1)
    });
    assert_fd("select_blocks", &[x.clone()], |g, v| {
        let s = g.select_blocks(v[0], &[1, 0, 2], 2)?;
        project(g, s, 2)
    });
    assert_fd("gather/logsumexp", &[x.clone()], |g, v| {
        let s = g.gather(v[0], &[4, 1, 7, 1])?;
        let l = g.log_sum_exp(s);
        let m = g.sub(l, l)?;
        let k = g.log_sum_exp(v[0]);
        let out = g.add(m, k)?;
        g.add(out, l)
    });
    let b = uniform(&mut r, &[6], -1.0, 1.0);
    assert_fd("add_bias/mul/add_scalar/reshape", &[x, b], |g, v| {
        let y = g.add_bias(v[0], v[1])?;
        let z = g.mul(y, y)?;
        let z = g.add_scalar(z, 0.3);
        let z = g.reshape(z, vec![18])?;
        project(g, z, 3)
    });
}

#[test]
fn deep_composition_matches_finite_differences() {
    for seed in 0..5u64 {
        let mut r = rng(100 + seed);
        let x = uniform(&mut r, &[2, 4], -1.0, 1.0);
        let w1 = uniform(&mut r, &[4, 5], -1.0, 1.0);
        let w2 = uniform(&mut r, &[5, 5], -1.0, 1.0);
        let w3 = uniform(&mut r, &[5, 3], -1.0, 1.0);
        assert_fd("three layers", &[x, w1, w2, w3], |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.relu(h);
            let h = g.matmul(h, v[2])?;
            let h = g.softmax(h);
            let o = g.matmul(h, v[3])?;
            let l = g.log_softmax(o);
            project(g, l, seed)
        });
    }
}

#[test]
fn reuse_accumulates_like_doubled_coefficient() {
    let mut r = rng(7);
    let x = uniform(&mut r, &[5], -1.0, 1.0).tracked();
    let w: Vec<f64> = (0..5).map(|i| i as f64 - 2.0).collect();

    let mut g = Graph::new();
    let xv = g.input(&x);
    let c = g.constant(vec![5], w.clone()).unwrap();
    let a = g.mul(xv, c).unwrap();
    let b = g.mul(xv, c).unwrap();
    let s = g.add(a, b).unwrap();
    let root = g.sum(s);
    let twice = g.backward(root).unwrap().get(xv).unwrap().to_vec();

    let mut g = Graph::new();
    let xv = g.input(&x);
    let c = g.constant(vec![5], w.iter().map(|v| 2.0 * v).collect()).unwrap();
    let a = g.mul(xv, c).unwrap();
    let root = g.sum(a);
    let once = g.backward(root).unwrap().get(xv).unwrap().to_vec();
    assert_eq!(twice, once);
}

proptest! {
    #[test]
    fn shuffle_then_inverse_restores_input(groups in 1usize..5, per in 1usize..5, sp in 1usize..4, seed in any::<u64>()) {
        let c = groups * per;
        let mut r = rng(seed);
        let x = uniform(&mut r, &[c, sp, 1], -1.0, 1.0);
        let mut g = Graph::new();
        let xv = g.input(&x);
        let y = g.channel_shuffle(xv, groups).unwrap();
        let yv = g.value(y).to_vec();
        let mut back = vec![0.0; yv.len()];
        for ch in 0..c {
            let d = shuffle_index(ch, c, groups);
            back[ch * sp..(ch + 1) * sp].copy_from_slice(&yv[d * sp..(d + 1) * sp]);
        }
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(x.values()));
        let mut seen = vec![false; c];
        for ch in 0..c {
            seen[shuffle_index(ch, c, groups)] = true;
        }
        prop_assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn concat_then_split_recovers_inputs(ca in 1usize..4, cb in 1usize..4, h in 1usize..3, w in 1usize..3, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[ca, h, w], -1.0, 1.0);
        let b = uniform(&mut r, &[cb, h, w], -1.0, 1.0);
        let mut g = Graph::new();
        let (av, bv) = (g.input(&a), g.input(&b));
        let cat = g.concat_channels(&[av, bv]).unwrap();
        let a2 = g.slice(cat, 0, 0, ca).unwrap();
        let b2 = g.slice(cat, 0, ca, cb).unwrap();
        prop_assert_eq!(g.value(a2), a.values());
        prop_assert_eq!(g.value(b2), b.values());
    }
}
