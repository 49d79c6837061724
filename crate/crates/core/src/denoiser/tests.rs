use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Lin, Norm};
use super::*;
use crate::fastattn::AttentionKernel;
use crate::molgraph::{MolecularGraph, N_BOND_CLASSES};
use crate::tensor::gradcheck;
use crate::tensor::ParamStore;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tiny network with every parameter (FiLM included) drawn at random.
fn random_net(seed: u64) -> Denoiser {
    let mut d = Denoiser::new(DenoiserConfig::tiny(), seed).unwrap();
    randomize(d.store_mut(), seed + 1000, 0.4);
    d
}

fn randomize(store: &mut ParamStore, seed: u64, std: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).value().shape().to_vec();
        store.set_value(id, Tensor::randn(&shape, std, &mut r)).unwrap();
    }
}

fn random_graph(n: usize, r: &mut ChaCha8Rng) -> MolecularGraph {
    let mut g = MolecularGraph::empty((0..n).map(|_| r.random_range(0..5)).collect()).unwrap();
    for i in 0..n {
        for j in i + 1..n {
            g.set_bond(i, j, r.random_range(0..N_BOND_CLASSES as u8));
        }
    }
    g
}

fn cond(dim: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| f64::from(r.random_bool(0.3))).collect()
}

// ---- plain-tensor oracles ----

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn lin(s: &ParamStore, l: &Lin, x: &Tensor) -> Tensor {
    l.eval(s, x)
}

fn norm(s: &ParamStore, p: &Norm, x: &Tensor) -> Tensor {
    let (r, c) = x.dims2().unwrap();
    let g = s.get(p.g).value().data();
    let b = s.get(p.b).value().data();
    Tensor::from_fn(&[r, c], |k| {
        let row = x.row(k / c);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        (row[k % c] - mean) / (var + 1e-5).sqrt() * g[k % c] + b[k % c]
    })
}

fn plain_ln(x: &[f64]) -> Vec<f64> {
    let c = x.len() as f64;
    let mean = x.iter().sum::<f64>() / c;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
    x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, |x, y| x + y).unwrap()
}

fn mlp(s: &ParamStore, a: &Lin, b: &Lin, x: &Tensor) -> Tensor {
    lin(s, b, &lin(s, a, x).map(gelu))
}

fn mean_rows(x: &Tensor) -> Vec<f64> {
    let (r, c) = x.dims2().unwrap();
    (0..c).map(|k| (0..r).map(|i| x.at2(i, k)).sum::<f64>() / r as f64).collect()
}

fn row_tensor(v: Vec<f64>) -> Tensor {
    Tensor::new(vec![1, v.len()], v).unwrap()
}

fn close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b).unwrap();
    assert!(d < tol, "max abs diff {d}");
}

/// Multi-head attention per row, straight from the definition.
fn attend(q: &Tensor, k: &Tensor, v: &Tensor, nh: usize, bias: impl Fn(usize, usize, usize) -> f64, mask: impl Fn(usize, usize) -> bool) -> Tensor {
    let (nq, d) = q.dims2().unwrap();
    let nk = k.shape()[0];
    let dh = d / nh;
    let mut out = Tensor::zeros(&[nq, d]);
    for hd in 0..nh {
        for i in 0..nq {
            let keys: Vec<usize> = (0..nk).filter(|&j| mask(i, j)).collect();
            let s: Vec<f64> = keys
                .iter()
                .map(|&j| {
                    (0..dh).map(|c| q.at2(i, hd * dh + c) * k.at2(j, hd * dh + c)).sum::<f64>() / (dh as f64).sqrt()
                        + bias(hd, i, j)
                })
                .collect();
            let a = softmax(&s);
            for (w, &j) in a.iter().zip(&keys) {
                for c in 0..dh {
                    out.data_mut()[i * d + hd * dh + c] += w * v.at2(j, hd * dh + c);
                }
            }
        }
    }
    out
}

// ---- sub-layer tests ----

#[test]
fn init_line_nodes_oracle_and_zero() {
    let net = random_net(1);
    let cfg = net.config().clone();
    let lg = LineGraphIndex::new(4).unwrap();
    let mut r = rng(2);
    let e = Tensor::randn(&[16, cfg.d_e], 1.0, &mut r);
    let h = Tensor::randn(&[4, cfg.d_x], 1.0, &mut r);
    let tape = Tape::new();
    let b = Binder::new(&tape, net.store());
    let z = net.init_line_nodes(&b, tape.constant(e.clone()), tape.constant(h.clone()), &lg).unwrap().value();
    let p = &net.layout.embed;
    let s = net.store();
    for (u, &(i, j)) in lg.pairs().iter().enumerate() {
        let f = |a: usize, c: usize| {
            let mut x = e.row(i * 4 + j).to_vec();
            x.extend_from_slice(h.row(a));
            x.extend_from_slice(h.row(c));
            mlp(s, &p.init1, &p.init2, &row_tensor(x))
        };
        let want = add(&f(i, j), &f(j, i)).map(|x| x / 2.0);
        for c in 0..cfg.d_e {
            assert!((z.at2(u, c) - want.data()[c]).abs() < 1e-12);
        }
    }

    let fresh = Denoiser::new(DenoiserConfig::tiny(), 3).unwrap();
    let tape = Tape::new();
    let b = Binder::new(&tape, fresh.store());
    let z = fresh
        .init_line_nodes(&b, tape.constant(Tensor::zeros(&[16, cfg.d_e])), tape.constant(Tensor::zeros(&[4, cfg.d_x])), &lg)
        .unwrap();
    assert!(z.value().data().iter().all(|&x| x == 0.0));
}

#[test]
fn init_line_nodes_follow_atom_swaps() {
    let net = random_net(4);
    let cfg = net.config().clone();
    let n = 4;
    let lg = LineGraphIndex::new(n).unwrap();
    let mut r = rng(5);
    // Edge embeddings must be symmetric, as they are in the network.
    let mut e = Tensor::randn(&[n * n, cfg.d_e], 1.0, &mut r);
    for i in 0..n {
        for j in 0..i {
            let src = e.row(j * n + i).to_vec();
            e.data_mut()[(i * n + j) * cfg.d_e..(i * n + j + 1) * cfg.d_e].copy_from_slice(&src);
        }
    }
    let h = Tensor::randn(&[n, cfg.d_x], 1.0, &mut r);
    let perm = [2, 0, 3, 1];
    let hp = Tensor::from_fn(&[n, cfg.d_x], |k| {
        let (a, c) = (k / cfg.d_x, k % cfg.d_x);
        let old = perm.iter().position(|&p| p == a).unwrap();
        h.at2(old, c)
    });
    let ep = Tensor::from_fn(&[n * n, cfg.d_e], |k| {
        let (ab, c) = (k / cfg.d_e, k % cfg.d_e);
        let oa = perm.iter().position(|&p| p == ab / n).unwrap();
        let ob = perm.iter().position(|&p| p == ab % n).unwrap();
        e.at2(oa * n + ob, c)
    });
    let tape = Tape::new();
    let b = Binder::new(&tape, net.store());
    let z = net.init_line_nodes(&b, tape.constant(e), tape.constant(h), &lg).unwrap().value();
    let zp = net.init_line_nodes(&b, tape.constant(ep), tape.constant(hp), &lg).unwrap().value();
    for (u, &(i, j)) in lg.pairs().iter().enumerate() {
        let v = lg.index_of(perm[i], perm[j]).unwrap();
        assert_eq!(z.row(u), zp.row(v));
    }
}

#[test]
fn primal_layer_matches_brute_force() {
    let net = random_net(6);
    let cfg = net.config().clone();
    let p = &net.layout.layers[1].primal;
    let s = net.store();
    for n in [1usize, 3, 5] {
        let mut r = rng(7 + n as u64);
        let h = Tensor::randn(&[n, cfg.d_x], 1.0, &mut r);
        let e = Tensor::randn(&[n * n, cfg.d_e], 1.0, &mut r);
        let tape = Tape::new();
        let b = Binder::new(&tape, s);
        let (ho, eo, yp) = net.primal_layer(&b, 1, tape.constant(h.clone()), tape.constant(e.clone()), n).unwrap();

        let x = norm(s, &p.ln1, &h);
        let (q, k, v) = (lin(s, &p.q, &x), lin(s, &p.k, &x), lin(s, &p.v, &x));
        let bias = lin(s, &p.edge_bias, &e);
        let nh = cfg.heads_primal;
        let att = attend(&q, &k, &v, nh, |hd, i, j| bias.at2(i * n + j, hd), |_, _| true);
        let h1 = add(&h, &lin(s, &p.o, &att));
        let h2 = add(&h1, &mlp(s, &p.ff1, &p.ff2, &norm(s, &p.ln2, &h1)));
        close(&ho.value(), &h2, 1e-12);

        let dh = (cfg.d_x / nh) as f64;
        let score = |hd: usize, i: usize, j: usize| {
            (0..cfg.d_x / nh).map(|c| q.at2(i, hd * (cfg.d_x / nh) + c) * k.at2(j, hd * (cfg.d_x / nh) + c)).sum::<f64>()
                / dh.sqrt()
                + bias.at2(i * n + j, hd)
        };
        let sym = Tensor::from_fn(&[n * n, nh], |k| {
            let (ij, hd) = (k / nh, k % nh);
            (score(hd, ij / n, ij % n) + score(hd, ij % n, ij / n)) / 2.0
        });
        close(&eo.value(), &add(&e, &lin(s, &p.edge_update, &sym)), 1e-12);
        close(&yp.value(), &lin(s, &p.pool, &row_tensor(mean_rows(&h2))), 1e-12);
        assert!(ho.value().all_finite());
    }
}

#[test]
fn line_layer_matches_dense_oracle() {
    let net = random_net(8);
    let cfg = net.config().clone();
    let p = &net.layout.layers[0].line;
    let s = net.store();
    let mut r = rng(9);
    let z = Tensor::randn(&[10, cfg.d_e], 1.0, &mut r);
    let tape = Tape::new();
    let b = Binder::new(&tape, s);
    let (zo, yl) = net.line_layer(&b, 0, tape.constant(z.clone()), None).unwrap();
    let x = norm(s, &p.ln1, &z);
    let att = attend(&lin(s, &p.q, &x), &lin(s, &p.k, &x), &lin(s, &p.v, &x), cfg.heads_line, |_, _, _| 0.0, |_, _| true);
    let z1 = add(&z, &lin(s, &p.o, &att));
    let z2 = add(&z1, &mlp(s, &p.ff1, &p.ff2, &norm(s, &p.ln2, &z1)));
    close(&zo.value(), &z2, 1e-12);
    let w = softmax(lin(s, &p.pool_score, &z2).data());
    let pooled: Vec<f64> = (0..cfg.d_e).map(|c| (0..10).map(|u| w[u] * z2.at2(u, c)).sum()).collect();
    close(&yl.value(), &lin(s, &p.pool, &row_tensor(pooled)), 1e-12);
}

#[test]
fn line_attention_single_token_is_value() {
    let net = random_net(10);
    let cfg = net.config().clone();
    let p = &net.layout.layers[0].line;
    let x = Tensor::randn(&[1, cfg.d_e], 1.0, &mut rng(11));
    let tape = Tape::new();
    let b = Binder::new(&tape, net.store());
    let a = net.line_attention(&b, 0, tape.constant(x.clone()), None).unwrap();
    close(&a.value(), &lin(net.store(), &p.v, &x), 1e-14);
}

#[test]
fn line_attention_linear_kernel_tracks_exact() {
    let mut net = Denoiser::new(DenoiserConfig { d_e: 16, heads_line: 2, ..DenoiserConfig::tiny() }, 12).unwrap();
    // Keep projected queries and keys near unit norm, where FAVOR+ is accurate.
    let ids: Vec<_> = net.store().ids().collect();
    for id in ids {
        let name = net.store().get(id).name().to_string();
        if name == "layer0.line.q.w" || name == "layer0.line.k.w" {
            let mut r = rng(13);
            let shape = net.store().get(id).value().shape().to_vec();
            net.store_mut().set_value(id, Tensor::randn(&shape, 0.06, &mut r)).unwrap();
        }
    }
    let x = Tensor::randn(&[20, 16], 1.0, &mut rng(14));
    let rf = RandomFeatureMap::new(4096, 8, 15).unwrap();
    let tape = Tape::new();
    let b = Binder::new(&tape, net.store());
    let exact = net.line_attention(&b, 0, tape.constant(x.clone()), None).unwrap().value();
    let approx = net.line_attention(&b, 0, tape.constant(x), Some(&rf)).unwrap().value();
    let rel = exact.zip_map(&approx, |a, b| a - b).unwrap().frobenius() / exact.frobenius();
    assert!(rel < 5e-2, "{rel}");
}

#[test]
fn atoms_from_bonds_matches_masked_loop() {
    let net = random_net(16);
    let cfg = net.config().clone();
    let p = &net.layout.layers[0].atoms_from_bonds;
    let s = net.store();
    let lg = LineGraphIndex::new(4).unwrap();
    let mut r = rng(17);
    let h = Tensor::randn(&[4, cfg.d_x], 1.0, &mut r);
    let z = Tensor::randn(&[6, cfg.d_e], 1.0, &mut r);
    let tape = Tape::new();
    let b = Binder::new(&tape, s);
    let out = net.cross_attn_atoms_from_bonds(&b, 0, tape.constant(h.clone()), tape.constant(z.clone()), &lg).unwrap();
    let att = attend(&lin(s, &p.q, &h), &lin(s, &p.k, &z), &lin(s, &p.v, &z), cfg.heads_cross, |_, _, _| 0.0, |i, u| {
        let (a, c) = lg.pair(u);
        a == i || c == i
    });
    close(&out.value(), &add(&h, &lin(s, &p.o, &att)), 1e-12);
}

#[test]
fn atoms_from_bonds_single_bond() {
    let net = random_net(18);
    let cfg = net.config().clone();
    let p = &net.layout.layers[0].atoms_from_bonds;
    let s = net.store();
    let lg = LineGraphIndex::new(2).unwrap();
    let mut r = rng(19);
    let h = Tensor::randn(&[2, cfg.d_x], 1.0, &mut r);
    let z = Tensor::randn(&[1, cfg.d_e], 1.0, &mut r);
    let tape = Tape::new();
    let b = Binder::new(&tape, s);
    let out = net.cross_attn_atoms_from_bonds(&b, 0, tape.constant(h.clone()), tape.constant(z.clone()), &lg).unwrap();
    let upd = lin(s, &p.o, &lin(s, &p.v, &z));
    for i in 0..2 {
        for c in 0..cfg.d_x {
            assert!((out.value().at2(i, c) - h.at2(i, c) - upd.at2(0, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn bonds_from_atoms_matches_two_way_softmax() {
    let net = random_net(20);
    let cfg = net.config().clone();
    let p = &net.layout.layers[1].bonds_from_atoms;
    let s = net.store();
    let lg = LineGraphIndex::new(5).unwrap();
    let mut r = rng(21);
    let h = Tensor::randn(&[5, cfg.d_x], 1.0, &mut r);
    let z = Tensor::randn(&[10, cfg.d_e], 1.0, &mut r);
    let tape = Tape::new();
    let b = Binder::new(&tape, s);
    let (out, alpha) =
        net.cross_attn_bonds_from_atoms(&b, 1, tape.constant(z.clone()), tape.constant(h.clone()), &lg).unwrap();
    let nh = cfg.heads_cross;
    let att = attend(&lin(s, &p.q, &z), &lin(s, &p.k, &h), &lin(s, &p.v, &h), nh, |_, _, _| 0.0, |u, a| {
        let (i, j) = lg.pair(u);
        a == i || a == j
    });
    close(&out.value(), &add(&z, &lin(s, &p.o, &att)), 1e-12);
    for u in 0..10 {
        assert!((alpha.at2(u, 0) + alpha.at2(u, 1) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn bonds_from_atoms_equal_endpoints_split_evenly() {
    let net = random_net(22);
    let cfg = net.config().clone();
    let lg = LineGraphIndex::new(3).unwrap();
    let mut r = rng(23);
    let row = Tensor::randn(&[1, cfg.d_x], 1.0, &mut r);
    let h = Tensor::from_fn(&[3, cfg.d_x], |k| row.data()[k % cfg.d_x]);
    let z = Tensor::randn(&[3, cfg.d_e], 1.0, &mut r);
    let tape = Tape::new();
    let b = Binder::new(&tape, net.store());
    let (_, alpha) = net.cross_attn_bonds_from_atoms(&b, 0, tape.constant(z), tape.constant(h), &lg).unwrap();
    assert!(alpha.data().iter().all(|&a| (a - 0.5).abs() < 1e-15));
}

#[test]
fn cross_attention_locality() {
    let net = random_net(24);
    let cfg = net.config().clone();
    let lg = LineGraphIndex::new(5).unwrap();
    let mut r = rng(25);
    let h = Tensor::randn(&[5, cfg.d_x], 1.0, &mut r);
    let z = Tensor::randn(&[10, cfg.d_e], 1.0, &mut r);
    let tape = Tape::new();
    let b = Binder::new(&tape, net.store());
    let base_h = net.cross_attn_atoms_from_bonds(&b, 0, tape.constant(h.clone()), tape.constant(z.clone()), &lg).unwrap().value();
    let (base_z, _) = net.cross_attn_bonds_from_atoms(&b, 0, tape.constant(z.clone()), tape.constant(h.clone()), &lg).unwrap();
    let base_z = base_z.value();
    for u in 0..10 {
        let mut zp = z.clone();
        zp.data_mut()[u * cfg.d_e..(u + 1) * cfg.d_e].iter_mut().for_each(|x| *x += 3.0);
        let hp = net.cross_attn_atoms_from_bonds(&b, 0, tape.constant(h.clone()), tape.constant(zp), &lg).unwrap().value();
        for i in 0..5 {
            if !lg.is_incident(i, u) {
                assert_eq!(hp.row(i), base_h.row(i));
            }
        }
    }
    for k in 0..5 {
        let mut hp = h.clone();
        hp.data_mut()[k * cfg.d_x..(k + 1) * cfg.d_x].iter_mut().for_each(|x| *x -= 2.0);
        let (zp, _) = net.cross_attn_bonds_from_atoms(&b, 0, tape.constant(z.clone()), tape.constant(hp), &lg).unwrap();
        for u in 0..10 {
            if !lg.is_incident(k, u) {
                assert_eq!(zp.value().row(u), base_z.row(u));
            }
        }
    }
}

#[test]
fn global_fusion_oracle_and_zero_weight() {
    let mut net = random_net(26);
    let cfg = net.config().clone();
    let mut r = rng(27);
    let y = Tensor::randn(&[1, cfg.d_y], 1.0, &mut r);
    let yp = Tensor::randn(&[1, cfg.d_y], 1.0, &mut r);
    let yl = Tensor::randn(&[1, cfg.d_y], 1.0, &mut r);
    let h = Tensor::randn(&[4, cfg.d_x], 1.0, &mut r);
    let z = Tensor::randn(&[6, cfg.d_e], 1.0, &mut r);
    let run = |net: &Denoiser, h: &Tensor| {
        let tape = Tape::new();
        let b = Binder::new(&tape, net.store());
        let c = |t: &Tensor| tape.constant(t.clone());
        net.global_fusion(&b, 0, c(&y), c(&yp), c(&yl), c(h), c(&z)).unwrap().value().as_ref().clone()
    };
    let mut cat = yp.data().to_vec();
    cat.extend(yl.data());
    cat.extend(mean_rows(&h));
    cat.extend(mean_rows(&z));
    let proj = lin(net.store(), &net.layout.layers[0].fuse, &row_tensor(cat));
    let want = row_tensor(plain_ln(add(&y, &proj).data()));
    close(&run(&net, &h), &want, 1e-12);

    // Reordering atoms leaves the pooled inputs, hence y, unchanged.
    let hp = Tensor::from_fn(&[4, cfg.d_x], |k| h.at2(3 - k / cfg.d_x, k % cfg.d_x));
    close(&run(&net, &hp), &want, 1e-14);

    let w = net.layout.layers[0].fuse.w;
    let shape = net.store().get(w).value().shape().to_vec();
    net.store_mut().set_value(w, Tensor::zeros(&shape)).unwrap();
    close(&run(&net, &h), &row_tensor(plain_ln(y.data())), 1e-15);
}

#[test]
fn film_cases() {
    let fresh = Denoiser::new(DenoiserConfig::tiny(), 28).unwrap();
    let cfg = fresh.config().clone();
    let mut r = rng(29);
    let h = Tensor::randn(&[3, cfg.d_x], 1.0, &mut r);
    let z = Tensor::randn(&[3, cfg.d_e], 1.0, &mut r);
    let y = Tensor::randn(&[1, cfg.d_y], 1.0, &mut r);
    let run = |net: &Denoiser| {
        let tape = Tape::new();
        let b = Binder::new(&tape, net.store());
        let (a, c) = net.film(&b, 0, tape.constant(h.clone()), tape.constant(z.clone()), tape.constant(y.clone())).unwrap();
        (a.value().as_ref().clone(), c.value().as_ref().clone())
    };
    let (h1, z1) = run(&fresh);
    assert_eq!((h1, z1), (h.clone(), z.clone()));

    let mut shift = fresh.clone();
    let bp = shift.layout.layers[0].film.beta_p.b.unwrap();
    shift.store_mut().set_value(bp, Tensor::full(&[cfg.d_x], 0.75)).unwrap();
    let (h2, _) = run(&shift);
    close(&h2, &h.map(|v| v + 0.75), 1e-15);

    let net = random_net(30);
    let p = &net.layout.layers[0].film;
    let s = net.store();
    let (h3, z3) = run(&net);
    let mod_oracle = |x: &Tensor, g: &Lin, b: &Lin| {
        let (gamma, beta) = (lin(s, g, &y), lin(s, b, &y));
        let c = x.shape()[1];
        Tensor::from_fn(x.shape(), |k| (1.0 + gamma.data()[k % c]) * x.data()[k] + beta.data()[k % c])
    };
    close(&h3, &mod_oracle(&h, &p.gamma_p, &p.beta_p), 1e-12);
    close(&z3, &mod_oracle(&z, &p.gamma_l, &p.beta_l), 1e-12);
}

#[test]
fn decode_edges_cases() {
    let mut net = random_net(31);
    let cfg = net.config().clone();
    let lg = LineGraphIndex::new(4).unwrap();
    let mut r = rng(32);
    let z = Tensor::randn(&[6, cfg.d_e], 1.0, &mut r);
    let onehot = Tensor::from_fn(&[6, 5], |k| f64::from(k % 5 == (k / 5) % 5));
    let run = |net: &Denoiser| {
        let tape = Tape::new();
        let b = Binder::new(&tape, net.store());
        net.decode_edges(&b, tape.constant(z.clone()), tape.constant(onehot.clone())).unwrap().value().as_ref().clone()
    };
    let d = &net.layout.decode;
    close(&run(&net), &add(&mlp(net.store(), &d.out1, &d.out2, &z), &onehot), 1e-12);

    let dense = dense_logits(&run(&net), &lg);
    for i in 0..4 {
        for j in 0..4 {
            for c in 0..5 {
                assert_eq!(dense.data()[(i * 4 + j) * 5 + c], dense.data()[(j * 4 + i) * 5 + c]);
            }
        }
        assert_eq!(softmax(&dense.data()[(i * 4 + i) * 5..(i * 4 + i + 1) * 5]), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    let (w, b) = (net.layout.decode.out2.w, net.layout.decode.out2.b.unwrap());
    net.store_mut().set_value(w, Tensor::zeros(&[cfg.d_e, 5])).unwrap();
    net.store_mut().set_value(b, Tensor::zeros(&[5])).unwrap();
    assert_eq!(run(&net), onehot);
}

// ---- whole network ----

fn logits(net: &Denoiser, g: &MolecularGraph, c: &[f64], t: usize) -> Tensor {
    let tape = Tape::new();
    let input = DenoiserInput { noisy: g, cond: c, t, steps: 10 };
    net.forward(&tape, &input, &ForwardOptions::default()).unwrap().dense_logits()
}

#[test]
fn forward_shape_and_symmetry() {
    let net = random_net(33);
    let mut r = rng(34);
    for n in 2..=8 {
        let g = random_graph(n, &mut r);
        let c = cond(16, &mut r);
        let out = logits(&net, &g, &c, 4);
        assert_eq!(out.shape(), &[n, n, 5]);
        for i in 0..n {
            for j in 0..n {
                assert_eq!(out.data()[(i * n + j) * 5..(i * n + j + 1) * 5], out.data()[(j * n + i) * 5..(j * n + i + 1) * 5]);
            }
        }
    }
}

#[test]
fn forward_permutation_equivariance() {
    let net = random_net(35);
    let mut r = rng(36);
    let mut worst: f64 = 0.0;
    for _ in 0..25 {
        let n = r.random_range(2..=6);
        let g = random_graph(n, &mut r);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let c = cond(16, &mut r);
        let a = logits(&net, &g, &c, 3);
        let b = logits(&net, &g.permuted(&perm).unwrap(), &c, 3);
        for i in 0..n {
            for j in 0..n {
                for k in 0..5 {
                    let d = a.data()[(i * n + j) * 5 + k] - b.data()[(perm[i] * n + perm[j]) * 5 + k];
                    worst = worst.max(d.abs());
                }
            }
        }
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn forward_depends_on_timestep_and_condition() {
    let net = random_net(37);
    let mut r = rng(38);
    let g = random_graph(4, &mut r);
    let c = cond(16, &mut r);
    let a = logits(&net, &g, &c, 1);
    let b = logits(&net, &g, &c, 10);
    assert!(a.max_abs_diff(&b).unwrap() > 1e-8);
    let c2: Vec<f64> = c.iter().map(|x| 1.0 - x).collect();
    assert!(a.max_abs_diff(&logits(&net, &g, &c2, 1)).unwrap() > 1e-8);
}

#[test]
fn forward_rejects_bad_inputs() {
    let net = random_net(39);
    let g1 = MolecularGraph::empty(vec![0]).unwrap();
    let g3 = MolecularGraph::empty(vec![0, 1, 2]).unwrap();
    let tape = Tape::new();
    let opts = ForwardOptions::default();
    let c = vec![0.0; 16];
    assert!(net.forward(&tape, &DenoiserInput { noisy: &g1, cond: &c, t: 1, steps: 5 }, &opts).is_err());
    assert!(net.forward(&tape, &DenoiserInput { noisy: &g3, cond: &c[..3], t: 1, steps: 5 }, &opts).is_err());
    assert!(net.forward(&tape, &DenoiserInput { noisy: &g3, cond: &c, t: 0, steps: 5 }, &opts).is_err());
    assert!(DenoiserConfig { d_x: 10, heads_primal: 4, ..DenoiserConfig::tiny() }.validate().is_err());
}

#[test]
fn linear_kernel_forward_runs_and_stays_equivariant_in_distribution() {
    let mut net = random_net(40);
    net.set_kernel(AttentionKernel::Linear).unwrap();
    let mut r = rng(41);
    let g = random_graph(5, &mut r);
    let c = cond(16, &mut r);
    let out = logits(&net, &g, &c, 2);
    assert!(out.all_finite());
    let tape = Tape::new();
    let input = DenoiserInput { noisy: &g, cond: &c, t: 2, steps: 10 };
    let a = net.forward(&tape, &input, &ForwardOptions { feature_seed: Some(9), ..Default::default() }).unwrap();
    assert!(a.logits.value().max_abs_diff(&net.forward(&tape, &input, &ForwardOptions::default()).unwrap().logits.value()).unwrap() > 0.0);
}

#[test]
fn full_network_gradient() {
    let mut net = random_net(42);
    let mut r = rng(43);
    let g = random_graph(3, &mut r);
    let c = cond(16, &mut r);
    let clean: Vec<usize> = vec![1, 0, 2];
    let mut store = net.take_store();
    let err = gradcheck::check_params(&mut store, &[], 6, |tape, store, _| {
        let input = DenoiserInput { noisy: &g, cond: &c, t: 3, steps: 10 };
        let out = net.forward_bound(&Binder::new(tape, store), &input, None)?;
        crate::diffusion::training_loss(out.logits, &clean, &[true; 3])
    })
    .unwrap();
    net.restore_store(store).unwrap();
    assert!(err < 1e-4, "{err}");
}
