//! Reference-formula oracles for the attention kernels, written against the
//! raw value arrays so they share no code with the tape implementations.

use cracknet::attention::{
    build_shift_mask, external_attention, external_attention_traced, gaussian_axial_attention,
    gwaa_traced, lgg_sa, msa_traced, multi_head_self_attention, scaled_dot_product_attention,
    sw_msa, w_msa, windowed_msa_traced, AttentionParams, ExternalMemory, LggParams,
    WindowGeometry,
};
use cracknet::gradcheck::{grad_check, seeded_tensor, DEFAULT_STEP};
use cracknet::tape::{Tape, Var};
use cracknet::tensor::Tensor;

// ---- plain-array reference helpers -----------------------------------------

fn matmul_ref(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

fn softmax_ref(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// softmax(q k^T / sqrt(d)) v on one head.
fn sdpa_ref(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() * scale)
            .collect();
        let probs = softmax_ref(&logits);
        for c in 0..d {
            out[i * d + c] = (0..n).map(|j| probs[j] * v[j * d + c]).sum();
        }
    }
    out
}

/// Full multi-head attention on one token set.
fn msa_ref(x: &[f64], n: usize, dim: usize, heads: usize, w: &[&[f64]; 4]) -> Vec<f64> {
    let q = matmul_ref(x, w[0], n, dim, dim);
    let k = matmul_ref(x, w[1], n, dim, dim);
    let v = matmul_ref(x, w[2], n, dim, dim);
    let d = dim / heads;
    let mut cat = vec![0.0; n * dim];
    for h in 0..heads {
        let slice = |m: &[f64]| -> Vec<f64> {
            (0..n)
                .flat_map(|i| (0..d).map(move |c| (i, c)))
                .map(|(i, c)| m[i * dim + h * d + c])
                .collect()
        };
        let out = sdpa_ref(&slice(&q), &slice(&k), &slice(&v), n, d);
        for i in 0..n {
            for c in 0..d {
                cat[i * dim + h * d + c] = out[i * d + c];
            }
        }
    }
    matmul_ref(&cat, w[3], n, dim, dim)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rand_params(tape: &mut Tape<f64>, dim: usize, heads: usize, seed: u64) -> AttentionParams {
    AttentionParams {
        heads,
        model_dim: dim,
        wq: tape.param(seeded_tensor(vec![dim, dim], seed, 0.6)),
        wk: tape.param(seeded_tensor(vec![dim, dim], seed + 1, 0.6)),
        wv: tape.param(seeded_tensor(vec![dim, dim], seed + 2, 0.6)),
        wo: tape.param(seeded_tensor(vec![dim, dim], seed + 3, 0.6)),
        sigma: None,
    }
}

// ---- forward oracles -------------------------------------------------------

#[test]
fn sdpa_matches_direct_formula() {
    for seed in [1u64, 2, 3] {
        let q = seeded_tensor::<f64>(vec![4, 8], seed, 1.0);
        let k = seeded_tensor::<f64>(vec![4, 8], seed + 10, 1.0);
        let v = seeded_tensor::<f64>(vec![4, 8], seed + 20, 1.0);
        let mut tape = Tape::new();
        let (qv, kv, vv) = (
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
        );
        let out = scaled_dot_product_attention(&mut tape, qv, kv, vv).unwrap();
        let want = sdpa_ref(q.values(), k.values(), v.values(), 4, 8);
        assert!(max_diff(tape.value(out).values(), &want) < 1e-6);
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut tape = Tape::new();
    let x = tape.constant(seeded_tensor(vec![6, 8], 33, 4.0));
    let params = rand_params(&mut tape, 8, 2, 40);
    let (_, probs) = msa_traced(&mut tape, x, &params, None).unwrap();
    for p in probs {
        let probs = tape.value(p);
        for row in 0..6 {
            let s: f64 = probs.values()[row * 6..(row + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() <= 1e-6, "row sum {s}");
        }
    }
}

#[test]
fn two_head_msa_matches_per_head_oracle() {
    for seed in [51u64, 52, 53] {
        let x = seeded_tensor::<f64>(vec![6, 8], seed, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let params = rand_params(&mut tape, 8, 2, seed + 100);
        let out = multi_head_self_attention(&mut tape, xv, &params).unwrap();
        let weights = [
            tape.value(params.wq).values().to_vec(),
            tape.value(params.wk).values().to_vec(),
            tape.value(params.wv).values().to_vec(),
            tape.value(params.wo).values().to_vec(),
        ];
        let want = msa_ref(
            x.values(),
            6,
            8,
            2,
            &[&weights[0], &weights[1], &weights[2], &weights[3]],
        );
        assert!(max_diff(tape.value(out).values(), &want) < 1e-6);
    }
}

#[test]
fn zero_value_projection_means_zero_output() {
    let mut tape = Tape::new();
    let x = tape.constant(seeded_tensor(vec![5, 4], 61, 1.0));
    let mut params = rand_params(&mut tape, 4, 2, 62);
    params.wv = tape.param(Tensor::zeros(vec![4, 4]));
    let out = multi_head_self_attention(&mut tape, x, &params).unwrap();
    assert!(tape.value(out).values().iter().all(|&v| v == 0.0));
}

#[test]
fn sw_msa_with_zero_shift_equals_w_msa_exactly() {
    let mut tape = Tape::new();
    let x = tape.constant(seeded_tensor(vec![8, 8, 4], 71, 1.0));
    let params = rand_params(&mut tape, 4, 2, 72);
    let geom = WindowGeometry::new(8, 8, 4, 0).unwrap();
    let a = sw_msa(&mut tape, x, &params, &geom).unwrap();
    let b = w_msa(&mut tape, x, &params, &geom).unwrap();
    assert_eq!(tape.value(a).values(), tape.value(b).values());
}

#[test]
fn full_window_w_msa_equals_global_msa() {
    let mut tape = Tape::new();
    let x = tape.constant(seeded_tensor(vec![4, 4, 8], 81, 1.0));
    let params = rand_params(&mut tape, 8, 2, 82);
    let geom = WindowGeometry::new(4, 4, 4, 0).unwrap();
    let windowed = w_msa(&mut tape, x, &params, &geom).unwrap();
    let flat = tape.reshape(x, vec![16, 8]).unwrap();
    let global = multi_head_self_attention(&mut tape, flat, &params).unwrap();
    let g = tape.reshape(global, vec![4, 4, 8]).unwrap();
    assert!(max_diff(tape.value(windowed).values(), tape.value(g).values()) < 1e-6);
}

#[test]
fn shifted_windows_do_not_attend_across_regions() {
    for seed in [91u64, 92, 93, 94, 95] {
        let mut tape = Tape::new();
        let x = tape.constant(seeded_tensor(vec![8, 8, 4], seed, 1.5));
        let params = rand_params(&mut tape, 4, 2, seed + 10);
        let geom = WindowGeometry::new(8, 8, 4, 2).unwrap();
        let (_, probs) = windowed_msa_traced(&mut tape, x, &params, &geom).unwrap();
        let m = geom.window;
        let n = geom.tokens_per_window();
        let wins_w = geom.w / m;
        for (win, head_probs) in probs.iter().enumerate() {
            let bi = (win / wins_w) * m;
            let bj = (win % wins_w) * m;
            // independent region labels: a token wrapped during the roll iff
            // its shifted coordinate falls in the last `shift` rows/columns
            let wrapped = |t: usize| {
                let (i, j) = (bi + t / m, bj + t % m);
                (i >= geom.h - geom.shift, j >= geom.w - geom.shift)
            };
            for p in head_probs {
                let pv = tape.value(*p);
                for a in 0..n {
                    for b in 0..n {
                        if wrapped(a) != wrapped(b) {
                            assert!(
                                pv.values()[a * n + b] < 1e-6,
                                "cross-region weight {} at window {win}",
                                pv.values()[a * n + b]
                            );
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn shift_mask_matches_brute_force_for_larger_grid() {
    let geom = WindowGeometry::new(12, 8, 4, 2).unwrap();
    let mask = build_shift_mask::<f64>(&geom);
    let m = geom.window;
    let n = geom.tokens_per_window();
    let wins_w = geom.w / m;
    for win in 0..geom.num_windows() {
        let bi = (win / wins_w) * m;
        let bj = (win % wins_w) * m;
        for a in 0..n {
            for b in 0..n {
                let pa = (bi + a / m, bj + a % m);
                let pb = (bi + b / m, bj + b % m);
                let wrap = |p: (usize, usize)| {
                    (p.0 >= geom.h - geom.shift, p.1 >= geom.w - geom.shift)
                };
                let want = if wrap(pa) != wrap(pb) { -1e9 } else { 0.0 };
                assert_eq!(mask.values()[(win * n + a) * n + b], want);
            }
        }
    }
}

// ---- Gaussian axial attention ----------------------------------------------

/// Direct enumeration of the axial neighborhood with the Gaussian penalty.
fn gwaa_ref(
    x: &[f64],
    h: usize,
    w: usize,
    dim: usize,
    heads: usize,
    sigmas: &[f64],
    weights: &[&[f64]; 4],
) -> Vec<f64> {
    let n = h * w;
    let q = matmul_ref(x, weights[0], n, dim, dim);
    let k = matmul_ref(x, weights[1], n, dim, dim);
    let v = matmul_ref(x, weights[2], n, dim, dim);
    let d = dim / heads;
    let mut cat = vec![0.0; n * dim];
    for head in 0..heads {
        let sigma = sigmas[head];
        for i in 0..h {
            for j in 0..w {
                let t = i * w + j;
                // row plus column positions, the token itself counted once
                let mut neigh: Vec<usize> = (0..w).map(|jj| i * w + jj).collect();
                for ii in 0..h {
                    if ii != i {
                        neigh.push(ii * w + j);
                    }
                }
                assert_eq!(neigh.len(), h + w - 1);
                let logits: Vec<f64> = neigh
                    .iter()
                    .map(|&u| {
                        let (ui, uj) = (u / w, u % w);
                        let dist2 = ((ui as f64 - i as f64).powi(2))
                            + ((uj as f64 - j as f64).powi(2));
                        let sim: f64 = (0..d)
                            .map(|c| q[t * dim + head * d + c] * k[u * dim + head * d + c])
                            .sum::<f64>()
                            / (d as f64).sqrt();
                        sim - dist2 / (2.0 * sigma * sigma)
                    })
                    .collect();
                let probs = softmax_ref(&logits);
                for c in 0..d {
                    cat[t * dim + head * d + c] = neigh
                        .iter()
                        .zip(probs.iter())
                        .map(|(&u, &p)| p * v[u * dim + head * d + c])
                        .sum();
                }
            }
        }
    }
    matmul_ref(&cat, weights[3], n, dim, dim)
}

fn gwaa_params(tape: &mut Tape<f64>, dim: usize, heads: usize, seed: u64, sigma: f64) -> AttentionParams {
    let mut p = rand_params(tape, dim, heads, seed);
    p.sigma = Some(
        (0..heads)
            .map(|_| tape.param(Tensor::scalar(sigma)))
            .collect(),
    );
    p
}

#[test]
fn gwaa_matches_axial_enumeration_oracle() {
    for seed in [101u64, 102, 103] {
        let x = seeded_tensor::<f64>(vec![4, 4, 6], seed, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let params = gwaa_params(&mut tape, 6, 2, seed + 5, 0.9);
        let out = gaussian_axial_attention(&mut tape, xv, &params).unwrap();
        let weights = [
            tape.value(params.wq).values().to_vec(),
            tape.value(params.wk).values().to_vec(),
            tape.value(params.wv).values().to_vec(),
            tape.value(params.wo).values().to_vec(),
        ];
        let want = gwaa_ref(
            x.values(),
            4,
            4,
            6,
            2,
            &[0.9, 0.9],
            &[&weights[0], &weights[1], &weights[2], &weights[3]],
        );
        assert!(max_diff(tape.value(out).values(), &want) < 1e-6);
    }
}

#[test]
fn gwaa_with_huge_sigma_is_plain_axial_attention() {
    let x = seeded_tensor::<f64>(vec![4, 4, 6], 111, 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let params = gwaa_params(&mut tape, 6, 2, 115, 1e9);
    let out = gaussian_axial_attention(&mut tape, xv, &params).unwrap();
    let weights = [
        tape.value(params.wq).values().to_vec(),
        tape.value(params.wk).values().to_vec(),
        tape.value(params.wv).values().to_vec(),
        tape.value(params.wo).values().to_vec(),
    ];
    // oracle with the Gaussian term removed entirely
    let want = gwaa_ref(
        x.values(),
        4,
        4,
        6,
        2,
        &[f64::INFINITY, f64::INFINITY],
        &[&weights[0], &weights[1], &weights[2], &weights[3]],
    );
    assert!(max_diff(tape.value(out).values(), &want) < 1e-4);
}

#[test]
fn gwaa_weights_decay_with_distance_for_flat_similarity() {
    let mut tape = Tape::new();
    let x = tape.constant(seeded_tensor(vec![5, 5, 4], 121, 1.0));
    let mut params = gwaa_params(&mut tape, 4, 1, 125, 0.8);
    params.wq = tape.param(Tensor::zeros(vec![4, 4])); // S(Q,K) = 0 everywhere
    let (_, probs) = gwaa_traced(&mut tape, x, &params).unwrap();
    let p = tape.value(probs[0]);
    let n = 25;
    for t in 0..n {
        let (ti, tj) = (t / 5, t % 5);
        // collect (distance^2, prob) over the axial neighborhood
        let mut pairs: Vec<(f64, f64)> = Vec::new();
        for u in 0..n {
            let (ui, uj) = (u / 5, u % 5);
            if ui == ti || uj == tj {
                let d2 = (ui as f64 - ti as f64).powi(2) + (uj as f64 - tj as f64).powi(2);
                pairs.push((d2, p.values()[t * n + u]));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pairs.windows(2) {
            assert!(
                w[1].1 <= w[0].1 + 1e-12,
                "weight increased with distance: {:?} -> {:?}",
                w[0],
                w[1]
            );
        }
    }
}

#[test]
fn gwaa_without_sigma_is_config_error() {
    let mut tape = Tape::new();
    let x = tape.constant(seeded_tensor(vec![4, 4, 4], 131, 1.0));
    let params = rand_params(&mut tape, 4, 2, 132);
    assert!(gaussian_axial_attention(&mut tape, x, &params).is_err());
}

// ---- LGG-SA ------------------------------------------------------------------

fn bilinear2x_ref(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let taps = |o: usize, extent: usize| -> (usize, usize, f64) {
        let s = 0.5 * o as f64 - 0.25;
        let f = s.floor();
        let frac = s - f;
        let i0 = f.max(0.0).min(extent as f64 - 1.0) as usize;
        let i1 = ((f as isize + 1).clamp(0, extent as isize - 1)) as usize;
        (i0, i1, frac)
    };
    let mut out = vec![0.0; 4 * h * w * c];
    for oi in 0..2 * h {
        let (i0, i1, fi) = taps(oi, h);
        for oj in 0..2 * w {
            let (j0, j1, fj) = taps(oj, w);
            for ch in 0..c {
                let v00 = x[(i0 * w + j0) * c + ch];
                let v01 = x[(i0 * w + j1) * c + ch];
                let v10 = x[(i1 * w + j0) * c + ch];
                let v11 = x[(i1 * w + j1) * c + ch];
                out[(oi * 2 * w + oj) * c + ch] =
                    (v00 * (1.0 - fj) + v01 * fj) * (1.0 - fi) + (v10 * (1.0 - fj) + v11 * fj) * fi;
            }
        }
    }
    out
}

#[test]
fn lgg_sa_matches_stage_by_stage_oracle() {
    let (h, w, c, p, heads) = (8usize, 8usize, 4usize, 2usize, 2usize);
    for seed in [141u64, 142] {
        let x = seeded_tensor::<f64>(vec![h, w, c], seed, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let local = rand_params(&mut tape, c, heads, seed + 1);
        let global = gwaa_params(&mut tape, c, heads, seed + 10, 1.1);
        let params = LggParams {
            local: local.clone(),
            global: global.clone(),
            ldconv: tape.param(seeded_tensor(vec![p * p, c], seed + 20, 0.5)),
            fuse_w: tape.param(seeded_tensor(vec![2 * c, c], seed + 21, 0.5)),
            fuse_b: tape.param(seeded_tensor(vec![c], seed + 22, 0.5)),
            window: p,
        };
        let out = lgg_sa(&mut tape, xv, &params).unwrap();

        // stage 1: per-window local attention
        let lw = [
            tape.value(local.wq).values().to_vec(),
            tape.value(local.wk).values().to_vec(),
            tape.value(local.wv).values().to_vec(),
            tape.value(local.wo).values().to_vec(),
        ];
        let mut z_local = vec![0.0; h * w * c];
        for wi in 0..h / p {
            for wj in 0..w / p {
                let mut win = vec![0.0; p * p * c];
                for a in 0..p {
                    for b in 0..p {
                        for ch in 0..c {
                            win[(a * p + b) * c + ch] =
                                x.values()[((wi * p + a) * w + wj * p + b) * c + ch];
                        }
                    }
                }
                let res = msa_ref(&win, p * p, c, heads, &[&lw[0], &lw[1], &lw[2], &lw[3]]);
                for a in 0..p {
                    for b in 0..p {
                        for ch in 0..c {
                            z_local[((wi * p + a) * w + wj * p + b) * c + ch] =
                                res[(a * p + b) * c + ch];
                        }
                    }
                }
            }
        }

        // stage 2: learned softmax pooling per window and channel
        let logits = tape.value(params.ldconv).values();
        let mut pool_w = vec![0.0; p * p * c];
        for ch in 0..c {
            let col: Vec<f64> = (0..p * p).map(|k| logits[k * c + ch]).collect();
            let sm = softmax_ref(&col);
            for k in 0..p * p {
                pool_w[k * c + ch] = sm[k];
            }
        }
        let (gh, gw) = (h / p, w / p);
        let mut pooled = vec![0.0; gh * gw * c];
        for wi in 0..gh {
            for wj in 0..gw {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for a in 0..p {
                        for b in 0..p {
                            acc += pool_w[(a * p + b) * c + ch]
                                * z_local[((wi * p + a) * w + wj * p + b) * c + ch];
                        }
                    }
                    pooled[(wi * gw + wj) * c + ch] = acc;
                }
            }
        }

        // stage 3: Gaussian axial attention on the pooled grid
        let gwts = [
            tape.value(global.wq).values().to_vec(),
            tape.value(global.wk).values().to_vec(),
            tape.value(global.wv).values().to_vec(),
            tape.value(global.wo).values().to_vec(),
        ];
        let z_global = gwaa_ref(
            &pooled,
            gh,
            gw,
            c,
            heads,
            &[1.1, 1.1],
            &[&gwts[0], &gwts[1], &gwts[2], &gwts[3]],
        );

        // stage 4: upsample back and fuse
        let up = bilinear2x_ref(&z_global, gh, gw, c);
        let fw = tape.value(params.fuse_w).values();
        let fb = tape.value(params.fuse_b).values();
        let mut want = vec![0.0; h * w * c];
        for t in 0..h * w {
            for oc in 0..c {
                let mut acc = fb[oc];
                for ch in 0..c {
                    acc += z_local[t * c + ch] * fw[ch * c + oc];
                    acc += up[t * c + ch] * fw[(c + ch) * c + oc];
                }
                want[t * c + oc] = acc;
            }
        }
        assert!(
            max_diff(tape.value(out).values(), &want) < 1e-5,
            "lgg mismatch {}",
            max_diff(tape.value(out).values(), &want)
        );
    }
}

#[test]
fn lgg_sa_shape_contract_and_degenerate_grid() {
    // window == grid: local attention is global, pooled grid is 1x1
    let mut tape = Tape::new();
    let x = tape.constant(seeded_tensor(vec![4, 4, 4], 151, 1.0));
    let params = LggParams {
        local: rand_params(&mut tape, 4, 2, 152),
        global: gwaa_params(&mut tape, 4, 2, 160, 1.0),
        ldconv: tape.param(seeded_tensor(vec![16, 4], 170, 0.5)),
        fuse_w: tape.param(seeded_tensor(vec![8, 4], 171, 0.5)),
        fuse_b: tape.param(seeded_tensor(vec![4], 172, 0.5)),
        window: 4,
    };
    let out = lgg_sa(&mut tape, x, &params).unwrap();
    assert_eq!(tape.shape(out), &[4, 4, 4]);

    // 16x16 with p=4 keeps the spatial shape
    let mut tape = Tape::new();
    let x = tape.constant(seeded_tensor(vec![16, 16, 4], 181, 1.0));
    let params = LggParams {
        local: rand_params(&mut tape, 4, 2, 182),
        global: gwaa_params(&mut tape, 4, 2, 190, 1.0),
        ldconv: tape.param(seeded_tensor(vec![16, 4], 191, 0.5)),
        fuse_w: tape.param(seeded_tensor(vec![8, 4], 192, 0.5)),
        fuse_b: tape.param(seeded_tensor(vec![4], 193, 0.5)),
        window: 4,
    };
    let out = lgg_sa(&mut tape, x, &params).unwrap();
    assert_eq!(tape.shape(out), &[16, 16, 4]);
}

// ---- external attention ------------------------------------------------------

#[test]
fn external_attention_matches_two_matmul_oracle() {
    for seed in [201u64, 202, 203] {
        let x = seeded_tensor::<f64>(vec![6, 8], seed, 1.0);
        let mk = seeded_tensor::<f64>(vec![4, 8], seed + 1, 1.0);
        let mv = seeded_tensor::<f64>(vec![4, 8], seed + 2, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mem = ExternalMemory {
            mk: tape.param(mk.clone()),
            mv: tape.param(mv.clone()),
        };
        let (out, soft) = external_attention_traced(&mut tape, xv, &mem).unwrap();

        // oracle: scores, softmax over memory axis, L1 over token axis, times Mv
        let scores = matmul_ref(
            x.values(),
            &{
                let mut t = vec![0.0; 32];
                for i in 0..4 {
                    for j in 0..8 {
                        t[j * 4 + i] = mk.values()[i * 8 + j];
                    }
                }
                t
            },
            6,
            8,
            4,
        );
        let mut a = vec![0.0; 24];
        for r in 0..6 {
            let sm = softmax_ref(&scores[r * 4..(r + 1) * 4]);
            a[r * 4..(r + 1) * 4].copy_from_slice(&sm);
        }
        for (got, want) in tape.value(soft).values().iter().zip(a.iter()) {
            assert!((got - want).abs() < 1e-9);
        }
        for col in 0..4 {
            let colsum: f64 = (0..6).map(|r| a[r * 4 + col]).sum();
            for r in 0..6 {
                a[r * 4 + col] /= colsum;
            }
        }
        let want = matmul_ref(&a, mv.values(), 6, 4, 8);
        assert!(max_diff(tape.value(out).values(), &want) < 1e-6);
    }
}

// ---- gradients through the full kernels --------------------------------------

#[test]
fn grad_check_windowed_and_shifted_attention() {
    for seed in [301u64, 302, 303] {
        let x = seeded_tensor::<f64>(vec![4, 4, 4], seed, 0.8);
        let wq = seeded_tensor::<f64>(vec![4, 4], seed + 1, 0.5);
        let wk = seeded_tensor::<f64>(vec![4, 4], seed + 2, 0.5);
        let wv = seeded_tensor::<f64>(vec![4, 4], seed + 3, 0.5);
        let wo = seeded_tensor::<f64>(vec![4, 4], seed + 4, 0.5);
        for shift in [0usize, 1] {
            let err = grad_check(
                |tape: &mut Tape<f64>, vars: &[Var]| {
                    let params = AttentionParams {
                        heads: 2,
                        model_dim: 4,
                        wq: vars[1],
                        wk: vars[2],
                        wv: vars[3],
                        wo: vars[4],
                        sigma: None,
                    };
                    let geom = WindowGeometry::new(4, 4, 2, shift)?;
                    let (out, _) = windowed_msa_traced(tape, vars[0], &params, &geom)?;
                    let sq = tape.mul(out, out)?;
                    tape.sum_all(sq)
                },
                &[x.clone(), wq.clone(), wk.clone(), wv.clone(), wo.clone()],
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err <= 1e-5, "windowed attention (shift {shift}) grad error {err}");
        }
    }
}

#[test]
fn grad_check_gwaa_and_external_attention() {
    for seed in [311u64, 312, 313] {
        let x = seeded_tensor::<f64>(vec![3, 3, 4], seed, 0.8);
        let wq = seeded_tensor::<f64>(vec![4, 4], seed + 1, 0.5);
        let wk = seeded_tensor::<f64>(vec![4, 4], seed + 2, 0.5);
        let wv = seeded_tensor::<f64>(vec![4, 4], seed + 3, 0.5);
        let wo = seeded_tensor::<f64>(vec![4, 4], seed + 4, 0.5);
        let sigma = Tensor::scalar(0.9f64);
        let err = grad_check(
            |tape: &mut Tape<f64>, vars: &[Var]| {
                let params = AttentionParams {
                    heads: 2,
                    model_dim: 4,
                    wq: vars[1],
                    wk: vars[2],
                    wv: vars[3],
                    wo: vars[4],
                    sigma: Some(vec![vars[5], vars[5]]),
                };
                let out = gaussian_axial_attention(tape, vars[0], &params)?;
                let sq = tape.mul(out, out)?;
                tape.sum_all(sq)
            },
            &[x.clone(), wq, wk, wv, wo, sigma],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-5, "gwaa grad error {err}");

        let tokens = seeded_tensor::<f64>(vec![4, 6], seed + 10, 0.8);
        let mk = seeded_tensor::<f64>(vec![3, 6], seed + 11, 0.8);
        let mv = seeded_tensor::<f64>(vec![3, 6], seed + 12, 0.8);
        let err = grad_check(
            |tape: &mut Tape<f64>, vars: &[Var]| {
                let mem = ExternalMemory { mk: vars[1], mv: vars[2] };
                let out = external_attention(tape, vars[0], &mem)?;
                let sq = tape.mul(out, out)?;
                tape.sum_all(sq)
            },
            &[tokens, mk, mv],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-5, "external attention grad error {err}");
    }
}

#[test]
fn grad_check_lgg_sa() {
    for seed in [321u64, 322, 323] {
        let x = seeded_tensor::<f64>(vec![4, 4, 4], seed, 0.8);
        let mk: Vec<Tensor<f64>> = (0..8)
            .map(|i| seeded_tensor(vec![4, 4], seed + 1 + i, 0.5))
            .collect();
        let ld = seeded_tensor::<f64>(vec![4, 4], seed + 20, 0.5);
        let fw = seeded_tensor::<f64>(vec![8, 4], seed + 21, 0.5);
        let fb = seeded_tensor::<f64>(vec![4], seed + 22, 0.5);
        let sigma = Tensor::scalar(1.1f64);
        let mut inputs = vec![x];
        inputs.extend(mk);
        inputs.extend([ld, fw, fb, sigma]);
        let err = grad_check(
            |tape: &mut Tape<f64>, vars: &[Var]| {
                let params = LggParams {
                    local: AttentionParams {
                        heads: 2,
                        model_dim: 4,
                        wq: vars[1],
                        wk: vars[2],
                        wv: vars[3],
                        wo: vars[4],
                        sigma: None,
                    },
                    global: AttentionParams {
                        heads: 2,
                        model_dim: 4,
                        wq: vars[5],
                        wk: vars[6],
                        wv: vars[7],
                        wo: vars[8],
                        sigma: Some(vec![vars[12], vars[12]]),
                    },
                    ldconv: vars[9],
                    fuse_w: vars[10],
                    fuse_b: vars[11],
                    window: 2,
                };
                let out = lgg_sa(tape, vars[0], &params)?;
                let sq = tape.mul(out, out)?;
                tape.sum_all(sq)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-5, "lgg grad error {err}");
    }
}
