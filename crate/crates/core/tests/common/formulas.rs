//! Closed-form and hand-evaluated oracles for every layer and loss.
//!
//! Each check returns `Err` with a description on mismatch so the same list
//! can back both ordinary tests and the acceptance summary.

#![allow(dead_code)]

use compose_core::ec_encoder::{highway_layer, EcEncoderConfig, EcEncoderParams, FeatureMap, HighwayLayer};
use compose_core::ec_parser::Polarity;
use compose_core::matcher::{attend, MatchLabel, MatcherDepths, MatcherParams};
use compose_core::memory::{
    apply_update, encode_levels, encode_patient, gates, slot_index, visit_level_embeddings, ConceptTable,
    Demographics, Gender, MemoryParams, MemoryState, Patient, Visit, VisitLevels, NUM_SLOTS,
};
use compose_core::nn::{ConvBank, Linear, Mlp};
use compose_core::taxonomy::{read_taxonomy, CodeType, MissingCodePolicy, TaxonomySet};
use compose_core::tensor::Tensor;
use compose_core::text_encoder::{EncoderBackend, FeatureHashConfig, FeatureHashEncoder, TokenEmbeddingMatrix};
use compose_core::training::{classification_loss, distance_loss, total_loss, PairLoss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-9;

pub type Check = fn() -> Result<(), String>;

pub fn all() -> Vec<(&'static str, Check)> {
    vec![
        ("conv: zero input and bias give zero map", conv_zero_input),
        ("conv: kernel-1 identity filter", conv_identity),
        ("conv: sliding-window oracle", conv_sliding_window),
        ("highway: closed gate passes input", highway_closed_gate),
        ("highway: open gate yields transform", highway_open_gate),
        ("highway: scalar oracle", highway_scalar_oracle),
        ("pool: one-token sentence", pool_one_token),
        ("pool: duplicated sentence, kernel 1", pool_duplicated_sentence),
        ("pool: identical tokens, identical embedding", pool_purity),
        ("concept: max over token rows", concept_max_pool),
        ("concept: order-free at window 1", concept_window_one_permutation),
        ("levels: single code fills its chain", levels_single_code),
        ("levels: shared root and elementwise max", levels_two_codes),
        ("gates: zero input", gates_zero),
        ("gates: saturation", gates_saturation),
        ("gates: scalar oracle", gates_scalar_oracle),
        ("update: zero memory, full erase, hand example", update_examples),
        ("memory: one visit from zero state", memory_one_visit),
        ("memory: two-visit unroll", memory_two_visit_unroll),
        ("attention: zero slots are uniform", attention_zero_slots),
        ("attention: saturated logit", attention_saturation),
        ("attention: softmax and weighted-sum oracle", attention_oracle),
        ("demographics: zero weights and hand affine", demographics_oracle),
        ("predict: zero head is uniform", predict_zero_head),
        ("predict: end-to-end scalar forward", predict_end_to_end),
        ("L_c: uniform prediction", classification_uniform),
        ("L_c: perfect prediction and symmetry", classification_perfect_and_symmetric),
        ("L_d: branch examples", distance_examples),
        ("L: batch means", total_examples),
    ]
}

fn close(what: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: got {got}, want {want} (tol {tol})"))
    }
}

fn close_all(what: &str, got: &[f64], want: &[f64], tol: f64) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!("{what}: length {} vs {}", got.len(), want.len()));
    }
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        close(&format!("{what}[{i}]"), *g, *w, tol)?;
    }
    Ok(())
}

fn ensure(cond: bool, what: &str) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.to_string())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape, data).expect("shape matches")
}

fn tokens(dim: usize, rows: &[Vec<f64>]) -> TokenEmbeddingMatrix {
    let names = (0..rows.len()).map(|i| format!("w{i}")).collect();
    TokenEmbeddingMatrix::new(names, dim, rows.concat()).expect("valid matrix")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `W x + b` with `W` given row-major `[out, in]`.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    (0..b.len())
        .map(|o| b[o] + (0..n_in).map(|i| w[o * n_in + i] * x[i]).sum::<f64>())
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Same-padded convolution, written as the textbook double sum.
fn conv_oracle(x: &[Vec<f64>], w: &[f64], b: &[f64], cin: usize, k: usize) -> Vec<Vec<f64>> {
    let steps = x.len() as isize;
    let pad = ((k - 1) / 2) as isize;
    (0..steps)
        .map(|t| {
            (0..b.len())
                .map(|o| {
                    let mut acc = b[o];
                    for j in 0..k as isize {
                        let s = t + j - pad;
                        if s < 0 || s >= steps {
                            continue;
                        }
                        for c in 0..cin {
                            acc += w[(o * cin + c) * k + j as usize] * x[s as usize][c];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn conv_zero_input() -> Result<(), String> {
    let cfg = EcEncoderConfig {
        embed_dim: 3,
        conv_dim: 2,
        ..EcEncoderConfig::default()
    };
    let params = EcEncoderParams::init(&cfg, &mut rng(1));
    let x = params
        .multi_kernel_conv(&tokens(3, &vec![vec![0.0; 3]; 4]))
        .map_err(|e| e.to_string())?;
    ensure(x.values.iter().all(|v| *v == 0.0), "zero input produced a nonzero feature")
}

pub fn conv_identity() -> Result<(), String> {
    let mut bank = ConvBank::zeros(2, 1, 1);
    bank.weight = tensor(&[1, 2, 1], vec![1.0, 0.0]);
    let out = bank.forward(&[0.37, -4.0], 1);
    close("identity conv", out[0], 0.37, 0.0)
}

pub fn conv_sliding_window() -> Result<(), String> {
    let x = vec![vec![1.0, -2.0], vec![0.5, 3.0], vec![-1.5, 0.25]];
    let w = vec![
        0.1, -0.2, 0.3, // out 0, in 0, taps 0..3
        0.4, 0.5, -0.6, // out 0, in 1
        -0.7, 0.8, 0.9, // out 1, in 0
        1.0, -1.1, 1.2, // out 1, in 1
    ];
    let b = vec![0.05, -0.05];
    let mut bank = ConvBank::zeros(2, 2, 3);
    bank.weight = tensor(&[2, 2, 3], w.clone());
    bank.bias = tensor(&[2], b.clone());
    let got = bank.forward(&x.concat(), 3);
    // t = 0 by hand: taps 1, 2 see x[0], x[1]
    let t0_o0 = 0.05 + (-0.2 * 1.0 + 0.3 * 0.5) + (0.5 * -2.0 + -0.6 * 3.0);
    close("hand t0 o0", got[0], t0_o0, TOL)?;
    close_all("conv", &got, &conv_oracle(&x, &w, &b, 2, 3).concat(), TOL)
}

fn highway_bank(gate_bias: f64, r: &mut ChaCha8Rng, channels: usize, k: usize) -> HighwayLayer {
    let mut gate = ConvBank::zeros(channels, channels, k);
    gate.weight = tensor(&[channels, channels, k], random_vec(r, channels * channels * k));
    gate.bias = tensor(&[channels], vec![gate_bias; channels]);
    let mut transform = ConvBank::zeros(channels, channels, k);
    transform.weight = tensor(&[channels, channels, k], random_vec(r, channels * channels * k));
    transform.bias = tensor(&[channels], random_vec(r, channels));
    HighwayLayer { gate, transform }
}

fn feature_map(rows: &[Vec<f64>]) -> FeatureMap {
    FeatureMap {
        steps: rows.len(),
        channels: rows[0].len(),
        values: rows.concat(),
    }
}

pub fn highway_closed_gate() -> Result<(), String> {
    let mut r = rng(2);
    let layer = highway_bank(-60.0, &mut r, 2, 3);
    let x = vec![random_vec(&mut r, 2), random_vec(&mut r, 2), random_vec(&mut r, 2)];
    let v = highway_layer(&layer, &feature_map(&x)).map_err(|e| e.to_string())?;
    close_all("closed gate", &v.values, &x.concat(), TOL)
}

pub fn highway_open_gate() -> Result<(), String> {
    let mut r = rng(3);
    let layer = highway_bank(60.0, &mut r, 2, 3);
    let x = vec![random_vec(&mut r, 2), random_vec(&mut r, 2), random_vec(&mut r, 2)];
    let v = highway_layer(&layer, &feature_map(&x)).map_err(|e| e.to_string())?;
    let t = conv_oracle(
        &x,
        layer.transform.weight.data(),
        layer.transform.bias.data(),
        2,
        3,
    );
    close_all("open gate", &v.values, &t.concat(), TOL)
}

pub fn highway_scalar_oracle() -> Result<(), String> {
    let mut r = rng(4);
    let layer = highway_bank(0.2, &mut r, 2, 3);
    let x = vec![random_vec(&mut r, 2), random_vec(&mut r, 2), random_vec(&mut r, 2)];
    let v = highway_layer(&layer, &feature_map(&x)).map_err(|e| e.to_string())?;
    let g = conv_oracle(&x, layer.gate.weight.data(), layer.gate.bias.data(), 2, 3);
    let t = conv_oracle(&x, layer.transform.weight.data(), layer.transform.bias.data(), 2, 3);
    for step in 0..3 {
        for c in 0..2 {
            let u = sigmoid(g[step][c]);
            let want = u * t[step][c] + (1.0 - u) * x[step][c];
            close(&format!("v[{step}][{c}]"), v.at(step, c), want, TOL)?;
        }
    }
    Ok(())
}

fn small_encoder(kernels: Vec<usize>, highway_kernel: usize, seed: u64) -> EcEncoderParams {
    let cfg = EcEncoderConfig {
        embed_dim: 3,
        conv_dim: 2,
        kernel_sizes: kernels,
        highway_layers: 2,
        highway_kernel,
    };
    EcEncoderParams::init(&cfg, &mut rng(seed))
}

pub fn pool_one_token() -> Result<(), String> {
    let params = small_encoder(vec![1, 3, 5, 7], 3, 5);
    let t = tokens(3, &[vec![0.3, -0.8, 0.5]]);
    let e = params.forward(&t).map_err(|e| e.to_string())?.embedding;
    let mut v = params.multi_kernel_conv(&t).map_err(|e| e.to_string())?;
    for layer in &params.highway {
        v = highway_layer(layer, &v).map_err(|e| e.to_string())?;
    }
    close_all("one-token pooling", &e, &v.values, 0.0)
}

pub fn pool_duplicated_sentence() -> Result<(), String> {
    let params = small_encoder(vec![1], 1, 6);
    let mut r = rng(7);
    let rows: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut r, 3)).collect();
    let doubled: Vec<Vec<f64>> = rows.iter().chain(&rows).cloned().collect();
    let a = params.forward(&tokens(3, &rows)).map_err(|e| e.to_string())?.embedding;
    let b = params.forward(&tokens(3, &doubled)).map_err(|e| e.to_string())?.embedding;
    close_all("s vs s+s", &a, &b, 0.0)
}

pub fn pool_purity() -> Result<(), String> {
    let params = small_encoder(vec![1, 3, 5, 7], 3, 8);
    let mut r = rng(9);
    let rows: Vec<Vec<f64>> = (0..5).map(|_| random_vec(&mut r, 3)).collect();
    let a = params.forward(&tokens(3, &rows)).map_err(|e| e.to_string())?.embedding;
    let b = params.forward(&tokens(3, &rows)).map_err(|e| e.to_string())?.embedding;
    close_all("repeat", &a, &b, 0.0)
}

fn hash_encoder(window: usize) -> EncoderBackend {
    EncoderBackend::FeatureHash(
        FeatureHashEncoder::new(FeatureHashConfig {
            embed_dim: 8,
            window,
            ..FeatureHashConfig::default()
        })
        .expect("valid config"),
    )
}

pub fn concept_max_pool() -> Result<(), String> {
    let enc = hash_encoder(3);
    let text = "Contact dermatitis and other eczema";
    let m = enc.encode_text(text).map_err(|e| e.to_string())?;
    let got = enc.concept_embedding(text).map_err(|e| e.to_string())?;
    let mut want = vec![f64::NEG_INFINITY; m.dim()];
    for t in 0..m.num_tokens() {
        for (c, w) in want.iter_mut().enumerate() {
            if m.row(t)[c] > *w {
                *w = m.row(t)[c];
            }
        }
    }
    close_all("concept max", &got, &want, 0.0)
}

pub fn concept_window_one_permutation() -> Result<(), String> {
    let enc = hash_encoder(1);
    let a = enc.concept_embedding("chronic obstructive pulmonary disease").map_err(|e| e.to_string())?;
    let b = enc.concept_embedding("disease pulmonary chronic obstructive").map_err(|e| e.to_string())?;
    close_all("permuted description", &a, &b, 0.0)
}

fn tiny_taxonomies() -> TaxonomySet {
    let load = |ct: CodeType, body: &str| {
        let csv = format!("node_id,level,parent_id,code_type,description\n{body}");
        read_taxonomy(csv.as_bytes(), ct).expect("fixture taxonomy")
    };
    TaxonomySet {
        diagnosis: load(
            CodeType::Diagnosis,
            "D,1,,diagnosis,skin disease\n\
             D1,2,D,diagnosis,inflammatory skin disease\n\
             D11,3,D1,diagnosis,dermatitis eczema\n\
             D111,4,D11,diagnosis,contact dermatitis\n\
             D112,4,D11,diagnosis,atopic dermatitis flare\n",
        ),
        medication: load(
            CodeType::Medication,
            "M,1,,medication,steroid\nM1,2,M,medication,topical steroid\nM11,3,M1,medication,potent topical steroid\nM111,4,M11,medication,clobetasol cream\n",
        ),
        procedure: load(
            CodeType::Procedure,
            "P,1,,procedure,skin procedure\nP1,2,P,procedure,skin biopsy\nP11,3,P1,procedure,punch biopsy\nP111,4,P11,procedure,punch biopsy of arm\n",
        ),
    }
}

fn visit(diagnoses: &[&str]) -> Visit {
    Visit {
        t: 0,
        diagnoses: diagnoses.iter().map(|s| s.to_string()).collect(),
        medications: vec![],
        procedures: vec![],
    }
}

pub fn levels_single_code() -> Result<(), String> {
    let tax = tiny_taxonomies();
    let enc = hash_encoder(3);
    let concepts = ConceptTable::build(&tax, &enc).map_err(|e| e.to_string())?;
    let lv = visit_level_embeddings(&tax, &concepts, &visit(&["D111"]), MissingCodePolicy::Error)
        .map_err(|e| e.to_string())?;
    for (level, desc) in [
        (1, "skin disease"),
        (2, "inflammatory skin disease"),
        (3, "dermatitis eczema"),
        (4, "contact dermatitis"),
    ] {
        let want = enc.concept_embedding(desc).map_err(|e| e.to_string())?;
        let got = lv.slots[slot_index(CodeType::Diagnosis, level)]
            .as_ref()
            .ok_or("diagnosis level missing")?;
        close_all(&format!("level {level}"), got, &want, 0.0)?;
    }
    for ct in [CodeType::Medication, CodeType::Procedure] {
        for level in 1..=4 {
            ensure(lv.slots[slot_index(ct, level)].is_none(), "absent type produced a vector")?;
        }
    }
    Ok(())
}

pub fn levels_two_codes() -> Result<(), String> {
    let tax = tiny_taxonomies();
    let enc = hash_encoder(3);
    let concepts = ConceptTable::build(&tax, &enc).map_err(|e| e.to_string())?;
    let lv = visit_level_embeddings(&tax, &concepts, &visit(&["D111", "D112"]), MissingCodePolicy::Error)
        .map_err(|e| e.to_string())?;
    let root = enc.concept_embedding("skin disease").map_err(|e| e.to_string())?;
    close_all(
        "shared root",
        lv.slots[slot_index(CodeType::Diagnosis, 1)].as_ref().ok_or("missing")?,
        &root,
        0.0,
    )?;
    let a = enc.concept_embedding("contact dermatitis").map_err(|e| e.to_string())?;
    let b = enc.concept_embedding("atopic dermatitis flare").map_err(|e| e.to_string())?;
    ensure(a != b, "fixture leaves must differ")?;
    let mut want = Vec::new();
    for i in 0..a.len() {
        want.push(if a[i] >= b[i] { a[i] } else { b[i] });
    }
    close_all(
        "leaf max",
        lv.slots[slot_index(CodeType::Diagnosis, 4)].as_ref().ok_or("missing")?,
        &want,
        0.0,
    )
}

fn gate_params(r: &mut ChaCha8Rng, embed: usize, mem: usize) -> MemoryParams {
    let lin = |r: &mut ChaCha8Rng| Linear {
        weight: tensor(&[mem, embed], random_vec(r, mem * embed)),
        bias: tensor(&[mem], random_vec(r, mem)),
    };
    MemoryParams {
        erase: lin(r),
        add: lin(r),
    }
}

pub fn gates_zero() -> Result<(), String> {
    let (erase, add) = gates(&MemoryParams::zeros(3, 4), &[0.0; 3]).map_err(|e| e.to_string())?;
    close_all("erase", &erase, &[0.5; 4], 0.0)?;
    close_all("add", &add, &[0.0; 4], 0.0)
}

pub fn gates_saturation() -> Result<(), String> {
    let mut p = MemoryParams::zeros(1, 1);
    p.erase.bias = tensor(&[1], vec![20.0]);
    let (erase, _) = gates(&p, &[0.0]).map_err(|e| e.to_string())?;
    ensure(erase[0] >= 1.0 - 1e-6 && erase[0] <= 1.0, "erase did not saturate")
}

pub fn gates_scalar_oracle() -> Result<(), String> {
    let mut r = rng(10);
    let p = gate_params(&mut r, 3, 2);
    let g = random_vec(&mut r, 3);
    let (erase, add) = gates(&p, &g).map_err(|e| e.to_string())?;
    for o in 0..2 {
        let mut ze = p.erase.bias.data()[o];
        let mut za = p.add.bias.data()[o];
        for i in 0..3 {
            ze += p.erase.weight.data()[o * 3 + i] * g[i];
            za += p.add.weight.data()[o * 3 + i] * g[i];
        }
        close("erase", erase[o], sigmoid(ze), TOL)?;
        close("add", add[o], za.tanh(), TOL)?;
    }
    Ok(())
}

pub fn update_examples() -> Result<(), String> {
    let m = apply_update(&[0.0, 0.0], &[0.9, 0.1], &[0.25, -0.5]).map_err(|e| e.to_string())?;
    close_all("zero memory", &m, &[0.25, -0.5], 0.0)?;
    let m = apply_update(&[3.0, -7.0], &[1.0, 1.0], &[0.0, 0.0]).map_err(|e| e.to_string())?;
    close_all("full erase", &m, &[0.0, 0.0], 0.0)?;
    let m = apply_update(&[2.0, -1.0], &[0.5, 0.25], &[1.0, 1.0]).map_err(|e| e.to_string())?;
    close_all("hand example", &m, &[2.0, 0.25], TOL)
}

pub fn memory_one_visit() -> Result<(), String> {
    let tax = tiny_taxonomies();
    let enc = hash_encoder(3);
    let concepts = ConceptTable::build(&tax, &enc).map_err(|e| e.to_string())?;
    let params = gate_params(&mut rng(11), enc.embed_dim(), 3);
    let patient = Patient {
        patient_id: "p".into(),
        visits: vec![visit(&["D111"])],
        demographics: Demographics {
            age: 50.0,
            gender: Gender::Female,
        },
    };
    let state = encode_patient(&tax, &concepts, &params, &patient, MissingCodePolicy::Error)
        .map_err(|e| e.to_string())?;
    let lv = visit_level_embeddings(&tax, &concepts, &patient.visits[0], MissingCodePolicy::Error)
        .map_err(|e| e.to_string())?;
    for level in 1..=4 {
        let g = lv.slots[slot_index(CodeType::Diagnosis, level)].as_ref().ok_or("missing")?;
        let (_, add) = gates(&params, g).map_err(|e| e.to_string())?;
        close_all("slot from zero", state.slot(CodeType::Diagnosis, level), &add, TOL)?;
        close_all("no medications", state.slot(CodeType::Medication, level), &[0.0; 3], 0.0)?;
    }
    Ok(())
}

pub fn memory_two_visit_unroll() -> Result<(), String> {
    let mut r = rng(12);
    let params = gate_params(&mut r, 3, 2);
    let slot = slot_index(CodeType::Procedure, 2);
    let mk = |v: Vec<f64>| VisitLevels {
        slots: (0..NUM_SLOTS).map(|i| (i == slot).then(|| v.clone())).collect(),
    };
    let g1 = random_vec(&mut r, 3);
    let g2 = random_vec(&mut r, 3);
    let state = encode_levels(&params, &[mk(g1.clone()), mk(g2.clone())])
        .map_err(|e| e.to_string())?
        .state;
    let mut m = vec![0.0, 0.0];
    for g in [&g1, &g2] {
        let (e, a) = gates(&params, g).map_err(|e| e.to_string())?;
        m = (0..2).map(|i| m[i] * (1.0 - e[i]) + a[i]).collect();
    }
    close_all("unrolled", &state.slots[slot], &m, TOL)?;
    for (i, s) in state.slots.iter().enumerate() {
        if i != slot {
            ensure(s.iter().all(|v| *v == 0.0), "untouched slot changed")?;
        }
    }
    Ok(())
}

fn random_matcher(seed: u64, ec_dim: usize, mem_dim: usize) -> MatcherParams {
    let mut p = MatcherParams::init(ec_dim, mem_dim, MatcherDepths::default(), &mut rng(seed));
    // nonzero biases so the oracle exercises them
    let mut r = rng(seed + 1000);
    for mlp in [&mut p.query, &mut p.demo, &mut p.fuse] {
        for l in &mut mlp.layers {
            let n = l.bias.len();
            l.bias = tensor(&[n], random_vec(&mut r, n));
        }
    }
    let n = p.head.bias.len();
    p.head.bias = tensor(&[n], random_vec(&mut r, n));
    p
}

fn mlp_oracle(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, l) in mlp.layers.iter().enumerate() {
        h = affine(l.weight.data(), l.bias.data(), &h);
        if i + 1 < mlp.layers.len() {
            h = h.iter().map(|v| v.tanh()).collect();
        }
    }
    h
}

pub fn attention_zero_slots() -> Result<(), String> {
    let p = random_matcher(13, 4, 3);
    let (w, m) = attend(&p, &MemoryState::zeros(3), &[0.1, 0.2, 0.3, 0.4]).map_err(|e| e.to_string())?;
    close_all("weights", &w, &[1.0 / 12.0; 12], TOL)?;
    close_all("retrieved", &m, &[0.0; 3], 0.0)
}

pub fn attention_saturation() -> Result<(), String> {
    let p = random_matcher(14, 4, 3);
    let e = [0.5, -0.1, 0.7, 0.2];
    let q = mlp_oracle(&p.query, &e);
    let qq: f64 = q.iter().map(|v| v * v).sum();
    let mut mem = MemoryState::zeros(3);
    mem.slots[5] = q.iter().map(|v| v * 20.0 / qq).collect();
    let (w, m) = attend(&p, &mem, &e).map_err(|e| e.to_string())?;
    ensure(w[5] >= 1.0 - 1e-6, "saturated slot weight below 1 - 1e-6")?;
    close_all("retrieved", &m, &mem.slots[5], 1e-6 * 20.0 / qq.sqrt() + TOL)
}

pub fn attention_oracle() -> Result<(), String> {
    let mut r = rng(15);
    let p = random_matcher(16, 4, 3);
    let mut mem = MemoryState::zeros(3);
    for s in &mut mem.slots {
        *s = random_vec(&mut r, 3);
    }
    let e = random_vec(&mut r, 4);
    let (w, m) = attend(&p, &mem, &e).map_err(|e| e.to_string())?;
    let q = mlp_oracle(&p.query, &e);
    let logits: Vec<f64> = mem
        .slots
        .iter()
        .map(|s| s.iter().zip(&q).map(|(a, b)| a * b).sum())
        .collect();
    let want_w = softmax(&logits);
    close_all("weights", &w, &want_w, TOL)?;
    let mut want_m = vec![0.0; 3];
    for (s, a) in mem.slots.iter().zip(&want_w) {
        for i in 0..3 {
            want_m[i] += a * s[i];
        }
    }
    close_all("retrieved", &m, &want_m, TOL)
}

pub fn demographics_oracle() -> Result<(), String> {
    let mut p = random_matcher(17, 4, 3);
    let male60 = Demographics {
        age: 60.0,
        gender: Gender::Male,
    };
    let got = p.embed_demographics(&male60);
    let want = mlp_oracle(&p.demo, &[0.5, 1.0, 0.0, 0.0]);
    close_all("age 60 male", &got, &want, TOL)?;
    let twin = p.embed_demographics(&male60.clone());
    close_all("identical demographics", &twin, &got, 0.0)?;
    for l in &mut p.demo.layers {
        l.weight.fill(0.0);
    }
    let last = p.demo.layers.last().expect("layer").bias.data().to_vec();
    if p.demo.layers.len() == 1 {
        close_all("zero weights give bias", &p.embed_demographics(&male60), &last, 0.0)?;
    }
    Ok(())
}

pub fn predict_zero_head() -> Result<(), String> {
    let mut p = random_matcher(18, 4, 3);
    p.head.weight.fill(0.0);
    p.head.bias.fill(0.0);
    let mut mem = MemoryState::zeros(3);
    mem.slots[0] = vec![1.0, 2.0, 3.0];
    let demo = Demographics {
        age: 30.0,
        gender: Gender::Female,
    };
    let pred = p.predict(&mem, &demo, &[0.3, 0.1, -0.2, 0.9]).map_err(|e| e.to_string())?;
    close_all("probs", &pred.probs, &[1.0 / 3.0; 3], TOL)
}

pub fn predict_end_to_end() -> Result<(), String> {
    let mut r = rng(19);
    let p = random_matcher(20, 4, 2);
    let mut mem = MemoryState::zeros(2);
    for s in &mut mem.slots {
        *s = random_vec(&mut r, 2);
    }
    let e = random_vec(&mut r, 4);
    let demo = Demographics {
        age: 42.0,
        gender: Gender::Other,
    };
    let pred = p.predict(&mem, &demo, &e).map_err(|e| e.to_string())?;

    let q = mlp_oracle(&p.query, &e);
    let logits: Vec<f64> = mem.slots.iter().map(|s| s[0] * q[0] + s[1] * q[1]).collect();
    let a = softmax(&logits);
    let mut m = [0.0; 2];
    for (s, w) in mem.slots.iter().zip(&a) {
        m[0] += w * s[0];
        m[1] += w * s[1];
    }
    let m_d = mlp_oracle(&p.demo, &[42.0 / 120.0, 0.0, 0.0, 1.0]);
    let fuse_in: Vec<f64> = m_d.iter().chain(&e).copied().collect();
    let fused = mlp_oracle(&p.fuse, &fuse_in);
    let z: Vec<f64> = m.iter().chain(&fused).copied().collect();
    let probs = softmax(&affine(p.head.weight.data(), p.head.bias.data(), &z));
    close_all("probs", &pred.probs, &probs, TOL)?;
    close_all("attention", &pred.attention, &a, TOL)?;
    close_all("retrieved", &pred.retrieved, &m, TOL)
}

pub fn classification_uniform() -> Result<(), String> {
    let l = classification_loss(&[1.0 / 3.0; 3], &[1.0, 0.0, 0.0]).map_err(|e| e.to_string())?;
    let want = -((1.0f64 / 3.0).ln() + 2.0 * (2.0f64 / 3.0).ln());
    close("uniform", l, want, TOL)?;
    close("rounded value", l, 1.9095, 5e-5)
}

pub fn classification_perfect_and_symmetric() -> Result<(), String> {
    let l = classification_loss(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).map_err(|e| e.to_string())?;
    // three clamped terms of -ln(1 - 1e-7)
    close("perfect", l, -3.0 * (1.0f64 - 1e-7).ln(), TOL)?;
    ensure(l < 1e-6, "perfect prediction loss not near zero")?;
    let probs = [0.2, 0.5, 0.3];
    let y = [0.0, 1.0, 0.0];
    let a = classification_loss(&probs, &y).map_err(|e| e.to_string())?;
    let b = classification_loss(&[0.3, 0.2, 0.5], &[0.0, 0.0, 1.0]).map_err(|e| e.to_string())?;
    close("permutation", a, b, TOL)
}

pub fn distance_examples() -> Result<(), String> {
    use MatchLabel::*;
    use Polarity::*;
    let q = [0.6, -0.8, 0.0];
    let par = [1.2, -1.6, 0.0];
    close("inclusion parallel", distance_loss(&q, &par, Inclusion, Match, 0.3), 0.0, TOL)?;
    let orth = [0.8, 0.6, 0.0];
    close("exclusion orthogonal", distance_loss(&q, &orth, Exclusion, Mismatch, 0.3), 0.0, TOL)?;
    let a = [1.0, 0.0];
    let b = [0.9, (1.0f64 - 0.81).sqrt()];
    close("exclusion cos 0.9", distance_loss(&a, &b, Exclusion, Mismatch, 0.3), 0.6, TOL)?;
    close("inclusion cos 0.9", distance_loss(&a, &b, Inclusion, Match, 0.3), 0.1, TOL)?;
    close("inactive pair", distance_loss(&a, &b, Inclusion, Unknown, 0.3), 0.0, 0.0)?;
    close("zero vector guard", distance_loss(&a, &[0.0, 0.0], Inclusion, Match, 0.3), 0.0, 0.0)
}

pub fn total_examples() -> Result<(), String> {
    let pl = |c, d| PairLoss {
        classification: c,
        distance: d,
    };
    let inactive = [pl(1.5, 0.0), pl(0.25, 0.0)];
    close("inactive mean", total_loss(&inactive).map_err(|e| e.to_string())?, 0.875, TOL)?;
    close("single", total_loss(&[pl(0.7, 0.2)]).map_err(|e| e.to_string())?, 0.9, TOL)?;
    let batch = [pl(1.2, 0.3), pl(0.4, 0.0), pl(2.0, 0.6)];
    let want = ((1.2 + 0.3) + 0.4 + (2.0 + 0.6)) / 3.0;
    close("three pairs", total_loss(&batch).map_err(|e| e.to_string())?, want, TOL)?;
    ensure(total_loss(&[]).is_err(), "empty batch accepted")
}
