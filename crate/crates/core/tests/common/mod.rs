//! Shared fixtures for the integration tests: the finite-difference suite
//! over every block, and small deterministic inputs.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rectrack::extractor::{config_for_variant, Extractor, ExtractorConfig, Mode};
use rectrack::model::{Model, ModelConfig};
use rectrack::numeric::{
    grad_check, GradCheckConfig, GradCheckReport, Graph, ParamStore, Tensor, Var,
};
use rectrack::recurrent::{
    DenseOutput, Lstm, LstmState, RecurrentModule, RecurrentModuleConfig, RecurrentState, Scale,
    Variant,
};
use rectrack::Result;

/// Relative-error bound every block must meet.
pub const GRAD_TOL: f64 = 1e-4;

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Overlap by counting unit pixels on the integer grid.
pub fn pixel_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let inside =
        |r: [i64; 4], x: i64, y: i64| x >= r[0] && x < r[0] + r[2] && y >= r[1] && y < r[1] + r[3];
    let (mut inter, mut union) = (0u64, 0u64);
    let x_hi = (a[0] + a[2]).max(b[0] + b[2]);
    let y_hi = (a[1] + a[3]).max(b[1] + b[3]);
    for y in a[1].min(b[1])..y_hi {
        for x in a[0].min(b[0])..x_hi {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    inter as f64 / union as f64
}

/// `Σ y ⊙ r` for a fixed random `r`: smooth, and sensitive to every output.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let r = g.constant(uniform(
        &shape,
        &mut ChaCha8Rng::seed_from_u64(seed),
        -1.0,
        1.0,
    ));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn add_all(g: &mut Graph, terms: Vec<Var>) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

fn check(
    store: &mut ParamStore,
    f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
    sample: Option<usize>,
) -> GradCheckReport {
    let cfg = GradCheckConfig {
        rel_tol: GRAD_TOL,
        max_per_param: sample,
        ..GradCheckConfig::default()
    };
    grad_check(store, f, &cfg).expect("gradient check runs")
}

pub fn lstm_cell() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let cell = Lstm::new(&mut store, "cell", 5, 4, &mut rng).unwrap();
    let xs: Vec<Tensor> = (0..3)
        .map(|_| uniform(&[3, 5], &mut rng, -1.0, 1.0))
        .collect();
    let h0 = uniform(&[3, 4], &mut rng, -0.5, 0.5);
    let c0 = uniform(&[3, 4], &mut rng, -0.5, 0.5);
    check(
        &mut store,
        |g, s| {
            let mut st = LstmState {
                h: g.constant(h0.clone()),
                c: g.constant(c0.clone()),
            };
            let mut terms = Vec::new();
            for (t, x) in xs.iter().enumerate() {
                let x = g.constant(x.clone());
                st = cell.step(g, s, x, st)?;
                terms.push(project(g, st.h, t as u64)?);
                terms.push(project(g, st.c, 100 + t as u64)?);
            }
            add_all(g, terms)
        },
        None,
    )
}

/// A recurrent module with small widths, unrolled three steps from a
/// random state.
pub fn module(
    variant: Variant,
    feature_width: usize,
    hidden: usize,
    dense_output: DenseOutput,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let cfg = RecurrentModuleConfig {
        variant,
        feature_width,
        hidden,
        dense_output,
    };
    let m = RecurrentModule::new(&mut store, cfg, &mut rng).unwrap();
    let xs: Vec<Tensor> = (0..3)
        .map(|_| uniform(&[2, feature_width], &mut rng, -1.0, 1.0))
        .collect();
    let mut state = m.zero_state(2);
    for (h, c) in &mut state.layers {
        *h = uniform(h.shape(), &mut rng, -0.5, 0.5);
        *c = uniform(c.shape(), &mut rng, -0.5, 0.5);
    }
    check(
        &mut store,
        |g, s| {
            let mut st = state.to_graph(g);
            let mut terms = Vec::new();
            for (t, x) in xs.iter().enumerate() {
                let x = g.constant(x.clone());
                let (y, next) = m.step(g, s, x, &st)?;
                st = next;
                terms.push(project(g, y, t as u64)?);
            }
            add_all(g, terms)
        },
        None,
    )
}

/// One residual block on its own.
pub fn residual_block() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let cfg = RecurrentModuleConfig {
        variant: Variant::Residual,
        feature_width: 5,
        hidden: 5,
        dense_output: DenseOutput::Concat,
    };
    let m = RecurrentModule::new(&mut store, cfg, &mut rng).unwrap();
    let x = uniform(&[3, 5], &mut rng, -1.0, 1.0);
    let state = RecurrentState::zeros(&cfg, 3);
    // Only block 2's parameters receive gradient; the rest must read zero.
    check(
        &mut store,
        |g, s| {
            let st = state.to_graph(g);
            let x = g.constant(x.clone());
            let (y, _) = m.residual_block_step(g, s, 1, x, &st)?;
            project(g, y, 7)
        },
        None,
    )
}

fn small_extractor(batchnorm: bool) -> ExtractorConfig {
    ExtractorConfig {
        input_size: 16,
        pool_size: 2,
        fc_width: 6,
        batchnorm,
        ..config_for_variant(Variant::Plain, Scale::Desk)
    }
}

pub fn extractor(batchnorm: bool, mode: Mode) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let cfg = small_extractor(batchnorm);
    let ext = Extractor::new(&mut store, cfg, &mut rng).unwrap();
    let shape = ext.crop_shape(4);
    let prev = uniform(&shape, &mut rng, 0.0, 1.0);
    let cur = uniform(&shape, &mut rng, 0.0, 1.0);
    if batchnorm {
        // Non-trivial running statistics for the inference path.
        for name in ["ext.bn.running_mean", "ext.bn.running_var"] {
            let id = store.id(name).unwrap();
            let lo = if name.ends_with("var") { 0.5 } else { -0.2 };
            *store.value_mut(id) = uniform(&[6], &mut rng, lo, lo + 0.4);
        }
    }
    check(
        &mut store,
        |g, s| {
            let out = ext.extract(g, s, &prev, &cur, mode)?;
            project(g, out.features, 9)
        },
        None,
    )
}

/// A full desk-scale model, batch 2, unrolled three steps. Large tensors are
/// sampled.
pub fn full_model(variant: Variant) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut model = Model::new(ModelConfig::for_variant(variant, Scale::Desk), &mut rng).unwrap();
    let shape = model.net.extractor.crop_shape(2);
    let prev: Vec<Tensor> = (0..3)
        .map(|_| uniform(&shape, &mut rng, 0.0, 1.0))
        .collect();
    let cur: Vec<Tensor> = (0..3)
        .map(|_| uniform(&shape, &mut rng, 0.0, 1.0))
        .collect();
    let state = model.zero_state(2);
    let net = model.net.clone();
    check(
        &mut model.params,
        |g, s| {
            let u = net.unroll(g, s, &prev, &cur, &state, Mode::Train)?;
            let mut terms = Vec::new();
            for (t, &y) in u.outputs.iter().enumerate() {
                terms.push(project(g, y, t as u64)?);
            }
            add_all(g, terms)
        },
        Some(12),
    )
}

/// Every block of the gradient suite, by name.
pub fn gradient_suite() -> Vec<(String, GradCheckReport)> {
    let mut out = vec![
        ("lstm cell".to_string(), lstm_cell()),
        (
            "plain stack".to_string(),
            module(Variant::Plain, 5, 4, DenseOutput::Concat),
        ),
        ("residual block".to_string(), residual_block()),
        (
            "residual stack".to_string(),
            module(Variant::Residual, 5, 5, DenseOutput::Concat),
        ),
        (
            "dense block (concat)".to_string(),
            module(Variant::Dense, 5, 3, DenseOutput::Concat),
        ),
        (
            "dense block (last)".to_string(),
            module(Variant::Dense, 5, 3, DenseOutput::Last),
        ),
        ("extractor".to_string(), extractor(false, Mode::Train)),
        (
            "extractor + batchnorm (train)".to_string(),
            extractor(true, Mode::Train),
        ),
        (
            "extractor + batchnorm (infer)".to_string(),
            extractor(true, Mode::Infer),
        ),
    ];
    for v in Variant::ALL {
        out.push((format!("desk {v} model, 3 unrolls"), full_model(v)));
    }
    out
}
