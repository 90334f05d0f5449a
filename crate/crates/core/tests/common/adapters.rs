//! Adapter-level properties: merged equivalence, zero-init identity and
//! detach semantics.

use std::collections::BTreeMap;

use qsnet::graph::Graph;
use qsnet::lora::{bit_groups, lora_init, AdapterVars, LoraMode, QuantVars, SwitchKey};
use qsnet::quantize::{calibrate, dequant, BitWidth, LayerBits, TensorKind};
use qsnet::supernet::{sample_uniform, ElasticViT, LoraSettings, SearchSpace, SubnetConfig, Trainable};
use qsnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MODES: [LoraMode; 3] = [LoraMode::Regular, LoraMode::Selective, LoraMode::Multiplex];

fn any_bits(rng: &mut ChaCha8Rng) -> BitWidth {
    BitWidth::ALL[rng.random_range(0..BitWidth::ALL.len())]
}

/// One random (W0, A, B, s, bit) draw; returns the max-abs deviation between
/// `x·merge(...)` and the quantization-aware forward.
pub fn merged_case(mode: LoraMode, seed: u64) -> std::result::Result<f32, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, d, n) = (rng.random_range(2..12), rng.random_range(2..12), rng.random_range(1..6));
    let rank = rng.random_range(1..5);
    let scaling = rng.random_range(0.5..4.0f32);
    let groups = bit_groups(rng.random_range(3..6)).unwrap();
    let switch = if rng.random_bool(0.5) {
        SwitchKey::Weight
    } else {
        SwitchKey::Activation
    };
    let mut bank = lora_init(d, k, rank, scaling, mode, &groups, seed)
        .map_err(|e| e.to_string())?
        .with_detach(rng.random_bool(0.5))
        .with_switch(switch);
    for m in &mut bank.modules {
        m.a = Tensor::randn(&[rank, k], 0.3, &mut rng);
        m.b = Tensor::randn(&[d, rank], 0.3, &mut rng);
    }
    let w0 = Tensor::randn(&[k, d], 0.5, &mut rng);
    let x = Tensor::randn(&[n, k], 1.0, &mut rng);
    let bits = LayerBits::new(any_bits(&mut rng), any_bits(&mut rng));
    let q = match bits.weight.is_full() {
        true => None,
        false => Some(calibrate(&w0, bits.weight, TensorKind::Weight).map_err(|e| e.to_string())?),
    };
    let merged = bank.merge(&w0, bits, q.as_ref()).map_err(|e| e.to_string())?;
    if let Some(q) = &q {
        let r = q.range().unwrap();
        for &v in merged.data() {
            let k = (v as f64 / q.delta as f64 + q.zero_point as f64).round();
            if k < r.n as f64 || k > r.p as f64 || dequant(k, q.delta as f64, q.zero_point as f64) != v {
                return Err(format!("merged weight {v} is off the {}-bit grid", bits.weight));
            }
        }
    }

    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let wv = g.param(w0.clone());
    let qv = q.as_ref().map(|q| QuantVars {
        delta: g.param(Tensor::scalar(q.delta)),
        zero: g.constant(Tensor::scalar(q.zero_point)),
        range: q.range().unwrap(),
    });
    let out = bank
        .forward_with(&mut g, xv, wv, bits, qv, |g, active, m| {
            let bind = |g: &mut Graph, t: &Tensor| {
                if active.detached {
                    g.constant(t.clone())
                } else {
                    g.param(t.clone())
                }
            };
            Ok(AdapterVars {
                a: bind(g, &m.a),
                b: bind(g, &m.b),
                scaling: m.scaling,
            })
        })
        .map_err(|e| e.to_string())?;
    let expected = x.matmul(&merged).map_err(|e| e.to_string())?;
    let dev = g
        .value(out)
        .data()
        .iter()
        .zip(expected.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    if dev >= 1e-5 {
        return Err(format!("{mode:?}: forward deviates from x·merge by {dev}"));
    }
    Ok(dev)
}

pub fn merged_suite(cases: u64) -> std::result::Result<String, String> {
    let mut worst = 0.0f32;
    for mode in MODES {
        for s in 0..cases {
            worst = worst.max(merged_case(mode, 7000 + s).map_err(|e| format!("case {s}: {e}"))?);
        }
    }
    Ok(format!("{cases} draws × 3 modes, max |Δ| {worst:.1e}"))
}

pub fn images(batch: usize, res: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = batch * res * res;
    Tensor::new(vec![batch, res, res, 1], (0..n).map(|_| rng.random_range(0.0..1.0f32)).collect()).unwrap()
}

pub fn settings(mode: LoraMode, detach: bool) -> LoraSettings {
    LoraSettings {
        mode,
        detach,
        ..LoraSettings::default()
    }
}

/// Fresh adapters on a calibrated, frozen model leave every logit unchanged.
pub fn zero_init_identity(batches: u64) -> std::result::Result<String, String> {
    let space = SearchSpace::default();
    let mut base = ElasticViT::new(space.clone(), 3).map_err(|e| e.to_string())?;
    base.frozen = true;
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for i in 0..batches {
        let cfg = sample_uniform(&space, &mut rng);
        let x = images(2, cfg.resolution, &mut rng);
        let f = base.forward(&cfg, &x, Trainable::NONE).map_err(|e| e.to_string())?;
        base.apply_calibrations(&f.calibrations);
        let reference = base.forward(&cfg, &x, Trainable::NONE).map_err(|e| e.to_string())?;
        let mode = MODES[i as usize % MODES.len()];
        let mut adapted = base.clone();
        adapted
            .attach_lora(&settings(mode, false), 100 + i)
            .map_err(|e| e.to_string())?;
        let out = adapted
            .forward(&cfg, &x, Trainable { base: false, lora: true, quant: true })
            .map_err(|e| e.to_string())?;
        let (a, b) = (reference.graph.value(reference.logits), out.graph.value(out.logits));
        if a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(format!("batch {i} ({mode:?}, {cfg}): logits differ"));
        }
    }
    Ok(format!("{batches} batches bitwise equal"))
}

/// A config whose every adapter layer runs at a non-bypass weight width.
pub fn non_base_config(space: &SearchSpace, rng: &mut ChaCha8Rng) -> SubnetConfig {
    let mut cfg = sample_uniform(space, rng);
    let low = [BitWidth::B2, BitWidth::B3, BitWidth::B4, BitWidth::B8];
    for stage in &mut cfg.bits {
        for b in stage.iter_mut() {
            b.weight = low[rng.random_range(0..low.len())];
        }
    }
    cfg
}

/// Squared gradient norm of each layer's multiplex base module.
pub fn base_module_grad_norms(detach: bool, seed: u64) -> std::result::Result<BTreeMap<String, f64>, String> {
    let space = SearchSpace::default();
    let mut model = ElasticViT::new(space.clone(), seed).map_err(|e| e.to_string())?;
    model
        .attach_lora(&settings(LoraMode::Multiplex, detach), seed + 1)
        .map_err(|e| e.to_string())?;
    model.frozen = true;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    for bank in model.lora.as_mut().unwrap().values_mut() {
        for m in &mut bank.modules {
            let shape = m.b.shape().to_vec();
            m.b = Tensor::randn(&shape, 0.05, &mut rng);
        }
    }
    let cfg = non_base_config(&space, &mut rng);
    let x = images(2, cfg.resolution, &mut rng);
    let labels: Vec<usize> = (0..2 * cfg.resolution * cfg.resolution)
        .map(|_| rng.random_range(0..space.num_classes))
        .collect();
    let mut f = model
        .forward(&cfg, &x, Trainable { base: false, lora: true, quant: true })
        .map_err(|e| e.to_string())?;
    let loss = f.graph.cross_entropy(f.logits, &labels).map_err(|e| e.to_string())?;
    f.graph.backward(loss).map_err(|e| e.to_string())?;

    let banks = model.lora.as_ref().unwrap();
    let mut norms = BTreeMap::new();
    for (s, depth) in cfg.depths.iter().enumerate() {
        for l in 0..*depth {
            for part in ["qkv", "fc1", "fc2"] {
                let id = format!("s{s}.l{l}.{part}");
                let base = banks[&id].base.unwrap();
                let prefix = format!("lora.{id}.m{base}.");
                let sq: f64 = f
                    .params
                    .iter()
                    .filter(|p| p.name.starts_with(&prefix))
                    .filter_map(|p| f.graph.grad(p.var))
                    .flat_map(|g| g.data().iter().map(|&v| (v as f64) * (v as f64)))
                    .sum();
                norms.insert(id, sq);
            }
        }
    }
    Ok(norms)
}

pub fn detach_semantics() -> std::result::Result<String, String> {
    let mut layers = 0;
    for seed in [5u64, 17, 29] {
        let on = base_module_grad_norms(true, seed)?;
        if let Some((id, n)) = on.iter().find(|(_, &n)| n != 0.0) {
            return Err(format!("detach on: base module of {id} has gradient norm² {n}"));
        }
        let off = base_module_grad_norms(false, seed)?;
        if let Some((id, _)) = off.iter().find(|(_, &n)| !(n > 0.0)) {
            return Err(format!("detach off: base module of {id} received no gradient"));
        }
        layers += on.len();
    }
    Ok(format!("{layers} adapter layers over 3 seeds"))
}
