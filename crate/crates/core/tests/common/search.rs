//! BitOPs enumeration and exhaustive-search oracles.

use std::collections::BTreeMap;

use qsnet::cost::bitops;
use qsnet::evolve::{evolve_search, EvolutionHyper, SearchOutcome};
use qsnet::quantize::{BitWidth, LayerBits};
use qsnet::supernet::{sample_uniform, SearchSpace, SubnetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bit-weighted multiply count of `cfg` at batch 1, one multiply at a time.
pub fn enumerate_bitops(cfg: &SubnetConfig, space: &SearchSpace) -> u64 {
    let grid = cfg.resolution / space.patch_size;
    let tokens = grid * grid;
    let d = space.embed_dim;
    let patch_in = space.patch_size * space.patch_size * space.in_channels;
    let heads = space.num_heads;
    let hd = d / heads;
    let w = |b: BitWidth| b.bits() as u64;
    let mut total = 0u64;
    let mut linear = |rows: usize, d_in: usize, d_out: usize, wb: u64, ab: u64| {
        for _ in 0..rows {
            for _ in 0..d_out {
                for _ in 0..d_in {
                    total += wb * ab;
                }
            }
        }
    };
    linear(tokens, patch_in, d, w(cfg.embed_bits.weight), w(cfg.embed_bits.act));
    for (s, &depth) in cfg.depths.iter().enumerate() {
        for l in 0..depth {
            let bits = cfg.bits[s][l];
            let (wb, ab) = (w(bits.weight), w(bits.act));
            let hidden = (cfg.mlp_ratios[s][l] * d as f32).ceil() as usize;
            linear(tokens, d, 3 * d, wb, ab);
            // scores and weighted values: both operands are activations
            for _ in 0..2 {
                for _ in 0..heads {
                    linear(tokens, hd, tokens, 32, 32);
                }
            }
            linear(tokens, d, d, wb, ab);
            linear(tokens, d, hidden, wb, ab);
            linear(tokens, hidden, d, wb, ab);
        }
    }
    linear(tokens, d, d, w(cfg.neck_bits.weight), w(cfg.neck_bits.act));
    linear(tokens, d, space.num_classes, 8, 8);
    total
}

pub fn bitops_oracle(configs: u64) -> std::result::Result<String, String> {
    let space = SearchSpace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut cfgs: Vec<SubnetConfig> = (0..configs).map(|_| sample_uniform(&space, &mut rng)).collect();
    cfgs[0] = space.max_config();
    for (i, cfg) in cfgs.iter().enumerate() {
        let analytic = bitops(cfg, &space).map_err(|e| e.to_string())?.total;
        let brute = enumerate_bitops(cfg, &space);
        if analytic != brute {
            return Err(format!("config {i} ({cfg}): analytic {analytic} vs enumerated {brute}"));
        }
    }
    Ok(format!("{configs} configs exact"))
}

/// Resolution {32, 64}, one stage of depth {1, 2}, MLP {2, 4}, bits {4, 8}.
pub fn tiny_space() -> SearchSpace {
    SearchSpace {
        resolutions: vec![32, 64],
        depths: vec![vec![1, 2]],
        mlp_ratios: vec![2.0, 4.0],
        weight_bits: vec![BitWidth::B4, BitWidth::B8],
        act_bits: vec![BitWidth::B4, BitWidth::B8],
        ..SearchSpace::default()
    }
}

/// Every configuration of a single-stage space.
pub fn enumerate_configs(space: &SearchSpace) -> Vec<SubnetConfig> {
    assert_eq!(space.depths.len(), 1);
    let mut bits = Vec::new();
    for &wb in &space.weight_bits {
        for &ab in &space.act_bits {
            bits.push(LayerBits::new(wb, ab));
        }
    }
    let mut layer_opts = Vec::new();
    for &r in &space.mlp_ratios {
        for &b in &bits {
            layer_opts.push((r, b));
        }
    }
    let mut out = Vec::new();
    for &res in &space.resolutions {
        for &depth in &space.depths[0] {
            let combos = layer_opts.len().pow(depth as u32);
            for mut c in 0..combos {
                let mut ratios = Vec::new();
                let mut lbits = Vec::new();
                for _ in 0..depth {
                    let (r, b) = layer_opts[c % layer_opts.len()];
                    c /= layer_opts.len();
                    ratios.push(r);
                    lbits.push(b);
                }
                for &e in &bits {
                    for &n in &bits {
                        out.push(SubnetConfig {
                            resolution: res,
                            depths: vec![depth],
                            mlp_ratios: vec![ratios.clone()],
                            bits: vec![lbits.clone()],
                            embed_bits: e,
                            neck_bits: n,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Deterministic additive fitness with per-position option tables.
pub struct Fitness {
    table: BTreeMap<String, f64>,
}

impl Fitness {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = BTreeMap::new();
        for key in ["res32", "res64", "depth1", "depth2"] {
            table.insert(key.to_string(), rng.random_range(0.0..0.2));
        }
        for pos in ["l0", "l1", "embed", "neck"] {
            for opt in ["mlp2", "mlp4", "w4", "w8", "a4", "a8"] {
                table.insert(format!("{pos}.{opt}"), rng.random_range(0.0..0.1));
            }
        }
        Fitness { table }
    }

    fn t(&self, key: &str) -> f64 {
        self.table[key]
    }

    pub fn loss(&self, c: &SubnetConfig) -> f64 {
        let mut loss = 1.0 + self.t(&format!("res{}", c.resolution)) + self.t(&format!("depth{}", c.depths[0]));
        let bits = |pos: &str, b: LayerBits| self.t(&format!("{pos}.w{}", b.weight)) + self.t(&format!("{pos}.a{}", b.act));
        for l in 0..c.depths[0] {
            let pos = format!("l{l}");
            loss += self.t(&format!("{pos}.mlp{}", c.mlp_ratios[0][l] as u32)) + bits(&pos, c.bits[0][l]);
        }
        loss + bits("embed", c.embed_bits) + bits("neck", c.neck_bits)
    }
}

/// Feasibility, bookkeeping and elitism on every generation.
pub fn check_invariants(
    outcome: &SearchOutcome,
    space: &SearchSpace,
    fit: &Fitness,
    tau: u64,
    parents: usize,
) -> std::result::Result<(), String> {
    let mut best_so_far = f64::INFINITY;
    for (gi, g) in outcome.history.iter().enumerate() {
        for c in &g.population {
            let b = bitops(&c.config, space).map_err(|e| e.to_string())?.total;
            if b != c.bitops || b > tau {
                return Err(format!("generation {gi}: {} has bitops {b} (recorded {}, τ {tau})", c.config, c.bitops));
            }
            if c.loss != fit.loss(&c.config) {
                return Err(format!("generation {gi}: loss of {} misrecorded", c.config));
            }
        }
        if g.population.windows(2).any(|w| w[0].loss > w[1].loss) {
            return Err(format!("generation {gi}: population not sorted best first"));
        }
        best_so_far = best_so_far.min(g.population[0].loss);
        if g.best.loss != best_so_far {
            return Err(format!("generation {gi}: best {} but best seen {best_so_far}", g.best.loss));
        }
        if gi > 0 {
            let prev = &outcome.history[gi - 1];
            for p in prev.population.iter().take(parents) {
                if !g.population.iter().any(|c| c.config == p.config) {
                    return Err(format!("generation {gi}: parent {} was dropped", p.config));
                }
            }
        }
    }
    if outcome.best.loss != best_so_far {
        return Err("returned best differs from history".into());
    }
    Ok(())
}

pub fn evolution_oracle(seeds: &[u64]) -> std::result::Result<String, String> {
    let space = tiny_space();
    let all = enumerate_configs(&space);
    if all.len() as u128 != space.cardinality() || all.len() > 4096 {
        return Err(format!("enumerated {} configs, cardinality {}", all.len(), space.cardinality()));
    }
    let max = qsnet::cost::max_bitops(&space).map_err(|e| e.to_string())?;
    let tau = max * 2 / 5;
    let hyper = EvolutionHyper::default();
    let mut gaps = Vec::new();
    for &seed in seeds {
        let fit = Fitness::new(seed);
        let optimum = all
            .iter()
            .filter(|c| bitops(c, &space).unwrap().total <= tau)
            .map(|c| fit.loss(c))
            .fold(f64::INFINITY, f64::min);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let outcome = evolve_search(&space, |c| Ok(fit.loss(c)), tau, &hyper, &mut rng).map_err(|e| e.to_string())?;
        check_invariants(&outcome, &space, &fit, tau, hyper.parents).map_err(|e| format!("seed {seed}: {e}"))?;
        let gap = (outcome.best.loss - optimum) / optimum;
        if gap > 0.01 {
            return Err(format!("seed {seed}: best {} vs optimum {optimum} ({:.2}% gap)", outcome.best.loss, gap * 100.0));
        }
        gaps.push(format!("{:.3}%", gap * 100.0));
    }
    Ok(format!("{} configs, gaps {}", all.len(), gaps.join(" / ")))
}
