//! Acceptance gate. Each criterion prints one `[PASS]` or `[FAIL]` line and
//! the process exits non-zero if any failed.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use catp_core::compensation::{aggregate_average, aggregate_high, aggregate_low, rebuild_sequence};
use catp_core::cost::{layer_flops, pipeline_flops, ConfidenceSource, ScoreTrace, StageTokenCount};
use catp_core::harness::{gradcheck, run, DiskScene};
use catp_core::image::decode_pnm;
use catp_core::numerics::{dot, gaussian_init, Matrix, Rng};
use catp_core::pruning::partition_tokens;
use catp_core::weights::{decode_weights, encode_weights, read_weight_file, write_weight_file};
use catp_core::{
    forward, CatpModel, CompensationMode, EncoderConfig, ForwardState, IndexMap, Origin, PruneThresholds, RunConfig,
    ScoringHead,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:.0?}"))
}

fn strong_model(cfg: &EncoderConfig, seed: u64, gain: f64) -> CatpModel {
    let mut model = CatpModel::random(cfg, seed).expect("valid config");
    let mut rng = Rng::new(seed ^ 0x5eed_cafe);
    for h in &mut model.heads {
        for w in &mut h.weight {
            *w = gain * rng.normal();
        }
        h.bias = rng.normal();
    }
    model
}

fn noise_image(cfg: &EncoderConfig, rng: &mut Rng) -> catp_core::Image {
    let n = cfg.image_h * cfg.image_w * cfg.channels;
    catp_core::Image::new(cfg.image_h, cfg.image_w, cfg.channels, (0..n).map(|_| rng.next_f64()).collect())
        .expect("finite pixels")
}

fn ac1_partition_oracle() -> Check {
    let start = Instant::now();
    let mut rng = Rng::new(1);
    let mut total = 0usize;
    for case in 0..10_000 {
        let n = 1 + rng.below(256);
        let a = rng.next_open01();
        let b = rng.next_open01();
        let (theta_d, theta_u) = if a <= b { (a, b) } else { (b, a) };
        let thr = PruneThresholds::new(theta_d, theta_u, 10.0).map_err(|e| e.to_string())?;
        let scores: Vec<f64> = (0..n)
            .map(|_| match rng.below(10) {
                // land exactly on a threshold now and then
                0 => theta_d,
                1 => theta_u,
                _ => rng.next_open01(),
            })
            .collect();
        let part = partition_tokens(&scores, &thr);
        let mut seen = vec![0u8; n];
        for (band, slots) in [(0u8, &part.low), (1, &part.mid), (2, &part.high)] {
            ensure(slots.windows(2).all(|w| w[0] < w[1]), || format!("case {case}: band {band} not sorted"))?;
            for &t in slots {
                ensure(t < n, || format!("case {case}: slot {t} out of range"))?;
                seen[t] += 1;
                let p = scores[t];
                let expected = if p < theta_d {
                    0
                } else if p > theta_u {
                    2
                } else {
                    1
                };
                ensure(expected == band, || {
                    format!("case {case}: p={p} with {theta_d}/{theta_u} put in band {band}, expected {expected}")
                })?;
            }
        }
        ensure(seen.iter().all(|&c| c == 1), || format!("case {case}: subsets not a partition"))?;
        total += n;
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(5))?;
    Ok(format!("10000 vectors, {total} scores, {elapsed:.2?}"))
}

fn ac2_no_prune_identity() -> Check {
    let start = Instant::now();
    let cfg = EncoderConfig::default();
    let mut rng = Rng::new(2);
    for seed in 0..3 {
        let model = strong_model(&cfg, seed, 40.0);
        let image = noise_image(&cfg, &mut rng);
        for mode in [CompensationMode::None, CompensationMode::Average, CompensationMode::Weighted] {
            let out = forward(&model, &image, &PruneThresholds::no_prune(10.0), mode).map_err(|e| e.to_string())?;
            let t = cfg.num_patches();
            ensure(out.token_counts.iter().all(|c| c.patches == t && c.prototypes == 0), || {
                format!("seed {seed} {mode}: counts {:?}", out.token_counts)
            })?;
            for r in &out.records {
                ensure(r.mask.bits.iter().all(|&b| b), || format!("seed {seed}: mask {} not all ones", r.stage))?;
                ensure(r.prototypes.is_empty(), || format!("seed {seed}: prototypes at stage {}", r.stage))?;
                ensure(!r.fallback, || "fallback fired without pruning".into())?;
            }
            let last = out.pyramid.levels.last().expect("levels");
            for (s, level) in out.pyramid.levels.iter().enumerate() {
                ensure(level == last, || format!("seed {seed}: level {} differs from level S", s + 1))?;
            }
        }
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("3 models x 3 modes, {elapsed:.2?}"))
}

fn ac3_refill_contract() -> Check {
    let mut rng = Rng::new(3);
    let mut pruned_total = 0usize;
    let mut checked = 0usize;
    for run_id in 0..100u64 {
        let mut cfg = EncoderConfig::default();
        if run_id % 2 == 1 {
            cfg.patch_size = 8;
        }
        let model = strong_model(&cfg, 1000 + run_id, rng.uniform(2.0, 60.0));
        let image = noise_image(&cfg, &mut rng);
        let mode = [CompensationMode::None, CompensationMode::Average, CompensationMode::Weighted][run_id as usize % 3];
        let out = forward(&model, &image, &PruneThresholds::default(), mode).map_err(|e| e.to_string())?;
        let levels = &out.pyramid.levels;
        let s_count = levels.len();
        let t = cfg.num_patches();
        for s in 0..s_count - 1 {
            for &pos in out.active[s + 1].positions() {
                ensure(levels[s].row(pos) == levels[s + 1].row(pos), || {
                    format!("run {run_id}: level {} and {} differ at active position {pos}", s + 1, s + 2)
                })?;
                checked += 1;
            }
        }
        for pos in 0..t {
            // last stage that processed this position
            let s_star = (0..s_count).rev().find(|&s| out.active[s].contains(pos)).expect("stage 1 sees all");
            if s_star + 1 == s_count {
                continue;
            }
            pruned_total += 1;
            let own = out.bases[s_star].row(pos);
            for (s, level) in levels.iter().enumerate().take(s_star + 1) {
                ensure(level.row(pos) == own, || {
                    format!("run {run_id}: position {pos} pruned after stage {} differs at level {}", s_star + 1, s + 1)
                })?;
            }
        }
    }
    ensure(pruned_total > 0, || "no run pruned anything".into())?;
    Ok(format!("100 runs, {checked} active rows and {pruned_total} pruned positions bit-identical"))
}

fn ac4_prototype_correctness() -> Check {
    let mut rng = Rng::new(4);
    let mut worst_sum: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    let mut worst_equal: f64 = 0.0;
    for case in 0..2000 {
        let n = 1 + rng.below(40);
        let c = 1 + rng.below(16);
        let std = 1.0 + 10.0 * rng.next_f64();
        let x = gaussian_init(&mut rng, n, c, std).map_err(|e| e.to_string())?;
        let low_p: Vec<f64> = (0..n).map(|_| rng.uniform(1e-6, 0.3)).collect();
        let high_p: Vec<f64> = (0..n).map(|_| rng.uniform(0.7, 1.0 - 1e-6)).collect();
        let low = aggregate_low(&x, &low_p).map_err(|e| e.to_string())?.expect("nonempty");
        let high = aggregate_high(&x, &high_p).map_err(|e| e.to_string())?.expect("nonempty");
        for (proto, raw) in [
            (&low, low_p.clone()),
            (&high, high_p.iter().map(|p| 1.0 - p).collect::<Vec<_>>()),
        ] {
            let sum: f64 = proto.weights.iter().sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());
            // independent normalization: divide by a sum taken in reverse order
            let total = raw.iter().rev().fold(0.0, |a, b| a + b);
            for (w, r) in proto.weights.iter().zip(&raw) {
                worst_oracle = worst_oracle.max((w - r / total).abs());
            }
            for j in 0..c {
                let col: Vec<f64> = (0..n).map(|t| x.get(t, j)).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let v = proto.feature[j];
                let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
                ensure(v >= lo - slack && v <= hi + slack, || {
                    format!("case {case}: feature {v} outside [{lo}, {hi}]")
                })?;
            }
        }
        let p = rng.uniform(0.01, 0.29);
        let flat = vec![p; n];
        let weighted = aggregate_low(&x, &flat).map_err(|e| e.to_string())?.expect("nonempty");
        let average = aggregate_average(&x, &flat, Origin::Low).map_err(|e| e.to_string())?.expect("nonempty");
        let q = vec![1.0 - p; n];
        let weighted_h = aggregate_high(&x, &q).map_err(|e| e.to_string())?.expect("nonempty");
        let average_h = aggregate_average(&x, &q, Origin::High).map_err(|e| e.to_string())?.expect("nonempty");
        for (a, b) in weighted.feature.iter().zip(&average.feature).chain(weighted_h.feature.iter().zip(&average_h.feature)) {
            worst_equal = worst_equal.max((a - b).abs());
        }
    }
    ensure(worst_sum <= 1e-9, || format!("weight sum off by {worst_sum:e}"))?;
    ensure(worst_oracle <= 1e-12, || format!("weights differ from oracle by {worst_oracle:e}"))?;
    ensure(worst_equal <= 1e-12, || format!("equal-score weighted vs average differ by {worst_equal:e}"))?;
    Ok(format!(
        "2000 draws: |sum-1| {worst_sum:.1e}, oracle {worst_oracle:.1e}, equal-score {worst_equal:.1e}"
    ))
}

fn ac5_sequence_shape() -> Check {
    let mut rng = Rng::new(5);
    let c = 8;
    let grid = 64;
    for case in 0..500 {
        let n_mid = rng.below(20);
        let positions: Vec<usize> = {
            let mut all: Vec<usize> = (0..grid).collect();
            for i in 0..n_mid {
                let j = i + rng.below(grid - i);
                all.swap(i, j);
            }
            let mut p = all[..n_mid].to_vec();
            p.sort_unstable();
            p
        };
        let mid = gaussian_init(&mut rng, n_mid, c, 1.0).map_err(|e| e.to_string())?;
        let src = gaussian_init(&mut rng, 3, c, 1.0).map_err(|e| e.to_string())?;
        let low = aggregate_low(&src, &[0.1, 0.2, 0.05]).map_err(|e| e.to_string())?;
        let high = aggregate_high(&src, &[0.9, 0.8, 0.95]).map_err(|e| e.to_string())?;
        let cls = vec![0.5; c];
        let map = IndexMap::new(positions, grid).map_err(|e| e.to_string())?;
        for (has_low, has_high) in [(true, true), (true, false), (false, true), (false, false)] {
            let seq = rebuild_sequence(
                cls.clone(),
                mid.clone(),
                map.clone(),
                low.as_ref().filter(|_| has_low),
                high.as_ref().filter(|_| has_high),
            )
            .map_err(|e| e.to_string())?;
            let expected = n_mid + 1 + usize::from(has_low) + usize::from(has_high);
            ensure(seq.len() == expected && seq.to_matrix().rows() == expected, || {
                format!("case {case}: length {} for {n_mid} mid, low {has_low}, high {has_high}", seq.len())
            })?;
            let origins: Vec<Origin> = seq.prototypes.iter().map(|p| p.origin).collect();
            let want: Vec<Origin> = [(has_low, Origin::Low), (has_high, Origin::High)]
                .into_iter()
                .filter_map(|(h, o)| h.then_some(o))
                .collect();
            ensure(origins == want, || format!("case {case}: prototype slots {origins:?}, want {want:?}"))?;
        }
    }

    // the same count through a real boundary
    let cfg = EncoderConfig::default();
    let mut both = 0;
    for seed in 0..40 {
        let model = strong_model(&cfg, seed, 40.0);
        let image = noise_image(&cfg, &mut rng);
        let mut state = ForwardState::new(&model, &image).map_err(|e| e.to_string())?;
        state.run_next_stage().map_err(|e| e.to_string())?;
        let r = state
            .prune(&model.heads[0], &PruneThresholds::default(), CompensationMode::Weighted)
            .map_err(|e| e.to_string())?
            .clone();
        let expected = r.surviving_count() + 1 + r.prototypes.len();
        ensure(state.current().len() == expected, || format!("seed {seed}: rebuilt length mismatch"))?;
        if r.prototypes.len() == 2 {
            both += 1;
            ensure(state.current().len() == r.partition.mid.len() + 3, || format!("seed {seed}: not N_mid + 3"))?;
        }
    }
    ensure(both > 0, || "no boundary produced both prototypes".into())?;
    Ok(format!("500 synthetic cases x 4 slot patterns, {both}/40 pipeline boundaries with N_mid + 3"))
}

fn ac6_gradcheck() -> Check {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let report = gradcheck(&cfg, 100).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(report.tau == 10.0, || format!("tau {}", report.tau))?;
    ensure(report.max_rel_error < 1e-4, || format!("max relative error {:e}", report.max_rel_error))?;
    ensure(report.zero_weight_max_abs == 0.0, || "nonzero Jacobian for zero weights".into())?;
    within(elapsed, Duration::from_secs(2))?;
    Ok(format!("100 draws, max relative error {:.2e}, {elapsed:.2?}", report.max_rel_error))
}

/// Counts every matmul as `m * k * n`, head by head.
fn brute_force_flops(cfg: &EncoderConfig, stages: &[StageTokenCount]) -> u64 {
    let c = cfg.embed_dim as u64;
    let h = cfg.num_heads as u64;
    let dh = c / h;
    let hidden = cfg.mlp_hidden() as u64;
    let mm = |m: u64, k: u64, n: u64| m * k * n;
    let layer = |n: u64| {
        let mut f = 0;
        for _ in 0..4 {
            f += mm(n, c, c);
        }
        for _ in 0..h {
            f += mm(n, dh, n);
            f += mm(n, n, dh);
        }
        f + mm(n, c, hidden) + mm(n, hidden, c)
    };
    let mut total = 0;
    for (i, st) in stages.iter().enumerate() {
        for _ in cfg.stage_layers(i + 1) {
            total += layer(st.total() as u64);
        }
        if i + 1 < stages.len() {
            // scoring head: one N x C x 1 product, multiply and add each counted
            total += 2 * mm(st.patches as u64, c, 1);
        }
    }
    total
}

fn ac7_cost_oracle() -> Check {
    let mut rng = Rng::new(7);
    for case in 0..50 {
        let heads = 1 + rng.below(8);
        let c = heads * (1 + rng.below(24));
        let s = 1 + rng.below(4);
        let k = 1 + rng.below(4);
        let p = [4, 8, 16][rng.below(3)];
        let cfg = EncoderConfig {
            image_h: p * (1 + rng.below(14)),
            image_w: p * (1 + rng.below(14)),
            channels: 1 + 2 * rng.below(2),
            patch_size: p,
            embed_dim: c,
            num_layers: s * k,
            num_heads: heads,
            mlp_ratio: [1.0, 2.0, 4.0][rng.below(3)],
            stage_boundaries: (1..s).map(|i| i * k).collect(),
        };
        cfg.validate().map_err(|e| format!("case {case}: {e}"))?;
        let t = cfg.num_patches();
        let mut patches = t;
        let stages: Vec<StageTokenCount> = (0..s)
            .map(|i| {
                let protos = if i == 0 { 0 } else { rng.below(3) };
                let st = StageTokenCount { patches, prototypes: protos };
                patches = rng.below(patches + 1).max(1);
                st
            })
            .collect();
        let report = pipeline_flops(&cfg, &stages, CompensationMode::Weighted).map_err(|e| e.to_string())?;
        let oracle = brute_force_flops(&cfg, &stages);
        ensure(report.total_pruned == oracle, || {
            format!("case {case}: pipeline_flops {} vs brute force {oracle}", report.total_pruned)
        })?;
        let base = brute_force_flops(&cfg, &vec![StageTokenCount { patches: t, prototypes: 0 }; s]);
        let base_overhead: u64 = (0..s - 1).map(|_| 2 * t as u64 * c as u64).sum();
        ensure(report.total_baseline == base - base_overhead, || format!("case {case}: baseline mismatch"))?;
        ensure(
            layer_flops(1, 1, 1, 4.0).map_err(|e| e.to_string())? == 14,
            || "layer_flops(1, 1, 1, 4) != 14".into(),
        )?;
    }

    // monotonicity over recorded traces
    let grid = [(0.2, 0.8), (0.25, 0.75), (0.3, 0.7), (0.35, 0.65), (0.4, 0.6)];
    let cfg = EncoderConfig::vit_base(224, 224);
    let t = cfg.num_patches();
    let mut strict = 0;
    let traces = 200;
    for trace_id in 0..traces {
        let spread = rng.uniform(0.5, 4.0);
        let boundaries = (0..cfg.num_stages() - 1)
            .map(|_| (0..t).map(|_| 1.0 / (1.0 + (-spread * rng.normal()).exp())).collect())
            .collect();
        let trace = ScoreTrace::new(t, boundaries).map_err(|e| e.to_string())?;
        for mode in [CompensationMode::None, CompensationMode::Weighted] {
            let mut totals = Vec::new();
            for &(d, u) in &grid {
                let thr = PruneThresholds::new(d, u, 10.0).map_err(|e| e.to_string())?;
                let counts = trace.stage_counts(&thr, mode).map_err(|e| e.to_string())?;
                totals.push(pipeline_flops(&cfg, &counts, mode).map_err(|e| e.to_string())?.total_pruned);
            }
            ensure(totals.windows(2).all(|w| w[1] <= w[0]), || {
                format!("trace {trace_id} {mode}: totals increase {totals:?}")
            })?;
            strict += usize::from(totals.windows(2).all(|w| w[1] < w[0]));
        }
    }
    Ok(format!(
        "50 configs exact; {} traces non-increasing, {strict} strictly decreasing across the 5-point grid",
        2 * traces
    ))
}

/// Grid cells whose own pixels or 4-neighbors' pixels straddle the disk edge.
fn boundary_adjacent(coverage: &[f64], gh: usize, gw: usize) -> Vec<bool> {
    (0..gh * gw)
        .map(|i| {
            let (y, x) = (i / gw, i % gw);
            let mut cells = vec![i];
            if y > 0 {
                cells.push(i - gw);
            }
            if y + 1 < gh {
                cells.push(i + gw);
            }
            if x > 0 {
                cells.push(i - 1);
            }
            if x + 1 < gw {
                cells.push(i + 1);
            }
            let any_in = cells.iter().any(|&j| coverage[j] > 0.0);
            let any_out = cells.iter().any(|&j| coverage[j] < 1.0);
            any_in && any_out
        })
        .collect()
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Head pointing from the mean background feature to the mean foreground
/// feature of the entering tokens, bias at the midpoint, scaled so the mean
/// foreground token sits at `strength * logit(theta_u)` after temperature.
fn proxy_head(patches: &Matrix, fg: &[bool], thr: &PruneThresholds, strength: f64) -> Option<ScoringHead> {
    let c = patches.cols();
    let mean = |want: bool| -> Option<Vec<f64>> {
        let rows: Vec<usize> = (0..patches.rows()).filter(|&t| fg[t] == want).collect();
        if rows.is_empty() {
            return None;
        }
        let mut m = vec![0.0; c];
        for &t in &rows {
            for (acc, v) in m.iter_mut().zip(patches.row(t)) {
                *acc += v / rows.len() as f64;
            }
        }
        Some(m)
    };
    let (mf, mb) = (mean(true)?, mean(false)?);
    let d: Vec<f64> = mf.iter().zip(&mb).map(|(a, b)| a - b).collect();
    let mid: Vec<f64> = mf.iter().zip(&mb).map(|(a, b)| 0.5 * (a + b)).collect();
    let margin = dot(&d, &mf) - dot(&d, &mid);
    if margin <= 0.0 {
        return None;
    }
    let k = strength * thr.tau * logit(thr.theta_u) / margin;
    let weight: Vec<f64> = d.iter().map(|v| k * v).collect();
    let bias = -dot(&weight, &mid);
    Some(ScoringHead { weight, bias })
}

fn boundary_fraction(positions: &[usize], adjacent: &[bool]) -> f64 {
    if positions.is_empty() {
        return 0.0;
    }
    positions.iter().filter(|&&p| adjacent[p]).count() as f64 / positions.len() as f64
}

fn ac8_concentration() -> Check {
    let start = Instant::now();
    let cfg = EncoderConfig {
        image_h: 128,
        image_w: 128,
        channels: 3,
        patch_size: 8,
        embed_dim: 32,
        num_layers: 8,
        num_heads: 4,
        mlp_ratio: 4.0,
        stage_boundaries: vec![2, 4, 6],
    };
    let thr = PruneThresholds::default();
    let strengths = [1.0, 1.1, 1.2];
    let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
    let mut passed = 0;
    let mut detail = Vec::new();
    for seed in 0..10u64 {
        let scene = DiskScene::generate(cfg.image_h, cfg.image_w, cfg.channels, seed);
        let coverage = scene.patch_coverage(cfg.patch_size);
        let adjacent = boundary_adjacent(&coverage, gh, gw);
        let model = CatpModel::random(&cfg, seed).map_err(|e| e.to_string())?;
        let mut state = ForwardState::new(&model, &scene.image).map_err(|e| e.to_string())?;
        let mut fractions = Vec::new();
        let mut sizes = Vec::new();
        for strength in strengths {
            state.run_next_stage().map_err(|e| e.to_string())?;
            let seq = state.current();
            let fg: Vec<bool> = seq.index_map.positions().iter().map(|&p| coverage[p] > 0.5).collect();
            let head = proxy_head(&seq.patches, &fg, &thr, strength)
                .unwrap_or_else(|| ScoringHead::zeros(cfg.embed_dim));
            let r = state.prune(&head, &thr, CompensationMode::Weighted).map_err(|e| e.to_string())?;
            fractions.push(boundary_fraction(r.surviving.positions(), &adjacent));
            sizes.push(r.surviving_count());
        }
        state.run_next_stage().map_err(|e| e.to_string())?;
        let (first, last) = (fractions[0], *fractions.last().expect("boundaries"));
        if last > first {
            passed += 1;
        }
        detail.push(format!("{first:.2}->{last:.2} ({}->{})", sizes[0], sizes[sizes.len() - 1]));
    }
    let elapsed = start.elapsed();
    ensure(passed >= 8, || format!("{passed}/10 seeds concentrate ({})", detail.join(" ")))?;
    within(elapsed, Duration::from_secs(10))?;
    Ok(format!("{passed}/10 seeds, boundary fraction stage 2 -> final: {}, {elapsed:.2?}", detail.join(" ")))
}

fn ac9_determinism() -> Check {
    let cfg = RunConfig::default();
    let model = strong_model(&cfg.encoder, cfg.seed, 40.0);
    let image = DiskScene::generate(cfg.encoder.image_h, cfg.encoder.image_w, cfg.encoder.channels, cfg.seed).image;
    let a = run(&cfg, &model, &image).map_err(|e| e.to_string())?;
    let again = strong_model(&cfg.encoder, cfg.seed, 40.0);
    let b = run(&cfg, &again, &image).map_err(|e| e.to_string())?;
    ensure(a.files == b.files, || "artifacts differ between identical runs".into())?;

    let map = model.to_weight_map().map_err(|e| e.to_string())?;
    let bytes = encode_weights(&map).map_err(|e| e.to_string())?;
    let back = decode_weights(&bytes).map_err(|e| e.to_string())?;
    let bit_equal = |x: &catp_core::weights::WeightMap, y: &catp_core::weights::WeightMap| {
        x.len() == y.len()
            && x.iter().zip(y).all(|((kx, tx), (ky, ty))| {
                kx == ky
                    && tx.dims == ty.dims
                    && tx.data.iter().zip(&ty.data).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    };
    ensure(bit_equal(&map, &back), || "in-memory round trip not bit-exact".into())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.catpw");
    write_weight_file(&path, &map).map_err(|e| e.to_string())?;
    let from_disk = read_weight_file(&path).map_err(|e| e.to_string())?;
    ensure(bit_equal(&map, &from_disk), || "file round trip not bit-exact".into())?;
    let reloaded = CatpModel::from_weight_map(&cfg.encoder, &from_disk, 0).map_err(|e| e.to_string())?;
    let map2 = reloaded.to_weight_map().map_err(|e| e.to_string())?;
    ensure(bit_equal(&map, &map2), || "reload and re-export not bit-exact".into())?;
    ensure(encode_weights(&map2).map_err(|e| e.to_string())? == bytes, || "re-encoded file differs".into())?;
    Ok(format!("{} artifacts identical; {} tensors, {} bytes round-trip bit-exact", a.files.len(), map.len(), bytes.len()))
}

fn ac10_shapes_and_bounds() -> Check {
    let mut rng = Rng::new(10);
    let mut heat_pixels = 0usize;
    for case in 0..12u64 {
        let mut cfg = RunConfig::default();
        if case % 2 == 1 {
            cfg.encoder.patch_size = 8;
        }
        cfg.compensation = [CompensationMode::None, CompensationMode::Average, CompensationMode::Weighted][case as usize % 3];
        let enc = cfg.encoder.clone();
        let model = strong_model(&enc, 500 + case, 40.0);
        let image = noise_image(&enc, &mut rng);
        let art = run(&cfg, &model, &image).map_err(|e| e.to_string())?;
        let pred = &art.output.prediction;
        ensure(pred.height == enc.image_h && pred.width == enc.image_w, || {
            format!("case {case}: prediction {}x{}", pred.height, pred.width)
        })?;
        ensure(pred.values.len() == enc.image_h * enc.image_w, || "prediction length".into())?;
        ensure(pred.values.iter().all(|v| (0.0..=1.0).contains(v)), || format!("case {case}: prediction out of [0,1]"))?;
        let pgm = decode_pnm(art.file("prediction.pgm").ok_or("missing prediction.pgm")?).map_err(|e| e.to_string())?;
        ensure(pgm.height == enc.image_h && pgm.width == enc.image_w, || "prediction.pgm dims".into())?;

        let t = enc.num_patches();
        let records = &art.output.records;
        for (k, r) in records.iter().enumerate() {
            for kind in ["mask", "heatmap"] {
                let name = format!("{kind}_{}.pgm", r.stage);
                let bytes = art.file(&name).ok_or_else(|| format!("missing {name}"))?;
                let header = format!("P5\n{} {}\n255\n", enc.grid_w(), enc.grid_h());
                ensure(bytes.starts_with(header.as_bytes()), || format!("case {case}: {name} header"))?;
                let px = &bytes[header.len()..];
                ensure(px.len() == t, || format!("case {case}: {name} has {} pixels", px.len()))?;
                if kind == "mask" {
                    for pos in 0..t {
                        let want = if r.surviving.contains(pos) { 255 } else { 0 };
                        ensure(px[pos] == want, || format!("case {case}: {name} pixel {pos}"))?;
                    }
                    continue;
                }
                for pos in 0..t {
                    let want = if let Some(slot) = r.entering.positions().iter().position(|&p| p == pos) {
                        (255.0 * r.scores[slot]).round() as u8
                    } else {
                        let earlier = records[..k]
                            .iter()
                            .find(|e| e.entering.contains(pos) && !e.surviving.contains(pos))
                            .ok_or_else(|| format!("case {case}: position {pos} missing from every record"))?;
                        let slot = earlier.entering.positions().iter().position(|&p| p == pos).expect("entered");
                        if earlier.partition.high.contains(&slot) {
                            255
                        } else {
                            0
                        }
                    };
                    ensure(px[pos] == want, || format!("case {case}: {name} pixel {pos} is {} want {want}", px[pos]))?;
                    heat_pixels += 1;
                }
            }
        }
    }
    Ok(format!("12 runs, {heat_pixels} heatmap pixels equal round(255 p)"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("AC1 partition oracle", ac1_partition_oracle),
        ("AC2 no-prune identity", ac2_no_prune_identity),
        ("AC3 refill contract", ac3_refill_contract),
        ("AC4 prototype correctness", ac4_prototype_correctness),
        ("AC5 sequence shape", ac5_sequence_shape),
        ("AC6 gradient check", ac6_gradcheck),
        ("AC7 cost oracle and monotonicity", ac7_cost_oracle),
        ("AC8 hierarchical concentration", ac8_concentration),
        ("AC9 determinism and round trips", ac9_determinism),
        ("AC10 shapes and bounds", ac10_shapes_and_bounds),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(note) => println!("[PASS] {name}: {note}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
