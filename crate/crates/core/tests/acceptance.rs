//! Acceptance suite. Runs every criterion, prints one line per criterion and
//! exits non-zero if any failed.
//!
//! Run with `cargo test -p medalseg-core --test acceptance`.

use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ndarray::{s, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::Rng as _;

use medalseg_core::bench::{run_bench, BenchParams};
use medalseg_core::decoder::{
    aligned_features, iterative_infer, n_selected, predict, random_block_mask, IterativeParams, QueryEmbeddings,
    Refiner, ToyBackbone, VoxelFeatures,
};
use medalseg_core::metrics::{
    bce_dice_loss, dsc, instance_f1_dsctp, nsd, InstanceParams, Matching, OverlapMeasure,
};
use medalseg_core::phantom::{central_scribbles, PhantomSpec};
use medalseg_core::pipeline::{
    enforce_memory_budget, resolve_queries, run, run_queries, Execution, Models, PipelineConfig, PromptMode, Scribbles, Stages,
};
use medalseg_core::postproc::{refine_segmentation, PostprocParams};
use medalseg_core::prompt_gen::{generate_spatial_prompts_traced, PromptGenParams};
use medalseg_core::rng::{seeded, Rng};
use medalseg_core::text::{build_mappings, bundled_fixtures, Corpus, InstanceLabel, PromptResolver, ToyTextEncoder};
use medalseg_core::volume::{dynamic_target_spacing, ProbabilityMap, ResampleSpec, SpacingBounds};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

struct Kit {
    toy: ToyBackbone,
    enc: ToyTextEncoder,
    resolver: PromptResolver,
}

impl Kit {
    fn new() -> Self {
        Self { toy: ToyBackbone::bundled(0), enc: ToyTextEncoder::default(), resolver: PromptResolver::bundled() }
    }
    fn models(&self) -> Models<'_> {
        Models { backbone: &self.toy, refiner: &self.toy, encoder: &self.enc, resolver: &self.resolver }
    }
}

/// `k` successes out of `n` Bernoulli trials with summed mean `mean` and
/// summed variance `var`, within three standard deviations.
fn within_3sigma(what: &str, k: f64, mean: f64, var: f64) -> Check {
    let sd = var.sqrt();
    ensure!((k - mean).abs() <= 3.0 * sd, "{what}: {k} vs expected {mean:.1} (sd {sd:.1})");
    Ok(format!("{what} {k}/{mean:.0}"))
}

fn random_blobs(n: usize, dims: [usize; 3], rng: &mut Rng) -> Array4<u8> {
    let mut m = Array4::<u8>::zeros((n, dims[0], dims[1], dims[2]));
    for c in 0..n {
        for _ in 0..rng.random_range(0..3) {
            let lo: Vec<usize> = dims.iter().map(|d| rng.random_range(0..*d)).collect();
            let hi: Vec<usize> = (0..3).map(|i| (lo[i] + rng.random_range(1..10)).min(dims[i])).collect();
            m.slice_mut(s![c, lo[0]..hi[0], lo[1]..hi[1], lo[2]..hi[2]]).fill(1);
        }
    }
    m
}

fn criterion_1() -> Check {
    let params = PromptGenParams::default();
    let dims = [24, 24, 24];
    let (mut zeroed, mut chans, mut chan_zero) = (0usize, 0usize, 0usize);
    let (mut drops, mut drop_mean, mut drop_var) = (0usize, 0.0, 0.0);
    let (mut adds, mut add_mean, mut add_var) = (0usize, 0.0, 0.0);
    for run in 0..1000u64 {
        let mut data_rng = seeded(1_000_000 + run);
        let n = data_rng.random_range(1..=4);
        let m = random_blobs(n, dims, &mut data_rng);
        let (out, trace) = generate_spatial_prompts_traced(m.view(), &params, &mut seeded(run)).map_err(|e| e.to_string())?;
        ensure!(out.s_f.iter().chain(out.s_p.iter()).all(|v| *v <= 1), "run {run}: non-binary output");
        if trace.zeroed {
            zeroed += 1;
            ensure!(out.s_f.iter().chain(out.s_p.iter()).all(|v| *v == 0), "run {run}: zeroed run has prompts");
            continue;
        }
        chans += n;
        chan_zero += trace.channel_keep.iter().filter(|k| **k == 0).count();
        let block = trace.block.ok_or("block missing from trace")?;
        let (b_drop, b_add, c_add) = (trace.b_drop.unwrap(), trace.b_add.unwrap(), trace.c_add.unwrap());
        let cells = b_drop.len() as f64;
        drops += b_drop.iter().filter(|v| **v).count();
        drop_mean += trace.p_d * cells;
        drop_var += trace.p_d * (1.0 - trace.p_d) * cells;
        let q = trace.p_a * (1.0 - trace.p_d);
        adds += b_add.iter().filter(|v| **v).count();
        add_mean += q * cells;
        add_var += q * (1.0 - q) * cells;
        // independent reconstruction from the draws
        for ((x, y, z), &f) in out.s_f.indexed_iter() {
            let cell = [x / block[0], y / block[1], z / block[2]];
            let any = (0..n).any(|c| m[[c, x, y, z]] == 1 && trace.channel_keep[c] == 1);
            let want = (any && !b_drop[cell]) || b_add[cell];
            ensure!((f == 1) == want, "run {run}: S_f differs at {:?}", (x, y, z));
            for c in 0..n {
                let kept = m[[c, x, y, z]] == 1 && trace.channel_keep[c] == 1 && !b_drop[cell];
                let want = kept || c_add[[c, cell[0], cell[1], cell[2]]];
                ensure!((out.s_p[[c, x, y, z]] == 1) == want, "run {run}: S_p differs at {:?}", (c, x, y, z));
            }
        }
        for (cell, &a) in b_add.indexed_iter() {
            let owners = (0..n).filter(|&c| c_add[[c, cell.0, cell.1, cell.2]]).count();
            ensure!(owners == usize::from(a), "run {run}: added cell owned by {owners} channels");
        }
    }
    let mut notes = vec![
        within_3sigma("p_zero", zeroed as f64, 100.0, 1000.0 * 0.1 * 0.9)?,
        within_3sigma("chan-zero", chan_zero as f64, 0.1 * chans as f64, 0.09 * chans as f64)?,
        within_3sigma("drop", drops as f64, drop_mean, drop_var)?,
        within_3sigma("add", adds as f64, add_mean, add_var)?,
    ];
    let mut rng = seeded(5);
    for _ in 0..20 {
        let m = random_blobs(3, dims, &mut rng);
        let (out, _) = generate_spatial_prompts_traced(m.view(), &PromptGenParams::identity(), &mut rng).map_err(|e| e.to_string())?;
        ensure!(out.s_p == m, "identity parameters changed S_p");
    }
    notes.push("identity ok".into());
    Ok(notes.join(", "))
}

/// Emits the call number as a constant logit and records the prompt half.
struct Tagging {
    calls: Mutex<Vec<Array4<f32>>>,
}

impl Refiner for Tagging {
    fn refine(&self, f: ArrayView4<f32>, f_a: ArrayView4<f32>) -> medalseg_core::Result<Array4<f32>> {
        let mut calls = self.calls.lock().unwrap();
        calls.push(f_a.to_owned());
        Ok(Array4::from_elem(f.raw_dim(), calls.len() as f32))
    }
}

struct PromptBlind;

impl Refiner for PromptBlind {
    fn refine(&self, f: ArrayView4<f32>, _: ArrayView4<f32>) -> medalseg_core::Result<Array4<f32>> {
        Ok(f.to_owned())
    }
}

fn criterion_2() -> Check {
    let mut rng = seeded(2);
    for case in 0..300 {
        let dims = [rng.random_range(1..20), rng.random_range(1..20), rng.random_range(1..12)];
        let b = if rng.random::<bool>() { 4 } else { 8 };
        let bm = random_block_mask(dims, b, &mut rng);
        ensure!(bm.m.iter().zip(bm.m_c.iter()).all(|(a, c)| a + c == 1), "case {case}: masks not complementary");
        let cells = dims.iter().map(|d| d.div_ceil(b)).product::<usize>();
        let mut chosen = 0;
        for x in (0..dims[0]).step_by(b) {
            for y in (0..dims[1]).step_by(b) {
                for z in (0..dims[2]).step_by(b) {
                    let v = bm.m[[x, y, z]];
                    let block = bm.m.slice(s![x..(x + b).min(dims[0]), y..(y + b).min(dims[1]), z..(z + b).min(dims[2])]);
                    ensure!(block.iter().all(|w| *w == v), "case {case}: block not uniform");
                    chosen += v as usize;
                }
            }
        }
        ensure!(chosen == (cells / 2).max(1), "case {case}: {chosen} of {cells} cells selected");
    }
    ensure!(n_selected(1) == 1 && n_selected(3) == 1 && n_selected(8) == 4 && n_selected(27) == 13, "n_selected formula");

    let feats = |rng: &mut Rng, c: usize, d: [usize; 3]| {
        VoxelFeatures::new(Array4::from_shape_fn((c, d[0], d[1], d[2]), |_| rng.random_range(-1.0f32..1.0))).unwrap()
    };
    for case in 0..20 {
        let d = [rng.random_range(2..10), rng.random_range(2..10), rng.random_range(2..10)];
        let (n, c) = (rng.random_range(1..4), rng.random_range(1..5));
        let f = feats(&mut rng, c, d);
        let t = QueryEmbeddings::new(Array2::from_shape_fn((n, c), |_| rng.random_range(-1.0f32..1.0))).unwrap();
        let sp = Array4::from_shape_fn((n, d[0], d[1], d[2]), |_| rng.random::<f32>());
        let single = iterative_infer(&f, &t, sp.view(), &IterativeParams { iterations: 1, rounds: 1, ..Default::default() }, &PromptBlind, &mut seeded(0))
            .map_err(|e| e.to_string())?;
        for iterations in 1..4 {
            for rounds in 1..3 {
                let p = IterativeParams { iterations, rounds, ..Default::default() };
                let out = iterative_infer(&f, &t, sp.view(), &p, &PromptBlind, &mut seeded(case)).map_err(|e| e.to_string())?;
                ensure!(out == single, "case {case}: T={iterations} R={rounds} changed a prompt-blind output");
            }
        }
    }

    for case in 0..100 {
        let d = [rng.random_range(1..18), rng.random_range(1..18), rng.random_range(1..12)];
        let n = rng.random_range(1..4);
        let f = feats(&mut rng, 2, d);
        // positive rows summing to one, so the logit of call k is exactly k
        let t = QueryEmbeddings::new(Array2::from_elem((n, 2), 0.5)).unwrap();
        let sp = Array4::from_elem((n, d[0], d[1], d[2]), 1.0f32);
        let tag = Tagging { calls: Mutex::new(Vec::new()) };
        let p = IterativeParams { iterations: 1, rounds: 1, ..Default::default() };
        let out = iterative_infer(&f, &t, sp.view(), &p, &tag, &mut seeded(100 + case)).map_err(|e| e.to_string())?;
        let calls = tag.calls.into_inner().unwrap();
        ensure!(calls.len() == 3, "case {case}: {} head calls", calls.len());
        let visible = |k: usize| calls[k].index_axis(Axis(0), 0).mapv(|v| v != 0.0);
        let (in_m, in_mc) = (visible(1), visible(2));
        ensure!(in_m.iter().zip(in_mc.iter()).all(|(a, b)| a != b), "case {case}: masked prompts overlap");
        let (p1, p2) = (1.0 / (1.0 + (-2.0f32).exp()), 1.0 / (1.0 + (-3.0f32).exp()));
        for ch in out.outer_iter() {
            for ((v, m), _) in ch.iter().zip(in_m.iter()).zip(in_mc.iter()) {
                // M = 1 where the first masked call saw the prompt; P2 is kept there
                let want = if *m { p2 } else { p1 };
                ensure!(*v == want, "case {case}: voxel {v} is neither the P1 nor the P2 value it should be");
            }
        }
    }
    Ok("300 masks exact, 20 idempotence cases, 100 partition cases".into())
}

/// Brute-force reference: argmax, 6-connected flood fill, then the
/// selection rule on the three largest components. Equal sizes keep
/// discovery (raster) order.
fn alg3_oracle(p: ArrayView4<f32>) -> Array3<u16> {
    let (n, h, w, d) = p.dim();
    let mut s = Array3::<u16>::zeros((h, w, d));
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                let mut best = 0;
                for c in 1..n {
                    if p[[c, x, y, z]] > p[[best, x, y, z]] {
                        best = c;
                    }
                }
                if p[[best, x, y, z]] >= 0.5 {
                    s[[x, y, z]] = best as u16 + 1;
                }
            }
        }
    }
    let base = s.clone();
    for l in 1..=n as u16 {
        let mut comp = Array3::<usize>::zeros((h, w, d));
        let mut list: Vec<Vec<(usize, usize, usize)>> = Vec::new();
        for x in 0..h {
            for y in 0..w {
                for z in 0..d {
                    if base[[x, y, z]] != l || comp[[x, y, z]] != 0 {
                        continue;
                    }
                    list.push(Vec::new());
                    let id = list.len();
                    comp[[x, y, z]] = id;
                    let mut q = VecDeque::from([(x, y, z)]);
                    while let Some((a, b, c)) = q.pop_front() {
                        list[id - 1].push((a, b, c));
                        let mut nb = Vec::new();
                        if a > 0 { nb.push((a - 1, b, c)); }
                        if a + 1 < h { nb.push((a + 1, b, c)); }
                        if b > 0 { nb.push((a, b - 1, c)); }
                        if b + 1 < w { nb.push((a, b + 1, c)); }
                        if c > 0 { nb.push((a, b, c - 1)); }
                        if c + 1 < d { nb.push((a, b, c + 1)); }
                        for v in nb {
                            if base[v] == l && comp[v] == 0 {
                                comp[v] = id;
                                q.push_back(v);
                            }
                        }
                    }
                }
            }
        }
        if list.is_empty() {
            continue;
        }
        let mut order: Vec<usize> = (0..list.len()).collect();
        order.sort_by(|a, b| list[*b].len().cmp(&list[*a].len()));
        let top: Vec<usize> = order.into_iter().take(3).collect();
        let mean = |k: usize| list[k].iter().map(|v| p[[l as usize - 1, v.0, v.1, v.2]] as f64).sum::<f64>() / list[k].len() as f64;
        let means: Vec<f64> = top.iter().map(|k| mean(*k)).collect();
        let p_max = means.iter().cloned().fold(f64::MIN, f64::max);
        let k_set: Vec<usize> = (0..top.len()).filter(|&i| p_max - means[i] <= 0.1 && means[i] > 0.86).map(|i| top[i]).collect();
        let keep: Vec<usize> = if k_set.len() >= 2 {
            k_set
        } else {
            let mut best = 0;
            for i in 1..top.len() {
                if means[i] > means[best] {
                    best = i;
                }
            }
            if best < 2 && list[top[best]].len() as f64 / list[top[0]].len() as f64 > 0.6 {
                vec![top[best]]
            } else {
                vec![top[0]]
            }
        };
        for (k, vox) in list.iter().enumerate() {
            if !keep.contains(&k) {
                for v in vox {
                    s[*v] = 0;
                }
            }
        }
    }
    s
}

fn random_prob_map(rng: &mut Rng) -> Array4<f32> {
    let n = rng.random_range(1..=3);
    let style = rng.random_range(0..3);
    let mut p = Array4::<f32>::zeros((n, 12, 12, 12));
    for mut ch in p.outer_iter_mut() {
        match style {
            0 => ch.mapv_inplace(|_| rng.random::<f32>()),
            _ => {
                ch.mapv_inplace(|_| rng.random_range(0.0..0.45));
                for _ in 0..rng.random_range(1..6) {
                    let lo: Vec<usize> = (0..3).map(|_| rng.random_range(0..12)).collect();
                    let hi: Vec<usize> = lo.iter().map(|l| (l + rng.random_range(1..6)).min(12)).collect();
                    let level = if style == 1 { rng.random_range(0.5..1.0) } else { [0.8f32, 0.87, 0.9, 0.97][rng.random_range(0..4)] };
                    ch.slice_mut(s![lo[0]..hi[0], lo[1]..hi[1], lo[2]..hi[2]])
                        .mapv_inplace(|_| (level + rng.random_range(-0.03..0.03)).min(1.0));
                }
            }
        }
    }
    p
}

fn line_map(a: usize, pa: f32, b: usize, pb: f32) -> ProbabilityMap {
    let mut d = Array4::from_elem((1, 1, 1, a + b + 1), 0.1f32);
    d.slice_mut(s![0, 0, 0, ..a]).fill(pa);
    d.slice_mut(s![0, 0, 0, a + 1..]).fill(pb);
    ProbabilityMap::new(d, vec![1], [1.0; 3]).unwrap()
}

fn criterion_3() -> Check {
    let params = PostprocParams::default();
    let mut rng = seeded(3);
    let mut removed = 0usize;
    for case in 0..500 {
        let p = random_prob_map(&mut rng);
        let n = p.shape()[0];
        let want = alg3_oracle(p.view());
        let pm = ProbabilityMap::new(p, (1..=n as u32).collect(), [1.0; 3]).unwrap();
        let got = refine_segmentation(&pm, &params).map_err(|e| e.to_string())?;
        ensure!(*got.data() == want, "case {case}: labels differ from the reference");
        removed += medalseg_core::postproc::argmax_labelmap(&pm, 0.5).foreground_voxels() - got.foreground_voxels();
    }
    let both = refine_segmentation(&line_map(100, 0.90, 10, 0.95), &params).map_err(|e| e.to_string())?;
    ensure!(both.foreground_voxels() == 110, "K-kept pair: {} voxels kept", both.foreground_voxels());
    let fallback = refine_segmentation(&line_map(100, 0.87, 10, 0.99), &params).map_err(|e| e.to_string())?;
    ensure!(
        fallback.foreground_voxels() == 100 && fallback.data().iter().take(100).all(|v| *v == 1),
        "size-ratio fallback kept the wrong component"
    );
    Ok(format!("500 maps bit-identical ({removed} voxels removed in total), both traced examples exact"))
}

fn criterion_4() -> Check {
    let mut rng = seeded(4);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (n, c) = (rng.random_range(1..5), rng.random_range(1..7));
        let d = [rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6)];
        let t = Array2::from_shape_fn((n, c), |_| rng.random_range(-2.0f32..2.0));
        let sp = Array4::from_shape_fn((n, d[0], d[1], d[2]), |_| rng.random::<f32>());
        let fr = Array4::from_shape_fn((c, d[0], d[1], d[2]), |_| rng.random_range(-2.0f32..2.0));
        let q = QueryEmbeddings::new(t.clone()).unwrap();
        let fa = aligned_features(&q, sp.view()).map_err(|e| e.to_string())?;
        let pr = predict(&q, fr.view()).map_err(|e| e.to_string())?;
        for x in 0..d[0] {
            for y in 0..d[1] {
                for z in 0..d[2] {
                    for k in 0..c {
                        let mut acc = 0.0f64;
                        for j in 0..n {
                            acc += t[[j, k]] as f64 * sp[[j, x, y, z]] as f64;
                        }
                        let e = (fa[[k, x, y, z]] as f64 - acc).abs() / (1.0 + acc.abs());
                        worst = worst.max(e);
                        ensure!(e <= 1e-6, "case {case}: aligned feature off by {e:e}");
                    }
                    for j in 0..n {
                        let mut acc = 0.0f64;
                        for k in 0..c {
                            acc += t[[j, k]] as f64 * fr[[k, x, y, z]] as f64;
                        }
                        let want = (1.0 / (1.0 + (-acc).exp())).clamp(1e-7, 1.0 - 1e-7);
                        let e = (pr[[j, x, y, z]] as f64 - want).abs();
                        worst = worst.max(e);
                        ensure!(e <= 1e-6, "case {case}: prediction off by {e:e}");
                    }
                }
            }
        }
    }
    Ok(format!("100 instances, worst deviation {worst:.1e}"))
}

fn criterion_5() -> Check {
    let mut rng = seeded(5);
    let mut worst = 0.0f64;
    let h = 1e-6;
    for case in 0..100 {
        let n = rng.random_range(1..=3);
        let shape = (n, 4, 4, 4);
        let p = Array4::from_shape_fn(shape, |_| rng.random_range(0.05..0.95));
        let t = Array4::from_shape_fn(shape, |_| f64::from(rng.random::<bool>()));
        let g = bce_dice_loss(p.view(), t.view(), true).map_err(|e| e.to_string())?.gradient.unwrap();
        let mut fd = Array4::<f64>::zeros(shape);
        for idx in ndarray::indices(shape) {
            let mut hi = p.clone();
            hi[idx] += h;
            let mut lo = p.clone();
            lo[idx] -= h;
            let f = |a: &Array4<f64>| bce_dice_loss(a.view(), t.view(), false).unwrap().total;
            fd[idx] = (f(&hi) - f(&lo)) / (2.0 * h);
        }
        let num = g.iter().zip(fd.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
        let rel = num / den;
        worst = worst.max(rel);
        ensure!(rel < 1e-4, "case {case}: relative gradient error {rel:e}");
    }
    Ok(format!("100 instances, worst relative error {worst:.1e}"))
}

fn criterion_6() -> Check {
    let bounds = SpacingBounds::default();
    let spec = ResampleSpec::new([1.0; 3], [192; 3], 1.0).map_err(|e| e.to_string())?;
    let fine = dynamic_target_spacing([0.5; 3], [512; 3], &spec, bounds);
    ensure!(fine.iter().all(|v| (v - 0.375).abs() < 1e-12), "fine case gave {fine:?}");
    let coarse = dynamic_target_spacing([2.0; 3], [100; 3], &spec, bounds);
    ensure!(coarse.iter().all(|v| (v - 1.92).abs() < 1e-12), "coarse case gave {coarse:?}");

    let mut rng = seeded(6);
    let mut triggered = 0;
    for case in 0..10_000 {
        let s: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..5.0));
        let d: [usize; 3] = std::array::from_fn(|_| rng.random_range(8..1024));
        let c: [usize; 3] = std::array::from_fn(|_| rng.random_range(32..257));
        let t: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..2.5));
        let extent: [f64; 3] = std::array::from_fn(|i| s[i] * d[i] as f64);
        let tp = enforce_memory_budget(extent, c, t, 1.8, 1.9);
        let over = extent.iter().product::<f64>() > 1.8f64.powi(3) * c.iter().map(|v| *v as f64 * 1.0).product::<f64>() * t.iter().product::<f64>();
        if over {
            triggered += 1;
            for i in 0..3 {
                ensure!(extent[i] <= 1.9 * c[i] as f64 * tp[i] * (1.0 + 1e-12), "case {case}: axis {i} violates the budget");
                ensure!(tp[i] >= t[i], "case {case}: spacing got finer");
            }
        } else {
            ensure!(tp == t, "case {case}: spacing changed although within budget");
        }
    }
    let ex = enforce_memory_budget([400.0; 3], [192; 3], [1.0; 3], 1.8, 1.9);
    ensure!(ex.iter().all(|v| (v - 1.0965).abs() <= 1e-3), "400 mm example gave {ex:?}");
    Ok(format!(
        "0.375 and 1.92 exact; inequality held on all {triggered} of 10000 fuzzed inputs that exceeded the budget, \
         the rest kept t; 400 mm -> {:.4}",
        ex[0]
    ))
}

/// Instance maps from boxes, ids in placement order; later boxes overwrite.
fn boxes(dims: [usize; 3], k: usize, rng: &mut Rng) -> Array3<u32> {
    let mut a = Array3::<u32>::zeros(dims);
    for id in 1..=k as u32 {
        let lo: Vec<usize> = (0..3).map(|i| rng.random_range(0..dims[i])).collect();
        let hi: Vec<usize> = (0..3).map(|i| (lo[i] + rng.random_range(1..7)).min(dims[i])).collect();
        a.slice_mut(s![lo[0]..hi[0], lo[1]..hi[1], lo[2]..hi[2]]).fill(id);
    }
    a
}

fn brute_boundary(m: ArrayView3<bool>) -> Vec<[usize; 3]> {
    let (h, w, d) = m.dim();
    let mut out = Vec::new();
    for ((x, y, z), &v) in m.indexed_iter() {
        if !v {
            continue;
        }
        let p = [x as isize, y as isize, z as isize];
        let dims = [h as isize, w as isize, d as isize];
        let mut edge = false;
        for axis in 0..3 {
            for step in [-1, 1] {
                let mut q = p;
                q[axis] += step;
                if q[axis] < 0 || q[axis] >= dims[axis] || !m[[q[0] as usize, q[1] as usize, q[2] as usize]] {
                    edge = true;
                }
            }
        }
        if edge {
            out.push([x, y, z]);
        }
    }
    out
}

fn brute_nsd(a: ArrayView3<bool>, b: ArrayView3<bool>, sp: [f64; 3], tol: f64) -> f64 {
    let (ba, bb) = (brute_boundary(a), brute_boundary(b));
    if ba.is_empty() && bb.is_empty() {
        return 1.0;
    }
    if ba.is_empty() || bb.is_empty() {
        return 0.0;
    }
    let near = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter()
            .filter(|p| {
                to.iter().any(|q| {
                    let d2: f64 = (0..3).map(|i| ((p[i] as f64 - q[i] as f64) * sp[i]).powi(2)).sum();
                    d2.sqrt() <= tol + 1e-9
                })
            })
            .count()
    };
    (near(&ba, &bb) + near(&bb, &ba)) as f64 / (ba.len() + bb.len()) as f64
}

/// Best matching over all injective gt -> pred assignments: most pairs above
/// the threshold, then the largest summed overlap.
fn exhaustive(gt: ArrayView3<u32>, pred: ArrayView3<u32>, measure: OverlapMeasure) -> (usize, usize, usize, f64) {
    let ids = |a: ArrayView3<u32>| {
        let mut v: Vec<u32> = a.iter().copied().filter(|x| *x > 0).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let (g, p) = (ids(gt), ids(pred));
    let size = |a: ArrayView3<u32>, id: u32| a.iter().filter(|v| **v == id).count() as f64;
    let mut ov = vec![vec![None; p.len()]; g.len()];
    for (i, gi) in g.iter().enumerate() {
        for (j, pj) in p.iter().enumerate() {
            let inter = gt.iter().zip(pred.iter()).filter(|(a, b)| **a == *gi && **b == *pj).count() as f64;
            let (a, b) = (size(gt, *gi), size(pred, *pj));
            let dscv = 2.0 * inter / (a + b);
            let o = match measure {
                OverlapMeasure::Dsc => dscv,
                OverlapMeasure::Iou => inter / (a + b - inter),
            };
            if o > 0.5 {
                ov[i][j] = Some((o, dscv));
            }
        }
    }
    fn search(i: usize, used: &mut Vec<bool>, ov: &[Vec<Option<(f64, f64)>>], acc: (usize, f64, f64), best: &mut (usize, f64, f64)) {
        if i == ov.len() {
            if acc.0 > best.0 || (acc.0 == best.0 && acc.1 > best.1 + 1e-12) {
                *best = acc;
            }
            return;
        }
        search(i + 1, used, ov, acc, best);
        for j in 0..used.len() {
            if let (false, Some((o, d))) = (used[j], ov[i][j]) {
                used[j] = true;
                search(i + 1, used, ov, (acc.0 + 1, acc.1 + o, acc.2 + d), best);
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0.0, 0.0);
    search(0, &mut vec![false; p.len()], &ov, (0, 0.0, 0.0), &mut best);
    let tp = best.0;
    let dsc_tp = if tp == 0 { 0.0 } else { best.2 / tp as f64 };
    (tp, p.len() - tp, g.len() - tp, dsc_tp)
}

fn criterion_7() -> Check {
    let mut rng = seeded(7);
    let dims = [12, 12, 8];
    let spacing = [1.0, 0.8, 2.0];
    let mut dsc_tp_cases = 0;
    for case in 0..400 {
        let gt = boxes(dims, rng.random_range(0..=4), &mut rng);
        let pred = if rng.random::<bool>() {
            // a perturbed copy, so matches above 0.5 are common
            let mut p = gt.clone();
            for v in p.iter_mut() {
                if rng.random::<f64>() < 0.1 {
                    *v = 0;
                }
            }
            let extra = boxes(dims, rng.random_range(0..=1), &mut rng);
            for (v, e) in p.iter_mut().zip(extra.iter()) {
                if *e > 0 && *v == 0 {
                    *v = 4;
                }
            }
            p
        } else {
            boxes(dims, rng.random_range(0..=4), &mut rng)
        };
        let (a, b) = (gt.mapv(|v| v > 0), pred.mapv(|v| v > 0));
        let inter = a.iter().zip(b.iter()).filter(|(x, y)| **x && **y).count() as f64;
        let total = (a.iter().filter(|v| **v).count() + b.iter().filter(|v| **v).count()) as f64;
        let want_dsc = if total == 0.0 { 1.0 } else { 2.0 * inter / total };
        ensure!((dsc(a.view(), b.view()) - want_dsc).abs() < 1e-12, "case {case}: DSC");
        for tol in [1.0, 2.0] {
            let (got, want) = (nsd(a.view(), b.view(), spacing, tol), brute_nsd(a.view(), b.view(), spacing, tol));
            ensure!((got - want).abs() < 1e-12, "case {case}: NSD {got} vs {want} at {tol} mm");
        }
        let score = instance_f1_dsctp(gt.view(), pred.view(), &InstanceParams::default());
        let (tp, fp, fn_, dsc_tp) = exhaustive(gt.view(), pred.view(), OverlapMeasure::Dsc);
        ensure!((score.tp, score.fp, score.fn_) == (tp, fp, fn_), "case {case}: counts {:?} vs {:?}", (score.tp, score.fp, score.fn_), (tp, fp, fn_));
        let denom = 2 * tp + fp + fn_;
        let f1 = if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 };
        ensure!((score.f1 - f1).abs() < 1e-12 && (score.dsc_tp - dsc_tp).abs() < 1e-9, "case {case}: F1 or DSC TP");
        dsc_tp_cases += usize::from(tp > 0);
        let iou = InstanceParams { measure: OverlapMeasure::Iou, matching: Matching::Greedy, ..Default::default() };
        let g = instance_f1_dsctp(gt.view(), pred.view(), &iou);
        let (tp, ..) = exhaustive(gt.view(), pred.view(), OverlapMeasure::Iou);
        ensure!(g.tp == tp, "case {case}: greedy IoU matching found {} of {tp}", g.tp);
    }
    // Greedy matching on DSC > 0.5 is not optimal: one prediction can clear
    // the threshold against two objects.
    let mut gt = Array3::<u32>::zeros((1, 1, 22));
    gt.slice_mut(s![0, 0, ..16]).fill(1);
    gt.slice_mut(s![0, 0, 16..]).fill(2);
    let mut pred = Array3::<u32>::zeros((1, 1, 22));
    pred.slice_mut(s![0, 0, 6..]).fill(1);
    pred.slice_mut(s![0, 0, ..6]).fill(2);
    let greedy = InstanceParams { matching: Matching::Greedy, ..Default::default() };
    let (g, o) = (
        instance_f1_dsctp(gt.view(), pred.view(), &greedy).tp,
        instance_f1_dsctp(gt.view(), pred.view(), &InstanceParams::default()).tp,
    );
    ensure!(o == 2 && g == 1, "counterexample: optimal {o}, greedy {g}");
    Ok(format!(
        "400 fixtures: DSC, NSD at 1 and 2 mm, F1 and DSC TP ({dsc_tp_cases} with matches) equal the oracles; \
         greedy on IoU equals exhaustive; greedy on DSC finds 1 of 2 matches on the two-object line"
    ))
}

fn criterion_8() -> Check {
    let kit = Kit::new();
    let params = BenchParams { classes: vec![1, 24], ..Default::default() };
    let out = run_bench(&params, kit.models()).map_err(|e| e.to_string())?;
    let fwd = |n: usize, m: Execution| out.records.iter().find(|r| r.n_classes == n && r.mode == m).unwrap().forwards;
    ensure!(fwd(1, Execution::Sequential) == fwd(1, Execution::Parallel), "N = 1 forward counts differ");
    ensure!(
        fwd(24, Execution::Sequential) == 24 * fwd(24, Execution::Parallel),
        "N = 24: {} sequential vs {} parallel forwards",
        fwd(24, Execution::Sequential),
        fwd(24, Execution::Parallel)
    );
    let s24 = out.summary.iter().find(|s| s.n_classes == 24).unwrap();
    ensure!(out.summary.iter().all(|s| s.outputs_identical == Some(true)), "modes disagree on probabilities");
    let speedup = s24.speedup.unwrap();
    ensure!(speedup >= 5.0, "speedup {speedup:.2} below 5");

    // parallel forwards do not depend on N at a fixed tiling
    let phantom = PhantomSpec::bench(24).map_err(|e| e.to_string())?.generate().map_err(|e| e.to_string())?;
    let queries = resolve_queries(&phantom.prompts, kit.models()).map_err(|e| e.to_string())?;
    let coarse = PipelineConfig { stages: Stages::Coarse, ..PipelineConfig::desk() };
    let one = run_queries(&phantom.volume, &queries.take(1), None, kit.models(), &coarse).map_err(|e| e.to_string())?;
    let all = run_queries(&phantom.volume, &queries, None, kit.models(), &coarse).map_err(|e| e.to_string())?;
    ensure!(one.report.backbone_forwards == all.report.backbone_forwards, "coarse parallel forwards depend on N");
    Ok(format!(
        "N = 24: forwards {} vs {} (24x), {:.0} ms vs {:.0} ms, speedup {speedup:.1}x, per-channel outputs identical",
        fwd(24, Execution::Sequential),
        fwd(24, Execution::Parallel),
        s24.sequential_ms.unwrap(),
        s24.parallel_ms.unwrap()
    ))
}

fn criterion_9() -> Check {
    let kit = Kit::new();
    let p = PhantomSpec::bundled().generate().map_err(|e| e.to_string())?;
    let config = PipelineConfig::desk();
    let text = run(&p.volume, &p.prompts, None, kit.models(), &config).map_err(|e| e.to_string())?;
    let hybrid_config = PipelineConfig { mode: PromptMode::Hybrid, ..config };
    let mut scribbles = Scribbles::zeros(p.prompts.len(), p.volume.dims());
    scribbles.add.assign(&central_scribbles(&p.truth, 2));
    let hybrid = run(&p.volume, &p.prompts, Some(&scribbles), kit.models(), &hybrid_config).map_err(|e| e.to_string())?;
    let n = p.prompts.len() as u16;
    let scores = |labels: &medalseg_core::volume::LabelMap| -> Vec<f64> {
        (1..=n).map(|l| dsc(p.truth.mask(l).view(), labels.mask(l).view())).collect()
    };
    let (a, b) = (scores(&text.labels), scores(&hybrid.labels));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    ensure!(a.iter().all(|v| *v >= 0.5), "text-only per-class DSC {}", fmt(&a));
    let (ma, mb) = (a.iter().sum::<f64>() / a.len() as f64, b.iter().sum::<f64>() / b.len() as f64);
    ensure!(mb >= ma, "hybrid mean DSC {mb:.4} below text-only {ma:.4}");
    Ok(format!("text-only {} (mean {ma:.4}); hybrid {} (mean {mb:.4})", fmt(&a), fmt(&b)))
}

fn criterion_10() -> Check {
    let r = PromptResolver::bundled();
    let cases = [
        ("Left renal structure in CT", InstanceLabel::Anatomy, "Left kidney"),
        ("Myocardium on CT", InstanceLabel::Anatomy, "Heart"),
        ("hepatic lesions in CT", InstanceLabel::Lesion, "Liver lesions"),
        ("Brainstem on head CT", InstanceLabel::Anatomy, "Brainstem"),
    ];
    for (sentence, label, want) in cases {
        let got = r.resolve(sentence, label).map_err(|e| format!("{sentence:?}: {e}"))?;
        ensure!(got.canonical_name == want, "{sentence:?} resolved to {:?}", got.canonical_name);
    }
    let corpus = Corpus::from_json(r#"{"datasets": {"CT_X": {"instance_label": 0, "classes": {"1": {"name": "Myocardium"}}}}}"#)
        .map_err(|e| e.to_string())?;
    let (_, variants) = build_mappings(&corpus).map_err(|e| e.to_string())?;
    ensure!(variants.canonical("myocardium") == Some("Heart"), "corpus variant for Myocardium");
    let fixtures = bundled_fixtures();
    let mut unresolved = Vec::new();
    for f in &fixtures {
        let label = InstanceLabel::try_from(f.instance_label).map_err(|e| e.to_string())?;
        if r.resolve(&f.sentence, label).is_err() {
            unresolved.push(f.sentence.clone());
        }
    }
    ensure!(unresolved.is_empty(), "unresolved fixtures: {unresolved:?}");
    Ok(format!("4 mapping cases, {} fixtures, 0 unresolved", fixtures.len()))
}

fn main() {
    let criteria: [(u32, &str, u64, fn() -> Check); 10] = [
        (1, "spatial prompt generation", 60, criterion_1),
        (2, "iterative masked decoding", 30, criterion_2),
        (3, "post-processing oracle", 60, criterion_3),
        (4, "alignment and prediction", 60, criterion_4),
        (5, "loss gradient", 60, criterion_5),
        (6, "resampling and budget", 60, criterion_6),
        (7, "metrics oracles", 120, criterion_7),
        (8, "parallel vs sequential", 300, criterion_8),
        (9, "end-to-end phantom", 180, criterion_9),
        (10, "text resolution", 60, criterion_10),
    ];
    let mut failed = 0;
    for (id, name, budget, f) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or(e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let took = start.elapsed();
        let result = match result {
            Ok(_) if took > Duration::from_secs(budget) => Err(format!("took {:.1} s, budget {budget} s", took.as_secs_f64())),
            r => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += usize::from(result.is_err());
        println!("criterion {id:>2} {tag} {name} ({:.1} s): {detail}", took.as_secs_f64());
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
