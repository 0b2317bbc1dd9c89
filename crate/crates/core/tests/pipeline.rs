use medalseg_core::decoder::{Counting, ToyBackbone};
use medalseg_core::metrics::dsc;
use medalseg_core::phantom::{central_scribbles, Organ, PhantomSpec};
use medalseg_core::pipeline::*;
use medalseg_core::text::{InstanceLabel, PromptResolver, ToyTextEncoder};
use medalseg_core::Error;

struct Kit {
    toy: Counting<ToyBackbone>,
    enc: ToyTextEncoder,
    resolver: PromptResolver,
}

impl Kit {
    fn new() -> Self {
        Self { toy: Counting::new(ToyBackbone::bundled(0)), enc: ToyTextEncoder::default(), resolver: PromptResolver::bundled() }
    }
    fn models(&self) -> Models<'_> {
        Models { backbone: &self.toy, refiner: &self.toy, encoder: &self.enc, resolver: &self.resolver }
    }
}

/// Three organs in a 32 x 32 x 20 body; quick enough for many runs.
fn small(spacing: [f64; 3]) -> PhantomSpec {
    PhantomSpec {
        dims: [32, 32, 20],
        spacing,
        background_hu: -100.0,
        noise_hu: 10.0,
        seed: 3,
        organs: vec![
            Organ { name: "Liver".into(), center: [10.0, 12.0, 10.0], radii: [7.0, 7.0, 6.0], hu: 60.0 },
            Organ { name: "Spleen".into(), center: [23.0, 10.0, 10.0], radii: [5.0, 5.0, 5.0], hu: 110.0 },
            Organ { name: "Left kidney".into(), center: [22.0, 23.0, 9.0], radii: [4.0, 5.0, 5.0], hu: 180.0 },
        ],
    }
}

fn config() -> PipelineConfig {
    PipelineConfig {
        stage1: StageConfig { spacing: [1.5, 1.5, 3.0], crop: [16, 16, 8] },
        stage2: StageConfig { spacing: [1.0, 1.0, 1.0], crop: [24, 24, 24] },
        ..PipelineConfig::default()
    }
}

#[test]
fn two_stage_run_keeps_the_native_grid() {
    let kit = Kit::new();
    for spacing in [[1.0, 1.0, 1.0], [0.8, 0.9, 2.5]] {
        let p = small(spacing).generate().unwrap();
        let out = run(&p.volume, &p.prompts, None, kit.models(), &config()).unwrap();
        assert_eq!(out.labels.dims(), p.volume.dims());
        assert_eq!(out.labels.spacing(), spacing);
        assert_eq!(out.probabilities.dims(), p.volume.dims());
        assert_eq!(out.probabilities.spacing(), spacing);
        assert_eq!(out.labels.n_classes(), 3);
    }
}

#[test]
fn stage1_uses_the_configured_spacing_and_coarse_mode_skips_stage2() {
    let kit = Kit::new();
    let p = small([1.0; 3]).generate().unwrap();
    let cfg = PipelineConfig { stages: Stages::Coarse, ..config() };
    let out = run(&p.volume, &p.prompts, None, kit.models(), &cfg).unwrap();
    assert_eq!(out.report.stage1_spacing, Some([1.5, 1.5, 3.0]));
    assert_eq!(out.report.stage1_dims, Some([21, 21, 7]));
    let phases: Vec<&str> = out.report.phases_ms.keys().map(String::as_str).collect();
    assert!(phases.contains(&"stage1"));
    assert!(!phases.iter().any(|p| p.starts_with("stage2") || *p == "roi"), "{phases:?}");
    assert!(!out.report.patches.contains_key("stage2"));
    assert!(out.report.stage2_spacing.is_none());
    // sphere centres are found by the coarse pass
    let liver = out.coarse.channel(0);
    assert!(liver[[10, 12, 10]] > 0.5);
}

#[test]
fn text_only_reaches_usable_overlap() {
    let kit = Kit::new();
    let p = small([1.0; 3]).generate().unwrap();
    let out = run(&p.volume, &p.prompts, None, kit.models(), &config()).unwrap();
    for l in 1..=3 {
        let d = dsc(p.truth.mask(l).view(), out.labels.mask(l).view());
        assert!(d >= 0.5, "class {l}: {d}");
    }
    assert!(!out.report.fallback);
    assert!(out.report.roi.is_some());
}

#[test]
fn hybrid_with_empty_scribbles_is_bit_identical() {
    let kit = Kit::new();
    let p = small([1.0; 3]).generate().unwrap();
    let text = run(&p.volume, &p.prompts, None, kit.models(), &config()).unwrap();
    let cfg = PipelineConfig { mode: PromptMode::Hybrid, ..config() };
    let s = Scribbles::zeros(3, p.volume.dims());
    let hybrid = run(&p.volume, &p.prompts, Some(&s), kit.models(), &cfg).unwrap();
    assert_eq!(text.probabilities, hybrid.probabilities);
    assert_eq!(text.labels, hybrid.labels);
    // and re-running stage 2 from the stored coarse maps reproduces it
    let q = resolve_queries(&p.prompts, kit.models()).unwrap();
    let again = refine(&p.volume, &q, &text.coarse, Some(&s), kit.models(), &cfg).unwrap();
    assert_eq!(again.labels, text.labels);
}

#[test]
fn scribbles_recover_a_faint_organ() {
    let kit = Kit::new();
    let mut spec = PhantomSpec::bundled();
    spec.organs[2].hu = 150.0;
    let p = spec.generate().unwrap();
    let text = run(&p.volume, &p.prompts, None, kit.models(), &PipelineConfig::desk()).unwrap();
    let cfg = PipelineConfig { mode: PromptMode::Hybrid, ..PipelineConfig::desk() };
    let mut s = Scribbles::zeros(3, p.volume.dims());
    s.add.assign(&central_scribbles(&p.truth, 2));
    let hybrid = run(&p.volume, &p.prompts, Some(&s), kit.models(), &cfg).unwrap();
    let d = |o: &RunOutput, l: u16| dsc(p.truth.mask(l).view(), o.labels.mask(l).view());
    println!("kidney text {:.3} hybrid {:.3}", d(&text, 3), d(&hybrid, 3));
    assert!(d(&hybrid, 3) >= d(&text, 3) + 0.1);
    let mean = |o: &RunOutput| (1..=3).map(|l| d(o, l)).sum::<f64>() / 3.0;
    assert!(mean(&hybrid) >= mean(&text));
}

#[test]
fn forward_counts_follow_the_execution_mode() {
    let kit = Kit::new();
    let p = small([1.0; 3]).generate().unwrap();
    let mut parallel = Vec::new();
    for n in 1..=3 {
        let prompts = &p.prompts[..n];
        kit.toy.reset();
        let par = run(&p.volume, prompts, None, kit.models(), &config()).unwrap();
        assert_eq!(kit.toy.encodes() as u64, par.report.backbone_forwards);
        assert_eq!(kit.toy.refines() as u64, par.report.head_forwards);
        let patches: usize = par.report.patches.values().sum();
        assert_eq!(par.report.backbone_forwards, patches as u64);
        parallel.push(par.report.backbone_forwards);

        kit.toy.reset();
        let cfg = PipelineConfig { execution: Execution::Sequential, ..config() };
        let seq = run(&p.volume, prompts, None, kit.models(), &cfg).unwrap();
        assert_eq!(kit.toy.encodes() as u64, seq.report.backbone_forwards);
        assert_eq!(seq.report.patches, par.report.patches);
        assert_eq!(seq.report.backbone_forwards, n as u64 * par.report.backbone_forwards);
        assert_eq!(seq.report.head_forwards, n as u64 * par.report.head_forwards);
        assert_eq!(seq.probabilities, par.probabilities, "n = {n}");
        assert_eq!(seq.labels, par.labels);
    }
    // The tiling depends on the ROI, which depends on which organs are asked
    // for; on the coarse pass alone the count is the same for every N.
    let cfg = PipelineConfig { stages: Stages::Coarse, ..config() };
    let counts: Vec<u64> = (1..=3)
        .map(|n| run(&p.volume, &p.prompts[..n], None, kit.models(), &cfg).unwrap().report.backbone_forwards)
        .collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
    assert!(parallel.iter().all(|c| *c > 0));
}

#[test]
fn empty_coarse_pass_falls_back_to_full_volume() {
    let kit = Kit::new();
    let mut spec = small([1.0; 3]);
    spec.organs.clear();
    let p = spec.generate().unwrap();
    let prompts = vec![PromptRequest::new("Liver in CT", InstanceLabel::Anatomy)];
    let out = run(&p.volume, &prompts, None, kit.models(), &config()).unwrap();
    assert!(out.report.fallback);
    assert_eq!(out.report.roi, Some(RoiBox::full(p.volume.dims())));
    assert!(out.report.patches["stage2"] > 0);
    assert_eq!(out.labels.foreground_voxels(), 0);
}

#[test]
fn unresolved_prompts_are_reported_not_fatal() {
    let kit = Kit::new();
    let p = small([1.0; 3]).generate().unwrap();
    let mut prompts = p.prompts.clone();
    prompts.insert(1, PromptRequest::new("Flux capacitor in CT", InstanceLabel::Anatomy));
    prompts.push(PromptRequest::new("the liver please, CT", InstanceLabel::Anatomy));
    let cfg = PipelineConfig { stages: Stages::Coarse, ..config() };
    let out = run(&p.volume, &prompts, None, kit.models(), &cfg).unwrap();
    assert_eq!(out.report.classes.len(), 3);
    assert_eq!(out.report.classes[0].sentences.len(), 2);
    assert_eq!(out.report.unresolved.len(), 1);
    assert_eq!(out.report.unresolved[0].sentence, "Flux capacitor in CT");
    let bad = vec![PromptRequest::new("Flux capacitor in CT", InstanceLabel::Anatomy)];
    assert!(matches!(run(&p.volume, &bad, None, kit.models(), &cfg), Err(Error::UnresolvedClass { .. })));
    assert!(run(&p.volume, &[], None, kit.models(), &cfg).is_err());
}

#[test]
fn gt_prompts_beat_empty_prompts_in_stage2() {
    let kit = Kit::new();
    let p = small([1.0; 3]).generate().unwrap();
    let cfg = config();
    let q = resolve_queries(&p.prompts, kit.models()).unwrap();
    let image = prepare_volume(&p.volume, &cfg).unwrap();
    let gt = labels_to_prompts(&p.truth, 3);
    let zero = ndarray::Array4::<f32>::zeros(gt.raw_dim());
    let mut r = RunReport::default();
    let with_gt = stage2_fine(&image, &q, &gt, &zero, kit.models(), &cfg, &mut r).unwrap();
    let mut r0 = RunReport::default();
    let without = stage2_fine(&image, &q, &zero, &zero, kit.models(), &cfg, &mut r0).unwrap();
    assert!(r0.fallback && !r.fallback);
    let dsc_of = |a: ndarray::Array4<f32>| -> Vec<f64> {
        let pm = medalseg_core::ProbabilityMap::new(a, vec![1, 2, 3], [1.0; 3]).unwrap();
        let l = medalseg_core::postproc::argmax_labelmap(&pm, 0.5);
        (1..=3).map(|k| dsc(p.truth.mask(k).view(), l.mask(k).view())).collect()
    };
    let (a, b) = (dsc_of(with_gt), dsc_of(without));
    for k in 0..3 {
        assert!(a[k] >= b[k], "class {}: gt {} < none {}", k + 1, a[k], b[k]);
    }
}
