//! Manual probe: stage-3 stability under augmentation variants. Run with
//! `cargo test -p tsvos-core --test stage3_probe -- --ignored --nocapture`.

use tsvos_core::metrics::dice;
use tsvos_core::pseudo::{pseudo_label_dataset, ModelSegmenter};
use tsvos_core::rng::{derive, purpose};
use tsvos_core::synth::{generate, pick_labeled_indices, SubsampleStrategy, SyntheticSpec};
use tsvos_core::trainer::{evaluate_first_frame, train_stage1, train_stage3, TrainVideo};
use tsvos_core::types::{Config, Mask, Split, VideoSample};

#[test]
#[ignore]
fn stage3_variants() {
    let spec = SyntheticSpec {
        n_videos: 20,
        test_fraction: 0.25,
        ..SyntheticSpec::default()
    };
    let mut two_shot = Vec::new();
    let mut test = Vec::new();
    for (i, v) in generate(&spec).unwrap().into_iter().enumerate() {
        let t = v.frames.len();
        match v.split {
            Split::Train => {
                let mut rng = derive(spec.rng_seed, &[purpose::SUBSAMPLE, i as u64]);
                let labeled = pick_labeled_indices(t, SubsampleStrategy::Stratified, &mut rng);
                let hidden: Vec<Option<Mask>> = v
                    .masks
                    .iter()
                    .cloned()
                    .enumerate()
                    .map(|(j, m)| (j == labeled.0 || j == labeled.1).then_some(m))
                    .collect();
                two_shot.push((
                    TrainVideo {
                        id: v.id.clone(),
                        sample: VideoSample::new(v.frames.clone(), hidden, labeled).unwrap(),
                    },
                    v.masks,
                ));
            }
            Split::Test => test.push(TrainVideo {
                id: v.id,
                sample: VideoSample::new(
                    v.frames,
                    v.masks.into_iter().map(Some).collect(),
                    (0, t - 1),
                )
                .unwrap(),
            }),
        }
    }
    let train: Vec<TrainVideo> = two_shot.iter().map(|(v, _)| v.clone()).collect();
    let gt_masks: Vec<&Vec<Mask>> = two_shot.iter().map(|(_, m)| m).collect();

    let cfg = Config {
        iters_stage1: 800,
        iters_stage3: 800,
        rng_seed: 12,
        workers: 2,
        ..Config::default()
    };
    let teacher = train_stage1(&train, &cfg).unwrap();
    let jf_teacher = evaluate_first_frame(&test, &teacher.model, &cfg).unwrap().mean.jf;

    let named: Vec<(String, VideoSample)> = train
        .iter()
        .map(|v| (v.id.clone(), v.sample.clone()))
        .collect();
    let segmenter = ModelSegmenter {
        state: &teacher.model,
        memory_every: cfg.memory_every,
        memory_capacity: cfg.memory_capacity,
    };
    let (labelsets, _) = pseudo_label_dataset(
        &named,
        &segmenter,
        cfg.binarize_threshold,
        cfg.merge_rule,
        cfg.workers,
    )
    .unwrap();
    // pseudo-label quality against the hidden ground truth
    let mut q = 0.0;
    let mut n = 0;
    for ((_, labels), full) in labelsets.iter().zip(gt_masks.iter()) {
        for (m, g) in labels.masks.iter().zip(full.iter()) {
            q += dice(m, g).unwrap();
            n += 1;
        }
    }
    println!(
        "teacher J&F {jf_teacher:.1}; pseudo-label train DSC {:.3}",
        q / n as f64
    );
    let labels: Vec<_> = labelsets.into_iter().map(|(_, l)| l).collect();

    let variants: Vec<(&str, Box<dyn Fn(&mut Config)>)> = vec![
        ("default", Box::new(|_c: &mut Config| {})),
        ("no strong ops", Box::new(|c: &mut Config| c.strong_op_prob = 0.0)),
        (
            "mild strong",
            Box::new(|c: &mut Config| {
                c.strong_op_prob = 0.25;
                c.cutout_area_min = 0.05;
                c.cutout_area_max = 0.15;
            }),
        ),
        ("warm start", Box::new(|c: &mut Config| c.student_warm_start = true)),
        (
            "warm + mild",
            Box::new(|c: &mut Config| {
                c.student_warm_start = true;
                c.strong_op_prob = 0.25;
                c.cutout_area_min = 0.05;
                c.cutout_area_max = 0.15;
            }),
        ),
        ("no stcs stage3", Box::new(|c: &mut Config| c.stcs_stage3 = false)),
    ];
    for (name, tweak) in variants {
        let mut c = cfg.clone();
        tweak(&mut c);
        let (student, report) = train_stage3(&train, &labels, Some(&teacher.model), &c).unwrap();
        let jf = evaluate_first_frame(&test, &student, &c).unwrap().mean.jf;
        println!(
            "stage3 [{name}]: J&F {jf:.1} (final seg {:.4})",
            report.final_loss_seg
        );
    }
}
