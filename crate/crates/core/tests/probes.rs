use modality_lab::model::{Intervention, Model, ModelConfig};
use modality_lab::probes::{
    cosine_stats, linear_probe_cv, sample_embeddings, separation_report, stratified_folds, EmbeddingSample,
    SEPARATION_CSV_HEADER,
};
use modality_lab::seed::{rng_from_seed, stream_rng};
use modality_lab::world::{Modality, SampleOptions, TokenClass, World, WorldConfig};
use modality_lab::LabError;
use proptest::prelude::*;
use rand::Rng;

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn blobs(n_per_class: usize, d: usize, gap: f64, seed: u64) -> Vec<EmbeddingSample> {
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::new();
    for i in 0..2 * n_per_class {
        let m = if i % 2 == 0 { Modality::Image } else { Modality::Caption };
        let shift = if m == Modality::Image { gap / 2.0 } else { -gap / 2.0 };
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
        v[0] += shift;
        out.push(EmbeddingSample {
            vector: v,
            modality: m,
            episode: i / 2,
            position: 0,
        });
    }
    out
}

fn world_and_model() -> (World, Model<f32>) {
    let w = World::new(WorldConfig::default()).unwrap();
    let m = Model::init(ModelConfig {
        vocab_size: w.vocab().size(),
        ..ModelConfig::default()
    })
    .unwrap();
    (w, m)
}

#[test]
fn samples_come_from_the_content_spans_at_boundary_zero() {
    let (w, m) = world_and_model();
    let s = sample_embeddings(&m, &w, 30, 9).unwrap();
    assert_eq!(s.len(), 60);
    for pair in s.chunks(2) {
        assert_eq!(pair[0].modality, Modality::Image);
        assert_eq!(pair[1].modality, Modality::Caption);
        let i = pair[0].episode;
        let ep = w
            .sample_episode(&mut stream_rng(9, i as u64), &SampleOptions::default())
            .unwrap();
        let p = w.assemble_prompt(&ep).unwrap();
        let positions = [pair[0].position, pair[1].position];
        let trace = m.forward(&p.tokens, &positions, &Intervention::None).unwrap().trace;
        for smp in pair {
            let span = p.spans.content(smp.modality);
            assert!(span.positions().contains(&smp.position));
            let v: Vec<f64> = trace.get(0, smp.position).unwrap().iter().map(|x| f64::from(*x)).collect();
            assert_eq!(v, smp.vector);
        }
        assert_eq!(w.vocab().class_of(p.tokens[pair[0].position]), Some(TokenClass::ImageContent));
        assert_eq!(w.vocab().class_of(p.tokens[pair[1].position]), Some(TokenClass::TextFiller));
    }
    assert_eq!(s, sample_embeddings(&m, &w, 30, 9).unwrap());
}

#[test]
fn identical_vectors_have_unit_cosine() {
    let v = vec![0.3, -1.0, 2.0];
    let s: Vec<EmbeddingSample> = (0..6)
        .map(|i| EmbeddingSample {
            vector: v.clone(),
            modality: if i < 3 { Modality::Image } else { Modality::Caption },
            episode: i,
            position: 0,
        })
        .collect();
    let c = cosine_stats(&s).unwrap();
    for x in [c.within_image, c.within_caption, c.within_mean, c.cross] {
        assert!((x - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_vector_is_a_numeric_error() {
    let mut s = blobs(3, 4, 1.0, 1);
    s[0].vector = vec![0.0; 4];
    assert!(matches!(cosine_stats(&s), Err(LabError::Numeric { .. })));
}

#[test]
fn cosine_stats_match_a_direct_computation() {
    let s = blobs(7, 5, 2.0, 4);
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    // Ordered pairs, halved: a different enumeration from the library's.
    let (mut wi, mut ni, mut cr, mut nc) = (0.0, 0.0, 0.0, 0.0);
    for a in &s {
        for b in &s {
            if std::ptr::eq(a, b) {
                continue;
            }
            let c = cos(&a.vector, &b.vector);
            if a.modality == Modality::Image && b.modality == Modality::Image {
                wi += c;
                ni += 1.0;
            } else if a.modality != b.modality {
                cr += c;
                nc += 1.0;
            }
        }
    }
    let got = cosine_stats(&s).unwrap();
    assert!((got.within_image - wi / ni).abs() < 1e-12);
    assert!((got.cross - cr / nc).abs() < 1e-12);
}

#[test]
fn untrained_embeddings_have_near_zero_cross_similarity() {
    let (w, m) = world_and_model();
    let s = sample_embeddings(&m, &w, 200, 3).unwrap();
    let c = cosine_stats(&s).unwrap();
    assert!(c.cross.abs() < 0.1, "cross {}", c.cross);
}

#[test]
fn separated_blobs_are_probed_perfectly_and_control_is_near_chance() {
    let s = blobs(100, 16, 10.0, 2);
    let (acc, std) = linear_probe_cv(&s, 3, false, 5).unwrap();
    assert_eq!(acc, 1.0);
    assert_eq!(std, 0.0);
    let (ctrl, _) = linear_probe_cv(&s, 3, true, 5).unwrap();
    assert!((0.35..=0.65).contains(&ctrl), "control {ctrl}");
}

#[test]
fn control_is_centred_at_chance_over_permutations() {
    let s = blobs(60, 8, 10.0, 8);
    let r = separation_report(&s, 3, 50, 17).unwrap();
    assert!((r.control_acc_mean - 0.5).abs() <= 0.05, "control mean {}", r.control_acc_mean);
    assert_eq!(r.probe_acc_mean, 1.0);
    let csv = r.to_csv();
    assert!(csv.starts_with(SEPARATION_CSV_HEADER));
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn single_class_folds_are_rejected() {
    let mut s = blobs(10, 3, 1.0, 3);
    // Only two caption samples for three folds.
    let mut kept = 0;
    s.retain(|x| {
        if x.modality == Modality::Caption {
            kept += 1;
            kept <= 2
        } else {
            true
        }
    });
    assert!(matches!(linear_probe_cv(&s, 3, false, 1), Err(LabError::Domain(_))));
}

#[test]
fn folds_are_stratified() {
    let labels: Vec<bool> = (0..31).map(|i| i % 3 == 0).collect();
    let f = stratified_folds(&labels, 3, 4).unwrap();
    for k in 0..3 {
        let pos = (0..31).filter(|i| f[*i] == k && labels[*i]).count();
        let neg = (0..31).filter(|i| f[*i] == k && !labels[*i]).count();
        assert!((3..=4).contains(&pos), "fold {k} positives {pos}");
        assert!((6..=7).contains(&neg), "fold {k} negatives {neg}");
    }
}

fn random_rotation(d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn probe_accuracy_is_rotation_invariant(seed in 0u64..10_000, gap in 0.5f64..3.0) {
        let s = blobs(24, 6, gap, seed);
        let r = random_rotation(6, seed ^ 0xABCD);
        let rotated: Vec<EmbeddingSample> = s
            .iter()
            .map(|x| EmbeddingSample {
                vector: r.iter().map(|row| row.iter().zip(&x.vector).map(|(a, b)| a * b).sum()).collect(),
                ..x.clone()
            })
            .collect();
        let a = linear_probe_cv(&s, 3, false, seed).unwrap();
        let b = linear_probe_cv(&rotated, 3, false, seed).unwrap();
        prop_assert!((a.0 - b.0).abs() < 1e-12, "{:?} vs {:?}", a, b);
    }
}
