use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use proptest::prelude::*;

use podcount::detection::{
    Annotations, BBox, CountResult, Detection, Domain, ImageRecord, InstanceAnnotation, Mask, SppClass,
};
use podcount::evaluation::{mae, CountSeries};
use podcount::pipelines::{
    count_indoor, count_outdoor, count_outdoor_sam, ClassifierBackend, DetectorBackend, Frame, FullMaskSegmenter,
    OracleClassifier, OracleDetector, OracleSegmenter, PipelineConfig, SegmenterBackend,
};
use podcount::Result;

const W: u32 = 80;
const H: u32 = 60;

fn spp(v: u8) -> SppClass {
    SppClass::new(v).unwrap()
}

/// Pixel rectangles `[x0, x1) x [y0, y1)` on a 10-pixel grid, so they never overlap.
fn grid_rect(i: usize) -> (u32, u32, u32, u32) {
    let (gx, gy) = ((i % 8) as u32, (i / 8) as u32);
    (gx * 10 + 2, gy * 10 + 2, gx * 10 + 8, gy * 10 + 8)
}

/// Gray image with a colored block under every rectangle, and the boxes as truth.
fn box_scene(id: &str, classes: &[u8]) -> (Frame, ImageRecord) {
    let mut image = RgbImage::from_pixel(W, H, Rgb([90, 90, 90]));
    let mut dets = Vec::new();
    for (i, &c) in classes.iter().enumerate() {
        let (x0, y0, x1, y1) = grid_rect(i);
        for y in y0..y1 {
            for x in x0..x1 {
                image.put_pixel(x, y, Rgb([200, 40 * c, 30]));
            }
        }
        let b = BBox::from_pixel_rect(x0.into(), y0.into(), x1.into(), y1.into(), W, H).unwrap();
        dets.push(Detection::labeled(b, spp(c)));
    }
    let record = ImageRecord {
        image_id: id.into(),
        path: PathBuf::from(format!("{id}.png")),
        width: W,
        height: H,
        domain: Domain::Source,
        annotations: Annotations::Boxes(dets),
    };
    (Frame { image_id: id.into(), image }, record)
}

fn truth(records: &[&ImageRecord]) -> Arc<HashMap<String, ImageRecord>> {
    Arc::new(records.iter().map(|r| (r.image_id.clone(), (*r).clone())).collect())
}

fn oracle(records: &[&ImageRecord], visible_only: bool) -> OracleDetector {
    OracleDetector { truth: truth(records), visible_only, fill: [0, 0, 0] }
}

/// Foreground is a fixed mask whatever the prompts.
struct FixedMaskSegmenter(Mask);

impl SegmenterBackend for FixedMaskSegmenter {
    fn name(&self) -> String {
        "fixed-mask".into()
    }

    fn segment_from_points(&self, _: &Frame, _: &[[f64; 2]]) -> Result<Mask> {
        Ok(self.0.clone())
    }

    fn segment_instances(&self, _: &Frame) -> Result<Vec<(Mask, f64)>> {
        Ok(vec![(self.0.clone(), 1.0)])
    }
}

/// Reports 3 whenever the wrapped classifier says 2.
struct TwoAsThree(OracleClassifier);

impl ClassifierBackend for TwoAsThree {
    fn name(&self) -> String {
        "two-as-three".into()
    }

    fn classify(&self, frame: &Frame, crop: &RgbImage, mask: &Mask, origin: (u32, u32)) -> Result<SppClass> {
        let c = self.0.classify(frame, crop, mask, origin)?;
        Ok(if c.value() == 2 { spp(3) } else { c })
    }
}

fn classes() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(1u8..=4, 0..40)
}

#[test]
fn full_mask_sam_matches_plain_detection() {
    let cfg = PipelineConfig::default();
    for classes in [vec![], vec![1], vec![4, 3, 2, 1, 1, 2], (0..40).map(|i| 1 + (i % 4) as u8).collect()] {
        let (frame, record) = box_scene("a", &classes);
        for visible_only in [false, true] {
            let det = oracle(&[&record], visible_only);
            let plain = count_outdoor(&frame, &det).unwrap();
            assert_eq!(count_outdoor_sam(&frame, &det, &FullMaskSegmenter, &cfg).unwrap(), plain);
            assert_eq!(plain, record.annotations.count());
        }
    }
}

#[test]
fn empty_foreground_hides_every_pod() {
    let (frame, record) = box_scene("a", &[1, 2, 3, 4, 2]);
    let det = oracle(&[&record], true);
    let seg = FixedMaskSegmenter(Mask::new(W, H));
    let c = count_outdoor_sam(&frame, &det, &seg, &PipelineConfig::default()).unwrap();
    assert_eq!(c, CountResult::default());
}

#[test]
fn background_removal_drops_exactly_the_distractors() {
    // the last three boxes lie outside the segmented foreground
    let classes = [2, 3, 1, 4, 2, 2, 3, 1, 1, 2];
    let distractors = 3;
    let kept = classes.len() - distractors;
    let (frame, record) = box_scene("a", &classes);
    let fg = Mask::from_fn(W, H, |x, y| {
        (0..kept).any(|i| {
            let (x0, y0, x1, y1) = grid_rect(i);
            (x0..x1).contains(&x) && (y0..y1).contains(&y)
        })
    });
    let det = oracle(&[&record], true);
    let step1 = count_outdoor(&frame, &det).unwrap();
    let step3 = count_outdoor_sam(&frame, &det, &FixedMaskSegmenter(fg), &PipelineConfig::default()).unwrap();
    assert_eq!(step1.pod_count - step3.pod_count, distractors as u64);
    assert_eq!(step3, CountResult::from_classes(classes[..kept].iter().map(|&c| spp(c))));
}

#[test]
fn misclassifying_two_as_three_moves_only_seeds() {
    let instances: Vec<InstanceAnnotation> = (0..5)
        .map(|i| {
            let (x0, y0, x1, y1) = grid_rect(i * 2);
            let (x0, y0, x1, y1) = (f64::from(x0), f64::from(y0), f64::from(x1), f64::from(y1));
            InstanceAnnotation::new(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]], spp(2), W, H).unwrap()
        })
        .collect();
    let record = ImageRecord {
        image_id: "pods".into(),
        path: PathBuf::from("pods.png"),
        width: W,
        height: H,
        domain: Domain::Source,
        annotations: Annotations::Instances(instances),
    };
    let frame = Frame { image_id: "pods".into(), image: RgbImage::from_pixel(W, H, Rgb([120, 160, 60])) };
    let t = truth(&[&record]);
    let seg = OracleSegmenter { truth: t.clone() };
    let exact = count_indoor(&frame, &seg, &OracleClassifier { truth: t.clone() }).unwrap();
    assert_eq!(exact, CountResult { pod_count: 5, seed_count: 10 });
    let wrong = count_indoor(&frame, &seg, &TwoAsThree(OracleClassifier { truth: t })).unwrap();
    assert_eq!(wrong, CountResult { pod_count: 5, seed_count: 15 });
    let gt = record.annotations.count();
    let pods = CountSeries::from_counts(&[wrong.pod_count], &[gt.pod_count]).unwrap();
    let seeds = CountSeries::from_counts(&[wrong.seed_count], &[gt.seed_count]).unwrap();
    assert_eq!(mae(&pods).unwrap(), 0.0);
    assert_eq!(mae(&seeds).unwrap(), 5.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn outdoor_count_ignores_detection_order(classes in classes(), rotate in 0usize..40) {
        let (frame, record) = box_scene("a", &classes);
        let mut shuffled = record.clone();
        if let Annotations::Boxes(b) = &mut shuffled.annotations {
            if !b.is_empty() {
                let k = rotate % b.len();
                b.rotate_left(k);
                b.reverse();
            }
        }
        let a = count_outdoor(&frame, &oracle(&[&record], false)).unwrap();
        let b = count_outdoor(&frame, &oracle(&[&shuffled], false)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn indoor_pod_count_does_not_depend_on_the_classifier(n in 0usize..12) {
        let instances: Vec<InstanceAnnotation> = (0..n)
            .map(|i| {
                let (x0, y0, x1, y1) = grid_rect(i * 3 % 40);
                let (x0, y0, x1, y1) = (f64::from(x0), f64::from(y0), f64::from(x1), f64::from(y1));
                InstanceAnnotation::new(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]], spp(1 + (i % 4) as u8), W, H).unwrap()
            })
            .collect();
        let record = ImageRecord {
            image_id: "p".into(),
            path: PathBuf::from("p.png"),
            width: W,
            height: H,
            domain: Domain::Source,
            annotations: Annotations::Instances(instances),
        };
        let frame = Frame { image_id: "p".into(), image: RgbImage::new(W, H) };
        let t = truth(&[&record]);
        let seg = OracleSegmenter { truth: t.clone() };
        let a = count_indoor(&frame, &seg, &OracleClassifier { truth: t.clone() }).unwrap();
        let b = count_indoor(&frame, &seg, &TwoAsThree(OracleClassifier { truth: t })).unwrap();
        prop_assert_eq!(a.pod_count, n as u64);
        prop_assert_eq!(b.pod_count, n as u64);
        prop_assert!(b.seed_count >= a.seed_count);
    }
}

#[test]
fn detector_trait_objects_share_across_threads() {
    let (frame, record) = box_scene("a", &[1, 2, 3]);
    let det: Arc<dyn DetectorBackend> = Arc::new(oracle(&[&record], false));
    let counts: Vec<CountResult> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..4).map(|_| s.spawn(|| count_outdoor(&frame, det.as_ref()).unwrap())).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(counts.iter().all(|c| *c == CountResult { pod_count: 3, seed_count: 6 }));
}
