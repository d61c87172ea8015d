//! Soft-NMS, mAP over IoU thresholds, and AR@AN on a hand-made example with
//! two overlapping detections of one action.

use vidprompt::metrics::{
    average_recall_at_an, detection_map, soft_nms, thumos_iou_set, thumos_recall_grid, Detection, GroundTruthInstance,
    SoftNmsDecay, VideoProposals,
};
use vidprompt::video::Proposal;

fn det(start: f64, end: f64, class: usize, confidence: f64) -> Detection {
    Detection { video_id: "v0".into(), proposal: Proposal::new(start, end, confidence), class, confidence }
}

fn main() -> anyhow::Result<()> {
    let gt = vec![
        GroundTruthInstance { video_id: "v0".into(), class: 0, start: 0.10, end: 0.30 },
        GroundTruthInstance { video_id: "v0".into(), class: 1, start: 0.50, end: 0.80 },
    ];
    let dets = vec![det(0.10, 0.30, 0, 0.9), det(0.12, 0.32, 0, 0.8), det(0.50, 0.78, 1, 0.7), det(0.0, 0.05, 1, 0.6)];

    let kept = soft_nms(&dets, 0.5, SoftNmsDecay::Linear);
    println!("after Soft-NMS (threshold 0.5):");
    for d in &kept {
        println!("  class {} [{:.2}, {:.2}] confidence {:.3}", d.class, d.proposal.start, d.proposal.end, d.confidence);
    }
    let thresholds = thumos_iou_set();
    let report = detection_map(&kept, &gt, &thresholds)?;
    for (t, m) in report.thresholds.iter().zip(&report.map) {
        println!("mAP@{t:.1} = {m:.3}");
    }
    println!("average mAP {:.3}", report.average);

    let proposals = vec![VideoProposals { video_id: "v0".into(), proposals: dets.iter().map(|d| d.proposal).collect() }];
    for an in [1, 2, 4] {
        println!("AR@{an} = {:.3}", average_recall_at_an(&proposals, &gt, an, &thumos_recall_grid())?);
    }
    Ok(())
}
