//! Second-stage action localisation on untrimmed synthetic timelines:
//! classify given proposals with generated classifiers, apply Soft-NMS, and
//! report mAP over IoU thresholds, AR@AN and proposal accuracy.

use vidprompt::experiment::{localisation_closed_set, ProposalSource, Workspace};
use vidprompt::presets;

fn main() -> anyhow::Result<()> {
    let config = presets::localisation();
    for (label, source) in [("planted", ProposalSource::Planted), ("jittered", ProposalSource::JitteredGt { noise: 0.15 })] {
        let mut ws = Workspace::<f32>::prepare(&config)?;
        let result = localisation_closed_set(&mut ws, source)?;
        println!("{label} proposals:");
        for m in &result.metrics {
            println!("  {:<14} {:.4}", m.metric, m.value);
        }
    }
    Ok(())
}
