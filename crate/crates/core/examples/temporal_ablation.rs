//! Temporal-modelling ablation on order-dependent categories: each pair of
//! categories shows the same two concepts in opposite orders, so only a
//! model that sees frame order can tell them apart.

use vidprompt::experiment::{eval_closed_set, train_closed_set, Workspace};
use vidprompt::presets;

fn main() -> anyhow::Result<()> {
    let config = presets::ordered();
    let base = Workspace::<f32>::prepare(&config)?;
    for depth in [0, 2] {
        let mut model = config.model;
        model.temporal_depth = depth;
        let mut ws = base.variant(model)?;
        let mut opt = ws.optimizer();
        let losses = train_closed_set(&mut ws, &mut opt, config.train.steps)?;
        let top1 = eval_closed_set(&ws)?[0].value;
        println!("TFM={depth}: final loss {:.4}, held-out TOP1 {top1:.3}", losses.last().unwrap().loss);
    }
    Ok(())
}
