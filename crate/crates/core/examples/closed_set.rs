//! Closed-set recognition: learn prompts and a temporal encoder on eight
//! synthetic categories, then report held-out TOP1/TOP5 before and after.

use vidprompt::experiment::{eval_closed_set, train_closed_set, Workspace};
use vidprompt::presets;

fn main() -> anyhow::Result<()> {
    let config = presets::closed_set();
    let mut ws = Workspace::<f32>::prepare(&config)?;
    let show = |label: &str, m: &[vidprompt::report::MetricRecord]| {
        let parts: Vec<String> = m.iter().map(|r| format!("{} {:.3}", r.metric, r.value)).collect();
        println!("{label:<10} {}", parts.join("  "));
    };
    show("untrained", &eval_closed_set(&ws)?);

    let mut opt = ws.optimizer();
    let losses = train_closed_set(&mut ws, &mut opt, config.train.steps)?;
    for r in losses.iter().step_by(100).chain(losses.last()) {
        println!("step {:4}  loss {:.4}", r.step, r.loss);
    }
    show("trained", &eval_closed_set(&ws)?);
    Ok(())
}
