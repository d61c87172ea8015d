//! Few-shot recognition: 5-way 5-shot episodes over the pooled videos, and
//! the all-category variant with five shots per category.

use vidprompt::experiment::{all_way_few_shot_protocol, few_shot_protocol, Workspace};
use vidprompt::presets;

fn main() -> anyhow::Result<()> {
    let mut config = presets::closed_set();
    config.eval.few_shot_steps = 100;
    let ws = Workspace::<f32>::prepare(&config)?;

    let episodes = few_shot_protocol(&ws, 5, 5, 10)?;
    let per_trial: Vec<String> =
        episodes.metrics.iter().filter(|m| m.metric == "top1").map(|m| format!("{:.2}", m.value)).collect();
    println!("5-way 5-shot, 10 episodes: TOP1 per episode [{}]", per_trial.join(" "));
    println!("mean TOP1 {:.3}", episodes.value("top1", "query").unwrap_or(f64::NAN));

    let all_way = all_way_few_shot_protocol(&ws, 5, 3)?;
    for ((metric, split), (mean, n)) in vidprompt::report::summarize(&all_way.metrics) {
        println!("all-way 5-shot {metric} [{split}] over {n} rounds: {mean:.3}");
    }
    Ok(())
}
