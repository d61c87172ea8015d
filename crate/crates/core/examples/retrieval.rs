//! Text-to-video retrieval with `[4 + X + 4]` prompts: every video comes
//! with a sentence naming its concept plus filler words. Reports R@K and
//! median rank on held-out videos.

use vidprompt::experiment::{eval_retrieval, train_retrieval, Workspace};
use vidprompt::presets;

fn main() -> anyhow::Result<()> {
    let config = presets::retrieval();
    let mut ws = Workspace::<f32>::prepare(&config)?;
    println!("example query: {:?}", ws.dataset.val[0].label);
    let (before, _) = eval_retrieval(&ws)?;
    let mut opt = ws.optimizer();
    train_retrieval(&mut ws, &mut opt, config.train.steps)?;
    let (after, _) = eval_retrieval(&ws)?;
    println!("{} held-out query/video pairs", after.ranks.len());
    for (label, r) in [("before", &before), ("after", &after)] {
        println!("{label:<7} R@1 {:.3}  R@5 {:.3}  R@10 {:.3}  MdR {}", r.recall_at_1, r.recall_at_5, r.recall_at_10, r.median_rank);
    }
    Ok(())
}
