//! Zero-shot recognition. Frames show the "video" sense of each category
//! name, which the bare name does not reach; writing "video" in front of the
//! name does. Prompts learned on eight categories are scored on the four
//! unseen ones over three random splits, next to both hand-written forms.

use vidprompt::experiment::{zero_shot_protocol, zero_shot_split, Workspace};
use vidprompt::presets;

fn main() -> anyhow::Result<()> {
    let config = presets::zero_shot();
    let ws = Workspace::<f32>::prepare(&config)?;
    let mut bare = config.model;
    bare.prompt_k = 0;
    let bare = ws.variant(bare)?;
    let mut hand = bare.clone();
    hand.dataset.category_names = hand.dataset.category_names.iter().map(|n| format!("video {n}")).collect();

    println!("split  {:>12} {:>12} {:>12}", "name", "video name", "prompts");
    for trial in 0..3 {
        let split = zero_shot_split(&ws, trial)?;
        let top1 = |w: &Workspace<f32>, steps| -> anyhow::Result<f64> {
            Ok(zero_shot_protocol(w, &split, steps, trial)?.value("top1", "zero-shot").unwrap())
        };
        println!(
            "{trial:>5}  {:>12.3} {:>12.3} {:>12.3}",
            top1(&bare, 0)?,
            top1(&hand, 0)?,
            top1(&ws, config.train.steps)?
        );
        let unseen: Vec<usize> = split.val_categories.iter().copied().collect();
        println!("       unseen: {}", ws.category_names(&unseen).join(", "));
    }
    Ok(())
}
