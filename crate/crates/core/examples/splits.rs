//! Synthetic data and the evaluation splits built on it: category names,
//! few-shot episodes, zero-shot category splits, and the division of
//! multi-label untrimmed videos between split sides.

use vidprompt::data::{divide_multilabel_videos, sample_few_shot_episode, split_zero_shot, TaskKind};
use vidprompt::experiment::Workspace;
use vidprompt::presets;
use vidprompt::rng::derive;

fn main() -> anyhow::Result<()> {
    let config = presets::closed_set();
    let ws = Workspace::<f32>::prepare(&config)?;
    let d = &ws.dataset;
    println!("{} categories: {}", d.category_names.len(), d.category_names.join(", "));
    println!("{} train / {} val videos, e.g. {} with {} frames", d.train.len(), d.val.len(), d.train[0].id, d.train[0].num_frames());

    let ep = sample_few_shot_episode(&d.train, 5, 2, &mut derive(config.seed, "example.episode", 0))?;
    println!("5-way 2-shot episode: categories {:?}, {} support, {} query", ep.categories, ep.support.len(), ep.query.len());

    let categories: Vec<usize> = (0..d.category_names.len()).collect();
    let split = split_zero_shot(&categories, 0.5, config.seed, &mut derive(config.seed, "example.split", 0))?;
    println!("zero-shot split: train {:?}, val {:?}", split.train_categories, split.val_categories);

    let loc = Workspace::<f32>::prepare(&presets::localisation())?;
    assert_eq!(loc.config.data.synthetic.task, TaskKind::Localisation);
    let categories: Vec<usize> = (0..loc.dataset.category_names.len()).collect();
    let split = split_zero_shot(&categories, 0.75, 0, &mut derive(0, "example.loc-split", 0))?;
    let (train, val) = divide_multilabel_videos(&loc.dataset.train, &split)?;
    println!(
        "localisation: {} timelines become {} train-side and {} val-side videos",
        loc.dataset.train.len(),
        train.len(),
        val.len()
    );
    Ok(())
}
