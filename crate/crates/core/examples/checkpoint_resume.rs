//! Save a checkpoint mid-training, reload it, and finish the run: the final
//! parameters match an uninterrupted run bit for bit.

use vidprompt::checkpoint::{hex, Checkpoint};
use vidprompt::experiment::{train_closed_set, Workspace};
use vidprompt::presets;

fn main() -> anyhow::Result<()> {
    let mut config = presets::closed_set();
    config.train.steps = 60;
    let hash = config.hash();
    let dir = tempdir()?;

    let mut full = Workspace::<f32>::prepare(&config)?;
    let mut opt = full.optimizer();
    train_closed_set(&mut full, &mut opt, 60)?;
    let uninterrupted = Checkpoint::new(&full.store, Some(&opt), hash).to_bytes();

    let mut ws = Workspace::<f32>::prepare(&config)?;
    let mut opt = ws.optimizer();
    train_closed_set(&mut ws, &mut opt, 25)?;
    let path = dir.join("step25.ckpt");
    Checkpoint::new(&ws.store, Some(&opt), hash).save(&path)?;
    println!("saved step {} ({} bytes), config {}", opt.step, std::fs::metadata(&path)?.len(), &hex(&hash)[..12]);

    let ck = Checkpoint::<f32>::load_for_resume(&path, hash)?;
    let mut resumed = Workspace::<f32>::prepare(&config)?;
    resumed.store = ck.params.clone();
    let mut opt = ck.optimizer(config.train.optimizer());
    train_closed_set(&mut resumed, &mut opt, 35)?;
    let bytes = Checkpoint::new(&resumed.store, Some(&opt), hash).to_bytes();
    println!("resumed to step {}: identical to uninterrupted run = {}", opt.step, bytes == uninterrupted);

    let mut other = config.clone();
    other.train.learning_rate *= 2.0;
    match Checkpoint::<f32>::load_for_resume(&path, other.hash()) {
        Err(e) => println!("resume under a different config: {e}"),
        Ok(_) => println!("resume under a different config unexpectedly succeeded"),
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

fn tempdir() -> std::io::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("vidprompt-resume-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
