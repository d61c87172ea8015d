//! Map each learned prompt vector to its nearest vocabulary embedding by
//! cosine distance. Learned vectors rarely land on a word.

use vidprompt::experiment::{train_closed_set, Workspace};
use vidprompt::presets;
use vidprompt::text::{nearest_subwords, TOKEN_EMBEDDING};

fn main() -> anyhow::Result<()> {
    let mut config = presets::closed_set();
    config.model.prompt_k = 4;
    let mut ws = Workspace::<f32>::prepare(&config)?;
    let mut opt = ws.optimizer();
    train_closed_set(&mut ws, &mut opt, 200)?;

    let bank = &ws.model.bank;
    let prompts = bank.vectors(&ws.store).expect("k > 0");
    let table = nearest_subwords(&prompts, bank.k, &ws.model.text.vocab, ws.store.tensor(TOKEN_EMBEDDING))?;
    println!("slot  nearest  cosine distance");
    for row in table {
        let d = row.distance.map_or("-".into(), |d| format!("{d:.3}"));
        println!("{:<5} {:<8} {d}", row.slot.to_string(), row.token.unwrap_or_default());
    }
    Ok(())
}
