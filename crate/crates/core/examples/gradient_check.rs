//! Compare analytic gradients of the contrastive loss with central
//! differences on a tiny 64-bit model, one trainable tensor at a time.

use vidprompt::experiment::{grad_check, tiny_grad_check_config};

fn main() -> anyhow::Result<()> {
    let config = tiny_grad_check_config(0);
    for eps in [1e-3, 1e-4, 1e-5] {
        let r = grad_check(&config, 128, eps)?;
        let (name, i) = r.worst.unwrap();
        println!("eps {eps:.0e}: {} entries, max relative error {:.2e} at {name}[{i}]", r.entries_checked, r.max_relative_error);
    }
    Ok(())
}
