//! Desk-scale configurations for each task. The TOML files under `configs/`
//! mirror these and are checked against them in tests.

use crate::config::ExperimentConfig;
use crate::data::TaskKind;

fn desk_optimizer(c: &mut ExperimentConfig) {
    c.train.batch_size = 32;
    c.train.learning_rate = 1e-3;
}

/// Eight categories, separation margin twice the noise scale, `[16 + X + 16]`
/// prompts, two temporal layers, 500 steps.
pub fn closed_set() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    desk_optimizer(&mut c);
    c.train.steps = 500;
    c
}

/// Pairs of categories that differ only in the order of two concepts.
pub fn ordered() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    desk_optimizer(&mut c);
    let s = &mut c.data.synthetic;
    s.task = TaskKind::OrderedRecognition;
    s.min_frames = 32;
    s.max_frames = 32;
    s.drift = 0.0;
    s.noise = 0.25;
    c.data.gaps = Some(vec![2]);
    c.train.steps = 500;
    c
}

/// Twelve categories whose frames show the video sense of their names. The
/// text tower is first aligned on captions that mention the domain word half
/// of the time; `[2 + X + 2]` prompts without a temporal encoder, 300 steps
/// per split.
pub fn zero_shot() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    desk_optimizer(&mut c);
    c.data.synthetic.categories = 12;
    c.data.synthetic.domain_shift = 3.0;
    let m = &mut c.model;
    m.prompt_k = 2;
    m.temporal_depth = 0;
    m.pretrain.steps = 5000;
    m.pretrain.context_words = 4;
    m.pretrain.video_rate = 0.5;
    c.train.steps = 300;
    c.eval.zero_shot_train_fraction = 8.0 / 12.0;
    c
}

/// Sentence queries over long videos with `[4 + X + 4]` prompts.
pub fn retrieval() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    desk_optimizer(&mut c);
    let s = &mut c.data.synthetic;
    s.task = TaskKind::Retrieval;
    s.categories = 16;
    s.train_per_category = 8;
    s.val_per_category = 4;
    s.min_frames = 160;
    s.max_frames = 320;
    c.model.prompt_k = 4;
    c.model.pretrain.steps = 1000;
    c.train.steps = 300;
    c
}

/// Untrimmed timelines with planted instances.
pub fn localisation() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    desk_optimizer(&mut c);
    c.data.synthetic.task = TaskKind::Localisation;
    c.data.synthetic.noise = 0.3;
    c.train.steps = 200;
    c
}

/// Name and constructor of every preset.
pub fn all() -> [(&'static str, fn() -> ExperimentConfig); 5] {
    [
        ("closed-set", closed_set),
        ("ordered", ordered),
        ("zero-shot", zero_shot),
        ("retrieval", retrieval),
        ("localisation", localisation),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for (name, f) in all() {
            f().validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn config_files_match_presets() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for (name, f) in all() {
            let path = dir.join(format!("{name}.toml"));
            let loaded = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(loaded, f(), "{name}.toml differs from the preset");
        }
    }
}
