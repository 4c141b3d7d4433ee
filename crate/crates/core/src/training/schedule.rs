use crate::config::RunConfig;

/// Step decay: `lr × gamma^⌊epoch / every⌋`.
pub fn lr_schedule(epoch: usize, cfg: &RunConfig) -> f64 {
    let every = cfg.lr_decay_every_epochs.max(1);
    cfg.lr * cfg.lr_decay_gamma.powi((epoch / every) as i32)
}
