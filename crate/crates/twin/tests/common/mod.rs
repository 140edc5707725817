#![allow(dead_code)]

use std::path::Path;

use oncotwin::artifacts::RunDir;
use oncotwin::config::{RunConfig, Scale};
use oncotwin::pipeline::{self, Reproduction};

/// Desk preset cut down to a few patients and short chains.
pub fn small_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::preset(Scale::Desk, seed);
    c.n_patients = 4;
    c.mcmc.samples_per_chain = 2000;
    c.mcmc.thin = 5;
    c.optimization.restarts = 2;
    c.optimization.max_evals_per_restart = 30;
    c.optimization.n_mc = 400;
    c.risk.n_mc = 400;
    c.survival.n_boot = 50;
    c
}

pub fn reproduce_small(out: &Path, seed: u64) -> (RunDir, Reproduction) {
    let run = RunDir::open(out, small_config(seed)).unwrap();
    let r = pipeline::reproduce(&run).unwrap();
    (run, r)
}
