use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roiprop_core::diffcore::{fd_validity_margin, grad_check, Params};
use roiprop_core::models::{ArchConfig, ModelKind};
use roiprop_core::objectives::{loss_graph, loss_inputs, LossConfig};
use roiprop_core::synth::{self, SynthConfig};

fn tiny_pair(seed: u64) -> synth::ImagePair {
    let mut cfg = SynthConfig::desk(1, seed);
    cfg.height = 8; cfg.width = 8;
    cfg.amplitude_px = 1.5; cfg.smoothness_px = 4.0;
    cfg.max_rois = 2;
    cfg.pairs_per_patient_min = 1; cfg.pairs_per_patient_max = 1;
    cfg.calcification_rate = 0.0;
    synth::generate(&cfg).unwrap().pairs.into_iter().next().unwrap()
}

const MARGIN: f64 = 2e-3;

fn main() {
    let arch = ArchConfig { levels: 2, base_channels: 2, kernel: 3, height: 8, width: 8 };
    let lc = LossConfig::default();
    let lc_reg = LossConfig { lambda: 0.5, ..lc };
    for (name, kind, lcx) in [("condseg", ModelKind::CondSeg, lc), ("ddfreg", ModelKind::DdfReg, lc_reg)] {
        let g = loss_graph(kind, &arch, &lcx).unwrap();
        let mut ok = 0; let mut tried = 0; let mut fails = 0; let mut worst = 0.0f64;
        let mut seed = 0u64;
        while ok < 20 && seed < 300 {
            seed += 1; tried += 1;
            let pair = tiny_pair(1000 + seed);
            let roi = pair.trainable_rois()[0];
            let inputs = loss_inputs::<f64>(&pair, roi, &lcx).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
            let mut params = Params::<f64>::zeros(g.segments());
            for v in &mut params.values { *v = rng.random_range(-0.4..0.4); }
            if fd_validity_margin(&g, &params, &inputs).unwrap() < MARGIN { continue; }
            ok += 1;
            let rep = grad_check(&g, &params, &inputs, 1e-4, 1e-3, seed).unwrap();
            if !rep.pass { fails += 1; println!("{name} seed {seed}: {} at {}", rep.max_rel_err, rep.worst_coord); }
            worst = worst.max(rep.max_rel_err);
        }
        println!("{name}: {ok} valid of {tried} tried, {fails} failures, worst {worst:.2e}");
    }
}
