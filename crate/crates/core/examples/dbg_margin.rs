use roiprop_core::diffcore::{fd_validity_margin, Params};
use roiprop_core::models::{ArchConfig, ModelKind};
use roiprop_core::objectives::{loss_graph, loss_inputs, LossConfig};
use roiprop_core::synth::{self, SynthConfig};

fn main() {
    let arch = ArchConfig { levels: 2, base_channels: 2, kernel: 3, height: 8, width: 8 };
    let lc = LossConfig::default();
    let g = loss_graph(ModelKind::CondSeg, &arch, &lc).unwrap();
    let mut margins: Vec<f64> = Vec::new();
    for seed in 0..30u64 {
        let mut cfg = SynthConfig::desk(1, 1000 + seed);
        cfg.height = 8; cfg.width = 8;
        cfg.amplitude_px = 1.5; cfg.smoothness_px = 4.0;
        cfg.max_rois = 2;
        cfg.pairs_per_patient_min = 1; cfg.pairs_per_patient_max = 1;
        cfg.calcification_rate = 0.0;
        let pair = synth::generate(&cfg).unwrap().pairs.into_iter().next().unwrap();
        let roi = pair.trainable_rois()[0];
        let inputs = loss_inputs::<f64>(&pair, roi, &lc).unwrap();
        let params = Params::<f32>::init(g.segments(), seed).cast::<f64>();
        margins.push(fd_validity_margin(&g, &params, &inputs).unwrap());
    }
    margins.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("condseg margins: min {:.2e} med {:.2e} max {:.2e}", margins[0], margins[15], margins[29]);
}
