//! Sophia and AdamW on a badly conditioned quadratic, plus a GNB Hessian estimate.
use auditlm::model::{init_model, Arch, Batch, ModelConfig, ParamSet, Tensor};
use auditlm::optim::{estimate_hessian_diag, AdamWConfig, OptimState, OptimizerConfig, SophiaConfig};
use auditlm::vocab::{Field, FieldLayout, BOS};
use rand::SeedableRng;

const CURVATURE: [f64; 4] = [0.1, 1.0, 10.0, 100.0];

fn vector(data: Vec<f64>) -> ParamSet<f64> {
    ParamSet {
        tensors: vec![Tensor {
            name: "theta".into(),
            shape: vec![data.len()],
            data,
        }],
    }
}

fn run(config: OptimizerConfig) -> f64 {
    let mut params = vector(vec![1.0; 4]);
    let mut opt = OptimState::new(config, &params);
    for _ in 0..300 {
        if opt.hessian_due() {
            opt.update_hessian(&vector(CURVATURE.to_vec())).expect("finite curvature");
        }
        let g: Vec<f64> = params.tensors[0].data.iter().zip(CURVATURE).map(|(x, c)| c * x).collect();
        opt.step(&mut params, &vector(g), 1e-2).expect("finite step");
    }
    params.tensors[0].data.iter().zip(CURVATURE).map(|(x, c)| 0.5 * c * x * x).sum()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("AdamW  loss after 300 steps {:.3e}", run(OptimizerConfig::AdamW(AdamWConfig::default())));
    let sophia = SophiaConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    println!("Sophia loss after 300 steps {:.3e}", run(OptimizerConfig::Sophia(sophia)));

    let config = ModelConfig {
        arch: Arch::DecoderAbsolute,
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        context_len: 16,
        vocab_size: FieldLayout::new(3).vocab_size(),
        seed: 0,
    };
    let state = init_model::<f32>(&config, 0)?;
    let layout = state.layout();
    let row = |mn, pid, at| {
        [(Field::MetricName, mn), (Field::PatId, pid), (Field::AtBin, at)].map(|(f, i)| layout.global(f, i).expect("in block"))
    };
    let mut a = vec![BOS];
    a.extend(row(0, 1, 0));
    a.extend(row(1, 1, 3));
    let mut b = vec![BOS];
    b.extend(row(2, 0, 0));
    let batch = Batch::from_sequences(&[a, b]);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let h = estimate_hessian_diag(&state, &batch, &mut rng)?;
    for t in h.tensors.iter().take(4) {
        let mean = t.data.iter().map(|&x| x as f64).sum::<f64>() / t.data.len() as f64;
        println!("{:<16} mean diagonal {:.3e}", t.name, mean);
    }
    Ok(())
}
