//! Reverse-mode gradients from the tape against central differences on a
//! small f64 network.
//!
//! cargo run --example autodiff_check

use flowpref::flowcore::{fm_loss, fm_loss_taped, FlowBatch, VelocityModel};
use flowpref::numerics::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> flowpref::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = 6;
    let model = VelocityModel::<f64>::new(d, &[16], &mut rng)?;
    let mut t = || Tensor::from_fn(&[4, d], |_| rng.random_range(-1.0..1.0));
    let batch = FlowBatch { x0: t(), x1: t(), c: t(), t: vec![0.1, 0.4, 0.7, 0.95] };

    let mut tape = Tape::new();
    let bound = model.net().bind(&mut tape);
    let loss = fm_loss_taped(&model, &mut tape, &bound, &batch)?;
    tape.backward(loss)?;
    let grads = bound.grads(&tape);
    println!("loss {:.6}, {} parameters", tape.value(loss).item(), model.net().param_count());

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        let g = g.as_ref().expect("trainable");
        for i in (0..g.len()).step_by(7) {
            let mut probe = model.clone();
            probe.net_mut().params_mut()[k].data_mut()[i] += h;
            let up = fm_loss(&probe, &batch)?;
            probe.net_mut().params_mut()[k].data_mut()[i] -= 2.0 * h;
            let down = fm_loss(&probe, &batch)?;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((fd - g.data()[i]).abs() / fd.abs().max(g.data()[i].abs()).max(1e-6));
        }
    }
    println!("max relative error over sampled coordinates: {worst:.2e}");
    Ok(())
}
