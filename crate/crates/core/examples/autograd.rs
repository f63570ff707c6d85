//! Reverse-mode gradients on a small expression, checked against central
//! differences.

use cmr::tensor::{grad_check, rng, Tape, GRAD_CHECK_STEP};
use cmr::Var;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> cmr::Result<()> {
    let w0 = rng::normal(&mut rng::stream(0, "w"), &[4, 3], 1.0);
    let x = rng::normal(&mut rng::stream(1, "x"), &[5, 3], 1.0);
    let targets = rng::uniform(&mut rng::stream(2, "t"), &[5, 4], 0.0, 1.0);

    // sum(softmax(x w^T) * targets)
    let loss = |t: &mut Tape, w: Var| -> cmr::Result<Var> {
        let xv = t.constant(x.clone());
        let y = t.linear(xv, w, None)?;
        let p = t.softmax_lastdim(y)?;
        t.weighted_sum(p, &targets)
    };

    let mut tape = Tape::new();
    let w = tape.leaf(w0.clone());
    let l = loss(&mut tape, w)?;
    let grads = tape.backward(l)?;
    println!("loss {:.6}", tape.value(l).item()?);
    println!("dL/dw {:?}", grads.get(w).unwrap().data());

    let err = grad_check(loss, &w0, GRAD_CHECK_STEP)?;
    println!("max relative error against central differences: {err:.2e}");
    Ok(())
}
