use repmobile::tensor::{Tensor, kernels::{conv2d, conv2d_backward, ConvSpec}};
use std::time::Instant;

fn main() {
    // stage-1 expand conv at C=96: [32,96,64,15] x [288,96,1,1]
    let x = Tensor::<f32>::full(&[32, 96, 64, 15], 0.1);
    let w = Tensor::<f32>::full(&[288, 96, 1, 1], 0.01);
    let spec = ConvSpec::new((1,1),(0,0),1);
    let macs = 32f64*288.0*960.0*96.0;
    for _ in 0..2 { let _ = conv2d(&x, &w, None, &spec).unwrap(); }
    let t = Instant::now();
    let n = 10;
    for _ in 0..n { let _ = conv2d(&x, &w, None, &spec).unwrap(); }
    let dt = t.elapsed().as_secs_f64()/n as f64;
    println!("fwd 1x1: {:.1} ms, {:.2} GMAC/s", dt*1e3, macs/dt/1e9);

    let g = conv2d(&x, &w, None, &spec).unwrap();
    let t = Instant::now();
    for _ in 0..n { let _ = conv2d_backward(&x, &w, &spec, &g, true, false).unwrap(); }
    let dt = t.elapsed().as_secs_f64()/n as f64;
    println!("bwd 1x1: {:.1} ms, {:.2} GMAC/s", dt*1e3, 2.0*macs/dt/1e9);

    // depthwise 3x3 at hidden=288
    let wd = Tensor::<f32>::full(&[288, 1, 3, 3], 0.01);
    let xd = Tensor::<f32>::full(&[32, 288, 64, 15], 0.1);
    let specd = ConvSpec::new((1,1),(1,1),288);
    let macsd = 32f64*288.0*960.0*9.0;
    let t = Instant::now();
    for _ in 0..n { let _ = conv2d(&xd, &wd, None, &specd).unwrap(); }
    let dt = t.elapsed().as_secs_f64()/n as f64;
    println!("fwd dw3x3: {:.1} ms, {:.2} GMAC/s", dt*1e3, macsd/dt/1e9);
}
