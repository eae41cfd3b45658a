// temp probe: which leaf/coord is worst, and what are the values?
use vctr_core::gradcheck::{randn, rng};
use vctr_core::generator::{Generator, GeneratorConfig};
use vctr_core::params::{ParamStore, Registered};
use vctr_core::tensor::{Tape, Tensor};
use rand::seq::index::sample;

fn main() {
    let cfg = GeneratorConfig { base_channels: 8, ..Default::default() };
    let seed = 19u64;
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let gen = Generator::new(cfg, &mut store, &mut r).unwrap();
    let input = randn(&[1, 16, 16], 0.5, &mut r);
    let probe = randn(&[1, 16, 16], 1.0, &mut r);
    let mut leaves = vec![("input".to_string(), input)];
    for (n, t) in store.iter() { leaves.push((n.to_string(), t.clone())); }

    let build = |tape: &mut Tape, ids: &[vctr_core::NodeId]| {
        let reg = Registered::from_nodes(ids[1..].to_vec());
        let out = gen.forward(tape, &reg, ids[0]).unwrap();
        let pr = tape.leaf(&probe, false);
        let m = tape.mul(out, pr).unwrap();
        tape.sum_all(m)
    };

    let mut tape = Tape::new();
    let ids: Vec<_> = leaves.iter().map(|(_, t)| tape.leaf(t, true)).collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad(id).unwrap().to_vec()).collect();
    drop(tape);

    let eval = |work: &[(String, Tensor)]| {
        let mut t = Tape::new();
        let ids: Vec<_> = work.iter().map(|(_, x)| t.leaf(x, false)).collect();
        let out = build(&mut t, &ids);
        t.scalar_value(out)
    };

    let h = 1e-5;
    let mut work = leaves.clone();
    let mut rows: Vec<(f64, String, usize, f64, f64)> = Vec::new();
    for li in 0..leaves.len() {
        let n = leaves[li].1.numel();
        let coords: Vec<usize> = if n <= 2 { (0..n).collect() } else { sample(&mut r, n, 2).into_vec() };
        for ci in coords {
            let orig = work[li].1.data[ci];
            work[li].1.data[ci] = orig + h;
            let fp = eval(&work);
            work[li].1.data[ci] = orig - h;
            let fm = eval(&work);
            work[li].1.data[ci] = orig;
            let num = (fp - fm) / (2.0 * h);
            let a = analytic[li][ci];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            rows.push((rel, leaves[li].0.clone(), ci, a, num));
        }
    }
    rows.sort_by(|x, y| y.0.total_cmp(&x.0));
    for (rel, name, ci, a, num) in rows.iter().take(12) {
        println!("rel {rel:.3e}  {name}[{ci}]  analytic {a:.6e}  numeric {num:.6e}");
    }
}
