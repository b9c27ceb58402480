// Scratch probe: render synthetic samples as PGM and measure
// nearest-real distances against real-real 5NN radii.
use dbkd_core::data::{load_batch, load_dataset};
use ndarray::Axis;

fn main() {
    let run = std::env::args().nth(1).expect("run dir");
    let run = std::path::Path::new(&run);
    let synth = load_batch(run.join("synth/synthetic.dbkb")).unwrap();
    let ds = load_dataset("mnist", std::path::Path::new("/root/data")).unwrap();

    // contact sheet: 8x8 synthetics
    let mut pgm = String::from("P2\n256 256\n255\n");
    for ti in 0..8 {
        for row in 0..32 {
            let mut line = String::new();
            for tj in 0..8 {
                let img = synth.images.index_axis(Axis(0), ti * 8 + tj);
                for col in 0..32 {
                    line.push_str(&format!("{} ", (img[[0, row, col]] * 255.0) as u8));
                }
            }
            pgm.push_str(&line);
            pgm.push('\n');
        }
    }
    std::fs::write("/tmp/synth_sheet.pgm", pgm).unwrap();

    // distances: real-real 5NN radius distribution vs synth-nearest-real
    let nref = 1500;
    let refs: Vec<Vec<f32>> = (0..nref)
        .map(|i| ds.train.images.index_axis(Axis(0), i * 7).iter().cloned().collect())
        .collect();
    let d2 = |a: &[f32], b: &[f32]| -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut radii: Vec<f32> = (0..nref)
        .map(|i| {
            let mut ds: Vec<f32> =
                (0..nref).filter(|&j| j != i).map(|j| d2(&refs[i], &refs[j])).collect();
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ds[4]
        })
        .collect();
    radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "real 5NN radius^2 (n=1500): p10 {:.2} p50 {:.2} p90 {:.2}",
        radii[150], radii[750], radii[1350]
    );

    let mut synth_d: Vec<f32> = (0..400)
        .map(|i| {
            let s: Vec<f32> = synth.images.index_axis(Axis(0), i * 25).iter().cloned().collect();
            (0..nref).map(|j| d2(&s, &refs[j])).fold(f32::INFINITY, f32::min)
        })
        .collect();
    synth_d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "synth nearest-real dist^2 (n=400): p10 {:.2} p50 {:.2} p90 {:.2}",
        synth_d[40], synth_d[200], synth_d[360]
    );

    let mut few_d: Vec<f32> = {
        let fewshot = load_batch(run.join("fewshot/fewshot.dbkb")).unwrap();
        (0..400)
            .map(|i| {
                let s: Vec<f32> =
                    fewshot.images.index_axis(Axis(0), i * 2).iter().cloned().collect();
                (0..nref).map(|j| d2(&s, &refs[j])).fold(f32::INFINITY, f32::min)
            })
            .collect()
    };
    few_d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "fewshot nearest-real dist^2 (n=400): p10 {:.2} p50 {:.2} p90 {:.2}",
        few_d[40], few_d[200], few_d[360]
    );
}
