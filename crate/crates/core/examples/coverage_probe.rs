// Scratch probe: coverage direction under average-pool embeddings.
use dbkd_core::data::{load_batch, load_dataset};
use dbkd_core::metrics::{coverage_rows, flatten_images, CoverageConfig};
use ndarray::{Array2, Array4};

fn avgpool(images: &Array4<f32>, factor: usize) -> Array2<f64> {
    let (b, c, h, w) = images.dim();
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Array2::zeros((b, c * oh * ow));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0f64;
                    for di in 0..factor {
                        for dj in 0..factor {
                            acc += images[[bi, ci, i * factor + di, j * factor + dj]] as f64;
                        }
                    }
                    out[[bi, ci * oh * ow + i * ow + j]] = acc / (factor * factor) as f64;
                }
            }
        }
    }
    out
}

fn main() {
    let run = std::env::args().nth(1).expect("run dir");
    let run = std::path::Path::new(&run);
    let ds = load_dataset("mnist", std::path::Path::new("/root/data")).unwrap();
    let fewshot = load_batch(run.join("fewshot/fewshot.dbkb")).unwrap();
    let synth = load_batch(run.join("synth/synthetic.dbkb")).unwrap();
    println!("fewshot {} synth {}", fewshot.len(), synth.len());

    for (name, factor) in [("identity", 1usize), ("avgpool2", 2), ("avgpool4", 4), ("avgpool8", 8)] {
        let cfg = CoverageConfig { k_neighbors: 5, max_reference: 2000, subsample_seed: 7 };
        let embed = |im: &Array4<f32>| -> Array2<f64> {
            if factor == 1 {
                flatten_images(im)
            } else {
                avgpool(im, factor)
            }
        };
        let reference = embed(&ds.train.images);
        let cf = coverage_rows(&reference, &embed(&fewshot.images), &cfg).unwrap();
        let cs = coverage_rows(&reference, &embed(&synth.images), &cfg).unwrap();
        println!("{name:9}: fewshot {cf:.4}  synthetic {cs:.4}  direction {}", if cs > cf { "OK" } else { "FAIL" });
    }
}
