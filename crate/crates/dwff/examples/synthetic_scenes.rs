//! Generate labelled synthetic scenes, run the frozen surrogate backbone
//! over them, and look at the multi-level feature statistics.
//!
//! ```bash
//! cargo run -p dwff --example synthetic_scenes
//! ```

use dwff::data::{class_abbrev, generate_scene, SurrogateBackbone};

fn main() {
    let (hp, wp, patch) = (16, 16, 4);
    let backbone = SurrogateBackbone::new(1234, 32, patch, 4);
    let layer_ids = [1u32, 8, 16, 24];

    for (seed, class_count) in [(7u64, 3usize), (8, 6), (9, 9)] {
        let (image, labels) = generate_scene(seed, hp, wp, class_count, patch, 0.05).unwrap();
        let present: Vec<&str> = (0..15)
            .filter(|&c| labels.ids().iter().any(|&v| v as usize == c))
            .map(class_abbrev)
            .collect();
        println!(
            "scene seed {seed}: {class_count} classes requested, present = {present:?}",
        );
        println!("  image {:?}, labels {:?}", image.shape(), labels.shape());

        let stack = backbone.extract(&image, &layer_ids).unwrap();
        for (level, layer) in stack.levels.iter().zip(&stack.layer_ids) {
            let data = level.data();
            let mean: f64 = data.iter().sum::<f64>() / data.len() as f64;
            let var: f64 =
                data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / data.len() as f64;
            // Spatial roughness: mean squared difference of horizontal neighbours.
            let s = level.shape();
            let (c, h, w) = (s[1], s[2], s[3]);
            let mut rough = 0.0;
            let mut count = 0;
            for ci in 0..c {
                for y in 0..h {
                    for x in 1..w {
                        let a = data[(ci * h + y) * w + x];
                        let b = data[(ci * h + y) * w + x - 1];
                        rough += (a - b) * (a - b);
                        count += 1;
                    }
                }
            }
            println!(
                "  layer {layer:>2}: mean {mean:>7.4}, var {var:.4}, roughness {:.5}",
                rough / count as f64
            );
        }
    }
    println!("deeper layers mix more context, so their maps get smoother");
}
