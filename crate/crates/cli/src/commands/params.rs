//! `params`: exact weight-parameter counts and serialized sizes per preset.

use ivmetric_core::error::Result;
use ivmetric_core::models::{ModelState, PresetName};

pub fn run(preset: Option<&str>, input: Option<(usize, usize, usize)>, all: bool) -> Result<()> {
    let shapes: Vec<(usize, usize, usize)> = match input {
        Some(shape) => vec![shape],
        None => vec![(28, 28, 1), (32, 32, 3)],
    };
    let presets: Vec<PresetName> = match preset {
        Some(name) if !all => vec![PresetName::parse(name)?],
        _ => PresetName::ALL.to_vec(),
    };

    println!("{:<10} {:>10} {:>12} {:>10}", "preset", "input", "params", "size_kb");
    for &shape in &shapes {
        for &name in &presets {
            let model = ModelState::<f32>::build_preset(name, shape, 0)?;
            println!(
                "{:<10} {:>10} {:>12} {:>10.2}",
                name.as_str(),
                format!("{}x{}x{}", shape.0, shape.1, shape.2),
                model.count_parameters(),
                model.size_kb()
            );
        }
        // Context line: how much smaller the one-involution hybrid is than
        // the larger convolution baseline.
        if presets.contains(&PresetName::Hybrid1) && presets.contains(&PresetName::Cnn3b) {
            let hybrid = ModelState::<f32>::build_preset(PresetName::Hybrid1, shape, 0)?
                .count_parameters();
            let baseline =
                ModelState::<f32>::build_preset(PresetName::Cnn3b, shape, 0)?.count_parameters();
            println!(
                "# hybrid1 vs cnn3b at {}x{}x{}: {} vs {} parameters ({:.1}% smaller)",
                shape.0,
                shape.1,
                shape.2,
                hybrid,
                baseline,
                100.0 * (1.0 - hybrid as f64 / baseline as f64)
            );
        }
    }
    Ok(())
}
