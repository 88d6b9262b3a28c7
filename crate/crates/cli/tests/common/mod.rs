#![allow(dead_code)]

use std::path::Path;

use recolor_core::design::DesignBundle;
use recolor_core::synth::{generate_case, GeneratorConfig};

/// Small generated designs keep the photo analysis cheap.
pub fn small_config(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        seed,
        count: 64,
        canvas_sizes: vec![[160, 128]],
        ..GeneratorConfig::default()
    }
}

/// The first generated bundle whose photo holds at least `objects` annotated objects.
pub fn fixture(objects: usize) -> DesignBundle {
    (0..64)
        .map(|i| generate_case(&small_config(5), i).unwrap().bundle)
        .find(|b| b.photo_objects.len() >= objects)
        .expect("fixture with enough objects")
}

pub fn instruction_for(b: &DesignBundle, object: usize) -> String {
    format!("recolor the {} with the title", b.photo_objects[object].phrase)
}

pub fn save(b: &DesignBundle, dir: &Path) {
    b.save(dir).unwrap();
}
