use beef_core::synthworld::{generate, WorldConfig};
use beef_core::trainer::{pixel_probe, ProbeConfig};

#[test]
fn causes_are_separable_from_raw_pixels() {
    let data = generate(&WorldConfig {
        episodes: 200,
        ..WorldConfig::tiny()
    })
    .unwrap();
    let acc = pixel_probe(&data, &ProbeConfig::default()).unwrap();
    assert!(acc >= 0.95, "probe accuracy {acc}");
}
