use tgt::data::{gen_scene, Tier};
use tgt::tensor::io::write_ppm;
fn main() {
    for seed in [0u64, 1, 2, 3, 7] {
        let s = gen_scene(seed, Tier::Mixed);
        write_ppm(format!("/tmp/s{seed}_bare.ppm"), &s.bare).unwrap();
        write_ppm(format!("/tmp/s{seed}_garment.ppm"), &s.garment).unwrap();
        write_ppm(format!("/tmp/s{seed}_composite.ppm"), &s.composite).unwrap();
        println!("seed {seed}: cat={} color={} degraded={}", s.meta.category, s.meta.color, s.meta.degraded);
    }
}
