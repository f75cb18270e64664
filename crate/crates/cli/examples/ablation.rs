//! Runs the ablation grid and prints benchmark AP50 per variant.

use std::time::Instant;

use vidseg_cli::experiments::{ablation_ap50, benchmark, Variant};

fn main() {
    let (videos, categories) = benchmark(5).expect("benchmark generates");
    let wanted: Vec<String> = std::env::args().skip(1).collect();
    for v in Variant::ALL {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == v.name()) {
            continue;
        }
        let start = Instant::now();
        let ap50 = ablation_ap50(v, &videos, &categories).expect("ablation runs");
        println!(
            "{:<14} AP50 {:.4} ({:.0}s)",
            v.name(),
            ap50,
            start.elapsed().as_secs_f64()
        );
    }
}
