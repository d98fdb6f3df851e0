//! Builds full, sliding-window, and block-sparse patterns, prints how many
//! query/key pairs each one scores, and times one fused attention pass.

use longseq::attention::{AttentionConfig, AttentionKind};
use longseq::cli::bench_attention;
use longseq::cli::config::BenchSection;
use longseq::attention::{build_bigbird_pattern, build_full_pattern, build_longformer_pattern, pattern_stats};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // a small pattern drawn as a grid
    let p = build_longformer_pattern(16, 2, &[0])?;
    for i in 0..16 {
        let row: String = (0..16).map(|j| if p.contains(i, j) { '#' } else { '.' }).collect();
        println!("{row}");
    }

    println!("\n{:>6} {:>12} {:>12} {:>12}", "n", "full", "longformer", "bigbird");
    for n in [512, 1024, 2048, 4096] {
        let full = pattern_stats(&build_full_pattern(n)?);
        let local = pattern_stats(&build_longformer_pattern(n, 128, &[0])?);
        let block = pattern_stats(&build_bigbird_pattern(n, 64, 1, 1, 7)?);
        println!("{n:>6} {:>12} {:>12} {:>12}", full.pair_count, local.pair_count, block.pair_count);
    }
    let d = pattern_stats(&build_longformer_pattern(4096, 128, &[0])?).density;
    println!("longformer density at 4096: {d:.4}");

    let bench = BenchSection {
        ns: vec![512, 1024],
        kinds: vec![AttentionKind::Full, AttentionKind::Longformer, AttentionKind::Bigbird],
        repeats: 3,
        ..BenchSection::default()
    };
    let base = AttentionConfig {
        window_radius: 128,
        block_size: 64,
        ..AttentionConfig::default()
    };
    println!();
    longseq::cli::bench::write_csv(std::io::stdout(), &bench_attention(&bench, &base)?)?;
    Ok(())
}
