use gradsense::dataio::{synth_batch, SynthPattern, SynthSpec};
fn main() {
    let spec = SynthSpec { shape: (1, 16, 16), num_classes: 16, pattern: SynthPattern::Blocks, seed: 1 };
    let batch = synth_batch(&spec, 4).unwrap();
    for (i, img) in batch.images.iter().enumerate() {
        let d = img.data();
        let (h, w) = (16usize, 16usize);
        let mut t = 0.0;
        for y in 0..h { for x in 0..w {
            if x + 1 < w { t += (d[y*w+x+1] - d[y*w+x]).abs(); }
            if y + 1 < h { t += (d[(y+1)*w+x] - d[y*w+x]).abs(); }
        }}
        println!("truth {i}: TV={t:.1}");
    }
    // visualize truth 0 coarsely
    let d = batch.images[0].data();
    for y in 0..16 {
        let row: String = (0..16).map(|x| {
            let v = d[y*16+x];
            if v > 0.6 { '#' } else if v > 0.35 { '+' } else { '.' }
        }).collect();
        println!("{row}");
    }
}
