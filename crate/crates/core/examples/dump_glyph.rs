//! Prints a rendered glyph as ASCII art: `dump_glyph <font> <char> [resolution]`.

use glyphembed::glyph::GlyphRenderer;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.len() < 3 {
        eprintln!("usage: dump_glyph <font> <char> [resolution]");
        std::process::exit(2);
    }
    let resolution = args.get(3).and_then(|r| r.parse().ok()).unwrap_or(36);
    let renderer = GlyphRenderer::from_file(&args[1], resolution).expect("font");
    for c in args[2].chars() {
        let Some(bitmap) = renderer.render(c) else {
            println!("{c}: missing from font");
            continue;
        };
        println!("{c}: margin {:?}", bitmap.content_margin());
        for y in 0..resolution {
            let row: String = (0..resolution)
                .map(|x| match bitmap.get(x, y) {
                    v if v > 0.66 => '#',
                    v if v > 0.33 => '+',
                    v if v > 0.0 => '.',
                    _ => ' ',
                })
                .collect();
            println!("|{row}|");
        }
    }
}
