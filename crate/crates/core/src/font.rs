//! Embedded 5x7 bitmap font for the recognition charset plus a few
//! punctuation marks used in rendered labels.

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;

/// Horizontal advance per character in glyph pixels (glyph + 1 gap).
pub const ADVANCE: usize = GLYPH_W + 1;

#[rustfmt::skip]
const GLYPHS: [(char, [&str; GLYPH_H]); 40] = [
    ('a', [".....", ".....", ".###.", "....#", ".####", "#...#", ".####"]),
    ('b', ["#....", "#....", "####.", "#...#", "#...#", "#...#", "####."]),
    ('c', [".....", ".....", ".####", "#....", "#....", "#....", ".####"]),
    ('d', ["....#", "....#", ".####", "#...#", "#...#", "#...#", ".####"]),
    ('e', [".....", ".....", ".###.", "#...#", "#####", "#....", ".###."]),
    ('f', ["..##.", ".#...", "####.", ".#...", ".#...", ".#...", ".#..."]),
    ('g', [".....", ".####", "#...#", "#...#", ".####", "....#", ".###."]),
    ('h', ["#....", "#....", "####.", "#...#", "#...#", "#...#", "#...#"]),
    ('i', ["..#..", ".....", ".##..", "..#..", "..#..", "..#..", ".###."]),
    ('j', ["...#.", ".....", "..##.", "...#.", "...#.", "#..#.", ".##.."]),
    ('k', ["#....", "#....", "#..#.", "#.#..", "##...", "#.#..", "#..#."]),
    ('l', [".##..", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."]),
    ('m', [".....", ".....", "##.#.", "#.#.#", "#.#.#", "#.#.#", "#.#.#"]),
    ('n', [".....", ".....", "####.", "#...#", "#...#", "#...#", "#...#"]),
    ('o', [".....", ".....", ".###.", "#...#", "#...#", "#...#", ".###."]),
    ('p', [".....", "####.", "#...#", "#...#", "####.", "#....", "#...."]),
    ('q', [".....", ".####", "#...#", "#...#", ".####", "....#", "....#"]),
    ('r', [".....", ".....", "#.##.", "##..#", "#....", "#....", "#...."]),
    ('s', [".....", ".....", ".####", "#....", ".###.", "....#", "####."]),
    ('t', [".#...", ".#...", "####.", ".#...", ".#...", ".#..#", "..##."]),
    ('u', [".....", ".....", "#...#", "#...#", "#...#", "#..##", ".##.#"]),
    ('v', [".....", ".....", "#...#", "#...#", "#...#", ".#.#.", "..#.."]),
    ('w', [".....", ".....", "#...#", "#...#", "#.#.#", "#.#.#", ".#.#."]),
    ('x', [".....", ".....", "#...#", ".#.#.", "..#..", ".#.#.", "#...#"]),
    ('y', [".....", "#...#", "#...#", "#...#", ".####", "....#", ".###."]),
    ('z', [".....", ".....", "#####", "...#.", "..#..", ".#...", "#####"]),
    ('0', [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."]),
    ('1', ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."]),
    ('2', [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"]),
    ('3', ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."]),
    ('4', ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."]),
    ('5', ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."]),
    ('6', ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."]),
    ('7', ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."]),
    ('8', [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."]),
    ('9', [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."]),
    (':', [".....", "..#..", "..#..", ".....", "..#..", "..#..", "....."]),
    ('.', [".....", ".....", ".....", ".....", ".....", ".##..", ".##.."]),
    ('-', [".....", ".....", ".....", "#####", ".....", ".....", "....."]),
    (' ', [".....", ".....", ".....", ".....", ".....", ".....", "....."]),
];

/// Bitmap for `ch` (rows top to bottom), if the font has it.
pub fn glyph(ch: char) -> Option<&'static [&'static str; GLYPH_H]> {
    GLYPHS.iter().find(|(c, _)| *c == ch).map(|(_, g)| g)
}

/// Whether glyph pixel `(col, row)` of `ch` is ink.
pub fn ink(ch: char, col: usize, row: usize) -> bool {
    glyph(ch).is_some_and(|g| g[row].as_bytes()[col] == b'#')
}

/// Bold variant used for rendering scenes: a pixel in the `ADVANCE`-wide
/// cell is ink if the regular glyph has ink at it, to its left, below it,
/// or below-left.
pub fn bold_ink(ch: char, col: usize, row: usize) -> bool {
    let at = |c: Option<usize>, r: usize| c.is_some_and(|c| c < GLYPH_W && r < GLYPH_H && ink(ch, c, r));
    let left = col.checked_sub(1);
    at(Some(col), row) || at(left, row) || at(Some(col), row + 1) || at(left, row + 1)
}

/// Stamps `text` axis-aligned with its top-left corner at `(x, y)`,
/// each glyph pixel becoming a `scale x scale` block. Characters without a
/// glyph are skipped. `put` receives in-bounds pixel coordinates.
pub fn draw_text(text: &str, x: i64, y: i64, scale: usize, mut put: impl FnMut(i64, i64)) {
    for (k, ch) in text.chars().enumerate() {
        let Some(g) = glyph(ch) else { continue };
        let ox = x + (k * ADVANCE * scale) as i64;
        for (r, row) in g.iter().enumerate() {
            for (c, b) in row.bytes().enumerate() {
                if b != b'#' {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        put(ox + (c * scale + dx) as i64, y + (r * scale + dy) as i64);
                    }
                }
            }
        }
    }
}
