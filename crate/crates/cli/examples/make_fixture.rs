//! Writes the 8-video overfit fixture: 4 PNG frames per video and a
//! manifest. Usage: `cargo run -p capcore-cli --example make_fixture -- DIR`

use std::path::PathBuf;

use capcore::data::{CaptionRecord, VisualSource};
use image::{Rgb, RgbImage};

const SIZE: u32 = 32;
const FRAMES: u32 = 4;
const ORIGIN: (i32, i32) = (16, 16);

#[derive(Clone, Copy)]
enum Shape {
    Disc,
    Square,
}

struct Clip {
    id: &'static str,
    color: [u8; 3],
    shape: Shape,
    /// Per-frame displacement of the object centre.
    step: (i32, i32),
    /// Object centre in the middle of the clip.
    origin: (i32, i32),
    caption: &'static str,
    pair: Option<(&'static str, &'static str)>,
}

const CLIPS: [Clip; 8] = [
    Clip { id: "clip01", color: [220, 30, 30], shape: Shape::Disc, step: (5, 0), origin: (16, 22), caption: "a red ball rolls to the right", pair: None },
    Clip { id: "clip02", color: [220, 30, 30], shape: Shape::Disc, step: (-5, 0), origin: (16, 10), caption: "a red ball rolls to the left", pair: None },
    Clip { id: "clip03", color: [30, 60, 220], shape: Shape::Disc, step: (0, 5), origin: ORIGIN, caption: "a blue ball falls down", pair: None },
    Clip { id: "clip04", color: [30, 60, 220], shape: Shape::Square, step: (0, -5), origin: ORIGIN, caption: "a blue box moves up", pair: None },
    Clip { id: "clip05", color: [40, 180, 60], shape: Shape::Square, step: (5, 5), origin: ORIGIN, caption: "a green box slides down to the right", pair: None },
    Clip { id: "clip06", color: [230, 200, 40], shape: Shape::Disc, step: (0, 0), origin: ORIGIN, caption: "a yellow ball stays still", pair: None },
    Clip {
        id: "clip07",
        color: [200, 200, 200],
        shape: Shape::Square,
        step: (0, 0), origin: ORIGIN,
        caption: "the car stops",
        pair: Some(("the car stops", "the light is red")),
    },
    Clip {
        id: "clip08",
        color: [200, 200, 200],
        shape: Shape::Square,
        step: (-5, 5), origin: ORIGIN,
        caption: "the car turns left",
        pair: Some(("the car turns left", "the road bends")),
    },
];

/// Each clip gets its own background tint; pooled features keep colour
/// but not position.
fn frame(c: &Clip, index: u8, k: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([16 + 14 * index, 16, 120 - 12 * index]));
    let cx = c.origin.0 + c.step.0 * (k as i32) - c.step.0 * 3 / 2;
    let cy = c.origin.1 + c.step.1 * (k as i32) - c.step.1 * 3 / 2;
    // A light stays on in clip07 to carry its justification.
    if c.pair.is_some() && c.step == (0, 0) {
        for y in 2..8 {
            for x in 24..30 {
                img.put_pixel(x, y, Rgb([255, 0, 0]));
            }
        }
    }
    for y in 0..SIZE as i32 {
        for x in 0..SIZE as i32 {
            let (dx, dy) = (x - cx, y - cy);
            let inside = match c.shape {
                Shape::Disc => dx * dx + dy * dy <= 25,
                Shape::Square => dx.abs() <= 5 && dy.abs() <= 4,
            };
            if inside {
                img.put_pixel(x as u32, y as u32, Rgb(c.color));
            }
        }
    }
    img
}

fn main() {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures/overfit".into()));
    let mut records = Vec::new();
    for (i, c) in CLIPS.iter().enumerate() {
        let frames = dir.join("frames").join(c.id);
        std::fs::create_dir_all(&frames).expect("create frame directory");
        for k in 0..FRAMES {
            frame(c, i as u8, k).save(frames.join(format!("frame{k}.png"))).expect("write frame");
        }
        records.push(CaptionRecord {
            video_id: c.id.into(),
            source: VisualSource::Frames(format!("frames/{}", c.id)),
            captions: vec![c.caption.into()],
            action: c.pair.map(|p| p.0.into()),
            justification: c.pair.map(|p| p.1.into()),
        });
    }
    capcore_cli::manifest::write_manifest(&dir.join("manifest.jsonl"), &records).expect("write manifest");
}
