use image::{Rgb, RgbImage};
use yoloface::head::Detection;

const BOX: Rgb<u8> = Rgb([0, 255, 0]);
/// Left eye, right eye, nose, left and right mouth corner.
const POINTS: [Rgb<u8>; 5] = [
    Rgb([255, 0, 0]),
    Rgb([0, 0, 255]),
    Rgb([255, 255, 0]),
    Rgb([255, 0, 255]),
    Rgb([0, 255, 255]),
];

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Two-pixel box outlines and 3×3 landmark dots.
pub fn detections(img: &mut RgbImage, dets: &[Detection]) {
    for d in dets {
        let [x1, y1, x2, y2] = d.bbox.map(|v| v.round() as i64);
        for t in 0..2 {
            for x in x1..=x2 {
                put(img, x, y1 + t, BOX);
                put(img, x, y2 - t, BOX);
            }
            for y in y1..=y2 {
                put(img, x1 + t, y, BOX);
                put(img, x2 - t, y, BOX);
            }
        }
        if !d.landmark_valid {
            continue;
        }
        for (p, c) in d.landmarks.iter().zip(POINTS) {
            let (cx, cy) = (p[0].round() as i64, p[1].round() as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    put(img, cx + dx, cy + dy, c);
                }
            }
        }
    }
}
