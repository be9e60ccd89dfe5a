//! Prints the absolute and relative location features of every proposal in
//! a small hand-made scene.

use earn::visual::encode_location;
use earn::BBox;

fn main() -> earn::Result<()> {
    let boxes = vec![
        BBox::new(10.0, 10.0, 60.0, 50.0)?,
        BBox::new(120.0, 30.0, 170.0, 90.0)?,
        BBox::new(70.0, 120.0, 130.0, 180.0)?,
        BBox::new(150.0, 140.0, 190.0, 190.0)?,
    ];
    let categories = [0, 0, 1, 0];
    for i in 0..boxes.len() {
        let f = encode_location(i, &boxes, &categories, 200.0, 200.0);
        println!("proposal {i} (category {})", categories[i]);
        println!("  absolute {:.3?}", &f[..5]);
        for (k, slot) in f[5..].chunks(5).enumerate() {
            if slot.iter().any(|&v| v != 0.0) {
                println!("  neighbour {k} {slot:.3?}");
            }
        }
    }
    Ok(())
}
