//! Writes the cancellation fixture (checkpoint, sidecar, image) into the
//! directory given as the first argument.

use std::path::PathBuf;

use dclscam::datakit::write_ppm;
use dclscam::zoo::{cancellation_image, cancellation_model, save};

fn main() {
    let dir = PathBuf::from(std::env::args().nth(1).expect("usage: cancellation_fixture <dir>"));
    std::fs::create_dir_all(&dir).expect("create output dir");
    save(&cancellation_model(), None, &dir.join("cancel.ckpt")).expect("write checkpoint");
    std::fs::write(dir.join("cancel.ppm"), write_ppm(&cancellation_image(8))).expect("write image");
}
