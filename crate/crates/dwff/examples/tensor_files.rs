//! Write and read DWF1 tensor files, inspect the header layout, and show
//! that the round trip is bit-exact.
//!
//! ```bash
//! cargo run -p dwff --example tensor_files
//! ```

use dwff::io;
use dwff::tensor::Tensor;

fn main() {
    let dir = std::env::temp_dir().join("dwff_tensor_files_example");
    std::fs::create_dir_all(&dir).unwrap();

    let t = Tensor::new(
        vec![1, 2, 3, 4],
        (0..24).map(|i| (i as f32 * 0.125 - 1.0) as f64).collect(),
    )
    .unwrap();
    let path = dir.join("example.dwf");
    io::write_tensor_file(&path, &t).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    println!("file: {} ({} bytes)", path.display(), bytes.len());
    println!("magic  = {:?}", std::str::from_utf8(&bytes[0..4]).unwrap());
    println!("dtype  = {} (0 = float32)", bytes[4]);
    println!("ndim   = {}", bytes[5]);
    let dims: Vec<u64> = (0..4)
        .map(|i| u64::from_le_bytes(bytes[6 + 8 * i..14 + 8 * i].try_into().unwrap()))
        .collect();
    println!("dims   = {dims:?}");

    let back = io::read_tensor_file(&path).unwrap();
    assert_eq!(back, t);
    assert_eq!(io::encode_tensor_f32(&back).unwrap(), bytes);
    println!("round trip reproduces the original bytes exactly");

    // Labels ride in the same container with a uint8 payload.
    let label_path = dir.join("label.dwf");
    io::write_label_file(&label_path, &[1, 2, 2], &[0, 3, 7, 14]).unwrap();
    let (shape, ids) = io::read_label_file(&label_path).unwrap();
    println!("label grid {shape:?} -> ids {ids:?}");

    // Corrupt magic gets a dedicated error.
    let mut bad = bytes.clone();
    bad[0..4].copy_from_slice(b"XXXX");
    let err = io::decode_tensor(&bad).unwrap_err();
    println!("corrupted header rejected: {err}");
}
