use evdeblur_bench::{rand_tensor, random_stream, toy_scene};

#[test]
fn bench_inputs_are_deterministic_and_valid() {
    assert_eq!(rand_tensor(&[2, 3], 9), rand_tensor(&[2, 3], 9));
    let s = random_stream(16, 8, 500, 1);
    assert_eq!(s.len(), 500);
    assert_eq!(s, random_stream(16, 8, 500, 1));
    let pack = toy_scene(2);
    assert_eq!((pack.blur.width(), pack.blur.height()), (64, 64));
    assert!(!pack.events.is_empty());
}
