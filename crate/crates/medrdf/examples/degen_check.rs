// quick empirical check of argmax skew across seeds
fn main() {
    for seed in [0u64, 1, 2, 3, 123, 999, 5555] {
        let net = medrdf::classifier::SmallNet::new((1, 8, 8), 3, seed).unwrap();
        let mut counts = [0usize; 3];
        for i in 0..1000u64 {
            let mut rng = medrdf::tensor::SeededStream::new(10_000 + i, 0).rng();
            use rand::Rng;
            let data: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
            let x = medrdf::tensor::ImageTensor::from_vec(1, 8, 8, data).unwrap();
            counts[medrdf::classifier::predict_label(&net, &x).unwrap()] += 1;
        }
        println!("seed {seed}: {counts:?}");
    }
}
