//! Structural properties of the separable network.

use sepseg_core::rng::{self, Rng};
use sepseg_core::sepnet::{
    build_sepnet, build_unet_baseline, load_checkpoint, param_count, save_checkpoint,
};
use sepseg_core::tensor::Tape;
use sepseg_core::{NetworkSpec, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random::<f64>()).collect()).unwrap()
}

#[test]
fn pooling_trace_keeps_the_slice_axis() {
    let spec = NetworkSpec::sepnet(3, 2, 4);
    let m = build_sepnet::<f64>(&spec, 1).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(random(&[1, 1, 5, 16, 16], 2), false);
    let pv: Vec<_> = m
        .params()
        .iter()
        .map(|p| tape.leaf(p.value.clone(), false))
        .collect();
    let out = m.record(&mut tape, x, &pv).unwrap();
    assert_eq!(tape.value(out).shape(), &[1, 3, 5, 16, 16]);
    // activations are the 5-axis values with a batch of one; weights have Cout first
    let activations: Vec<&[usize]> = tape
        .values()
        .map(|t| t.shape())
        .filter(|s| s.len() == 5 && s[0] == 1)
        .collect();
    assert!(activations.iter().all(|s| s[2] == 5), "{activations:?}");
    assert_eq!(activations.iter().map(|s| s[4]).min(), Some(2));
}

#[test]
fn one_block_sees_three_slices() {
    // the four convolutions of a block applied to a one-slice impulse
    let m = build_sepnet::<f64>(&NetworkSpec::sepnet(2, 2, 1), 4).unwrap();
    let weight = |name: &str| m.param(name).unwrap().value.clone();
    let mut impulse = Tensor::zeros(&[1, 1, 9, 6, 6]);
    impulse.data_mut()[4 * 36 + 14] = 1.0;
    let mut tape = Tape::new();
    let mut h = tape.leaf(impulse, false);
    for k in 1..=4 {
        let w = tape.leaf(weight(&format!("enc0.b0.conv{k}.weight")), false);
        h = tape.conv3d(h, w, None).unwrap();
        // squash signs so cancellations cannot hide support
        h = tape.powf(h, 2.0);
    }
    let y = tape.value(h);
    let touched: Vec<usize> = (0..9)
        .filter(|&z| (0..2).any(|c| (0..36).any(|i| y.data()[(c * 9 + z) * 36 + i] != 0.0)))
        .collect();
    assert_eq!(touched, vec![3, 4, 5]);
}

#[test]
fn separable_layers_are_anisotropic() {
    let m = build_sepnet::<f32>(&NetworkSpec::sepnet(4, 8, 3), 0).unwrap();
    for p in m.params() {
        let s = p.value.shape();
        if p.name.ends_with(".weight") && s.len() == 5 {
            let k = [s[2], s[3], s[4]];
            assert!(
                k == [1, 3, 3] || k == [3, 1, 1] || k == [1, 1, 1],
                "{} has kernel {k:?}",
                p.name
            );
        }
    }
    let inter = m
        .params()
        .iter()
        .filter(|p| p.name.ends_with("conv4.weight"))
        .count();
    assert_eq!(inter, m.spec().total_blocks());
}

#[test]
fn param_count_matches_named_tensors() {
    for spec in [NetworkSpec::sepnet(3, 4, 2), NetworkSpec::unet(5, 3, 3)] {
        let m = build_unet_baseline::<f32>(&spec, 0).unwrap();
        let sum: usize = m.params().iter().map(|p| p.value.numel()).sum();
        assert_eq!(m.param_count(), sum);
        assert_eq!(param_count(m.spec()).unwrap(), sum);
        let mut names: Vec<&str> = m.params().iter().map(|p| p.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), m.params().len());
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_unet_baseline::<f32>(&NetworkSpec::unet(3, 4, 2), 9).unwrap();
    let p = dir.path().join("m.ckpt");
    save_checkpoint(&m, &p).unwrap();
    let back = load_checkpoint::<f32>(&p).unwrap();
    let x = random(&[1, 1, 2, 4, 4], 1).cast::<f32>();
    assert_eq!(m.infer(&x).unwrap(), back.infer(&x).unwrap());
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[..4], b"SEPN");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
}
