use std::path::Path;

use proptest::prelude::*;
use tdunet::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use tdunet::data::tensor_file::{decode_tensor, encode_tensor};
use tdunet::data::{generate_synthetic, read_tensor, write_tensor, ChannelRole, Manifest, Split, SynthConfig};
use tdunet::eval::render_confusion_image;
use tdunet::network::{Branches, NetworkConfig};
use tdunet::preprocess::{NormStats, PreprocessConfig, Preprocessor};
use tdunet::{ModelParams, Tensor};

const GOLDEN_PPM: &[u8] = include_bytes!("golden/confusion_2x2.ppm");

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(prop::num::f32::ANY, n).prop_map(move |v| Tensor::from_vec(&shape, v).unwrap())
    })
}

fn preprocessor(channels: usize) -> Preprocessor {
    let mut roles = vec![ChannelRole::PrefireMask];
    roles.resize(channels, ChannelRole::Elevation);
    Preprocessor::new(PreprocessConfig::default(), roles, NormStats::identity(channels)).unwrap()
}

proptest! {
    #[test]
    fn tensor_file_roundtrip_is_bit_exact(t in tensor_strategy()) {
        let back = decode_tensor(&encode_tensor(&t), Path::new("mem")).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn truncation_is_always_detected(t in tensor_strategy(), cut in 1usize..4) {
        let bytes = encode_tensor(&t);
        let err = decode_tensor(&bytes[..bytes.len() - cut], Path::new("mem")).unwrap_err();
        prop_assert_eq!(err.code(), "E_TRUNCATED");
    }
}

#[test]
fn tensor_file_layout() {
    let t = Tensor::from_vec(&[1, 1, 2], vec![1.0, -2.5]).unwrap();
    let bytes = encode_tensor(&t);
    let header = br#"{"dtype":"f32","shape":[1,1,2],"byte_order":"little-endian"}"#;
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(&bytes[header.len()..header.len() + 2], b"\n\0");
    assert_eq!(&bytes[header.len() + 2..header.len() + 6], &1.0f32.to_le_bytes());
    assert_eq!(bytes.len(), header.len() + 2 + 8);
}

#[test]
fn corrupt_tensor_files_map_to_distinct_codes() {
    let good = encode_tensor(&Tensor::zeros(&[2, 2]));
    let mut extra = good.clone();
    extra.extend_from_slice(&[0; 4]);
    assert_eq!(decode_tensor(&extra, Path::new("x")).unwrap_err().code(), "E_LENGTH");
    let mut no_sentinel = good.clone();
    let nl = no_sentinel.iter().position(|&b| b == b'\n').unwrap();
    no_sentinel[nl + 1] = 7;
    assert_eq!(decode_tensor(&no_sentinel, Path::new("x")).unwrap_err().code(), "E_HEADER");
    let f64_header = br#"{"dtype":"f64","shape":[1],"byte_order":"little-endian"}"#.to_vec();
    let mut bad_dtype = f64_header;
    bad_dtype.extend_from_slice(b"\n\0\0\0\0\0\0\0\0\0");
    assert_eq!(decode_tensor(&bad_dtype, Path::new("x")).unwrap_err().code(), "E_HEADER");
    assert_eq!(decode_tensor(b"garbage", Path::new("x")).unwrap_err().code(), "E_HEADER");
}

#[test]
fn tensor_file_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.tdt");
    let t = Tensor::from_vec(&[2, 3], vec![0.5, f32::MIN_POSITIVE, -0.0, 1e30, -7.0, 3.25]).unwrap();
    write_tensor(&path, &t).unwrap();
    assert_eq!(read_tensor(&path).unwrap(), t);
    let err = read_tensor(&dir.path().join("missing.tdt")).unwrap_err();
    assert_eq!(err.code(), "E_IO");
}

#[test]
fn confusion_render_matches_golden_bytes() {
    let pred = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let target = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let img = render_confusion_image(&pred, &target, None).unwrap();
    assert_eq!(img.to_ppm(), GOLDEN_PPM);
}

#[test]
fn checkpoint_roundtrip_restores_every_tensor() {
    for cfg in [NetworkConfig::ht_unet(2, 3, 16), NetworkConfig::new(Branches::HtDct, 2, 3, 16)] {
        let params = ModelParams::build(&cfg, 11).unwrap();
        let pre = preprocessor(3);
        let bytes = encode_checkpoint(&params, &pre);
        let ck = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ck.params, params);
        assert_eq!(ck.preprocessor, pre);
        // Encoding is a pure function of the parameters.
        assert_eq!(encode_checkpoint(&ck.params, &ck.preprocessor), bytes);
    }
}

#[test]
fn checkpoint_on_disk_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let params = ModelParams::build(&NetworkConfig::td_fusion(2, 2, 16), 3).unwrap();
    save_checkpoint(&path, &params, &preprocessor(2)).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().params, params);

    let bytes = std::fs::read(&path).unwrap();
    let p = Path::new("bad");
    assert_eq!(decode_checkpoint(&bytes[..bytes.len() - 4], p).unwrap_err().code(), "E_CHECKPOINT");
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert_eq!(decode_checkpoint(&magic, p).unwrap_err().code(), "E_CHECKPOINT");
    let mut version = bytes;
    version[8] = 9;
    assert_eq!(decode_checkpoint(&version, p).unwrap_err().code(), "E_CHECKPOINT");
}

#[test]
fn synthetic_manifest_roundtrips_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        samples: 20,
        resolution: 16,
        ..SynthConfig::default()
    };
    let m = generate_synthetic(&cfg, dir.path()).unwrap();
    let loaded = Manifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded, m);
    assert_eq!(loaded.split_indices(Split::Train).len(), 16);
    assert_eq!(loaded.split_indices(Split::Val).len(), 2);
    assert_eq!(loaded.split_indices(Split::Test).len(), 2);
    for s in &loaded.samples {
        let x = read_tensor(&loaded.resolve(&s.input)).unwrap();
        let y = read_tensor(&loaded.resolve(&s.target)).unwrap();
        assert_eq!(x.shape(), [4, 16, 16]);
        assert_eq!(y.shape(), [1, 16, 16]);
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 1.0 || v == -1.0));
    }

    let again = tempfile::tempdir().unwrap();
    let m2 = generate_synthetic(&cfg, again.path()).unwrap();
    for (a, b) in m.samples.iter().zip(&m2.samples) {
        assert_eq!(a.split, b.split);
        assert_eq!(
            std::fs::read(m.resolve(&a.input)).unwrap(),
            std::fs::read(m2.resolve(&b.input)).unwrap()
        );
    }
}

#[test]
fn manifest_validation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        samples: 10,
        resolution: 16,
        ..SynthConfig::default()
    };
    let m = generate_synthetic(&cfg, dir.path()).unwrap();
    let mut dup = m.clone();
    dup.samples[1].id = dup.samples[0].id.clone();
    assert_eq!(dup.validate().unwrap_err().code(), "E_CONFIG");
    let mut roles = m.clone();
    roles.channel_roles.pop();
    assert_eq!(roles.validate().unwrap_err().code(), "E_CONFIG");
    let path = dir.path().join("broken.json");
    std::fs::write(&path, "{ not json").unwrap();
    assert_eq!(Manifest::load(&path).unwrap_err().code(), "E_PARSE");
    assert!(generate_synthetic(&SynthConfig { samples: 9, ..cfg }, dir.path()).is_err());
}
