//! Reads checkpoints with an independent decoder written from the documented
//! byte layout.

use vitforge_core::checkpoint::{fnv1a64, Checkpoint};
use vitforge_core::train::{adamw_step, AdamWConfig, AdamWState};
use vitforge_core::vit::count_parameters;
use vitforge_core::{ModelParams, Rng, Tensor, ViTConfig};

struct Cursor<'a>(&'a [u8], usize);

impl Cursor<'_> {
    fn bytes(&mut self, n: usize) -> &[u8] {
        let s = &self.0[self.1..self.1 + n];
        self.1 += n;
        s
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.bytes(8).try_into().unwrap())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.bytes(4).try_into().unwrap())
    }
    fn tensor(&mut self) -> (String, Vec<u64>, Vec<f32>) {
        let n = self.u32() as usize;
        let name = String::from_utf8(self.bytes(n).to_vec()).unwrap();
        let rank = self.u64() as usize;
        let dims: Vec<u64> = (0..rank).map(|_| self.u64()).collect();
        assert_eq!(self.bytes(1), [1]);
        let len = self.u64() as usize;
        assert_eq!(len as u64, 4 * dims.iter().product::<u64>());
        let data = self
            .bytes(len)
            .chunks(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        (name, dims, data)
    }
}

fn sample() -> Checkpoint {
    let config = ViTConfig::tiny(2);
    let mut params = ModelParams::<f32>::init(&config, &mut Rng::new(8)).unwrap();
    let mut state = AdamWState::new(AdamWConfig::default());
    let grads = params
        .iter()
        .map(|(n, p)| (n.to_string(), Tensor::full(p.tensor.shape(), -0.25f32)))
        .collect();
    adamw_step(&mut params, &grads, &mut state).unwrap();
    Checkpoint {
        config,
        params,
        optimizer: Some(state),
    }
}

#[test]
fn layout_matches_documentation() {
    let ckpt = sample();
    let bytes = ckpt.encode();
    let mut c = Cursor(&bytes, 0);
    assert_eq!(c.bytes(4), b"VITC");
    assert_eq!(c.u32(), 1);
    let fields: Vec<u64> = (0..8).map(|_| c.u64()).collect();
    assert_eq!(fields, [32, 3, 16, 32, 64, 2, 2, 2]);
    let count = c.u64() as usize;
    assert_eq!(count, ckpt.params.len());
    let mut names = Vec::new();
    let mut total = 0;
    for _ in 0..count {
        let (name, dims, data) = c.tensor();
        let expected = ckpt.params.tensor(&name).unwrap();
        assert_eq!(dims.iter().map(|&d| d as usize).collect::<Vec<_>>(), expected.shape());
        assert_eq!(data, expected.data());
        total += data.len();
        names.push(name);
    }
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
    assert_eq!(total, count_parameters(&ckpt.params, false));

    assert_eq!(c.bytes(1), [1]);
    assert_eq!(c.u64(), 1);
    let hyper: Vec<f64> = (0..5).map(|_| f64::from_bits(c.u64())).collect();
    assert_eq!(hyper, [2e-5, 0.9, 0.999, 1e-8, 0.01]);
    let moments = c.u64() as usize;
    assert_eq!(moments, 2 * count);
    for i in 0..moments {
        let (name, _, _) = c.tensor();
        let prefix = if i < count { "m/" } else { "v/" };
        assert!(name.starts_with(prefix), "{name}");
    }
    let body_end = c.1;
    assert_eq!(c.u64(), fnv1a64(&bytes[..body_end]));
    assert_eq!(c.1, bytes.len());
}

#[test]
fn reencoding_a_loaded_file_is_byte_identical() {
    let bytes = sample().encode();
    assert_eq!(Checkpoint::decode(&bytes).unwrap().encode(), bytes);
}
