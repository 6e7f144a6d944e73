#![no_main]
use dense_fpn::autodiff::ParamStore;
use dense_fpn::io::{decode_weights, load_weights_into};
use dense_fpn::Tensor;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = decode_weights(data);
    let mut store = ParamStore::<f32>::new();
    store.add("conv.weight", Tensor::zeros(&[2, 1, 1, 1])).expect("fresh name");
    store.add("conv.bias", Tensor::zeros(&[2])).expect("fresh name");
    let _ = load_weights_into(&mut store, data);
});
