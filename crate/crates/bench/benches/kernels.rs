use std::hint::black_box;

use criterion::Criterion;
use usaid_core::data::generate_shapes_corpus;
use usaid_core::denoiser::Denoiser;
use usaid_core::metrics::{niqe_patch_features, ssim};
use usaid_core::tensor::{Conv3x3, FeatureMap};
use usaid_core::usa::UsaModule;

pub fn bench(c: &mut Criterion) {
    let img = generate_shapes_corpus(1, (64, 64), 6, 3).unwrap().items[0].image.clone();
    let x: FeatureMap<f32> = FeatureMap::from_vec(32, 48, 48, (0..32 * 48 * 48).map(|i| (i % 17) as f32 / 17.0).collect());
    let mut conv = Conv3x3::<f32>::zeros(32, 32, 1);
    conv.weight.iter_mut().enumerate().for_each(|(i, w)| *w = ((i % 7) as f32 - 3.0) * 0.01);

    let mut g = c.benchmark_group("kernels");
    g.bench_function("conv3x3_32ch_48x48", |b| b.iter(|| black_box(conv.forward(black_box(&x)))));
    let den = Denoiser::<f32>::init(7, 32, 3, 0).unwrap();
    let fm = img.to_feature_map::<f32>();
    g.bench_function("denoiser_forward_64x64", |b| b.iter(|| black_box(den.forward(black_box(&fm)))));
    let usa = UsaModule::<f32>::random(3, 64, 21, 0).unwrap();
    g.bench_function("usa_forward_64x64", |b| b.iter(|| black_box(usa.forward(black_box(&fm)))));
    g.bench_function("ssim_64x64", |b| b.iter(|| black_box(ssim(&img, &img).unwrap())));
    g.bench_function("niqe_features_64x64", |b| b.iter(|| black_box(niqe_patch_features(&img, 16).unwrap())));
    g.finish();
}
