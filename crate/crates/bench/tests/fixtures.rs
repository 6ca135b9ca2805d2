use vividtoy::net::{NetConfig, Partition};
use vividtoy_bench::{clips, full_params, latent};

#[test]
fn fixtures_have_the_benchmarked_shapes() {
    let cfg = NetConfig::default();
    let p = full_params(&cfg);
    assert!(p.num_scalars(Partition::FrozenBackbone) > 0);
    assert!(p.num_scalars(Partition::TrainableControl) > 0);
    assert_eq!(latent(0, [2, 12, 4, 4]).shape(), [2, 12, 4, 4]);
    let c = clips(2);
    assert_eq!(c.len(), 2);
    assert_eq!((c[0].video.height(), c[0].video.width()), (32, 32));
}
