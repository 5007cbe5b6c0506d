//! Complexity accounting. Expected totals come from `tests/oracles/bops_oracle.py`,
//! which rebuilds each architecture from its own layer tables.

use proptest::prelude::*;
use uniq_core::bops::{self, arch_catalog, model_bops, model_size, LayerShape};

fn total(arch: &str, bw: u32, ba: u32, qfl: bool) -> u128 {
    model_bops(&arch_catalog(arch).unwrap(), bw, ba, qfl)
        .unwrap()
        .total
}

#[test]
fn single_layer_examples() {
    let c = LayerShape::conv("c", 64, 64, 3, 1, false);
    assert_eq!(bops::layer_bops(&c, 32, 32).unwrap(), 40_476_672);
    let first = &arch_catalog("resnet18").unwrap()[0];
    assert_eq!(bops::layer_bops(first, 32, 32).unwrap(), 129_343_291_392);
}

#[test]
fn catalog_totals_match_the_oracle() {
    let cases: [(&str, u32, u32, bool, u128); 10] = [
        ("resnet18", 32, 32, false, 1_994_186_253_568),
        ("resnet18", 4, 8, true, 99_966_644_896),
        ("resnet18", 5, 8, true, 116_304_984_904),
        ("resnet18", 4, 8, false, 223_722_366_208),
        ("resnet34", 4, 8, true, 202_895_946_400),
        ("resnet34", 4, 32, true, 642_547_315_360),
        ("resnet50", 4, 8, true, 208_185_746_080),
        ("resnet50", 4, 32, true, 671_142_535_840),
        ("mobilenet_v1", 8, 8, true, 50_162_652_480),
        ("alexnet", 32, 32, false, 1_250_537_064_480),
    ];
    for (arch, bw, ba, qfl, want) in cases {
        assert_eq!(total(arch, bw, ba, qfl), want, "{arch} {bw}/{ba} qfl={qfl}");
    }
}

#[test]
fn catalog_sizes_and_params_match_the_oracle() {
    let size = |a: &str, bw, qfl| model_size(&arch_catalog(a).unwrap(), bw, qfl).unwrap();
    assert_eq!(size("resnet18", 32, false), 373_757_184);
    assert_eq!(size("resnet18", 4, true), 46_719_648);
    assert_eq!(size("resnet34", 4, true), 87_122_592);
    assert_eq!(size("resnet50", 4, true), 102_015_648);
    assert_eq!(size("mobilenet_v1", 8, true), 33_680_704);
    let params = |a: &str| {
        arch_catalog(a)
            .unwrap()
            .iter()
            .map(LayerShape::param_count)
            .sum::<u64>()
    };
    assert_eq!(params("resnet18"), 11_679_912);
    assert_eq!(params("resnet34"), 21_780_648);
    assert_eq!(params("resnet50"), 25_503_912);
    assert_eq!(params("mobilenet_v1"), 4_210_088);
    assert_eq!(params("alexnet"), 62_378_344);
}

#[test]
fn first_and_last_layers_stay_full_precision_by_default() {
    let r = model_bops(&arch_catalog("resnet18").unwrap(), 4, 8, false).unwrap();
    let n = r.layers.len();
    assert_eq!((r.layers[0].b_w, r.layers[0].b_a), (32, 32));
    assert_eq!((r.layers[n - 1].b_w, r.layers[n - 1].b_a), (32, 32));
    assert!(r.layers[1..n - 1].iter().all(|l| (l.b_w, l.b_a) == (4, 8)));
}

#[test]
fn diminishing_returns_at_low_bitwidths() {
    let arch = arch_catalog("resnet18").unwrap();
    let t = |b| model_bops(&arch, b, b, true).unwrap().total;
    let step_hi = t(32) - t(16);
    let step_lo = t(4) - t(2);
    assert!(step_lo * 20 < step_hi);
    // The accumulator term does not shrink with the bitwidth.
    let acc: u128 = arch
        .iter()
        .map(|l| l.macs() as u128 * bops::ceil_log2(l.fan_in()) as u128)
        .sum();
    assert!(t(1) > acc);
}

#[test]
fn csv_lists_every_layer() {
    let r = model_bops(&arch_catalog("mobilenet_v1").unwrap(), 8, 8, true).unwrap();
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), 1 + r.layers.len() + 2);
    let sum: u128 = csv
        .lines()
        .skip(1)
        .take(r.layers.len())
        .map(|l| l.split(',').nth(4).unwrap().parse::<u128>().unwrap())
        .sum();
    assert_eq!(sum, r.arithmetic);
}

#[test]
fn arch_file_matches_builtin() {
    let text: String = arch_catalog("alexnet")
        .unwrap()
        .iter()
        .map(|l| {
            format!(
                "{},{},{},{},{},{},{}\n",
                l.kind.name(),
                l.n,
                l.m,
                l.k,
                l.out_h,
                l.out_w,
                l.bias as u8
            )
        })
        .collect();
    let parsed = bops::parse_arch(&text).unwrap();
    assert_eq!(
        model_bops(&parsed, 4, 8, false).unwrap().total,
        total("alexnet", 4, 8, false)
    );
}

#[test]
fn accuracy_join() {
    let t = bops::accuracy_table("arch,b_w,b_a,accuracy\nresnet18,4,8,67.0\n", true).unwrap();
    assert_eq!(t.lines().nth(1).unwrap(), "resnet18,4,8,99.967,46.720,67");
    assert!(bops::accuracy_table("arch,b_w,b_a,accuracy\nvgg,4,8,1\n", true).is_err());
}

fn shape() -> impl Strategy<Value = LayerShape> {
    (1u64..64, 1u64..64, 1u64..6, 1u64..20, any::<bool>(), 0u8..3).prop_map(
        |(n, m, k, o, bias, kind)| match kind {
            0 => LayerShape::conv("c", n, m, k, o, bias),
            1 => LayerShape::depthwise("d", n, k, o, bias),
            _ => LayerShape::dense("f", n, m, bias),
        },
    )
}

proptest! {
    #[test]
    fn monotone_in_both_bitwidths(l in shape(), bw in 1u32..32, ba in 1u32..32) {
        let b = bops::layer_bops(&l, bw, ba).unwrap();
        prop_assert!(bops::layer_bops(&l, bw + 1, ba).unwrap() > b);
        prop_assert!(bops::layer_bops(&l, bw, ba + 1).unwrap() > b);
    }

    #[test]
    fn additive_over_layers(ls in prop::collection::vec(shape(), 1..8), bw in 1u32..9, ba in 1u32..9) {
        let r = model_bops(&ls, bw, ba, true).unwrap();
        let sum: u128 = ls.iter().map(|l| bops::layer_bops(l, bw, ba).unwrap()).sum();
        prop_assert_eq!(r.arithmetic, sum);
        let params: u64 = ls.iter().map(LayerShape::param_count).sum();
        prop_assert_eq!(r.memory_fetch, bops::memory_fetch_bops(params, bw));
        prop_assert_eq!(r.total, sum + r.memory_fetch);
    }
}
