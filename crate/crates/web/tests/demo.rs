use pmfs_core::cost::{count_params, pmfs_attention_macs};
use pmfs_core::metrics::{evaluate, LabelVolume};
use pmfs_core::model::{PmfsNet, ScalingConfig};
use pmfs_core::synthetic::disk_mask;
use pmfs_web::{blob_mask, cost_json, metrics_json, scaling_json};

#[test]
fn cost_matches_library_and_parts_sum() {
    let v = cost_json("tiny-3d", "").unwrap();
    let net = PmfsNet::build(&ScalingConfig::resolve("tiny-3d").unwrap(), 0).unwrap();
    assert_eq!(v["params"].as_u64().unwrap(), count_params(&net).unwrap().total_params());
    assert_eq!(v["input"], serde_json::json!([160, 160, 96]));
    let parts = v["parts"].as_array().unwrap();
    let sum = |k: &str| parts.iter().map(|p| p[k].as_u64().unwrap()).sum::<u64>();
    assert_eq!(sum("params"), v["params"].as_u64().unwrap());
    assert_eq!(sum("macs"), v["macs"].as_u64().unwrap());
    assert_eq!(v["param_target"]["pass"], true);
    assert_eq!(v["flop_target"]["pass"], true);

    let other = cost_json("tiny-3d", "80x80x48").unwrap();
    assert!(other["flop_target"].is_null());
    assert!(other["macs"].as_u64().unwrap() < v["macs"].as_u64().unwrap());

    let toml = ScalingConfig::resolve("small-2d").unwrap().to_toml();
    assert_eq!(cost_json(&toml, "").unwrap()["name"], "small");
    assert!(cost_json("tiny-3d", "15x16x16").is_err());
    assert!(cost_json("mega-2d", "").is_err());
}

#[test]
fn scaling_rows_follow_the_formulas() {
    let v = scaling_json(48, &[100, 200, 400]).unwrap();
    let rows = v.as_array().unwrap();
    for w in rows.windows(2) {
        assert_eq!(w[1]["pmfs"].as_u64().unwrap(), 2 * w[0]["pmfs"].as_u64().unwrap());
        assert_eq!(w[1]["full"].as_u64().unwrap(), 4 * w[0]["full"].as_u64().unwrap());
    }
    assert_eq!(rows[0]["pmfs"].as_u64().unwrap(), pmfs_attention_macs(48, 100));
    assert_eq!(rows[0]["full"].as_u64().unwrap(), 2 * 100 * 100 * 48);
    assert!(scaling_json(0, &[4]).is_err());
    assert!(scaling_json(4, &[]).is_err());
}

#[test]
fn painted_masks_score_like_the_library() {
    let a = disk_mask([24, 32], [11.0, 15.0], 6.0);
    let b = disk_mask([24, 32], [12.0, 17.0], 5.0);
    let v = metrics_json(32, 24, &a, &b, 1.0).unwrap();
    let want = evaluate(&LabelVolume::unit(vec![24, 32], a.clone()).unwrap(), &LabelVolume::unit(vec![24, 32], b).unwrap(), 2, 1.0).unwrap();
    assert_eq!(v["dsc"].as_f64().unwrap(), want.dsc);
    assert_eq!(v["hd"].as_f64().unwrap(), want.hd.unwrap());
    assert_eq!(v["so"].as_f64().unwrap(), want.so.unwrap());

    let same = metrics_json(32, 24, &a, &a, 1.0).unwrap();
    assert_eq!((same["dsc"].as_f64(), same["hd"].as_f64()), (Some(1.0), Some(0.0)));
    let empty = metrics_json(32, 24, &vec![0; 768], &a, 1.0).unwrap();
    assert!(empty["hd"].is_null() && empty["assd"].is_null());
    assert!(metrics_json(32, 24, &a[1..], &a, 1.0).is_err());
}

#[test]
fn blobs_are_seeded() {
    let a = blob_mask(40, 30, 3).unwrap();
    assert_eq!(a.len(), 1200);
    assert_eq!(a, blob_mask(40, 30, 3).unwrap());
    assert_ne!(a, blob_mask(40, 30, 4).unwrap());
    assert!(a.iter().any(|&v| v == 1) && a.iter().all(|&v| v <= 1));
}
