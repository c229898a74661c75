use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unerf::io::{read_checkpoint, RunConfig};
use unerf::scene::{make_dataset, SceneOracle};
use unerf::trainer::{render_rays, RenderMode};

fn main() {
    let cfg = RunConfig::default();
    let scene = SceneOracle::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.dataset_seed);
    let ds = make_dataset(&scene, cfg.n_cameras, cfg.image_size, &mut rng, &cfg.dataset).unwrap();
    let (prop, nerf, _, _) = read_checkpoint(std::path::Path::new("/tmp/full_desk_run/checkpoint.bin")).unwrap();
    for cam in [0usize, 1] {
        let rays = ds.camera_rays(cam).unwrap();
        let renders = render_rays(&prop, &nerf, &cfg.train, &rays, RenderMode::Eval).unwrap();
        // Row-averaged luminance of render vs gt, and depth stats.
        println!("camera {cam}:");
        for row in [8, 24, 40, 56] {
            let mut r_lum = 0.0; let mut g_lum = 0.0; let mut d_mean = 0.0;
            for px in 0..64 {
                let i = row * 64 + px;
                r_lum += (renders[i].rgb[0] + renders[i].rgb[1] + renders[i].rgb[2]) / 3.0;
                let gt = ds.images[cam].pixels[i];
                g_lum += (gt[0] + gt[1] + gt[2]) / 3.0;
                d_mean += renders[i].median_depth;
            }
            println!("  row {row}: render lum {:.3} gt lum {:.3} mean depth {:.2}", r_lum / 64.0, g_lum / 64.0, d_mean / 64.0);
        }
        let se: f64 = renders.iter().zip(&ds.images[cam].pixels).map(|(r, g)| {
            (0..3).map(|c| (r.rgb[c] - g[c]).powi(2)).sum::<f64>()
        }).sum::<f64>() / (3.0 * renders.len() as f64);
        println!("  mse {:.5} psnr {:.2}", se, -10.0 * se.log10());
    }
}
