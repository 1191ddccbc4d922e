use mmtts_demo::{Mel, Transport};

#[test]
fn tone_renders_as_rgba() {
    let mel = Mel::tone(180.0, 320.0, 0.5, 4).unwrap();
    assert_eq!(mel.n_mels(), 80);
    assert_eq!(mel.values().len(), mel.n_frames() * 80);
    let img = mel.render().unwrap();
    assert_eq!((img.width(), img.height()), (mel.n_frames() * 4, 160));
    let rgba = img.rgba();
    assert_eq!(rgba.len(), img.width() * img.height() * 4);
    assert!(rgba.chunks(4).all(|p| p[3] == 255));
}

#[test]
fn griffin_lim_gives_audio_of_the_right_length() {
    let mel = Mel::tone(220.0, 220.0, 0.5, 3).unwrap();
    let wav = mel.griffin_lim(16).unwrap();
    assert_eq!(mel.sample_rate(), 16_000);
    assert!((wav.len() as f64 - 8000.0).abs() <= 400.0, "{}", wav.len());
    assert!(wav.iter().all(|s| s.is_finite()));
    assert!(wav.iter().any(|s| s.abs() > 1e-3));
}

#[test]
fn bad_tone_requests_are_rejected() {
    assert!(Mel::tone(0.0, 200.0, 0.5, 1).is_err());
    assert!(Mel::tone(200.0, 200.0, 0.0, 1).is_err());
    assert!(Mel::tone(200.0, 200.0, 0.5, 0).is_err());
}

#[test]
fn transport_paths_move_noise_towards_the_modes() {
    let tr = Transport::train(400, 1, 11).unwrap();
    let (n, steps) = (200, 8);
    let p = tr.paths(n, steps, 5).unwrap();
    assert_eq!(p.len(), (steps + 1) * n * 2);
    assert_eq!(p, tr.paths(n, steps, 5).unwrap());
    let mean_abs_x = |pts: &[f64]| pts.chunks(2).map(|q| q[0].abs()).sum::<f64>() / n as f64;
    let start = mean_abs_x(&p[..2 * n]);
    let end = mean_abs_x(&p[p.len() - 2 * n..]);
    let target = mean_abs_x(&tr.target(n, 1));
    assert!(end > start + 0.5, "{start} -> {end}");
    assert!((end - target).abs() < 0.5, "{end} vs {target}");
    assert_eq!(tr.final_losses(50).len(), 1);
    assert!(tr.paths(n, 0, 5).is_err());
}
