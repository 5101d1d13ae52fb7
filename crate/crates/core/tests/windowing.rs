use coverforge_core::ingest::{window_audio, INTERNAL_SAMPLE_RATE, MIN_REMAINDER_S};
use coverforge_core::AudioClip;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Expected window lengths, in samples, computed directly from the rule.
fn expected_lengths(n: usize, win: usize, min_rem: usize) -> Vec<usize> {
    if n < win {
        return vec![n];
    }
    let mut lens = vec![win; n / win];
    let rem = n % win;
    if rem >= min_rem {
        lens.push(rem);
    } else if rem > 0 {
        *lens.last_mut().unwrap() += rem;
    }
    lens
}

#[test]
fn windows_partition_clip_and_merge_short_tails() {
    let rate = INTERNAL_SAMPLE_RATE as usize;
    let min_rem = (MIN_REMAINDER_S * rate as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..1000 {
        // 1 s to 3 min, with tails often landing near the merge threshold
        let n = if case % 3 == 0 {
            rng.gen_range(1..=18) * 10 * rate + rng.gen_range(0..3 * rate)
        } else {
            rng.gen_range(rate..180 * rate)
        };
        let window_s = if case % 5 == 0 { rng.gen_range(3.0..20.0) } else { 10.0 };
        let win = (window_s * rate as f64).round() as usize;
        let clip = AudioClip::new(vec![0.0; n], INTERNAL_SAMPLE_RATE).unwrap();
        let windows = window_audio(&clip, window_s).unwrap();

        assert_eq!(windows.first().unwrap().start_sample, 0);
        assert_eq!(windows.last().unwrap().end_sample, n);
        for pair in windows.windows(2) {
            assert_eq!(pair[0].end_sample, pair[1].start_sample, "gap or overlap");
            assert_eq!(pair[0].end_s, pair[1].start_s);
        }
        for (i, w) in windows.iter().enumerate() {
            assert_eq!(w.index, i);
            assert_eq!(w.samples.len(), w.end_sample - w.start_sample);
        }
        let lens: Vec<usize> = windows.iter().map(|w| w.samples.len()).collect();
        assert_eq!(lens, expected_lengths(n, win, min_rem), "n={n} window={window_s}");
        if windows.len() > 1 {
            assert!(*lens.last().unwrap() >= min_rem, "short tail was not merged");
        }
    }
}

#[test]
fn exact_multiples_and_boundary_tails() {
    let rate = INTERNAL_SAMPLE_RATE as usize;
    let count = |n: usize| {
        let clip = AudioClip::new(vec![0.0; n], INTERNAL_SAMPLE_RATE).unwrap();
        window_audio(&clip, 10.0).unwrap().len()
    };
    assert_eq!(count(60 * rate), 6);
    assert_eq!(count(61 * rate), 6, "1 s tail merges");
    assert_eq!(count(62 * rate - 1), 6, "just under 2 s merges");
    assert_eq!(count(62 * rate), 7, "2 s tail stands alone");
    assert_eq!(count(5 * rate), 1);
}
