//! Hand-crafted kFP features over a (possibly empty) packet prefix.
//!
//! Layout of the 26-element vector:
//!
//! | index | feature |
//! |-------|---------|
//! | 0 | incoming count |
//! | 1 | outgoing count |
//! | 2 | total count |
//! | 3 | incoming / outgoing (0 when no outgoing packets) |
//! | 4 | duration, last minus first timestamp |
//! | 5..9 | outgoing inter-arrival mean, std, min, max |
//! | 9..13 | incoming inter-arrival mean, std, min, max |
//! | 13, 14 | outgoing, incoming among the first 30 packets |
//! | 15, 16 | outgoing, incoming among the last 30 packets |
//! | 17..26 | cumulative direction sum at deciles 0.1 ..= 0.9 |
//!
//! Inter-arrival statistics of a direction with fewer than two packets are
//! zero; the standard deviation is the population one. The decile `q` reads
//! the running sum at packet index `ceil(q * N) - 1`.

use crate::trace::{Direction, Packet};

pub const N_FEATURES: usize = 26;
const EDGE_WINDOW: usize = 30;

fn iat_stats(times: &[f64]) -> [f64; 4] {
    if times.len() < 2 {
        return [0.0; 4];
    }
    let gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let var = gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / n;
    let min = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    let max = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [mean, var.sqrt(), min, max]
}

fn direction_counts(packets: &[Packet]) -> (f64, f64) {
    let out = packets.iter().filter(|p| p.direction == Direction::Out).count();
    (out as f64, (packets.len() - out) as f64)
}

pub fn extract_kfp_features(packets: &[Packet]) -> Vec<f64> {
    let mut f = vec![0.0; N_FEATURES];
    let n = packets.len();
    if n == 0 {
        return f;
    }
    let (n_out, n_in) = direction_counts(packets);
    f[0] = n_in;
    f[1] = n_out;
    f[2] = n as f64;
    f[3] = if n_out > 0.0 { n_in / n_out } else { 0.0 };
    f[4] = packets[n - 1].time - packets[0].time;

    let out_times: Vec<f64> = packets
        .iter()
        .filter(|p| p.direction == Direction::Out)
        .map(|p| p.time)
        .collect();
    let in_times: Vec<f64> = packets
        .iter()
        .filter(|p| p.direction == Direction::In)
        .map(|p| p.time)
        .collect();
    f[5..9].copy_from_slice(&iat_stats(&out_times));
    f[9..13].copy_from_slice(&iat_stats(&in_times));

    let w = EDGE_WINDOW.min(n);
    let (o, i) = direction_counts(&packets[..w]);
    f[13] = o;
    f[14] = i;
    let (o, i) = direction_counts(&packets[n - w..]);
    f[15] = o;
    f[16] = i;

    let mut running = Vec::with_capacity(n);
    let mut sum = 0i64;
    for p in packets {
        sum += p.direction.sign() as i64;
        running.push(sum as f64);
    }
    for d in 1..=9 {
        let q = d as f64 / 10.0;
        let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
        f[16 + d] = running[idx];
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_prefix_is_zero() {
        assert_eq!(extract_kfp_features(&[]), vec![0.0; N_FEATURES]);
    }

    #[test]
    fn two_packets() {
        let f = extract_kfp_features(&[Packet::new(0.0, Direction::Out), Packet::new(0.1, Direction::In)]);
        assert_eq!(&f[..5], &[1.0, 1.0, 2.0, 1.0, 0.1]);
        assert_eq!(&f[5..13], &[0.0; 8]);
        assert_eq!(&f[13..17], &[1.0, 1.0, 1.0, 1.0]);
        // Running sums are [1, 0]; deciles 0.1..0.5 read index 0, the rest index 1.
        assert_eq!(&f[17..], &[1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
